import dataclasses
import math

import numpy as np
import pytest

from ksoftmax import data, training
from ksoftmax.errors import DivergenceDetected
from ksoftmax.kernels import KernelSpec
from ksoftmax.training import (TrainConfig, clip_gradients, grid_search,
                               init_state, load_checkpoint, named_tensors,
                               save_checkpoint, train, train_step, train_steps)

V = 12


def make_config(**kw):
    base = dict(components=(KernelSpec("lin"),), n=2, d=4, d_e=4,
                batch_size=8, learning_rate=1e-2, max_epochs=2, seed=0,
                rho=0.0)
    base.update(kw)
    return TrainConfig(**base)


def toy_split(n_tokens=400, seed=0):
    lines = data.generate_zipf(V - 2, n_tokens, seed=seed)
    vocab, split = data.prepare_corpus(lines, max_size=V, seed=seed)
    assert vocab.V <= V
    return split


def snapshot(state):
    return {name: t.copy() for name, t in named_tensors(state)}


class TestTrainStep:
    def test_zero_learning_rate_leaves_parameters_unchanged(self):
        split = toy_split()
        state = init_state(make_config(learning_rate=0.0, optimizer="sgd"), V)
        before = snapshot(state)
        train_steps(state, split, 3)
        after = dict(named_tensors(state))
        for name in before:
            assert np.array_equal(before[name], after[name]), name

    def test_step_changes_every_tensor(self):
        split = toy_split()
        state = init_state(make_config(
            components=(KernelSpec("lin"), KernelSpec("pow"))), V)
        before = snapshot(state)
        train_steps(state, split, 5)
        after = dict(named_tensors(state))
        for name in before:
            assert not np.array_equal(before[name], after[name]), name

    def test_identical_seeds_produce_identical_traces(self):
        split = toy_split()
        runs = []
        for _ in range(2):
            state = init_state(make_config(seed=3), V)
            losses = []
            for windows, targets in data.batch_windows(
                    split.train, 2, 8, seed=3):
                losses.append(train_step(state, windows, targets)[0])
            runs.append((losses, snapshot(state)))
        assert runs[0][0] == runs[1][0]
        for name in runs[0][1]:
            assert np.array_equal(runs[0][1][name], runs[1][1][name])

    def test_loss_decreases_on_average(self):
        split = toy_split(2000)
        state = init_state(make_config(), V)
        losses = []
        for _ in range(3):
            for windows, targets in data.batch_windows(
                    split.train, 2, 8, seed=0, epoch=state.epoch):
                losses.append(train_step(state, windows, targets)[0])
            state.epoch += 1
            state.step_in_epoch = 0
        k = len(losses) // 4
        assert np.mean(losses[-k:]) < np.mean(losses[:k])


class TestClipping:
    def test_norm_after_clipping(self):
        rng = np.random.default_rng(0)
        grads = {"a": rng.normal(size=(5, 5)) * 100,
                 "b": rng.normal(size=7) * 100}
        pre = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
        reported = clip_gradients(grads, clip_norm=5.0)
        post = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
        assert reported == pytest.approx(pre, rel=1e-12)
        assert post == pytest.approx(5.0, rel=1e-12)

    def test_small_gradients_untouched(self):
        grads = {"a": np.array([0.1, -0.2])}
        before = grads["a"].copy()
        clip_gradients(grads, clip_norm=5.0)
        assert np.array_equal(grads["a"], before)


class TestCheckpoint:
    @pytest.mark.parametrize("components", [
        (KernelSpec("lin"),),
        (KernelSpec("ssg"), KernelSpec("mog"), KernelSpec("hpb")),
    ])
    def test_resume_is_bit_exact(self, tmp_path, components):
        split = toy_split()
        config = make_config(components=components)

        state = init_state(config, V)
        train_steps(state, split, 7)
        save_checkpoint(state, tmp_path / "mid.ckpt")
        train_steps(state, split, 6)
        uninterrupted = snapshot(state)

        resumed = load_checkpoint(tmp_path / "mid.ckpt")
        train_steps(resumed, split, 6)
        recovered = snapshot(resumed)

        assert uninterrupted.keys() == recovered.keys()
        for name in uninterrupted:
            assert np.array_equal(uninterrupted[name], recovered[name]), name
        assert state.step == resumed.step
        assert state.opt_t == resumed.opt_t

    def test_round_trip_preserves_config(self, tmp_path):
        config = make_config(rho=0.25, optimizer="sgd",
                             components=(KernelSpec("rbf", gamma=0.5),
                                         KernelSpec("wav", a=2.0)))
        state = init_state(config, V)
        save_checkpoint(state, tmp_path / "a.ckpt")
        loaded = load_checkpoint(tmp_path / "a.ckpt")
        assert loaded.config == config
        assert loaded.mixture.V == V


class TestTrainLoop:
    def test_writes_artifacts_and_metric_columns(self, tmp_path):
        split = toy_split()
        best, metrics = train(make_config(max_epochs=2), split, V,
                              out_dir=tmp_path)
        assert (tmp_path / "metrics.csv").exists()
        assert (tmp_path / "best.ckpt").exists()
        assert (tmp_path / "last.ckpt").exists()
        header = (tmp_path / "metrics.csv").read_text().splitlines()[0]
        assert header == "epoch,train_loss,dev_ppl,pi_mean_1,reg_term"
        assert len(metrics) == 2
        assert all(math.isfinite(row["dev_ppl"]) for row in metrics)

    def test_early_stopping(self):
        split = toy_split(300)
        config = make_config(max_epochs=50, patience=2, learning_rate=0.0,
                             optimizer="sgd")
        _, metrics = train(config, split, V)
        # dev PPL never improves after epoch 1, so training stops early
        assert len(metrics) <= 1 + 2

    def test_best_state_has_lowest_dev_ppl(self):
        split = toy_split()
        best, metrics = train(make_config(max_epochs=3), split, V)
        assert best.best_dev_ppl == pytest.approx(
            min(row["dev_ppl"] for row in metrics))

    def test_divergence_saves_last_finite_checkpoint(self, tmp_path):
        split = toy_split()
        config = make_config(learning_rate=1e8, optimizer="sgd",
                             clip_norm=1e300, max_epochs=3,
                             components=(KernelSpec("pol", p=3),))
        with pytest.raises(DivergenceDetected), np.errstate(over="ignore"):
            train(config, split, V, out_dir=tmp_path)
        assert (tmp_path / "last.ckpt").exists()
        recovered = load_checkpoint(tmp_path / "last.ckpt")
        for _, t in named_tensors(recovered):
            assert np.all(np.isfinite(t))


class TestGridSearch:
    def test_singleton_grid(self, tmp_path):
        split = toy_split()
        results = grid_search(make_config(max_epochs=1),
                              {"learning_rate": [1e-2]}, split, V,
                              out_dir=tmp_path)
        assert len(results) == 1
        assert results[0]["rank"] == 1
        assert (tmp_path / "grid_results.csv").exists()

    def test_two_by_two_grid_is_ranked(self, tmp_path):
        split = toy_split()
        results = grid_search(
            make_config(max_epochs=1),
            {"learning_rate": [1e-3, 1e-2], "d": [4, 6]}, split, V,
            out_dir=tmp_path)
        assert len(results) == 4
        ppls = [r["dev_ppl"] for r in results]
        assert ppls == sorted(ppls)
        assert [r["rank"] for r in results] == [1, 2, 3, 4]
        rows = (tmp_path / "grid_results.csv").read_text().splitlines()
        assert len(rows) == 5  # header + 4 points

    def test_empty_grid_rejected(self):
        with pytest.raises(ValueError):
            grid_search(make_config(), {}, toy_split(), V)


class TestConfigValidation:
    def test_rejects_bad_values(self):
        with pytest.raises(ValueError):
            make_config(batch_size=0)
        with pytest.raises(ValueError):
            make_config(optimizer="rmsprop")
        with pytest.raises(ValueError):
            make_config(components=())

    def test_round_trips_through_dict(self):
        config = make_config(components=(KernelSpec("mog", num_gauss=3),
                                         KernelSpec("pol", p=2)),
                             rho=0.5, optimizer="sgd")
        assert TrainConfig.from_dict(config.to_dict()) == config
