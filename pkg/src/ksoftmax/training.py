"""Mini-batch training of the encoder + kernelized output layer.

Deterministic end to end under a fixed seed: initialization draws from one
seeded generator, epoch shuffles are pure functions of (seed, epoch), and
checkpoints restore training bit-exactly (parameters, optimizer slots and
position in the batch stream).
"""

from __future__ import annotations

import copy
import csv
import dataclasses
import io
import itertools
import json
import math
import os
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from . import data as data_mod
from . import encoder as encoder_mod
from . import eval as eval_mod
from . import kernels
from . import output_layer
from .errors import DivergenceDetected, KsoftmaxError, NonFiniteScore
from .kernels import KernelSpec
from .output_layer import MixtureConfig, OutputParams

CHECKPOINT_MAGIC = "ksoftmax-checkpoint"
CHECKPOINT_VERSION = 1

METRIC_FLOAT_FMT = "{:.12g}"


@dataclass(frozen=True)
class TrainConfig:
    components: tuple
    n: int = 3
    d: int = 32
    d_e: Optional[int] = None  # None -> d
    batch_size: int = 64
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    clip_norm: float = 5.0
    max_epochs: int = 20
    patience: int = 5
    seed: int = 0
    rho: float = 0.1
    reg_across_data: bool = False

    def __post_init__(self):
        if not self.components:
            raise ValueError("at least one mixture component is required")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        for name in ("n", "d", "batch_size", "max_epochs"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.learning_rate < 0 or self.clip_norm <= 0 or self.rho < 0:
            raise ValueError("bad numeric field")
        object.__setattr__(self, "components", tuple(self.components))

    @property
    def de(self) -> int:
        return self.d_e if self.d_e is not None else self.d

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["components"] = [s.to_dict() for s in self.components]
        return out

    @staticmethod
    def from_dict(d: dict) -> "TrainConfig":
        d = dict(d)
        d["components"] = tuple(KernelSpec.from_dict(c) for c in d["components"])
        return TrainConfig(**d)


@dataclass
class TrainState:
    config: TrainConfig
    mixture: MixtureConfig
    enc: encoder_mod.EncoderParams
    out: OutputParams
    opt_m: dict
    opt_v: dict
    opt_t: int
    epoch: int
    step: int
    step_in_epoch: int
    best_dev_ppl: float
    rng: np.random.Generator


def named_tensors(state: TrainState) -> list:
    """Ordered (name, array) pairs over every trainable tensor."""
    out = [("enc.E", state.enc.E), ("enc.F", state.enc.F),
           ("enc.bias", state.enc.bias), ("out.W", state.out.W)]
    if state.out.M is not None:
        out.append(("out.M", state.out.M))
    if state.out.C is not None:
        out.append(("out.C", state.out.C))
    if state.out.word_log_vars is not None:
        out.append(("out.word_log_vars", state.out.word_log_vars))
    if state.out.component_log_vars is not None:
        for k, v in enumerate(state.out.component_log_vars):
            if v is not None:
                out.append((f"out.comp_log_vars.{k}", v))
    return out


def init_state(config: TrainConfig, V: int) -> TrainState:
    rng = np.random.default_rng(config.seed)
    mixture = MixtureConfig(components=config.components, d=config.d, V=V,
                            rho=config.rho,
                            reg_across_data=config.reg_across_data)
    enc = encoder_mod.init_encoder_params(V, config.n, config.d, config.de, rng)
    out = output_layer.init_output_params(mixture, rng)
    state = TrainState(config=config, mixture=mixture, enc=enc, out=out,
                       opt_m={}, opt_v={}, opt_t=0, epoch=0, step=0,
                       step_in_epoch=0, best_dev_ppl=math.inf, rng=rng)
    if config.optimizer == "adam":
        for name, arr in named_tensors(state):
            state.opt_m[name] = np.zeros_like(arr)
            state.opt_v[name] = np.zeros_like(arr)
    return state


def _gather_grads(state: TrainState, enc_grads, out_grads) -> dict:
    grads = {"enc.E": enc_grads.dE, "enc.F": enc_grads.dF,
             "enc.bias": enc_grads.dbias, "out.W": out_grads.dW}
    if out_grads.dM is not None:
        grads["out.M"] = out_grads.dM
    if out_grads.dC is not None:
        grads["out.C"] = out_grads.dC
    if out_grads.d_word_log_vars is not None:
        grads["out.word_log_vars"] = out_grads.d_word_log_vars
    if out_grads.d_component_log_vars is not None:
        for k, v in enumerate(out_grads.d_component_log_vars):
            if v is not None:
                grads[f"out.comp_log_vars.{k}"] = np.asarray(v)
    return grads


def clip_gradients(grads: dict, clip_norm: float) -> float:
    """Rescale grads in place so the global norm is <= clip_norm.
    Returns the pre-clip global norm."""
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total > clip_norm:
        scale = clip_norm / total
        for g in grads.values():
            g *= scale
    return total


def _apply_update(state: TrainState, grads: dict):
    cfg = state.config
    lr = cfg.learning_rate
    if cfg.optimizer == "sgd":
        for name, arr in named_tensors(state):
            if name in grads:
                arr -= lr * grads[name]
    else:
        state.opt_t += 1
        b1, b2, eps = 0.9, 0.999, 1e-8
        t = state.opt_t
        for name, arr in named_tensors(state):
            if name not in grads:
                continue
            g = grads[name]
            m = state.opt_m[name]
            v = state.opt_v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            mhat = m / (1 - b1 ** t)
            vhat = v / (1 - b2 ** t)
            arr -= lr * mhat / (np.sqrt(vhat) + eps)
    if state.mixture.has_hpb:
        kernels.project_to_ball(state.out.W)


def train_step(state: TrainState, windows: np.ndarray, targets: np.ndarray):
    """One forward/backward/update step. Returns (loss, reg_term).

    Raises DivergenceDetected before applying the update if the loss or any
    gradient is non-finite, so the parameters held in ``state`` always come
    from the last finite step.
    """
    H, enc_cache = encoder_mod.encode(state.enc, windows)
    try:
        loss_val, cache = output_layer.loss(state.mixture, state.out, H, targets)
    except NonFiniteScore as e:
        raise DivergenceDetected(
            f"non-finite logits at step {state.step}: {e}", step=state.step)
    if not math.isfinite(loss_val):
        raise DivergenceDetected(
            f"non-finite loss at step {state.step}", step=state.step)
    out_grads = output_layer.backward(state.mixture, state.out, cache, targets)
    enc_grads = encoder_mod.encode_backward(state.enc, enc_cache, out_grads.dH)
    grads = _gather_grads(state, enc_grads, out_grads)
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise DivergenceDetected(
                f"non-finite gradient in {name} at step {state.step}",
                step=state.step, component=name)
    clip_gradients(grads, state.config.clip_norm)
    _apply_update(state, grads)
    state.step += 1
    state.step_in_epoch += 1
    return loss_val, cache.reg_term


def train_steps(state: TrainState, split: data_mod.CorpusSplit, num_steps: int):
    """Advance exactly num_steps batches, crossing epoch boundaries as
    needed (no dev evaluation, no early stopping)."""
    cfg = state.config
    done = 0
    while done < num_steps:
        made_progress = False
        for windows, targets in data_mod.batch_windows(
                split.train, cfg.n, cfg.batch_size, cfg.seed,
                epoch=state.epoch, start_batch=state.step_in_epoch):
            train_step(state, windows, targets)
            made_progress = True
            done += 1
            if done >= num_steps:
                return state
        if not made_progress and state.step_in_epoch == 0:
            raise KsoftmaxError("empty training split")
        state.epoch += 1
        state.step_in_epoch = 0
    return state


def _metrics_header(K: int) -> list:
    return (["epoch", "train_loss", "dev_ppl"]
            + [f"pi_mean_{k + 1}" for k in range(K)] + ["reg_term"])


def _metrics_row(epoch, train_loss, dev_ppl, pi_mean, reg_term) -> list:
    fmt = METRIC_FLOAT_FMT.format
    return ([str(epoch), fmt(train_loss), fmt(dev_ppl)]
            + [fmt(p) for p in pi_mean] + [fmt(reg_term)])


def train(config: TrainConfig, split: data_mod.CorpusSplit, V: int,
          out_dir=None, state: Optional[TrainState] = None,
          max_epochs: Optional[int] = None):
    """Full training loop with per-epoch dev evaluation and early stopping.

    Returns (best_state, metrics) where metrics is the list of per-epoch
    row dicts and best_state is the checkpoint with the lowest dev PPL.
    Writes metrics.csv, best.ckpt and last.ckpt under out_dir when given.
    On divergence the last finite checkpoint is saved before the error
    propagates.
    """
    if state is None:
        state = init_state(config, V)
    cfg = state.config
    limit = max_epochs if max_epochs is not None else cfg.max_epochs
    metrics = []
    metrics_file = None
    writer = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        path = os.path.join(out_dir, "metrics.csv")
        fresh = state.epoch == 0
        metrics_file = open(path, "a" if not fresh else "w",
                            encoding="utf-8", newline="")
        writer = csv.writer(metrics_file)
        if fresh:
            writer.writerow(_metrics_header(state.mixture.K))

    best_state = None
    bad_epochs = 0
    try:
        while state.epoch < limit:
            losses = []
            for windows, targets in data_mod.batch_windows(
                    split.train, cfg.n, cfg.batch_size, cfg.seed,
                    epoch=state.epoch, start_batch=state.step_in_epoch):
                losses.append(train_step(state, windows, targets))
            state.epoch += 1
            state.step_in_epoch = 0
            train_loss = float(np.mean([l for l, _ in losses])) if losses else math.nan
            nll, pi_mean, pi_var = eval_mod.mean_nll_and_pi(
                state.enc, state.mixture, state.out, split.dev, cfg.n)
            try:
                dev_ppl = math.exp(nll)
            except OverflowError:
                dev_ppl = math.inf
            reg_term = cfg.rho * pi_var
            row = {"epoch": state.epoch, "train_loss": train_loss,
                   "dev_ppl": dev_ppl, "pi_mean": pi_mean.tolist(),
                   "reg_term": reg_term}
            metrics.append(row)
            if writer is not None:
                writer.writerow(_metrics_row(state.epoch, train_loss, dev_ppl,
                                             pi_mean, reg_term))
                metrics_file.flush()
            if dev_ppl < state.best_dev_ppl:
                state.best_dev_ppl = dev_ppl
                best_state = _copy_state(state)
                bad_epochs = 0
            else:
                bad_epochs += 1
            if out_dir is not None:
                save_checkpoint(state, os.path.join(out_dir, "last.ckpt"))
                if bad_epochs == 0:
                    save_checkpoint(best_state, os.path.join(out_dir, "best.ckpt"))
            if bad_epochs >= cfg.patience:
                break
    except DivergenceDetected:
        if out_dir is not None:
            save_checkpoint(state, os.path.join(out_dir, "last.ckpt"))
        raise
    finally:
        if metrics_file is not None:
            metrics_file.close()
    if best_state is None:
        best_state = _copy_state(state)
    return best_state, metrics


def _copy_state(state: TrainState) -> TrainState:
    return TrainState(
        config=state.config, mixture=state.mixture,
        enc=copy.deepcopy(state.enc),
        out=copy.deepcopy(state.out),
        opt_m={k: v.copy() for k, v in state.opt_m.items()},
        opt_v={k: v.copy() for k, v in state.opt_v.items()},
        opt_t=state.opt_t, epoch=state.epoch, step=state.step,
        step_in_epoch=state.step_in_epoch, best_dev_ppl=state.best_dev_ppl,
        rng=copy.deepcopy(state.rng))


# ---------------------------------------------------------------------------
# Checkpoints: text header + row-major little-endian float64 blobs
# ---------------------------------------------------------------------------

def save_checkpoint(state: TrainState, path):
    tensors = named_tensors(state)
    slot_tensors = []
    for name, _ in tensors:
        if name in state.opt_m:
            slot_tensors.append((f"adam.m.{name}", state.opt_m[name]))
            slot_tensors.append((f"adam.v.{name}", state.opt_v[name]))
    all_tensors = tensors + slot_tensors
    header = io.StringIO()
    header.write(f"{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}\n")
    header.write("config " + json.dumps(state.config.to_dict(), sort_keys=True) + "\n")
    header.write(f"V {state.mixture.V}\n")
    header.write(f"epoch {state.epoch}\n")
    header.write(f"step {state.step}\n")
    header.write(f"step_in_epoch {state.step_in_epoch}\n")
    header.write(f"adam_t {state.opt_t}\n")
    header.write(f"best_dev_ppl {state.best_dev_ppl!r}\n")
    header.write("rng " + json.dumps(state.rng.bit_generator.state) + "\n")
    for name, arr in all_tensors:
        shape = " ".join(str(s) for s in np.asarray(arr).shape)
        header.write(f"tensor {name} {shape}".rstrip() + "\n")
    header.write("end\n")
    with open(path, "wb") as f:
        f.write(header.getvalue().encode("utf-8"))
        for _, arr in all_tensors:
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> TrainState:
    with open(path, "rb") as f:
        blob = f.read()
    end_marker = b"end\n"
    split_at = blob.index(end_marker) + len(end_marker)
    header_lines = blob[:split_at].decode("utf-8").splitlines()
    body = blob[split_at:]
    magic = header_lines[0].split()
    if magic[0] != CHECKPOINT_MAGIC or int(magic[1]) != CHECKPOINT_VERSION:
        raise KsoftmaxError(f"bad checkpoint header: {header_lines[0]!r}")
    fields = {}
    tensor_specs = []
    for line in header_lines[1:]:
        if line == "end":
            break
        key, _, rest = line.partition(" ")
        if key == "tensor":
            parts = rest.split()
            tensor_specs.append((parts[0], tuple(int(s) for s in parts[1:])))
        else:
            fields[key] = rest
    config = TrainConfig.from_dict(json.loads(fields["config"]))
    V = int(fields["V"])
    state = init_state(config, V)
    arrays = {}
    offset = 0
    for name, shape in tensor_specs:
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(body, dtype="<f8", count=count,
                            offset=offset).reshape(shape).copy()
        offset += count * 8
        arrays[name] = arr
    for name, arr in named_tensors(state):
        arr[...] = arrays[name]
    for name in list(state.opt_m):
        state.opt_m[name][...] = arrays[f"adam.m.{name}"]
        state.opt_v[name][...] = arrays[f"adam.v.{name}"]
    state.epoch = int(fields["epoch"])
    state.step = int(fields["step"])
    state.step_in_epoch = int(fields["step_in_epoch"])
    state.opt_t = int(fields["adam_t"])
    state.best_dev_ppl = float(fields["best_dev_ppl"])
    state.rng.bit_generator.state = json.loads(fields["rng"])
    return state


# ---------------------------------------------------------------------------
# Grid search
# ---------------------------------------------------------------------------

def _run_grid_point(args):
    config, split, V, point_dir = args
    try:
        best, metrics = train(config, split, V, out_dir=point_dir)
        _, _, pi_var = eval_mod.mean_nll_and_pi(
            best.enc, best.mixture, best.out, split.dev, config.n)
        return {"dev_ppl": best.best_dev_ppl, "pi_var_mean": pi_var,
                "diverged": False}
    except DivergenceDetected as e:
        return {"dev_ppl": math.inf, "pi_var_mean": math.nan,
                "diverged": True, "error": str(e)}


def grid_search(base_config: TrainConfig, grid: dict,
                split: data_mod.CorpusSplit, V: int, out_dir=None,
                jobs: int = 1) -> list:
    """Train every Cartesian point of ``grid`` (TrainConfig field name ->
    list of values) and rank results by dev PPL. Diverging points are
    recorded with infinite PPL, not fatal."""
    if not grid:
        raise ValueError("empty grid")
    names = sorted(grid)
    points = list(itertools.product(*(grid[n] for n in names)))
    tasks = []
    for i, values in enumerate(points):
        config = dataclasses.replace(base_config,
                                     **dict(zip(names, values)))
        point_dir = os.path.join(out_dir, f"point_{i:03d}") if out_dir else None
        tasks.append((config, split, V, point_dir))
    if jobs > 1:
        import concurrent.futures
        with concurrent.futures.ProcessPoolExecutor(max_workers=jobs) as ex:
            outcomes = list(ex.map(_run_grid_point, tasks))
    else:
        outcomes = [_run_grid_point(t) for t in tasks]
    results = []
    for values, outcome in zip(points, outcomes):
        row = dict(zip(names, values))
        row.update(outcome)
        results.append(row)
    results.sort(key=lambda r: r["dev_ppl"])
    for rank, row in enumerate(results, start=1):
        row["rank"] = rank
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        path = os.path.join(out_dir, "grid_results.csv")
        fmt = METRIC_FLOAT_FMT.format
        with open(path, "w", encoding="utf-8", newline="") as f:
            w = csv.writer(f)
            w.writerow(["rank"] + names + ["dev_ppl", "pi_var_mean", "diverged"])
            for row in results:
                w.writerow([row["rank"]]
                           + [row[n] for n in names]
                           + [fmt(row["dev_ppl"]), fmt(row["pi_var_mean"]),
                              str(row["diverged"]).lower()])
    return results
