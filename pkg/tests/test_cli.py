import os

import pytest

from ksoftmax import cli, data
from ksoftmax.cli import parse_kernel_list
from ksoftmax.errors import KsoftmaxError
from ksoftmax.kernels import KernelSpec


@pytest.fixture(scope="module")
def corpus_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("corpus") / "toy.txt"
    data.save_lines(data.generate_zipf(15, 800, seed=0), path)
    return str(path)


FAST = ["--n", "2", "--d", "4", "--batch-size", "16", "--max-epochs", "2",
        "--vocab-size", "20", "--seed", "0"]


class TestKernelListParsing:
    def test_plain_and_repeated_and_parameterized(self):
        specs = parse_kernel_list("lin 3*pow(p=2) rbf(gamma=0.5)")
        assert len(specs) == 5
        assert specs[0] == KernelSpec("lin")
        assert specs[1] == specs[2] == specs[3] == KernelSpec("pow", p=2.0)
        assert specs[4] == KernelSpec("rbf", gamma=0.5)

    def test_multiple_fields(self):
        (spec,) = parse_kernel_list("wav(a=2,b=3)")
        assert spec.a == 2.0 and spec.b == 3.0

    @pytest.mark.parametrize("bad", [
        "", "xyz", "pow(q=1)", "2*", "pow(p=oops)", "lin()extra",
    ])
    def test_rejects_malformed(self, bad):
        with pytest.raises(KsoftmaxError):
            parse_kernel_list(bad)


class TestTrainEvalPipeline:
    def test_train_then_eval(self, tmp_path, corpus_file, capsys):
        out = str(tmp_path / "run")
        code = cli.run(["train", "--corpus", corpus_file, "--out", out] + FAST)
        captured = capsys.readouterr()
        assert code == 0, captured.err
        assert "best dev ppl" in captured.out
        for name in ("metrics.csv", "best.ckpt", "last.ckpt", "vocab.txt",
                     "effective_config.ini", "run.log"):
            assert os.path.exists(os.path.join(out, name)), name

        code = cli.run(["eval", "--checkpoint", os.path.join(out, "best.ckpt"),
                        "--split", "test"])
        captured = capsys.readouterr()
        assert code == 0, captured.err
        lines = [l for l in captured.out.splitlines() if l.strip()]
        assert len(lines) == 1
        assert lines[0].startswith("test ppl ")
        float(lines[0].rsplit(" ", 1)[1])  # parses as a number

    def test_config_file_with_flag_override(self, tmp_path, corpus_file,
                                            capsys):
        cfg = tmp_path / "run.ini"
        cfg.write_text(
            "[mixture]\nkernels = lin pow\nrho = 0.1\n"
            "[training]\nn = 2\nd = 4\nmax_epochs = 1\nbatch_size = 16\n"
            f"seed = 0\n[data]\ncorpus = {corpus_file}\nvocab_size = 20\n")
        out = str(tmp_path / "run")
        code = cli.run(["train", "--config", str(cfg), "--out", out,
                        "--max-epochs", "2"])
        assert code == 0, capsys.readouterr().err
        echoed = (tmp_path / "run" / "effective_config.ini").read_text()
        assert "max_epochs = 2" in echoed  # flag wins over file
        assert "kernels = lin pow" in echoed
        metrics = (tmp_path / "run" / "metrics.csv").read_text().splitlines()
        assert metrics[0].startswith("epoch,") and "pi_mean_2" in metrics[0]

    def test_identical_invocations_are_byte_identical(self, tmp_path,
                                                      corpus_file, capsys):
        args = ["train", "--corpus", corpus_file] + FAST
        assert cli.run(args + ["--out", str(tmp_path / "a")]) == 0
        assert cli.run(args + ["--out", str(tmp_path / "b")]) == 0
        capsys.readouterr()
        for name in ("metrics.csv", "best.ckpt", "vocab.txt"):
            a = (tmp_path / "a" / name).read_bytes()
            b = (tmp_path / "b" / name).read_bytes()
            assert a == b, name

    def test_divergence_exit_code(self, tmp_path, corpus_file, capsys):
        import numpy as np
        with np.errstate(over="ignore"):
            code = cli.run(["train", "--corpus", corpus_file,
                            "--out", str(tmp_path / "run"),
                            "--kernels", "pol(p=3)", "--optimizer", "sgd",
                            "--learning-rate", "1e8", "--clip-norm", "1e300"]
                           + FAST)
        assert code == 2
        assert "diverged" in capsys.readouterr().err


class TestValidationErrors:
    def test_missing_corpus(self, capsys):
        assert cli.run(["train", "--out", "/tmp/x"] + FAST) == 1
        assert "corpus" in capsys.readouterr().err

    def test_unknown_config_key(self, tmp_path, capsys):
        cfg = tmp_path / "bad.ini"
        cfg.write_text("[training]\nbogus = 1\n")
        assert cli.run(["train", "--config", str(cfg), "--out",
                        str(tmp_path / "o")]) == 1
        assert "bogus" in capsys.readouterr().err

    def test_key_in_wrong_section(self, tmp_path, capsys):
        cfg = tmp_path / "bad.ini"
        cfg.write_text("[data]\nrho = 0.1\n")
        assert cli.run(["train", "--config", str(cfg), "--out",
                        str(tmp_path / "o")]) == 1
        err = capsys.readouterr().err
        assert "rho" in err and "mixture" in err

    def test_bad_kernel_flag(self, tmp_path, corpus_file, capsys):
        code = cli.run(["train", "--corpus", corpus_file, "--out",
                        str(tmp_path / "o"), "--kernels", "nosuch"] + FAST)
        assert code == 1

    def test_unknown_flag(self, capsys):
        assert cli.run(["train", "--nonsense"]) == 1


class TestOtherSubcommands:
    def test_gradcheck_pass(self, capsys):
        code = cli.run(["gradcheck", "--kernel", "lin,rbf", "--dims", "2,4",
                        "--trials", "5", "--seed", "0"])
        out = capsys.readouterr().out
        assert code == 0
        assert "gradcheck lin: pass" in out
        assert "gradcheck rbf: pass" in out

    def test_gradcheck_unknown_kernel(self, capsys):
        assert cli.run(["gradcheck", "--kernel", "nope"]) == 1

    def test_curves(self, tmp_path, capsys):
        out = str(tmp_path / "curves")
        code = cli.run(["curves", "--kernels", "rbf,wav", "--steps", "200",
                        "--out", out])
        assert code == 0
        for kind in ("rbf", "wav"):
            rows = open(os.path.join(out, f"curve_{kind}.csv")).readlines()
            assert len(rows) == 201
            assert rows[0].strip() == "x,score,dscore_dx"

    def test_synth(self, tmp_path, capsys):
        out = str(tmp_path / "corpus.txt")
        code = cli.run(["synth", "--kind", "zipf", "--vocab", "10",
                        "--tokens", "500", "--seed", "1", "--out", out])
        assert code == 0
        assert "wrote" in capsys.readouterr().out
        tokens = [t for l in data.load_lines(out) for t in l.split()]
        assert len(tokens) >= 500

    def test_probe(self, tmp_path, corpus_file, capsys):
        out = str(tmp_path / "run")
        assert cli.run(["train", "--corpus", corpus_file, "--out", out,
                        "--kernels", "lin pow"] + FAST) == 0
        vocab = data.Vocabulary.load(os.path.join(out, "vocab.txt"))
        token = vocab.id_to_token[2]
        code = cli.run(["probe", "--checkpoint", os.path.join(out, "best.ckpt"),
                        "--vocab", os.path.join(out, "vocab.txt"),
                        "--tokens", token, "--contexts", token,
                        "--out", str(tmp_path / "probe")])
        assert code == 0
        text = (tmp_path / "probe" / "probe.txt").read_text()
        assert f"query: {token}" in text
        assert (tmp_path / "probe" / "probe.tsv").exists()

    def test_seed_env_fallback(self, tmp_path, corpus_file, capsys,
                               monkeypatch):
        monkeypatch.setenv("KSOFTMAX_SEED", "7")
        args = ["train", "--corpus", corpus_file, "--n", "2", "--d", "4",
                "--batch-size", "16", "--max-epochs", "1",
                "--vocab-size", "20"]
        assert cli.run(args + ["--out", str(tmp_path / "env")]) == 0
        capsys.readouterr()
        echoed = (tmp_path / "env" / "effective_config.ini").read_text()
        assert "seed = 7" in echoed
