import csv

import numpy as np
import pytest

from bpfa.cli import build_parser, config_from_args, main, read_config
from bpfa.data import Image, write_image, write_matrix
from bpfa.experiment import ExperimentConfig, load_metrics, parse_init
from bpfa.variational import load_state

SMALL = ["--task", "synthetic", "--N", "120", "--D", "8", "--K_true", "3", "--K", "6", "--batch", "20",
         "--epochs", "12", "--eval-every", "4", "--M", "4", "--no-timing"]


def run(tmp_path, name, *extra, command="run"):
    out = tmp_path / name
    assert main([command, *SMALL, "--out", str(out), *extra]) == 0
    return out


class TestRun:
    @pytest.mark.parametrize("strategy", ["gibbs-ssvi", "mf-svi", "mf-ssvi", "titsias-ssvi", "mimno-svi"])
    def test_bitwise_reproducible(self, strategy, tmp_path):
        a = run(tmp_path, "a", "--strategy", strategy, "--seed", "3")
        b = run(tmp_path, "b", "--strategy", strategy, "--seed", "3")
        assert (a / "metrics.jsonl").read_bytes() == (b / "metrics.jsonl").read_bytes()
        assert (a / "final.ckpt").read_bytes() == (b / "final.ckpt").read_bytes()
        records = load_metrics(a / "metrics.jsonl")
        assert [r.epoch for r in records] == [4, 8, 12]
        assert all(r.wall_clock_s is None and r.pred_mse >= 0 for r in records)

    def test_seed_changes_output(self, tmp_path):
        a = run(tmp_path, "a", "--seed", "1")
        b = run(tmp_path, "b", "--seed", "2")
        assert (a / "metrics.jsonl").read_bytes() != (b / "metrics.jsonl").read_bytes()

    def test_resume_exact(self, tmp_path):
        full = run(tmp_path, "full", "--checkpoint-every", "4")
        part = tmp_path / "part"
        part.mkdir()
        (part / "metrics.jsonl").write_bytes(b"".join(
            line + b"\n" for line in (full / "metrics.jsonl").read_bytes().splitlines()[:1]))
        assert main(["run", *SMALL, "--out", str(part), "--resume", str(full / "ckpt_4.ckpt")]) == 0
        assert (part / "metrics.jsonl").read_bytes() == (full / "metrics.jsonl").read_bytes()
        a, _ = load_state(full / "final.ckpt")
        b, _ = load_state(part / "final.ckpt")
        np.testing.assert_array_equal(a.mu, b.mu)

    def test_resume_rejects_other_seed(self, tmp_path, capsys):
        full = run(tmp_path, "full", "--checkpoint-every", "4")
        code = main(["run", *SMALL, "--seed", "5", "--resume", str(full / "ckpt_4.ckpt")])
        assert code == 2
        assert "does not match" in capsys.readouterr().err

    def test_baseline(self, tmp_path):
        a = run(tmp_path, "a", command="baseline")
        b = run(tmp_path, "b", command="baseline")
        assert (a / "metrics.jsonl").read_bytes() == (b / "metrics.jsonl").read_bytes()
        assert load_metrics(a / "metrics.jsonl")[0].strategy == "GIBBS_BASELINE"

    def test_baseline_resume_continues_chain(self, tmp_path):
        full = run(tmp_path, "full", "--checkpoint-every", "4", command="baseline")
        part = run(tmp_path, "part", "--resume", str(full / "ckpt_8.ckpt"), command="baseline")
        assert (part / "final.ckpt").read_bytes() == (full / "final.ckpt").read_bytes()

    def test_image_task(self, tmp_path):
        rng = np.random.default_rng(0)
        yy, xx = np.mgrid[:24, :24]
        pixels = np.clip(128 + 60 * np.sin(xx / 3.0) + rng.normal(0, 5, (24, 24)), 0, 255)
        write_image(tmp_path / "img.pgm", Image(np.rint(pixels)))
        out = tmp_path / "img"
        code = main(["run", "--task", "image-interp", "--image", str(tmp_path / "img.pgm"), "--crop", "20",
                     "--observe-frac", "0.5", "--K", "4", "--batch", "10", "--epochs", "3", "--eval-every", "3",
                     "--M", "2", "--no-timing", "--out", str(out)])
        assert code == 0
        rec = load_metrics(out / "metrics.jsonl")[-1]
        assert rec.psnr_db is not None and rec.psnr_db > 0
        assert (out / "recon.pgm").exists()

    def test_matrix_task(self, tmp_path):
        rng = np.random.default_rng(0)
        Y = rng.normal(size=(40, 5))
        mask = rng.random((40, 5)) < 0.9
        mask[:, 0] = True
        write_matrix(tmp_path / "y.csv", Y, mask)
        out = tmp_path / "m"
        assert main(["run", "--task", "matrix", "--matrix", str(tmp_path / "y.csv"), "--K", "3", "--batch", "10",
                     "--epochs", "2", "--eval-every", "1", "--M", "2", "--holdout", "0.1", "--out", str(out)]) == 0
        assert len(load_metrics(out / "metrics.jsonl")) == 2


class TestConfig:
    def test_file_and_override(self, tmp_path):
        cfg_file = tmp_path / "c.cfg"
        cfg_file.write_text("# settings\nK = 7\nbatch = 30\nstrategy=mf-ssvi\nblocked = false\nzeta=0.9\n")
        args = build_parser().parse_args(["run", "--config", str(cfg_file), "--K", "9"])
        cfg = config_from_args(args)
        assert (cfg.K, cfg.batch_size, cfg.strategy, cfg.blocked, cfg.zeta) == (9, 30, "mf-ssvi", False, 0.9)

    def test_gibbs_flags(self):
        args = build_parser().parse_args(["run", "--single-site", "--random-scan", "--gibbs-init", "half"])
        cfg = config_from_args(args)
        assert (cfg.tag.blocked, cfg.tag.random_scan, cfg.local_options.gibbs_init) == (False, True, "half")

    def test_unknown_key(self, tmp_path):
        cfg_file = tmp_path / "c.cfg"
        cfg_file.write_text("learning_rate = 3\n")
        with pytest.raises(ValueError):
            read_config(cfg_file)

    @pytest.mark.parametrize("line", ["K = many", "blocked = maybe", "zeta = 2.0", "init = gibbs:10", "novalue"])
    def test_bad_config_exits_nonzero(self, line, tmp_path, capsys):
        cfg_file = tmp_path / "c.cfg"
        cfg_file.write_text(line + "\n")
        assert main(["run", "--config", str(cfg_file)]) == 2
        assert "bpfa: error:" in capsys.readouterr().err

    def test_bad_flags(self, capsys):
        assert main(["run", *SMALL, "--K", "1"]) == 2
        assert main(["run", *SMALL, "--batch", "500"]) == 2
        with pytest.raises(SystemExit):
            main(["run", "--strategy", "em"])

    def test_parse_init(self):
        assert parse_init("random") is None
        assert parse_init("gibbs:100:5") == (100, 5)
        with pytest.raises(ValueError):
            parse_init("gibbs:0:5")

    def test_defaults(self):
        cfg = ExperimentConfig()
        assert (cfg.K, cfg.batch_size, cfg.burn_in, cfg.n_samples, cfg.M) == (40, 100, 3, 3, 64)
        assert (cfg.hyper.a, cfg.hyper.b, cfg.hyper.d_prior, cfg.hyper.zeta) == (10.0, 10.0, 10.0, 0.75)


class TestPlot:
    def test_merge_and_sort(self, tmp_path):
        a = run(tmp_path, "a", "--strategy", "mf-ssvi")
        b = run(tmp_path, "b", "--strategy", "gibbs-ssvi")
        out = tmp_path / "plot.csv"
        assert main(["plot", str(a / "metrics.jsonl"), str(b / "metrics.jsonl"), "--out", str(out)]) == 0
        with open(out) as fh:
            rows = list(csv.DictReader(fh))
        assert list(rows[0]) == ["strategy", "seed", "epoch", "time", "pred_loglik", "pred_mse", "psnr_db"]
        keys = [(r["strategy"], float(r["time"])) for r in rows]
        assert keys == sorted(keys) and len(rows) == 6
        assert rows[0]["strategy"] == "GIBBS_SSVI"

    def test_schema_mismatch(self, tmp_path, capsys):
        bad = tmp_path / "bad.jsonl"
        bad.write_text('{"epoch": 1, "loss": 2}\n')
        assert main(["plot", str(bad), "--out", str(tmp_path / "p.csv")]) == 2
        assert "schema mismatch" in capsys.readouterr().err
