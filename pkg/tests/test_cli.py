"""Command-line surface: exit codes, outputs, and error reporting."""

import numpy as np
import pytest

from dqa.cli import main
from dqa.train import read_metrics_csv, read_summary

SMALL = """\
data.kind = two_moons
data.n = 200
data.noise = 0.2
model.hidden = 8
train.method = dqa
train.epochs = 4
train.seed = 5
"""


@pytest.fixture
def cfg_path(tmp_path):
    path = tmp_path / "small.cfg"
    path.write_text(SMALL)
    return path


def run_train(cfg_path, tmp_path, *extra):
    out = tmp_path / "run"
    code = main(["train", "--config", str(cfg_path), "--out", str(out), *extra])
    return code, out


class TestTrain:
    def test_writes_outputs_and_exits_zero(self, cfg_path, tmp_path, capsys):
        code, out = run_train(cfg_path, tmp_path)
        assert code == 0
        for name in ("metrics.csv", "final.ckpt", "summary.txt", "effective.cfg"):
            assert (out / name).exists()
        stdout = capsys.readouterr().out
        assert "invocation: dqa train" in stdout
        assert "final_val_acc" in stdout

    def test_bad_config_key_names_it(self, tmp_path, capsys):
        bad = tmp_path / "bad.cfg"
        bad.write_text(SMALL + "train.warmup = 3\n")
        code = main(["train", "--config", str(bad), "--out", str(tmp_path / "x")])
        assert code == 2
        assert "train.warmup" in capsys.readouterr().err

    def test_fp_metrics_have_no_attention_columns(self, cfg_path, tmp_path):
        code, out = run_train(cfg_path, tmp_path, "--method", "fp")
        assert code == 0
        header, _ = read_metrics_csv(out / "metrics.csv")
        assert not any(name.startswith("a_") for name in header)

    def test_method_override_recorded_in_effective_config(self, cfg_path, tmp_path):
        _, out = run_train(cfg_path, tmp_path, "--method", "br")
        assert "train.method = br" in (out / "effective.cfg").read_text()

    def test_nan_abort_exit_code(self, tmp_path, capsys):
        bad = tmp_path / "diverge.cfg"
        bad.write_text(SMALL.replace("train.method = dqa", "train.method = fp")
                       + "train.lr = 1e30\n")
        with np.errstate(all="ignore"):
            code = main(["train", "--config", str(bad), "--out", str(tmp_path / "x")])
        assert code == 3
        assert "aborted" in capsys.readouterr().err


class TestEvalAndExport:
    def test_eval_reproduces_summary_accuracy_exactly(self, cfg_path, tmp_path, capsys):
        _, out = run_train(cfg_path, tmp_path)
        summary = read_summary(out / "summary.txt")
        capsys.readouterr()
        code = main(["eval", "--checkpoint", str(out / "final.ckpt")])
        assert code == 0
        printed = capsys.readouterr().out
        line = next(l for l in printed.splitlines() if l.startswith("val_acc"))
        assert float(line.split("=")[1]) == float(summary["final_val_acc"])

    def test_export_then_eval_close_to_mixed_model(self, cfg_path, tmp_path, capsys):
        _, out = run_train(cfg_path, tmp_path)
        artifact = tmp_path / "hard.dqam"
        code = main(["export", "--checkpoint", str(out / "final.ckpt"),
                     "--out", str(artifact)])
        assert code == 0
        exported = capsys.readouterr().out
        assert "layer_1_bits" in exported
        code = main(["eval", "--checkpoint", str(artifact)])
        assert code == 0
        hard_acc = float(next(l for l in capsys.readouterr().out.splitlines()
                              if l.startswith("val_acc")).split("=")[1])
        summary = read_summary(out / "summary.txt")
        assert abs(hard_acc - float(summary["final_val_acc"])) <= 0.005

    def test_corrupt_checkpoint_exit_code(self, cfg_path, tmp_path, capsys):
        _, out = run_train(cfg_path, tmp_path)
        path = out / "final.ckpt"
        raw = bytearray(path.read_bytes())
        raw[len(raw) // 2] ^= 0x01
        path.write_bytes(bytes(raw))
        assert main(["eval", "--checkpoint", str(path)]) == 4


class TestPlot:
    def test_svg_and_companion_csv(self, cfg_path, tmp_path):
        _, out = run_train(cfg_path, tmp_path)
        svg = tmp_path / "figure.svg"
        code = main(["plot", "--metrics", str(out / "metrics.csv"),
                     "--out", str(svg), "--layer", "1"])
        assert code == 0
        text = svg.read_text()
        assert text.startswith("<svg") and "polyline" in text
        companion = svg.with_suffix(".csv")
        lines = companion.read_text().splitlines()
        assert lines[0] == "section,series,x,value"
        assert any(line.startswith("attention,") for line in lines)
        assert any(line.startswith("staircase,") for line in lines)

    def test_fp_metrics_rejected(self, cfg_path, tmp_path, capsys):
        _, out = run_train(cfg_path, tmp_path, "--method", "fp")
        code = main(["plot", "--metrics", str(out / "metrics.csv"),
                     "--out", str(tmp_path / "f.svg")])
        assert code == 2
        assert "attention" in capsys.readouterr().err

    def test_layer_out_of_range(self, cfg_path, tmp_path):
        _, out = run_train(cfg_path, tmp_path)
        code = main(["plot", "--metrics", str(out / "metrics.csv"),
                     "--out", str(tmp_path / "f.svg"), "--layer", "9"])
        assert code == 2


class TestCompare:
    def _write(self, tmp_path, name, method, extra=""):
        path = tmp_path / name
        body = SMALL.replace("train.method = dqa", f"train.method = {method}")
        path.write_text(body + extra)
        return path

    def test_compare_writes_table(self, tmp_path):
        a = self._write(tmp_path, "fp.cfg", "fp")
        b = self._write(tmp_path, "dqa.cfg", "dqa")
        out = tmp_path / "cmp"
        code = main(["compare", "--configs", str(a), str(b),
                     "--out", str(out), "--seeds", "2"])
        assert code == 0
        table = (out / "comparison.csv").read_text().splitlines()
        assert table[0] == "config,method,mean_val_acc,sd_val_acc,n_seeds"
        assert len(table) == 3
        assert (out / "dqa" / "seed_1" / "summary.txt").exists()

    def test_single_config_rejected(self, tmp_path, capsys):
        a = self._write(tmp_path, "fp.cfg", "fp")
        assert main(["compare", "--configs", str(a), "--out", str(tmp_path / "c")]) == 2

    def test_topology_mismatch_rejected(self, tmp_path, capsys):
        a = self._write(tmp_path, "fp.cfg", "fp")
        b = self._write(tmp_path, "wide.cfg", "dqa", "model.hidden = 12\n")
        code = main(["compare", "--configs", str(a), str(b), "--out", str(tmp_path / "c")])
        assert code == 2
        assert "topology" in capsys.readouterr().err
