import json

import numpy as np
import pytest

from illumopt import experiment
from illumopt.cli import main
from illumopt.config import load_config
from illumopt.network import TrainingDivergence, load_checkpoint
from illumopt.phantom import read_dataset
from illumopt.physlayer import read_pattern_table

TINY = """\
optics:
  grid: 16
  rows: 3
  cols: 3
phantom:
  cell_count_range: [1, 1]
  cell_radius_range: [4.0, 5.0]
  band_width: 2.0
  counts: [2, 1, 1]
network:
  initial_filters: 4
  conv_layers_per_block: 1
  down_sampling_blocks: 2
  up_sampling_blocks: 2
training:
  max_epochs: 2
sweep:
  modes: [learned, dc]
  depths: [1]
  seeds: [0]
"""


@pytest.fixture
def cfg_path(tmp_path):
    path = tmp_path / "tiny.yaml"
    path.write_text(TINY)
    return path


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def test_simulate_cardinality_and_determinism(tmp_path, cfg_path, capsys):
    path = tmp_path / "seven.yaml"
    path.write_text(TINY.replace("rows: 3", "rows: 7").replace("cols: 3", "cols: 7").replace("[2, 1, 1]", "[1, 1, 1]"))
    code, out, _ = run(capsys, "simulate", "--config", path, "--out", tmp_path / "a")
    assert code == 0
    first = json.loads(out)["manifest_hash"]
    ds = read_dataset(tmp_path / "a" / "dataset")
    assert len(ds.items) == 3 and all(it.stack.n == 147 for it in ds.items)
    code, out, _ = run(capsys, "simulate", "--config", path, "--out", tmp_path / "b")
    assert json.loads(out)["manifest_hash"] == first
    for x, y in zip(ds.items, read_dataset(tmp_path / "b" / "dataset").items):
        np.testing.assert_array_equal(x.stack.images, y.stack.images)


def test_train_needs_dataset(tmp_path, cfg_path, capsys):
    code, _, err = run(capsys, "train", "--config", cfg_path, "--out", tmp_path)
    assert code == 3
    assert json.loads(err)["error"] == "io"


def test_sweep_report_resume_and_provenance(tmp_path, cfg_path, capsys):
    out = tmp_path / "run"
    assert run(capsys, "simulate", "--config", cfg_path, "--out", out)[0] == 0
    code, stdout, _ = run(capsys, "train", "--config", cfg_path, "--out", out)
    assert code == 0 and json.loads(stdout)["ran"] == 2
    report = (out / "report.tsv").read_text()
    rows = experiment.read_table(report)
    assert [r["pattern"] for r in rows] == ["learned", "dc"]
    cfg = load_config(cfg_path)
    assert report.startswith(f"# config_hash={cfg.hash}")
    for r in rows:
        prov = load_checkpoint(out / "cells" / r["cell"] / "model.ckpt").provenance
        assert prov["cell"] == r["cell"] and prov["config_hash"] == r["config_hash"] == cfg.hash
        table = (out / "cells" / r["cell"] / "pattern" / "pattern.tsv").read_text()
        assert cfg.hash in table.splitlines()[0]
    summary = experiment.read_table((out / "summary.tsv").read_text())
    assert {s["pattern"] for s in summary} == {"learned", "dc"}
    relative = experiment.read_table((out / "relative.tsv").read_text())
    assert relative[0]["bits"] == 1 and relative[0]["best_standard"] == "dc"

    # resume skips finished cells and reproduces the tables byte for byte
    code, stdout, _ = run(capsys, "train", "--config", cfg_path, "--out", out)
    assert json.loads(stdout)["skipped"] == 2 and json.loads(stdout)["ran"] == 0
    assert (out / "report.tsv").read_text() == report
    meta = json.loads((out / "metadata.json").read_text())
    assert meta["config_hash"] == cfg.hash and "finished" in meta

    # evaluate recomputes the same metrics from the checkpoints
    assert run(capsys, "evaluate", "--config", cfg_path, "--out", out)[0] == 0
    assert (out / "report.tsv").read_text() == report


def test_fresh_sweep_byte_identical(tmp_path, cfg_path, capsys):
    tables = []
    for name in ("a", "b"):
        out = tmp_path / name
        run(capsys, "simulate", "--config", cfg_path, "--out", out)
        run(capsys, "train", "--config", cfg_path, "--out", out, "--modes", "dc")
        tables.append(((out / "report.tsv").read_bytes(), (out / "summary.tsv").read_bytes()))
    assert tables[0] == tables[1]


def test_failure_ledger_keeps_partial_results(tmp_path, cfg_path, capsys, monkeypatch):
    out = tmp_path / "run"
    run(capsys, "simulate", "--config", cfg_path, "--out", out)
    real = experiment.train

    def flaky(ds, unet, train_cfg, pattern=None, quantizer=None):
        if pattern is not None:
            raise TrainingDivergence("non-finite loss at epoch 0", {"epoch": 0})
        return real(ds, unet, train_cfg, pattern, quantizer)

    monkeypatch.setattr(experiment, "train", flaky)
    code, _, err = run(capsys, "train", "--config", cfg_path, "--out", out)
    assert code == 4 and json.loads(err)["error"] == "training"
    ledger = (out / "failures.tsv").read_text().splitlines()
    assert len(ledger) == 2 and "\tdc\t" in ledger[1] and "TrainingDivergence" in ledger[1]
    rows = experiment.read_table((out / "report.tsv").read_text())
    assert [r["pattern"] for r in rows] == ["learned"]
    # the failed cell is retried on the next run
    monkeypatch.setattr(experiment, "train", real)
    code, stdout, _ = run(capsys, "train", "--config", cfg_path, "--out", out)
    assert code == 0 and json.loads(stdout)["ran"] == 1


def test_export_pattern(tmp_path, cfg_path, capsys):
    out = tmp_path / "run"
    run(capsys, "simulate", "--config", cfg_path, "--out", out)
    run(capsys, "train", "--config", cfg_path, "--out", out, "--modes", "learned")
    cfg = load_config(cfg_path)
    ckpt = out / "cells" / experiment.Cell("learned", 1, 0).key(cfg) / "model.ckpt"
    weights = load_checkpoint(ckpt).pattern.weights

    code, stdout, _ = run(capsys, "export-pattern", ckpt, "--config", cfg_path, "--out", tmp_path / "raw")
    assert code == 0
    files = json.loads(stdout)["files"]
    assert [f.rsplit("/", 1)[1] for f in files] == ["pattern.tsv", "pattern_632nm.pgm", "pattern_540nm.pgm",
                                                    "pattern_480nm.pgm"]
    raw = read_pattern_table((tmp_path / "raw" / "pattern.tsv").read_text(), cfg.array)
    np.testing.assert_array_equal(raw.weights, weights)

    exposures = np.linspace(0.5, 2.0, cfg.array.n)
    np.savetxt(tmp_path / "exp.txt", exposures)
    run(capsys, "export-pattern", ckpt, "--exposures", tmp_path / "exp.txt", "--out", tmp_path / "norm")
    norm = read_pattern_table((tmp_path / "norm" / "pattern.tsv").read_text(), cfg.array)
    np.testing.assert_allclose(norm.weights, weights / exposures, rtol=1e-15)

    run(capsys, "export-pattern", ckpt, "--split", "--out", tmp_path / "split")
    pos = read_pattern_table((tmp_path / "split" / "positive.tsv").read_text(), cfg.array)
    neg = read_pattern_table((tmp_path / "split" / "negative.tsv").read_text(), cfg.array)
    assert pos.weights.min() >= 0 and neg.weights.min() >= 0
    np.testing.assert_array_equal(pos.weights - neg.weights, weights)

    code, _, err = run(capsys, "export-pattern", tmp_path / "missing.ckpt", "--out", tmp_path / "x")
    assert code == 3 and json.loads(err)["error"] == "io"


def test_analyze_spectrum(tmp_path, cfg_path, capsys):
    out = tmp_path / "run"
    run(capsys, "simulate", "--config", cfg_path, "--out", out)
    run(capsys, "train", "--config", cfg_path, "--out", out, "--depths", "1,2", "--modes", "learned")
    code, stdout, _ = run(capsys, "analyze-spectrum", "--config", cfg_path, "--out", out, "--depths", "1,2",
                          "--modes", "learned")
    assert code == 0
    rows = experiment.read_table((out / "spectrum" / "spectrum.tsv").read_text())
    assert sorted(r["bits"] for r in rows) == [1, 2]
    assert all(np.isfinite(r["moment"]) and r["moment"] >= 0 for r in rows)
    moments = experiment.read_table((out / "spectrum" / "moments.tsv").read_text())
    assert [m["bits"] for m in moments] == [1, 2]
    profiles = experiment.read_table((out / "spectrum" / "profiles.tsv").read_text())
    assert len(profiles) == 2


def test_spectrum_center_led_on_blank_specimen(tmp_path, cfg_path):
    # a blank field under the center LED puts all synthesized power at DC
    cfg = load_config(cfg_path, overrides={"phantom": {"cell_count_range": [0, 0]}})
    ds = experiment.simulate(cfg, tmp_path)
    model = experiment.train(ds, cfg.unet, cfg.train_config(0), experiment.pattern_for(cfg, "center"))
    profile, moment = experiment.spectrum(model, ds)
    assert moment == pytest.approx(0.0, abs=1e-9)
    assert profile[0] > 0.999999 * profile.sum()


def test_spectrum_incompatible_dataset(tmp_path, cfg_path, capsys):
    out = tmp_path / "run"
    run(capsys, "simulate", "--config", cfg_path, "--out", out)
    run(capsys, "train", "--config", cfg_path, "--out", out, "--modes", "learned")
    cfg = load_config(cfg_path)
    ckpt = out / "cells" / experiment.Cell("learned", 1, 0).key(cfg) / "model.ckpt"
    other = tmp_path / "other.yaml"
    other.write_text(TINY.replace("rows: 3", "rows: 1"))
    run(capsys, "simulate", "--config", other, "--out", tmp_path / "other")
    code, _, err = run(capsys, "analyze-spectrum", ckpt, "--config", other, "--out", tmp_path / "other")
    assert code == 5 and json.loads(err)["error"] == "shape"


def test_config_error_is_machine_readable(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("training:\n  epochs: 3\n")
    code, _, err = run(capsys, "simulate", "--config", bad, "--out", tmp_path)
    assert code == 2
    doc = json.loads(err)
    assert doc["error"] == "config" and "line 2" in doc["message"]
