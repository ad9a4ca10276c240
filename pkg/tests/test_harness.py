import csv
import json
import math
import os
import xml.etree.ElementTree as ET
import zipfile

import numpy as np
import pytest

from shaq import tensor as T
from shaq.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from shaq.cli import main, model_config_from, parse_config_file
from shaq.config import param_count, toy_shaq_config
from shaq.data import BatchPlan, batchify, split_bytes
from shaq.harness import (
    METRICS_HEADER,
    REPORT_COLUMNS,
    ExperimentSpec,
    NonFiniteLoss,
    OptimSpec,
    bpc_from_nats,
    evaluate,
    load_model,
    run_grid,
    train,
)
from shaq.model import build_model
from shaq.plots import line_chart_svg

PATTERN = bytes(np.random.default_rng(0).integers(0, 256, 100, dtype=np.uint8))


def tiny_cfg(**kw):
    base = dict(d_model=16, window=10, mem_total=60, dropout=0.0, attn_dropout=0.0)
    base.update(kw)
    return toy_shaq_config(**base)


def tiny_spec(tmp_path, tag="t", epochs=2, **kw):
    defaults = dict(optim=OptimSpec(lr=1e-2), plan=BatchPlan(batch_size=2, center=10), epochs=epochs,
                    out_dir=str(tmp_path / tag), tag=tag, eval_test=False, dtype="float64")
    defaults.update(kw)
    return ExperimentSpec(tiny_cfg(), "<memory>", **defaults)


@pytest.fixture(scope="module")
def random_splits():
    return split_bytes(bytes(np.random.default_rng(3).integers(0, 256, 4000, dtype=np.uint8)))


# -- bpc ---------------------------------------------------------------------------


def test_bpc_examples():
    assert bpc_from_nats(math.log(2)) == 1.0
    assert abs(bpc_from_nats(math.log(256)) - 8.0) < 1e-12
    assert abs(bpc_from_nats(0.84) - 1.208) < 0.01
    assert bpc_from_nats(0.0) == 0.0
    for bad in (-0.1, float("nan")):
        with pytest.raises(ValueError):
            bpc_from_nats(bad)


# -- evaluation --------------------------------------------------------------------


def test_untrained_model_scores_about_eight_bits(random_splits):
    model = build_model(tiny_cfg(), seed=0)
    _, bpc = evaluate(model, batchify(random_splits.train, 4), 10)
    assert abs(bpc - 8.0) < 0.5


def test_evaluate_is_deterministic_and_restores_mode(random_splits):
    model = build_model(tiny_cfg(dropout=0.3), seed=0)
    tracks = batchify(random_splits.valid, 2)
    a = evaluate(model, tracks, 7)
    b = evaluate(model, tracks, 7)
    assert a == b
    assert model.training
    model.eval()
    evaluate(model, tracks, 7)
    assert not model.training


def test_evaluate_rejects_degenerate_input():
    model = build_model(tiny_cfg(), seed=0)
    with pytest.raises(ValueError, match="too short"):
        evaluate(model, np.zeros((1, 2), dtype=np.int64), 10)
    with pytest.raises(ValueError):
        evaluate(model, np.zeros((20, 2), dtype=np.int64), 0)


def test_memorising_a_repeated_pattern_gets_below_half_a_bit(tmp_path):
    cfg = toy_shaq_config(d_model=32, window=20, mem_total=200, dropout=0.0, attn_dropout=0.0)
    spec = ExperimentSpec(cfg, "<memory>", OptimSpec(lr=1e-2), BatchPlan(batch_size=4, center=20), epochs=2,
                          out_dir=str(tmp_path / "of"), tag="of", eval_test=False)
    result = train(spec, splits=split_bytes(PATTERN * 400))
    assert result.best_bpc < 0.5


# -- training loop -----------------------------------------------------------------


def test_metrics_csv_and_artifacts(tmp_path, random_splits):
    spec = tiny_spec(tmp_path, eval_test=True)
    result = train(spec, splits=random_splits)
    with open(os.path.join(spec.out_dir, "metrics.csv")) as fh:
        rows = list(csv.reader(fh))
    assert tuple(rows[0]) == METRICS_HEADER
    assert [int(r[0]) for r in rows[1:]] == [1, 2]
    for r, rec in zip(rows[1:], result.records):
        assert abs(float(r[3]) - rec.valid_bpc) < 1e-6
        assert abs(float(r[2]) / math.log(2) - float(r[3])) < 1e-5
        assert int(r[5]) == param_count(spec.model)["total"]
    assert result.test_bpc is not None and math.isfinite(result.test_bpc)
    for name in ("checkpoints/best.ckpt", "checkpoints/last.ckpt", "run.json",
                 "curves/t_bpc_vs_epoch.svg", "curves/t_bpc_vs_time.svg"):
        assert os.path.exists(os.path.join(spec.out_dir, name)), name
    with open(os.path.join(spec.out_dir, "run.json")) as fh:
        assert json.load(fh)["spec_hash"] == spec.spec_hash()


def test_identical_specs_give_identical_metrics(tmp_path, random_splits):
    a = train(tiny_spec(tmp_path, "a"), splits=random_splits)
    b = train(tiny_spec(tmp_path, "b"), splits=random_splits)
    strip = lambda recs: [(r.epoch, r.train_loss, r.valid_loss, r.valid_bpc) for r in recs]  # noqa: E731
    assert strip(a.records) == strip(b.records)


def test_dropout_runs_are_reproducible_too(tmp_path, random_splits):
    cfg = tiny_cfg(dropout=0.2, attn_dropout=0.2)
    a = train(tiny_spec(tmp_path, "a", epochs=1).replace(model=cfg), splits=random_splits)
    b = train(tiny_spec(tmp_path, "b", epochs=1).replace(model=cfg), splits=random_splits)
    c = train(tiny_spec(tmp_path, "c", epochs=1, seed=7).replace(model=cfg), splits=random_splits)
    assert a.records[0].train_loss == b.records[0].train_loss
    assert a.records[0].train_loss != c.records[0].train_loss


def test_resume_matches_uninterrupted_training(tmp_path, random_splits):
    full = train(tiny_spec(tmp_path, "full", epochs=3), splits=random_splits)
    first = tiny_spec(tmp_path, "part", epochs=2)
    train(first, splits=random_splits)
    resumed = train(first.replace(epochs=3), resume=True, splits=random_splits)
    assert len(resumed.records) == 3
    for a, b in zip(full.records, resumed.records):
        assert abs(a.train_loss - b.train_loss) < 1e-6
        assert abs(a.valid_loss - b.valid_loss) < 1e-6


def test_resume_refuses_a_foreign_checkpoint(tmp_path, random_splits):
    spec = tiny_spec(tmp_path, "x", epochs=1)
    train(spec, splits=random_splits)
    with pytest.raises(ValueError, match="different experiment"):
        train(spec.replace(seed=99), resume=True, splits=random_splits)


def test_non_finite_loss_aborts(tmp_path, random_splits):
    spec = tiny_spec(tmp_path, "nan", epochs=1)
    real_ce = T.cross_entropy_logits

    def poisoned(logits, targets):
        out = real_ce(logits, targets)
        out.data = np.asarray(np.nan)
        return out

    T.cross_entropy_logits = poisoned
    try:
        with pytest.raises(NonFiniteLoss):
            train(spec, splits=random_splits)
    finally:
        T.cross_entropy_logits = real_ce


def test_early_stop(tmp_path, random_splits):
    result = train(tiny_spec(tmp_path, "es", epochs=4, stop_below_bpc=100.0), splits=random_splits)
    assert result.stopped_early and len(result.records) == 1


def test_spec_roundtrip_and_hash():
    spec = ExperimentSpec(tiny_cfg(), "c.bin", tag="q")
    again = ExperimentSpec.from_dict(json.loads(json.dumps(spec.to_dict())))
    assert again == spec and again.spec_hash() == spec.spec_hash()
    assert spec.replace(out_dir="elsewhere").spec_hash() == spec.spec_hash()
    assert spec.replace(seed=1).spec_hash() != spec.spec_hash()
    assert spec.replace(epochs=9).resume_key() == spec.resume_key()
    with pytest.raises(ValueError):
        OptimSpec(name="sgd")
    with pytest.raises(ValueError):
        spec.replace(epochs=0)


# -- grid --------------------------------------------------------------------------


def test_grid_report_schema_and_failure_isolation(tmp_path, random_splits):
    good = tiny_spec(tmp_path, "row one", epochs=1)
    bad = tiny_spec(tmp_path, "row two", epochs=1, plan=BatchPlan(batch_size=5000, center=10))
    report = run_grid([good, bad], str(tmp_path / "grid"), splits=random_splits)
    assert [r["experiment"] for r in report.rows] == ["row one"]
    assert [f["experiment"] for f in report.failures] == ["row two"]
    with open(tmp_path / "grid" / "report.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert tuple(rows[0]) == REPORT_COLUMNS
    with open(tmp_path / "grid" / "report.json") as fh:
        doc = json.load(fh)
    assert doc["mode"] == "sequential" and doc["columns"] == list(REPORT_COLUMNS)
    assert os.path.exists(tmp_path / "grid" / "curves" / "bpc_vs_epoch.svg")
    with pytest.raises(ValueError, match="unique"):
        run_grid([good, good], str(tmp_path / "g2"), splits=random_splits)


# -- checkpoints and plots ---------------------------------------------------------


def test_checkpoint_roundtrip(tmp_path, rng):
    arrays = {"a": rng.standard_normal((3, 4)), "b": np.arange(5, dtype=np.int64),
              "c": rng.standard_normal(2).astype(np.float32)}
    path = tmp_path / "x.ckpt"
    save_checkpoint(path, arrays, {"k": [1, 2]})
    back, meta = load_checkpoint(path)
    assert meta == {"k": [1, 2]}
    for k, v in arrays.items():
        assert back[k].dtype == v.dtype
        np.testing.assert_array_equal(back[k], v)


def test_saved_model_reproduces_the_logged_validation_loss(tmp_path, random_splits):
    spec = tiny_spec(tmp_path, "m", epochs=1)
    result = train(spec, splits=random_splits)
    model, meta = load_model(os.path.join(spec.out_dir, "checkpoints", "last.ckpt"))
    assert meta["epoch"] == 0 and model.dtype == np.float64
    loss, _ = evaluate(model, batchify(random_splits.valid, 2), 10)
    assert abs(loss - result.records[0].valid_loss) < 1e-12


def test_checkpoint_errors(tmp_path):
    path = tmp_path / "x.ckpt"
    save_checkpoint(path, {"a": np.zeros(4)})
    with zipfile.ZipFile(path) as zf:
        manifest = json.loads(zf.read("manifest.json"))
        payload = zf.read("arrays/0.bin")
    manifest["version"] = 99
    with zipfile.ZipFile(path, "w") as zf:
        zf.writestr("manifest.json", json.dumps(manifest))
        zf.writestr("arrays/0.bin", payload)
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(path)
    manifest["version"] = 1
    with zipfile.ZipFile(path, "w") as zf:
        zf.writestr("manifest.json", json.dumps(manifest))
        zf.writestr("arrays/0.bin", payload[:-3])
    with pytest.raises(CheckpointError, match="bytes"):
        load_checkpoint(path)
    (tmp_path / "junk.ckpt").write_bytes(b"not a zip")
    with pytest.raises(CheckpointError, match="corrupt"):
        load_checkpoint(tmp_path / "junk.ckpt")


def test_svg_is_well_formed():
    svg = line_chart_svg({"a<b": ([1, 2, 3], [3.0, 2.0, 1.5]), "c": ([1], [2.0])}, title="t", xlabel="x")
    root = ET.fromstring(svg)
    assert root.tag.endswith("svg")
    assert "a&lt;b" in svg


# -- command line ------------------------------------------------------------------


def test_config_file_parsing(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("# comment\nd-model = 32\ncell = lstm   # trailing\n\nattn-layers = 1,2\n")
    values = parse_config_file(str(path))
    assert values == {"d-model": "32", "cell": "lstm", "attn-layers": "1,2"}
    path.write_text("nonsense = 3\n")
    with pytest.raises(ValueError, match="unknown key"):
        parse_config_file(str(path))
    path.write_text("just text\n")
    with pytest.raises(ValueError, match="key = value"):
        parse_config_file(str(path))


def test_model_flags_map_to_config():
    cfg = model_config_from({"d-model": 64, "cell": "lstm", "attn-layers": "1", "attn": "mean"})
    assert (cfg.d_model, cfg.cell, cfg.attn_layers, cfg.attn_variant) == (64, "lstm", (1,), "mean")
    assert model_config_from({"ff": "boom"}).wiring == "sharnn"
    assert model_config_from({"attn-layers": ""}).attn_layers == ()


def test_cli_train_eval_and_override(tmp_path, capsys):
    corpus = tmp_path / "c.bin"
    corpus.write_bytes(bytes(np.random.default_rng(1).integers(0, 256, 3000, dtype=np.uint8)))
    cfg = tmp_path / "run.cfg"
    cfg.write_text(f"corpus = {corpus}\nd-model = 8\nbptt = 10\nepochs = 5\nbatch-size = 2\n")
    out = tmp_path / "out"
    assert main(["train", "--config", str(cfg), "--epochs", "1", "--max-windows", "3", "--out", str(out)]) == 0
    text = capsys.readouterr().out
    assert "epoch 1:" in text and "epoch 2:" not in text
    with open(out / "run.json") as fh:
        spec = json.load(fh)["spec"]
    assert spec["model"]["d_model"] == 8 and spec["epochs"] == 1
    assert main(["eval", str(out / "checkpoints" / "best.ckpt"), "--corpus", str(corpus), "--split", "valid"]) == 0
    doc = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert doc["split"] == "valid" and doc["bpc"] > 0


def test_cli_gradcheck(capsys):
    assert main(["gradcheck", "--seeds", "1", "--component", "linear", "--component", "qrnn"]) == 0
    assert capsys.readouterr().out.count("PASS") == 2
