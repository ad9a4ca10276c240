"""Training loop, evaluation, and the sequential ablation-grid runner.

Timing boundary: ``seconds`` in every metrics record covers only the training
windows of an epoch (forward, backward, clipping, optimizer step).  Validation,
checkpoint writes and CSV/plot I/O happen outside the timed region.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import math
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, pack_training_state, save_checkpoint, unpack_training_state
from .config import ModelConfig, param_count
from .data import BatchPlan, CorpusSplits, batchify, iter_windows, load_corpus
from .model import Model, build_model
from .optim import Adam, Lamb, LRSchedule, clip_grad_norm
from .plots import write_line_chart

log = logging.getLogger(__name__)

METRICS_HEADER = ("epoch", "train_loss", "valid_loss", "valid_bpc", "seconds", "params")
REPORT_COLUMNS = ("experiment", "avg_time_per_epoch", "params", "loss", "bpc", "spec_hash")
TIMING_BOUNDARY = "seconds = wall-clock of the training windows only; evaluation and I/O excluded"
LN2 = math.log(2.0)


class NonFiniteLoss(FloatingPointError):
    """Training produced inf/nan; the run was aborted and the last good checkpoint kept."""


def bpc_from_nats(loss: float) -> float:
    """Bits per character for a mean cross-entropy given in nats."""
    if not loss >= 0.0:
        raise ValueError(f"loss must be a non-negative number of nats, got {loss}")
    return loss / LN2


# ---------------------------------------------------------------------------
# Specs and records
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class OptimSpec:
    name: str = "lamb"
    lr: float = 2e-3
    warmup: int = 0
    weight_decay: float = 0.0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-6
    clamp: tuple[float, float] = (0.0, 10.0)
    clip: float = 0.25

    def __post_init__(self):
        if self.name not in ("lamb", "adam"):
            raise ValueError(f"optimizer must be 'lamb' or 'adam', got {self.name!r}")
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))
        object.__setattr__(self, "clamp", tuple(float(c) for c in self.clamp))

    def build(self, params: dict):
        if self.name == "adam":
            return Adam(params, lr=self.lr, betas=self.betas, eps=self.eps, weight_decay=self.weight_decay)
        return Lamb(params, lr=self.lr, betas=self.betas, eps=self.eps, weight_decay=self.weight_decay,
                    clamp=self.clamp)


@dataclass(frozen=True)
class ExperimentSpec:
    """Everything needed to reproduce one training run.

    ``corpus_limit`` reads only the first bytes of the corpus file.
    ``stop_below_bpc`` ends training early once validation bpc drops below it.
    ``max_windows`` caps training windows per epoch (smoke grids only).
    """

    model: ModelConfig
    corpus: str
    optim: OptimSpec = OptimSpec()
    plan: BatchPlan = BatchPlan()
    epochs: int = 5
    seed: int = 0
    out_dir: str = "runs/default"
    tag: str = "default"
    corpus_limit: int | None = None
    eval_length: int | None = None
    stop_below_bpc: float | None = None
    max_windows: int | None = None
    max_eval_windows: int | None = None
    eval_test: bool = True
    dtype: str = "float32"

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}
        d["model"] = self.model.to_dict()
        d["optim"] = dataclasses.asdict(self.optim)
        d["optim"]["betas"] = list(self.optim.betas)
        d["optim"]["clamp"] = list(self.optim.clamp)
        d["plan"] = dataclasses.asdict(self.plan)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ExperimentSpec:
        d = dict(d)
        d["model"] = ModelConfig.from_dict(d["model"])
        d["optim"] = OptimSpec(**d["optim"])
        d["plan"] = BatchPlan(**d["plan"])
        return cls(**d)

    def spec_hash(self, ignore: tuple[str, ...] = ("out_dir",)) -> str:
        """Content hash of everything except where outputs go."""
        d = self.to_dict()
        for key in ignore:
            d.pop(key)
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    def resume_key(self) -> str:
        """Like ``spec_hash`` but also blind to the epoch budget, so a finished run can be extended."""
        return self.spec_hash(("out_dir", "epochs"))

    def replace(self, **changes) -> ExperimentSpec:
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True)
class MetricsRecord:
    epoch: int
    train_loss: float
    valid_loss: float
    valid_bpc: float
    seconds: float
    hours: float
    params: int

    def csv_row(self) -> list:
        return [self.epoch, f"{self.train_loss:.6f}", f"{self.valid_loss:.6f}", f"{self.valid_bpc:.6f}",
                f"{self.seconds:.3f}", self.params]


@dataclass
class TrainResult:
    spec: ExperimentSpec
    records: list[MetricsRecord]
    best_epoch: int
    best_valid_loss: float
    test_loss: float | None = None
    stopped_early: bool = False
    out_dir: str = ""

    @property
    def best_bpc(self) -> float:
        return bpc_from_nats(self.best_valid_loss)

    @property
    def test_bpc(self) -> float | None:
        return None if self.test_loss is None else bpc_from_nats(self.test_loss)


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


def evaluate(model: Model, tracks: np.ndarray, length: int, max_windows: int | None = None) -> tuple[float, float]:
    """Mean per-byte loss (nats) and bpc over ``tracks [n, B]``.

    Single pass with fixed-length windows, the last one shortened to cover the
    split; recurrent state and attention cache carry across windows.
    """
    tracks = np.asarray(tracks)
    if tracks.ndim != 2 or tracks.shape[0] < 2:
        raise ValueError(f"evaluation split too short: tracks of shape {tracks.shape}")
    if length < 1:
        raise ValueError(f"evaluation window must be positive, got {length}")
    was_training = model.training
    model.eval()
    total, count = 0.0, 0
    try:
        with T.no_grad():
            fstate = model.initial_state(tracks.shape[1])
            for w, start in enumerate(range(0, tracks.shape[0] - 1, length)):
                if max_windows is not None and w >= max_windows:
                    break
                x = tracks[start : start + length]
                y = tracks[start + 1 : start + 1 + length]
                x = x[: y.shape[0]]
                logits, fstate = model(x, fstate)
                total += float(T.cross_entropy_logits(logits, y).data) * y.size
                count += y.size
    finally:
        model.train(was_training)
    loss = total / count
    return loss, bpc_from_nats(loss)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def _epoch_rngs(seed: int, epoch: int) -> tuple[np.random.Generator, list[int]]:
    return np.random.default_rng([seed, epoch, 0]), [seed, epoch, 1]


def _write_metrics_csv(path: str, records: list[MetricsRecord]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRICS_HEADER)
        for r in records:
            writer.writerow(r.csv_row())


def _append_metrics_csv(path: str, record: MetricsRecord) -> None:
    with open(path, "a", newline="") as fh:
        csv.writer(fh).writerow(record.csv_row())


def _save(path: str, model: Model, optimizer, spec: ExperimentSpec, epoch: int, records, best) -> None:
    state = optimizer.state_dict()
    meta = {
        "config": spec.model.to_dict(),
        "spec": spec.to_dict(),
        "spec_hash": spec.spec_hash(),
        "resume_key": spec.resume_key(),
        "epoch": epoch,
        "records": [dataclasses.asdict(r) for r in records],
        "best": best,
        "optim": {"step": state["step"], "hyper": state["hyper"]},
    }
    save_checkpoint(path, pack_training_state(model.state_dict(), state), meta)


def load_model(path: str, dtype=None) -> tuple[Model, dict]:
    """Rebuild a model from a checkpoint; returns ``(model, meta)``."""
    arrays, meta = load_checkpoint(path)
    cfg = ModelConfig.from_dict(meta["config"])
    model_state, _ = unpack_training_state(arrays, None)
    if dtype is None:
        dtype = next(iter(model_state.values())).dtype
    model = build_model(cfg, seed=0, dtype=dtype)
    model.load_state_dict(model_state)
    return model, meta


def train(spec: ExperimentSpec, resume: bool = False, splits: CorpusSplits | None = None) -> TrainResult:
    """Run (or resume) the experiment, writing metrics, checkpoints and curves into ``spec.out_dir``."""
    out = spec.out_dir
    ckpt_dir = os.path.join(out, "checkpoints")
    os.makedirs(ckpt_dir, exist_ok=True)
    metrics_path = os.path.join(out, "metrics.csv")
    last_path = os.path.join(ckpt_dir, "last.ckpt")
    best_path = os.path.join(ckpt_dir, "best.ckpt")
    plan = spec.plan
    if splits is None:
        splits = load_corpus(spec.corpus, plan.batch_size, spec.corpus_limit)
    train_tracks = batchify(splits.train, plan.batch_size)
    valid_tracks = batchify(splits.valid, plan.batch_size)
    eval_len = spec.eval_length or plan.center

    dtype = np.dtype(spec.dtype)
    with T.default_dtype(dtype):
        model = build_model(spec.model, seed=spec.seed)
        optimizer = spec.optim.build(dict(model.named_parameters()))
    schedule = LRSchedule(spec.optim.lr, spec.optim.warmup)
    n_params = param_count(spec.model)["total"]

    records: list[MetricsRecord] = []
    best = {"epoch": -1, "valid_loss": math.inf}
    start_epoch = 0
    if resume and os.path.exists(last_path):
        arrays, meta = load_checkpoint(last_path)
        if meta.get("resume_key") != spec.resume_key():
            raise ValueError(f"checkpoint {last_path} belongs to a different experiment")
        model_state, optim_state = unpack_training_state(arrays, meta["optim"])
        model.load_state_dict(model_state)
        optimizer.load_state_dict(optim_state)
        records = [MetricsRecord(**r) for r in meta["records"]]
        best = meta["best"]
        start_epoch = meta["epoch"] + 1
        log.info("resumed %s at epoch %d", spec.tag, start_epoch)
    _write_metrics_csv(metrics_path, records)
    with open(os.path.join(out, "run.json"), "w") as fh:
        json.dump({"spec": spec.to_dict(), "spec_hash": spec.spec_hash(), "timing_boundary": TIMING_BOUNDARY},
                  fh, indent=1)

    stopped_early = bool(records) and spec.stop_below_bpc is not None and records[-1].valid_bpc < spec.stop_below_bpc
    params = model.parameters()
    for epoch in range(start_epoch, spec.epochs):
        if stopped_early:
            break
        length_rng, dropout_seed = _epoch_rngs(spec.seed, epoch)
        model.reseed_dropout(dropout_seed)
        model.train()
        fstate = model.initial_state(plan.batch_size)
        loss_sum, tokens = 0.0, 0
        t0 = time.perf_counter()
        with T.default_dtype(dtype):
            for w, (x, y) in enumerate(iter_windows(plan, train_tracks, length_rng)):
                if spec.max_windows is not None and w >= spec.max_windows:
                    break
                logits, fstate = model(x, fstate)
                loss = T.cross_entropy_logits(logits, y)
                value = float(loss.data)
                if not math.isfinite(value):
                    raise NonFiniteLoss(f"{spec.tag}: loss {value} at epoch {epoch + 1}, window {w}")
                loss.backward()
                clip_grad_norm(params, spec.optim.clip)
                optimizer.lr = schedule(optimizer.state.step, epoch)
                optimizer.step()
                model.zero_grad()
                loss_sum += value * y.size
                tokens += y.size
        seconds = time.perf_counter() - t0

        with T.default_dtype(dtype):
            valid_loss, valid_bpc = evaluate(model, valid_tracks, eval_len, spec.max_eval_windows)
        hours = (records[-1].hours if records else 0.0) + seconds / 3600.0
        record = MetricsRecord(epoch + 1, loss_sum / max(tokens, 1), valid_loss, valid_bpc, round(seconds, 3),
                               hours, n_params)
        records.append(record)
        _append_metrics_csv(metrics_path, record)
        log.info("%s epoch %d: train %.4f valid %.4f (%.3f bpc) %.1fs", spec.tag, record.epoch,
                 record.train_loss, valid_loss, valid_bpc, seconds)
        if valid_loss < best["valid_loss"]:
            best = {"epoch": epoch + 1, "valid_loss": valid_loss}
            _save(best_path, model, optimizer, spec, epoch, records, best)
        _save(last_path, model, optimizer, spec, epoch, records, best)
        if spec.stop_below_bpc is not None and valid_bpc < spec.stop_below_bpc:
            stopped_early = True

    write_run_curves(os.path.join(out, "curves"), spec.tag, records)
    result = TrainResult(spec, records, best["epoch"], best["valid_loss"], stopped_early=stopped_early, out_dir=out)
    if spec.eval_test and os.path.exists(best_path):
        best_model, _ = load_model(best_path)
        with T.default_dtype(dtype):
            result.test_loss, _ = evaluate(best_model, batchify(splits.test, plan.batch_size), eval_len,
                                           spec.max_eval_windows)
    return result


def write_run_curves(curve_dir: str, tag: str, records: list[MetricsRecord]) -> list[str]:
    if not records:
        return []
    os.makedirs(curve_dir, exist_ok=True)
    epochs = [r.epoch for r in records]
    bpcs = [r.valid_bpc for r in records]
    hours = [r.hours for r in records]
    paths = [os.path.join(curve_dir, f"{tag}_bpc_vs_epoch.svg"), os.path.join(curve_dir, f"{tag}_bpc_vs_time.svg")]
    write_line_chart(paths[0], {tag: (epochs, bpcs)}, title=f"{tag}: validation bpc", xlabel="epoch", ylabel="bpc")
    write_line_chart(paths[1], {tag: (hours, bpcs)}, title=f"{tag}: validation bpc", xlabel="training hours",
                     ylabel="bpc")
    return paths


# ---------------------------------------------------------------------------
# Grid
# ---------------------------------------------------------------------------


@dataclass
class GridReport:
    rows: list[dict]
    failures: list[dict] = field(default_factory=list)
    results: dict[str, TrainResult] = field(default_factory=dict)


def run_grid(specs: list[ExperimentSpec], out_dir: str, splits: CorpusSplits | None = None) -> GridReport:
    """Train every spec in turn (always sequentially, so timings are comparable) and write a report.

    A failing experiment is recorded under ``failures`` and the grid moves on.
    """
    if not specs:
        raise ValueError("run_grid needs at least one spec")
    tags = [s.tag for s in specs]
    if len(set(tags)) != len(tags):
        raise ValueError(f"experiment tags must be unique, got {tags}")
    os.makedirs(out_dir, exist_ok=True)
    report = GridReport([])
    for spec in specs:
        run_dir = os.path.join(out_dir, "runs", _slug(spec.tag))
        spec = spec.replace(out_dir=run_dir)
        try:
            result = train(spec, splits=splits)
        except Exception as exc:  # noqa: BLE001 - the grid must survive one bad experiment
            log.exception("experiment %s failed", spec.tag)
            report.failures.append({"experiment": spec.tag, "spec_hash": spec.spec_hash(),
                                    "error": f"{type(exc).__name__}: {exc}"})
            continue
        report.results[spec.tag] = result
        loss = result.test_loss if result.test_loss is not None else result.best_valid_loss
        report.rows.append({
            "experiment": spec.tag,
            "avg_time_per_epoch": float(np.mean([r.seconds for r in result.records])),
            "params": param_count(spec.model)["total"],
            "loss": loss,
            "bpc": bpc_from_nats(loss),
            "spec_hash": spec.spec_hash(),
        })

    with open(os.path.join(out_dir, "report.csv"), "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS)
        writer.writeheader()
        writer.writerows(report.rows)
    with open(os.path.join(out_dir, "report.json"), "w") as fh:
        json.dump({"columns": list(REPORT_COLUMNS), "rows": report.rows, "failures": report.failures,
                   "mode": "sequential", "timing_boundary": TIMING_BOUNDARY}, fh, indent=1)

    curve_dir = os.path.join(out_dir, "curves")
    for tag, result in report.results.items():
        write_run_curves(curve_dir, _slug(tag), result.records)
    if report.results:
        by_epoch = {t: ([r.epoch for r in res.records], [r.valid_bpc for r in res.records])
                    for t, res in report.results.items()}
        by_time = {t: ([r.hours for r in res.records], [r.valid_bpc for r in res.records])
                   for t, res in report.results.items()}
        write_line_chart(os.path.join(curve_dir, "bpc_vs_epoch.svg"), by_epoch, title="validation bpc",
                         xlabel="epoch", ylabel="bpc")
        write_line_chart(os.path.join(curve_dir, "bpc_vs_time.svg"), by_time, title="validation bpc",
                         xlabel="training hours", ylabel="bpc")
    return report


def _slug(tag: str) -> str:
    return "".join(c if c.isalnum() or c in "-_." else "_" for c in tag).strip("_") or "run"
