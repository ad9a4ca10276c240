"""Command-line entry point: ``shaq train|eval|grid|gradcheck``."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import tensor as T
from .config import ModelConfig, table1_configs, table2_configs, toy_shaq_config
from .data import BatchPlan, batchify, load_corpus
from .gradcheck import SUITE_COMPONENTS, component_suite
from .harness import ExperimentSpec, OptimSpec, evaluate, load_model, run_grid, train

# flag name -> (argparse kwargs); config files use the same names
MODEL_FLAGS = {
    "d-model": dict(type=int),
    "blocks": dict(type=int),
    "cell": dict(choices=("lstm", "qrnn")),
    "qrnn-w": dict(type=int),
    "attn-layers": dict(type=str, help="comma-separated 1-based block indices, e.g. 3 or 3,3; empty for none"),
    "attn": dict(choices=("gated", "ungated", "mean")),
    "ff": dict(choices=("boom", "fc", "none")),
    "boom-inner": dict(type=int),
    "wiring": dict(choices=("sharnn", "shaq")),
}
RUN_FLAGS = {
    "corpus": dict(type=str),
    "epochs": dict(type=int),
    "optimizer": dict(choices=("lamb", "adam")),
    "lr": dict(type=float),
    "seed": dict(type=int),
    "out": dict(type=str),
    "batch-size": dict(type=int),
    "bptt": dict(type=int, help="window-length centre"),
    "corpus-limit": dict(type=int, help="read only the first N bytes of the corpus"),
    "max-windows": dict(type=int, help="cap training windows per epoch"),
}
ALL_FLAGS = {**MODEL_FLAGS, **RUN_FLAGS}


def parse_config_file(path: str) -> dict[str, str]:
    """Read ``key = value`` lines; ``#`` starts a comment.  Keys are flag names."""
    values = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            key = key.lstrip("-")
            if key not in ALL_FLAGS:
                raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
            values[key] = value
    return values


def _merged(args: argparse.Namespace) -> dict:
    """Config-file values, overridden by any flag given on the command line."""
    merged = {}
    if getattr(args, "config", None):
        for key, raw in parse_config_file(args.config).items():
            spec = ALL_FLAGS[key]
            merged[key] = spec.get("type", str)(raw)
            if "choices" in spec and merged[key] not in spec["choices"]:
                raise ValueError(f"config value {key} = {raw!r} not in {spec['choices']}")
    for key in ALL_FLAGS:
        value = getattr(args, key.replace("-", "_"), None)
        if value is not None:
            merged[key] = value
    return merged


def _parse_layers(text: str) -> tuple[int, ...]:
    return tuple(int(t) for t in str(text).replace(" ", "").split(",") if t)


def model_config_from(values: dict, base: ModelConfig | None = None) -> ModelConfig:
    cfg = base or toy_shaq_config()
    changes = {}
    if "d-model" in values:
        changes["d_model"] = values["d-model"]
    if "blocks" in values:
        changes["n_blocks"] = values["blocks"]
    if "cell" in values:
        changes["cell"] = values["cell"]
    if "qrnn-w" in values:
        changes["qrnn_window"] = values["qrnn-w"]
    if "attn-layers" in values:
        changes["attn_layers"] = _parse_layers(values["attn-layers"])
    if "attn" in values:
        changes["attn_variant"] = values["attn"]
    if "ff" in values:
        changes["ff_kind"] = values["ff"]
    if "boom-inner" in values:
        changes["ff_inner"] = values["boom-inner"]
    if "bptt" in values:
        changes["window"] = values["bptt"]
    if "wiring" in values:
        changes["wiring"] = values["wiring"]
    elif changes.get("ff_kind", cfg.ff_kind) != "none" and cfg.wiring == "shaq":
        # the shaq block has no feed-forward slot, so asking for one implies the sharnn block
        changes["wiring"] = "sharnn"
    return cfg.replace(**changes)


def spec_from(values: dict, cfg: ModelConfig, tag: str = "run") -> ExperimentSpec:
    if "corpus" not in values:
        raise SystemExit("error: --corpus is required (flag or config file)")
    optim = OptimSpec(name=values.get("optimizer", "lamb"), lr=values.get("lr", 2e-3))
    plan = BatchPlan(batch_size=values.get("batch-size", 16), center=values.get("bptt", cfg.window),
                     seed=values.get("seed", 0))
    return ExperimentSpec(
        model=cfg, corpus=values["corpus"], optim=optim, plan=plan, epochs=values.get("epochs", 5),
        seed=values.get("seed", 0), out_dir=values.get("out", "runs/" + tag), tag=tag,
        corpus_limit=values.get("corpus-limit"), max_windows=values.get("max-windows"),
    )


def _add_flags(p: argparse.ArgumentParser, flags: dict) -> None:
    for name, kwargs in flags.items():
        p.add_argument(f"--{name}", default=None, **kwargs)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="shaq", description="Byte-level SHA-RNN / SHAQ experiments.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one configuration")
    p.add_argument("--config", type=str, help="key = value file; flags override it")
    p.add_argument("--resume", action="store_true", help="continue from checkpoints/last.ckpt in --out")
    _add_flags(p, ALL_FLAGS)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a corpus split")
    p.add_argument("checkpoint")
    p.add_argument("--split", choices=("valid", "test"), default="test")
    _add_flags(p, {k: RUN_FLAGS[k] for k in ("corpus", "batch-size", "bptt", "corpus-limit")})

    p = sub.add_parser("grid", help="run an ablation grid and write report.csv/report.json")
    p.add_argument("--config", type=str)
    p.add_argument("--table", choices=("table1", "table2"), default="table2")
    _add_flags(p, ALL_FLAGS)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks on every component")
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--component", action="append", choices=SUITE_COMPONENTS)
    return parser


def cmd_train(args) -> int:
    values = _merged(args)
    cfg = model_config_from(values)
    result = train(spec_from(values, cfg, tag="train"), resume=args.resume)
    for r in result.records:
        print(f"epoch {r.epoch}: train {r.train_loss:.4f} valid {r.valid_loss:.4f} bpc {r.valid_bpc:.4f} "
              f"({r.seconds:.1f}s)")
    if result.test_bpc is not None:
        print(f"test bpc {result.test_bpc:.4f} (best epoch {result.best_epoch})")
    print(f"outputs in {result.out_dir}")
    return 0


def cmd_eval(args) -> int:
    values = _merged(args)
    if "corpus" not in values:
        raise SystemExit("error: --corpus is required")
    model, meta = load_model(args.checkpoint)
    batch = values.get("batch-size", meta["spec"]["plan"]["batch_size"])
    length = values.get("bptt", meta["spec"]["plan"]["center"])
    splits = load_corpus(values["corpus"], batch, values.get("corpus-limit"))
    with T.default_dtype(model.dtype):
        loss, bpc = evaluate(model, batchify(getattr(splits, args.split), batch), length)
    print(json.dumps({"split": args.split, "loss": loss, "bpc": bpc}))
    return 0


def cmd_grid(args) -> int:
    values = _merged(args)
    base = model_config_from(values, toy_shaq_config().replace(cell="lstm", wiring="sharnn", attn_variant="gated",
                                                               ff_kind="boom", n_blocks=4, attn_layers=(3,)))
    table = table1_configs if args.table == "table1" else table2_configs
    overrides = {k: getattr(base, k) for k in ("window", "mem_total", "ff_inner", "qrnn_window")}
    configs = table(base.d_model, **overrides)
    specs = [spec_from(values, cfg, tag=label) for label, cfg in configs.items()]
    out = values.get("out", f"runs/{args.table}")
    report = run_grid(specs, out)
    for row in report.rows:
        print(f"{row['experiment']:<24} {row['avg_time_per_epoch']:9.1f}s {row['params']:>10,d} "
              f"{row['loss']:.4f} {row['bpc']:.4f}")
    for failure in report.failures:
        print(f"FAILED {failure['experiment']}: {failure['error']}")
    print(f"report in {out}")
    return 1 if report.failures else 0


def cmd_gradcheck(args) -> int:
    components = args.component or SUITE_COMPONENTS
    results = component_suite(seeds=range(args.seeds), components=components)
    worst = 0.0
    for name, err in results.items():
        ok = err < args.tol
        worst = max(worst, err)
        print(f"{'PASS' if ok else 'FAIL'} {name:<20} max rel err {err:.2e}")
    return 0 if worst < args.tol else 1


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    handler = {"train": cmd_train, "eval": cmd_eval, "grid": cmd_grid, "gradcheck": cmd_gradcheck}[args.command]
    return handler(args)


if __name__ == "__main__":
    sys.exit(main())
