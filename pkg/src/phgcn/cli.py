"""``phgcn`` command line: gen, train, eval, gradcheck, sweep, graph-dump.

Exit codes: 0 success, 1 check failure, 2 config/usage, 3 I/O, 4 numeric divergence.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, load_config
from .dataset import NonFiniteError, PartitionSpec, PHGFError, generate_synthetic, pool_parts, read_phgf, write_phgf
from .gcnnet import CheckpointError, read_checkpoint, write_checkpoint
from .optim import VARIANTS, DivergenceError, grad_check, random_instance, train
from .partgraph import build_topology, edge_weights, row_normalize
from .retrieval import evaluate
from .rng import STREAM_GRADCHECK, derive_seed

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_IO, EXIT_DIVERGED = 0, 1, 2, 3, 4

log = logging.getLogger("phgcn")


class CommandError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _config(path) -> RunConfig:
    try:
        return load_config(path)
    except ConfigError as exc:
        raise CommandError(f"invalid config: {exc}", EXIT_CONFIG) from None
    except OSError as exc:
        raise CommandError(f"cannot read config: {exc}", EXIT_IO) from None


def _read_data(path):
    try:
        return read_phgf(path)
    except NonFiniteError as exc:
        raise CommandError(f"{path}: {exc}", EXIT_DIVERGED) from None
    except (PHGFError, OSError, ValueError) as exc:
        raise CommandError(f"{path}: {exc}", EXIT_IO) from None


def _write_text(path, text: str) -> None:
    try:
        Path(path).write_text(text)
    except OSError as exc:
        raise CommandError(f"cannot write {path}: {exc}", EXIT_IO) from None


def history_path(checkpoint) -> Path:
    p = Path(checkpoint)
    return p.with_name(p.stem + ".history.json")


def checkpoint_meta(cfg: RunConfig, classes) -> dict:
    return {
        "variant": cfg.variant,
        "levels": list(cfg.levels),
        "delta": cfg.model.delta,
        "hidden": cfg.model.hidden,
        "num_classes": len(classes),
        "classes": [int(c) for c in classes],
        "seed": cfg.seed,
        "config_digest": cfg.digest(),
    }


# --- commands ---------------------------------------------------------------


def cmd_gen(args) -> int:
    cfg = _config(args.config)
    ds = generate_synthetic(cfg.synth_config())
    out = args.out or cfg.paths.get("data")
    if not out:
        raise CommandError("no output path given", EXIT_CONFIG)
    try:
        write_phgf(ds, out, {"config_digest": cfg.digest()})
    except OSError as exc:
        raise CommandError(f"cannot write {out}: {exc}", EXIT_IO) from None
    print(f"wrote {len(ds)} images to {out}")
    return EXIT_OK


def run_training(cfg: RunConfig, ds):
    tcfg = cfg.train_config()
    params, history, classes = train(ds, cfg.spec, tcfg, eps=cfg.model.eps, beta=cfg.model.beta,
                                     delta=cfg.delta, variant=cfg.variant, hidden=cfg.model.hidden)
    return params, history, classes


def cmd_train(args) -> int:
    cfg = _config(args.config)
    ds = _read_data(args.data)
    try:
        params, history, classes = run_training(cfg, ds)
    except DivergenceError as exc:
        raise CommandError(f"training diverged: {exc}", EXIT_DIVERGED) from None
    except ValueError as exc:
        raise CommandError(str(exc), EXIT_CONFIG) from None
    if any(not np.isfinite(v) for v in history.loss):
        raise CommandError("training diverged: non-finite loss in history", EXIT_DIVERGED)
    try:
        write_checkpoint(params, args.out, checkpoint_meta(cfg, classes))
    except OSError as exc:
        raise CommandError(f"cannot write {args.out}: {exc}", EXIT_IO) from None
    hist = {"config_digest": cfg.digest(), **history.to_dict()}
    _write_text(history_path(args.out), json.dumps(hist, indent=2) + "\n")
    if history.loss:
        print(f"trained {len(history.loss)} epochs, final loss {history.loss[-1]:.6f}")
    else:
        print("0 epochs: wrote initial parameters")
    return EXIT_OK


def cmd_eval(args) -> int:
    try:
        params, meta = read_checkpoint(args.checkpoint)
    except (CheckpointError, OSError) as exc:
        raise CommandError(f"{args.checkpoint}: {exc}", EXIT_IO) from None
    ds = _read_data(args.data)
    variant = args.variant or meta.get("variant", "phgcn")
    delta = meta.get("delta", "auto")
    spec = PartitionSpec(tuple(meta.get("levels", (1, 3, 6))))
    try:
        report = evaluate(params, ds, spec, variant, None if delta == "auto" else float(delta),
                          seed=meta.get("seed"), config_digest=meta.get("config_digest"))
    except ValueError as exc:
        raise CommandError(str(exc), EXIT_CONFIG) from None
    text = report.to_json()
    out = args.out or Path(args.checkpoint).with_name(Path(args.checkpoint).stem + f".{variant}.eval.json")
    _write_text(out, text)
    sys.stdout.write(text)
    return EXIT_OK


def gradcheck_report(cfg: RunConfig, backward=None):
    g = cfg.gradcheck
    params, instance = random_instance(derive_seed(cfg.seed, STREAM_GRADCHECK), cfg.spec, g.d0,
                                       g.num_classes, cfg.model.hidden, cfg.model.eps, cfg.model.beta)
    return grad_check(params, instance, step=g.step, max_coords=g.max_coords, seed=cfg.seed,
                      backward=backward)


def cmd_gradcheck(args) -> int:
    cfg = _config(args.config)
    report = gradcheck_report(cfg)
    out = {"config_digest": cfg.digest(), "dtype": "float64", "step": cfg.gradcheck.step,
           "passed": report.passed, **report.to_dict()}
    sys.stdout.write(json.dumps(out, indent=2) + "\n")
    return EXIT_OK if report.passed else EXIT_CHECK


def parse_grid(text: str) -> list[float]:
    try:
        return [float(v) for v in text.replace(" ", "").split(",") if v]
    except ValueError:
        raise CommandError(f"bad grid {text!r}", EXIT_CONFIG) from None


def sweep_rows(cfg: RunConfig, ds, param: str, grid: list[float]) -> list[dict]:
    rows = []
    for value in grid:
        try:
            point = cfg.with_model(**{param: value})
        except ConfigError as exc:
            raise CommandError(f"grid value {value}: {exc}", EXIT_CONFIG) from None
        params, _, _ = run_training(point, ds)
        report = evaluate(params, ds, point.spec, point.variant, point.delta)
        rows.append({"param_value": value, "map": report.map, "cmc1": report.cmc["1"],
                     "cmc5": report.cmc["5"], "cmc10": report.cmc["10"], "seed": cfg.seed,
                     "config_digest": cfg.digest()})
    return rows


def cmd_sweep(args) -> int:
    cfg = _config(args.config)
    grid = parse_grid(args.grid)
    if not grid:
        raise CommandError("empty grid", EXIT_CONFIG)
    for value in grid:
        try:
            cfg.with_model(**{args.param: value})
        except ConfigError as exc:
            raise CommandError(f"grid value {value}: {exc}", EXIT_CONFIG) from None
    ds = _read_data(args.data) if args.data else generate_synthetic(cfg.synth_config())
    try:
        rows = sweep_rows(cfg, ds, args.param, grid)
    except DivergenceError as exc:
        raise CommandError(f"training diverged: {exc}", EXIT_DIVERGED) from None
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    if args.out:
        _write_text(args.out, buf.getvalue())
    sys.stdout.write(buf.getvalue())
    return EXIT_OK


def graph_dump(cfg: RunConfig, ds, index: int) -> dict:
    spec = cfg.spec
    topo = build_topology(spec)
    x = pool_parts(ds.features[index], spec)
    A = edge_weights(x, topo, cfg.delta)
    return {
        "config_digest": cfg.digest(),
        "image": index,
        "label": int(ds.labels[index]),
        "nodes": [{"level": p, "index": i} for p, i in topo.nodes],
        "edges": [{"a": a, "b": b, "weight": float(A[a, b])} for a, b in topo.edges],
        "row_normalized": row_normalize(A).tolist(),
    }


def cmd_graphdump(args) -> int:
    cfg = _config(args.config)
    ds = _read_data(args.data)
    if not 0 <= args.index < len(ds):
        raise CommandError(f"image index {args.index} out of range [0, {len(ds)})", EXIT_CONFIG)
    try:
        dump = graph_dump(cfg, ds, args.index)
    except ValueError as exc:
        raise CommandError(str(exc), EXIT_CONFIG) from None
    text = json.dumps(dump, indent=2) + "\n"
    if args.out:
        _write_text(args.out, text)
    sys.stdout.write(text)
    return EXIT_OK


# --- parser -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="phgcn",
        description="Part-based hierarchical GCN for person retrieval on pooled feature maps. "
                    "Config defaults: eps=0.75, beta=0.3, levels [1, 3, 6], 60 epochs, batch 64, "
                    "lr gcn 0.01 / head 1.0, decay x0.1 from epoch 40.",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="write a synthetic PHGF dataset and its split file")
    p.add_argument("config")
    p.add_argument("out", nargs="?", help="PHGF output path (default: paths.data in the config)")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train a model; writes PHGM checkpoint, sidecar and history")
    p.add_argument("config")
    p.add_argument("data", help="PHGF dataset with a train split")
    p.add_argument("out", help="PHGM checkpoint path")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the query/gallery split")
    p.add_argument("checkpoint")
    p.add_argument("data")
    p.add_argument("--variant", choices=VARIANTS, default=None,
                   help="embedding variant (default: the variant the checkpoint was trained as)")
    p.add_argument("--out", help="report path (default: <checkpoint>.<variant>.eval.json)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of the backward pass (float64)")
    p.add_argument("config")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("sweep", help="train + evaluate over a grid of eps or beta, CSV output")
    p.add_argument("config")
    p.add_argument("--param", choices=("eps", "beta"), required=True)
    p.add_argument("--grid", required=True, help="comma-separated values, e.g. 0.55,0.65,0.75")
    p.add_argument("--data", help="PHGF dataset (default: generate from the config)")
    p.add_argument("--out", help="CSV path (also printed to stdout)")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("graph-dump", help="dump nodes, weighted edges and the row-normalized adjacency")
    p.add_argument("config")
    p.add_argument("data")
    p.add_argument("index", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_graphdump)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CommandError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
