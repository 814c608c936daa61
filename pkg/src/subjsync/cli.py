"""Command line: ``subjsync run|ablate|compare``."""
from __future__ import annotations

import argparse
import csv
import math
import sys
from pathlib import Path

import numpy as np

from subjsync.config import RunConfig, load_config
from subjsync.errors import ConfigError, InvariantViolation
from subjsync.metrics import METRIC_NAMES
from subjsync.pipeline import RunResult, bli_schedule, run
from subjsync.rfh import CSV_FIELDS
from subjsync.tensorio import save_tensor, write_pgm

EXIT_OK, EXIT_CONFIG, EXIT_INVARIANT = 0, 2, 3
TOGGLES = ("use_masks", "use_sharing", "use_rfh", "use_bli", "use_dropout")
METRICS_HEADER = ("run_id",) + TOGGLES + ("gamma", "lam", "tau", "seed") + METRIC_NAMES


def _fmt(value) -> str:
    if isinstance(value, bool):
        return str(int(value))
    if isinstance(value, float):
        return repr(value)
    return str(value)


def metrics_row(run_id: str, result: RunResult) -> list[str]:
    cfg = result.config
    vals = [run_id] + [getattr(cfg, t) for t in TOGGLES] + [cfg.gamma, cfg.lam, cfg.tau, cfg.seed]
    vals += [float(v) for v in result.metrics.as_dict().values()]
    return [_fmt(v) for v in vals]


def write_metrics(path: Path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        w.writerows(rows)


def write_run_artifacts(out_dir: Path, result: RunResult, run_id: str = "run", dump_caches: bool = False) -> None:
    cfg = result.config
    out_dir.mkdir(parents=True, exist_ok=True)
    write_metrics(out_dir / "metrics.csv", [metrics_row(run_id, result)])

    mask_dir = out_dir / "masks"
    mask_dir.mkdir(exist_ok=True)
    for t, step in enumerate(result.masks):
        for i, m in enumerate(step):
            write_pgm(mask_dir / f"t{t}_img{i}.pgm", m, cfg.grid_h, cfg.grid_w)

    with open(out_dir / "correspondence.csv", "w", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerow(("timestep", "layer") + CSV_FIELDS)
        for t, layer, table in result.tables:
            table.write_csv(fh, extra={"timestep": t, "layer": layer}, header=False)

    save_tensor(out_dir / "final_embeddings.ssyn", result.final_embeddings)

    if dump_caches:
        bli = bli_schedule(cfg)
        if bli.window and bli.layers and result.cache.is_complete(bli.window, bli.layers, cfg.n_images):
            result.cache.save(out_dir / "bli_cache.ssyn", bli.window, bli.layers, cfg.n_images)
        if result.subset_kv:
            # (timestep, layer) x {K, V} x |subset|*P x d_k
            keys = sorted(result.subset_kv)
            save_tensor(out_dir / "subset_kv.ssyn",
                        np.stack([[result.subset_kv[k].k, result.subset_kv[k].v] for k in keys]))


def _load(args) -> RunConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


def cmd_run(args) -> int:
    cfg = _load(args)
    result = run(cfg)
    write_run_artifacts(Path(args.out_dir), result, dump_caches=args.dump_caches)
    print(f"wrote {args.out_dir}")
    for k, v in result.metrics.as_dict().items():
        print(f"{k}: {v:.6f}")
    for flag in result.metrics.flags:
        print(f"note: {flag}")
    return EXIT_OK


def ablation_grid(base: RunConfig) -> list[tuple[str, RunConfig]]:
    """Component toggles, extra threshold methods, then the gamma and lambda sweeps."""
    cells = [
        ("full", base),
        ("no_mask", base.replace(use_masks=False)),
        ("no_rfh", base.replace(use_rfh=False)),
        ("no_pose_variation", base.replace(use_bli=False, use_dropout=False)),
    ]
    cells += [(f"threshold_{m}", base.replace(threshold=m)) for m in ("niblack", "sauvola", "adaptive_mean")]
    cells += [(f"gamma_{g}", base.replace(gamma=g)) for g in (0.3, 0.5, 0.7)]
    cells += [(f"lambda_{v}", base.replace(lam=v)) for v in (0.3, 0.5, 0.7)]
    return cells


def cmd_ablate(args) -> int:
    base = _load(args)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows, cache = [], None
    for run_id, cfg in ablation_grid(base):
        # every cell shares the seed and network, so the first pass is reusable
        result = run(cfg, cache=cache, full_vanilla=False)
        if cache is None and cfg.use_bli:
            cache = result.cache
        rows.append(metrics_row(run_id, result))
        print(run_id, " ".join(f"{k}={v:.4f}" for k, v in result.metrics.as_dict().items()))
    write_metrics(out_dir / "metrics.csv", rows)
    return EXIT_OK


def _read_metrics(path: Path) -> dict[str, dict[str, float]]:
    with open(path, newline="") as fh:
        return {row["run_id"]: {k: float(row[k]) for k in METRIC_NAMES} for row in csv.DictReader(fh)}


def cmd_compare(args) -> int:
    paths = [Path(d) / "metrics.csv" for d in (args.dir_a, args.dir_b)]
    for p in paths:
        if not p.is_file():
            print(f"error: missing {p}", file=sys.stderr)
            return EXIT_CONFIG
    try:
        a, b = (_read_metrics(p) for p in paths)
    except (KeyError, ValueError) as exc:
        print(f"error: malformed metrics.csv: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    shared = [r for r in a if r in b]
    if not shared and len(a) == 1 and len(b) == 1:
        shared = [(next(iter(a)), next(iter(b)))]
    else:
        shared = [(r, r) for r in shared]
    if not shared:
        print("error: no common run_id", file=sys.stderr)
        return EXIT_CONFIG
    for ra, rb in shared:
        label = ra if ra == rb else f"{ra} -> {rb}"
        for k in METRIC_NAMES:
            delta = b[rb][k] - a[ra][k]
            print(f"{label} {k} delta={delta:+.6f}" if not math.isnan(delta) else f"{label} {k} delta=nan")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="subjsync")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in (("run", cmd_run), ("ablate", cmd_ablate)):
        p = sub.add_parser(name)
        p.add_argument("config")
        p.add_argument("--out-dir", default=f"{name}_out")
        p.add_argument("--seed", type=int, default=None, help="overrides the config seed")
        if name == "run":
            p.add_argument("--dump-caches", action="store_true",
                           help="also write bli_cache.ssyn and, in subset mode, subset_kv.ssyn")
        p.set_defaults(func=fn)
    p = sub.add_parser("compare")
    p.add_argument("dir_a")
    p.add_argument("dir_b")
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InvariantViolation as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return EXIT_INVARIANT


if __name__ == "__main__":
    sys.exit(main())
