"""Command-line interface.

Subcommands: gradcheck (adapter-block gradients vs finite differences),
memcheck (randomized memory property suites), simulate (episode runs),
ablate (CSV sweep over the memory/retrieval/adapter axes), mem-export and
mem-import (memory file round-trip).

Exit codes: 0 success, 1 property violation, 2 usage/config error.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .adapter import block_params, grad_check
from .config import SCHEMA, ConfigError, load_config, parse_override_pairs
from .episode import MemoryConfig, run_episode
from .memory import (
    MemoryEntry,
    base_bytes,
    insert_or_replace,
    load_base,
    new_base,
    retrieve_topk,
    save_base,
    stats,
)

EXIT_OK = 0
EXIT_VIOLATION = 1
EXIT_USAGE = 2


# ---------------------------------------------------------------------------
# gradcheck


def cmd_gradcheck(args) -> int:
    if args.trials < 1:
        print("gradcheck: --trials must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    b, h, w, c, r = args.shape
    if r >= c:
        print(f"gradcheck: bottleneck {r} must be < channels {c}", file=sys.stderr)
        return EXIT_USAGE
    results = []
    worst = 0.0
    failed = False
    for i in range(args.trials):
        seed = args.seed + i
        rng = np.random.default_rng(seed)
        params = block_params(rng, c, bottleneck=r, num_heads=args.heads)
        x = rng.normal(size=(b, h, w, c))
        report = grad_check(params, x, h=args.h, tol=args.tol, mutate=args.mutate)
        worst = max(worst, report.max_rel_err)
        failed = failed or not report.passed
        results.append(
            {
                "seed": seed,
                "max_rel_err": report.max_rel_err,
                "passed": report.passed,
                "failing": report.failing(),
            }
        )
        status = "ok" if report.passed else "FAIL"
        print(f"trial seed={seed}: max_rel_err={report.max_rel_err:.3e} {status}")
    print(f"gradcheck: {args.trials} trials, worst max_rel_err={worst:.3e}, tol={args.tol}")
    if args.report:
        payload = {
            "trials": args.trials,
            "shape": {"B": b, "H": h, "W": w, "C": c, "r": r},
            "h": args.h,
            "tol": args.tol,
            "mutate": args.mutate,
            "worst_max_rel_err": worst,
            "results": results,
        }
        Path(args.report).write_text(json.dumps(payload, sort_keys=True, indent=2))
        print(f"wrote {args.report}")
    return EXIT_VIOLATION if failed else EXIT_OK


# ---------------------------------------------------------------------------
# memcheck


def _oracle_topk(base, query, k):
    """Independent pure-python full sort of s_i + sigmoid(y_hat_i)."""
    q = [float(v) for v in np.asarray(query).ravel()]
    qn = math.sqrt(sum(v * v for v in q))
    totals = []
    for e in base.entries:
        emb = [float(v) for v in e.image_embedding.ravel()]
        en = math.sqrt(sum(v * v for v in emb))
        if en < 1e-12 or qn < 1e-12:
            s = 0.0
        else:
            s = max(-1.0, min(1.0, sum(a * b for a, b in zip(emb, q)) / (en * qn)))
        if e.y_hat >= 0:
            conf = 1.0 / (1.0 + math.exp(-e.y_hat))
        else:
            conf = math.exp(e.y_hat) / (1.0 + math.exp(e.y_hat))
        totals.append(s + conf)
    order = sorted(range(len(totals)), key=lambda i: (-totals[i], i))
    return order[: min(k, len(order))]


def _random_base(rng, capacity, count, shape):
    base = new_base(capacity, shape)
    for _ in range(count):
        base.entries.append(
            MemoryEntry(
                rng.normal(size=shape),
                rng.normal(size=shape),
                float(rng.normal()),
                rng.normal(size=shape),
            )
        )
    return base


def cmd_memcheck(args) -> int:
    rng = np.random.default_rng(args.seed)
    print(f"memcheck: {args.trials} trials, master seed {args.seed}")
    shape = (2, 2, 4)

    for trial in range(args.trials):
        trial_seed = int(rng.integers(0, 2**31 - 1))
        trng = np.random.default_rng(trial_seed)

        # retrieval oracle equivalence
        n = int(trng.integers(1, 33))
        base = _random_base(trng, 64, n, shape)
        query = trng.normal(size=shape)
        k = int(trng.integers(1, 9))
        got = retrieve_topk(base, query, k).indices
        want = _oracle_topk(base, query, k)
        if got != want:
            print(
                f"VIOLATION retrieval-oracle at trial seed {trial_seed}:"
                f" got {got}, oracle {want}",
                file=sys.stderr,
            )
            return EXIT_VIOLATION

        # replacement monotonicity on a full base
        cap = int(trng.integers(1, 6))
        base = _random_base(trng, cap, cap, shape)
        for _ in range(8):
            new = MemoryEntry(
                trng.normal(size=shape),
                trng.normal(size=shape),
                float(trng.normal()),
                trng.normal(size=shape),
            )
            before = base_bytes(base)
            out = insert_or_replace(base, new)
            if len(base) > cap:
                print(f"VIOLATION size at trial seed {trial_seed}", file=sys.stderr)
                return EXIT_VIOLATION
            if out.kind == "replaced" and not new.y_hat > out.old_confidence:
                print(
                    f"VIOLATION monotonicity at trial seed {trial_seed}",
                    file=sys.stderr,
                )
                return EXIT_VIOLATION
            if out.kind == "rejected" and base_bytes(base) != before:
                print(
                    f"VIOLATION rejected-insert mutated base at trial seed {trial_seed}",
                    file=sys.stderr,
                )
                return EXIT_VIOLATION

    # capacity-0 edge suite
    base = new_base(0, shape)
    zrng = np.random.default_rng(args.seed)
    for _ in range(10):
        out = insert_or_replace(
            base,
            MemoryEntry(
                zrng.normal(size=shape),
                zrng.normal(size=shape),
                0.0,
                zrng.normal(size=shape),
            ),
        )
        if out.kind != "rejected" or len(base) != 0:
            print("VIOLATION capacity-0 suite", file=sys.stderr)
            return EXIT_VIOLATION
    if retrieve_topk(base, zrng.normal(size=shape), 4).indices != []:
        print("VIOLATION capacity-0 retrieval", file=sys.stderr)
        return EXIT_VIOLATION

    print("memcheck: all suites passed")
    return EXIT_OK


# ---------------------------------------------------------------------------
# simulate / ablate


def _config_from_args(args):
    overrides = parse_override_pairs(args.set or [])
    overrides.update(getattr(args, "dotted_overrides", {}))
    return load_config(args.config, overrides)


def cmd_simulate(args) -> int:
    cfg = _config_from_args(args)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    report = run_episode(cfg.tasks(), cfg.memory(), cfg.seeds(), cfg.settings())
    for row in report.per_seed:
        path = out_dir / f"episode_seed{row['seed']}.json"
        path.write_text(
            json.dumps({"config": report.config, "result": row}, sort_keys=True, indent=2)
        )
    agg_path = out_dir / "aggregate.json"
    agg_path.write_text(report.to_json())
    print(
        f"simulate: {len(report.per_seed)} seed(s), mean DSC"
        f" {report.aggregate['mean_dsc']:.4f}, mean forgetting"
        f" {report.aggregate['mean_forgetting']:.4f}"
    )
    print(f"wrote {agg_path}")
    return EXIT_OK


ABLATION_CAPACITIES = (0, 16, 640)
ABLATION_RETRIEVALS = ("random", "confidence_similarity")


def _ablate_cell(payload):
    cfg_values, capacity, retrieval, adapter_on, confidence_on = payload
    from .config import RunConfig

    cfg = RunConfig(values=dict(cfg_values))
    mem = MemoryConfig(
        capacity=capacity,
        k=cfg["memory.k"],
        retrieval=retrieval,
        use_confidence=confidence_on,
    )
    settings = replace(cfg.settings(), adapter_enabled=adapter_on)
    report = run_episode(cfg.tasks(), mem, cfg.seeds(), settings)
    return {
        "capacity": capacity,
        "retrieval": retrieval,
        "adapter": "on" if adapter_on else "off",
        "confidence": "on" if confidence_on else "off",
        "seeds": len(cfg.seeds()),
        "mean_dsc": report.aggregate["mean_dsc"],
        "std_dsc": report.aggregate["std_dsc"],
        "mean_stream_dsc": report.aggregate["mean_stream_dsc"],
        "mean_forgetting": report.aggregate["mean_forgetting"],
    }


CSV_FIELDS = [
    "capacity",
    "retrieval",
    "adapter",
    "confidence",
    "seeds",
    "mean_dsc",
    "std_dsc",
    "mean_stream_dsc",
    "mean_forgetting",
]


def cmd_ablate(args) -> int:
    cfg = _config_from_args(args)
    cells = [
        (tuple(cfg.values.items()), capacity, retrieval, adapter_on, confidence_on)
        for capacity in ABLATION_CAPACITIES
        for retrieval in ABLATION_RETRIEVALS
        for adapter_on in (True, False)
        for confidence_on in (True, False)
    ]
    if args.workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=args.workers) as pool:
            rows = list(pool.map(_ablate_cell, cells))
    else:
        rows = [_ablate_cell(c) for c in cells]
    # order-stable output regardless of completion order
    rows.sort(key=lambda r: (r["capacity"], r["retrieval"], r["adapter"], r["confidence"]))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
        writer.writeheader()
        writer.writerows(rows)
    meta = out.with_suffix(out.suffix + ".meta.json")
    meta.write_text(
        json.dumps(
            {
                "effective_config": dict(cfg.values),
                "axes": {
                    "capacity": list(ABLATION_CAPACITIES),
                    "retrieval": list(ABLATION_RETRIEVALS),
                    "adapter": ["on", "off"],
                    "confidence": ["on", "off"],
                },
            },
            sort_keys=True,
            indent=2,
        )
    )
    print(f"ablate: wrote {len(rows)} cells to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# memory file round-trip


def cmd_mem_export(args) -> int:
    c, h, w = args.shape
    rng = np.random.default_rng(args.seed)
    base = _random_base(rng, args.capacity, min(args.count, args.capacity), (c, h, w))
    for i, e in enumerate(base.entries):
        e.source_tag = f"export/{i}"
    save_base(base, args.out)
    print(f"mem-export: wrote {len(base)} entries (capacity {args.capacity}) to {args.out}")
    return EXIT_OK


def cmd_mem_import(args) -> int:
    base = load_base(args.path)
    s = stats(base)
    print(
        f"mem-import: {s.count}/{s.capacity} entries, feature shape"
        f" {base.feature_shape}"
    )
    if s.count:
        print(
            f"  y_hat min={s.min_y_hat:.4f} max={s.max_y_hat:.4f} mean={s.mean_y_hat:.4f}"
        )
    if s.mean_pairwise_similarity is not None:
        print(f"  mean pairwise embedding similarity {s.mean_pairwise_similarity:.4f}")
    if args.out:
        save_base(base, args.out)
        print(f"  re-exported to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="memseg",
        description="Confidence-driven memory simulator: gradient checks,"
        " memory property suites, episodes, and ablation sweeps.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gradcheck", help="verify block gradients against finite differences")
    g.add_argument("--trials", type=int, default=10)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--shape", type=int, nargs=5, default=[3, 4, 4, 8, 4],
                   metavar=("B", "H", "W", "C", "r"))
    g.add_argument("--heads", type=int, default=2)
    g.add_argument("--h", type=float, default=1e-6)
    g.add_argument("--tol", type=float, default=1e-5)
    g.add_argument("--mutate", type=str, default=None,
                   help="gradient name to perturb by +10%% (failure demo)")
    g.add_argument("--report", type=str, default=None, help="write a JSON report here")
    g.set_defaults(func=cmd_gradcheck)

    m = sub.add_parser("memcheck", help="randomized memory property suites")
    m.add_argument("--trials", type=int, default=1000)
    m.add_argument("--seed", type=int, default=0)
    m.set_defaults(func=cmd_memcheck)

    s = sub.add_parser("simulate", help="run a continual-learning episode")
    s.add_argument("config", nargs="?", default=None, help="JSON config of flat dotted keys")
    s.add_argument("--out", type=str, default="reports")
    s.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config key (repeatable)")
    s.set_defaults(func=cmd_simulate)

    a = sub.add_parser("ablate", help="sweep memory/retrieval/adapter/confidence axes to CSV")
    a.add_argument("config", nargs="?", default=None)
    a.add_argument("--out", type=str, default="ablation.csv")
    a.add_argument("--workers", type=int, default=1)
    a.add_argument("--set", action="append", metavar="KEY=VALUE")
    a.set_defaults(func=cmd_ablate)

    e = sub.add_parser("mem-export", help="write a seeded demo memory file")
    e.add_argument("--capacity", type=int, default=640)
    e.add_argument("--count", type=int, default=640)
    e.add_argument("--shape", type=int, nargs=3, default=[16, 8, 8], metavar=("C", "H", "W"))
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", type=str, required=True)
    e.set_defaults(func=cmd_mem_export)

    i = sub.add_parser("mem-import", help="load a memory file and print stats")
    i.add_argument("path")
    i.add_argument("--out", type=str, default=None, help="re-export here (round trip)")
    i.set_defaults(func=cmd_mem_import)

    return parser


def _split_config_flags(argv: list[str]) -> tuple[list[str], dict]:
    """Pull ``--<config-key> value`` and ``--<config-key>=value`` shorthands
    out of argv before argparse sees them; any key from the config schema
    works (``--memory.capacity 0``, ``--retrieval none``)."""
    rest: list[str] = []
    overrides: dict = {}
    i = 0
    while i < len(argv):
        tok = argv[i]
        if tok.startswith("--"):
            key, eq, val = tok[2:].partition("=")
            if key in SCHEMA:
                if eq:
                    overrides[key] = val
                    i += 1
                    continue
                if i + 1 >= len(argv):
                    raise ConfigError(f"flag {tok} is missing a value")
                overrides[key] = argv[i + 1]
                i += 2
                continue
        rest.append(tok)
        i += 1
    return rest, overrides


def main(argv: list[str] | None = None) -> int:
    if argv is None:
        argv = sys.argv[1:]
    parser = build_parser()
    try:
        rest, overrides = _split_config_flags(list(argv))
        try:
            args = parser.parse_args(rest)
        except SystemExit as exc:  # argparse exits 2 on usage errors
            return int(exc.code or 0)
        if overrides and args.command not in ("simulate", "ablate"):
            raise ConfigError(
                f"config overrides are only valid for simulate/ablate:"
                f" {' '.join(sorted(overrides))}"
            )
        args.dotted_overrides = overrides
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
