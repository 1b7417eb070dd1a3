"""``fastsum`` command line: end-to-end runs, kernel sweeps and the peak model.

Exit codes: 0 success, 1 an oracle check exceeded ``--tol``, 2 bad usage or an
unreadable chip spec.  Reported times exclude dataset generation; plan and
expansion construction is reported as ``setup_seconds``.
"""

import argparse
import json
import sys
import time

import numpy as np

from . import __version__, fgt, fmm
from ._backend import backend_name
from .core import (
    WEIGHT_MODES, DatasetSpec, KernelCounters, binomial, dtypes_for, generate_dataset, rng_for,
)
from .errors import ChipSpecError, FastSumError
from .perfmodel import load_chip, occupancy, peak_throughput, shared_fit
from .report import BenchReportRow, to_csv, to_json

ORACLE_LIMIT = 16384
TABLE2_TERMS = (8, 12, 16)
TABLE2_COUNTS = (2160, 9072, 36720, 147312, 589680, 2359152)
FGT_TERMS = (5, 9, 12)


class UsageError(Exception):
    pass


def _int_list(text):
    try:
        vals = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    if not vals:
        raise argparse.ArgumentTypeError("empty list")
    return vals


def _seed(text):
    v = int(text)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must fit an unsigned 64-bit integer")
    return v


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def _common(p):
    p.add_argument("--seed", type=_seed, default=0)
    p.add_argument("--threads", type=_positive_int, default=1)
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.add_argument("--out", default=None, help="write the report here instead of stdout")
    p.add_argument("--check", action="store_true", help="compare against the brute-force oracle")
    p.add_argument("--tol", type=float, default=None)
    p.add_argument("--precision", choices=("f32", "f64"), default="f64")


def build_parser():
    ap = argparse.ArgumentParser(prog="fastsum", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"fastsum {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fmm", help="2-D Cauchy-kernel FMM end to end")
    _common(p)
    p.add_argument("--n", type=_positive_int, default=2048)
    p.add_argument("--p", type=_int_list, default=[16], help="terms, comma-separated for a sweep")
    p.add_argument("--level", type=int, default=3)
    p.add_argument("--traversal", choices=fmm.TRAVERSALS, default="row")
    p.add_argument("--weights", choices=WEIGHT_MODES, default="unit")
    p.set_defaults(func=cmd_fmm, default_tol=1e-3)

    p = sub.add_parser("fgt", help="fast Gauss transform end to end")
    _common(p)
    p.add_argument("--n", type=_positive_int, default=4096)
    p.add_argument("--dim", type=int, default=2)
    p.add_argument("--sigma", type=float, default=0.1)
    p.add_argument("--p", type=_int_list, default=[12])
    p.add_argument("--sweep", action="store_true", help="one row per value of --p")
    p.add_argument("--r", type=float, default=0.5)
    p.add_argument("--eps-cut", type=float, default=1e-12)
    p.add_argument("--hermite-backend", choices=fgt.HERMITE_BACKENDS, default="recurrence")
    p.add_argument("--strategy", default="auto",
                   choices=["auto"] + [s.label for s in fgt.Strategy])
    p.add_argument("--weights", choices=WEIGHT_MODES, default="unit")
    p.set_defaults(func=cmd_fgt, default_tol=1e-6)

    bench = sub.add_parser("bench", help="kernel sweeps")
    bsub = bench.add_subparsers(dest="kernel", required=True)

    p = bsub.add_parser("m2l", help="batched M2L translations over idealized periodic plans")
    _common(p)
    p.add_argument("--terms", type=_int_list, default=list(TABLE2_TERMS))
    p.add_argument("--translations", type=_int_list, default=list(TABLE2_COUNTS))
    p.add_argument("--traversal", choices=fmm.TRAVERSALS, default="row")
    p.set_defaults(func=cmd_bench_m2l, default_tol=1e-10)

    p = bsub.add_parser("hermite", help="batched Hermite series evaluation")
    _common(p)
    p.add_argument("--n", type=_positive_int, default=4096, help="sources and targets")
    p.add_argument("--dim", type=int, default=2)
    p.add_argument("--sigma", type=float, default=0.1)
    p.add_argument("--r", type=float, default=0.5)
    p.add_argument("--terms", type=_int_list, default=list(FGT_TERMS))
    p.add_argument("--chunk-bytes", type=_positive_int, default=16384)
    p.add_argument("--hermite-backend", choices=fgt.HERMITE_BACKENDS, default="recurrence")
    p.set_defaults(func=cmd_bench_hermite, default_tol=1e-6)

    p = sub.add_parser("perf", help="analytical peak throughput and occupancy")
    p.add_argument("--chip", default="gt200", help="JSON chip spec path or bundled name")
    p.add_argument("--active", type=int, default=None)
    p.add_argument("--max", type=int, default=None, help="max threads (default: chip value)")
    p.add_argument("--item-bytes", type=int, default=None)
    p.add_argument("--shared", type=int, default=None, help="shared bytes (default: chip value)")
    p.add_argument("--reserved", type=int, default=0)
    p.add_argument("--format", choices=("text", "json"), default="text")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_perf)
    return ap


# ---------------------------------------------------------------- helpers


def _config(args):
    skip = {"func", "default_tol"}
    cfg = {k: v for k, v in vars(args).items() if k not in skip}
    cfg["backend"] = backend_name()
    return cfg


def _emit(args, rows):
    text = to_csv(rows) if args.format == "csv" else to_json(rows, _config(args), __version__)
    _write(args.out, text)


def _write(path, text):
    if path:
        with open(path, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _tol(args):
    return args.default_tol if args.tol is None else args.tol


def _oracle_guard(args, n):
    if args.check and n > ORACLE_LIMIT:
        raise UsageError(f"--check needs --n <= {ORACLE_LIMIT}")


def _status(rows, args):
    if not args.check:
        return 0
    tol = _tol(args)
    bad = [r for r in rows if not r.max_rel_error <= tol]
    for r in bad:
        print(f"check failed: {r.kernel} p={r.terms} error {r.max_rel_error:.3e} > tol {tol:.3e}",
              file=sys.stderr)
    return 1 if bad else 0


def pointwise_rel_error(values, ref):
    """``max_j |v_j - r_j| / |r_j|`` over entries with ``r_j != 0``."""
    ref = np.asarray(ref)
    err = np.abs(np.asarray(values, dtype=ref.dtype) - ref)
    nz = ref != 0
    return float((err[nz] / np.abs(ref[nz])).max()) if nz.any() else float(err.max(initial=0.0))


def normwise_rel_error(values, ref):
    """``max_j |v_j - r_j| / max_j |r_j|``."""
    ref = np.asarray(ref, dtype=np.float64)
    scale = np.abs(ref).max(initial=0.0)
    err = np.abs(np.asarray(values, dtype=np.float64) - ref).max(initial=0.0)
    return float(err / scale) if scale > 0 else float(err)


# ---------------------------------------------------------------- commands


def cmd_fmm(args):
    _oracle_guard(args, args.n)
    if args.level < 2:
        raise UsageError("--level must be >= 2")
    ps = generate_dataset(DatasetSpec(args.n, 2, args.seed, args.weights))
    z = ps.z
    ref = fmm.direct_sum(z, ps.q, threads=args.threads) if args.check else None
    rows = []
    for p in args.p:
        cfg = fmm.FmmConfig(p=p, level=args.level, traversal=args.traversal,
                            precision=args.precision)
        fmm.fmm_evaluate(z[:64], ps.q[:64], cfg)  # warm-up, untimed
        vals, c = fmm.fmm_evaluate(z, ps.q, cfg, threads=args.threads)
        ph = c.phases
        rows.append(BenchReportRow.from_counters(
            "fmm", p, args.n, c, ph["kernel"] + ph["evaluation"], ph["setup"],
            args.threads, args.precision, reduction_seconds=ph["reduction"],
            max_rel_error=pointwise_rel_error(vals, ref) if args.check else None,
        ))
    _emit(args, rows)
    return _status(rows, args)


def cmd_fgt(args):
    _oracle_guard(args, args.n)
    if len(args.p) > 1 and not args.sweep:
        raise UsageError("several --p values need --sweep")
    if not 1 <= args.dim <= 3:
        raise UsageError("--dim must be 1, 2 or 3")
    ps = generate_dataset(DatasetSpec(args.n, args.dim, args.seed, args.weights))
    # validate every configuration before spending time on the oracle
    cfgs = [fgt.FgtConfig(sigma=args.sigma, p=p, dimension=args.dim, r=args.r,
                          eps_cut=args.eps_cut, hermite_backend=args.hermite_backend,
                          strategy=args.strategy, precision=args.precision) for p in args.p]
    ref = fgt.direct_gauss(ps.x, ps.q, ps.x, args.sigma, threads=args.threads) if args.check else None
    rows = []
    for cfg in cfgs:
        fgt.fgt_evaluate(ps.x[:64], ps.q[:64], ps.x[:64], cfg)  # warm-up, untimed
        vals, c = fgt.fgt_evaluate(ps.x, ps.q, ps.x, cfg, threads=args.threads)
        rows.append(BenchReportRow.from_counters(
            "fgt", cfg.p, args.n, c, c.phases["kernel"], c.phases["setup"],
            args.threads, args.precision,
            max_rel_error=normwise_rel_error(vals, ref) if args.check else None,
        ))
    _emit(args, rows)
    return _status(rows, args)


def synthetic_expansions(level, p, seed, precision="f64"):
    """Random multipole expansions on every box of a level, decaying like real P2M output."""
    _, cdtype = dtypes_for(precision)
    n = 1 << level
    w = 1.0 / n
    ids = np.arange(n * n)
    centers = ((ids % n) + 0.5) * w + 1j * ((ids // n) + 0.5) * w
    rng = rng_for(seed)
    raw = rng.standard_normal((n * n, p, 2))
    coeffs = (raw[..., 0] + 1j * raw[..., 1]) * (0.5 * w) ** np.arange(p)
    return fmm.ExpansionSet(centers.astype(cdtype), coeffs.astype(cdtype))


def _m2l_reference(plan, mes, boxes):
    """Dense-matrix translation of every planned ME into the given target boxes."""
    p = mes.p
    n = np.arange(p)[:, None]
    k = np.arange(p)[None, :]
    binom = np.array([[float(binomial(a + b, b)) for b in range(p)] for a in range(p)])
    sign = (-1.0) ** n
    ref = {}
    for box in boxes:
        acc = np.zeros(p, dtype=np.complex128)
        for s in plan.sources_of(box):
            t = complex(mes.centers[box]) - complex(mes.centers[s])
            A = sign * binom * t ** (-(n + k + 1).astype(float))
            acc += A @ mes.coeffs[s].astype(np.complex128)
        ref[int(box)] = acc
    return ref


def cmd_bench_m2l(args):
    if any(c < 1 for c in args.translations) or any(p < 1 for p in args.terms):
        raise UsageError("--terms and --translations must be positive")
    rows = []
    for p in args.terms:
        for count in args.translations:
            t0 = time.perf_counter()
            level = fmm.level_for_translations(count)
            plan = fmm.idealized_plan(level, count)
            mes = synthetic_expansions(level, p, args.seed, args.precision)
            setup = time.perf_counter() - t0
            # untimed pass on a few pairs so JIT loading stays out of the first cell
            fmm.m2l_batch(fmm.TranslationPlan(plan.src[:27], plan.tgt[:27]), mes, p,
                          args.traversal)
            les, c = fmm.m2l_batch(plan, mes, p, args.traversal, threads=args.threads)
            err = None
            if args.check:
                sample = plan.targets[:: max(1, plan.targets.size // 8)][:8]
                ref = _m2l_reference(plan, mes, sample)
                err = max(
                    float(np.abs(les.coeffs[b] - r).max() / np.abs(r).max()) for b, r in ref.items()
                )
            rows.append(BenchReportRow.from_counters(
                "m2l", p, len(plan), c, c.phases["kernel"], setup, args.threads,
                args.precision, reduction_seconds=c.phases["reduction"], max_rel_error=err,
            ))
    _emit(args, rows)
    return _status(rows, args)


def cmd_bench_hermite(args):
    _oracle_guard(args, args.n)
    if not 1 <= args.dim <= 3:
        raise UsageError("--dim must be 1, 2 or 3")
    ps = generate_dataset(DatasetSpec(args.n, args.dim, args.seed, "unit"))
    x, q = ps.x, ps.q
    cfgs = [fgt.FgtConfig(sigma=args.sigma, p=p, dimension=args.dim, r=args.r,
                          hermite_backend=args.hermite_backend, precision=args.precision)
            for p in args.terms]
    ref = fgt.direct_gauss(x, q, x, args.sigma, threads=args.threads) if args.check else None
    rows = []
    for cfg in cfgs:
        t0 = time.perf_counter()
        grid = fgt.build_fgt_grid(x, x, cfg)
        boxes = np.flatnonzero(np.diff(grid.src_starts))
        centers = grid.centers(boxes).reshape(-1, args.dim)
        coeffs = np.stack([
            fgt.hermite_coeffs(x[grid.sources_in(b)], q[grid.sources_in(b)], c, cfg.p, cfg.sigma).coeffs
            for b, c in zip(boxes, centers)
        ]) if boxes.size else np.zeros((0, cfg.n_terms))
        setup = time.perf_counter() - t0
        fgt.hermite_eval_batch(coeffs[:1], centers[:1], x[:1], cfg.p, cfg.sigma,
                               hermite_backend=cfg.hermite_backend)
        t0 = time.perf_counter()
        vals = fgt.hermite_eval_batch(coeffs, centers, x, cfg.p, cfg.sigma, args.chunk_bytes,
                                      args.threads, cfg.hermite_backend)
        kernel = time.perf_counter() - t0
        K, P, d = boxes.size, cfg.n_terms, args.dim
        chunks = -(-K // fgt.clusters_per_chunk(cfg.p, d, args.chunk_bytes)) if K else 0
        counters = KernelCounters(
            arithmetic_ops=args.n * K * fgt.fgt_op_model(d, cfg.p)["hermite_eval"],
            bytes_read=8 * (K * (P + d) + chunks * args.n * d),
            bytes_written=8 * args.n * chunks,
            elapsed_seconds=kernel,
        )
        rows.append(BenchReportRow.from_counters(
            "hermite", cfg.p, args.n, counters, kernel, setup, args.threads, args.precision,
            max_rel_error=normwise_rel_error(vals, ref) if args.check else None,
        ))
    _emit(args, rows)
    return _status(rows, args)


def cmd_perf(args):
    chip = load_chip(args.chip)
    peak = peak_throughput(chip)
    report = {
        "sp_gflops": peak.sp_gflops,
        "sfu_gflops": peak.sfu_gflops,
        "combined_gflops": peak.combined_gflops,
        "dp_gflops": peak.dp_gflops,
    }
    max_threads = chip.max_threads_per_sm if args.max is None else args.max
    if args.active is not None:
        report["occupancy"] = occupancy(args.active, max_threads)
    if args.item_bytes is not None:
        shared = chip.shared_mem_bytes_per_sm if args.shared is None else args.shared
        report["shared_fit"] = shared_fit(args.item_bytes, shared, args.reserved)
    if args.format == "json":
        text = json.dumps({"chip": args.chip, **report}, indent=2) + "\n"
    else:
        lines = [f"{k}={v:.2f}" for k, v in report.items() if k.endswith("gflops")]
        if "occupancy" in report:
            lines.append(f"occupancy={report['occupancy']:.7g}")
        if "shared_fit" in report:
            lines.append(f"shared_fit={report['shared_fit']}")
        text = "\n".join(lines) + "\n"
    _write(args.out, text)
    return 0


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ChipSpecError as exc:
        print(f"fastsum: error: {exc}", file=sys.stderr)
        return 2
    except (UsageError, FastSumError, ValueError, OSError) as exc:
        print(f"fastsum: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
