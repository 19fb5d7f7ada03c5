"""Operator entry point: instance generation, lifelong training,
checkpoint evaluation, gradient checking, schedule replay, and report
rendering, all seed-reproducible.

Exit codes: 0 ok, 1 training abort, 2 bad flags or config, 3 checkpoint
incompatibility.
"""

from __future__ import annotations

import argparse
import csv
import datetime
import json
import math
import os
import subprocess
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .benchio import (BenchmarkInstance, ResultRecord, benchmark_cost,
                      normalized_instance, parse_benchmark, write_results)
from .checkpoint import CheckpointError
from .oracles import (CVRP_EXACT_MAX, HELD_KARP_MAX, OracleCache, gap,
                      reference_solve)
from .policy import ModelConfig, PolicyParams, rollout_batch, tour_log_prob
from .scheduler import MetricStats, metric_probs
from .training import TrainAbort, TrainConfig, lifelong_train
from .vrp import (Instance, MetricKind, ProblemKind, generate_instance,
                  instance_from_json, instance_to_json, stable_seed)

GRADCHECK_TOLERANCE = 1e-4


def thread_budget() -> int:
    """Worker cap from LLVRP_THREADS (default 1, single deterministic lane)."""
    try:
        return max(1, int(os.environ.get("LLVRP_THREADS", "1")))
    except ValueError:
        return 1


def _git_describe() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"],
                             capture_output=True, text=True, timeout=5)
        if out.returncode == 0:
            return out.stdout.strip()
    except OSError:
        pass
    return "unknown"


@dataclass
class RunManifest:
    """Reproducibility record emitted before a command starts working."""

    command: str
    config: dict
    seeds: dict
    deviation_flags: list[str] = field(default_factory=list)
    git_describe: str = field(default_factory=_git_describe)
    started: str = field(default_factory=lambda: datetime.datetime.now().isoformat())
    finished: str | None = None

    def write(self, path: Path) -> None:
        path.write_text(json.dumps(self.__dict__, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# generate
# ---------------------------------------------------------------------------

def cmd_generate(args) -> int:
    kind = ProblemKind(args.kind)
    metric = MetricKind(args.metric)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(
        command="generate",
        config={"kind": kind.value, "n": args.n, "metric": metric.value,
                "count": args.count},
        seeds={"base": args.seed})
    manifest.write(out / "manifest.json")
    for i in range(args.count):
        inst = generate_instance(kind, args.n, metric, stable_seed(args.seed, i))
        (out / f"instance_{i:05d}.json").write_text(instance_to_json(inst))
    manifest.finished = datetime.datetime.now().isoformat()
    manifest.write(out / "manifest.json")
    print(f"wrote {args.count} instances to {out}")
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def _oracle_deviation_flags(config: TrainConfig) -> list[str]:
    flags = []
    for ctx in config.contexts:
        exact = (config.kind == ProblemKind.TSP and ctx.n <= HELD_KARP_MAX) or \
                (config.kind == ProblemKind.CVRP and ctx.n <= CVRP_EXACT_MAX)
        if not exact:
            flags.append(f"oracle_substitution:heuristic-for-{config.kind.value}-n{ctx.n}")
    return sorted(set(flags))


def cmd_train(args) -> int:
    try:
        config = TrainConfig.from_dict(json.loads(Path(args.config).read_text()))
    except (OSError, ValueError, KeyError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(command="train", config=config.to_dict(),
                           seeds={"base": config.seed},
                           deviation_flags=_oracle_deviation_flags(config))
    manifest.write(out / "manifest.json")
    cache = OracleCache(out / "oracle_cache.json")

    def progress(stats):
        gaps = " ".join(f"{100 * g:.2f}%" for g in stats.val_gaps)
        print(f"epoch {stats.epoch:4d} ctx {stats.context_index} "
              f"loss {stats.loss:+.4f} reg {stats.reg_loss:.4f} "
              f"cost {stats.mean_cost:.4f} gaps [{gaps}] ({stats.seconds:.1f}s)")

    result = lifelong_train(config, out_dir=out, cache=cache, progress=progress)
    cache.save()
    manifest.finished = datetime.datetime.now().isoformat()
    manifest.write(out / "manifest.json")
    final = result.history[-1]
    gaps = " ".join(f"{100 * g:.2f}%" for g in final.val_gaps)
    print(f"done: {result.snapshots} contexts, final gaps [{gaps}]")
    return 0


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def _load_eval_targets(path: Path) -> list[tuple[str, Instance, BenchmarkInstance | None]]:
    """(name, network-facing instance, benchmark wrapper or None) triples."""
    paths: list[Path]
    if path.is_dir():
        paths = sorted(p for p in path.iterdir()
                       if p.suffix in (".json", ".tsp", ".vrp", ".gz"))
    else:
        paths = [path]
    out = []
    for p in paths:
        if p.name == "manifest.json":
            continue
        if p.suffix == ".json":
            inst = instance_from_json(p.read_text())
            out.append((p.stem, inst, None))
        else:
            binst = parse_benchmark(p)
            out.append((binst.name, normalized_instance(binst), binst))
    if not out:
        raise ValueError(f"no instances found under {path}")
    return out


def _oracle_cost_task(inst: Instance) -> tuple[float, bool, list[int]]:
    res = reference_solve(inst)
    return res.cost, res.exact, list(res.tour.sequence)


def cmd_eval(args) -> int:
    params, _, _ = PolicyParams.load(args.checkpoint)
    targets = _load_eval_targets(Path(args.instances))
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = []
    deviations: set[str] = set()
    oracle_insts = []
    for name, inst, binst in targets:
        if inst.n_nodes > params.config.n_max:
            raise ValueError(f"{name}: {inst.n_nodes} nodes exceed model n_max={params.config.n_max}")
        oracle_insts.append(binst.instance if binst is not None else inst)
    oracle_costs: list[tuple[float, bool, list[int]] | None] = [None] * len(targets)
    if args.oracle != "none":
        workers = thread_budget()
        if workers > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                oracle_costs = list(pool.map(_oracle_cost_task, oracle_insts))
        else:
            oracle_costs = [_oracle_cost_task(inst) for inst in oracle_insts]
    for (name, inst, binst), oracle in zip(targets, oracle_costs):
        t0 = time.perf_counter()
        starts = min(inst.n, args.starts)
        rb = rollout_batch([inst], params, starts, "greedy")
        if binst is None:
            best_cost = rb.costs.min()
            rounded = False
        else:
            best_cost = min(benchmark_cost(binst, rb.sequences[j]) for j in range(starts))
            rounded = binst.rounded
            deviations.add("tsplib_rounding:nint")
            deviations.add("normalization:minmax-uniform")
        seconds = time.perf_counter() - t0
        if oracle is None:
            g = math.nan
        else:
            ref_cost, exact, ref_seq = oracle
            if binst is not None:
                # best-known dominates; otherwise re-cost the heuristic
                # tour under the benchmark's rounding convention
                ref_cost = binst.best_known if binst.best_known is not None \
                    else benchmark_cost(binst, ref_seq)
            g = gap(best_cost, ref_cost)
            if not exact:
                deviations.add("oracle_substitution:heuristic")
        records.append(ResultRecord(instance=name, method="greedy-multistart",
                                    metric=inst.metric.value, objective=float(best_cost),
                                    gap=float(g), seconds=seconds, rounded=rounded))
    manifest = RunManifest(command="eval",
                           config={"checkpoint": str(args.checkpoint),
                                   "instances": str(args.instances),
                                   "oracle": args.oracle, "starts": args.starts},
                           seeds={}, deviation_flags=sorted(deviations))
    manifest.write(out_dir / "manifest.json")
    write_results(records, out_dir / "results.csv")
    manifest.finished = datetime.datetime.now().isoformat()
    manifest.write(out_dir / "manifest.json")
    print(f"wrote {len(records)} results to {out_dir / 'results.csv'}")
    return 0


# ---------------------------------------------------------------------------
# gradcheck
# ---------------------------------------------------------------------------

def gradcheck_suite(d: int = 32, heads: int = 2, layers: int = 2, n: int = 5,
                    samples: int = 20) -> list[tuple[str, float]]:
    """Finite-difference checks for every differentiable op plus the full
    policy log-probability of a fixed tour on both problem kinds."""
    rng = np.random.default_rng(7)
    checks: list[tuple[str, float]] = []

    def check(name, fn, params, **kw):
        checks.append((name, ad.grad_check(fn, params, samples=samples, **kw)))

    a = ad.parameter(rng.normal(size=(3, 4)))
    b = ad.parameter(rng.normal(size=(4, 2)))
    w = rng.normal(size=(3, 2))
    check("matmul_2d", lambda: ad.sum_all(ad.mul_const(ad.matmul(a, b), w)), [a, b])

    a3 = ad.parameter(rng.normal(size=(2, 3, 4)))
    b3 = ad.parameter(rng.normal(size=(2, 4, 3)))
    w3 = rng.normal(size=(2, 3, 3))
    w32 = rng.normal(size=(2, 3, 2))
    check("matmul_batched", lambda: ad.sum_all(ad.mul_const(ad.matmul(a3, b3), w3)), [a3, b3])
    check("matmul_3d_2d", lambda: ad.sum_all(ad.mul_const(ad.matmul(a3, b), w32)), [a3, b])

    x = ad.parameter(rng.normal(size=(4, 6)))
    y = ad.parameter(rng.normal(size=(4, 6)))
    wx = rng.normal(size=(4, 6))
    check("add", lambda: ad.sum_all(ad.mul_const(ad.add(x, y), wx)), [x, y])
    check("sub", lambda: ad.sum_all(ad.mul_const(ad.sub(x, y), wx)), [x, y])
    check("mul", lambda: ad.sum_all(ad.mul_const(ad.mul(x, y), wx)), [x, y])
    check("add_const", lambda: ad.sum_all(ad.mul_const(ad.add_const(x, 0.7), wx)), [x])
    check("mul_const", lambda: ad.sum_all(ad.mul_const(ad.mul_const(x, -1.3), wx)), [x])
    check("relu", lambda: ad.sum_all(ad.mul_const(ad.relu(x), wx)), [x])
    check("tanh", lambda: ad.sum_all(ad.mul_const(ad.tanh(x), wx)), [x])
    check("absolute", lambda: ad.sum_all(ad.mul_const(ad.absolute(x), wx)), [x])
    xp = ad.parameter(rng.uniform(0.5, 2.0, size=(4, 6)))
    check("log", lambda: ad.sum_all(ad.mul_const(ad.log(xp), wx)), [xp], h=1e-6)
    w_rs = rng.normal(size=(2, 12))
    check("reshape", lambda: ad.sum_all(ad.mul_const(ad.reshape(x, (2, 12)), w_rs)), [x])
    w_tr = rng.normal(size=(6, 4))
    check("transpose_last", lambda: ad.sum_all(ad.mul_const(ad.transpose_last(x), w_tr)), [x])
    w_cat = rng.normal(size=(4, 12))
    check("concat", lambda: ad.sum_all(ad.mul_const(ad.concat([x, y], axis=1), w_cat)), [x, y])
    w_sl = rng.normal(size=(2, 3))
    check("slice2d", lambda: ad.sum_all(ad.mul_const(ad.slice2d(x, (1, 3), (2, 5)), w_sl)), [x])
    w_sll = rng.normal(size=(2, 3, 2))
    check("slice_last", lambda: ad.sum_all(ad.mul_const(ad.slice_last(a3, 1, 3), w_sll)), [a3])
    v = ad.parameter(rng.normal(size=6))
    check("add_rowvec", lambda: ad.sum_all(ad.mul_const(ad.add_rowvec(x, v), wx)), [x, v])
    scores = ad.parameter(rng.normal(size=(2, 3, 3)))
    mshared = ad.parameter(rng.normal(size=(3, 3)))
    wsh = rng.normal(size=(2, 3, 3))
    check("add_shared_matrix",
          lambda: ad.sum_all(ad.mul_const(ad.add_shared_matrix(scores, mshared), wsh)),
          [scores, mshared])
    idx = np.array([1, 0])
    w_gr = rng.normal(size=(2, 4))
    check("gather_rows", lambda: ad.sum_all(ad.mul_const(ad.gather_rows(a3, idx), w_gr)), [a3])
    g2 = ad.parameter(rng.normal(size=(3, 5)))
    idx_g = np.array([0, 4, 2])
    w_gl = rng.normal(size=3)
    check("gather_last", lambda: ad.sum_all(ad.mul_const(ad.gather_last(g2, idx_g), w_gl)), [g2])
    q = ad.parameter(rng.normal(size=(2, 4)))
    w_rd = rng.normal(size=(2, 3))
    check("rowdot", lambda: ad.sum_all(ad.mul_const(ad.rowdot(q, a3), w_rd)), [q, a3])
    wmix = ad.parameter(rng.normal(size=(2, 3)))
    w_rm = rng.normal(size=(2, 4))
    check("rowmix", lambda: ad.sum_all(ad.mul_const(ad.rowmix(wmix, a3), w_rm)), [wmix, a3])
    w_ex = rng.normal(size=(4, 3, 4))
    check("expand_rows", lambda: ad.sum_all(ad.mul_const(ad.expand_rows(a3, 2), w_ex)), [a3])
    w_m1 = rng.normal(size=(2, 4))
    check("mean_axis1", lambda: ad.sum_all(ad.mul_const(ad.mean_axis1(a3), w_m1)), [a3])
    check("sum_all", lambda: ad.sum_all(x), [x])

    sm = ad.parameter(rng.normal(size=(4, 5)))
    mask = rng.random((4, 5)) < 0.3
    mask[:, 0] = False
    wsm = rng.normal(size=(4, 5))
    check("masked_softmax", lambda: ad.sum_all(ad.mul_const(ad.masked_softmax(sm, mask), wsm)), [sm])
    # softmax + cross-entropy composite
    target = np.zeros((4, 5))
    target[np.arange(4), [0, 2, 3, 0]] = 1.0
    masked_t = np.where(mask, 0.0, target)
    masked_t /= masked_t.sum()
    check("masked_softmax_xent",
          lambda: ad.sum_all(ad.mul_const(ad.log(ad.add_const(ad.masked_softmax(sm, mask), 1e-9)), -masked_t)),
          [sm], h=1e-6)
    ln_x = ad.parameter(rng.normal(size=(4, 8)))
    ln_g = ad.parameter(rng.uniform(0.5, 1.5, size=8))
    ln_b = ad.parameter(rng.normal(size=8))
    wln = rng.normal(size=(4, 8))
    check("layer_norm", lambda: ad.sum_all(ad.mul_const(ad.layer_norm(ln_x, ln_g, ln_b), wln)), [ln_x, ln_g, ln_b])

    cfg = ModelConfig(d=d, heads=heads, layers=layers, n_max=max(n + 1, 8))
    for kind in (ProblemKind.TSP, ProblemKind.CVRP):
        inst = generate_instance(kind, n, MetricKind.EUCLIDEAN, stable_seed("gradcheck", kind.value))
        params = PolicyParams.create(cfg, kind, seed=11)
        trace = rollout_batch([inst], params, 1, "greedy")
        seq = [int(s) for s in trace.sequences[0, 0]]
        checks.append((f"policy_log_prob_{kind.value}",
                       ad.grad_check(lambda: tour_log_prob(inst, params, seq),
                                     params.named(), samples=3)))
    return checks


def cmd_gradcheck(args) -> int:
    t0 = time.perf_counter()
    checks = gradcheck_suite(d=args.d, heads=args.heads, layers=args.layers, n=args.n)
    worst = 0.0
    for name, err in checks:
        status = "ok" if err <= GRADCHECK_TOLERANCE else "FAIL"
        print(f"{status:4s} {name:28s} max rel err {err:.3e}")
        worst = max(worst, err)
    print(f"gradcheck: {len(checks)} checks, worst {worst:.3e}, "
          f"{time.perf_counter() - t0:.1f}s")
    return 0 if worst <= GRADCHECK_TOLERANCE else 1


# ---------------------------------------------------------------------------
# schedule
# ---------------------------------------------------------------------------

def cmd_schedule(args) -> int:
    with open(args.trace, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        print("trace file has no rows", file=sys.stderr)
        return 2
    groups: dict[str, list[dict]] = {}
    for row in rows:
        groups.setdefault(row.get("epoch", "0"), []).append(row)
    for epoch in sorted(groups, key=lambda e: int(e)):
        block = sorted(groups[epoch], key=lambda r: int(r["context"]))
        stats = MetricStats(g=np.array([float(r["g"]) for r in block]),
                            g_hat=np.array([float(r["g_hat"]) for r in block]))
        probs = metric_probs(stats, args.eta)
        rendered = " ".join(f"ctx{r['context']}={p:.4f}" for r, p in zip(block, probs))
        print(f"epoch {epoch}: {rendered}")
    return 0


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

def cmd_report(args) -> int:
    from .reporting import render_history, render_schedule

    written = render_history(args.history, args.out)
    if args.trace is not None:
        written += render_schedule(args.trace, args.out)
    for path in written:
        print(f"wrote {path}")
    return 0


# ---------------------------------------------------------------------------
# wiring
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="llvrp",
                                     description="Lifelong-learning VRP solver toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate", help="write synthetic instance files")
    gen.add_argument("--kind", choices=[k.value for k in ProblemKind], default="tsp")
    gen.add_argument("--n", type=int, required=True)
    gen.add_argument("--metric", choices=[m.value for m in MetricKind], default="euclidean")
    gen.add_argument("--count", type=int, default=1)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--out", required=True)
    gen.set_defaults(func=cmd_generate)

    tr = sub.add_parser("train", help="run lifelong training from a JSON config")
    tr.add_argument("--config", required=True)
    tr.add_argument("--out", required=True)
    tr.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", help="evaluate a checkpoint on instance files")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--instances", required=True)
    ev.add_argument("--oracle", choices=["auto", "none"], default="auto")
    ev.add_argument("--starts", type=int, default=50)
    ev.add_argument("--out", required=True)
    ev.set_defaults(func=cmd_eval)

    gc = sub.add_parser("gradcheck", help="finite-difference check of every op")
    gc.add_argument("--d", type=int, default=32)
    gc.add_argument("--heads", type=int, default=2)
    gc.add_argument("--layers", type=int, default=2)
    gc.add_argument("--n", type=int, default=5)
    gc.set_defaults(func=cmd_gradcheck)

    sc = sub.add_parser("schedule", help="replay a gap trace and print replay probabilities")
    sc.add_argument("--trace", required=True)
    sc.add_argument("--eta", type=float, default=0.1)
    sc.set_defaults(func=cmd_schedule)

    rp = sub.add_parser("report", help="render figures from run CSVs")
    rp.add_argument("--history", required=True)
    rp.add_argument("--trace", default=None)
    rp.add_argument("--out", required=True)
    rp.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except TrainAbort as exc:
        print(f"training aborted: {exc}\ndump: {exc.dump}", file=sys.stderr)
        return 1
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return 3
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
