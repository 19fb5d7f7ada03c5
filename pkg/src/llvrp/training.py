"""Context-sequential training: REINFORCE with the shared multi-start
baseline, the weighted-L1 attention regularizer, and cross-context
replay (fixed-fraction or scheduled).

The key matrices and bias matrices are never reinitialized between
contexts; carrying them live is the transfer mechanism, and the frozen
snapshot of the previous context anchors the regularizer.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import CheckpointError
from .oracles import OracleCache
from .policy import (ContextSnapshot, ModelConfig, PolicyParams, greedy_cost,
                     rollout_batch, snapshot_context)
from .scheduler import MetricStats, hardness, metric_probs, sample_plan
from .vrp import (Instance, MetricKind, ProblemKind, Tour, generate_instance,
                  stable_seed, tour_cost)

REPLAY_MODES = ("fixed", "dcs", "off")


class TrainAbort(RuntimeError):
    """Training stopped on a non-finite loss or gradient; carries a dump."""

    def __init__(self, message: str, dump: dict | None = None):
        super().__init__(message)
        self.dump = dump or {}


@dataclass(frozen=True)
class ContextSpec:
    """One training context: a distance metric at a problem size."""

    metric: MetricKind
    n: int

    def n_nodes(self, kind: ProblemKind) -> int:
        return self.n + (1 if kind == ProblemKind.CVRP else 0)


@dataclass(frozen=True)
class TrainConfig:
    contexts: tuple[ContextSpec, ...]
    kind: ProblemKind = ProblemKind.TSP
    epochs: int = 30
    batches_per_epoch: int = 100
    batch_size: int = 64
    n_starts: int | None = None      # None: min(n, 50) per context
    alpha: float = 1.0
    replay: str = "fixed"
    replay_fraction: float = 0.20
    eta: float = 0.1
    val_instances: int = 256
    lr: float = 1e-4
    weight_decay: float = 1e-6
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if not self.contexts:
            raise ValueError("need at least one context")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if not 0.0 <= self.replay_fraction <= 1.0:
            raise ValueError("replay_fraction must lie in [0, 1]")
        if self.replay not in REPLAY_MODES:
            raise ValueError(f"replay must be one of {REPLAY_MODES}")
        largest = max(c.n_nodes(self.kind) for c in self.contexts)
        if largest > self.model.n_max:
            raise ValueError(f"model n_max={self.model.n_max} below largest context ({largest} nodes)")

    def starts_for(self, n: int) -> int:
        if self.n_starts is None:
            return min(n, 50)
        return min(self.n_starts, n)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind.value,
            "contexts": [{"metric": c.metric.value, "n": c.n} for c in self.contexts],
            "epochs": self.epochs,
            "batches_per_epoch": self.batches_per_epoch,
            "batch_size": self.batch_size,
            "n_starts": self.n_starts,
            "alpha": self.alpha,
            "replay": self.replay,
            "replay_fraction": self.replay_fraction,
            "eta": self.eta,
            "val_instances": self.val_instances,
            "lr": self.lr,
            "weight_decay": self.weight_decay,
            "seed": self.seed,
            "model": {"d": self.model.d, "heads": self.model.heads,
                      "layers": self.model.layers, "n_max": self.model.n_max,
                      "logit_clip": self.model.logit_clip},
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "TrainConfig":
        kind = ProblemKind(obj.get("kind", "tsp"))
        contexts = tuple(ContextSpec(metric=MetricKind(c["metric"]), n=int(c["n"]))
                         for c in obj["contexts"])
        model_obj = dict(obj.get("model", {}))
        if "n_max" not in model_obj:
            model_obj["n_max"] = max(c.n_nodes(kind) for c in contexts)
        model = ModelConfig(**model_obj)
        keys = ("epochs", "batches_per_epoch", "batch_size", "n_starts", "alpha",
                "replay", "replay_fraction", "eta", "val_instances", "lr",
                "weight_decay", "seed")
        extra = {k: obj[k] for k in keys if k in obj}
        return cls(contexts=contexts, kind=kind, model=model, **extra)


@dataclass(frozen=True)
class EpochStats:
    context_index: int
    epoch: int                 # global epoch counter across contexts
    loss: float                # mean REINFORCE loss over batches
    reg_loss: float            # mean regularizer value over batches
    mean_cost: float           # mean sampled-tour cost over the epoch
    val_gaps: tuple[float, ...]  # one gap per configured context
    seconds: float


@dataclass
class TrainResult:
    params: PolicyParams
    history: list[EpochStats]
    config: TrainConfig
    snapshots: int
    oracle_exact: bool          # False when any heuristic oracle backed a gap


# ---------------------------------------------------------------------------
# loss pieces
# ---------------------------------------------------------------------------

def shared_baseline(rewards) -> float:
    """Mean reward over the N starts; compensated so advantages sum to 0."""
    rewards = [float(r) for r in rewards]
    if not rewards:
        raise ValueError("need at least one reward")
    return math.fsum(rewards) / len(rewards)


def reinforce_from_costs(costs: np.ndarray, log_prob: Tensor) -> Tensor:
    """REINFORCE surrogate from per-start costs (B, N) and taped
    log-probabilities (B*N,); the baseline is treated as a constant."""
    rewards = -np.asarray(costs, dtype=np.float64)
    adv = rewards - rewards.mean(axis=1, keepdims=True)
    b, n = rewards.shape
    return ad.sum_all(ad.mul_const(log_prob, -adv.ravel() / (b * n)))


def reinforce_loss(tours: list[Tour], log_probs: Tensor, inst: Instance) -> Tensor:
    """Single-instance surrogate: rewards are negated feasible tour costs."""
    if not np.isfinite(log_probs.data).all():
        raise TrainAbort("non-finite log-probability in rollout",
                         {"log_probs": log_probs.data.tolist()})
    costs = np.array([[tour_cost(t, inst) for t in tours]])
    return reinforce_from_costs(costs, log_probs)


def reg_loss(params: PolicyParams, snapshot: ContextSnapshot | None) -> Tensor:
    """Importance-weighted L1 pull of (W_K, B) toward the previous context,
    summed over encoder layers; zero when no previous context exists."""
    if snapshot is None:
        return Tensor(0.0)
    total: Tensor | None = None
    for l in range(params.config.layers):
        wk = params.key_matrix(l)
        bias = params.bias_matrix(l)
        if wk.data.shape != snapshot.wk[l].shape or bias.data.shape != snapshot.bias[l].shape:
            raise CheckpointError(
                f"snapshot layer {l} shapes {snapshot.wk[l].shape}/{snapshot.bias[l].shape} "
                f"do not match live parameters {wk.data.shape}/{bias.data.shape}")
        term = ad.sum_all(ad.mul_const(ad.absolute(ad.add_const(wk, -snapshot.wk[l])),
                                       snapshot.wk_importance[l]))
        term = ad.add(term, ad.sum_all(ad.mul_const(
            ad.absolute(ad.add_const(bias, -snapshot.bias[l])), snapshot.bias_importance[l])))
        total = term if total is None else ad.add(total, term)
    return total


def total_loss(loss: Tensor, regularizer: Tensor, alpha: float) -> Tensor:
    if alpha == 0.0:
        return loss
    return ad.add(loss, ad.mul_const(regularizer, alpha))


def replay_plan(context_index: int, per_epoch_count: int, fraction: float) -> dict[int, int]:
    """Fixed replay budget: ceil(fraction * per-epoch count) fresh instances
    for every previous context; empty for the first context."""
    extra = math.ceil(fraction * per_epoch_count)
    return {i: extra for i in range(context_index)}


# ---------------------------------------------------------------------------
# deterministic instance streams
# ---------------------------------------------------------------------------

def validation_seed(config_seed: int, n: int) -> int:
    """Root seed of the size-n validation stream.  Metric contexts of one
    size share coordinates and demands; only the objective changes."""
    return stable_seed(config_seed, "val", n)


def validation_set(config: TrainConfig, ctx: ContextSpec) -> list[Instance]:
    base = validation_seed(config.seed, ctx.n)
    return [generate_instance(config.kind, ctx.n, ctx.metric, stable_seed(base, i))
            for i in range(config.val_instances)]


def training_instances(config: TrainConfig, train_ctx: int, epoch: int,
                       source_ctx: int, count: int) -> list[Instance]:
    spec = config.contexts[source_ctx]
    return [generate_instance(config.kind, spec.n, spec.metric,
                              stable_seed(config.seed, "train", train_ctx, epoch, source_ctx, i))
            for i in range(count)]


def rollout_seed(config_seed: int, ctx: int, epoch: int, batch: int) -> int:
    return stable_seed(config_seed, "rollout", ctx, epoch, batch)


def epoch_instance_plan(config: TrainConfig, ctx_index: int, epoch: int,
                        counts: dict[int, int]) -> list[list[Instance]]:
    """Per-batch instance lists: the current context's batches plus the
    replay counts spread round-robin across the epoch's batches."""
    current = training_instances(
        config, ctx_index, epoch, ctx_index,
        config.batches_per_epoch * config.batch_size)
    batches = [current[b * config.batch_size:(b + 1) * config.batch_size]
               for b in range(config.batches_per_epoch)]
    extras: list[Instance] = []
    for src in sorted(counts):
        extras.extend(training_instances(config, ctx_index, epoch, src, counts[src]))
    for j, inst in enumerate(extras):
        batches[j % config.batches_per_epoch].append(inst)
    return batches


# ---------------------------------------------------------------------------
# the trainer
# ---------------------------------------------------------------------------

class LifelongTrainer:
    def __init__(self, config: TrainConfig, out_dir: str | Path | None = None,
                 cache: OracleCache | None = None, progress=None):
        self.config = config
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.cache = cache if cache is not None else OracleCache()
        self.progress = progress
        self.params = PolicyParams.create(config.model, config.kind,
                                          seed=stable_seed(config.seed, "init"))
        self.adam = ad.Adam(self.params.named(), lr=config.lr,
                            weight_decay=config.weight_decay)
        self.snapshot: ContextSnapshot | None = None
        self.history: list[EpochStats] = []
        self.trace_rows: list[dict] = []
        self.oracle_exact = True
        self._epoch_counter = 0
        self._imp_sum: dict[str, np.ndarray] = {}
        self._imp_batches = 0
        self._valsets = [validation_set(config, ctx) for ctx in config.contexts]
        self._val_oracle = [self._oracle_costs(s) for s in self._valsets]
        self._stats: MetricStats | None = None

    def _oracle_costs(self, insts: list[Instance]) -> np.ndarray:
        costs = np.empty(len(insts))
        for i, inst in enumerate(insts):
            costs[i], exact = self.cache.cost(inst)
            self.oracle_exact = self.oracle_exact and exact
        return costs

    # -- validation ---------------------------------------------------------

    def validate(self) -> tuple[float, ...]:
        """Greedy best-of-N gap per configured context.

        Contexts sharing one size share coordinates, so the decoded
        sequences are rolled out once per size and re-costed per metric.
        """
        cfg = self.config
        gaps = [0.0] * len(cfg.contexts)
        by_size: dict[int, list[int]] = {}
        for idx, ctx in enumerate(cfg.contexts):
            by_size.setdefault(ctx.n, []).append(idx)
        for n, ctx_ids in by_size.items():
            insts = self._valsets[ctx_ids[0]]
            n_starts = cfg.starts_for(n)
            chunk = max(1, 2048 // max(n_starts, 1))
            seqs: list[np.ndarray] = []
            for lo in range(0, len(insts), chunk):
                part = insts[lo:lo + chunk]
                rb = rollout_batch(part, self.params, n_starts, "greedy")
                seqs.append(rb.sequences)
            for idx in ctx_ids:
                metric_insts = self._valsets[idx]
                model_costs = np.empty(len(insts))
                pos = 0
                for lo, block in zip(range(0, len(insts), chunk), seqs):
                    for row in range(block.shape[0]):
                        inst = metric_insts[lo + row]
                        dist = inst.matrix()
                        tours = block[row]
                        nxt = np.roll(tours, -1, axis=1)
                        costs = dist[tours, nxt].sum(axis=1)
                        model_costs[pos] = costs.min()
                        pos += 1
                gaps[idx] = hardness(model_costs, self._val_oracle[idx])
        return tuple(gaps)

    # -- one epoch ----------------------------------------------------------

    def _epoch_counts(self, ctx_index: int, epoch: int) -> dict[int, int]:
        cfg = self.config
        per_epoch = cfg.batches_per_epoch * cfg.batch_size
        if cfg.replay == "off" or ctx_index == 0:
            return {}
        if cfg.replay == "fixed":
            return replay_plan(ctx_index, per_epoch, cfg.replay_fraction)
        observed = ctx_index + 1
        stats = MetricStats(g=self._stats.g[:observed], g_hat=self._stats.g_hat[:observed])
        probs = metric_probs(stats, cfg.eta)
        budget = math.ceil(cfg.replay_fraction * per_epoch) * ctx_index
        counts = sample_plan(probs, budget, stable_seed(cfg.seed, "dcs", ctx_index, epoch))
        for i in range(observed):
            self.trace_rows.append({
                "epoch": self._epoch_counter, "context": i,
                "g": float(stats.g[i]), "g_hat": float(stats.g_hat[i]),
                "p": float(probs[i]), "count": int(counts[i])})
        return {i: int(counts[i]) for i in range(observed) if counts[i] > 0}

    def train_epoch(self, ctx_index: int, epoch: int) -> EpochStats:
        cfg = self.config
        t0 = time.perf_counter()
        counts = self._epoch_counts(ctx_index, epoch)
        batches = epoch_instance_plan(cfg, ctx_index, epoch, counts)
        self._imp_sum = {}
        self._imp_batches = 0
        losses, regs, costs_seen = [], [], []
        for b, insts in enumerate(batches):
            rng = np.random.Generator(np.random.Philox(
                key=np.uint64(rollout_seed(cfg.seed, ctx_index, epoch, b))))
            loss_l, loss_r, mean_cost = self._train_batch(
                insts, rng, first_of_context=(epoch == 0 and b == 0))
            losses.append(loss_l)
            regs.append(loss_r)
            costs_seen.append(mean_cost)
        gaps = self.validate()
        self._stats = MetricStats.first(gaps) if self._stats is None else self._stats.advance(gaps)
        stats = EpochStats(context_index=ctx_index, epoch=self._epoch_counter,
                           loss=float(np.mean(losses)), reg_loss=float(np.mean(regs)),
                           mean_cost=float(np.mean(costs_seen)), val_gaps=gaps,
                           seconds=time.perf_counter() - t0)
        self._epoch_counter += 1
        self.history.append(stats)
        if self.progress is not None:
            self.progress(stats)
        return stats

    def _train_batch(self, insts: list[Instance], rng: np.random.Generator,
                     first_of_context: bool) -> tuple[float, float, float]:
        cfg = self.config
        groups: dict[int, list[Instance]] = {}
        for inst in insts:
            groups.setdefault(inst.n_nodes, []).append(inst)
        total = len(insts)
        with ad.Tape() as tape:
            loss: Tensor | None = None
            cost_sum = 0.0
            for _, group in sorted(groups.items()):
                n_starts = cfg.starts_for(group[0].n)
                rb = rollout_batch(group, self.params, n_starts, "sample", rng, record=True)
                if not np.isfinite(rb.log_prob.data).all():
                    raise TrainAbort("non-finite log-probability in rollout",
                                     {"context_sizes": sorted(groups), "batch": len(insts)})
                cost_sum += rb.costs.sum()
                rewards = -rb.costs
                adv = rewards - rewards.mean(axis=1, keepdims=True)
                term = ad.sum_all(ad.mul_const(rb.log_prob, -adv / (n_starts * total)))
                loss = term if loss is None else ad.add(loss, term)
            lr_term = reg_loss(self.params, self.snapshot) if cfg.alpha != 0.0 else Tensor(0.0)
            if first_of_context and self.snapshot is not None and cfg.alpha != 0.0:
                assert float(lr_term.data) == 0.0, "regularizer must be exactly 0 at hand-off"
            objective = total_loss(loss, lr_term, cfg.alpha)
            if not np.isfinite(objective.data):
                raise TrainAbort("non-finite training loss",
                                 {"loss": float(loss.data), "reg": float(lr_term.data)})
            self.adam.zero_grad()
            tape.backward(objective)
        for l in range(cfg.model.layers):
            for name in (f"enc{l}.wk", f"enc{l}.bias"):
                g = self.params[name].grad
                if g is None:
                    continue
                acc = self._imp_sum.get(name)
                self._imp_sum[name] = np.abs(g) if acc is None else acc + np.abs(g)
        self._imp_batches += 1
        self.adam.step()
        n_tours = sum(len(g) * cfg.starts_for(g[0].n) for g in groups.values())
        return float(loss.data), float(lr_term.data), cost_sum / n_tours

    # -- the outer loop -----------------------------------------------------

    def run(self) -> TrainResult:
        cfg = self.config
        history_path = trace_path = None
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            history_path = self.out_dir / "history.csv"
            gap_cols = ",".join(f"val_gap_{i}" for i in range(len(cfg.contexts)))
            history_path.write_text(
                f"epoch,context_index,metric,n,loss,reg_loss,mean_cost,seconds,{gap_cols}\n")
        snapshots = 0
        for ctx_index, ctx in enumerate(cfg.contexts):
            for epoch in range(cfg.epochs):
                stats = self.train_epoch(ctx_index, epoch)
                if history_path is not None:
                    gaps = ",".join(f"{g:.9f}" for g in stats.val_gaps)
                    with open(history_path, "a") as fh:
                        fh.write(f"{stats.epoch},{ctx_index},{ctx.metric.value},{ctx.n},"
                                 f"{stats.loss:.9f},{stats.reg_loss:.9f},"
                                 f"{stats.mean_cost:.9f},{stats.seconds:.3f},{gaps}\n")
            importance = {name: s / max(self._imp_batches, 1)
                          for name, s in self._imp_sum.items()}
            self.snapshot = snapshot_context(self.params, importance)
            snapshots += 1
            if self.out_dir is not None:
                self.params.save(self.out_dir / f"context_{ctx_index}.llvrp",
                                 adam=self.adam, snapshot=self.snapshot)
        if self.out_dir is not None:
            self.params.save(self.out_dir / "final.llvrp", adam=self.adam,
                             snapshot=self.snapshot)
            if self.trace_rows:
                trace_path = self.out_dir / "schedule_trace.csv"
                with open(trace_path, "w") as fh:
                    fh.write("epoch,context,g,g_hat,p,count\n")
                    for row in self.trace_rows:
                        fh.write(f"{row['epoch']},{row['context']},{row['g']:.9f},"
                                 f"{row['g_hat']:.9f},{row['p']:.9f},{row['count']}\n")
        return TrainResult(params=self.params, history=self.history, config=cfg,
                           snapshots=snapshots, oracle_exact=self.oracle_exact)


def lifelong_train(config: TrainConfig, out_dir: str | Path | None = None,
                   cache: OracleCache | None = None, progress=None) -> TrainResult:
    """Train through the configured context sequence and return the final
    parameters plus the per-context gap history."""
    return LifelongTrainer(config, out_dir=out_dir, cache=cache, progress=progress).run()
