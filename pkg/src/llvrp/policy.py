"""Transformer construction policy.

Encoder layers use self-attention with a learnable additive bias matrix
on the attention scores; the bias and the key projections are the
tensors handed from one training context to the next.  The decoder is
the standard construction decoder: graph-mean plus current-node context,
one multi-head glimpse, then tanh-clipped single-head compatibilities.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import CheckpointError, load_tensors, save_tensors
from .vrp import Instance, ProblemKind, RolloutState, Tour, make_tour, valid_actions

FFN_MULT = 4


class ModelCapacityError(ValueError):
    """Instance larger than the model's allocated bias matrix."""


@dataclass(frozen=True)
class ModelConfig:
    d: int = 64
    heads: int = 4
    layers: int = 3
    n_max: int = 128
    logit_clip: float = 10.0

    def __post_init__(self):
        if self.d % self.heads != 0:
            raise ValueError(f"embedding width {self.d} not divisible by {self.heads} heads")


@dataclass(frozen=True)
class ContextSnapshot:
    """Frozen per-layer key matrices and bias matrices from the previous
    context, plus their elementwise gradient-importance weights."""

    wk: tuple[np.ndarray, ...]
    bias: tuple[np.ndarray, ...]
    wk_importance: tuple[np.ndarray, ...]
    bias_importance: tuple[np.ndarray, ...]

    def __post_init__(self):
        for imp in (*self.wk_importance, *self.bias_importance):
            if (imp < 0).any():
                raise ValueError("importance weights must be non-negative")


class PolicyParams:
    """Named parameter tensors for one problem kind.

    Head slices are fixed contiguous column blocks of the d x d
    projections (head i uses columns [i*d/h, (i+1)*d/h)); every head
    shares the layer's single (n_max x n_max) bias matrix, sliced to the
    top-left n x n block at evaluation.  The convention is part of the
    checkpoint format.
    """

    def __init__(self, config: ModelConfig, kind: ProblemKind, tensors: dict[str, Tensor]):
        self.config = config
        self.kind = ProblemKind(kind)
        self._tensors = tensors

    @classmethod
    def create(cls, config: ModelConfig, kind: ProblemKind, seed: int = 0) -> "PolicyParams":
        rng = np.random.default_rng(seed)
        d = config.d
        tensors: dict[str, Tensor] = {}

        def proj(name: str, rows: int, cols: int) -> None:
            bound = 1.0 / math.sqrt(rows)
            tensors[name] = ad.parameter(rng.uniform(-bound, bound, (rows, cols)), name)

        def vec(name: str, size: int, fill: float) -> None:
            tensors[name] = ad.parameter(np.full(size, fill), name)

        kind = ProblemKind(kind)
        if kind == ProblemKind.TSP:
            proj("embed.w", 2, d)
            vec("embed.b", d, 0.0)
        else:
            proj("embed.depot_w", 2, d)
            vec("embed.depot_b", d, 0.0)
            proj("embed.cust_w", 3, d)
            vec("embed.cust_b", d, 0.0)
        for l in range(config.layers):
            for w in ("wq", "wk", "wv", "wo"):
                proj(f"enc{l}.{w}", d, d)
            # zero-initialized bias: the first context starts as standard attention
            tensors[f"enc{l}.bias"] = ad.parameter(
                np.zeros((config.n_max, config.n_max)), f"enc{l}.bias")
            proj(f"enc{l}.ffn_w1", d, FFN_MULT * d)
            vec(f"enc{l}.ffn_b1", FFN_MULT * d, 0.0)
            proj(f"enc{l}.ffn_w2", FFN_MULT * d, d)
            vec(f"enc{l}.ffn_b2", d, 0.0)
            vec(f"enc{l}.ln1_g", d, 1.0)
            vec(f"enc{l}.ln1_b", d, 0.0)
            vec(f"enc{l}.ln2_g", d, 1.0)
            vec(f"enc{l}.ln2_b", d, 0.0)
        ctx_dim = 2 * d + (1 if kind == ProblemKind.CVRP else 0)
        proj("dec.wq", ctx_dim, d)
        proj("dec.glimpse_wk", d, d)
        proj("dec.glimpse_wv", d, d)
        proj("dec.glimpse_wo", d, d)
        proj("dec.logit_wk", d, d)
        return cls(config, kind, tensors)

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def named(self) -> dict[str, Tensor]:
        return self._tensors

    def key_matrix(self, layer: int) -> Tensor:
        return self._tensors[f"enc{layer}.wk"]

    def bias_matrix(self, layer: int) -> Tensor:
        return self._tensors[f"enc{layer}.bias"]

    # -- checkpointing ------------------------------------------------------

    def save(self, path: str | Path, adam: "ad.Adam | None" = None,
             snapshot: ContextSnapshot | None = None) -> None:
        out: dict[str, np.ndarray] = {
            "meta/d": np.float64(self.config.d),
            "meta/heads": np.float64(self.config.heads),
            "meta/layers": np.float64(self.config.layers),
            "meta/n_max": np.float64(self.config.n_max),
            "meta/logit_clip": np.float64(self.config.logit_clip),
            "meta/kind": np.float64(0 if self.kind == ProblemKind.TSP else 1),
        }
        for name, t in self._tensors.items():
            out[name] = t.data
        if adam is not None:
            out["adam/t"] = np.float64(adam.t)
            for name in self._tensors:
                out[f"adam/m/{name}"] = adam.m[name]
                out[f"adam/v/{name}"] = adam.v[name]
        if snapshot is not None:
            for l in range(self.config.layers):
                out[f"snapshot/enc{l}.wk"] = snapshot.wk[l]
                out[f"snapshot/enc{l}.bias"] = snapshot.bias[l]
                out[f"snapshot/enc{l}.wk_imp"] = snapshot.wk_importance[l]
                out[f"snapshot/enc{l}.bias_imp"] = snapshot.bias_importance[l]
        save_tensors(path, out)

    @classmethod
    def load(cls, path: str | Path, lr: float = 1e-4, weight_decay: float = 1e-6,
             ) -> tuple["PolicyParams", "ad.Adam | None", ContextSnapshot | None]:
        blobs = load_tensors(path)
        try:
            config = ModelConfig(d=int(blobs["meta/d"]), heads=int(blobs["meta/heads"]),
                                 layers=int(blobs["meta/layers"]), n_max=int(blobs["meta/n_max"]),
                                 logit_clip=float(blobs["meta/logit_clip"]))
            kind = ProblemKind.TSP if int(blobs["meta/kind"]) == 0 else ProblemKind.CVRP
        except KeyError as exc:
            raise CheckpointError(f"{path}: missing metadata tensor {exc}") from exc
        params = cls.create(config, kind, seed=0)
        for name, t in params._tensors.items():
            if name not in blobs:
                raise CheckpointError(f"{path}: missing tensor {name!r}")
            if blobs[name].shape != t.data.shape:
                raise CheckpointError(
                    f"{path}: tensor {name!r} has shape {blobs[name].shape}, expected {t.data.shape}")
            t.data = np.ascontiguousarray(blobs[name])
        adam = None
        if "adam/t" in blobs:
            adam = ad.Adam(params.named(), lr=lr, weight_decay=weight_decay)
            adam.t = int(blobs["adam/t"])
            for name in params._tensors:
                adam.m[name] = np.ascontiguousarray(blobs[f"adam/m/{name}"])
                adam.v[name] = np.ascontiguousarray(blobs[f"adam/v/{name}"])
        snapshot = None
        if f"snapshot/enc0.wk" in blobs:
            layers = config.layers
            snapshot = ContextSnapshot(
                wk=tuple(blobs[f"snapshot/enc{l}.wk"] for l in range(layers)),
                bias=tuple(blobs[f"snapshot/enc{l}.bias"] for l in range(layers)),
                wk_importance=tuple(blobs[f"snapshot/enc{l}.wk_imp"] for l in range(layers)),
                bias_importance=tuple(blobs[f"snapshot/enc{l}.bias_imp"] for l in range(layers)),
            )
        return params, adam, snapshot


def snapshot_context(params: PolicyParams, importance: dict[str, np.ndarray]) -> ContextSnapshot:
    """Deep-copied (W_K, B) hand-off plus their importance weights.

    `importance` maps the key/bias parameter names to the trainer's
    accumulated elementwise mean |gradient| arrays.
    """
    layers = params.config.layers
    wk, bias, wk_imp, bias_imp = [], [], [], []
    for l in range(layers):
        wk_t = params.key_matrix(l)
        bias_t = params.bias_matrix(l)
        wk.append(wk_t.data.copy())
        bias.append(bias_t.data.copy())
        imp_k = importance.get(f"enc{l}.wk", np.zeros_like(wk_t.data))
        imp_b = importance.get(f"enc{l}.bias", np.zeros_like(bias_t.data))
        if imp_k.shape != wk_t.data.shape or imp_b.shape != bias_t.data.shape:
            raise ValueError("importance shapes must match the live parameters")
        wk_imp.append(imp_k.copy())
        bias_imp.append(imp_b.copy())
    return ContextSnapshot(wk=tuple(wk), bias=tuple(bias),
                           wk_importance=tuple(wk_imp), bias_importance=tuple(bias_imp))


# ---------------------------------------------------------------------------
# encoder
# ---------------------------------------------------------------------------

def _node_features(insts: list[Instance]) -> tuple[np.ndarray, np.ndarray | None]:
    coords = np.stack([inst.coords for inst in insts])
    if insts[0].kind == ProblemKind.TSP:
        return coords, None
    dem = np.stack([inst.demands / inst.capacity for inst in insts])
    return coords, dem


def embed_nodes(insts: list[Instance], params: PolicyParams) -> Tensor:
    """Project raw node features to (B, n_nodes, d) embeddings."""
    coords, dem = _node_features(insts)
    if insts[0].kind == ProblemKind.TSP:
        x = ad.matmul(Tensor(coords), params["embed.w"])
        return ad.add_rowvec(x, params["embed.b"])
    depot = ad.add_rowvec(ad.matmul(Tensor(coords[:, :1, :]), params["embed.depot_w"]),
                          params["embed.depot_b"])
    feats = np.concatenate([coords[:, 1:, :], dem[:, 1:, None]], axis=2)
    cust = ad.add_rowvec(ad.matmul(Tensor(feats), params["embed.cust_w"]),
                         params["embed.cust_b"])
    return ad.concat([depot, cust], axis=1)


def _encoder_layer(x: Tensor, params: PolicyParams, layer: int, n: int,
                   collect_attn: list | None = None) -> Tensor:
    cfg = params.config
    d, heads = cfg.d, cfg.heads
    dh = d // heads
    inv = 1.0 / math.sqrt(dh)
    bias = ad.slice2d(params.bias_matrix(layer), (0, n), (0, n))
    head_outs = []
    for i in range(heads):
        cols = (i * dh, (i + 1) * dh)
        q = ad.matmul(x, ad.slice2d(params[f"enc{layer}.wq"], (0, d), cols))
        k = ad.matmul(x, ad.slice2d(params[f"enc{layer}.wk"], (0, d), cols))
        v = ad.matmul(x, ad.slice2d(params[f"enc{layer}.wv"], (0, d), cols))
        scores = ad.mul_const(ad.add_shared_matrix(ad.matmul(q, ad.transpose_last(k)), bias), inv)
        attn = ad.masked_softmax(scores)
        if collect_attn is not None:
            collect_attn.append(attn.data.copy())
        head_outs.append(ad.matmul(attn, v))
    mha = ad.matmul(ad.concat(head_outs, axis=2), params[f"enc{layer}.wo"])
    x = ad.layer_norm(ad.add(x, mha), params[f"enc{layer}.ln1_g"], params[f"enc{layer}.ln1_b"])
    b, n_, d_ = x.shape
    flat = ad.reshape(x, (b * n_, d_))
    h = ad.relu(ad.add_rowvec(ad.matmul(flat, params[f"enc{layer}.ffn_w1"]),
                              params[f"enc{layer}.ffn_b1"]))
    h = ad.add_rowvec(ad.matmul(h, params[f"enc{layer}.ffn_w2"]), params[f"enc{layer}.ffn_b2"])
    ffn = ad.reshape(h, (b, n_, d_))
    return ad.layer_norm(ad.add(x, ffn), params[f"enc{layer}.ln2_g"], params[f"enc{layer}.ln2_b"])


def encode_batch(insts: list[Instance], params: PolicyParams,
                 collect_attn: list | None = None) -> Tensor:
    """Encode a same-shape batch of instances to (B, n_nodes, d)."""
    n = insts[0].n_nodes
    if n > params.config.n_max:
        raise ModelCapacityError(f"instance has {n} nodes, model allows n_max={params.config.n_max}")
    if any(i.n_nodes != n or i.kind != insts[0].kind for i in insts):
        raise ValueError("encode_batch needs instances of one kind and size")
    x = embed_nodes(insts, params)
    for layer in range(params.config.layers):
        x = _encoder_layer(x, params, layer, n, collect_attn)
    return x


def encode(inst: Instance, params: PolicyParams, collect_attn: list | None = None) -> Tensor:
    """Node embeddings (n_nodes, d) for one instance."""
    out = encode_batch([inst], params, collect_attn)
    return ad.reshape(out, out.shape[1:])


# ---------------------------------------------------------------------------
# decoder
# ---------------------------------------------------------------------------

@dataclass
class _DecoderContext:
    """Per-rollout precomputation shared by every decode step."""

    params: PolicyParams
    emb: Tensor                    # (B, m, d) node embeddings
    graph: Tensor                  # (B, 1, d) mean node embedding
    glimpse_k: list[Tensor]        # per head, (B, m, dh)
    glimpse_kt: list[Tensor]       # per head, (B, dh, m)
    glimpse_v: list[Tensor]        # per head, (B, m, dh)
    logit_kt: Tensor               # (B, d, m)
    cvrp: bool
    capacity: float | None = None


def _decoder_context(emb: Tensor, insts: list[Instance], params: PolicyParams) -> _DecoderContext:
    cfg = params.config
    dh = cfg.d // cfg.heads
    gk = ad.matmul(emb, params["dec.glimpse_wk"])
    gv = ad.matmul(emb, params["dec.glimpse_wv"])
    ks = [ad.slice_last(gk, i * dh, (i + 1) * dh) for i in range(cfg.heads)]
    cvrp = insts[0].kind == ProblemKind.CVRP
    b, _, d = emb.shape
    return _DecoderContext(
        params=params, emb=emb, graph=ad.reshape(ad.mean_axis1(emb), (b, 1, d)),
        glimpse_k=ks, glimpse_kt=[ad.transpose_last(k) for k in ks],
        glimpse_v=[ad.slice_last(gv, i * dh, (i + 1) * dh) for i in range(cfg.heads)],
        logit_kt=ad.transpose_last(ad.matmul(emb, params["dec.logit_wk"])),
        cvrp=cvrp, capacity=float(insts[0].capacity) if cvrp else None)


def _one_hot(idx: np.ndarray, m: int) -> np.ndarray:
    b, n = idx.shape
    oh = np.zeros((b, n, m))
    oh[np.arange(b)[:, None], np.arange(n)[None, :], idx] = 1.0
    return oh


def _decode_probs(dctx: _DecoderContext, current: np.ndarray,
                  remaining: np.ndarray | None, valid: np.ndarray) -> Tensor:
    """Action probabilities (B, N, m); masked actions get exactly zero.

    `current` and `remaining` are (B, N); `valid` is (B, N, m).
    """
    p = dctx.params
    cfg = p.config
    d, heads = cfg.d, cfg.heads
    dh = d // heads
    b, n_starts = current.shape
    m = dctx.emb.shape[1]
    cur = ad.matmul(Tensor(_one_hot(current, m)), dctx.emb)      # (B, N, d)
    parts = [ad.repeat_mid(dctx.graph, n_starts), cur]
    if dctx.cvrp:
        parts.append(Tensor((remaining / dctx.capacity)[:, :, None]))
    q = ad.matmul(ad.concat(parts, axis=2), p["dec.wq"])
    excluded = ~valid
    head_outs = []
    for i in range(heads):
        qi = ad.slice_last(q, i * dh, (i + 1) * dh)
        scores = ad.mul_const(ad.matmul(qi, dctx.glimpse_kt[i]), 1.0 / math.sqrt(dh))
        attn = ad.masked_softmax(scores, excluded)
        head_outs.append(ad.matmul(attn, dctx.glimpse_v[i]))
    glimpse = ad.matmul(ad.concat(head_outs, axis=2), p["dec.glimpse_wo"])
    compat = ad.mul_const(ad.matmul(glimpse, dctx.logit_kt), 1.0 / math.sqrt(d))
    logits = ad.mul_const(ad.tanh(compat), cfg.logit_clip)
    return ad.masked_softmax(logits, excluded)


def _pick_probs(probs: Tensor, chosen: np.ndarray) -> Tensor:
    """Probabilities of the chosen actions, (B, N)."""
    return ad.sum_last(ad.mul_const(probs, _one_hot(chosen, probs.shape[-1])))


def decode_step(embeddings: Tensor, state: RolloutState, inst: Instance,
                params: PolicyParams) -> np.ndarray:
    """Probability vector over nodes for one rollout state.

    Reference scalar path; the batched rollout reproduces it exactly.
    """
    emb = embeddings if embeddings.data.ndim == 3 else ad.reshape(embeddings, (1, *embeddings.shape))
    dctx = _decoder_context(emb, [inst], params)
    valid = valid_actions(state, inst)[None, None, :]
    remaining = None if inst.kind == ProblemKind.TSP \
        else np.array([[state.remaining]], dtype=np.float64)
    probs = _decode_probs(dctx, np.array([[state.current]]), remaining, valid)
    return probs.data[0, 0].copy()


# ---------------------------------------------------------------------------
# multi-start rollouts
# ---------------------------------------------------------------------------

@dataclass
class RolloutBatch:
    """Tours from N starts per instance."""

    insts: list[Instance]
    n_starts: int
    sequences: np.ndarray          # (B, N, T) int node sequences, depot-padded for CVRP
    costs: np.ndarray              # (B, N) closed-tour costs
    log_prob: Tensor | None        # (B, N) taped sum of chosen-step log-probs
    step_probs: list[np.ndarray]   # per policy-chosen step, (B, N) chosen probabilities


@dataclass(frozen=True)
class RolloutTrace:
    """One tour with its per-step probabilities (forced moves excluded)."""

    tour: Tour
    log_prob: float
    step_log_probs: tuple[float, ...]


def rollout_batch(insts: list[Instance], params: PolicyParams, n_starts: int,
                  mode: str, rng: np.random.Generator | None = None,
                  record: bool = False) -> RolloutBatch:
    """Vectorized multi-start construction for a same-shape batch.

    Start j of an instance forces node j (TSP) or customer j+1 (CVRP) as
    the first choice; forced moves contribute no log-probability.
    """
    if mode not in ("greedy", "sample"):
        raise ValueError(f"mode must be 'greedy' or 'sample', got {mode!r}")
    if mode == "sample" and rng is None:
        raise ValueError("sampling mode needs a generator")
    inst0 = insts[0]
    if n_starts > inst0.n:
        raise ValueError(f"n_starts={n_starts} exceeds problem size n={inst0.n}")
    b = len(insts)
    m = inst0.n_nodes
    emb = encode_batch(insts, params)
    dctx = _decoder_context(emb, insts, params)
    tsp = inst0.kind == ProblemKind.TSP

    b_idx = np.arange(b)[:, None]
    n_idx = np.arange(n_starts)[None, :]
    visited = np.zeros((b, n_starts, m), dtype=bool)
    starts = np.broadcast_to(np.arange(n_starts), (b, n_starts))
    columns: list[np.ndarray] = []
    if tsp:
        current = starts.copy()
        visited[b_idx, n_idx, current] = True
        remaining = None
        columns.append(current.copy())
        steps = m - 1
    else:
        demands = np.stack([inst.demands for inst in insts])  # (b, m)
        capacity = float(inst0.capacity)
        first = starts + 1
        current = first.copy()
        visited[b_idx, n_idx, first] = True
        remaining = capacity - demands[b_idx, first].astype(np.float64)
        columns.append(np.zeros((b, n_starts), dtype=np.intp))
        columns.append(first.copy())
        steps = 2 * inst0.n + 2

    log_prob: Tensor | None = None
    step_probs: list[np.ndarray] = []
    for _ in range(steps):
        if tsp:
            valid = ~visited
        else:
            served = visited[:, :, 1:].sum(axis=2)
            if (served == inst0.n).all():
                break
            cust_ok = ~visited[:, :, 1:] & (demands[:, None, 1:] <= remaining[:, :, None])
            depot_ok = ~((current == 0) & cust_ok.any(axis=2))
            valid = np.concatenate([depot_ok[:, :, None], cust_ok], axis=2)
        probs = _decode_probs(dctx, current, remaining, valid)
        if mode == "greedy":
            chosen = probs.data.argmax(axis=2)
        else:
            cum = np.cumsum(probs.data, axis=2)
            r = rng.random((b, n_starts)) * cum[:, :, -1]
            chosen = np.minimum((cum < r[:, :, None]).sum(axis=2), m - 1)
            bad = ~valid[b_idx, n_idx, chosen]
            if bad.any():
                chosen[bad] = probs.data[bad].argmax(axis=1)
        picked = _pick_probs(probs, chosen)
        step_probs.append(picked.data.copy())
        if record:
            lp = ad.log(picked)
            log_prob = lp if log_prob is None else ad.add(log_prob, lp)
        columns.append(chosen.copy())
        if tsp:
            visited[b_idx, n_idx, chosen] = True
            current = chosen
        else:
            at_depot = chosen == 0
            remaining = np.where(at_depot, capacity, remaining - demands[b_idx, chosen])
            visited[b_idx, n_idx, chosen] |= chosen > 0
            current = chosen
    if not tsp and (visited[:, :, 1:].sum(axis=2) != inst0.n).any():
        raise RuntimeError("CVRP rollout exceeded its step budget without finishing")

    sequences = np.stack(columns, axis=2)
    costs = _sequence_costs(sequences, insts)
    return RolloutBatch(insts=insts, n_starts=n_starts, sequences=sequences,
                        costs=costs, log_prob=log_prob, step_probs=step_probs)


def _sequence_costs(sequences: np.ndarray, insts: list[Instance]) -> np.ndarray:
    dist = np.stack([inst.matrix() for inst in insts])
    src = sequences
    dst = np.roll(sequences, -1, axis=2)
    b = len(insts)
    per_edge = dist[np.arange(b)[:, None, None], src, dst]
    return per_edge.sum(axis=2)


def _trim_cvrp(seq: np.ndarray) -> list[int]:
    """Drop trailing depot padding (keep one route-closing shape intact)."""
    out = list(int(v) for v in seq)
    while len(out) > 1 and out[-1] == 0:
        out.pop()
    return out


def rollout_multistart(inst: Instance, params: PolicyParams, n_starts: int,
                       mode: str = "sample", seed: int = 0) -> list[RolloutTrace]:
    """N tours from N distinct first choices, with per-step probabilities."""
    rng = np.random.Generator(np.random.Philox(key=np.uint64(seed)))
    batch = rollout_batch([inst], params, n_starts, mode, rng)
    traces = []
    for j in range(n_starts):
        seq = batch.sequences[0, j]
        seq = _trim_cvrp(seq) if inst.kind == ProblemKind.CVRP else [int(v) for v in seq]
        steps = tuple(float(np.log(p[0, j])) for p in batch.step_probs)
        traces.append(RolloutTrace(tour=make_tour(seq, inst),
                                   log_prob=float(sum(steps)),
                                   step_log_probs=steps))
    return traces


def tour_log_prob(inst: Instance, params: PolicyParams, sequence) -> Tensor:
    """Taped scalar log-probability of replaying a node sequence.

    Forced moves (the TSP start, the CVRP depot origin and first
    customer) contribute nothing, matching rollout log-probs.
    """
    from .vrp import initial_state, step as mdp_step

    seq = [int(v) for v in sequence]
    if inst.kind == ProblemKind.TSP:
        state = initial_state(inst, seq[0])
        actions = seq[1:]
    else:
        if seq[0] != 0:
            raise ValueError("CVRP sequences start at the depot")
        state = mdp_step(initial_state(inst, seq[1]), seq[1], inst)
        actions = seq[2:]
    emb = encode_batch([inst], params)
    dctx = _decoder_context(emb, [inst], params)
    total: Tensor | None = None
    for action in actions:
        valid = valid_actions(state, inst)[None, None, :]
        remaining = None if inst.kind == ProblemKind.TSP \
            else np.array([[state.remaining]], dtype=np.float64)
        probs = _decode_probs(dctx, np.array([[state.current]]), remaining, valid)
        lp = ad.log(_pick_probs(probs, np.array([[action]])))
        total = lp if total is None else ad.add(total, lp)
        state = mdp_step(state, action, inst)
    if total is None:
        return Tensor(0.0)
    return ad.sum_all(total)


def greedy_cost(insts: list[Instance], params: PolicyParams,
                n_starts: int | None = None) -> np.ndarray:
    """Best-of-N greedy decode cost per instance (the evaluation metric)."""
    n = insts[0].n if n_starts is None else min(n_starts, insts[0].n)
    batch = rollout_batch(insts, params, n, "greedy")
    return batch.costs.min(axis=1)
