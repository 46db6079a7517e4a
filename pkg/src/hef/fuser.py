"""Child-to-parent vector fusion.

Two fusers share one interface (``fuse(children) -> unit vector`` plus a
``digest``): :class:`MeanFuser`, a parameter-free baseline, and
:class:`AttnFuser`, a single causal self-attention block with a GELU
feed-forward layer that reads the hidden state at the last child.

The attention fuser has hand-written reverse-mode gradients (batched over
groups with padding), a tree-level forward/backward used to differentiate
repository roots through the whole hierarchy, and an AdamW trainer for the
contrastive objective.
"""

from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import ConfigError, ContractError, NonFiniteError

NORM_EPS = 1e-12
_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)

PARAM_NAMES = (
    "w_in", "b_in",
    "w_q", "w_k", "w_v", "w_o",
    "w_1f", "b_1f", "w_2f", "b_2f",
    "w_out", "b_out",
)


def gelu(x: np.ndarray) -> np.ndarray:
    """tanh-approximated GELU."""
    return 0.5 * x * (1.0 + np.tanh(_SQRT_2_OVER_PI * (x + 0.044715 * x ** 3)))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    t = np.tanh(_SQRT_2_OVER_PI * (x + 0.044715 * x ** 3))
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _SQRT_2_OVER_PI * (1.0 + 3 * 0.044715 * x * x)


@dataclass
class FuserParams:
    w_in: np.ndarray
    b_in: np.ndarray
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray
    w_1f: np.ndarray
    b_1f: np.ndarray
    w_2f: np.ndarray
    b_2f: np.ndarray
    w_out: np.ndarray
    b_out: np.ndarray
    heads: int = 4

    def __post_init__(self):
        for name in PARAM_NAMES:
            setattr(self, name, np.ascontiguousarray(getattr(self, name), dtype=np.float64))
        self.validate()

    @property
    def d(self) -> int:
        return self.w_in.shape[1]

    @property
    def d_f(self) -> int:
        return self.w_in.shape[0]

    @classmethod
    def init(cls, d: int, d_f: int = 64, heads: int = 4, seed: int = 0) -> "FuserParams":
        """Weights ~ N(0, 1/fan_in), biases zero."""
        rng = np.random.default_rng(seed)

        def w(rows, cols):
            return rng.normal(0.0, 1.0 / math.sqrt(cols), size=(rows, cols))

        return cls(
            w_in=w(d_f, d), b_in=np.zeros(d_f),
            w_q=w(d_f, d_f), w_k=w(d_f, d_f), w_v=w(d_f, d_f), w_o=w(d_f, d_f),
            w_1f=w(4 * d_f, d_f), b_1f=np.zeros(4 * d_f),
            w_2f=w(d_f, 4 * d_f), b_2f=np.zeros(d_f),
            w_out=w(d, d_f), b_out=np.zeros(d),
            heads=heads,
        )

    def save(self, path: Union[str, Path]) -> None:
        with open(path, "wb") as fh:
            np.savez(fh, heads=np.array(self.heads), **self.arrays())

    @classmethod
    def load(cls, path: Union[str, Path]) -> "FuserParams":
        with np.load(path) as z:
            return cls(**{name: z[name] for name in PARAM_NAMES}, heads=int(z["heads"]))

    def validate(self) -> None:
        d, df = self.d, self.d_f
        if self.heads < 1 or df % self.heads:
            raise ContractError(f"heads={self.heads} must divide d_f={df}")
        expected = {
            "w_in": (df, d), "b_in": (df,),
            "w_q": (df, df), "w_k": (df, df), "w_v": (df, df), "w_o": (df, df),
            "w_1f": (4 * df, df), "b_1f": (4 * df,), "w_2f": (df, 4 * df), "b_2f": (df,),
            "w_out": (d, df), "b_out": (d,),
        }
        for name, shape in expected.items():
            arr = getattr(self, name)
            if arr.shape != shape:
                raise ContractError(f"{name} has shape {arr.shape}, expected {shape}")
            if not np.all(np.isfinite(arr)):
                raise NonFiniteError(f"{name} contains non-finite values")

    def arrays(self) -> Dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def copy(self) -> "FuserParams":
        return FuserParams(**{k: v.copy() for k, v in self.arrays().items()}, heads=self.heads)

    def digest(self) -> int:
        h = hashlib.blake2b(digest_size=8)
        h.update(b"attn")
        h.update(np.array([self.d, self.d_f, self.heads], dtype="<u4").tobytes())
        for name in PARAM_NAMES:
            h.update(getattr(self, name).astype("<f8").tobytes())
        return int.from_bytes(h.digest(), "little")


# --------------------------------------------------------------------------
# batched forward / backward over groups of children


@dataclass
class _FwdCache:
    H: np.ndarray
    lengths: np.ndarray
    X: np.ndarray
    xt: np.ndarray
    qh: np.ndarray
    Kh: np.ndarray
    Vh: np.ndarray
    a: np.ndarray
    o: np.ndarray
    r: np.ndarray
    u: np.ndarray
    z: np.ndarray
    f: np.ndarray
    y: np.ndarray
    nrm: np.ndarray
    out: np.ndarray


def attn_forward(params: FuserParams, H: np.ndarray, lengths: Optional[np.ndarray] = None) -> Tuple[np.ndarray, _FwdCache]:
    """Fuse a padded batch ``H`` of shape ``(B, n, d)``.

    ``lengths[b]`` is the number of real children of group ``b``; positions
    beyond it are ignored. Returns ``(B, d)`` outputs scaled to unit length.
    """
    H = np.asarray(H, dtype=np.float64)
    B, n, d = H.shape
    if d != params.d:
        raise ContractError(f"children have dim {d}, fuser expects {params.d}")
    if lengths is None:
        lengths = np.full(B, n, dtype=np.int64)
    lengths = np.asarray(lengths, dtype=np.int64)
    if np.any(lengths < 1) or np.any(lengths > n):
        raise ContractError("each group needs between 1 and n children")
    heads = params.heads
    df = params.d_f
    dh = df // heads
    bidx = np.arange(B)
    last = lengths - 1

    X = H @ params.w_in.T + params.b_in
    xt = X[bidx, last]
    q = xt @ params.w_q.T
    K = X @ params.w_k.T
    V = X @ params.w_v.T
    qh = q.reshape(B, heads, dh)
    Kh = K.reshape(B, n, heads, dh)
    Vh = V.reshape(B, n, heads, dh)
    s = np.einsum("bhd,bnhd->bhn", qh, Kh) / math.sqrt(dh)
    valid = np.arange(n)[None, :] < lengths[:, None]
    s = np.where(valid[:, None, :], s, -np.inf)
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    a = e / e.sum(axis=-1, keepdims=True)
    o = np.einsum("bhn,bnhd->bhd", a, Vh).reshape(B, df)
    r = xt + o @ params.w_o.T
    u = r @ params.w_1f.T + params.b_1f
    z = gelu(u)
    f = r + z @ params.w_2f.T + params.b_2f
    y = f @ params.w_out.T + params.b_out
    nrm = np.sqrt((y * y).sum(axis=1) + NORM_EPS ** 2)
    out = y / nrm[:, None]
    if not np.all(np.isfinite(out)):
        raise NonFiniteError("non-finite activation in fuser forward pass")
    cache = _FwdCache(H, lengths, X, xt, qh, Kh, Vh, a, o, r, u, z, f, y, nrm, out)
    return out, cache


def attn_backward(params: FuserParams, cache: _FwdCache, g_out: np.ndarray) -> Tuple[Dict[str, np.ndarray], np.ndarray]:
    """Gradients of ``sum(g_out * out)`` w.r.t. every parameter and the children."""
    c = cache
    B, n, _ = c.H.shape
    heads = params.heads
    df = params.d_f
    dh = df // heads
    bidx = np.arange(B)
    last = c.lengths - 1
    g = {}

    g_y = g_out / c.nrm[:, None] - c.y * ((c.y * g_out).sum(axis=1) / c.nrm ** 3)[:, None]
    g["w_out"] = g_y.T @ c.f
    g["b_out"] = g_y.sum(axis=0)
    g_f = g_y @ params.w_out

    g["w_2f"] = g_f.T @ c.z
    g["b_2f"] = g_f.sum(axis=0)
    g_u = (g_f @ params.w_2f) * gelu_grad(c.u)
    g["w_1f"] = g_u.T @ c.r
    g["b_1f"] = g_u.sum(axis=0)
    g_r = g_f + g_u @ params.w_1f

    g["w_o"] = g_r.T @ c.o
    g_oh = (g_r @ params.w_o).reshape(B, heads, dh)
    g_xt = g_r.copy()

    g_a = np.einsum("bhd,bnhd->bhn", g_oh, c.Vh)
    g_Vh = np.einsum("bhn,bhd->bnhd", c.a, g_oh)
    g_s = c.a * (g_a - (c.a * g_a).sum(axis=-1, keepdims=True)) / math.sqrt(dh)
    g_q = np.einsum("bhn,bnhd->bhd", g_s, c.Kh).reshape(B, df)
    g_K = np.einsum("bhn,bhd->bnhd", g_s, c.qh).reshape(B, n, df)
    g_V = g_Vh.reshape(B, n, df)

    g["w_q"] = g_q.T @ c.xt
    g_xt += g_q @ params.w_q
    g["w_k"] = np.einsum("bnf,bng->fg", g_K, c.X)
    g["w_v"] = np.einsum("bnf,bng->fg", g_V, c.X)
    g_X = g_K @ params.w_k + g_V @ params.w_v
    g_X[bidx, last] += g_xt

    g["w_in"] = np.einsum("bnf,bnd->fd", g_X, c.H)
    g["b_in"] = g_X.sum(axis=(0, 1))
    g_H = g_X @ params.w_in
    for name, arr in g.items():
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"non-finite gradient in parameter block {name}")
    return g, g_H


# --------------------------------------------------------------------------
# fuser objects used by the cache builder


def _check_children(children) -> np.ndarray:
    arr = np.asarray(children)
    if arr.ndim != 2 or arr.shape[0] < 1:
        raise ContractError("children must be a non-empty (n, d) array")
    return arr


class MeanFuser:
    """Arithmetic mean of the children, re-normalized."""

    kind = "mean"

    def fuse(self, children) -> np.ndarray:
        arr = _check_children(children).astype(np.float64)
        if arr.shape[0] == 1:
            return np.asarray(children, dtype=np.float32)[0].copy()
        m = arr.mean(axis=0)
        n = math.sqrt(float(m @ m))
        if n == 0.0:
            out = np.zeros_like(m)
            out[0] = 1.0
            return out.astype(np.float32)
        return (m / n).astype(np.float32)

    def digest(self) -> int:
        return int.from_bytes(hashlib.blake2b(b"mean", digest_size=8).digest(), "little")


class AttnFuser:
    """Causal-attention fuser bound to a fixed set of parameters."""

    kind = "attn"

    def __init__(self, params: FuserParams):
        self.params = params
        self._digest = params.digest()

    def fuse(self, children) -> np.ndarray:
        arr = _check_children(children)
        out, _ = attn_forward(self.params, arr[None, :, :])
        v = out[0]
        if float(v @ v) < 0.25:
            # degenerate params with a vanishing pre-normalization output
            v = np.zeros_like(v)
            v[0] = 1.0
        return v.astype(np.float32)

    def digest(self) -> int:
        return self._digest


Fuser = Union[MeanFuser, AttnFuser]


def fuse_mean(children) -> np.ndarray:
    return MeanFuser().fuse(children)


def fuse_attn(children, params: FuserParams) -> np.ndarray:
    return AttnFuser(params).fuse(children)


# --------------------------------------------------------------------------
# contrastive loss


def infonce_loss(query, positive, negatives, tau: float) -> float:
    """InfoNCE of one query against one positive and at least one negative."""
    if tau <= 0:
        raise ContractError("tau must be positive")
    negs = np.asarray(negatives, dtype=np.float64)
    if negs.ndim == 1:
        negs = negs[None, :]
    if negs.shape[0] == 0 or negs.size == 0:
        raise ContractError("infonce_loss needs at least one negative")
    q = np.asarray(query, dtype=np.float64)
    logits = np.concatenate([[q @ np.asarray(positive, dtype=np.float64)], negs @ q]) / tau
    mx = logits.max()
    return float(mx + math.log(np.exp(logits - mx).sum()) - logits[0])


@dataclass
class TreePlan:
    """Fusion schedule of one repository hierarchy.

    Slots ``0..N-1`` hold the (constant) leaf vectors; op ``k`` writes slot
    ``N + k`` by fusing the listed child slots in order. The last op's slot
    is the root.
    """

    leaves: np.ndarray
    ops: List[Tuple[int, ...]]

    @property
    def n_slots(self) -> int:
        return len(self.leaves) + len(self.ops)

    @property
    def root_slot(self) -> int:
        return self.n_slots - 1 if self.ops else 0

    def stages(self) -> List[int]:
        n = len(self.leaves)
        depth = [0] * self.n_slots
        out = []
        for k, children in enumerate(self.ops):
            dk = 1 + max(depth[c] for c in children)
            depth[n + k] = dk
            out.append(dk)
        return out

    def root_with(self, fuser: Fuser) -> np.ndarray:
        vals = [np.asarray(v, dtype=np.float32) for v in self.leaves]
        for children in self.ops:
            vals.append(fuser.fuse(np.stack([vals[c] for c in children])))
        return vals[self.root_slot]


@dataclass
class ContrastiveBatch:
    """Trees of the repositories in a batch plus ``(query, owner)`` samples.

    Negatives for a sample are the roots of every tree except its owner.
    """

    trees: List[TreePlan]
    queries: np.ndarray
    owners: np.ndarray


def _forest_forward(params: FuserParams, trees: Sequence[TreePlan]):
    d = params.d
    offsets = np.cumsum([0] + [t.n_slots for t in trees])
    total = int(offsets[-1])
    values = np.zeros((total + 1, d))  # trailing zero row pads short groups
    by_stage: Dict[int, List[Tuple[int, Tuple[int, ...]]]] = {}
    roots = []
    for t, off in zip(trees, offsets[:-1]):
        nl = len(t.leaves)
        values[off:off + nl] = t.leaves
        for k, (children, st) in enumerate(zip(t.ops, t.stages())):
            by_stage.setdefault(st, []).append((off + nl + k, tuple(off + c for c in children)))
        roots.append(off + t.root_slot)
    records = []
    for st in sorted(by_stage):
        ops = by_stage[st]
        width = max(len(ch) for _, ch in ops)
        idx = np.full((len(ops), width), total, dtype=np.int64)
        for i, (_, ch) in enumerate(ops):
            idx[i, :len(ch)] = ch
        lengths = np.array([len(ch) for _, ch in ops], dtype=np.int64)
        out_slots = np.array([o for o, _ in ops], dtype=np.int64)
        out, cache = attn_forward(params, values[idx], lengths)
        values[out_slots] = out
        records.append((out_slots, idx, cache))
    return values, np.array(roots, dtype=np.int64), records


def _forest_backward(params: FuserParams, values, records, g_values) -> Dict[str, np.ndarray]:
    grads = {name: np.zeros_like(getattr(params, name)) for name in PARAM_NAMES}
    for out_slots, idx, cache in reversed(records):
        g, g_H = attn_backward(params, cache, g_values[out_slots])
        for name, arr in g.items():
            grads[name] += arr
        np.add.at(g_values, idx.ravel(), g_H.reshape(-1, g_H.shape[-1]))
    return grads


def forest_roots(params: FuserParams, trees: Sequence[TreePlan]) -> np.ndarray:
    values, roots, _ = _forest_forward(params, trees)
    return values[roots]


def batch_loss(params: FuserParams, batch: ContrastiveBatch, tau: float) -> float:
    return loss_and_grad(params, batch, tau, need_grad=False)[0]


def loss_and_grad(params: FuserParams, batch: ContrastiveBatch, tau: float, need_grad: bool = True):
    """Mean InfoNCE over the batch and its exact gradient w.r.t. every block.

    Gradients flow through every fusion in every tree (leaves are constant).
    """
    if tau <= 0:
        raise ContractError("tau must be positive")
    if len(batch.trees) < 2:
        raise ConfigError("need at least two repositories to form negatives")
    values, roots, records = _forest_forward(params, batch.trees)
    R = values[roots]
    Q = np.asarray(batch.queries, dtype=np.float64)
    owners = np.asarray(batch.owners, dtype=np.int64)
    B = len(Q)
    logits = (Q @ R.T) / tau
    mx = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - mx)
    lse = mx[:, 0] + np.log(e.sum(axis=1))
    loss = float(np.mean(lse - logits[np.arange(B), owners]))
    if not need_grad:
        return loss, None
    p = e / e.sum(axis=1, keepdims=True)
    p[np.arange(B), owners] -= 1.0
    p /= B
    g_values = np.zeros_like(values)
    np.add.at(g_values, roots, (p.T @ Q) / tau)
    grads = _forest_backward(params, values, records, g_values)
    return loss, grads


backward = loss_and_grad


# --------------------------------------------------------------------------
# training


@dataclass
class FuserTrainConfig:
    tau: float = 0.07
    lr: float = 2e-5
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    warmup_steps: int = 500
    batch_size: int = 32
    steps: int = 2000
    seed: int = 0
    d_f: int = 64
    heads: int = 4
    eval_every: int = 50

    def __post_init__(self):
        if self.tau <= 0:
            raise ConfigError("tau must be positive")
        if self.lr < 0:
            raise ConfigError("lr must be non-negative")
        if self.steps < 1 or self.batch_size < 2:
            raise ConfigError("need steps >= 1 and batch_size >= 2")


@dataclass
class ContrastiveCorpus:
    """Per-repository trees with training and held-out query vectors."""

    trees: List[TreePlan]
    train_queries: List[np.ndarray]
    val_queries: List[np.ndarray]

    def __post_init__(self):
        if len(self.trees) < 2:
            raise ConfigError("contrastive training needs at least two repositories")
        if not (len(self.trees) == len(self.train_queries) == len(self.val_queries)):
            raise ConfigError("trees and query pools must align")
        if any(len(q) == 0 for q in self.train_queries):
            raise ConfigError("every repository needs at least one training query")

    def validation_batch(self) -> ContrastiveBatch:
        qs, owners = [], []
        for i, pool in enumerate(self.val_queries):
            for v in pool:
                qs.append(v)
                owners.append(i)
        return ContrastiveBatch(self.trees, np.asarray(qs, dtype=np.float64), np.asarray(owners))


@dataclass
class TrainResult:
    params: FuserParams
    curve: List[Tuple[int, float, float]]
    val_curve: List[Tuple[int, float]]
    best_step: int
    initial_val_loss: float
    best_val_loss: float
    final_params: Optional[FuserParams] = None


def lr_at(step: int, cfg: FuserTrainConfig) -> float:
    """Linear warmup to ``cfg.lr`` then cosine decay to zero (steps are 1-based)."""
    if cfg.warmup_steps > 0 and step <= cfg.warmup_steps:
        return cfg.lr * step / cfg.warmup_steps
    span = max(1, cfg.steps - cfg.warmup_steps)
    progress = min(1.0, (step - cfg.warmup_steps) / span)
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def train_contrastive(
    corpus: ContrastiveCorpus,
    cfg: FuserTrainConfig,
    params: Optional[FuserParams] = None,
    progress: Optional[Callable[[int, float], None]] = None,
) -> TrainResult:
    """Train the attention fuser with in-batch InfoNCE and AdamW.

    Each step samples ``min(batch_size, n_repos)`` distinct repositories and
    one training query per repository; roots are recomputed with the current
    parameters. The returned parameters are those with the lowest validation
    loss (evaluated every ``cfg.eval_every`` steps and at the end).
    """
    rng = np.random.default_rng(cfg.seed)
    d = corpus.trees[0].leaves.shape[1]
    if params is None:
        params = FuserParams.init(d, cfg.d_f, cfg.heads, seed=cfg.seed)
    params = params.copy()
    val_batch = corpus.validation_batch()
    has_val = len(val_batch.queries) > 0

    def val_loss(p):
        return batch_loss(p, val_batch, cfg.tau) if has_val else float("nan")

    m = {k: np.zeros_like(v) for k, v in params.arrays().items()}
    v2 = {k: np.zeros_like(v) for k, v in params.arrays().items()}
    b1, b2 = cfg.betas
    initial = val_loss(params)
    best, best_step, best_params = initial, 0, params.copy()
    curve, val_curve = [], [(0, initial)]
    n_repos = len(corpus.trees)
    bs = min(cfg.batch_size, n_repos)
    for step in range(1, cfg.steps + 1):
        repos = np.sort(rng.choice(n_repos, size=bs, replace=False))
        queries = np.stack(
            [corpus.train_queries[r][rng.integers(len(corpus.train_queries[r]))] for r in repos]
        )
        batch = ContrastiveBatch([corpus.trees[r] for r in repos], queries, np.arange(bs))
        loss, grads = loss_and_grad(params, batch, cfg.tau)
        lr = lr_at(step, cfg)
        for name in PARAM_NAMES:
            g = grads[name]
            m[name] = b1 * m[name] + (1 - b1) * g
            v2[name] = b2 * v2[name] + (1 - b2) * g * g
            mhat = m[name] / (1 - b1 ** step)
            vhat = v2[name] / (1 - b2 ** step)
            p = getattr(params, name)
            p -= lr * (mhat / (np.sqrt(vhat) + cfg.eps) + cfg.weight_decay * p)
        curve.append((step, loss, lr))
        if progress is not None:
            progress(step, loss)
        if has_val and (step % cfg.eval_every == 0 or step == cfg.steps):
            vl = val_loss(params)
            val_curve.append((step, vl))
            if vl < best:
                best, best_step, best_params = vl, step, params.copy()
    if not has_val:
        best_params = params.copy()
        best_step = cfg.steps
    return TrainResult(best_params, curve, val_curve, best_step, initial, best, params.copy())


def write_loss_csv(curve: Sequence[Tuple[int, float, float]], path: Union[str, Path]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss", "lr"])
        for step, loss, lr in curve:
            w.writerow([step, repr(float(loss)), repr(float(lr))])
