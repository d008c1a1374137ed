"""Region pseudo-labels and multi-positive InfoNCE pretraining."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import cdnet
from . import tensorops as T
from .hsdata import HyperCube, dihedral

log = logging.getLogger(__name__)


REDUCTIONS = ("pairs", "queries")


@dataclass
class ContrastiveConfig:
    p: int = 6
    tau: float = 0.07
    iterations: int = 200
    augment: bool = True
    reduction: str = "queries"
    init: str = "residual"
    max_grad_norm: float | None = 1.0

    def __post_init__(self):
        if self.p < 1:
            raise ValueError("region side p must be >= 1")
        if self.tau <= 0:
            raise ValueError("temperature must be positive")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.reduction not in REDUCTIONS:
            raise ValueError(f"reduction must be one of {REDUCTIONS}")
        if self.init not in cdnet.INIT_SCHEMES:
            raise ValueError(f"init must be one of {cdnet.INIT_SCHEMES}")
        if self.max_grad_norm is not None and self.max_grad_norm <= 0:
            raise ValueError("max_grad_norm must be positive or None")


@dataclass
class RegionEntry:
    domain_id: str
    top: int
    left: int
    p: int
    window: np.ndarray  # (p + 2*margin, p + 2*margin, B)
    transform: int = 0


@dataclass
class RegionBatch:
    entries: list
    group_ids: list
    margin: int = 2

    def pixel_groups(self) -> np.ndarray:
        """Group id of every region pixel, domains in batch order."""
        return np.concatenate([np.full(e.p * e.p, g) for e, g in zip(self.entries, self.group_ids)])


def sample_regions(domains: list[HyperCube], p: int, rng: np.random.Generator,
                   augment: bool = False, margin: int = 2) -> RegionBatch:
    """One uniformly placed p x p region per domain, with ``margin`` pixels of context.

    Group ids are the domain positions 0..D-1. With ``augment`` one random
    dihedral transform is applied to each whole window.
    """
    entries = []
    side = p + 2 * margin
    for d in domains:
        if d.height < side or d.width < side:
            raise ValueError(f"{d.domain_id}: {d.height}x{d.width} image too small for p={p} "
                             f"plus {margin} context pixels per side")
        top = int(rng.integers(margin, d.height - p - margin + 1))
        left = int(rng.integers(margin, d.width - p - margin + 1))
        window = d.data[top - margin:top + p + margin, left - margin:left + p + margin]
        k = int(rng.integers(8)) if augment else 0
        if k:
            window = dihedral(window, k)
        entries.append(RegionEntry(d.domain_id, top, left, p, np.ascontiguousarray(window), k))
    return RegionBatch(entries, list(range(len(domains))), margin)


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------


def _check_batch(emb: np.ndarray, groups: np.ndarray):
    if emb.ndim != 2 or emb.shape[0] == 0:
        raise ValueError("need a non-empty (M, D) embedding matrix")
    if groups.shape != (emb.shape[0],):
        raise ValueError("one group id per embedding required")
    if np.unique(groups).size < 2:
        raise ValueError("at least two groups are needed to form negatives")


def _scores(emb: np.ndarray, groups: np.ndarray, tau: float):
    m = emb.shape[0]
    s = emb @ emb.T / tau
    off = ~np.eye(m, dtype=bool)
    pos = (groups[:, None] == groups[None, :]) & off
    s_masked = np.where(off, s, -np.inf)
    smax = s_masked.max(axis=1, keepdims=True)
    lse = np.log(np.exp(s_masked - smax).sum(axis=1)) + smax[:, 0]
    return s, pos, s_masked, lse


def infonce_query_losses(emb: np.ndarray, groups, tau: float) -> np.ndarray:
    """Per-query multi-positive InfoNCE: sum over positives of -log softmax.

    Keys of a query are all other batch samples; its positives are the other
    samples sharing its group.
    """
    groups = np.asarray(groups)
    _check_batch(emb, groups)
    s, pos, _, lse = _scores(emb, groups, tau)
    return pos.sum(axis=1) * lse - np.where(pos, s, 0.0).sum(axis=1)


def infonce_multi(emb: np.ndarray, groups, tau: float, reduction: str = "pairs"):
    """Batch multi-positive InfoNCE and its gradient d(loss)/d(emb).

    The per-query losses are summed and divided by the number of
    (query, positive) pairs (``"pairs"``) or by the number of queries
    (``"queries"``).
    """
    groups = np.asarray(groups)
    _check_batch(emb, groups)
    s, pos, s_masked, lse = _scores(emb, groups, tau)
    n_pos = pos.sum(axis=1)
    if reduction == "pairs":
        denom = max(int(n_pos.sum()), 1)
    elif reduction == "queries":
        denom = emb.shape[0]
    else:
        raise ValueError(f"unknown reduction {reduction!r}")
    loss = float(np.sum(n_pos * lse - np.where(pos, s, 0.0).sum(axis=1)) / denom)
    soft = np.exp(s_masked - lse[:, None])  # zero on the diagonal
    g = (n_pos[:, None] * soft - pos) / denom  # d loss / d s
    demb = (g + g.T) @ emb / tau
    return loss, demb


def infonce_single(emb: np.ndarray, query: int, positive: int, tau: float) -> float:
    """Single-positive InfoNCE of one (query, positive) pair against all other samples."""
    s = emb @ emb[query] / tau
    keys = np.delete(np.arange(emb.shape[0]), query)
    top = s[keys].max()
    return float(np.log(np.exp(s[keys] - top).sum()) + top - s[positive])


# ---------------------------------------------------------------------------
# pretraining loop
# ---------------------------------------------------------------------------


@dataclass
class PretrainResult:
    params: cdnet.CdcnnParams
    history: list = field(default_factory=list)  # (iteration, lr, loss)


def contrastive_step(params: cdnet.CdcnnParams, batch: RegionBatch, tau: float,
                     reduction: str = "pairs") -> float:
    """Forward all regions, pooled InfoNCE, backward into grads. Returns the loss."""
    embs, caches = [], []
    dtype = params.dtype
    for entry in batch.entries:
        x = entry.window.transpose(2, 0, 1)[None].astype(dtype, copy=False)
        e, cache = cdnet.forward_embedding(params, entry.domain_id, np.ascontiguousarray(x))
        embs.append(e[0].reshape(e.shape[1], -1).T)  # (p*p, D)
        caches.append((cache, e.shape))
    groups = batch.pixel_groups()
    loss, demb = infonce_multi(np.concatenate(embs), groups, tau, reduction)
    if not np.isfinite(loss):
        raise T.NonFiniteError("contrastive loss is not finite")
    start = 0
    for (cache, shape), e in zip(caches, embs):
        g = demb[start:start + e.shape[0]]
        start += e.shape[0]
        dout = np.ascontiguousarray(g.T.reshape(shape)).astype(dtype, copy=False)
        cdnet.backward(params, cache, dout)
    return loss


def pretrain(domains: list[HyperCube], arch: cdnet.ArchConfig, ccfg: ContrastiveConfig,
             sgd: T.SgdConfig, seed: int, params: cdnet.CdcnnParams | None = None,
             deterministic: bool = False) -> PretrainResult:
    """Contrastive pretraining of encoders and trunk over ``domains`` (normalized cubes)."""
    if len(domains) < 2:
        raise ValueError("contrastive pretraining needs at least two domains")
    init_seed, sample_seed = T.as_seed_sequence(seed).spawn(2)
    if params is None:
        params = cdnet.init_params(arch, [d.spec for d in domains], init_seed, with_heads=False,
                                   init=ccfg.init)
    rng = np.random.default_rng(sample_seed)
    result = PretrainResult(params)
    with T.compute_threads(deterministic):
        for it in range(ccfg.iterations):
            batch = sample_regions(domains, ccfg.p, rng, augment=ccfg.augment, margin=arch.context)
            params.zero_grad()
            try:
                loss = contrastive_step(params, batch, ccfg.tau, ccfg.reduction)
                lrs = params.step(sgd, it, 1.0, ccfg.max_grad_norm)
            except T.NonFiniteError as exc:
                raise T.NonFiniteError(f"pretraining diverged at iteration {it}: {exc}") from None
            result.history.append((it, lrs[T.SHARED], loss))
            if it % 20 == 0 or it == ccfg.iterations - 1:
                log.info("pretrain iter %d lr %.5g loss %.5f", it, lrs[T.SHARED], loss)
    return result


def embedding_similarity(params: cdnet.CdcnnParams, domains: list[HyperCube], p: int,
                         rng: np.random.Generator, trials: int = 10) -> tuple[float, float]:
    """Mean intra-group and inter-group cosine similarity on freshly sampled regions."""
    intra, inter = [], []
    for _ in range(trials):
        batch = sample_regions(domains, p, rng, margin=params.arch.context)
        embs = []
        for entry in batch.entries:
            x = entry.window.transpose(2, 0, 1)[None].astype(np.float32)
            e, _ = cdnet.forward_embedding(params, entry.domain_id, np.ascontiguousarray(x))
            embs.append(e[0].reshape(e.shape[1], -1).T)
        e = np.concatenate(embs).astype(np.float64)
        g = batch.pixel_groups()
        sim = e @ e.T
        same = (g[:, None] == g[None, :]) & ~np.eye(len(g), dtype=bool)
        diff = g[:, None] != g[None, :]
        intra.append(sim[same].mean())
        inter.append(sim[diff].mean())
    return float(np.mean(intra)), float(np.mean(inter))
