"""Transfer, finetuning, the four training regimes, and OA/AA evaluation."""

from __future__ import annotations

import logging
import zlib
from dataclasses import dataclass, field, replace

import numpy as np

from . import cdnet, selfsup
from . import tensorops as T
from .hsdata import DomainSpec, HyperCube, SplitSpec, dihedral, extract_patches, make_split

log = logging.getLogger(__name__)

REGIMES = ("scratch", "cd_scratch", "sup_pretrain", "self_sup")


def derive_seed(master: int, *keys) -> np.random.SeedSequence:
    """Child seed for a (module, run, ...) path under one master seed.

    String keys are hashed with CRC32 so the mapping is stable across
    processes and Python versions.
    """
    words = [int(master) & 0xFFFFFFFFFFFFFFFF]
    for k in keys:
        words.append(zlib.crc32(k.encode()) if isinstance(k, str) else int(k))
    return np.random.SeedSequence(words)


@dataclass
class FinetuneConfig:
    iterations: int = 100
    milestones: tuple = (60, 80)
    lr_multiplier_domain_specific: float = 10.0
    augment: bool = True
    train_per_domain: int = 200
    runs: int = 5
    base_lr: float = 0.03
    momentum: float = 0.9
    weight_decay: float = 0.005
    gamma: float = 0.1
    # joint gradient L2 norm cap applied before every update; None disables
    max_grad_norm: float | None = 1.0

    def __post_init__(self):
        self.milestones = tuple(int(m) for m in self.milestones)
        if self.lr_multiplier_domain_specific <= 0:
            raise ValueError("lr multiplier must be positive")
        if self.max_grad_norm is not None and self.max_grad_norm <= 0:
            raise ValueError("max_grad_norm must be positive or None")
        if any(not 0 <= m < max(self.iterations, 1) for m in self.milestones):
            raise ValueError(f"milestones {self.milestones} must lie in [0, {self.iterations})")

    def sgd(self) -> T.SgdConfig:
        return T.SgdConfig(self.base_lr, self.momentum, self.weight_decay, self.gamma, self.milestones)


@dataclass
class TrainHistory:
    loss: list = field(default_factory=list)
    lr_shared: list = field(default_factory=list)
    lr_domain: list = field(default_factory=list)
    samples: list = field(default_factory=list)  # patches per iteration
    domain_trunk_grad: list = field(default_factory=list)  # per iteration: {domain: |trunk grad|}


# ---------------------------------------------------------------------------
# transfer
# ---------------------------------------------------------------------------


def transfer(pretrained: cdnet.CdcnnParams, target: DomainSpec, seed,
             arch: cdnet.ArchConfig | None = None) -> cdnet.CdcnnParams:
    """Copy the shared trunk; fresh Gaussian encoder and head for ``target``."""
    if arch is not None:
        cdnet.check_trunk_compatible(pretrained.arch, arch)
    if target.num_classes < 1:
        raise ValueError(f"target {target.domain_id!r} needs at least one class")
    src = pretrained.arch
    new_arch = replace(src, head_classes={target.domain_id: target.num_classes})
    rng = np.random.default_rng(seed)
    dtype = pretrained.dtype
    encoders = {target.domain_id: cdnet.init_encoder(new_arch, target.bands, rng, dtype)}
    heads = {target.domain_id: cdnet.init_head(new_arch, target.num_classes, rng, dtype)}
    trunk = {}
    for name, pair in pretrained.trunk.items():
        trunk[name] = {k: T.ParamTensor(p.value.copy(), T.SHARED, p.decay) for k, p in pair.items()}
    return cdnet.CdcnnParams(new_arch, encoders, trunk, heads, {target.domain_id: target.bands})


# ---------------------------------------------------------------------------
# supervised training
# ---------------------------------------------------------------------------


def labeled_patches(cube: HyperCube, indices: np.ndarray, arch: cdnet.ArchConfig,
                    augment: bool, dtype=np.float32):
    """NCHW patches (kernel-sized) and 0-based labels; 8x copies with augmentation."""
    rows, cols = np.divmod(np.asarray(indices, dtype=np.int64), cube.width)
    side = 2 * arch.context + 1
    x = extract_patches(cube, rows, cols, side).transpose(0, 3, 1, 2)
    y = cube.labels[rows, cols] - 1
    if augment:
        x = np.concatenate([dihedral(x, k, axes=(2, 3)) for k in range(8)])
        y = np.tile(y, 8)
    return np.ascontiguousarray(x, dtype=dtype), y


def supervised_step(params: cdnet.CdcnnParams, domain_id: str, x: np.ndarray, y: np.ndarray) -> float:
    logits, cache = cdnet.forward_logits(params, domain_id, x)
    z = logits.reshape(logits.shape[0], -1)
    loss, dz = T.softmax_cross_entropy(z.astype(np.float64), y)
    if not np.isfinite(loss):
        raise T.NonFiniteError(f"cross-entropy on {domain_id!r} is not finite")
    cdnet.backward(params, cache, dz.astype(logits.dtype).reshape(logits.shape))
    return loss


def train_supervised(params: cdnet.CdcnnParams, cube: HyperCube, train_idx: np.ndarray,
                     cfg: FinetuneConfig, lr_multiplier: float | None = None,
                     deterministic: bool = False) -> TrainHistory:
    """Full-batch cross-entropy training of ``params`` on one domain, in place.

    ``lr_multiplier`` scales the domain-specific group; it defaults to the
    config value (finetuning). Pass 1.0 for from-scratch training.
    """
    mult = cfg.lr_multiplier_domain_specific if lr_multiplier is None else lr_multiplier
    dtype = params.dtype
    x, y = labeled_patches(cube, train_idx, params.arch, cfg.augment, dtype)
    sgd = cfg.sgd()
    hist = TrainHistory()
    with T.compute_threads(deterministic):
        for it in range(cfg.iterations):
            params.zero_grad()
            loss = supervised_step(params, cube.domain_id, x, y)
            try:
                lrs = params.step(sgd, it, mult, cfg.max_grad_norm)
            except T.NonFiniteError as exc:
                raise T.NonFiniteError(f"training diverged at iteration {it}: {exc}") from None
            hist.loss.append(loss)
            hist.lr_shared.append(lrs[T.SHARED])
            hist.lr_domain.append(lrs[T.DOMAIN_SPECIFIC])
            hist.samples.append(len(y))
            if it % 20 == 0 or it == cfg.iterations - 1:
                log.info("%s iter %d loss %.5f", cube.domain_id, it, loss)
    return hist


def train_joint(params: cdnet.CdcnnParams, batches: dict, sgd: T.SgdConfig, iterations: int,
                deterministic: bool = False, max_grad_norm: float | None = None) -> TrainHistory:
    """Joint supervised training over several domains sharing one trunk.

    ``batches`` maps domain id to either a fixed ``(x, y)`` pair or a callable
    ``it -> (x, y)``. The loss is the sum of per-domain mean cross-entropies.
    The recorded per-domain trunk gradient norms are taken before clipping.
    """
    hist = TrainHistory()
    with T.compute_threads(deterministic):
        for it in range(iterations):
            params.zero_grad()
            total, per_domain = 0.0, {}
            for d, b in batches.items():
                x, y = b(it) if callable(b) else b
                before = [p.grad.copy() for p in params.trunk_tensors()]
                total += supervised_step(params, d, x, y)
                per_domain[d] = float(np.sqrt(sum(np.sum((p.grad - g0) ** 2)
                                                  for p, g0 in zip(params.trunk_tensors(), before))))
            lrs = params.step(sgd, it, 1.0, max_grad_norm)
            hist.loss.append(total)
            hist.lr_shared.append(lrs[T.SHARED])
            hist.lr_domain.append(lrs[T.DOMAIN_SPECIFIC])
            hist.domain_trunk_grad.append(per_domain)
            if it % 20 == 0 or it == iterations - 1:
                log.info("joint iter %d loss %.5f", it, total)
    return hist


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


@dataclass
class EvalReport:
    confusion: np.ndarray
    oa: float
    aa: float
    per_class: np.ndarray
    run_index: int = 0


def confusion_from_pairs(pred, truth, num_classes: int) -> np.ndarray:
    """Rows are true classes, columns predictions; classes are 0-based."""
    conf = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(conf, (np.asarray(truth), np.asarray(pred)), 1)
    return conf


def report_from_confusion(conf, run_index: int = 0) -> EvalReport:
    """OA = trace / total; AA = mean recall over classes present in the test set."""
    conf = np.asarray(conf, dtype=np.int64)
    rows = conf.sum(axis=1)
    diag = np.diag(conf)
    per_class = np.divide(diag, rows, out=np.full(len(rows), np.nan), where=rows > 0)
    oa = float(diag.sum() / conf.sum()) if conf.sum() else float("nan")
    aa = float(np.mean(per_class[rows > 0])) if (rows > 0).any() else float("nan")
    return EvalReport(conf, oa, aa, per_class, run_index)


def predict(params: cdnet.CdcnnParams, cube: HyperCube, indices: np.ndarray,
            chunk: int = 1024) -> np.ndarray:
    """Arg-max class (0-based, ties to the lowest index) for each flat pixel index."""
    dtype = params.dtype
    preds = []
    side = 2 * params.arch.context + 1
    for s in range(0, len(indices), chunk):
        rows, cols = np.divmod(np.asarray(indices[s:s + chunk], dtype=np.int64), cube.width)
        x = extract_patches(cube, rows, cols, side).transpose(0, 3, 1, 2)
        logits, _ = cdnet.forward_logits(params, cube.domain_id, np.ascontiguousarray(x, dtype=dtype))
        preds.append(logits.reshape(logits.shape[0], -1).argmax(axis=1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def evaluate(params: cdnet.CdcnnParams, cube: HyperCube, test_idx: np.ndarray,
             run_index: int = 0) -> EvalReport:
    test_idx = np.asarray(test_idx, dtype=np.int64)
    truth = cube.labels.ravel()[test_idx]
    if (truth <= 0).any():
        bad = int(test_idx[np.flatnonzero(truth <= 0)[0]])
        raise ValueError(f"test index {bad} is an unlabeled pixel")
    pred = predict(params, cube, test_idx)
    return report_from_confusion(confusion_from_pairs(pred, truth - 1, cube.num_classes), run_index)


# ---------------------------------------------------------------------------
# regimes
# ---------------------------------------------------------------------------


@dataclass
class RegimeConfig:
    arch: cdnet.ArchConfig = field(default_factory=cdnet.ArchConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    contrastive: selfsup.ContrastiveConfig = field(default_factory=selfsup.ContrastiveConfig)
    pretrain_sgd: T.SgdConfig = field(default_factory=T.SgdConfig)
    # patches per source domain per iteration for supervised pretraining
    sup_batch_per_domain: int = 200
    deterministic: bool = False


def _balanced_sampler(cube: HyperCube, pool: np.ndarray, per_iter: int, arch, augment, seed, dtype):
    rng = np.random.default_rng(seed)

    def draw(it):
        pick = pool if len(pool) <= per_iter else rng.choice(pool, per_iter, replace=False)
        return labeled_patches(cube, pick, arch, augment, dtype)
    return draw


def pretrain_supervised(sources: list[HyperCube], cfg: RegimeConfig, seed) -> tuple[cdnet.CdcnnParams, TrainHistory]:
    """Joint supervised training on all labeled pixels of the source domains."""
    init_seed, batch_seed = T.as_seed_sequence(seed).spawn(2)
    params = cdnet.init_params(cfg.arch, [s.spec for s in sources], init_seed)
    seeds = batch_seed.spawn(len(sources))
    batches = {s.domain_id: _balanced_sampler(s, s.labeled_indices(), cfg.sup_batch_per_domain,
                                              cfg.arch, cfg.finetune.augment, sd, np.float32)
               for s, sd in zip(sources, seeds)}
    hist = train_joint(params, batches, cfg.pretrain_sgd, cfg.contrastive.iterations, cfg.deterministic,
                       cfg.finetune.max_grad_norm)
    return params, hist


def train_regime(regime: str, target: HyperCube, train_idx: np.ndarray, sources: list[HyperCube],
                 cfg: RegimeConfig, seed, pretrained: cdnet.CdcnnParams | None = None):
    """Train a model for ``target`` under one of the four regimes.

    Returns ``(params, history)``. ``pretrained`` short-circuits the
    pretraining stage of ``sup_pretrain`` / ``self_sup``.
    """
    if regime not in REGIMES:
        raise ValueError(f"unknown regime {regime!r}; choose from {REGIMES}")
    pre_seed, init_seed, batch_seed = T.as_seed_sequence(seed).spawn(3)
    ft = cfg.finetune

    if regime == "scratch":
        params = cdnet.init_params(cfg.arch, [target.spec], init_seed)
        hist = train_supervised(params, target, train_idx, ft, 1.0, cfg.deterministic)
        return params, hist

    if regime == "cd_scratch":
        for s in sources:
            if not s.labeled_indices().size:
                raise ValueError(f"cd_scratch needs labels on source {s.domain_id!r}")
        domains = [target] + list(sources)
        params = cdnet.init_params(cfg.arch, [d.spec for d in domains], init_seed)
        x, y = labeled_patches(target, train_idx, cfg.arch, ft.augment)
        batches = {target.domain_id: (x, y)}
        for s, sd in zip(sources, batch_seed.spawn(len(sources))):
            batches[s.domain_id] = _balanced_sampler(s, s.labeled_indices(), len(train_idx),
                                                     cfg.arch, ft.augment, sd, np.float32)
        hist = train_joint(params, batches, ft.sgd(), ft.iterations, cfg.deterministic, ft.max_grad_norm)
        return params, hist

    if pretrained is None:
        if regime == "sup_pretrain":
            for s in sources:
                if not s.labeled_indices().size:
                    raise ValueError(f"sup_pretrain needs labels on source {s.domain_id!r}")
            pretrained, _ = pretrain_supervised(sources, cfg, pre_seed)
        else:
            pretrained = selfsup.pretrain(sources, cfg.arch, cfg.contrastive, cfg.pretrain_sgd,
                                          pre_seed, deterministic=cfg.deterministic).params
    params = transfer(pretrained, target.spec, init_seed, cfg.arch)
    hist = train_supervised(params, target, train_idx, ft, None, cfg.deterministic)
    return params, hist


def split_for_run(target: HyperCube, seed: int, train_per_domain: int, run_index: int):
    """The (train, test) split used by run ``run_index`` of an experiment seeded ``seed``."""
    split_seed = int(derive_seed(seed, "split").generate_state(1, np.uint64)[0])
    train_idx, test_idx = make_split(target, SplitSpec(split_seed, train_per_domain, run_index))
    return train_idx, test_idx, split_seed


@dataclass
class RunAggregate:
    regime: str
    mean_oa: float
    mean_aa: float
    reports: list
    seeds: list


def run_experiment(regime: str, target: HyperCube, sources: list[HyperCube], cfg: RegimeConfig,
                   runs: int = 5, seed: int = 0, pretrained: cdnet.CdcnnParams | None = None,
                   on_run=None) -> RunAggregate:
    """Train and evaluate ``runs`` times on fresh splits; aggregate OA/AA.

    Pretraining (for the transfer regimes) happens once per experiment and
    is shared by all runs. ``on_run(run_index, params, report)`` is called
    after each run.
    """
    if regime in ("sup_pretrain", "self_sup") and pretrained is None:
        pre_ss = derive_seed(seed, "pretrain")
        if regime == "sup_pretrain":
            pretrained, _ = pretrain_supervised(sources, cfg, pre_ss)
        else:
            pretrained = selfsup.pretrain(sources, cfg.arch, cfg.contrastive, cfg.pretrain_sgd,
                                          pre_ss, deterministic=cfg.deterministic).params
    reports, seeds = [], []
    for r in range(runs):
        train_idx, test_idx, split_seed = split_for_run(target, seed, cfg.finetune.train_per_domain, r)
        run_ss = derive_seed(seed, "run", r)
        params, _ = train_regime(regime, target, train_idx, sources, cfg, run_ss, pretrained)
        rep = evaluate(params, target, test_idx, r)
        log.info("%s run %d: OA %.4f AA %.4f", regime, r, rep.oa, rep.aa)
        reports.append(rep)
        seeds.append(split_seed)
        if on_run is not None:
            on_run(r, params, rep)
    return RunAggregate(regime, float(np.mean([r.oa for r in reports])),
                        float(np.mean([r.aa for r in reports])), reports, seeds)
