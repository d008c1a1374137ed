"""Cross-domain CNN: per-domain encoders, a shared residual trunk, per-domain heads.

Layer layout (modified backbone, default)::

    enc.<domain>/c1      5x5, B_d -> 128, ReLU
    trunk/res{i}a, res{i}b   1x1 residual modules x n, ReLU after the skip add
    head.<domain>/c5     1x1, 128 -> C_d

The original layout swaps ``c1`` for parallel 1x1 / 3x3 (+3x3 max-pool) /
5x5 (+5x5 max-pool) branches concatenated to 3*128 channels, followed by a
plain 1x1 ``trunk/c2``, two residual modules and the plain 1x1 layers
``trunk/c3``, ``trunk/c4`` (``tail_layers``).
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from . import tensorops as T
from .hsdata import DomainSpec

INIT_STD = 0.001
# (name, kernel, conv padding, max-pool size) of the multi-scale branches
MULTISCALE_BRANCHES = (("c1_1x1", 1, 0, 0), ("c1_3x3", 3, 2, 3), ("c1_5x5", 5, 4, 5))


class ArchitectureError(ValueError):
    pass


class StaleCacheError(RuntimeError):
    pass


@dataclass
class ArchConfig:
    channels: int = 128
    encoder_kernel: int = 5
    encoder_pad: int = 2
    n_res_modules: int = 5
    multiscale_encoder: bool = False
    # plain 1x1 layer between encoder and residual modules; always present
    # with the multi-scale encoder, which emits 3 * channels
    c2_layer: bool = False
    # plain 1x1 layers c3, c4 after the residual modules (original layout)
    tail_layers: bool = False
    head_classes: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.channels <= 0:
            raise ValueError("channels must be positive")
        if self.encoder_kernel < 1 or self.encoder_kernel % 2 == 0:
            raise ValueError("encoder_kernel must be odd")
        if self.n_res_modules < 0:
            raise ValueError("n_res_modules must be >= 0")

    @property
    def has_c2(self) -> bool:
        return self.c2_layer or self.multiscale_encoder

    @property
    def context(self) -> int:
        """Pixels of spatial context consumed on each side in valid mode."""
        return self.encoder_kernel // 2

    @classmethod
    def original(cls, **kw) -> "ArchConfig":
        """The unmodified backbone: multi-scale C1, C2, two residual modules, C3, C4."""
        kw.setdefault("n_res_modules", 2)
        kw.setdefault("tail_layers", True)
        return cls(multiscale_encoder=True, c2_layer=True, **kw)

    def trunk_layers(self) -> list[tuple[str, int, int]]:
        """``(name, in_channels, out_channels)`` for the shared 1x1 layers."""
        ch = self.channels
        layers = []
        if self.has_c2:
            layers.append(("c2", 3 * ch if self.multiscale_encoder else ch, ch))
        for i in range(self.n_res_modules):
            layers += [(f"res{i}a", ch, ch), (f"res{i}b", ch, ch)]
        if self.tail_layers:
            layers += [("c3", ch, ch), ("c4", ch, ch)]
        return layers

    def encoder_layers(self, bands: int) -> list[tuple[str, int, int, int]]:
        """``(name, kernel, in_channels, out_channels)`` for a domain encoder."""
        if self.multiscale_encoder:
            return [(name, k, bands, self.channels) for name, k, _, _ in MULTISCALE_BRANCHES]
        return [("c1", self.encoder_kernel, bands, self.channels)]

    def to_dict(self) -> dict:
        return {
            "channels": self.channels, "encoder_kernel": self.encoder_kernel,
            "encoder_pad": self.encoder_pad, "n_res_modules": self.n_res_modules,
            "multiscale_encoder": self.multiscale_encoder, "c2_layer": self.c2_layer,
            "tail_layers": self.tail_layers, "head_classes": dict(self.head_classes),
        }


BACKBONES = ("modified", "no_multiscale", "more_res", "original")


def backbone(name: str, n_res_modules: int | None = None) -> ArchConfig:
    """Named backbone variants: the two modifications switched on or off.

    ``no_multiscale`` keeps the original layout but with a single 5x5
    encoder; ``more_res`` keeps the multi-scale encoder and C2 but turns the
    remaining layers into ``n`` residual modules.
    """
    if name == "modified":
        return ArchConfig(n_res_modules=5 if n_res_modules is None else n_res_modules)
    if name == "original":
        return ArchConfig.original(n_res_modules=2 if n_res_modules is None else n_res_modules)
    if name == "no_multiscale":
        return ArchConfig(c2_layer=True, tail_layers=True,
                          n_res_modules=2 if n_res_modules is None else n_res_modules)
    if name == "more_res":
        return ArchConfig(multiscale_encoder=True, c2_layer=True,
                          n_res_modules=5 if n_res_modules is None else n_res_modules)
    raise ValueError(f"unknown backbone {name!r}; choose from {BACKBONES}")


INIT_SCHEMES = ("gaussian", "he", "residual")


def _layer(rng, k_out, k_in, k, group, dtype, init="gaussian"):
    if init == "gaussian":
        std = INIT_STD
    elif init in ("he", "residual"):
        std = np.sqrt(2.0 / (k_in * k * k))
    else:
        raise ValueError(f"unknown init scheme {init!r}; choose from {INIT_SCHEMES}")
    w = T.ParamTensor((rng.standard_normal((k_out, k_in, k, k)) * std).astype(dtype), group, True)
    b = T.ParamTensor(np.zeros(k_out, dtype=dtype), group, False)
    return {"weight": w, "bias": b}


@dataclass
class CdcnnParams:
    arch: ArchConfig
    encoders: dict  # domain_id -> {layer: {"weight", "bias"}}
    trunk: dict  # layer -> {"weight", "bias"}
    heads: dict  # domain_id -> {"c5": {"weight", "bias"}}
    bands: dict  # domain_id -> B
    version: int = 0

    def named(self):
        """Yield ``(name, ParamTensor)`` in a fixed order, checkpoint naming."""
        for d, layers in self.encoders.items():
            for lname, pair in layers.items():
                for kind in ("weight", "bias"):
                    yield f"enc.{d}/{lname}/{kind}", pair[kind]
        for lname, pair in self.trunk.items():
            for kind in ("weight", "bias"):
                yield f"trunk/{lname}/{kind}", pair[kind]
        for d, layers in self.heads.items():
            for lname, pair in layers.items():
                for kind in ("weight", "bias"):
                    yield f"head.{d}/{lname}/{kind}", pair[kind]

    def tensors(self) -> list[T.ParamTensor]:
        return [p for _, p in self.named()]

    def trunk_tensors(self) -> list[T.ParamTensor]:
        return [pair[k] for pair in self.trunk.values() for k in ("weight", "bias")]

    def zero_grad(self):
        for p in self.tensors():
            p.zero_grad()

    def step(self, cfg: T.SgdConfig, iteration: int, domain_lr_multiplier: float = 1.0,
             max_grad_norm: float | None = None) -> dict:
        """Clip the joint gradient norm (if requested), then one SGD update."""
        T.clip_grad_norm(self.tensors(), max_grad_norm)
        lrs = T.sgd_step(self.tensors(), cfg, iteration, domain_lr_multiplier)
        self.version += 1
        return lrs

    @property
    def dtype(self):
        return next(self.named())[1].value.dtype

    def domains(self) -> list[str]:
        return list(self.encoders)

    def num_classes(self, domain_id: str) -> int:
        return self.heads[domain_id]["c5"]["weight"].shape[0]

    def copy(self) -> "CdcnnParams":
        return copy.deepcopy(self)

    def astype(self, dtype) -> "CdcnnParams":
        out = self.copy()
        for p in out.tensors():
            p.value = p.value.astype(dtype)
            p.grad = p.grad.astype(dtype)
            p.momentum = p.momentum.astype(dtype)
        return out


def init_encoder(arch: ArchConfig, bands: int, rng: np.random.Generator, dtype=np.float32,
                 init: str = "gaussian") -> dict:
    return {name: _layer(rng, cout, cin, k, T.DOMAIN_SPECIFIC, dtype, init)
            for name, k, cin, cout in arch.encoder_layers(bands)}


def init_head(arch: ArchConfig, classes: int, rng: np.random.Generator, dtype=np.float32,
              init: str = "gaussian") -> dict:
    return {"c5": _layer(rng, classes, arch.channels, 1, T.DOMAIN_SPECIFIC, dtype, init)}


def init_trunk(arch: ArchConfig, rng: np.random.Generator, dtype=np.float32, init: str = "gaussian") -> dict:
    """Trunk layers. ``"residual"`` is He everywhere except the second layer of
    each residual module, drawn N(0, 0.001^2) so every module starts near identity."""
    out = {}
    for name, cin, cout in arch.trunk_layers():
        scheme = init
        if init == "residual":
            scheme = "gaussian" if name.startswith("res") and name.endswith("b") else "he"
        out[name] = _layer(rng, cout, cin, 1, T.SHARED, dtype, scheme)
    return out


def init_params(arch: ArchConfig, domains: list[DomainSpec], seed, dtype=np.float32,
                with_heads: bool = True, init: str = "gaussian") -> CdcnnParams:
    """Fresh parameters: zero biases, zero momentum, weights drawn per ``init``.

    ``"gaussian"`` draws N(0, 0.001^2); ``"he"`` draws N(0, 2 / fan_in);
    ``"residual"`` is He except for the residual branches' second layers,
    which stay N(0, 0.001^2).
    Heads are created for domains with ``num_classes > 0`` (or an entry in
    ``arch.head_classes``) when ``with_heads`` is set.
    """
    rng = np.random.default_rng(seed)
    encoders, heads, bands = {}, {}, {}
    for d in domains:
        if d.domain_id in encoders:
            raise ArchitectureError(f"duplicate domain {d.domain_id!r}")
        encoders[d.domain_id] = init_encoder(arch, d.bands, rng, dtype, init)
        bands[d.domain_id] = d.bands
    trunk = init_trunk(arch, rng, dtype, init)
    if with_heads:
        for d in domains:
            c = arch.head_classes.get(d.domain_id, d.num_classes)
            if c > 0:
                heads[d.domain_id] = init_head(arch, c, rng, dtype, init)
    return CdcnnParams(arch, encoders, trunk, heads, bands)


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------


@dataclass
class ForwardCache:
    domain_id: str
    mode: str
    version: int
    steps: list = field(default_factory=list)
    used: bool = False


def _check_input(params: CdcnnParams, domain_id: str, x: np.ndarray):
    if domain_id not in params.encoders:
        raise ArchitectureError(f"unknown domain {domain_id!r}; known: {sorted(params.encoders)}")
    if x.ndim != 4 or x.shape[1] != params.bands[domain_id]:
        raise ArchitectureError(
            f"domain {domain_id!r} expects {params.bands[domain_id]} input channels, got array of shape {x.shape}")


def _encode(params: CdcnnParams, domain_id: str, x: np.ndarray, pad: int, cache: ForwardCache):
    arch = params.arch
    enc = params.encoders[domain_id]
    if not arch.multiscale_encoder:
        y, c = T.conv2d_forward(x, enc["c1"]["weight"].value, enc["c1"]["bias"].value, pad)
        y, m = T.relu_forward(y)
        cache.steps.append(("conv", enc["c1"], c))
        cache.steps.append(("relu", m))
        return y
    # multi-scale branches all keep the input size; crop to the valid-mode
    # geometry of a kernel-sized encoder when pad < context
    crop = arch.context - pad
    outs, branch_caches = [], []
    for name, k, bpad, pool in MULTISCALE_BRANCHES:
        y, c = T.conv2d_forward(x, enc[name]["weight"].value, enc[name]["bias"].value, bpad)
        pc = None
        if pool:
            y, pc = T.maxpool2d_forward(y, pool)
        outs.append(y)
        branch_caches.append((enc[name], c, pc))
    y = np.concatenate(outs, axis=1)
    if crop > 0:
        y = y[:, :, crop:-crop, crop:-crop]
    elif crop < 0:
        raise ArchitectureError("multi-scale encoder supports pad <= kernel context only")
    y, m = T.relu_forward(np.ascontiguousarray(y))
    cache.steps.append(("multiscale", branch_caches, crop, x.shape))
    cache.steps.append(("relu", m))
    return y


def _trunk_forward(params: CdcnnParams, h: np.ndarray, cache: ForwardCache):
    arch, trunk = params.arch, params.trunk

    def conv_relu(layer, inp):
        y, c = T.conv2d_forward(inp, layer["weight"].value, layer["bias"].value, 0)
        y, m = T.relu_forward(y)
        cache.steps.append(("conv", layer, c))
        cache.steps.append(("relu", m))
        return y

    if arch.has_c2:
        h = conv_relu(trunk["c2"], h)
    for i in range(arch.n_res_modules):
        a, b = trunk[f"res{i}a"], trunk[f"res{i}b"]
        u, ca = T.conv2d_forward(h, a["weight"].value, a["bias"].value, 0)
        u, ma = T.relu_forward(u)
        v, cb = T.conv2d_forward(u, b["weight"].value, b["bias"].value, 0)
        h, mo = T.relu_forward(h + v)
        cache.steps.append(("res", a, ca, ma, b, cb, mo))
    if arch.tail_layers:
        h = conv_relu(trunk["c3"], h)
        h = conv_relu(trunk["c4"], h)
    return h


def forward_embedding(params: CdcnnParams, domain_id: str, x: np.ndarray, pad: int = 0):
    """Unit-norm trunk features per output pixel, shape (N, channels, Ho, Wo).

    With ``pad=0`` a (p+4)x(p+4) window yields p x p embeddings.
    """
    _check_input(params, domain_id, x)
    cache = ForwardCache(domain_id, "embedding", params.version)
    h = _encode(params, domain_id, x, pad, cache)
    h = _trunk_forward(params, h, cache)
    e, nc = T.l2_normalize(h, axis=1)
    cache.steps.append(("l2", nc))
    return e, cache


def forward_logits(params: CdcnnParams, domain_id: str, x: np.ndarray, pad: int = 0):
    """Class scores per output pixel, shape (N, C_d, Ho, Wo)."""
    _check_input(params, domain_id, x)
    if domain_id not in params.heads:
        raise ArchitectureError(f"domain {domain_id!r} has no classification head")
    cache = ForwardCache(domain_id, "logits", params.version)
    h = _encode(params, domain_id, x, pad, cache)
    h = _trunk_forward(params, h, cache)
    head = params.heads[domain_id]["c5"]
    y, c = T.conv2d_forward(h, head["weight"].value, head["bias"].value, 0)
    cache.steps.append(("conv", head, c))
    return y, cache


def _acc_conv(layer, conv_cache, dy):
    dx, dw, db = T.conv2d_backward(conv_cache, dy)
    layer["weight"].grad += dw
    layer["bias"].grad += db
    return dx


def backward(params: CdcnnParams, cache: ForwardCache, dout: np.ndarray) -> np.ndarray:
    """Accumulate parameter gradients (``+=``) and return d(loss)/d(input)."""
    if cache.used or cache.version != params.version:
        raise StaleCacheError("forward cache is stale: parameters changed or cache already consumed")
    cache.used = True
    g = dout
    for step in reversed(cache.steps):
        kind = step[0]
        if kind == "l2":
            g = T.l2_normalize_backward(step[1], g)
        elif kind == "relu":
            g = T.relu_backward(step[1], g)
        elif kind == "conv":
            g = _acc_conv(step[1], step[2], g)
        elif kind == "res":
            _, a, ca, ma, b, cb, mo = step
            g = T.relu_backward(mo, g)
            gu = _acc_conv(b, cb, g)
            gu = T.relu_backward(ma, gu)
            g = g + _acc_conv(a, ca, gu)
        elif kind == "multiscale":
            _, branch_caches, crop, x_shape = step
            if crop > 0:
                g = np.pad(g, ((0, 0), (0, 0), (crop, crop), (crop, crop)))
            parts = np.split(g, len(branch_caches), axis=1)
            dx = np.zeros(x_shape, dtype=g.dtype)
            for (layer, c, pc), gp in zip(branch_caches, parts):
                if pc is not None:
                    gp = T.maxpool2d_backward(pc, gp)
                dx += _acc_conv(layer, c, np.ascontiguousarray(gp))
            g = dx
        else:  # pragma: no cover
            raise RuntimeError(f"unknown step {kind}")
    return g


# ---------------------------------------------------------------------------
# FLOPs
# ---------------------------------------------------------------------------


def flops_table(arch: ArchConfig, domain: DomainSpec, height: int, width: int) -> list[tuple[str, int]]:
    """Per-layer FLOPs (2 x multiply-accumulates) over the whole image.

    The modified encoder runs without padding so every layer is counted over
    the (H-k+1) x (W-k+1) valid output pixels. The multi-scale branches are
    size-preserving by construction (padding + stride-1 pooling), so all its
    layers are counted over H x W. Pooling and bias additions are not counted.
    """
    if arch.multiscale_encoder:
        pixels = height * width
    else:
        k = arch.encoder_kernel
        pixels = max(height - k + 1, 0) * max(width - k + 1, 0)
    rows = []
    for name, k, cin, cout in arch.encoder_layers(domain.bands):
        rows.append((f"enc/{name}", 2 * k * k * cin * cout * pixels))
    for name, cin, cout in arch.trunk_layers():
        rows.append((f"trunk/{name}", 2 * cin * cout * pixels))
    classes = arch.head_classes.get(domain.domain_id, domain.num_classes)
    if classes:
        rows.append(("head/c5", 2 * arch.channels * classes * pixels))
    return rows


def flops(arch: ArchConfig, domain: DomainSpec, height: int, width: int) -> int:
    return sum(f for _, f in flops_table(arch, domain, height, width))


# ---------------------------------------------------------------------------
# checkpoint glue
# ---------------------------------------------------------------------------


def params_to_named(params: CdcnnParams) -> list[tuple[str, np.ndarray]]:
    return [(name, p.value) for name, p in params.named()]


def params_from_named(named: dict[str, np.ndarray], dtype=np.float32) -> CdcnnParams:
    """Rebuild parameters (zero grad/momentum) from checkpoint tensors.

    The architecture is inferred from layer names and shapes.
    """
    enc_layers: dict[str, dict] = {}
    trunk: dict[str, dict] = {}
    heads: dict[str, dict] = {}
    for name, arr in named.items():
        try:
            comp, lname, kind = name.split("/")
        except ValueError:
            raise ArchitectureError(f"unexpected tensor name {name!r}") from None
        if kind not in ("weight", "bias"):
            raise ArchitectureError(f"unexpected tensor name {name!r}")
        if comp.startswith("enc."):
            slot, group = enc_layers.setdefault(comp[4:], {}).setdefault(lname, {}), T.DOMAIN_SPECIFIC
        elif comp.startswith("head."):
            slot, group = heads.setdefault(comp[5:], {}).setdefault(lname, {}), T.DOMAIN_SPECIFIC
        elif comp == "trunk":
            slot, group = trunk.setdefault(lname, {}), T.SHARED
        else:
            raise ArchitectureError(f"unexpected tensor name {name!r}")
        slot[kind] = T.ParamTensor(np.array(arr, dtype=dtype), group, kind == "weight")
    if not enc_layers:
        raise ArchitectureError("checkpoint holds no encoder")
    n_res = sum(1 for k in trunk if k.startswith("res") and k.endswith("a"))
    first_enc = next(iter(enc_layers.values()))
    channels = next(iter(first_enc.values()))["weight"].shape[0]
    multiscale = any("c1_1x1" in layers for layers in enc_layers.values())
    kernel = 5
    for layers in enc_layers.values():
        if "c1" in layers:
            kernel = layers["c1"]["weight"].shape[-1]
    arch = ArchConfig(channels=channels, encoder_kernel=kernel, n_res_modules=n_res,
                      multiscale_encoder=multiscale, c2_layer="c2" in trunk,
                      tail_layers="c3" in trunk or "c4" in trunk,
                      head_classes={d: h["c5"]["weight"].shape[0] for d, h in heads.items()})
    expected = [name for name, _, _ in arch.trunk_layers()]
    if sorted(expected) != sorted(trunk):
        raise ArchitectureError(f"trunk layers {sorted(trunk)} do not form a valid trunk")
    trunk = {name: trunk[name] for name in expected}
    bands = {}
    for d, layers in enc_layers.items():
        first = next(iter(layers.values()))["weight"]
        bands[d] = first.shape[1]
    return CdcnnParams(arch, enc_layers, trunk, heads, bands)


def check_trunk_compatible(a: ArchConfig, b: ArchConfig) -> None:
    if a.trunk_layers() != b.trunk_layers():
        raise ArchitectureError(
            f"trunk mismatch: source has n={a.n_res_modules}, channels={a.channels}, c2={a.has_c2}, "
            f"c3/c4={a.tail_layers}; target expects n={b.n_res_modules}, channels={b.channels}, "
            f"c2={b.has_c2}, c3/c4={b.tail_layers}")
