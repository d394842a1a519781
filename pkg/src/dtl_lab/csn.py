"""Compact side network: low-rank taps, running side state, gated injection.

For block ``i`` the side network reads the stream entering the block and
accumulates ``h <- h + (z_i a_i) c_i``.  From block ``M`` on, the output of the
block gets ``theta(h)`` added (DTL) or ``g(theta(h))`` (DTL+), where ``theta`` is
a sharp Swish and ``g`` one depthwise convolution shared by every injection
point.  Blocks before ``M`` never see a trainable tensor, so their interiors
record nothing for backward.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import ops
from .tensor import Param, Tensor, scope
from .vit import ViT, ViTConfig

VARIANTS = ("dtl", "dtlplus")


@dataclass(frozen=True)
class CSNConfig:
    d_prime: int = 2
    M: int = 7
    beta: float = 100.0
    variant: str = "dtl"
    kernel: int = 3

    def validate(self, vit: ViTConfig) -> None:
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown CSN variant {self.variant!r}; expected one of {VARIANTS}")
        if self.d_prime < 1:
            raise ValueError(f"d_prime must be >= 1, got {self.d_prime}")
        if not self.beta > 0:
            raise ValueError(f"beta must be > 0, got {self.beta}")
        if not 1 <= self.M <= vit.N + 1:
            raise ValueError(f"M={self.M} outside [1, {vit.N + 1}]")
        if self.variant == "dtlplus":
            if self.kernel < 1 or self.kernel % 2 == 0:
                raise ValueError(f"DTL+ kernel must be odd, got {self.kernel}")
            side = math.isqrt(vit.n_patches)
            if side * side != vit.n_patches:
                raise ValueError(f"DTL+ needs a square patch grid, got {vit.n_patches} patches")
            injected = {vit.dim_of(i) for i in range(self.M, vit.N + 1)}
            if len(injected) > 1:
                raise ValueError("DTL+ shares one conv across injection points; they span several widths")

    @property
    def plus(self) -> bool:
        return self.variant == "dtlplus"


class CSNWeights:
    """Per-block ``a_i``/``c_i`` pairs plus the shared conv of DTL+."""

    def __init__(self, config: CSNConfig, vit: ViTConfig, params: dict[str, Param]):
        self.config = config
        self.vit = vit
        self.params = params

    def a(self, i: int) -> Param:
        return self.params[f"csn.{i}.a"]

    def c(self, i: int) -> Param:
        return self.params[f"csn.{i}.c"]

    @property
    def g(self) -> tuple[Param, Param] | None:
        if not self.config.plus:
            return None
        return self.params["csn.g.kernel"], self.params["csn.g.bias"]

    def state(self) -> dict[str, np.ndarray]:
        return {n: p.numpy() for n, p in self.params.items()}

    def structural_units(self) -> int:
        return self.vit.N + (1 if self.config.plus else 0)


def param_shapes(config: CSNConfig, vit: ViTConfig) -> dict[str, tuple[int, ...]]:
    shapes = {}
    for i in range(1, vit.N + 1):
        w = vit.dim_of(i)
        shapes[f"csn.{i}.a"] = (w, config.d_prime)
        shapes[f"csn.{i}.c"] = (config.d_prime, w)
    if config.plus:
        w = vit.dim_of(min(config.M, vit.N))
        shapes["csn.g.kernel"] = (w, config.kernel, config.kernel)
        shapes["csn.g.bias"] = (w,)
    return shapes


def csn_init(config: CSNConfig, vit: ViTConfig, seed: int = 0, dtype=np.float32, trainable: bool = True) -> CSNWeights:
    """``a_i`` and the conv taps ~ U(-1/sqrt(d), 1/sqrt(d)); ``c_i`` and the conv bias are 0."""
    config.validate(vit)
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(config, vit).items():
        if name.endswith(".c") or name == "csn.g.bias":
            value = np.zeros(shape)
        else:
            bound = 1.0 / math.sqrt(shape[0])
            value = rng.uniform(-bound, bound, shape)
        params[name] = Param(name, value, trainable=trainable, dtype=dtype)
    return CSNWeights(config, vit, params)


@dataclass
class CSNState:
    h: Tensor

    @classmethod
    def zeros(cls, like: Tensor, width: int | None = None) -> CSNState:
        shape = like.shape[:-1] + (like.shape[-1] if width is None else width,)
        return cls(Tensor(np.zeros(shape, dtype=like.dtype)))


def stage_reset(state: CSNState, width: int | None = None) -> CSNState:
    """Zero the side state; ``width`` switches to the next stage's dimensionality."""
    return CSNState.zeros(state.h, width)


def csn_step(h: Tensor, z: Tensor, a: Tensor, c: Tensor) -> Tensor:
    """``h + (z a) c`` -- the d x d product ``a c`` is never formed."""
    if z.shape[-1] != a.shape[0] or a.shape[1] != c.shape[0] or c.shape[1] != h.shape[-1]:
        raise ValueError(
            f"csn_step: z {list(z.shape)}, a {list(a.shape)}, c {list(c.shape)}, h {list(h.shape)} "
            "do not chain (missing stage reset?)"
        )
    if h.shape[:-1] != z.shape[:-1]:
        raise ValueError(f"csn_step: h {list(h.shape)} and z {list(z.shape)} disagree on tokens")
    return ops.add(h, ops.matmul(ops.matmul(z, a), c))


def apply_g(t: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """Depthwise conv over the patch grid; the cls token (index 0) passes through."""
    lead, n, w = t.shape[:-2], t.shape[-2], t.shape[-1]
    side = math.isqrt(n - 1)
    if side * side != n - 1:
        raise ValueError(f"apply_g: {n - 1} patch tokens do not form a square grid")
    L = len(lead)
    cls = ops.split_tokens(t, 0, 1)
    patches = ops.split_tokens(t, 1, n)
    grid = ops.reshape(patches, lead + (side, side, w))
    grid = ops.transpose(grid, tuple(range(L)) + (L + 2, L, L + 1))
    grid = ops.depthwise_conv2d(grid, kernel, bias)
    grid = ops.transpose(grid, tuple(range(L)) + (L + 1, L + 2, L))
    patches = ops.reshape(grid, lead + (n - 1, w))
    return ops.concat_tokens([cls, patches])


def inject(z_next: Tensor, h_next: Tensor, i: int, config: CSNConfig, g: tuple[Tensor, Tensor] | None = None) -> Tensor:
    """Adapted output of block ``i``; the very same tensor when ``i < M``."""
    if i < config.M:
        return z_next
    with scope(f"csn.{i}"):
        side = ops.swish(h_next, config.beta)
        if config.plus:
            if g is None:
                raise ValueError("DTL+ injection needs the shared conv g")
            side = apply_g(side, *g)
    with scope(f"block.{i}"):
        return ops.add(z_next, side)


def run_prefix(backbone: ViT, image: Tensor, stop: int) -> list[Tensor]:
    """Streams entering blocks ``1..stop`` of the frozen backbone (``[z_1, ..., z_stop]``)."""
    z = backbone.patch_embed(image)
    streams = []
    for i in range(1, stop + 1):
        z = backbone.enter_block(z, i)
        streams.append(z)
        if i < stop:
            z = backbone.block_forward(z, i)
    return streams


def side_prefix(weights: CSNWeights, streams: list[Tensor], backbone: ViT) -> CSNState:
    """Accumulate the side state over already-computed frozen streams ``z_1..z_k``."""
    state = CSNState.zeros(streams[0])
    for i, z in enumerate(streams, start=1):
        if backbone.config.is_stage_start(i):
            state = stage_reset(state, backbone.config.dim_of(i))
        with scope(f"csn.{i}"):
            state = CSNState(csn_step(state.h, z, weights.a(i), weights.c(i)))
    return state


def dtl_suffix(backbone: ViT, weights: CSNWeights, z: Tensor, state: CSNState, start: int) -> Tensor:
    """Run blocks ``start..N`` given the stream entering ``start`` and the side
    state that already includes steps ``< start``."""
    cfg = weights.config
    N = backbone.config.N
    for i in range(start, N + 1):
        if i > start:
            z = backbone.enter_block(z, i)
        if backbone.config.is_stage_start(i):
            state = stage_reset(state, backbone.config.dim_of(i))
        with scope(f"csn.{i}"):
            h = csn_step(state.h, z, weights.a(i), weights.c(i))
        state = CSNState(h)
        z = inject(backbone.block_forward(z, i), h, i, cfg, weights.g)
    return z


def dtl_forward(backbone: ViT, weights: CSNWeights, image: Tensor) -> Tensor:
    """Adapted final tokens ``z'_{N+1}`` (before the final norm).

    Step ``i`` reads the stream entering block ``i``: ``z_i`` inside the frozen
    prefix and the already-adapted ``z'_i`` afterwards.
    """
    z = backbone.patch_embed(image)
    state = CSNState.zeros(z)
    return dtl_suffix(backbone, weights, backbone.enter_block(z, 1), state, 1)
