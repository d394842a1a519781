"""Toy pre-LN Vision Transformer with block-boundary taps.

Blocks are numbered from 1.  ``z_i`` is the token stream entering block ``i``
(``z_1`` is the patch embedding) and block ``i`` produces ``z_{i+1}``.

Adapters change block internals through :class:`BlockHooks`; the default
hooks leave the block untouched.  A config may declare extra *stages*: from a
given block on the embed width changes and a frozen linear transition maps
the stream to the new width (a synthetic stand-in for hierarchical backbones).
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from . import ops
from .tensor import Param, Tensor, scope
from .weights import load_weights, save_weights


@dataclass(frozen=True)
class ViTConfig:
    N: int = 12
    d: int = 64
    heads: int = 4
    img: int = 32
    patch: int = 8
    mlp_ratio: int = 4
    # ((first_block, width), ...) for every stage after the first
    stages: tuple[tuple[int, int], ...] = ()

    def __post_init__(self) -> None:
        if self.N < 1:
            raise ValueError("N must be >= 1")
        if self.img % self.patch:
            raise ValueError(f"img={self.img} is not divisible by patch={self.patch}")
        prev = 1
        for start, width in self.stages:
            if not prev < start <= self.N:
                raise ValueError(f"stage boundary at block {start} is out of order or out of range")
            prev = start
        for width in self.widths:
            if width % self.heads:
                raise ValueError(f"width {width} is not divisible by heads={self.heads}")

    @property
    def grid(self) -> int:
        return self.img // self.patch

    @property
    def n_patches(self) -> int:
        return self.grid * self.grid

    @property
    def n_tokens(self) -> int:
        return self.n_patches + 1

    @property
    def widths(self) -> list[int]:
        return [self.d] + [w for _, w in self.stages]

    def dim_of(self, i: int) -> int:
        """Width of the stream entering (and leaving) block ``i``."""
        width = self.d
        for start, w in self.stages:
            if i >= start:
                width = w
        return width

    @property
    def d_out(self) -> int:
        return self.dim_of(self.N)

    def is_stage_start(self, i: int) -> bool:
        return any(start == i for start, _ in self.stages)

    def stage_index(self, i: int) -> int:
        return sum(1 for start, _ in self.stages if i >= start)


BLOCK_PARAMS = (
    "ln1.gamma", "ln1.beta",
    "attn.w_q", "attn.b_q", "attn.w_k", "attn.w_v", "attn.b_v", "attn.w_o", "attn.b_o",
    "ln2.gamma", "ln2.beta",
    "ffn.w1", "ffn.b1", "ffn.w2", "ffn.b2",
)  # fmt: skip


def param_shapes(config: ViTConfig) -> dict[str, tuple[int, ...]]:
    """Name -> shape for every backbone parameter, in creation order."""
    d, p = config.d, config.patch
    shapes: dict[str, tuple[int, ...]] = {
        "embed.patch.w": (3 * p * p, d),
        "embed.patch.b": (d,),
        "embed.cls": (1, d),
        "embed.pos": (config.n_tokens, d),
    }
    for i in range(1, config.N + 1):
        w = config.dim_of(i)
        if config.is_stage_start(i):
            s = config.stage_index(i)
            shapes[f"stage.{s}.proj.w"] = (config.dim_of(i - 1), w)
            shapes[f"stage.{s}.proj.b"] = (w,)
        hidden = config.mlp_ratio * w
        blk = {
            "ln1.gamma": (w,), "ln1.beta": (w,),
            "attn.w_q": (w, w), "attn.b_q": (w,), "attn.w_k": (w, w),
            "attn.w_v": (w, w), "attn.b_v": (w,), "attn.w_o": (w, w), "attn.b_o": (w,),
            "ln2.gamma": (w,), "ln2.beta": (w,),
            "ffn.w1": (w, hidden), "ffn.b1": (hidden,), "ffn.w2": (hidden, w), "ffn.b2": (w,),
        }  # fmt: skip
        for key in BLOCK_PARAMS:
            shapes[f"block.{i}.{key}"] = blk[key]
    shapes["norm.gamma"] = (config.d_out,)
    shapes["norm.beta"] = (config.d_out,)
    return shapes


def is_bias(name: str) -> bool:
    leaf = name.rsplit(".", 1)[-1]
    return leaf.startswith("b") or (leaf == "beta")


class BlockHooks:
    """Identity hooks; adapters override the pieces they modify.

    ``post`` sites: ln1, q, k, v, attn (MHSA output), ln2, fc1, ffn (FFN output).
    ``linear`` sites: q, k, v, o, fc1, fc2.
    """

    n_prompts = 0

    def tokens_in(self, i: int, z: Tensor) -> Tensor:
        return z

    def linear(self, i: int, site: str, x: Tensor, w: Tensor, b: Tensor | None) -> Tensor:
        return ops.linear(x, w, b)

    def post(self, i: int, site: str, x: Tensor) -> Tensor:
        return x

    def ffn_extra(self, i: int, x: Tensor) -> Tensor | None:
        return None


IDENTITY_HOOKS = BlockHooks()


class ViT:
    def __init__(self, config: ViTConfig, params: dict[str, Param]):
        self.config = config
        self.params = params
        self._calls = 0
        self._lock = threading.Lock()

    # -- construction -----------------------------------------------------

    @classmethod
    def init(cls, config: ViTConfig, seed: int = 0, dtype=np.float32) -> ViT:
        rng = np.random.default_rng(seed)
        params = {}
        for name, shape in param_shapes(config).items():
            leaf = name.rsplit(".", 1)[-1]
            if leaf == "gamma":
                value = np.ones(shape)
            elif leaf == "beta" or is_bias(name):
                value = np.zeros(shape)
            elif name == "embed.cls":
                value = rng.normal(0.0, 1.0, shape)
            elif name == "embed.pos":
                value = rng.normal(0.0, 0.5, shape)
            else:
                value = rng.normal(0.0, 1.0 / math.sqrt(shape[0]), shape)
            params[name] = Param(name, value, trainable=False, dtype=dtype)
        return cls(config, params)

    def with_trainable(self, predicate) -> ViT:
        """Copy of this backbone where params matching ``predicate`` are
        fresh trainable clones; the others are shared (still frozen)."""
        params = {n: (p.clone(trainable=True) if predicate(n) else p) for n, p in self.params.items()}
        return ViT(self.config, params)

    @property
    def dtype(self) -> np.dtype:
        return self.params["embed.cls"].dtype

    def __getitem__(self, name: str) -> Param:
        return self.params[name]

    # -- execution counters -----------------------------------------------

    @property
    def block_calls(self) -> int:
        return self._calls

    def reset_counters(self) -> None:
        with self._lock:
            self._calls = 0

    # -- forward pieces ---------------------------------------------------

    def patch_embed(self, image: Tensor) -> Tensor:
        """[.., 3, img, img] -> [.., n_tokens, d]; cls token first."""
        cfg = self.config
        if image.shape[-3:] != (3, cfg.img, cfg.img):
            raise ValueError(f"patch_embed: expected image [.., 3, {cfg.img}, {cfg.img}], got {list(image.shape)}")
        lead = image.shape[:-3]
        L = len(lead)
        g, p = cfg.grid, cfg.patch
        with scope("embed"):
            x = ops.reshape(image, lead + (3, g, p, g, p))
            axes = tuple(range(L)) + tuple(L + a for a in (1, 3, 0, 2, 4))
            x = ops.transpose(x, axes)
            x = ops.reshape(x, lead + (g * g, 3 * p * p))
            x = ops.linear(x, self["embed.patch.w"], self["embed.patch.b"])
            cls = self["embed.cls"]
            if lead:
                cls = ops.expand(cls, lead + (1, cfg.d))
            x = ops.concat_tokens([cls, x])
            return ops.add(x, self["embed.pos"])

    def enter_block(self, z: Tensor, i: int) -> Tensor:
        """Stage transition in front of block ``i`` (identity inside a stage)."""
        if not self.config.is_stage_start(i):
            return z
        s = self.config.stage_index(i)
        with scope(f"stage.{s}"):
            return ops.linear(z, self[f"stage.{s}.proj.w"], self[f"stage.{s}.proj.b"])

    def _attention(self, i: int, h: Tensor, hooks: BlockHooks) -> Tensor:
        pre = f"block.{i}.attn."
        heads = self.config.heads
        lead, n, w = h.shape[:-2], h.shape[-2], h.shape[-1]
        dh = w // heads
        L = len(lead)
        q = hooks.post(i, "q", hooks.linear(i, "q", h, self[pre + "w_q"], self[pre + "b_q"]))
        k = hooks.post(i, "k", hooks.linear(i, "k", h, self[pre + "w_k"], None))
        v = hooks.post(i, "v", hooks.linear(i, "v", h, self[pre + "w_v"], self[pre + "b_v"]))
        split = lead + (n, heads, dh)
        head_first = tuple(range(L)) + (L + 1, L, L + 2)
        q = ops.transpose(ops.reshape(q, split), head_first)
        k = ops.transpose(ops.reshape(k, split), tuple(range(L)) + (L + 1, L + 2, L))
        v = ops.transpose(ops.reshape(v, split), head_first)
        scores = ops.scale(ops.matmul(q, k), 1.0 / math.sqrt(dh))
        attn = ops.matmul(ops.softmax(scores), v)
        attn = ops.reshape(ops.transpose(attn, head_first), lead + (n, w))
        out = hooks.linear(i, "o", attn, self[pre + "w_o"], self[pre + "b_o"])
        return hooks.post(i, "attn", out)

    def block_forward(self, z: Tensor, i: int, hooks: BlockHooks = IDENTITY_HOOKS) -> Tensor:
        """Pre-LN residual MHSA then pre-LN residual GELU FFN."""
        cfg = self.config
        if not 1 <= i <= cfg.N:
            raise ValueError(f"block index {i} outside [1, {cfg.N}]")
        width = cfg.dim_of(i)
        expected = cfg.n_tokens + hooks.n_prompts
        if z.shape[-2] != expected or z.shape[-1] != width:
            raise ValueError(f"block {i}: expected [.., {expected}, {width}] tokens, got {list(z.shape)}")
        pre = f"block.{i}."
        with scope(f"block.{i}"):
            z = hooks.tokens_in(i, z)
            h = ops.layer_norm(z, self[pre + "ln1.gamma"], self[pre + "ln1.beta"])
            h = hooks.post(i, "ln1", h)
            x = ops.add(z, self._attention(i, h, hooks))
            h = ops.layer_norm(x, self[pre + "ln2.gamma"], self[pre + "ln2.beta"])
            h = hooks.post(i, "ln2", h)
            f = hooks.post(i, "fc1", hooks.linear(i, "fc1", h, self[pre + "ffn.w1"], self[pre + "ffn.b1"]))
            f = hooks.linear(i, "fc2", ops.gelu(f), self[pre + "ffn.w2"], self[pre + "ffn.b2"])
            f = hooks.post(i, "ffn", f)
            out = ops.add(x, f)
            extra = hooks.ffn_extra(i, x)
            if extra is not None:
                out = ops.add(out, extra)
        with self._lock:
            self._calls += 1
        return out

    def final_norm(self, z: Tensor) -> Tensor:
        with scope("norm"):
            return ops.layer_norm(z, self["norm.gamma"], self["norm.beta"])

    def forward_with_taps(self, image: Tensor, hooks: BlockHooks = IDENTITY_HOOKS) -> tuple[Tensor, list[Tensor]]:
        """Final tokens plus every block output ``[z_2, ..., z_{N+1}]``."""
        z = self.patch_embed(image)
        taps = []
        for i in range(1, self.config.N + 1):
            z = self.block_forward(self.enter_block(z, i), i, hooks)
            taps.append(z)
        return z, taps

    # -- persistence ------------------------------------------------------

    def state(self) -> dict[str, np.ndarray]:
        return {n: p.numpy() for n, p in self.params.items()}

    def save_weights(self, manifest_path: str | Path) -> Path:
        return save_weights(self.state(), manifest_path)

    @classmethod
    def load_weights(cls, config: ViTConfig, manifest_path: str | Path, strict: bool = False) -> tuple[ViT, list[str]]:
        shapes = param_shapes(config)
        # dtype comes from the file; check consistency across entries afterwards
        arrays, warnings = _load_any_dtype(manifest_path, shapes, strict)
        params = {n: Param(n, arrays[n], trainable=False) for n in shapes}
        return cls(config, params), warnings


def _load_any_dtype(path, shapes: dict[str, tuple[int, ...]], strict: bool):
    from .weights import ManifestError

    try:
        return load_weights(path, {n: (s, np.float32) for n, s in shapes.items()}, strict)
    except ManifestError as exc:
        if not all("dtype" in p for p in exc.problems):
            raise
    return load_weights(path, {n: (s, np.float64) for n, s in shapes.items()}, strict)


def count_params(params: Iterable[Param]) -> int:
    return sum(p.size for p in params)
