"""Fine-tuning strategies on a frozen backbone.

Each :class:`AdapterSpec` subclass is one strategy.  :func:`attach` turns a spec
into an :class:`AdaptedModel`: it decides which parameters train, creates the
inserted modules and rewires the forward pass through :class:`~dtl_lab.vit.BlockHooks`.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass, fields
from typing import Any, ClassVar

import numpy as np

from . import ops
from .csn import CSNConfig, CSNWeights, csn_init, dtl_forward
from .tensor import Graph, Param, Tensor, active_graph, scope
from .vit import BlockHooks, ViT, ViTConfig, is_bias

# ---------------------------------------------------------------------------
# specs


@dataclass(frozen=True)
class AdapterSpec:
    variant: ClassVar[str] = ""

    def validate(self, vit: ViTConfig) -> None:
        pass

    def to_dict(self) -> dict[str, Any]:
        return {"variant": self.variant, **asdict(self)}

    @property
    def label(self) -> str:
        return self.variant


@dataclass(frozen=True)
class Full(AdapterSpec):
    variant: ClassVar[str] = "full"


@dataclass(frozen=True)
class Linear(AdapterSpec):
    variant: ClassVar[str] = "linear"


@dataclass(frozen=True)
class BitFit(AdapterSpec):
    variant: ClassVar[str] = "bitfit"


@dataclass(frozen=True)
class VPT(AdapterSpec):
    variant: ClassVar[str] = "vpt"
    depth: str = "shallow"
    l: int = 1  # noqa: E741 - prompt count

    def validate(self, vit):
        if self.depth not in ("shallow", "deep"):
            raise ValueError(f"VPT depth must be 'shallow' or 'deep', got {self.depth!r}")
        if self.l < 1:
            raise ValueError(f"VPT needs at least one prompt token, got l={self.l}")

    @property
    def label(self):
        return "vpt" if self.depth == "shallow" else "vpt-deep"


@dataclass(frozen=True)
class AdapterSerial(AdapterSpec):
    variant: ClassVar[str] = "adapter"
    d_prime: int = 8

    def validate(self, vit):
        _bottleneck_check("adapter", self.d_prime, vit)


@dataclass(frozen=True)
class AdaptFormer(AdapterSpec):
    variant: ClassVar[str] = "adaptformer"
    d_prime: int = 8
    s: float = 0.1

    def validate(self, vit):
        _bottleneck_check("adaptformer", self.d_prime, vit)
        if not self.s > 0:
            raise ValueError(f"AdaptFormer scale s must be > 0, got {self.s}")


@dataclass(frozen=True)
class SSF(AdapterSpec):
    variant: ClassVar[str] = "ssf"


@dataclass(frozen=True)
class LoRA(AdapterSpec):
    variant: ClassVar[str] = "lora"
    r: int = 8

    def validate(self, vit):
        if self.r < 1:
            raise ValueError(f"LoRA rank must be >= 1, got r={self.r}")
        if self.r > min(vit.widths):
            raise ValueError(f"LoRA rank r={self.r} exceeds width {min(vit.widths)}")


@dataclass(frozen=True)
class DTL(AdapterSpec):
    variant: ClassVar[str] = "dtl"
    d_prime: int = 2
    M: int = 7
    beta: float = 100.0

    def csn_config(self) -> CSNConfig:
        return CSNConfig(d_prime=self.d_prime, M=self.M, beta=self.beta, variant="dtl")

    def validate(self, vit):
        self.csn_config().validate(vit)


@dataclass(frozen=True)
class DTLPlus(AdapterSpec):
    variant: ClassVar[str] = "dtlplus"
    d_prime: int = 2
    M: int = 7
    beta: float = 100.0
    kernel: int = 3

    def csn_config(self) -> CSNConfig:
        return CSNConfig(d_prime=self.d_prime, M=self.M, beta=self.beta, variant="dtlplus", kernel=self.kernel)

    def validate(self, vit):
        self.csn_config().validate(vit)

    @property
    def label(self):
        return "dtl+*" if self.M == 1 else "dtl+"


def _bottleneck_check(name: str, d_prime: int, vit: ViTConfig) -> None:
    if d_prime < 1:
        raise ValueError(f"{name}: bottleneck width must be >= 1, got {d_prime}")
    if d_prime >= min(vit.widths):
        warnings.warn(f"{name}: bottleneck d'={d_prime} >= d defeats the purpose", stacklevel=3)


SPEC_TYPES: dict[str, type[AdapterSpec]] = {
    cls.variant: cls for cls in (Full, Linear, BitFit, VPT, AdapterSerial, AdaptFormer, SSF, LoRA, DTL, DTLPlus)
}


def spec_from_dict(data: dict[str, Any]) -> AdapterSpec:
    """Inverse of ``AdapterSpec.to_dict`` (also used for the TOML [adapter] table)."""
    data = dict(data)
    variant = str(data.pop("variant", "")).lower()
    cls = SPEC_TYPES.get(variant)
    if cls is None:
        raise ValueError(f"unknown adapter variant {variant!r}; expected one of {sorted(SPEC_TYPES)}")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ValueError(f"adapter {variant}: unknown keys {unknown}")
    return cls(**data)


def named_spec(name: str, M: int = 7, d_prime: int = 2, r: int = 8) -> AdapterSpec:
    """Short CLI names -> specs with the default hyperparameters."""
    table = {
        "full": Full(),
        "linear": Linear(),
        "bitfit": BitFit(),
        "vpt": VPT("shallow", 1),
        "vpt-deep": VPT("deep", 1),
        "adapter": AdapterSerial(8),
        "adaptformer": AdaptFormer(8, 0.1),
        "ssf": SSF(),
        "lora": LoRA(r),
        "dtl": DTL(d_prime, M),
        "dtl+": DTLPlus(d_prime, M),
        "dtlplus": DTLPlus(d_prime, M),
        "dtl+*": DTLPlus(d_prime, 1),
    }
    key = name.strip().lower()
    if key not in table:
        raise KeyError(name)
    return table[key]


SPEC_NAMES = ("full", "linear", "bitfit", "vpt", "vpt-deep", "adapter", "adaptformer", "ssf", "lora", "dtl", "dtl+", "dtl+*")

# ---------------------------------------------------------------------------
# stand-alone formulas


def lora_linear(x: Tensor, w: Tensor, a: Tensor, b: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x W + x A B``; the low-rank path stays factored while ``r < d/2``."""
    d, r = a.shape
    if r > d:
        raise ValueError(f"lora_linear: rank {r} exceeds width {d}")
    base = ops.linear(x, w, bias)
    if r < d / 2:
        delta = ops.matmul(ops.matmul(x, a), b)
    else:
        delta = ops.matmul(x, ops.matmul(a, b))
    return ops.add(base, delta)


def bottleneck(x: Tensor, down: Tensor, up: Tensor) -> Tensor:
    return ops.matmul(ops.gelu(ops.matmul(x, down)), up)


def adapter_serial(x: Tensor, down: Tensor, up: Tensor) -> Tensor:
    """``x + gelu(x W_down) W_up``."""
    return ops.add(x, bottleneck(x, down, up))


def adaptformer_ffn(x: Tensor, ffn, ln, down: Tensor, up: Tensor, s: float) -> Tensor:
    """``x + FFN(LN(x)) + s * gelu(x W_down) W_up`` with ``x`` the MHSA output stream.

    ``ffn`` and ``ln`` are callables on tensors.
    """
    return ops.add(ops.add(x, ffn(ln(x))), ops.scale(bottleneck(x, down, up), s))


def ssf_transform(x: Tensor, gamma: Tensor, beta: Tensor | None) -> Tensor:
    y = ops.mul(x, gamma)
    return y if beta is None else ops.add(y, beta)


def vpt_prepend(x: Tensor, prompts: Tensor) -> Tensor:
    """``[P, X]`` along the token axis (prompts broadcast over leading dims)."""
    if prompts.shape[-2] < 1:
        raise ValueError("vpt_prepend: need at least one prompt token")
    lead = x.shape[:-2]
    if lead:
        prompts = ops.expand(prompts, lead + prompts.shape[-2:])
    return ops.concat_tokens([prompts, x])


# ---------------------------------------------------------------------------
# adapters as block hooks


class Adapter(BlockHooks):
    def __init__(self, params: dict[str, Param] | None = None):
        self.params = params or {}

    def embed(self, z: Tensor) -> Tensor:
        return z

    def post_norm(self, z: Tensor) -> Tensor:
        return z

    def run(self, backbone: ViT, image: Tensor) -> Tensor:
        z = self.embed(backbone.patch_embed(image))
        for i in range(1, backbone.config.N + 1):
            z = backbone.block_forward(backbone.enter_block(z, i), i, self)
        return z

    def structural_units(self) -> int:
        return 0


def _uniform(rng, shape, fan_in, dtype, name, trainable=True) -> Param:
    bound = 1.0 / math.sqrt(fan_in)
    return Param(name, rng.uniform(-bound, bound, shape), trainable=trainable, dtype=dtype)


def _zeros(shape, dtype, name) -> Param:
    return Param(name, np.zeros(shape), trainable=True, dtype=dtype)


class BitFitAdapter(Adapter):
    def __init__(self, n_bias: int):
        super().__init__()
        self.n_bias = n_bias

    def structural_units(self):
        return self.n_bias


class VPTAdapter(Adapter):
    def __init__(self, spec: VPT, vit: ViTConfig, rng, dtype):
        self.spec = spec
        self.n_prompts = spec.l
        params = {}
        if spec.depth == "shallow":
            params["vpt.prompt"] = _uniform(rng, (spec.l, vit.d), vit.d, dtype, "vpt.prompt")
        else:
            for i in range(1, vit.N + 1):
                w = vit.dim_of(i)
                name = f"vpt.{i}.prompt"
                params[name] = _uniform(rng, (spec.l, w), w, dtype, name)
        super().__init__(params)

    def embed(self, z):
        key = "vpt.prompt" if self.spec.depth == "shallow" else "vpt.1.prompt"
        with scope("vpt"):
            return vpt_prepend(z, self.params[key])

    def tokens_in(self, i, z):
        if self.spec.depth == "shallow" or i == 1:
            return z
        rest = ops.split_tokens(z, self.spec.l, z.shape[-2])
        return vpt_prepend(rest, self.params[f"vpt.{i}.prompt"])

    def structural_units(self):
        return len(self.params)


class SerialAdapter(Adapter):
    def __init__(self, spec: AdapterSerial, vit: ViTConfig, rng, dtype):
        params = {}
        for i in range(1, vit.N + 1):
            w = vit.dim_of(i)
            for site in ("attn", "ffn"):
                pre = f"adapter.{i}.{site}."
                params[pre + "down"] = _uniform(rng, (w, spec.d_prime), w, dtype, pre + "down")
                params[pre + "up"] = _zeros((spec.d_prime, w), dtype, pre + "up")
        super().__init__(params)

    def post(self, i, site, x):
        if site not in ("attn", "ffn"):
            return x
        pre = f"adapter.{i}.{site}."
        return adapter_serial(x, self.params[pre + "down"], self.params[pre + "up"])

    def structural_units(self):
        return len(self.params) // 2


class AdaptFormerAdapter(Adapter):
    def __init__(self, spec: AdaptFormer, vit: ViTConfig, rng, dtype):
        self.s = spec.s
        params = {}
        for i in range(1, vit.N + 1):
            w = vit.dim_of(i)
            pre = f"adaptformer.{i}."
            params[pre + "down"] = _uniform(rng, (w, spec.d_prime), w, dtype, pre + "down")
            params[pre + "up"] = _zeros((spec.d_prime, w), dtype, pre + "up")
        super().__init__(params)

    def ffn_extra(self, i, x):
        pre = f"adaptformer.{i}."
        return ops.scale(bottleneck(x, self.params[pre + "down"], self.params[pre + "up"]), self.s)

    def structural_units(self):
        return len(self.params) // 2


# site -> (gamma rows, beta rows); the key projection gets no shift because a
# shift shared by every key cancels inside the softmax
SSF_BLOCK_SITES = ("ln1", "qkv", "attn", "ln2", "fc1", "ffn")


def ssf_param_shapes(vit: ViTConfig) -> dict[str, tuple[int, ...]]:
    shapes = {"ssf.embed.gamma": (vit.d,), "ssf.embed.beta": (vit.d,)}
    for i in range(1, vit.N + 1):
        w = vit.dim_of(i)
        hidden = vit.mlp_ratio * w
        for site in SSF_BLOCK_SITES:
            pre = f"ssf.{i}.{site}."
            if site == "qkv":
                shapes[pre + "gamma"] = (3, w)
                shapes[pre + "beta"] = (2, w)
            else:
                width = hidden if site == "fc1" else w
                shapes[pre + "gamma"] = (width,)
                shapes[pre + "beta"] = (width,)
    shapes["ssf.norm.gamma"] = (vit.d_out,)
    shapes["ssf.norm.beta"] = (vit.d_out,)
    return shapes


class SSFAdapter(Adapter):
    def __init__(self, vit: ViTConfig, dtype):
        params = {}
        for name, shape in ssf_param_shapes(vit).items():
            value = np.ones(shape) if name.endswith("gamma") else np.zeros(shape)
            params[name] = Param(name, value, trainable=True, dtype=dtype)
        super().__init__(params)

    def _apply(self, pre: str, x: Tensor) -> Tensor:
        return ssf_transform(x, self.params[pre + "gamma"], self.params[pre + "beta"])

    def embed(self, z):
        with scope("ssf.embed"):
            return self._apply("ssf.embed.", z)

    def post_norm(self, z):
        return self._apply("ssf.norm.", z)

    def post(self, i, site, x):
        pre = f"ssf.{i}."
        if site in ("q", "k", "v"):
            row = "qkv".index(site)
            gamma = ops.split_tokens(self.params[pre + "qkv.gamma"], row, row + 1)
            beta = None
            if site != "k":
                brow = 0 if site == "q" else 1
                beta = ops.split_tokens(self.params[pre + "qkv.beta"], brow, brow + 1)
            return ssf_transform(x, gamma, beta)
        return self._apply(f"{pre}{site}.", x)

    def structural_units(self):
        return len(self.params)


class LoRAAdapter(Adapter):
    def __init__(self, spec: LoRA, vit: ViTConfig, rng, dtype):
        params = {}
        for i in range(1, vit.N + 1):
            w = vit.dim_of(i)
            for site in ("q", "v"):
                pre = f"lora.{i}.{site}."
                params[pre + "A"] = _uniform(rng, (w, spec.r), w, dtype, pre + "A")
                params[pre + "B"] = _zeros((spec.r, w), dtype, pre + "B")
        super().__init__(params)

    def linear(self, i, site, x, w, b):
        if site not in ("q", "v"):
            return ops.linear(x, w, b)
        pre = f"lora.{i}.{site}."
        return lora_linear(x, w, self.params[pre + "A"], self.params[pre + "B"], b)

    def structural_units(self):
        return len(self.params) // 2


class DTLAdapter(Adapter):
    def __init__(self, weights: CSNWeights):
        self.weights = weights
        super().__init__(dict(weights.params))

    def run(self, backbone, image):
        return dtl_forward(backbone, self.weights, image)

    def structural_units(self):
        return self.weights.structural_units()


# ---------------------------------------------------------------------------
# the assembled model


class AdaptedModel:
    """Backbone + strategy + linear classification head on the cls token."""

    def __init__(self, backbone: ViT, spec: AdapterSpec, adapter: Adapter, head: dict[str, Param], n_classes: int):
        self.backbone = backbone
        self.spec = spec
        self.adapter = adapter
        self.head = head
        self.n_classes = n_classes
        self.last_graph: Graph | None = None

    @property
    def config(self) -> ViTConfig:
        return self.backbone.config

    @property
    def dtype(self) -> np.dtype:
        return self.backbone.dtype

    def params(self) -> dict[str, Param]:
        out = dict(self.backbone.params)
        out.update(self.adapter.params)
        out.update(self.head)
        return out

    def trainable_params(self) -> dict[str, Param]:
        return {n: p for n, p in self.params().items() if p.trainable}

    def tokens(self, image: Tensor) -> Tensor:
        """Adapted final tokens before the final norm."""
        g = active_graph()
        if g is not None:
            self.last_graph = g
        return self.adapter.run(self.backbone, image)

    def features(self, image: Tensor) -> Tensor:
        """Head input: normalized cls token."""
        return self.features_from_tokens(self.tokens(image))

    def features_from_tokens(self, z: Tensor) -> Tensor:
        z = self.backbone.final_norm(z)
        z = self.adapter.post_norm(z)
        k = self.adapter.n_prompts
        with scope("head"):
            cls = ops.split_tokens(z, k, k + 1)
            return ops.reshape(cls, cls.shape[:-2] + (cls.shape[-1],))

    def head_logits(self, feats: Tensor) -> Tensor:
        with scope("head"):
            return ops.linear(feats, self.head["head.w"], self.head["head.b"])

    def forward(self, image: Tensor) -> Tensor:
        return self.head_logits(self.features(image))

    def loss(self, image: Tensor, labels: np.ndarray) -> Tensor:
        logits = self.forward(image)
        with scope("loss"):
            return ops.cross_entropy(logits, labels)

    def structural_units(self) -> int:
        return self.adapter.structural_units()


def init_head(d: int, n_classes: int, seed: int, dtype) -> dict[str, Param]:
    rng = np.random.default_rng([seed, 0x4EAD])
    return {
        "head.w": _uniform(rng, (d, n_classes), d, dtype, "head.w"),
        "head.b": _zeros((n_classes,), dtype, "head.b"),
    }


def attach(spec: AdapterSpec, backbone: ViT, n_classes: int = 10, seed: int = 0) -> AdaptedModel:
    """Mark trainable parameters and rewire the forward pass for ``spec``.

    The given backbone must be frozen and is never modified; strategies that
    tune backbone weights (Full, BitFit) get trainable copies of them.
    """
    frozen = [n for n, p in backbone.params.items() if p.trainable]
    if frozen:
        raise ValueError(f"attach expects a frozen backbone; trainable: {frozen[:3]}...")
    vit = backbone.config
    spec.validate(vit)
    if n_classes < 1:
        raise ValueError("n_classes must be >= 1")
    dtype = backbone.dtype
    rng = np.random.default_rng([seed, 0xADA])
    if isinstance(spec, Full):
        backbone = backbone.with_trainable(lambda n: True)
        adapter: Adapter = Adapter()
    elif isinstance(spec, Linear):
        adapter = Adapter()
    elif isinstance(spec, BitFit):
        backbone = backbone.with_trainable(is_bias)
        adapter = BitFitAdapter(sum(1 for n in backbone.params if is_bias(n)))
    elif isinstance(spec, VPT):
        adapter = VPTAdapter(spec, vit, rng, dtype)
    elif isinstance(spec, AdapterSerial):
        adapter = SerialAdapter(spec, vit, rng, dtype)
    elif isinstance(spec, AdaptFormer):
        adapter = AdaptFormerAdapter(spec, vit, rng, dtype)
    elif isinstance(spec, SSF):
        adapter = SSFAdapter(vit, dtype)
    elif isinstance(spec, LoRA):
        adapter = LoRAAdapter(spec, vit, rng, dtype)
    elif isinstance(spec, (DTL, DTLPlus)):
        adapter = DTLAdapter(csn_init(spec.csn_config(), vit, seed=seed, dtype=dtype))
    else:
        raise TypeError(f"unsupported spec {spec!r}")
    head = init_head(vit.d_out, n_classes, seed, dtype)
    return AdaptedModel(backbone, spec, adapter, head, n_classes)


# ---------------------------------------------------------------------------
# closed-form counts


def _block_widths(vit: ViTConfig) -> list[tuple[int, int]]:
    return [(vit.dim_of(i), vit.mlp_ratio * vit.dim_of(i)) for i in range(1, vit.N + 1)]


def backbone_param_count(vit: ViTConfig) -> int:
    d, p = vit.d, vit.patch
    total = 3 * p * p * d + d + d + vit.n_tokens * d  # patch proj + bias, cls, positions
    for w, hidden in _block_widths(vit):
        total += 4 * w  # two layer norms
        total += 4 * w * w + 3 * w  # q, k, v, o (+ q, v, o biases)
        total += 2 * w * hidden + hidden + w  # ffn
    for i in range(2, vit.N + 1):
        if vit.is_stage_start(i):
            total += vit.dim_of(i - 1) * vit.dim_of(i) + vit.dim_of(i)
    return total + 2 * vit.d_out


def bias_param_count(vit: ViTConfig) -> int:
    total = vit.d  # patch bias
    for w, hidden in _block_widths(vit):
        total += 2 * w + 3 * w + hidden + w  # ln betas, q/v/o biases, ffn biases
    for i in range(2, vit.N + 1):
        if vit.is_stage_start(i):
            total += vit.dim_of(i)
    return total + vit.d_out


def count_trainable(spec: AdapterSpec, vit: ViTConfig, n_classes: int = 10) -> dict[str, int]:
    """Closed-form trainable parameter counts; the head is reported separately."""
    spec.validate(vit)
    widths = _block_widths(vit)
    if isinstance(spec, Full):
        adapter = backbone_param_count(vit)
    elif isinstance(spec, Linear):
        adapter = 0
    elif isinstance(spec, BitFit):
        adapter = bias_param_count(vit)
    elif isinstance(spec, VPT):
        adapter = spec.l * vit.d if spec.depth == "shallow" else sum(spec.l * w for w, _ in widths)
    elif isinstance(spec, AdapterSerial):
        adapter = sum(2 * 2 * w * spec.d_prime for w, _ in widths)
    elif isinstance(spec, AdaptFormer):
        adapter = sum(2 * w * spec.d_prime for w, _ in widths)
    elif isinstance(spec, SSF):
        adapter = 2 * vit.d + 2 * vit.d_out + sum(13 * w + 2 * h for w, h in widths)
    elif isinstance(spec, LoRA):
        adapter = sum(2 * 2 * w * spec.r for w, _ in widths)
    elif isinstance(spec, DTL):
        adapter = sum(2 * w * spec.d_prime for w, _ in widths)
    elif isinstance(spec, DTLPlus):
        w = vit.dim_of(min(spec.M, vit.N))
        adapter = sum(2 * wi * spec.d_prime for wi, _ in widths) + w * spec.kernel**2 + w
    else:
        raise TypeError(f"unsupported spec {spec!r}")
    return {"adapter_params": adapter, "head_params": vit.d_out * n_classes + n_classes}


def count_enumerated(model: AdaptedModel) -> dict[str, int]:
    """Same split as :func:`count_trainable`, by walking the model's Params."""
    trainable = model.trainable_params()
    head = sum(p.size for n, p in trainable.items() if n.startswith("head."))
    return {"adapter_params": sum(p.size for p in trainable.values()) - head, "head_params": head}


def structural_units(spec: AdapterSpec, vit: ViTConfig) -> dict[str, int]:
    """Count of atomic inserted modules: ``in_block`` and ``total`` (adds embed/norm-level units)."""
    N = vit.N
    if isinstance(spec, (Full, Linear)):
        in_block = total = 0
    elif isinstance(spec, BitFit):
        in_block = 7 * N
        total = in_block + 2 + sum(1 for i in range(2, N + 1) if vit.is_stage_start(i))
    elif isinstance(spec, VPT):
        in_block = total = 1 if spec.depth == "shallow" else N
    elif isinstance(spec, AdapterSerial):
        in_block = total = 2 * N
    elif isinstance(spec, AdaptFormer):
        in_block = total = N
    elif isinstance(spec, SSF):
        # each scale and each shift tensor is one unit
        in_block = 2 * len(SSF_BLOCK_SITES) * N
        total = in_block + 4
    elif isinstance(spec, LoRA):
        in_block = total = 2 * N
    elif isinstance(spec, DTL):
        in_block = total = N
    elif isinstance(spec, DTLPlus):
        in_block = total = N + 1
    else:
        raise TypeError(f"unsupported spec {spec!r}")
    return {"in_block": in_block, "total": total}
