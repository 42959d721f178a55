"""Low-rank adapters for frozen 2D convolution weights.

Six methods share one code path:

    LoRA-C    dW[o,i,h,w] = sum_r B[o,h,r] A[r,i,w]
    convLoRA  dW[o,i,h,w] = sum_r B[o,r]   A[r,i,h,w]
    CP-LoRA   dW[o,i,h,w] = sum_r a1[r,o] a2[r,i] a3[r,h] a4[r,w]

and a DoRA variant of each, which rescales every output-channel slice of
``W0 + s*dW`` to a trainable magnitude ``m[o]``. The update scale is
``s = alpha / rank`` with ``alpha = 2 * rank`` by default.

Convolution weights are laid out as ``(c_out, c_in, k_h, k_w)``.
"""

from __future__ import annotations

import copy
import enum
import math
import warnings
from dataclasses import dataclass
from typing import Dict, Iterator, Optional, Tuple, Union

import torch
import torch.nn.functional as F
from torch import Tensor, nn

__all__ = [
    "Method",
    "AdapterConfig",
    "ConvAdapter",
    "AdaptedConv2d",
    "DegenerateChannelWarning",
    "delta_lorac",
    "delta_convlora",
    "delta_cp",
    "init_adapter",
    "compose_effective_weight",
    "merge",
    "param_count",
    "attach_adapters",
    "merge_adapters",
    "adapted_layers",
    "adapter_state_dict",
    "load_adapter_state_dict",
    "count_trainable",
]


class DegenerateChannelWarning(RuntimeWarning):
    """An output channel of ``W0 + s*dW`` has norm below epsilon."""


class Method(str, enum.Enum):
    LORA_C = "lorac"
    CONV_LORA = "convlora"
    CP_LORA = "cplora"
    DORA_C = "dorac"
    CONV_DORA = "convdora"
    CP_DORA = "cpdora"

    @classmethod
    def parse(cls, name: Union[str, "Method"]) -> "Method":
        """Accept ``"DoRA-C"``, ``"dora_c"``, ``"dorac"`` and so on."""
        if isinstance(name, Method):
            return name
        key = str(name).lower().replace("-", "").replace("_", "").strip()
        for m in cls:
            if m.value == key:
                return m
        raise ValueError(f"unknown adapter method {name!r}")

    @property
    def is_dora(self) -> bool:
        return self in (Method.DORA_C, Method.CONV_DORA, Method.CP_DORA)

    @property
    def family(self) -> str:
        """Factorisation family: ``"lorac"``, ``"convlora"`` or ``"cp"``."""
        return {
            Method.LORA_C: "lorac",
            Method.DORA_C: "lorac",
            Method.CONV_LORA: "convlora",
            Method.CONV_DORA: "convlora",
            Method.CP_LORA: "cp",
            Method.CP_DORA: "cp",
        }[self]

    @property
    def label(self) -> str:
        return {
            Method.LORA_C: "LoRA-C",
            Method.CONV_LORA: "convLoRA",
            Method.CP_LORA: "CP-LoRA",
            Method.DORA_C: "DoRA-C",
            Method.CONV_DORA: "convDoRA",
            Method.CP_DORA: "CP-DoRA",
        }[self]


@dataclass(frozen=True)
class AdapterConfig:
    """Hyperparameters of one adapter family.

    ``alpha`` defaults to ``2 * rank`` so the update scale is 2.
    ``detach_norm`` stops gradients through the DoRA channel norm; off by
    default.
    """

    method: Method
    rank: int
    alpha: Optional[float] = None
    epsilon: float = 1e-8
    detach_norm: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "method", Method.parse(self.method))
        if isinstance(self.rank, bool) or int(self.rank) != self.rank or self.rank <= 0:
            raise ValueError(f"rank must be a positive integer, got {self.rank!r}")
        object.__setattr__(self, "rank", int(self.rank))
        if self.alpha is None:
            object.__setattr__(self, "alpha", 2.0 * self.rank)
        if not (math.isfinite(self.alpha) and self.alpha > 0):
            raise ValueError(f"alpha must be finite and positive, got {self.alpha!r}")
        if not (self.epsilon > 0):
            raise ValueError("epsilon must be positive")

    @property
    def scaling(self) -> float:
        return float(self.alpha) / self.rank

    def to_dict(self) -> dict:
        return {
            "method": self.method.value,
            "rank": self.rank,
            "alpha": float(self.alpha),
            "epsilon": self.epsilon,
            "detach_norm": self.detach_norm,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AdapterConfig":
        return cls(
            method=d["method"],
            rank=d["rank"],
            alpha=d.get("alpha"),
            epsilon=d.get("epsilon", 1e-8),
            detach_norm=d.get("detach_norm", False),
        )


# --------------------------------------------------------------------------
# update tensors


def delta_lorac(A: Tensor, B: Tensor) -> Tensor:
    """LoRA-C update from ``A (R, c_in, k_w)`` and ``B (c_out, k_h, R)``.

    Contracts the rank axis: kernel height comes from ``B``, kernel width
    from ``A``. Returns ``(c_out, c_in, k_h, k_w)``, unscaled.
    """
    if A.dim() != 3 or B.dim() != 3:
        raise ValueError(f"LoRA-C factors must be rank-3, got {tuple(A.shape)}, {tuple(B.shape)}")
    if A.shape[0] != B.shape[2]:
        raise ValueError(f"rank mismatch: A has {A.shape[0]}, B has {B.shape[2]}")
    return torch.einsum("ohr,riw->oihw", B, A)


def delta_convlora(A: Tensor, B: Tensor) -> Tensor:
    """convLoRA update from ``A (R, c_in, k_h, k_w)`` and ``B (c_out, R)``."""
    if A.dim() != 4 or B.dim() != 2:
        raise ValueError(f"convLoRA factors must be rank-4/rank-2, got {tuple(A.shape)}, {tuple(B.shape)}")
    if A.shape[0] != B.shape[1]:
        raise ValueError(f"rank mismatch: A has {A.shape[0]}, B has {B.shape[1]}")
    return torch.einsum("or,rihw->oihw", B, A)


def delta_cp(a1: Tensor, a2: Tensor, a3: Tensor, a4: Tensor) -> Tensor:
    """Sum of ``R`` rank-one tensors ``a1[r] o a2[r] o a3[r] o a4[r]``.

    Each factor is ``(R, d)`` for its mode; the result is
    ``(c_out, c_in, k_h, k_w)``.
    """
    factors = (a1, a2, a3, a4)
    if any(f.dim() != 2 for f in factors):
        raise ValueError("CP factors must be (R, d) matrices")
    ranks = {f.shape[0] for f in factors}
    if len(ranks) != 1:
        raise ValueError(f"CP factors disagree on rank: {[f.shape[0] for f in factors]}")
    return torch.einsum("ro,ri,rh,rw->oihw", a1, a2, a3, a4)


# --------------------------------------------------------------------------
# adapter state


def _uniform(gen: torch.Generator, shape: Tuple[int, ...], fan_in: int, dtype) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return (torch.rand(shape, generator=gen, dtype=torch.float64) * 2 - 1).mul_(bound).to(dtype)


def _channel_norm(w: Tensor) -> Tensor:
    return w.flatten(1).norm(dim=1)


class ConvAdapter(nn.Module):
    """Trainable factors (and DoRA magnitude) for one convolution weight.

    Build with :func:`init_adapter`; this constructor only allocates.
    """

    def __init__(
        self,
        config: AdapterConfig,
        weight_shape: Tuple[int, int, int, int],
        dtype: torch.dtype = torch.float32,
    ) -> None:
        super().__init__()
        c_out, c_in, k_h, k_w = (int(d) for d in weight_shape)
        if min(c_out, c_in, k_h, k_w) < 1:
            raise ValueError(f"invalid weight shape {weight_shape}")
        self.config = config
        self.weight_shape = (c_out, c_in, k_h, k_w)
        R = config.rank
        family = config.method.family

        def p(*shape: int) -> nn.Parameter:
            return nn.Parameter(torch.zeros(shape, dtype=dtype))

        if family == "lorac":
            self.lora_A = p(R, c_in, k_w)
            self.lora_B = p(c_out, k_h, R)
        elif family == "convlora":
            self.lora_A = p(R, c_in, k_h, k_w)
            self.lora_B = p(c_out, R)
        else:
            self.cp_out = p(R, c_out)
            self.cp_in = p(R, c_in)
            self.cp_kh = p(R, k_h)
            self.cp_kw = p(R, k_w)
        if config.method.is_dora:
            self.magnitude = p(c_out)
        else:
            self.magnitude = None

    @property
    def method(self) -> Method:
        return self.config.method

    def factors(self) -> Dict[str, Tensor]:
        return {n: t for n, t in self.named_parameters() if n != "magnitude"}

    def delta(self) -> Tensor:
        """Unscaled weight update ``dW``."""
        family = self.config.method.family
        if family == "lorac":
            return delta_lorac(self.lora_A, self.lora_B)
        if family == "convlora":
            return delta_convlora(self.lora_A, self.lora_B)
        return delta_cp(self.cp_out, self.cp_in, self.cp_kh, self.cp_kw)

    def extra_repr(self) -> str:
        c = self.config
        return f"{c.method.label}, rank={c.rank}, alpha={c.alpha:g}, shape={self.weight_shape}"


def init_adapter(
    base: Union[Tensor, nn.Conv2d],
    config: AdapterConfig,
    seed: int = 0,
) -> ConvAdapter:
    """Create an adapter whose update is exactly zero.

    The output-side factor (``B``, or ``a1`` for CP) starts at zero and
    the remaining factors are drawn uniformly with ``1/sqrt(fan_in)``
    bounds from a generator seeded with ``seed``. DoRA magnitudes start at
    the per-output-channel Frobenius norms of ``base``.
    """
    weight = base.weight if isinstance(base, nn.Conv2d) else base
    weight = weight.detach()
    if weight.dim() != 4:
        raise ValueError(f"expected a rank-4 convolution weight, got shape {tuple(weight.shape)}")
    if not torch.isfinite(weight).all():
        raise ValueError("base weight contains non-finite values")
    adapter = ConvAdapter(config, tuple(weight.shape), dtype=weight.dtype)
    c_out, c_in, k_h, k_w = adapter.weight_shape
    R = config.rank
    gen = torch.Generator().manual_seed(int(seed))
    dt = weight.dtype
    with torch.no_grad():
        family = config.method.family
        if family == "lorac":
            adapter.lora_A.copy_(_uniform(gen, (R, c_in, k_w), c_in * k_w, dt))
        elif family == "convlora":
            adapter.lora_A.copy_(_uniform(gen, (R, c_in, k_h, k_w), c_in * k_h * k_w, dt))
        else:
            adapter.cp_in.copy_(_uniform(gen, (R, c_in), c_in, dt))
            adapter.cp_kh.copy_(_uniform(gen, (R, k_h), k_h, dt))
            adapter.cp_kw.copy_(_uniform(gen, (R, k_w), k_w, dt))
        if adapter.magnitude is not None:
            adapter.magnitude.copy_(_channel_norm(weight))
    return adapter


def compose_effective_weight(base_weight: Tensor, adapter: ConvAdapter) -> Tensor:
    """Weight seen by the convolution: ``W0 + s*dW``, DoRA-normalised if needed."""
    if tuple(base_weight.shape) != adapter.weight_shape:
        raise ValueError(
            f"adapter built for {adapter.weight_shape}, base is {tuple(base_weight.shape)}"
        )
    cfg = adapter.config
    V = base_weight + cfg.scaling * adapter.delta()
    if adapter.magnitude is None:
        return V
    norm = _channel_norm(V)
    if cfg.detach_norm:
        norm = norm.detach()
    if bool((norm < cfg.epsilon).any()):
        bad = torch.nonzero(norm < cfg.epsilon).flatten().tolist()
        warnings.warn(f"degenerate output channels {bad}", DegenerateChannelWarning, stacklevel=2)
    scale = adapter.magnitude / (norm + cfg.epsilon)
    return V * scale.view(-1, 1, 1, 1)


class AdaptedConv2d(nn.Module):
    """A frozen ``nn.Conv2d`` whose weight is composed with a :class:`ConvAdapter`.

    The base bias is kept as is and is never adapted.
    """

    def __init__(self, base: nn.Conv2d, adapter: ConvAdapter) -> None:
        super().__init__()
        if base.groups != 1:
            raise ValueError("grouped convolutions are not supported")
        self.base = base
        self.adapter = adapter
        for prm in self.base.parameters():
            prm.requires_grad_(False)

    def effective_weight(self) -> Tensor:
        return compose_effective_weight(self.base.weight, self.adapter)

    def forward(self, x: Tensor) -> Tensor:
        b = self.base
        return F.conv2d(x, self.effective_weight(), b.bias, b.stride, b.padding, b.dilation)

    def merged(self) -> nn.Conv2d:
        return merge(self.base, self.adapter)


def merge(base: nn.Conv2d, adapter: ConvAdapter) -> nn.Conv2d:
    """Plain convolution carrying the composed weight; the adapter is dropped."""
    out = copy.deepcopy(base)
    with torch.no_grad():
        out.weight.copy_(compose_effective_weight(base.weight, adapter))
    for prm in out.parameters():
        prm.requires_grad_(base.weight.requires_grad)
    return out


def param_count(
    method: Union[Method, str],
    c_in: int,
    c_out: int,
    k: Union[int, Tuple[int, int]],
    rank: int,
) -> int:
    """Closed-form trainable parameter count for one convolution layer."""
    method = Method.parse(method)
    k_h, k_w = (k, k) if isinstance(k, int) else k
    for v in (c_in, c_out, k_h, k_w, rank):
        if v < 1:
            raise ValueError("all dimensions and the rank must be >= 1")
    family = method.family
    if family == "lorac":
        n = (c_in * k_w + c_out * k_h) * rank
    elif family == "convlora":
        n = (c_in * k_h * k_w + c_out) * rank
    else:
        n = (c_in + c_out + k_h + k_w) * rank
    if method.is_dora:
        n += c_out
    return n


# --------------------------------------------------------------------------
# network-level helpers


def _set_submodule(root: nn.Module, name: str, module: nn.Module) -> None:
    parent_name, _, child = name.rpartition(".")
    parent = root.get_submodule(parent_name) if parent_name else root
    setattr(parent, child, module)


def attach_adapters(
    net: nn.Module,
    config: AdapterConfig,
    seed: int = 0,
) -> Dict[str, AdaptedConv2d]:
    """Wrap every ``nn.Conv2d`` of ``net`` in place and freeze all base parameters.

    Layer ``j`` (in ``named_modules`` order) is initialised with seed
    ``seed * 1000 + j``.
    """
    for prm in net.parameters():
        prm.requires_grad_(False)
    targets = [(n, m) for n, m in net.named_modules() if isinstance(m, nn.Conv2d)]
    if not targets:
        raise ValueError("network has no convolutions to adapt")
    wrapped = {}
    for j, (name, conv) in enumerate(targets):
        adapter = init_adapter(conv, config, seed=seed * 1000 + j)
        layer = AdaptedConv2d(conv, adapter)
        _set_submodule(net, name, layer)
        wrapped[name] = layer
    return wrapped


def adapted_layers(net: nn.Module) -> Iterator[Tuple[str, AdaptedConv2d]]:
    for name, m in net.named_modules():
        if isinstance(m, AdaptedConv2d):
            yield name, m


def merge_adapters(net: nn.Module) -> nn.Module:
    """Replace every adapted layer of ``net`` (in place) by its merged convolution."""
    for name, layer in list(adapted_layers(net)):
        _set_submodule(net, name, layer.merged())
    return net


def adapter_state_dict(net: nn.Module) -> Dict[str, Tensor]:
    """Adapter tensors keyed ``<layer>.<param>`` where ``<layer>`` is the base conv name."""
    out = {}
    for name, layer in adapted_layers(net):
        for pname, prm in layer.adapter.named_parameters():
            out[f"{name}.{pname}"] = prm.detach().clone()
    return out


def load_adapter_state_dict(net: nn.Module, tensors: Dict[str, Tensor]) -> None:
    expected = {}
    for name, layer in adapted_layers(net):
        for pname, prm in layer.adapter.named_parameters():
            expected[f"{name}.{pname}"] = prm
    missing = sorted(set(expected) - set(tensors))
    extra = sorted(set(tensors) - set(expected))
    if missing or extra:
        raise ValueError(f"adapter tensors do not match network: missing={missing[:5]} extra={extra[:5]}")
    with torch.no_grad():
        for key, prm in expected.items():
            src = tensors[key]
            if tuple(src.shape) != tuple(prm.shape):
                raise ValueError(f"{key}: shape {tuple(src.shape)} != {tuple(prm.shape)}")
            prm.copy_(src.to(prm.dtype))


def count_trainable(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters() if p.requires_grad)
