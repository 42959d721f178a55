"""Two-level multi-view Unet and a plain Unet with named, freezable blocks.

Block layout of the multi-view model (``c`` = base channels)::

    M1.1 (1 -> c) ----------------> M2.1 (c -> 2c) -------------+
      pool                                                      |
    M1.2 (c -> 2c) ---------------> M2.2 (2c -> 4c) ----+       |
      pool                                              |       |
    M1.3 (2c -> 4c)  -> up -> cat -> M1.4 (8c -> 2c) -> up -> cat -> M1.5 (4c -> c) -> M3 -> softmax

The plain Unet drops M2.* and concatenates the encoder features directly.
Upsampling is nearest-neighbour; the first 3x3 convolution of the
following decoder block acts on the upsampled concatenation.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Set, Union

import torch
import torch.nn.functional as F
from torch import Tensor, nn

__all__ = [
    "LayerSpec",
    "BlockSpec",
    "NetworkSpec",
    "SegmentationUnet",
    "STRATEGIES",
    "build_multiview_unet",
    "build_standard_unet",
    "build_network",
    "forward",
    "predict_mask",
    "select_trainable",
    "apply_strategy",
]


@dataclass
class LayerSpec:
    name: str
    in_channels: int
    out_channels: int
    kernel_size: int = 3
    dilation: int = 1
    relu: bool = True


@dataclass
class BlockSpec:
    name: str
    kind: str  # M1, M2, M3
    role: str  # encoder, bottleneck, skip, decoder
    layers: List[LayerSpec]
    trainable: bool = True

    @property
    def out_channels(self) -> int:
        if self.kind == "M2":
            return self.layers[0].in_channels + self.layers[-1].out_channels
        return self.layers[-1].out_channels


def _m1(name: str, role: str, cin: int, cout: int) -> BlockSpec:
    return BlockSpec(name, "M1", role, [LayerSpec("conv1", cin, cout), LayerSpec("conv2", cout, cout)])


def _m2(name: str, ch: int) -> BlockSpec:
    layers = [LayerSpec(f"dil{d}", ch, ch, 3, d) for d in (1, 2, 4)]
    return BlockSpec(name, "M2", "skip", layers)


def _m3(name: str, ch: int, classes: int) -> BlockSpec:
    return BlockSpec(
        name,
        "M3",
        "decoder",
        [LayerSpec("conv1", ch, ch), LayerSpec("conv2", ch, ch), LayerSpec("head", ch, classes, 1, 1, relu=False)],
    )


@dataclass
class NetworkSpec:
    architecture: str = "multiview"  # or "unet"
    input_channels: int = 1
    base_channels: int = 16
    class_count: int = 2
    level_count: int = 2
    blocks: List[BlockSpec] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.architecture not in ("multiview", "unet"):
            raise ValueError(f"unknown architecture {self.architecture!r}")
        if self.level_count != 2:
            raise ValueError("only the 2-level configuration is supported")
        for v in ("input_channels", "base_channels", "class_count"):
            if getattr(self, v) < 1:
                raise ValueError(f"{v} must be >= 1")
        if self.class_count < 2:
            raise ValueError("class_count must be >= 2")
        if not self.blocks:
            self.blocks = self._default_blocks()
        else:
            self.blocks = [b if isinstance(b, BlockSpec) else _block_from_dict(b) for b in self.blocks]

    def _default_blocks(self) -> List[BlockSpec]:
        c, cin, k = self.base_channels, self.input_channels, self.class_count
        blocks = [
            _m1("M1.1", "encoder", cin, c),
            _m1("M1.2", "encoder", c, 2 * c),
            _m1("M1.3", "bottleneck", 2 * c, 4 * c),
        ]
        if self.architecture == "multiview":
            blocks += [_m2("M2.1", c), _m2("M2.2", 2 * c)]
            skip1, skip2 = 2 * c, 4 * c
        else:
            skip1, skip2 = c, 2 * c
        blocks += [
            _m1("M1.4", "decoder", 4 * c + skip2, 2 * c),
            _m1("M1.5", "decoder", 2 * c + skip1, c),
            _m3("M3", c, k),
        ]
        return blocks

    @property
    def block_names(self) -> List[str]:
        return [b.name for b in self.blocks]

    def block(self, name: str) -> BlockSpec:
        for b in self.blocks:
            if b.name == name:
                return b
        raise KeyError(name)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        return cls(**d)


def _block_from_dict(d: dict) -> BlockSpec:
    d = dict(d)
    d["layers"] = [LayerSpec(**l) for l in d["layers"]]
    return BlockSpec(**d)


def _key(name: str) -> str:
    # ModuleDict keys may not contain dots
    return name.replace(".", "_")


class Block(nn.Module):
    def __init__(self, spec: BlockSpec) -> None:
        super().__init__()
        self.kind = spec.kind
        self.relu = {l.name: l.relu for l in spec.layers}
        for l in spec.layers:
            pad = l.dilation * (l.kernel_size // 2)
            self.add_module(
                l.name, nn.Conv2d(l.in_channels, l.out_channels, l.kernel_size, padding=pad, dilation=l.dilation)
            )

    def forward(self, x: Tensor) -> Tensor:
        y = x
        for name, conv in self.named_children():
            y = conv(y)
            if self.relu[name]:
                y = F.relu(y)
        if self.kind == "M2":
            y = torch.cat([x, y], dim=1)
        return y


class SegmentationUnet(nn.Module):
    """Encoder-decoder segmentation network returning per-pixel class probabilities."""

    def __init__(self, spec: NetworkSpec) -> None:
        super().__init__()
        self.spec = spec
        self.blocks = nn.ModuleDict({_key(b.name): Block(b) for b in spec.blocks})
        self.multiview = spec.architecture == "multiview"

    def block(self, name: str) -> Block:
        """Module of a named block such as ``"M1.4"``."""
        try:
            return self.blocks[_key(name)]
        except KeyError:
            raise KeyError(f"no block named {name!r}; have {self.spec.block_names}") from None

    @property
    def block_names(self) -> List[str]:
        return self.spec.block_names

    def logits(self, x: Tensor) -> Tensor:
        if x.dim() != 4 or x.shape[1] != self.spec.input_channels:
            raise ValueError(f"expected (B, {self.spec.input_channels}, H, W) input, got {tuple(x.shape)}")
        if x.shape[-1] % 4 or x.shape[-2] % 4:
            raise ValueError(f"H and W must be divisible by 4, got {tuple(x.shape[-2:])}")
        if not torch.isfinite(x).all():
            raise ValueError("input contains non-finite values")
        b = self.block
        e1 = b("M1.1")(x)
        e2 = b("M1.2")(F.max_pool2d(e1, 2))
        e3 = b("M1.3")(F.max_pool2d(e2, 2))
        s1, s2 = (b("M2.1")(e1), b("M2.2")(e2)) if self.multiview else (e1, e2)
        d2 = b("M1.4")(torch.cat([F.interpolate(e3, scale_factor=2, mode="nearest"), s2], dim=1))
        d1 = b("M1.5")(torch.cat([F.interpolate(d2, scale_factor=2, mode="nearest"), s1], dim=1))
        return b("M3")(d1)

    def forward(self, x: Tensor) -> Tensor:
        return torch.softmax(self.logits(x), dim=1)


def _init_weights(net: nn.Module, seed: int) -> None:
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for m in net.modules():
            if isinstance(m, nn.Conv2d):
                fan_in = m.in_channels * m.kernel_size[0] * m.kernel_size[1]
                std = (2.0 / fan_in) ** 0.5
                m.weight.copy_(torch.randn(m.weight.shape, generator=gen, dtype=torch.float64) * std)
                if m.bias is not None:
                    m.bias.zero_()


def build_network(spec: NetworkSpec, seed: int = 0) -> SegmentationUnet:
    """He-normal weights from a seeded generator; biases start at zero."""
    net = SegmentationUnet(spec)
    _init_weights(net, seed)
    return net


def build_multiview_unet(spec: Optional[NetworkSpec] = None, seed: int = 0, **kw) -> SegmentationUnet:
    if spec is None:
        spec = NetworkSpec(architecture="multiview", **kw)
    if spec.architecture != "multiview":
        raise ValueError("spec describes a plain Unet")
    return build_network(spec, seed)


def build_standard_unet(spec: Optional[NetworkSpec] = None, seed: int = 0, **kw) -> SegmentationUnet:
    if spec is None:
        spec = NetworkSpec(architecture="unet", **kw)
    if spec.architecture != "unet":
        raise ValueError("spec describes a multi-view Unet")
    return build_network(spec, seed)


def forward(net: nn.Module, images: Tensor) -> Tensor:
    """Class probabilities ``(B, C, H, W)`` for a batch of images.

    Accepts ``(B, 1, H, W)``, ``(B, H, W)`` or a single ``(H, W)`` image.
    """
    x = torch.as_tensor(images)
    if x.dim() == 2:
        x = x[None, None]
    elif x.dim() == 3:
        x = x[:, None]
    param = next(net.parameters())
    return net(x.to(param.dtype))


def predict_mask(probs: Tensor) -> Tensor:
    """Argmax over classes; ties go to background (class 0)."""
    return probs.argmax(dim=1)


# --------------------------------------------------------------------------
# freezing

STRATEGIES: Dict[str, Set[str]] = {
    "none": set(),
    "shallow": {"M1.1", "M3"},
    "deep": {"M1.3", "M1.4"},
    "encoding": {"M1.1", "M1.2", "M1.3"},
    "decoding": {"M1.4", "M1.5", "M3"},
    "all": {"M1.1", "M1.2", "M1.3", "M1.4", "M1.5", "M2.1", "M2.2", "M3"},
}


def select_trainable(net: Union[SegmentationUnet, NetworkSpec], strategy: str) -> Set[str]:
    """Block names left trainable by a fine-tuning strategy."""
    key = str(strategy).lower()
    if key not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}; choose from {sorted(STRATEGIES)}")
    names = net.block_names
    return {n for n in STRATEGIES[key] if n in names}


def apply_strategy(net: SegmentationUnet, strategy: str) -> Set[str]:
    """Set ``requires_grad`` per block and mirror it in ``net.spec``."""
    selected = select_trainable(net, strategy)
    for spec in net.spec.blocks:
        flag = spec.name in selected
        spec.trainable = flag
        for p in net.block(spec.name).parameters():
            p.requires_grad_(flag)
    return selected
