"""Pre-training, freeze-strategy and adapter fine-tuning, evaluation and cross-validation."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from torch import nn

from .adapters import AdapterConfig, Method, attach_adapters, count_trainable
from .backbones import SegmentationUnet, apply_strategy, predict_mask
from .checkpoint import AdapterCheckpoint, Checkpoint
from .data import AUGMENTATIONS, SegVolume, adjust_contrast, augment, make_views
from .losses import EvalReport, NonFiniteError, PatientResult, blood_volume, dice, mixed_loss, stratify_report

__all__ = [
    "DivergenceError",
    "TrainConfig",
    "SweepConfig",
    "fit",
    "pretrain",
    "finetune_freeze",
    "finetune_adapter",
    "evaluate",
    "fold_split",
    "crossval",
    "CellResult",
    "rank_series",
]

log = logging.getLogger(__name__)

RANKS = (2, 4, 8, 16, 32, 64, 96, 128)


class DivergenceError(RuntimeError):
    """Training loss became non-finite."""


@dataclass
class TrainConfig:
    epochs: int = 60
    learning_rate: float = 1e-3
    batch_size: int = 2
    seed: int = 0
    optimizer: str = "adam"  # or "sgd" (momentum 0.9)
    phase: str = "pretrain"
    n_views: int = 3
    augment: Tuple[str, ...] = AUGMENTATIONS
    loss_channels: str = "both"
    loss_balance: bool = True
    max_steps: Optional[int] = None

    def __post_init__(self) -> None:
        self.augment = tuple(self.augment)
        if self.phase not in ("pretrain", "finetune"):
            raise ValueError(f"phase must be 'pretrain' or 'finetune', got {self.phase!r}")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")
        if self.epochs < 0 or self.batch_size < 1 or not self.learning_rate > 0:
            raise ValueError("epochs >= 0, batch_size >= 1 and learning_rate > 0 required")
        unknown = set(self.augment) - set(AUGMENTATIONS)
        if unknown:
            raise ValueError(f"unknown augmentation(s) {sorted(unknown)}")

    @classmethod
    def for_phase(cls, phase: str, **kw) -> "TrainConfig":
        """Defaults: 60 epochs to pre-train, 20 to fine-tune; lr 1e-3, batch 2."""
        epochs = 60 if phase == "pretrain" else 20
        kw.setdefault("epochs", epochs)
        return cls(phase=phase, **kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["augment"] = list(self.augment)
        return d


@dataclass
class SweepConfig:
    methods: List[str] = field(default_factory=lambda: [m.value for m in Method])
    ranks: List[int] = field(default_factory=lambda: list(RANKS))
    folds: int = 3
    strategies: List[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.methods = [Method.parse(m).value for m in self.methods]
        bad = [r for r in self.ranks if r not in RANKS]
        if bad:
            raise ValueError(f"ranks must come from {RANKS}, got {bad}")
        if self.folds < 2:
            raise ValueError("folds must be >= 2")

    def cells(self) -> List[Tuple[str, int, int]]:
        """``(mode, fold)`` grid: ``adapter:<method>:<rank>`` and ``freeze:<strategy>``."""
        modes = [f"freeze:{s}" for s in self.strategies]
        modes += [f"adapter:{m}:{r}" for m in self.methods for r in self.ranks]
        return [(mode, f) for mode in modes for f in range(self.folds)]


# --------------------------------------------------------------------------
# core loop


def _slices(volumes: Sequence[SegVolume]) -> Tuple[np.ndarray, np.ndarray]:
    imgs = np.concatenate([v.image for v in volumes], axis=0)
    masks = np.concatenate([v.mask for v in volumes], axis=0)
    return imgs, masks


def fit(
    net: nn.Module,
    volumes: Sequence[SegVolume],
    cfg: TrainConfig,
    on_epoch: Optional[Callable[[int, float, float], None]] = None,
    on_step: Optional[Callable[[int, float], None]] = None,
) -> List[float]:
    """Train the parameters of ``net`` that require grad; returns mean loss per epoch.

    Each epoch re-augments every volume (seeded by ``(seed, epoch, j)``),
    shuffles all slices and steps once per batch on the mixed loss.
    """
    if not volumes:
        raise ValueError("empty dataset")
    params = [p for p in net.parameters() if p.requires_grad]
    if not params or cfg.epochs == 0 or cfg.max_steps == 0:
        return []
    if cfg.optimizer == "adam":
        opt = torch.optim.Adam(params, lr=cfg.learning_rate, betas=(0.9, 0.999))
    else:
        opt = torch.optim.SGD(params, lr=cfg.learning_rate, momentum=0.9)
    dtype = params[0].dtype
    history = []
    step = 0
    net.train()
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        if cfg.augment:
            vols = [augment(v, cfg.augment, seed=_seed(cfg.seed, epoch, j)) for j, v in enumerate(volumes)]
        else:
            vols = list(volumes)
        imgs, masks = _slices(vols)
        order = np.random.default_rng(_seed(cfg.seed, epoch, 10**6)).permutation(len(imgs))
        losses = []
        for b0 in range(0, len(order), cfg.batch_size):
            idx = order[b0 : b0 + cfg.batch_size]
            x = torch.from_numpy(imgs[idx][:, None]).to(dtype)
            y = torch.from_numpy(masks[idx].astype(np.int64))
            views = make_views(x, cfg.n_views, seed=_seed(cfg.seed, epoch, step))
            try:
                loss = mixed_loss(views, y, net, channels=cfg.loss_channels, balance=cfg.loss_balance)
            except NonFiniteError:
                raise DivergenceError(f"non-finite network output at epoch {epoch}, step {step}") from None
            value = float(loss.detach())
            if not math.isfinite(value):
                raise DivergenceError(f"non-finite loss {value} at epoch {epoch}, step {step}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            losses.append(value)
            step += 1
            if on_step is not None:
                on_step(step, value)
            if cfg.max_steps is not None and step >= cfg.max_steps:
                break
        mean = float(np.mean(losses))
        history.append(mean)
        if on_epoch is not None:
            on_epoch(epoch, mean, time.perf_counter() - t0)
        log.debug("epoch %d loss %.6f", epoch, mean)
        if cfg.max_steps is not None and step >= cfg.max_steps:
            break
    net.eval()
    return history


def _seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def pretrain(net: SegmentationUnet, volumes: Sequence[SegVolume], cfg: TrainConfig, **kw) -> Checkpoint:
    """Train every parameter of ``net`` and return its checkpoint."""
    if cfg.phase != "pretrain":
        raise ValueError("pretrain needs a config with phase='pretrain'")
    for p in net.parameters():
        p.requires_grad_(True)
    apply_strategy(net, "all")
    history = fit(net, volumes, cfg, **kw)
    return Checkpoint.from_network(net, phase="pretrain", history=history, train=cfg.to_dict())


def finetune_freeze(
    base: Checkpoint,
    volumes: Sequence[SegVolume],
    strategy: str,
    cfg: TrainConfig,
    **kw,
) -> Checkpoint:
    """Fine-tune only the blocks selected by ``strategy``; the rest stay bit-identical."""
    net = base.build()
    selected = apply_strategy(net, strategy)
    history = fit(net, volumes, cfg, **kw)
    return Checkpoint.from_network(
        net, phase="finetune", mode=f"freeze:{strategy}", trainable=sorted(selected), history=history, train=cfg.to_dict()
    )


def finetune_adapter(
    base: Checkpoint,
    volumes: Sequence[SegVolume],
    method,
    rank: int,
    cfg: TrainConfig,
    alpha: Optional[float] = None,
    **kw,
) -> AdapterCheckpoint:
    """Attach adapters to every convolution of ``base`` and train only those."""
    config = AdapterConfig(Method.parse(method), rank, alpha)
    net = base.build()
    attach_adapters(net, config, seed=cfg.seed)
    history = fit(net, volumes, cfg, **kw)
    return AdapterCheckpoint.from_network(
        net, config, base, seed=cfg.seed, history=history, trainable=count_trainable(net), train=cfg.to_dict()
    )


# --------------------------------------------------------------------------
# evaluation


@torch.no_grad()
def predict_volume(net: nn.Module, image: np.ndarray, batch: int = 8) -> np.ndarray:
    net.eval()
    dtype = next(net.parameters()).dtype
    out = []
    for s in range(0, len(image), batch):
        x = torch.from_numpy(np.ascontiguousarray(image[s : s + batch])[:, None]).to(dtype)
        out.append(predict_mask(net(x)).numpy().astype(np.uint8))
    return np.concatenate(out, axis=0)


def evaluate(
    net: nn.Module,
    volumes: Sequence[SegVolume],
    contrast_seed: Optional[int] = 0,
    gamma_range: Tuple[float, float] = (0.7, 1.4),
) -> EvalReport:
    """Per-patient volume Dice and blood volumes, stratified by annotated volume.

    Test images get only a seeded contrast adjustment; pass
    ``contrast_seed=None`` to skip it.
    """
    results = []
    for j, v in enumerate(volumes):
        image = v.image
        if contrast_seed is not None:
            gamma = np.random.default_rng(_seed(contrast_seed, j)).uniform(*gamma_range)
            image = adjust_contrast(image, gamma)
        pred = predict_volume(net, image)
        results.append(
            PatientResult(v.patient_id, dice(v.mask, pred), blood_volume(v.mask, v.geom), blood_volume(pred, v.geom))
        )
    return stratify_report(results)


# --------------------------------------------------------------------------
# cross-validation


def fold_split(patient_ids: Sequence[str], folds: int = 3, seed: int = 0) -> Dict[str, int]:
    """Seeded round-robin: shuffle ids, then assign ``position % folds``."""
    ids = list(patient_ids)
    if len(ids) < folds:
        raise ValueError(f"need at least {folds} patients for {folds} folds, got {len(ids)}")
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate patient ids")
    order = np.random.default_rng(seed).permutation(len(ids))
    return {ids[k]: pos % folds for pos, k in enumerate(order)}


@dataclass
class CellResult:
    mode: str
    fold: int
    patients: List[PatientResult]

    @property
    def key(self) -> str:
        return f"{self.mode.replace(':', '_')}_fold{self.fold}"

    def to_dict(self) -> dict:
        return {"mode": self.mode, "fold": self.fold, "patients": [asdict(p) for p in self.patients]}

    @classmethod
    def from_dict(cls, d: dict) -> "CellResult":
        return cls(d["mode"], d["fold"], [PatientResult(**p) for p in d["patients"]])


def run_cell(
    mode: str,
    fold: int,
    volumes: Sequence[SegVolume],
    split: Dict[str, int],
    base: Checkpoint,
    cfg: TrainConfig,
) -> CellResult:
    """Fine-tune on every fold but ``fold`` and evaluate on ``fold``."""
    train = [v for v in volumes if split[v.patient_id] != fold]
    test = [v for v in volumes if split[v.patient_id] == fold]
    kind, *rest = mode.split(":")
    if kind == "freeze":
        net = finetune_freeze(base, train, rest[0], cfg).build()
    elif kind == "adapter":
        ack = finetune_adapter(base, train, rest[0], int(rest[1]), cfg)
        net = ack.attach(base)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    report = evaluate(net, test, contrast_seed=_seed(cfg.seed, fold))
    return CellResult(mode, fold, report.patients)


def crossval(
    volumes: Sequence[SegVolume],
    protocol: SweepConfig,
    base: Checkpoint,
    cfg: TrainConfig,
    split_seed: int = 0,
    done: Optional[Dict[Tuple[str, int], CellResult]] = None,
    on_cell: Optional[Callable[[CellResult], None]] = None,
) -> Dict[str, EvalReport]:
    """Run every ``(mode, fold)`` cell and pool each mode's folds into one report.

    ``done`` supplies already-finished cells (resume); ``on_cell`` is
    called as each new cell completes.
    """
    split = fold_split([v.patient_id for v in volumes], protocol.folds, split_seed)
    results: Dict[Tuple[str, int], CellResult] = dict(done or {})
    for mode, fold in protocol.cells():
        if (mode, fold) in results:
            continue
        cell = run_cell(mode, fold, volumes, split, base, cfg)
        results[(mode, fold)] = cell
        if on_cell is not None:
            on_cell(cell)
    return pool_cells(results.values())


def pool_cells(cells) -> Dict[str, EvalReport]:
    by_mode: Dict[str, List[PatientResult]] = {}
    for cell in sorted(cells, key=lambda c: (c.mode, c.fold)):
        by_mode.setdefault(cell.mode, []).extend(cell.patients)
    return {mode: stratify_report(sorted(ps, key=lambda p: p.patient_id)) for mode, ps in by_mode.items()}


def rank_series(reports: Dict[str, EvalReport]) -> List[dict]:
    """Rank-vs-Dice rows ``{method, rank, alpha, mean_dice, std_dice, count}`` for adapter modes."""
    rows = []
    for mode, rep in reports.items():
        kind, *rest = mode.split(":")
        if kind != "adapter":
            continue
        rank = int(rest[1])
        rows.append(
            {
                "method": rest[0],
                "rank": rank,
                "alpha": 2.0 * rank,
                "mean_dice": rep.all["mean_dice"],
                "std_dice": rep.all["std_dice"],
                "count": rep.all["count"],
            }
        )
    rows.sort(key=lambda r: (r["method"], r["rank"]))
    return rows
