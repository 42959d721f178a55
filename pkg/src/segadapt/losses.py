"""Segmentation losses, Dice score, blood volume and volume-stratified reports."""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Sequence, Tuple

import numpy as np
import torch
from torch import Tensor

__all__ = [
    "VoxelGeometry",
    "ContrastViewSet",
    "NonFiniteError",
    "image_loss",
    "segmentation_loss",
    "mixed_loss",
    "dice",
    "blood_volume",
    "VOLUME_BINS",
    "PatientResult",
    "EvalReport",
    "stratify_report",
]

# (lo, hi] in mL
VOLUME_BINS: Tuple[Tuple[float, float], ...] = ((0, 25), (25, 50), (50, 100), (100, 300))
REPORT_COLUMNS = ("patient_id", "dice", "annotated_ml", "predicted_ml", "bin")


class NonFiniteError(ValueError):
    """A loss input held NaN or infinity."""


@dataclass(frozen=True)
class VoxelGeometry:
    slice_thickness: float
    pixel_height: float
    pixel_width: float

    def __post_init__(self) -> None:
        for name in ("slice_thickness", "pixel_height", "pixel_width"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise ValueError(f"{name} must be positive, got {v!r}")

    @property
    def voxel_mm3(self) -> float:
        return self.slice_thickness * self.pixel_height * self.pixel_width


@dataclass
class ContrastViewSet:
    """Contrast-perturbed copies of one image (or batch) and their loss weights.

    ``views[0]`` is the unperturbed reference with weight 1.
    """

    views: List
    weights: List[float]
    distortions: List[float] = field(default_factory=list)

    def __post_init__(self) -> None:
        if len(self.views) != len(self.weights):
            raise ValueError(f"{len(self.views)} views but {len(self.weights)} weights")
        if not self.views:
            raise ValueError("a view set needs at least the reference view")
        if any(w < 0 for w in self.weights):
            raise ValueError("view weights must be nonnegative")

    def __len__(self) -> int:
        return len(self.views)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def image_loss(L, O) -> Tensor:
    """``-sum_x L(x) O(x) / (L(x) + O(x))`` over all entries, with 0/0 taken as 0.

    ``L`` is the binary annotation and ``O`` the predicted probability of the
    same class. The sum runs over every element, so a batch gives the sum of
    per-image losses.
    """
    L = _as_tensor(L)
    O = _as_tensor(O)
    if L.shape != O.shape:
        raise ValueError(f"shape mismatch: {tuple(L.shape)} vs {tuple(O.shape)}")
    if not (torch.isfinite(L).all() and torch.isfinite(O).all()):
        raise NonFiniteError("loss inputs must be finite")
    L = L.to(O.dtype)
    # the term vanishes wherever L == 0; masking on L (not L + O) keeps the
    # gradient finite when O underflows to a denormal
    fg = L > 0
    safe = torch.where(fg, L + O, torch.ones_like(O))
    terms = torch.where(fg, L * O / safe, torch.zeros_like(O))
    return -terms.sum()


def segmentation_loss(L, probs: Tensor, balance: bool = False) -> Tensor:
    """Apply :func:`image_loss` to every class channel of a softmax map.

    ``probs`` is ``(B, C, H, W)`` (or ``(C, H, W)``), ``L`` holds integer
    class labels of shape ``(B, H, W)`` (or ``(H, W)``). With two classes
    this is the foreground term plus the same term on the background
    channel, so false positives are penalised too.

    ``balance=True`` divides each (image, class) term by that class's pixel
    count in the image, so a small foreground weighs as much as the
    background.
    """
    L = _as_tensor(L)
    if probs.dim() == 3:
        probs, L = probs[None], L[None]
    if L.shape != probs.shape[:1] + probs.shape[2:]:
        raise ValueError(f"labels {tuple(L.shape)} do not match probabilities {tuple(probs.shape)}")
    total = probs.new_zeros(())
    for c in range(probs.shape[1]):
        Lc = (L == c).to(probs.dtype)
        if not balance:
            total = total + image_loss(Lc, probs[:, c])
            continue
        for b in range(probs.shape[0]):
            n = float(Lc[b].sum())
            if n > 0:
                total = total + image_loss(Lc[b], probs[b, c]) / n
    return total


def mixed_loss(
    views: ContrastViewSet,
    annotations,
    net: Callable[[Tensor], Tensor],
    channels: str = "both",
    balance: bool = False,
) -> Tensor:
    """Weighted sum of per-view losses, ``sum_i w_i * loss(L, net(I_i))``.

    ``channels="both"`` scores every softmax channel via
    :func:`segmentation_loss` (optionally class-balanced);
    ``"foreground"`` applies :func:`image_loss` to channel 1 only.
    """
    if channels not in ("both", "foreground"):
        raise ValueError(f"channels must be 'both' or 'foreground', not {channels!r}")
    total = None
    for w, img in zip(views.weights, views.views):
        probs = net(img)
        if channels == "both":
            term = segmentation_loss(annotations, probs, balance=balance)
        else:
            term = image_loss(annotations, probs.select(probs.dim() - 3, 1))
        total = w * term if total is None else total + w * term
    return total


def dice(L, P) -> float:
    """``2TP / (2TP + FN + FP)``; two empty masks score 1.0."""
    L = np.asarray(L)
    P = np.asarray(P)
    if L.shape != P.shape:
        raise ValueError(f"shape mismatch: {L.shape} vs {P.shape}")
    L = L.astype(bool)
    P = P.astype(bool)
    tp = int(np.count_nonzero(L & P))
    fn = int(np.count_nonzero(L & ~P))
    fp = int(np.count_nonzero(~L & P))
    denom = 2 * tp + fn + fp
    if denom == 0:
        return 1.0
    return 2.0 * tp / denom


def blood_volume(mask_stack, geom: VoxelGeometry) -> float:
    """Volume in mL of the foreground voxels of a binary mask."""
    m = np.asarray(mask_stack)
    if m.size and not np.isin(m, (0, 1)).all():
        raise ValueError("mask must be binary")
    n = int(np.count_nonzero(m))
    return n * geom.slice_thickness * geom.pixel_width * geom.pixel_height / 1000.0


# --------------------------------------------------------------------------
# reports


def bin_label(lo: float, hi: float) -> str:
    return f"({lo:g}, {hi:g}]"


def volume_bin(volume_ml: float) -> str:
    for lo, hi in VOLUME_BINS:
        if lo < volume_ml <= hi:
            return bin_label(lo, hi)
    return "other"


@dataclass
class PatientResult:
    patient_id: str
    dice: float
    annotated_ml: float
    predicted_ml: float

    @property
    def bin(self) -> str:
        return volume_bin(self.annotated_ml)


@dataclass
class EvalReport:
    patients: List[PatientResult]
    bins: dict  # label -> {"count", "mean_dice", "std_dice"}

    @property
    def all(self) -> dict:
        return self.bins["All"]

    def volume_pairs(self) -> List[Tuple[float, float]]:
        return [(p.annotated_ml, p.predicted_ml) for p in self.patients]

    def summary(self) -> dict:
        return {"bins": self.bins, "columns": list(REPORT_COLUMNS)}

    def write(self, out_dir, stem: str = "report") -> None:
        """Write ``<stem>.csv`` (per patient), ``<stem>.json`` (per bin) and
        ``<stem>_volumes.csv`` (annotated vs predicted)."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / f"{stem}.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(REPORT_COLUMNS)
            for p in self.patients:
                w.writerow([p.patient_id, repr(p.dice), repr(p.annotated_ml), repr(p.predicted_ml), p.bin])
        with open(out / f"{stem}.json", "w") as fh:
            json.dump(self.summary(), fh, indent=2)
            fh.write("\n")
        with open(out / f"{stem}_volumes.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["patient_id", "annotated_ml", "predicted_ml"])
            for p in self.patients:
                w.writerow([p.patient_id, repr(p.annotated_ml), repr(p.predicted_ml)])

    @classmethod
    def read_csv(cls, path) -> "EvalReport":
        rows = []
        with open(path, newline="") as fh:
            for r in csv.DictReader(fh):
                rows.append(
                    PatientResult(r["patient_id"], float(r["dice"]), float(r["annotated_ml"]), float(r["predicted_ml"]))
                )
        return stratify_report(rows)


def _agg(values: Sequence[float]) -> dict:
    if not values:
        return {"count": 0, "mean_dice": None, "std_dice": None}
    a = np.asarray(values, dtype=np.float64)
    return {"count": int(a.size), "mean_dice": float(a.mean()), "std_dice": float(a.std())}


def stratify_report(per_patient: Sequence) -> EvalReport:
    """Group patients by annotated volume into the fixed bins plus ``All``.

    Items are :class:`PatientResult` or ``(dice, annotated_ml, predicted_ml)``
    tuples (ids are then generated). Standard deviations are population
    (ddof=0) so single-patient bins report 0 instead of NaN.
    """
    patients = []
    for j, item in enumerate(per_patient):
        if not isinstance(item, PatientResult):
            d, a, p = item
            item = PatientResult(f"patient{j:03d}", float(d), float(a), float(p))
        patients.append(item)

    bins = {}
    for lo, hi in VOLUME_BINS:
        label = bin_label(lo, hi)
        bins[label] = _agg([p.dice for p in patients if p.bin == label])
    other = [p for p in patients if p.bin == "other"]
    if other:
        warnings.warn(
            f"{len(other)} patient(s) outside (0, 300] mL placed in 'other'", RuntimeWarning, stacklevel=2
        )
        bins["other"] = _agg([p.dice for p in other])
    bins["All"] = _agg([p.dice for p in patients])
    return EvalReport(patients=patients, bins=bins)
