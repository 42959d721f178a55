"""Synthetic cohorts shared by the slower tests."""

from segadapt.data import SynthSpec

# a few small volumes for plumbing tests
TINY = SynthSpec(
    patient_count=4,
    slices=3,
    image_size=(16, 16),
    blob_radius_px=(1.5, 3.0),
    volume_ml=(3.0, 12.0),
    pixel_spacing_mm=(6.0, 6.0),
    seed=11,
    id_prefix="tiny",
)

# pre-training cohort: large bright blobs on a darker brain
SOURCE = SynthSpec(
    patient_count=6,
    slices=6,
    image_size=(32, 32),
    pixel_spacing_mm=(6.0, 6.0),
    blob_radius_px=(2.0, 4.0),
    volume_ml=(20.0, 250.0),
    contrast=0.4,
    brain_intensity=0.4,
    noise=0.02,
    seed=1,
    id_prefix="src",
)

# shifted cohort: brighter brain, dimmer and more scattered bleeds
TARGET = SynthSpec(
    patient_count=4,
    slices=6,
    image_size=(32, 32),
    pixel_spacing_mm=(6.0, 6.0),
    blob_radius_px=(1.5, 3.5),
    blob_count=(3, 6),
    volume_ml=(20.0, 250.0),
    contrast=0.25,
    brain_intensity=0.55,
    csf_intensity=0.3,
    noise=0.02,
    seed=2,
    id_prefix="tgt",
)
