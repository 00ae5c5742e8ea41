"""Synthetic layered-motion data, augmentation, mixtures and splits."""
from .augment import AugmentPolicy, augment, crop, erase, vflip
from .generator import (
    FlowSample,
    Layer,
    Motion,
    Scene,
    SceneSpec,
    consistent_mask,
    generate_sample,
    render_scene,
    sample_scene,
)
from .mixture import (
    FINETUNE_MIX,
    SOURCES,
    DatasetMixture,
    draw,
    manifest_rows,
    read_manifest,
    regenerate,
    sample_mixture,
    write_manifest,
)
from .splits import (
    IN_DISTRIBUTION,
    LARGE_MOTION,
    MAGNITUDE_EDGES,
    OUT_OF_DISTRIBUTION,
    SMALL_MOTION,
    build_splits,
    motion_histogram,
    overlap_coefficient,
)

__all__ = [
    "AugmentPolicy", "augment", "crop", "erase", "vflip",
    "FlowSample", "Layer", "Motion", "Scene", "SceneSpec", "consistent_mask",
    "generate_sample", "render_scene", "sample_scene",
    "FINETUNE_MIX", "SOURCES", "DatasetMixture", "draw", "manifest_rows",
    "read_manifest", "regenerate", "sample_mixture", "write_manifest",
    "IN_DISTRIBUTION", "LARGE_MOTION", "MAGNITUDE_EDGES", "OUT_OF_DISTRIBUTION",
    "SMALL_MOTION", "build_splits", "motion_histogram", "overlap_coefficient",
]
