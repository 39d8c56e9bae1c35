"""Manifests, spot rectification, record partitions and the synthetic lot generator."""
from .manifest import (
    DatasetManifest, ImageRecord, ManifestError, SpotAnnotation, parse_manifest, write_manifest,
)
from .patches import PatchSet, extract_patches
from .rectify import DegenerateQuad, Patch, load_image, rectify_crop
from .splits import Split, by_angle, leave_one_angle_out, partition_chronological, take_days
from .synth import SynthSpec, SynthStyle, benchmark_spec, domain_style, synth_generate

__all__ = [
    "DatasetManifest", "ImageRecord", "ManifestError", "SpotAnnotation", "parse_manifest",
    "write_manifest", "PatchSet", "extract_patches", "DegenerateQuad", "Patch", "load_image",
    "rectify_crop", "Split", "by_angle", "leave_one_angle_out", "partition_chronological",
    "take_days", "SynthSpec", "SynthStyle", "benchmark_spec", "domain_style", "synth_generate",
]
