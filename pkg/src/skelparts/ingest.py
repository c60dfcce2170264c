"""Ensemble loading, validation, and reference-instance selection.

File layout per instance ``i`` inside the ensemble directory:
  ``i.rgb.png``       8-bit RGB image
  ``i.mask.png``      8-bit mask, values > 127 are foreground
  ``i.clusters.png``  8-bit label image (0 = background)
  ``i.feat.bin``      magic "HLFM", u32 h, u32 w, u32 d, then h*w*d
                      little-endian float32, row-major

``config.json`` mirrors the EnsembleConfig fields; unknown keys are rejected.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

__all__ = [
    "EnsembleConfig", "InstanceRecord", "IngestError",
    "load_config", "load_ensemble", "write_ensemble", "select_reference",
    "read_feature_map", "write_feature_map",
]

FEAT_MAGIC = b"HLFM"


class IngestError(ValueError):
    """Raised for malformed ensemble files or config values."""


def _default_weights():
    return {"sil": 1.0, "part": 0.5, "sem": 0.5, "rot": 0.1,
            "sym": 0.1, "lap": 0.05, "norm": 0.05}


def _default_freqs():
    return [1.0, 2.0, 4.0, 8.0, 16.0, 32.0]


def _default_schedule():
    return [["camera", 500, 1e-2], ["shared", 1000, 5e-3],
            ["instance", 500, 2e-3]]


@dataclass
class EnsembleConfig:
    n_instances: int = 1
    reference_index: int | None = None
    image_size: tuple = (128, 128)
    alpha_sem: float = 0.5
    loss_weights: dict = field(default_factory=_default_weights)
    pe_frequencies: list = field(default_factory=_default_freqs)
    stage_schedule: list = field(default_factory=_default_schedule)
    # calibration knobs
    sym_lambda: float = 1.0
    sym_tau: float = 0.5
    mlp_width: int = 64
    shared_depth: int = 4
    icosphere_level: int = 3
    feat_mlp_width: int = 64
    render_size: int = 128
    sigma: float | None = None        # None -> 1 / render_size
    zoom_factor: int = 4
    sem_pixels: int = 1024
    sem_points: int = 128
    em_period: int = 50
    em_inner_steps: int = 100
    camera_azimuths: int = 12
    camera_elevations: int = 3
    sym_rest_joints: bool = True      # L_sym on rest (vs posed) joints
    weak_perspective: bool = False
    focal: float = 2.0
    seed: int = 0

    def __post_init__(self):
        if self.n_instances < 1:
            raise IngestError("n_instances must be >= 1")
        if self.reference_index is not None and \
                not (0 <= self.reference_index < self.n_instances):
            raise IngestError("reference_index out of range")
        freqs = list(self.pe_frequencies)
        if any(f <= 0 for f in freqs) or any(
                b <= a for a, b in zip(freqs, freqs[1:])):
            raise IngestError("pe_frequencies must be positive and strictly "
                              "increasing")
        if any(w < 0 for w in self.loss_weights.values()):
            raise IngestError("loss weights must be non-negative")
        if self.alpha_sem < 0:
            raise IngestError("alpha_sem must be non-negative")
        self.image_size = tuple(int(v) for v in self.image_size)

    @property
    def mlp_layers(self):
        return len(self.pe_frequencies) - 1

    @property
    def render_sigma(self):
        return self.sigma if self.sigma is not None else 1.0 / self.render_size

    @classmethod
    def from_json(cls, path):
        with open(path) as fh:
            data = json.load(fh)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise IngestError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    def to_json(self, path):
        data = dataclasses.asdict(self)
        data["image_size"] = list(self.image_size)
        with open(path, "w") as fh:
            json.dump(data, fh, indent=2, sort_keys=True)


def load_config(path) -> EnsembleConfig:
    return EnsembleConfig.from_json(path)


@dataclass(frozen=True)
class InstanceRecord:
    """One image of the ensemble with its pseudo-annotations."""
    index: int
    rgb: np.ndarray          # (h, w, 3) float in [0, 1]
    pseudo_mask: np.ndarray  # (h, w) bool
    feature_map: np.ndarray  # (h, w, d) float, unit rows at foreground
    part_clusters: np.ndarray  # (h, w) int, 0 = background

    def validate(self):
        h, w = self.pseudo_mask.shape
        if self.rgb.shape[:2] != (h, w) or self.feature_map.shape[:2] != (h, w) \
                or self.part_clusters.shape != (h, w):
            raise IngestError(f"instance {self.index}: grid shapes disagree")
        if not np.isfinite(self.feature_map).all():
            bad = np.argwhere(~np.isfinite(self.feature_map).all(axis=-1))[0]
            raise IngestError(f"instance {self.index}: non-finite feature at "
                              f"pixel ({bad[0]}, {bad[1]})")
        if (self.part_clusters[~self.pseudo_mask] != 0).any():
            raise IngestError(f"instance {self.index}: part labels outside "
                              "the pseudo mask")


def read_feature_map(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != FEAT_MAGIC:
            raise IngestError(f"{path}: bad feature file magic {magic!r}")
        h, w, d = struct.unpack("<III", fh.read(12))
        data = np.frombuffer(fh.read(h * w * d * 4), dtype="<f4")
        if data.size != h * w * d:
            raise IngestError(f"{path}: truncated feature data")
    return data.reshape(h, w, d).astype(np.float64)


def write_feature_map(path, feat):
    feat = np.asarray(feat)
    h, w, d = feat.shape
    with open(path, "wb") as fh:
        fh.write(FEAT_MAGIC)
        fh.write(struct.pack("<III", h, w, d))
        fh.write(feat.astype("<f4").tobytes())


def _upsample_nearest(grid, h, w):
    """Nearest-neighbor upsampling of a (gh, gw, ...) grid to (h, w, ...)."""
    gh, gw = grid.shape[:2]
    rows = np.minimum((np.arange(h) * gh) // h, gh - 1)
    cols = np.minimum((np.arange(w) * gw) // w, gw - 1)
    return grid[rows][:, cols]


def _normalize_features(feat, mask):
    norms = np.linalg.norm(feat, axis=-1, keepdims=True)
    safe = np.where(norms > 1e-12, norms, 1.0)
    out = feat / safe
    out[~mask] = feat[~mask]
    return out


def load_ensemble(dir_path, config: EnsembleConfig):
    """Load and validate ``config.n_instances`` instance records."""
    dir_path = Path(dir_path)
    records = []
    for i in range(config.n_instances):
        paths = {kind: dir_path / f"{i}.{kind}" for kind in
                 ("rgb.png", "mask.png", "clusters.png", "feat.bin")}
        for kind, p in paths.items():
            if not p.exists():
                raise IngestError(f"instance {i}: missing file {p}")
        rgb = np.asarray(Image.open(paths["rgb.png"]).convert("RGB"),
                         dtype=np.float64) / 255.0
        mask = np.asarray(Image.open(paths["mask.png"]).convert("L")) > 127
        clusters = np.asarray(Image.open(paths["clusters.png"]).convert("L"),
                              dtype=np.int64)
        feat = read_feature_map(paths["feat.bin"])
        h, w = mask.shape
        if rgb.shape[:2] != (h, w) or clusters.shape != (h, w):
            raise IngestError(f"instance {i}: image dimensions disagree with "
                              f"mask {mask.shape}")
        if feat.shape[:2] != (h, w):
            feat = _upsample_nearest(feat, h, w)
        clusters = np.where(mask, clusters, 0)
        rec = InstanceRecord(index=i, rgb=rgb, pseudo_mask=mask,
                             feature_map=_normalize_features(feat, mask),
                             part_clusters=clusters)
        rec.validate()
        records.append(rec)
    return records


def write_ensemble(dir_path, records):
    """Inverse of load_ensemble for valid records (round-trip safe)."""
    dir_path = Path(dir_path)
    dir_path.mkdir(parents=True, exist_ok=True)
    for rec in records:
        i = rec.index
        Image.fromarray((np.clip(rec.rgb, 0, 1) * 255).round().astype(np.uint8)
                        ).save(dir_path / f"{i}.rgb.png")
        Image.fromarray(np.where(rec.pseudo_mask, 255, 0).astype(np.uint8)
                        ).save(dir_path / f"{i}.mask.png")
        Image.fromarray(rec.part_clusters.astype(np.uint8)
                        ).save(dir_path / f"{i}.clusters.png")
        write_feature_map(dir_path / f"{i}.feat.bin", rec.feature_map)


def select_reference(records, config: EnsembleConfig) -> int:
    """Pick the instance showing the most distinct part clusters.

    Ties break by larger foreground area, then lower index. An explicit
    ``config.reference_index`` wins outright.
    """
    if not records:
        raise IngestError("select_reference: empty ensemble")
    if config.reference_index is not None:
        return config.reference_index
    best = None
    for i, rec in enumerate(records):
        labels = np.unique(rec.part_clusters)
        n_parts = int((labels != 0).sum())
        area = int(rec.pseudo_mask.sum())
        key = (n_parts, area, -i)
        if best is None or key > best[0]:
            best = (key, i)
    return best[1]
