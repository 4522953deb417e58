"""Synthetic datasets, manifests, splits, and physical-parameter labels.

Generated images are procedural textures with a distinct character per
modality (piecewise-constant phantoms for CT, smooth gradients for MR,
radial patterns for fundus), degraded by Gaussian blur plus noise whose
strength decreases linearly in the quality level. The level doubles as
the ground-truth label, giving a clean monotone signal for end-to-end
runs. 2D images are stored as single-slice volumes.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .dicom import DicomMeta
from .errors import (ContractError, DegenerateRangeError, UnusableSampleError)
from .salient import Volume
from .seeding import substream

SIGMA_MAX = 0.3          # noise std at quality level 0
KAPPA_MAX = 2.0          # Gaussian blur sigma (pixels) at quality level 0
DEFAULT_LEVELS = (0.0, 0.25, 0.5, 0.75, 1.0)

MANIFEST_COLUMNS = ("path", "label", "label_kind", "dim", "modality",
                    "region", "type", "split")

_MODALITY_PROFILES = {
    "CT": {"region": "chest", "types": ("lung-window", "soft-tissue-window")},
    "MR": {"region": "brain", "types": ("T1", "T2")},
    "fundus": {"region": "retina", "types": ("color-fundus",)},
}


@dataclass
class SampleRecord:
    """One manifest row."""

    path: str
    label: float
    label_kind: str   # "physical" or "expert"
    dim: str          # "2D" or "3D"
    modality: str
    region: str
    type: str
    split: str = ""

    def prompt_hints(self) -> dict:
        return {"modality": self.modality, "region": self.region,
                "type": self.type}


# -- raw volume files -----------------------------------------------------------
# <name>.raw holds little-endian float32 voxels, row-major (H, W, D);
# <name>.hdr is a sidecar text file with a single line "H W D".


def save_volume(path, voxels: np.ndarray) -> None:
    path = Path(path)
    voxels = np.asarray(voxels, dtype=np.float64)
    if voxels.ndim == 2:
        voxels = voxels[:, :, None]
    h, w, d = voxels.shape
    path.with_suffix(".hdr").write_text(f"{h} {w} {d}\n")
    path.write_bytes(voxels.astype("<f4").tobytes())


def load_volume(path) -> Volume:
    path = Path(path)
    header = path.with_suffix(".hdr").read_text().split()
    if len(header) != 3:
        raise ContractError(f"malformed volume header for {path}")
    h, w, d = (int(x) for x in header)
    raw = np.frombuffer(path.read_bytes(), dtype="<f4")
    if raw.size != h * w * d:
        raise ContractError(
            f"volume {path} has {raw.size} voxels, header says {h * w * d}")
    return Volume(raw.astype(np.float64).reshape(h, w, d))


# -- manifests --------------------------------------------------------------------


def write_manifest(path, records) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_COLUMNS)
        for rec in records:
            writer.writerow([rec.path, repr(rec.label), rec.label_kind, rec.dim,
                             rec.modality, rec.region, rec.type, rec.split])


def load_manifest(path):
    records = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != MANIFEST_COLUMNS:
            raise ContractError(f"unexpected manifest header in {path}")
        for row in reader:
            records.append(SampleRecord(
                path=row["path"], label=float(row["label"]),
                label_kind=row["label_kind"], dim=row["dim"],
                modality=row["modality"], region=row["region"],
                type=row["type"], split=row["split"]))
    return records


# -- procedural base images ---------------------------------------------------------


def generate_base(modality: str, size: int, rng: np.random.Generator) -> np.ndarray:
    """Pristine texture in [0, 1] with a modality-distinct structure."""
    if modality == "CT":
        return _base_ct(size, rng)
    if modality == "MR":
        return _base_mr(size, rng)
    if modality == "fundus":
        return _base_fundus(size, rng)
    raise ContractError(f"no synthetic profile for modality {modality!r}")


def _base_ct(size: int, rng) -> np.ndarray:
    img = np.full((size, size), 0.08)
    yy, xx = np.mgrid[0:size, 0:size]
    for _ in range(int(rng.integers(3, 6))):
        cy, cx = rng.uniform(0.2, 0.8, 2) * size
        ry, rx = rng.uniform(0.08, 0.3, 2) * size
        mask = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
        img[mask] = rng.uniform(0.3, 0.95)
    return img


def _base_mr(size: int, rng) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] / max(size - 1, 1)
    img = 0.25 * (rng.uniform(-1, 1) * yy + rng.uniform(-1, 1) * xx)
    for _ in range(3):
        cy, cx = rng.uniform(0.1, 0.9, 2)
        width = rng.uniform(0.15, 0.4)
        img += rng.uniform(0.3, 1.0) * np.exp(
            -((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * width ** 2))
    lo, hi = img.min(), img.max()
    return 0.05 + 0.9 * (img - lo) / (hi - lo)


def _base_fundus(size: int, rng) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    cy, cx = rng.uniform(0.4, 0.6, 2) * size
    r = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2) / (0.55 * size)
    disc = np.clip(1.0 - r ** 2, 0.0, 1.0)
    rings = 0.12 * np.sin(2 * np.pi * r * rng.uniform(4, 7))
    return np.clip(0.1 + 0.8 * disc + rings * disc, 0.0, 1.0)


def make_volume(modality: str, size: int, depth: int,
                rng: np.random.Generator) -> np.ndarray:
    """Stack of per-slice variations of one base pattern; every slice keeps
    content so trimming is a no-op on pristine synthetic volumes."""
    base = generate_base(modality, size, rng)
    z = np.arange(depth)
    profile = 0.55 + 0.45 * np.sin(np.pi * (z + 0.5) / depth)
    return base[:, :, None] * profile[None, None, :]


def apply_degradation(image: np.ndarray, level: float, rng: np.random.Generator,
                      sigma_max: float = SIGMA_MAX,
                      kappa_max: float = KAPPA_MAX) -> np.ndarray:
    """Blur-then-noise degradation; level 1 returns the input untouched."""
    if not 0.0 <= level <= 1.0:
        raise ContractError(f"quality level {level} outside [0, 1]")
    image = np.asarray(image, dtype=np.float64)
    if level == 1.0:
        return image.copy()
    kappa = kappa_max * (1.0 - level)
    sigma = sigma_max * (1.0 - level)
    out = image
    if kappa > 0:
        if out.ndim == 3:
            out = gaussian_filter(out, sigma=(kappa, kappa, 0))
        else:
            out = gaussian_filter(out, sigma=kappa)
    if sigma > 0:
        out = out + rng.normal(0.0, sigma, out.shape)
    return np.clip(out, 0.0, 1.0)


# -- dataset generation ----------------------------------------------------------------


def generate_synthetic(out_dir, count: int, modalities=("CT", "MR", "fundus"),
                       levels=DEFAULT_LEVELS, dim: str = "2D", size: int = 64,
                       depth: int = 21, seed: int = 0,
                       label_kind: str = "expert",
                       ratios=(0.8, 0.1, 0.1)) -> Path:
    """Write a degraded synthetic dataset plus its manifest; fully
    reproducible from the seed. levels=None produces a continuous ramp
    over [0, 1] (the physical-parameter pretraining shape)."""
    if count < 1:
        raise ContractError("count must be >= 1")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = []
    for i in range(count):
        rng = substream(seed, "data", i)
        modality = modalities[i % len(modalities)]
        profile = _MODALITY_PROFILES[modality]
        if levels is None:
            level = i / (count - 1) if count > 1 else 1.0
        else:
            level = float(levels[i % len(levels)])
        if dim == "3D":
            pristine = make_volume(modality, size, depth, rng)
        else:
            pristine = generate_base(modality, size, rng)
        degraded = apply_degradation(pristine, level, rng)
        name = f"img_{i:05d}.raw"
        save_volume(out_dir / name, degraded)
        types = profile["types"]
        records.append(SampleRecord(
            path=name, label=level, label_kind=label_kind, dim=dim,
            modality=modality, region=profile["region"],
            type=types[(i // len(modalities)) % len(types)]))
    records = split_dataset(records, ratios=ratios, seed=seed)
    manifest = out_dir / "manifest.csv"
    write_manifest(manifest, records)
    return manifest


# -- splits --------------------------------------------------------------------------


def _global_counts(n: int, ratios) -> list:
    counts = [int(np.floor(r * n)) for r in ratios]
    counts[0] += n - sum(counts)  # remainder goes to train
    return counts


def split_dataset(records, ratios=(0.8, 0.1, 0.1), seed: int = 0):
    """Assign train/val/test deterministically.

    Global counts follow floor-then-remainder-to-train. Assignment is
    stratified by label when labels are discrete (few distinct values),
    using largest-remainder quotas per stratum, then rebalanced so the
    global counts hold exactly.
    """
    n = len(records)
    if n < 3:
        raise ContractError(f"need at least 3 samples to split, got {n}")
    if abs(sum(ratios) - 1.0) > 1e-9 or len(ratios) != 3:
        raise ContractError("ratios must be three values summing to 1")
    split_names = ("train", "val", "test")
    targets = _global_counts(n, ratios)
    rng = substream(seed, "split")

    labels = [rec.label for rec in records]
    distinct = sorted(set(labels))
    if len(distinct) <= 10:
        strata = [[i for i, v in enumerate(labels) if v == lv] for lv in distinct]
    else:
        strata = [list(range(n))]

    assignment = [""] * n
    for stratum in strata:
        idx = list(stratum)
        rng.shuffle(idx)
        quotas = [r * len(idx) for r in ratios]
        base = [int(np.floor(q)) for q in quotas]
        leftover = len(idx) - sum(base)
        by_fraction = sorted(range(3), key=lambda j: (-(quotas[j] - base[j]), j))
        for j in by_fraction[:leftover]:
            base[j] += 1
        pos = 0
        for j, name in enumerate(split_names):
            for k in idx[pos:pos + base[j]]:
                assignment[k] = name
            pos += base[j]

    # Rebalance to the documented global counts.
    members = {name: [i for i, a in enumerate(assignment) if a == name]
               for name in split_names}
    for j, name in enumerate(split_names):
        while len(members[name]) > targets[j]:
            deficits = [m for m in split_names
                        if len(members[m]) < targets[split_names.index(m)]]
            take = int(rng.integers(len(members[name])))
            moved = members[name].pop(take)
            dest = deficits[0]
            members[dest].append(moved)
            assignment[moved] = dest

    out = []
    for i, rec in enumerate(records):
        out.append(SampleRecord(path=rec.path, label=rec.label,
                                label_kind=rec.label_kind, dim=rec.dim,
                                modality=rec.modality, region=rec.region,
                                type=rec.type, split=assignment[i]))
    return out


# -- physical-parameter labels -----------------------------------------------------------


def physical_label(meta: DicomMeta, param_min: float, param_max: float) -> float:
    """Min-max normalize the modality's acquisition parameter to [0, 1].

    CT uses tube exposure (mAs); everything else uses field strength
    (Tesla). Higher raw values map to higher labels.
    """
    if param_max <= param_min:
        raise DegenerateRangeError(
            f"parameter range [{param_min}, {param_max}] is empty")
    if meta.modality == "CT":
        value = meta.exposure_mAs
        name = "Exposure (mAs)"
    else:
        value = meta.field_strength_T
        name = "MagneticFieldStrength (T)"
    if value is None:
        raise UnusableSampleError(f"sample has no {name} tag")
    return float(np.clip((value - param_min) / (param_max - param_min), 0.0, 1.0))
