"""Procedural stand-in corpus shaped like the two dermoscopy releases.

The images are drawn lesion-like blobs whose colour, size, border and dots
depend on the class (and, for D7P rows, on the sampled concept values), so
captions and classifiers have real signal to work with at desk scale.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .types import D7P_CLASSES, HAM_CLASSES, DiagnosisClass, load_taxonomy

DESK_D7P_COUNTS = {"nv": 20, "mel": 16, "bkl": 10, "bcc": 8, "df": 5, "vasc": 5}
DESK_HAM_COUNTS = {"nv": 20, "mel": 14, "bkl": 12, "bcc": 8, "akiec": 6, "vasc": 5, "df": 5}

_STYLE = {
    # colour, radius fraction range, border irregularity
    "nv": ((0.50, 0.34, 0.22), (0.20, 0.28), 0.05),
    "mel": ((0.25, 0.16, 0.12), (0.26, 0.36), 0.22),
    "bcc": ((0.82, 0.55, 0.57), (0.20, 0.30), 0.10),
    "bkl": ((0.68, 0.54, 0.36), (0.26, 0.34), 0.12),
    "df": ((0.62, 0.46, 0.38), (0.12, 0.18), 0.05),
    "vasc": ((0.68, 0.12, 0.26), (0.16, 0.24), 0.04),
    "akiec": ((0.80, 0.42, 0.36), (0.20, 0.30), 0.18),
}

_SITES = ["back", "trunk", "lower extremity", "upper extremity", "face", "abdomen", "chest"]

# Concept priors per class: each entry picks from (value, weight) lists.
_CONCEPT_PRIORS = {
    "mel": {
        "elevation": [("flat", 2), ("palpable", 2), ("nodular", 1)],
        "pigment_network": [("atypical", 3), ("typical", 1), ("absent", 1)],
        "streaks": [("irregular", 2), ("absent", 2)],
        "pigmentation": [("diffuse irregular", 3), ("localized irregular", 2), ("absent", 1)],
        "regression_structures": [("blue areas", 1), ("combinations", 1), ("absent", 2)],
        "dots_and_globules": [("irregular", 3), ("absent", 1)],
        "vascular_structures": [("absent", 3), ("linear irregular", 1), ("dotted", 1)],
    },
    "nv": {
        "elevation": [("flat", 3), ("palpable", 2)],
        "pigment_network": [("typical", 4), ("absent", 1)],
        "streaks": [("absent", 4), ("regular", 1)],
        "pigmentation": [("absent", 2), ("diffuse regular", 2), ("localized regular", 1)],
        "regression_structures": [("absent", 1)],
        "dots_and_globules": [("regular", 2), ("absent", 2)],
        "vascular_structures": [("absent", 4), ("comma", 1)],
    },
}
_DEFAULT_PRIOR = {
    "elevation": [("flat", 2), ("palpable", 2), ("nodular", 1)],
    "pigment_network": [("absent", 3), ("typical", 1)],
    "streaks": [("absent", 1)],
    "pigmentation": [("absent", 2), ("localized regular", 1)],
    "regression_structures": [("absent", 3), ("white areas", 1)],
    "dots_and_globules": [("absent", 2), ("regular", 1)],
    "vascular_structures": [("absent", 2), ("arborizing", 1), ("dotted", 1), ("hairpin", 1)],
}
_CLASS_VESSELS = {"bcc": "arborizing", "vasc": "dotted"}


def _choose(rng, options):
    values, weights = zip(*options)
    p = np.asarray(weights, dtype=float)
    return values[int(rng.choice(len(values), p=p / p.sum()))]


def sample_concepts(cls: str, rng, taxonomy=None) -> dict:
    taxonomy = taxonomy or load_taxonomy()
    prior = _CONCEPT_PRIORS.get(cls, _DEFAULT_PRIOR)
    out = {n: _choose(rng, prior.get(n, [("absent", 1)])) for n in taxonomy.names}
    if cls in _CLASS_VESSELS and rng.random() < 0.7:
        out["vascular_structures"] = _CLASS_VESSELS[cls]
    for name, value in out.items():
        if value not in taxonomy[name].values:
            out[name] = taxonomy[name].values[0]
    return out


def draw_lesion(cls: str, rng, size=64, concepts=None) -> np.ndarray:
    """HxWx3 uint8 image of one procedural lesion."""
    color, (r_lo, r_hi), irregular = _STYLE[cls]
    concepts = concepts or {}
    if "irregular" in concepts.get("pigmentation", ""):
        irregular = max(irregular, 0.18)
    skin = np.array([0.86, 0.68, 0.58]) + rng.normal(0, 0.03, 3)
    img = np.empty((size, size, 3))
    img[:] = skin
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    cy, cx = size / 2 + rng.normal(0, size * 0.05, 2)
    radius = rng.uniform(r_lo, r_hi) * size
    if concepts.get("elevation") == "nodular":
        radius *= 1.1
    angle = np.arctan2(yy - cy, xx - cx)
    phases = rng.uniform(0, 2 * np.pi, 3)
    wobble = 1 + irregular * sum(np.sin(k * angle + ph) / k for k, ph in zip((2, 3, 5), phases))
    dist = np.hypot(yy - cy, xx - cx) / (radius * wobble)
    lesion = dist < 1.0
    shade = np.clip(1.0 - 0.35 * dist, 0.6, 1.0)[..., None]
    base = np.asarray(color) + rng.normal(0, 0.03, 3)
    img[lesion] = (base[None, None, :] * shade)[lesion]
    if irregular > 0.1:
        blotch = rng.normal(0, 1, (size // 8, size // 8))
        blotch = np.kron(blotch, np.ones((8, 8)))[:size, :size]
        img[lesion] += (0.08 * blotch[..., None] * np.array([1.0, 0.9, 1.2]))[lesion]
    if cls == "df":
        img[dist < 0.35] = img[dist < 0.35] * 0.4 + 0.55
    if concepts.get("dots_and_globules", "absent") != "absent" or cls == "mel":
        n_dots = int(rng.integers(3, 9))
        for _ in range(n_dots):
            r = radius * np.sqrt(rng.uniform(0, 0.8))
            a = rng.uniform(0, 2 * np.pi)
            dy, dx = cy + r * np.sin(a), cx + r * np.cos(a)
            img[np.hypot(yy - dy, xx - dx) < rng.uniform(0.8, 1.8)] = 0.12
    if concepts.get("vascular_structures") in ("arborizing", "dotted", "linear irregular") or cls == "vasc":
        for _ in range(int(rng.integers(2, 5))):
            a = rng.uniform(0, 2 * np.pi)
            t = np.linspace(0, radius * 0.9, 40)
            py = np.clip((cy + t * np.sin(a) + rng.normal(0, 0.8, 40)).astype(int), 0, size - 1)
            px = np.clip((cx + t * np.cos(a) + rng.normal(0, 0.8, 40)).astype(int), 0, size - 1)
            img[py, px] = (0.75, 0.08, 0.12)
    img += rng.normal(0, 0.015, img.shape)
    return (np.clip(img, 0, 1) * 255).round().astype(np.uint8)


def write_fixture_corpus(root, seed=0, d7p_counts=None, ham_counts=None, size=64) -> dict:
    """Write metadata tables plus images for both datasets under ``root``; return their paths."""
    from PIL import Image

    root = Path(root)
    taxonomy = load_taxonomy()
    rng = np.random.default_rng(seed)
    d7p_counts = d7p_counts or DESK_D7P_COUNTS
    ham_counts = ham_counts or DESK_HAM_COUNTS

    d7p_dir = root / "d7p"
    (d7p_dir / "images").mkdir(parents=True, exist_ok=True)
    header = ["case_num", "diagnosis", *taxonomy.names, "location", "sex", "derm"]
    rows = []
    case = 0
    for cls in [c.value for c in D7P_CLASSES]:
        for _ in range(d7p_counts.get(cls, 0)):
            case += 1
            concepts = sample_concepts(cls, rng, taxonomy)
            rel = f"images/Fix{case:04d}.png"
            Image.fromarray(draw_lesion(cls, rng, size, concepts)).save(d7p_dir / rel)
            diagnosis = DiagnosisClass(cls).full_name if case % 3 else cls
            rows.append([case, diagnosis, *[concepts[n] for n in taxonomy.names], _SITES[case % len(_SITES)],
                         "female" if rng.random() < 0.5 else "male", rel])
    with open(d7p_dir / "meta.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)

    ham_dir = root / "ham"
    ham_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    n = 0
    for cls in [c.value for c in HAM_CLASSES]:
        for _ in range(ham_counts.get(cls, 0)):
            n += 1
            image_id = f"ISIC_F{n:06d}"
            Image.fromarray(draw_lesion(cls, rng, size)).save(ham_dir / f"{image_id}.jpg", quality=95)
            age = "" if n % 11 == 0 else str(int(rng.integers(20, 86)) // 5 * 5)
            sex = ["male", "female", "unknown"][n % 3 if n % 7 else 2]
            rows.append([f"HAM_F{n:06d}", image_id, cls, "histo", age, sex, _SITES[n % len(_SITES)]])
    with open(ham_dir / "HAM10000_metadata.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["lesion_id", "image_id", "dx", "dx_type", "age", "sex", "localization"])
        w.writerows(rows)
    return {
        "d7p_metadata": str(d7p_dir / "meta.csv"),
        "d7p_images": str(d7p_dir),
        "ham_metadata": str(ham_dir / "HAM10000_metadata.csv"),
        "ham_images": str(ham_dir),
    }
