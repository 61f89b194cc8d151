"""Procedural paired-domain face dataset with ground-truth factors."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
from PIL import Image

from . import _kernels
from .core import DOMAINS, RESOLUTIONS, ImageBatch

SUPERSAMPLE = 4
NIR_MIX = (0.8, 0.15, 0.05)
NIR_GAMMA = 0.8
TRAIN_FRACTION = 0.8

MANIFEST_COLUMNS = ("path", "subject", "domain", "pose", "illum", "expr", "bg", "split")
SPLITS = ("train", "gallery", "probe", "heldout", "synthetic")

IDENTITY_FACTORS = ("face_ratio", "eye_spacing", "eye_size", "nose_length",
                    "mouth_width", "brow_angle", "jaw_curve", "skin_tone")


@dataclass(frozen=True)
class SubjectSpec:
    subject_id: int
    identity_factors: tuple

    def __post_init__(self):
        if len(self.identity_factors) != len(IDENTITY_FACTORS):
            raise ValueError(f"need {len(IDENTITY_FACTORS)} identity factors")
        for name, v in zip(IDENTITY_FACTORS, self.identity_factors):
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"identity factor {name}={v} outside [0, 1]")

    @classmethod
    def from_seed(cls, seed: int, subject_id: int) -> "SubjectSpec":
        rng = np.random.default_rng([seed, subject_id, 0x1D])
        return cls(subject_id, tuple(float(v) for v in rng.uniform(0.0, 1.0, len(IDENTITY_FACTORS))))


@dataclass(frozen=True)
class AttributeSpec:
    pose: float = 0.0
    illum: float = 1.0
    expr: float = 0.0
    bg: float = 0.5

    def __post_init__(self):
        checks = (("pose", self.pose, -30.0, 30.0), ("illum", self.illum, 0.4, 1.0),
                  ("expr", self.expr, -1.0, 1.0), ("bg", self.bg, 0.0, 1.0))
        for name, v, lo, hi in checks:
            if not lo <= v <= hi:
                raise ValueError(f"attribute {name}={v} outside [{lo}, {hi}]")

    @classmethod
    def from_seed(cls, seed: int, subject_id: int, index: int) -> "AttributeSpec":
        rng = np.random.default_rng([seed, subject_id, index, 0xA7])
        pose, illum, expr, bg = rng.uniform((-30.0, 0.4, -1.0, 0.0), (30.0, 1.0, 1.0, 1.0))
        return cls(round(float(pose), 4), round(float(illum), 4), round(float(expr), 4), round(float(bg), 4))


# --------------------------------------------------------------------------
# scene construction


def _lerp(a, b, t):
    return tuple(x + (y - x) * t for x, y in zip(a, b))


def background_rgb(attr: AttributeSpec) -> tuple:
    return _lerp((0.10, 0.20, 0.42), (0.80, 0.80, 0.66), attr.bg)


def _ellipse(cx, cy, a, b, angle=0.0):
    return [0.0, cx, cy, a, b, math.cos(angle), math.sin(angle), 0.0, 0.0]


def _stroke(cx, cy, half_width, curvature, half_thickness, angle=0.0):
    return [1.0, cx, cy, half_width, 0.0, math.cos(angle), math.sin(angle), curvature, half_thickness]


def face_scene(subject: SubjectSpec, attr: AttributeSpec):
    """Primitive and colour arrays for one face, back to front."""
    ratio, spacing, eye_size, nose_len, mouth_w, brow, jaw, tone = subject.identity_factors
    yaw = math.radians(attr.pose)
    shift = 0.32 * math.sin(yaw)  # features slide toward the turned side
    squeeze = 0.85 + 0.15 * math.cos(yaw)
    lit = attr.illum

    ry = 0.66
    rx = ry * (0.62 + 0.22 * ratio) * squeeze
    skin = _lerp((0.96, 0.80, 0.68), (0.50, 0.34, 0.24), tone)
    shade = tuple(0.85 * c for c in skin)
    hair = (0.16, 0.10, 0.07)

    prims, colors = [], []

    def add(p, c, lighting=True):
        prims.append(p)
        colors.append(tuple(min(1.0, lit * v) for v in c) if lighting else c)

    add(_ellipse(0.0, -0.22, rx * 1.06, 0.58), hair)  # hair cap
    add(_ellipse(0.15 * shift, 0.05, rx, ry), skin)  # cranium
    add(_ellipse(0.15 * shift, 0.18, rx * (0.70 + 0.25 * jaw), ry * 0.80), skin)  # jaw
    ex = (0.16 + 0.14 * spacing) * squeeze
    eye_a, eye_b = 0.06 + 0.05 * eye_size, 0.035 + 0.025 * eye_size
    brow_tilt = math.radians(-25.0 + 50.0 * brow)
    for side in (-1.0, 1.0):
        cx = shift + side * ex
        add(_ellipse(cx, -0.08, eye_a, eye_b), (0.95, 0.95, 0.93))
        add(_ellipse(cx + 0.3 * shift * eye_a, -0.08, eye_b * 0.85, eye_b * 0.85), (0.12, 0.20, 0.28))
        add(_ellipse(cx, -0.22, eye_a * 1.3, 0.018, side * brow_tilt), hair)
    nl = 0.10 + 0.12 * nose_len
    add(_ellipse(shift * 1.15, 0.02 + nl / 2, 0.035, nl / 2), shade)
    mw = (0.12 + 0.12 * mouth_w) * squeeze
    add(_stroke(shift, 0.34, mw, -1.6 * attr.expr, 0.024), (0.70, 0.22, 0.24))
    return np.array(prims, dtype=np.float64), np.array(colors, dtype=np.float64)


def to_nir(rgb01: np.ndarray) -> np.ndarray:
    """Weighted channel mix plus gamma, replicated to three channels."""
    lum = rgb01 @ np.asarray(NIR_MIX)
    lum = np.clip(lum, 0.0, 1.0) ** NIR_GAMMA
    return np.repeat(lum[..., None], 3, axis=-1)


def render_rgb01(subject: SubjectSpec, attr: AttributeSpec, domain: str, resolution: int) -> np.ndarray:
    """H x W x 3 float image in [0, 1]."""
    if resolution not in RESOLUTIONS:
        raise ValueError(f"resolution must be one of {RESOLUTIONS}")
    if domain not in DOMAINS:
        raise ValueError(f"unknown domain {domain!r}")
    prims, colors = face_scene(subject, attr)
    img = _kernels.rasterize(prims, colors, np.asarray(background_rgb(attr)), resolution, SUPERSAMPLE)
    return to_nir(img) if domain == "N" else img


def render_face(subject: SubjectSpec, attr: AttributeSpec, domain: str, resolution: int) -> ImageBatch:
    img = render_rgb01(subject, attr, domain, resolution)
    data = torch.from_numpy(np.ascontiguousarray(img.transpose(2, 0, 1)) * 2.0 - 1.0)[None].float()
    return ImageBatch(data.clamp(-1.0, 1.0), domain)


# --------------------------------------------------------------------------
# file I/O


def to_uint8(img: np.ndarray) -> np.ndarray:
    """[-1, 1] (C x H x W or H x W x C) -> 8-bit, linear mapping."""
    return np.clip(np.rint((np.asarray(img, dtype=np.float64) + 1.0) * 127.5), 0, 255).astype(np.uint8)


def from_uint8(arr: np.ndarray) -> np.ndarray:
    return arr.astype(np.float32) / np.float32(127.5) - np.float32(1.0)


def write_png(path, chw: np.ndarray):
    hwc = to_uint8(np.asarray(chw).transpose(1, 2, 0))
    Image.fromarray(hwc, mode="RGB").save(path, format="PNG", optimize=False, compress_level=6)


def read_png(path) -> np.ndarray:
    """Decode an 8-bit RGB PNG to a 3 x H x W float32 array in [-1, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"))
    return from_uint8(arr).transpose(2, 0, 1).copy()


# --------------------------------------------------------------------------
# manifest


@dataclass
class ManifestRow:
    path: str
    subject: int
    domain: str
    pose: float
    illum: float
    expr: float
    bg: float
    split: str
    pair_id: int | None = None

    @property
    def attr_key(self):
        return (self.pose, self.illum, self.expr, self.bg)


class Manifest:
    def __init__(self, rows: Sequence[ManifestRow], root=None):
        self.rows = list(rows)
        self.root = Path(root) if root is not None else None

    def __len__(self):
        return len(self.rows)

    def __iter__(self):
        return iter(self.rows)

    def split(self, *names: str) -> "Manifest":
        return Manifest([r for r in self.rows if r.split in names], self.root)

    def subjects(self, split: str | None = None) -> list[int]:
        return sorted({r.subject for r in self.rows if split is None or r.split == split})

    def resolve(self, row: ManifestRow) -> Path:
        return (self.root / row.path) if self.root is not None else Path(row.path)

    @property
    def has_pairs(self) -> bool:
        return any(r.pair_id is not None for r in self.rows)

    def write(self, path):
        path = Path(path)
        cols = MANIFEST_COLUMNS + (("pair_id",) if self.has_pairs else ())
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, delimiter="\t", lineterminator="\n")
            w.writerow(cols)
            for r in self.rows:
                vals = [r.path, r.subject, r.domain, f"{r.pose:.4f}", f"{r.illum:.4f}",
                        f"{r.expr:.4f}", f"{r.bg:.4f}", r.split]
                if self.has_pairs:
                    vals.append(r.pair_id)
                w.writerow(vals)

    @classmethod
    def read(cls, path) -> "Manifest":
        path = Path(path)
        with open(path, encoding="utf-8", newline="") as fh:
            reader = csv.DictReader(fh, delimiter="\t")
            missing = set(MANIFEST_COLUMNS) - set(reader.fieldnames or ())
            if missing:
                raise ValueError(f"{path}: manifest missing columns {sorted(missing)}")
            rows = [ManifestRow(r["path"], int(r["subject"]), r["domain"], float(r["pose"]),
                                float(r["illum"]), float(r["expr"]), float(r["bg"]), r["split"],
                                int(r["pair_id"]) if r.get("pair_id") not in (None, "") else None)
                    for r in reader]
        return cls(rows, path.parent)


def split_subjects(n_subjects: int) -> tuple[list[int], list[int]]:
    n_train = max(1, int(round(TRAIN_FRACTION * n_subjects)))
    ids = list(range(n_subjects))
    return ids[:n_train], ids[n_train:]


def generate_dataset(seed: int, n_subjects: int, attrs_per_subject: int, resolution: int, out_dir) -> Manifest:
    """Render every (subject, attribute draw) as an N/V pair and write PNGs + manifest.tsv.

    The last 20% of subjects are held out: their attribute-0 V image forms the
    gallery, every N image is a probe, and the remaining V images are tagged
    ``heldout``.
    """
    if n_subjects < 4:
        raise ValueError("need at least 4 subjects")
    if attrs_per_subject < 1:
        raise ValueError("need at least one attribute draw per subject")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "images").mkdir(exist_ok=True)
    train_ids, _ = split_subjects(n_subjects)
    train_ids = set(train_ids)
    rows = []
    for sid in range(n_subjects):
        subject = SubjectSpec.from_seed(seed, sid)
        for k in range(attrs_per_subject):
            attr = AttributeSpec.from_seed(seed, sid, k)
            for domain in DOMAINS:
                if sid in train_ids:
                    split = "train"
                elif domain == "N":
                    split = "probe"
                else:
                    split = "gallery" if k == 0 else "heldout"
                rel = f"images/s{sid:04d}_a{k:03d}_{domain}.png"
                img = render_rgb01(subject, attr, domain, resolution)
                write_png(out / rel, img.transpose(2, 0, 1) * 2.0 - 1.0)
                rows.append(ManifestRow(rel, sid, domain, attr.pose, attr.illum, attr.expr, attr.bg, split))
    manifest = Manifest(rows, out)
    manifest.write(out / "manifest.tsv")
    return manifest


# --------------------------------------------------------------------------
# loading and sampling


def load_images(manifest: Manifest, rows: Iterable[ManifestRow]) -> np.ndarray:
    arrs = []
    for r in rows:
        p = manifest.resolve(r)
        try:
            arrs.append(read_png(p))
        except (OSError, ValueError) as exc:
            raise OSError(f"cannot read image {p}: {exc}") from exc
    return np.stack(arrs) if arrs else np.zeros((0, 3, 0, 0), np.float32)


def pair_rows(manifest: Manifest, splits: Sequence[str]):
    """Match N and V rows sharing subject and attributes (or synthetic pair id)."""
    by_key: dict = {}
    for r in manifest.rows:
        if r.split not in splits:
            continue
        key = ("pair", r.pair_id) if r.pair_id is not None else (r.subject, r.attr_key)
        by_key.setdefault(key, {})[r.domain] = r
    pairs = [(d["N"], d["V"]) for d in by_key.values() if "N" in d and "V" in d]
    return pairs


@dataclass
class PairedPool:
    """In-memory paired images (N[i], V[i]) with subject labels."""

    n: np.ndarray
    v: np.ndarray
    subjects: np.ndarray
    attrs: np.ndarray | None = None  # pose, illum, expr, bg per pair

    def __len__(self):
        return len(self.subjects)

    @classmethod
    def from_manifest(cls, manifest: Manifest, splits: Sequence[str] = ("train",)) -> "PairedPool":
        pairs = pair_rows(manifest, splits)
        if not pairs:
            return cls(np.zeros((0, 3, 1, 1), np.float32), np.zeros((0, 3, 1, 1), np.float32),
                       np.zeros(0, np.int64), np.zeros((0, 4)))
        n = load_images(manifest, [p[0] for p in pairs])
        v = load_images(manifest, [p[1] for p in pairs])
        subj = np.array([p[0].subject if p[0].pair_id is None else p[0].pair_id for p in pairs], np.int64)
        attrs = np.array([p[0].attr_key for p in pairs], np.float64)
        return cls(n, v, subj, attrs)

    @property
    def resolution(self) -> int:
        return int(self.n.shape[-1])


def sample_training_pairs(pool: PairedPool, rng: np.random.Generator, batch_size: int):
    """Draw a paired batch I and an independently drawn reference batch X.

    Returns ``(I, X)``, each a dict with ``N``/``V`` ImageBatches and ``subjects``.
    """
    if len(pool) == 0:
        raise ValueError("training split is empty")
    idx_i = rng.integers(0, len(pool), size=batch_size)
    idx_x = rng.integers(0, len(pool), size=batch_size)

    def take(idx):
        return {"N": ImageBatch(torch.from_numpy(pool.n[idx]), "N"),
                "V": ImageBatch(torch.from_numpy(pool.v[idx]), "V"),
                "subjects": pool.subjects[idx]}
    return take(idx_i), take(idx_x)
