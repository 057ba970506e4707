"""Synthetic long-tail classroom clips, frame augmentation and annotation IO.

Every clip shows 1-5 "students", each inside its own cell of a 2x3 grid.
A student carries a multi-label behavior set; each label adds a
class-specific moving texture (colour direction, stripe frequency and
orientation, temporal frequency) inside the student's box, so classes are
separable but overlap when several labels are active.

Label sets are drawn with an independent Bernoulli per class at rate
``label_scale * class_probs[c]`` and resampled while empty. Conditioning on
a non-empty set scales every class equally, so the share of annotations per
class converges to ``class_probs``.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .metrics import Box, DetectionRecord
from .tensor import Tensor5, load, save

CLASS_CODES = "ABCDEFGH"
CLASS_NAMES = (
    "sitting",
    "using the phone",
    "reading/writing",
    "standing/walking",
    "turning head/body",
    "raising-hand",
    "leaning on the desk",
    "talking",
)
NUM_CLASSES = len(CLASS_NAMES)
HEAD_CLASSES = (0, 1)
TAIL_CLASSES = tuple(range(2, NUM_CLASSES))
DEFAULT_CLASS_PROBS = (0.40, 0.21, 0.12, 0.08, 0.07, 0.05, 0.04, 0.03)

GRID_ROWS, GRID_COLS = 2, 3
SPLITS = ("train", "test", "val")


def class_code(class_id: int) -> str:
    return CLASS_CODES[class_id]


class SpecError(ValueError):
    """A dataset spec field is invalid; ``field`` names it."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass(frozen=True)
class DatasetSpec:
    num_clips: int = 96
    clip_frames: int = 16
    clip_height: int = 16
    clip_width: int = 24
    class_probs: Tuple[float, ...] = DEFAULT_CLASS_PROBS
    min_students: int = 1
    max_students: int = 5
    label_scale: float = 1.5
    signal: float = 0.35
    noise: float = 0.08
    seed: int = 0
    split: Tuple[int, int, int] = (4, 1, 1)
    augment_copies: int = 0

    def __post_init__(self):
        probs = tuple(float(p) for p in self.class_probs)
        object.__setattr__(self, "class_probs", probs)
        object.__setattr__(self, "split", tuple(int(s) for s in self.split))
        if len(probs) != NUM_CLASSES:
            raise SpecError("class_probs", f"expected {NUM_CLASSES} values, got {len(probs)}")
        if any(p < 0 for p in probs) or abs(sum(probs) - 1.0) > 1e-9:
            raise SpecError("class_probs", f"must be non-negative and sum to 1, got {probs}")
        if self.label_scale <= 0 or self.label_scale * max(probs) > 1.0:
            raise SpecError("label_scale", "label_scale * max(class_probs) must lie in (0, 1]")
        if self.num_clips < 1:
            raise SpecError("num_clips", "must be at least 1")
        if min(self.clip_frames, self.clip_height, self.clip_width) < 1:
            raise SpecError("clip_frames", "clip extents must be positive")
        if self.clip_height % GRID_ROWS or self.clip_width % GRID_COLS:
            raise SpecError("clip_height", f"frame must tile a {GRID_ROWS}x{GRID_COLS} grid")
        if not 1 <= self.min_students <= self.max_students <= GRID_ROWS * GRID_COLS:
            raise SpecError("max_students", "need 1 <= min_students <= max_students <= 6")
        if len(self.split) != 3 or any(s < 0 for s in self.split) or sum(self.split) == 0:
            raise SpecError("split", f"expected three non-negative ratios, got {self.split}")
        if self.noise < 0 or self.signal < 0:
            raise SpecError("noise", "noise and signal must be non-negative")
        if self.augment_copies < 0:
            raise SpecError("augment_copies", "must be non-negative")

    @property
    def keyframe(self) -> int:
        return self.clip_frames // 2

    def to_items(self) -> List[Tuple[str, str]]:
        out = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(repr(x) for x in v)
            out.append((f.name, str(v)))
        return out

    @classmethod
    def from_items(cls, items: Dict[str, str]) -> "DatasetSpec":
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for k, v in items.items():
            if k not in known:
                raise SpecError(k, "unknown field")
            try:
                if k == "class_probs":
                    kwargs[k] = tuple(float(x) for x in v.split(","))
                elif k == "split":
                    kwargs[k] = tuple(int(x) for x in v.split(cls._split_sep(v)))
                elif k in ("label_scale", "signal", "noise"):
                    kwargs[k] = float(v)
                else:
                    kwargs[k] = int(v)
            except ValueError:
                raise SpecError(k, f"cannot parse {v!r}") from None
        return cls(**kwargs)

    @staticmethod
    def _split_sep(v: str) -> str:
        return ":" if ":" in v else ","


def read_keyvalue(path) -> Dict[str, str]:
    """Parse a flat ``key=value`` file; ``#`` starts a comment."""
    items: Dict[str, str] = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value, got {line!r}")
            k, v = line.split("=", 1)
            items[k.strip()] = v.strip()
    return items


def write_keyvalue(path, items: Sequence[Tuple[str, str]]) -> None:
    with open(path, "w") as fh:
        for k, v in items:
            fh.write(f"{k}={v}\n")


# ---------------------------------------------------------------------------
# generation


@dataclass
class Dataset:
    spec: DatasetSpec
    clip_ids: List[str]
    clips: Dict[str, np.ndarray]
    annotations: List[DetectionRecord]
    splits: Dict[str, str]
    _by_clip: Dict[str, List[DetectionRecord]] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self._by_clip = {}
        for r in self.annotations:
            self._by_clip.setdefault(r.clip_id, []).append(r)

    def ids(self, split: str) -> List[str]:
        return [c for c in self.clip_ids if self.splits[c] == split]

    def records(self, clip_id: str) -> List[DetectionRecord]:
        return self._by_clip.get(clip_id, [])

    def boxes_and_labels(self, clip_id: str) -> Tuple[List[Box], np.ndarray]:
        """Distinct boxes in first-seen order and their (K, M) binary label matrix."""
        boxes: List[Box] = []
        index: Dict[Box, int] = {}
        for r in self.records(clip_id):
            if r.box not in index:
                index[r.box] = len(boxes)
                boxes.append(r.box)
        y = np.zeros((len(boxes), NUM_CLASSES))
        for r in self.records(clip_id):
            y[index[r.box], r.class_id] = 1.0
        return boxes, y

    def split_records(self, split: str) -> List[DetectionRecord]:
        keep = set(self.ids(split))
        return [r for r in self.annotations if r.clip_id in keep]


def _class_signatures(num_classes: int = NUM_CLASSES):
    """Fixed per-class texture parameters; identical for every dataset."""
    rng = np.random.default_rng(20211)
    colors = rng.normal(size=(num_classes, 3))
    colors /= np.linalg.norm(colors, axis=1, keepdims=True)
    spatial = np.array([0.5, 1.0, 1.5, 0.75, 1.25, 0.5, 1.0, 1.5])[:num_classes]
    angle = np.linspace(0.0, np.pi, num_classes, endpoint=False)
    temporal = np.array([0.0, 1.0, 2.0, 3.0, 1.5, 2.5, 0.5, 3.5])[:num_classes]
    return colors, spatial, angle, temporal


def sample_labels(rng: np.random.Generator, spec: DatasetSpec) -> List[int]:
    rates = spec.label_scale * np.asarray(spec.class_probs)
    while True:
        hit = rng.random(NUM_CLASSES) < rates
        if hit.any():
            return [int(c) for c in np.nonzero(hit)[0]]


def _render_student(clip, rng, spec, box_px, labels, signatures) -> None:
    colors, spatial, angle, temporal = signatures
    r0, r1, c0, c1 = box_px
    t_n = spec.clip_frames
    yy, xx = np.mgrid[r0:r1, c0:c1].astype(np.float64)
    yy -= yy.mean()
    xx -= xx.mean()
    t = np.arange(t_n, dtype=np.float64)[:, None, None]
    drift = rng.uniform(-0.6, 0.6, size=2)
    amp = rng.uniform(0.7, 1.0)
    for c in labels:
        phase = rng.uniform(0, 2 * np.pi)
        u = np.cos(angle[c]) * (xx - drift[0] * t) + np.sin(angle[c]) * (yy - drift[1] * t)
        wave = np.cos(2 * np.pi * spatial[c] * u / 4.0
                      + 2 * np.pi * temporal[c] * t / t_n + phase)
        clip[:, :, r0:r1, c0:c1] += (spec.signal * amp * colors[c][:, None, None, None]
                                     * (0.5 + 0.5 * wave)[None])


def _generate_clip(seed_seq: np.random.SeedSequence, spec: DatasetSpec, clip_id: str,
                   signatures) -> Tuple[np.ndarray, List[DetectionRecord]]:
    rng = np.random.default_rng(seed_seq)
    t_n, h, w = spec.clip_frames, spec.clip_height, spec.clip_width
    clip = 0.5 + spec.noise * rng.standard_normal((3, t_n, h, w))
    n_students = int(rng.integers(spec.min_students, spec.max_students + 1))
    cells = rng.choice(GRID_ROWS * GRID_COLS, size=n_students, replace=False)
    ch, cw = h // GRID_ROWS, w // GRID_COLS
    records = []
    for cell in sorted(int(c) for c in cells):
        gr, gc = divmod(cell, GRID_COLS)
        # shrink the cell by at most one pixel per side
        top, bottom, left, right = rng.integers(0, 2, size=4)
        r0, r1 = gr * ch + top, (gr + 1) * ch - bottom
        c0, c1 = gc * cw + left, (gc + 1) * cw - right
        labels = sample_labels(rng, spec)
        _render_student(clip, rng, spec, (r0, r1, c0, c1), labels, signatures)
        box = Box(c0 / w, r0 / h, c1 / w, r1 / h)
        for c in labels:
            records.append(DetectionRecord(clip_id, spec.keyframe, c, box))
    return np.clip(clip, 0.0, 1.0), records


def assign_splits(clip_ids: Sequence[str], ratios: Tuple[int, int, int],
                  rng: np.random.Generator) -> Dict[str, str]:
    """Shuffle and cut into train/test/val by ``ratios``; train takes the rounding slack."""
    n = len(clip_ids)
    total = sum(ratios)
    n_test = n * ratios[1] // total
    n_val = n * ratios[2] // total
    order = rng.permutation(n)
    out = {}
    for rank, i in enumerate(order):
        if rank < n_test:
            out[clip_ids[i]] = "test"
        elif rank < n_test + n_val:
            out[clip_ids[i]] = "val"
        else:
            out[clip_ids[i]] = "train"
    return out


def generate(spec: DatasetSpec) -> Dataset:
    """Deterministic synthetic dataset; each clip has its own spawned seed."""
    root = np.random.SeedSequence(spec.seed)
    clip_seeds = root.spawn(spec.num_clips + 1)
    signatures = _class_signatures()
    clip_ids = [f"clip{i:04d}" for i in range(spec.num_clips)]
    clips: Dict[str, np.ndarray] = {}
    annotations: List[DetectionRecord] = []
    for cid, ss in zip(clip_ids, clip_seeds):
        clip, recs = _generate_clip(ss, spec, cid, signatures)
        clips[cid] = clip
        annotations.extend(recs)
    split_rng = np.random.default_rng(clip_seeds[-1])
    splits = assign_splits(clip_ids, spec.split, split_rng)

    if spec.augment_copies:
        aug_rng = np.random.default_rng(root.spawn(1)[0])
        extra_ids = []
        source = list(annotations)
        for cid in clip_ids:
            own = [r for r in source if r.clip_id == cid]
            for k in range(spec.augment_copies):
                new_id = f"{cid}a{k}"
                clips[new_id] = augment_clip(clips[cid], seed=int(aug_rng.integers(2**31)))
                splits[new_id] = splits[cid]
                annotations.extend(
                    DetectionRecord(new_id, r.frame_id, r.class_id, r.box) for r in own)
                extra_ids.append(new_id)
        clip_ids = clip_ids + extra_ids
    return Dataset(spec, clip_ids, clips, annotations, splits)


def class_counts(records: Sequence[DetectionRecord]) -> np.ndarray:
    counts = np.zeros(NUM_CLASSES)
    for r in records:
        counts[r.class_id] += 1
    return counts


# ---------------------------------------------------------------------------
# frame-rate crop and augmentation


def frame_rate_crop(clip: np.ndarray, fps_in: float, fps_out: float = 4, axis: int = 0) -> np.ndarray:
    """Uniformly subsample frames along ``axis`` from ``fps_in`` to ``fps_out``."""
    if fps_out <= 0 or fps_in <= 0:
        raise ValueError("frame rates must be positive")
    if fps_out > fps_in:
        raise ValueError(f"fps_out={fps_out} exceeds fps_in={fps_in}")
    n = clip.shape[axis]
    n_out = int(np.floor(n * fps_out / fps_in + 1e-9))
    idx = np.floor(np.arange(n_out) * fps_in / fps_out + 1e-9).astype(int)
    return np.take(clip, idx, axis=axis)


def salt_and_pepper(frame: np.ndarray, rate: float, rng: np.random.Generator) -> np.ndarray:
    out = frame.copy()
    u = rng.random(frame.shape)
    out[u < rate / 2] = 0.0
    out[(u >= rate / 2) & (u < rate)] = 1.0
    return out


def gaussian_noise(frame: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    return frame + sigma * rng.standard_normal(frame.shape)


def equalize_histogram(frame: np.ndarray, levels: int = 256) -> np.ndarray:
    """Per-channel CDF remap on ``levels`` quantization bins; last two axes are spatial."""
    q = np.clip(np.rint(frame * (levels - 1)), 0, levels - 1).astype(int)
    flat = q.reshape(-1, q.shape[-2] * q.shape[-1])
    out = np.empty(flat.shape)
    for i, row in enumerate(flat):
        hist = np.bincount(row, minlength=levels)
        cdf = np.cumsum(hist) / row.size
        cdf_min = cdf[hist > 0][0]
        if cdf_min >= 1.0:
            out[i] = row / (levels - 1)
            continue
        out[i] = (cdf[row] - cdf_min) / (1.0 - cdf_min)
    return out.reshape(frame.shape)


def laplacian_enhance(frame: np.ndarray, strength: float) -> np.ndarray:
    """Sharpen by subtracting the spatial Laplacian."""
    lap = np.empty_like(frame)
    planes = frame.reshape(-1, *frame.shape[-2:])
    lap_planes = lap.reshape(planes.shape)
    for i, p in enumerate(planes):
        lap_planes[i] = ndimage.laplace(p, mode="nearest")
    return frame - strength * lap


def gamma_transform(frame: np.ndarray, gamma: float) -> np.ndarray:
    return np.power(frame, gamma)


AUGMENTATIONS = ("salt_pepper", "gaussian_noise", "hist_eq", "laplacian", "gamma")


def augment(frame: np.ndarray, ops: Optional[Sequence[str]] = None, seed: int = 0,
            rate: Optional[float] = None, sigma: Optional[float] = None,
            strength: Optional[float] = None, gamma: Optional[float] = None) -> np.ndarray:
    """Apply augmentation ops in their canonical order, clamped to [0, 1].

    When ``ops`` is None three of the five are drawn from ``seed``. Unset
    strengths are drawn from ``seed`` too.
    """
    rng = np.random.default_rng(seed)
    if ops is None:
        picks = rng.choice(len(AUGMENTATIONS), size=3, replace=False)
        ops = [AUGMENTATIONS[i] for i in sorted(picks)]
    unknown = [o for o in ops if o not in AUGMENTATIONS]
    if unknown:
        raise ValueError(f"unknown augmentation {unknown[0]!r}; choose from {AUGMENTATIONS}")
    if np.any(frame < 0) or np.any(frame > 1):
        raise ValueError("frame values must lie in [0, 1]")
    rate = rng.uniform(0.005, 0.02) if rate is None else rate
    sigma = rng.uniform(0.01, 0.05) if sigma is None else sigma
    strength = rng.uniform(0.2, 0.6) if strength is None else strength
    gamma = rng.uniform(0.7, 1.4) if gamma is None else gamma

    out = np.asarray(frame, dtype=np.float64)
    for op in AUGMENTATIONS:
        if op not in ops:
            continue
        if op == "salt_pepper":
            out = salt_and_pepper(out, rate, rng)
        elif op == "gaussian_noise":
            out = gaussian_noise(out, sigma, rng)
        elif op == "hist_eq":
            out = equalize_histogram(out)
        elif op == "laplacian":
            out = laplacian_enhance(out, strength)
        else:
            out = gamma_transform(out, gamma)
        out = np.clip(out, 0.0, 1.0)
    return out


def augment_clip(clip: np.ndarray, seed: int) -> np.ndarray:
    """Augment a (3, T, H, W) clip with one op set shared by all frames."""
    rng = np.random.default_rng(seed)
    picks = sorted(rng.choice(len(AUGMENTATIONS), size=3, replace=False))
    ops = [AUGMENTATIONS[i] for i in picks]
    params = dict(rate=rng.uniform(0.005, 0.02), sigma=rng.uniform(0.01, 0.05),
                  strength=rng.uniform(0.2, 0.6), gamma=rng.uniform(0.7, 1.4))
    frames = [augment(clip[:, t], ops, seed=int(rng.integers(2**31)), **params)
              for t in range(clip.shape[1])]
    return np.stack(frames, axis=1)


# ---------------------------------------------------------------------------
# annotation CSV: clip_id,frame_id,x1,y1,x2,y2,class_id[,score]

ANNOTATION_HEADER = "# clip_id,frame_id,x1,y1,x2,y2,class_id,score"


def write_annotations(path, records: Sequence[DetectionRecord]) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(ANNOTATION_HEADER + "\n")
        w = csv.writer(fh, lineterminator="\n")
        for r in records:
            row = [r.clip_id, r.frame_id, *(repr(float(v)) for v in r.box.as_tuple()), r.class_id]
            if r.score is not None:
                row.append(repr(float(r.score)))
            w.writerow(row)


def read_annotations(path, num_classes: int = NUM_CLASSES) -> List[DetectionRecord]:
    out = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), 1):
            if not row or row[0].startswith("#"):
                continue
            if len(row) not in (7, 8):
                raise ValueError(f"{path}:{lineno}: expected 7 or 8 fields, got {len(row)}")
            try:
                frame_id = int(row[1])
                box = Box(*(float(v) for v in row[2:6]))
                class_id = int(row[6])
                score = float(row[7]) if len(row) == 8 else None
                if not 0 <= class_id < num_classes:
                    raise ValueError(f"class_id {class_id} outside [0, {num_classes})")
                out.append(DetectionRecord(row[0], frame_id, class_id, box, score))
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
    return out


# ---------------------------------------------------------------------------
# on-disk dataset: spec.txt, annotations.csv, manifest.csv, clips/<id>.txt


def save_dataset(ds: Dataset, out_dir) -> None:
    out = Path(out_dir)
    (out / "clips").mkdir(parents=True, exist_ok=True)
    write_keyvalue(out / "spec.txt", ds.spec.to_items())
    write_annotations(out / "annotations.csv", ds.annotations)
    with open(out / "manifest.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["clip_id", "path", "split"])
        for cid in ds.clip_ids:
            rel = f"clips/{cid}.txt"
            save(out / rel, Tensor5(ds.clips[cid][None]))
            w.writerow([cid, rel, ds.splits[cid]])


def load_dataset(data_dir) -> Dataset:
    root = Path(data_dir)
    for name in ("spec.txt", "annotations.csv", "manifest.csv"):
        if not (root / name).is_file():
            raise FileNotFoundError(f"{root / name} does not exist")
    spec = DatasetSpec.from_items(read_keyvalue(root / "spec.txt"))
    annotations = read_annotations(root / "annotations.csv")
    clip_ids, clips, splits = [], {}, {}
    with open(root / "manifest.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            cid = row["clip_id"]
            if row["split"] not in SPLITS:
                raise ValueError(f"manifest: clip {cid} has unknown split {row['split']!r}")
            clip_ids.append(cid)
            clips[cid] = load(root / row["path"]).values[0]
            splits[cid] = row["split"]
    return Dataset(spec, clip_ids, clips, annotations, splits)


def dataset_exists(data_dir) -> bool:
    return os.path.isfile(os.path.join(data_dir, "manifest.csv"))
