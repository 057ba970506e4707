"""SGD training, per-epoch validation and the loss-comparison experiments."""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field, fields, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .backbone import ClipBatch
from .data import TAIL_CLASSES, Dataset, read_keyvalue, write_keyvalue
from .loss import FocalParams, bce_loss, fbce_loss
from .metrics import DetectionRecord, EvalReport, evaluate
from .model import BehaviorModel, ModelConfig
from .tensor import Tensor5, backward, sigmoid

DEFAULT_GAMMAS = (0.1, 0.5, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 10.0)


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss, gradient or parameter."""


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.075
    momentum: float = 0.9
    weight_decay: float = 0.00001
    epochs: int = 40
    batch_size: int = 4
    seed: int = 0
    loss: str = "fbce"
    alpha: float = 0.5
    gamma: float = 5.0
    score_thresh: float = 0.5
    # abort once a batch loss exceeds this multiple of the first batch loss; 0 disables
    divergence_factor: float = 4.0

    def __post_init__(self):
        if not self.lr >= 0:
            raise ValueError(f"lr must be non-negative, got {self.lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be non-negative, got {self.weight_decay}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be at least 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be at least 1, got {self.batch_size}")
        if self.divergence_factor < 0:
            raise ValueError(f"divergence_factor must be non-negative, got {self.divergence_factor}")
        if self.loss not in ("bce", "fbce"):
            raise ValueError(f"loss must be bce or fbce, got {self.loss!r}")
        if self.loss == "fbce":
            FocalParams(self.alpha, self.gamma)

    @property
    def focal(self) -> FocalParams:
        return FocalParams(self.alpha, self.gamma)

    def label(self) -> str:
        return "bce" if self.loss == "bce" else f"fbce(gamma={self.gamma:g})"

    def to_items(self) -> List[Tuple[str, str]]:
        return [(f.name, str(getattr(self, f.name))) for f in fields(self)]

    @classmethod
    def from_items(cls, items: Dict[str, str]) -> "TrainConfig":
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for k, v in items.items():
            if k not in known:
                raise ValueError(f"unknown train config key {k!r}")
            if k == "loss":
                kwargs[k] = v
            elif k in ("epochs", "batch_size", "seed"):
                kwargs[k] = int(v)
            else:
                kwargs[k] = float(v)
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        return cls.from_items(read_keyvalue(path))

    def save(self, path) -> None:
        write_keyvalue(path, self.to_items())


@dataclass
class EpochRow:
    epoch: int
    loss: float
    map: float
    fr: float
    mr: float
    seconds: float = 0.0


@dataclass
class TrainLog:
    rows: List[EpochRow] = field(default_factory=list)

    @property
    def losses(self) -> List[float]:
        return [r.loss for r in self.rows]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "loss", "map", "fr", "mr"])
            for r in self.rows:
                w.writerow([r.epoch, repr(r.loss), repr(r.map), repr(r.fr), repr(r.mr)])

    @classmethod
    def read_csv(cls, path) -> "TrainLog":
        with open(path, newline="") as fh:
            rows = [EpochRow(int(r["epoch"]), float(r["loss"]), float(r["map"]),
                             float(r["fr"]), float(r["mr"])) for r in csv.DictReader(fh)]
        return cls(rows)


def sgd_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray],
             velocity: Sequence[np.ndarray], lr: float, momentum: float,
             weight_decay: float) -> Tuple[List[np.ndarray], List[np.ndarray]]:
    """One momentum step with the L2 decay folded into the gradient.

    ``v <- momentum * v + grad + weight_decay * param``; ``param <- param - lr * v``.
    """
    if not len(params) == len(grads) == len(velocity):
        raise ValueError("params, grads and velocity must have equal length")
    new_p, new_v = [], []
    for p, g, v in zip(params, grads, velocity):
        if not p.shape == g.shape == v.shape:
            raise ValueError(f"shape mismatch: param {p.shape}, grad {g.shape}, state {v.shape}")
        v = momentum * v + g + weight_decay * p
        new_v.append(v)
        new_p.append(p - lr * v)
    return new_p, new_v


def smoothed(values: Sequence[float], window: int = 5) -> np.ndarray:
    """Trailing moving average; the first ``window - 1`` entries are dropped."""
    x = np.asarray(values, dtype=np.float64)
    if x.size < window:
        return np.array([])
    kernel = np.ones(window) / window
    return np.convolve(x, kernel, mode="valid")


def nonincreasing_fraction(values: Sequence[float], window: int = 5) -> float:
    """Share of consecutive smoothed-loss steps that do not go up."""
    s = smoothed(values, window)
    if s.size < 2:
        return 1.0
    return float(np.mean(np.diff(s) <= 0.0))


# ---------------------------------------------------------------------------
# batches and evaluation


def _batch(ds: Dataset, ids: Sequence[str]):
    frames = np.stack([ds.clips[c] for c in ids])
    boxes, labels = [], []
    for c in ids:
        b, y = ds.boxes_and_labels(c)
        boxes.append(b)
        labels.append(y)
    return ClipBatch(Tensor5(frames), boxes), np.concatenate(labels)


def batch_loss(model: BehaviorModel, batch: ClipBatch, y: np.ndarray, cfg: TrainConfig) -> Tensor5:
    prob = sigmoid(model.logits(batch))
    if cfg.loss == "bce":
        return bce_loss(prob, y)
    return fbce_loss(prob, y, cfg.focal)


def predict_split(model: BehaviorModel, ds: Dataset, split: str, batch_size: int = 8):
    preds = []
    ids = ds.ids(split)
    for i in range(0, len(ids), batch_size):
        chunk = ids[i:i + batch_size]
        batch, _ = _batch(ds, chunk)
        prob = model.probabilities(batch).values[:, :, 0, 0, 0]
        row = 0
        for cid, boxes in zip(chunk, batch.boxes):
            frame_id = ds.records(cid)[0].frame_id
            for b in boxes:
                for c, s in enumerate(prob[row]):
                    preds.append(_record(cid, frame_id, c, b, s))
                row += 1
    return preds


def _record(cid, frame_id, c, b, s):
    return DetectionRecord(cid, frame_id, c, b, float(min(max(s, 0.0), 1.0)))


def evaluate_split(model: BehaviorModel, ds: Dataset, split: str,
                   score_thresh: float = 0.5) -> EvalReport:
    return evaluate(ds.split_records(split), predict_split(model, ds, split),
                    score_thresh=score_thresh)


# ---------------------------------------------------------------------------
# training


def train(model: BehaviorModel, ds: Dataset, cfg: TrainConfig,
          val_split: str = "val") -> TrainLog:
    """Train ``model`` in place and return one log row per epoch."""
    train_ids = ds.ids("train")
    if not train_ids:
        raise ValueError("dataset has no training clips")
    has_val = bool(ds.ids(val_split))
    params = model.parameters()
    velocity = [np.zeros_like(p.values) for p in params]
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 7]))
    log = TrainLog()
    first_loss = None
    for epoch in range(1, cfg.epochs + 1):
        start = time.perf_counter()
        order = [train_ids[i] for i in rng.permutation(len(train_ids))]
        losses = []
        for i in range(0, len(order), cfg.batch_size):
            batch, y = _batch(ds, order[i:i + cfg.batch_size])
            model.zero_grad()
            root = batch_loss(model, batch, y, cfg)
            value = root.item()
            if not math.isfinite(value):
                raise DivergenceError(f"non-finite loss {value} at epoch {epoch}")
            if first_loss is None:
                first_loss = value
            elif cfg.divergence_factor and value > cfg.divergence_factor * first_loss:
                raise DivergenceError(
                    f"batch loss {value:.4g} at epoch {epoch} exceeds "
                    f"{cfg.divergence_factor:g}x the first batch loss {first_loss:.4g}")
            backward(root)
            grads = [p.grad if p.grad is not None else np.zeros_like(p.values) for p in params]
            new_p, velocity = sgd_step([p.values for p in params], grads, velocity,
                                       cfg.lr, cfg.momentum, cfg.weight_decay)
            for p, v in zip(params, new_p):
                if not np.all(np.isfinite(v)):
                    raise DivergenceError(f"non-finite parameter after epoch {epoch} step")
                p.values = v
            losses.append(value)
        if has_val:
            rep = evaluate_split(model, ds, val_split, cfg.score_thresh)
            m, fr, mr = rep.map, rep.fr, rep.mr
        else:
            m = fr = mr = float("nan")
        log.rows.append(EpochRow(epoch, float(np.mean(losses)), m, fr, mr,
                                 time.perf_counter() - start))
    return log


def run(ds: Dataset, model_cfg: ModelConfig, cfg: TrainConfig):
    """Initialize from ``cfg.seed``, train, and return (model, log)."""
    model = BehaviorModel.init(model_cfg, cfg.seed)
    log = train(model, ds, cfg)
    return model, log


# ---------------------------------------------------------------------------
# experiments


SWEEP_HEADER = ["loss", "gamma", "map", "fr", "mr", "tail_ap"]


def gamma_sweep(ds: Dataset, gammas: Sequence[float], cfg: TrainConfig,
                model_cfg: Optional[ModelConfig] = None, split: str = "test") -> List[dict]:
    """One row per gamma plus a leading BCE baseline row, all from the same seed."""
    model_cfg = model_cfg or ModelConfig()
    rows = []
    for loss, gamma in [("bce", None)] + [("fbce", g) for g in gammas]:
        c = replace(cfg, loss=loss, gamma=cfg.gamma if gamma is None else float(gamma))
        model, _ = run(ds, model_cfg, c)
        rep = evaluate_split(model, ds, split, cfg.score_thresh)
        rows.append({"loss": loss, "gamma": "" if gamma is None else repr(float(gamma)),
                     "map": rep.map, "fr": rep.fr, "mr": rep.mr,
                     "tail_ap": rep.mean_ap(TAIL_CLASSES)})
    return rows


def write_sweep_csv(path, rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SWEEP_HEADER)
        for r in rows:
            w.writerow([r["loss"], r["gamma"]] + [repr(float(r[k])) for k in SWEEP_HEADER[2:]])


def read_sweep_csv(path) -> List[dict]:
    with open(path, newline="") as fh:
        out = []
        for r in csv.DictReader(fh):
            row = {"loss": r["loss"], "gamma": float(r["gamma"]) if r["gamma"] else None}
            for k in SWEEP_HEADER[2:]:
                row[k] = float(r[k])
            out.append(row)
    return out


@dataclass
class Comparison:
    """Paired BCE vs FBce outcome on one seed."""

    seed: int
    chosen_gamma: float
    bce: EvalReport
    fbce: EvalReport
    val_map: Dict[float, float]

    @property
    def tail_ap_bce(self) -> float:
        return self.bce.mean_ap(TAIL_CLASSES)

    @property
    def tail_ap_fbce(self) -> float:
        return self.fbce.mean_ap(TAIL_CLASSES)


def compare_losses(ds: Dataset, cfg: TrainConfig, model_cfg: Optional[ModelConfig] = None,
                   gammas: Sequence[float] = (1.0, 5.0)) -> Comparison:
    """Train a BCE baseline and FBce at each gamma; keep the FBce run with best val mAP."""
    model_cfg = model_cfg or ModelConfig()
    base, _ = run(ds, model_cfg, replace(cfg, loss="bce"))
    bce_rep = evaluate_split(base, ds, "test", cfg.score_thresh)
    best = None
    val_map = {}
    for g in gammas:
        model, _ = run(ds, model_cfg, replace(cfg, loss="fbce", gamma=float(g)))
        v = evaluate_split(model, ds, "val", cfg.score_thresh).map
        val_map[float(g)] = v
        if best is None or v > best[0]:
            best = (v, float(g), model)
    _, g_best, model = best
    return Comparison(cfg.seed, g_best, bce_rep,
                      evaluate_split(model, ds, "test", cfg.score_thresh), val_map)
