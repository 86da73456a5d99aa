"""Training, evaluation and attention export."""

from __future__ import annotations

import csv
import io
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import checkpoint as ckpt_io
from . import tensor as tn
from .config import ModelConfig
from .data import ClipSpec, Dataset, clip_starts, derive_seed, read_dataset
from .errors import ConfigError, ContractError
from .model import Model, build_model
from .supervision import clip_vote, majority_label
from .tensor import Tensor

log = logging.getLogger(__name__)

EPOCH_HEADER = ["epoch", "ce_lstm", "ce_3d", "att_reg", "wd", "total", "train_acc", "test_acc"]
STEP_HEADER = ["epoch", "step", "ce_lstm", "ce_3d", "att_reg", "wd", "total"]
COMPONENTS = ["ce_lstm", "ce_3d", "att_reg", "wd", "total"]


def clip_spec(cfg: ModelConfig) -> ClipSpec:
    return ClipSpec(cfg.stride, cfg.l1, cfg.l2)


def split_indices(n: int, holdout: float) -> tuple[np.ndarray, np.ndarray]:
    """Last ``round(holdout * n)`` videos are held out for testing."""
    n_test = int(round(holdout * n))
    return np.arange(n - n_test), np.arange(n - n_test, n)


def check_compatible(cfg: ModelConfig, dataset: Dataset) -> None:
    if dataset.n_classes != cfg.C:
        raise ConfigError(f"dataset has {dataset.n_classes} classes, config C={cfg.C}")
    T, H, W = dataset.shape
    if H != cfg.image_size or W != cfg.image_size:
        raise ConfigError(f"dataset frames are {H}x{W}, config K={cfg.K} needs {cfg.image_size}x{cfg.image_size}")
    if T < cfg.l1:
        raise ContractError(f"videos have {T} frames, clip length L1={cfg.l1}")


class FeatureCache:
    """Per-video raw stream cubes from the frozen extractor, computed once.

    :meth:`batch` returns clips standardized by the model's feature statistics.
    """

    def __init__(self, model: Model, dataset: Dataset, store: dict | None = None):
        self.model = model
        self.dataset = dataset
        # ``store`` may be shared between models whose extractors are identical
        self._cache: dict[int, list] = {} if store is None else store

    def __getitem__(self, index: int) -> list:
        hit = self._cache.get(index)
        if hit is None:
            frames = self.dataset.videos[index].frames.astype(np.float64)
            hit = [c.data for c in self.model.stream_features(frames)]
            self._cache[index] = hit
        return hit

    def batch(self, items) -> list:
        l1 = self.model.cfg.l1
        if self.model.cfg.finetune_extractor:
            per_clip = [
                self.model.stream_features(self.dataset.videos[v].frames[s:s + l1].astype(np.float64))
                for v, s in items
            ]
            stacked = [tn.stack([clip[j] for clip in per_clip], axis=0) for j in range(len(per_clip[0]))]
            return self.model.normalize(stacked)
        streams = len(self.model.streams)
        return self.model.normalize([np.stack([self[v][j][s:s + l1] for v, s in items]) for j in range(streams)])


class MomentumSGD:
    """v <- mu v + g;  theta <- theta - lr v.

    With ``clip_norm > 0`` each tensor's gradient is rescaled to norm at most
    ``clip_norm`` before the update.  Clipping per tensor keeps the large
    regularizer gradient on the 3-d convnet from shrinking every other update.
    """

    def __init__(self, named_params, lr: float, momentum: float, clip_norm: float = 0.0):
        self.params = dict(named_params)
        self.lr = lr
        self.momentum = momentum
        self.clip_norm = clip_norm
        self.velocity = {name: np.zeros_like(p.data) for name, p in self.params.items()}
        self.steps = 0

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def grad_norm(self) -> float:
        return float(np.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in self.params.values() if p.grad is not None)))

    def step(self) -> None:
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            if self.clip_norm > 0:
                norm = float(np.sqrt(np.sum(g * g)))
                if norm > self.clip_norm:
                    g = g * (self.clip_norm / norm)
            v = self.velocity[name]
            v *= self.momentum
            v += g
            p.data -= self.lr * v
        self.steps += 1


@dataclass
class TrainReport:
    rows: list = field(default_factory=list)
    checkpoint: Path | None = None
    out_dir: Path | None = None
    trainer: "Trainer | None" = None

    def csv_text(self) -> str:
        return rows_to_csv(EPOCH_HEADER, self.rows)

    def final_test_accuracy(self) -> float:
        return self.rows[-1]["test_acc"] if self.rows else float("nan")

    def best_test_accuracy(self) -> float:
        return max((r["test_acc"] for r in self.rows), default=float("nan"))


def rows_to_csv(header, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_fmt(row[h]) for h in header])
    return buf.getvalue()


def _fmt(value):
    return repr(float(value)) if isinstance(value, (float, np.floating)) else value


class Trainer:
    """Momentum SGD over shuffled clips with per-epoch held-out evaluation.

    ``feature_store`` is an optional raw-feature dict shared across trainers
    whose configs build the same extractor (same seed and width).
    """

    def __init__(self, cfg: ModelConfig, dataset: Dataset, model: Model | None = None,
                 feature_store: dict | None = None):
        check_compatible(cfg, dataset)
        self.cfg = cfg
        self.dataset = dataset
        self.model = model if model is not None else build_model(cfg)
        self.spec = clip_spec(cfg)
        self.features = FeatureCache(self.model, dataset, feature_store)
        self.train_idx, self.test_idx = split_indices(len(dataset), cfg.holdout)
        if model is None:
            self.model.fit_feature_norm(self.features[int(v)] for v in self.train_idx)
        self.optimizer = MomentumSGD(
            [(n, p) for n, p in self.model.named_parameters() if p.requires_grad],
            cfg.lr, cfg.momentum, cfg.clip_norm,
        )
        self.epoch = 0
        self.step_rows: list = []

    # -- batches ----------------------------------------------------------
    def epoch_items(self, epoch: int) -> list:
        """(video, clip start) pairs for one epoch, in shuffled order."""
        rng = np.random.default_rng(derive_seed(self.cfg.seed, 1_000_003 + epoch))
        items = []
        for v in self.train_idx:
            starts = clip_starts(self.dataset.videos[v].n_frames, self.spec)
            if self.cfg.clips_per_video and self.cfg.clips_per_video < len(starts):
                chosen = rng.choice(len(starts), size=self.cfg.clips_per_video, replace=False)
                starts = [starts[i] for i in sorted(chosen)]
            items.extend((int(v), s) for s in starts)
        order = rng.permutation(len(items))
        return [items[i] for i in order]

    def batch_loss(self, items):
        streams = self.features.batch(items)
        labels = np.array([self.dataset.videos[v].label for v, _ in items])
        out = self.model.forward(streams)
        return out, self.model.loss(out, labels), labels

    def train_step(self, items) -> tuple[dict, int]:
        out, loss, labels = self.batch_loss(items)
        self.optimizer.zero_grad()
        tn.backward(loss.total)
        self.optimizer.step()
        probs = out.lstm_probs.data
        correct = sum(
            clip_vote(probs[b], self.cfg.l1, self.cfg.l2).label == labels[b] for b in range(len(items))
        )
        return loss.components(), int(correct)

    def run_epoch(self) -> dict:
        self.epoch += 1
        items = self.epoch_items(self.epoch)
        bs = self.cfg.batch_size
        sums = dict.fromkeys(COMPONENTS, 0.0)
        n_batches = 0
        correct = 0
        for step, start in enumerate(range(0, len(items), bs), start=1):
            comps, ok = self.train_step(items[start:start + bs])
            correct += ok
            n_batches += 1
            for k in COMPONENTS:
                sums[k] += comps[k]
            self.step_rows.append({"epoch": self.epoch, "step": step, **comps})
        row = {"epoch": self.epoch}
        row.update({k: sums[k] / max(n_batches, 1) for k in COMPONENTS})
        row["train_acc"] = correct / max(len(items), 1)
        row["test_acc"] = self.evaluate(self.test_idx)[0] if len(self.test_idx) else float("nan")
        return row

    def evaluate(self, indices) -> tuple[float, np.ndarray]:
        return evaluate_model(self.model, self.dataset, indices, self.features)

    def checkpoint(self) -> ckpt_io.Checkpoint:
        return ckpt_io.Checkpoint(
            self.cfg, self.model.state_dict(), self.epoch, self.optimizer.steps,
            {n: v.copy() for n, v in self.optimizer.velocity.items()},
        )


def evaluate_model(model: Model, dataset: Dataset, indices, features: FeatureCache | None = None,
                   batch_size: int = 32) -> tuple[float, np.ndarray]:
    """Video-level accuracy and confusion matrix (rows: true, cols: predicted).

    Each clip is labelled by :func:`clip_vote`; a video takes the majority of
    its clip labels (ties by mean window probability, then lowest index).
    """
    cfg = model.cfg
    spec = clip_spec(cfg)
    features = features or FeatureCache(model, dataset)
    indices = [int(i) for i in indices]
    items = [(v, s) for v in indices for s in clip_starts(dataset.videos[v].n_frames, spec)]
    clip_labels: dict[int, list] = {v: [] for v in indices}
    window_probs: dict[int, list] = {v: [] for v in indices}
    with tn.no_grad():
        for start in range(0, len(items), batch_size):
            chunk = items[start:start + batch_size]
            out = model.forward(features.batch(chunk))
            probs = out.lstm_probs.data
            for b, (v, _) in enumerate(chunk):
                vote = clip_vote(probs[b], cfg.l1, cfg.l2)
                clip_labels[v].append(vote.label)
                window_probs[v].append(vote.probs.mean(axis=0))
    confusion = np.zeros((cfg.C, cfg.C), dtype=np.int64)
    for v in indices:
        pred = majority_label(clip_labels[v], np.mean(window_probs[v], axis=0))
        confusion[dataset.videos[v].label, pred] += 1
    total = confusion.sum()
    return (float(np.trace(confusion)) / total if total else float("nan")), confusion


def train(cfg: ModelConfig, data, out_dir=None, on_epoch: Callable | None = None,
          figures: bool = True) -> TrainReport:
    """Train on ``data`` (path or Dataset); write metrics and checkpoints to ``out_dir``.

    Files: ``metrics.csv`` (per epoch), ``steps.csv`` (per step), ``timing.csv``
    (wall time, kept apart so the metric files are reproducible byte for
    byte), ``checkpoint.bin`` and, when ``figures``, PNG plots.
    """
    dataset = read_dataset(data) if not isinstance(data, Dataset) else data
    trainer = Trainer(cfg, dataset)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    report = TrainReport(out_dir=out)
    timings = []
    for _ in range(cfg.epochs):
        t0 = time.perf_counter()
        row = trainer.run_epoch()
        timings.append({"epoch": row["epoch"], "wall_time": time.perf_counter() - t0})
        report.rows.append(row)
        log.info("epoch %d: total %.4f ce_lstm %.4f train_acc %.3f test_acc %.3f (%.1fs)",
                 row["epoch"], row["total"], row["ce_lstm"], row["train_acc"], row["test_acc"],
                 timings[-1]["wall_time"])
        if out is not None:
            (out / "metrics.csv").write_text(report.csv_text())
            (out / "steps.csv").write_text(rows_to_csv(STEP_HEADER, trainer.step_rows))
            (out / "timing.csv").write_text(rows_to_csv(["epoch", "wall_time"], timings))
            report.checkpoint = out / "checkpoint.bin"
            ckpt_io.save(report.checkpoint, trainer.checkpoint())
        if on_epoch is not None:
            on_epoch(trainer, row)
    if out is not None and figures and report.rows:
        from . import report as figs

        figs.plot_training(report.rows, out / "training.png")
        _, confusion = trainer.evaluate(trainer.test_idx if len(trainer.test_idx) else trainer.train_idx)
        figs.plot_confusion(confusion, out / "confusion.png")
    report.trainer = trainer
    return report


def load_model(path) -> tuple[Model, ckpt_io.Checkpoint]:
    ck = ckpt_io.load(path)
    model = build_model(ck.config)
    model.load_state_dict(ck.params)
    return model, ck


def evaluate(checkpoint_path, data) -> tuple[float, np.ndarray]:
    model, _ = load_model(checkpoint_path)
    dataset = read_dataset(data) if not isinstance(data, Dataset) else data
    check_compatible(model.cfg, dataset)
    return evaluate_model(model, dataset, range(len(dataset)))


# ---------------------------------------------------------------------------
# Attention export
# ---------------------------------------------------------------------------


def upscale_attention(att: np.ndarray, k: int, size: int) -> np.ndarray:
    """Nearest-neighbour upscaling of a K*K map to ``size x size`` pixel masses
    (each cell's mass spread evenly over its pixels)."""
    cell = size // k
    return np.kron(att.reshape(k, k), np.ones((cell, cell))) / (cell * cell)


def attention_in_box_ratio(pixel_mass: np.ndarray, box) -> float:
    x0, y0, x1, y1 = (int(v) for v in box)
    inside = pixel_mass[y0:y1, x0:x1].sum()
    area_fraction = (x1 - x0) * (y1 - y0) / pixel_mass.size
    return float(inside / area_fraction)


def pgm_bytes(image: np.ndarray) -> bytes:
    h, w = image.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(image, dtype=np.uint8).tobytes()


def video_attention(model: Model, dataset: Dataset, index: int) -> np.ndarray:
    """Attention maps ``(L1, K*K)`` over the first clip of a video."""
    cfg = model.cfg
    feats = FeatureCache(model, dataset).batch([(index, 0)])
    with tn.no_grad():
        out = model.forward(feats)
    return out.attmaps.data[0]


def dump_attention(model: Model, dataset: Dataset, index: int, out_dir=None, figure: bool = True) -> dict:
    """Write one P5 PGM per step and return the attention-in-box ratios."""
    if not 0 <= index < len(dataset):
        raise ContractError(f"video index {index} out of range for {len(dataset)} videos")
    check_compatible(model.cfg, dataset)
    cfg = model.cfg
    video = dataset.videos[index]
    size = cfg.image_size
    maps = video_attention(model, dataset, index)
    ratios = []
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    for t, att in enumerate(maps):
        mass = upscale_attention(att, cfg.K, size)
        ratios.append(attention_in_box_ratio(mass, video.track[t]))
        if out is not None:
            img = np.rint(255.0 * mass / mass.max()).astype(np.uint8)
            (out / f"att_{index:04d}_{t:03d}.pgm").write_bytes(pgm_bytes(img))
    if out is not None and figure:
        from . import report as figs

        figs.plot_attention(video.frames[:len(maps), 0], maps, video.track[:len(maps)], cfg.K,
                            out / f"attention_{index:04d}.png")
    return {"video": index, "label": video.label, "ratios": ratios, "mean_ratio": float(np.mean(ratios))}
