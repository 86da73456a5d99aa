"""Central finite-difference verification of recorded gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import tensor as tn
from .config import ModelConfig
from .data import generate
from .model import build_model
from .tensor import Tensor

DENOM_GUARD = 1e-8


@dataclass
class TensorCheck:
    name: str
    shape: tuple
    checked: int
    worst_rel: float
    worst_abs: float


@dataclass
class GradCheckReport:
    tolerance: float
    rows: list = field(default_factory=list)

    @property
    def worst(self) -> float:
        return max((r.worst_rel for r in self.rows), default=0.0)

    @property
    def passed(self) -> bool:
        return bool(self.rows) and self.worst <= self.tolerance

    def lines(self) -> list[str]:
        out = [f"{r.name:32s} {str(r.shape):20s} n={r.checked:3d} rel={r.worst_rel:.3e} abs={r.worst_abs:.3e}"
               for r in self.rows]
        status = "PASS" if self.passed else "FAIL"
        out.append(f"{status}: worst relative error {self.worst:.3e} (tolerance {self.tolerance:.1e})")
        return out


def relative_error(analytic: float, numeric: float, guard: float = DENOM_GUARD) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), guard)


def check_gradients(loss_fn: Callable[[], Tensor], params: dict, tolerance: float = 1e-4,
                    n_coords: int = 20, eps: float = 1e-5, seed: int = 0,
                    corrupt: Callable[[str, np.ndarray], np.ndarray] | None = None,
                    oracle_dtype=np.longdouble) -> GradCheckReport:
    """Compare backward() against central differences on sampled coordinates.

    ``loss_fn`` must rebuild the graph on each call.  The analytic gradient
    is float64; the perturbed losses are evaluated in ``oracle_dtype``
    (extended precision by default) so that round-off in the difference
    quotient stays far below the tolerance even for near-zero components.
    ``corrupt(name, grad)`` may alter the analytic gradients before
    comparison (negative controls).
    """
    for p in params.values():
        p.grad = None
    tn.backward(loss_fn())
    analytic = {}
    for name, p in params.items():
        g = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        analytic[name] = corrupt(name, g) if corrupt is not None else g

    rng = np.random.default_rng(seed)
    report = GradCheckReport(tolerance)
    for name, p in params.items():
        size = p.data.size
        coords = rng.choice(size, size=min(n_coords, size), replace=False)
        worst_rel = worst_abs = 0.0
        flat = p.data.reshape(-1)
        for i in coords:
            orig = flat[i]
            with tn.no_grad(), tn.precision(oracle_dtype):
                flat[i] = hi = orig + eps
                plus = loss_fn().data
                flat[i] = lo = orig - eps
                minus = loss_fn().data
            flat[i] = orig
            # divide by the step actually taken (hi - lo is exact in float64)
            numeric = float((plus - minus) / (hi - lo))
            a = analytic[name].reshape(-1)[i]
            worst_rel = max(worst_rel, relative_error(a, numeric))
            worst_abs = max(worst_abs, abs(a - numeric))
        report.rows.append(TensorCheck(name, p.shape, len(coords), worst_rel, worst_abs))
    return report


def tiny_config(**overrides) -> ModelConfig:
    base = dict(K=4, N=4, H=8, C=4, B=2, l1=3, l2=2, stride=1, head_width=8, batch_size=2, seed=3)
    base.update(overrides)
    return ModelConfig(**base)


def pipeline_loss_fn(cfg: ModelConfig, n_clips: int = 2, data_seed: int = 11):
    """Model, trainable parameters and a loss closure for a few tiny clips."""
    model = build_model(cfg)
    ds = generate(cfg.C, data_seed, cfg.C, cfg.l1, cfg.image_size, jitter=1)
    videos = ds.videos[:n_clips]
    labels = np.array([v.label for v in videos])
    streams = [model.stream_features(v.frames.astype(np.float64)) for v in videos]
    model.fit_feature_norm(streams)
    cubes = model.normalize([np.stack([s[j].data for s in streams]) for j in range(len(model.streams))])

    with tn.no_grad():
        target = model.forward(cubes).attmaps.data.copy()

    def loss_fn() -> Tensor:
        return model.loss(model.forward(cubes), labels, reg_target=target).total

    params = {n: p for n, p in model.named_parameters() if p.requires_grad}
    return model, params, loss_fn


def grad_check(cfg: ModelConfig | None = None, tolerance: float = 1e-4, n_coords: int = 20,
               seed: int = 0, corrupt=None) -> GradCheckReport:
    """Finite-difference check over every trainable tensor of a tiny pipeline."""
    cfg = cfg or tiny_config()
    _, params, loss_fn = pipeline_loss_fn(cfg)
    return check_gradients(loss_fn, params, tolerance, n_coords, seed=seed, corrupt=corrupt)


def linear_toy_check(tolerance: float = 1e-10, seed: int = 0) -> GradCheckReport:
    """Exactly linear head ``sum(W x + b)``: differences have no truncation error."""
    rng = np.random.default_rng(seed)
    x = Tensor(rng.uniform(-1, 1, (3, 5)))
    w = Tensor(rng.uniform(-1, 1, (4, 5)), requires_grad=True)
    b = Tensor(rng.uniform(-1, 1, 4), requires_grad=True)
    return check_gradients(lambda: tn.sum_axis(tn.linear(x, w, b)), {"w": w, "b": b}, tolerance, seed=seed)
