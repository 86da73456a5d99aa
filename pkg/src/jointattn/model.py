"""Assembly of the full pipeline: extractor -> 3-d convnet -> attention/LSTM."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .attention import AttentionParams, PyramidLayout
from .config import ModelConfig
from .errors import ConfigError, ContractError, DimensionError
from .layers import Conv3dLayer, DenseLayer, Module, PreConvExtractor, as_rng, init_params
from .lstm import JointLSTMCell, LSTMCell, unroll
from .supervision import DeepSupervisionLoss, class_probs, total_loss
from .tensor import Tensor

# Stream order per branch count; the deep stream is the regularizer target.
STREAMS = {1: ("deep",), 2: ("shallow", "deep"), 3: ("shallow", "deep", "motion")}
TRUNK_WIDTH = 16
DEEP_LAYERS = 2


@dataclass
class ForwardOutput:
    lstm_probs: Tensor  # (batch, T, C)
    head_probs: Tensor | None  # (batch, T, C)
    attmaps: Tensor  # (batch, T, K*K)
    reg_cube: Tensor  # (batch, T, K*K, N)
    hidden: Tensor  # (batch, T, H)


class Model(Module):
    def __init__(self, cfg: ModelConfig, seed: int | None = None):
        super().__init__()
        self.cfg = cfg
        rng = as_rng(cfg.seed if seed is None else seed)
        N, K, H, C, B = cfg.N, cfg.K, cfg.H, cfg.C, cfg.B
        self.streams = STREAMS[B]
        self.extractor = self.add_module(
            "extractor",
            PreConvExtractor(N, 1, TRUNK_WIDTH, DEEP_LAYERS, seed=rng, trainable=cfg.finetune_extractor),
        )
        k = cfg.kernel
        self.conv = []
        if cfg.conv3d:
            for s in self.streams:
                layers = [
                    self.add_module(f"conv3d_{s}{j}", Conv3dLayer(N, N, (k, k, k), seed=rng))
                    for j in range(cfg.conv3d_layers)
                ]
                self.conv.append(layers)
            self.head1 = self.add_module("head3d_fc1", DenseLayer(B * N, cfg.head_width, seed=rng))
            self.head2 = self.add_module("head3d_fc2", DenseLayer(cfg.head_width, C, seed=rng))
        self.layout = PyramidLayout(K) if cfg.pyramid else None
        regions = self.layout.n_regions if self.layout else 1
        in_dim = regions * N
        if cfg.cell == "joint":
            self.cell = self.add_module(
                "lstm", JointLSTMCell([in_dim] * B, H, cfg.fusion, diagonal_fusion=cfg.diagonal_fusion, seed=rng)
            )
        else:
            self.cell = self.add_module("lstm", LSTMCell(in_dim * B, H, seed=rng))
        self.upper = [self.add_module(f"lstm_up{j}", LSTMCell(H, H, seed=rng)) for j in range(1, cfg.lstm_layers)]
        self.attention = self.add_module("attention", AttentionParams(K * K, H, seed=rng))
        self.w_prob = self.register("w_prob", init_params((C, H), rng))
        # per-stream channel statistics of the extractor output (fitted, not trained)
        self.feat_mean = self.register("feat_mean", Tensor(np.zeros((B, N))))
        self.feat_inv_std = self.register("feat_inv_std", Tensor(np.ones((B, N))))

    # -- feature standardization -------------------------------------------
    def fit_feature_norm(self, stream_cubes, eps: float = 1e-6) -> None:
        """Set channel mean and inverse std per stream from raw ``(..., N)`` cubes.

        ``stream_cubes`` yields one list of per-stream arrays per video.
        """
        if not self.cfg.feature_norm:
            return
        S, N = len(self.streams), self.cfg.N
        count = 0
        total = np.zeros((S, N))
        total_sq = np.zeros((S, N))
        for cubes in stream_cubes:
            for j, c in enumerate(cubes):
                flat = np.asarray(c.data if isinstance(c, Tensor) else c).reshape(-1, N)
                total[j] += flat.sum(axis=0)
                total_sq[j] += np.einsum("ij,ij->j", flat, flat)
            count += flat.shape[0]
        if count == 0:
            raise ContractError("no features to fit normalization on")
        mean = total / count
        var = np.maximum(total_sq / count - mean * mean, 0.0)
        self.feat_mean.data = mean
        self.feat_inv_std.data = 1.0 / (np.sqrt(var) + eps)

    def normalize(self, stream_cubes) -> list:
        """Standardize per-stream ``(..., N)`` cubes; tensors keep their graph."""
        if not self.cfg.feature_norm:
            return list(stream_cubes)
        out = []
        for j, c in enumerate(stream_cubes):
            mean, inv = self.feat_mean.data[j], self.feat_inv_std.data[j]
            if isinstance(c, Tensor) and c.requires_grad:
                m = tn.broadcast(Tensor(mean), c.shape)
                out.append(tn.mul(tn.sub(c, m), tn.broadcast(Tensor(inv), c.shape)))
            else:
                out.append(Tensor((np.asarray(c.data if isinstance(c, Tensor) else c) - mean) * inv))
        return out

    # -- features ---------------------------------------------------------
    def stream_features(self, frames) -> list:
        """``(T, 1, H, W)`` frames -> one ``(T, K*K, N)`` tensor per stream."""
        frames = frames if isinstance(frames, Tensor) else Tensor(np.asarray(frames, dtype=np.float64))
        size = self.cfg.image_size
        if frames.shape[2:] != (size, size):
            raise ConfigError(f"frames are {frames.shape[2:]}, config K={self.cfg.K} needs {size}x{size}")
        frozen = not self.cfg.finetune_extractor
        with _maybe_no_grad(frozen):
            shallow, deep = self.extractor(frames)
            out = {"shallow": shallow, "deep": deep}
            if "motion" in self.streams:
                d = np.abs(np.diff(frames.data, axis=0, prepend=frames.data[:1]))
                out["motion"] = self.extractor(Tensor(d))[0]
        return [out[s] for s in self.streams]

    # -- forward ----------------------------------------------------------
    def forward(self, stream_cubes, frozen_attention=None) -> ForwardOutput:
        """``stream_cubes``: per stream, ``(batch, T, K*K, N)``."""
        cfg = self.cfg
        cubes = [c if isinstance(c, Tensor) else Tensor(c) for c in stream_cubes]
        if len(cubes) != len(self.streams):
            raise DimensionError(f"expected {len(self.streams)} streams, got {len(cubes)}")
        nb, T, k2, n = cubes[0].shape
        if k2 != cfg.K * cfg.K or n != cfg.N:
            raise DimensionError(f"cube shape {cubes[0].shape} does not match K={cfg.K}, N={cfg.N}")
        head_probs = None
        if cfg.conv3d:
            processed = []
            for cube, layers in zip(cubes, self.conv):
                x = tn.reshape(cube, (nb, T, cfg.K, cfg.K, n))
                for layer in layers:
                    x = layer(x)
                processed.append(tn.reshape(x, (nb, T, k2, n)))
            cubes = processed
            pooled = [tn.mean_axis(c, axis=2) for c in cubes]
            feats = pooled[0] if len(pooled) == 1 else tn.concat(pooled, axis=-1)
            head_probs = tn.softmax(self.head2(self.head1(feats, "relu")), axis=-1)
        states, attmaps = unroll(cubes, self.cell, self.attention, self.layout, self.upper,
                                 frozen_attention=frozen_attention)
        hidden = tn.stack([s.h for s in states], axis=1)
        probs = class_probs(hidden, self.w_prob)
        att = tn.stack(attmaps, axis=1)
        reg_cube = cubes[self.streams.index("deep")]
        return ForwardOutput(probs, head_probs, att, reg_cube, hidden)

    def loss(self, out: ForwardOutput, labels, reg_target=None) -> DeepSupervisionLoss:
        """Deep-supervision loss for a forward pass.

        ``reg_target`` replaces the attention maps inside the regularizer by a
        fixed array.  Since the regularizer sees attention detached anyway this
        leaves gradients unchanged; finite-difference checks use it so that the
        perturbed objective holds the target fixed too.
        """
        cfg = self.cfg
        # standardized features can be negative, so without the 3-d convnet the
        # energy target is undefined; the regularizer needs the relu output
        reg = cfg.regularizer and cfg.conv3d
        target = out.attmaps if reg_target is None else Tensor(reg_target)
        return total_loss(
            out.lstm_probs, labels, out.head_probs,
            target if reg else None, out.reg_cube if reg else None,
            self.trainable_parameters(), cfg.effective_lam if reg else 0.0, cfg.zeta,
        )

    def parameter_count(self, trainable_only: bool = True) -> int:
        ps = self.trainable_parameters() if trainable_only else [p for _, p in self.named_parameters()]
        return tn.parameters_size(ps)

    def state_dict(self) -> dict:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise ConfigError(f"parameter mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, p in own.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != p.shape:
                raise DimensionError(f"{name}: stored shape {value.shape}, model shape {p.shape}")
            p.data = value.copy()


class _maybe_no_grad:
    def __init__(self, active: bool):
        self.active = active
        self.ctx = tn.no_grad()

    def __enter__(self):
        if self.active:
            self.ctx.__enter__()

    def __exit__(self, *exc):
        if self.active:
            self.ctx.__exit__(*exc)


def build_model(cfg: ModelConfig, seed: int | None = None) -> Model:
    return Model(cfg, seed)


def expected_parameter_count(cfg: ModelConfig, trainable_only: bool = True) -> int:
    """Closed-form parameter count for ``cfg`` (cross-check for build_model)."""
    N, K, H, C, B = cfg.N, cfg.K, cfg.H, cfg.C, cfg.B
    total = 0
    if cfg.conv3d:
        total += B * cfg.conv3d_layers * (N * N * cfg.kernel ** 3 + N)
        total += B * N * cfg.head_width + cfg.head_width + cfg.head_width * C + C
    D = (5 if cfg.pyramid else 1) * N
    if cfg.cell == "joint":
        fusion = H if cfg.diagonal_fusion else H * H
        per_branch = (H * D + H) + 3 * (H * H + H * H + H) + H * H + 3 * fusion
        total += B * per_branch + H * H + H
    else:
        total += 4 * (H * B * D + H * H + H)
    total += (cfg.lstm_layers - 1) * 4 * (2 * H * H + H)
    total += K * K * H + C * H
    if not trainable_only:
        total += 2 * B * N
    if cfg.finetune_extractor or not trainable_only:
        widths = [1, TRUNK_WIDTH, N, N]
        total += sum(widths[i + 1] * widths[i] * 9 + widths[i + 1] for i in range(3))
        total += DEEP_LAYERS * (N * N * 9 + N)
    return total
