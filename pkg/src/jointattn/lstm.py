"""Recurrent cells: the standard LSTM and the multi-input joint LSTM.

The joint cell keeps one set of tanh sub-gates per input branch and forms
each final gate as a sigmoid of a linear map of the corresponding sub-gates.
Two candidate-memory variants exist: ``early`` sums raw branch inputs through
per-branch matrices, ``late`` first multiplies each branch input by its
sub-input gate.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor as tn
from .attention import AttentionParams, PyramidLayout, attend, compute_attention, pyramid_readout
from .errors import ConfigError, ContractError, DimensionError
from .layers import Module, as_rng, init_params
from .tensor import Tensor

FUSION_MODES = ("early", "late")


@dataclass
class LstmState:
    h: Tensor
    c: Tensor

    @classmethod
    def zeros(cls, hidden: int, batch: int | None = None) -> "LstmState":
        shape = (hidden,) if batch is None else (batch, hidden)
        return cls(Tensor(np.zeros(shape)), Tensor(np.zeros(shape)))


@dataclass
class SubGates:
    i: list
    f: list
    o: list


def _bias(n: int) -> Tensor:
    return Tensor(np.zeros(n), requires_grad=True)


def _check_input(x: Tensor, expected: int, what: str) -> None:
    if x.shape[-1] != expected:
        raise DimensionError(f"{what}: expected last dim {expected}, got shape {x.shape}")


# ---------------------------------------------------------------------------
# Standard LSTM
# ---------------------------------------------------------------------------


class LSTMCell(Module):
    """Single-input LSTM with separate input/hidden matrices per gate."""

    gates = ("i", "f", "c", "o")

    def __init__(self, input_dim: int, hidden: int, seed=0):
        super().__init__()
        rng = as_rng(seed)
        self.input_dim = input_dim
        self.hidden = hidden
        for g in self.gates:
            self.register(f"w_x{g}", init_params((hidden, input_dim), rng))
            self.register(f"w_h{g}", init_params((hidden, hidden), rng))
            self.register(f"b_{g}", _bias(hidden))

    def p(self, name: str) -> Tensor:
        return self._params[name]

    def step(self, x, state: LstmState) -> LstmState:
        if isinstance(x, (list, tuple)):
            x = x[0] if len(x) == 1 else tn.concat(list(x), axis=-1)
        return lstm_step(x, state, self)


def lstm_step(x: Tensor, state: LstmState, cell: LSTMCell) -> LstmState:
    _check_input(x, cell.input_dim, "lstm_step input")
    _check_input(state.h, cell.hidden, "lstm_step hidden")
    p = cell.p

    def pre(g):
        return tn.add(tn.linear(x, p(f"w_x{g}"), p(f"b_{g}")), tn.linear(state.h, p(f"w_h{g}")))

    i = tn.sigmoid(pre("i"))
    f = tn.sigmoid(pre("f"))
    c_half = tn.tanh(pre("c"))
    o = tn.sigmoid(pre("o"))
    c = tn.add(tn.mul(f, state.c), tn.mul(i, c_half))
    h = tn.mul(o, tn.tanh(c))
    return LstmState(h, c)


# ---------------------------------------------------------------------------
# Joint LSTM
# ---------------------------------------------------------------------------


class JointLSTMCell(Module):
    """Joint LSTM over ``len(input_dims)`` branches.

    Each branch input is first mapped to the hidden width by its own affine
    projection (``project=False`` skips this; late fusion then needs every
    input width to equal ``hidden``).  ``diagonal_fusion`` restricts the
    sub-gate -> gate maps to elementwise scalings.
    """

    def __init__(self, input_dims: Sequence[int], hidden: int, mode: str = "late",
                 project: bool = True, diagonal_fusion: bool = False, seed=0):
        super().__init__()
        if mode not in FUSION_MODES:
            raise ConfigError(f"fusion mode must be one of {FUSION_MODES}, got {mode!r}")
        if not 1 <= len(input_dims) <= 3:
            raise ConfigError(f"joint LSTM supports 1..3 branches, got {len(input_dims)}")
        rng = as_rng(seed)
        self.mode = mode
        self.hidden = hidden
        self.project = project
        self.diagonal_fusion = diagonal_fusion
        self.input_dims = list(input_dims)
        self.branches = len(input_dims)
        H = hidden
        for k, d in enumerate(self.input_dims, start=1):
            if project:
                self.register(f"w_in{k}", init_params((H, d), rng))
                self.register(f"b_in{k}", _bias(H))
                d = H
            for g in ("i", "f", "o"):
                self.register(f"w_x{g}{k}", init_params((H, d), rng))
                self.register(f"w_h{g}{k}", init_params((H, H), rng))
                self.register(f"b_{g}{k}", _bias(H))
            self.register(f"w_xc{k}", init_params((H, d), rng))
            for g in ("ii", "ff", "oo"):
                if diagonal_fusion:
                    self.register(f"w_{g}{k}", Tensor(rng.uniform(0.5, 1.5, size=H), requires_grad=True))
                else:
                    self.register(f"w_{g}{k}", init_params((H, H), rng))
        self.register("w_hc", init_params((H, H), rng))
        self.register("b_c", _bias(H))

    def p(self, name: str) -> Tensor:
        return self._params[name]

    def gate_input_dim(self, k: int) -> int:
        return self.hidden if self.project else self.input_dims[k]

    def prepare(self, xs: Sequence[Tensor]) -> list:
        if len(xs) != self.branches:
            raise DimensionError(f"joint LSTM expects {self.branches} inputs, got {len(xs)}")
        out = []
        for k, x in enumerate(xs, start=1):
            _check_input(x, self.input_dims[k - 1], f"branch {k} input")
            if self.project:
                x = tn.linear(x, self.p(f"w_in{k}"), self.p(f"b_in{k}"))
            out.append(x)
        return out

    def step(self, xs: Sequence[Tensor], state: LstmState, force_subinput_ones: bool = False) -> LstmState:
        return joint_step(xs, state, self, force_subinput_ones=force_subinput_ones)


def sub_gates(xs: Sequence[Tensor], h_prev: Tensor, cell: JointLSTMCell) -> SubGates:
    """Per-branch tanh gates on already-projected inputs."""
    p = cell.p
    gates = {"i": [], "f": [], "o": []}
    for k, x in enumerate(xs, start=1):
        _check_input(x, cell.gate_input_dim(k - 1), f"branch {k} gate input")
        for g in gates:
            pre = tn.add(tn.linear(x, p(f"w_x{g}{k}"), p(f"b_{g}{k}")), tn.linear(h_prev, p(f"w_h{g}{k}")))
            gates[g].append(tn.tanh(pre))
    return SubGates(**gates)


def _fuse(values: Sequence[Tensor], weights: Sequence[Tensor], diagonal: bool) -> Tensor:
    terms = []
    for v, w in zip(values, weights):
        if diagonal:
            terms.append(tn.mul(tn.broadcast(w, v.shape), v))
        else:
            terms.append(tn.linear(v, w))
    return terms[0] if len(terms) == 1 else tn.add_n(terms)


def final_gates(sub: SubGates, cell: JointLSTMCell) -> tuple[Tensor, Tensor, Tensor]:
    """i = sigma(sum_k W_ii,k i_k), likewise f and o from their own sub-gates."""
    if len(sub.i) != cell.branches:
        raise ContractError(f"final_gates expects sub-gates for {cell.branches} branches, got {len(sub.i)}")
    K = range(1, cell.branches + 1)
    d = cell.diagonal_fusion
    i = tn.sigmoid(_fuse(sub.i, [cell.p(f"w_ii{k}") for k in K], d))
    f = tn.sigmoid(_fuse(sub.f, [cell.p(f"w_ff{k}") for k in K], d))
    o = tn.sigmoid(_fuse(sub.o, [cell.p(f"w_oo{k}") for k in K], d))
    return i, f, o


def candidate_memory(xs: Sequence[Tensor], sub: SubGates, h_prev: Tensor, cell: JointLSTMCell,
                     force_subinput_ones: bool = False) -> Tensor:
    terms = []
    for k, x in enumerate(xs, start=1):
        if cell.mode == "late" and not force_subinput_ones:
            x = tn.mul(x, sub.i[k - 1])
        terms.append(tn.linear(x, cell.p(f"w_xc{k}")))
    terms.append(tn.linear(h_prev, cell.p("w_hc"), cell.p("b_c")))
    return tn.tanh(tn.add_n(terms))


def joint_step(xs: Sequence[Tensor], state: LstmState, cell: JointLSTMCell,
               force_subinput_ones: bool = False) -> LstmState:
    """One joint-LSTM step on raw branch inputs.

    ``force_subinput_ones`` replaces the sub-input gates inside the late-fusion
    product ``x_k * i_k`` by ones; it is a test hook.
    """
    _check_input(state.h, cell.hidden, "joint_step hidden")
    xs = cell.prepare(xs)
    if cell.mode == "late":
        for k, x in enumerate(xs, start=1):
            if x.shape[-1] != cell.hidden:
                raise ContractError(f"late fusion needs branch width == hidden ({cell.hidden}), branch {k} has {x.shape[-1]}")
    sub = sub_gates(xs, state.h, cell)
    i, f, o = final_gates(sub, cell)
    c_half = candidate_memory(xs, sub, state.h, cell, force_subinput_ones)
    c = tn.add(tn.mul(f, state.c), tn.mul(i, c_half))
    h = tn.mul(o, tn.tanh(c))
    return LstmState(h, c)


# ---------------------------------------------------------------------------
# Unrolling with attention
# ---------------------------------------------------------------------------


def unroll(cubes: Sequence[Tensor], cell, att_params: AttentionParams,
           layout: PyramidLayout | None = None, upper: Sequence[LSTMCell] = (),
           frozen_attention: Callable | Tensor | None = None,
           readout_hook: Callable | None = None) -> tuple[list, list]:
    """Run the attention-driven recurrence over ``T`` steps.

    ``cubes`` holds one ``(batch, T, K*K, N)`` (or ``(T, K*K, N)``) tensor per
    branch.  At each step the attention map is computed from the previous top
    hidden state (zero at ``t=0``), every branch is read out through it (with
    the spatial pyramid when ``layout`` is given) and the cell advances.
    ``upper`` cells are stacked standard LSTMs fed by the hidden state below.

    Returns per-step top-layer states and attention maps.
    """
    if not cubes:
        raise ContractError("unroll needs at least one branch")
    batched = cubes[0].ndim == 4
    T = cubes[0].shape[1] if batched else cubes[0].shape[0]
    if T < 1:
        raise ContractError("unroll needs T >= 1")
    batch = cubes[0].shape[0] if batched else None
    states = [LstmState.zeros(cell.hidden, batch)] + [LstmState.zeros(u.hidden, batch) for u in upper]
    top_states, attmaps = [], []
    for t in range(T):
        h_top = states[-1].h
        if frozen_attention is None:
            att = compute_attention(h_top, att_params)
        elif callable(frozen_attention):
            att = frozen_attention(t)
        else:
            att = frozen_attention
        xs = []
        for cube in cubes:
            cube_t = cube[:, t] if batched else cube[t]
            xs.append(pyramid_readout(cube_t, att, layout) if layout is not None else attend(cube_t, att))
        if readout_hook is not None:
            xs = readout_hook(t, xs)
        states[0] = cell.step(xs, states[0])
        for j, u in enumerate(upper, start=1):
            states[j] = u.step(states[j - 1].h, states[j])
        top_states.append(states[-1])
        attmaps.append(att)
    return top_states, attmaps
