"""Local training for one client in one round.

Three routines share the same calling convention: plain local SGD
(FedAvg), the individual/group corrected update used by IGFL, and the
SCAFFOLD control-variate update. Each returns the parameter delta
``w_final - global_params``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np

from .models import DivergenceError
from .paramcore import ParamVector


@dataclass
class ClientState:
    """Memory a client keeps between the rounds it takes part in."""

    last_update: ParamVector
    control_variate: ParamVector
    last_round_seen: int = -1

    @classmethod
    def zeros(cls, n: int) -> "ClientState":
        return cls(np.zeros(n), np.zeros(n))


@dataclass
class ClientRoundInput:
    global_params: ParamVector
    global_delta: ParamVector
    sample_count: int
    lr: float
    batches: Sequence = field(default_factory=list)
    round_index: Optional[int] = None
    client_id: Optional[int] = None

    def __post_init__(self):
        if self.sample_count < 1:
            raise ValueError("sample_count must be >= 1")
        if self.lr < 0:
            raise ValueError("learning rate must be non-negative")
        if len(self.batches) < 1:
            raise ValueError("a client round needs at least one batch")
        if len(self.global_delta) != len(self.global_params):
            raise ValueError("global delta and parameters differ in length")

    @property
    def T(self) -> int:
        return len(self.batches)


def _grad(model, w, batch, inp: ClientRoundInput) -> np.ndarray:
    g = model.gradient(w, batch)
    if not np.all(np.isfinite(g)):
        raise DivergenceError("non-finite gradient", inp.round_index, inp.client_id)
    return g


def _finish(w, inp: ClientRoundInput) -> ParamVector:
    if not np.all(np.isfinite(w)):
        raise DivergenceError("non-finite local parameters", inp.round_index, inp.client_id)
    return w - inp.global_params


def local_sgd_round(inp: ClientRoundInput, model) -> ParamVector:
    w = np.array(inp.global_params, dtype=np.float64)
    for batch in inp.batches:
        w = w - inp.lr * _grad(model, w, batch, inp)
    return _finish(w, inp)


def igfl_client_round(inp: ClientRoundInput, state: ClientState, model,
                      correction: bool = True,
                      return_trajectory: bool = False):
    """Local steps nudged by the client's own last update and the global delta.

    Each step moves by ``d_ind + d_grp`` where ``d_ind = -lr * g`` and
    ``d_grp = (d_ind - last_update / T) / |S| + global_delta / T``.
    ``correction=False`` drops ``d_grp`` entirely; the result is then
    bit-identical to :func:`local_sgd_round`.
    """
    if len(state.last_update) != len(inp.global_params):
        raise ValueError("client state and global parameters differ in length")
    T = inp.T
    inv_s = 1.0 / inp.sample_count
    own_avg = state.last_update / T
    grp_avg = inp.global_delta / T
    w = np.array(inp.global_params, dtype=np.float64)
    trajectory = [w]
    for batch in inp.batches:
        d_ind = -inp.lr * _grad(model, w, batch, inp)
        if correction:
            d_grp = inv_s * (d_ind - own_avg) + grp_avg
            w = w + d_ind + d_grp
        else:
            w = w + d_ind
        if return_trajectory:
            trajectory.append(w)
    delta = _finish(w, inp)
    return (delta, trajectory) if return_trajectory else delta


def scaffold_client_round(inp: ClientRoundInput, state: ClientState,
                          server_control: ParamVector, model
                          ) -> Tuple[ParamVector, ParamVector]:
    """SCAFFOLD local pass with the "option II" control-variate refresh.

    Returns ``(delta, control_delta)`` where ``control_delta`` is
    ``c_i_new - c_i_old``; the caller stores ``c_i_new`` in the state.
    """
    c_i = state.control_variate
    c = np.asarray(server_control, dtype=np.float64)
    if len(c_i) != len(inp.global_params) or len(c) != len(inp.global_params):
        raise ValueError("control variates and parameters differ in length")
    shift = c - c_i
    w = np.array(inp.global_params, dtype=np.float64)
    for batch in inp.batches:
        w = w - inp.lr * (_grad(model, w, batch, inp) + shift)
    delta = _finish(w, inp)
    if inp.lr == 0:
        return delta, np.zeros_like(delta)
    c_new = c_i - c - delta / (inp.T * inp.lr)
    return delta, c_new - c_i
