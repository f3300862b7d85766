"""Server-side aggregation rules.

Every rule takes the current :class:`ServerState` and the round's client
deltas and returns a new state. Deltas are always reduced in ascending
client-id order, so shuffling the inputs never changes the result.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import List, Optional, Sequence

import numpy as np

from .paramcore import ParamVector, combine, dot, mean, softmax_stable

ATTENTION_OPTIONS = ("self", "global", "time")


@dataclass(frozen=True)
class RoundUpdates:
    client_ids: List[int]
    current_deltas: List[ParamVector]
    previous_deltas: List[ParamVector]

    def __post_init__(self):
        n = len(self.client_ids)
        if n < 1:
            raise ValueError("round updates are empty")
        if len(self.current_deltas) != n or len(self.previous_deltas) != n:
            raise ValueError("client ids, current deltas and previous deltas differ in count")
        if len(set(self.client_ids)) != n:
            raise ValueError("duplicate client ids in round updates")
        d = len(self.current_deltas[0])
        for v in (*self.current_deltas, *self.previous_deltas):
            if len(v) != d:
                raise ValueError(f"delta lengths differ: {len(v)} vs {d}")

    def __len__(self) -> int:
        return len(self.client_ids)

    def sorted(self) -> "RoundUpdates":
        order = sorted(range(len(self.client_ids)), key=lambda k: self.client_ids[k])
        return RoundUpdates(
            [self.client_ids[k] for k in order],
            [self.current_deltas[k] for k in order],
            [self.previous_deltas[k] for k in order],
        )


@dataclass(frozen=True)
class ServerState:
    params: ParamVector
    prev_global_delta: ParamVector
    momentum: ParamVector
    adam_m: ParamVector
    adam_v: ParamVector
    control: ParamVector
    round: int = 0

    @classmethod
    def initial(cls, params) -> "ServerState":
        w = np.array(params, dtype=np.float64).reshape(-1)
        z = np.zeros_like(w)
        return cls(w, z, z.copy(), z.copy(), z.copy(), z.copy(), 0)

    def _apply(self, step: ParamVector, **changes) -> "ServerState":
        return replace(self, params=self.params + step, prev_global_delta=step,
                       round=self.round + 1, **changes)


def average_aggregate(state: ServerState, updates: RoundUpdates) -> ServerState:
    return state._apply(mean(updates.sorted().current_deltas))


def fedavgm_aggregate(state: ServerState, updates: RoundUpdates,
                      beta: float = 0.9) -> ServerState:
    if not 0 <= beta < 1:
        raise ValueError(f"beta must lie in [0, 1), got {beta}")
    v = beta * state.momentum + mean(updates.sorted().current_deltas)
    return state._apply(v, momentum=v)


def fedadam_aggregate(state: ServerState, updates: RoundUpdates, beta1: float = 0.9,
                      beta2: float = 0.99, tau: float = 1e-2,
                      server_lr: float = 0.1) -> ServerState:
    """Adam on the mean delta, without bias correction."""
    if not (0 <= beta1 < 1 and 0 <= beta2 < 1):
        raise ValueError("beta1 and beta2 must lie in [0, 1)")
    if not tau > 0:
        raise ValueError("tau must be positive")
    if not server_lr > 0:
        raise ValueError("server_lr must be positive")
    d = mean(updates.sorted().current_deltas)
    m = beta1 * state.adam_m + (1 - beta1) * d
    v = beta2 * state.adam_v + (1 - beta2) * d * d
    step = server_lr * m / (np.sqrt(v) + tau)
    return state._apply(step, adam_m=m, adam_v=v)


def scaffold_aggregate(state: ServerState, updates: RoundUpdates,
                       control_deltas: Sequence[ParamVector],
                       num_clients: int) -> ServerState:
    """Mean delta step plus ``c += (1/P) * sum_i dc_i`` on the server control."""
    order = sorted(range(len(updates)), key=lambda k: updates.client_ids[k])
    step = mean([updates.current_deltas[k] for k in order])
    dc = combine([1.0 / num_clients] * len(order), [control_deltas[k] for k in order])
    return state._apply(step, control=state.control + dc)


# --------------------------------------------------------------------------
# attention


def _shared_scores(updates: RoundUpdates, option: str) -> np.ndarray:
    cur = updates.current_deltas
    if option == "global":
        q = mean(updates.sorted().current_deltas)
        return softmax_stable([dot(q, k) for k in cur])
    # time: each key is scored against the same client's previous delta
    return softmax_stable([dot(p, k) for p, k in zip(updates.previous_deltas, cur)])


def attention_scores(updates: RoundUpdates, option: str) -> np.ndarray:
    """Row-stochastic matrix ``alpha[i, j]`` over the sampled clients.

    ``self`` queries with each client's own current delta. ``global`` uses
    the round's mean delta as a single query, and ``time`` scores each key
    against that client's previous-round delta, so both give identical rows.
    """
    if option not in ATTENTION_OPTIONS:
        raise ValueError(f"unknown attention option {option!r}")
    n = len(updates)
    cur = updates.current_deltas
    if option == "self":
        return np.array([softmax_stable([dot(q, k) for k in cur]) for q in cur])
    row = _shared_scores(updates, option)
    return np.tile(row, (n, 1))


def igfl_server_aggregate(state: ServerState, updates: RoundUpdates, option: str,
                          uniform: bool = False,
                          scores_out: Optional[list] = None) -> ServerState:
    """Attention-reweighted averaging of the round's deltas.

    ``uniform=True`` replaces the scores by ``1/|S|`` (a test hook); the
    step is then bit-identical to :func:`average_aggregate`. When
    ``scores_out`` is a list the score matrix (in ascending client-id order)
    is appended to it.
    """
    if option not in ATTENTION_OPTIONS:
        raise ValueError(f"unknown attention option {option!r}")
    upd = updates.sorted()
    n = len(upd)
    cur = upd.current_deltas
    if uniform:
        alpha = np.full((n, n), 1.0 / n)
        step = mean(cur)
    elif option == "self":
        alpha = attention_scores(upd, option)
        step = mean([combine(row, cur) for row in alpha])
    else:
        alpha = attention_scores(upd, option)
        step = combine(alpha[0], cur)
    if scores_out is not None:
        scores_out.append(alpha)
    return state._apply(step)


def reweighted_deltas(updates: RoundUpdates, option: str) -> List[ParamVector]:
    """Per-client attention outputs, in the input order."""
    alpha = attention_scores(updates, option)
    return [combine(row, updates.current_deltas) for row in alpha]
