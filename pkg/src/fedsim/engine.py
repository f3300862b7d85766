"""The outer federated loop.

A run is described by a :class:`RunConfig` and executed against a *task*,
which knows how many clients there are, what each client's model and batch
stream look like, and how to score a global parameter vector. Two tasks
exist: :class:`ClassificationTask` (a dataset split across clients) and
:class:`QuadraticTask` (one analytic quadratic per client).
"""

from __future__ import annotations

import dataclasses
import math
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import data as data_mod
from .client import (
    ClientRoundInput,
    ClientState,
    igfl_client_round,
    local_sgd_round,
    scaffold_client_round,
)
from .data import Dataset, Partition
from .models import (
    Batch,
    DivergenceError,
    QuadraticModel,
    make_model,
    predict_accuracy,
    quadratic_optimum,
)
from .paramcore import ParamVector
from .server import (
    ATTENTION_OPTIONS,
    RoundUpdates,
    ServerState,
    average_aggregate,
    fedadam_aggregate,
    fedavgm_aggregate,
    igfl_server_aggregate,
    scaffold_aggregate,
)

ALGORITHMS = ("fedavg", "fedavgm", "fedadam", "scaffold", "igfl_c", "igfl_s", "igfl")
PARTITIONS = ("sort", "paired", "dirichlet")
DATASETS = ("synthetic", "idx", "quadratic")
MODELS = ("logistic", "mlp")

_TAG_SAMPLE = 21
_TAG_INIT = 22
_TAG_QUAD = 23

_CORRECTED_CLIENTS = ("igfl_c", "igfl")
_ATTENTION_SERVERS = ("igfl_s", "igfl")


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        self.key = key
        super().__init__(f"{key}: {message}")


@dataclass
class RunConfig:
    algo: str = "fedavg"
    attention: str = "self"
    clients: int = 10
    rounds: int = 100
    sample_rate: float = 1.0
    batch_size: int = 100
    epochs: int = 1
    lr: float = 0.1
    beta: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.99
    tau: float = 0.01
    server_lr: float = 0.1
    seed: int = 0
    eval_every: int = 1
    # data
    dataset: str = "synthetic"
    partition: str = "sort"
    rho: float = 1.0
    num_classes: int = 10
    per_class: int = 1000
    dim: int = 32
    separation: float = 3.0
    test_fraction: float = 0.2
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""
    model: str = "mlp"
    hidden: int = 32
    # quadratic testbed
    quad_dim: int = 5
    quad_spread: float = 5.0
    quad_curv_min: float = 0.01
    quad_curv_max: float = 1.0
    local_steps: int = 10
    # test hooks and output
    client_correction: bool = True
    uniform_attention: bool = False
    timing: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        def choice(key, options):
            if getattr(self, key) not in options:
                raise ConfigError(key, f"{getattr(self, key)!r} not in {options}")

        def positive(*keys):
            for key in keys:
                if not getattr(self, key) > 0:
                    raise ConfigError(key, f"must be positive, got {getattr(self, key)}")

        choice("algo", ALGORITHMS)
        choice("attention", ATTENTION_OPTIONS)
        choice("dataset", DATASETS)
        choice("partition", PARTITIONS)
        choice("model", MODELS)
        positive("clients", "rounds", "batch_size", "epochs", "lr", "eval_every",
                 "rho", "tau", "server_lr", "num_classes", "per_class", "dim",
                 "separation", "hidden", "quad_dim", "local_steps", "quad_curv_min")
        if not 0 < self.sample_rate <= 1:
            raise ConfigError("sample_rate", f"must lie in (0, 1], got {self.sample_rate}")
        for key in ("beta", "beta1", "beta2"):
            if not 0 <= getattr(self, key) < 1:
                raise ConfigError(key, f"must lie in [0, 1), got {getattr(self, key)}")
        if not 0 < self.test_fraction < 1:
            raise ConfigError("test_fraction", "must lie in (0, 1)")
        if self.quad_curv_max < self.quad_curv_min:
            raise ConfigError("quad_curv_max", "must be >= quad_curv_min")
        if self.dataset == "idx" and not (self.train_images and self.train_labels):
            raise ConfigError("train_images", "idx datasets need train_images and train_labels")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)


@dataclass
class RoundMetrics:
    round: int
    train_loss: float
    test_accuracy: float
    drift: float
    elapsed_ms: float
    sampled: List[int] = field(default_factory=list)


# --------------------------------------------------------------------------
# tasks


class ClassificationTask:
    def __init__(self, model, train: Dataset, partition: Partition, test: Dataset,
                 batch_size: int, epochs: int, seed: int):
        self.model = model
        self.train = train
        self.partition = partition
        self.test = test
        self.batch_size = batch_size
        self.epochs = epochs
        self.seed = seed
        covered = np.sort(np.concatenate(partition.client_indices))
        self._train_batch = Batch(train.features[covered], train.labels[covered])
        self._test_batch = Batch(test.features, test.labels)

    @property
    def num_clients(self) -> int:
        return len(self.partition)

    @property
    def num_params(self) -> int:
        return self.model.num_params

    def init_params(self, seed: int) -> ParamVector:
        return self.model.init_params(np.random.default_rng([seed, _TAG_INIT]))

    def client_model(self, i: int):
        return self.model

    def client_batches(self, i: int, round_index: int) -> List[Batch]:
        idx = self.partition.client_indices[i]
        chunks = data_mod.epoch_batches(idx, self.batch_size, self.epochs,
                                        (self.seed, i, round_index))
        f, y = self.train.features, self.train.labels
        return [Batch(f[c], y[c]) for c in chunks]

    def train_loss(self, w) -> float:
        return self.model.loss(w, self._train_batch)

    def test_accuracy(self, w) -> float:
        return predict_accuracy(self.model, w, self._test_batch)

    def client_labels(self) -> List[set]:
        return [set(np.unique(self.train.labels[idx]).tolist())
                for idx in self.partition.client_indices]


class QuadraticTask:
    """One diagonal quadratic per client; every local step is full-batch."""

    def __init__(self, models: Sequence[QuadraticModel], local_steps: int):
        self.models = list(models)
        self.local_steps = local_steps
        self.optimum = quadratic_optimum(self.models)

    @classmethod
    def random(cls, P: int, dim: int, spread: float, curv_min: float,
               curv_max: float, local_steps: int, seed: int) -> "QuadraticTask":
        rng = np.random.default_rng([seed, _TAG_QUAD])
        models = [
            QuadraticModel(rng.normal(0.0, spread, dim), rng.uniform(curv_min, curv_max, dim))
            for _ in range(P)
        ]
        return cls(models, local_steps)

    @property
    def num_clients(self) -> int:
        return len(self.models)

    @property
    def num_params(self) -> int:
        return self.models[0].num_params

    def init_params(self, seed: int) -> ParamVector:
        return np.zeros(self.num_params)

    def client_model(self, i: int):
        return self.models[i]

    def client_batches(self, i: int, round_index: int) -> list:
        return [None] * self.local_steps

    def train_loss(self, w) -> float:
        return math.fsum(m.loss(w) for m in self.models) / len(self.models)

    def test_accuracy(self, w) -> float:
        return float("nan")

    def distance_to_optimum(self, w) -> float:
        return float(np.linalg.norm(np.asarray(w) - self.optimum))


def build_task(config: RunConfig):
    if config.dataset == "quadratic":
        return QuadraticTask.random(config.clients, config.quad_dim, config.quad_spread,
                                    config.quad_curv_min, config.quad_curv_max,
                                    config.local_steps, config.seed)
    if config.dataset == "synthetic":
        full = data_mod.synth_gaussian_mixture(config.num_classes, config.per_class,
                                               config.dim, config.separation, config.seed)
        train, test = data_mod.train_test_split(full, config.test_fraction, config.seed)
    else:
        train = data_mod.load_idx(config.train_images, config.train_labels)
        if config.test_images:
            test = data_mod.load_idx(config.test_images, config.test_labels,
                                     num_classes=train.num_classes)
        else:
            train, test = data_mod.train_test_split(train, config.test_fraction, config.seed)
    return build_classification_task(config, train, test)


def build_classification_task(config: RunConfig, train: Dataset, test: Dataset,
                              partition: Optional[Partition] = None) -> ClassificationTask:
    if partition is None:
        if config.partition == "dirichlet":
            partition = data_mod.dirichlet_partition(train, config.clients, config.rho, config.seed)
        else:
            partition = data_mod.sort_and_partition(train, config.clients, config.seed,
                                                    paired=config.partition == "paired")
    model = make_model(config.model, train.dim, train.num_classes, config.hidden)
    return ClassificationTask(model, train, partition, test,
                              config.batch_size, config.epochs, config.seed)


# --------------------------------------------------------------------------
# round loop


def sample_clients(P: int, C: float, round_index: int, seed: int) -> List[int]:
    k = max(1, int(round(C * P)))
    if k >= P:
        return list(range(P))
    rng = np.random.default_rng([seed, _TAG_SAMPLE, round_index])
    return sorted(int(i) for i in rng.choice(P, size=k, replace=False))


def drift_metric(client_finals: Sequence[ParamVector], global_params: ParamVector) -> float:
    """Mean Euclidean distance of the clients' final local iterates from the global model."""
    if len(client_finals) == 0:
        raise ValueError("drift of an empty client list")
    g = np.asarray(global_params)
    return math.fsum(float(np.linalg.norm(np.asarray(w) - g)) for w in client_finals) / len(client_finals)


def _client_update(config, server_state, state, task, round_index, i, n_s):
    inp = ClientRoundInput(server_state.params, server_state.prev_global_delta, n_s,
                           config.lr, task.client_batches(i, round_index),
                           round_index=round_index, client_id=i)
    model = task.client_model(i)
    if config.algo in _CORRECTED_CLIENTS:
        return igfl_client_round(inp, state, model, correction=config.client_correction), None
    if config.algo == "scaffold":
        return scaffold_client_round(inp, state, server_state.control, model)
    return local_sgd_round(inp, model), None


def run_round(config: RunConfig, server_state: ServerState,
              client_states: List[ClientState], task, round_index: int,
              evaluate: bool = True, scores_out: Optional[list] = None):
    """Execute one round; ``client_states`` is updated in place for sampled clients."""
    start = time.perf_counter()
    sampled = sample_clients(task.num_clients, config.sample_rate, round_index, config.seed)
    n_s = len(sampled)
    deltas, previous, control_deltas = [], [], []
    with np.errstate(over="ignore", invalid="ignore"):
        for i in sampled:
            deltas_i, dc = _client_update(config, server_state, client_states[i], task,
                                          round_index, i, n_s)
            deltas.append(deltas_i)
            previous.append(client_states[i].last_update)
            if dc is not None:
                control_deltas.append(dc)

    updates = RoundUpdates(sampled, deltas, previous)
    if config.algo in ("fedavg", "igfl_c"):
        new_state = average_aggregate(server_state, updates)
    elif config.algo == "fedavgm":
        new_state = fedavgm_aggregate(server_state, updates, config.beta)
    elif config.algo == "fedadam":
        new_state = fedadam_aggregate(server_state, updates, config.beta1, config.beta2,
                                      config.tau, config.server_lr)
    elif config.algo == "scaffold":
        new_state = scaffold_aggregate(server_state, updates, control_deltas, task.num_clients)
    else:
        new_state = igfl_server_aggregate(server_state, updates, config.attention,
                                          uniform=config.uniform_attention,
                                          scores_out=scores_out)
    if not np.all(np.isfinite(new_state.params)):
        raise DivergenceError("non-finite global parameters", round_index)

    for k, i in enumerate(sampled):
        st = client_states[i]
        st.last_update = deltas[k]
        st.last_round_seen = round_index
        if config.algo == "scaffold":
            st.control_variate = st.control_variate + control_deltas[k]

    drift = drift_metric([server_state.params + d for d in deltas], server_state.params)
    if evaluate:
        with np.errstate(over="ignore", invalid="ignore"):
            train_loss = task.train_loss(new_state.params)
        if not math.isfinite(train_loss):
            raise DivergenceError(f"non-finite training loss {train_loss}", round_index)
        accuracy = task.test_accuracy(new_state.params)
    else:
        train_loss = accuracy = float("nan")
    elapsed = (time.perf_counter() - start) * 1000.0 if config.timing else 0.0
    return new_state, RoundMetrics(round_index + 1, train_loss, accuracy, drift, elapsed, sampled)


@dataclass
class TrainingResult:
    metrics: List[RoundMetrics]
    server_state: ServerState
    summary_accuracy: float
    final_drift: float
    client_states: List[ClientState] = field(default_factory=list)
    score_log: List[tuple] = field(default_factory=list)


def summary_window(num_evaluations: int) -> int:
    return max(1, -(-num_evaluations // 10))


def summarize_accuracy(metrics: Sequence[RoundMetrics]) -> float:
    """Mean test accuracy over the last tenth (rounded up) of evaluations."""
    if not metrics:
        return float("nan")
    tail = metrics[-summary_window(len(metrics)):]
    return math.fsum(m.test_accuracy for m in tail) / len(tail)


def run_training(config: RunConfig, task=None, on_metrics=None,
                 record_scores: bool = False) -> TrainingResult:
    """Run ``config.rounds`` rounds; ``on_metrics`` is called for each evaluated round."""
    if task is None:
        task = build_task(config)
    server = ServerState.initial(task.init_params(config.seed))
    clients = [ClientState.zeros(task.num_params) for _ in range(task.num_clients)]
    evaluated: List[RoundMetrics] = []
    score_log = []
    last_drift = float("nan")
    for r in range(config.rounds):
        evaluate = (r + 1) % config.eval_every == 0 or r == config.rounds - 1
        scores = [] if record_scores else None
        try:
            server, metrics = run_round(config, server, clients, task, r,
                                        evaluate=evaluate, scores_out=scores)
        except DivergenceError as exc:
            if exc.round_index is None:
                exc.round_index = r
            raise
        last_drift = metrics.drift
        if record_scores and scores:
            score_log.append((metrics.sampled, scores[0]))
        if evaluate:
            evaluated.append(metrics)
            if on_metrics is not None:
                on_metrics(metrics)
    return TrainingResult(evaluated, server, summarize_accuracy(evaluated), last_drift,
                          clients, score_log)


# --------------------------------------------------------------------------
# attention heatmap


def heatmap_from_scores(score_log, num_clients: int) -> np.ndarray:
    """Average each ``alpha[i, j]`` over the rounds where both clients took part."""
    total = np.zeros((num_clients, num_clients))
    count = np.zeros((num_clients, num_clients))
    for sampled, alpha in score_log:
        ids = np.asarray(sampled)
        total[np.ix_(ids, ids)] += alpha
        count[np.ix_(ids, ids)] += 1
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(count > 0, total / np.maximum(count, 1), np.nan)


def matching_rate(heatmap: np.ndarray, client_labels: Sequence[set]) -> float:
    """Share of label-sharing pairs ``(i, j), i != j`` scored above the off-diagonal median."""
    n = heatmap.shape[0]
    off = ~np.eye(n, dtype=bool) & np.isfinite(heatmap)
    median = float(np.median(heatmap[off]))
    pairs = [(i, j) for i in range(n) for j in range(n)
             if i != j and off[i, j] and client_labels[i] & client_labels[j]]
    if not pairs:
        return float("nan")
    return sum(heatmap[i, j] > median for i, j in pairs) / len(pairs)


def paired_top_rate(heatmap: np.ndarray, client_labels: Sequence[set]) -> float:
    """Share of rows whose largest off-diagonal score sits on a same-label-set client."""
    n = heatmap.shape[0]
    hits = 0
    for i in range(n):
        row = heatmap[i].copy()
        row[i] = -np.inf
        j = int(np.nanargmax(row))
        hits += client_labels[i] == client_labels[j]
    return hits / n


@dataclass
class HeatmapResult:
    heatmap: np.ndarray
    matching_rate: float
    paired_top_rate: float
    client_labels: List[set]
    training: TrainingResult


def attention_heatmap(config: RunConfig, task=None) -> HeatmapResult:
    if config.attention != "self" or config.algo not in _ATTENTION_SERVERS:
        raise ConfigError("attention", "the heatmap needs self-attention with algo igfl or igfl_s")
    if task is None:
        task = build_task(config)
    if not isinstance(task, ClassificationTask):
        raise ConfigError("dataset", "the heatmap needs a partitioned classification dataset")
    result = run_training(config, task, record_scores=True)
    hm = heatmap_from_scores(result.score_log, task.num_clients)
    labels = task.client_labels()
    return HeatmapResult(hm, matching_rate(hm, labels), paired_top_rate(hm, labels),
                         labels, result)
