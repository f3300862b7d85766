"""scikit-learn compatible wrapper around a federated training run."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .data import Dataset
from .engine import RunConfig, build_classification_task, run_training


class FederatedClassifier(ClassifierMixin, BaseEstimator):
    """Train a classifier by simulating federated optimisation.

    ``fit`` splits ``(X, y)`` across ``clients`` simulated clients with the
    chosen non-IID partitioner and runs ``rounds`` communication rounds of
    ``algo``. The fitted global parameters are then used like any other
    linear or MLP classifier.

    Parameters mirror :class:`fedsim.engine.RunConfig`; see there for their
    meaning. ``eval_set=(X_val, y_val)`` may be passed to ``fit`` to record
    held-out accuracy in ``history_``.
    """

    def __init__(self, algo="igfl", attention="self", clients=10, rounds=100,
                 sample_rate=1.0, batch_size=100, epochs=1, lr=0.1, beta=0.9,
                 beta1=0.9, beta2=0.99, tau=0.01, server_lr=0.1,
                 partition="sort", rho=1.0, model="mlp", hidden=32,
                 eval_every=1, seed=0):
        self.algo = algo
        self.attention = attention
        self.clients = clients
        self.rounds = rounds
        self.sample_rate = sample_rate
        self.batch_size = batch_size
        self.epochs = epochs
        self.lr = lr
        self.beta = beta
        self.beta1 = beta1
        self.beta2 = beta2
        self.tau = tau
        self.server_lr = server_lr
        self.partition = partition
        self.rho = rho
        self.model = model
        self.hidden = hidden
        self.eval_every = eval_every
        self.seed = seed

    def _config(self) -> RunConfig:
        return RunConfig(timing=False, **self.get_params())

    def fit(self, X, y, eval_set=None):
        X, y = check_X_y(X, y, dtype=np.float64)
        check_classification_targets(y)
        self.classes_, encoded = np.unique(y, return_inverse=True)
        if self.classes_.shape[0] < 2:
            raise ValueError("need at least two classes to fit a classifier")
        config = self._config()
        k = self.classes_.shape[0]
        train = Dataset(X, encoded, k)
        if eval_set is not None:
            Xv, yv = check_X_y(*eval_set, dtype=np.float64)
            if not np.all(np.isin(yv, self.classes_)):
                raise ValueError("eval_set contains labels not seen in y")
            test = Dataset(Xv, np.searchsorted(self.classes_, yv), k)
        else:
            test = train
        task = build_classification_task(config, train, test)
        result = run_training(config, task)
        self.model_ = task.model
        self.coef_ = result.server_state.params
        self.history_ = result.metrics
        self.n_features_in_ = X.shape[1]
        return self

    def decision_function(self, X):
        check_is_fitted(self, "coef_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(
                f"X has {X.shape[1]} features, the model was fitted with {self.n_features_in_}"
            )
        return self.model_.scores(self.coef_, X)

    def predict_proba(self, X):
        s = self.decision_function(X)
        e = np.exp(s - s.max(axis=1, keepdims=True))
        return e / e.sum(axis=1, keepdims=True)

    def predict(self, X):
        scores = self.decision_function(X)
        return self.classes_[np.argmax(scores, axis=1)]
