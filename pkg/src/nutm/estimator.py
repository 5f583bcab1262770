"""scikit-learn style wrappers around the machine and the state projection."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .machine import Machine, MachineConfig
from .tasks import TaskInstance, collate
from .training import (TrainConfig, bit_errors, pca_project, probabilities,
                       stream_seeds, train_loop)


def check_sequences(X, name="X", width=None):
    """Validate a batch of sequences; returns a list of float64 (T_i, D) arrays.

    Accepts a (n, T, D) array or a list of (T_i, D) arrays. Every sequence
    must be nonempty, finite and share the same width.
    """
    if isinstance(X, np.ndarray) and X.ndim == 3:
        seqs = list(X)
    elif isinstance(X, (list, tuple)):
        seqs = list(X)
    else:
        raise ValueError(f"{name} must be a 3-D array or a list of 2-D arrays")
    if not seqs:
        raise ValueError(f"{name} contains no sequences")
    out = [check_array(s, dtype=np.float64, ensure_min_samples=1, input_name=name) for s in seqs]
    widths = {s.shape[1] for s in out}
    if len(widths) != 1:
        raise ValueError(f"{name}: sequences have mixed widths {sorted(widths)}")
    if width is not None and widths != {width}:
        raise ValueError(f"{name} has width {widths.pop()}, expected {width}")
    return out


def check_targets(X, y, mask=None):
    """Pair validated inputs with binary targets and an optional per-step mask."""
    xs = check_sequences(X)
    ys = check_sequences(y, "y")
    if len(xs) != len(ys):
        raise ValueError(f"X has {len(xs)} sequences but y has {len(ys)}")
    masks = []
    for i, (a, b) in enumerate(zip(xs, ys)):
        if len(a) != len(b):
            raise ValueError(f"sequence {i}: X has {len(a)} steps but y has {len(b)}")
        if not np.isin(b, (0.0, 1.0)).all():
            raise ValueError(f"sequence {i}: targets must be 0/1")
        m = np.ones(len(a), dtype=bool) if mask is None else np.asarray(mask[i], dtype=bool)
        if m.shape != (len(a),):
            raise ValueError(f"sequence {i}: mask must have shape ({len(a)},), got {m.shape}")
        masks.append(m)
    if not any(m.any() for m in masks):
        raise ValueError("mask selects no timesteps")
    return [TaskInstance(a, b, m) for a, b, m in zip(xs, ys, masks)]


class NUTMSequenceClassifier(BaseEstimator):
    """Binary multi-output sequence model: an NTM (``programs=1``) or NUTM.

    ``fit`` trains on the given sequences with minibatches drawn with
    replacement; ``predict_proba`` returns one (T_i, O) array per sequence.
    """

    def __init__(self, hidden_size=100, controller="lstm", memory_rows=128, memory_width=20,
                 read_heads=1, write_heads=1, programs=2, key_size=None, attention="key_value",
                 regularizer="collapse", temperature=1.0, learning_rate=1e-4, batch_size=16,
                 max_iter=1000, clip=10.0, eta0=0.1, eta_decay=0.9, decay_interval=1000, random_state=0):
        self.hidden_size = hidden_size
        self.controller = controller
        self.memory_rows = memory_rows
        self.memory_width = memory_width
        self.read_heads = read_heads
        self.write_heads = write_heads
        self.programs = programs
        self.key_size = key_size
        self.attention = attention
        self.regularizer = regularizer
        self.temperature = temperature
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.max_iter = max_iter
        self.clip = clip
        self.eta0 = eta0
        self.eta_decay = eta_decay
        self.decay_interval = decay_interval
        self.random_state = random_state

    def _machine_config(self, n_in, n_out):
        return MachineConfig(n_in, n_out, self.hidden_size, self.controller, self.memory_rows, self.memory_width,
                             self.read_heads, self.write_heads, self.programs, self.key_size, self.attention,
                             self.regularizer, self.temperature)

    def fit(self, X, y, mask=None):
        data = check_targets(X, y, mask)
        self.n_features_in_ = data[0].inputs.shape[1]
        self.n_outputs_ = data[0].targets.shape[1]
        seed = 0 if self.random_state is None else int(self.random_state)
        streams = stream_seeds(seed)
        self.machine_ = Machine(self._machine_config(self.n_features_in_, self.n_outputs_), seed)
        cfg = TrainConfig(learning_rate=self.learning_rate, batch_size=self.batch_size, iterations=self.max_iter,
                          clip=self.clip, eta0=self.eta0, eta_decay=self.eta_decay,
                          decay_interval=self.decay_interval, seed=seed, log_interval=max(1, self.max_iter // 10))

        def source(rng, batch_size):
            return collate([data[i] for i in rng.integers(len(data), size=batch_size)])

        self.history_ = train_loop(self.machine_, source, cfg, streams=streams)
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "machine_")
        xs = check_sequences(X, width=self.n_features_in_)
        batch = collate([TaskInstance(x, np.zeros((len(x), self.n_outputs_)), np.ones(len(x), bool)) for x in xs])
        # A fresh noise stream per call keeps hard-attention predictions repeatable.
        seed = 0 if self.random_state is None else int(self.random_state)
        outputs, _ = self.machine_.run_sequence(batch.inputs, stream_seeds(seed)["gumbel"])
        probs = probabilities(outputs)
        return [probs[: len(x), j] for j, x in enumerate(xs)]

    def predict(self, X):
        return [(p > 0.5).astype(np.int64) for p in self.predict_proba(X)]

    def score(self, X, y, mask=None):
        """Bit accuracy over masked timesteps."""
        data = check_targets(X, y, mask)
        batch = collate(data)
        probs = _pad(self.predict_proba([d.inputs for d in data]), len(batch.inputs))
        errors = bit_errors(probs, batch.targets, batch.mask)
        return 1.0 - float(errors.sum()) / float(batch.mask.sum() * self.n_outputs_)


def _pad(seqs, t):
    out = np.zeros((t, len(seqs), seqs[0].shape[1]))
    for j, s in enumerate(seqs):
        out[: len(s), j] = s
    return out


class StateProjector(TransformerMixin, BaseEstimator):
    """Principal-component projection of controller states."""

    def __init__(self, n_components=2, tol=1e-12, max_iter=200_000, random_state=0):
        self.n_components = n_components
        self.tol = tol
        self.max_iter = max_iter
        self.random_state = random_state

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64, ensure_min_samples=2, ensure_min_features=2)
        if not 1 <= self.n_components <= X.shape[1]:
            raise ValueError(f"n_components must lie in [1, {X.shape[1]}], got {self.n_components}")
        result = pca_project(X, self.n_components, self.tol, self.max_iter, self.random_state or 0)
        self.n_features_in_ = X.shape[1]
        self.mean_ = result.mean
        self.components_ = result.components
        self.explained_variance_ = result.explained_variance
        self.degenerate_ = result.flagged
        return self

    def transform(self, X):
        check_is_fitted(self, "components_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return (X - self.mean_) @ self.components_.T
