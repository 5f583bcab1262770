"""Loss assembly, optimization, metrics and trace/analysis export."""
from __future__ import annotations

import csv
import math
import os
import time
from dataclasses import dataclass, fields, replace
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .machine import Machine, save_checkpoint
from .tasks import Batch

METRICS_HEADER = ("iter", "loss", "bit_err", "bit_acc", "eta", "seconds")


class TrainingDiverged(RuntimeError):
    def __init__(self, iteration: int, value: float):
        super().__init__(f"non-finite loss {value} at iteration {iteration}")
        self.iteration = iteration


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    momentum: float = 0.9
    alpha: float = 0.95
    rms_eps: float = 1e-8
    clip: float = 10.0
    batch_size: int = 16
    iterations: int = 1000
    eta0: float = 0.1
    eta_decay: float = 0.9
    decay_interval: int = 1000
    seed: int = 0
    log_interval: int = 100
    checkpoint_interval: int = 0
    record_wall_clock: bool = False

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.clip <= 0:
            raise ValueError("clip must be positive")
        if not 0 < self.eta_decay <= 1:
            raise ValueError("eta_decay must lie in (0, 1]")
        if self.decay_interval < 1 or self.batch_size < 1 or self.iterations < 0 or self.log_interval < 1:
            raise ValueError("intervals and sizes must be positive")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class MetricRecord:
    iteration: int
    loss: float
    bit_error: float
    bit_accuracy: float
    eta: float
    seconds: float

    def csv_row(self, wall_clock: bool) -> list:
        seconds = f"{self.seconds:.3f}" if wall_clock else ""
        return [str(self.iteration), repr(self.loss), repr(self.bit_error), repr(self.bit_accuracy),
                repr(self.eta), seconds]


# -- losses ---------------------------------------------------------------------------


def stack_logits(logits) -> Tensor:
    if isinstance(logits, Tensor):
        return logits
    rows = [ad.reshape(x, (1,) + x.shape) for x in logits]
    return ad.concat(rows, axis=0)


def prediction_loss(logits, targets, mask) -> Tensor:
    """Masked binary cross-entropy summed over time and bits, divided by batch size.

    ``logits`` is a (T, B, O) tensor or a length-T list of (B, O) tensors.
    """
    logits = stack_logits(logits)
    targets = np.asarray(targets, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    if logits.shape != targets.shape or mask.shape != targets.shape[:2]:
        raise ad.ShapeError(f"prediction_loss: logits {logits.shape}, targets {targets.shape}, mask {mask.shape}")
    if not mask.any():
        raise ValueError("prediction_loss: the answer mask is empty")
    total = ad.bce_with_logits(logits, targets, mask[..., None])
    return ad.mul(total, 1.0 / targets.shape[1])


def anneal_eta(iteration: int, cfg: TrainConfig) -> float:
    if iteration < 0:
        raise ValueError("iteration must be non-negative")
    return cfg.eta0 * cfg.eta_decay ** (iteration // cfg.decay_interval)


def total_loss(pred: Tensor, machine: Machine, cfg: TrainConfig, iteration: int, eta: Optional[float] = None) -> Tensor:
    """Prediction loss plus the annealed key regularizer summed over heads."""
    eta = anneal_eta(iteration, cfg) if eta is None else eta
    if eta == 0 or machine.config.regularizer == "none" or machine.config.programs == 1:
        return pred
    return ad.add(pred, ad.mul(machine.regularization(), eta))


# -- optimization --------------------------------------------------------------------


def clip_gradients(grads: dict, bound: float) -> dict:
    return {name: np.clip(g, -bound, bound) for name, g in grads.items()}


class RMSprop:
    """RMSprop with momentum: sq <- a*sq + (1-a)*g^2; buf <- m*buf + g/(sqrt(sq)+eps); p -= lr*buf."""

    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        self.square_avg: dict = {}
        self.buffer: dict = {}

    def step(self, params: dict, grads: dict) -> None:
        cfg = self.cfg
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                g = np.zeros(p.shape)
            g = np.clip(g, -cfg.clip, cfg.clip)
            sq = self.square_avg.get(name)
            if sq is None:
                sq = np.zeros(p.shape)
                self.buffer[name] = np.zeros(p.shape)
            sq = cfg.alpha * sq + (1.0 - cfg.alpha) * g * g
            self.square_avg[name] = sq
            buf = cfg.momentum * self.buffer[name] + g / (np.sqrt(sq) + cfg.rms_eps)
            self.buffer[name] = buf
            p.data = p.data - cfg.learning_rate * buf


def rmsprop_step(params: dict, grads: dict, optimizer: RMSprop) -> dict:
    optimizer.step(params, grads)
    return params


# -- metrics -------------------------------------------------------------------------


def _threshold(pred) -> np.ndarray:
    return (np.asarray(pred, dtype=np.float64) > 0.5).astype(np.float64)


def bit_errors(pred, targets, mask) -> np.ndarray:
    """Per-sequence count of masked bits where the thresholded prediction is wrong.

    ``pred``/``targets`` are (T, B, O) probabilities/bits, ``mask`` is (T, B).
    """
    wrong = _threshold(pred) != np.asarray(targets)
    return np.sum(wrong * np.asarray(mask, dtype=bool)[..., None], axis=(0, 2))


def bit_error_per_sequence(pred, targets, mask) -> float:
    return float(np.mean(bit_errors(pred, targets, mask)))


def masked_bits_per_sequence(targets, mask) -> float:
    targets = np.asarray(targets)
    return float(np.sum(mask)) * targets.shape[-1] / targets.shape[1]


def bit_accuracy(pred, targets, mask) -> float:
    """One minus the fraction of masked bits predicted wrongly (totals, not per-sequence means)."""
    total_bits = float(np.sum(mask)) * np.asarray(targets).shape[-1]
    return 1.0 - float(np.sum(bit_errors(pred, targets, mask))) / total_bits


def probabilities(logits) -> np.ndarray:
    data = stack_logits(logits).data
    return 0.5 * (1.0 + np.tanh(0.5 * data))


# -- training ------------------------------------------------------------------------


def _batch_metrics(logits, batch: Batch):
    probs = probabilities(logits)
    err = bit_error_per_sequence(probs, batch.targets, batch.mask)
    bits = masked_bits_per_sequence(batch.targets, batch.mask)
    return err, bits


def train_step(machine: Machine, batch: Batch, optimizer: RMSprop, cfg: TrainConfig, iteration: int, rng=None):
    """One forward/backward/update; returns (prediction loss, bit error, masked bits per sequence)."""
    outputs, _ = machine.run_sequence(batch.inputs, rng)
    logits = stack_logits(outputs)
    pred = prediction_loss(logits, batch.targets, batch.mask)
    loss = total_loss(pred, machine, cfg, iteration)
    value = float(loss.data)
    if not math.isfinite(value):
        raise TrainingDiverged(iteration, value)
    params = machine.parameters()
    machine.zero_grad()
    grads = ad.backward(loss)
    optimizer.step(params, grads)
    err, bits = _batch_metrics(logits, batch)
    return float(pred.data), err, bits


def stream_seeds(seed: int) -> dict:
    """Independent named random streams derived from one seed."""
    return {name: np.random.default_rng([seed, i]) for i, name in enumerate(("init", "task", "gumbel", "eval"))}


def train_loop(machine: Machine, source: Callable, cfg: TrainConfig, out_dir: Optional[str] = None,
               callback: Optional[Callable] = None, checkpoint_sections: Optional[dict] = None,
               optimizer: Optional[RMSprop] = None, start_iteration: int = 0, streams: Optional[dict] = None):
    """Train for ``cfg.iterations`` iterations; returns the list of MetricRecords.

    ``source(rng, batch_size)`` yields a Batch. ``callback(record, machine)``
    runs at every log interval and may return True to stop early. With an
    ``out_dir`` the metrics CSV and checkpoints are written there.
    """
    streams = streams or stream_seeds(cfg.seed)
    optimizer = optimizer or RMSprop(cfg)
    records = []
    writer = None
    fh = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        fh = open(os.path.join(out_dir, "metrics.csv"), "w", newline="")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRICS_HEADER)
        save_checkpoint(os.path.join(out_dir, "ckpt_000000.bin"), machine, checkpoint_sections)
    start = time.perf_counter()
    window = []
    try:
        for i in range(start_iteration, start_iteration + cfg.iterations):
            batch = source(streams["task"], cfg.batch_size)
            window.append(train_step(machine, batch, optimizer, cfg, i, streams["gumbel"]))
            done = i + 1
            if done % cfg.log_interval == 0 or done == start_iteration + cfg.iterations:
                losses, errs, bits = zip(*window)
                err = float(np.mean(errs))
                record = MetricRecord(done, float(np.mean(losses)), err, 1.0 - err / float(np.mean(bits)),
                                      anneal_eta(i, cfg), time.perf_counter() - start)
                window = []
                records.append(record)
                if writer is not None:
                    writer.writerow(record.csv_row(cfg.record_wall_clock))
                    fh.flush()
                if callback is not None and callback(record, machine):
                    break
            if out_dir is not None and cfg.checkpoint_interval and done % cfg.checkpoint_interval == 0:
                save_checkpoint(os.path.join(out_dir, f"ckpt_{done:06d}.bin"), machine, checkpoint_sections)
    finally:
        if fh is not None:
            fh.close()
    if out_dir is not None:
        save_checkpoint(os.path.join(out_dir, "final.bin"), machine, checkpoint_sections)
    return records


def train_schedule(machine: Machine, phases, cfg: TrainConfig, layout=None, out_dir: Optional[str] = None,
                   callback: Optional[Callable] = None) -> dict:
    """Train through a sequence of task phases with one optimizer; returns {phase kind: records}.

    Each phase supplies ``kind``, ``iterations``, ``batch_size`` and ``spec``
    (see ``tasks.continual_schedule``). Iteration numbers, and so the
    regularizer annealing, run on across phase boundaries. All random
    streams are shared between phases. Without a ``layout`` every task is
    written in the union layout so input and output widths stay fixed.
    """
    from .tasks import TaskSource, union_layout

    streams = stream_seeds(cfg.seed)
    optimizer = RMSprop(cfg)
    history = {}
    start = 0
    for n, phase in enumerate(phases):
        phase_cfg = replace(cfg, iterations=phase.iterations, batch_size=phase.batch_size)
        phase_dir = None if out_dir is None else os.path.join(out_dir, f"phase{n}_{phase.kind}")
        source = TaskSource(phase.spec, layout=layout or union_layout(phase.spec.bits))
        history[phase.kind] = train_loop(machine, source, phase_cfg, phase_dir, callback, optimizer=optimizer,
                                         start_iteration=start, streams=streams)
        start += phase.iterations
    return history


def evaluate(machine: Machine, source: Callable, n_sequences: int = 1000, seed: int = 0,
             batch_size: int = 50, rng_gumbel=None) -> dict:
    """Mean bit error per sequence and bit accuracy over freshly drawn sequences."""
    rng = np.random.default_rng([seed, 3])
    errors, bits = [], []
    remaining = n_sequences
    while remaining > 0:
        b = min(batch_size, remaining)
        batch = source(rng, b)
        outputs, _ = machine.run_sequence(batch.inputs, rng_gumbel)
        probs = probabilities(outputs)
        errors.append(bit_errors(probs, batch.targets, batch.mask))
        bits.append(batch.mask.sum(axis=0) * batch.targets.shape[-1])
        remaining -= b
    errors = np.concatenate(errors)
    bits = np.concatenate(bits)
    mean_err = float(errors.mean())
    return {
        "bit_error": mean_err,
        "bit_accuracy": 1.0 - float(errors.sum() / bits.sum()),
        "error_rate": float(errors.sum() / bits.sum()),
        "sequences": int(n_sequences),
    }


# -- PCA ---------------------------------------------------------------------------------


@dataclass
class PCAResult:
    projections: np.ndarray
    components: np.ndarray
    explained_variance: np.ndarray
    mean: np.ndarray
    flagged: bool


def _power_iteration(cov, tol, max_iter, rng):
    v = rng.standard_normal(cov.shape[0])
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(max_iter):
        w = cov @ v
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return 0.0, v
        w /= norm
        new_lam = float(w @ cov @ w)
        if np.linalg.norm(w - v) < tol and abs(new_lam - lam) <= tol * max(abs(new_lam), 1.0):
            return new_lam, w
        v, lam = w, new_lam
    return lam, v


def pca_project(states, components: int = 2, tol: float = 1e-12, max_iter: int = 200_000, seed: int = 0) -> PCAResult:
    """Project mean-centred states onto their top principal directions.

    Directions come from power iteration with deflation on the sample
    covariance. A component with (numerically) zero variance is zeroed and
    the result is flagged.
    """
    x = np.asarray(states, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2 or x.shape[1] < 2:
        raise ValueError(f"need at least 2 states of width >= 2, got shape {x.shape}")
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / (x.shape[0] - 1)
    rng = np.random.default_rng(seed)
    scale = max(float(np.trace(cov)), np.finfo(float).tiny)
    dirs, variances = [], []
    flagged = False
    for _ in range(components):
        lam, v = _power_iteration(cov, tol, max_iter, rng)
        if lam <= 1e-12 * scale:
            flagged = True
            dirs.append(np.zeros(x.shape[1]))
            variances.append(0.0)
            continue
        v = v * np.sign(v[np.argmax(np.abs(v))])
        dirs.append(v)
        variances.append(lam)
        cov = cov - lam * np.outer(v, v)
    comps = np.array(dirs)
    return PCAResult(xc @ comps.T, comps, np.array(variances), mean, flagged)


# -- traces ------------------------------------------------------------------------------


def write_trace(path: str, trace, state_path: Optional[str] = None, batch_index: int = 0) -> None:
    """Line-delimited trace ``t,head,kind,address weights...,program weights...``.

    With ``state_path`` the controller feature vector of every timestep is
    written there, one row per timestep.
    """
    with open(path, "w") as fh:
        for t, step in enumerate(trace.steps):
            for n, kind in enumerate(step.kinds):
                w = step.weights[n][batch_index]
                p = step.programs[n][batch_index]
                values = ",".join(format(float(v), ".10g") for v in np.r_[w, p])
                fh.write(f"{t},{n},{kind},{values}\n")
    if state_path is not None:
        with open(state_path, "w") as fh:
            for step in trace.steps:
                fh.write(",".join(format(float(v), ".17g") for v in step.features[batch_index]) + "\n")


def read_trace(path: str, rows: int) -> list:
    """Parse a trace file written for a memory with ``rows`` slots."""
    records = []
    with open(path) as fh:
        for line in fh:
            parts = line.rstrip("\n").split(",")
            values = np.array([float(v) for v in parts[3:]])
            records.append({
                "t": int(parts[0]),
                "head": int(parts[1]),
                "kind": parts[2],
                "address": values[:rows],
                "program": values[rows:],
            })
    return records
