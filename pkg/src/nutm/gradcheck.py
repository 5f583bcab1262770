"""Finite-difference verification of every primitive and of a tiny machine."""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import finite_difference_check
from .machine import Machine, MachineConfig, MachineState
from .training import TrainConfig, stack_logits, total_loss

TOLERANCE = 1e-4
EPS = 1e-5
# The full rollout has entries whose gradient is ~1e-8 of the loss; at 1e-5
# roundoff in the loss dominates those, while truncation at 1e-4 stays ~1e-6.
MACHINE_EPS = 1e-4


@dataclass
class CheckResult:
    component: str
    max_rel_error: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < TOLERANCE


def _projected(fn, shapes, rng, sampler=None):
    """Builder whose loss is sum(fn(*params) * R) for a fixed random R."""
    sampler = sampler or (lambda shape: rng.standard_normal(shape))
    params = [sampler(s) if not callable(s) else s() for s in shapes]
    probe = fn(*[ad.Tensor(p) for p in params])
    weights = rng.standard_normal(probe.shape)

    def builder(ps):
        return ad.reduce_sum(ad.mul(fn(*ps), weights))

    return builder, params


def primitive_cases(seed: int = 0) -> dict:
    rng = np.random.default_rng(seed)
    pos = lambda shape: rng.uniform(0.5, 2.0, shape)  # noqa: E731
    bits = rng.integers(0, 2, (4, 3)).astype(float)
    mask = (rng.random((4, 1)) < 0.7).astype(float)
    mask[0] = 1.0
    cases = {
        "add": _projected(ad.add, [(3, 4), (4,)], rng),
        "sub": _projected(ad.sub, [(3, 4), (3, 1)], rng),
        "mul": _projected(ad.mul, [(3, 4), (3, 1)], rng),
        "div": _projected(ad.div, [(3, 4), lambda: pos((3, 4))], rng),
        "neg": _projected(ad.neg, [(3, 4)], rng),
        "matmul": _projected(ad.matmul, [(2, 3, 4), (4, 5)], rng),
        "reduce_sum": _projected(lambda x: ad.reduce_sum(x, axis=1), [(3, 4, 2)], rng),
        "exp": _projected(ad.exp, [(3, 4)], rng),
        "log": _projected(ad.log, [lambda: pos((3, 4))], rng),
        "tanh": _projected(ad.tanh, [(3, 4)], rng),
        "sigmoid": _projected(ad.sigmoid, [(3, 4)], rng),
        "softplus": _projected(ad.softplus, [(3, 4)], rng),
        "power": _projected(ad.power, [lambda: rng.uniform(0.2, 1.0, (3, 4)), lambda: rng.uniform(1.0, 3.0, (3, 1))], rng),
        "softmax": _projected(ad.softmax, [(3, 5)], rng),
        "cosine_similarity": _projected(ad.cosine_similarity, [(3, 1, 4), (3, 5, 4)], rng),
        "circular_convolve": _projected(ad.circular_convolve, [(3, 6), (3, 3)], rng),
        "concat": _projected(lambda a, b: ad.concat([a, b], axis=-1), [(3, 2), (3, 4)], rng),
        "reshape": _projected(lambda x: ad.reshape(x, (2, 6)), [(3, 4)], rng),
        "take": _projected(lambda x: x[1:3, ::2], [(4, 6)], rng),
        "frobenius_norm": _projected(ad.frobenius_norm, [(3, 3)], rng),
        "bce_with_logits": (lambda ps: ad.bce_with_logits(ps[0], bits, mask), [rng.standard_normal((4, 3))]),
    }
    return cases


def straight_through_error(seed: int = 0, eps: float = EPS) -> float:
    """Straight-through gradient against finite differences of the soft surrogate."""
    rng = np.random.default_rng(seed)
    x0 = rng.standard_normal((3, 4))
    weights = rng.standard_normal((3, 4))

    def soft_loss(ps):
        return ad.reduce_sum(ad.mul(ad.softmax(ps[0]), weights))

    x = ad.Tensor(x0.copy(), requires_grad=True)
    soft = ad.softmax(x)
    hard = np.eye(4)[np.argmax(soft.data, axis=-1)]
    ad.backward(ad.reduce_sum(ad.mul(ad.straight_through(soft, hard), weights)))
    y = ad.Tensor(x0.copy(), requires_grad=True)
    ad.backward(soft_loss([y]))
    if not np.array_equal(x.grad, y.grad):
        return float("inf")
    return finite_difference_check(soft_loss, [x0], eps) if np.any(x.grad) else 0.0


TINY_MACHINE = dict(input_size=3, output_size=2, hidden_size=6, memory_rows=8, memory_width=4,
                    programs=2, attention="key_value", regularizer="collapse")


def machine_builder(config: MachineConfig, steps: int = 3, batch: int = 2, seed: int = 0, eta: float = 0.1):
    """Builder over all machine parameters for a fixed random sequence loss."""
    machine = Machine(config, seed)
    rng = np.random.default_rng(seed + 1)
    inputs = rng.standard_normal((steps, batch, config.input_size))
    projection = rng.standard_normal((steps, batch, config.output_size))
    names = list(machine.parameters())
    values = [machine.parameters()[n].data.copy() for n in names]
    cfg = TrainConfig()

    memory = rng.standard_normal((batch, config.memory_rows, config.memory_width))
    weights = [rng.dirichlet(np.ones(config.memory_rows), batch) for _ in range(config.n_heads)]

    def builder(ps):
        machine.bind_parameters(dict(zip(names, ps)))
        outputs, _ = machine.run_sequence(inputs, state=_start_state(machine, memory, weights))
        # random projection of the logits: no constant offset to swamp roundoff
        pred = ad.reduce_sum(ad.mul(stack_logits(outputs), projection))
        return total_loss(pred, machine, cfg, 0, eta=eta)

    return builder, values, names


def _start_state(machine: Machine, memory, weights) -> MachineState:
    # A generic interior point: the default start has identical memory rows,
    # where content-addressing gradients vanish and only roundoff remains.
    reads = [np.einsum("bn,bnm->bm", w, memory) for w in weights[:machine.config.read_heads]]
    return MachineState(
        controller=machine.controller.initial_state(memory.shape[0]),
        memory=ad.Tensor(memory),
        weights=[ad.Tensor(w) for w in weights],
        reads=[ad.Tensor(r) for r in reads],
    )


def run_suite(seed: int = 0, include_machine: bool = True) -> list:
    results = []
    for name, (builder, params) in primitive_cases(seed).items():
        t0 = time.perf_counter()
        err = finite_difference_check(builder, params, EPS)
        results.append(CheckResult(name, err, time.perf_counter() - t0))
    t0 = time.perf_counter()
    results.append(CheckResult("straight_through", straight_through_error(seed), time.perf_counter() - t0))
    if include_machine:
        t0 = time.perf_counter()
        builder, values, _ = machine_builder(MachineConfig(**TINY_MACHINE), seed=seed)
        err = finite_difference_check(builder, values, MACHINE_EPS)
        results.append(CheckResult("nutm_step", err, time.perf_counter() - t0))
    return results
