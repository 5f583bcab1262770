"""NTM data memory: content/location addressing, erase-add writes and reads.

All functions take tensors with arbitrary leading (batch) axes: a memory
is ``(..., N, M)``, an address weight ``(..., N)``, a key ``(..., M)`` and a
scalar control ``(..., 1)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

MEMORY_INIT = 1e-6

READ_FIELDS = ("key", "beta", "gate", "shift", "gamma")
WRITE_FIELDS = READ_FIELDS + ("erase", "add")


def interface_layout(kind: str, width: int) -> list[tuple[str, int]]:
    """Ordered (field, length) pairs of a raw interface vector for one head."""
    sizes = {"key": width, "beta": 1, "gate": 1, "shift": 3, "gamma": 1, "erase": width, "add": width}
    if kind == "read":
        fields = READ_FIELDS
    elif kind == "write":
        fields = WRITE_FIELDS
    else:
        raise ValueError(f"head kind must be 'read' or 'write', got {kind!r}")
    return [(f, sizes[f]) for f in fields]


def layout_length(kind: str, width: int) -> int:
    return sum(n for _, n in interface_layout(kind, width))


@dataclass
class InterfaceControls:
    key: Tensor
    beta: Tensor
    gate: Tensor
    shift: Tensor
    gamma: Tensor
    erase: Optional[Tensor] = None
    add: Optional[Tensor] = None


@dataclass
class HeadState:
    weights: Tensor
    read: Optional[Tensor] = None


@dataclass
class DataMemory:
    rows: int
    width: int

    def __post_init__(self):
        if self.rows < 1 or self.width < 1:
            raise ValueError(f"memory needs positive rows/width, got N={self.rows}, M={self.width}")

    def initial_matrix(self, batch: int) -> Tensor:
        return Tensor(np.full((batch, self.rows, self.width), MEMORY_INIT))

    def initial_weights(self, batch: int) -> Tensor:
        w = np.zeros((batch, self.rows))
        w[:, 0] = 1.0
        return Tensor(w)


def parse_interface(raw: Tensor, kind: str, width: int) -> InterfaceControls:
    """Split a raw interface vector and apply the range-enforcing activations."""
    layout = interface_layout(kind, width)
    expected = sum(n for _, n in layout)
    if raw.shape[-1] != expected:
        desc = ", ".join(f"{f}={n}" for f, n in layout)
        raise ad.ShapeError(
            f"{kind} interface expects length {expected} ({desc}), got {raw.shape[-1]}"
        )
    parts = {}
    start = 0
    lead = (slice(None),) * (raw.ndim - 1)
    for field, n in layout:
        parts[field] = raw[lead + (slice(start, start + n),)]
        start += n
    return InterfaceControls(
        key=parts["key"],
        beta=ad.softplus(parts["beta"]),
        gate=ad.sigmoid(parts["gate"]),
        shift=ad.softmax(parts["shift"]),
        gamma=1.0 + ad.softplus(parts["gamma"]),
        erase=ad.sigmoid(parts["erase"]) if "erase" in parts else None,
        add=parts.get("add"),
    )


def content_address(key: Tensor, beta: Tensor, memory: Tensor) -> Tensor:
    """softmax_i(beta * cos(key, memory[i]))."""
    key = ad.as_tensor(key)
    memory = ad.as_tensor(memory)
    if key.shape[-1] != memory.shape[-1]:
        raise ad.ShapeError(f"content_address: key {key.shape} vs memory {memory.shape}")
    k = ad.reshape(key, key.shape[:-1] + (1, key.shape[-1]))
    sim = ad.cosine_similarity(k, memory)
    return ad.softmax(ad.mul(beta, sim))


def interpolate_gate(w_content, w_prev, gate) -> Tensor:
    return ad.add(ad.mul(gate, w_content), ad.mul(ad.sub(1.0, gate), w_prev))


def shift_address(w_gated, shift) -> Tensor:
    return ad.circular_convolve(w_gated, shift)


def sharpen(w_shifted, gamma) -> Tensor:
    w_shifted = ad.as_tensor(w_shifted)
    if np.any(np.sum(w_shifted.data, axis=-1) <= 0):
        raise ValueError("sharpen: degenerate address (all-zero weighting)")
    powered = ad.power(w_shifted, gamma)
    return ad.div(powered, ad.reduce_sum(powered, axis=-1, keepdims=True))


def address(controls: InterfaceControls, memory: Tensor, w_prev: Tensor) -> Tensor:
    """Full addressing pipeline: content, gate, shift, sharpen."""
    wc = content_address(controls.key, controls.beta, memory)
    wg = interpolate_gate(wc, w_prev, controls.gate)
    ws = shift_address(wg, controls.shift)
    return sharpen(ws, controls.gamma)


def _outer(w, v) -> Tensor:
    w = ad.as_tensor(w)
    v = ad.as_tensor(v)
    return ad.mul(ad.reshape(w, w.shape + (1,)), ad.reshape(v, v.shape[:-1] + (1, v.shape[-1])))


def write_memory(memory, weights, erase, add) -> Tensor:
    """Erase-then-add write. Accepts one head or sequences of heads.

    With several heads every erase is applied before any add, so the result
    does not depend on head order.
    """
    if isinstance(weights, (list, tuple)):
        heads = list(zip(weights, erase, add))
    else:
        heads = [(weights, erase, add)]
    kept = ad.as_tensor(memory)
    for w, e, _ in heads:
        kept = ad.mul(kept, ad.sub(1.0, _outer(w, e)))
    for w, _, v in heads:
        kept = ad.add(kept, _outer(w, v))
    return kept


def read_memory(memory, weights) -> Tensor:
    """sum_i w(i) * memory[i]."""
    memory = ad.as_tensor(memory)
    weights = ad.as_tensor(weights)
    w = ad.reshape(weights, weights.shape[:-1] + (1, weights.shape[-1]))
    r = ad.matmul(w, memory)
    return ad.reshape(r, r.shape[:-2] + (r.shape[-1],))


def assert_simplex(w: np.ndarray, tol: float = 1e-9) -> None:
    w = np.asarray(w)
    if np.any(w < 0) or np.any(np.abs(w.sum(axis=-1) - 1.0) > tol):
        raise AssertionError("weighting is not on the probability simplex")
