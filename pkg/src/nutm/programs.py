"""Stored-program memory: a key-value store of interface-network weights.

Each slot holds a key (length K) and a program (flattened weight matrix of
length S). A query key selects a convex combination of programs through
cosine-similarity attention; the combination is reshaped by the caller into
the working interface weight for the current timestep.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

ATTENTION_MODES = ("key_value", "direct", "uniform", "gumbel_hard")


@dataclass
class ProgramQuery:
    key: Tensor
    strength: Tensor


class ProgramMemory:
    """P learnable keys (P x K) and P learnable programs (P x S).

    ``keys`` is None when the owning head never consults them (uniform or
    direct attention); such a memory contributes only its programs to the
    parameter count.
    """

    def __init__(self, keys: Optional[Tensor], values: Tensor):
        if values.ndim != 2 or values.shape[0] < 1:
            raise ValueError(f"program values must be P x S with P >= 1, got {values.shape}")
        if keys is not None and (keys.ndim != 2 or keys.shape[0] != values.shape[0]):
            raise ValueError(f"keys {keys.shape} do not match programs {values.shape}")
        self.keys = keys
        self.values = values

    @classmethod
    def initialize(cls, n_programs, key_size, program_size, fan_in, rng, name="nsm", with_keys=True):
        if n_programs < 1:
            raise ValueError(f"need at least one program, got P={n_programs}")
        bound = 1.0 / np.sqrt(fan_in)
        values = ad.parameter(rng.uniform(-bound, bound, (n_programs, program_size)), f"{name}.values")
        keys = None
        if with_keys:
            raw = rng.standard_normal((n_programs, key_size))
            raw /= np.linalg.norm(raw, axis=1, keepdims=True)
            keys = ad.parameter(raw, f"{name}.keys")
        return cls(keys, values)

    @property
    def n_programs(self) -> int:
        return self.values.shape[0]

    @property
    def key_size(self) -> int:
        return 0 if self.keys is None else self.keys.shape[1]

    @property
    def program_size(self) -> int:
        return self.values.shape[1]

    def parameters(self) -> list:
        return [t for t in (self.keys, self.values) if t is not None]


def _require_keys(mem: ProgramMemory):
    if mem.keys is None:
        raise ValueError("this program memory was built without keys")
    return mem.keys


def _key_logits(query: ProgramQuery, mem: ProgramMemory) -> Tensor:
    keys = _require_keys(mem)
    k = ad.as_tensor(query.key)
    if np.any(np.linalg.norm(k.data, axis=-1) == 0):
        raise ValueError("program query key is the zero vector; cosine attention is undefined")
    k = ad.reshape(k, k.shape[:-1] + (1, k.shape[-1]))
    return ad.mul(query.strength, ad.cosine_similarity(k, keys))


def program_attention(query: Optional[ProgramQuery], mem: ProgramMemory, mode: str = "key_value",
                      direct_logits: Optional[Tensor] = None, batch_shape: tuple = ()) -> Tensor:
    """Distribution over the P programs for the given attention mode."""
    if mode == "key_value":
        if query is None:
            raise ValueError("key_value attention needs a query")
        return ad.softmax(_key_logits(query, mem))
    if mode == "direct":
        if direct_logits is None:
            raise ValueError("direct attention needs logits")
        return ad.softmax(direct_logits)
    if mode == "uniform":
        p = mem.n_programs
        return Tensor(np.full(tuple(batch_shape) + (p,), 1.0 / p))
    raise ValueError(f"unknown attention mode {mode!r}; expected one of {ATTENTION_MODES[:3]}")


def gumbel_noise(rng, shape) -> np.ndarray:
    u = rng.uniform(np.finfo(np.float64).tiny, 1.0, shape)
    return -np.log(-np.log(u))


def gumbel_program_attention(query: ProgramQuery, mem: ProgramMemory, temperature: float = 1.0,
                             hard: bool = True, rng=None, noise: Optional[np.ndarray] = None) -> Tensor:
    """Gumbel-softmax over program logits; ``hard`` gives a straight-through one-hot.

    ``noise`` overrides sampling (pass zeros to recover the deterministic softmax).
    """
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    logits = _key_logits(query, mem)
    if noise is None:
        if rng is None:
            raise ValueError("gumbel attention needs an rng or explicit noise")
        noise = gumbel_noise(rng, logits.shape)
    soft = ad.softmax(ad.mul(ad.add(logits, noise), 1.0 / temperature))
    if not hard:
        return soft
    one_hot = np.zeros(soft.shape)
    np.put_along_axis(one_hot, np.argmax(soft.data, axis=-1)[..., None], 1.0, axis=-1)
    return ad.straight_through(soft, one_hot)


def compose_program(weights: Tensor, mem: ProgramMemory) -> Tensor:
    """sum_i w(i) * program(i), shape (..., S)."""
    weights = ad.as_tensor(weights)
    if weights.shape[-1] != mem.n_programs:
        raise ad.ShapeError(f"program weights {weights.shape} vs {mem.n_programs} programs")
    if weights.ndim == 1:
        return ad.reshape(ad.matmul(ad.reshape(weights, (1, -1)), mem.values), (mem.program_size,))
    return ad.matmul(weights, mem.values)


def key_collapse_loss(mem: ProgramMemory) -> Tensor:
    """Sum of cosine similarities over all unordered key pairs (0 when P = 1)."""
    keys = _require_keys(mem)
    p = mem.n_programs
    if p == 1:
        return Tensor(0.0)
    sims = ad.cosine_similarity(ad.reshape(keys, (p, 1, -1)), ad.reshape(keys, (1, p, -1)))
    upper = np.triu(np.ones((p, p)), k=1)
    return ad.reduce_sum(ad.mul(sims, upper))


def orthogonal_key_loss(mem: ProgramMemory) -> Tensor:
    """Frobenius norm of keys @ keys.T - I; requires K == P."""
    keys = _require_keys(mem)
    p, k = keys.shape
    if k != p:
        raise ValueError(f"orthogonal key loss requires key size K equal to P (K={k}, P={p})")
    gram = ad.reduce_sum(ad.mul(ad.reshape(keys, (p, 1, k)), ad.reshape(keys, (1, p, k))), axis=-1)
    return ad.frobenius_norm(ad.sub(gram, np.eye(p)))


def mean_pairwise_cosine(keys: np.ndarray) -> float:
    keys = np.asarray(keys, dtype=np.float64)
    p = keys.shape[0]
    if p < 2:
        return 0.0
    unit = keys / np.maximum(np.linalg.norm(keys, axis=1, keepdims=True), ad.NORM_GUARD)
    gram = unit @ unit.T
    return float(gram[np.triu_indices(p, k=1)].mean())
