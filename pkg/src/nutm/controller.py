"""Controller: state network, per-head program query nets, interface and output maps."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass
class ControllerConfig:
    input_size: int
    hidden_size: int
    read_width: int
    read_heads: int
    write_heads: int
    output_size: int
    kind: str = "lstm"

    def __post_init__(self):
        if self.kind not in ("lstm", "feedforward"):
            raise ValueError(f"controller kind must be 'lstm' or 'feedforward', got {self.kind!r}")
        for field in ("input_size", "hidden_size", "read_width", "read_heads", "write_heads", "output_size"):
            if getattr(self, field) < 1:
                raise ValueError(f"controller {field} must be positive, got {getattr(self, field)}")

    @property
    def reads_width(self) -> int:
        return self.read_heads * self.read_width

    @property
    def n_heads(self) -> int:
        return self.read_heads + self.write_heads


@dataclass
class ControllerState:
    features: Tensor
    hidden: Optional[Tensor] = None
    cell: Optional[Tensor] = None


def _uniform(rng, fan_in, shape):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, shape)


class Controller:
    """LSTM or feedforward state network plus the affine maps hanging off it.

    ``query_widths[n]`` is the output width of head n's program query net
    (K + 1 for key-value attention, P for direct attention, 0 for none).
    """

    def __init__(self, config: ControllerConfig, query_widths, rng, prefix="controller"):
        self.config = config
        self.prefix = prefix
        cfg = config
        h = cfg.hidden_size
        n_in = cfg.input_size + cfg.reads_width
        self.params: dict[str, Tensor] = {}

        def add(name, value):
            self.params[name] = ad.parameter(value, f"{prefix}.{name}")

        if cfg.kind == "lstm":
            add("w_ih", _uniform(rng, h, (n_in, 4 * h)))
            add("b_ih", _uniform(rng, h, (4 * h,)))
            add("w_hh", _uniform(rng, h, (h, 4 * h)))
            add("b_hh", _uniform(rng, h, (4 * h,)))
            add("h0", rng.standard_normal(h) * 0.05)
            add("c0", rng.standard_normal(h) * 0.05)
        else:
            add("w_in", _uniform(rng, n_in, (n_in, h)))
            add("b_in", _uniform(rng, n_in, (h,)))
        fan_out = h + cfg.reads_width
        add("w_out", _uniform(rng, fan_out, (fan_out, cfg.output_size)))
        add("b_out", _uniform(rng, fan_out, (cfg.output_size,)))

        if len(query_widths) != cfg.n_heads:
            raise ValueError(f"expected {cfg.n_heads} query widths, got {len(query_widths)}")
        self.query_widths = list(query_widths)
        for n, width in enumerate(self.query_widths):
            if width:
                add(f"meta{n}.w", _uniform(rng, h, (h, width)))
                add(f"meta{n}.b", _uniform(rng, h, (width,)))

    def __getitem__(self, name) -> Tensor:
        return self.params[name]

    def initial_state(self, batch: int) -> ControllerState:
        h = self.config.hidden_size
        if self.config.kind == "lstm":
            zeros = np.zeros((batch, h))
            hidden = ad.add(zeros, self["h0"])
            cell = ad.add(zeros, self["c0"])
            return ControllerState(features=hidden, hidden=hidden, cell=cell)
        return ControllerState(features=Tensor(np.zeros((batch, h))))

    def state_step(self, x_t, reads_prev, state: ControllerState) -> ControllerState:
        """(h_t, c_t) = RNN([x_t, r_{t-1}], h_{t-1})."""
        cfg = self.config
        x_t = ad.as_tensor(x_t)
        reads_prev = ad.as_tensor(reads_prev)
        if x_t.shape[-1] != cfg.input_size or reads_prev.shape[-1] != cfg.reads_width:
            raise ad.ShapeError(
                f"state_step: expected input width {cfg.input_size} and reads width {cfg.reads_width}, "
                f"got {x_t.shape} and {reads_prev.shape}"
            )
        inp = ad.concat([x_t, reads_prev], axis=-1)
        if cfg.kind == "feedforward":
            c = ad.tanh(ad.add(ad.matmul(inp, self["w_in"]), self["b_in"]))
            return ControllerState(features=c)
        h = cfg.hidden_size
        gates = ad.add(
            ad.add(ad.matmul(inp, self["w_ih"]), self["b_ih"]),
            ad.add(ad.matmul(state.hidden, self["w_hh"]), self["b_hh"]),
        )
        i = ad.sigmoid(gates[..., 0:h])
        f = ad.sigmoid(gates[..., h:2 * h])
        g = ad.tanh(gates[..., 2 * h:3 * h])
        o = ad.sigmoid(gates[..., 3 * h:4 * h])
        cell = ad.add(ad.mul(f, state.cell), ad.mul(i, g))
        hidden = ad.mul(o, ad.tanh(cell))
        return ControllerState(features=hidden, hidden=hidden, cell=cell)

    def meta_interface(self, c_t, head: int) -> Tensor:
        """Raw program query of one head: affine(c_t)."""
        if not 0 <= head < self.config.n_heads:
            raise IndexError(f"head {head} out of range for {self.config.n_heads} heads")
        if not self.query_widths[head]:
            raise ValueError(f"head {head} has no program query network")
        return ad.add(ad.matmul(c_t, self[f"meta{head}.w"]), self[f"meta{head}.b"])

    @staticmethod
    def interface_project(c_t, program) -> Tensor:
        """xi_t = [c_t, 1] @ W_t; ``program`` is (..., H + 1, L), last row the bias."""
        c_t = ad.as_tensor(c_t)
        program = ad.as_tensor(program)
        if program.shape[-2] != c_t.shape[-1] + 1:
            raise ad.ShapeError(f"interface_project: features {c_t.shape} vs program {program.shape}")
        ones = np.ones(c_t.shape[:-1] + (1,))
        c_aug = ad.concat([c_t, ones], axis=-1)
        c_row = ad.reshape(c_aug, c_aug.shape[:-1] + (1, c_aug.shape[-1]))
        xi = ad.matmul(c_row, program)
        return ad.reshape(xi, xi.shape[:-2] + (xi.shape[-1],))

    def output_project(self, c_t, reads) -> Tensor:
        return ad.add(ad.matmul(ad.concat([c_t, reads], axis=-1), self["w_out"]), self["b_out"])
