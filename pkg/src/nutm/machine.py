"""NUTM assembly: controller + data memory + one program memory per head.

A plain NTM is the special case of one program per head under uniform
attention: the single stored program is then the static interface weight.
"""
from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field, fields
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .controller import Controller, ControllerConfig, ControllerState
from .memory import DataMemory, address, layout_length, parse_interface, read_memory, write_memory
from .programs import (ATTENTION_MODES, ProgramMemory, ProgramQuery, compose_program,
                       gumbel_program_attention, key_collapse_loss, orthogonal_key_loss,
                       program_attention)

REGULARIZERS = ("collapse", "orthogonal", "none")

CHECKPOINT_MAGIC = b"NUTMCKPT"
CHECKPOINT_VERSION = 1


@dataclass
class MachineConfig:
    input_size: int
    output_size: int
    hidden_size: int = 100
    controller: str = "lstm"
    memory_rows: int = 128
    memory_width: int = 20
    read_heads: int = 1
    write_heads: int = 1
    programs: int = 1
    key_size: Optional[int] = None
    attention: str = "uniform"
    regularizer: str = "none"
    temperature: float = 1.0

    def __post_init__(self):
        if self.controller not in ("lstm", "feedforward"):
            raise ValueError(f"controller must be 'lstm' or 'feedforward', got {self.controller!r}")
        if self.input_size < 1 or self.output_size < 1 or self.hidden_size < 1:
            raise ValueError("input, output and hidden sizes must be positive")
        if self.programs < 1:
            raise ValueError(f"programs per head must be >= 1, got {self.programs}")
        if self.read_heads < 1 or self.write_heads < 1:
            raise ValueError("a machine needs at least one read head and one write head")
        if self.attention not in ATTENTION_MODES:
            raise ValueError(f"attention must be one of {ATTENTION_MODES}, got {self.attention!r}")
        if self.regularizer not in REGULARIZERS:
            raise ValueError(f"regularizer must be one of {REGULARIZERS}, got {self.regularizer!r}")
        if self.key_size is None:
            self.key_size = self.programs
        if self.key_size < 1:
            raise ValueError(f"key size must be positive, got {self.key_size}")
        if self.temperature <= 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        if self.regularizer != "none" and not self.uses_keys:
            raise ValueError(f"regularizer {self.regularizer!r} needs key-based attention, got {self.attention!r}")
        if self.regularizer == "orthogonal" and self.key_size != self.programs:
            raise ValueError("orthogonal regularizer requires key_size == programs")
        DataMemory(self.memory_rows, self.memory_width)

    @property
    def uses_keys(self) -> bool:
        return self.attention in ("key_value", "gumbel_hard")

    @property
    def n_heads(self) -> int:
        return self.read_heads + self.write_heads

    def head_kind(self, head: int) -> str:
        return "read" if head < self.read_heads else "write"

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, values: dict) -> "MachineConfig":
        types = {f.name: f.type for f in fields(cls)}
        unknown = set(values) - set(types)
        if unknown:
            raise ValueError(f"unknown machine keys: {sorted(unknown)}")
        parsed = {}
        for key, raw in values.items():
            if not isinstance(raw, str):
                parsed[key] = raw
            elif key in ("controller", "attention", "regularizer"):
                parsed[key] = raw
            elif key == "temperature":
                parsed[key] = float(raw)
            elif key == "key_size" and raw in ("", "None"):
                parsed[key] = None
            else:
                parsed[key] = int(raw)
        return cls(**parsed)


@dataclass
class MachineState:
    controller: ControllerState
    memory: Tensor
    weights: list
    reads: list
    programs: list = field(default_factory=list)


@dataclass
class StepTrace:
    features: np.ndarray
    weights: list
    programs: list
    kinds: list


@dataclass
class SequenceTrace:
    steps: list = field(default_factory=list)

    def __len__(self):
        return len(self.steps)


class Machine:
    def __init__(self, config: MachineConfig, seed: int = 0):
        self.config = config
        self.seed = seed
        rng = np.random.default_rng(seed)
        cfg = config
        h, m = cfg.hidden_size, cfg.memory_width
        self.memory = DataMemory(cfg.memory_rows, m)
        if cfg.uses_keys:
            query_width = cfg.key_size + 1
        elif cfg.attention == "direct":
            query_width = cfg.programs
        else:
            query_width = 0
        self.controller = Controller(
            ControllerConfig(cfg.input_size, h, m, cfg.read_heads, cfg.write_heads, cfg.output_size, cfg.controller),
            [query_width] * cfg.n_heads,
            rng,
        )
        self.layouts = [layout_length(cfg.head_kind(n), m) for n in range(cfg.n_heads)]
        self.programs = [
            ProgramMemory.initialize(cfg.programs, cfg.key_size, (h + 1) * self.layouts[n], h, rng,
                                     name=f"nsm{n}", with_keys=cfg.uses_keys)
            for n in range(cfg.n_heads)
        ]

    # -- parameters -----------------------------------------------------------

    def parameters(self) -> dict:
        params = {t.name: t for t in self.controller.params.values()}
        for mem in self.programs:
            for t in mem.parameters():
                params[t.name] = t
        return params

    def count_parameters(self) -> int:
        return int(sum(t.size for t in self.parameters().values()))

    def state_dict(self) -> dict:
        return {name: t.data.copy() for name, t in self.parameters().items()}

    def load_state_dict(self, values: dict, strict: bool = True) -> None:
        params = self.parameters()
        if strict and set(values) != set(params):
            missing = sorted(set(params) - set(values))
            extra = sorted(set(values) - set(params))
            raise ValueError(f"parameter mismatch: missing {missing}, unexpected {extra}")
        for name, value in values.items():
            if name not in params:
                continue
            value = np.asarray(value, dtype=np.float64)
            if value.shape != params[name].shape:
                raise ValueError(f"shape mismatch for {name}: {value.shape} vs {params[name].shape}")
            params[name].data = value.copy()

    def bind_parameters(self, tensors: dict) -> None:
        """Swap live parameter tensors for the given ones (matched by name)."""
        prefix = self.controller.prefix + "."
        for name, t in tensors.items():
            t.name = name
            if name.startswith(prefix):
                self.controller.params[name[len(prefix):]] = t
                continue
            head, _, field = name.partition(".")
            mem = self.programs[int(head[3:])]
            setattr(mem, field, t)

    def zero_grad(self) -> None:
        for t in self.parameters().values():
            t.grad = None

    def regularization(self) -> Tensor:
        kind = self.config.regularizer
        if kind == "none" or self.config.programs == 1:
            return Tensor(0.0)
        fn = key_collapse_loss if kind == "collapse" else orthogonal_key_loss
        total = fn(self.programs[0])
        for mem in self.programs[1:]:
            total = ad.add(total, fn(mem))
        return total

    # -- forward ---------------------------------------------------------------

    def initial_state(self, batch: int) -> MachineState:
        cfg = self.config
        return MachineState(
            controller=self.controller.initial_state(batch),
            memory=self.memory.initial_matrix(batch),
            weights=[self.memory.initial_weights(batch) for _ in range(cfg.n_heads)],
            reads=[Tensor(np.zeros((batch, cfg.memory_width))) for _ in range(cfg.read_heads)],
        )

    def program_distribution(self, c_t: Tensor, head: int, rng=None) -> Tensor:
        cfg = self.config
        mem = self.programs[head]
        if cfg.attention == "uniform":
            return program_attention(None, mem, "uniform", batch_shape=c_t.shape[:-1])
        raw = self.controller.meta_interface(c_t, head)
        if cfg.attention == "direct":
            return program_attention(None, mem, "direct", direct_logits=raw)
        k = cfg.key_size
        query = ProgramQuery(key=raw[..., :k], strength=ad.softplus(raw[..., k:k + 1]))
        if cfg.attention == "key_value":
            return program_attention(query, mem, "key_value")
        if rng is None:
            raise ValueError("gumbel_hard attention needs an rng")
        return gumbel_program_attention(query, mem, cfg.temperature, hard=True, rng=rng)

    def working_program(self, c_t: Tensor, head: int, rng=None):
        """Program distribution and the reshaped (H + 1) x L interface weight."""
        w = self.program_distribution(c_t, head, rng)
        flat = compose_program(w, self.programs[head])
        shape = flat.shape[:-1] + (self.config.hidden_size + 1, self.layouts[head])
        return w, ad.reshape(flat, shape)

    def step(self, x_t, state: MachineState, rng=None):
        cfg = self.config
        reads_prev = state.reads[0] if len(state.reads) == 1 else ad.concat(state.reads, axis=-1)
        cstate = self.controller.state_step(x_t, reads_prev, state.controller)
        c = cstate.features
        memory = state.memory
        reads, weights, dists = [], [], []
        writes = ([], [], [])
        for n in range(cfg.n_heads):
            kind = cfg.head_kind(n)
            w_p, program = self.working_program(c, n, rng)
            xi = self.controller.interface_project(c, program)
            controls = parse_interface(xi, kind, cfg.memory_width)
            w = address(controls, memory, state.weights[n])
            if kind == "read":
                reads.append(read_memory(memory, w))
            else:
                writes[0].append(w)
                writes[1].append(controls.erase)
                writes[2].append(controls.add)
            weights.append(w)
            dists.append(w_p)
        memory = write_memory(memory, *writes)
        reads_now = reads[0] if len(reads) == 1 else ad.concat(reads, axis=-1)
        logits = self.controller.output_project(c, reads_now)
        new_state = MachineState(cstate, memory, weights, reads, dists)
        trace = StepTrace(
            features=c.data,
            weights=[w.data for w in weights],
            programs=[d.data for d in dists],
            kinds=[cfg.head_kind(n) for n in range(cfg.n_heads)],
        )
        return logits, new_state, trace

    def run_sequence(self, inputs, rng=None, state: Optional[MachineState] = None):
        """Fold ``step`` over inputs shaped (T, B, input_size)."""
        inputs = np.asarray(inputs, dtype=np.float64)
        if inputs.ndim != 3 or inputs.shape[0] == 0:
            raise ValueError(f"inputs must be a nonempty (T, B, I) array, got {inputs.shape}")
        if state is None:
            state = self.initial_state(inputs.shape[1])
        outputs = []
        trace = SequenceTrace()
        for x_t in inputs:
            logits, state, step_trace = self.step(x_t, state, rng)
            outputs.append(logits)
            trace.steps.append(step_trace)
        return outputs, trace


def build_machine(config: MachineConfig, seed: int = 0) -> Machine:
    return Machine(config, seed)


def count_parameters(machine: Machine) -> int:
    return machine.count_parameters()


# -- checkpoints -------------------------------------------------------------------


def _config_text(sections: dict) -> str:
    lines = []
    for section, values in sections.items():
        lines.append(f"[{section}]")
        for key, value in values.items():
            lines.append(f"{key} = {'' if value is None else value}")
    return "\n".join(lines) + "\n"


def _parse_config_text(text: str) -> dict:
    sections: dict = {}
    current = None
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            current = sections.setdefault(line[1:-1], {})
        else:
            key, _, value = line.partition("=")
            current[key.strip()] = value.strip()
    return sections


def save_checkpoint(path, machine: Machine, extra_sections: Optional[dict] = None) -> None:
    """Binary checkpoint: header, config text, then named float64 blocks."""
    sections = {"machine": machine.config.to_dict()}
    sections.update(extra_sections or {})
    text = _config_text(sections).encode("utf-8")
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<II", CHECKPOINT_VERSION, len(text)))
    buf.write(text)
    params = machine.state_dict()
    buf.write(struct.pack("<I", len(params)))
    for name, value in params.items():
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", value.ndim))
        buf.write(struct.pack(f"<{value.ndim}Q", *value.shape))
        buf.write(np.ascontiguousarray(value, dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def read_checkpoint(path):
    """Return (sections, parameter dict) from a checkpoint file."""
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    pos = len(CHECKPOINT_MAGIC)
    version, text_len = struct.unpack_from("<II", data, pos)
    pos += 8
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    sections = _parse_config_text(data[pos:pos + text_len].decode("utf-8"))
    pos += text_len
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    params = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", data, pos)
        pos += 4
        name = data[pos:pos + name_len].decode("utf-8")
        pos += name_len
        (rank,) = struct.unpack_from("<I", data, pos)
        pos += 4
        shape = struct.unpack_from(f"<{rank}Q", data, pos)
        pos += 8 * rank
        n = int(np.prod(shape)) if rank else 1
        params[name] = np.frombuffer(data, dtype="<f8", count=n, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * n
    return sections, params


def load_checkpoint(path):
    """Rebuild the machine stored at ``path``; returns (machine, sections)."""
    sections, params = read_checkpoint(path)
    machine = Machine(MachineConfig.from_dict(sections["machine"]))
    machine.load_state_dict(params)
    return machine, sections
