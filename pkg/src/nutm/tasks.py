"""Seeded generators for the algorithmic tasks, their combinations and the
continual-learning curriculum.

Every instance is a timeline of input rows, target rows and an answer mask.
Input channels are laid out as ``[data bits | start | end | scalar | indicators]``
(the scalar channel carries the repeat count or the priority, indicators
are used only by sequenced tasks) and output channels as ``[data bits | flag]``.
Dynamic N-grams is a plain bit stream with a single input and output channel.
"""
from __future__ import annotations

import io
from dataclasses import dataclass, field, replace
from typing import Iterator, Optional, Sequence

import numpy as np

TASK_KINDS = ("copy", "repeat_copy", "assoc_recall", "dynamic_ngrams", "priority_sort", "long_copy")
SEQUENCE_KINDS = ("copy", "repeat_copy", "assoc_recall", "priority_sort")
SHORT_NAMES = {"C": "copy", "RC": "repeat_copy", "AR": "assoc_recall", "PS": "priority_sort"}
SUPPORTED_COMBINATIONS = (
    frozenset({"copy", "repeat_copy"}),
    frozenset({"copy", "assoc_recall"}),
    frozenset({"copy", "priority_sort"}),
    frozenset(SEQUENCE_KINDS),
)


@dataclass(frozen=True)
class TaskSpec:
    """Structural parameters of one task; ranges are inclusive ``(low, high)``.

    ``length`` is the sequence length for the copy family and the stream
    length for N-grams; ``items`` is the number of items for associative
    recall and priority sort; ``repeat_scale`` normalizes the repeat count.
    """

    kind: str
    bits: int = 8
    length: tuple = (1, 20)
    repeats: tuple = (1, 10)
    items: tuple = (2, 6)
    item_length: int = 3
    sorted_items: int = 16
    repeat_scale: int = 10
    ngram: int = 6

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ValueError(f"unknown task kind {self.kind!r}; expected one of {TASK_KINDS}")
        for name in ("length", "repeats", "items"):
            lo, hi = getattr(self, name)
            if lo < 1 or hi < lo:
                raise ValueError(f"{self.kind}: {name} range {lo, hi} is empty or non-positive")
        if self.bits < 1 or self.item_length < 1 or self.repeat_scale < 1 or self.ngram < 2:
            raise ValueError(f"{self.kind}: widths and counts must be positive")
        if self.kind == "priority_sort" and not 1 <= self.sorted_items <= self.items[0]:
            raise ValueError("priority_sort: sorted_items must lie in [1, number of items]")
        if self.kind == "assoc_recall" and self.items[0] < 2:
            raise ValueError("assoc_recall needs at least two items")


@dataclass(frozen=True)
class Layout:
    bits: int
    scalar: bool = False
    flag: bool = False
    indicators: int = 0
    markers: bool = True

    @property
    def start(self) -> int:
        return self.bits

    @property
    def end(self) -> int:
        return self.bits + 1

    @property
    def scalar_channel(self) -> int:
        return self.bits + 2

    @property
    def indicator_offset(self) -> int:
        return self.bits + 2 + int(self.scalar)

    @property
    def input_width(self) -> int:
        if not self.markers:
            return self.bits
        return self.bits + 2 + int(self.scalar) + self.indicators

    @property
    def output_width(self) -> int:
        return self.bits + int(self.flag)


def task_layout(kind: str, bits: int) -> Layout:
    if kind == "dynamic_ngrams":
        return Layout(bits=1, markers=False)
    if kind == "repeat_copy":
        return Layout(bits, scalar=True, flag=True)
    if kind == "priority_sort":
        return Layout(bits, scalar=True)
    return Layout(bits)


def union_layout(bits: int, indicators: int = 0) -> Layout:
    """Layout wide enough for every sequenceable task."""
    return Layout(bits, scalar=True, flag=True, indicators=indicators)


@dataclass
class TaskInstance:
    inputs: np.ndarray
    targets: np.ndarray
    mask: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (len(self.inputs) == len(self.targets) == len(self.mask)):
            raise ValueError("inputs, targets and mask must have equal length")

    def __len__(self):
        return len(self.inputs)

    @property
    def masked_bits(self) -> int:
        return int(self.mask.sum()) * self.targets.shape[1]


# -- single tasks (input phase rows, answer rows) --------------------------------------


def _draw(rng, bounds, name, overrides):
    lo, hi = bounds
    if name in overrides:
        value = int(overrides[name])
        if not lo <= value <= hi:
            raise ValueError(f"{name}={value} outside the task range [{lo}, {hi}]")
        return value
    return int(rng.integers(lo, hi + 1))


def _bits(rng, n, width):
    return rng.integers(0, 2, size=(n, width)).astype(np.float64)


def _copy_parts(spec, rng, layout, overrides):
    n = _draw(rng, spec.length, "length", overrides)
    seq = _bits(rng, n, spec.bits)
    inp = np.zeros((n + 2, layout.input_width))
    inp[0, layout.start] = 1.0
    inp[1:n + 1, :spec.bits] = seq
    inp[n + 1, layout.end] = 1.0
    ans = np.zeros((n, layout.output_width))
    ans[:, :spec.bits] = seq
    return inp, ans, {"length": n}


def _repeat_copy_parts(spec, rng, layout, overrides):
    n = _draw(rng, spec.length, "length", overrides)
    k = _draw(rng, spec.repeats, "repeats", overrides)
    seq = _bits(rng, n, spec.bits)
    inp = np.zeros((n + 2, layout.input_width))
    inp[0, layout.start] = 1.0
    inp[1:n + 1, :spec.bits] = seq
    inp[n + 1, layout.end] = 1.0
    inp[n + 1, layout.scalar_channel] = k / spec.repeat_scale
    ans = np.zeros((n * k + 1, layout.output_width))
    ans[:n * k, :spec.bits] = np.tile(seq, (k, 1))
    ans[n * k, spec.bits] = 1.0
    return inp, ans, {"length": n, "repeats": k}


def _assoc_recall_parts(spec, rng, layout, overrides):
    n = _draw(rng, spec.items, "items", overrides)
    size = spec.item_length
    items = _bits(rng, n * size, spec.bits).reshape(n, size, spec.bits)
    query = int(rng.integers(0, n - 1))
    rows = []
    for item in items:
        delim = np.zeros((1, layout.input_width))
        delim[0, layout.start] = 1.0
        body = np.zeros((size, layout.input_width))
        body[:, :spec.bits] = item
        rows += [delim, body]
    q_delim = np.zeros((1, layout.input_width))
    q_delim[0, layout.end] = 1.0
    q_body = np.zeros((size, layout.input_width))
    q_body[:, :spec.bits] = items[query]
    rows += [q_delim, q_body, q_delim.copy()]
    ans = np.zeros((size, layout.output_width))
    ans[:, :spec.bits] = items[query + 1]
    return np.vstack(rows), ans, {"items": n, "query": query}


def priority_order(priorities: np.ndarray) -> np.ndarray:
    """Indices of items by descending priority, ties broken by position."""
    return np.argsort(-np.asarray(priorities), kind="stable")


def _priority_sort_parts(spec, rng, layout, overrides):
    n = _draw(rng, spec.items, "items", overrides)
    k = min(spec.sorted_items, n)
    seq = _bits(rng, n, spec.bits)
    prio = rng.uniform(-1.0, 1.0, n)
    inp = np.zeros((n + 2, layout.input_width))
    inp[0, layout.start] = 1.0
    inp[1:n + 1, :spec.bits] = seq
    inp[1:n + 1, layout.scalar_channel] = prio
    inp[n + 1, layout.end] = 1.0
    ans = np.zeros((k, layout.output_width))
    ans[:, :spec.bits] = seq[priority_order(prio)[:k]]
    return inp, ans, {"items": n, "sorted": k, "priorities": prio}


_PARTS = {
    "copy": _copy_parts,
    "long_copy": _copy_parts,
    "repeat_copy": _repeat_copy_parts,
    "assoc_recall": _assoc_recall_parts,
    "priority_sort": _priority_sort_parts,
}


def _dynamic_ngrams(spec, rng, overrides):
    n = _draw(rng, spec.length, "length", overrides)
    history = spec.ngram - 1
    table = rng.beta(0.5, 0.5, size=2 ** history)
    stream = np.zeros(n + 1)
    stream[:history] = rng.integers(0, 2, size=history)
    for t in range(history, n + 1):
        ctx = 0
        for bit in stream[t - history:t]:
            ctx = (ctx << 1) | int(bit)
        stream[t] = float(rng.random() < table[ctx])
    return TaskInstance(
        inputs=stream[:-1, None].copy(),
        targets=stream[1:, None].copy(),
        mask=np.ones(n, dtype=bool),
        meta={"length": n, "table": table, "stream": stream},
    )


def _assemble(inp, ans, meta):
    n_in, n_ans = len(inp), len(ans)
    inputs = np.vstack([inp, np.zeros((n_ans, inp.shape[1]))])
    targets = np.vstack([np.zeros((n_in, ans.shape[1])), ans])
    mask = np.r_[np.zeros(n_in, dtype=bool), np.ones(n_ans, dtype=bool)]
    return TaskInstance(inputs, targets, mask, meta)


def generate_task(spec: TaskSpec, rng, layout: Optional[Layout] = None, **overrides) -> TaskInstance:
    """Draw one instance; ``overrides`` pin structural parameters inside the spec ranges."""
    if spec.kind == "dynamic_ngrams":
        return _dynamic_ngrams(spec, rng, overrides)
    layout = layout or task_layout(spec.kind, spec.bits)
    if layout.bits != spec.bits:
        raise ValueError(f"layout has {layout.bits} data bits, task has {spec.bits}")
    inp, ans, meta = _PARTS[spec.kind](spec, rng, layout, overrides)
    meta["kind"] = spec.kind
    return _assemble(inp, ans, meta)


def generate_sequenced(subtasks: Sequence[str], specs: dict, rng) -> TaskInstance:
    """Indicator block, then every subtask's input phase, then every answer phase in order."""
    kinds = [SHORT_NAMES.get(k, k) for k in subtasks]
    if not kinds or any(k not in SEQUENCE_KINDS for k in kinds) or len(set(kinds)) != len(kinds):
        raise ValueError(f"unsupported subtask list {list(subtasks)}")
    if len(kinds) > 1 and frozenset(kinds) not in SUPPORTED_COMBINATIONS:
        raise ValueError(f"unsupported combination {list(subtasks)}; use C+RC, C+AR, C+PS or C+RC+AR+PS")
    bits = {specs[k].bits for k in kinds}
    if len(bits) != 1:
        raise ValueError("all subtasks of a sequence must share the data width")
    layout = union_layout(bits.pop(), indicators=len(SEQUENCE_KINDS))
    indicator = np.zeros((len(kinds), layout.input_width))
    for slot, kind in enumerate(kinds):
        indicator[slot, layout.indicator_offset + SEQUENCE_KINDS.index(kind)] = 1.0
    parts = [_PARTS[k](specs[k], rng, layout, {}) for k in kinds]
    inp = np.vstack([indicator] + [p[0] for p in parts])
    ans = np.vstack([p[1] for p in parts])
    meta = {"subtasks": kinds, "parts": [p[2] for p in parts]}
    return _assemble(inp, ans, meta)


# -- batching ----------------------------------------------------------------------


@dataclass
class Batch:
    inputs: np.ndarray  # (T, B, I)
    targets: np.ndarray  # (T, B, O)
    mask: np.ndarray  # (T, B)

    @property
    def size(self) -> int:
        return self.inputs.shape[1]


def collate(instances: Sequence[TaskInstance]) -> Batch:
    """Stack instances along a batch axis, padding short ones at the end (masked out)."""
    t = max(len(inst) for inst in instances)
    b = len(instances)
    inputs = np.zeros((t, b, instances[0].inputs.shape[1]))
    targets = np.zeros((t, b, instances[0].targets.shape[1]))
    mask = np.zeros((t, b), dtype=bool)
    for j, inst in enumerate(instances):
        n = len(inst)
        inputs[:n, j] = inst.inputs
        targets[:n, j] = inst.targets
        mask[:n, j] = inst.mask
    return Batch(inputs, targets, mask)


class TaskSource:
    """Callable producing batches of one task (or one task combination)."""

    def __init__(self, spec=None, subtasks=None, specs=None, layout=None):
        if (spec is None) == (subtasks is None):
            raise ValueError("give either a single task spec or a subtask list")
        self.spec = spec
        self.subtasks = list(subtasks) if subtasks is not None else None
        self.specs = specs
        self.layout = layout

    @property
    def input_width(self) -> int:
        return self.sample(np.random.default_rng(0)).inputs.shape[1]

    @property
    def output_width(self) -> int:
        return self.sample(np.random.default_rng(0)).targets.shape[1]

    def sample(self, rng) -> TaskInstance:
        if self.spec is not None:
            return generate_task(self.spec, rng, self.layout)
        return generate_sequenced(self.subtasks, self.specs, rng)

    def __call__(self, rng, batch_size: int) -> Batch:
        return collate([self.sample(rng) for _ in range(batch_size)])


# -- settings from the task tables ---------------------------------------------------

TASK_SETTINGS = {
    "copy": {
        "train": TaskSpec("copy", length=(1, 20)),
        "test": TaskSpec("copy", length=(120, 120)),
    },
    "repeat_copy": {
        "train": TaskSpec("repeat_copy", length=(1, 10), repeats=(1, 10)),
        "test": TaskSpec("repeat_copy", length=(10, 20), repeats=(10, 20)),
    },
    "assoc_recall": {
        "train": TaskSpec("assoc_recall", bits=6, items=(2, 6), item_length=3),
        "test": TaskSpec("assoc_recall", bits=6, items=(6, 20), item_length=3),
    },
    "dynamic_ngrams": {
        "train": TaskSpec("dynamic_ngrams", bits=1, length=(50, 50)),
        "test": TaskSpec("dynamic_ngrams", bits=1, length=(200, 200)),
    },
    "priority_sort": {
        "train": TaskSpec("priority_sort", items=(20, 20), sorted_items=16),
        "test": TaskSpec("priority_sort", items=(20, 20), sorted_items=20),
    },
    "long_copy": {
        "train": TaskSpec("long_copy", length=(1, 40)),
        "test": TaskSpec("long_copy", length=(200, 200)),
    },
}


def _seq_specs(copy_len, repeat=None, recall=None, sort=None, bits=8):
    specs = {"copy": TaskSpec("copy", bits=bits, length=copy_len)}
    if repeat is not None:
        specs["repeat_copy"] = TaskSpec("repeat_copy", bits=bits, length=copy_len, repeats=repeat,
                                        repeat_scale=10)
    if recall is not None:
        items, size = recall
        specs["assoc_recall"] = TaskSpec("assoc_recall", bits=bits, items=items, item_length=size)
    if sort is not None:
        items, k = sort
        specs["priority_sort"] = TaskSpec("priority_sort", bits=bits, items=(items, items), sorted_items=k)
    return specs


SEQUENCING_SETTINGS = {
    "C+RC": {
        "subtasks": ["copy", "repeat_copy"],
        "train": _seq_specs((1, 10), repeat=(1, 10)),
        "test": _seq_specs((10, 20), repeat=(10, 15)),
    },
    "C+AR": {
        "subtasks": ["copy", "assoc_recall"],
        "train": _seq_specs((1, 10), recall=((2, 4), 8)),
        "test": _seq_specs((10, 20), recall=((4, 6), 8)),
    },
    "C+PS": {
        "subtasks": ["copy", "priority_sort"],
        "train": _seq_specs((1, 10), sort=(10, 8)),
        "test": _seq_specs((10, 20), sort=(10, 10)),
    },
    "C+RC+AR+PS": {
        "subtasks": ["copy", "repeat_copy", "assoc_recall", "priority_sort"],
        "train": _seq_specs((1, 10), repeat=(1, 5), recall=((2, 4), 6), sort=(10, 8)),
        "test": _seq_specs((10, 20), repeat=(6, 6), recall=((5, 5), 6), sort=(10, 10)),
    },
}

CONTINUAL_ORDER = ("copy", "repeat_copy", "assoc_recall", "priority_sort")

CONTINUAL_SETTINGS = {
    "copy": TaskSpec("copy", length=(1, 10)),
    "repeat_copy": TaskSpec("repeat_copy", length=(1, 5), repeats=(1, 5), repeat_scale=5),
    "assoc_recall": TaskSpec("assoc_recall", items=(2, 3), item_length=3),
    "priority_sort": TaskSpec("priority_sort", items=(10, 10), sorted_items=8),
}


@dataclass(frozen=True)
class ContinualPhase:
    kind: str
    iterations: int
    batch_size: int
    spec: TaskSpec


def continual_layout(bits: int = 8) -> Layout:
    return union_layout(bits)


def continual_schedule(iterations: int = 20_000, batch_size: int = 16, bits: int = 8) -> Iterator[ContinualPhase]:
    """C -> RC -> AR -> PS, one phase per task."""
    for kind in CONTINUAL_ORDER:
        yield ContinualPhase(kind, iterations, batch_size, replace(CONTINUAL_SETTINGS[kind], bits=bits))


# -- text serialization -------------------------------------------------------------


def _fmt(row) -> str:
    return " ".join(format(float(v), ".17g") for v in row)


def dumps_instance(inst: TaskInstance) -> str:
    """One timestep per line: ``inputs ; targets ; mask``."""
    out = io.StringIO()
    for x, y, m in zip(inst.inputs, inst.targets, inst.mask):
        out.write(f"{_fmt(x)} ; {_fmt(y)} ; {int(m)}\n")
    return out.getvalue()


def loads_instance(text: str) -> TaskInstance:
    xs, ys, ms = [], [], []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split(";")
        if len(parts) != 3:
            raise ValueError(f"line {lineno}: expected 'inputs ; targets ; mask'")
        xs.append([float(v) for v in parts[0].split()])
        ys.append([float(v) for v in parts[1].split()])
        ms.append(bool(int(parts[2])))
    return TaskInstance(np.array(xs), np.array(ys), np.array(ms, dtype=bool))
