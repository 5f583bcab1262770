"""Command-line entry point: ``nutm train|eval|gradcheck|trace|params``.

Run configuration is flat ``key = value`` text. Keys before the first
section header are run-level (``seed``, ``out``); the ``[task]``,
``[machine]`` and ``[train]`` sections feed the task generator, the machine
and the training loop. Example::

    seed = 7
    out = runs/copy

    [task]
    kind = copy
    length = 1, 10
    test_length = 120

    [machine]
    hidden_size = 64
    programs = 2
    attention = key_value
    regularizer = collapse

    [train]
    iterations = 20000
"""
from __future__ import annotations

import argparse
import os
import sys
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .gradcheck import TOLERANCE, run_suite
from .machine import Machine, MachineConfig, load_checkpoint
from .tasks import SEQUENCING_SETTINGS, TASK_KINDS, TASK_SETTINGS, TaskSource, TaskSpec, generate_sequenced
from .training import TrainConfig, evaluate, stream_seeds, train_loop, write_trace

EXIT_OK, EXIT_FAILED, EXIT_USAGE = 0, 1, 2

RUN_KEYS = ("seed", "out")
RANGE_KEYS = ("length", "repeats", "items")
INT_KEYS = ("bits", "item_length", "sorted_items", "repeat_scale", "ngram")
TASK_KEYS = ("kind",) + RANGE_KEYS + INT_KEYS
MACHINE_KEYS = tuple(f.name for f in fields(MachineConfig) if f.name not in ("input_size", "output_size"))
TRAIN_KEYS = tuple(f.name for f in fields(TrainConfig) if f.name != "seed")


class ConfigError(Exception):
    """Invalid configuration; the message names the file, line and key."""


@dataclass
class RunConfig:
    task: dict = field(default_factory=dict)
    machine: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    seed: int = 0
    out: str = "run"


# -- configuration ---------------------------------------------------------------------


def _allowed(section):
    if section is None:
        return RUN_KEYS
    if section == "task":
        return TASK_KEYS + tuple("test_" + k for k in RANGE_KEYS + INT_KEYS)
    return {"machine": MACHINE_KEYS, "train": TRAIN_KEYS}[section]


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    """Parse config text; unknown sections or keys raise ConfigError with a line number."""
    cfg = RunConfig()
    sections = {"task": cfg.task, "machine": cfg.machine, "train": cfg.train}
    current = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        where = f"{source}:{lineno}"
        if line.startswith("["):
            name = line.strip("[]").strip()
            if not line.endswith("]") or name not in sections:
                raise ConfigError(f"{where}: unknown section {line!r}; expected [task], [machine] or [train]")
            current = name
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ConfigError(f"{where}: expected 'key = value', got {raw.strip()!r}")
        if key not in _allowed(current):
            scope = f"[{current}]" if current else "run level"
            raise ConfigError(f"{where}: unknown key {key!r} at {scope}")
        if current is None:
            if key == "seed":
                try:
                    cfg.seed = int(value)
                except ValueError:
                    raise ConfigError(f"{where}: seed must be an integer, got {value!r}") from None
            else:
                cfg.out = value
        else:
            sections[current][key] = value
    if "kind" not in cfg.task:
        raise ConfigError(f"{source}: missing required key 'kind' in [task]")
    return cfg


def load_config(path: str) -> RunConfig:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, path)


def _range(key, value):
    parts = [p for p in value.replace(",", " ").split() if p]
    try:
        nums = tuple(int(p) for p in parts)
    except ValueError:
        raise ConfigError(f"task key {key!r}: expected one or two integers, got {value!r}") from None
    if len(nums) == 1:
        return nums * 2
    if len(nums) != 2:
        raise ConfigError(f"task key {key!r}: expected one or two integers, got {value!r}")
    return nums


def _apply(spec: TaskSpec, values: dict, prefix: str = "") -> TaskSpec:
    changes = {}
    for key in RANGE_KEYS + INT_KEYS:
        raw = values.get(prefix + key)
        if raw is None:
            continue
        if key in RANGE_KEYS:
            changes[key] = _range(prefix + key, raw)
        else:
            try:
                changes[key] = int(raw)
            except ValueError:
                raise ConfigError(f"task key {prefix + key!r}: expected an integer, got {raw!r}") from None
    try:
        return replace(spec, **changes)
    except ValueError as exc:
        raise ConfigError(f"task: {exc}") from None


def build_sources(task: dict):
    """(train source, test source) for a task section."""
    kind = task["kind"]
    if kind in SEQUENCING_SETTINGS:
        extra = sorted(k for k in task if k != "kind")
        if extra:
            raise ConfigError(f"task {kind!r} is a fixed combination; unexpected keys {extra}")
        setting = SEQUENCING_SETTINGS[kind]
        return (TaskSource(subtasks=setting["subtasks"], specs=setting["train"]),
                TaskSource(subtasks=setting["subtasks"], specs=setting["test"]))
    if kind not in TASK_KINDS:
        known = ", ".join(TASK_KINDS + tuple(SEQUENCING_SETTINGS))
        raise ConfigError(f"task key 'kind': unknown task {kind!r}; expected one of {known}")
    train = _apply(TASK_SETTINGS[kind]["train"], task)
    test = TASK_SETTINGS[kind]["test"]
    if "bits" in task:
        test = replace(test, bits=train.bits)
    test = _apply(test, task, prefix="test_")
    return TaskSource(train), TaskSource(test)


def build_machine_config(machine: dict, source: TaskSource) -> MachineConfig:
    values = dict(machine, input_size=source.input_width, output_size=source.output_width)
    try:
        return MachineConfig.from_dict(values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"machine: {exc}") from None


def build_train_config(train: dict, seed: int) -> TrainConfig:
    parsed = {"seed": seed}
    for f in fields(TrainConfig):
        if f.name not in train:
            continue
        raw = train[f.name]
        try:
            if f.type in (bool, "bool"):
                if raw.lower() not in ("true", "false", "1", "0"):
                    raise ValueError(raw)
                parsed[f.name] = raw.lower() in ("true", "1")
            elif f.type in (int, "int"):
                parsed[f.name] = int(raw)
            else:
                parsed[f.name] = float(raw)
        except ValueError:
            raise ConfigError(f"train key {f.name!r}: cannot parse {raw!r}") from None
    try:
        return TrainConfig(**parsed)
    except ValueError as exc:
        raise ConfigError(f"train: {exc}") from None


def _overrides(items):
    out = {}
    for item in items or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--task expects key=value, got {item!r}")
        key = key.strip()
        if key not in _allowed("task"):
            raise ConfigError(f"--task: unknown task key {key!r}")
        out[key] = value.strip()
    return out


# -- commands --------------------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out = args.out
    if args.iters is not None:
        cfg.train["iterations"] = str(args.iters)
    cfg.task.update(_overrides(args.task))
    train_source, _ = build_sources(cfg.task)
    mcfg = build_machine_config(cfg.machine, train_source)
    tcfg = build_train_config(cfg.train, cfg.seed)
    streams = stream_seeds(cfg.seed)
    machine = Machine(mcfg, seed=int(streams["init"].integers(2**31)))
    sections = {"task": dict(cfg.task), "run": {"seed": str(cfg.seed)}}
    records = train_loop(machine, train_source, tcfg, cfg.out, checkpoint_sections=sections, streams=streams)
    with open(os.path.join(cfg.out, "summary.txt"), "w") as fh:
        if not records:
            fh.write("iterations = 0\n")
            print(f"no iterations run; initial checkpoint in {cfg.out}")
            return EXIT_OK
        best = min(records, key=lambda r: r.bit_error)
        fh.write(f"iterations = {records[-1].iteration}\n")
        fh.write(f"final_bit_err = {records[-1].bit_error:.6f}\n")
        fh.write(f"best_bit_err = {best.bit_error:.6f}\n")
        fh.write(f"best_iteration = {best.iteration}\n")
    print(f"trained {records[-1].iteration} iterations; best bit error {best.bit_error:.4f} "
          f"at iteration {best.iteration}; outputs in {cfg.out}")
    return EXIT_OK


def _load(args):
    if args.checkpoint is None:
        raise ConfigError("--checkpoint is required")
    try:
        machine, sections = load_checkpoint(args.checkpoint)
    except (OSError, ValueError, KeyError) as exc:
        raise ConfigError(f"cannot load checkpoint {args.checkpoint}: {exc}") from None
    task = dict(sections.get("task", {}))
    if args.config is not None:
        cfg = load_config(args.config)
        task = dict(cfg.task)
        wanted = MachineConfig.from_dict(dict(cfg.machine, input_size=machine.config.input_size,
                                              output_size=machine.config.output_size))
        if wanted != machine.config:
            raise ConfigError(f"config {args.config} does not match the machine stored in {args.checkpoint}")
    task.update(_overrides(args.task))
    if "kind" not in task:
        raise ConfigError("no task recorded in the checkpoint; pass --config or --task kind=...")
    _, test_source = build_sources(task)
    if (test_source.input_width, test_source.output_width) != (machine.config.input_size, machine.config.output_size):
        raise ConfigError(f"task {task['kind']!r} has widths ({test_source.input_width}, {test_source.output_width}) "
                          f"but the checkpoint expects ({machine.config.input_size}, {machine.config.output_size})")
    return machine, test_source


def cmd_eval(args) -> int:
    machine, source = _load(args)
    seed = 0 if args.seed is None else args.seed
    result = evaluate(machine, source, n_sequences=args.sequences, seed=seed,
                      rng_gumbel=stream_seeds(seed)["gumbel"])
    print(f"sequences {result['sequences']}")
    print(f"bit_error_per_sequence {result['bit_error']:.4f}")
    print(f"bit_accuracy {result['bit_accuracy']:.6f}")
    return EXIT_OK


def cmd_trace(args) -> int:
    machine, source = _load(args)
    seed = 0 if args.seed is None else args.seed
    streams = stream_seeds(seed)
    inst = source.sample(streams["task"])
    _, trace = machine.run_sequence(inst.inputs[:, None, :], streams["gumbel"])
    out = args.out or "trace"
    os.makedirs(out, exist_ok=True)
    trace_path, state_path = os.path.join(out, "trace.csv"), os.path.join(out, "states.csv")
    write_trace(trace_path, trace, state_path)
    print(f"wrote {len(trace.steps)} steps to {trace_path} and {state_path}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    seed = 0 if args.seed is None else args.seed
    results = run_suite(seed)
    width = max(len(r.component) for r in results)
    for r in results:
        status = "ok" if r.passed else "FAIL"
        print(f"{r.component:<{width}}  max_rel_error {r.max_rel_error:.3e}  {status}")
    failed = [r.component for r in results if not r.passed]
    if failed:
        print(f"gradcheck failed (tolerance {TOLERANCE:g}): {', '.join(failed)}")
        return EXIT_FAILED
    print(f"gradcheck passed: {len(results)} components below {TOLERANCE:g}")
    return EXIT_OK


# Published sizes per single task: (NTM, NUTM) parameter counts, with the
# read/write head count, controller sizes and memory rows used for them.
PARAM_TARGETS = {
    "copy": (1, 100, 80, 128, 63260, 52206),
    "repeat_copy": (1, 100, 80, 128, 63381, 52307),
    "assoc_recall": (1, 100, 80, 128, 62218, 51364),
    "dynamic_ngrams": (1, 100, 80, 128, 58813, 48619),
    "priority_sort": (5, 200, 150, 128, 344068, 302398),
    "long_copy": (1, 100, 80, 256, 63260, 52206),
}

# Input/output widths implied by the published counts: repeat copy has no
# separate end marker, priority sort carries only bits plus the priority.
TABLE_WIDTHS = {
    "copy": (10, 8),
    "repeat_copy": (10, 9),
    "assoc_recall": (8, 6),
    "dynamic_ngrams": (1, 1),
    "priority_sort": (9, 8),
    "long_copy": (10, 8),
}


def parameter_table():
    """Rows of (task, model, target, count with table widths, count with this package's task widths)."""
    rows = []
    for kind, (heads, h_ntm, h_nutm, n, t_ntm, t_nutm) in PARAM_TARGETS.items():
        source = TaskSource(TASK_SETTINGS[kind]["train"])
        native = (source.input_width, source.output_width)
        for model, hidden, target in (("NTM", h_ntm, t_ntm), ("NUTM", h_nutm, t_nutm)):
            extra = dict(programs=2, attention="key_value", regularizer="collapse") if model == "NUTM" else {}

            def count(widths):
                cfg = MachineConfig(widths[0], widths[1], hidden, memory_rows=n, read_heads=heads,
                                    write_heads=heads, **extra)
                return Machine(cfg, 0).count_parameters()

            rows.append((kind, model, target, count(TABLE_WIDTHS[kind]), count(native), native, hidden))
    return rows


def cmd_params(args) -> int:
    rows = parameter_table()
    print(f"{'task':<15} {'model':<5} {'target':>8} {'computed':>9} {'delta':>6}   {'task-layout':>11} {'delta':>6}")
    exact = True
    notes = []
    for kind, model, target, table, native, widths, hidden in rows:
        exact &= table == target
        d_native = native - target
        print(f"{kind:<15} {model:<5} {target:>8} {table:>9} {table - target:>6}   {native:>11} {d_native:>+6}")
        if d_native:
            extra_in = widths[0] - TABLE_WIDTHS[kind][0]
            notes.append(f"  {kind} {model}: {extra_in} extra input channel(s) x 4 LSTM gates x {hidden} units "
                         f"= {extra_in * 4 * hidden} ({100.0 * d_native / target:+.2f}%)")
    print()
    print("wiring: LSTM with input and recurrent biases and learned h0/c0; each head's program holds an "
          "(H+1) x interface matrix (bias row included); output layer on [h, reads]; "
          "read interface M+6, write interface 3M+6, M=20; NUTM uses P=2 key-value programs with P-dim keys.")
    if notes:
        print("task-layout column: generated task inputs carry extra channels; every difference is the input fan-in:")
        print("\n".join(notes))
    return EXIT_OK if exact else EXIT_FAILED


# -- entry point -----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nutm", description="Neural Universal Turing Machine toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, *, config=False, checkpoint=False, out=False, task=False, iters=False):
        p.add_argument("--seed", type=int, default=None, help="root seed for all random streams")
        if config:
            p.add_argument("--config", required=config == "required", default=None, help="run configuration file")
        if checkpoint:
            p.add_argument("--checkpoint", default=None, help="checkpoint file written by train")
        if out:
            p.add_argument("--out", default=None, help="output directory")
        if task:
            p.add_argument("--task", action="append", metavar="KEY=VALUE", help="task override (repeatable)")
        if iters:
            p.add_argument("--iters", type=int, default=None, help="override train.iterations")

    p = sub.add_parser("train", help="train a machine from a config file")
    common(p, config="required", out=True, task=True, iters=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on test-length sequences")
    common(p, config=True, checkpoint=True, task=True)
    p.add_argument("--sequences", type=int, default=1000, help="number of test sequences")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("trace", help="write per-step head and program weights for one sequence")
    common(p, config=True, checkpoint=True, out=True, task=True)
    p.set_defaults(func=cmd_trace)

    p = sub.add_parser("gradcheck", help="finite-difference check of every gradient rule")
    common(p)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("params", help="parameter counts against the published model sizes")
    p.set_defaults(func=cmd_params)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
