import numpy as np
import pytest

from nutm import autodiff as ad
from nutm.autodiff import Tensor, backward, finite_difference_check
from nutm.controller import Controller, ControllerConfig, ControllerState
from nutm.gradcheck import machine_builder
from nutm.machine import (Machine, MachineConfig, build_machine, count_parameters, load_checkpoint, read_checkpoint,
                          save_checkpoint)
from nutm.memory import MEMORY_INIT
from ntm_reference import ntm_forward

SMALL = dict(input_size=4, output_size=3, hidden_size=10, memory_rows=7, memory_width=5)


def test_same_seed_gives_identical_parameters():
    a = build_machine(MachineConfig(**SMALL, programs=3, attention="key_value"), seed=5).state_dict()
    b = build_machine(MachineConfig(**SMALL, programs=3, attention="key_value"), seed=5).state_dict()
    assert a.keys() == b.keys()
    assert all(np.array_equal(a[k], b[k]) for k in a)


@pytest.mark.parametrize("bad", [dict(programs=0), dict(attention="softest"), dict(controller="gru"),
                                 dict(regularizer="orthogonal", programs=3, key_size=2, attention="key_value"),
                                 dict(read_heads=0)])
def test_invalid_config_rejected(bad):
    with pytest.raises(ValueError):
        MachineConfig(**{**SMALL, **bad})


def test_config_round_trips_through_text():
    cfg = MachineConfig(**SMALL, programs=2, attention="gumbel_hard", temperature=0.5)
    back = MachineConfig.from_dict({k: str(v) for k, v in cfg.to_dict().items()})
    assert back == cfg


@pytest.mark.parametrize(("io", "heads", "hidden", "rows", "target"), [
    ((10, 8), 1, 100, 128, 63260),
    ((10, 9), 1, 100, 128, 63381),
    ((8, 6), 1, 100, 128, 62218),
    ((1, 1), 1, 100, 128, 58813),
    ((9, 8), 5, 200, 128, 344068),
    ((10, 8), 1, 100, 256, 63260),
])
def test_ntm_parameter_counts_match_published_sizes(io, heads, hidden, rows, target):
    cfg = MachineConfig(*io, hidden, memory_rows=rows, read_heads=heads, write_heads=heads)
    assert count_parameters(Machine(cfg)) == target


@pytest.mark.parametrize(("io", "heads", "hidden", "target"), [
    ((10, 8), 1, 80, 52206),
    ((10, 9), 1, 80, 52307),
    ((8, 6), 1, 80, 51364),
    ((1, 1), 1, 80, 48619),
    ((9, 8), 5, 150, 302398),
])
def test_nutm_parameter_counts_match_published_sizes(io, heads, hidden, target):
    cfg = MachineConfig(*io, hidden, read_heads=heads, write_heads=heads, programs=2, attention="key_value")
    assert count_parameters(Machine(cfg)) == target


def _interfaces(machine):
    cfg = machine.config
    return [machine.programs[n].values.data[0].reshape(cfg.hidden_size + 1, machine.layouts[n])
            for n in range(cfg.n_heads)]


@pytest.mark.parametrize("heads", [1, 2])
def test_single_program_machine_matches_reference_ntm(heads):
    cfg = MachineConfig(**SMALL, read_heads=heads, write_heads=heads, programs=1, attention="key_value")
    machine = Machine(cfg, seed=3)
    params = machine.state_dict()
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(100):
        x = rng.integers(0, 2, (int(rng.integers(1, 9)), 1, cfg.input_size)).astype(float)
        ours = np.stack([o.data for o in machine.run_sequence(x)[0]])
        ref = ntm_forward(params, _interfaces(machine), x, cfg.hidden_size, cfg.memory_rows, cfg.memory_width,
                          heads, heads)
        worst = max(worst, np.abs(ours - ref).max())
    assert worst <= 1e-10


def test_single_program_key_value_equals_uniform_ntm():
    base = dict(SMALL, programs=1)
    nutm = Machine(MachineConfig(**base, attention="key_value"), seed=1)
    ntm = Machine(MachineConfig(**base), seed=2)
    ntm.load_state_dict({k: v for k, v in nutm.state_dict().items() if k in ntm.parameters()})
    x = np.random.default_rng(4).standard_normal((6, 3, SMALL["input_size"]))
    for a, b in zip(nutm.run_sequence(x)[0], ntm.run_sequence(x)[0]):
        np.testing.assert_allclose(a.data, b.data, rtol=0, atol=1e-12)


def test_traced_weights_are_simplex():
    cfg = MachineConfig(**SMALL, read_heads=2, write_heads=1, programs=3, attention="key_value")
    _, trace = Machine(cfg, seed=0).run_sequence(np.random.default_rng(1).standard_normal((5, 2, 4)))
    for step in trace.steps:
        assert step.kinds == ["read", "read", "write"]
        for w in step.weights + step.programs:
            assert np.all(w >= 0) and np.allclose(w.sum(axis=-1), 1.0, atol=1e-9)


def test_first_step_reads_see_initial_memory():
    machine = Machine(MachineConfig(**SMALL), seed=0)
    _, state, _ = machine.step(np.ones((2, 4)), machine.initial_state(2))
    np.testing.assert_allclose(state.reads[0].data, MEMORY_INIT, rtol=1e-12)


def test_gumbel_machine_needs_rng_and_traces_one_hot():
    machine = Machine(MachineConfig(**SMALL, programs=3, attention="gumbel_hard"), seed=0)
    x = np.random.default_rng(1).standard_normal((4, 2, 4))
    with pytest.raises(ValueError, match="rng"):
        machine.run_sequence(x)
    _, trace = machine.run_sequence(x, np.random.default_rng(2))
    for step in trace.steps:
        for p in step.programs:
            assert np.array_equal(np.sort(p, axis=-1), np.tile([0.0, 0.0, 1.0], (2, 1)))


@pytest.mark.parametrize("attention", ["key_value", "direct"])
def test_full_sequence_gradients(attention):
    cfg = MachineConfig(3, 2, 5, memory_rows=6, memory_width=3, programs=2, attention=attention,
                        regularizer="collapse" if attention == "key_value" else "none")
    builder, values, names = machine_builder(cfg, steps=4, seed=2)
    assert finite_difference_check(builder, values, 1e-4) < 1e-4
    leaves = [Tensor(v, requires_grad=True) for v in values]
    backward(builder(leaves))
    grads = dict(zip(names, leaves))
    assert np.any(grads["nsm0.values"].grad != 0) and np.any(grads["nsm1.values"].grad != 0)
    if attention == "key_value":
        assert np.any(grads["nsm0.keys"].grad != 0)


def test_detaching_one_head_leaves_other_head_gradients_unchanged():
    cfg = MachineConfig(**SMALL, programs=2, attention="key_value")
    x = np.random.default_rng(0).standard_normal((3, 2, 4))

    def grads(detach):
        machine = Machine(cfg, seed=4)
        if detach:
            machine.programs[0].values = Tensor(machine.programs[0].values.data)
        outputs, _ = machine.run_sequence(x)
        backward(ad.reduce_sum(ad.concat(outputs, axis=0)))
        return machine.programs[1].values.grad, machine.programs[0].values.grad

    full, _ = grads(False)
    partial, detached = grads(True)
    assert detached is None
    np.testing.assert_array_equal(full, partial)


def test_checkpoint_round_trip(tmp_path):
    cfg = MachineConfig(**SMALL, programs=2, attention="key_value", regularizer="orthogonal")
    machine = Machine(cfg, seed=9)
    path = tmp_path / "m.bin"
    save_checkpoint(path, machine, {"task": {"kind": "copy", "length": "1, 10"}})
    loaded, sections = load_checkpoint(path)
    assert loaded.config == cfg
    assert sections["task"] == {"kind": "copy", "length": "1, 10"}
    for name, value in machine.state_dict().items():
        assert np.array_equal(loaded.state_dict()[name], value)
    save_checkpoint(tmp_path / "again.bin", loaded, {"task": {"kind": "copy", "length": "1, 10"}})
    assert (tmp_path / "again.bin").read_bytes() == path.read_bytes()


def test_checkpoint_rejects_foreign_file(tmp_path):
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"not a checkpoint")
    with pytest.raises(ValueError, match="magic"):
        read_checkpoint(bad)


def test_load_state_dict_validates():
    machine = Machine(MachineConfig(**SMALL))
    state = machine.state_dict()
    with pytest.raises(ValueError, match="missing"):
        machine.load_state_dict({k: v for k, v in list(state.items())[1:]})
    state["controller.b_out"] = np.zeros(7)
    with pytest.raises(ValueError, match="shape mismatch"):
        machine.load_state_dict(state)


# -- controller ----------------------------------------------------------------------


def _controller(kind="lstm", **kw):
    cfg = ControllerConfig(input_size=3, hidden_size=4, read_width=2, read_heads=1, write_heads=1,
                           output_size=2, kind=kind)
    return Controller(cfg, kw.get("query_widths", [3, 3]), np.random.default_rng(0))


def test_lstm_with_zero_weights_and_state_gives_zero_features():
    ctrl = _controller()
    for t in ctrl.params.values():
        t.data = np.zeros_like(t.data)
    state = ControllerState(Tensor(np.zeros((1, 4))), Tensor(np.zeros((1, 4))), Tensor(np.zeros((1, 4))))
    out = ctrl.state_step(np.zeros((1, 3)), np.zeros((1, 2)), state)
    np.testing.assert_array_equal(out.features.data, 0.0)


def test_feedforward_controller_is_stateless():
    ctrl = _controller("feedforward")
    x, r = np.ones((1, 3)), np.full((1, 2), 0.5)
    a = ctrl.state_step(x, r, ctrl.initial_state(1))
    b = ctrl.state_step(x, r, a)
    np.testing.assert_array_equal(a.features.data, b.features.data)


def test_state_step_rejects_wrong_widths():
    ctrl = _controller()
    with pytest.raises(ad.ShapeError, match="input width 3"):
        ctrl.state_step(np.ones((1, 4)), np.ones((1, 2)), ctrl.initial_state(1))


def test_meta_interface_with_zero_features_is_bias():
    ctrl = _controller()
    np.testing.assert_array_equal(ctrl.meta_interface(Tensor(np.zeros((1, 4))), 1).data[0], ctrl["meta1.b"].data)
    with pytest.raises(IndexError):
        ctrl.meta_interface(Tensor(np.zeros((1, 4))), 2)


def test_interface_projection_cases():
    program = np.random.default_rng(0).standard_normal((5, 7))
    np.testing.assert_array_equal(Controller.interface_project(np.zeros(4), np.zeros((5, 7))).data, 0.0)
    np.testing.assert_allclose(Controller.interface_project(np.eye(4)[2], program).data, program[2] + program[4])
    np.testing.assert_array_equal(Controller.interface_project(np.zeros(4), program).data, program[4])
    with pytest.raises(ad.ShapeError):
        Controller.interface_project(np.zeros(4), np.zeros((4, 7)))


def test_output_projection_with_zero_weights_is_bias():
    ctrl = _controller()
    ctrl["w_out"].data = np.zeros_like(ctrl["w_out"].data)
    out = ctrl.output_project(Tensor(np.ones((2, 4))), Tensor(np.ones((2, 2))))
    np.testing.assert_array_equal(out.data, np.tile(ctrl["b_out"].data, (2, 1)))
