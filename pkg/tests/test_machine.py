import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from golden_data import COPY_ROWS
from nram import autodiff as ad
from nram.fuzzy import ModuleKind, delta, module_sequence
from nram.machine import (ControllerOutputs, MachineState, binarize_registers, episode_loss, finish_probability,
                          halting_weights, initial_state, run_batch, run_circuit, run_episode, select_operand, step)
from nram.programs import program
from nram.tasks import TaskInstance
from nram.vm import Circuit, circuit_to_outputs, identity_circuit

KINDS = module_sequence(1)


def point_state(values, M, registers):
    mem = np.stack([delta(v, M) for v in values] + [delta(0, M)] * (M - len(values)))
    return [delta(r, M) for r in registers], mem


def test_select_operand_examples():
    M = 5
    pool = [delta(0, M), delta(3, M)]
    np.testing.assert_allclose(select_operand(pool, np.array([1000.0, -1000.0])), delta(0, M))
    np.testing.assert_allclose(select_operand(pool, np.zeros(2)), [0.5, 0, 0, 0.5, 0])
    d = np.array([0.1, 0.2, 0.3, 0.4, 0.0])
    np.testing.assert_allclose(select_operand([d], np.array([7.0])), d)
    with pytest.raises(ValueError):
        select_operand(pool, np.zeros(3))
    with pytest.raises(ValueError):
        select_operand([], np.zeros(0))


def test_controller_outputs_shapes_validated():
    out = circuit_to_outputs(identity_circuit(2))
    out.validate(2, 14)
    bad = ControllerOutputs(out.a[:-1], out.b, out.c, out.finish_logit)
    with pytest.raises(ValueError):
        bad.validate(2, 14)
    bad = ControllerOutputs(out.a, out.b, [np.zeros(3)] * 2, out.finish_logit)
    with pytest.raises(ValueError):
        bad.validate(2, 14)


def test_identity_circuit_keeps_registers():
    M = 8
    regs, mem = point_state([3, 1, 4, 1, 5], M, [2, 7, 0])
    res = run_circuit(regs, mem, circuit_to_outputs(identity_circuit(3)), KINDS)
    for r_in, r_out in zip(regs, res.registers):
        np.testing.assert_allclose(r_out.value, r_in)
    np.testing.assert_allclose(res.memory.value, mem)


def test_inc_wiring_on_single_register():
    M = 6
    mods = [(0, 0)] * 14
    mods[13] = (0, 1)  # WRITE(p=r1, a=READ(r1)) is a no-op
    circ = Circuit(tuple(mods), (1 + 4,))
    regs, mem = point_state([], M, [2])
    res = run_circuit(regs, mem, circuit_to_outputs(circ), KINDS)
    np.testing.assert_allclose(res.registers[0].value, delta(3, M))


def test_write_output_is_zero():
    M = 6
    mods = [(0, 0)] * 14
    mods[13] = (0, 0)
    circ = Circuit(tuple(mods), (1 + 13,))
    regs, mem = point_state([4], M, [0])
    res = run_circuit(regs, mem, circuit_to_outputs(circ), KINDS)
    np.testing.assert_allclose(res.registers[0].value, delta(0, M))
    np.testing.assert_allclose(res.memory.value[0], delta(0, M))


def test_copy_step_two_to_three():
    mem_vals, regs, _, _ = COPY_ROWS[1]
    nxt_mem, nxt_regs, _, _ = COPY_ROWS[2]
    M = 12
    r, m = point_state(mem_vals, M, regs)
    state = MachineState([ad.Tensor(x[None]) for x in r], ad.Tensor(m[None]), None, 2)
    new, f, res, _ = step(state, program("copy"), KINDS)
    assert [int(np.argmax(x.value[0])) for x in new.registers] == nxt_regs == [0, 5, 1, 1]
    assert list(np.argmax(new.memory.value[0], axis=-1)) == nxt_mem
    assert nxt_mem[6] == 2


def test_scripted_copy_first_step():
    mem_vals, regs, _, _ = COPY_ROWS[0]
    r, m = point_state(mem_vals, 12, regs)
    state = MachineState([x[None] for x in r], m[None], None, 1)
    new, _, _, _ = step(state, program("copy"), KINDS)
    assert [int(np.argmax(x.value[0])) for x in new.registers] == COPY_ROWS[1][1]


def test_binarize_examples():
    assert list(binarize_registers([delta(0, 6), delta(5, 6)])) == [1.0, 0.0]
    assert binarize_registers([np.full(4, 0.25)])[0] == 0.25
    eq = np.zeros(5)
    eq[1] = 1.0  # EQUALITY(a, a) is the boolean 1
    assert binarize_registers([eq])[0] == 0.0


def test_finish_probability():
    assert finish_probability(0.0) == 0.5


def test_halting_examples():
    np.testing.assert_allclose(halting_weights([0.5, 0.5, 0.3]), [0.5, 0.25, 0.25])
    np.testing.assert_allclose(halting_weights([1.0, 0.4, 0.2]), [1.0, 0.0, 0.0])
    np.testing.assert_allclose(halting_weights([0.0, 0.0]), [0.0, 1.0])
    assert halting_weights([0.7]) == [1.0] or float(np.asarray(halting_weights([0.7])[0])) == 1.0
    with pytest.raises(ValueError):
        halting_weights([])


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=10))
def test_halting_weights_sum_exactly_one(f):
    p = [float(np.asarray(x)) for x in halting_weights(f)]
    assert all(x >= 0 for x in p[:-1])
    assert math.fsum(p) == pytest.approx(1.0, abs=1e-15)
    # the last weight is defined as 1 - (running sum), so the plain sum is exactly 1
    assert sum(p[:-1]) + p[-1] == 1.0


def test_loss_examples():
    M = 4
    W = np.zeros((1, M, M))
    W[0, 2, 3] = 1.0
    good = np.tile(delta(3, M), (1, M, 1))
    assert episode_loss([good], [np.ones(1)], W)[0] == pytest.approx(0.0)
    bad = np.tile(delta(1, M), (1, M, 1))
    assert episode_loss([bad], [np.ones(1)], W, eps=1e-30)[0] == pytest.approx(30 * math.log(10))
    half = np.tile(0.5 * delta(3, M) + 0.5 * delta(0, M), (1, M, 1))
    loss = episode_loss([half, half], [np.full(1, 0.5), np.full(1, 0.5)], W)
    assert loss[0] == pytest.approx(0.6931, abs=1e-4)
    out = episode_loss([half, half], [np.full(1, 0.5), np.full(1, 0.5)], W, variant="output")
    assert out[0] == pytest.approx(math.log(2))


def test_run_episode_copy_table():
    inst = TaskInstance("copy", 5, COPY_ROWS[0][0], [(6 + i, v) for i, v in enumerate([2, 10, 6, 8, 9])])
    trace = run_episode(inst, program("copy"), 11, 12, 4)
    for row, (mem, regs, rp, wr) in zip(trace.rows, COPY_ROWS):
        assert row.memory == mem and row.registers == regs
        assert row.reads == [rp] and row.writes == [wr]
    assert list(trace.output_values()[0]) == COPY_ROWS[-1][0][:6] + [2, 10, 6, 8, 9, 0]
    assert trace.example_loss[0] == pytest.approx(0.0, abs=1e-9)


def test_run_episode_rejects_bad_input():
    inst = TaskInstance("copy", 1, [1, 2, 3], [(2, 2)])
    with pytest.raises(ValueError):
        run_episode(inst, program("copy"), 0, 12, 4)
    with pytest.raises(ValueError):
        run_episode(inst, program("copy"), 3, 2, 4)


def test_never_writing_controller_has_zero_loss_on_untouched_cells():
    M = 6
    mods = [(0, 0)] * 14
    mods[13] = (0, 4)  # WRITE(r1, READ(r1))
    script = circuit_to_outputs(Circuit(tuple(mods), (0, 1)))

    class Fixed:
        recurrent = False

        def initial_hidden(self, shape):
            return None

        def forward(self, inputs, hidden, t):
            return script, None

    inst = TaskInstance("x", 1, [0, 3], [(4, 0), (5, 0)])
    trace = run_batch([inst], Fixed(), 3, M, 2)
    assert float(trace.loss.value) == pytest.approx(0.0, abs=1e-12)


def random_outputs(rng, R, Q, B, scale=2.0):
    a = [rng.normal(0, scale, (B, R + i)) for i in range(Q)]
    b = [rng.normal(0, scale, (B, R + i)) for i in range(Q)]
    c = [rng.normal(0, scale, (B, R + Q)) for _ in range(R)]
    return ControllerOutputs(a, b, c, rng.normal(size=B))


def test_distribution_conservation_random_steps():
    rng = np.random.default_rng(5)
    for _ in range(50):
        M, R, B = int(rng.integers(2, 12)), int(rng.integers(1, 5)), 3
        regs = [rng.dirichlet(np.ones(M), size=B) for _ in range(R)]
        mem = rng.dirichlet(np.ones(M), size=(B, M))
        res = run_circuit(regs, mem, random_outputs(rng, R, 14, B), KINDS)
        for r in res.registers:
            np.testing.assert_allclose(r.value.sum(-1), 1.0, atol=1e-6)
        np.testing.assert_allclose(res.memory.value.sum(-1), 1.0, atol=1e-6)
        for o in res.outputs:
            np.testing.assert_allclose(o.value.sum(-1), 1.0, atol=1e-6)


def test_initial_state_layout():
    s = initial_state([[3, 1]], 5, 2)
    assert list(np.argmax(s.memory[0], -1)) == [3, 1, 0, 0, 0]
    assert all(r[0, 0] == 1.0 for r in s.registers)
    with pytest.raises(ValueError):
        initial_state([[7]], 5, 2)
