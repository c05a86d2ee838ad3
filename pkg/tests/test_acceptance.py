"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the verdict lines
interleaved with pytest's own output.
"""
import itertools
import math
import time
from collections import Counter

import numpy as np
import pytest

from golden_data import COPY_ROWS, INCREMENT_ROWS, REVERSE_ROWS, SWAP_ROWS
from nram.controller import NeuralController, forward, init_params
from nram.curriculum import CurriculumState, sample_difficulty_detail
from nram.fuzzy import (PURE_KINDS, ModuleKind, delta, module_fuzzy, module_int, module_sequence, read_fuzzy,
                        write_fuzzy)
from nram.machine import halting_weights, run_batch, run_circuit, run_episode
from nram.programs import program, program_steps
from nram.tasks import (TASK_NAMES, TaskInstance, generate, memory_for_difficulty, reference_output, score,
                        validate_layout)
from nram.vm import (Circuit, DiscreteState, circuit_to_outputs, compile_lookup, discretize_outputs, run_discrete,
                     step_discrete)
from nram import autodiff as ad

import copy_training


def report(capsys, n: int, ok: bool, detail: str) -> None:
    with capsys.disabled():
        print(f"\ncriterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


def test_criterion_01_copy_golden_trace(capsys):
    t0 = time.perf_counter()
    inst = TaskInstance("copy", 5, COPY_ROWS[0][0][:6], [(6 + i, v) for i, v in enumerate([2, 10, 6, 8, 9])])
    disc = run_discrete(inst, program("copy"), 11, 12)
    table_ok = [(r.memory, r.registers, r.reads, r.writes) for r in disc.rows] == [
        (m, r, [p], [w]) for m, r, p, w in COPY_ROWS]
    fuzzy = run_episode(inst, program("copy"), 11, 12, 4)
    fuzzy_ok = [(r.memory, r.registers, r.reads, r.writes) for r in fuzzy.rows] == [
        (m, r, [p], [w]) for m, r, p, w in COPY_ROWS]
    rng = np.random.default_rng(50)
    big = generate("copy", 50, memory_for_difficulty("copy", 50), rng)
    M = memory_for_difficulty("copy", 50)
    err = score(run_discrete(big, program("copy"), program_steps("copy", 50), M).final_memory, big)
    secs = time.perf_counter() - t0
    report(capsys, 1, table_ok and fuzzy_ok and err == 0 and secs < 1,
           f"11 rows discrete={table_ok} fuzzy={fuzzy_ok}; length 50 (M={M}) error {err}; {secs:.2f}s")


def test_criterion_02_appendix_golden_traces(capsys):
    t0 = time.perf_counter()
    results = {}
    for name, rows, T in (("increment", INCREMENT_ROWS, 10), ("reverse", REVERSE_ROWS, 9), ("swap", SWAP_ROWS, 3)):
        run = run_discrete(rows[0][0], program(name), T, 16)
        results[name] = run.final_memory == rows[-1][0]
    secs = time.perf_counter() - t0
    report(capsys, 2, all(results.values()) and secs < 1, f"final rows match {results}; {secs:.2f}s")


def _episode_loss(params, insts):
    return run_batch(insts, NeuralController(params), 2, 5, 2, 1, renorm=False)


def test_criterion_03_gradient_oracle(capsys):
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    params = init_params(rng, 1.0, "mlp", 2, 14, 8)
    insts = [TaskInstance("x", 1, [int(v) for v in rng.integers(0, 5, 3)], [(3, 2), (4, 1)]) for _ in range(2)]
    ctrl = NeuralController(params)
    with ad.Tape() as tape:
        tape.backward(run_batch(insts, ctrl, 2, 5, 2, 1, renorm=False).loss)
    grads = ctrl.gradients()
    analytic = np.concatenate([grads[n].ravel() for n in params.names()])
    flat = params.flat()
    numeric = np.zeros_like(flat)
    h = 1e-5
    for i in range(flat.size):
        e = np.zeros_like(flat)
        e[i] = h
        up = float(_episode_loss(params.with_flat(flat + e), insts).loss.value)
        down = float(_episode_loss(params.with_flat(flat - e), insts).loss.value)
        numeric[i] = (up - down) / (2 * h)
    # the floor keeps roundoff in near-zero gradients (|g| ~ 1e-9) from dominating
    rel = np.abs(analytic - numeric) / np.maximum(np.abs(analytic) + np.abs(numeric), 1e-5)
    secs = time.perf_counter() - t0
    report(capsys, 3, rel.max() < 1e-4 and secs < 60,
           f"{flat.size} params, max rel err {rel.max():.2e}, max abs err "
           f"{np.abs(analytic - numeric).max():.2e}; {secs:.1f}s")


def _random_circuit(rng, R, mod_exec=1):
    Q = 14 * mod_exec
    mods = tuple((int(rng.integers(0, R + i)), int(rng.integers(0, R + i))) for i in range(Q))
    return Circuit(mods, tuple(int(x) for x in rng.integers(0, R + Q, R)), bool(rng.integers(0, 2)))


def test_criterion_04_fuzzy_discrete_equivalence(capsys):
    rng = np.random.default_rng(4)
    mismatches = 0
    for k in range(1000):
        M, R, mod_exec = int(rng.integers(2, 17)), int(rng.integers(1, 5)), 1 + k % 2
        kinds = module_sequence(mod_exec)
        circ = _random_circuit(rng, R, mod_exec)
        st = DiscreteState([int(x) for x in rng.integers(0, M, R)], [int(x) for x in rng.integers(0, M, M)])
        new, _, _ = step_discrete(st, circ, kinds)
        regs = [delta(r, M) for r in st.registers]
        mem = np.stack([delta(v, M) for v in st.memory])
        res = run_circuit(regs, mem, circuit_to_outputs(circ), kinds)
        got_regs = [int(np.argmax(r.value)) for r in res.registers]
        got_mem = [int(v) for v in np.argmax(res.memory.value, axis=-1)]
        mismatches += sum(a != b for a, b in zip(got_regs, new.registers))
        mismatches += sum(a != b for a, b in zip(got_mem, new.memory))
        mismatches += discretize_outputs(circuit_to_outputs(circ)) != circ
    report(capsys, 4, mismatches == 0, f"1000 random saturated steps, {mismatches} mismatches")


def test_criterion_05_distribution_conservation(capsys):
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(1000):
        M, R, B = int(rng.integers(2, 17)), int(rng.integers(1, 5)), 2
        Q = 14
        regs = [rng.dirichlet(np.ones(M), size=B) for _ in range(R)]
        mem = rng.dirichlet(np.ones(M), size=(B, M))
        out = circuit_to_outputs(_random_circuit(rng, R), 1.0)
        out.a = [rng.normal(0, 3, (B, R + i)) for i in range(Q)]
        out.b = [rng.normal(0, 3, (B, R + i)) for i in range(Q)]
        out.c = [rng.normal(0, 3, (B, R + Q)) for _ in range(R)]
        res = run_circuit(regs, mem, out, module_sequence(1))
        for r in res.registers:
            worst = max(worst, float(np.abs(r.value.sum(-1) - 1).max()))
        worst = max(worst, float(np.abs(res.memory.value.sum(-1) - 1).max()))
    exact = 0
    for _ in range(10000):
        T = int(rng.integers(1, 11))
        f = rng.random(T)
        if rng.random() < 0.2:
            f[rng.random(T) < 0.5] = rng.choice([0.0, 1.0])
        p = [float(x) for x in halting_weights(list(f))]
        exact += sum(p) == 1.0 and min(p) >= 0
    report(capsys, 5, worst < 1e-6 and exact == 10000,
           f"max |row sum - 1| = {worst:.1e} over 1000 steps; halting sums exactly 1 in {exact}/10000")


def test_criterion_06_module_semantics(capsys):
    M = 16
    mismatches = 0
    for kind in PURE_KINDS:
        for a, b in itertools.product(range(M), repeat=2):
            got = module_fuzzy(kind, delta(a, M), delta(b, M))
            mismatches += not np.array_equal(got, delta(module_int(kind, a, b, M), M))
    rng = np.random.default_rng(6)
    values = [int(v) for v in rng.integers(0, M, M)]
    mem = np.stack([delta(v, M) for v in values])
    for a, b in itertools.product(range(M), repeat=2):
        mismatches += not np.array_equal(read_fuzzy(mem, delta(a, M)), delta(values[a], M))
        want = list(values)
        want[a] = b
        got = write_fuzzy(mem, delta(a, M), delta(b, M))
        mismatches += not np.array_equal(got, np.stack([delta(v, M) for v in want]))
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(2, 33))
        A, B = rng.dirichlet(np.ones(n)), rng.dirichlet(np.ones(n))
        conv = np.real(np.fft.ifft(np.fft.fft(A) * np.fft.fft(B)))
        worst = max(worst, float(np.abs(module_fuzzy(ModuleKind.ADD, A, B) - conv).max()))
    report(capsys, 6, mismatches == 0 and worst < 1e-9 and len(PURE_KINDS) == 12,
           f"14 kinds x 256 pairs (READ/WRITE against a fixed memory): {mismatches} mismatches; "
           f"ADD vs FFT convolution max err {worst:.1e}")


def test_criterion_07_curriculum_sampler(capsys):
    rng = np.random.default_rng(7)
    n = 10**6
    state = CurriculumState(5, 20)
    branches, extras = Counter(), Counter()
    for _ in range(n):
        _, branch, e = sample_difficulty_detail(state, 20, rng)
        branches[branch] += 1
        extras[e] += 1
    freq = [branches[b] / n for b in range(3)]
    branch_dev = max(abs(f - p) for f, p in zip(freq, (0.10, 0.25, 0.65)))
    e_dev = max(abs(extras[k] / n - 2.0 ** -(k + 1)) for k in range(6))
    report(capsys, 7, branch_dev < 0.01 and e_dev < 0.01,
           f"branch freqs {[round(f, 4) for f in freq]} (max dev {branch_dev:.4f}); "
           f"P(e=k) max dev {e_dev:.4f} for k<=5")


def test_criterion_08_task_generators(capsys):
    rng = np.random.default_rng(8)
    failures = Counter()
    for task in TASK_NAMES:
        for i in range(1000):
            d = 1 + i % 10
            M = memory_for_difficulty(task, d) + int(rng.integers(0, 3))
            inst = generate(task, d, M, rng)
            try:
                validate_layout(inst, M)
                if reference_output(inst, M) != dict(inst.expected):
                    failures[task] += 1
            except ValueError:
                failures[task] += 1
    report(capsys, 8, not failures, f"10 tasks x 1000 instances, failures: {dict(failures) or 'none'}")


def test_criterion_09_error_metric(capsys):
    expected = [(i, 1 + i) for i in range(4, 8)]
    inst = TaskInstance("x", 4, [0] * 8, expected)
    right = [0, 0, 0, 0, 5, 6, 7, 8]
    cases = {0.0: right, 0.25: right[:-1] + [0], 1.0: [0] * 8}
    got = {frac: score(mem, inst) for frac, mem in cases.items()}
    report(capsys, 9, all(got[f] == f for f in got),
           f"mismatch fraction -> error: {got} (error equals the fraction of wrong masked cells)")


def test_criterion_10_scaled_copy_training(capsys):
    outcome = copy_training.run_acceptance()
    report(capsys, 10, outcome.passed, outcome.summary)


def test_criterion_11_lookup_compilation(capsys):
    mismatches = 0
    checked = 0
    for seed, init_h in itertools.product(range(10), (0.1, 1.0, 5.0)):
        params = init_params(np.random.default_rng(seed), init_h, "mlp", 4, 14, 12)
        table = compile_lookup(params)
        for key in itertools.product((0, 1), repeat=4):
            direct = discretize_outputs(forward(params, None, np.array(key, dtype=float))[0])
            mismatches += table.circuit_for(key) != direct
            checked += 1
    trained = copy_training.trained_checkpoint()
    if trained is not None:
        table = compile_lookup(trained)
        for key in itertools.product((0, 1), repeat=4):
            mismatches += table.circuit_for(key) != discretize_outputs(
                forward(trained, None, np.array(key, dtype=float))[0])
            checked += 1
    report(capsys, 11, mismatches == 0 and len(table.table) == 16,
           f"{checked} table entries vs direct discretized forward, {mismatches} mismatches")
