"""Discretized machine: integer registers and memory, argmax circuits.

Besides executing trained controllers this module hosts scripted
controllers (hand-written circuits keyed by timestep or by the binarized
register vector), the lookup-table compilation of feedforward controllers,
and the DOT export of circuits.
"""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .controller import ControllerParams, NeuralController, forward, zero_hidden
from .fuzzy import ModuleKind, module_int, module_names, module_sequence
from .machine import ControllerOutputs
from .trace import TraceRow

SATURATION = 1.0e4


@dataclass(frozen=True)
class Circuit:
    """One timestep's wiring.

    ``modules[i] = (a, b)`` are pool indices for module i's operands (pool is
    ``r_1..r_R, o_1..o_{i-1}``); ``registers[j]`` indexes ``r_1..r_R, o_1..o_Q``.
    """
    modules: tuple[tuple[int, int], ...]
    registers: tuple[int, ...]
    finish: bool = False

    @property
    def R(self) -> int:
        return len(self.registers)

    @property
    def Q(self) -> int:
        return len(self.modules)

    def validate(self, R: int | None = None, Q: int | None = None) -> None:
        R = self.R if R is None else R
        Q = self.Q if Q is None else Q
        if len(self.registers) != R or len(self.modules) != Q:
            raise ValueError(f"circuit has {len(self.registers)} registers / {len(self.modules)} modules, "
                             f"machine has {R} / {Q}")
        for i, (a, b) in enumerate(self.modules):
            if not (0 <= a < R + i and 0 <= b < R + i):
                raise ValueError(f"module {i} reads from a later module (feed-forward violated)")
        for j, src in enumerate(self.registers):
            if not 0 <= src < R + Q:
                raise ValueError(f"register {j} source {src} out of range")


@dataclass
class DiscreteState:
    registers: list[int]
    memory: list[int]
    t: int = 1

    def __post_init__(self):
        M = len(self.memory)
        if any(not 0 <= v < M for v in (*self.registers, *self.memory)):
            raise ValueError(f"values must lie in Z_{M}")


def discretize_outputs(out: ControllerOutputs) -> Circuit:
    """Replace each softmax by argmax (lowest index on ties); finish iff f >= 0.5."""
    mods = tuple((int(np.argmax(a)), int(np.argmax(b))) for a, b in zip(out.a, out.b))
    regs = tuple(int(np.argmax(c)) for c in out.c)
    return Circuit(mods, regs, bool(float(np.asarray(out.finish_logit)) >= 0.0))


extract_circuit = discretize_outputs


def circuit_to_outputs(circuit: Circuit, margin: float = SATURATION) -> ControllerOutputs:
    """Saturated logits whose softmax is exactly the one-hot circuit."""
    R, Q = circuit.R, circuit.Q

    def onehot(n, k):
        v = np.full(n, -margin)
        v[k] = 0.0
        return v

    a = [onehot(R + i, s[0]) for i, s in enumerate(circuit.modules)]
    b = [onehot(R + i, s[1]) for i, s in enumerate(circuit.modules)]
    c = [onehot(R + Q, s) for s in circuit.registers]
    return ControllerOutputs(a, b, c, np.float64(margin if circuit.finish else -margin))


def step_discrete(state: DiscreteState, circuit: Circuit, kinds: Sequence[ModuleKind] | None = None
                  ) -> tuple[DiscreteState, list[int], list[tuple[int, int]]]:
    """Execute one circuit on integers; returns (new state, READ addresses, WRITE (p, a))."""
    kinds = module_sequence(circuit.Q // 14) if kinds is None else kinds
    circuit.validate(len(state.registers), len(kinds))
    M = len(state.memory)
    memory = list(state.memory)
    pool = list(state.registers)
    reads, writes = [], []
    for (ia, ib), kind in zip(circuit.modules, kinds):
        a, b = pool[ia], pool[ib]
        if kind is ModuleKind.READ:
            o = memory[a]
            reads.append(a)
        elif kind is ModuleKind.WRITE:
            memory[a] = b
            writes.append((a, b))
            o = 0
        else:
            o = module_int(kind, a, b, M)
        pool.append(o)
    regs = [pool[s] for s in circuit.registers]
    return DiscreteState(regs, memory, state.t + 1), reads, writes


def binarized_key(registers: Sequence[int]) -> tuple[int, ...]:
    """Discrete controller input: 1 where the register holds 0."""
    return tuple(int(r == 0) for r in registers)


@dataclass
class LookupController:
    R: int
    table: dict[tuple[int, ...], Circuit]

    def __post_init__(self):
        if len(self.table) != 2 ** self.R:
            raise ValueError(f"lookup table needs {2 ** self.R} entries")

    def circuit_for(self, key: tuple[int, ...]) -> Circuit:
        return self.table[tuple(key)]


def compile_lookup(params: ControllerParams) -> LookupController:
    """Tabulate a feedforward controller on all 2^R binarized inputs."""
    if params.recurrent:
        raise ValueError("stateful controllers cannot be tabled")
    table = {}
    for key in itertools.product((0, 1), repeat=params.R):
        out, _ = forward(params, None, np.array(key, dtype=float))
        table[key] = discretize_outputs(out)
    return LookupController(params.R, table)


# ------------------------------------------------------------ scripted circuits

def _resolve(ref: str, names: list[str], R: int, limit: int) -> int:
    if ref.startswith("r") and ref[1:].isdigit():
        idx = int(ref[1:]) - 1
        if not 0 <= idx < R:
            raise ValueError(f"no register {ref}")
        return idx
    if ref not in names:
        raise ValueError(f"unknown operand {ref!r}")
    idx = R + names.index(ref)
    if idx >= limit:
        raise ValueError(f"operand {ref!r} is not computed yet")
    return idx


def circuit_from_spec(spec: dict, R: int, mod_exec: int = 1) -> Circuit:
    """Build a Circuit from ``{"modules": {NAME: [a, b]}, "registers": [...], "finish": bool}``.

    Operands are ``r1..rR`` or module names (``READ``, ``ADD``, ``READ#2``...).
    Unlisted modules read ``r1``; every WRITE must be listed.
    """
    names = module_names(mod_exec)
    kinds = module_sequence(mod_exec)
    wiring = spec.get("modules", {})
    unknown = set(wiring) - set(names)
    if unknown:
        raise ValueError(f"unknown modules {sorted(unknown)}")
    mods = []
    for i, (name, kind) in enumerate(zip(names, kinds)):
        if name not in wiring:
            if kind is ModuleKind.WRITE:
                raise ValueError(f"{name} must be wired explicitly")
            mods.append((0, 0))
            continue
        ops = list(wiring[name])
        if len(ops) == 1:
            ops.append("r1")
        mods.append(tuple(_resolve(op, names, R, R + i) for op in ops))
    regs = spec.get("registers")
    if regs is None or len(regs) != R:
        raise ValueError(f"circuit must list {R} register sources")
    circuit = Circuit(tuple(mods), tuple(_resolve(r, names, R, R + len(names)) for r in regs),
                      bool(spec.get("finish", False)))
    circuit.validate(R, len(names))
    return circuit


def circuit_to_spec(circuit: Circuit, mod_exec: int = 1) -> dict:
    names = module_names(mod_exec)
    R = circuit.R

    def ref(idx):
        return f"r{idx + 1}" if idx < R else names[idx - R]

    return {"modules": {names[i]: [ref(a), ref(b)] for i, (a, b) in enumerate(circuit.modules)},
            "registers": [ref(s) for s in circuit.registers],
            "finish": circuit.finish}


class ScriptedController:
    """Hand-written circuits selected by timestep or by binarized registers.

    ``schedule`` is ``{"by": "step" | "registers", "rules": {...}, "default": name}``.
    Step rules are keyed by step number, ``"even"`` or ``"odd"``; register rules
    by a bit string such as ``"1011"`` (bit i is 1 when r_{i+1} == 0).
    """

    recurrent = False

    def __init__(self, R: int, circuits: dict[str, Circuit], schedule: dict, mod_exec: int = 1):
        self.R = R
        self.mod_exec = mod_exec
        self.circuits = circuits
        self.schedule = schedule
        if schedule.get("by") not in ("step", "registers"):
            raise ValueError("schedule must be keyed by 'step' or 'registers'")
        for name in [*schedule.get("rules", {}).values(), schedule.get("default")]:
            if name is not None and name not in circuits:
                raise ValueError(f"schedule refers to unknown circuit {name!r}")

    @property
    def keyed_by_state(self) -> bool:
        return self.schedule["by"] == "registers"

    def circuit_at(self, t: int, key: Sequence[int]) -> Circuit:
        rules = self.schedule.get("rules", {})
        if self.schedule["by"] == "step":
            for k in (str(t), "even" if t % 2 == 0 else "odd"):
                if k in rules:
                    return self.circuits[rules[k]]
        else:
            k = "".join(str(int(x)) for x in key)
            if k in rules:
                return self.circuits[rules[k]]
        default = self.schedule.get("default")
        if default is None:
            raise KeyError(f"no circuit for step {t}")
        return self.circuits[default]

    # fuzzy-machine interface
    def initial_hidden(self, batch_shape: tuple):
        return None

    def forward(self, inputs, hidden, t: int):
        x = np.asarray(inputs.value if hasattr(inputs, "value") else inputs)
        flat = x.reshape(-1, x.shape[-1])
        outs = [circuit_to_outputs(self.circuit_at(t, tuple(int(v > 0.5) for v in row))) for row in flat]
        lead = x.shape[:-1]

        def stack(get):
            return np.stack([get(o) for o in outs]).reshape(*lead, -1) if lead else get(outs[0])

        Q = len(outs[0].a)
        a = [stack(lambda o, i=i: o.a[i]) for i in range(Q)]
        b = [stack(lambda o, i=i: o.b[i]) for i in range(Q)]
        c = [stack(lambda o, j=j: o.c[j]) for j in range(self.R)]
        fin = np.array([o.finish_logit for o in outs]).reshape(lead) if lead else outs[0].finish_logit
        return ControllerOutputs(a, b, c, fin), None

    # serialization
    def to_dict(self) -> dict:
        return {"registers": self.R, "mod_exec": self.mod_exec,
                "circuits": {n: circuit_to_spec(c, self.mod_exec) for n, c in self.circuits.items()},
                "schedule": self.schedule}

    @classmethod
    def from_dict(cls, d: dict) -> "ScriptedController":
        R, mod_exec = int(d["registers"]), int(d.get("mod_exec", 1))
        circuits = {n: circuit_from_spec(s, R, mod_exec) for n, s in d["circuits"].items()}
        return cls(R, circuits, d["schedule"], mod_exec)

    @classmethod
    def load(cls, path) -> "ScriptedController":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


# -------------------------------------------------------------------- running

@dataclass
class DiscreteRun:
    final_memory: list[int]
    rows: list[TraceRow] = field(default_factory=list)
    circuits: list[Circuit] = field(default_factory=list)
    keys: list[tuple[int, ...]] = field(default_factory=list)
    final_registers: list[int] = field(default_factory=list)

    @property
    def steps(self) -> int:
        return len(self.rows)


def _circuit_source(controller: Any):
    """Normalize the supported controller kinds to f(t, key, hidden) -> (Circuit, hidden)."""
    if isinstance(controller, NeuralController):
        controller = controller.params
    if isinstance(controller, ControllerParams):
        params = controller

        def src(t, key, hidden):
            if params.recurrent and hidden is None:
                hidden = zero_hidden(params)
            out, hidden = forward(params, hidden, np.array(key, dtype=float))
            return discretize_outputs(out), hidden
        return src, params.R, params.Q
    if isinstance(controller, LookupController):
        c0 = next(iter(controller.table.values()))
        return (lambda t, key, hidden: (controller.circuit_for(key), None)), controller.R, c0.Q
    if isinstance(controller, ScriptedController):
        Q = 14 * controller.mod_exec
        return (lambda t, key, hidden: (controller.circuit_at(t, key), None)), controller.R, Q
    raise TypeError(f"unsupported controller {type(controller).__name__}")


def run_discrete(instance, controller, T: int, M: int, stop_on_finish: bool = True) -> DiscreteRun:
    """Run up to T steps, stopping after the first step whose circuit says finish."""
    if T < 1:
        raise ValueError("T must be >= 1")
    values = instance.input_memory if hasattr(instance, "input_memory") else list(instance)
    if len(values) > M:
        raise ValueError(f"instance needs {len(values)} memory cells but M={M}")
    src, R, Q = _circuit_source(controller)
    kinds = module_sequence(Q // 14)
    state = DiscreteState([0] * R, list(values) + [0] * (M - len(values)))
    run = DiscreteRun([])
    hidden = None
    for _ in range(T):
        key = binarized_key(state.registers)
        circuit, hidden = src(state.t, key, hidden)
        new, reads, writes = step_discrete(state, circuit, kinds)
        run.rows.append(TraceRow(state.t, list(state.memory), list(state.registers), reads, writes))
        run.circuits.append(circuit)
        run.keys.append(key)
        state = new
        if stop_on_finish and circuit.finish:
            break
    run.final_memory = state.memory
    run.final_registers = state.registers
    return run


# ----------------------------------------------------------------- DOT export

_ARG_LABELS = {
    ModuleKind.READ: ("p", None),
    ModuleKind.WRITE: ("p", "a"),
    ModuleKind.LESS_THAN: ("x", "y"),
    ModuleKind.LESS_OR_EQUAL: ("x", "y"),
    ModuleKind.INC: ("a", None),
    ModuleKind.DEC: ("a", None),
    ModuleKind.ZERO: (None, None),
    ModuleKind.ONE: (None, None),
    ModuleKind.TWO: (None, None),
}


def _noop_writes(circuit: Circuit, kinds: Sequence[ModuleKind]) -> set[int]:
    """WRITEs that store READ(p) back at p with no WRITE in between."""
    R = circuit.R
    noop = set()
    for i, kind in enumerate(kinds):
        if kind is not ModuleKind.WRITE:
            continue
        p, a = circuit.modules[i]
        j = a - R
        if j < 0 or kinds[j] is not ModuleKind.READ or circuit.modules[j][0] != p:
            continue
        if any(kinds[k] is ModuleKind.WRITE for k in range(j + 1, i)):
            continue
        noop.add(i)
    return noop


def live_modules(circuit: Circuit, kinds: Sequence[ModuleKind] | None = None) -> set[int]:
    """Modules whose output reaches a register or a (non-trivial) WRITE."""
    kinds = module_sequence(circuit.Q // 14) if kinds is None else kinds
    R = circuit.R
    noop = _noop_writes(circuit, kinds)
    live: set[int] = set()
    frontier = [s - R for s in circuit.registers if s >= R]
    frontier += [i for i, k in enumerate(kinds) if k is ModuleKind.WRITE and i not in noop]
    while frontier:
        i = frontier.pop()
        if i in live:
            continue
        live.add(i)
        labels = _ARG_LABELS.get(kinds[i], ("a", "b"))
        for src, label in zip(circuit.modules[i], labels):
            if label is not None and src >= R:
                frontier.append(src - R)
    return live


def _q(s: str) -> str:
    return '"{}"'.format(s.replace('"', r'\"'))


def export_dot(circuit: Circuit, labels: Sequence[str] | None = None, name: str = "circuit") -> str:
    """Directed graph of the circuit with unused modules removed.

    Registers that keep their own value and feed no live module are left out,
    unless nothing else remains.
    """
    kinds = module_sequence(circuit.Q // 14)
    names = list(labels) if labels is not None else module_names(circuit.Q // 14)
    R = circuit.R
    live = live_modules(circuit, kinds)
    used_regs = set()
    for i in live:
        for src, label in zip(circuit.modules[i], _ARG_LABELS.get(kinds[i], ("a", "b"))):
            if label is not None and src < R:
                used_regs.add(src)
    shown = [j for j in range(R) if j in used_regs or circuit.registers[j] != j]
    if not live and not shown:
        shown = list(range(R))

    def node(idx):
        return _q(f"r{idx + 1}") if idx < R else _q(names[idx - R])

    lines = [f"digraph {_q(name)} {{", "  rankdir=LR;"]
    for j in shown:
        lines.append(f"  {node(j)} [shape=box];")
    for i in sorted(live):
        lines.append(f"  {node(R + i)} [shape=ellipse, label={_q(kinds[i].value)}];")
    for i in sorted(live):
        for src, label in zip(circuit.modules[i], _ARG_LABELS.get(kinds[i], ("a", "b"))):
            if label is not None:
                lines.append(f"  {node(src)} -> {node(R + i)} [label={_q(label)}];")
    for j in shown:
        lines.append(f"  {node(circuit.registers[j])} -> {node(j)} [style=bold];")
    if circuit.finish:
        lines.append('  "finish" [shape=doublecircle];')
    lines.append("}")
    return "\n".join(lines) + "\n"


def identity_circuit(R: int, mod_exec: int = 1) -> Circuit:
    """Every register keeps its value; each WRITE stores READ(r1) back at r1."""
    kinds = module_sequence(mod_exec)
    mods = []
    last_read = None
    for i, kind in enumerate(kinds):
        if kind is ModuleKind.READ:
            last_read = i
        if kind is ModuleKind.WRITE:
            mods.append((0, R + last_read))
        else:
            mods.append((0, 0))
    return Circuit(tuple(mods), tuple(range(R)))
