"""One timestep of the differentiable register machine, halting and loss."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Protocol, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .fuzzy import ModuleKind, module_fuzzy, module_sequence, read_fuzzy, write_fuzzy
from .trace import TraceRow


@dataclass
class ControllerOutputs:
    """Circuit description emitted by the controller for one timestep.

    ``a[i]``/``b[i]`` are operand logits of module i over the pool
    ``r_1..r_R, o_1..o_{i-1}`` (length R+i), ``c[j]`` are source logits of
    register j over ``r_1..r_R, o_1..o_Q``, ``finish_logit`` is the
    pre-sigmoid willingness to stop.  Entries may carry leading batch axes.

    ``packed`` optionally holds the same logits as one (..., 2Q+R, R+Q)
    tensor with rows a_1, b_1, ..., a_Q, b_Q, c_1, ..., c_R padded by -inf.
    When present the machine differentiates through it instead of the lists.
    """
    a: list
    b: list
    c: list
    finish_logit: Any
    packed: Any = None

    def validate(self, R: int, Q: int) -> None:
        if len(self.a) != Q or len(self.b) != Q or len(self.c) != R:
            raise ValueError(f"expected {Q} operand logit pairs and {R} register logits")
        for i in range(Q):
            for vec in (self.a[i], self.b[i]):
                if _val(vec).shape[-1] != R + i:
                    raise ValueError(f"module {i}: operand logits must have length {R + i}")
        for vec in self.c:
            if _val(vec).shape[-1] != R + Q:
                raise ValueError(f"register logits must have length {R + Q}")


@dataclass
class MachineState:
    registers: list
    memory: Any
    hidden: Any = None
    t: int = 1

    @property
    def R(self) -> int:
        return len(self.registers)

    @property
    def M(self) -> int:
        return _val(self.memory).shape[-1]


@dataclass
class CircuitResult:
    registers: list
    memory: Any
    outputs: list
    selections: list = field(default_factory=list)
    reads: list = field(default_factory=list)
    writes: list = field(default_factory=list)


class Controller(Protocol):
    """Anything that maps binarized registers to a circuit description."""

    recurrent: bool

    def initial_hidden(self, batch_shape: tuple) -> Any: ...

    def forward(self, inputs, hidden, t: int) -> tuple[ControllerOutputs, Any]: ...


def _val(x):
    return x.value if isinstance(x, Tensor) else np.asarray(x)


def _select(pool, logits, renorm: bool):
    weights = ad.softmax(logits)
    mixed = ad.mix_stacked(weights, pool) if isinstance(pool, Tensor) else ad.mix(weights, pool)
    return ad.renormalize(mixed, renorm), weights


def select_operand(pool: Sequence, logits, renorm: bool = True):
    """Softmax-weighted average of the pool, rescaled to unit mass."""
    if len(pool) == 0:
        raise ValueError("operand pool is empty")
    if _val(logits).shape[-1] != len(pool):
        raise ValueError(f"{len(pool)} pool entries but {_val(logits).shape[-1]} logits")
    tensor_in = isinstance(logits, Tensor) or any(isinstance(p, Tensor) for p in pool)
    out, _ = _select(pool, logits, renorm)
    return out if tensor_in else out.value


def _constant_delta(k: int, like) -> np.ndarray:
    v = _val(like)
    out = np.zeros(v.shape, dtype=v.dtype)
    out[..., k] = 1.0
    return out


def run_circuit(registers: Sequence, memory, out: ControllerOutputs,
                kinds: Sequence[ModuleKind], renorm: bool = True) -> CircuitResult:
    """Evaluate the modules in order and overwrite the registers.

    READ/WRITE see the memory as left by earlier WRITEs of the same step.
    Register updates are simultaneous: all of them select from the
    registers as they were at the start of the step plus every module output.
    """
    R, Q = len(registers), len(kinds)
    out.validate(R, Q)
    registers = [ad.as_tensor(r) for r in registers]
    memory = ad.as_tensor(memory)
    if memory.value.shape[-1] != registers[0].value.shape[-1]:
        raise ValueError("dimension mismatch between registers and memory")
    # the operand pool is kept as one (..., R+i, M) tensor
    pool = ad.stack(registers, axis=-2)
    outputs = []
    result = CircuitResult([], None, [])
    packed = None
    if out.packed is not None:
        # one softmax over every head; padding gets weight 0
        packed = ad.softmax(out.packed)
        result.selections.append(packed)
    for i, kind in enumerate(kinds):
        if packed is not None:
            A = ad.select_row(packed, 2 * i, pool, renorm)
            B = ad.select_row(packed, 2 * i + 1, pool, renorm)
        else:
            A, wa = _select(pool, out.a[i], renorm)
            B, wb = _select(pool, out.b[i], renorm)
            result.selections += [wa, wb]
        if kind is ModuleKind.READ:
            o = read_fuzzy(memory, A)
            result.reads.append(A)
        elif kind is ModuleKind.WRITE:
            memory = ad.renormalize(write_fuzzy(memory, A, B), renorm)
            o = ad.Tensor(_constant_delta(0, A))
            result.writes.append((A, B))
        else:
            o = module_fuzzy(kind, A, B)
        outputs.append(o)
        pool = ad.append_row(pool, o)
    for j in range(R):
        if packed is not None:
            result.registers.append(ad.select_row(packed, 2 * Q + j, pool, renorm))
            continue
        r, w = _select(pool, out.c[j], renorm)
        result.selections.append(w)
        result.registers.append(r)
    result.memory = memory
    result.outputs = outputs
    return result


def binarize_registers(registers: Sequence):
    """Controller input: P(r_i = 0) for every register."""
    if any(isinstance(r, Tensor) for r in registers):
        return ad.stack([r[..., 0] for r in registers], axis=-1)
    return np.stack([_val(r)[..., 0] for r in registers], axis=-1)


def finish_probability(logit):
    if isinstance(logit, Tensor):
        return ad.sigmoid(logit)
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(logit, dtype=float)))


def step(state: MachineState, controller: Controller, kinds: Sequence[ModuleKind],
         renorm: bool = True) -> tuple[MachineState, Any, CircuitResult, ControllerOutputs]:
    """Run one timestep; returns the new state and the willingness f_t."""
    inputs = binarize_registers(state.registers)
    outs, hidden = controller.forward(inputs, state.hidden, state.t)
    res = run_circuit(state.registers, state.memory, outs, kinds, renorm)
    f = finish_probability(outs.finish_logit)
    return MachineState(res.registers, res.memory, hidden, state.t + 1), f, res, outs


def halting_weights(f: Sequence) -> list:
    """Probability of emitting output exactly at step t; the last step takes the rest."""
    T = len(f)
    if T == 0:
        raise ValueError("need at least one timestep")
    weights = []
    running = None
    alive = 1.0
    for t in range(T - 1):
        p = f[t] * alive
        weights.append(p)
        alive = alive * (1.0 - f[t])
        running = p if running is None else running + p
    weights.append(1.0 - running if running is not None else (f[0] * 0.0 + 1.0))
    return weights


@dataclass
class EpisodeTrace:
    memories: list  # memory after each step
    halt_weights: list
    finish: list
    loss: Any = None  # Tensor (sum over the batch)
    example_loss: np.ndarray | None = None
    selections: list = field(default_factory=list)
    finish_dists: list = field(default_factory=list)
    rows: list = field(default_factory=list)  # TraceRow per step (first example)
    registers: list = field(default_factory=list)

    def expected_memory(self) -> np.ndarray:
        """Output distribution of every cell under the halting weights."""
        total = 0.0
        for p, mem in zip(self.halt_weights, self.memories):
            total = total + _val(p)[..., None, None] * _val(mem)
        return total

    def output_values(self) -> np.ndarray:
        return np.argmax(self.expected_memory(), axis=-1)


def initial_state(input_memories: Sequence[Sequence[int]], M: int, R: int, dtype=np.float64) -> MachineState:
    B = len(input_memories)
    mem = np.zeros((B, M, M), dtype=dtype)
    mem[:, :, 0] = 1.0
    for b, values in enumerate(input_memories):
        if len(values) > M:
            raise ValueError(f"instance needs {len(values)} memory cells but M={M}")
        for i, v in enumerate(values):
            if not 0 <= v < M:
                raise ValueError(f"memory value {v} outside Z_{M}")
            mem[b, i, 0] = 0.0
            mem[b, i, v] = 1.0
    regs = []
    for _ in range(R):
        r = np.zeros((B, M), dtype=dtype)
        r[:, 0] = 1.0
        regs.append(r)
    return MachineState(regs, mem)


def target_weights(instances, M: int, dtype=np.float64) -> np.ndarray:
    """W[b, i, y] = 1 when masked cell i of example b should hold y."""
    W = np.zeros((len(instances), M, M), dtype=dtype)
    for b, inst in enumerate(instances):
        for cell, value in inst.expected:
            if cell >= M or value >= M:
                raise ValueError(f"expected output ({cell}, {value}) does not fit M={M}")
            W[b, cell, value] = 1.0
    return W


def _nll(memory, W, eps: float):
    return ad.neg(ad.sum_(ad.sum_(ad.mul(W, ad.log_clip(memory, eps)), axis=-1), axis=-1))


def episode_loss(memories: Sequence, halt: Sequence, W, eps: float = 1e-30, variant: str = "expected"):
    """Per-example loss.

    ``expected``: -sum_t p_t sum_i log M^(t)[i, y_i] over masked cells.
    ``output``: -sum_i log sum_t p_t M^(t)[i, y_i].
    """
    tensor_in = any(isinstance(x, Tensor) for x in (*memories, *halt))
    if variant == "expected":
        loss = None
        for p, mem in zip(halt, memories):
            term = ad.mul(p, _nll(mem, W, eps))
            loss = term if loss is None else ad.add(loss, term)
    elif variant == "output":
        mix_mem = None
        for p, mem in zip(halt, memories):
            term = ad.mul(ad.as_tensor(p)[..., None, None], mem)
            mix_mem = term if mix_mem is None else ad.add(mix_mem, term)
        loss = _nll(mix_mem, W, eps)
    else:
        raise ValueError(f"unknown loss variant {variant!r}")
    return loss if tensor_in else loss.value


def _trace_row(t: int, state: MachineState, res: CircuitResult, b: int = 0) -> TraceRow:
    mem = np.argmax(_val(state.memory)[b], axis=-1).tolist()
    regs = [int(np.argmax(_val(r)[b])) for r in state.registers]
    reads = [int(np.argmax(_val(p)[b])) for p in res.reads]
    writes = [(int(np.argmax(_val(p)[b])), int(np.argmax(_val(a)[b]))) for p, a in res.writes]
    return TraceRow(t, mem, regs, reads, writes)


def run_batch(instances, controller: Controller, T: int, M: int, R: int, mod_exec: int = 1,
              eps: float = 1e-30, renorm: bool = True, loss_variant: str = "expected",
              dtype=np.float64, record_rows: bool = False, W=None) -> EpisodeTrace:
    """Execute a batch of episodes for ``T`` steps and compute the summed loss."""
    if T < 1:
        raise ValueError("T must be >= 1")
    kinds = module_sequence(mod_exec)
    state = initial_state([inst.input_memory for inst in instances], M, R, dtype)
    state.hidden = controller.initial_hidden((len(instances),))
    trace = EpisodeTrace([], [], [])
    for _ in range(T):
        prev = state
        state, f, res, _ = step(state, controller, kinds, renorm)
        trace.memories.append(state.memory)
        trace.finish.append(f)
        trace.selections.extend(res.selections)
        if record_rows:
            trace.rows.append(_trace_row(prev.t, prev, res))
    trace.registers = state.registers
    trace.halt_weights = halting_weights(trace.finish)
    if W is None and all(getattr(inst, "expected", None) is not None for inst in instances):
        W = target_weights(instances, M, dtype)
    if W is not None:
        per_example = episode_loss(trace.memories, trace.halt_weights, W, eps, loss_variant)
        trace.example_loss = np.array(_val(per_example), dtype=float)
        trace.loss = ad.sum_(per_example) if isinstance(per_example, Tensor) else float(np.sum(per_example))
    return trace


def run_episode(instance, controller: Controller, T: int, M: int, R: int, mod_exec: int = 1,
                eps: float = 1e-30, renorm: bool = True, loss_variant: str = "expected") -> EpisodeTrace:
    return run_batch([instance], controller, T, M, R, mod_exec, eps, renorm, loss_variant,
                     record_rows=True)

