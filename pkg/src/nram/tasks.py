"""Generators for the ten algorithmic tasks and the cell-accuracy error metric.

Every task comes with three pieces: a generator that lays out a random
instance in memory, a *reference solver* that recomputes the expected output
from the input memory alone (by following the task's pointer semantics), and
a layout validator.  The generator and the solver share no code, so running
one against the other is a real check.

NULL is the value 0.  Difficulty is the array / list / tree size.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

TASK_NAMES = ("access", "increment", "copy", "reverse", "swap", "permutation",
              "listk", "listsearch", "merge", "walkbst")

LEFT, RIGHT = 1, 2


class CapacityError(ValueError):
    def __init__(self, task: str, difficulty: int, M: int, required: int):
        super().__init__(f"{task} at difficulty {difficulty} needs memory size >= {required}, got M={M}")
        self.required = required


@dataclass
class TaskInstance:
    task: str
    difficulty: int
    input_memory: list[int]
    expected: list[tuple[int, int]]
    extent: int = 0  # one past the highest structural (non-trash) cell

    @property
    def mask(self) -> list[int]:
        return [cell for cell, _ in self.expected]

    def to_json(self) -> str:
        return json.dumps({"task": self.task, "difficulty": self.difficulty,
                           "input_memory": list(self.input_memory),
                           "expected": [list(e) for e in self.expected],
                           "mask": self.mask, "extent": self.extent})

    @classmethod
    def from_json(cls, line: str) -> "TaskInstance":
        d = json.loads(line)
        expected = [tuple(e) for e in d["expected"]]
        if [c for c, _ in expected] != d.get("mask", [c for c, _ in expected]):
            raise ValueError("mask does not match expected cells")
        return cls(d["task"], d["difficulty"], d["input_memory"], expected, d.get("extent", 0))


@dataclass(frozen=True)
class TaskSpec:
    name: str
    generate: Callable
    solve: Callable
    validate: Callable
    min_cells: Callable[[int], int]
    scattered: bool = False


def _ints(rng, lo, hi, n) -> list[int]:
    """n values uniform on [lo, hi]."""
    return [int(v) for v in rng.integers(lo, hi + 1, size=n)]


def _place_blocks(rng, start: int, M: int, n: int, size: int) -> list[int]:
    """Uniformly random non-overlapping placement of n blocks in [start, M)."""
    free = M - start
    singles = free - n * size
    if singles < 0:
        raise ValueError("blocks do not fit")
    items = np.array([1] * n + [0] * singles)
    rng.shuffle(items)
    addrs, pos = [], start
    for is_block in items:
        if is_block:
            addrs.append(pos)
            pos += size
        else:
            pos += 1
    order = rng.permutation(n)
    return [addrs[i] for i in order]


# ---------------------------------------------------------------- generators

def _gen_access(n, M, rng):
    A = _ints(rng, 1, M - 1, n)
    k = int(rng.integers(0, n))
    mem = [k, *A, 0]
    return mem, [(0, A[k])], len(mem)


def _gen_increment(n, M, rng):
    A = _ints(rng, 1, M - 2, n)
    mem = [*A, 0]
    return mem, [(i, a + 1) for i, a in enumerate(A)], len(mem)


def _gen_copy(n, M, rng):
    A = _ints(rng, 0, M - 1, n)
    p = n + 1
    return [p, *A], [(p + i, a) for i, a in enumerate(A)], 2 * n + 1


def _gen_reverse(n, M, rng):
    A = _ints(rng, 0, M - 1, n)
    p = n + 1
    return [p, *A], [(p + i, a) for i, a in enumerate(reversed(A))], 2 * n + 1


def _gen_swap(n, M, rng):
    A = _ints(rng, 1, M - 1, n)
    if n >= 2:
        p, q = sorted(int(x) + 2 for x in rng.choice(n, size=2, replace=False))
    else:
        p = q = 2
    out = list(A)
    out[p - 2], out[q - 2] = out[q - 2], out[p - 2]
    mem = [p, q, *A, 0]
    return mem, [(2 + i, v) for i, v in enumerate(out)], len(mem)


def _gen_permutation(n, M, rng):
    P = [int(v) for v in rng.permutation(n)]
    A = _ints(rng, 0, M - 1, n)
    a = n + 1
    return [a, *P, *A], [(1 + i, A[P[i]]) for i in range(n)], 2 * n + 1


def _linked_list(n, M, rng, trash: bool):
    mem = [0] * M
    addrs = _place_blocks(rng, 3, M, n, 2)
    values = _ints(rng, 0, M - 1, n)
    for i, addr in enumerate(addrs):
        mem[addr] = addrs[i + 1] if i + 1 < n else 0
        mem[addr + 1] = values[i]
    mem[0] = addrs[0]
    if trash:
        used = {0, 1, 2, *addrs, *(a + 1 for a in addrs)}
        for cell in range(3, M):
            if cell not in used:
                mem[cell] = int(rng.integers(1, M))
    extent = max(a + 2 for a in addrs)
    return mem, addrs, values, extent


def _gen_listk(n, M, rng):
    mem, addrs, values, extent = _linked_list(n, M, rng, trash=False)
    k = int(rng.integers(0, n))
    mem[1] = k
    return mem, [(2, values[k])], extent


def _gen_listsearch(n, M, rng):
    mem, addrs, values, extent = _linked_list(n, M, rng, trash=True)
    v = values[int(rng.integers(0, n))]
    mem[1] = v
    return mem, [(2, addrs[values.index(v)])], extent


def _gen_merge(d, M, rng):
    G = M - 1
    n = int(rng.integers(0, d + 1))
    m = d - n
    A = sorted(_ints(rng, 0, G - 1, n))
    B = sorted(_ints(rng, 0, G - 1, m))
    a = 3
    b = a + n + 1
    o = b + m + 1
    mem = [a, b, o, *A, G, *B, G]
    merged = sorted(A + B)
    return mem, [(o + i, v) for i, v in enumerate(merged)], o + d


def _gen_walkbst(n, M, rng):
    values = [int(v) for v in rng.choice(np.arange(1, M), size=n, replace=False)]
    left = {}
    right = {}
    root = values[0]
    depth = {root: 0}
    path_to = {root: []}
    for v in values[1:]:
        node, path = root, []
        while True:
            side = left if v < node else right
            path.append(LEFT if v < node else RIGHT)
            if node in side:
                node = side[node]
            else:
                side[node] = v
                break
        depth[v] = len(path)
        path_to[v] = path
    # the path has to fit in front of the node area
    room = M - 3 - 3 * n
    candidates = [v for v in values if depth[v] <= room]
    target = candidates[int(rng.integers(0, len(candidates)))]
    path = path_to[target]
    start = 3 + len(path)
    addrs = dict(zip(values, _place_blocks(rng, start, M, n, 3)))
    mem = [0] * M
    mem[0] = addrs[root]
    mem[1] = 0
    mem[2:2 + len(path)] = path
    mem[2 + len(path)] = 0
    for v, addr in addrs.items():
        mem[addr] = v
        mem[addr + 1] = addrs[left[v]] if v in left else 0
        mem[addr + 2] = addrs[right[v]] if v in right else 0
    extent = max(a + 3 for a in addrs.values())
    return mem, [(1, target)], extent


# ---------------------------------------------------------- reference solvers

def _solve_access(mem, M):
    return {0: mem[1 + mem[0]]}


def _solve_increment(mem, M):
    out, i = {}, 0
    while mem[i] != 0:
        out[i] = (mem[i] + 1) % M
        i += 1
    return out


def _solve_copy(mem, M):
    p = mem[0]
    return {p + i: mem[1 + i] for i in range(p - 1)}


def _solve_reverse(mem, M):
    p = mem[0]
    return {p + i: mem[p - 1 - i] for i in range(p - 1)}


def _solve_swap(mem, M):
    p, q = mem[0], mem[1]
    end = 2
    while mem[end] != 0:
        end += 1
    arr = {i: mem[i] for i in range(2, end)}
    arr[p], arr[q] = mem[q], mem[p]
    return arr


def _solve_permutation(mem, M):
    a = mem[0]
    return {1 + i: mem[a + mem[1 + i]] for i in range(a - 1)}


def _solve_listk(mem, M):
    node = mem[0]
    for _ in range(mem[1]):
        node = mem[node]
    return {2: mem[node + 1]}


def _solve_listsearch(mem, M):
    node, v = mem[0], mem[1]
    while mem[node + 1] != v:
        node = mem[node]
        if node == 0:
            raise ValueError("value not on the list")
    return {2: node}


def _solve_merge(mem, M):
    a, b, o = mem[0], mem[1], mem[2]
    guard = mem[b - 1]
    out = {}
    i, j, k = a, b, o
    while mem[i] != guard or mem[j] != guard:
        if mem[j] == guard or (mem[i] != guard and mem[i] <= mem[j]):
            out[k] = mem[i]
            i += 1
        else:
            out[k] = mem[j]
            j += 1
        k += 1
    return out


def _solve_walkbst(mem, M):
    node, i = mem[0], 2
    while mem[i] != 0:
        node = mem[node + 1] if mem[i] == LEFT else mem[node + 2]
        i += 1
    return {1: mem[node]}


# ---------------------------------------------------------- layout validators

def _check(cond: bool, msg: str) -> None:
    if not cond:
        raise ValueError(msg)


def _val_common(inst: TaskInstance, M: int) -> None:
    _check(len(inst.input_memory) <= M, "input longer than memory")
    _check(all(0 <= v < M for v in inst.input_memory), "value outside Z_M")
    _check(len(inst.expected) > 0, "empty mask")
    _check(len(set(inst.mask)) == len(inst.mask), "duplicate mask cells")
    _check(all(0 <= c < M and 0 <= v < M for c, v in inst.expected), "expected output outside memory")


def _val_access(inst, M):
    mem, n = inst.input_memory, inst.difficulty
    _check(len(mem) == n + 2 and mem[-1] == 0, "access: layout is k, A[0..n-1], NULL")
    _check(0 <= mem[0] < n, "access: k out of range")
    _check(all(v != 0 for v in mem[1:-1]), "access: array contains NULL")
    _check(inst.mask == [0], "access: output goes to cell 0")


def _val_increment(inst, M):
    mem, n = inst.input_memory, inst.difficulty
    _check(len(mem) == n + 1 and mem[-1] == 0 and 0 not in mem[:-1], "increment: A then NULL")
    _check(inst.mask == list(range(n)), "increment: mask is the array")


def _val_copy(inst, M):
    mem, n = inst.input_memory, inst.difficulty
    _check(len(mem) == n + 1 and mem[0] == n + 1, "copy/reverse: p points one past A")
    _check(inst.mask == list(range(n + 1, 2 * n + 1)), "copy/reverse: mask is p..p+n-1")


def _val_swap(inst, M):
    mem, n = inst.input_memory, inst.difficulty
    _check(len(mem) == n + 3 and mem[-1] == 0 and 0 not in mem[2:-1], "swap: p, q, A, 0")
    _check(2 <= mem[0] <= mem[1] <= n + 1, "swap: pointers must address A")
    _check(n < 2 or mem[0] < mem[1], "swap: p < q")
    _check(inst.mask == list(range(2, n + 2)), "swap: mask is the array")


def _val_permutation(inst, M):
    mem, n = inst.input_memory, inst.difficulty
    _check(len(mem) == 2 * n + 1 and mem[0] == n + 1, "permutation: a points to A")
    _check(sorted(mem[1:n + 1]) == list(range(n)), "permutation: P is not a permutation")
    _check(inst.mask == list(range(1, n + 1)), "permutation: output overrides P")


def _walk_list(mem, n):
    seen, node = [], mem[0]
    while node != 0:
        _check(node >= 3 and node + 1 < len(mem), "list: node outside free memory")
        _check(node not in seen, "list: cycle")
        seen.append(node)
        node = mem[node]
    _check(len(seen) == n, f"list: {len(seen)} nodes reachable, expected {n}")
    cells = [c for a in seen for c in (a, a + 1)]
    _check(len(set(cells)) == len(cells), "list: overlapping nodes")
    return seen


def _val_listk(inst, M):
    mem, n = inst.input_memory, inst.difficulty
    _walk_list(mem, n)
    _check(0 <= mem[1] < n, "listk: k out of range")
    _check(mem[2] == 0 and inst.mask == [2], "listk: output slot is cell 2")


def _val_listsearch(inst, M):
    mem, n = inst.input_memory, inst.difficulty
    nodes = _walk_list(mem, n)
    _check(mem[1] in [mem[a + 1] for a in nodes], "listsearch: value not on the list")
    _check(inst.mask == [2], "listsearch: output slot is cell 2")
    used = {0, 1, 2, *nodes, *(a + 1 for a in nodes)}
    _check(all(mem[c] != 0 for c in range(3, M) if c not in used), "listsearch: trash must be non-NULL")


def _val_merge(inst, M):
    mem, d = inst.input_memory, inst.difficulty
    a, b, o = mem[:3]
    G = mem[b - 1]
    _check(a == 3 and mem[o - 1] == G and o + d <= M, "merge: a, b, o layout")
    A, B = mem[a:b - 1], mem[b:o - 1]
    _check(len(A) + len(B) == d, "merge: sizes")
    _check(A == sorted(A) and B == sorted(B), "merge: inputs must be sorted")
    _check(all(v < G for v in A + B), "merge: guardian must exceed every element")
    _check(inst.mask == list(range(o, o + d)), "merge: output starts at o")


def _val_walkbst(inst, M):
    mem, n = inst.input_memory, inst.difficulty
    seen, stack = [], [mem[0]]
    while stack:
        node = stack.pop()
        _check(node not in seen and node + 2 < M, "walkbst: bad node pointer")
        seen.append(node)
        for child, cmp in ((mem[node + 1], lambda c, v: c < v), (mem[node + 2], lambda c, v: c > v)):
            if child:
                _check(cmp(mem[child], mem[node]), "walkbst: BST order violated")
                stack.append(child)
    _check(len(seen) == n, "walkbst: wrong tree size")
    cells = [c for a in seen for c in (a, a + 1, a + 2)]
    _check(len(set(cells)) == len(cells) and min(cells) > 2, "walkbst: overlapping nodes")
    i = 2
    while mem[i] != 0:
        _check(mem[i] in (LEFT, RIGHT), "walkbst: bad direction")
        i += 1
    _check(max(i, 2) < min(cells), "walkbst: path overlaps the tree")
    _check(mem[1] == 0 and inst.mask == [1], "walkbst: output slot is cell 1")


TASKS: dict[str, TaskSpec] = {
    "access": TaskSpec("access", _gen_access, _solve_access, _val_access, lambda n: n + 2),
    "increment": TaskSpec("increment", _gen_increment, _solve_increment, _val_increment, lambda n: n + 1),
    "copy": TaskSpec("copy", _gen_copy, _solve_copy, _val_copy, lambda n: 2 * n + 1),
    "reverse": TaskSpec("reverse", _gen_reverse, _solve_reverse, _val_copy, lambda n: 2 * n + 1),
    "swap": TaskSpec("swap", _gen_swap, _solve_swap, _val_swap, lambda n: n + 3),
    "permutation": TaskSpec("permutation", _gen_permutation, _solve_permutation, _val_permutation,
                            lambda n: 2 * n + 1),
    "listk": TaskSpec("listk", _gen_listk, _solve_listk, _val_listk, lambda n: 3 + 2 * n, True),
    "listsearch": TaskSpec("listsearch", _gen_listsearch, _solve_listsearch, _val_listsearch,
                           lambda n: 3 + 2 * n, True),
    "merge": TaskSpec("merge", _gen_merge, _solve_merge, _val_merge, lambda d: 5 + 2 * d),
    "walkbst": TaskSpec("walkbst", _gen_walkbst, _solve_walkbst, _val_walkbst, lambda n: 3 + 3 * n, True),
}


def get_task(name: str) -> TaskSpec:
    try:
        return TASKS[name.lower()]
    except KeyError:
        raise ValueError(f"unknown task {name!r}; choose from {', '.join(TASK_NAMES)}") from None


def generate(task: str, difficulty: int, M: int, rng: np.random.Generator) -> TaskInstance:
    spec = get_task(task)
    if difficulty < 1:
        raise ValueError("difficulty must be >= 1")
    required = spec.min_cells(difficulty)
    if spec.name == "walkbst":
        required = max(required, difficulty + 1)  # distinct non-NULL values
    if required > M:
        raise CapacityError(spec.name, difficulty, M, required)
    mem, expected, extent = spec.generate(difficulty, M, rng)
    return TaskInstance(spec.name, difficulty, mem, expected, extent)


def reference_output(inst: TaskInstance, M: int) -> dict[int, int]:
    mem = list(inst.input_memory) + [0] * (M - len(inst.input_memory))
    return get_task(inst.task).solve(mem, M)


def validate_layout(inst: TaskInstance, M: int) -> None:
    _val_common(inst, M)
    padded = TaskInstance(inst.task, inst.difficulty,
                          list(inst.input_memory) + [0] * (M - len(inst.input_memory))
                          if get_task(inst.task).scattered else list(inst.input_memory),
                          inst.expected, inst.extent)
    get_task(inst.task).validate(padded, M)


def score(final_memory, inst: TaskInstance) -> float:
    """1 - (correct masked cells) / (masked cells)."""
    final_memory = list(np.asarray(final_memory).tolist())
    correct = sum(1 for cell, value in inst.expected if final_memory[cell] == value)
    return 1.0 - correct / len(inst.expected)


def min_memory_size(inst: TaskInstance) -> int:
    """Smallest memory holding input and output with two spare cells."""
    highest = max([inst.extent - 1, *inst.mask])
    return highest + 1 + 2


def memory_for_difficulty(task: str, difficulty: int) -> int:
    """Test-time memory size: dense footprint plus two spare cells."""
    spec = get_task(task)
    cells = spec.min_cells(difficulty)
    if spec.name == "walkbst":
        cells = max(cells, difficulty + 1)
    return cells + 2


def save_jsonl(instances, path) -> None:
    with open(path, "w") as fh:
        for inst in instances:
            fh.write(inst.to_json() + "\n")


def load_jsonl(path) -> list[TaskInstance]:
    with open(path) as fh:
        return [TaskInstance.from_json(line) for line in fh if line.strip()]
