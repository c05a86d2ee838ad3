"""Hand-written circuits that solve some tasks exactly.

Each entry is in the scripted-controller JSON format (see
``vm.ScriptedController``).  They double as regression fixtures for the
discrete and fuzzy machines.
"""
from __future__ import annotations

import copy

from .vm import ScriptedController

# Copy: r2 holds n (offset to the destination), r3 the last source address,
# r4 the next one; MIN(INC(r3), r2) saturates the pointer at n.
COPY = {
    "registers": 4,
    "mod_exec": 1,
    "circuits": {
        "init": {
            "modules": {"READ": ["r4"], "DEC": ["READ"], "INC": ["r3"],
                        "ADD": ["r4", "r2"], "WRITE": ["ADD", "READ"]},
            "registers": ["r1", "DEC", "r4", "INC"],
        },
        "main": {
            "modules": {"READ": ["r4"], "INC": ["r3"], "ADD": ["r4", "r2"],
                        "MIN": ["INC", "r2"], "WRITE": ["ADD", "READ"]},
            "registers": ["r1", "r2", "r4", "MIN"],
        },
    },
    "schedule": {"by": "registers", "rules": {"1111": "init"}, "default": "main"},
}

# Increment: the same circuit at every step; r1 walks the array and the
# incremented cell is written back in place.
INCREMENT = {
    "registers": 5,
    "mod_exec": 1,
    "circuits": {
        "main": {
            "modules": {"READ": ["r1"], "INC": ["READ"], "ADD": ["r1", "ONE"],
                        "WRITE": ["r1", "INC"]},
            "registers": ["ADD", "INC", "INC", "INC", "ADD"],
        },
    },
    "schedule": {"by": "step", "rules": {}, "default": "main"},
}

# Reverse: r1 = p (array length + 1), r3 = source pointer; destination is
# 2p - (r3 + 1) computed modulo M = 2p.
REVERSE = {
    "registers": 4,
    "mod_exec": 1,
    "circuits": {
        "init": {
            "modules": {"READ": ["r1"], "INC": ["r3"], "WRITE": ["r1", "READ"]},
            "registers": ["READ", "r2", "INC", "ONE"],
        },
        "main": {
            "modules": {"READ": ["r3"], "INC": ["r3"], "ADD": ["r1", "r1"],
                        "SUB": ["ADD", "INC"], "WRITE": ["SUB", "READ"]},
            "registers": ["r1", "ONE", "INC", "r4"],
        },
    },
    "schedule": {"by": "registers", "rules": {"1111": "init"}, "default": "main"},
}

# Swap with two module repetitions; cell 0 serves as scratch space.
SWAP = {
    "registers": 2,
    "mod_exec": 2,
    "circuits": {
        "first": {
            "modules": {"READ": ["r1"], "READ#2": ["READ"], "WRITE": ["r1", "READ"],
                        "WRITE#2": ["r1", "READ#2"]},
            "registers": ["ONE", "READ"],
        },
        "even": {
            "modules": {"READ": ["r1"], "READ#2": ["READ"], "WRITE": ["r1", "READ"],
                        "WRITE#2": ["r2", "READ#2"]},
            "registers": ["ZERO", "READ"],
        },
        "odd": {
            "modules": {"READ": ["r1"], "WRITE": ["r2", "READ"], "READ#2": ["r2"],
                        "WRITE#2": ["r2", "READ"]},
            "registers": ["READ", "ONE"],
            "finish": True,
        },
    },
    "schedule": {"by": "step", "rules": {"1": "first", "even": "even", "odd": "odd"}},
}

# Access: load k, then store A[k] into cell 0.
ACCESS = {
    "registers": 2,
    "mod_exec": 1,
    "circuits": {
        "init": {
            "modules": {"READ": ["r1"], "WRITE": ["r1", "READ"]},
            "registers": ["READ", "r2"],
        },
        "main": {
            "modules": {"READ": ["r1"], "WRITE": ["r2", "READ"]},
            "registers": ["r1", "r2"],
            "finish": True,
        },
    },
    "schedule": {"by": "step", "rules": {"1": "init"}, "default": "main"},
}

PROGRAMS = {"copy": COPY, "increment": INCREMENT, "reverse": REVERSE, "swap": SWAP, "access": ACCESS}


def program(task: str) -> ScriptedController:
    if task not in PROGRAMS:
        raise KeyError(f"no scripted circuit for {task!r}; available: {sorted(PROGRAMS)}")
    return ScriptedController.from_dict(copy.deepcopy(PROGRAMS[task]))


def program_steps(task: str, n: int) -> int:
    """Timesteps the script needs for an input of size n."""
    return {"copy": 2 * n + 1, "increment": n, "reverse": n + 2, "swap": 3, "access": 2}[task]
