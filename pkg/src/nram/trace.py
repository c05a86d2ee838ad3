"""Execution trace rows and their CSV dump.

One row per executed timestep: memory and registers at the *start* of the
step, then the READ address and WRITE address/value used during it.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field


@dataclass
class TraceRow:
    step: int
    memory: list[int]
    registers: list[int]
    reads: list[int] = field(default_factory=list)
    writes: list[tuple[int, int]] = field(default_factory=list)

    @property
    def read_cell(self) -> str:
        return ";".join(f"p:{p}" for p in self.reads)

    @property
    def write_cell(self) -> str:
        return ";".join(f"p:{p} a:{a}" for p, a in self.writes)


def trace_header(M: int, R: int) -> list[str]:
    return ["step", *(str(i) for i in range(M)), *(f"r{i + 1}" for i in range(R)), "READ", "WRITE"]


def dump_trace(rows: list[TraceRow], fh=None) -> str:
    """Write rows as CSV (to ``fh`` if given) and return the text."""
    if not rows:
        return ""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(trace_header(len(rows[0].memory), len(rows[0].registers)))
    for row in rows:
        writer.writerow([row.step, *row.memory, *row.registers, row.read_cell, row.write_cell])
    text = buf.getvalue()
    if fh is not None:
        fh.write(text)
    return text


def load_trace(text: str) -> list[TraceRow]:
    reader = csv.reader(io.StringIO(text))
    header = next(reader)
    n_mem = sum(1 for h in header if h.isdigit())
    n_reg = sum(1 for h in header if h.startswith("r") and h[1:].isdigit())
    rows = []
    for rec in reader:
        mem = [int(x) for x in rec[1:1 + n_mem]]
        regs = [int(x) for x in rec[1 + n_mem:1 + n_mem + n_reg]]
        reads = [int(tok[2:]) for tok in rec[-2].split(";") if tok]
        writes = []
        for tok in rec[-1].split(";"):
            if tok:
                p, a = tok.split()
                writes.append((int(p[2:]), int(a[2:])))
        rows.append(TraceRow(int(rec[0]), mem, regs, reads, writes))
    return rows
