"""Command line entry point: ``nram <command> ...``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tasks
from .controller import ControllerParams, load_checkpoint
from .machine import run_batch
from .programs import PROGRAMS, program, program_steps
from .trace import dump_trace
from .training import ConfigError, TrainConfig, train
from .vm import ScriptedController, compile_lookup, export_dot, run_discrete

log = logging.getLogger("nram")

SEARCHABLE = ("init_h", "learning_rate", "lr_decay", "adam_eps", "max_grad_norm", "grad_crop",
              "curriculum_threshold", "min_level_duration", "noise_variance", "noise_variance_decay",
              "rnn_size", "reg", "mod_exec", "use_lstm", "steps")


class UsageError(Exception):
    pass


# ------------------------------------------------------------ solvers loading

@dataclass
class Solver:
    """A checkpoint or a scripted controller plus what is needed to size runs."""
    controller: object
    R: int
    mod_exec: int
    steps: int | None = None
    train_memory: int | None = None
    task: str | None = None

    @property
    def feedforward(self) -> bool:
        return not (isinstance(self.controller, ControllerParams) and self.controller.recurrent)

    def timesteps(self, task: str, difficulty: int, M: int, override: int | None) -> int:
        if override:
            return override
        if self.steps is not None and self.train_memory:
            return math.ceil(self.steps * M / self.train_memory)
        if isinstance(self.controller, ScriptedController) and task in PROGRAMS and difficulty >= 1:
            return program_steps(task, difficulty)
        raise UsageError("cannot infer the number of timesteps; pass --timesteps")


def load_solver(checkpoint: str | None, script: str | None) -> Solver:
    if bool(checkpoint) == bool(script):
        raise UsageError("give exactly one of --checkpoint or --script")
    if checkpoint:
        path = Path(checkpoint)
        if not path.exists():
            raise UsageError(f"checkpoint {checkpoint} not found")
        params, header = load_checkpoint(path)
        extra = header.get("extra", {})
        return Solver(params, params.R, params.Q // 14, extra.get("steps"), header.get("M"), extra.get("task"))
    if script in PROGRAMS:
        ctrl = program(script)
    elif Path(script).exists():
        ctrl = ScriptedController.load(script)
    else:
        raise UsageError(f"--script must be one of {sorted(PROGRAMS)} or a JSON file")
    return Solver(ctrl, ctrl.R, ctrl.mod_exec, task=script if script in PROGRAMS else None)


def _fuzzy_controller(solver: Solver):
    from .controller import NeuralController

    if isinstance(solver.controller, ControllerParams):
        return NeuralController(solver.controller)
    return solver.controller


def _discrete_controller(solver: Solver):
    if isinstance(solver.controller, ControllerParams) and not solver.controller.recurrent:
        return compile_lookup(solver.controller)
    return solver.controller


# ------------------------------------------------------------------- commands

def cmd_train(args) -> int:
    try:
        config = TrainConfig.load(args.config)
        for item in args.set or []:
            key, _, value = item.partition("=")
            text = config.to_text() + f"{key.strip()} = {value.strip()}\n"
            config = TrainConfig.from_text(text)
    except ConfigError as exc:
        print(f"error: bad config field {exc.field!r}: {exc}", file=sys.stderr)
        return 2
    tasks.get_task(args.task)
    out = Path(args.out)
    for sub in ("traces", "circuits"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    config.save(out / "config.txt")
    result = train(args.task, config, args.seed, out)
    print(f"final eval error {result.final_error:.4f} at level {result.curriculum.level} "
          f"({result.seconds:.1f}s)")
    return 0


def evaluate_rows(solver: Solver, task: str, difficulties, trials: int, seed: int, discretize: bool,
                  fuzzy: bool = True, timesteps: int | None = None) -> list[dict]:
    rng = np.random.default_rng(seed)
    rows = []
    if trials <= 0:
        return rows
    fuzzy_ctrl = _fuzzy_controller(solver) if fuzzy else None
    disc_ctrl = _discrete_controller(solver) if discretize else None
    for d in difficulties:
        M0 = tasks.memory_for_difficulty(task, d)
        insts = [tasks.generate(task, d, M0, rng) for _ in range(trials)]
        M = max(tasks.min_memory_size(i) for i in insts)
        T = solver.timesteps(task, d, M, timesteps)
        row = {"difficulty": d, "memory": M, "timesteps": T, "trials": trials}
        if fuzzy:
            trace = run_batch(insts, fuzzy_ctrl, T, M, solver.R, solver.mod_exec)
            outs = trace.output_values()
            row["error"] = float(np.mean([tasks.score(outs[b], inst) for b, inst in enumerate(insts)]))
        if discretize:
            errs = [tasks.score(run_discrete(inst, disc_ctrl, T, M).final_memory, inst) for inst in insts]
            row["discrete_error"] = float(np.mean(errs))
        rows.append(row)
    return rows


def _write_rows(rows: list[dict], path: str | None, fields: list[str]) -> None:
    fh = open(path, "w", newline="") if path else sys.stdout
    try:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n", extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow(r)
    finally:
        if path:
            fh.close()


def _eval_fields(args) -> list[str]:
    fields = ["difficulty", "memory", "timesteps", "trials"]
    if not args.discrete_only:
        fields.append("error")
    if args.discretize or args.discrete_only:
        fields.append("discrete_error")
    return fields


def cmd_eval(args) -> int:
    solver = load_solver(args.checkpoint, args.script)
    _check_task_shape(solver, args.task)
    rows = evaluate_rows(solver, args.task, range(1, args.max_difficulty + 1), args.trials, args.seed,
                         args.discretize or args.discrete_only, not args.discrete_only, args.timesteps)
    _write_rows(rows, args.out, _eval_fields(args))
    return 0


def cmd_sweep(args) -> int:
    solver = load_solver(args.checkpoint, args.script)
    _check_task_shape(solver, args.task)
    difficulties = range(args.min_difficulty, args.max_difficulty + 1, args.stride)
    rows = evaluate_rows(solver, args.task, difficulties, args.trials, args.seed,
                         args.discretize or args.discrete_only, not args.discrete_only, args.timesteps)
    _write_rows(rows, args.out, _eval_fields(args))
    return 0


def _check_task_shape(solver: Solver, task: str) -> None:
    tasks.get_task(task)
    if solver.task is not None and solver.task != task:
        log.warning("checkpoint was trained on %s, evaluating on %s", solver.task, task)


def _load_instance(args, task_hint: str | None):
    if args.instance:
        insts = tasks.load_jsonl(args.instance)
        if not insts:
            raise UsageError(f"{args.instance} holds no instances")
        return insts[args.index]
    if args.memory:
        values = [int(v) for v in args.memory.split(",")]
        return tasks.TaskInstance(task_hint or "custom", 0, values, [])
    raise UsageError("give --instance or --memory")


def _run_for_artifacts(args):
    solver = load_solver(args.checkpoint, args.script)
    inst = _load_instance(args, solver.task)
    M = args.memory_size or (tasks.min_memory_size(inst) if inst.expected else len(inst.input_memory))
    if len(inst.input_memory) > M:
        raise tasks.CapacityError(inst.task, inst.difficulty, M, len(inst.input_memory))
    T = solver.timesteps(inst.task, inst.difficulty, M, args.timesteps)
    return solver, inst, run_discrete(inst, _discrete_controller(solver), T, M)


def _export_circuits(solver: Solver, run, out: Path) -> list[Path]:
    out.mkdir(parents=True, exist_ok=True)
    written, seen = [], {}
    for t, circuit in enumerate(run.circuits, 1):
        if solver.feedforward:
            if circuit in seen:
                continue
            seen[circuit] = len(seen)
            path = out / f"circuit_{len(seen) - 1:02d}.dot"
        else:
            path = out / f"step_{t:03d}.dot"
        path.write_text(export_dot(circuit, name=path.stem))
        written.append(path)
    return written


def cmd_trace(args) -> int:
    solver, inst, run = _run_for_artifacts(args)
    out = Path(args.out)
    (out / "traces").mkdir(parents=True, exist_ok=True)
    (out / "traces" / "trace.csv").write_text(dump_trace(run.rows))
    files = _export_circuits(solver, run, out / "circuits")
    err = f", error {tasks.score(run.final_memory, inst):.4f}" if inst.expected else ""
    print(f"{run.steps} steps, {len(files)} circuit files{err}")
    return 0


def cmd_export_circuit(args) -> int:
    solver, _, run = _run_for_artifacts(args)
    files = _export_circuits(solver, run, Path(args.out) / "circuits")
    print(f"{len(files)} circuit files")
    return 0


def cmd_gen_instance(args) -> int:
    rng = np.random.default_rng(args.seed)
    M = args.memory_size or tasks.memory_for_difficulty(args.task, args.difficulty)
    insts = [tasks.generate(args.task, args.difficulty, M, rng) for _ in range(args.count)]
    if args.out:
        tasks.save_jsonl(insts, args.out)
    else:
        for inst in insts:
            print(inst.to_json())
    return 0


# --------------------------------------------------------------------- search

@dataclass
class SearchSpec:
    ranges: dict
    trials: int
    seed: int
    base: dict

    @classmethod
    def from_dict(cls, d: dict) -> "SearchSpec":
        ranges = d.get("params", {})
        for name, rule in ranges.items():
            if name not in SEARCHABLE:
                raise UsageError(f"{name} is not a searchable hyperparameter")
            if "log_uniform" in rule:
                lo, hi = rule["log_uniform"]
                if not 0 < lo < hi:
                    raise UsageError(f"{name}: log_uniform needs 0 < low < high")
            elif "uniform" in rule:
                lo, hi = rule["uniform"]
                if not lo < hi:
                    raise UsageError(f"{name}: uniform needs low < high")
            elif "choice" in rule:
                if len(rule["choice"]) < 1:
                    raise UsageError(f"{name}: empty choice")
            else:
                raise UsageError(f"{name}: rule must be log_uniform, uniform or choice")
        return cls(ranges, int(d.get("trials", 1)), int(d.get("seed", 0)), dict(d.get("base", {})))

    def sample(self, rng: np.random.Generator) -> dict:
        out = {}
        for name in sorted(self.ranges):
            rule = self.ranges[name]
            if "log_uniform" in rule:
                lo, hi = rule["log_uniform"]
                out[name] = float(math.exp(rng.uniform(math.log(lo), math.log(hi))))
            elif "uniform" in rule:
                out[name] = float(rng.uniform(*rule["uniform"]))
            else:
                choice = rule["choice"]
                out[name] = choice[int(rng.integers(len(choice)))]
        return out


def run_search(spec: SearchSpec, task: str, budget: int | None, out: Path | None) -> list[dict]:
    trials = spec.trials if budget is None else budget
    rng = np.random.default_rng(spec.seed)
    rows = []
    for k in range(trials):
        sampled = spec.sample(rng)
        values = {**spec.base, **sampled}
        text = "".join(f"{key} = {str(v).lower() if isinstance(v, bool) else v}\n" for key, v in values.items())
        config = TrainConfig.from_text(text)
        seed = spec.seed * 10007 + k
        trial_dir = out / f"trial_{k:03d}" if out else None
        result = train(task, config, seed, trial_dir)
        rows.append({"trial": k, "seed": seed, "eval_error": result.final_error,
                     "level": result.curriculum.level, **sampled})
    # stable sort keeps trial order among ties
    return sorted(rows, key=lambda r: (math.inf if math.isnan(r["eval_error"]) else r["eval_error"]))


def cmd_search(args) -> int:
    spec = SearchSpec.from_dict(json.loads(Path(args.spec).read_text()))
    tasks.get_task(args.task)
    out = Path(args.out) if args.out else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    rows = run_search(spec, args.task, args.budget, out)
    fields = ["rank", "trial", "seed", "eval_error", "level", *sorted(spec.ranges)]
    for i, r in enumerate(rows, 1):
        r["rank"] = i
    _write_rows(rows, str(out / "report.csv") if out else None, fields)
    return 0


# --------------------------------------------------------------------- parser

def _positive(value: str) -> int:
    n = int(value)
    if n < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return n


def _non_negative(value: str) -> int:
    n = int(value)
    if n < 0:
        raise argparse.ArgumentTypeError("must be >= 0")
    return n


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nram", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a controller")
    t.add_argument("--config", required=True)
    t.add_argument("--task", required=True, choices=tasks.TASK_NAMES)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", required=True)
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config field")
    t.set_defaults(func=cmd_train)

    def solver_args(q):
        g = q.add_mutually_exclusive_group(required=True)
        g.add_argument("--checkpoint")
        g.add_argument("--script", help=f"scripted circuit file or one of {sorted(PROGRAMS)}")
        q.add_argument("--timesteps", type=_positive, default=None)

    def eval_args(q):
        solver_args(q)
        q.add_argument("--task", required=True, choices=tasks.TASK_NAMES)
        q.add_argument("--trials", type=_non_negative, default=100)
        q.add_argument("--seed", type=int, default=0)
        q.add_argument("--discretize", action="store_true", help="also report the discretized machine")
        q.add_argument("--discrete-only", action="store_true")
        q.add_argument("--out", help="CSV path (stdout if omitted)")

    e = sub.add_parser("eval", help="error per difficulty 1..max")
    eval_args(e)
    e.add_argument("--max-difficulty", type=_positive, default=20)
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", help="generalization sweep over a difficulty range")
    eval_args(s)
    s.add_argument("--min-difficulty", type=_positive, default=1)
    s.add_argument("--max-difficulty", type=_positive, default=50)
    s.add_argument("--stride", type=_positive, default=1)
    s.set_defaults(func=cmd_sweep)

    for name, func, help_ in (("trace", cmd_trace, "dump a discrete execution trace and its circuits"),
                              ("export-circuit", cmd_export_circuit, "write DOT files of executed circuits")):
        q = sub.add_parser(name, help=help_)
        solver_args(q)
        q.add_argument("--instance", help="JSONL instance file")
        q.add_argument("--index", type=int, default=0)
        q.add_argument("--memory", help="comma separated initial memory")
        q.add_argument("--memory-size", type=_positive, default=None)
        q.add_argument("--out", required=True)
        q.set_defaults(func=func)

    r = sub.add_parser("search", help="random hyperparameter search")
    r.add_argument("--spec", required=True)
    r.add_argument("--task", required=True, choices=tasks.TASK_NAMES)
    r.add_argument("--budget", type=_non_negative, default=None)
    r.add_argument("--out")
    r.set_defaults(func=cmd_search)

    g = sub.add_parser("gen-instance", help="sample task instances as JSONL")
    g.add_argument("--task", required=True, choices=tasks.TASK_NAMES)
    g.add_argument("--difficulty", type=_positive, required=True)
    g.add_argument("--count", type=_positive, default=1)
    g.add_argument("--memory-size", type=_positive, default=None)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out")
    g.set_defaults(func=cmd_gen_instance)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, tasks.CapacityError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
