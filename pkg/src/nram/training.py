"""Training loop: curriculum batches, stabilized backprop and Adam."""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import tasks
from .autodiff import NumericalError, Tape
from .controller import ControllerParams, NeuralController, init_params, save_checkpoint
from .curriculum import CurriculumState, sample_difficulty, update_level
from .machine import run_batch

log = logging.getLogger(__name__)

BETA1 = 0.9
BETA2 = 0.999

METRIC_FIELDS = ["epoch", "level", "eval_error", "loss", "lr", "noise_var", "entropy_coef"]


class ConfigError(ValueError):
    def __init__(self, field_name: str, msg: str):
        super().__init__(f"{field_name}: {msg}")
        self.field = field_name


@dataclass
class TrainConfig:
    # sampled hyperparameters (no defaults)
    learning_rate: float
    lr_decay: float
    adam_eps: float
    max_grad_norm: float
    grad_crop: float
    curriculum_threshold: float
    min_level_duration: int
    noise_variance: float
    noise_variance_decay: float
    init_h: float
    rnn_size: int
    reg: int
    mod_exec: int
    use_lstm: bool
    steps: int
    # fixed regimen
    entropy_weight: float = 0.01
    entropy_decay: float = 0.95
    epochs: int = 100
    batches_per_epoch: int = 1000
    batch_size: int = 100
    eval_batches: int = 100
    train_memory: int = 32
    epsilon: float = 1e-30
    # artifact knobs
    max_difficulty: int = 0  # 0: largest difficulty that fits train_memory
    entropy_on_finish: bool = False
    renormalize: bool = True
    float32: bool = False
    loss_variant: str = "expected"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        positive = ["learning_rate", "lr_decay", "adam_eps", "max_grad_norm", "grad_crop", "rnn_size",
                    "reg", "mod_exec", "steps", "epochs", "batch_size", "train_memory"]
        for name in positive:
            if not getattr(self, name) > 0:
                raise ConfigError(name, "must be positive")
        non_negative = ["min_level_duration", "noise_variance", "noise_variance_decay", "init_h",
                        "entropy_weight", "entropy_decay", "batches_per_epoch", "eval_batches", "max_difficulty"]
        for name in non_negative:
            if getattr(self, name) < 0:
                raise ConfigError(name, "must be non-negative")
        if not 0 < self.curriculum_threshold < 1:
            raise ConfigError("curriculum_threshold", "must lie in (0, 1)")
        if not 0 < self.epsilon < 1:
            raise ConfigError("epsilon", "must lie in (0, 1)")
        if self.loss_variant not in ("expected", "output"):
            raise ConfigError("loss_variant", "must be 'expected' or 'output'")

    @property
    def Q(self) -> int:
        return 14 * self.mod_exec

    @property
    def variant(self) -> str:
        return "lstm" if self.use_lstm else "mlp"

    @property
    def dtype(self):
        return np.float32 if self.float32 else np.float64

    # ------------------------------------------------------------ key=value file

    @classmethod
    def from_text(cls, text: str) -> "TrainConfig":
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        values: dict = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}", f"expected key=value, got {raw!r}")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ConfigError(key, "unknown field")
            values[key] = _coerce(key, types[key], val)
        missing = [f.name for f in dataclasses.fields(cls)
                   if f.default is dataclasses.MISSING and f.name not in values]
        if missing:
            raise ConfigError(missing[0], f"missing required field(s) {', '.join(missing)}")
        return cls(**values)

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name} = {str(v).lower() if isinstance(v, bool) else repr(v) if isinstance(v, float) else v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def load(cls, path) -> "TrainConfig":
        return cls.from_text(Path(path).read_text())

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())


def _coerce(key: str, typ, raw: str):
    typ = typ if isinstance(typ, str) else typ.__name__
    try:
        if typ == "bool":
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ == "int":
            f = float(raw)
            if f != int(f):
                raise ValueError(raw)
            return int(f)
        if typ == "float":
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(key, f"cannot parse {raw!r} as {typ}") from None


# --------------------------------------------------------------- gradient ops

def backward(tape: Tape, loss, crop: float = math.inf) -> None:
    """Reverse pass with every activation adjoint clamped to [-crop, crop]."""
    if not crop > 0:
        raise ValueError("grad_crop must be positive")
    tape.backward(loss, crop=crop)


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return float(math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values())))


def global_rescale(grads: dict[str, np.ndarray], max_norm: float) -> dict[str, np.ndarray]:
    if not max_norm > 0:
        raise ValueError("max_grad_norm must be positive")
    norm = global_norm(grads)
    if norm <= max_norm:
        return grads
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}


def noise_variance_at(epoch: int, noise_variance: float, noise_variance_decay: float) -> float:
    return noise_variance * noise_variance_decay ** epoch


def add_gradient_noise(grads: dict[str, np.ndarray], epoch: int, noise_variance: float,
                       noise_variance_decay: float, rng: np.random.Generator) -> dict[str, np.ndarray]:
    if noise_variance < 0:
        raise ValueError("noise_variance must be non-negative")
    var = noise_variance_at(epoch, noise_variance, noise_variance_decay)
    if var == 0:
        return grads
    sd = math.sqrt(var)
    return {k: g + rng.normal(0.0, sd, size=g.shape) for k, g in grads.items()}


def entropy_coef(epoch: int, entropy_weight: float, entropy_decay: float) -> float:
    return entropy_weight * entropy_decay ** epoch


def entropy_bonus(dists, epoch: int, entropy_weight: float, entropy_decay: float, eps: float = 1e-30):
    """-coef * (sum of entropies of every distribution), to be added to the cost."""
    coef = entropy_coef(epoch, entropy_weight, entropy_decay)
    if coef == 0 or not dists:
        return 0.0
    total = None
    for d in dists:
        h = ad.sum_(ad.entropy(d, eps))
        total = h if total is None else ad.add(total, h)
    out = ad.mul(total, -coef)
    tensor_in = any(isinstance(d, ad.Tensor) for d in dists)
    return out if tensor_in else float(out.value)


def bernoulli_dists(f) -> list:
    """(f, 1 - f) pairs so the finish probability can join the entropy bonus."""
    f = ad.as_tensor(f)
    return [ad.stack([f, ad.rsub(1.0, f)], axis=-1)]


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: ControllerParams) -> "AdamState":
        return cls({k: np.zeros_like(w) for k, w in params.weights.items()},
                   {k: np.zeros_like(w) for k, w in params.weights.items()})


def adam_step(params: ControllerParams, grads: dict[str, np.ndarray], state: AdamState,
              lr: float, adam_eps: float) -> ControllerParams:
    """One bias-corrected Adam update; mutates ``state`` and returns new params."""
    state.t += 1
    c1 = 1.0 - BETA1 ** state.t
    c2 = 1.0 - BETA2 ** state.t
    new = {}
    for k, w in params.weights.items():
        g = grads[k]
        if g.shape != w.shape:
            raise ValueError(f"{k}: gradient shape {g.shape} does not match {w.shape}")
        state.m[k] = BETA1 * state.m[k] + (1 - BETA1) * g
        state.v[k] = BETA2 * state.v[k] + (1 - BETA2) * g * g
        new[k] = w - lr * (state.m[k] / c1) / (np.sqrt(state.v[k] / c2) + adam_eps)
    return ControllerParams(params.variant, params.R, params.Q, params.rnn_size, new)


# ------------------------------------------------------------------- the loop

def default_max_difficulty(task: str, M: int) -> int:
    spec = tasks.get_task(task)
    d = 0
    while True:
        req = spec.min_cells(d + 1)
        if spec.name == "walkbst":
            req = max(req, d + 2)
        if req > M:
            return d
        d += 1


def sample_batch(task: str, state: CurriculumState, n: int, M: int, rng: np.random.Generator):
    insts = []
    for _ in range(n):
        d = sample_difficulty(state, state.max_level, rng)
        insts.append(tasks.generate(task, d, M, rng))
    return insts


def batch_errors(trace, instances) -> np.ndarray:
    out = trace.output_values()
    return np.array([tasks.score(out[b], inst) for b, inst in enumerate(instances)])


def evaluate(params: ControllerParams, task: str, config: TrainConfig, instances_batches) -> float:
    """Mean error of the fuzzy machine (argmax of the expected memory)."""
    ctrl = NeuralController(params, config.dtype)
    errs = []
    for insts in instances_batches:
        trace = run_batch(insts, ctrl, config.steps, config.train_memory, config.reg, config.mod_exec,
                          config.epsilon, config.renormalize, config.loss_variant, config.dtype)
        errs.extend(batch_errors(trace, insts))
    return float(np.mean(errs)) if errs else float("nan")


def train_batch(params: ControllerParams, instances, config: TrainConfig, epoch: int):
    """Forward + backward on one batch; returns (gradients, summed loss, trace)."""
    ctrl = NeuralController(params, config.dtype)
    with Tape() as tape:
        trace = run_batch(instances, ctrl, config.steps, config.train_memory, config.reg, config.mod_exec,
                          config.epsilon, config.renormalize, config.loss_variant, config.dtype)
        cost = trace.loss  # summed over the batch
        dists = list(trace.selections)
        if config.entropy_on_finish:
            for f in trace.finish:
                dists += bernoulli_dists(f)
        bonus = entropy_bonus(dists, epoch, config.entropy_weight, config.entropy_decay, config.epsilon)
        total = cost if isinstance(bonus, float) else ad.add(cost, bonus)
        backward(tape, total, config.grad_crop)
    return ctrl.gradients(), float(cost.value), trace


@dataclass
class TrainResult:
    params: ControllerParams
    metrics: list[dict] = field(default_factory=list)
    curriculum: CurriculumState | None = None
    seconds: float = 0.0

    @property
    def final_error(self) -> float:
        return self.metrics[-1]["eval_error"] if self.metrics else float("nan")


def _write_metrics(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=METRIC_FIELDS, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items() if k in METRIC_FIELDS})


def train(task: str, config: TrainConfig, seed: int, out_dir=None,
          on_epoch: Callable[[dict, ControllerParams, CurriculumState], bool] | None = None) -> TrainResult:
    """Run the full regimen; ``on_epoch`` may return True to stop early."""
    tasks.get_task(task)
    M = config.train_memory
    max_d = config.max_difficulty or default_max_difficulty(task, M)
    if max_d < 1:
        raise tasks.CapacityError(task, 1, M, tasks.get_task(task).min_cells(1))
    if max_d > default_max_difficulty(task, M):
        raise ConfigError("max_difficulty", f"{task} at difficulty {max_d} does not fit train_memory={M}")
    streams = np.random.SeedSequence(seed).spawn(4)
    init_rng, data_rng, noise_rng, eval_rng = (np.random.default_rng(s) for s in streams)

    params = init_params(init_rng, config.init_h, config.variant, config.reg, config.Q, config.rnn_size)
    adam = AdamState.zeros_like(params)
    cur = CurriculumState(1, max_d, 0)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    result = TrainResult(params)
    t0 = time.perf_counter()

    for epoch in range(config.epochs):
        lr = config.learning_rate * config.lr_decay ** epoch
        losses = []
        for batch in range(config.batches_per_epoch):
            insts = sample_batch(task, cur, config.batch_size, M, data_rng)
            try:
                grads, loss, _ = train_batch(params, insts, config, epoch)
            except NumericalError as exc:
                _dump_failure(out, epoch, batch, exc, params, insts)
                raise
            grads = add_gradient_noise(grads, epoch, config.noise_variance, config.noise_variance_decay, noise_rng)
            grads = global_rescale(grads, config.max_grad_norm)
            params = adam_step(params, grads, adam, lr, config.adam_eps)
            losses.append(loss)

        eval_sets = [sample_batch(task, cur, config.batch_size, M, eval_rng) for _ in range(config.eval_batches)]
        err = evaluate(params, task, config, eval_sets)
        row = {"epoch": epoch + 1, "level": cur.level, "eval_error": err,
               "loss": float(np.mean(losses)) if losses else float("nan"), "lr": lr,
               "noise_var": noise_variance_at(epoch, config.noise_variance, config.noise_variance_decay),
               "entropy_coef": entropy_coef(epoch, config.entropy_weight, config.entropy_decay)}
        result.metrics.append(row)
        log.info("epoch %d level %d eval_error %.4f loss %.4f", row["epoch"], cur.level, err, row["loss"])
        cur = update_level(cur, err, config.curriculum_threshold, config.min_level_duration,
                           config.batches_per_epoch)
        if out is not None:
            _write_metrics(result.metrics, out / "metrics.csv")
        if on_epoch is not None and on_epoch(row, params, cur):
            break

    result.params = params
    result.curriculum = cur
    result.seconds = time.perf_counter() - t0
    if out is not None:
        _write_metrics(result.metrics, out / "metrics.csv")
        save_checkpoint(params, out / "checkpoint.bin", M,
                        {"task": task, "seed": seed, "steps": config.steps, "level": cur.level})
    return result


def _dump_failure(out, epoch, batch, exc: NumericalError, params, insts) -> None:
    info = {"epoch": epoch, "batch": batch, "op": exc.op, "node": exc.index,
            "instances": [json.loads(i.to_json()) for i in insts]}
    log.error("numerical failure at epoch %d batch %d: %s", epoch, batch, exc)
    if out is not None:
        (out / "failure.json").write_text(json.dumps(info, indent=2))
        save_checkpoint(params, out / "failure_checkpoint.bin")
