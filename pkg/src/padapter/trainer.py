"""Synthetic tasks, AdamW with a linear schedule, training loop and ablation grids."""
from __future__ import annotations

import csv
import dataclasses
import itertools
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autograd as ag
from . import numeric as nc
from .model import ToyModel, decoder_forward, encode

log = logging.getLogger(__name__)

TASK_KINDS = ("copy_shift", "cross_lookup", "heterophilic_lookup")


# ------------------------------------------------------------------ tasks

@dataclass
class TaskSpec:
    kind: str = "copy_shift"
    length: int = 8
    vocab: int = 16
    n_train: int = 512
    n_eval: int = 128
    seed: int = 0
    shift: int = 1
    n_keys: int = 16
    n_classes: int = 4
    key_dim: int = 8
    label_noise: float = 0.0

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ValueError(f"unknown task kind {self.kind!r}")
        if self.length < 1 or self.vocab < 2 or self.n_train < 1 or self.n_eval < 1:
            raise ValueError("task sizes must be positive (vocab >= 2)")
        if not 0 <= self.shift < self.length:
            raise ValueError("shift must lie in [0, length)")
        if self.n_classes < 1 or self.n_classes > self.vocab or self.n_keys < 1 or self.key_dim < 1:
            raise ValueError("need 1 <= n_classes <= vocab and positive n_keys/key_dim")
        if not 0 <= self.label_noise < 1:
            raise ValueError("label_noise must lie in [0, 1)")


@dataclass
class Split:
    tokens: np.ndarray  # (n, T) int
    enc_inputs: np.ndarray  # (n, enc_tokens, enc_in)
    targets: np.ndarray  # (n, T) int
    weights: np.ndarray  # (n, T) float, 0 marks ignored positions
    clean_targets: np.ndarray  # targets before label noise

    def __len__(self) -> int:
        return len(self.tokens)

    def batch(self, idx):
        return self.tokens[idx], self.enc_inputs[idx], self.targets[idx], self.weights[idx]


@dataclass
class Dataset:
    spec: TaskSpec
    train: Split
    eval: Split
    query_table: np.ndarray | None = None  # token -> key-space vector (lookup tasks)
    class_dirs: np.ndarray | None = None  # heterophilic class directions


def _lookup_labels(tokens, keys, query_table, classes, kind, class_dirs):
    """Nearest-key labels for every position of one example."""
    q = query_table[tokens]  # (T, k)
    d2 = ((q[:, None, :] - keys[None, :, :]) ** 2).sum(-1)
    nearest = np.argmin(d2, axis=1)
    if kind == "cross_lookup":
        return classes[nearest]
    diff = keys[nearest] - q
    return np.argmax(diff @ class_dirs.T, axis=1)


def generate_task(spec: TaskSpec, enc_tokens: int, enc_in: int) -> Dataset:
    """Deterministic train/eval data; eval examples never duplicate a train example."""
    rng = nc.make_rng(spec.seed)
    T = spec.length
    query_table = class_dirs = None
    if spec.kind != "copy_shift":
        if spec.key_dim + spec.n_classes > enc_in:
            raise ValueError(f"enc_in={enc_in} too small for key_dim + n_classes")
        if spec.n_keys > enc_tokens:
            raise ValueError(f"n_keys={spec.n_keys} exceeds enc_tokens={enc_tokens}")
        query_table = rng.standard_normal((spec.vocab, spec.key_dim))
        class_dirs = rng.standard_normal((spec.n_classes, spec.key_dim))

    seen: set[bytes] = set()
    rows: list[tuple] = []
    total = spec.n_train + spec.n_eval
    attempts = 0
    while len(rows) < total:
        attempts += 1
        if attempts > 50 * total:
            raise ValueError("could not draw enough distinct examples; enlarge vocab or length")
        tokens = rng.integers(0, spec.vocab, T)
        enc = np.zeros((enc_tokens, enc_in))
        if spec.kind == "copy_shift":
            enc[:] = rng.standard_normal((enc_tokens, enc_in))
            clean = np.roll(tokens, spec.shift)
            weights = (np.arange(T) >= spec.shift).astype(float)
        else:
            keys = rng.standard_normal((spec.n_keys, spec.key_dim))
            classes = rng.integers(0, spec.n_classes, spec.n_keys)
            enc[:spec.n_keys, :spec.key_dim] = keys
            enc[np.arange(spec.n_keys), spec.key_dim + classes] = 1.0
            clean = _lookup_labels(tokens, keys, query_table, classes, spec.kind, class_dirs)
            weights = np.ones(T)
        targets = clean.copy()
        if spec.label_noise > 0:
            flip = rng.random(T) < spec.label_noise
            n_out = spec.vocab if spec.kind == "copy_shift" else spec.n_classes
            targets[flip] = rng.integers(0, n_out, int(flip.sum()))
        key = tokens.tobytes() + enc.tobytes()
        if key in seen:
            continue
        seen.add(key)
        rows.append((tokens, enc, targets, weights, clean))

    def pack(part):
        return Split(*(np.stack([r[k] for r in part]) for k in range(5)))

    return Dataset(spec, pack(rows[:spec.n_train]), pack(rows[spec.n_train:]), query_table, class_dirs)


def bayes_loss(ds: Dataset, split: str = "eval") -> float:
    """Cross-entropy of the Bayes-optimal predictor, which knows the noise-free label.

    With label noise ``eta`` over ``C`` outcomes the optimal distribution puts
    ``1 - eta + eta / C`` on the clean label and ``eta / C`` elsewhere.
    """
    s = getattr(ds, split)
    spec = ds.spec
    C = spec.vocab if spec.kind == "copy_shift" else spec.n_classes
    eta = spec.label_noise
    if eta == 0:
        return 0.0
    hit = s.targets == s.clean_targets
    nll = np.where(hit, -math.log(1 - eta + eta / C), -math.log(eta / C))
    return float((nll * s.weights).sum() / s.weights.sum())


# ------------------------------------------------------------------ optimizer

@dataclass
class OptimizerState:
    lr: float = 5e-4
    weight_decay: float = 0.05
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    total_steps: int = 1
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    decay_mask: list = field(default_factory=list)

    def schedule(self, step: int | None = None) -> float:
        """Linearly decayed learning rate for 0-based ``step``."""
        s = self.step if step is None else step
        return self.lr * max(0.0, 1.0 - s / self.total_steps)


def make_optimizer(named_params, lr: float, total_steps: int, weight_decay: float = 0.05,
                   betas=(0.9, 0.999), eps: float = 1e-8) -> OptimizerState:
    """AdamW state; parameters whose name ends in ``rho`` are excluded from weight decay."""
    names = [n for n, _ in named_params]
    return OptimizerState(lr, weight_decay, tuple(betas), eps, max(1, total_steps), 0,
                          [np.zeros_like(p.value) for _, p in named_params],
                          [np.zeros_like(p.value) for _, p in named_params],
                          [not n.endswith("rho") for n in names])


def adamw_step(params, grads, state: OptimizerState) -> OptimizerState:
    """One in-place AdamW update of ``params`` (list of Var)."""
    lr = state.schedule()
    b1, b2 = state.betas
    state.step += 1
    t = state.step
    c1, c2 = 1 - b1 ** t, 1 - b2 ** t
    for k, (p, g) in enumerate(zip(params, grads)):
        if p.value.shape != g.shape:
            raise nc.ShapeError(f"param {p.value.shape} vs grad {g.shape}")
        state.m[k] = b1 * state.m[k] + (1 - b1) * g
        state.v[k] = b2 * state.v[k] + (1 - b2) * g * g
        if state.decay_mask[k] and state.weight_decay:
            p.value *= 1 - lr * state.weight_decay
        p.value -= lr * (state.m[k] / c1) / (np.sqrt(state.v[k] / c2) + state.eps)
    return state


# ------------------------------------------------------------------ training

@dataclass
class TrainConfig:
    steps: int = 500
    lr: float = 1e-2
    weight_decay: float = 0.05
    batch_size: int = 16
    eval_every: int = 100
    seed: int = 0


@dataclass
class RunReport:
    losses: list = field(default_factory=list)
    eval_steps: list = field(default_factory=list)
    eval_loss: list = field(default_factory=list)
    eval_accuracy: list = field(default_factory=list)
    p_trajectory: list = field(default_factory=list)  # per eval: per-layer effective p
    config: dict = field(default_factory=dict)
    seed: int = 0
    status: str = "ok"
    error: str | None = None
    param_counts: dict = field(default_factory=dict)
    timing: dict = field(default_factory=dict)  # wall-clock data, the only nondeterministic key

    def to_json(self) -> str:
        def clean(x):
            if isinstance(x, float) and not math.isfinite(x):
                return None
            if isinstance(x, list):
                return [clean(v) for v in x]
            if isinstance(x, dict):
                return {k: clean(v) for k, v in x.items()}
            return x
        return json.dumps(clean(dataclasses.asdict(self)), indent=2, sort_keys=True)

    def write(self, out_dir) -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "report.json").write_text(self.to_json())
        n_layers = len(self.p_trajectory[0]) if self.p_trajectory else 0
        evals = dict(zip(self.eval_steps, range(len(self.eval_steps))))
        with open(out_dir / "curves.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "loss", "eval_loss"] + [f"p_layer_{i}" for i in range(n_layers)])
            last = max([len(self.losses) - 1] + self.eval_steps)
            for step in range(last + 1):
                k = evals.get(step)
                loss = repr(self.losses[step]) if step < len(self.losses) else ""
                row = [step, loss, "" if k is None else repr(self.eval_loss[k])]
                row += ["" if k is None or not math.isfinite(v) else repr(v)
                        for v in (self.p_trajectory[k] if k is not None else [math.nan] * n_layers)]
                w.writerow(row)


def evaluate(model: ToyModel, split: Split, batch_size: int = 64) -> tuple[float, float]:
    """Weighted mean cross-entropy and accuracy (no tape)."""
    tot_loss = tot_hit = tot_w = 0.0
    for start in range(0, len(split), batch_size):
        idx = slice(start, start + batch_size)
        tokens, enc_in, targets, weights = split.batch(idx)
        logits = ag.value(decoder_forward(model, tokens, encode(model, enc_in)))
        z = logits - logits.max(-1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(-1, keepdims=True))
        picked = np.take_along_axis(logp, targets[..., None], -1)[..., 0]
        tot_loss += float(-(picked * weights).sum())
        tot_hit += float(((logits.argmax(-1) == targets) * weights).sum())
        tot_w += float(weights.sum())
    return tot_loss / tot_w, tot_hit / tot_w


class NoTrainableParams(ValueError):
    pass


def train(model: ToyModel, ds: Dataset, cfg: TrainConfig, config_echo: dict | None = None) -> RunReport:
    """Mini-batch AdamW on adapter parameters only; deterministic given ``cfg.seed``."""
    named = model.named_parameters()
    if not named:
        raise NoTrainableParams("model has no trainable parameters (adapter kind 'none')")
    params = [p for _, p in named]
    state = make_optimizer(named, cfg.lr, cfg.steps, cfg.weight_decay)
    rng = nc.make_rng(cfg.seed)
    from .adapters import param_count
    report = RunReport(config=config_echo or {}, seed=cfg.seed, param_counts=param_count(model))
    t0 = time.perf_counter()
    n = len(ds.train)
    order = rng.permutation(n)
    cursor = 0

    def do_eval(step):
        el, acc = evaluate(model, ds.eval)
        report.eval_steps.append(step)
        report.eval_loss.append(el)
        report.eval_accuracy.append(acc)
        report.p_trajectory.append(model.layer_p())

    try:
        for step in range(cfg.steps):
            if cursor + cfg.batch_size > n:
                order, cursor = rng.permutation(n), 0
            idx = order[cursor:cursor + cfg.batch_size]
            cursor += cfg.batch_size
            tokens, enc_in, targets, weights = ds.train.batch(idx)
            with ag.Tape():
                logits = decoder_forward(model, tokens, encode(model, enc_in))
                loss = ag.cross_entropy(logits, targets, weights)
            lv = loss.item()
            if not math.isfinite(lv):
                raise FloatingPointError(f"loss diverged at step {step}")
            report.losses.append(lv)
            if cfg.eval_every and step % cfg.eval_every == 0:
                do_eval(step)
            grads = ag.grad(loss, params)
            adamw_step(params, grads, state)
        do_eval(cfg.steps)
    except FloatingPointError as exc:
        report.status = "diverged"
        report.error = str(exc)
        log.warning("training aborted: %s", exc)
    report.timing = {"wall_seconds": time.perf_counter() - t0, "finished_at": time.time()}
    return report


# ------------------------------------------------------------------ ablations

def expand_grid(grid: dict) -> list[dict]:
    """Cartesian product of ``{dotted_key: [values]}`` in key order."""
    if not grid or any(len(v) == 0 for v in grid.values()):
        raise ValueError("ablation grid must be nonempty")
    keys = list(grid)
    return [dict(zip(keys, combo)) for combo in itertools.product(*(grid[k] for k in keys))]


def cell_name(cell: dict) -> str:
    parts = []
    for k, v in cell.items():
        if isinstance(v, (list, tuple)):
            v = "+".join(map(str, v)) or "none"
        parts.append(f"{k.split('.')[-1]}={v}")
    return "__".join(parts)


def _run_cell(args):
    run_fn, base_cfg, cell, index, out_dir = args
    return run_fn(base_cfg, cell, index, out_dir)


def ablation_run(base_cfg: dict, grid: dict, run_fn, out_dir=None, jobs: int = 1) -> list[dict]:
    """Run every grid cell with a fresh model; skip cells whose report already exists.

    ``run_fn(base_cfg, cell, index, cell_dir) -> dict`` executes one cell.  Failures
    are recorded as rows with ``status='failed'`` and never stop the sweep.
    """
    cells = expand_grid(grid)
    tasks = []
    for i, cell in enumerate(cells):
        cdir = None if out_dir is None else Path(out_dir) / f"{i:02d}__{cell_name(cell)}"
        tasks.append((run_fn, base_cfg, cell, i, cdir))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_run_cell, tasks))
    else:
        rows = [_run_cell(t) for t in tasks]
    return rows
