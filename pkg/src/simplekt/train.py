"""Mini-batch training, early stopping and cross-validation."""

from __future__ import annotations

import itertools
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import numerics as nx
from .data import DatasetSplit, StudentSequence, iter_batches
from .evaluate import MetricError, evaluate_one_step, mean_std
from .model import ModelConfig, SimpleKT
from .numerics import Tensor

log = logging.getLogger(__name__)

SEARCH_GRID = {
    "d": [64, 128],
    "lr": [1e-3, 1e-4, 1e-5],
    "dropout": [0.05, 0.1, 0.3, 0.5],
    "n_blocks": [1, 2, 4],
    "n_heads": [4, 8],
    "seed": [42, 3407],
}
MODEL_KEYS = {"d", "dropout", "n_blocks", "n_heads", "variant", "seed"}
TRAIN_KEYS = {"lr", "batch_size", "max_epochs", "patience", "clip_norm", "seed"}


class TrainingError(RuntimeError):
    pass


class NumericError(TrainingError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 64
    max_epochs: int = 200
    patience: int = 10
    clip_norm: float | None = 5.0
    seed: int = 42
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def validate(self) -> "TrainConfig":
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("batch_size and max_epochs must be >= 1")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ValueError("clip_norm must be positive or None")
        return self


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: dict[str, Tensor], beta1=0.9, beta2=0.999, eps=1e-8) -> "OptimizerState":
        return cls(
            {k: np.zeros_like(p.data) for k, p in params.items()},
            {k: np.zeros_like(p.data) for k, p in params.items()},
            0,
            beta1,
            beta2,
            eps,
        )


def adam_step(params: dict[str, Tensor], state: OptimizerState, lr: float) -> None:
    """One bias-corrected Adam update using each parameter's ``.grad``, in place."""
    for name, p in params.items():
        if p.grad is not None and not np.isfinite(p.grad).all():
            raise NumericError(f"non-finite gradient in parameter group {name!r} at step {state.step + 1}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def clip_grad_norm(params: dict[str, Tensor], max_norm: float) -> float:
    sq = sum(float((p.grad**2).sum()) for p in params.values() if p.grad is not None)
    norm = sq**0.5
    if norm > max_norm:
        factor = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad *= factor
    return norm


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    valid_auc: float
    valid_acc: float
    elapsed: float


@dataclass
class FoldResult:
    model: SimpleKT
    log: list[EpochRecord]
    best_epoch: int
    best_auc: float


def _snapshot(params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {k: p.data.copy() for k, p in params.items()}


def _default_validator(model, valid):
    _, m = evaluate_one_step(model, valid)
    return m["auc"], m["accuracy"]


def _save_state(path: Path, model, opt, best, best_auc, best_epoch, bad, history):
    arrays = {f"param/{k}": p.data for k, p in model.params.items()}
    arrays.update({f"m/{k}": a for k, a in opt.m.items()})
    arrays.update({f"v/{k}": a for k, a in opt.v.items()})
    arrays.update({f"best/{k}": a for k, a in best.items()})
    meta = {
        "config": asdict(model.config),
        "step": opt.step,
        "best_auc": best_auc,
        "best_epoch": best_epoch,
        "bad": bad,
        "history": [asdict(r) for r in history],
    }
    tmp = path.with_suffix(".tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, __meta__=np.array(json.dumps(meta)), **arrays)
    tmp.replace(path)


def _load_state(path: Path, model, opt):
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["__meta__"]))
        if meta["config"] != asdict(model.config):
            raise TrainingError(f"resume state at {path} was written for a different model config")
        for k in model.params:
            model.params[k].data = z[f"param/{k}"].copy()
            opt.m[k] = z[f"m/{k}"].copy()
            opt.v[k] = z[f"v/{k}"].copy()
        best = {k: z[f"best/{k}"].copy() for k in model.params}
    opt.step = meta["step"]
    history = [EpochRecord(**r) for r in meta["history"]]
    return best, meta["best_auc"], meta["best_epoch"], meta["bad"], history


def train_fold(
    train: Sequence[StudentSequence],
    valid: Sequence[StudentSequence],
    model_config: ModelConfig,
    train_config: TrainConfig,
    log_path: str | Path | None = None,
    state_path: str | Path | None = None,
    validator: Callable | None = None,
) -> FoldResult:
    """Train with Adam until validation AUC stops improving.

    Each epoch shuffles the training chunks with a stream derived from
    ``(seed, epoch)`` so a resumed run replays exactly what an uninterrupted
    one would have done. The returned model carries the parameters of the
    best validation epoch. ``validator(model, valid) -> (auc, acc)``
    overrides the default question-level evaluation.
    """
    train_config.validate()
    train_ids = {s.student_id for s in train}
    if train_ids & {s.student_id for s in valid}:
        raise TrainingError("training and validation students overlap")
    validator = validator or _default_validator
    model = SimpleKT(model_config)
    opt = OptimizerState.for_params(model.params, train_config.beta1, train_config.beta2, train_config.eps)
    best = _snapshot(model.params)
    best_auc = -np.inf
    best_epoch = 0
    bad = 0
    history: list[EpochRecord] = []
    state_path = Path(state_path) if state_path else None
    if state_path is not None and state_path.exists():
        best, best_auc, best_epoch, bad, history = _load_state(state_path, model, opt)
        log.info("resuming from epoch %d", len(history))
    seed = train_config.seed
    for epoch in range(len(history) + 1, train_config.max_epochs + 1):
        if bad >= train_config.patience:
            break
        t0 = time.perf_counter()
        drop_rng = nx.make_rng(seed, "dropout", epoch)
        total_loss = 0.0
        total_n = 0
        for b in iter_batches(train, train_config.batch_size, nx.make_rng(seed, "shuffle", epoch)):
            loss, n = model.loss(b, training=True, rng=drop_rng)
            if n == 0:
                continue
            nx.zero_grads(model.params.values())
            nx.backward(nx.scale(loss, 1.0 / n))
            if train_config.clip_norm is not None:
                clip_grad_norm(model.params, train_config.clip_norm)
            adam_step(model.params, opt, train_config.lr)
            total_loss += loss.item()
            total_n += n
        try:
            v_auc, v_acc = validator(model, valid)
        except MetricError as exc:
            raise TrainingError(f"validation AUC undefined ({exc}); use a larger validation split") from exc
        rec = EpochRecord(epoch, total_loss / max(total_n, 1), v_auc, v_acc, time.perf_counter() - t0)
        history.append(rec)
        if log_path is not None:
            with open(log_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(asdict(rec)) + "\n")
        log.info("epoch %d loss %.4f valid auc %.4f acc %.4f", epoch, rec.train_loss, v_auc, v_acc)
        if v_auc > best_auc:
            best_auc, best_epoch, best, bad = v_auc, epoch, _snapshot(model.params), 0
        else:
            bad += 1
        if state_path is not None:
            _save_state(state_path, model, opt, best, best_auc, best_epoch, bad, history)
    for k, arr in best.items():
        model.params[k].data = arr.copy()
    return FoldResult(model, history, best_epoch, float(best_auc))


# ---------------------------------------------------------------------------
# grids and cross-validation


def expand_grid(model_config: ModelConfig, train_config: TrainConfig, grid: dict[str, list]) -> list[tuple[ModelConfig, TrainConfig]]:
    """Cartesian product of ``grid`` applied over the base configs."""
    if not grid:
        return [(model_config, train_config)]
    unknown = set(grid) - MODEL_KEYS - TRAIN_KEYS
    if unknown:
        raise ValueError(f"unknown grid keys {sorted(unknown)}")
    if any(len(v) == 0 for v in grid.values()):
        raise ValueError("grid lists must be non-empty")
    keys = sorted(grid)
    out = []
    for values in itertools.product(*(grid[k] for k in keys)):
        point = dict(zip(keys, values))
        mc = replace(model_config, **{k: v for k, v in point.items() if k in MODEL_KEYS})
        tc = replace(train_config, **{k: v for k, v in point.items() if k in TRAIN_KEYS})
        out.append((mc.validate(), tc.validate()))
    return out


@dataclass
class EvalReport:
    auc_mean: float
    auc_std: float
    acc_mean: float
    acc_std: float
    folds: list[dict] = field(default_factory=list)
    model_config: dict | None = None
    train_config: dict | None = None

    def summary(self) -> str:
        return f"AUC {self.auc_mean:.4f}±{self.auc_std:.4f}  ACC {self.acc_mean:.4f}±{self.acc_std:.4f}"


def _run_fold(args):
    fold, train, valid, mc, tc, out_dir = args
    log_path = state_path = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        log_path = out_dir / f"fold{fold}.log.jsonl"
        state_path = out_dir / f"fold{fold}.state.npz"
    try:
        res = train_fold(train, valid, mc, tc, log_path, state_path)
    except Exception as exc:
        raise TrainingError(f"fold {fold} failed: {exc}") from exc
    if out_dir is not None:
        res.model.save(out_dir / f"fold{fold}.ckpt.npz")
    return res


def cross_validate(
    sequences: Sequence[StudentSequence],
    split: DatasetSplit,
    configs: Sequence[tuple[ModelConfig, TrainConfig]],
    jobs: int = 1,
    out_dir: str | Path | None = None,
) -> EvalReport:
    """K-fold model selection on validation AUC, then test on held-out students.

    For every config each fold trains on the other folds and validates on its
    own. The config with the best mean validation AUC wins, and its per-fold
    checkpoints are each evaluated on the test students.
    """
    by_id = {s.student_id: s for s in sequences}
    test = [by_id[s] for s in split.test_students if s in by_id]
    tasks = []
    for ci, (mc, tc) in enumerate(configs):
        for fold in range(len(split.folds)):
            train_ids, valid_ids = split.train_valid(fold)
            sub = None if out_dir is None else Path(out_dir) / f"config{ci}"
            tasks.append(
                (fold, [by_id[s] for s in train_ids if s in by_id], [by_id[s] for s in valid_ids if s in by_id], mc, tc, sub)
            )
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_fold, tasks))
    else:
        results = [_run_fold(t) for t in tasks]
    n_folds = len(split.folds)
    per_config = [results[i * n_folds : (i + 1) * n_folds] for i in range(len(configs))]
    valid_means = [float(np.mean([r.best_auc for r in rs])) for rs in per_config]
    best = int(np.argmax(valid_means))
    fold_rows = []
    for fold, res in enumerate(per_config[best]):
        _, m = evaluate_one_step(res.model, test)
        fold_rows.append({"fold": fold, "valid_auc": res.best_auc, "best_epoch": res.best_epoch, **m})
    auc_m, auc_s = mean_std([r["auc"] for r in fold_rows])
    acc_m, acc_s = mean_std([r["accuracy"] for r in fold_rows])
    mc, tc = configs[best]
    return EvalReport(auc_m, auc_s, acc_m, acc_s, fold_rows, asdict(mc), asdict(tc))
