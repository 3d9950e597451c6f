"""Losses, Adam, the epoch loop and the per-subject cross-validation harness."""
from __future__ import annotations

import csv
import io
import logging
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import metrics
from . import model as M
from .data import Dataset, SkillRecording, fold_indices

log = logging.getLogger(__name__)

TASK_DEFAULTS = {
    "skill": dict(epochs=10, lr=1e-4),
    "force": dict(epochs=20, lr=1e-3),
}


# --- losses ----------------------------------------------------------------

def sparse_categorical_cross_entropy(probs: np.ndarray, label):
    """Mean -ln p[label] and its gradient w.r.t. the softmax logits (probs - onehot).

    Accepts a single probability vector with an int label, or a batch (N, K)
    with N labels; the batch gradient is divided by N.
    """
    p = np.asarray(probs, dtype=np.float64)
    single = p.ndim == 1
    if single:
        p = p[None]
    labels = np.atleast_1d(np.asarray(label))
    k = p.shape[1]
    if labels.shape != (p.shape[0],):
        raise ValueError(f"{labels.shape[0]} labels for {p.shape[0]} predictions")
    if np.any(labels < 0) or np.any(labels >= k):
        raise ValueError(f"label out of range 0..{k - 1}: {labels}")
    picked = p[np.arange(len(labels)), labels]
    loss = float(np.mean(-np.log(np.maximum(picked, 1e-300))))
    grad = p.copy()
    grad[np.arange(len(labels)), labels] -= 1.0
    grad /= len(labels)
    return loss, (grad[0] if single else grad)


def mae_loss(pred, target):
    """Mean |pred - target| and its gradient; the subgradient at equality is 0."""
    d = np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    n = d.size
    loss = float(np.mean(np.abs(d)))
    grad = np.sign(d) / n
    return loss, (float(grad) if np.ndim(grad) == 0 else grad)


# --- Adam ------------------------------------------------------------------

@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-7
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState) -> tuple[dict, AdamState]:
    """One bias-corrected Adam update; ``params`` arrays are updated in place."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, g in grads.items():
        theta = params[name]
        if g.shape != theta.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter {theta.shape}")
        g = g.astype(np.float64)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros(theta.shape)
            state.v[name] = np.zeros(theta.shape)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        step = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        theta -= step.astype(theta.dtype)
    return params, state


# --- training loop ---------------------------------------------------------

@dataclass
class TrainConfig:
    task: str = "skill"
    epochs: int | None = None
    lr: float | None = None
    batch_size: int = 32
    folds: int = 5
    iterations_per_fold: int = 3
    fold_mode: str = "rotating"
    seed: int = 0

    def __post_init__(self):
        if self.task not in TASK_DEFAULTS:
            raise ValueError(f"task must be 'skill' or 'force', got {self.task!r}")
        if self.epochs is None:
            self.epochs = TASK_DEFAULTS[self.task]["epochs"]
        if self.lr is None:
            self.lr = TASK_DEFAULTS[self.task]["lr"]
        if self.epochs <= 0:
            raise ValueError("epochs must be positive")
        if self.folds < 2:
            raise ValueError("folds must be at least 2")
        if self.batch_size <= 0 or self.iterations_per_fold <= 0:
            raise ValueError("batch_size and iterations_per_fold must be positive")
        if self.fold_mode not in ("rotating", "fixed"):
            raise ValueError(f"fold_mode must be 'rotating' or 'fixed', got {self.fold_mode!r}")


def _loss_and_grad(params: M.ModelParameters, out: np.ndarray, targets: np.ndarray):
    if params.head == "skill":
        return sparse_categorical_cross_entropy(out, targets)
    return mae_loss(out, targets)


def train(params: M.ModelParameters, images: np.ndarray, targets: np.ndarray,
          config: TrainConfig, rng: np.random.Generator | None = None,
          on_epoch: Callable[[int, float], None] | None = None):
    """Minibatch Adam on a private copy of ``params``.

    Returns ``(trained_params, epoch_losses)`` where each loss is the
    sample-weighted mean of the epoch's batch losses.
    """
    n = len(images)
    if n == 0:
        raise ValueError("cannot train on an empty dataset")
    if len(targets) != n:
        raise ValueError(f"{n} images but {len(targets)} targets")
    expected = "skill" if config.task == "skill" else "force"
    if params.head != expected:
        raise ValueError(f"{config.task} training needs a {expected} head, got {params.head}")
    if rng is None:
        rng = np.random.Generator(np.random.PCG64(config.seed))
    params = params.copy()
    state = AdamState(lr=config.lr)
    trainable = set(params.trainable_names())
    losses = []
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = np.sort(order[start:start + config.batch_size])
            xb = images[idx]
            yb = targets[idx]
            out, cache = M.forward_batch(params, xb, "train", rng)
            loss, grad = _loss_and_grad(params, out, yb)
            grads, _ = M.backward(params, cache, grad, mode="train")
            adam_step(params.tensors, {k: g for k, g in grads.items() if k in trainable}, state)
            params.tensors.update(cache.running)
            total += loss * len(idx)
        losses.append(total / n)
        if on_epoch is not None:
            on_epoch(epoch, losses[-1])
    return params, losses


def predict(params: M.ModelParameters, images: np.ndarray, batch_size: int = 128) -> np.ndarray:
    """Infer-mode outputs for a stack of frames: class labels (skill) or forces."""
    outs = []
    for start in range(0, len(images), batch_size):
        out, _ = M.forward_batch(params, images[start:start + batch_size], "infer")
        outs.append(out.argmax(axis=1) if params.head == "skill" else out)
    if not outs:
        return np.zeros(0)
    return np.concatenate(outs)


def evaluate(params: M.ModelParameters, images: np.ndarray, targets: np.ndarray) -> float:
    """Accuracy (%) for the skill head, RMSE (N) for the force head."""
    preds = predict(params, images)
    if params.head == "skill":
        return metrics.accuracy(preds, targets)
    return metrics.rmse(preds, targets)


# --- experiment ledger -----------------------------------------------------

LEDGER_FIELDS = ("task", "subject", "skill", "fold", "iteration", "train_metric", "test_metric")


@dataclass(frozen=True)
class LedgerRecord:
    task: str
    subject: str
    skill: int | None
    fold: int
    iteration: int
    train_metric: float
    test_metric: float
    wall_time_s: float = 0.0

    @property
    def key(self):
        return (self.task, self.subject, -1 if self.skill is None else self.skill, self.fold, self.iteration)


class ExperimentLedger:
    """Append-only record of finished runs; merging keeps one record per key."""

    def __init__(self, records: Sequence[LedgerRecord] = ()):
        self._records: dict = {}
        for r in records:
            self.add(r)

    def add(self, record: LedgerRecord) -> None:
        if record.key in self._records:
            raise ValueError(f"duplicate ledger record {record.key}")
        self._records[record.key] = record

    def merge(self, other: "ExperimentLedger") -> "ExperimentLedger":
        out = ExperimentLedger(self.records)
        for r in other.records:
            out._records.setdefault(r.key, r)
        return out

    @property
    def records(self) -> list[LedgerRecord]:
        return [self._records[k] for k in sorted(self._records)]

    def __len__(self) -> int:
        return len(self._records)

    def __iter__(self):
        return iter(self.records)

    def to_tsv(self) -> str:
        """Deterministic table (wall times excluded so reruns compare byte-equal)."""
        buf = io.StringIO()
        w = csv.writer(buf, delimiter="\t", lineterminator="\n")
        w.writerow(LEDGER_FIELDS)
        for r in self.records:
            w.writerow([r.task, r.subject, "" if r.skill is None else r.skill, r.fold, r.iteration,
                        repr(float(r.train_metric)), repr(float(r.test_metric))])
        return buf.getvalue()

    def timings_tsv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, delimiter="\t", lineterminator="\n")
        w.writerow(("task", "subject", "skill", "fold", "iteration", "wall_time_s"))
        for r in self.records:
            w.writerow([r.task, r.subject, "" if r.skill is None else r.skill, r.fold, r.iteration,
                        f"{r.wall_time_s:.3f}"])
        return buf.getvalue()

    @classmethod
    def from_tsv(cls, text: str) -> "ExperimentLedger":
        rows = list(csv.reader(io.StringIO(text), delimiter="\t"))
        if not rows or tuple(rows[0]) != LEDGER_FIELDS:
            raise ValueError("not a ledger table (bad header)")
        recs = []
        for row in rows[1:]:
            task, subject, skill, fold, it, tr, te = row
            recs.append(LedgerRecord(task, subject, int(skill) if skill else None,
                                     int(fold), int(it), float(tr), float(te)))
        return cls(recs)


def expected_records(task: str, subjects: int, folds: int = 5, iterations: int = 3,
                     skills: int = 5) -> int:
    n = subjects * iterations * folds
    return n * skills if task == "force" else n


# --- cross-validation ------------------------------------------------------

def run_seed(base: int, subject_idx: int, skill: int | None, fold: int, iteration: int) -> int:
    ss = np.random.SeedSequence([base, subject_idx, 99 if skill is None else skill, fold, iteration])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def _gather(recs: Sequence[SkillRecording], folds, fold, mode, labels: bool):
    xs_tr, ys_tr, xs_te, ys_te = [], [], [], []
    for r in recs:
        tr, te = fold_indices(len(r), fold, folds, mode)
        y = np.full(len(r), r.skill, np.int64) if labels else r.forces
        xs_tr.append(r.frames[tr]); ys_tr.append(y[tr])
        xs_te.append(r.frames[te]); ys_te.append(y[te])
    return (np.concatenate(xs_tr), np.concatenate(ys_tr),
            np.concatenate(xs_te), np.concatenate(ys_te))


def run_cross_validation(dataset: Dataset, config: TrainConfig, arch: M.ArchitectureConfig,
                         subjects: Sequence[str] | None = None,
                         progress: Callable[[LedgerRecord], None] | None = None,
                         on_model: Callable[[LedgerRecord, M.ModelParameters], None] | None = None,
                         ) -> ExperimentLedger:
    """Train/test every (subject[, skill], fold, iteration) unit and record its metrics.

    Skill task: one classifier per subject over all its skills.  Force task:
    one regressor per (subject, skill).  Each run gets its own derived seed
    controlling initialization, shuffling and dropout.  ``on_model`` sees
    every trained model alongside its record.
    """
    ledger = ExperimentLedger()
    subjects = list(subjects) if subjects is not None else dataset.subjects
    for subject in subjects:
        # Seeds follow the manifest position, so a subset run reproduces its
        # slice of the full run.
        if subject not in dataset.manifest.subjects:
            raise ValueError(f"unknown subject {subject!r}")
        s_idx = dataset.manifest.subjects.index(subject)
        recs = dataset.for_subject(subject)
        if not recs:
            raise ValueError(f"subject {subject} has no recordings")
        groups = [(None, recs)] if config.task == "skill" else [(r.skill, [r]) for r in recs]
        for skill, group in groups:
            for fold in range(config.folds):
                x_tr, y_tr, x_te, y_te = _gather(group, config.folds, fold, config.fold_mode,
                                                 labels=config.task == "skill")
                if len(x_te) == 0 or len(x_tr) == 0:
                    raise ValueError(f"fold {fold + 1} of {subject} has no samples")
                for it in range(config.iterations_per_fold):
                    t0 = time.perf_counter()
                    seed = run_seed(config.seed, s_idx, skill, fold, it)
                    rng = np.random.Generator(np.random.PCG64(seed))
                    params = M.build_model(arch, config.task, rng)
                    params, _ = train(params, x_tr, y_tr, config, rng)
                    rec = LedgerRecord(config.task, subject, skill, fold + 1, it + 1,
                                       evaluate(params, x_tr, y_tr), evaluate(params, x_te, y_te),
                                       time.perf_counter() - t0)
                    ledger.add(rec)
                    log.info("%s %s skill=%s fold=%d it=%d train=%.4f test=%.4f (%.1fs)",
                             rec.task, subject, skill, rec.fold, rec.iteration,
                             rec.train_metric, rec.test_metric, rec.wall_time_s)
                    if progress is not None:
                        progress(rec)
                    if on_model is not None:
                        on_model(rec, params)
    return ledger


def with_overrides(config: TrainConfig, **kw) -> TrainConfig:
    return replace(config, **{k: v for k, v in kw.items() if v is not None})
