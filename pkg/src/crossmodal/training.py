"""Optimization and evaluation: Adam, plateau scheduling, cross-entropy,
the leave-one-session-out protocol, and accuracy reporting."""

from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import EMOTIONS, Batch, UtteranceSample, make_batches
from .layers import SeqBatch
from .model import EmotionClassifier, ModelConfig
from .tensor import GradTape, Tensor


class OptimizerError(RuntimeError):
    """Non-finite gradients reached the optimizer."""


class TrainingDiverged(RuntimeError):
    """Loss exploded or went non-finite; carries the history so far."""

    def __init__(self, message: str, history: list):
        super().__init__(message)
        self.history = history


class ProtocolError(ValueError):
    """The dataset cannot support the requested evaluation protocol."""


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Batch-averaged -log softmax(logits)[label], in log-sum-exp form."""
    if logits.ndim != 2:
        raise ValueError(f"cross_entropy expects [batch x classes] logits, got {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {labels.shape}")
    if (labels < 0).any() or (labels >= k).any():
        raise ValueError(f"label outside 0..{k - 1}")

    z = logits.data
    m = z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z - m).sum(axis=1, keepdims=True)) + m
    picked = z[np.arange(n), labels]
    loss = float((lse[:, 0] - picked).mean())

    def back(dout):
        soft = np.exp(z - lse)
        soft[np.arange(n), labels] -= 1.0
        return (soft * (dout / n),)

    return T.record(np.asarray(loss, dtype=z.dtype), (logits,), back)


class Adam:
    """Standard Adam with bias correction; zeroes grads after each step."""

    def __init__(self, params: list[tuple[str, Tensor]], lr: float = 1e-5,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self._m = {name: np.zeros_like(p.data) for name, p in self.params}
        self._v = {name: np.zeros_like(p.data) for name, p in self.params}

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.zero_grad()

    def step(self) -> None:
        for name, p in self.params:
            if not np.isfinite(p.grad).all():
                raise OptimizerError(f"non-finite gradient in parameter {name!r}")
        self.step_count += 1
        t = self.step_count
        correct1 = 1.0 - self.beta1 ** t
        correct2 = 1.0 - self.beta2 ** t
        for name, p in self.params:
            g = p.grad
            m = self._m[name]
            v = self._v[name]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            update = (m / correct1) / (np.sqrt(v / correct2) + self.eps)
            p.data -= self.lr * update
            p.grad.fill(0.0)


class PlateauScheduler:
    """Halve (by ``factor``) the optimizer lr after ``patience`` consecutive
    epochs without improvement of the monitored quantity; never raises lr."""

    def __init__(self, optimizer: Adam, factor: float = 0.5, patience: int = 3,
                 min_lr: float = 1e-7):
        self.optimizer = optimizer
        self.factor = factor
        self.patience = patience
        self.min_lr = min_lr
        self.best = np.inf
        self.bad_epochs = 0

    @property
    def lr(self) -> float:
        return self.optimizer.lr

    def step(self, metric: float) -> None:
        if metric < self.best:
            self.best = metric
            self.bad_epochs = 0
            return
        self.bad_epochs += 1
        if self.bad_epochs >= self.patience:
            self.optimizer.lr = max(self.optimizer.lr * self.factor, self.min_lr)
            self.bad_epochs = 0


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

@dataclass
class EvalReport:
    """Confusion matrix (rows = true class) and the accuracies derived from it."""

    confusion: np.ndarray
    unweighted_accuracy: float
    weighted_accuracy: float
    warnings: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "confusion": self.confusion.tolist(),
            "unweighted_accuracy": self.unweighted_accuracy,
            "weighted_accuracy": self.weighted_accuracy,
            "warnings": list(self.warnings),
        }


def report_from_confusion(confusion: np.ndarray) -> EvalReport:
    confusion = np.asarray(confusion, dtype=np.int64)
    totals = confusion.sum(axis=1)
    warnings = []
    recalls = []
    for c, total in enumerate(totals):
        if total == 0:
            warnings.append(f"class {EMOTIONS[c]!r} absent from the test set")
            continue
        recalls.append(confusion[c, c] / total)
    if not recalls:
        raise ProtocolError("test set contains no samples")
    ua = float(np.mean(recalls))
    wa = float(np.trace(confusion) / confusion.sum())
    return EvalReport(confusion, ua, wa, warnings)


def batch_to_seqs(batch: Batch, dtype) -> tuple[SeqBatch, SeqBatch]:
    audio = SeqBatch.from_padded(batch.audio, batch.audio_lengths, dtype=dtype)
    text = SeqBatch.from_padded(batch.text, batch.text_lengths, dtype=dtype)
    return audio, text


def predict_batch(model: EmotionClassifier, batch: Batch) -> np.ndarray:
    audio, text = batch_to_seqs(batch, model.cfg.dtype)
    logits, _, _ = model.forward_batch(audio, text, training=False)
    return logits.data.argmax(axis=1)


def evaluate(model: EmotionClassifier, samples: list[UtteranceSample],
             batch_size: int = 8) -> EvalReport:
    """Eval-mode pass over ``samples``; pure (no model state changes)."""
    if not samples:
        raise ProtocolError("evaluate called with an empty sample list")
    k = model.cfg.classes
    confusion = np.zeros((k, k), dtype=np.int64)
    for batch in make_batches(samples, batch_size):
        predictions = predict_batch(model, batch)
        for true, pred in zip(batch.labels, predictions):
            confusion[true, pred] += 1
    return report_from_confusion(confusion)


def heldout_metrics(model: EmotionClassifier, samples: list[UtteranceSample],
                    batch_size: int = 8) -> tuple[float, EvalReport]:
    """Mean cross-entropy and accuracy report from one eval pass."""
    k = model.cfg.classes
    confusion = np.zeros((k, k), dtype=np.int64)
    total, n = 0.0, 0
    for batch in make_batches(samples, batch_size):
        audio, text = batch_to_seqs(batch, model.cfg.dtype)
        logits, _, _ = model.forward_batch(audio, text, training=False)
        loss = cross_entropy(logits, batch.labels)
        total += float(loss.data) * batch.size
        n += batch.size
        for true, pred in zip(batch.labels, logits.data.argmax(axis=1)):
            confusion[true, pred] += 1
    return total / n, report_from_confusion(confusion)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 8
    lr: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    scheduler_factor: float = 0.5
    scheduler_patience: int = 3
    min_lr: float = 1e-7
    freeze_encoders: bool = False
    divergence_threshold: float = 1e4

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    heldout_loss: float
    heldout_ua: float
    lr: float

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainResult:
    history: list[EpochStats]
    best_epoch: int
    best_heldout_loss: float


def _snapshot(model: EmotionClassifier) -> dict[str, np.ndarray]:
    state = {name: p.data.copy() for name, p in model.named_parameters()}
    state.update({f"buffer.{name}": a.copy() for name, a in model.named_buffers()})
    return state


def _restore(model: EmotionClassifier, state: dict[str, np.ndarray]) -> None:
    for name, p in model.named_parameters():
        p.data[...] = state[name]
    for name, a in model.named_buffers():
        a[...] = state[f"buffer.{name}"]


def train(
    model: EmotionClassifier,
    train_samples: list[UtteranceSample],
    heldout_samples: list[UtteranceSample],
    cfg: TrainConfig,
    seed: int = 0,
) -> TrainResult:
    """Epoch loop with seeded shuffling, Adam, plateau scheduling on the
    held-out loss, and best-checkpoint selection; the model ends up holding
    the best-epoch weights."""
    if not train_samples or not heldout_samples:
        raise ProtocolError("train and held-out sets must both be non-empty")
    train_ids = {s.utt_id for s in train_samples}
    if any(s.utt_id in train_ids for s in heldout_samples):
        raise ProtocolError("train and held-out sets overlap")

    params = model.named_parameters()
    if cfg.freeze_encoders:
        frozen = model.encoder_parameter_names()
        trainable = [(n, p) for n, p in params if n not in frozen]
    else:
        trainable = params
    opt = Adam(trainable, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.adam_eps)
    sched = PlateauScheduler(opt, factor=cfg.scheduler_factor,
                             patience=cfg.scheduler_patience, min_lr=cfg.min_lr)

    root = np.random.SeedSequence(seed)
    shuffle_seeds = root.spawn(cfg.epochs)
    dropout_rng = np.random.default_rng(root.spawn(1)[0])

    history: list[EpochStats] = []
    best = _snapshot(model)
    best_loss = np.inf
    best_epoch = -1
    for epoch in range(cfg.epochs):
        total, count = 0.0, 0
        for batch in make_batches(train_samples, cfg.batch_size, shuffle_seeds[epoch]):
            audio, text = batch_to_seqs(batch, model.cfg.dtype)
            with GradTape() as tape:
                logits, _, _ = model.forward_batch(audio, text, training=True, rng=dropout_rng)
                loss = cross_entropy(logits, batch.labels)
            loss_val = float(loss.data)
            if not np.isfinite(loss_val) or loss_val > cfg.divergence_threshold:
                raise TrainingDiverged(
                    f"loss {loss_val} at epoch {epoch}", history
                )
            tape.backward(loss)
            opt.step()
            for _, p in params:
                p.zero_grad()  # frozen parameters also accumulate
            total += loss_val * batch.size
            count += batch.size

        h_loss, h_report = heldout_metrics(model, heldout_samples, cfg.batch_size)
        history.append(EpochStats(epoch, total / count, h_loss,
                                  h_report.unweighted_accuracy, opt.lr))
        if h_loss < best_loss:
            best_loss = h_loss
            best_epoch = epoch
            best = _snapshot(model)
        sched.step(h_loss)

    _restore(model, best)
    return TrainResult(history, best_epoch, best_loss)


def history_to_jsonl(history: list[EpochStats]) -> str:
    """One JSON object per epoch, newline-delimited."""
    return "\n".join(json.dumps(e.to_dict(), sort_keys=True) for e in history) + "\n"


# ---------------------------------------------------------------------------
# leave-one-session-out protocol
# ---------------------------------------------------------------------------

@dataclass
class FoldResult:
    session: int
    report: EvalReport
    history: list[EpochStats]

    def to_dict(self) -> dict:
        return {
            "session": self.session,
            "report": self.report.to_dict(),
            "epochs": len(self.history),
        }


@dataclass
class LosoReport:
    folds: list[FoldResult]
    average_ua: float
    average_wa: float

    def to_dict(self) -> dict:
        return {
            "folds": [f.to_dict() for f in self.folds],
            "average_unweighted_accuracy": self.average_ua,
            "average_weighted_accuracy": self.average_wa,
        }


def split_by_session(samples: list[UtteranceSample], session: int
                     ) -> tuple[list[UtteranceSample], list[UtteranceSample]]:
    test = [s for s in samples if s.session == session]
    rest = [s for s in samples if s.session != session]
    if not test:
        raise ProtocolError(f"session {session} has no samples")
    if not rest:
        raise ProtocolError(f"no training samples outside session {session}")
    return rest, test


def _run_fold(args) -> FoldResult:
    samples, model_cfg, mode, train_cfg, session, fold_seed, checkpoint_dir = args
    rest, test = split_by_session(samples, session)
    model = EmotionClassifier(model_cfg, mode=mode, seed=fold_seed)
    # the held-out monitor is the test session itself (matching the original
    # protocol's test-loss scheduling); see README for the leakage caveat
    result = train(model, rest, test, train_cfg, seed=fold_seed)
    if checkpoint_dir is not None:
        from .checkpoint import save_checkpoint
        save_checkpoint(model, Path(checkpoint_dir) / f"session{session}.ckpt")
    report = evaluate(model, test, train_cfg.batch_size)
    return FoldResult(session, report, result.history)


def loso_run(
    samples: list[UtteranceSample],
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    mode: str = "fused",
    seed: int = 0,
    jobs: int = 1,
    checkpoint_dir: str | Path | None = None,
) -> LosoReport:
    """Five independent folds, one per session; the final number is the
    arithmetic mean of the per-session unweighted accuracies."""
    sessions = sorted({s.session for s in samples})
    if sessions != [1, 2, 3, 4, 5]:
        missing = sorted(set(range(1, 6)) - set(sessions))
        raise ProtocolError(f"sessions {missing} have no samples")
    fold_seeds = [int(ss.generate_state(1)[0]) for ss in np.random.SeedSequence(seed).spawn(5)]
    tasks = [
        (samples, model_cfg, mode, train_cfg, session, fold_seeds[i], checkpoint_dir)
        for i, session in enumerate(sessions)
    ]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            folds = list(pool.map(_run_fold, tasks))
    else:
        folds = [_run_fold(t) for t in tasks]
    average_ua = float(np.mean([f.report.unweighted_accuracy for f in folds]))
    average_wa = float(np.mean([f.report.weighted_accuracy for f in folds]))
    return LosoReport(folds, average_ua, average_wa)
