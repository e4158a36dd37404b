"""Optimization, scheduling and the E1/E2/E3 experiment drivers."""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import nncore as nn
from .datakit import CorpusManifest, Sentence, load_corpus
from .evalkit import MetricReport, evaluate_sentence, summarize, write_metrics_csv
from .evalkit import collect_durations, duration_significance, write_duration_csv
from .models import AAIModel, ModelConfig, PTAModel, build_model, load_model, save_model
from .nncore import functional as F

log = logging.getLogger(__name__)

SETUPS = ("E1", "E2", "E3")


class ExperimentError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 4
    lr: float = 1e-4
    scheduler_patience: int = 7
    scheduler_factor: float = 0.5
    max_epochs: int = 100
    early_stop_patience: int = 20
    seed: int = 0
    traj_weight: float = 1.0
    dur_weight: float = 1.0
    clip_norm: float = 5.0

    def __post_init__(self):
        for name in ("batch_size", "max_epochs", "scheduler_patience", "early_stop_patience"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.lr < 0:
            raise ValueError("lr must be non-negative")
        if not 0 < self.scheduler_factor < 1:
            raise ValueError("scheduler_factor must lie in (0, 1)")
        if self.traj_weight < 0 or self.dur_weight < 0 or self.clip_norm <= 0:
            raise ValueError("loss weights must be >= 0 and clip_norm > 0")


# ---------------------------------------------------------------------------
# config files
# ---------------------------------------------------------------------------

def _field_types(cls) -> dict[str, type]:
    types = {"int": int, "float": float, "str": str}
    return {f.name: types[f.type if isinstance(f.type, str) else f.type.__name__]
            for f in dataclasses.fields(cls)}


def read_config(path) -> tuple[dict, dict]:
    """Parse a flat ``key=value`` file into (TrainConfig kwargs, ModelConfig kwargs).

    Blank lines and ``#`` comments are ignored; unknown keys are rejected.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    train_types = _field_types(TrainConfig)
    model_types = _field_types(ModelConfig)
    train_kw, model_kw = {}, {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep:
            raise ValueError(f"{path}:{lineno}: expected key=value")
        if key in train_types:
            target, typ = train_kw, train_types[key]
        elif key in model_types:
            target, typ = model_kw, model_types[key]
        else:
            raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
        try:
            target[key] = typ(value)
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: bad value for {key}: {value!r}") from exc
    return train_kw, model_kw


def write_config(path, train_cfg: TrainConfig, model_cfg: ModelConfig | None = None) -> None:
    lines = [f"{k}={v}" for k, v in dataclasses.asdict(train_cfg).items()]
    if model_cfg is not None:
        lines += [f"{k}={v}" for k, v in model_cfg.to_dict().items() if k != "task"]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# optimizer and schedule
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Sequence[tuple[str, nn.Parameter]], grads: dict[str, np.ndarray],
              state: AdamState, lr: float) -> AdamState:
    """One bias-corrected Adam update, in place on ``params``."""
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise nn.NonFiniteError(f"non-finite gradient for {name}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params:
        g = grads.get(name)
        if g is None:
            continue
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        if lr != 0.0:
            update = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
            p.data -= update.astype(p.data.dtype)
    return state


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``."""
    total = math.sqrt(math.fsum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values()))
    if total > max_norm:
        factor = max_norm / (total + 1e-12)
        for g in grads.values():
            g *= factor
    return total


class PlateauScheduler:
    """Multiply the learning rate by ``factor`` once the monitored loss has gone
    ``patience`` consecutive epochs without a new minimum."""

    def __init__(self, lr: float, patience: int = 7, factor: float = 0.5):
        self.lr = lr
        self.patience = patience
        self.factor = factor
        self.best = math.inf
        self.bad_epochs = 0

    def step(self, loss: float) -> bool:
        """Record one epoch's loss; returns True when the rate was reduced."""
        if loss < self.best:
            self.best = loss
            self.bad_epochs = 0
            return False
        self.bad_epochs += 1
        if self.bad_epochs >= self.patience:
            self.lr *= self.factor
            self.bad_epochs = 0
            return True
        return False


def plateau_schedule(losses: Sequence[float], lr: float, patience: int = 7,
                     factor: float = 0.5) -> list[int]:
    """Epochs (1-based) at which the scheduler would reduce the learning rate."""
    sched = PlateauScheduler(lr, patience, factor)
    return [epoch for epoch, loss in enumerate(losses, start=1) if sched.step(loss)]


# ---------------------------------------------------------------------------
# batching and losses
# ---------------------------------------------------------------------------

@dataclass
class Batch:
    sentences: list[Sentence]
    frame_mask: np.ndarray  # [B, T]
    targets: np.ndarray  # [B, T, 12]
    acoustic: np.ndarray | None = None  # [B, T, 13]
    phonemes: np.ndarray | None = None  # [B, m]
    durations: np.ndarray | None = None  # [B, m]


def collate(sentences: Sequence[Sentence], task: str) -> Batch:
    """Zero-pad a group of sentences to the longest member."""
    dtype = nn.get_dtype()
    B = len(sentences)
    T = max(len(s.articulatory) for s in sentences)
    frame_mask = np.zeros((B, T), dtype=dtype)
    targets = np.zeros((B, T, sentences[0].articulatory.shape[1]), dtype=dtype)
    for b, s in enumerate(sentences):
        frame_mask[b, :len(s.articulatory)] = 1
        targets[b, :len(s.articulatory)] = s.articulatory
    batch = Batch(list(sentences), frame_mask, targets)
    if task == "aai":
        batch.acoustic = np.zeros((B, T, sentences[0].acoustic.shape[1]), dtype=dtype)
        for b, s in enumerate(sentences):
            batch.acoustic[b, :len(s.acoustic)] = s.acoustic
    else:
        m = max(len(s.phonemes) for s in sentences)
        batch.phonemes = np.zeros((B, m), dtype=np.int64)
        batch.durations = np.zeros((B, m), dtype=np.int64)
        for b, s in enumerate(sentences):
            batch.phonemes[b, :len(s.phonemes)] = s.phonemes
            batch.durations[b, :len(s.durations)] = s.durations
    return batch


def make_batches(sentences: Sequence[Sentence], task: str, batch_size: int,
                 rng: np.random.Generator | None = None) -> list[Batch]:
    order = np.arange(len(sentences)) if rng is None else rng.permutation(len(sentences))
    return [collate([sentences[i] for i in order[k:k + batch_size]], task)
            for k in range(0, len(order), batch_size)]


def train_loss(model, batch: Batch, cfg: TrainConfig, rng=None) -> tuple[nn.Tensor, dict[str, float]]:
    """Masked trajectory MSE, plus weighted masked duration MSE for PTA."""
    if isinstance(model, AAIModel):
        pred = model(batch.acoustic, batch.frame_mask, rng)
        traj = F.mse(pred, batch.targets, batch.frame_mask)
        return F.scale(traj, cfg.traj_weight), {"traj": float(traj.data)}
    pred, dur, frame_mask = model.forward_train(batch.phonemes, batch.durations, rng)
    traj = F.mse(pred, batch.targets, frame_mask)
    dur_loss = F.mse(dur, batch.durations.astype(dur.data.dtype), batch.phonemes > 0)
    total = F.add(F.scale(traj, cfg.traj_weight), F.scale(dur_loss, cfg.dur_weight))
    return total, {"traj": float(traj.data), "dur": float(dur_loss.data)}


def evaluate_loss(model, sentences: Sequence[Sentence], cfg: TrainConfig) -> float:
    """Mean batch loss in eval mode over a fixed (unshuffled) batching."""
    was_training = model.training
    model.eval()
    task = model.cfg.task
    losses = []
    with nn.no_grad():
        for batch in make_batches(sentences, task, cfg.batch_size):
            loss, _ = train_loss(model, batch, cfg)
            losses.append(float(loss.data))
    model.train(was_training)
    return math.fsum(losses) / len(losses)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float


@dataclass
class FitResult:
    best_state: dict[str, np.ndarray]
    best_val: float
    best_epoch: int
    history: list[EpochLog]


def write_train_log(path, history: Sequence[EpochLog]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("epoch", "train_loss", "val_loss", "lr"))
        for row in history:
            train = "" if math.isnan(row.train_loss) else repr(row.train_loss)
            writer.writerow((row.epoch, train, repr(row.val_loss), repr(row.lr)))


def fit(model, train: Sequence[Sentence], val: Sequence[Sentence], cfg: TrainConfig) -> FitResult:
    """Train with Adam and plateau halving; keep the best-validation weights.

    Epoch 0 is the untrained (or pre-trained) model, so a run never returns
    weights worse on validation than its starting point.
    """
    if not train or not val:
        raise ExperimentError("training needs non-empty train and validation splits")
    seeds = np.random.SeedSequence(cfg.seed).spawn(2)
    shuffle_rng = np.random.default_rng(seeds[0])
    dropout_rng = np.random.default_rng(seeds[1])
    params = list(model.named_parameters())
    state = AdamState()
    sched = PlateauScheduler(cfg.lr, cfg.scheduler_patience, cfg.scheduler_factor)

    val_loss = evaluate_loss(model, val, cfg)
    history = [EpochLog(0, math.nan, val_loss, sched.lr)]
    best_state, best_val, best_epoch = model.state_dict(), val_loss, 0
    since_best = 0
    model.train()
    for epoch in range(1, cfg.max_epochs + 1):
        batch_losses = []
        for batch in make_batches(train, model.cfg.task, cfg.batch_size, shuffle_rng):
            model.zero_grad()
            try:
                loss, _ = train_loss(model, batch, cfg, dropout_rng)
                loss.backward()
                grads = {name: p.grad for name, p in params if p.grad is not None}
                clip_grad_norm(grads, cfg.clip_norm)
                adam_step(params, grads, state, sched.lr)
            except nn.NonFiniteError as exc:
                log.warning("epoch %d aborted: %s", epoch, exc)
                break
            batch_losses.append(float(loss.data))
        model.zero_grad()
        train_loss_value = math.fsum(batch_losses) / len(batch_losses) if batch_losses else math.nan
        val_loss = evaluate_loss(model, val, cfg)
        history.append(EpochLog(epoch, train_loss_value, val_loss, sched.lr))
        log.info("epoch %d train %.5f val %.5f lr %.2e", epoch, train_loss_value, val_loss, sched.lr)
        if val_loss < best_val:
            best_state, best_val, best_epoch = model.state_dict(), val_loss, epoch
            since_best = 0
        else:
            since_best += 1
        sched.step(val_loss)
        if since_best >= cfg.early_stop_patience:
            break
    model.train()
    return FitResult(best_state, best_val, best_epoch, history)


def overfit(model, sentences: Sequence[Sentence], cfg: TrainConfig, max_epochs: int = 500,
            target: float = 1e-2) -> list[float]:
    """Full-batch training on a tiny subset until the loss drops below ``target``."""
    params = list(model.named_parameters())
    state = AdamState()
    rng = np.random.default_rng(cfg.seed)
    batch = collate(list(sentences), model.cfg.task)
    losses = []
    model.train()
    for _ in range(max_epochs):
        model.zero_grad()
        loss, _ = train_loss(model, batch, cfg, rng)
        loss.backward()
        losses.append(float(loss.data))
        if losses[-1] < target:
            break
        grads = {name: p.grad for name, p in params if p.grad is not None}
        clip_grad_norm(grads, cfg.clip_norm)
        adam_step(params, grads, state, cfg.lr)
    model.zero_grad()
    return losses


# ---------------------------------------------------------------------------
# evaluation of trained models
# ---------------------------------------------------------------------------

@dataclass
class TestOutcome:
    reports: list[MetricReport]
    # PTA only: (phoneme ids, ground-truth durations, predicted durations) per sentence
    durations: list[tuple[np.ndarray, np.ndarray, np.ndarray]] = field(default_factory=list)

    @property
    def mean_cc(self) -> float:
        return summarize(self.reports).cc_mean

    @property
    def duration_mae(self) -> float:
        errs = np.concatenate([np.abs(g - p) for _, g, p in self.durations])
        return float(errs.mean())


def predict(model, sentences: Sequence[Sentence], batch_size: int = 4) -> list[tuple[np.ndarray, np.ndarray | None]]:
    """Unpadded predictions ``(trajectory, durations or None)`` per sentence."""
    was_training = model.training
    model.eval()
    out = []
    with nn.no_grad():
        for k in range(0, len(sentences), batch_size):
            batch = collate(sentences[k:k + batch_size], model.cfg.task)
            if isinstance(model, AAIModel):
                pred = model(batch.acoustic, batch.frame_mask).data
                out += [(pred[b, :len(s.articulatory)].copy(), None)
                        for b, s in enumerate(batch.sentences)]
            else:
                out += model.infer(batch.phonemes)
    model.train(was_training)
    return out


def evaluate_model(model, sentences: Sequence[Sentence]) -> TestOutcome:
    task = model.cfg.task
    outcome = TestOutcome([])
    for s, (traj, durs) in zip(sentences, predict(model, sentences)):
        outcome.reports.append(evaluate_sentence(task, traj, s.articulatory, s.id, s.subject))
        if durs is not None:
            outcome.durations.append((s.phonemes, s.durations, durs))
    return outcome


# ---------------------------------------------------------------------------
# experiments
# ---------------------------------------------------------------------------

@dataclass
class ExperimentPlan:
    setup: str
    subjects: list[str] | None = None  # None: every subject in the manifest
    source_checkpoint: str | None = None  # E3 only

    def __post_init__(self):
        if self.setup not in SETUPS:
            raise ExperimentError(f"setup must be one of {SETUPS}, got {self.setup!r}")
        if self.setup == "E3":
            if not self.source_checkpoint or not Path(self.source_checkpoint).is_file():
                raise ExperimentError("E3 needs an existing pooled (E2) checkpoint")


@dataclass
class SubjectResult:
    subject: str
    checkpoint: Path
    outcome: TestOutcome
    fit: FitResult


@dataclass
class ExperimentResult:
    plan: ExperimentPlan
    subjects: dict[str, SubjectResult]
    metrics_path: Path


def _mean_duration(sentences: Sequence[Sentence]) -> float:
    return float(np.concatenate([s.durations for s in sentences]).mean())


def _train_one(model, train, val, cfg: TrainConfig, out_dir: Path, tag: str, extra_meta: dict):
    result = fit(model, train, val, cfg)
    model.load_state_dict(result.best_state)
    ckpt = out_dir / f"{tag}.ckpt"
    meta = {"val_loss": repr(result.best_val), "best_epoch": str(result.best_epoch), **extra_meta}
    save_model(ckpt, model, meta)
    write_train_log(out_dir / f"{tag}.train_log.csv", result.history)
    return ckpt, result


def run_experiment(plan: ExperimentPlan, train_cfg: TrainConfig, model_cfg: ModelConfig,
                   manifest: CorpusManifest, out_dir) -> ExperimentResult:
    """Train and test according to ``plan``.

    E1 trains one model per subject; E2 trains one model on every subject's
    training data and tests it on each subject; E3 fine-tunes the E2
    checkpoint per subject. Checkpoints, training logs and ``metrics.csv``
    land in ``out_dir``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    subjects = plan.subjects or manifest.subjects()
    unknown = set(subjects) - set(manifest.subjects())
    if unknown:
        raise ExperimentError(f"subjects not in manifest: {sorted(unknown)}")
    data = {s: {split: load_corpus(manifest, split, [s]) for split in ("train", "val", "test")}
            for s in subjects}
    base_meta = {"setup": plan.setup, "seed": str(train_cfg.seed)}

    def fresh_model(train_sentences):
        model = build_model(model_cfg, train_cfg.seed)
        if isinstance(model, PTAModel):
            # start the duration head at the mean training duration
            model.duration.proj.bias.data[:] = _mean_duration(train_sentences)
        return model

    results: dict[str, SubjectResult] = {}
    if plan.setup == "E2":
        train = [x for s in subjects for x in data[s]["train"]]
        val = [x for s in subjects for x in data[s]["val"]]
        model = fresh_model(train)
        ckpt, fr = _train_one(model, train, val, train_cfg, out_dir, "pooled", base_meta)
        for s in subjects:
            results[s] = SubjectResult(s, ckpt, evaluate_model(model, data[s]["test"]), fr)
    else:
        for s in subjects:
            if plan.setup == "E1":
                model = fresh_model(data[s]["train"])
            else:
                model, _ = load_model(plan.source_checkpoint)
                if model.cfg.task != model_cfg.task:
                    raise ExperimentError("source checkpoint was trained for a different task")
            meta = {**base_meta, "subject": s}
            ckpt, fr = _train_one(model, data[s]["train"], data[s]["val"], train_cfg,
                                  out_dir, s, meta)
            results[s] = SubjectResult(s, ckpt, evaluate_model(model, data[s]["test"]), fr)

    all_reports = [r for s in subjects for r in results[s].outcome.reports]
    metrics_path = out_dir / "metrics.csv"
    write_metrics_csv(metrics_path, all_reports)
    if model_cfg.task == "pta":
        triples = [t for s in subjects for t in results[s].outcome.durations]
        gt, pred = collect_durations(triples)
        write_duration_csv(out_dir / "durations.csv", gt, pred, duration_significance(gt, pred))
    return ExperimentResult(plan, results, metrics_path)
