"""Two-phase fine-tuning loop, early stopping and checkpoints."""

from __future__ import annotations

import copy
import csv
import io
import logging
import math
import os
import tempfile
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .augment import AugmentationSpec, OversamplePlan, apply_augmentation, derive_rng, sample_epoch
from .dataset import NUM_CLASSES, SampleRecord, load_image
from .ensemble import PredictionSet
from .evaluate import ConfusionMatrix, balanced_accuracy, predicted_labels
from .exceptions import CheckpointFormatError, DivergenceError, LabelError, PersistenceError
from .model import BackboneDescriptor, ClassifierModel, TrainabilityMode, build_classifier, set_trainable
from .preprocess import NormalizationParams, normalize_and_resize, to_unit_range

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "skinlesion-checkpoint"
CHECKPOINT_VERSION = 1
PROB_FLOOR = 1e-12
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class TrainSchedule:
    phase1_epochs: int = 2
    phase1_lr: float = 1e-4
    phase2_lr: float = 1e-2
    max_epochs: int = 50
    early_stop_patience: int = 10
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.phase1_epochs < self.max_epochs:
            raise ValueError(f"need 0 <= phase1_epochs < max_epochs, got {self.phase1_epochs} and {self.max_epochs}")
        if not (self.phase1_lr > 0 and self.phase2_lr > 0):
            raise ValueError("learning rates must be positive")
        if self.early_stop_patience < 1:
            raise ValueError("early_stop_patience must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def mode_for(self, epoch) -> TrainabilityMode:
        return TrainabilityMode.HEAD_ONLY if epoch <= self.phase1_epochs else TrainabilityMode.ALL

    def lr_for(self, epoch) -> float:
        return self.phase1_lr if epoch <= self.phase1_epochs else self.phase2_lr


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    validation_score: float
    learning_rate: float
    trainability_mode: TrainabilityMode
    wall_seconds: float = 0.0

    def to_dict(self):
        d = asdict(self)
        d["trainability_mode"] = TrainabilityMode(self.trainability_mode).value
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(
            int(d["epoch"]),
            float(d["train_loss"]),
            float(d["validation_score"]),
            float(d["learning_rate"]),
            TrainabilityMode(d["trainability_mode"]),
            float(d.get("wall_seconds", 0.0)),
        )


def cross_entropy(probabilities, labels) -> float:
    """``-log p_true`` with ``p_true`` floored at 1e-12; batches give the mean."""
    p = np.asarray(probabilities, dtype=np.float64)
    y = np.asarray(labels)
    single = p.ndim == 1
    p, y = np.atleast_2d(p), np.atleast_2d(y)
    if y.shape != p.shape or not np.all((y == 0) | (y == 1)) or not np.all(y.sum(axis=1) == 1):
        raise LabelError(f"labels must be one-hot rows matching probabilities of shape {p.shape}")
    p_true = np.maximum(p[y.astype(bool)], PROB_FLOOR)
    losses = -np.log(p_true)
    return float(losses[0]) if single else float(losses.mean())


def batch_loss(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Mean clamped cross-entropy computed from logits via ``log_softmax``."""
    logp = torch.log_softmax(logits, dim=1).gather(1, targets.view(-1, 1)).squeeze(1)
    return -torch.clamp(logp, min=math.log(PROB_FLOOR)).mean()


def early_stop_check(history: Sequence[EpochRecord], patience: int) -> bool:
    """True once ``patience`` epochs have passed without beating the best score.

    The best is the first occurrence of the maximum, so with the best at
    1-based epoch ``b`` this first fires when the history reaches ``b + patience``.
    """
    if not history:
        raise ValueError("history must be non-empty")
    scores = [h.validation_score for h in history]
    best = int(np.argmax(scores))
    return (len(scores) - 1) - best >= patience


# --- checkpoints ------------------------------------------------------------


@dataclass
class Checkpoint:
    descriptor: BackboneDescriptor
    state_dict: dict
    epoch: int
    trainability_mode: TrainabilityMode
    validation_score: float | None
    history: list = field(default_factory=list)
    hidden_units: int | None = None
    num_classes: int = NUM_CLASSES
    dtype: str = "float32"
    optimizer_state: dict | None = None
    rng: dict = field(default_factory=dict)

    @classmethod
    def from_model(cls, model: ClassifierModel, history, **kwargs):
        state = {k: v.detach().clone() for k, v in model.state_dict().items()}
        kwargs.setdefault("epoch", history[-1].epoch if history else 0)
        kwargs.setdefault("validation_score", max((h.validation_score for h in history), default=None))
        return cls(
            descriptor=model.descriptor,
            state_dict=state,
            trainability_mode=model.trainability_mode,
            history=list(history),
            hidden_units=model.hidden_units,
            num_classes=model.num_classes,
            dtype=str(model.dtype).replace("torch.", ""),
            **kwargs,
        )

    def to_model(self) -> ClassifierModel:
        model = build_classifier(
            self.descriptor,
            num_classes=self.num_classes,
            hidden_units=self.hidden_units,
            pretrained=False,
            dtype=getattr(torch, self.dtype),
        )
        try:
            model.load_state_dict(self.state_dict, strict=True)
        except RuntimeError as exc:
            raise CheckpointFormatError(f"checkpoint parameters do not fit {self.descriptor.name}: {exc}") from None
        return set_trainable(model, self.trainability_mode)

    def metadata(self):
        return {
            "descriptor": self.descriptor.to_dict(),
            "epoch": self.epoch,
            "trainability_mode": TrainabilityMode(self.trainability_mode).value,
            "validation_score": self.validation_score,
            "hidden_units": self.hidden_units,
            "num_classes": self.num_classes,
            "dtype": self.dtype,
            "rng": dict(self.rng),
        }


def _sidecar_path(path: Path) -> Path:
    return path.with_name(path.name + ".meta.txt")


def write_checkpoint(ckpt: Checkpoint, path):
    """Atomically write ``ckpt`` plus a ``key=value`` sidecar next to it."""
    path = Path(path)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "params": ckpt.state_dict,
        "optimizer": ckpt.optimizer_state,
        "metadata": ckpt.metadata(),
        "history": [h.to_dict() for h in ckpt.history],
    }
    meta = ckpt.metadata()
    sidecar = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "backbone": ckpt.descriptor.name,
        "input_side": ckpt.descriptor.input_side,
        "feature_dim": ckpt.descriptor.feature_dim,
        "provider_uri": ckpt.descriptor.provider_uri or "",
        "epoch": ckpt.epoch,
        "trainability_mode": meta["trainability_mode"],
        "validation_score": "" if ckpt.validation_score is None else repr(ckpt.validation_score),
        "hidden_units": ckpt.hidden_units or "",
        "dtype": ckpt.dtype,
        "history_epochs": len(ckpt.history),
        **{f"rng.{k}": v for k, v in sorted(ckpt.rng.items())},
    }
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
        with os.fdopen(fd, "wb") as fh:
            torch.save(payload, fh)
        os.replace(tmp, path)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.meta.", suffix=".tmp")
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.writelines(f"{k}={v}\n" for k, v in sidecar.items())
        os.replace(tmp, _sidecar_path(path))
    except OSError as exc:
        raise PersistenceError(f"could not write checkpoint {path}: {exc}") from exc


def read_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise CheckpointFormatError(f"{path}: not a readable checkpoint ({type(exc).__name__}: {exc})") from None
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointFormatError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointFormatError(f"{path}: checkpoint version {payload.get('version')!r}, expected {CHECKPOINT_VERSION}")
    try:
        meta = payload["metadata"]
        return Checkpoint(
            descriptor=BackboneDescriptor(**meta["descriptor"]),
            state_dict=payload["params"],
            epoch=int(meta["epoch"]),
            trainability_mode=TrainabilityMode(meta["trainability_mode"]),
            validation_score=meta["validation_score"],
            history=[EpochRecord.from_dict(h) for h in payload["history"]],
            hidden_units=meta["hidden_units"],
            num_classes=int(meta["num_classes"]),
            dtype=meta["dtype"],
            optimizer_state=payload.get("optimizer"),
            rng=dict(meta.get("rng", {})),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointFormatError(f"{path}: incomplete checkpoint metadata ({exc})") from None


def save_checkpoint(model: ClassifierModel, history, path, **kwargs):
    write_checkpoint(Checkpoint.from_model(model, history, **kwargs), path)


def load_checkpoint(path):
    """Return ``(model, history)`` restored from ``path``."""
    ckpt = read_checkpoint(path)
    return ckpt.to_model(), ckpt.history


# --- data flow --------------------------------------------------------------


def default_loader(record: SampleRecord) -> np.ndarray:
    return load_image(record.image_path)


def prepare_sample(image, params, side, spec=None, rng=None) -> np.ndarray:
    unit = to_unit_range(image)
    if spec is not None:
        unit = apply_augmentation(unit, spec, rng)
    return normalize_and_resize(unit, params, side)


def _map(fn, items, n_jobs):
    if n_jobs is None or n_jobs <= 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=n_jobs) as pool:
        return list(pool.map(fn, items))


def predict_records(
    model: ClassifierModel,
    records: Sequence[SampleRecord],
    loader: Callable = default_loader,
    params: NormalizationParams = NormalizationParams(),
    batch_size: int = 32,
    source_name: str | None = None,
    n_jobs: int = 1,
) -> PredictionSet:
    """Deterministic inference: preprocessing only, no augmentation."""
    side = model.descriptor.input_side
    probs = []
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            for start in range(0, len(records), batch_size):
                chunk = records[start : start + batch_size]
                batch = np.stack(_map(lambda r: prepare_sample(loader(r), params, side), chunk, n_jobs))
                probs.append(model(torch.from_numpy(batch).to(model.dtype)).double().numpy())
    finally:
        model.train(was_training)
    probabilities = np.concatenate(probs) if probs else np.zeros((0, NUM_CLASSES))
    ids = [r.image_id for r in records]
    return PredictionSet.from_array(source_name or model.descriptor.name, ids, probabilities)


def _validation_score(model, inputs, truth, batch_size):
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            probs = np.concatenate(
                [model(inputs[s : s + batch_size]).double().numpy() for s in range(0, len(inputs), batch_size)]
            )
    finally:
        model.train(was_training)
    return balanced_accuracy(ConfusionMatrix.from_labels(truth, predicted_labels(probs)))


def _make_optimizer(model, lr):
    return torch.optim.Adam([p for p in model.parameters() if p.requires_grad], lr=lr, betas=ADAM_BETAS, eps=ADAM_EPS)


def run_training(
    model: ClassifierModel,
    train_records: Sequence[SampleRecord],
    holdout_records: Sequence[SampleRecord],
    schedule: TrainSchedule,
    spec: AugmentationSpec | None,
    plan: OversamplePlan,
    *,
    loader: Callable = default_loader,
    params: NormalizationParams = NormalizationParams(),
    checkpoint_dir=None,
    resume: bool = False,
    n_jobs: int = 1,
    on_epoch: Callable | None = None,
):
    """Fine-tune ``model`` and return ``(best_checkpoint, history)``.

    Epochs ``1..phase1_epochs`` train the head only at ``phase1_lr``; later
    epochs train everything at ``phase2_lr``. Adam restarts from fresh state
    at the phase switch. Each epoch draws indices with :func:`sample_epoch`
    and augments sample ``k`` with a stream derived from ``(seed, epoch, k)``,
    so a resumed run replays exactly what an uninterrupted one would.

    With ``checkpoint_dir`` set, ``last.ckpt`` is written after every epoch
    and ``best.ckpt`` whenever the holdout balanced accuracy improves.
    ``resume=True`` continues from ``checkpoint_dir/last.ckpt``.
    """
    if not len(train_records):
        raise ValueError("no training records")
    if not len(holdout_records):
        raise ValueError("no holdout records")
    checkpoint_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    side = model.descriptor.input_side

    holdout_inputs = torch.from_numpy(
        np.stack(_map(lambda r: prepare_sample(loader(r), params, side), holdout_records, n_jobs))
    ).to(model.dtype)
    holdout_truth = np.array([int(r.lesion_class) for r in holdout_records])

    history: list[EpochRecord] = []
    best: Checkpoint | None = None
    optimizer, optimizer_mode, start_epoch = None, None, 1
    if resume:
        if checkpoint_dir is None:
            raise ValueError("resume requires checkpoint_dir")
        last = read_checkpoint(checkpoint_dir / "last.ckpt")
        if last.descriptor != model.descriptor:
            raise CheckpointFormatError(f"checkpoint backbone {last.descriptor.name} != model {model.descriptor.name}")
        model.load_state_dict(last.state_dict)
        set_trainable(model, last.trainability_mode)
        history = list(last.history)
        start_epoch = last.epoch + 1
        if last.optimizer_state is not None and schedule.mode_for(start_epoch) == last.trainability_mode:
            optimizer = _make_optimizer(model, schedule.lr_for(start_epoch))
            optimizer.load_state_dict(last.optimizer_state)
            optimizer_mode = last.trainability_mode
        best_path = checkpoint_dir / "best.ckpt"
        best = read_checkpoint(best_path) if best_path.exists() else None
        logger.info("resumed from %s at epoch %d", checkpoint_dir / "last.ckpt", last.epoch)
        if history and early_stop_check(history, schedule.early_stop_patience):
            logger.info("early stopping already triggered in resumed history")
            return best, history

    for epoch in range(start_epoch, schedule.max_epochs + 1):
        t0 = time.perf_counter()
        mode, lr = schedule.mode_for(epoch), schedule.lr_for(epoch)
        if optimizer is None or optimizer_mode != mode:
            set_trainable(model, mode)
            if optimizer is not None:
                logger.info("epoch %d: switching to %s at lr %g; optimizer state reset", epoch, mode.value, lr)
            optimizer, optimizer_mode = _make_optimizer(model, lr), mode

        order = sample_epoch(train_records, plan, derive_rng(schedule.seed, epoch, 0))
        model.train()
        loss_sum, seen = 0.0, 0
        for b, start in enumerate(range(0, len(order), schedule.batch_size)):
            positions = range(start, min(start + schedule.batch_size, len(order)))

            def prep(k):
                record = train_records[order[k]]
                return prepare_sample(loader(record), params, side, spec, derive_rng(schedule.seed, epoch, 1, k))

            x = torch.from_numpy(np.stack(_map(prep, positions, n_jobs))).to(model.dtype)
            y = torch.tensor([int(train_records[order[k]].lesion_class) for k in positions])
            optimizer.zero_grad(set_to_none=True)
            loss = batch_loss(model.logits(x), y)
            if not torch.isfinite(loss):
                raise DivergenceError(f"non-finite loss at epoch {epoch}, batch {b}", epoch=epoch, batch=b)
            loss.backward()
            optimizer.step()
            loss_sum += loss.item() * len(positions)
            seen += len(positions)

        score = _validation_score(model, holdout_inputs, holdout_truth, schedule.batch_size)
        record = EpochRecord(epoch, loss_sum / seen, score, lr, mode, time.perf_counter() - t0)
        history.append(record)
        logger.info(
            "epoch %d [%s lr=%g] loss=%.6f val_balanced_acc=%.4f", epoch, mode.value, lr, record.train_loss, score
        )

        rng_meta = {"seed": schedule.seed, "next_epoch": epoch + 1}
        if best is None or score > best.validation_score:
            best = Checkpoint.from_model(model, history, epoch=epoch, validation_score=score, rng=rng_meta)
            if checkpoint_dir is not None:
                write_checkpoint(best, checkpoint_dir / "best.ckpt")
        if checkpoint_dir is not None:
            last = Checkpoint.from_model(
                model, history, epoch=epoch, validation_score=score, optimizer_state=optimizer.state_dict(), rng=rng_meta
            )
            write_checkpoint(last, checkpoint_dir / "last.ckpt")
        if on_epoch is not None:
            on_epoch(record)
        if early_stop_check(history, schedule.early_stop_patience):
            logger.info("early stop after epoch %d (best epoch %d)", epoch, best.epoch)
            break

    if best is not None:
        best = copy.copy(best)
        best.history = list(history)
    return best, history


# --- history outputs --------------------------------------------------------

HISTORY_COLUMNS = ("epoch", "phase", "lr", "train_loss", "val_score", "seconds")


def format_history(history: Sequence[EpochRecord]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(HISTORY_COLUMNS)
    for h in history:
        writer.writerow(
            [
                h.epoch,
                TrainabilityMode(h.trainability_mode).value,
                repr(h.learning_rate),
                repr(h.train_loss),
                repr(h.validation_score),
                f"{h.wall_seconds:.3f}",
            ]
        )
    return buf.getvalue()


def read_history(path) -> list[EpochRecord]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [
            EpochRecord(
                int(row["epoch"]),
                float(row["train_loss"]),
                float(row["val_score"]),
                float(row["lr"]),
                TrainabilityMode(row["phase"]),
                float(row["seconds"]),
            )
            for row in csv.DictReader(fh)
        ]


def plot_history(history: Sequence[EpochRecord], directory, phase1_epochs=None):
    """Write ``loss.png`` and ``val_score.png`` curves; returns their paths."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    from matplotlib.ticker import MaxNLocator

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    epochs = [h.epoch for h in history]
    paths = []
    for key, label, name in (
        ("train_loss", "training cross-entropy", "loss.png"),
        ("validation_score", "holdout balanced accuracy", "val_score.png"),
    ):
        fig, ax = plt.subplots(figsize=(6, 4))
        ax.plot(epochs, [getattr(h, key) for h in history], marker="o")
        if phase1_epochs:
            ax.axvline(phase1_epochs + 0.5, color="grey", linestyle="--", linewidth=1, label="unfreeze")
            ax.legend()
        ax.set_xlabel("epoch")
        ax.xaxis.set_major_locator(MaxNLocator(integer=True))
        ax.set_ylabel(label)
        ax.grid(True, alpha=0.3)
        fig.tight_layout()
        fig.savefig(directory / name, dpi=100, metadata={"Software": None})
        plt.close(fig)
        paths.append(directory / name)
    return paths
