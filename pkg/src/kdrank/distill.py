"""Teacher training, student distillation, evaluation and ablation sweeps."""
from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import losses
from .data import DatasetSpec, Split, generate_dataset
from .errors import ConfigError, SweepError, TrainingError
from .losses import LossWeights, RankingConfig, Subset
from .nn import Mlp, SgdConfig, backward, forward, init_mlp, mlp_specs, sgd_step

log = logging.getLogger(__name__)

METRICS_HEADER = "epoch,split,total_loss,kl_loss,ce_loss,rk_loss,accuracy,mean_exact_tau"
SWEEP_AXES = ("gamma", "k", "temperature", "subset")


@dataclass(frozen=True)
class RunConfig:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    teacher_hidden: tuple[int, ...] = (256, 256)
    student_hidden: tuple[int, ...] = (32,)
    teacher_sgd: SgdConfig = field(
        default_factory=lambda: SgdConfig(learning_rate=0.1, weight_decay=0.0, epochs=100, seed=0)
    )
    student_sgd: SgdConfig = field(default_factory=lambda: SgdConfig(learning_rate=0.05, epochs=80, seed=1))
    weights: LossWeights = field(default_factory=LossWeights)
    ranking: RankingConfig = field(default_factory=RankingConfig)
    eval_every: int = 1

    def __post_init__(self):
        if self.eval_every < 1:
            raise ConfigError("eval_every must be positive")
        object.__setattr__(self, "teacher_hidden", tuple(self.teacher_hidden))
        object.__setattr__(self, "student_hidden", tuple(self.student_hidden))

    def teacher_arch(self):
        return mlp_specs(self.dataset.input_dim, self.teacher_hidden, self.dataset.num_classes)

    def student_arch(self):
        return mlp_specs(self.dataset.input_dim, self.student_hidden, self.dataset.num_classes)


@dataclass(frozen=True)
class MetricsRow:
    epoch: int
    split: str
    total_loss: float
    kl_loss: float
    ce_loss: float
    rk_loss: float
    accuracy: float
    mean_exact_tau: float | None = None

    def validate(self) -> None:
        if self.split not in ("train", "test"):
            raise ValueError(f"split must be train or test, got {self.split!r}")
        for name in ("total_loss", "kl_loss", "ce_loss", "rk_loss"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} is not finite in epoch {self.epoch}")
        if not 0 <= self.accuracy <= 1:
            raise ValueError(f"accuracy {self.accuracy} outside [0, 1]")
        if self.mean_exact_tau is not None and not -1 <= self.mean_exact_tau <= 1:
            raise ValueError(f"mean_exact_tau {self.mean_exact_tau} outside [-1, 1]")

    def to_csv(self) -> str:
        tau = "nan" if self.mean_exact_tau is None else f"{self.mean_exact_tau:.9g}"
        nums = (self.total_loss, self.kl_loss, self.ce_loss, self.rk_loss, self.accuracy)
        return ",".join([str(self.epoch), self.split, *(f"{v:.9g}" for v in nums), tau])


def format_metrics(rows: list[MetricsRow]) -> str:
    for row in rows:
        row.validate()
    return "\n".join([METRICS_HEADER, *(r.to_csv() for r in rows)]) + "\n"


def write_metrics(rows: list[MetricsRow], path) -> None:
    path = Path(path)
    text = format_metrics(rows)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


def read_metrics(path) -> list[MetricsRow]:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != METRICS_HEADER:
        raise ValueError(f"{path}: missing or wrong metrics header")
    rows = []
    for line in lines[1:]:
        epoch, split, *nums = line.split(",")
        vals = [float(v) for v in nums]
        tau = None if math.isnan(vals[5]) else vals[5]
        rows.append(MetricsRow(int(epoch), split, *vals[:5], tau))
    return rows


# --- evaluation -----------------------------------------------------------


def _batched_logits(model: Mlp, x: np.ndarray, chunk: int = 4096) -> np.ndarray:
    return np.concatenate([model.predict(x[i : i + chunk]) for i in range(0, len(x), chunk)])


def _check_compatible(model: Mlp, split: Split, role: str) -> None:
    if split.x.ndim != 2 or split.x.shape[1] != model.input_dim:
        raise ConfigError(f"{role} expects {model.input_dim} features, data has shape {split.x.shape}")
    if len(split) and split.y.max() >= model.output_dim:
        raise ConfigError(f"{role} has {model.output_dim} outputs but data has label {split.y.max()}")


def evaluate_logits(
    logits: np.ndarray,
    labels: np.ndarray,
    teacher_logits: np.ndarray | None = None,
    weights: LossWeights = LossWeights(),
    ranking: RankingConfig = RankingConfig(),
    epoch: int = 0,
    split: str = "test",
) -> MetricsRow:
    if len(labels) == 0:
        raise ValueError("cannot evaluate an empty split")
    accuracy = float(np.mean(np.argmax(logits, axis=1) == labels))
    ce = losses.batch_mean(losses.cross_entropy_loss(logits, labels))
    if teacher_logits is None:
        return MetricsRow(epoch, split, ce, 0.0, ce, 0.0, accuracy, None)
    _, parts = losses.combined_loss(teacher_logits, logits, labels, weights, ranking)
    kl = losses.batch_mean(parts["kl"])
    rk = losses.batch_mean(parts["rk"])
    total = weights.alpha * kl + weights.beta * ce + weights.gamma * rk
    tau = losses.batch_mean(losses.kendall_tau_rows(teacher_logits, logits))
    return MetricsRow(epoch, split, total, kl, ce, rk, accuracy, tau)


def evaluate(
    model: Mlp,
    split: Split,
    teacher: Mlp | None = None,
    weights: LossWeights = LossWeights(),
    ranking: RankingConfig = RankingConfig(),
    epoch: int = 0,
    split_name: str = "test",
) -> MetricsRow:
    """Accuracy and losses of ``model`` on ``split``.

    With a teacher the row also carries KL/ranking losses and the mean exact
    Kendall tau between teacher and model logits; without one, only
    cross-entropy is reported and tau is absent.
    """
    if len(split) == 0:
        raise ValueError("cannot evaluate an empty split")
    _check_compatible(model, split, "model")
    teacher_logits = None
    if teacher is not None:
        _check_compatible(teacher, split, "teacher")
        if teacher.output_dim != model.output_dim:
            raise ConfigError("teacher and model have different numbers of classes")
        teacher_logits = _batched_logits(teacher, split.x)
    return evaluate_logits(_batched_logits(model, split.x), split.y, teacher_logits, weights, ranking, epoch, split_name)


# --- training -------------------------------------------------------------


def _train(model, train, test, sgd, grad_fn, loss_fn, eval_fn, eval_every, role):
    rows = [eval_fn(0, "train"), eval_fn(0, "test")]
    rng = np.random.default_rng([sgd.seed, 3])
    state = None
    n = len(train)
    for epoch in range(1, sgd.epochs + 1):
        perm = rng.permutation(n)
        for start in range(0, n, sgd.batch_size):
            idx = perm[start : start + sgd.batch_size]
            logits, cache = forward(model, train.x[idx])
            loss = loss_fn(idx, logits) if np.all(np.isfinite(logits)) else math.nan
            if not math.isfinite(loss):
                raise TrainingError(f"{role} loss became non-finite in epoch {epoch}", epoch)
            grad = grad_fn(idx, logits) / len(idx)
            state = sgd_step(model, backward(model, cache, grad), sgd, state)
        if epoch % eval_every == 0 or epoch == sgd.epochs:
            rows += [eval_fn(epoch, "train"), eval_fn(epoch, "test")]
            log.debug("%s epoch %d: test acc %.4f", role, epoch, rows[-1].accuracy)
    return rows


def train_teacher(cfg: RunConfig, data: tuple[Split, Split] | None = None) -> tuple[Mlp, list[MetricsRow]]:
    """Train the teacher with cross-entropy only."""
    train, test = data if data is not None else generate_dataset(cfg.dataset)
    model = init_mlp(cfg.teacher_arch(), cfg.teacher_sgd.seed)
    splits = {"train": train, "test": test}

    def eval_fn(epoch, name):
        return evaluate(model, splits[name], epoch=epoch, split_name=name)

    rows = _train(
        model,
        train,
        test,
        cfg.teacher_sgd,
        grad_fn=lambda idx, z: losses.ce_gradient(z, train.y[idx]),
        loss_fn=lambda idx, z: losses.batch_mean(losses.cross_entropy_loss(z, train.y[idx])),
        eval_fn=eval_fn,
        eval_every=cfg.eval_every,
        role="teacher",
    )
    return model, rows


def distill_student(
    cfg: RunConfig,
    teacher: Mlp,
    data: tuple[Split, Split] | None = None,
    student: Mlp | None = None,
) -> tuple[Mlp, list[MetricsRow]]:
    """Distill a fresh student (or ``student``, trained in place) from a frozen teacher.

    Teacher logits are computed once per sample; no gradient reaches the
    teacher. The KL term sees raw logits at temperature T, the ranking term
    applies its own z-score normalization when enabled.
    """
    train, test = data if data is not None else generate_dataset(cfg.dataset)
    for split in (train, test):
        _check_compatible(teacher, split, "teacher")
    if student is None:
        student = init_mlp(cfg.student_arch(), cfg.student_sgd.seed)
    _check_compatible(student, train, "student")
    if student.output_dim != teacher.output_dim:
        raise ConfigError("teacher and student have different numbers of classes")

    teacher_logits = {"train": _batched_logits(teacher, train.x), "test": _batched_logits(teacher, test.x)}
    splits = {"train": train, "test": test}
    w, rk = cfg.weights, cfg.ranking

    def eval_fn(epoch, name):
        s = splits[name]
        return evaluate_logits(_batched_logits(student, s.x), s.y, teacher_logits[name], w, rk, epoch, name)

    def loss_fn(idx, z):
        total, _ = losses.combined_loss(teacher_logits["train"][idx], z, train.y[idx], w, rk)
        return losses.batch_mean(total)

    def grad_fn(idx, z):
        return losses.combined_gradient(teacher_logits["train"][idx], z, train.y[idx], w, rk)

    rows = _train(student, train, test, cfg.student_sgd, grad_fn, loss_fn, eval_fn, cfg.eval_every, "student")
    return student, rows


# --- sweeps ---------------------------------------------------------------


def apply_axis(cfg: RunConfig, axis: str, value) -> RunConfig:
    """Copy of ``cfg`` with one sweep axis set to ``value``."""
    if axis == "gamma":
        return dataclasses.replace(cfg, weights=dataclasses.replace(cfg.weights, gamma=float(value)))
    if axis == "k":
        return dataclasses.replace(cfg, ranking=dataclasses.replace(cfg.ranking, steepness=float(value)))
    if axis == "temperature":
        return dataclasses.replace(cfg, weights=dataclasses.replace(cfg.weights, temperature=float(value)))
    if axis == "subset":
        subset = value if isinstance(value, Subset) else Subset.parse(str(value))
        return dataclasses.replace(cfg, ranking=dataclasses.replace(cfg.ranking, subset=subset))
    raise ConfigError(f"unknown sweep axis {axis!r}; choose from {', '.join(SWEEP_AXES)}")


@dataclass(frozen=True)
class SweepPoint:
    value: object
    rows: list[MetricsRow]

    @property
    def final(self) -> MetricsRow:
        return [r for r in self.rows if r.split == "test"][-1]


def sweep(
    base: RunConfig,
    axis: str,
    values,
    teacher: Mlp | None = None,
    data: tuple[Split, Split] | None = None,
) -> list[SweepPoint]:
    """Distill one student per value of ``axis``; the teacher is trained once if not given."""
    values = list(values)
    if not values:
        raise ConfigError("sweep needs at least one value")
    if axis not in SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}; choose from {', '.join(SWEEP_AXES)}")
    data = data if data is not None else generate_dataset(base.dataset)
    if teacher is None:
        teacher, _ = train_teacher(base, data)
    points = []
    for value in values:
        try:
            _, rows = distill_student(apply_axis(base, axis, value), teacher, data)
        except Exception as exc:
            raise SweepError(value, exc) from exc
        points.append(SweepPoint(value, rows))
    return points
