"""Distillation losses and their closed-form gradients w.r.t. student logits.

Inputs are either one logit vector ``(C,)`` or a batch ``(B, C)``. Losses
return a float for a single vector and a ``(B,)`` array of per-sample
values for a batch; gradients keep the input shape. Batch reduction
(the mean over samples) is left to the caller, see :func:`batch_mean`.

Pairwise terms cost O(C^2) memory and time per sample, which is fine up to
a few thousand channels.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError
from .numeric import (
    DEFAULT_NORM_EPS,
    as_logits,
    check_same_shape,
    log_softmax_with_temperature,
    softmax_with_temperature,
    zscore_backward,
    zscore_normalize,
)

PROB_FLOOR = 1e-12


class RankingForm(str, enum.Enum):
    SYMMETRIC = "symmetric"
    FORM1 = "form1"
    FORM2 = "form2"
    FORM3 = "form3"


class SubsetKind(str, enum.Enum):
    ALL = "all"
    TOP = "top"
    MIN = "min"


@dataclass(frozen=True)
class Subset:
    """Which channels take part in the ranking pairs.

    ``top``/``min`` keep the ``ceil(percent * C / 100)`` channels with the
    largest/smallest teacher logits of each sample.
    """

    kind: SubsetKind = SubsetKind.ALL
    percent: float = 100.0

    def __post_init__(self):
        object.__setattr__(self, "kind", SubsetKind(self.kind))
        if not 0 < self.percent <= 100:
            raise ConfigError(f"subset percent must be in (0, 100], got {self.percent}")

    @classmethod
    def parse(cls, text: str) -> "Subset":
        """Parse ``all``, ``top:30`` or ``min:10``."""
        text = text.strip().lower()
        if text == "all":
            return cls()
        kind, sep, pct = text.partition(":")
        if not sep or kind not in ("top", "min"):
            raise ConfigError(f"bad subset {text!r}; expected all, top:<p> or min:<p>")
        try:
            percent = float(pct)
        except ValueError:
            raise ConfigError(f"bad subset percent in {text!r}") from None
        return cls(SubsetKind(kind), percent)

    def __str__(self) -> str:
        if self.kind is SubsetKind.ALL:
            return "all"
        return f"{self.kind.value}:{self.percent:g}"

    def size(self, C: int) -> int:
        if self.kind is SubsetKind.ALL:
            return C
        # round() guards against 30*10/100 landing a hair above an integer
        return math.ceil(round(self.percent * C / 100, 9))


@dataclass(frozen=True)
class RankingConfig:
    steepness: float = 1.0
    form: RankingForm = RankingForm.SYMMETRIC
    subset: Subset = field(default_factory=Subset)
    normalize_inputs: bool = True
    norm_eps: float = DEFAULT_NORM_EPS

    def __post_init__(self):
        object.__setattr__(self, "form", RankingForm(self.form))
        if isinstance(self.subset, str):
            object.__setattr__(self, "subset", Subset.parse(self.subset))
        if not self.steepness > 0:
            raise ConfigError(f"steepness must be positive, got {self.steepness}")
        if not self.norm_eps > 0:
            raise ConfigError(f"norm_eps must be positive, got {self.norm_eps}")


@dataclass(frozen=True)
class LossWeights:
    """Weights of the KL, cross-entropy and ranking terms plus the KD temperature."""

    alpha: float = 0.9
    beta: float = 0.1
    gamma: float = 0.9
    temperature: float = 4.0
    scale_t2: bool = True

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if not self.alpha + self.beta + self.gamma > 0:
            raise ConfigError("at least one of alpha, beta, gamma must be positive")
        if not self.temperature > 0:
            raise ConfigError(f"temperature must be positive, got {self.temperature}")


@dataclass(frozen=True)
class KendallBreakdown:
    tau: float
    concordant: int
    discordant: int
    ties: int


def _scalar(x):
    return float(x) if np.ndim(x) == 0 else x


def _pair(z_t, z_s):
    z_t = as_logits(z_t, "teacher logits")
    z_s = as_logits(z_s, "student logits")
    check_same_shape(z_t, z_s)
    return z_t, z_s


def _pairwise_diff(z: np.ndarray) -> np.ndarray:
    """``D[..., i, j] = z[..., i] - z[..., j]``."""
    return z[..., :, None] - z[..., None, :]


def batch_mean(values) -> float:
    """Mean over samples, summed in sample order."""
    values = np.atleast_1d(np.asarray(values, dtype=np.float64))
    total = 0.0
    for v in values:
        total += v
    return total / len(values)


# --- KL and cross-entropy -------------------------------------------------


def kl_loss(q_t, q_s, T: float = 1.0, scale_t2: bool = True):
    """``sum q_t * log(q_t / q_s)``, times ``T**2`` when ``scale_t2``."""
    q_t = np.asarray(q_t, dtype=np.float64)
    q_s = np.asarray(q_s, dtype=np.float64)
    check_same_shape(q_t, q_s)
    if not T > 0:
        raise ValueError(f"temperature must be positive, got {T}")
    log_ratio = np.log(np.where(q_t > 0, q_t, 1.0)) - np.log(np.maximum(q_s, PROB_FLOOR))
    kl = np.where(q_t > 0, q_t * log_ratio, 0.0).sum(axis=-1)
    if scale_t2:
        kl = kl * T * T
    return _scalar(kl)


def kl_loss_from_logits(z_t, z_s, T: float = 1.0, scale_t2: bool = True):
    """KL loss computed through log-softmax; no probability clamping needed."""
    z_t, z_s = _pair(z_t, z_s)
    log_qt = log_softmax_with_temperature(z_t, T)
    log_qs = log_softmax_with_temperature(z_s, T)
    kl = (np.exp(log_qt) * (log_qt - log_qs)).sum(axis=-1)
    if scale_t2:
        kl = kl * T * T
    return _scalar(kl)


def kl_gradient(z_t, z_s, T: float = 1.0):
    """Gradient of the T^2-scaled KL loss: ``-T * (q_t - q_s)``."""
    z_t, z_s = _pair(z_t, z_s)
    return -T * (softmax_with_temperature(z_t, T) - softmax_with_temperature(z_s, T))


def _check_labels(z_s: np.ndarray, label):
    label = np.asarray(label)
    C = z_s.shape[-1]
    if label.shape != z_s.shape[:-1]:
        raise ShapeError(f"labels shape {label.shape} does not match logits {z_s.shape}")
    if not np.issubdtype(label.dtype, np.integer):
        raise IndexError("class labels must be integers")
    if np.any(label < 0) or np.any(label >= C):
        raise IndexError(f"label out of range for {C} classes")
    return label


def cross_entropy_loss(z_s, label):
    z_s = as_logits(z_s, "student logits")
    label = _check_labels(z_s, label)
    log_q = log_softmax_with_temperature(z_s, 1.0)
    return _scalar(-np.take_along_axis(log_q, label[..., None], axis=-1)[..., 0])


def ce_gradient(z_s, label):
    z_s = as_logits(z_s, "student logits")
    label = _check_labels(z_s, label)
    grad = softmax_with_temperature(z_s, 1.0)
    np.put_along_axis(grad, label[..., None], np.take_along_axis(grad, label[..., None], -1) - 1.0, -1)
    return grad


# --- Kendall's tau ------------------------------------------------------


def kendall_tau_exact(z_t, z_s) -> KendallBreakdown:
    """Exact Kendall tau over all unordered channel pairs of one sample.

    A pair with a zero difference on either side counts as a tie; the
    denominator stays ``C(C-1)/2``.
    """
    z_t = np.asarray(z_t, dtype=np.float64)
    z_s = np.asarray(z_s, dtype=np.float64)
    if z_t.ndim != 1:
        raise ShapeError("kendall_tau_exact takes single vectors; use mean_kendall_tau for batches")
    check_same_shape(z_t, z_s)
    C = z_t.shape[0]
    if C < 2:
        raise ShapeError("need at least 2 channels")
    iu = np.triu_indices(C, k=1)
    prod = (np.sign(_pairwise_diff(z_t)) * np.sign(_pairwise_diff(z_s)))[iu]
    concordant = int(np.count_nonzero(prod > 0))
    discordant = int(np.count_nonzero(prod < 0))
    pairs = C * (C - 1) // 2
    return KendallBreakdown(
        tau=(concordant - discordant) / pairs,
        concordant=concordant,
        discordant=discordant,
        ties=pairs - concordant - discordant,
    )


def kendall_tau_rows(z_t, z_s) -> np.ndarray:
    """Exact tau for each row of two ``(B, C)`` arrays."""
    z_t, z_s = _pair(np.atleast_2d(z_t), np.atleast_2d(z_s))
    C = z_t.shape[-1]
    iu = np.triu_indices(C, k=1)
    prod = np.sign(_pairwise_diff(z_t))[:, iu[0], iu[1]] * np.sign(_pairwise_diff(z_s))[:, iu[0], iu[1]]
    return prod.sum(axis=-1) / (C * (C - 1) / 2)


def diff_kendall_tau(z_t, z_s, k: float = 1.0):
    """Differentiable tau: sign replaced by ``tanh(k * .)`` on both sides."""
    if not k > 0:
        raise ValueError(f"steepness must be positive, got {k}")
    z_t, z_s = _pair(z_t, z_s)
    C = z_t.shape[-1]
    prod = np.tanh(k * _pairwise_diff(z_t)) * np.tanh(k * _pairwise_diff(z_s))
    # the full i != j sum counts every unordered pair twice
    return _scalar(prod.sum(axis=(-2, -1)) / (C * (C - 1)))


def diff_kendall_tau_expanded(z_t, z_s, k: float = 1.0):
    """Same value as :func:`diff_kendall_tau`, with ``tanh(x) = 1 - 2/(exp(2x)+1)``.

    Only pairs with ``j < i`` are visited.
    """
    z_t, z_s = _pair(z_t, z_s)
    C = z_t.shape[-1]
    il = np.tril_indices(C, k=-1)
    dt = _pairwise_diff(z_t)[..., il[0], il[1]]
    ds = _pairwise_diff(z_s)[..., il[0], il[1]]
    with np.errstate(over="ignore"):
        term = (1 - 2 / (1 + np.exp(2 * dt * k))) * (1 - 2 / (1 + np.exp(2 * ds * k)))
    return _scalar(2 / (C * (C - 1)) * term.sum(axis=-1))


# --- ranking loss -------------------------------------------------------


def select_channels(z_t: np.ndarray, subset: Subset) -> np.ndarray | None:
    """Per-row channel indices kept by ``subset`` (ascending), or None for all.

    Ranks by teacher logit; ties go to the lower channel index.
    """
    C = z_t.shape[-1]
    if subset.kind is SubsetKind.ALL:
        return None
    m = subset.size(C)
    if m < 2:
        raise ConfigError(f"subset {subset} keeps {m} of {C} channels; need at least 2")
    key = -z_t if subset.kind is SubsetKind.TOP else z_t
    order = np.argsort(key, axis=-1, kind="stable")
    return np.sort(order[..., :m], axis=-1)


def _sech2(x: np.ndarray) -> np.ndarray:
    # 1 - tanh^2 cancels to zero long before the true value underflows
    with np.errstate(over="ignore"):
        return 1.0 / np.cosh(x) ** 2


def _form_value(dt: np.ndarray, ds: np.ndarray, k: float, form: RankingForm) -> np.ndarray:
    """Pairwise similarity term for teacher/student differences ``dt``, ``ds``."""
    if form is RankingForm.FORM2:
        x = np.multiply(dt, k * k)
        x *= ds
        return np.tanh(x, out=x)
    s = np.multiply(ds, k)
    np.tanh(s, out=s)
    if form is RankingForm.FORM3:
        s *= np.sign(dt)
    else:
        t = np.multiply(dt, k)
        s *= np.tanh(t, out=t)
    return s


def _form_slope(dt: np.ndarray, ds: np.ndarray, k: float, form: RankingForm) -> np.ndarray:
    """Derivative of :func:`_form_value` w.r.t. the student difference."""
    if form in (RankingForm.SYMMETRIC, RankingForm.FORM1):
        return np.tanh(k * dt) * k * _sech2(k * ds)
    if form is RankingForm.FORM2:
        kk = k * k
        return kk * dt * _sech2(kk * dt * ds)
    return np.sign(dt) * k * _sech2(k * ds)


def _row_sum(x: np.ndarray) -> np.ndarray:
    # numpy's reduction order follows memory layout; a C-contiguous row sums
    # exactly like a lone 1-D sample, keeping batches bitwise equal to singles
    return np.ascontiguousarray(x).sum(axis=-1)


def _pair_diffs(z: np.ndarray) -> np.ndarray:
    """``z[..., j] - z[..., i]`` for every unordered pair ``i < j``, row by row."""
    C = z.shape[-1]
    out = np.empty(z.shape[:-1] + (C * (C - 1) // 2,))
    start = 0
    for i in range(C - 1):
        stop = start + C - 1 - i
        np.subtract(z[..., i + 1 :], z[..., i : i + 1], out=out[..., start:stop])
        start = stop
    return out


def _prepare(z_t, z_s, cfg: RankingConfig):
    z_t, z_s = _pair(z_t, z_s)
    zt_in, zs_in = z_t, z_s
    if cfg.normalize_inputs:
        zt_in = zscore_normalize(z_t, cfg.norm_eps)
        zs_in = zscore_normalize(z_s, cfg.norm_eps)
    idx = select_channels(z_t, cfg.subset)
    if idx is not None:
        zt_in = np.take_along_axis(zt_in, idx, axis=-1)
        zs_in = np.take_along_axis(zs_in, idx, axis=-1)
    return z_t, z_s, zt_in, zs_in, idx


def ranking_loss(z_t, z_s, cfg: RankingConfig = RankingConfig()):
    """Negative differentiable rank similarity between teacher and student.

    Normalization (when enabled) is applied to the full logit vectors; the
    subset is then taken from the normalized values.
    """
    _, _, zt, zs, _ = _prepare(z_t, z_s, cfg)
    m = zt.shape[-1]
    terms = _form_value(_pair_diffs(zt), _pair_diffs(zs), cfg.steepness, cfg.form)
    return _scalar(-_row_sum(terms) / (m * (m - 1) / 2))


def ranking_gradient(z_t, z_s, cfg: RankingConfig = RankingConfig()):
    """Gradient of :func:`ranking_loss` w.r.t. the (raw) student logits.

    For the symmetric form without normalization or subsets this is

        dL/dz_i = -(2k / (C(C-1))) * sum_{j != i} (1 - tanh^2(k ds_ij)) tanh(k dt_ij)

    The factor 2 appears because channel i takes part in C-1 unordered pairs
    and each contributes once.
    """
    z_t, z_s, zt, zs, idx = _prepare(z_t, z_s, cfg)
    m = zt.shape[-1]
    # every term is symmetric in (i, j), so the slope matrix is too
    dterm = _form_slope(_pairwise_diff(zt), _pairwise_diff(zs), cfg.steepness, cfg.form)
    grad = -2.0 * _row_sum(dterm) / (m * (m - 1))
    if idx is not None:
        full = np.zeros_like(z_s)
        np.put_along_axis(full, idx, grad, axis=-1)
        grad = full
    if cfg.normalize_inputs:
        grad = zscore_backward(z_s, grad, cfg.norm_eps)
    return grad


# --- combined objective -------------------------------------------------


def combined_loss(z_t, z_s, label, w: LossWeights = LossWeights(), cfg: RankingConfig = RankingConfig()):
    """Weighted sum of KL, cross-entropy and ranking terms.

    Returns ``(total, {"kl": ..., "ce": ..., "rk": ...})`` where each part
    is the unweighted term. The KL term sees raw logits through the
    temperature softmax; the ranking term applies its own normalization.
    """
    z_t, z_s = _pair(z_t, z_s)
    parts = {
        "kl": kl_loss(
            softmax_with_temperature(z_t, w.temperature),
            softmax_with_temperature(z_s, w.temperature),
            w.temperature,
            w.scale_t2,
        ),
        "ce": cross_entropy_loss(z_s, label),
        "rk": ranking_loss(z_t, z_s, cfg),
    }
    total = w.alpha * parts["kl"] + w.beta * parts["ce"] + w.gamma * parts["rk"]
    return total, parts


def combined_gradient(z_t, z_s, label, w: LossWeights = LossWeights(), cfg: RankingConfig = RankingConfig()):
    """Gradient of :func:`combined_loss` w.r.t. student logits.

    Terms with zero weight are skipped entirely.
    """
    z_t, z_s = _pair(z_t, z_s)
    grad = np.zeros_like(z_s)
    if w.alpha:
        g = kl_gradient(z_t, z_s, w.temperature)
        if not w.scale_t2:
            g = g / (w.temperature * w.temperature)
        grad = grad + w.alpha * g
    if w.beta:
        grad = grad + w.beta * ce_gradient(z_s, label)
    if w.gamma:
        grad = grad + w.gamma * ranking_gradient(z_t, z_s, cfg)
    return grad


@dataclass(frozen=True)
class ProfileRow:
    channel: int
    q_t: float
    abs_kl_grad: float
    abs_rk_grad: float


def gradient_profile(z_t, z_s, w: LossWeights = LossWeights(), cfg: RankingConfig = RankingConfig()) -> list[ProfileRow]:
    """Per-channel |KL gradient| and |ranking gradient|, sorted by teacher probability.

    Gradients are of the unweighted terms; only ``w.temperature`` and
    ``w.scale_t2`` are used.
    """
    z_t, z_s = _pair(z_t, z_s)
    if z_t.ndim != 1:
        raise ShapeError("gradient_profile takes single vectors")
    q_t = softmax_with_temperature(z_t, w.temperature)
    kl = kl_gradient(z_t, z_s, w.temperature)
    if not w.scale_t2:
        kl = kl / (w.temperature * w.temperature)
    rk = ranking_gradient(z_t, z_s, cfg)
    order = np.argsort(-q_t, kind="stable")
    return [ProfileRow(int(i), float(q_t[i]), float(abs(kl[i])), float(abs(rk[i]))) for i in order]


def spread_ratio(values) -> float:
    """max/min of absolute values; inf when the minimum is zero."""
    a = np.abs(np.asarray(values, dtype=np.float64))
    lo = a.min()
    return float("inf") if lo == 0 else float(a.max() / lo)
