"""Training objectives with values and analytic gradients.

Four pieces: the Dirichlet-integrated cross-entropy (a digamma closed
form), a KL regularizer to the uniform Dirichlet applied to adjusted
parameters, a volumetric soft Dice loss on expected probabilities, and a
plain cross-entropy for the softmax baseline head.  Each returns a scalar
and its exact gradient; the combined objective chains everything back
through softplus to the raw logits.

The digamma/trigamma/log-gamma trio is implemented here with the usual
recurrence-plus-asymptotic-series scheme (shift the argument above 10,
then a Bernoulli-coefficient tail), accurate to well under 1e-10 relative
error over [1e-3, 1e6].  All loss math runs in float64 internally.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .subjective_logic import sigmoid, softplus
from .volume import LabelVolume, Volume

__all__ = [
    "LossConfig",
    "LossValue",
    "digamma",
    "trigamma",
    "ln_gamma",
    "ice_loss",
    "kl_to_uniform",
    "adjust_alpha",
    "soft_dice_loss",
    "cross_entropy_loss",
    "total_loss",
]

_SHIFT = 10.0  # asymptotic series are applied at arguments >= this

# Tail coefficients of psi(x) ~ ln x - 1/(2x) - sum c_n x^(-2n).
_PSI_TAIL = (
    1.0 / 12.0,
    -1.0 / 120.0,
    1.0 / 252.0,
    -1.0 / 240.0,
    1.0 / 132.0,
    -691.0 / 32760.0,
    1.0 / 12.0,
)

# Tail of psi'(x) ~ 1/x + 1/(2x^2) + sum c_n x^(-2n-1).
_TRI_TAIL = (
    1.0 / 6.0,
    -1.0 / 30.0,
    1.0 / 42.0,
    -1.0 / 30.0,
    5.0 / 66.0,
    -691.0 / 2730.0,
)

# Stirling tail of ln Gamma: sum c_n x^(-2n+1).
_LNG_TAIL = (
    1.0 / 12.0,
    -1.0 / 360.0,
    1.0 / 1260.0,
    -1.0 / 1680.0,
    1.0 / 1188.0,
    -691.0 / 360360.0,
)

_HALF_LN_2PI = 0.5 * np.log(2.0 * np.pi)


def _prepare(x) -> tuple[np.ndarray, bool]:
    scalar = np.isscalar(x) or np.ndim(x) == 0
    arr = np.asarray(x, dtype=np.float64)
    if np.any(arr <= 0.0) or not np.all(np.isfinite(arr)):
        raise ValueError("argument must be finite and > 0")
    return np.atleast_1d(arr), scalar


# The recurrences below are applied unconditionally: shifting any x > 0 up
# by 10 lands at z >= 10 where the asymptotic series are accurate to well
# below 1e-14, and the branch-free form vectorizes cleanly.


def _digamma_raw(x: np.ndarray) -> np.ndarray:
    acc = np.zeros_like(x)
    for k in range(int(_SHIFT)):  # psi(x) = psi(x+1) - 1/x
        acc += 1.0 / (x + k)
    z = x + _SHIFT
    inv2 = 1.0 / (z * z)
    tail = np.zeros_like(z)
    for c in reversed(_PSI_TAIL):
        tail = (tail + c) * inv2
    return np.log(z) - 0.5 / z - tail - acc


def _trigamma_raw(x: np.ndarray) -> np.ndarray:
    acc = np.zeros_like(x)
    for k in range(int(_SHIFT)):  # psi'(x) = psi'(x+1) + 1/x^2
        t = x + k
        acc += 1.0 / (t * t)
    z = x + _SHIFT
    inv = 1.0 / z
    inv2 = inv * inv
    tail = np.zeros_like(z)
    for c in reversed(_TRI_TAIL):
        tail = (tail + c) * inv2
    return inv + 0.5 * inv2 + tail * inv + acc


def _ln_gamma_raw(x: np.ndarray) -> np.ndarray:
    shift = x.copy()
    for k in range(1, int(_SHIFT)):  # Gamma(x+1) = x Gamma(x)
        shift *= x + k
    z = x + _SHIFT
    inv = 1.0 / z
    inv2 = inv * inv
    tail = np.zeros_like(z)
    for c in reversed(_LNG_TAIL):
        tail = tail * inv2 + c
    return (z - 0.5) * np.log(z) - z + _HALF_LN_2PI + tail * inv - np.log(shift)


def digamma(x):
    """psi(x) for x > 0; scalar in, scalar out (arrays pass through)."""
    z, scalar = _prepare(x)
    res = _digamma_raw(z)
    return float(res[0]) if scalar else res


def trigamma(x):
    """psi'(x) for x > 0, same recurrence/series scheme as :func:`digamma`."""
    z, scalar = _prepare(x)
    res = _trigamma_raw(z)
    return float(res[0]) if scalar else res


def ln_gamma(x):
    """ln Gamma(x) for x > 0 via Stirling with argument recurrence."""
    z, scalar = _prepare(x)
    res = _ln_gamma_raw(z)
    return float(res[0]) if scalar else res


@dataclass
class LossConfig:
    """Weights and constants of the combined objective."""

    lambda_p: float = 0.2
    lambda_s: float = 1.0
    dice_alpha: float = 1e-5
    dice_beta: float = 1e-5
    classes: int = 4
    kl_anneal: bool = False

    def __post_init__(self) -> None:
        if self.lambda_p < 0 or self.lambda_s < 0:
            raise ValueError("loss weights must be >= 0")
        if self.dice_alpha <= 0 or self.dice_beta <= 0:
            raise ValueError("dice smoothing constants must be > 0")
        if self.classes < 1:
            raise ValueError("classes must be >= 1")


@dataclass
class LossValue:
    """Combined objective and its three components (components unweighted)."""

    total: float
    ice: float
    kl: float
    dice: float


def _label_index(labels: LabelVolume, classes: int) -> np.ndarray:
    y = labels.data.astype(np.int64)
    if y.max(initial=0) >= classes:
        raise ValueError(
            f"label {int(y.max())} out of range for {classes} classes"
        )
    return y


def _one_hot(y: np.ndarray, classes: int) -> np.ndarray:
    out = np.zeros((classes,) + y.shape, dtype=np.float64)
    np.put_along_axis(out, y[None], 1.0, axis=0)
    return out


def _check_alpha(a: np.ndarray) -> None:
    if np.any(a < 1.0 - 1e-6):
        raise ValueError("Dirichlet parameters must be >= 1")


def _ice_raw(a: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    s = a.sum(axis=0, keepdims=True)
    a_true = np.take_along_axis(a, y[None], axis=0)
    n = a_true.size
    value = float(np.sum(_digamma_raw(s) - _digamma_raw(a_true)) / n)
    grad = np.broadcast_to(_trigamma_raw(s), a.shape).copy()
    tri_true = _trigamma_raw(a_true)
    np.put_along_axis(
        grad, y[None], np.take_along_axis(grad, y[None], axis=0) - tri_true, axis=0
    )
    return value, grad / n


def _kl_raw(at: np.ndarray) -> tuple[float, np.ndarray]:
    c = at.shape[0]
    s = at.sum(axis=0, keepdims=True)
    tri_at = _trigamma_raw(at)
    per_voxel = (
        _ln_gamma_raw(s[0])
        - _ln_gamma_raw(np.float64(c))
        - _ln_gamma_raw(at).sum(axis=0)
        + ((at - 1.0) * (_digamma_raw(at) - _digamma_raw(s))).sum(axis=0)
    )
    n = per_voxel.size
    value = float(per_voxel.sum() / n)
    # d/d at_k = (at_k - 1) psi'(at_k) - (S - C) psi'(S); the digamma terms
    # from the product rule cancel exactly.
    grad = (at - 1.0) * tri_at - (s - c) * _trigamma_raw(s)
    return value, grad / n


def _dice_raw(
    p: np.ndarray, y1h: np.ndarray, smooth_num: float, smooth_den: float
) -> tuple[float, np.ndarray]:
    c = p.shape[0]
    axes = tuple(range(1, p.ndim))
    inter = (y1h * p).sum(axis=axes)
    psum = p.sum(axis=axes)
    gsum = y1h.sum(axis=axes)
    den = gsum + psum + smooth_den
    per_class = 1.0 - (2.0 * inter + smooth_num) / den
    value = float(per_class.mean())
    shape = (c,) + (1,) * (p.ndim - 1)
    grad = (
        -2.0 * y1h / den.reshape(shape)
        + ((2.0 * inter + smooth_num) / (den * den)).reshape(shape)
    ) / c
    return value, grad


def ice_loss(alpha: Volume, labels: LabelVolume) -> tuple[float, Volume]:
    """Mean over voxels of psi(S) - psi(alpha_y), with exact gradient.

    This is the expectation of cross-entropy under Dir(alpha) in closed
    form; the gradient component for class k is
    (psi'(S) - [k == y] psi'(alpha_k)) / n_voxels.
    """
    a = alpha.data.astype(np.float64)
    _check_alpha(a)
    y = _label_index(labels, alpha.channels)
    value, grad = _ice_raw(np.maximum(a, 1.0), y)
    return value, Volume(alpha.dims, alpha.channels, grad.astype(np.float32))


def kl_to_uniform(alpha_tilde: Volume) -> tuple[float, Volume]:
    """Mean KL(Dir(alpha_tilde) || Dir(1, ..., 1)) with exact gradient."""
    at = alpha_tilde.data.astype(np.float64)
    _check_alpha(at)
    value, grad = _kl_raw(np.maximum(at, 1.0))
    return value, Volume(
        alpha_tilde.dims, alpha_tilde.channels, grad.astype(np.float32)
    )


def adjust_alpha(alpha: Volume, labels: LabelVolume) -> Volume:
    """Reset the true-class component to 1, pass the rest through.

    Keeps correctly-earned evidence out of the KL penalty so only
    misleading (wrong-class) evidence is pushed toward zero.
    """
    y = _label_index(labels, alpha.channels)
    out = alpha.data.copy()
    np.put_along_axis(out, y[None], 1.0, axis=0)
    return Volume(alpha.dims, alpha.channels, out)


def soft_dice_loss(
    prob: Volume, labels: LabelVolume, cfg: LossConfig
) -> tuple[float, Volume]:
    """Volumetric soft Dice: per-class over whole-volume sums, class-mean.

    L_n = 1 - (2 sum_v y p + a) / (sum_v y + sum_v p + b); with a == b an
    all-empty class contributes zero loss.
    """
    p = prob.data.astype(np.float64)
    if np.any(p < -1e-6) or np.any(p > 1.0 + 1e-6):
        raise ValueError("probabilities must lie in [0, 1]")
    y = _label_index(labels, prob.channels)
    y1h = _one_hot(y, prob.channels)
    value, grad = _dice_raw(p, y1h, cfg.dice_alpha, cfg.dice_beta)
    return value, Volume(prob.dims, prob.channels, grad.astype(np.float32))


def cross_entropy_loss(
    prob: Volume, labels: LabelVolume
) -> tuple[float, Volume]:
    """Mean -ln p(true class), probabilities clamped below at 1e-12."""
    p = prob.data.astype(np.float64)
    y = _label_index(labels, prob.channels)
    p_true = np.clip(np.take_along_axis(p, y[None], axis=0), 1e-12, None)
    n = p_true.size
    value = float(-np.log(p_true).sum() / n)
    grad = np.zeros_like(p)
    np.put_along_axis(grad, y[None], -1.0 / (p_true * n), axis=0)
    return value, Volume(prob.dims, prob.channels, grad.astype(np.float32))


def total_loss(
    logits: Volume,
    labels: LabelVolume,
    cfg: LossConfig,
    epoch_frac: float = 1.0,
) -> tuple[LossValue, Volume]:
    """Combined objective and its gradient with respect to the logits.

    Chains softplus evidence -> Dirichlet parameters -> integrated
    cross-entropy + lambda_p * KL(adjusted) + lambda_s * soft Dice on the
    Dirichlet mean.  With ``kl_anneal`` the KL weight is scaled by
    min(1, epoch_frac); by default the weight is constant.
    """
    if not 0.0 <= epoch_frac <= 1.0:
        raise ValueError(f"epoch_frac must be in [0, 1], got {epoch_frac}")
    if logits.channels != cfg.classes:
        raise ValueError(
            f"logits have {logits.channels} channels, config says {cfg.classes}"
        )
    x = logits.data.astype(np.float64)
    y = _label_index(labels, cfg.classes)
    y1h = _one_hot(y, cfg.classes)

    a = softplus(x) + 1.0
    s = a.sum(axis=0, keepdims=True)
    p = a / s

    ice, g_ice = _ice_raw(a, y)

    a_til = a.copy()
    np.put_along_axis(a_til, y[None], 1.0, axis=0)
    kl, g_kl = _kl_raw(a_til)
    g_kl = g_kl * (1.0 - y1h)  # adjusted true-class component is constant

    dice, g_p = _dice_raw(p, y1h, cfg.dice_alpha, cfg.dice_beta)
    # p_n = a_n / S  =>  dL/da_k = (g_k - sum_n g_n p_n) / S
    g_dice = (g_p - (g_p * p).sum(axis=0, keepdims=True)) / s

    lam_p = cfg.lambda_p * (min(1.0, epoch_frac) if cfg.kl_anneal else 1.0)
    grad_a = g_ice + lam_p * g_kl + cfg.lambda_s * g_dice
    grad_logits = grad_a * sigmoid(x)

    value = LossValue(
        total=ice + lam_p * kl + cfg.lambda_s * dice, ice=ice, kl=kl, dice=dice
    )
    return value, Volume(logits.dims, logits.channels, grad_logits.astype(np.float32))
