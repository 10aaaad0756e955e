"""Per-voxel evidence, Dirichlet parameters, belief and uncertainty masses.

Raw network outputs (logits) are mapped through softplus to non-negative
evidence e, which parameterizes a Dirichlet via alpha = e + 1.  With C
classes and strength S = sum(alpha), each voxel carries belief masses
b_n = (alpha_n - 1) / S and an uncertainty mass u = C / S, so that
sum(b) + u = 1 exactly.  The expected class probabilities are the
Dirichlet mean alpha / S.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .volume import LabelVolume, Volume

__all__ = [
    "DirichletField",
    "Opinion",
    "evidence_from_logits",
    "dirichlet_from_evidence",
    "expected_probability",
    "argmax_class",
    "softplus",
    "sigmoid",
]


def softplus(x: np.ndarray) -> np.ndarray:
    """Overflow-safe ln(1 + exp(x)) = max(x, 0) + log1p(exp(-|x|))."""
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def sigmoid(x: np.ndarray) -> np.ndarray:
    """Derivative of softplus; evaluated branch-wise to avoid overflow."""
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@dataclass
class DirichletField:
    """Per-voxel Dirichlet parameters with derived masses, stored explicitly.

    ``alpha`` has C channels with every component >= 1, ``strength`` is the
    single-channel sum S, ``belief`` the C-channel mass (alpha - 1) / S and
    ``uncertainty`` the single-channel C / S.
    """

    alpha: Volume
    strength: Volume
    belief: Volume
    uncertainty: Volume
    classes: int


@dataclass
class Opinion:
    """One voxel's masses: beliefs, uncertainty, and expected probabilities."""

    belief: np.ndarray
    uncertainty: float
    expected_prob: np.ndarray


def evidence_from_logits(logits: Volume) -> Volume:
    """Elementwise softplus; output is non-negative evidence."""
    e = softplus(logits.data.astype(np.float64)).astype(np.float32)
    return Volume(dims=logits.dims, channels=logits.channels, data=e)


def dirichlet_from_evidence(e: Volume) -> DirichletField:
    """alpha = e + 1, S = sum(alpha), b = (alpha - 1) / S, u = C / S."""
    if np.any(e.data < 0):
        raise ValueError("evidence must be non-negative")
    c = e.channels
    alpha = e.data.astype(np.float64) + 1.0
    strength = alpha.sum(axis=0, keepdims=True)
    belief = (alpha - 1.0) / strength
    uncertainty = c / strength
    mk = lambda a, ch: Volume(dims=e.dims, channels=ch, data=a.astype(np.float32))
    return DirichletField(
        alpha=mk(alpha, c),
        strength=mk(strength, 1),
        belief=mk(belief, c),
        uncertainty=mk(uncertainty, 1),
        classes=c,
    )


def expected_probability(d: DirichletField) -> Volume:
    """Dirichlet mean alpha / S; a probability vector per voxel."""
    p = d.alpha.data.astype(np.float64) / d.strength.data.astype(np.float64)
    return Volume(dims=d.alpha.dims, channels=d.classes, data=p.astype(np.float32))


def argmax_class(p: Volume) -> LabelVolume:
    """Hard per-voxel class; ties break to the smallest index."""
    if p.channels < 2:
        raise ValueError("argmax_class needs at least 2 channels")
    idx = np.argmax(p.data, axis=0).astype(np.uint8)
    return LabelVolume(dims=p.dims, data=idx)


def opinion_at(d: DirichletField, x: int, y: int, z: int) -> Opinion:
    """Scalar view of one voxel's opinion."""
    alpha = d.alpha.data[:, z, y, x].astype(np.float64)
    s = alpha.sum()
    return Opinion(
        belief=(alpha - 1.0) / s,
        uncertainty=d.classes / s,
        expected_prob=alpha / s,
    )
