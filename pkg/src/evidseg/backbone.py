"""A tiny fixed 3D convolutional voxel segmenter with two heads.

Architecture (fixed): 3x3x3 conv 4->16 (pad 1) + ReLU, 3x3x3 conv 16->16
(pad 1) + ReLU, 1x1x1 conv 16->4.  No downsampling: at phantom scale a
receptive field of 5 voxels is enough, which keeps the whole network at
8,740 parameters and removes any resampling machinery.  The evidential
head emits raw logits (evidence mapping is the caller's job); the softmax
head emits per-voxel probabilities.

Everything is deterministic: He-uniform init from the counter-based Rng,
per-epoch shuffles from the same stream, serial Adam updates.  Parameters
are stored in 32-bit; all forward/backward arithmetic runs in float64 so
finite-difference checks pass at tight tolerance.

Checkpoints serialize to the EVCK format: magic "EVCK", version u32=1,
head tag u8 (0 evidential, 1 softmax), parameter count u64, parameters,
then Adam first and second moments, all 32-bit little-endian reals in the
canonical order conv1-weights, conv1-bias, conv2-weights, conv2-bias,
conv3-weights, conv3-bias (C-order ravel each), then epoch u32.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .losses import LossConfig, LossValue, _dice_raw, _ice_raw, _kl_raw, _one_hot
from .subjective_logic import sigmoid, softplus
from .volio import FormatError, atomic_write_bytes
from .volume import LabelVolume, Rng, Volume

__all__ = [
    "TinyNet",
    "TrainConfig",
    "Checkpoint",
    "PARAM_COUNT",
    "init_params",
    "forward",
    "backward",
    "train",
    "predict",
    "save_checkpoint",
    "load_checkpoint",
]

IN_CHANNELS = 4
HIDDEN = 16
CLASSES = 4

# (name, shape) in canonical flat order
_PARAM_SHAPES = (
    ("w1", (HIDDEN, IN_CHANNELS, 3, 3, 3)),
    ("b1", (HIDDEN,)),
    ("w2", (HIDDEN, HIDDEN, 3, 3, 3)),
    ("b2", (HIDDEN,)),
    ("w3", (CLASSES, HIDDEN, 1, 1, 1)),
    ("b3", (CLASSES,)),
)

PARAM_COUNT = sum(int(np.prod(s)) for _, s in _PARAM_SHAPES)  # 8,740

HEADS = ("evidential", "softmax")


@dataclass
class TinyNet:
    """Parameters (float32) plus the head selector."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    w3: np.ndarray
    b3: np.ndarray
    head: str = "evidential"

    def __post_init__(self) -> None:
        if self.head not in HEADS:
            raise ValueError(f"head must be one of {HEADS}, got {self.head!r}")
        for name, shape in _PARAM_SHAPES:
            arr = np.ascontiguousarray(getattr(self, name), dtype=np.float32)
            if arr.shape != shape:
                raise ValueError(f"{name} must have shape {shape}, got {arr.shape}")
            setattr(self, name, arr)

    def flat(self) -> np.ndarray:
        """Parameters in canonical order as one float32 vector."""
        return np.concatenate(
            [getattr(self, name).reshape(-1) for name, _ in _PARAM_SHAPES]
        )

    @classmethod
    def from_flat(cls, flat: np.ndarray, head: str) -> "TinyNet":
        flat = np.asarray(flat, dtype=np.float32).reshape(-1)
        if flat.size != PARAM_COUNT:
            raise ValueError(f"expected {PARAM_COUNT} parameters, got {flat.size}")
        pieces = {}
        off = 0
        for name, shape in _PARAM_SHAPES:
            n = int(np.prod(shape))
            pieces[name] = flat[off : off + n].reshape(shape).copy()
            off += n
        return cls(head=head, **pieces)


@dataclass
class TrainConfig:
    """Adam optimizer and schedule settings."""

    learning_rate: float = 0.002
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 60
    batch_size: int = 2
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    poly_lr: bool = False  # lr * (1 - iter/max_iter)^0.9 when on
    head: str = "evidential"

    def __post_init__(self) -> None:
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.head not in HEADS:
            raise ValueError(f"head must be one of {HEADS}, got {self.head!r}")


@dataclass
class Checkpoint:
    """Trained parameters, Adam state, epoch, and in-memory loss history.

    The loss history is not part of the on-disk EVCK payload; a reloaded
    checkpoint carries an empty history.
    """

    head: str
    params: np.ndarray
    adam_m: np.ndarray
    adam_v: np.ndarray
    epoch: int
    loss_history: list = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.head not in HEADS:
            raise ValueError(f"head must be one of {HEADS}, got {self.head!r}")
        for name in ("params", "adam_m", "adam_v"):
            arr = np.ascontiguousarray(getattr(self, name), dtype=np.float32).reshape(-1)
            if arr.size != PARAM_COUNT:
                raise ValueError(f"{name} must have {PARAM_COUNT} entries, got {arr.size}")
            setattr(self, name, arr)

    def net(self) -> TinyNet:
        return TinyNet.from_flat(self.params, self.head)


def init_params(rng: Rng, head: str = "evidential") -> TinyNet:
    """He-uniform weights (uniform in +-sqrt(6/fan_in)), zero biases."""
    pieces = {}
    for name, shape in _PARAM_SHAPES:
        if name.startswith("b"):
            pieces[name] = np.zeros(shape, dtype=np.float32)
        else:
            fan_in = int(np.prod(shape[1:]))
            bound = np.sqrt(6.0 / fan_in)
            n = int(np.prod(shape))
            pieces[name] = (
                rng.uniform(-bound, bound, n).astype(np.float32).reshape(shape)
            )
    return TinyNet(head=head, **pieces)


def _im2col(x: np.ndarray) -> np.ndarray:
    """Unfold 3x3x3 same-padding windows into a (Cin*27, N) matrix.

    Row order is (channel, dz, dy, dx) C-order, matching the raveled
    weight layout, so every conv becomes one contiguous matmul.
    """
    cin, z, y, xd = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (1, 1)))
    win = sliding_window_view(xp, (3, 3, 3), axis=(1, 2, 3))  # (Cin,Z,Y,X,3,3,3)
    return win.transpose(0, 4, 5, 6, 1, 2, 3).reshape(cin * 27, z * y * xd)


def _col2im(grad_cols: np.ndarray, cin: int, shape) -> np.ndarray:
    """Adjoint of :func:`_im2col`: scatter-add the 27 taps back."""
    z, y, x = shape
    gc = grad_cols.reshape(cin, 3, 3, 3, z, y, x)
    gp = np.zeros((cin, z + 2, y + 2, x + 2), dtype=grad_cols.dtype)
    for dz in range(3):
        for dy in range(3):
            for dx in range(3):
                gp[:, dz : dz + z, dy : dy + y, dx : dx + x] += gc[:, dz, dy, dx]
    return gp[:, 1 : z + 1, 1 : y + 1, 1 : x + 1]


def _softmax(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=0, keepdims=True)
    e = np.exp(logits - m)
    return e / e.sum(axis=0, keepdims=True)


def _check_input(v: Volume) -> None:
    if v.channels != IN_CHANNELS:
        raise ValueError(f"input must have {IN_CHANNELS} channels, got {v.channels}")
    if min(v.dims) < 3:
        raise ValueError(f"dims must be >= 3 on every axis, got {v.dims}")


def _forward_cache(
    net: TinyNet,
    x: np.ndarray,
    identity_activation: bool = False,
    dtype=np.float64,
):
    """Forward pass returning logits and every intermediate.

    The unfolded column matrices are kept in the cache so the backward
    pass reuses them for the weight gradients.  ``dtype`` selects the
    matmul precision: float64 for the reference/evaluation path, float32
    inside the training loop where gradient noise of ~1e-6 relative is
    irrelevant and throughput doubles.
    """
    shape = x.shape[1:]
    x = x.astype(dtype, copy=False)
    cols1 = _im2col(x)
    w1 = net.w1.astype(dtype).reshape(HIDDEN, -1)
    a1 = w1 @ cols1 + net.b1.astype(dtype)[:, None]
    r1 = a1 if identity_activation else np.maximum(a1, 0.0)
    cols2 = _im2col(r1.reshape(HIDDEN, *shape))
    w2 = net.w2.astype(dtype).reshape(HIDDEN, -1)
    a2 = w2 @ cols2 + net.b2.astype(dtype)[:, None]
    r2 = a2 if identity_activation else np.maximum(a2, 0.0)
    w3 = net.w3.astype(dtype).reshape(CLASSES, HIDDEN)
    flat_logits = w3 @ r2 + net.b3.astype(dtype)[:, None]
    logits = flat_logits.reshape(CLASSES, *shape).astype(np.float64)
    return logits, (shape, cols1, a1, cols2, a2, r2)


def _backward_cache(
    net: TinyNet, cache, grad_logits: np.ndarray, identity_activation: bool = False
) -> np.ndarray:
    """Parameter gradients (canonical flat order, float64) from dL/dlogits.

    Runs at the precision of the cached forward (the cache dtype)."""
    shape, cols1, a1, cols2, a2, r2 = cache
    dtype = cols1.dtype
    g3 = grad_logits.reshape(CLASSES, -1).astype(dtype, copy=False)
    w3 = net.w3.astype(dtype).reshape(CLASSES, HIDDEN)
    w2 = net.w2.astype(dtype).reshape(HIDDEN, -1)

    g_b3 = g3.sum(axis=1)
    g_w3 = g3 @ r2.T
    g_r2 = w3.T @ g3

    g_a2 = g_r2 if identity_activation else g_r2 * (a2 > 0.0)
    g_b2 = g_a2.sum(axis=1)
    g_w2 = g_a2 @ cols2.T
    g_r1 = _col2im(w2.T @ g_a2, HIDDEN, shape).reshape(HIDDEN, -1)

    g_a1 = g_r1 if identity_activation else g_r1 * (a1 > 0.0)
    g_b1 = g_a1.sum(axis=1)
    g_w1 = g_a1 @ cols1.T

    return np.concatenate(
        [
            g_w1.reshape(-1),
            g_b1,
            g_w2.reshape(-1),
            g_b2,
            g_w3.reshape(-1),
            g_b3,
        ]
    ).astype(np.float64)


def forward(net: TinyNet, input: Volume, identity_activation: bool = False) -> Volume:
    """Run the network; evidential head returns logits, softmax head probs.

    ``identity_activation`` replaces both ReLUs with the identity; it
    exists purely as a linearity test hook.
    """
    _check_input(input)
    logits, _ = _forward_cache(
        net, input.data.astype(np.float64), identity_activation
    )
    out = _softmax(logits) if net.head == "softmax" else logits
    return Volume(input.dims, CLASSES, out.astype(np.float32))


def backward(
    net: TinyNet,
    input: Volume,
    grad_output: Volume,
    identity_activation: bool = False,
) -> np.ndarray:
    """Exact parameter gradients for the scalar loss behind ``grad_output``.

    ``grad_output`` is the loss gradient with respect to this network's
    ``forward`` output: logits for the evidential head, probabilities for
    the softmax head (the softmax Jacobian is applied here).  Returns a
    float64 vector in canonical parameter order.
    """
    _check_input(input)
    if grad_output.channels != CLASSES or grad_output.dims != input.dims:
        raise ValueError(
            f"grad_output must be ({CLASSES}, dims of input), got "
            f"{grad_output.channels} channels, dims {grad_output.dims}"
        )
    logits, cache = _forward_cache(
        net, input.data.astype(np.float64), identity_activation
    )
    g = grad_output.data.astype(np.float64)
    if net.head == "softmax":
        p = _softmax(logits)
        g = p * (g - (g * p).sum(axis=0, keepdims=True))
    return _backward_cache(net, cache, g, identity_activation)


def _loss_and_grad_logits(
    logits: np.ndarray, y: np.ndarray, cfg: LossConfig, head: str, epoch_frac: float
) -> tuple[LossValue, np.ndarray]:
    """Training objective per head, computed on float64 logits.

    Evidential: integrated CE + lambda_p KL(adjusted) + lambda_s Dice on
    the Dirichlet mean.  Softmax: plain CE + lambda_s Dice on softmax
    probabilities (the baseline has no evidence terms; kl is reported 0
    and the ce value rides in the ``ice`` slot of LossValue).
    """
    y1h = _one_hot(y, CLASSES)
    if head == "evidential":
        a = softplus(logits) + 1.0
        s = a.sum(axis=0, keepdims=True)
        p = a / s
        ice, g_ice = _ice_raw(a, y)
        a_til = a.copy()
        np.put_along_axis(a_til, y[None], 1.0, axis=0)
        kl, g_kl = _kl_raw(a_til)
        g_kl = g_kl * (1.0 - y1h)
        dice, g_p = _dice_raw(p, y1h, cfg.dice_alpha, cfg.dice_beta)
        g_dice = (g_p - (g_p * p).sum(axis=0, keepdims=True)) / s
        lam_p = cfg.lambda_p * (min(1.0, epoch_frac) if cfg.kl_anneal else 1.0)
        grad_logits = (g_ice + lam_p * g_kl + cfg.lambda_s * g_dice) * sigmoid(logits)
        return (
            LossValue(ice + lam_p * kl + cfg.lambda_s * dice, ice, kl, dice),
            grad_logits,
        )
    p = _softmax(logits)
    n = y.size
    p_true = np.clip(np.take_along_axis(p, y[None], axis=0), 1e-12, None)
    ce = float(-np.log(p_true).sum() / n)
    g_ce = np.zeros_like(p)
    np.put_along_axis(g_ce, y[None], -1.0 / (p_true * n), axis=0)
    dice, g_dice_p = _dice_raw(p, y1h, cfg.dice_alpha, cfg.dice_beta)
    g_p = g_ce + cfg.lambda_s * g_dice_p
    grad_logits = p * (g_p - (g_p * p).sum(axis=0, keepdims=True))
    return LossValue(ce + cfg.lambda_s * dice, ce, 0.0, dice), grad_logits


def _sample_loss_grad(
    net: TinyNet,
    image: Volume,
    labels: LabelVolume,
    cfg: LossConfig,
    epoch_frac: float,
    dtype=np.float64,
) -> tuple[LossValue, np.ndarray]:
    """Loss and flat parameter gradient for one sample.

    The loss itself is always evaluated in float64 from the (possibly
    float32-computed) logits; ``dtype`` only selects conv precision.
    """
    logits, cache = _forward_cache(net, image.data, dtype=dtype)
    y = labels.data.astype(np.int64)
    value, grad_logits = _loss_and_grad_logits(logits, y, cfg, net.head, epoch_frac)
    return value, _backward_cache(net, cache, grad_logits)


def train(
    dataset: list[tuple[Volume, LabelVolume]],
    cfg: TrainConfig,
    epoch_callback=None,
) -> Checkpoint:
    """Adam over epochs x ceil(N/batch) steps, seeded shuffle each epoch.

    The loss history records the per-epoch mean of per-sample total
    losses.  Fully deterministic given cfg.seed.  ``epoch_callback``,
    when given, is invoked after every epoch as
    ``epoch_callback(epoch_number, net, mean_loss)`` (read-only: it must
    not mutate the network).
    """
    if not dataset:
        raise ValueError("dataset must be nonempty")
    for img, lab in dataset:
        _check_input(img)
        if img.dims != lab.dims:
            raise ValueError(f"image dims {img.dims} != label dims {lab.dims}")

    rng = Rng(cfg.seed)
    net = init_params(rng.spawn(0), cfg.head)
    params = net.flat().astype(np.float64)
    m = np.zeros(PARAM_COUNT, dtype=np.float64)
    v = np.zeros(PARAM_COUNT, dtype=np.float64)

    n = len(dataset)
    steps_per_epoch = (n + cfg.batch_size - 1) // cfg.batch_size
    max_iter = cfg.epochs * steps_per_epoch
    shuffle_rng = rng.spawn(1)
    history = []
    t = 0
    for epoch in range(cfg.epochs):
        epoch_frac = (epoch + 1) / cfg.epochs
        order = shuffle_rng.permutation(n)
        epoch_loss = 0.0
        for b in range(steps_per_epoch):
            idx = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            grad = np.zeros(PARAM_COUNT, dtype=np.float64)
            for i in idx:
                img, lab = dataset[int(i)]
                value, g = _sample_loss_grad(
                    net, img, lab, cfg.loss, epoch_frac, dtype=np.float32
                )
                grad += g
                epoch_loss += value.total
            grad /= len(idx)

            t += 1
            lr = cfg.learning_rate
            if cfg.poly_lr:
                lr *= (1.0 - (t - 1) / max_iter) ** 0.9
            m = cfg.adam_beta1 * m + (1.0 - cfg.adam_beta1) * grad
            v = cfg.adam_beta2 * v + (1.0 - cfg.adam_beta2) * grad * grad
            m_hat = m / (1.0 - cfg.adam_beta1**t)
            v_hat = v / (1.0 - cfg.adam_beta2**t)
            params -= lr * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)
            net = TinyNet.from_flat(params.astype(np.float32), cfg.head)
        history.append(epoch_loss / n)
        if epoch_callback is not None:
            epoch_callback(epoch + 1, net, history[-1])

    return Checkpoint(
        head=cfg.head,
        params=params.astype(np.float32),
        adam_m=m.astype(np.float32),
        adam_v=v.astype(np.float32),
        epoch=cfg.epochs,
        loss_history=history,
    )


def predict(ckpt: Checkpoint, input: Volume) -> tuple[Volume, Volume | None]:
    """Per-voxel class probabilities plus uncertainty when available.

    Evidential head: probabilities are the Dirichlet mean and the second
    return is the evidential uncertainty C/S in (0, 1].  Softmax head:
    plain probabilities and None.
    """
    net = ckpt.net()
    _check_input(input)
    logits, _ = _forward_cache(net, input.data.astype(np.float64))
    if ckpt.head == "softmax":
        p = _softmax(logits)
        return Volume(input.dims, CLASSES, p.astype(np.float32)), None
    alpha = softplus(logits) + 1.0
    s = alpha.sum(axis=0, keepdims=True)
    prob = Volume(input.dims, CLASSES, (alpha / s).astype(np.float32))
    unc = Volume(input.dims, 1, (CLASSES / s).astype(np.float32))
    return prob, unc


_CKPT_HEADER = struct.Struct("<4sIBQ")  # magic, version, head tag, param count
_CKPT_MAGIC = b"EVCK"
_CKPT_VERSION = 1


def save_checkpoint(path: str, ckpt: Checkpoint) -> None:
    """Write the EVCK binary form (see module docstring for the layout)."""
    head_tag = HEADS.index(ckpt.head)
    blob = _CKPT_HEADER.pack(_CKPT_MAGIC, _CKPT_VERSION, head_tag, PARAM_COUNT)
    blob += np.ascontiguousarray(ckpt.params, dtype="<f4").tobytes()
    blob += np.ascontiguousarray(ckpt.adam_m, dtype="<f4").tobytes()
    blob += np.ascontiguousarray(ckpt.adam_v, dtype="<f4").tobytes()
    blob += struct.pack("<I", ckpt.epoch)
    atomic_write_bytes(path, blob)


def load_checkpoint(path: str) -> Checkpoint:
    """Exact inverse of :func:`save_checkpoint` (loss history not stored)."""
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except OSError as e:
        raise OSError(f"cannot read {path!r}: {e}") from e
    if len(blob) < _CKPT_HEADER.size:
        raise FormatError(
            f"{path!r}: header needs {_CKPT_HEADER.size} bytes, file has {len(blob)}"
        )
    magic, version, head_tag, count = _CKPT_HEADER.unpack_from(blob)
    if magic != _CKPT_MAGIC:
        raise FormatError(f"{path!r}: bad magic {magic!r}, expected {_CKPT_MAGIC!r}")
    if version != _CKPT_VERSION:
        raise FormatError(
            f"{path!r}: unsupported version {version}, expected {_CKPT_VERSION}"
        )
    if head_tag >= len(HEADS):
        raise FormatError(f"{path!r}: unknown head tag {head_tag}")
    if count != PARAM_COUNT:
        raise FormatError(
            f"{path!r}: parameter count {count}, this architecture has {PARAM_COUNT}"
        )
    expected = _CKPT_HEADER.size + 3 * 4 * count + 4
    if len(blob) != expected:
        raise FormatError(f"{path!r}: expected {expected} bytes, got {len(blob)}")
    off = _CKPT_HEADER.size
    arrs = []
    for _ in range(3):
        arrs.append(
            np.frombuffer(blob, dtype="<f4", count=count, offset=off).astype(np.float32)
        )
        off += 4 * count
    (epoch,) = struct.unpack_from("<I", blob, off)
    return Checkpoint(
        head=HEADS[head_tag],
        params=arrs[0],
        adam_m=arrs[1],
        adam_v=arrs[2],
        epoch=epoch,
    )
