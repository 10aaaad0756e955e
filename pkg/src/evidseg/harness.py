"""Experiment orchestration: dataset generation, training, noise sweeps.

The protocol mirrors a noise-robustness study: generate a fixed phantom
dataset, train an evidential and a softmax model on the same split, then
evaluate both on the test split under increasing Gaussian input noise
(variance sweep), writing per-sample CSV rows, aggregate summaries, and
SVG line plots of Dice/NE/ECE/UEO versus noise variance.

Everything is deterministic: dataset samples come from consecutive seeds,
training from its own seed, and each (sample, noise-variance) evaluation
cell derives its noise seed from the dataset seed, the sample index, and
the variance, so any cell can be reproduced in isolation.

Configs are flat ``key = value`` text with dotted prefixes, e.g.::

    phantom.seed = 1234
    train.epochs = 60
    loss.lambda_p = 0.2
    n_train = 40
    noise_levels = 0 0.5 1 1.5 2
    heads = evidential softmax
    out = runs/exp1
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import backbone, losses
from .backbone import Checkpoint, TrainConfig, load_checkpoint, save_checkpoint, train
from .losses import LossConfig
from .metrics import MetricsReport, evaluate
from .phantom import PhantomConfig, make_dataset
from .subjective_logic import dirichlet_from_evidence, evidence_from_logits
from .volio import (
    FormatError,
    atomic_write_bytes,
    read_volume,
    write_csv,
    write_svg_lineplot,
    write_volume,
)
from .volume import LabelVolume, Rng, Volume, derive_seed, gaussian_noise, znorm

__all__ = [
    "ExperimentConfig",
    "SweepResult",
    "parse_config_text",
    "load_experiment_config",
    "cmd_generate",
    "cmd_train",
    "cmd_eval",
    "cmd_sweep",
    "cmd_selfcheck",
]

DEFAULT_NOISE_LEVELS = (0.0, 0.5, 1.0, 1.5, 2.0)


@dataclass
class ExperimentConfig:
    """Everything one run needs; see module docstring for the file syntax."""

    phantom: PhantomConfig = field(default_factory=PhantomConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    n_train: int = 40
    n_val: int = 10
    n_test: int = 10
    noise_levels: tuple[float, ...] = DEFAULT_NOISE_LEVELS
    heads: tuple[str, ...] = ("evidential", "softmax")
    out: str = "runs/default"

    def __post_init__(self) -> None:
        if min(self.n_train, self.n_val, self.n_test) < 0 or self.n_train < 1:
            raise ValueError("split sizes must be >= 0 with n_train >= 1")
        lv = tuple(float(s) for s in self.noise_levels)
        if any(s < 0 for s in lv):
            raise ValueError(f"noise levels must be >= 0, got {lv}")
        if list(lv) != sorted(lv):
            raise ValueError(f"noise levels must be ascending, got {lv}")
        self.noise_levels = lv
        for h in self.heads:
            if h not in backbone.HEADS:
                raise ValueError(f"unknown head {h!r}")


@dataclass
class SweepResult:
    rows: list[dict]
    summary: list[dict]


# ------------------------------------------------------------------ config


def parse_config_text(text: str) -> dict[str, str]:
    """Flat ``key = value`` lines; '#' starts a comment; blanks ignored."""
    out: dict[str, str] = {}
    for ln, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {ln}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if not key:
            raise ValueError(f"config line {ln}: empty key")
        if key in out:
            raise ValueError(f"config line {ln}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


def _coerce(raw: str, like):
    if isinstance(like, bool):
        low = raw.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if isinstance(like, int):
        return int(raw)
    if isinstance(like, float):
        return float(raw)
    if isinstance(like, str):
        return raw
    if isinstance(like, tuple):
        parts = raw.split()
        if not like:
            return tuple(parts)
        elem = like[0]
        return tuple(_coerce(p, elem) for p in parts)
    raise ValueError(f"unsupported config value type {type(like).__name__}")


def _apply_section(obj, prefix: str, items: dict[str, str]):
    known = {f.name: getattr(obj, f.name) for f in fields(obj)}
    updates = {}
    for key, raw in items.items():
        if key not in known:
            raise ValueError(f"unknown config key {prefix + key!r}")
        try:
            updates[key] = _coerce(raw, known[key])
        except ValueError as e:
            raise ValueError(f"config key {prefix}{key}: {e}") from e
    return replace(obj, **updates) if updates else obj


def load_experiment_config(path: str) -> ExperimentConfig:
    """Parse and validate a config file into an ExperimentConfig."""
    try:
        with open(path, "r", encoding="utf-8") as f:
            raw = parse_config_text(f.read())
    except OSError as e:
        raise OSError(f"cannot read config {path!r}: {e}") from e

    sections: dict[str, dict[str, str]] = {"": {}, "phantom": {}, "train": {}, "loss": {}}
    for key, value in raw.items():
        if "." in key:
            section, name = key.split(".", 1)
            if section not in sections or section == "":
                raise ValueError(f"unknown config section {section!r} in key {key!r}")
            sections[section][name] = value
        else:
            sections[""][key] = value

    phantom = _apply_section(PhantomConfig(), "phantom.", sections["phantom"])
    loss = _apply_section(LossConfig(), "loss.", sections["loss"])
    train_cfg = _apply_section(TrainConfig(), "train.", sections["train"])
    train_cfg = replace(train_cfg, loss=loss)

    cfg = ExperimentConfig(phantom=phantom, train=train_cfg)
    top = sections[""]
    known = {f.name: getattr(cfg, f.name) for f in fields(cfg) if f.name not in ("phantom", "train")}
    updates = {}
    for key, value in top.items():
        if key not in known:
            raise ValueError(f"unknown config key {key!r}")
        updates[key] = _coerce(value, known[key])
    return replace(cfg, **updates) if updates else cfg


# ---------------------------------------------------------------- dataset


def _dataset_dir(cfg: ExperimentConfig) -> str:
    return os.path.join(cfg.out, "dataset")


def _manifest_path(cfg: ExperimentConfig) -> str:
    return os.path.join(_dataset_dir(cfg), "manifest.json")


def _write_json(path: str, obj) -> None:
    atomic_write_bytes(path, (json.dumps(obj, sort_keys=True, indent=2) + "\n").encode("utf-8"))


def cmd_generate(cfg: ExperimentConfig) -> dict:
    """Write the full dataset (images, labels, manifest); returns the manifest."""
    n_total = cfg.n_train + cfg.n_val + cfg.n_test
    ddir = _dataset_dir(cfg)
    os.makedirs(ddir, exist_ok=True)
    samples = make_dataset(n_total, cfg.phantom, cfg.phantom.seed)

    entries = []
    for i, smp in enumerate(samples):
        split = "train" if i < cfg.n_train else ("val" if i < cfg.n_train + cfg.n_val else "test")
        image_name = f"sample_{i:03d}_image.evol"
        labels_name = f"sample_{i:03d}_labels.evol"
        write_volume(os.path.join(ddir, image_name), smp.image)
        write_volume(os.path.join(ddir, labels_name), smp.labels)
        entries.append(
            {
                "index": i,
                "seed": smp.meta["seed"],
                "split": split,
                "image": image_name,
                "labels": labels_name,
                "has_tumor": smp.meta["has_tumor"],
            }
        )
    manifest = {
        "dims": list(cfg.phantom.dims),
        "base_seed": cfg.phantom.seed,
        "label_map": {str(k): v for k, v in samples[0].meta["label_map"].items()},
        "splits": {"train": cfg.n_train, "val": cfg.n_val, "test": cfg.n_test},
        "samples": entries,
    }
    _write_json(_manifest_path(cfg), manifest)
    return manifest


def _load_split(cfg: ExperimentConfig, split: str) -> list[tuple[int, Volume, LabelVolume]]:
    path = _manifest_path(cfg)
    try:
        with open(path, "r", encoding="utf-8") as f:
            manifest = json.load(f)
    except FileNotFoundError:
        raise FileNotFoundError(
            f"dataset manifest {path!r} not found; run 'evidseg generate' first"
        ) from None
    ddir = _dataset_dir(cfg)
    out = []
    for entry in manifest["samples"]:
        if entry["split"] != split:
            continue
        img = read_volume(os.path.join(ddir, entry["image"]))
        lab = read_volume(os.path.join(ddir, entry["labels"]))
        if not isinstance(img, Volume) or not isinstance(lab, LabelVolume):
            raise FormatError(f"sample {entry['index']}: wrong volume kinds on disk")
        out.append((entry["index"], img, lab))
    return out


def _checkpoint_path(cfg: ExperimentConfig, head: str) -> str:
    return os.path.join(cfg.out, f"checkpoint_{head}.evck")


# ---------------------------------------------------------------- training


def _val_dice(net: backbone.TinyNet, val: list) -> float:
    """Mean whole-tumor Dice on the validation split (float32 fast path)."""
    from .metrics import dice_score
    from .phantom import merge_whole_tumor
    from .subjective_logic import argmax_class

    if not val:
        return float("nan")
    total = 0.0
    for _, img, lab in val:
        logits, _ = backbone._forward_cache(net, img.data, dtype=np.float32)
        pred = LabelVolume(img.dims, np.argmax(logits, axis=0).astype(np.uint8))
        total += dice_score(merge_whole_tumor(pred), merge_whole_tumor(lab))
    return total / len(val)


def cmd_train(cfg: ExperimentConfig, head: str) -> str:
    """Train one head on the train split; returns the checkpoint path.

    Writes the checkpoint plus a per-epoch CSV of training loss and
    validation whole-tumor Dice.
    """
    if head not in backbone.HEADS:
        raise ValueError(f"unknown head {head!r}")
    train_split = _load_split(cfg, "train")
    val_split = _load_split(cfg, "val")
    dataset = [(img, lab) for _, img, lab in train_split]
    if not dataset:
        raise FileNotFoundError("train split is empty; regenerate the dataset")

    log_rows: list[dict] = []

    def on_epoch(epoch: int, net: backbone.TinyNet, mean_loss: float) -> None:
        log_rows.append(
            {"epoch": epoch, "train_loss": mean_loss, "val_dice_wt": _val_dice(net, val_split)}
        )

    tc = replace(cfg.train, head=head)
    ckpt = train(dataset, tc, epoch_callback=on_epoch)
    path = _checkpoint_path(cfg, head)
    os.makedirs(cfg.out, exist_ok=True)
    save_checkpoint(path, ckpt)
    write_csv(os.path.join(cfg.out, f"train_log_{head}.csv"), log_rows)
    return path


# -------------------------------------------------------------- evaluation


def _noise_seed(cfg: ExperimentConfig, sample_index: int, sigma2: float) -> int:
    # variance folded in at 1e-3 resolution so any sigma2 is addressable,
    # inside or outside the configured sweep grid
    return derive_seed(cfg.phantom.seed, sample_index, int(round(sigma2 * 1000.0)))


def _eval_one(
    cfg: ExperimentConfig,
    ckpt: Checkpoint,
    sample_index: int,
    img: Volume,
    lab: LabelVolume,
    sigma2: float,
) -> MetricsReport:
    noisy = gaussian_noise(znorm(img), sigma2, Rng(_noise_seed(cfg, sample_index, sigma2)))
    prob, unc = backbone.predict(ckpt, noisy)
    return evaluate(prob, unc, lab, backbone.CLASSES)


def _sigma_tag(sigma2: float) -> str:
    return f"{sigma2:g}".replace("-", "m")


def cmd_eval(cfg: ExperimentConfig, head: str, sigma2: float) -> list[dict]:
    """Evaluate one head at one noise variance over the test split.

    Writes a per-sample CSV and an aggregate JSON; returns the CSV rows.
    """
    if sigma2 < 0:
        raise ValueError(f"sigma2 must be >= 0, got {sigma2}")
    path = _checkpoint_path(cfg, head)
    if not os.path.exists(path):
        raise FileNotFoundError(f"checkpoint {path!r} not found; run 'evidseg train' first")
    ckpt = load_checkpoint(path)
    test = _load_split(cfg, "test")
    if not test:
        raise FileNotFoundError("test split is empty; regenerate the dataset")

    rows = []
    reports = []
    for index, img, lab in test:
        rep = _eval_one(cfg, ckpt, index, img, lab, sigma2)
        reports.append(rep)
        row = {"head": head, "sigma2": sigma2, "sample": index}
        row.update(rep.csv_row())
        rows.append(row)

    tag = _sigma_tag(sigma2)
    write_csv(os.path.join(cfg.out, f"eval_{head}_sigma{tag}.csv"), rows)

    scalar_keys = [k for k in rows[0] if k not in ("head", "sigma2", "sample")]
    aggregate = {k: float(np.mean([r[k] for r in rows])) for k in scalar_keys}
    aggregate.update(
        head=head,
        sigma2=sigma2,
        n_samples=len(rows),
        uncertainty_source=reports[0].uncertainty_source,
    )
    _write_json(os.path.join(cfg.out, f"eval_{head}_sigma{tag}_summary.json"), aggregate)
    return rows


def cmd_sweep(cfg: ExperimentConfig) -> SweepResult:
    """Full (head x noise-variance) grid over the test split.

    Writes one CSV of per-sample rows, one CSV of per-cell means, and four
    SVG line plots (Dice, NE, ECE, UEO versus noise variance, one polyline
    per head).
    """
    test = _load_split(cfg, "test")
    if not test:
        raise FileNotFoundError("test split is empty; regenerate the dataset")
    ckpts = {}
    for head in cfg.heads:
        path = _checkpoint_path(cfg, head)
        if not os.path.exists(path):
            raise FileNotFoundError(f"checkpoint {path!r} not found; run 'evidseg train' first")
        ckpts[head] = load_checkpoint(path)

    rows: list[dict] = []
    summary: list[dict] = []
    for head in cfg.heads:
        for sigma2 in cfg.noise_levels:
            cell = []
            for index, img, lab in test:
                rep = _eval_one(cfg, ckpts[head], index, img, lab, sigma2)
                row = {"head": head, "sigma2": sigma2, "sample": index}
                row.update(rep.csv_row())
                cell.append(row)
            rows.extend(cell)
            scalar_keys = [k for k in cell[0] if k not in ("head", "sigma2", "sample")]
            mean_row = {"head": head, "sigma2": sigma2, "n_samples": len(cell)}
            mean_row.update({k: float(np.mean([r[k] for r in cell])) for k in scalar_keys})
            summary.append(mean_row)

    write_csv(os.path.join(cfg.out, "sweep.csv"), rows)
    write_csv(os.path.join(cfg.out, "sweep_summary.csv"), summary)

    panels = (
        ("dice_whole_tumor", "whole-tumor Dice", "sweep_dice.svg"),
        ("ne", "normalized entropy", "sweep_ne.svg"),
        ("ece", "expected calibration error", "sweep_ece.svg"),
        ("ueo_best", "uncertainty-error overlap", "sweep_ueo.svg"),
    )
    for key, label, name in panels:
        series = []
        for head in cfg.heads:
            pts = [(r["sigma2"], r[key]) for r in summary if r["head"] == head]
            series.append((head, [p[0] for p in pts], [p[1] for p in pts]))
        write_svg_lineplot(
            os.path.join(cfg.out, name),
            series,
            xlabel="noise variance",
            ylabel=label,
            title=f"{label} vs noise",
        )
    return SweepResult(rows=rows, summary=summary)


# ---------------------------------------------------------------- selfcheck


def _check_mass_sum() -> tuple[bool, str]:
    rng = Rng(2024)
    n = 100_000
    logits = rng.uniform(-8.0, 8.0, 4 * n).reshape(4, 1, 1, n).astype(np.float32)
    v = Volume((n, 1, 1), 4, logits)
    d = dirichlet_from_evidence(evidence_from_logits(v))
    total = d.belief.data.astype(np.float64).sum(axis=0) + d.uncertainty.data.astype(np.float64)[0]
    worst = float(np.abs(total - 1.0).max())
    zero = Volume((1, 1, 1), 4, np.zeros((4, 1, 1, 1), dtype=np.float32))
    u0 = dirichlet_from_evidence(zero).uncertainty.data[0, 0, 0, 0]
    ok = worst < 1e-6 and u0 == 1.0
    return ok, f"max |belief_sum + u - 1| = {worst:.2e}, u(zero evidence) = {u0}"


def _check_ice_monte_carlo() -> tuple[bool, str]:
    """Closed-form expected cross-entropy vs direct Dirichlet sampling."""
    sampler = np.random.default_rng(7)
    worst = 0.0
    for _ in range(12):
        alpha = sampler.uniform(1.0, 10.0, 4)
        y = int(sampler.integers(0, 4))
        av = Volume((1, 1, 1), 4, alpha.reshape(4, 1, 1, 1).astype(np.float32))
        lv = LabelVolume((1, 1, 1), np.full((1, 1, 1), y, dtype=np.uint8))
        closed, _ = losses.ice_loss(av, lv)
        draws = sampler.dirichlet(alpha, size=20_000)[:, y]
        mc = -np.log(np.maximum(draws, 1e-300))
        se = mc.std(ddof=1) / np.sqrt(mc.size)
        dev = abs(closed - mc.mean()) / max(se, 1e-12)
        worst = max(worst, dev)
    ok = worst < 3.0
    return ok, f"worst deviation {worst:.2f} standard errors (limit 3)"


def _check_gradients() -> tuple[bool, str]:
    rng = np.random.default_rng(11)
    dims = (5, 4, 3)
    shape = (4, dims[2], dims[1], dims[0])
    logits32 = rng.uniform(-3, 3, size=shape).astype(np.float32)
    lab = LabelVolume(dims, rng.integers(0, 4, size=shape[1:]).astype(np.uint8))
    cfg = LossConfig()
    lv, g = losses.total_loss(Volume(dims, 4, logits32), lab, cfg)
    worst = 0.0
    flat = logits32.reshape(-1)
    for i in rng.choice(flat.size, 12, replace=False):
        h = 1e-3
        xp = flat.copy()
        xp[i] = np.float32(float(flat[i]) + h)
        xm = flat.copy()
        xm[i] = np.float32(float(flat[i]) - h)
        delta = float(xp[i]) - float(xm[i])
        fp, _ = losses.total_loss(Volume(dims, 4, xp.reshape(shape)), lab, cfg)
        fm, _ = losses.total_loss(Volume(dims, 4, xm.reshape(shape)), lab, cfg)
        gfd = (fp.total - fm.total) / delta
        ga = float(g.data.reshape(-1)[i])
        worst = max(worst, abs(gfd - ga) / max(abs(gfd), abs(ga), 1e-8))
    ok = worst < 1e-3
    return ok, f"worst relative gradient error {worst:.2e} (limit 1e-3)"


def _check_metrics() -> tuple[bool, str]:
    from .metrics import dice_score, expected_calibration_error

    a = np.zeros((1, 1, 200), dtype=np.uint8)
    b = np.zeros((1, 1, 200), dtype=np.uint8)
    a[0, 0, :100] = 1
    b[0, 0, 50:150] = 1
    d = dice_score(LabelVolume((200, 1, 1), a), LabelVolume((200, 1, 1), b))
    p = np.full((4, 1, 1, 2), 0.2 / 3, dtype=np.float64)
    p[0] = 0.8
    gt = LabelVolume((2, 1, 1), np.array([[[0, 1]]], dtype=np.uint8))
    ece, _ = expected_calibration_error(p, gt)
    ok = d == 0.5 and abs(ece - 0.3) < 1e-9
    return ok, f"dice(half overlap) = {d}, two-voxel ece = {ece:.12f}"


def _check_io(tmpdir: str) -> tuple[bool, str]:
    rng = Rng(5)
    data = rng.gaussians(2 * 27).reshape(2, 3, 3, 3).astype(np.float32)
    v = Volume((3, 3, 3), 2, data)
    pv = os.path.join(tmpdir, "selfcheck.evol")
    write_volume(pv, v)
    rv = read_volume(pv)
    vol_ok = isinstance(rv, Volume) and rv.data.tobytes() == v.data.tobytes()
    ck = Checkpoint(
        head="evidential",
        params=rng.gaussians(backbone.PARAM_COUNT).astype(np.float32),
        adam_m=np.zeros(backbone.PARAM_COUNT, dtype=np.float32),
        adam_v=np.zeros(backbone.PARAM_COUNT, dtype=np.float32),
        epoch=3,
    )
    pc = os.path.join(tmpdir, "selfcheck.evck")
    save_checkpoint(pc, ck)
    rc = load_checkpoint(pc)
    ck_ok = rc.epoch == 3 and np.array_equal(rc.params, ck.params)
    bad = os.path.join(tmpdir, "selfcheck_bad.evol")
    with open(pv, "rb") as f:
        blob = f.read()
    with open(bad, "wb") as f:
        f.write(b"XXXX" + blob[4:])
    try:
        read_volume(bad)
        reject_ok = False
    except FormatError:
        reject_ok = True
    ok = vol_ok and ck_ok and reject_ok
    return ok, f"volume round-trip {vol_ok}, checkpoint round-trip {ck_ok}, corrupt rejected {reject_ok}"


def cmd_selfcheck(fault: str | None = None, out=print) -> bool:
    """Fast property suite; returns True when everything passes.

    ``fault='digamma'`` injects a multiplicative 5% corruption into the
    digamma kernel for the duration of the run (a test hook proving the
    Monte-Carlo oracle actually detects a broken closed form).
    """
    import tempfile

    t0 = time.perf_counter()
    saved = losses._digamma_raw
    if fault == "digamma":
        losses._digamma_raw = lambda x, _f=saved: 1.05 * _f(x)
    elif fault is not None:
        raise ValueError(f"unknown fault {fault!r} (supported: digamma)")
    try:
        with tempfile.TemporaryDirectory() as tmpdir:
            checks = [
                ("mass-sum identity", _check_mass_sum),
                ("integrated-CE vs Monte-Carlo", _check_ice_monte_carlo),
                ("gradient finite differences", _check_gradients),
                ("metric hand values", _check_metrics),
                ("binary round-trips", lambda: _check_io(tmpdir)),
            ]
            all_ok = True
            for name, fn in checks:
                ok, detail = fn()
                all_ok &= bool(ok)
                out(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
    finally:
        losses._digamma_raw = saved
    out(f"{'PASS' if all_ok else 'FAIL'}  selfcheck total ({time.perf_counter() - t0:.1f} s)")
    return bool(all_ok)
