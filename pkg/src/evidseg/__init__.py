"""Evidential 3D segmentation on synthetic phantoms.

A small, fully deterministic stack: dense volume types and a counter-based
RNG, Dirichlet evidence heads with subjective-logic opinions, closed-form
evidential losses, a tiny 3D conv net trained with Adam, segmentation and
calibration metrics, binary volume/checkpoint formats, and an experiment
harness behind the ``evidseg`` command line tool.
"""

import os as _os

# Pin BLAS pools before numpy first loads so results are bit-reproducible
# run to run; EVIDSEG_THREADS raises the cap explicitly.
_threads = _os.environ.get("EVIDSEG_THREADS", "1")
for _var in (
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "OMP_NUM_THREADS",
    "NUMEXPR_NUM_THREADS",
    "VECLIB_MAXIMUM_THREADS",
):
    _os.environ.setdefault(_var, _threads)

from .backbone import (
    Checkpoint,
    PARAM_COUNT,
    TinyNet,
    TrainConfig,
    backward,
    forward,
    init_params,
    load_checkpoint,
    predict,
    save_checkpoint,
    train,
)
from .losses import (
    LossConfig,
    LossValue,
    adjust_alpha,
    cross_entropy_loss,
    digamma,
    ice_loss,
    kl_to_uniform,
    ln_gamma,
    soft_dice_loss,
    total_loss,
    trigamma,
)
from .metrics import (
    MetricsReport,
    dice_score,
    evaluate,
    expected_calibration_error,
    normalized_entropy,
    uncertainty_error_overlap,
)
from .phantom import (
    PhantomConfig,
    PhantomSample,
    generate,
    make_dataset,
    merge_whole_tumor,
)
from .volio import (
    FormatError,
    read_volume,
    write_csv,
    write_svg_lineplot,
    write_volume,
)
from .subjective_logic import (
    DirichletField,
    Opinion,
    argmax_class,
    dirichlet_from_evidence,
    evidence_from_logits,
    expected_probability,
    opinion_at,
    sigmoid,
    softplus,
)
from .volume import (
    LabelVolume,
    Rng,
    Volume,
    derive_seed,
    gaussian_noise,
    volume_new,
    znorm,
)
from .harness import (
    ExperimentConfig,
    SweepResult,
    cmd_eval,
    cmd_generate,
    cmd_selfcheck,
    cmd_sweep,
    cmd_train,
    load_experiment_config,
    parse_config_text,
)

__version__ = "0.1.0"

__all__ = [
    "Checkpoint",
    "DirichletField",
    "ExperimentConfig",
    "FormatError",
    "LabelVolume",
    "LossConfig",
    "LossValue",
    "MetricsReport",
    "Opinion",
    "PARAM_COUNT",
    "PhantomConfig",
    "PhantomSample",
    "Rng",
    "SweepResult",
    "TinyNet",
    "TrainConfig",
    "Volume",
    "adjust_alpha",
    "argmax_class",
    "backward",
    "cmd_eval",
    "cmd_generate",
    "cmd_selfcheck",
    "cmd_sweep",
    "cmd_train",
    "cross_entropy_loss",
    "derive_seed",
    "dice_score",
    "digamma",
    "dirichlet_from_evidence",
    "evaluate",
    "evidence_from_logits",
    "expected_calibration_error",
    "expected_probability",
    "forward",
    "gaussian_noise",
    "generate",
    "ice_loss",
    "init_params",
    "kl_to_uniform",
    "ln_gamma",
    "load_checkpoint",
    "load_experiment_config",
    "make_dataset",
    "merge_whole_tumor",
    "normalized_entropy",
    "opinion_at",
    "parse_config_text",
    "predict",
    "read_volume",
    "save_checkpoint",
    "sigmoid",
    "soft_dice_loss",
    "softplus",
    "total_loss",
    "train",
    "trigamma",
    "uncertainty_error_overlap",
    "volume_new",
    "write_csv",
    "write_svg_lineplot",
    "write_volume",
    "znorm",
]
