"""Corrupt-and-recover detection of AI-generated images.

Pipeline: mask an image, have a generative backend recover the masked
region K times, score the discrepancy between original and recovery, and
threshold the aggregated score. Ships with the evaluation harness
(AUROC/AP/FPR95), dataset tooling, and a numerical lab for the
likelihood-gap analysis that motivates the method.
"""

from .core import (
    ImageBuffer,
    ManifestEntry,
    MaskBuffer,
    RunConfig,
    ScoreRecord,
    ValidationError,
    composite,
    load_manifest,
    write_manifest,
)
from .masks import MaskSpec, generate_mask, masked_fraction
from .scoring import ScoringParams, l1, l2, mse, psnr, ssim
from .backend import (
    MeanFillBackend,
    OracleNoiseBackend,
    RecoveryRequest,
    RecoveryResponse,
    builtin_oracle_noise,
    parse_backend,
)
from .detector import (
    CalibrationResult,
    Verdict,
    calibrate_tau,
    choose_k,
    classify,
    delta_score,
    run_detection,
)
from .evaluation import (
    EvalReport,
    auroc,
    average_precision,
    emit_distribution_plot,
    evaluate_scores,
    fpr_at_tpr,
)
from .theory import (
    DiscreteDist,
    auc_ceiling,
    kl_divergence,
    likelihood_gap,
    tv_distance,
    validate_k_bound,
)

__version__ = "0.1.0"
