"""Per-sample ID-affinity scores for the ten post-hoc detection methods.

Every scorer returns scores in one uniform orientation: higher means more
in-distribution.  Methods whose native formula is an anomaly or OOD
probability are negated, and the transformation is recorded on the returned
:class:`ScoreVector` so reported numbers can be traced back to the original
convention.  Softmax and log-sum-exp are always computed with max
subtraction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp, softmax

from .calibration import (
    CalibrationArtifacts,
    ClassifierHead,
    DiceMask,
    GaussianStats,
    PosteriorTemplates,
    VimSubspace,
    WeibullTails,
)

METHODS = (
    "msp", "odin", "openmax", "kl_matching", "mahalanobis",
    "maxlogit", "energy", "vim", "react", "dice",
)

DEFAULT_ODIN_T = 1000.0
DEFAULT_OPENMAX_ALPHA_TOP = 10


class ScoringError(ValueError):
    """Dimension mismatch or non-finite input."""


@dataclass(frozen=True)
class ScoreVector:
    """Scores for one method under the shared higher-is-ID convention."""
    method: str
    scores: np.ndarray
    convention_note: str = ""

    def __len__(self):
        return len(self.scores)


def _check_finite(arr: np.ndarray, what: str) -> np.ndarray:
    a = np.asarray(arr, dtype=np.float64)
    bad = ~np.isfinite(a)
    if bad.any():
        row = int(np.argwhere(bad)[0][0])
        raise ScoringError(f"non-finite value in {what} at row {row}")
    return a


def _check_logits(logits, n_classes=None) -> np.ndarray:
    Z = _check_finite(logits, "logits")
    if Z.ndim != 2:
        raise ScoringError(f"logits must be 2-d, got shape {Z.shape}")
    if n_classes is not None and Z.shape[1] != n_classes:
        raise ScoringError(
            f"logits have {Z.shape[1]} classes, artifacts expect {n_classes}")
    return Z


def _check_features(features, dim=None) -> np.ndarray:
    X = _check_finite(features, "features")
    if X.ndim != 2:
        raise ScoringError(f"features must be 2-d, got shape {X.shape}")
    if dim is not None and X.shape[1] != dim:
        raise ScoringError(
            f"features have width {X.shape[1]}, artifacts expect {dim}")
    return X


def logits_from_features(features: np.ndarray, head: ClassifierHead) -> np.ndarray:
    """Recompute logits through the exported head: z = f @ W.T + b."""
    X = _check_features(features, head.feature_dim)
    return head.logits(X)


def score_msp(logits: np.ndarray) -> ScoreVector:
    """Maximum softmax probability."""
    Z = _check_logits(logits)
    return ScoreVector("msp", softmax(Z, axis=1).max(axis=1))


def score_odin(logits: np.ndarray, T: float = DEFAULT_ODIN_T) -> ScoreVector:
    """Maximum temperature-scaled softmax probability."""
    if T <= 0:
        raise ScoringError(f"temperature must be positive, got {T}")
    Z = _check_logits(logits)
    return ScoreVector("odin", softmax(Z / T, axis=1).max(axis=1),
                       convention_note=f"T={T:g}")


def score_maxlogit(logits: np.ndarray) -> ScoreVector:
    """Maximum raw logit (anomaly convention is its negative)."""
    Z = _check_logits(logits)
    return ScoreVector("maxlogit", Z.max(axis=1),
                       convention_note="sign flipped vs. anomaly score")


def score_energy(logits: np.ndarray) -> ScoreVector:
    """Log-sum-exp of the logits (negative energy)."""
    Z = _check_logits(logits)
    return ScoreVector("energy", logsumexp(Z, axis=1),
                       convention_note="negated energy")


def score_kl_matching(logits: np.ndarray,
                      templates: PosteriorTemplates) -> ScoreVector:
    """Negated minimum KL divergence to any class posterior template."""
    Z = _check_logits(logits, templates.q.shape[1])
    p = softmax(Z, axis=1)                       # (N, C)
    q = templates.q                              # (C, C), entries > 0
    # D_KL(p || q_c) for all c at once; p log p terms with p == 0 contribute 0
    p_log_p = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0).sum(axis=1)
    cross = p @ np.log(q).T                      # (N, C)
    kl = p_log_p[:, None] - cross
    return ScoreVector("kl_matching", -kl.min(axis=1),
                       convention_note="negated min KL divergence")


def score_mahalanobis(features: np.ndarray, stats: GaussianStats) -> ScoreVector:
    """Max over classes of the negated squared Mahalanobis distance."""
    X = _check_features(features, stats.mu.shape[1])
    scores = np.full(X.shape[0], -np.inf)
    for c in range(stats.mu.shape[0]):
        dev = X - stats.mu[c]
        d2 = np.einsum("ij,jk,ik->i", dev, stats.sigma_inv, dev)
        scores = np.maximum(scores, -d2)
    return ScoreVector("mahalanobis", scores,
                       convention_note="negated squared distance")


def score_openmax(logits: np.ndarray, features: np.ndarray,
                  tails: WeibullTails,
                  alpha_top: int = DEFAULT_OPENMAX_ALPHA_TOP,
                  eval_on: str = "distance",
                  rank_weight: bool = True) -> ScoreVector:
    """Max recalibrated known-class probability after Weibull revision.

    Per sample, the Weibull CDF per class is evaluated on the feature
    distance to that class MAV (default) or directly on the logit
    (``eval_on="logit"``).  The ``alpha_top`` classes ranked by logit are
    revised, blended by rank weight (alpha_top - r + 1) / alpha_top unless
    ``rank_weight`` is off, and the shaved-off mass forms the unknown logit.
    """
    Z = _check_logits(logits, tails.scale.shape[0])
    X = _check_features(features, tails.mav.shape[1])
    if Z.shape[0] != X.shape[0]:
        raise ScoringError(
            f"row count mismatch: {Z.shape[0]} logits vs {X.shape[0]} features")
    C = Z.shape[1]
    alpha_top = min(int(alpha_top), C)
    if alpha_top < 1:
        raise ScoringError("alpha_top must be >= 1")
    if eval_on == "distance":
        diff = X[:, None, :] - tails.mav[None, :, :]
        t = np.linalg.norm(diff, axis=2)          # (N, C)
    elif eval_on == "logit":
        t = Z
    else:
        raise ScoringError(f"unknown eval_on {eval_on!r}")
    # Weibull CDF, zero below the origin
    with np.errstate(over="ignore"):
        cdf = np.where(t > 0, 1.0 - np.exp(-np.power(
            np.maximum(t, 0.0) / tails.scale, tails.shape)), 0.0)

    order = np.argsort(-Z, axis=1, kind="stable")[:, :alpha_top]   # (N, alpha_top)
    ranks = np.arange(1, alpha_top + 1)
    factors = (alpha_top - ranks + 1) / alpha_top if rank_weight \
        else np.ones(alpha_top)

    blend = np.zeros_like(Z)
    rows = np.repeat(np.arange(Z.shape[0]), alpha_top)
    blend[rows, order.ravel()] = np.tile(factors, Z.shape[0])
    revision = cdf * blend                      # w_i * rank factor, 0 off-top
    z_prime = Z * (1.0 - revision)
    z_unknown = (Z * revision).sum(axis=1)

    extended = np.concatenate([z_prime, z_unknown[:, None]], axis=1)
    probs = softmax(extended, axis=1)
    return ScoreVector("openmax", probs[:, :C].max(axis=1),
                       convention_note=f"alpha_top={alpha_top}, eval_on={eval_on}")


def score_vim(logits: np.ndarray, features: np.ndarray,
              subspace: VimSubspace) -> ScoreVector:
    """Negated virtual-logit OOD probability.

    The residual norm of the offset feature, scaled by alpha, is appended to
    the logits as a virtual logit; the OOD probability is its softmax weight
    in the extended vector, computed via the stable extended-softmax form.
    """
    Z = _check_logits(logits)
    X = _check_features(features, subspace.offset.shape[0])
    if Z.shape[0] != X.shape[0]:
        raise ScoringError(
            f"row count mismatch: {Z.shape[0]} logits vs {X.shape[0]} features")
    centered = X - subspace.offset
    virtual = subspace.alpha * np.linalg.norm(
        centered @ subspace.residual_basis, axis=1)
    extended = np.concatenate([Z, virtual[:, None]], axis=1)
    ood_prob = softmax(extended, axis=1)[:, -1]
    return ScoreVector("vim", -ood_prob,
                       convention_note="negated virtual-logit probability")


def score_react(features: np.ndarray, head: ClassifierHead,
                tau: float) -> ScoreVector:
    """Energy score after clipping activations at tau."""
    X = _check_features(features, head.feature_dim)
    clipped = np.minimum(X, tau)
    return ScoreVector("react", logsumexp(head.logits(clipped), axis=1),
                       convention_note=f"tau={tau:g}")


def score_dice(features: np.ndarray, head: ClassifierHead,
               mask: DiceMask) -> ScoreVector:
    """Energy score through the sparsified head W * M."""
    X = _check_features(features, head.feature_dim)
    if mask.mask.shape != head.W.shape:
        raise ScoringError(
            f"mask shape {mask.mask.shape} != head shape {head.W.shape}")
    z = X @ (head.W * mask.mask).T + head.b
    return ScoreVector("dice", logsumexp(z, axis=1),
                       convention_note=f"rho={mask.rho:g}")


def score_method(method: str, *, logits: np.ndarray, features: np.ndarray,
                 artifacts: CalibrationArtifacts,
                 hyper: dict | None = None) -> ScoreVector:
    """Dispatch a method name (plus hyperparameters) to its scorer."""
    hyper = hyper or {}
    if method == "msp":
        return score_msp(logits)
    if method == "odin":
        return score_odin(logits, T=hyper.get("T", DEFAULT_ODIN_T))
    if method == "openmax":
        return score_openmax(
            logits, features, artifacts.weibull,
            alpha_top=hyper.get("alpha_top", DEFAULT_OPENMAX_ALPHA_TOP),
            eval_on=hyper.get("eval_on", "distance"),
            rank_weight=hyper.get("rank_weight", True))
    if method == "kl_matching":
        return score_kl_matching(logits, artifacts.templates)
    if method == "mahalanobis":
        return score_mahalanobis(features, artifacts.gaussian)
    if method == "maxlogit":
        return score_maxlogit(logits)
    if method == "energy":
        return score_energy(logits)
    if method == "vim":
        return score_vim(logits, features, artifacts.vim)
    if method == "react":
        return score_react(features, artifacts.head, tau=hyper["tau"])
    if method == "dice":
        rho = float(hyper["rho"])
        return score_dice(features, artifacts.head, artifacts.dice_masks[rho])
    raise ScoringError(f"unknown method {method!r}")
