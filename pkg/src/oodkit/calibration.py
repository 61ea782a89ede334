"""Training-split statistics consumed by the scoring methods.

Everything here is fitted from the ID training split only and packed into an
immutable :class:`CalibrationArtifacts`, which can be persisted as a directory
of array files plus a JSON index.  All fits are deterministic: identical
inputs produce bit-identical artifacts.
"""

from __future__ import annotations

import json
import os
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import softmax

from .arrayio import read_array, sha256_file, write_array

WEIBULL_SHAPE_MIN = 0.05
WEIBULL_SHAPE_MAX = 50.0
WEIBULL_MAX_ITER = 200


class CalibrationError(ValueError):
    """Degenerate or inconsistent training data for a fit operation."""


@dataclass(frozen=True)
class ClassifierHead:
    """Final affine layer: logits = features @ W.T + b, W is (C, d)."""
    W: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        W = np.asarray(self.W, dtype=np.float64)
        b = np.asarray(self.b, dtype=np.float64)
        if W.ndim != 2 or b.ndim != 1 or b.shape[0] != W.shape[0]:
            raise CalibrationError(
                f"head shapes inconsistent: W {W.shape}, b {b.shape}")
        if not (np.isfinite(W).all() and np.isfinite(b).all()):
            raise CalibrationError("head contains non-finite entries")
        object.__setattr__(self, "W", W)
        object.__setattr__(self, "b", b)

    @property
    def n_classes(self) -> int:
        return self.W.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.W.shape[1]

    def logits(self, features: np.ndarray) -> np.ndarray:
        return features @ self.W.T + self.b


@dataclass(frozen=True)
class GaussianStats:
    """Class means plus the inverse of the shared (pooled, shrunk) covariance."""
    mu: np.ndarray         # (C, d)
    sigma: np.ndarray      # (d, d), after shrinkage
    sigma_inv: np.ndarray  # (d, d)
    shrinkage: float


@dataclass(frozen=True)
class WeibullTails:
    """Per-class Weibull fit over the largest distances to the class MAV."""
    scale: np.ndarray        # (C,)  > 0
    shape: np.ndarray        # (C,)  > 0
    mav: np.ndarray          # (C, d) mean activation vectors
    eta: int                 # requested tail size
    tail_counts: np.ndarray  # (C,) tail values actually used per class


@dataclass(frozen=True)
class PosteriorTemplates:
    """One mean softmax posterior per class group, clamped away from zero."""
    q: np.ndarray  # (C, C), rows sum to 1
    epsilon_clamp: float
    group_by: str  # "predicted" | "label"


@dataclass(frozen=True)
class VimSubspace:
    """Offset plus orthonormal basis of the residual (non-principal) subspace."""
    offset: np.ndarray          # (d,)
    residual_basis: np.ndarray  # (d, d - principal_dim), orthonormal columns
    alpha: float
    principal_dim: int


@dataclass(frozen=True)
class DiceMask:
    """Per-class binary weight mask keeping the largest-contribution columns."""
    mask: np.ndarray             # (C, d) of {0, 1}
    rho: float
    mean_activation: np.ndarray  # (d,)


def fit_gaussian(features: np.ndarray, labels: np.ndarray,
                 shrinkage: float = 1e-6) -> GaussianStats:
    """Per-class means and shared within-class covariance, shrunk and inverted.

    The covariance is the pooled maximum-likelihood estimate
    ``sum_i sum_{x in class i} (x - mu_i)(x - mu_i)^T / N`` and then receives
    ``shrinkage * trace/d`` added to the diagonal before inversion.
    """
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels)
    if shrinkage < 0:
        raise CalibrationError(f"shrinkage must be >= 0, got {shrinkage}")
    n, d = X.shape
    if n == 0:
        raise CalibrationError("empty feature matrix")
    classes = np.arange(int(y.max()) + 1) if y.size else np.arange(0)
    C = len(classes)

    mu = np.zeros((C, d))
    scatter = np.zeros((d, d))
    for c in classes:
        Xc = X[y == c]
        if Xc.shape[0] < 2:
            raise CalibrationError(
                f"class {c} has {Xc.shape[0]} samples; need at least 2")
        mu[c] = Xc.mean(axis=0)
        dev = Xc - mu[c]
        scatter += dev.T @ dev
    sigma = scatter / n
    # relative shrinkage; falls back to an absolute ridge when the pooled
    # covariance is exactly zero (all features identical)
    trace_scale = np.trace(sigma) / d
    sigma += shrinkage * (trace_scale if trace_scale > 0 else 1.0) * np.eye(d)

    eigvals = np.linalg.eigvalsh(sigma)
    if eigvals[0] <= 0:
        raise CalibrationError(
            f"covariance singular after shrinkage (smallest eigenvalue "
            f"{eigvals[0]:.3e}); increase shrinkage")
    sigma_inv = np.linalg.inv(sigma)
    sigma_inv = (sigma_inv + sigma_inv.T) / 2.0
    return GaussianStats(mu=mu, sigma=sigma, sigma_inv=sigma_inv,
                         shrinkage=float(shrinkage))


def weibull_mle(values: np.ndarray) -> tuple[float, float]:
    """Maximum-likelihood two-parameter Weibull fit, returning (scale, shape).

    The shape equation is solved with a bisection-safeguarded Newton iteration
    on [0.05, 50]; a constant sample drives the MLE shape to infinity, which
    is reported as the clamp value with a warning.
    """
    x = np.asarray(values, dtype=np.float64)
    if x.size < 2:
        raise CalibrationError(f"need at least 2 tail values, got {x.size}")
    if np.any(x <= 0):
        raise CalibrationError("tail values must be strictly positive")

    if np.all(x == x[0]):
        warnings.warn(
            "constant tail sample: Weibull shape clamped to "
            f"{WEIBULL_SHAPE_MAX}", RuntimeWarning)
        return float(x[0]), WEIBULL_SHAPE_MAX

    # work with y = x / max(x) so y**k never overflows
    m = x.max()
    log_x = np.log(x)
    log_y = log_x - np.log(m)
    mean_log = log_x.mean()

    def g_and_slope(k):
        w = np.exp(k * log_y)
        sw = w.sum()
        ex = (w @ log_x) / sw
        g = ex - 1.0 / k - mean_log
        # weighted covariance of log_x with itself (log_y shifts cancel)
        var = (w @ (log_x - ex) ** 2) / sw
        return g, var + 1.0 / k**2

    lo, hi = WEIBULL_SHAPE_MIN, WEIBULL_SHAPE_MAX
    g_lo, _ = g_and_slope(lo)
    g_hi, _ = g_and_slope(hi)
    if g_lo >= 0:
        k = lo
    elif g_hi <= 0:
        warnings.warn(
            f"Weibull shape clamped to {WEIBULL_SHAPE_MAX}", RuntimeWarning)
        k = hi
    else:
        # classic moment-based initial guess, clipped inside the bracket
        k = float(np.clip(1.2 / max(log_x.std(), 1e-12), lo * 1.5, hi / 1.5))
        converged = False
        for _ in range(WEIBULL_MAX_ITER):
            g, slope = g_and_slope(k)
            if abs(g) < 1e-12:
                converged = True
                break
            if g < 0:
                lo = k
            else:
                hi = k
            step = k - g / slope
            k = step if lo < step < hi else 0.5 * (lo + hi)
        else:
            g, _ = g_and_slope(k)
            converged = abs(g) < 1e-8
        if not converged:
            raise CalibrationError(
                f"Weibull MLE did not converge after {WEIBULL_MAX_ITER} "
                f"iterations (residual {g:.3e})")

    scale = m * float(np.exp(np.log(np.exp(k * log_y).mean()) / k))
    return scale, float(k)


def fit_weibull_tails(features: np.ndarray, logits: np.ndarray,
                      labels: np.ndarray, eta: int = 20) -> WeibullTails:
    """Per class: MAV over correctly classified samples, then a Weibull fit
    on the ``eta`` largest distances to that MAV.

    When a class has fewer than ``eta`` correct samples, all available
    distances are used and the actual count recorded.
    """
    X = np.asarray(features, dtype=np.float64)
    Z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels)
    if eta < 3:
        raise CalibrationError(f"eta must be >= 3, got {eta}")
    C = Z.shape[1]
    predicted = Z.argmax(axis=1)
    correct = predicted == y

    d = X.shape[1]
    mav = np.zeros((C, d))
    scale = np.zeros(C)
    shape = np.zeros(C)
    tail_counts = np.zeros(C, dtype=np.int64)
    for c in range(C):
        Xc = X[correct & (y == c)]
        if Xc.shape[0] == 0:
            raise CalibrationError(
                f"class {c} has no correctly classified training samples")
        mav[c] = Xc.mean(axis=0)
        dist = np.linalg.norm(Xc - mav[c], axis=1)
        tail = np.sort(dist)[-min(eta, dist.size):]
        tail_counts[c] = tail.size
        try:
            scale[c], shape[c] = weibull_mle(tail)
        except CalibrationError as exc:
            raise CalibrationError(f"class {c}: {exc}") from exc
    return WeibullTails(scale=scale, shape=shape, mav=mav, eta=int(eta),
                        tail_counts=tail_counts)


def fit_templates(logits: np.ndarray, epsilon_clamp: float = 1e-12,
                  group_by: str = "predicted",
                  labels: np.ndarray | None = None) -> PosteriorTemplates:
    """Mean softmax posterior per class group.

    Groups are formed by the network's own predictions (argmax) by default, or
    by ground-truth label when ``group_by="label"``.  Template entries are
    clamped to at least ``epsilon_clamp`` and renormalized so downstream KL
    divergences stay finite.
    """
    Z = np.asarray(logits, dtype=np.float64)
    C = Z.shape[1]
    posteriors = softmax(Z, axis=1)
    if group_by == "predicted":
        groups = Z.argmax(axis=1)
    elif group_by == "label":
        if labels is None:
            raise CalibrationError('group_by="label" requires labels')
        groups = np.asarray(labels)
    else:
        raise CalibrationError(f"unknown group_by {group_by!r}")

    q = np.zeros((C, C))
    for c in range(C):
        rows = posteriors[groups == c]
        if rows.shape[0] == 0:
            raise CalibrationError(
                f"no training rows grouped under class {c}; cannot build its "
                "posterior template")
        q[c] = rows.mean(axis=0)
    q = np.maximum(q, epsilon_clamp)
    q /= q.sum(axis=1, keepdims=True)
    # renormalization can push clamped entries a hair under the floor again;
    # re-applying it perturbs the row sum by at most C * epsilon_clamp
    q = np.maximum(q, epsilon_clamp)
    return PosteriorTemplates(q=q, epsilon_clamp=float(epsilon_clamp),
                              group_by=group_by)


def fit_vim(features: np.ndarray, head: ClassifierHead,
            principal_dim: int | None = None) -> VimSubspace:
    """Offset, residual subspace basis and logit-matching scale.

    The offset is ``-pinv(W) @ b``; offset features are eigendecomposed via
    their second-moment matrix; the residual basis spans the complement of
    the top ``principal_dim`` eigenvectors; alpha matches the mean training
    max-logit to the mean training residual norm.
    """
    X = np.asarray(features, dtype=np.float64)
    n, d = X.shape
    if principal_dim is None:
        principal_dim = d // 2
    if not 0 < principal_dim < d:
        raise CalibrationError(
            f"principal_dim must be in (0, {d}), got {principal_dim}")
    if n <= d:
        warnings.warn(
            f"only {n} training samples for {d}-dimensional features; "
            "subspace estimate will be rank-deficient", RuntimeWarning)

    offset = -np.linalg.pinv(head.W) @ head.b
    centered = X - offset
    second_moment = centered.T @ centered / n
    eigvals, eigvecs = np.linalg.eigh(second_moment)
    order = np.argsort(eigvals)[::-1]
    eigvecs = eigvecs[:, order]
    residual_basis = np.ascontiguousarray(eigvecs[:, principal_dim:])

    residual_norms = np.linalg.norm(centered @ residual_basis, axis=1)
    denom = residual_norms.sum()
    if denom <= 0:
        raise CalibrationError(
            "degenerate subspace: all training residual norms are zero "
            f"(features lie inside the {principal_dim}-dimensional principal "
            "subspace)")
    alpha = head.logits(X).max(axis=1).sum() / denom
    return VimSubspace(offset=offset, residual_basis=residual_basis,
                       alpha=float(alpha), principal_dim=int(principal_dim))


def dice_keep_count(rho: float, d: int) -> int:
    """Columns kept per class row: round((1 - rho) * d), half rounded up."""
    return int(np.floor((1.0 - rho) * d + 0.5))


def fit_dice_mask(features: np.ndarray, head: ClassifierHead,
                  rho: float) -> DiceMask:
    """Binary mask keeping, per class, the weights with the largest
    contribution ``W[i, j] * mean_activation[j]``; ties go to the lower
    column index."""
    if not 0.0 <= rho <= 1.0:
        raise CalibrationError(f"rho must be in [0, 1], got {rho}")
    X = np.asarray(features, dtype=np.float64)
    if X.shape[1] != head.feature_dim:
        raise CalibrationError(
            f"feature width {X.shape[1]} != head width {head.feature_dim}")
    mean_activation = X.mean(axis=0)
    contribution = head.W * mean_activation
    C, d = head.W.shape
    keep = dice_keep_count(rho, d)
    mask = np.zeros((C, d), dtype=np.int64)
    if keep > 0:
        # stable sort on -V gives descending values, ties by lower column
        order = np.argsort(-contribution, axis=1, kind="stable")
        rows = np.repeat(np.arange(C), keep)
        mask[rows, order[:, :keep].ravel()] = 1
    return DiceMask(mask=mask, rho=float(rho), mean_activation=mean_activation)


def fit_react_threshold(features: np.ndarray, percentile: float) -> float:
    """Clipping limit: the given quantile of the pooled training activation
    entries, with linear interpolation between order statistics."""
    if not 0.0 < percentile < 1.0:
        raise CalibrationError(
            f"percentile must be in (0, 1), got {percentile}")
    X = np.asarray(features, dtype=np.float64)
    if X.size == 0:
        raise CalibrationError("empty feature matrix")
    return float(np.quantile(X.ravel(), percentile))


DEFAULT_REACT_TAUS = (0.5, 0.75, 1.0, 1.5, 1.75, 2.0)
DEFAULT_DICE_RHOS = (0.01, 0.05, 0.08, 0.1, 0.3, 0.7)


@dataclass(frozen=True)
class CalibrationArtifacts:
    """Everything any scoring method needs, fitted once from the ID train split."""
    head: ClassifierHead
    gaussian: GaussianStats
    weibull: WeibullTails
    templates: PosteriorTemplates
    vim: VimSubspace
    dice_masks: dict[float, DiceMask]
    react_taus: tuple[float, ...]
    meta: dict = field(default_factory=dict)


def fit_all(features: np.ndarray, logits: np.ndarray, labels: np.ndarray,
            head: ClassifierHead, *,
            shrinkage: float = 1e-6,
            eta: int = 20,
            epsilon_clamp: float = 1e-12,
            group_by: str = "predicted",
            principal_dim: int | None = None,
            dice_rhos=DEFAULT_DICE_RHOS,
            react_taus=DEFAULT_REACT_TAUS,
            react_percentiles=()) -> CalibrationArtifacts:
    """Fit every statistic in one pass over the training split."""
    X = np.asarray(features, dtype=np.float64)
    Z = np.asarray(logits, dtype=np.float64)
    taus = [float(t) for t in react_taus]
    taus += [fit_react_threshold(X, p) for p in react_percentiles]
    meta = {
        "n_train": int(X.shape[0]),
        "feature_dim": int(X.shape[1]),
        "n_classes": int(head.n_classes),
        "shrinkage": float(shrinkage),
        "eta": int(eta),
        "epsilon_clamp": float(epsilon_clamp),
        "group_by": group_by,
        "react_percentiles": [float(p) for p in react_percentiles],
    }
    return CalibrationArtifacts(
        head=head,
        gaussian=fit_gaussian(X, labels, shrinkage),
        weibull=fit_weibull_tails(X, Z, labels, eta),
        templates=fit_templates(Z, epsilon_clamp, group_by, labels),
        vim=fit_vim(X, head, principal_dim),
        dice_masks={float(r): fit_dice_mask(X, head, float(r)) for r in dice_rhos},
        react_taus=tuple(taus),
        meta=meta,
    )


# --- persistence --------------------------------------------------------------

_INDEX_NAME = "index.json"


def save_artifacts(artifacts: CalibrationArtifacts, out_dir) -> None:
    """Persist to a directory of array files plus a JSON index with
    hyperparameters and content hashes."""
    os.makedirs(out_dir, exist_ok=True)
    arrays = {
        "head_W": artifacts.head.W,
        "head_b": artifacts.head.b,
        "gaussian_mu": artifacts.gaussian.mu,
        "gaussian_sigma": artifacts.gaussian.sigma,
        "gaussian_sigma_inv": artifacts.gaussian.sigma_inv,
        "weibull_scale": artifacts.weibull.scale,
        "weibull_shape": artifacts.weibull.shape,
        "weibull_mav": artifacts.weibull.mav,
        "weibull_tail_counts": artifacts.weibull.tail_counts,
        "templates_q": artifacts.templates.q,
        "vim_offset": artifacts.vim.offset,
        "vim_residual_basis": artifacts.vim.residual_basis,
        "dice_mean_activation": next(iter(artifacts.dice_masks.values())).mean_activation
        if artifacts.dice_masks else np.zeros(artifacts.head.feature_dim),
    }
    for rho, dm in sorted(artifacts.dice_masks.items()):
        arrays[f"dice_mask_{rho:g}"] = dm.mask

    hashes = {}
    for name, arr in arrays.items():
        fname = f"{name}.npy"
        write_array(arr, os.path.join(out_dir, fname))
        hashes[fname] = sha256_file(os.path.join(out_dir, fname))

    index = {
        "hyperparameters": {
            **artifacts.meta,
            "shrinkage": artifacts.gaussian.shrinkage,
            "eta": artifacts.weibull.eta,
            "epsilon_clamp": artifacts.templates.epsilon_clamp,
            "group_by": artifacts.templates.group_by,
            "principal_dim": artifacts.vim.principal_dim,
            "vim_alpha": artifacts.vim.alpha,
            "dice_rhos": sorted(artifacts.dice_masks),
            "react_taus": list(artifacts.react_taus),
        },
        "files": hashes,
    }
    with open(os.path.join(out_dir, _INDEX_NAME), "w") as fh:
        json.dump(index, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_artifacts(in_dir) -> CalibrationArtifacts:
    """Inverse of :func:`save_artifacts`, verifying content hashes."""
    index_path = os.path.join(in_dir, _INDEX_NAME)
    with open(index_path) as fh:
        index = json.load(fh)
    hp = index["hyperparameters"]

    for fname, digest in index["files"].items():
        actual = sha256_file(os.path.join(in_dir, fname))
        if actual != digest:
            raise CalibrationError(
                f"artifact {fname} content hash mismatch (expected {digest}, "
                f"got {actual})")

    def arr(name):
        return read_array(os.path.join(in_dir, f"{name}.npy"))

    head = ClassifierHead(W=arr("head_W"), b=arr("head_b"))
    gaussian = GaussianStats(
        mu=arr("gaussian_mu"), sigma=arr("gaussian_sigma"),
        sigma_inv=arr("gaussian_sigma_inv"), shrinkage=hp["shrinkage"])
    weibull = WeibullTails(
        scale=arr("weibull_scale"), shape=arr("weibull_shape"),
        mav=arr("weibull_mav"), eta=hp["eta"],
        tail_counts=arr("weibull_tail_counts"))
    templates = PosteriorTemplates(
        q=arr("templates_q"), epsilon_clamp=hp["epsilon_clamp"],
        group_by=hp["group_by"])
    vim = VimSubspace(
        offset=arr("vim_offset"), residual_basis=arr("vim_residual_basis"),
        alpha=hp["vim_alpha"], principal_dim=hp["principal_dim"])
    mean_act = arr("dice_mean_activation")
    dice_masks = {
        float(r): DiceMask(mask=arr(f"dice_mask_{float(r):g}"), rho=float(r),
                           mean_activation=mean_act)
        for r in hp["dice_rhos"]
    }
    meta = {k: v for k, v in hp.items()
            if k in ("n_train", "feature_dim", "n_classes", "react_percentiles")}
    return CalibrationArtifacts(
        head=head, gaussian=gaussian, weibull=weibull, templates=templates,
        vim=vim, dice_masks=dice_masks, react_taus=tuple(hp["react_taus"]),
        meta=meta)
