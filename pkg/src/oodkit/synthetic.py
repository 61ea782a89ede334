"""Seeded synthetic ID/OOD datasets used as a desk-scale oracle.

ID features are Gaussian blobs with orthogonal class means; the head is the
Bayes-optimal linear classifier for that generative model, so feature-space
and logit-space methods both have clean expected behavior.  OOD features are
a class-balanced copy of the ID mixture translated along a direction
orthogonal to every class mean: at shift 0 the OOD distribution equals the
ID marginal exactly, and at large shifts every OOD sample is far from every
class in Mahalanobis distance.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .arrayio import write_array
from .calibration import ClassifierHead


@dataclass(frozen=True)
class SyntheticSpec:
    n_classes: int = 5
    feature_dim: int = 16
    n_per_class: int = 400
    class_separation: float = 6.0
    within_scale: float = 1.0
    ood_shift: float = 10.0
    n_ood: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.n_classes < 2 or self.feature_dim < 2 or self.n_per_class < 1:
            raise ValueError("counts must be positive (and C >= 2, d >= 2)")
        if self.n_classes >= self.feature_dim:
            raise ValueError(
                "need n_classes < feature_dim so an OOD shift direction "
                "orthogonal to all class means exists")
        if self.within_scale <= 0:
            raise ValueError("within_scale must be positive")


def make_synthetic(spec: SyntheticSpec) -> dict:
    """Generate all splits; fully determined by the spec (incl. seed)."""
    rng = np.random.default_rng(spec.seed)
    C, d, sigma = spec.n_classes, spec.feature_dim, spec.within_scale

    # orthonormal directions: C for class means, one more for the OOD shift
    basis, _ = np.linalg.qr(rng.standard_normal((d, d)))
    means = spec.class_separation * basis[:, :C].T        # (C, d)
    shift_dir = basis[:, C]

    head = ClassifierHead(W=means / sigma**2,
                          b=-0.5 * (means**2).sum(axis=1) / sigma**2)

    def id_split(n_per_class):
        y = np.repeat(np.arange(C), n_per_class)
        X = means[y] + sigma * rng.standard_normal((y.size, d))
        return X, head.logits(X), y

    n_ood = spec.n_ood if spec.n_ood is not None else C * spec.n_per_class
    train = id_split(spec.n_per_class)
    test = id_split(spec.n_per_class)
    ood_classes = rng.integers(0, C, n_ood)
    ood_X = (means[ood_classes]
             + spec.ood_shift * sigma * shift_dir
             + sigma * rng.standard_normal((n_ood, d)))

    return {
        "train": train,
        "test": test,
        "ood": (ood_X, head.logits(ood_X)),
        "head": head,
        "means": means,
        "shift_dir": shift_dir,
    }


def write_synthetic(spec: SyntheticSpec, out_dir, ood_name: str = "shifted",
                    ood_group: str = "default") -> str:
    """Write the generated arrays plus a manifest JSON; returns its path."""
    os.makedirs(out_dir, exist_ok=True)
    data = make_synthetic(spec)

    def dump(name, arr):
        write_array(arr, os.path.join(out_dir, name))
        return name

    (trX, trZ, trY), (teX, teZ, teY) = data["train"], data["test"]
    ooX, ooZ = data["ood"]
    head = data["head"]
    manifest = {
        "id_train": {
            "features": dump("id_train_features.npy", trX),
            "logits": dump("id_train_logits.npy", trZ),
            "labels": dump("id_train_labels.npy", trY),
        },
        "id_test": {
            "features": dump("id_test_features.npy", teX),
            "logits": dump("id_test_logits.npy", teZ),
            "labels": dump("id_test_labels.npy", teY),
        },
        "head": {
            "W": dump("head_W.npy", head.W),
            "b": dump("head_b.npy", head.b),
        },
        "ood_sets": [
            {
                "name": ood_name,
                "group": ood_group,
                "features": dump(f"ood_{ood_name}_features.npy", ooX),
                "logits": dump(f"ood_{ood_name}_logits.npy", ooZ),
            }
        ],
        "class_names": [f"class_{i}" for i in range(spec.n_classes)],
        "synthetic_spec": {
            "n_classes": spec.n_classes,
            "feature_dim": spec.feature_dim,
            "n_per_class": spec.n_per_class,
            "class_separation": spec.class_separation,
            "within_scale": spec.within_scale,
            "ood_shift": spec.ood_shift,
            "n_ood": spec.n_ood,
            "seed": spec.seed,
        },
    }
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path
