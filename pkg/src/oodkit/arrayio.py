"""Array interchange files (.npy v1.0) and dataset manifests.

The on-disk array format is the de-facto standard one: 6-byte magic
``\\x93NUMPY``, version 1.0, a little-endian uint16 header length, an ASCII
header dict with keys ``descr``/``fortran_order``/``shape``, then the raw
little-endian row-major payload.  Reading and writing is done here directly
(rather than through a library loader) so that malformed files can be
rejected with the exact byte offset of the problem, and so that round trips
are bit-exact by construction.
"""

from __future__ import annotations

import ast
import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"\x93NUMPY"
VERSION = b"\x01\x00"

# dtypes accepted on disk; everything floating is promoted to float64 in memory
SUPPORTED_DESCRS = {"<f4", "<f8", "<i8"}


class ArrayFormatError(ValueError):
    """Malformed, truncated or unsupported array file."""

    def __init__(self, message: str, path=None, offset=None):
        self.path = path
        self.offset = offset
        where = []
        if path is not None:
            where.append(str(path))
        if offset is not None:
            where.append(f"byte offset {offset}")
        suffix = f" ({', '.join(where)})" if where else ""
        super().__init__(message + suffix)


class ManifestError(ValueError):
    """Manifest missing, unparseable, or internally inconsistent."""


def write_array(array: np.ndarray, path) -> None:
    """Write ``array`` to ``path`` in the interchange format.

    Arrays are stored little-endian and C-contiguous.  float16/float32/float64
    inputs are stored as the matching 4- or 8-byte float; integer inputs as
    8-byte signed integers.
    """
    a = np.asarray(array)
    if a.dtype == np.float32:
        descr = "<f4"
    elif np.issubdtype(a.dtype, np.floating):
        descr = "<f8"
        a = a.astype(np.float64, copy=False)
    elif np.issubdtype(a.dtype, np.integer) or a.dtype == np.bool_:
        descr = "<i8"
        a = a.astype(np.int64, copy=False)
    else:
        raise ArrayFormatError(f"unsupported dtype for writing: {a.dtype}")
    a = np.ascontiguousarray(a).astype(descr, copy=False)

    shape_repr = "(" + ", ".join(str(int(s)) for s in a.shape)
    shape_repr += ",)" if a.ndim == 1 else ")"
    header = f"{{'descr': '{descr}', 'fortran_order': False, 'shape': {shape_repr}, }}"
    # pad so magic+version+len+header is a multiple of 64, newline-terminated
    unpadded = len(MAGIC) + len(VERSION) + 2 + len(header) + 1
    pad = (64 - unpadded % 64) % 64
    header_bytes = (header + " " * pad + "\n").encode("latin1")

    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(VERSION)
        fh.write(len(header_bytes).to_bytes(2, "little"))
        fh.write(header_bytes)
        fh.write(a.tobytes(order="C"))


def read_array(path) -> np.ndarray:
    """Read an interchange array file, promoting floats to float64.

    Raises :class:`ArrayFormatError` with the byte offset of the problem for
    malformed headers, unsupported dtypes and truncated payloads.
    """
    with open(path, "rb") as fh:
        buf = fh.read()

    if len(buf) < 8 or buf[:6] != MAGIC:
        raise ArrayFormatError("bad magic string", path, 0)
    if buf[6:8] != VERSION:
        raise ArrayFormatError(
            f"unsupported format version {buf[6]}.{buf[7]}", path, 6)
    if len(buf) < 10:
        raise ArrayFormatError("truncated before header length", path, 8)
    header_len = int.from_bytes(buf[8:10], "little")
    header_end = 10 + header_len
    if len(buf) < header_end:
        raise ArrayFormatError("truncated header", path, len(buf))

    try:
        header = ast.literal_eval(buf[10:header_end].decode("latin1"))
    except (ValueError, SyntaxError) as exc:
        raise ArrayFormatError(f"unparseable header dict: {exc}", path, 10)
    if not isinstance(header, dict) or not {"descr", "fortran_order", "shape"} <= set(header):
        raise ArrayFormatError("header missing required keys", path, 10)
    descr = header["descr"]
    if descr not in SUPPORTED_DESCRS:
        raise ArrayFormatError(f"unsupported dtype {descr!r}", path, 10)
    if header["fortran_order"] is not False:
        raise ArrayFormatError("fortran_order=True not supported", path, 10)
    shape = header["shape"]
    if (not isinstance(shape, tuple)
            or any(not isinstance(s, int) or s < 0 for s in shape)):
        raise ArrayFormatError(f"bad shape {shape!r}", path, 10)

    dtype = np.dtype(descr)
    count = int(np.prod(shape, dtype=np.int64)) if shape else 1
    nbytes = count * dtype.itemsize
    if len(buf) - header_end < nbytes:
        raise ArrayFormatError(
            f"truncated payload: expected {nbytes} bytes, found {len(buf) - header_end}",
            path, len(buf))

    data = np.frombuffer(buf, dtype=dtype, count=count, offset=header_end)
    out = data.reshape(shape)
    if dtype == np.dtype("<f4"):
        return out.astype(np.float64)
    return out.copy()


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass(frozen=True)
class SplitArrays:
    """Features (N,d), logits (N,C) and optional integer labels (N,)."""
    features: np.ndarray
    logits: np.ndarray
    labels: np.ndarray | None = None


@dataclass(frozen=True)
class DatasetManifest:
    """Validated view of a manifest JSON file: every referenced array loaded,
    every cross-array dimension check already performed."""
    id_train: SplitArrays
    id_test: SplitArrays
    W: np.ndarray
    b: np.ndarray
    ood_sets: dict[str, SplitArrays]
    class_names: list[str]
    ood_groups: dict[str, str] = field(default_factory=dict)

    @property
    def n_classes(self) -> int:
        return self.W.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.W.shape[1]


def _load_ref(base_dir, rel, problems, what):
    path = os.path.join(base_dir, rel)
    if not os.path.exists(path):
        problems.append(f"{what}: missing file {path}")
        return None
    try:
        return read_array(path)
    except ArrayFormatError as exc:
        problems.append(f"{what}: {exc}")
        return None


def load_manifest(path) -> DatasetManifest:
    """Load and eagerly validate a manifest JSON file.

    All referenced arrays are read; every dimension inconsistency found is
    collected and reported in one :class:`ManifestError` rather than failing
    at the first problem.  Paths inside the manifest resolve relative to the
    manifest's directory.
    """
    if not os.path.exists(path):
        raise ManifestError(f"manifest file not found: {path}")
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"manifest is not valid JSON: {exc}")

    base = os.path.dirname(os.path.abspath(path))
    problems: list[str] = []

    def load_split(section, name, want_labels):
        if section is None:
            problems.append(f"{name}: section missing")
            return None
        feats = _load_ref(base, section.get("features", ""), problems, f"{name}.features")
        logits = _load_ref(base, section.get("logits", ""), problems, f"{name}.logits")
        labels = None
        if want_labels:
            labels = _load_ref(base, section.get("labels", ""), problems, f"{name}.labels")
        if feats is None or logits is None or (want_labels and labels is None):
            return None
        return SplitArrays(feats, logits, labels)

    id_train = load_split(doc.get("id_train"), "id_train", want_labels=True)
    id_test = load_split(doc.get("id_test"), "id_test", want_labels=True)

    head = doc.get("head") or {}
    W = _load_ref(base, head.get("W", ""), problems, "head.W")
    b = _load_ref(base, head.get("b", ""), problems, "head.b")

    ood_sets: dict[str, SplitArrays] = {}
    ood_groups: dict[str, str] = {}
    for entry in doc.get("ood_sets", []):
        name = entry.get("name")
        if not name:
            problems.append("ood_sets: entry without a name")
            continue
        split = load_split(entry, f"ood_sets[{name}]", want_labels=False)
        if split is not None:
            ood_sets[name] = split
        ood_groups[name] = entry.get("group", "default")

    class_names = doc.get("class_names", [])

    if problems:
        raise ManifestError("manifest invalid:\n  " + "\n  ".join(problems))

    # cross-array consistency: one d, one C, labels in range
    C, d = None, None
    if W is not None:
        if W.ndim != 2:
            problems.append(f"head.W: expected 2-d weights, got shape {W.shape}")
        else:
            C, d = W.shape
    if b is not None and (b.ndim != 1 or (C is not None and b.shape[0] != C)):
        problems.append(f"head.b: expected shape ({C},), got {b.shape}")

    def check_split(split, name, want_labels):
        if split.features.ndim != 2:
            problems.append(f"{name}.features: expected 2-d, got shape {split.features.shape}")
            return
        if split.logits.ndim != 2:
            problems.append(f"{name}.logits: expected 2-d, got shape {split.logits.shape}")
            return
        if d is not None and split.features.shape[1] != d:
            problems.append(
                f"{name}.features: width {split.features.shape[1]} != head.W width {d}")
        if C is not None and split.logits.shape[1] != C:
            problems.append(
                f"{name}.logits: {split.logits.shape[1]} columns != head.W classes {C}")
        if split.features.shape[0] != split.logits.shape[0]:
            problems.append(
                f"{name}: features rows {split.features.shape[0]} != logits rows "
                f"{split.logits.shape[0]}")
        if want_labels:
            lab = split.labels
            if lab.ndim != 1 or lab.shape[0] != split.features.shape[0]:
                problems.append(
                    f"{name}.labels: expected shape ({split.features.shape[0]},), got {lab.shape}")
            elif C is not None and lab.size and (lab.min() < 0 or lab.max() >= C):
                problems.append(
                    f"{name}.labels: values must lie in [0, {C}), found range "
                    f"[{lab.min()}, {lab.max()}]")

    check_split(id_train, "id_train", want_labels=True)
    check_split(id_test, "id_test", want_labels=True)
    for name, split in ood_sets.items():
        check_split(split, f"ood_sets[{name}]", want_labels=False)

    if class_names and C is not None and len(class_names) != C:
        problems.append(f"class_names: {len(class_names)} entries != {C} classes")

    if problems:
        raise ManifestError("manifest invalid:\n  " + "\n  ".join(problems))

    return DatasetManifest(
        id_train=id_train, id_test=id_test, W=W, b=b,
        ood_sets=ood_sets, class_names=list(class_names), ood_groups=ood_groups)
