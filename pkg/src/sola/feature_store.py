"""Snippet feature sequences: array-file I/O, synthetic corpora, window sampling.

Feature sequences live on disk as plain NPY v1.0 files, one per video, with an
optional tab-separated ``manifest.tsv`` (``filename<TAB>alpha`` per line, ``#``
comments) recording how many raw frames each snippet covers.  This is the only
module that touches feature data on disk.
"""

from __future__ import annotations

import ast
import csv
import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import (
    ConfigError,
    DataError,
    FormatError,
    IoError,
    ShapeError,
    SpecError,
    TooShortError,
    UnsupportedLayout,
)
from .ioutil import atomic_write_bytes, atomic_write_text

FOREGROUND = 1
BACKGROUND = 0

_MAGIC = b"\x93NUMPY"
_VERSION = b"\x01\x00"
_DESCRS = {"<f4": np.dtype("<f4"), "<f8": np.dtype("<f8")}


@dataclass
class FeatureSequence:
    """An L x m float32 matrix of snippet features; row tau is time index tau."""

    data: np.ndarray
    video_id: str = ""
    snippet_stride_alpha: int = 1

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ShapeError(f"feature sequence must be 2-D with L,m >= 1, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise DataError(f"feature sequence {self.video_id!r} contains non-finite entries")
        if int(self.snippet_stride_alpha) < 1:
            raise ConfigError(f"snippet stride must be >= 1, got {self.snippet_stride_alpha}")
        self.snippet_stride_alpha = int(self.snippet_stride_alpha)
        self.data = np.ascontiguousarray(arr, dtype=np.float32)

    @property
    def length(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]


@dataclass
class FeatureWindow:
    """Contiguous W x m slice of a feature sequence."""

    data: np.ndarray
    source_video: str
    start_index: int


@dataclass
class SegmentLabels:
    """Per-snippet foreground/background label and contiguous segment id."""

    labels: np.ndarray       # int8, FOREGROUND / BACKGROUND
    segment_ids: np.ndarray  # int32, constant within each contiguous segment

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int8)
        self.segment_ids = np.asarray(self.segment_ids, dtype=np.int32)
        if self.labels.shape != self.segment_ids.shape or self.labels.ndim != 1:
            raise ShapeError("labels and segment_ids must be 1-D and equal length")

    @property
    def length(self) -> int:
        return self.labels.shape[0]


@dataclass
class SyntheticSpec:
    """Recipe for a synthetic corpus: per-snippet feature is a unit-normalized
    mix c*g + a*p_k + b*eps of a video-level vector g, a per-segment prototype
    p_k, and fresh noise."""

    length_L: int
    dim_m: int
    n_segments: int
    min_seg_len: int = 1
    video_weight_c: float = 1.0
    segment_weight_a: float = 0.5
    noise_weight_b: float = 0.2
    background_fraction: float = 0.5

    def __post_init__(self):
        if self.length_L < 1 or self.dim_m < 1 or self.n_segments < 1 or self.min_seg_len < 1:
            raise SpecError("length_L, dim_m, n_segments, min_seg_len must all be >= 1")
        if self.n_segments * self.min_seg_len > self.length_L:
            raise SpecError(
                f"cannot fit {self.n_segments} segments of length >= {self.min_seg_len} "
                f"into {self.length_L} snippets"
            )
        weights = (self.video_weight_c, self.segment_weight_a, self.noise_weight_b)
        if any(w < 0 for w in weights):
            raise SpecError("component weights must be nonnegative")
        if all(w == 0 for w in weights):
            raise SpecError("at least one component weight must be positive")
        if not 0.0 <= self.background_fraction <= 1.0:
            raise SpecError(f"background_fraction must lie in [0,1], got {self.background_fraction}")


def _format_header(descr: str, shape: tuple[int, int]) -> bytes:
    # Pad with spaces so magic+version+hlen+header is a multiple of 64, '\n' last.
    body = "{'descr': '%s', 'fortran_order': False, 'shape': (%d, %d), }" % (descr, *shape)
    prefix = len(_MAGIC) + len(_VERSION) + 2
    pad = (64 - (prefix + len(body) + 1) % 64) % 64
    header = (body + " " * pad + "\n").encode("latin1")
    return _MAGIC + _VERSION + struct.pack("<H", len(header)) + header


def save_array_file(seq: FeatureSequence, path: str) -> None:
    """Write one feature sequence as an NPY v1.0 file (float32, C order)."""
    arr = np.ascontiguousarray(seq.data, dtype="<f4")
    atomic_write_bytes(path, _format_header("<f4", arr.shape) + arr.tobytes())


def load_array_file(path: str) -> FeatureSequence:
    """Read an NPY v1.0 file holding a 2-D C-order float32/float64 array.

    float64 payloads are narrowed to the float32 storage dtype (round to
    nearest).  The stem of the filename becomes the video id.
    """
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc

    if len(raw) < 10 or raw[:6] != _MAGIC:
        raise FormatError(f"{path}: not an NPY file (bad magic)")
    if raw[6:8] != _VERSION:
        raise FormatError(f"{path}: unsupported NPY version {raw[6]}.{raw[7]}")
    (hlen,) = struct.unpack("<H", raw[8:10])
    if len(raw) < 10 + hlen:
        raise FormatError(f"{path}: truncated header")
    try:
        header = ast.literal_eval(raw[10:10 + hlen].decode("latin1").strip())
    except (ValueError, SyntaxError) as exc:
        raise FormatError(f"{path}: unparseable header") from exc
    if not isinstance(header, dict) or not {"descr", "fortran_order", "shape"} <= set(header):
        raise FormatError(f"{path}: header missing required keys")

    descr = header["descr"]
    if descr not in _DESCRS:
        raise FormatError(f"{path}: element type must be <f4 or <f8, got {descr!r}")
    if header["fortran_order"]:
        raise UnsupportedLayout(f"{path}: Fortran-order arrays are not supported")
    shape = header["shape"]
    if not (isinstance(shape, tuple) and len(shape) == 2
            and all(isinstance(d, int) and d >= 1 for d in shape)):
        raise UnsupportedLayout(f"{path}: expected a 2-D shape with L,m >= 1, got {shape!r}")

    dtype = _DESCRS[descr]
    expected = shape[0] * shape[1] * dtype.itemsize
    payload = raw[10 + hlen:]
    if len(payload) != expected:
        raise FormatError(f"{path}: payload is {len(payload)} bytes, expected {expected}")
    arr = np.frombuffer(payload, dtype=dtype).reshape(shape)
    if not np.all(np.isfinite(arr)):
        raise DataError(f"{path}: non-finite entries in payload")
    arr = arr.astype(np.float32)
    if not np.all(np.isfinite(arr)):
        raise DataError(f"{path}: values overflow float32 storage")
    video_id = os.path.splitext(os.path.basename(path))[0]
    return FeatureSequence(data=arr, video_id=video_id)


def generate_synthetic(spec: SyntheticSpec, seed, video_id: str = "synthetic"):
    """Build one synthetic video: contiguous segments, unit-norm rows,
    a rounded background_fraction share of segments labeled background.

    Deterministic given (spec, seed).  Returns (FeatureSequence, SegmentLabels).
    """
    rng = np.random.default_rng(seed)
    L, m, n = spec.length_L, spec.dim_m, spec.n_segments

    extra = L - n * spec.min_seg_len
    cuts = np.sort(rng.integers(0, extra + 1, size=n - 1)) if n > 1 else np.empty(0, np.int64)
    seg_lens = spec.min_seg_len + np.diff(np.concatenate(([0], cuts, [extra])))

    g = rng.standard_normal(m)
    protos = rng.standard_normal((n, m))
    noise = rng.standard_normal((L, m))

    segment_ids = np.repeat(np.arange(n, dtype=np.int32), seg_lens)
    rows = (spec.video_weight_c * g
            + spec.segment_weight_a * protos[segment_ids]
            + spec.noise_weight_b * noise)
    norms = np.linalg.norm(rows, axis=1)
    if np.any(norms == 0.0):
        raise DataError("degenerate zero-norm synthetic row; adjust the weights")
    rows = rows / norms[:, None]

    if spec.background_fraction == 0.0:
        n_bg = 0
    else:
        n_bg = min(n, max(1, int(np.floor(spec.background_fraction * n + 0.5))))
    bg_segments = rng.choice(n, size=n_bg, replace=False)
    labels = np.full(L, FOREGROUND, dtype=np.int8)
    labels[np.isin(segment_ids, bg_segments)] = BACKGROUND

    seq = FeatureSequence(data=rows.astype(np.float32), video_id=video_id)
    return seq, SegmentLabels(labels=labels, segment_ids=segment_ids)


def sample_window(seq: FeatureSequence, window_len: int, rng) -> FeatureWindow:
    """Uniformly random contiguous window of the given length."""
    if window_len < 1:
        raise ConfigError(f"window length must be >= 1, got {window_len}")
    if seq.length < window_len:
        raise TooShortError(
            f"video {seq.video_id!r} has {seq.length} snippets, window needs {window_len}"
        )
    start = int(rng.integers(0, seq.length - window_len + 1))
    return FeatureWindow(data=seq.data[start:start + window_len], source_video=seq.video_id,
                         start_index=start)


# --- corpus directory layout -------------------------------------------------

MANIFEST_NAME = "manifest.tsv"
LABELS_NAME = "labels.csv"
_LABEL_NAMES = {FOREGROUND: "foreground", BACKGROUND: "background"}
_LABEL_CODES = {v: k for k, v in _LABEL_NAMES.items()}


def load_corpus(directory: str) -> list[FeatureSequence]:
    """Load every .npy file in a directory, applying manifest.tsv strides if present."""
    if not os.path.isdir(directory):
        raise IoError(f"corpus directory {directory!r} does not exist")
    names = sorted(fn for fn in os.listdir(directory) if fn.endswith(".npy"))
    if not names:
        raise ConfigError(f"no .npy feature files in {directory!r}")
    strides = {}
    manifest = os.path.join(directory, MANIFEST_NAME)
    if os.path.exists(manifest):
        with open(manifest, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                fields = line.split("\t")
                if len(fields) != 2:
                    raise FormatError(f"{manifest}: expected 'filename<TAB>alpha', got {line!r}")
                strides[fields[0]] = int(fields[1])
    corpus = []
    for name in names:
        seq = load_array_file(os.path.join(directory, name))
        if name in strides:
            seq.snippet_stride_alpha = strides[name]
        corpus.append(seq)
    return corpus


def write_manifest(directory: str, entries: list[tuple[str, int]]) -> None:
    lines = ["# filename\talpha"] + [f"{name}\t{alpha}" for name, alpha in entries]
    atomic_write_text(os.path.join(directory, MANIFEST_NAME), "\n".join(lines) + "\n")


def write_labels_csv(path: str, labels_by_video: dict[str, SegmentLabels]) -> None:
    rows = ["video_id,snippet_index,label,segment_id"]
    for video_id in sorted(labels_by_video):
        lab = labels_by_video[video_id]
        for idx in range(lab.length):
            rows.append(f"{video_id},{idx},{_LABEL_NAMES[int(lab.labels[idx])]},{int(lab.segment_ids[idx])}")
    atomic_write_text(path, "\n".join(rows) + "\n")


def read_labels_csv(path: str) -> dict[str, SegmentLabels]:
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            per_video: dict[str, list[tuple[int, int, int]]] = {}
            for row in reader:
                per_video.setdefault(row["video_id"], []).append(
                    (int(row["snippet_index"]), _LABEL_CODES[row["label"]], int(row["segment_id"]))
                )
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: malformed labels CSV ({exc})") from exc
    out = {}
    for video_id, triples in per_video.items():
        triples.sort()
        out[video_id] = SegmentLabels(
            labels=np.array([t[1] for t in triples]),
            segment_ids=np.array([t[2] for t in triples]),
        )
    return out
