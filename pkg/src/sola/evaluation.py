"""Diagnostics: full-sequence refinement, TSM analysis, temporal-sensitivity
statistics, similarity-decay curves, and a foreground/background linear probe.

All diagnostics are pure; corpus-level reductions run in a fixed order so
results are reproducible regardless of worker parallelism.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError, IoError, ShapeError
from .feature_store import FeatureSequence, sample_window
from .ioutil import atomic_write_bytes, atomic_write_text
from .model import SolaParams, sola_forward
from .similarity import Tsm, rescaled_cosine_matrix


@dataclass
class ProbeResult:
    train_accuracy: float
    test_accuracy: float
    epochs_run: int
    test_accuracy_curve: list[float] = field(default_factory=list)


@dataclass
class DecayCurve:
    """Mean similarity and pair count per snippet interval d."""

    intervals: np.ndarray
    mean_similarity: np.ndarray
    counts: np.ndarray


def transform(params: SolaParams, seq: FeatureSequence) -> FeatureSequence:
    """Refine a full sequence in one pass; shape and metadata are preserved."""
    refined = sola_forward(params, seq.data)
    return FeatureSequence(data=refined.astype(np.float32), video_id=seq.video_id,
                           snippet_stride_alpha=seq.snippet_stride_alpha)


def _sequence_data(seq) -> np.ndarray:
    return np.asarray(getattr(seq, "data", seq), dtype=np.float64)


def compute_tsm(seq) -> Tsm:
    """Symmetric rescaled-cosine TSM of one sequence, unit diagonal."""
    data = _sequence_data(seq)
    if data.ndim != 2 or data.shape[0] < 2:
        raise ShapeError(f"TSM needs at least 2 rows, got shape {data.shape}")
    values = rescaled_cosine_matrix(data)
    np.fill_diagonal(values, 1.0)
    return Tsm(values=values, value_range=(0.0, 1.0), diagonal_defined=True)


def _eligible(corpus, window_len: int):
    chosen = [seq for seq in corpus if seq.length >= window_len]
    if not chosen:
        raise ConfigError(f"no video is at least {window_len} snippets long")
    return chosen


def average_tsm(corpus: list[FeatureSequence], window_len: int, samples_per_video: int,
                seed) -> Tsm:
    """Element-wise mean TSM over sampled fixed-length windows."""
    if samples_per_video < 1:
        raise ConfigError(f"samples_per_video must be >= 1, got {samples_per_video}")
    rng = np.random.default_rng(seed)
    total = np.zeros((window_len, window_len))
    count = 0
    for seq in _eligible(corpus, window_len):
        for _ in range(samples_per_video):
            window = sample_window(seq, window_len, rng)
            total += compute_tsm(window.data).values
            count += 1
    return Tsm(values=total / count, value_range=(0.0, 1.0), diagonal_defined=True)


def similarity_decay(corpus: list[FeatureSequence], d_max: int, window_len: int,
                     samples_per_video: int, seed) -> DecayCurve:
    """Mean rescaled cosine over all sampled-window pairs at each interval d."""
    if not 1 <= d_max < window_len:
        raise ConfigError(f"d_max must satisfy 1 <= d_max < window_len, got {d_max}")
    rng = np.random.default_rng(seed)
    sums = np.zeros(d_max)
    counts = np.zeros(d_max, dtype=np.int64)
    for seq in _eligible(corpus, window_len):
        for _ in range(samples_per_video):
            window = sample_window(seq, window_len, rng)
            grid = rescaled_cosine_matrix(np.asarray(window.data, dtype=np.float64))
            for d in range(1, d_max + 1):
                diag = np.diagonal(grid, offset=d)
                sums[d - 1] += diag.sum()
                counts[d - 1] += diag.size
    return DecayCurve(intervals=np.arange(1, d_max + 1), mean_similarity=sums / counts,
                      counts=counts)


def temporal_sensitivity(seq) -> float:
    """Population standard deviation of the strict-upper-triangle TSM entries.

    Invariant under per-row positive rescaling of the features, since the
    underlying scores are cosines."""
    tsm = compute_tsm(seq)
    n = tsm.values.shape[0]
    iu = np.triu_indices(n, k=1)
    return float(np.std(tsm.values[iu]))


def corpus_sensitivity(corpus: list[FeatureSequence]) -> float:
    """Mean of per-video temporal sensitivities."""
    if not corpus:
        raise ConfigError("empty corpus")
    return float(np.mean([temporal_sensitivity(seq) for seq in corpus]))


def linear_probe(train_feats, train_labels, test_feats, test_labels,
                 epochs: int = 100, lr: float = 0.1, seed: int = 0) -> ProbeResult:
    """Single linear layer + bias on L2-normalized features, trained with
    logistic loss by full-batch gradient descent.  Labels are binary
    (foreground=1, background=0); test accuracy is recorded after each epoch."""
    x_train = np.asarray(train_feats, dtype=np.float64)
    x_test = np.asarray(test_feats, dtype=np.float64)
    y_train = np.asarray(train_labels, dtype=np.float64).ravel()
    y_test = np.asarray(test_labels, dtype=np.float64).ravel()
    if x_train.ndim != 2 or x_test.ndim != 2 or x_train.shape[1] != x_test.shape[1]:
        raise ShapeError(f"feature dims disagree: {x_train.shape} vs {x_test.shape}")
    if x_train.shape[0] != y_train.size or x_test.shape[0] != y_test.size:
        raise ShapeError("labels and features differ in length")
    classes = np.unique(y_train)
    if not np.all(np.isin(classes, (0.0, 1.0))) or not np.all(np.isin(np.unique(y_test), (0.0, 1.0))):
        raise DataError("labels must be binary 0/1")
    if classes.size < 2:
        raise DataError("training split holds a single class; the probe needs both")
    if epochs < 1:
        raise ConfigError(f"epochs must be >= 1, got {epochs}")

    def normalize(x):
        norms = np.linalg.norm(x, axis=1)
        return x / np.maximum(norms, 1e-12)[:, None]

    x_train = normalize(x_train)
    x_test = normalize(x_test)

    rng = np.random.default_rng(seed)
    w = rng.normal(0.0, 0.01, size=x_train.shape[1])
    b = 0.0
    curve = []
    n = x_train.shape[0]
    for _ in range(epochs):
        p = 1.0 / (1.0 + np.exp(-(x_train @ w + b)))
        err = p - y_train
        w -= lr * (x_train.T @ err) / n
        b -= lr * float(err.mean())
        curve.append(float(np.mean((x_test @ w + b > 0.0) == (y_test == 1.0))))
    train_acc = float(np.mean((x_train @ w + b > 0.0) == (y_train == 1.0)))
    return ProbeResult(train_accuracy=train_acc, test_accuracy=curve[-1], epochs_run=epochs,
                       test_accuracy_curve=curve)


def stack_labeled_rows(corpus: list[FeatureSequence], labels_by_video: dict) -> tuple[np.ndarray, np.ndarray]:
    """Concatenate all snippet rows and their labels, in corpus order."""
    feats, labels = [], []
    for seq in corpus:
        if seq.video_id not in labels_by_video:
            raise ConfigError(f"no labels for video {seq.video_id!r}")
        lab = labels_by_video[seq.video_id]
        if lab.length != seq.length:
            raise ShapeError(f"labels for {seq.video_id!r} have length {lab.length}, video has {seq.length}")
        feats.append(seq.data)
        labels.append(lab.labels)
    return np.concatenate(feats, axis=0), np.concatenate(labels, axis=0)


# --- exports -------------------------------------------------------------------


def export_heatmap(tsm: Tsm, path: str, fmt: str) -> None:
    """Write a TSM as CSV (9 significant digits, excluded diagonal empty) or
    as a binary 8-bit PGM (value v maps to round(255*v))."""
    if fmt == "csv":
        excluded = None if tsm.diagonal_defined else ~tsm.off_diagonal_mask()
        lines = []
        for i, row in enumerate(tsm.values):
            cells = []
            for j, v in enumerate(row):
                if excluded is not None and excluded[i, j]:
                    cells.append("")
                else:
                    cells.append(f"{v:.9g}")
            lines.append(",".join(cells))
        atomic_write_text(path, "\n".join(lines) + "\n")
    elif fmt == "pgm":
        values = tsm.values
        if not tsm.diagonal_defined:
            values = values.copy()
            np.fill_diagonal(values, 1.0)  # render excluded self-similarity as full brightness
        pixels = np.floor(255.0 * np.clip(values, 0.0, 1.0) + 0.5).astype(np.uint8)
        header = f"P5\n{values.shape[1]} {values.shape[0]}\n255\n".encode("ascii")
        atomic_write_bytes(path, header + pixels.tobytes())
    else:
        raise ConfigError(f"unsupported heatmap format {fmt!r}; use 'csv' or 'pgm'")


def read_heatmap_csv(path: str) -> Tsm:
    """Parse a CSV heatmap back; empty cells become an excluded diagonal."""
    try:
        with open(path, encoding="utf-8") as fh:
            rows = [line.rstrip("\n").split(",") for line in fh if line.strip("\n")]
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    values = np.array([[np.nan if cell == "" else float(cell) for cell in row] for row in rows])
    diagonal_defined = bool(np.all(np.isfinite(values)))
    return Tsm(values=values, value_range=(0.0, 1.0), diagonal_defined=diagonal_defined)


def export_decay_csv(curve: DecayCurve, path: str) -> None:
    lines = ["d,mean,count"]
    for d, mean, count in zip(curve.intervals, curve.mean_similarity, curve.counts):
        lines.append(f"{int(d)},{mean:.9g},{int(count)}")
    atomic_write_text(path, "\n".join(lines) + "\n")


def export_probe_csv(result: ProbeResult, path: str) -> None:
    lines = ["epoch,test_acc"]
    for epoch, acc in enumerate(result.test_accuracy_curve, start=1):
        lines.append(f"{epoch},{acc:.9g}")
    atomic_write_text(path, "\n".join(lines) + "\n")
