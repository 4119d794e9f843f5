"""The similarity-matching objective.

A temporal self-similarity matrix (TSM) holds pairwise similarity scores
between time positions of one sequence.  Training matches the predicted TSM of
a refined window against a fixed target TSM whose entry for positions i, j
depends only on their snippet interval d: sigma(K / d^2).  That target decays
with distance but never reaches zero, so remote pairs keep the similarity an
invariant shared video component would give them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError, DomainError, ShapeError
from .model import SolaParams, proj_forward

NORM_EPS = 1e-8    # added to each vector norm before dividing
PRED_CLAMP = 1e-7  # predictions clamped to [PRED_CLAMP, 1-PRED_CLAMP] before logs

GATHER_MODES = ("mean", "stride")


@dataclass
class MatchConfig:
    """Knobs of the matching objective."""

    K: float = 16.0
    step_s: int = 2
    interval_unit: str = "snippet"  # intervals are measured in original snippet indices
    gather_mode: str = "mean"

    def __post_init__(self):
        if not self.K > 0:
            raise ConfigError(f"K must be positive, got {self.K}")
        if int(self.step_s) != self.step_s or self.step_s < 1:
            raise ConfigError(f"step size must be an integer >= 1, got {self.step_s}")
        self.step_s = int(self.step_s)
        if self.interval_unit != "snippet":
            raise ConfigError(f"interval unit is fixed to 'snippet', got {self.interval_unit!r}")
        if self.gather_mode not in GATHER_MODES:
            raise ConfigError(f"gather mode must be one of {GATHER_MODES}, got {self.gather_mode!r}")


@dataclass
class Tsm:
    """Square (or rectangular) matrix of pairwise similarities.

    When diagonal_defined is false the diagonal holds NaN as a sentinel and is
    excluded from every reduction.
    """

    values: np.ndarray
    value_range: tuple[float, float] = (0.0, 1.0)
    diagonal_defined: bool = True

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ShapeError(f"TSM must be 2-D, got shape {self.values.shape}")
        if not self.diagonal_defined and self.values.shape[0] != self.values.shape[1]:
            raise ShapeError("only square TSMs can exclude their diagonal")
        counted = self.counted_values()
        lo, hi = self.value_range
        if not np.all(np.isfinite(counted)):
            raise DataError("TSM holds non-finite entries outside the excluded diagonal")
        if counted.size and (counted.min() < lo - 1e-12 or counted.max() > hi + 1e-12):
            raise DataError(
                f"TSM entries [{counted.min()}, {counted.max()}] leave the declared "
                f"range [{lo}, {hi}]"
            )

    @property
    def n_rows(self) -> int:
        return self.values.shape[0]

    def off_diagonal_mask(self) -> np.ndarray:
        if self.values.shape[0] != self.values.shape[1]:
            raise ShapeError("off-diagonal mask needs a square TSM")
        return ~np.eye(self.values.shape[0], dtype=bool)

    def counted_values(self) -> np.ndarray:
        """Entries participating in reductions (diagonal dropped when excluded)."""
        if self.diagonal_defined:
            return self.values.ravel()
        return self.values[self.off_diagonal_mask()]


def target_similarity(d, K: float):
    """Target similarity for positions separated by d snippets: sigmoid(K/d^2).

    Strictly decreasing in d, bounded in (0.5, 1) for finite d > 0."""
    d = np.asarray(d, dtype=np.float64)
    if not K > 0:
        raise DomainError(f"K must be positive, got {K}")
    if np.any(d <= 0):
        raise DomainError("interval d must be positive; d = 0 is undefined")
    out = 1.0 / (1.0 + np.exp(-K / (d * d)))
    return float(out) if out.ndim == 0 else out


def gather(z: np.ndarray, step_s: int, mode: str = "mean") -> np.ndarray:
    """Shorten a W x m sequence by step_s: mean-pool blocks of step_s rows
    ("mean") or keep every step_s-th row ("stride").  Trailing rows that do
    not fill a block are dropped; output has floor(W/step_s) rows."""
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2:
        raise ShapeError(f"expected a 2-D sequence, got shape {z.shape}")
    if int(step_s) != step_s or step_s < 1:
        raise ConfigError(f"step size must be an integer >= 1, got {step_s}")
    step_s = int(step_s)
    w_len = z.shape[0]
    if w_len < step_s:
        raise ShapeError(f"sequence of {w_len} rows is shorter than step {step_s}")
    n = w_len // step_s
    if mode == "mean":
        return z[:n * step_s].reshape(n, step_s, -1).mean(axis=1)
    if mode == "stride":
        return z[:n * step_s:step_s].copy()
    raise ConfigError(f"gather mode must be one of {GATHER_MODES}, got {mode!r}")


def rescaled_cosine(u: np.ndarray, v: np.ndarray) -> float:
    """Cosine similarity mapped affinely from [-1,1] to [0,1]."""
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    if u.shape != v.shape:
        raise ShapeError(f"vectors differ in length: {u.shape} vs {v.shape}")
    c = float(u @ v) / ((np.linalg.norm(u) + NORM_EPS) * (np.linalg.norm(v) + NORM_EPS))
    return min(max(0.5 * (c + 1.0), 0.0), 1.0)


def rescaled_cosine_matrix(a: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    """All pairwise rescaled cosines between rows of a and rows of b (or a)."""
    a = np.asarray(a, dtype=np.float64)
    b = a if b is None else np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"incompatible row matrices: {a.shape} vs {b.shape}")
    sims = a @ b.T
    ra = np.linalg.norm(a, axis=1) + NORM_EPS
    rb = np.linalg.norm(b, axis=1) + NORM_EPS
    return np.clip(0.5 * (sims / np.outer(ra, rb) + 1.0), 0.0, 1.0)


def build_target_tsm(n: int, cfg: MatchConfig) -> Tsm:
    """Target TSM on n gathered positions; entry (i,j) = sigmoid(K/(s|i-j|)^2).

    Intervals are measured in original snippet indices, so gathering with step
    s leaves the target for a given physical distance unchanged.  The diagonal
    (d = 0) is excluded."""
    if n < 2:
        raise ShapeError(f"target TSM needs n >= 2 positions, got {n}")
    idx = np.arange(n)
    dist = cfg.step_s * np.abs(idx[:, None] - idx[None, :]).astype(np.float64)
    values = np.full((n, n), np.nan)
    off = dist > 0
    values[off] = target_similarity(dist[off], cfg.K)
    return Tsm(values=values, value_range=(0.0, 1.0), diagonal_defined=False)


def predicted_tsm(z_gathered: np.ndarray, params: SolaParams) -> Tsm:
    """Asymmetric predicted TSM: entry (i,j) compares the plain row i against
    the projected row j, so the matrix is generally not symmetric."""
    z_gathered = np.asarray(z_gathered, dtype=np.float64)
    if z_gathered.ndim != 2 or z_gathered.shape[0] < 2:
        raise ShapeError(f"need at least 2 gathered rows, got shape {z_gathered.shape}")
    projected = proj_forward(params, z_gathered)
    values = rescaled_cosine_matrix(z_gathered, projected)
    np.fill_diagonal(values, np.nan)
    return Tsm(values=values, value_range=(0.0, 1.0), diagonal_defined=False)


def matching_loss(target: Tsm, pred: Tsm) -> float:
    """Soft-target binary cross entropy, averaged over off-diagonal positions.

    Predictions are clamped to [PRED_CLAMP, 1-PRED_CLAMP] before the logs; the
    diagonal of both matrices is excluded regardless of their flags."""
    if target.values.shape != pred.values.shape:
        raise ShapeError(
            f"target shape {target.values.shape} != prediction shape {pred.values.shape}"
        )
    if target.values.shape[0] != target.values.shape[1] or target.values.shape[0] < 2:
        raise ShapeError(f"loss needs a square TSM with n >= 2, got {target.values.shape}")
    mask = ~np.eye(target.values.shape[0], dtype=bool)
    lam = target.values[mask]
    p = np.clip(pred.values[mask], PRED_CLAMP, 1.0 - PRED_CLAMP)
    return float(np.mean(-(lam * np.log(p) + (1.0 - lam) * np.log1p(-p))))


def tsm_entropy(tsm: Tsm) -> float:
    """Mean binary entropy of the off-diagonal entries: the matching-loss floor."""
    mask = ~np.eye(tsm.values.shape[0], dtype=bool)
    lam = np.clip(tsm.values[mask], PRED_CLAMP, 1.0 - PRED_CLAMP)
    return float(np.mean(-(lam * np.log(lam) + (1.0 - lam) * np.log1p(-lam))))


def off_diagonal_distance(a: Tsm, b: Tsm) -> float:
    """Frobenius distance restricted to off-diagonal positions."""
    if a.values.shape != b.values.shape:
        raise ShapeError(f"shape mismatch: {a.values.shape} vs {b.values.shape}")
    mask = ~np.eye(a.values.shape[0], dtype=bool)
    diff = a.values[mask] - b.values[mask]
    return float(np.sqrt(np.sum(diff * diff)))
