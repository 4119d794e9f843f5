"""Training: batch assembly, exact reverse-mode gradients, a finite-difference
oracle, Adam stepping, and checkpoints.

The gradient code differentiates the full pipeline window -> conv stack ->
gather -> (plain, projected) branch pair -> rescaled cosine grid -> soft-target
BCE by hand, in float64.  With stop_gradient_plain_branch the plain (row) side
of each cosine is held constant during differentiation, so conv parameters
receive gradient only through the projected branch; the finite-difference
oracle reproduces that by perturbing only the projected branch's parameters.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ConfigError,
    DomainError,
    FormatError,
    IoError,
    NumericsError,
    ShapeError,
)
from .feature_store import FeatureSequence, sample_window
from .ioutil import atomic_write_bytes, atomic_write_text
from .model import PARAM_FIELDS, ModelConfig, SolaParams, init_params
from .similarity import (
    NORM_EPS,
    PRED_CLAMP,
    MatchConfig,
    Tsm,
    build_target_tsm,
    off_diagonal_distance,
)


@dataclass
class TrainConfig:
    model: ModelConfig
    match: MatchConfig = field(default_factory=MatchConfig)
    window_len: int = 64
    batch_size: int = 256
    epochs: int = 10
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    stop_gradient_plain_branch: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.window_len < 2 * self.match.step_s:
            raise ConfigError(
                f"window of {self.window_len} yields fewer than 2 gathered positions "
                f"at step {self.match.step_s}"
            )
        if self.batch_size < 1:
            raise ConfigError(f"batch size must be >= 1, got {self.batch_size}")
        if not self.learning_rate > 0:
            raise ConfigError(f"learning rate must be positive, got {self.learning_rate}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")


@dataclass
class GradientSet:
    conv1_w: np.ndarray
    conv1_b: np.ndarray
    conv2_w: np.ndarray
    conv2_b: np.ndarray
    proj1_w: np.ndarray
    proj1_b: np.ndarray
    proj2_w: np.ndarray
    proj2_b: np.ndarray

    def tensors(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_FIELDS}


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]

    @classmethod
    def zeros(cls, params: SolaParams) -> "AdamState":
        return cls(
            m={name: np.zeros_like(arr) for name, arr in params.tensors().items()},
            v={name: np.zeros_like(arr) for name, arr in params.tensors().items()},
        )


@dataclass
class TrainHistory:
    """Per-step losses plus per-epoch summaries.

    epoch_avg_tsm_distance[0] is measured before training; entry e is measured
    after epoch e, always on the same held-out probe batch."""

    step_losses: list[float] = field(default_factory=list)
    epoch_mean_losses: list[float] = field(default_factory=list)
    epoch_avg_tsm_distance: list[float] = field(default_factory=list)


# --- batched forward/backward ------------------------------------------------


def _check_finite(name: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericsError(f"non-finite values in tensor {name!r}")


def _conv_batch(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """conv1d_same applied to a (B, W, c_in) batch."""
    k = weight.shape[0]
    r = (k - 1) // 2
    b_sz, w_len, c_in = x.shape
    padded = np.zeros((b_sz, w_len + 2 * r, c_in))
    padded[:, r:r + w_len] = x
    y = np.broadcast_to(bias, (b_sz, w_len, weight.shape[2])).copy()
    for a in range(k):
        y += padded[:, a:a + w_len] @ weight[a]
    return y


def _conv_batch_backward(x: np.ndarray, weight: np.ndarray, d_out: np.ndarray):
    """Gradients of a batched conv1d_same w.r.t. input, weight, and bias."""
    k = weight.shape[0]
    r = (k - 1) // 2
    b_sz, w_len, c_in = x.shape
    padded = np.zeros((b_sz, w_len + 2 * r, c_in))
    padded[:, r:r + w_len] = x
    d_flat = d_out.reshape(-1, d_out.shape[2])
    d_weight = np.empty_like(weight)
    for a in range(k):
        d_weight[a] = padded[:, a:a + w_len].reshape(-1, c_in).T @ d_flat
    d_bias = d_flat.sum(axis=0)
    d_padded = np.zeros_like(padded)
    for a in range(k):
        d_padded[:, a:a + w_len] += d_out @ weight[a].T
    return d_padded[:, r:r + w_len], d_weight, d_bias


def _stack_forward(params: SolaParams, x: np.ndarray, match: MatchConfig) -> dict:
    """Conv stack + gather + projector + cosine grid on a (B, W, m) batch,
    keeping every intermediate needed by the backward pass."""
    pre1 = _conv_batch(x, params.conv1_w, params.conv1_b)
    hid = np.maximum(pre1, 0.0)
    pre2 = _conv_batch(hid, params.conv2_w, params.conv2_b)
    z = pre2 + x if params.residual_enabled else pre2

    s = match.step_s
    n = x.shape[1] // s
    if n < 2:
        raise ShapeError(f"window of {x.shape[1]} yields {n} gathered rows at step {s}; need >= 2")
    if match.gather_mode == "mean":
        z_g = z[:, :n * s].reshape(x.shape[0], n, s, -1).mean(axis=2)
    else:
        z_g = z[:, :n * s:s]

    proj_pre = z_g @ params.proj1_w + params.proj1_b
    proj_hid = np.maximum(proj_pre, 0.0)
    projected = proj_hid @ params.proj2_w + params.proj2_b

    norm_u = np.linalg.norm(z_g, axis=2)
    norm_p = np.linalg.norm(projected, axis=2)
    ru = norm_u + NORM_EPS
    rp = norm_p + NORM_EPS
    dots = z_g @ projected.transpose(0, 2, 1)
    cos = dots / (ru[:, :, None] * rp[:, None, :])
    p_raw = 0.5 * (cos + 1.0)

    return {
        "x": x, "pre1": pre1, "hid": hid, "pre2": pre2, "z": z, "z_g": z_g,
        "proj_pre": proj_pre, "proj_hid": proj_hid, "projected": projected,
        "norm_u": norm_u, "norm_p": norm_p, "ru": ru, "rp": rp,
        "cos": cos, "p_raw": p_raw, "n": n, "s": s,
    }


def _batch_loss_from_grid(p_raw: np.ndarray, lam: np.ndarray, mask: np.ndarray) -> float:
    p = np.clip(p_raw, PRED_CLAMP, 1.0 - PRED_CLAMP)
    lam_safe = np.where(mask, lam, 0.5)
    p_safe = np.where(mask, p, 0.5)
    bce = -(lam_safe * np.log(p_safe) + (1.0 - lam_safe) * np.log1p(-p_safe))
    return float(bce[:, mask].sum() / (p_raw.shape[0] * mask.sum()))


def _as_batch(windows) -> np.ndarray:
    if isinstance(windows, np.ndarray):
        batch = np.asarray(windows, dtype=np.float64)
    else:
        batch = np.stack([np.asarray(getattr(w, "data", w), dtype=np.float64) for w in windows])
    if batch.ndim != 3 or batch.shape[0] < 1:
        raise ShapeError(f"windows must stack to (batch, W, m), got shape {batch.shape}")
    return batch


def loss_and_grad(params: SolaParams, windows, cfg: TrainConfig):
    """Batch-mean matching loss and its exact gradient for every parameter."""
    x = _as_batch(windows)
    _check_finite("windows", x)
    for name, arr in params.tensors().items():
        _check_finite(name, arr)

    cache = _stack_forward(params, x, cfg.match)
    n = cache["n"]
    target = build_target_tsm(n, cfg.match)
    mask = ~np.eye(n, dtype=bool)
    lam = np.where(mask, target.values, 0.5)
    loss = _batch_loss_from_grid(cache["p_raw"], target.values, mask)
    _check_finite("loss", np.asarray(loss))

    b_sz = x.shape[0]
    count = int(mask.sum())
    p_raw = cache["p_raw"]
    p = np.clip(p_raw, PRED_CLAMP, 1.0 - PRED_CLAMP)
    # d loss / d p_hat; zero on the diagonal and wherever the clamp is active
    active = mask & (p_raw > PRED_CLAMP) & (p_raw < 1.0 - PRED_CLAMP)
    d_p = np.where(active, (-(lam / p) + (1.0 - lam) / (1.0 - p)) / (b_sz * count), 0.0)
    d_cos = 0.5 * d_p

    z_g, projected = cache["z_g"], cache["projected"]
    ru, rp = cache["ru"], cache["rp"]
    cos = cache["cos"]
    d_dots = d_cos / (ru[:, :, None] * rp[:, None, :])

    # projected branch: through dots and through the projected-row norm
    d_projected = d_dots.transpose(0, 2, 1) @ z_g
    d_rp = -(d_cos * cos).sum(axis=1) / rp
    norm_p_safe = np.where(cache["norm_p"] > 0.0, cache["norm_p"], 1.0)
    d_projected += (d_rp / norm_p_safe)[:, :, None] * projected

    # plain branch: dropped entirely under stop-gradient
    if cfg.stop_gradient_plain_branch:
        d_z_g = np.zeros_like(z_g)
    else:
        d_z_g = d_dots @ projected
        d_ru = -(d_cos * cos).sum(axis=2) / ru
        norm_u_safe = np.where(cache["norm_u"] > 0.0, cache["norm_u"], 1.0)
        d_z_g += (d_ru / norm_u_safe)[:, :, None] * z_g

    # projector backward; its input gradient reaches the conv stack either way
    proj_hid, proj_pre = cache["proj_hid"], cache["proj_pre"]
    m_dim = z_g.shape[2]
    d_proj_flat = d_projected.reshape(-1, m_dim)
    d_proj2_w = proj_hid.reshape(-1, m_dim).T @ d_proj_flat
    d_proj2_b = d_proj_flat.sum(axis=0)
    d_proj_hid = d_projected @ params.proj2_w.T
    d_proj_pre = d_proj_hid * (proj_pre > 0.0)
    d_pre_flat = d_proj_pre.reshape(-1, m_dim)
    d_proj1_w = z_g.reshape(-1, m_dim).T @ d_pre_flat
    d_proj1_b = d_pre_flat.sum(axis=0)
    d_z_g += d_proj_pre @ params.proj1_w.T

    # undo the gather
    s = cache["s"]
    d_z = np.zeros_like(cache["z"])
    if cfg.match.gather_mode == "mean":
        d_z[:, :n * s] = np.repeat(d_z_g / s, s, axis=1)
    else:
        d_z[:, :n * s:s] = d_z_g

    # conv stack backward (residual passes d_z straight to the second conv)
    d_hid, d_conv2_w, d_conv2_b = _conv_batch_backward(cache["hid"], params.conv2_w, d_z)
    d_pre1 = d_hid * (cache["pre1"] > 0.0)
    _, d_conv1_w, d_conv1_b = _conv_batch_backward(x, params.conv1_w, d_pre1)

    grads = GradientSet(
        conv1_w=d_conv1_w, conv1_b=d_conv1_b, conv2_w=d_conv2_w, conv2_b=d_conv2_b,
        proj1_w=d_proj1_w, proj1_b=d_proj1_b, proj2_w=d_proj2_w, proj2_b=d_proj2_b,
    )
    for name, arr in grads.tensors().items():
        _check_finite(f"grad.{name}", arr)
    return loss, grads


def _two_branch_loss(params_plain: SolaParams, params_pred: SolaParams, x: np.ndarray,
                     cfg: TrainConfig, plain_gathered: np.ndarray | None = None) -> float:
    """Loss with the plain branch computed from params_plain and the projected
    branch from params_pred; equal parameters give the training loss."""
    pred_cache = _stack_forward(params_pred, x, cfg.match)
    if plain_gathered is None:
        plain_gathered = _stack_forward(params_plain, x, cfg.match)["z_g"]
    ru = np.linalg.norm(plain_gathered, axis=2) + NORM_EPS
    rp = pred_cache["rp"]
    dots = plain_gathered @ pred_cache["projected"].transpose(0, 2, 1)
    p_raw = 0.5 * (dots / (ru[:, :, None] * rp[:, None, :]) + 1.0)
    n = pred_cache["n"]
    target = build_target_tsm(n, cfg.match)
    mask = ~np.eye(n, dtype=bool)
    return _batch_loss_from_grid(p_raw, target.values, mask)


def finite_diff_grad(params: SolaParams, windows, cfg: TrainConfig, h_fd: float = 1e-4) -> GradientSet:
    """Central-difference gradient oracle, honoring the stop-gradient setting
    by perturbing only the projected branch's parameter copy."""
    if not h_fd > 0:
        raise DomainError(f"finite-difference step must be positive, got {h_fd}")
    x = _as_batch(windows)
    stop = cfg.stop_gradient_plain_branch
    plain_gathered = _stack_forward(params, x, cfg.match)["z_g"] if stop else None

    out = {}
    for name in PARAM_FIELDS:
        base = getattr(params, name)
        grad = np.zeros_like(base)
        for idx in np.ndindex(base.shape):
            plus = params.copy()
            getattr(plus, name)[idx] += h_fd
            minus = params.copy()
            getattr(minus, name)[idx] -= h_fd
            if stop:
                loss_p = _two_branch_loss(params, plus, x, cfg, plain_gathered)
                loss_m = _two_branch_loss(params, minus, x, cfg, plain_gathered)
            else:
                loss_p = _two_branch_loss(plus, plus, x, cfg)
                loss_m = _two_branch_loss(minus, minus, x, cfg)
            grad[idx] = (loss_p - loss_m) / (2.0 * h_fd)
        out[name] = grad
    return GradientSet(**out)


def max_relative_gradient_error(analytic: GradientSet, numeric: GradientSet) -> float:
    """max over parameters of |a-b| / max(1e-8, |a|+|b|)."""
    worst = 0.0
    for name in PARAM_FIELDS:
        a = getattr(analytic, name).ravel()
        b = getattr(numeric, name).ravel()
        denom = np.maximum(1e-8, np.abs(a) + np.abs(b))
        worst = max(worst, float(np.max(np.abs(a - b) / denom)) if a.size else 0.0)
    return worst


def run_small_gradient_check(kernel_k: int, stop_gradient: bool, gather_mode: str = "mean",
                             seed: int = 0, h_fd: float = 1e-4) -> float:
    """Gradient check on a small random instance; returns the max relative error."""
    cfg = TrainConfig(
        model=ModelConfig(dim_m=8, hidden_h=8, kernel_k=kernel_k),
        match=MatchConfig(step_s=2, gather_mode=gather_mode),
        window_len=16, batch_size=2, epochs=0,
        stop_gradient_plain_branch=stop_gradient, seed=seed,
    )
    rng = np.random.default_rng(seed)
    params = init_params(cfg.model, seed)
    windows = rng.standard_normal((2, cfg.window_len, cfg.model.dim_m))
    _, analytic = loss_and_grad(params, windows, cfg)
    numeric = finite_diff_grad(params, windows, cfg, h_fd)
    return max_relative_gradient_error(analytic, numeric)


# --- optimization ------------------------------------------------------------


def adam_step(params: SolaParams, grads: GradientSet, state: AdamState, cfg: TrainConfig,
              t: int):
    """One Adam update with bias correction; returns (new params, new state)."""
    if t < 1:
        raise DomainError(f"step index must be >= 1, got {t}")
    b1, b2, eps, lr = cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps, cfg.learning_rate
    new_tensors = {}
    new_m, new_v = {}, {}
    for name, value in params.tensors().items():
        g = getattr(grads, name)
        if g.shape != value.shape or state.m[name].shape != value.shape:
            raise ShapeError(f"gradient/state shape mismatch on {name}")
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * (g * g)
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        new_tensors[name] = value - lr * m_hat / (np.sqrt(v_hat) + eps)
        new_m[name], new_v[name] = m, v
    new_params = SolaParams(**new_tensors, residual_enabled=params.residual_enabled)
    return new_params, AdamState(m=new_m, v=new_v)


def _sample_batch(eligible: list[FeatureSequence], window_len: int, batch_size: int,
                  rng) -> np.ndarray:
    batch = np.empty((batch_size, window_len, eligible[0].dim))
    for i in range(batch_size):
        seq = eligible[int(rng.integers(0, len(eligible)))]
        batch[i] = sample_window(seq, window_len, rng).data
    return batch


def _avg_predicted_tsm(params: SolaParams, batch: np.ndarray, match: MatchConfig) -> Tsm:
    cache = _stack_forward(params, batch, match)
    values = np.clip(cache["p_raw"], 0.0, 1.0).mean(axis=0)
    np.fill_diagonal(values, np.nan)
    return Tsm(values=values, value_range=(0.0, 1.0), diagonal_defined=False)


def train(corpus: list[FeatureSequence], cfg: TrainConfig):
    """Optimize against the matching objective.  Returns (params, history).

    Videos shorter than the window are skipped; each step samples batch_size
    windows from videos chosen uniformly with replacement.  One epoch is
    ceil(total eligible windows / batch_size) steps.  Deterministic given
    (corpus, cfg, seed)."""
    dims = {seq.dim for seq in corpus}
    if len(dims) > 1:
        raise ConfigError(f"corpus mixes feature dims {sorted(dims)}")
    if corpus and corpus[0].dim != cfg.model.dim_m:
        raise ConfigError(f"corpus dim {corpus[0].dim} != model dim {cfg.model.dim_m}")
    eligible = [seq for seq in corpus if seq.length >= cfg.window_len]
    if not eligible:
        raise ConfigError(
            f"no video is at least {cfg.window_len} snippets long; nothing to train on"
        )

    params = init_params(cfg.model, cfg.seed)
    history = TrainHistory()
    if cfg.epochs == 0:
        return params, history

    total_windows = sum(seq.length - cfg.window_len + 1 for seq in eligible)
    steps_per_epoch = math.ceil(total_windows / cfg.batch_size)
    sample_rng = np.random.default_rng([cfg.seed, 1])
    probe_rng = np.random.default_rng([cfg.seed, 2])
    probe_batch = _sample_batch(eligible, cfg.window_len, cfg.batch_size, probe_rng)
    target = build_target_tsm(cfg.window_len // cfg.match.step_s, cfg.match)

    history.epoch_avg_tsm_distance.append(
        off_diagonal_distance(_avg_predicted_tsm(params, probe_batch, cfg.match), target)
    )

    state = AdamState.zeros(params)
    t = 0
    for _ in range(cfg.epochs):
        epoch_losses = []
        for _ in range(steps_per_epoch):
            batch = _sample_batch(eligible, cfg.window_len, cfg.batch_size, sample_rng)
            loss, grads = loss_and_grad(params, batch, cfg)
            t += 1
            params, state = adam_step(params, grads, state, cfg, t)
            epoch_losses.append(loss)
        history.step_losses.extend(epoch_losses)
        history.epoch_mean_losses.append(float(np.mean(epoch_losses)))
        history.epoch_avg_tsm_distance.append(
            off_diagonal_distance(_avg_predicted_tsm(params, probe_batch, cfg.match), target)
        )
    return params, history


def write_history_csv(history: TrainHistory, path: str) -> None:
    """CSV with columns step,loss,epoch,avg_tsm_distance.

    Row 0 is the pre-training probe; the distance column is filled on the last
    step of each epoch and empty elsewhere."""
    lines = ["step,loss,epoch,avg_tsm_distance"]
    if history.epoch_avg_tsm_distance:
        lines.append(f"0,,0,{history.epoch_avg_tsm_distance[0]!r}")
    epochs = len(history.epoch_mean_losses)
    steps_per_epoch = len(history.step_losses) // epochs if epochs else 0
    for i, loss in enumerate(history.step_losses, start=1):
        epoch = (i - 1) // steps_per_epoch + 1
        dist = ""
        if i % steps_per_epoch == 0:
            dist = repr(history.epoch_avg_tsm_distance[epoch])
        lines.append(f"{i},{loss!r},{epoch},{dist}")
    atomic_write_text(path, "\n".join(lines) + "\n")


# --- checkpoints ---------------------------------------------------------------

_CKPT_TAG = "SOLA1"


def save_checkpoint(params: SolaParams, cfg: ModelConfig, path: str) -> None:
    """Text header "SOLA1 k h m residual" then (name, shape, float64 LE payload)
    records, one per parameter tensor in a fixed order."""
    if (params.kernel_k, params.hidden_h, params.dim_m, params.residual_enabled) != (
            cfg.kernel_k, cfg.hidden_h, cfg.dim_m, cfg.residual_enabled):
        raise ConfigError("parameter shapes do not match the model config being saved")
    blob = bytearray()
    blob += f"{_CKPT_TAG} {cfg.kernel_k} {cfg.hidden_h} {cfg.dim_m} {int(cfg.residual_enabled)}\n".encode("ascii")
    for name in PARAM_FIELDS:
        arr = np.ascontiguousarray(getattr(params, name), dtype="<f8")
        blob += (" ".join([name, *map(str, arr.shape)]) + "\n").encode("ascii")
        blob += arr.tobytes()
    atomic_write_bytes(path, bytes(blob))


def _read_line(raw: bytes, offset: int, path: str):
    end = raw.find(b"\n", offset, offset + 256)
    if end < 0:
        raise FormatError(f"{path}: missing record header line at byte {offset}")
    try:
        return raw[offset:end].decode("ascii").split(), end + 1
    except UnicodeDecodeError as exc:
        raise FormatError(f"{path}: undecodable record header") from exc


def load_checkpoint(path: str, expected: ModelConfig | None = None):
    """Read a checkpoint; returns (params, model config).

    A corrupt or internally inconsistent file raises FormatError; a valid file
    whose header disagrees with `expected` raises ConfigError."""
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc

    fields, offset = _read_line(raw, 0, path)
    if len(fields) != 5 or fields[0] != _CKPT_TAG:
        raise FormatError(f"{path}: bad checkpoint header")
    try:
        k, h, m, residual = int(fields[1]), int(fields[2]), int(fields[3]), int(fields[4])
    except ValueError as exc:
        raise FormatError(f"{path}: non-numeric checkpoint header") from exc
    if k % 2 == 0 or k < 1 or h < 1 or m < 1 or residual not in (0, 1):
        raise FormatError(f"{path}: invalid header values k={k} h={h} m={m} residual={residual}")
    cfg = ModelConfig(dim_m=m, hidden_h=h, kernel_k=k, residual_enabled=bool(residual))
    if expected is not None and cfg != expected:
        raise ConfigError(f"checkpoint is {cfg}, caller expects {expected}")

    shapes = {
        "conv1_w": (k, m, h), "conv1_b": (h,),
        "conv2_w": (k, h, m), "conv2_b": (m,),
        "proj1_w": (m, m), "proj1_b": (m,),
        "proj2_w": (m, m), "proj2_b": (m,),
    }
    tensors = {}
    for name in PARAM_FIELDS:
        fields, offset = _read_line(raw, offset, path)
        if not fields or fields[0] != name:
            raise FormatError(f"{path}: expected record {name!r}, found {fields[:1]!r}")
        try:
            shape = tuple(int(d) for d in fields[1:])
        except ValueError as exc:
            raise FormatError(f"{path}: non-numeric shape for {name}") from exc
        if shape != shapes[name]:
            raise FormatError(f"{path}: {name} stored as {shape}, header implies {shapes[name]}")
        nbytes = int(np.prod(shape)) * 8
        payload = raw[offset:offset + nbytes]
        if len(payload) != nbytes:
            raise FormatError(f"{path}: truncated payload for {name}")
        tensors[name] = np.frombuffer(payload, dtype="<f8").reshape(shape).copy()
        offset += nbytes
    if offset != len(raw):
        raise FormatError(f"{path}: {len(raw) - offset} trailing bytes after last record")
    return SolaParams(**tensors, residual_enabled=bool(residual)), cfg
