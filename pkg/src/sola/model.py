"""Trainable networks: a shallow same-length 1D conv stack plus a two-layer projector.

The refinement stack is Conv(k, m->h) -> ReLU -> Conv(k, h->m) with an optional
residual skip, which starts the module near the identity map so the pretrained
features are refined rather than replaced.  Forward passes are pure functions
of (params, input) and compute in float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError

ALLOWED_KERNELS = (1, 3, 5, 7)

PARAM_FIELDS = (
    "conv1_w", "conv1_b", "conv2_w", "conv2_b",
    "proj1_w", "proj1_b", "proj2_w", "proj2_b",
)


@dataclass
class ModelConfig:
    dim_m: int
    hidden_h: int | None = None  # None -> same as dim_m
    kernel_k: int = 5
    residual_enabled: bool = True

    def __post_init__(self):
        if self.hidden_h is None:
            self.hidden_h = self.dim_m
        if self.dim_m < 1 or self.hidden_h < 1:
            raise ConfigError(f"dims must be positive, got m={self.dim_m} h={self.hidden_h}")
        if self.kernel_k not in ALLOWED_KERNELS:
            raise ConfigError(f"kernel size must be one of {ALLOWED_KERNELS}, got {self.kernel_k}")


@dataclass
class SolaParams:
    """All trainable tensors, stored float64."""

    conv1_w: np.ndarray  # (k, m, h)
    conv1_b: np.ndarray  # (h,)
    conv2_w: np.ndarray  # (k, h, m)
    conv2_b: np.ndarray  # (m,)
    proj1_w: np.ndarray  # (m, m)
    proj1_b: np.ndarray  # (m,)
    proj2_w: np.ndarray  # (m, m)
    proj2_b: np.ndarray  # (m,)
    residual_enabled: bool = True

    def __post_init__(self):
        for name in PARAM_FIELDS:
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        k, m, h = self.conv1_w.shape
        if k % 2 == 0:
            raise ConfigError(f"kernel size must be odd, got {k}")
        expected = {
            "conv1_w": (k, m, h), "conv1_b": (h,),
            "conv2_w": (k, h, m), "conv2_b": (m,),
            "proj1_w": (m, m), "proj1_b": (m,),
            "proj2_w": (m, m), "proj2_b": (m,),
        }
        for name, shape in expected.items():
            got = getattr(self, name).shape
            if got != shape:
                raise ShapeError(f"{name} has shape {got}, expected {shape}")

    @property
    def kernel_k(self) -> int:
        return self.conv1_w.shape[0]

    @property
    def dim_m(self) -> int:
        return self.conv1_w.shape[1]

    @property
    def hidden_h(self) -> int:
        return self.conv1_w.shape[2]

    def config(self) -> ModelConfig:
        return ModelConfig(dim_m=self.dim_m, hidden_h=self.hidden_h, kernel_k=self.kernel_k,
                           residual_enabled=self.residual_enabled)

    def tensors(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_FIELDS}

    def copy(self) -> "SolaParams":
        return SolaParams(*(getattr(self, name).copy() for name in PARAM_FIELDS),
                          residual_enabled=self.residual_enabled)


def init_params(cfg: ModelConfig, seed) -> SolaParams:
    """Uniform(-sqrt(6/fan_in), +sqrt(6/fan_in)) weights, zero biases."""
    rng = np.random.default_rng(seed)
    k, m, h = cfg.kernel_k, cfg.dim_m, cfg.hidden_h

    def uniform(fan_in, shape):
        bound = math.sqrt(6.0 / fan_in)
        return rng.uniform(-bound, bound, size=shape)

    return SolaParams(
        conv1_w=uniform(k * m, (k, m, h)),
        conv1_b=np.zeros(h),
        conv2_w=uniform(k * h, (k, h, m)),
        conv2_b=np.zeros(m),
        proj1_w=uniform(m, (m, m)),
        proj1_b=np.zeros(m),
        proj2_w=uniform(m, (m, m)),
        proj2_b=np.zeros(m),
        residual_enabled=cfg.residual_enabled,
    )


def conv1d_same(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Length-preserving 1D convolution with zero padding.

    Y[t, o] = bias[o] + sum_{j=-r..r} sum_i X[t+j, i] * weight[j+r, i, o],
    r = (k-1)/2, X taken as zero outside [0, W).
    """
    x = np.asarray(x, dtype=np.float64)
    weight = np.asarray(weight, dtype=np.float64)
    bias = np.asarray(bias, dtype=np.float64)
    if weight.ndim != 3:
        raise ShapeError(f"weight must be (k, c_in, c_out), got shape {weight.shape}")
    k, c_in, c_out = weight.shape
    if k % 2 == 0:
        raise ShapeError(f"kernel size must be odd, got {k}")
    if x.ndim != 2 or x.shape[1] != c_in or bias.shape != (c_out,):
        raise ShapeError(
            f"inconsistent shapes: x {x.shape}, weight {weight.shape}, bias {bias.shape}"
        )
    w_len = x.shape[0]
    r = (k - 1) // 2
    padded = np.zeros((w_len + 2 * r, c_in))
    padded[r:r + w_len] = x
    y = np.broadcast_to(bias, (w_len, c_out)).copy()
    for a in range(k):
        y += padded[a:a + w_len] @ weight[a]
    return y


def sola_forward(params: SolaParams, window: np.ndarray) -> np.ndarray:
    """Refine a W x m window; output shape always equals input shape."""
    x = np.asarray(window, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.dim_m:
        raise ShapeError(f"window shape {x.shape} does not match model dim {params.dim_m}")
    hidden = np.maximum(conv1d_same(x, params.conv1_w, params.conv1_b), 0.0)
    out = conv1d_same(hidden, params.conv2_w, params.conv2_b)
    if params.residual_enabled:
        out = out + x
    return out


def proj_forward(params: SolaParams, z: np.ndarray) -> np.ndarray:
    """Row-wise two-layer projector: relu(z @ W1 + b1) @ W2 + b2."""
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] != params.dim_m:
        raise ShapeError(f"input dim {z.shape[-1]} does not match model dim {params.dim_m}")
    hidden = np.maximum(z @ params.proj1_w + params.proj1_b, 0.0)
    return hidden @ params.proj2_w + params.proj2_b
