"""Visual feature extraction and spatial attention.

A small conv stack turns 64x64x3 byte observations into a coarse
feature map.  Two attention mechanisms can modulate that map before it
reaches the policy trunk:

- FovealAttention: a gaze head regresses five parameters of a 2-d
  Gaussian (center, per-axis scale, correlation) and the map is
  reweighted by the Gaussian evaluated at feature-cell centers.
- PatchAttention: a per-cell sigmoid gate from a 1x1 conv, the dense
  "attend everywhere" baseline.

Both start neutral: the gaze head's final layer and the patch conv are
zero-initialized, so the first forward pass attends to the image center
(or gates everything at 0.5) regardless of the backbone init.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import Conv2d, Linear, Module
from .tensor import DTensor, ShapeError

SIGMA_LOG_CLAMP = 2.0
RHO_LIMIT = 0.95


def conv_output_hw(hw, kernel, stride):
    h, w = hw
    return (h - kernel) // stride + 1, (w - kernel) // stride + 1


def backbone_feature_hw(hw, kernels=(8, 4, 3), strides=(4, 2, 1)):
    """Spatial size of the feature map for a given input size."""
    for k, s in zip(kernels, strides):
        hw = conv_output_hw(hw, k, s)
        if hw[0] < 1 or hw[1] < 1:
            raise ShapeError(f"backbone: input too small, stage with kernel {k} got {hw}")
    return hw


class ConvBackbone(Module):
    """Three-layer conv encoder: 3 -> 32 -> 64 -> 64 channels.

    Kernels 8/4/3 with strides 4/2/1 map a 64x64 input to a 4x4 map.
    """

    def __init__(self, rng, in_hw=(64, 64), in_channels=3, dtype=np.float32):
        self.in_hw = tuple(in_hw)
        self.in_channels = in_channels
        self.conv1 = Conv2d(in_channels, 32, 8, stride=4, rng=rng, dtype=dtype)
        self.conv2 = Conv2d(32, 64, 4, stride=2, rng=rng, dtype=dtype)
        self.conv3 = Conv2d(64, 64, 3, stride=1, rng=rng, dtype=dtype)
        self.out_channels = 64
        self.out_hw = backbone_feature_hw(self.in_hw)
        if min(self.out_hw) < 4:
            raise ShapeError(
                f"backbone: feature map {self.out_hw} too small for the gaze head (needs >= 4)"
            )
        self.dtype = dtype

    def __call__(self, x):
        """x: DTensor (B, C, H, W) of floats in [0, 1]."""
        if x.ndim != 4 or x.shape[1] != self.in_channels or x.shape[2:] != self.in_hw:
            raise ShapeError(
                f"backbone: expected (B, {self.in_channels}, {self.in_hw[0]}, {self.in_hw[1]}), "
                f"got {x.shape}"
            )
        h = T.relu(self.conv1(x))
        h = T.relu(self.conv2(h))
        return T.relu(self.conv3(h))

    def preprocess(self, obs):
        """uint8 (B, H, W, 3) observations -> constant DTensor (B, 3, H, W) in [0, 1]."""
        obs = np.asarray(obs)
        if obs.ndim == 3:
            obs = obs[None]
        if obs.dtype != np.uint8:
            raise ValueError(f"backbone: observations must be uint8, got {obs.dtype}")
        if obs.shape[1:3] != self.in_hw or obs.shape[3] != self.in_channels:
            raise ShapeError(
                f"backbone: observation shape {obs.shape[1:]} does not match "
                f"({self.in_hw[0]}, {self.in_hw[1]}, {self.in_channels})"
            )
        scaled = obs.astype(self.dtype) / np.asarray(255.0, dtype=self.dtype)
        return DTensor(np.ascontiguousarray(scaled.transpose(0, 3, 1, 2)), dtype=self.dtype)

    def encode(self, obs):
        return self(self.preprocess(obs))


@dataclass
class GazeParams:
    """One gaze fixation: center, per-axis spread, and covariance cross-term."""

    mu_x: float
    mu_y: float
    sigma_x: float
    sigma_y: float
    sigma_xy: float

    def covariance(self):
        return np.array(
            [
                [self.sigma_x**2, self.sigma_xy],
                [self.sigma_xy, self.sigma_y**2],
            ]
        )


class GazeHead(Module):
    """Regresses raw gaze parameters from the feature map.

    conv3x3 -> relu -> maxpool2 -> linear to 5 outputs.  The final
    layer is zero-initialized so raw == 0 at the first forward pass.
    """

    def __init__(self, rng, in_channels=64, feat_hw=(4, 4), dtype=np.float32):
        self.conv = Conv2d(in_channels, 32, 3, stride=1, rng=rng, dtype=dtype)
        ch, cw = conv_output_hw(feat_hw, 3, 1)
        ph, pw = ch // 2, cw // 2
        if ph < 1 or pw < 1:
            raise ShapeError(f"gaze head: feature map {feat_hw} too small")
        self.flat_dim = 32 * ph * pw
        self.fc = Linear(self.flat_dim, 5, zero_init=True, dtype=dtype)

    def __call__(self, f):
        h = T.maxpool2d(T.relu(self.conv(f)), 2)
        return self.fc(T.reshape(h, (f.shape[0], self.flat_dim)))


def raw_to_gaze(raw, sigma_target):
    """Map raw head outputs (B, 5) to constrained gaze parameters.

    mu through a sigmoid, sigma as sigma_target * exp(clamped log-scale),
    correlation through 0.95 * tanh.  The implied covariance is positive
    definite by construction.
    """
    if raw.ndim != 2 or raw.shape[1] != 5:
        raise ShapeError(f"raw_to_gaze: expected (B, 5), got {raw.shape}")
    mu_x = T.sigmoid(raw[:, 0])
    mu_y = T.sigmoid(raw[:, 1])
    sigma_x = T.scale(T.exp(T.clamp(raw[:, 2], -SIGMA_LOG_CLAMP, SIGMA_LOG_CLAMP)), sigma_target)
    sigma_y = T.scale(T.exp(T.clamp(raw[:, 3], -SIGMA_LOG_CLAMP, SIGMA_LOG_CLAMP)), sigma_target)
    rho = T.scale(T.tanh(raw[:, 4]), RHO_LIMIT)
    sigma_xy = T.mul(rho, T.mul(sigma_x, sigma_y))
    return {
        "mu_x": mu_x,
        "mu_y": mu_y,
        "sigma_x": sigma_x,
        "sigma_y": sigma_y,
        "sigma_xy": sigma_xy,
        "rho": rho,
    }


def gaze_params_from_raw(raw_row, sigma_target):
    """Single-row numpy version of raw_to_gaze, for logging and export."""
    raw_row = np.asarray(raw_row, dtype=np.float64).reshape(5)
    sx = sigma_target * np.exp(np.clip(raw_row[2], -SIGMA_LOG_CLAMP, SIGMA_LOG_CLAMP))
    sy = sigma_target * np.exp(np.clip(raw_row[3], -SIGMA_LOG_CLAMP, SIGMA_LOG_CLAMP))
    rho = RHO_LIMIT * np.tanh(raw_row[4])
    return GazeParams(
        mu_x=float(1.0 / (1.0 + np.exp(-raw_row[0]))),
        mu_y=float(1.0 / (1.0 + np.exp(-raw_row[1]))),
        sigma_x=float(sx),
        sigma_y=float(sy),
        sigma_xy=float(rho * sx * sy),
    )


def cell_centers(h, w, dtype=np.float32):
    """Normalized coordinates of feature-cell centers: (x + 0.5) / W."""
    xs = (np.arange(w, dtype=dtype) + 0.5) / w
    ys = (np.arange(h, dtype=dtype) + 0.5) / h
    return np.meshgrid(xs, ys)  # each (h, w), x varies along columns


def gaussian_weight_map(params, h, w):
    """Anisotropic Gaussian attention weights over an h-by-w grid.

    Evaluates exp(-0.5 * d^T Sigma^{-1} d) at cell centers; the analytic
    peak at the gaze center is 1, so all values lie in (0, 1] (far tails
    may underflow to 0 in float).  Returns a DTensor of shape
    (B, 1, h, w) differentiable w.r.t. the gaze parameters.
    """
    if h < 1 or w < 1:
        raise ShapeError(f"gaussian_weight_map: invalid grid ({h}, {w})")
    b = params["mu_x"].shape[0]
    xg, yg = cell_centers(h, w, dtype=params["mu_x"].dtype)
    xg = DTensor(xg[None], dtype=params["mu_x"].dtype)
    yg = DTensor(yg[None], dtype=params["mu_x"].dtype)

    def col(t):
        return T.reshape(t, (b, 1, 1))

    dx = T.sub(xg, col(params["mu_x"]))
    dy = T.sub(yg, col(params["mu_y"]))
    sx = col(params["sigma_x"])
    sy = col(params["sigma_y"])
    sxy = col(params["sigma_xy"])
    sx2 = T.mul(sx, sx)
    sy2 = T.mul(sy, sy)
    det = T.sub(T.mul(sx2, sy2), T.mul(sxy, sxy))  # > 0 while |rho| < 1
    quad = T.add(
        T.sub(T.mul(T.mul(dx, dx), sy2), T.scale(T.mul(T.mul(dx, dy), sxy), 2.0)),
        T.mul(T.mul(dy, dy), sx2),
    )
    wmap = T.exp(T.scale(T.div(quad, det), -0.5))
    return T.reshape(wmap, (b, 1, h, w))


def apply_attention(f, wmap):
    """Reweight a feature map (B, C, H, W) by per-cell weights (B, 1, H, W).

    Returns the attended map and its flattened (B, C*H*W) view; the
    flat view feeds the policy trunk, and l2-normalizing it gives the
    contrastive embedding.
    """
    if f.ndim != 4 or wmap.ndim != 4 or f.shape[2:] != wmap.shape[2:] or wmap.shape[1] != 1:
        raise ShapeError(f"apply_attention: feature {f.shape} vs weights {wmap.shape}")
    attended = T.mul(f, wmap)
    flat = T.reshape(attended, (f.shape[0], f.shape[1] * f.shape[2] * f.shape[3]))
    return attended, flat


class FovealAttention(Module):
    """Gaze head plus Gaussian reweighting, as one callable stage."""

    def __init__(self, rng, in_channels=64, feat_hw=(4, 4), sigma_target=0.1, dtype=np.float32):
        self.head = GazeHead(rng, in_channels=in_channels, feat_hw=feat_hw, dtype=dtype)
        self.sigma_target = float(sigma_target)

    def gaze(self, f):
        raw = self.head(f)
        return raw, raw_to_gaze(raw, self.sigma_target)

    def __call__(self, f):
        raw, params = self.gaze(f)
        wmap = gaussian_weight_map(params, f.shape[2], f.shape[3])
        attended, flat = apply_attention(f, wmap)
        return {"attended": attended, "flat": flat, "weights": wmap,
                "raw": raw, "params": params}

    def embed(self, f):
        """L2-normalized flattened attended map: the contrastive embedding."""
        out = self(f)
        return T.l2_normalize(out["flat"], axis=1), out


class PatchAttention(Module):
    """Per-cell sigmoid gate from a zero-initialized 1x1 conv (gates at 0.5)."""

    def __init__(self, rng=None, in_channels=64, dtype=np.float32):
        self.conv = Conv2d(in_channels, 1, 1, stride=1, zero_init=True, dtype=dtype)

    def __call__(self, f):
        wmap = T.sigmoid(self.conv(f))
        attended, flat = apply_attention(f, wmap)
        return {"attended": attended, "flat": flat, "weights": wmap,
                "raw": None, "params": None}


def upsample_nearest(arr, out_hw):
    """Nearest-neighbor upsample of a 2-d array to out_hw."""
    h, w = arr.shape
    oh, ow = out_hw
    rows = (np.arange(oh) * h) // oh
    cols = (np.arange(ow) * w) // ow
    return arr[rows][:, cols]


def heatmap_image(weights, out_hw):
    """Weight map (h, w) in [0, 1] -> grayscale uint8 image at out_hw."""
    up = upsample_nearest(np.asarray(weights, dtype=np.float64), out_hw)
    return np.clip(np.round(up * 255.0), 0, 255).astype(np.uint8)


def overlay_heatmap(obs, weights, alpha=0.6):
    """Blend attention weights into the red channel of an observation."""
    obs = np.asarray(obs)
    up = upsample_nearest(np.asarray(weights, dtype=np.float64), obs.shape[:2])
    out = obs.astype(np.float64)
    out[..., 0] = (1 - alpha * up) * out[..., 0] + alpha * up * 255.0
    out[..., 1] *= 1 - 0.5 * alpha * up
    out[..., 2] *= 1 - 0.5 * alpha * up
    return np.clip(np.round(out), 0, 255).astype(np.uint8)


def save_png(path, image):
    from PIL import Image

    Image.fromarray(image).save(path)
