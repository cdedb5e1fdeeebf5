"""Feature-map aggregation heads: projected adaptive pooling, AVG, GeM.

A feature map is a dense (h, w, c) array, interpreted as one c-dimensional
descriptor per spatial cell. The main head projects channels with a 1x1
convolution, average-pools onto a fixed (rows, cols) grid, flattens and
L2-normalizes. Global average pooling is exactly the special case of a
1x1 output grid with an identity projection.

Backward passes are written out analytically (chain rule through the
normalization, flatten, pooling and linear map) and are validated against
central finite differences in the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .embeddings import NORM_EPS, l2_normalize

GEM_MIN_POWER = 1e-3


@dataclass
class ConvAPParams:
    """Channel projection plus pooling grid.

    weight: (d, c) kernel of the 1x1 convolution; bias: (d,) or None;
    grid: (rows, cols) of the adaptive average pooling output.
    """

    weight: np.ndarray
    bias: np.ndarray | None = None
    grid: tuple[int, int] = (2, 2)

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        if self.weight.ndim != 2 or self.weight.shape[0] < 1:
            raise ValueError(f"weight must be (d, c), got {self.weight.shape}")
        if self.bias is not None:
            self.bias = np.asarray(self.bias, dtype=np.float64)
            if self.bias.shape != (self.weight.shape[0],):
                raise ValueError("bias shape must match output depth")
        rows, cols = self.grid
        if rows < 1 or cols < 1:
            raise ValueError(f"invalid pooling grid {self.grid}")

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def descriptor_dim(self) -> int:
        return self.grid[0] * self.grid[1] * self.out_channels


@dataclass
class GemParams:
    """Generalized-mean pooling exponent (trainable scalar)."""

    power: float = 3.0

    def __post_init__(self):
        if not np.isfinite(self.power) or self.power < GEM_MIN_POWER:
            raise ValueError(f"power must be finite and >= {GEM_MIN_POWER}")


def _check_feature_map(fmap: np.ndarray) -> np.ndarray:
    fmap = np.asarray(fmap, dtype=np.float64)
    if fmap.ndim != 3:
        raise ValueError(f"feature map must be (h, w, c), got shape {fmap.shape}")
    if not np.all(np.isfinite(fmap)):
        raise ValueError("feature map entries must be finite")
    return fmap


def conv1x1_forward(fmap: np.ndarray, params: ConvAPParams) -> np.ndarray:
    """Project every spatial descriptor: out[i, j] = W @ fmap[i, j] + bias."""
    fmap = _check_feature_map(fmap)
    if fmap.shape[2] != params.in_channels:
        raise ValueError(
            f"feature depth {fmap.shape[2]} != kernel input depth {params.in_channels}"
        )
    out = fmap @ params.weight.T
    if params.bias is not None:
        out = out + params.bias
    return out


def _bin_edges(extent: int, bins: int) -> list[int]:
    # Partition [0, extent) into `bins` contiguous, non-overlapping runs whose
    # sizes differ by at most one; every bin is nonempty when bins <= extent.
    return [(i * extent) // bins for i in range(bins + 1)]


def adaptive_avg_pool(fmap: np.ndarray, rows: int, cols: int) -> np.ndarray:
    """Average the map over an (rows x cols) partition of its spatial extent."""
    fmap = _check_feature_map(fmap)
    h, w, d = fmap.shape
    if not (1 <= rows <= h and 1 <= cols <= w):
        raise ValueError(f"grid ({rows}, {cols}) larger than spatial dims ({h}, {w})")
    re = _bin_edges(h, rows)
    ce = _bin_edges(w, cols)
    out = np.empty((rows, cols, d))
    for i in range(rows):
        for j in range(cols):
            out[i, j] = fmap[re[i] : re[i + 1], ce[j] : ce[j + 1]].mean(axis=(0, 1))
    return out


def conv_ap_forward(fmap: np.ndarray, params: ConvAPParams) -> np.ndarray:
    """Full head: project, pool, flatten, L2-normalize.

    Output dimension is rows*cols*d. Flatten order is row-major over the
    pooling grid with channels fastest, and is stable across calls.
    """
    rows, cols = params.grid
    pooled = adaptive_avg_pool(conv1x1_forward(fmap, params), rows, cols)
    return l2_normalize(pooled.ravel())


@dataclass
class ConvApGradients:
    d_weight: np.ndarray
    d_bias: np.ndarray | None
    d_features: np.ndarray


def conv_ap_backward(
    fmap: np.ndarray, params: ConvAPParams, upstream: np.ndarray
) -> ConvApGradients:
    """Gradients of <upstream, conv_ap_forward(fmap)> w.r.t. weight, bias, fmap."""
    fmap = _check_feature_map(fmap)
    upstream = np.asarray(upstream, dtype=np.float64).ravel()
    if upstream.shape != (params.descriptor_dim,):
        raise ValueError(
            f"upstream has shape {upstream.shape}, expected ({params.descriptor_dim},)"
        )
    rows, cols = params.grid
    h, w, _ = fmap.shape

    projected = conv1x1_forward(fmap, params)
    pooled = adaptive_avg_pool(projected, rows, cols)
    flat = pooled.ravel()
    norm = float(np.linalg.norm(flat))
    if norm <= NORM_EPS:
        raise ValueError("zero-norm descriptor has no defined gradient")
    unit = flat / norm

    # Through z = y/||y||:  dy = (u - z (z.u)) / ||y||
    g_flat = (upstream - unit * float(unit @ upstream)) / norm
    g_pooled = g_flat.reshape(pooled.shape)

    # Through pooling: each input cell feeds exactly one bin, scaled by 1/bin size.
    re = _bin_edges(h, rows)
    ce = _bin_edges(w, cols)
    g_proj = np.empty_like(projected)
    for i in range(rows):
        for j in range(cols):
            size = (re[i + 1] - re[i]) * (ce[j + 1] - ce[j])
            g_proj[re[i] : re[i + 1], ce[j] : ce[j + 1]] = g_pooled[i, j] / size

    g_weight = np.einsum("ijd,ijc->dc", g_proj, fmap)
    g_bias = g_proj.sum(axis=(0, 1)) if params.bias is not None else None
    g_features = g_proj @ params.weight
    return ConvApGradients(g_weight, g_bias, g_features)


def avg_pool(fmap: np.ndarray) -> np.ndarray:
    """Per-channel spatial mean, L2-normalized."""
    fmap = _check_feature_map(fmap)
    return l2_normalize(fmap.mean(axis=(0, 1)))


def gem_pool(fmap: np.ndarray, params: GemParams) -> np.ndarray:
    """Generalized-mean pooling: per channel, (mean of x^p)^(1/p), normalized.

    Entries are clamped at zero first; p = 1 reduces to plain average
    pooling, large p approaches per-channel max pooling.
    """
    fmap = _check_feature_map(fmap)
    p = params.power
    x = np.maximum(fmap, 0.0)
    means = np.mean(x**p, axis=(0, 1))
    return l2_normalize(means ** (1.0 / p))


def gem_pool_backward(fmap: np.ndarray, params: GemParams, upstream: np.ndarray) -> float:
    """d<upstream, gem_pool(fmap)> / d power."""
    fmap = _check_feature_map(fmap)
    upstream = np.asarray(upstream, dtype=np.float64).ravel()
    p = params.power
    x = np.maximum(fmap, 0.0)
    u = np.mean(x**p, axis=(0, 1))
    m = u ** (1.0 / p)

    # du/dp has x^p * log(x) terms; the x = 0 limit is 0 for p > 0.
    with np.errstate(divide="ignore", invalid="ignore"):
        xlog = np.where(x > 0.0, x**p * np.log(np.where(x > 0.0, x, 1.0)), 0.0)
    du_dp = np.mean(xlog, axis=(0, 1))
    dm_dp = np.zeros_like(m)
    pos = u > 0.0
    dm_dp[pos] = m[pos] * (-np.log(u[pos]) / p**2 + du_dp[pos] / (u[pos] * p))

    norm = float(np.linalg.norm(m))
    if norm <= NORM_EPS:
        raise ValueError("zero-norm descriptor has no defined gradient")
    unit = m / norm
    dz_dp = (dm_dp - unit * float(unit @ dm_dp)) / norm
    return float(upstream @ dz_dp)


# ---------------------------------------------------------------------------
# Uniform dispatch used by the trainer and the CLI
# ---------------------------------------------------------------------------

AGGREGATOR_KINDS = ("conv_ap", "gem", "avg")


def init_conv_ap(
    in_channels: int,
    out_channels: int,
    grid: tuple[int, int] = (2, 2),
    use_bias: bool = True,
    rng: np.random.Generator | None = None,
) -> ConvAPParams:
    """Seeded uniform init scaled by 1/sqrt(c); zero bias."""
    rng = rng if rng is not None else np.random.default_rng(0)
    bound = 1.0 / np.sqrt(in_channels)
    weight = rng.uniform(-bound, bound, size=(out_channels, in_channels))
    bias = np.zeros(out_channels) if use_bias else None
    return ConvAPParams(weight, bias, grid)


def forward(kind: str, params, fmap: np.ndarray) -> np.ndarray:
    if kind == "conv_ap":
        return conv_ap_forward(fmap, params)
    if kind == "gem":
        return gem_pool(fmap, params)
    if kind == "avg":
        return avg_pool(fmap)
    raise ValueError(f"unknown aggregator kind {kind!r}")


def backward(kind: str, params, fmap: np.ndarray, upstream: np.ndarray) -> dict[str, np.ndarray]:
    """Parameter gradients only (the backbone is frozen); {} when nothing is trainable."""
    if kind == "conv_ap":
        grads = conv_ap_backward(fmap, params, upstream)
        out = {"weight": grads.d_weight}
        if grads.d_bias is not None:
            out["bias"] = grads.d_bias
        return out
    if kind == "gem":
        return {"power": np.array([gem_pool_backward(fmap, params, upstream)])}
    if kind == "avg":
        return {}
    raise ValueError(f"unknown aggregator kind {kind!r}")


def trainable_arrays(kind: str, params) -> dict[str, np.ndarray]:
    if kind == "conv_ap":
        out = {"weight": params.weight}
        if params.bias is not None:
            out["bias"] = params.bias
        return out
    if kind == "gem":
        return {"power": np.array([params.power])}
    if kind == "avg":
        return {}
    raise ValueError(f"unknown aggregator kind {kind!r}")


def params_from_arrays(kind: str, template, arrays: dict[str, np.ndarray]):
    """Rebuild a params object from the optimizer's array dict."""
    if kind == "conv_ap":
        return ConvAPParams(arrays["weight"], arrays.get("bias"), template.grid)
    if kind == "gem":
        return GemParams(float(arrays["power"][0]))
    if kind == "avg":
        return template
    raise ValueError(f"unknown aggregator kind {kind!r}")
