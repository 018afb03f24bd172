"""Differentiable numeric building blocks: feature grids, a tiny MLP, Adam.

Parameters are held as `autodiff.Var` leaves so the same buffers serve both
the forward graph and the optimizer.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad


# ---------------------------------------------------------------------------
# 2D feature grids


@dataclass
class Grid2D:
    """A [resolution_u x resolution_v x channels] feature grid.

    A size-1 axis is treated as constant along that axis (no interpolation);
    this is how temporally-static planes are stored.
    """

    resolution_u: int
    resolution_v: int
    channels: int
    values: ad.Var = None

    def __post_init__(self):
        if self.resolution_u < 1 or self.resolution_v < 1 or self.channels < 1:
            raise ValueError("grid resolutions and channel count must be positive")
        if self.values is None:
            self.values = ad.Var(
                np.zeros((self.resolution_u, self.resolution_v, self.channels), dtype=np.float32),
                requires_grad=True,
            )
        if self.values.data.shape != (self.resolution_u, self.resolution_v, self.channels):
            raise ValueError("grid value array does not match declared resolution")

    @classmethod
    def random(cls, res_u, res_v, channels, rng, scale=0.1, dtype=np.float32):
        vals = rng.uniform(-scale, scale, size=(res_u, res_v, channels)).astype(dtype)
        return cls(res_u, res_v, channels, ad.Var(vals, requires_grad=True))

    @classmethod
    def constant(cls, res_u, res_v, channels, value, dtype=np.float32):
        vals = np.full((res_u, res_v, channels), value, dtype=dtype)
        return cls(res_u, res_v, channels, ad.Var(vals, requires_grad=True))


def bilinear_weights(u, v, res_u, res_v):
    """Node indices and interpolation weights for a point in [0,1]^2.

    Returns ((i0,j0),(i1,j0),(i0,j1),(i1,j1)) paired with weights ordered so
    that their sequential sum is exactly 1.0: the last weight is defined as
    1 - (sum of the first three).
    """
    i0, i1, fu = _cell_py(u, res_u)
    j0, j1, fv = _cell_py(v, res_v)
    w11 = fu * fv
    w01 = (1.0 - fu) * fv
    w10 = fu * (1.0 - fv)
    w00 = 1.0 - ((w11 + w01) + w10)
    nodes = ((i1, j1), (i0, j1), (i1, j0), (i0, j0))
    return nodes, (w11, w01, w10, w00)


def _cell_py(x01, res):
    if res == 1:
        return 0, 0, 0.0
    x = x01 * (res - 1)
    i = min(int(x), res - 2)
    f = x - i
    if f == 1.0:  # exact edge hit: land on the node itself
        i += 1
        f = 0.0
    return i, min(i + 1, res - 1), f


def bilinear_sample(grid: Grid2D, u: float, v: float) -> np.ndarray:
    """Bilinear interpolation of all channels at (u, v) in [0,1]^2.

    Uses the lerp form, which returns constant grids exactly and node values
    exactly at node coordinates.  Out-of-range coordinates are a contract
    violation (callers normalize first).
    """
    if not (0.0 <= u <= 1.0 and 0.0 <= v <= 1.0):
        raise ValueError(f"bilinear_sample coordinates out of range: ({u}, {v})")
    g = grid.values.data
    i0, i1, fu = _cell_py(u, grid.resolution_u)
    j0, j1, fv = _cell_py(v, grid.resolution_v)
    a0 = g[i0, j0] + fu * (g[i1, j0] - g[i0, j0])
    a1 = g[i0, j1] + fu * (g[i1, j1] - g[i0, j1])
    return a0 + fv * (a1 - a0)


# ---------------------------------------------------------------------------
# linear maps and the tiny MLP


@dataclass
class LinearMap:
    in_dim: int
    out_dim: int
    weights: ad.Var = None
    bias: ad.Var = None

    def __post_init__(self):
        if self.weights is None:
            raise ValueError("use LinearMap.random or pass explicit weights")

    @classmethod
    def random(cls, in_dim, out_dim, rng, dtype=np.float32):
        bound = float(np.sqrt(1.0 / in_dim))  # fan-in scaled uniform
        w = rng.uniform(-bound, bound, size=(out_dim, in_dim)).astype(dtype)
        b = rng.uniform(-bound, bound, size=(out_dim,)).astype(dtype)
        return cls(in_dim, out_dim, ad.Var(w, requires_grad=True), ad.Var(b, requires_grad=True))

    def apply(self, x: ad.Var) -> ad.Var:
        """x [N, in_dim] -> [N, out_dim]."""
        return ad.add_bias(ad.matmul(x, _wt(self.weights)), self.bias)


def _wt(w: ad.Var) -> ad.Var:
    """Transposed view of a weight Var that routes gradients to the original."""
    out = ad.Var(w.data.T)
    if w.requires_grad:
        out.requires_grad = True
        out._parents = (w,)
        out._vjp = lambda g: (g.T.copy(),)
    return out


@dataclass
class TinyMLP:
    """Fully-connected net with ReLU hidden layers and a split output head.

    Head widths are (1, 3, d_feat): raw density, raw color, semantic embedding.
    The caller applies output activations.
    """

    widths: list  # [in, hidden..., out]
    weights: list = field(default_factory=list)  # each [out, in]
    biases: list = field(default_factory=list)
    d_feat: int = 16

    @classmethod
    def random(cls, in_dim, hidden, out_dim, d_feat, rng, dtype=np.float32):
        widths = [in_dim] + list(hidden) + [out_dim]
        ws, bs = [], []
        for a, b in zip(widths[:-1], widths[1:]):
            bound = float(np.sqrt(1.0 / a))
            ws.append(ad.Var(rng.uniform(-bound, bound, size=(b, a)).astype(dtype), requires_grad=True))
            bs.append(ad.Var(rng.uniform(-bound, bound, size=(b,)).astype(dtype), requires_grad=True))
        return cls(widths, ws, bs, d_feat)

    def forward_rows(self, x: ad.Var, skip_first=False, first_extra: ad.Var = None) -> ad.Var:
        """Batched forward over rows. `first_extra` is added after layer 0
        (used to fold a per-ray contribution into per-sample rows)."""
        h = x
        for li, (w, b) in enumerate(zip(self.weights, self.biases)):
            if skip_first and li == 0:
                continue
            h = ad.add_bias(ad.matmul(h, _wt(w)), b)
            if li == 0 and first_extra is not None:
                h = ad.add(h, first_extra)
            if li < len(self.weights) - 1:
                h = ad.relu(h)
        return h


def mlp_forward(mlp: TinyMLP, feature: np.ndarray, dir_encoding: np.ndarray):
    """Single-point forward pass -> (sigma_raw, color_raw [3], semantic [d_feat]).

    Raw (pre-activation) heads; the field layer applies activations.
    """
    x = np.concatenate([np.asarray(feature), np.asarray(dir_encoding)])
    if x.shape[0] != mlp.widths[0]:
        raise ValueError(f"mlp input width {x.shape[0]} != configured {mlp.widths[0]}")
    h = x
    for li, (w, b) in enumerate(zip(mlp.weights, mlp.biases)):
        h = w.data @ h + b.data
        if li < len(mlp.weights) - 1:
            h = np.maximum(h, 0)
    if h.shape[0] != 4 + mlp.d_feat:
        raise ValueError("mlp output width does not match 1 + 3 + d_feat")
    return float(h[0]), h[1:4].copy(), h[4:].copy()


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    """First/second-moment accumulators per parameter tensor plus step count."""

    m: list
    v: list
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params, beta1=0.9, beta2=0.999, eps=1e-8):
        return cls(
            m=[np.zeros_like(p) for p in params],
            v=[np.zeros_like(p) for p in params],
            beta1=beta1,
            beta2=beta2,
            eps=eps,
        )


def adam_step(params, grads, state: AdamState, lr: float):
    """One Adam update with bias correction, in place. Returns state."""
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    if len(params) != len(state.m):
        raise ValueError("parameter list does not match optimizer state")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state
