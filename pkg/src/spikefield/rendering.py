"""Ray generation, stratified sampling, and the volume-rendering compositor.

Compositing follows the standard alpha recurrence: alpha_i = 1 - exp(-sigma_i
delta_i), transmittance T_i is the running product of (1 - alpha_j), weights
w_i = T_i alpha_i, rendered color is sum w_i c_i plus (1 - accumulation) times
the background. The tape op carries a hand-derived backward (suffix-sum form)
that stays finite when a sample saturates.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .diffcore import Array, Var
from . import diffcore as dc
from .errors import InputError

# exp argument clamp: exp(-60) ~ 8.8e-27, below any compositing tolerance
_MAX_OPTICAL_DEPTH = 60.0


@dataclass
class Camera:
    """Pinhole camera: OpenGL-style axes (looks along -z, y up in the
    camera frame), center-of-pixel ray convention."""

    c2w: Array          # 4x4 camera-to-world transform
    focal: float        # pixels
    width: int
    height: int
    near: float = 0.05
    far: float = 6.0

    def __post_init__(self):
        self.c2w = np.asarray(self.c2w, dtype=np.float64)
        if self.c2w.shape != (4, 4):
            raise InputError(f"camera transform must be 4x4, got {self.c2w.shape}")
        rot = self.c2w[:3, :3]
        if np.abs(rot @ rot.T - np.eye(3)).max() > 1e-6:
            raise InputError("camera rotation block is not orthonormal")
        if not self.near < self.far:
            raise InputError("camera near plane must precede far plane")

    @property
    def origin(self) -> Array:
        return self.c2w[:3, 3]

    @property
    def forward(self) -> Array:
        return -self.c2w[:3, 2]


def generate_rays(camera: Camera, pixels: Array) -> tuple[Array, Array]:
    """Unit-direction rays through pixel centers.

    ``pixels`` is (k, 2) integer (col, row) indices. Returns (origins,
    directions), both (k, 3).
    """
    px = np.asarray(pixels)
    if px.ndim != 2 or px.shape[1] != 2:
        raise InputError(f"pixels must be (k, 2), got {px.shape}")
    if (px[:, 0].min() < 0 or px[:, 0].max() >= camera.width
            or px[:, 1].min() < 0 or px[:, 1].max() >= camera.height):
        raise InputError("pixel index outside image bounds")
    u = (px[:, 0] + 0.5 - 0.5 * camera.width) / camera.focal
    v = (px[:, 1] + 0.5 - 0.5 * camera.height) / camera.focal
    dirs_cam = np.stack([u, -v, -np.ones_like(u)], axis=-1)
    dirs = dirs_cam @ camera.c2w[:3, :3].T
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    origins = np.broadcast_to(camera.origin, dirs.shape).copy()
    return origins, dirs


def sample_rays(near: Array, far: Array, n_samples: int, jitter: bool,
                rng: np.random.Generator | None = None,
                ) -> tuple[Array, Array]:
    """Stratified distances along each ray.

    Bin i covers [near + i*h, near + (i+1)*h] with h = (far-near)/n. With
    jitter off, samples sit at bin midpoints. Segment lengths are the
    consecutive differences, with the last segment set to h.
    """
    if n_samples < 2:
        raise InputError("need at least 2 samples per ray")
    near = np.atleast_1d(np.asarray(near, dtype=np.float64))
    far = np.atleast_1d(np.asarray(far, dtype=np.float64))
    h = (far - near) / n_samples  # (k,)
    if jitter:
        if rng is None:
            raise InputError("jittered sampling needs an rng")
        offsets = rng.uniform(0.0, 1.0, size=(near.size, n_samples))
    else:
        offsets = np.full((near.size, n_samples), 0.5)
    t = near[:, None] + (np.arange(n_samples) + offsets) * h[:, None]
    delta = np.empty_like(t)
    delta[:, :-1] = np.diff(t, axis=1)
    delta[:, -1] = h
    return t, delta


@dataclass
class SampleBatch:
    """Per-ray sample arrays from one pure rendering pass."""

    positions: Array       # (rays, samples, 3)
    delta: Array           # (rays, samples) segment lengths
    sigma: Array           # (rays, samples) densities fed to the compositor
    colors: Array          # (rays, samples, 3)
    weights: Array         # (rays, samples) compositing weights
    trans: Array           # (rays, samples) transmittance T_i

    def validate(self) -> None:
        if (self.delta <= 0).any():
            raise InputError("segment lengths must be positive")
        if (self.weights < 0).any():
            raise InputError("weights must be nonnegative")
        if (self.weights.sum(axis=-1) > 1.0 + 1e-6).any():
            raise InputError("weights along a ray must sum to at most 1")


def render_rays(density_fn, color_fn, origins: Array, dirs: Array,
                near: Array, far: Array, n_samples: int, background,
                jitter: bool = False, rng: np.random.Generator | None = None,
                ) -> tuple[Array, Array, SampleBatch]:
    """Pure rendering pass over arbitrary field callables.

    ``density_fn`` maps (n,3) positions to densities; ``color_fn`` maps
    ((n,3) positions, (n,3) directions) to RGB. Returns rendered colors,
    accumulation, and the full per-sample record.
    """
    t, delta = sample_rays(near, far, n_samples, jitter=jitter, rng=rng)
    pts = origins[:, None, :] + t[..., None] * dirs[:, None, :]
    flat = pts.reshape(-1, 3)
    dirs_rep = np.repeat(dirs, n_samples, axis=0)
    sigma = np.asarray(density_fn(flat)).reshape(t.shape)
    colors = np.asarray(color_fn(flat, dirs_rep)).reshape(pts.shape)
    rgb, acc, w = composite(sigma, colors, delta, background)
    _, trans_incl = _weights(sigma, delta)
    trans = np.concatenate([np.ones((len(t), 1)), trans_incl[:, :-1]], axis=1)
    batch = SampleBatch(pts, delta, sigma, colors, w, trans)
    batch.validate()
    return rgb, acc, batch


def composite(sigma: Array, colors: Array, delta: Array,
              background: Array) -> tuple[Array, Array, Array]:
    """Pure compositor: (rendered RGB, accumulation, per-sample weights)."""
    sigma = np.asarray(sigma, dtype=np.float64)
    if (sigma < 0).any():
        raise InputError("densities must be nonnegative")
    w, _ = _weights(sigma, np.asarray(delta, dtype=np.float64))
    acc = w.sum(axis=-1)
    rgb = np.einsum("rs,rsc->rc", w, np.asarray(colors, dtype=np.float64))
    rgb = rgb + (1.0 - acc)[:, None] * np.asarray(background, dtype=np.float64)
    return rgb, acc, w


def _weights(sigma: Array, delta: Array) -> tuple[Array, Array]:
    """Compositing weights and inclusive transmittance products."""
    depth = np.minimum(sigma * delta, _MAX_OPTICAL_DEPTH)
    one_minus_alpha = np.exp(-depth)
    trans_incl = np.cumprod(one_minus_alpha, axis=-1)  # T_{i+1} = prod_{j<=i}
    trans = np.empty_like(trans_incl)                  # T_i = prod_{j<i}
    trans[:, 0] = 1.0
    trans[:, 1:] = trans_incl[:, :-1]
    w = trans * (1.0 - one_minus_alpha)
    return w, trans_incl


def composite_op(sigma: Var, colors: Var, delta: Array, background: Array,
                 ) -> tuple[Var, Var, Var]:
    """Tape compositor over (rays, samples) arrays.

    ``sigma`` is (r, s), ``colors`` is (r, s, 3); ``delta`` and
    ``background`` are constants. Returns (rgb (r,3), accumulation (r,),
    weights (r,s)) as slices of one packed node.
    """
    sig_v = sigma.value
    col_v = colors.value
    delta = np.asarray(delta, dtype=np.float64)
    bg = np.asarray(background, dtype=np.float64)
    n_rays, n_samples = sig_v.shape

    w, trans_incl = _weights(sig_v, delta)
    acc = w.sum(axis=-1)
    rgb = np.einsum("rs,rsc->rc", w, col_v) + (1.0 - acc)[:, None] * bg
    packed = np.concatenate([rgb, acc[:, None], w], axis=-1)

    need_sigma = sigma.requires_grad
    need_colors = colors.requires_grad

    def vjp(g):
        g_rgb = g[:, :3]
        g_acc = g[:, 3]
        g_w = g[:, 4:]
        # total dL/dw_j: direct + through rgb (c_j - bg) + through acc
        u = g_w + np.einsum("rc,rsc->rs", g_rgb, col_v - bg) \
            + g_acc[:, None]
        g_sigma = None
        if need_sigma:
            wu = w * u
            suffix = np.zeros_like(wu)  # sum_{j>i} w_j u_j
            suffix[:, :-1] = np.cumsum(wu[:, ::-1], axis=-1)[:, ::-1][:, 1:]
            g_sigma = delta * (trans_incl * u - suffix)
            # clamped optical depth: saturated samples are flat in sigma
            g_sigma[sig_v * delta >= _MAX_OPTICAL_DEPTH] = 0.0
        g_colors = w[:, :, None] * g_rgb[:, None, :] if need_colors else None
        return (g_sigma, g_colors)

    node = sigma.tape.record("composite", packed, (sigma, colors), vjp)
    rgb_var = dc.slice_last(node, 0, 3)
    acc_var = dc.reshape(dc.slice_last(node, 3, 4), (-1,))
    w_var = dc.slice_last(node, 4, 4 + n_samples)
    return rgb_var, acc_var, w_var


def ray_box_span(origins: Array, dirs: Array, box_min, box_max,
                 min_near: float = 1e-3) -> tuple[Array, Array]:
    """Per-ray [near, far] from slab intersection with an AABB.

    Rays that miss the box get a thin far-field interval so the batch shape
    stays rectangular; their samples land outside the box and composite to
    background.
    """
    lo = np.asarray(box_min, dtype=np.float64)
    hi = np.asarray(box_max, dtype=np.float64)
    with np.errstate(divide="ignore"):
        inv = 1.0 / dirs
    t0 = (lo - origins) * inv
    t1 = (hi - origins) * inv
    tmin = np.minimum(t0, t1).max(axis=-1)
    tmax = np.maximum(t0, t1).min(axis=-1)
    near = np.maximum(tmin, min_near)
    far = np.maximum(tmax, near + 1e-6)
    miss = tmax <= tmin
    if miss.any():
        span = float(np.linalg.norm(hi - lo))
        near = np.where(miss, span, near)
        far = np.where(miss, span * 1.01 + 1e-3, far)
    return near, far
