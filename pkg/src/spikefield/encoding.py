"""Positional encodings feeding the networks.

Two encoders: a multi-resolution hash grid over positions (learnable
feature tables, trilinear interpolation at every level) and a real
spherical-harmonics basis over unit viewing directions. Positions are
normalized into the unit cube from the (padded) scene bounding box so the
encoder and the extraction grid share one coordinate frame.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .diffcore import Array, Var
from .errors import InputError

# spatial hashing primes (first axis left unmixed, standard practice)
_PRIMES = np.array([1, 2654435761, 805459861], dtype=np.uint64)


@dataclass(frozen=True)
class HashGrid:
    """Geometry of the multi-resolution hash encoding (tables live in the
    parameter vector, keyed ``omega``)."""

    n_levels: int = 8
    log2_table_size: int = 14
    n_features: int = 2
    base_resolution: int = 16
    max_resolution: int = 256
    box_min: tuple[float, float, float] = (-1.0, -1.0, -1.0)
    box_max: tuple[float, float, float] = (1.0, 1.0, 1.0)

    @property
    def table_size(self) -> int:
        return 1 << self.log2_table_size

    @property
    def feature_dim(self) -> int:
        return self.n_levels * self.n_features

    @cached_property
    def growth_factor(self) -> float:
        if self.n_levels == 1:
            return 1.0
        return float(np.exp(np.log(self.max_resolution / self.base_resolution)
                            / (self.n_levels - 1)))

    @cached_property
    def resolutions(self) -> Array:
        b = self.growth_factor
        res = np.floor(self.base_resolution * b ** np.arange(self.n_levels))
        return res.astype(np.int64)

    def init_tables(self, rng: np.random.Generator) -> Array:
        return rng.uniform(-1e-4, 1e-4,
                           size=(self.n_levels, self.table_size, self.n_features))

    def normalize(self, x: Array) -> Array:
        """World coordinates -> unit cube, clamped at the box boundary."""
        lo = np.asarray(self.box_min)
        hi = np.asarray(self.box_max)
        return np.clip((x - lo) / (hi - lo), 0.0, 1.0)


def _level_lookup(xn: Array, res: int, table_size: int,
                  idx_out: Array, w_out: Array):
    """Hashed corner indices and trilinear weights for one level.

    Hash pieces and interpolation factors are built per axis (two values
    each) and combined per corner, avoiding (n, 8, 3) intermediates.
    Fills idx_out (n,8) and w_out (n,8); returns the per-axis (n,2)
    interpolation factors (t0, t1, t2).
    """
    pos = xn * res
    c0 = np.floor(pos).astype(np.int64)
    f = pos - c0
    cells = c0.astype(np.uint64)
    mask = np.uint64(table_size - 1)
    # per-axis hash pieces at offsets 0 and 1
    hx = (cells[:, 0] * _PRIMES[0], (cells[:, 0] + np.uint64(1)) * _PRIMES[0])
    hy = (cells[:, 1] * _PRIMES[1], (cells[:, 1] + np.uint64(1)) * _PRIMES[1])
    hz = (cells[:, 2] * _PRIMES[2], (cells[:, 2] + np.uint64(1)) * _PRIMES[2])
    n = xn.shape[0]
    t0 = np.empty((n, 2))
    t1 = np.empty((n, 2))
    t2 = np.empty((n, 2))
    t0[:, 0], t0[:, 1] = 1.0 - f[:, 0], f[:, 0]
    t1[:, 0], t1[:, 1] = 1.0 - f[:, 1], f[:, 1]
    t2[:, 0], t2[:, 1] = 1.0 - f[:, 2], f[:, 2]
    for c in range(8):
        bx, by, bz = (c >> 0) & 1, (c >> 1) & 1, (c >> 2) & 1
        idx_out[:, c] = ((hx[bx] ^ hy[by] ^ hz[bz]) & mask).astype(np.int64)
        np.multiply(t0[:, bx] * t1[:, by], t2[:, bz], out=w_out[:, c])
    return t0, t1, t2


def hash_encode(x, grid: HashGrid, tables):
    """Concatenated trilinear hash-table features at every level.

    ``x`` is (n, 3) world positions (ndarray, or Var when gradients with
    respect to position are wanted); ``tables`` is the (L, 2^T, F) feature
    array (Var for training, ndarray for pure evaluation). Returns an
    (n, L*F) array of the same kind.
    """
    x_var = x if isinstance(x, Var) else None
    tab_var = tables if isinstance(tables, Var) else None
    xv = np.asarray(x_var.value if x_var is not None else x, dtype=np.float64)
    tabv = tab_var.value if tab_var is not None else np.asarray(tables)
    if xv.ndim != 2 or xv.shape[1] != 3:
        raise InputError(f"positions must be (n, 3), got {xv.shape}")
    if not np.isfinite(xv).all():
        raise InputError("non-finite position passed to hash_encode")

    xn = grid.normalize(xv)
    n = xv.shape[0]
    L, T, F = grid.n_levels, grid.table_size, grid.n_features
    need_x = x_var is not None and x_var.requires_grad

    # corner lookups for every level share one gather and one einsum:
    # indices are offset by level so the stacked (L*T, F) table applies
    idx = np.empty((n, L, 8), dtype=np.int64)
    w = np.empty((n, L, 8))
    axis_factors = []
    for l, res in enumerate(grid.resolutions):
        t = _level_lookup(xn, int(res), T, idx[:, l], w[:, l])
        idx[:, l] += l * T
        axis_factors.append(t)
    vals = tabv.reshape(L * T, F)[idx]  # (n, L, 8, F)
    feats = np.einsum("nlcf,nlc->nlf", vals, w).reshape(n, L * F)

    if tab_var is None and x_var is None:
        return feats

    extent = np.asarray(grid.box_max) - np.asarray(grid.box_min)
    # derivative of the clamp: zero where the position left the box
    unclamped = ((xv - np.asarray(grid.box_min)) / extent >= 0.0) \
        & ((xv - np.asarray(grid.box_min)) / extent <= 1.0)

    parents = []
    if tab_var is not None:
        parents.append(tab_var)
    if x_var is not None:
        parents.append(x_var)

    def vjp(g):
        grads = []
        gl = g.reshape(n, L, F)
        if tab_var is not None and tab_var.requires_grad:
            wg = w[:, :, :, None] * gl[:, :, None, :]  # (n, L, 8, F)
            flat = idx.ravel()
            gtab = np.empty((F, L * T))
            for fi in range(F):
                gtab[fi] = np.bincount(flat, weights=wg[..., fi].ravel(),
                                       minlength=L * T)
            grads.append(gtab.T.reshape(L, T, F))
        elif tab_var is not None:
            grads.append(None)
        if x_var is not None:
            if need_x:
                gx = np.zeros((n, 3))
                for l, res in enumerate(grid.resolutions):
                    t0, t1, t2 = axis_factors[l]
                    gv = np.einsum("ncf,nf->nc", vals[:, l], gl[:, l])  # (n, 8)
                    # d w_c / d f_a = +-(product of the other two factors)
                    for c in range(8):
                        bx, by, bz = (c >> 0) & 1, (c >> 1) & 1, (c >> 2) & 1
                        gc = gv[:, c] * res
                        gx[:, 0] += gc * (1 if bx else -1) * t1[:, by] * t2[:, bz]
                        gx[:, 1] += gc * (1 if by else -1) * t0[:, bx] * t2[:, bz]
                        gx[:, 2] += gc * (1 if bz else -1) * t0[:, bx] * t1[:, by]
                gx *= unclamped / extent
                grads.append(gx)
            else:
                grads.append(None)
        return tuple(grads)

    tape = (tab_var or x_var).tape
    return tape.record("hash_encode", feats, tuple(parents), vjp)


@dataclass(frozen=True)
class ShBasis:
    """Real spherical harmonics up to degree ``degree`` - 1 (degree**2
    coefficients, graphics sign convention)."""

    degree: int = 4

    @property
    def n_coeffs(self) -> int:
        return self.degree ** 2

    def __call__(self, d: Array) -> Array:
        return sh_encode(d, self.degree)


_C0 = 0.5 * np.sqrt(1.0 / np.pi)
_C1 = np.sqrt(3.0 / (4.0 * np.pi))
_C2 = np.array([0.5 * np.sqrt(15.0 / np.pi),
                0.5 * np.sqrt(15.0 / np.pi),
                0.25 * np.sqrt(5.0 / np.pi),
                0.5 * np.sqrt(15.0 / np.pi),
                0.25 * np.sqrt(15.0 / np.pi)])
_C3 = np.array([0.25 * np.sqrt(35.0 / (2.0 * np.pi)),
                0.5 * np.sqrt(105.0 / np.pi),
                0.25 * np.sqrt(21.0 / (2.0 * np.pi)),
                0.25 * np.sqrt(7.0 / np.pi),
                0.25 * np.sqrt(21.0 / (2.0 * np.pi)),
                0.25 * np.sqrt(105.0 / np.pi),
                0.25 * np.sqrt(35.0 / (2.0 * np.pi))])


def sh_encode(d: Array, degree: int = 4) -> Array:
    """Evaluate the real SH basis at unit directions ``d`` (n, 3)."""
    d = np.asarray(d, dtype=np.float64)
    squeeze = d.ndim == 1
    if squeeze:
        d = d[None, :]
    if d.shape[-1] != 3:
        raise InputError(f"directions must be (n, 3), got {d.shape}")
    if degree < 1 or degree > 4:
        raise InputError("sh_encode supports degrees 1..4")
    nrm = np.linalg.norm(d, axis=-1)
    if not np.isfinite(nrm).all() or np.abs(nrm - 1.0).max() > 1e-6:
        raise InputError("directions must be unit length within 1e-6")

    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    out = np.empty(d.shape[:-1] + (degree ** 2,), dtype=np.float64)
    out[..., 0] = _C0
    if degree > 1:
        out[..., 1] = -_C1 * y
        out[..., 2] = _C1 * z
        out[..., 3] = -_C1 * x
    if degree > 2:
        xx, yy, zz = x * x, y * y, z * z
        out[..., 4] = _C2[0] * x * y
        out[..., 5] = -_C2[1] * y * z
        out[..., 6] = _C2[2] * (3.0 * zz - 1.0)
        out[..., 7] = -_C2[3] * x * z
        out[..., 8] = _C2[4] * (xx - yy)
    if degree > 3:
        out[..., 9] = -_C3[0] * y * (3.0 * xx - yy)
        out[..., 10] = _C3[1] * x * y * z
        out[..., 11] = -_C3[2] * y * (5.0 * zz - 1.0)
        out[..., 12] = _C3[3] * z * (5.0 * zz - 3.0)
        out[..., 13] = -_C3[4] * x * (5.0 * zz - 1.0)
        out[..., 14] = _C3[5] * z * (xx - yy)
        out[..., 15] = -_C3[6] * x * (xx - 3.0 * yy)
    return out[0] if squeeze else out
