"""Density and color networks over the hash encoding.

The density branch maps hash features through a shallow ReLU MLP to a
softplus density and a geometry feature vector; the color branch maps the
SH-encoded view direction plus the geometry feature to a sigmoid RGB.
Normals come from central finite differences of the density field (the
tape then backpropagates through the six offset evaluations, which is
exact for the FD estimator). Parameters checkpoint to a versioned binary
format that round-trips byte-exactly.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Array, FlatParams, Tape, Var
from .encoding import HashGrid, ShBasis, hash_encode, sh_encode
from .errors import DivergenceError, InputError

DEGENERATE_NORMAL_EPS = 1e-8

COLOR_PARAMS = ("color.w0", "color.b0", "color.w1", "color.b1",
                "color.w2", "color.b2")


@dataclass(frozen=True)
class FieldConfig:
    n_levels: int = 8
    log2_table_size: int = 14
    n_features: int = 2
    base_resolution: int = 16
    max_resolution: int = 256
    sh_degree: int = 4
    hidden_width: int = 64
    geo_features: int = 15
    box_padding: float = 0.05


class FieldModel:
    """Field geometry + parameter layout for one scene bounding box."""

    def __init__(self, config: FieldConfig, box_min, box_max):
        self.config = config
        self.box_min = np.asarray(box_min, dtype=np.float64)
        self.box_max = np.asarray(box_max, dtype=np.float64)
        pad = config.box_padding * (self.box_max - self.box_min)
        self.grid = HashGrid(
            n_levels=config.n_levels,
            log2_table_size=config.log2_table_size,
            n_features=config.n_features,
            base_resolution=config.base_resolution,
            max_resolution=config.max_resolution,
            box_min=tuple(self.box_min - pad),
            box_max=tuple(self.box_max + pad),
        )
        self.sh = ShBasis(config.sh_degree)

    # -- parameters -----------------------------------------------------

    def init_params(self, rng: np.random.Generator) -> FlatParams:
        """Kaiming-uniform hidden layers, zero output layers (uniform
        softplus(0)=ln 2 density and gray 0.5 color at initialization),
        threshold starts at 0."""
        cfg = self.config
        w = cfg.hidden_width
        p = FlatParams()
        p.add("omega", self.grid.init_tables(rng))
        dims_d = [(self.grid.feature_dim, w), (w, w), (w, 1 + cfg.geo_features)]
        dims_c = [(self.sh.n_coeffs + cfg.geo_features, w), (w, w), (w, 3)]
        for prefix, dims in (("density", dims_d), ("color", dims_c)):
            for i, (fan_in, fan_out) in enumerate(dims):
                last = i == len(dims) - 1
                if last:
                    weight = np.zeros((fan_in, fan_out))
                else:
                    bound = np.sqrt(6.0 / fan_in)
                    weight = rng.uniform(-bound, bound, size=(fan_in, fan_out))
                p.add(f"{prefix}.w{i}", weight)
                p.add(f"{prefix}.b{i}", np.zeros(fan_out))
        p.add("theta_th", 0.0)
        return p

    # -- forward --------------------------------------------------------

    def density(self, tape: Tape, x) -> tuple[Var, Var]:
        """Density (softplus, >= 0) and geometry feature at positions x."""
        cfg = self.config
        enc = hash_encode(x, self.grid, tape.param("omega"))
        h = dc.relu(dc.affine(enc, tape.param("density.w0"),
                              tape.param("density.b0")))
        h = dc.relu(dc.affine(h, tape.param("density.w1"),
                              tape.param("density.b1")))
        out = dc.affine(h, tape.param("density.w2"), tape.param("density.b2"))
        sigma = dc.softplus(dc.reshape(dc.slice_last(out, 0, 1), (-1,)))
        g = dc.slice_last(out, 1, 1 + cfg.geo_features)
        if not np.isfinite(sigma.value).all():
            raise DivergenceError("non-finite density output")
        return sigma, g

    def color(self, tape: Tape, g: Var, dirs: Array) -> Var:
        """RGB in [0,1] from geometry feature and unit view direction."""
        sh = tape.constant(sh_encode(dirs, self.config.sh_degree))
        h = dc.concat([sh, g])
        h = dc.relu(dc.affine(h, tape.param("color.w0"), tape.param("color.b0")))
        h = dc.relu(dc.affine(h, tape.param("color.w1"), tape.param("color.b1")))
        out = dc.sigmoid(dc.affine(h, tape.param("color.w2"),
                                   tape.param("color.b2")))
        if not np.isfinite(out.value).all():
            raise DivergenceError("non-finite color output")
        return out

    def fd_step(self) -> float:
        """Default normal FD step: half a finest-level voxel."""
        extent = np.asarray(self.grid.box_max) - np.asarray(self.grid.box_min)
        return 0.5 * float(extent.max()) / self.config.max_resolution

    def normal(self, tape: Tape, x: Array, eps: float | None = None,
               ) -> tuple[Var, Var, Array]:
        """Unit normals -grad(sigma)/|grad(sigma)| via central differences.

        Returns (normals (n,3), gradient norms (n,), valid mask). Samples
        with |grad sigma| <= 1e-8 are degenerate: their mask entry is
        False and callers must drop them from normal-dependent losses
        (their normal rows are finite but meaningless).
        """
        if eps is None:
            eps = self.fd_step()
        x = np.asarray(x, dtype=np.float64)
        n = x.shape[0]
        # one stacked density evaluation for all six FD offsets
        offsets = np.concatenate([np.stack([x + off, x - off])
                                  for off in eps * np.eye(3)]).reshape(-1, 3)
        sig_all, _ = self.density(tape, offsets)
        comps = []
        for axis in range(3):
            sig_p = dc.slice_rows(sig_all, (2 * axis) * n, (2 * axis + 1) * n)
            sig_m = dc.slice_rows(sig_all, (2 * axis + 1) * n, (2 * axis + 2) * n)
            comps.append((sig_p - sig_m) * (0.5 / eps))
        sq = comps[0] * comps[0] + comps[1] * comps[1] + comps[2] * comps[2]
        grad_norm = dc.sqrt(sq)
        valid = grad_norm.value > DEGENERATE_NORMAL_EPS
        denom = grad_norm + 1e-30
        n = dc.concat([dc.reshape(-c / denom, (-1, 1)) for c in comps])
        return n, grad_norm, valid

    def normals_fn(self, params: FlatParams, eps: float | None = None):
        """Pure normal evaluator bound to a snapshot (mirrors ``normal``)."""
        fn = self.density_fn(params)
        step = eps if eps is not None else self.fd_step()

        def normals(x: Array):
            return fd_normals(fn, x, step)

        return normals

    def density_fn(self, params: FlatParams):
        """Pure (n,3) -> (n,) density evaluator bound to a snapshot."""

        def fn(x: Array) -> Array:
            tape = Tape(params)
            sigma, _ = self.density(tape, np.asarray(x, dtype=np.float64))
            return sigma.value

        return fn

    def color_fn(self, params: FlatParams):
        """Pure ((n,3) positions, (n,3) directions) -> (n,3) RGB."""

        def fn(x: Array, dirs: Array) -> Array:
            tape = Tape(params)
            _, g = self.density(tape, np.asarray(x, dtype=np.float64))
            return self.color(tape, g, np.asarray(dirs, dtype=np.float64)).value

        return fn

    # -- checkpointing ----------------------------------------------------

    def save(self, path, params: FlatParams) -> None:
        meta = {
            "meta.box": np.concatenate([self.box_min, self.box_max]),
            "meta.field": np.array([
                self.config.n_levels, self.config.log2_table_size,
                self.config.n_features, self.config.base_resolution,
                self.config.max_resolution, self.config.sh_degree,
                self.config.hidden_width, self.config.geo_features,
            ], dtype=np.float64),
        }
        save_checkpoint(path, params, meta)

    @classmethod
    def load(cls, path) -> tuple["FieldModel", FlatParams]:
        params, meta = load_checkpoint(path)
        f = meta["meta.field"]
        config = FieldConfig(
            n_levels=int(f[0]), log2_table_size=int(f[1]),
            n_features=int(f[2]), base_resolution=int(f[3]),
            max_resolution=int(f[4]), sh_degree=int(f[5]),
            hidden_width=int(f[6]), geo_features=int(f[7]))
        box = meta["meta.box"]
        return cls(config, box[:3], box[3:]), params


def fd_normals(density_fn, x: Array, eps: float,
               ) -> tuple[Array, Array, Array]:
    """Central-difference normals of an arbitrary density callable.

    Same estimator as ``FieldModel.normal`` but pure numpy, usable with
    injected analytic fields. Returns (normals (n,3), gradient norms (n,),
    valid mask); rows with |grad| <= 1e-8 are degenerate.
    """
    x = np.asarray(x, dtype=np.float64)
    grad = np.empty_like(x)
    for axis in range(3):
        off = np.zeros(3)
        off[axis] = eps
        grad[:, axis] = (np.asarray(density_fn(x + off))
                         - np.asarray(density_fn(x - off))) * (0.5 / eps)
    norms = np.linalg.norm(grad, axis=-1)
    valid = norms > DEGENERATE_NORMAL_EPS
    n = -grad / (norms[:, None] + 1e-30)
    return n, norms, valid


_MAGIC = b"SPKF"
_VERSION = 1


def save_checkpoint(path, params: FlatParams, meta: dict[str, Array] | None = None) -> None:
    """Versioned binary checkpoint: magic, version, then named tensors as
    (name length, name, rank, dims, little-endian f64 payload). The
    threshold scalar is always the final tensor."""
    meta = meta or {}
    names = [n for n in params.names() if n != "theta_th"]
    entries = [(n, params.view(n)) for n in names]
    entries += sorted(meta.items())
    entries.append(("theta_th", params.view("theta_th")))
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _VERSION, len(entries)))
        for name, value in entries:
            raw = name.encode("utf-8")
            value = np.asarray(value, dtype="<f8")  # keeps 0-d scalars 0-d
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", value.ndim))
            fh.write(struct.pack(f"<{value.ndim}Q", *value.shape))
            fh.write(value.tobytes())


def load_checkpoint(path) -> tuple[FlatParams, dict[str, Array]]:
    with open(path, "rb") as fh:
        if fh.read(4) != _MAGIC:
            raise InputError(f"{path}: not a spikefield checkpoint")
        version, count = struct.unpack("<II", fh.read(8))
        if version != _VERSION:
            raise InputError(f"{path}: unsupported checkpoint version {version}")
        params = FlatParams()
        meta: dict[str, Array] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<I", fh.read(4))
            name = fh.read(name_len).decode("utf-8")
            (rank,) = struct.unpack("<I", fh.read(4))
            shape = struct.unpack(f"<{rank}Q", fh.read(8 * rank)) if rank else ()
            n = int(np.prod(shape, dtype=np.int64)) if rank else 1
            payload = np.frombuffer(fh.read(8 * n), dtype="<f8").reshape(shape)
            if name.startswith("meta."):
                meta[name] = payload.copy()
            else:
                params.add(name, payload)
    return params, meta
