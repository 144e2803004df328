"""Training losses and their weighted total.

Color is a per-ray L1 photometric term. The threshold loss lambda_v *
exp(-theta) only ever pushes the density threshold upward; the gate's
surrogate window is what holds it back. Orientation and Eikonal terms
regularize FD normals; the mask term is a BCE on ray accumulation versus
the ground-truth silhouette.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict

import numpy as np

from . import diffcore as dc
from .diffcore import Array, Var
from .errors import DivergenceError, InputError

_BCE_EPS = 1e-6

TERM_NAMES = ("color", "threshold", "orientation", "eikonal", "mask")


@dataclass(frozen=True)
class LossWeights:
    """Term weights plus per-stage enable flags (color is always on;
    the threshold term only exists in the spiking stage, where the
    threshold is on the tape)."""

    lambda_v: float = 0.05
    lambda_o: float = 1e-4
    lambda_eik: float = 1e-4
    lambda_m: float = 1.0
    normal_stage: tuple[str, ...] = ("orientation", "eikonal", "mask")
    spiking_stage: tuple[str, ...] = ("threshold", "orientation", "eikonal", "mask")

    def __post_init__(self):
        for lam in (self.lambda_v, self.lambda_o, self.lambda_eik, self.lambda_m):
            if lam < 0:
                raise InputError("loss weights must be nonnegative")
        for name in self.normal_stage + self.spiking_stage:
            if name not in TERM_NAMES[1:]:
                raise InputError(f"unknown loss term {name!r}")
        if "threshold" in self.normal_stage:
            raise InputError("threshold loss cannot run in the normal stage "
                             "(the threshold is not on the tape there)")

    def enabled(self, stage: str) -> tuple[str, ...]:
        return self.spiking_stage if stage == "spiking" else self.normal_stage

    def weight(self, term: str) -> float:
        return {"threshold": self.lambda_v, "orientation": self.lambda_o,
                "eikonal": self.lambda_eik, "mask": self.lambda_m}[term]


@dataclass
class LossReport:
    """Per-iteration scalar record, serialized as one NDJSON line."""

    iteration: int
    stage: str
    color: float
    threshold: float = 0.0
    orientation: float = 0.0
    eikonal: float = 0.0
    mask: float = 0.0
    total: float = 0.0
    theta_th: float = 0.0

    def to_json(self) -> str:
        d = asdict(self)
        d["iter"] = d.pop("iteration")
        return json.dumps(d)


def append_log(path, report: LossReport) -> None:
    with open(path, "a") as fh:
        fh.write(report.to_json() + "\n")


def color_loss(rendered: Var, target: Array) -> Var:
    """Mean over rays of the L1 color error (sum of absolute channel
    differences per ray)."""
    target = np.asarray(target, dtype=np.float64)
    m = target.shape[0]
    if m < 1:
        raise InputError("color loss needs at least one ray")
    return dc.sum(dc.absolute(rendered - target)) / m


def threshold_loss(theta: Var, lambda_v: float) -> Var:
    """lambda_v * exp(-theta): decays as the threshold climbs, so its
    gradient is always negative in theta."""
    return dc.exp(-theta) * lambda_v


def orientation_loss(weights: Var, normals: Var, dirs: Array, n_rays: int,
                     scale: float = 1.0) -> Var:
    """Penalize visible normals facing away from the camera:
    sum_i w_i * max(0, n_i . d_i)^2, averaged over the rays of the batch.

    ``scale`` corrects for probing a subset of the batch samples
    (total_samples / probed_samples keeps the estimator unbiased).
    """
    d = np.asarray(dirs, dtype=np.float64)
    # elementwise dot with a constant direction per sample
    nd = dc.reshape(dc.slice_last(normals, 0, 1), (-1,)) * d[:, 0] \
        + dc.reshape(dc.slice_last(normals, 1, 2), (-1,)) * d[:, 1] \
        + dc.reshape(dc.slice_last(normals, 2, 3), (-1,)) * d[:, 2]
    clipped = dc.relu(nd)
    return dc.sum(weights * clipped * clipped) * (scale / n_rays)


def eikonal_loss(grad_norms: Var) -> Var:
    """Mean squared deviation of density-gradient norms from 1."""
    dev = grad_norms - 1.0
    return dc.mean(dev * dev)


def mask_loss(masks: Array, acc: Var) -> Var:
    """Binary cross-entropy between ground-truth masks and accumulation,
    with the accumulation clamped to [1e-6, 1 - 1e-6]."""
    m = np.asarray(masks, dtype=np.float64)
    o = dc.clip(acc, _BCE_EPS, 1.0 - _BCE_EPS)
    return -dc.mean(dc.log(o) * m + dc.log(1.0 - o) * (1.0 - m))


def total_loss(terms: dict[str, Var], weights: LossWeights, stage: str) -> Var:
    """Color plus each enabled optional term scaled by its weight.

    The threshold term already carries lambda_v (it is defined as
    lambda_v * exp(-theta)), so it joins the total unscaled; the other
    optional terms are raw values scaled here.
    """
    total = terms["color"]
    for name in weights.enabled(stage):
        if name not in terms:
            continue
        if name == "threshold":
            total = total + terms[name]
        else:
            total = total + terms[name] * weights.weight(name)
    if not np.isfinite(total.value):
        raise DivergenceError(f"non-finite training loss in {stage} stage",
                              stage=stage)
    return total
