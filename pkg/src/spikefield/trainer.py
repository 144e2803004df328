"""Round-robin optimization: normal iterations fit the full density range,
spiking iterations fit gate-truncated densities with the color network
frozen, repeating until the density distribution sharpens around the
surface.

Each iteration rebuilds the tape, so the stage differences (gate present,
color branch frozen, threshold loss active) are plain dataflow. Adam
tracks a per-slot step count so frozen slots are skipped entirely,
moments included. The threshold is clamped to >= 0 after every step.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import diffcore as dc
from . import losses as L
from . import spiking
from .diffcore import Tape
from .errors import DivergenceError, InputError
from .field import COLOR_PARAMS, FieldConfig, FieldModel
from .rendering import composite_op, ray_box_span, sample_rays
from .scenes import (AnalyticShape, RayBatch, SceneDataset,
                     load_blender_dataset, make_synthetic_scene, ray_batch)


@dataclass(frozen=True)
class RoundSchedule:
    """One round = n_normal normal iterations then n_spike spiking ones.

    ``all_spiking`` (the "w/o round" ablation) runs the gate every
    iteration; ``spiking_enabled=False`` (the no-spiking baseline) never
    runs it. Both keep the same total iteration count as the full
    schedule so comparisons are budget-matched.
    """

    n_normal: int = 4
    n_spike: int = 1
    rounds: int = 2000
    all_spiking: bool = False
    spiking_enabled: bool = True

    def __post_init__(self):
        if self.rounds < 0:
            raise InputError("rounds must be >= 0")
        if not self.all_spiking and (self.n_normal < 1 or self.n_spike < 1):
            raise InputError("round-robin schedule needs n_normal >= 1 and "
                             "n_spike >= 1")
        if self.all_spiking and not self.spiking_enabled:
            raise InputError("all_spiking contradicts spiking_enabled=False")

    @property
    def iterations_per_round(self) -> int:
        return self.n_normal + self.n_spike

    @property
    def total_iterations(self) -> int:
        return self.rounds * self.iterations_per_round

    def stage_of(self, iteration: int) -> str:
        if not self.spiking_enabled:
            return "normal"
        if self.all_spiking:
            return "spiking"
        return ("spiking"
                if iteration % self.iterations_per_round >= self.n_normal
                else "normal")


@dataclass(frozen=True)
class SamplerConfig:
    n_samples: int = 64
    jitter: bool = True
    batch_size: int = 512
    surface_probes: int = 512
    box_probes: int = 512

    def __post_init__(self):
        if self.n_samples < 2:
            raise InputError("sampler.n_samples must be >= 2")
        if self.batch_size < 1:
            raise InputError("sampler.batch_size must be >= 1")


@dataclass(frozen=True)
class SpikingConfig:
    k: float = 1.0
    r: float = 1.0
    theta_init: float = 0.0
    threshold_surrogate: bool = True   # gate's own pull on the threshold
    full_input_grad: bool = False      # diagnostic two-term input surrogate

    def __post_init__(self):
        if self.k <= 0 or self.r <= 0:
            raise InputError("spiking.k and spiking.r must be > 0")
        if self.theta_init < 0:
            raise InputError("spiking.theta_init must be >= 0")


@dataclass(frozen=True)
class OptimConfig:
    lr_omega: float = 1e-2
    lr_density: float = 1e-3
    lr_color: float = 1e-3
    lr_theta: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-15


@dataclass(frozen=True)
class SceneConfig:
    kind: str = "synthetic"            # synthetic | blender
    shape: str = "sphere"
    n_views: int = 16
    n_eval_views: int = 4
    image_size: int = 64
    path: str | None = None            # blender dataset directory

    def __post_init__(self):
        if self.kind not in ("synthetic", "blender"):
            raise InputError(f"scene.kind must be synthetic or blender, "
                             f"got {self.kind!r}")
        if self.kind == "blender" and not self.path:
            raise InputError("scene.path is required for blender scenes")


@dataclass(frozen=True)
class TrainConfig:
    scene: SceneConfig = SceneConfig()
    sampler: SamplerConfig = SamplerConfig()
    network: FieldConfig = FieldConfig()
    spiking: SpikingConfig = SpikingConfig()
    schedule: RoundSchedule = RoundSchedule()
    losses: L.LossWeights = L.LossWeights()
    optimizer: OptimConfig = OptimConfig()
    seed: int = 0
    fix_color: bool = True


PRESETS = {
    "full": {},
    "wo-fix": {"fix_color": False},
    "wo-round": {"schedule": {"all_spiking": True}, "fix_color": False},
    "baseline": {"schedule": {"spiking_enabled": False}},
}

_SECTIONS = {
    "scene": SceneConfig, "sampler": SamplerConfig, "network": FieldConfig,
    "spiking": SpikingConfig, "schedule": RoundSchedule,
    "losses": L.LossWeights, "optimizer": OptimConfig,
}


def config_from_dict(doc: dict, preset: str | None = None) -> TrainConfig:
    """Build a TrainConfig from a JSON document, rejecting unknown keys
    with the offending key path in the error."""
    if not isinstance(doc, dict):
        raise InputError("config root must be a JSON object")
    doc = dict(doc)
    if preset is not None:
        if preset not in PRESETS:
            raise InputError(f"unknown preset {preset!r}; expected one of "
                             f"{sorted(PRESETS)}")
        for key, val in PRESETS[preset].items():
            if isinstance(val, dict):
                doc[key] = {**doc.get(key, {}), **val}
            else:
                doc[key] = val
    kwargs = {}
    for key, val in doc.items():
        if key in _SECTIONS:
            cls = _SECTIONS[key]
            if not isinstance(val, dict):
                raise InputError(f"config section {key!r} must be an object")
            names = {f.name for f in fields(cls)}
            for sub in val:
                if sub not in names:
                    raise InputError(f"unknown config key {key}.{sub}")
            try:
                kwargs[key] = cls(**{k: _coerce(v) for k, v in val.items()})
            except TypeError as exc:
                raise InputError(f"bad config section {key!r}: {exc}") from exc
        elif key == "seed":
            kwargs["seed"] = int(val)
        elif key == "fix_color":
            kwargs["fix_color"] = bool(val)
        else:
            raise InputError(f"unknown config key {key}")
    return TrainConfig(**kwargs)


def _coerce(v):
    return tuple(v) if isinstance(v, list) else v


def config_from_json(path, preset: str | None = None) -> TrainConfig:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise InputError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise InputError(f"malformed config JSON in {path}: {exc}") from exc
    return config_from_dict(doc, preset)


def build_dataset(config: TrainConfig) -> SceneDataset:
    scene = config.scene
    if scene.kind == "blender":
        return load_blender_dataset(scene.path)
    shape = AnalyticShape(scene.shape)
    return make_synthetic_scene(shape, n_views=scene.n_views,
                                image_size=scene.image_size,
                                n_eval_views=scene.n_eval_views)


# -- optimizer -----------------------------------------------------------------

@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    steps: np.ndarray  # per-slot step counts (frozen slots do not advance)

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), np.zeros(n, dtype=np.int64))


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState,
              lr: np.ndarray, beta1: float, beta2: float, eps: float,
              frozen: np.ndarray | None = None) -> None:
    """In-place Adam with per-slot bias correction; frozen slots (an int
    index array) keep their value, moments, and step count untouched.

    Runs full-vector updates then restores the frozen slots, which is
    cheaper than masked indexing when nearly everything is active.
    """
    restore = frozen is not None and frozen.size > 0
    if restore:
        saved = (params[frozen].copy(), state.m[frozen].copy(),
                 state.v[frozen].copy(), state.steps[frozen].copy())
    state.steps += 1
    state.m *= beta1
    state.m += (1.0 - beta1) * grads
    state.v *= beta2
    state.v += (1.0 - beta2) * grads * grads
    m_hat = state.m / (1.0 - beta1 ** state.steps)
    v_hat = state.v / (1.0 - beta2 ** state.steps)
    params -= lr * m_hat / (np.sqrt(v_hat) + eps)
    if restore:
        params[frozen], state.m[frozen] = saved[0], saved[1]
        state.v[frozen], state.steps[frozen] = saved[2], saved[3]


# -- training loop ---------------------------------------------------------------

class Trainer:
    def __init__(self, config: TrainConfig, dataset: SceneDataset | None = None):
        self.config = config
        self.dataset = dataset if dataset is not None else build_dataset(config)
        self.model = FieldModel(config.network, self.dataset.box_min,
                                self.dataset.box_max)
        self.rng = np.random.default_rng(config.seed)
        self.params = self.model.init_params(self.rng)
        self.params.set("theta_th", config.spiking.theta_init)
        self.adam = AdamState.zeros(self.params.size)
        self.iteration = 0
        self._lr = self._lr_vector()
        theta = self.params.slice_of("theta_th")
        self._theta_idx = np.arange(theta.start, theta.stop)
        self._color_idx = np.concatenate([
            np.arange(self.params.slice_of(n).start, self.params.slice_of(n).stop)
            for n in COLOR_PARAMS])

    def _lr_vector(self) -> np.ndarray:
        opt = self.config.optimizer
        lr = np.empty(self.params.size)
        for name in self.params.names():
            if name == "omega":
                value = opt.lr_omega
            elif name.startswith("density."):
                value = opt.lr_density
            elif name.startswith("color."):
                value = opt.lr_color
            else:
                value = opt.lr_theta
            lr[self.params.slice_of(name)] = value
        return lr

    def run_iteration(self, batch: RayBatch, stage: str) -> L.LossReport:
        cfg = self.config
        m = len(batch.origins)
        n = cfg.sampler.n_samples
        frozen = COLOR_PARAMS if (stage == "spiking" and cfg.fix_color) else ()
        tape = Tape(self.params, frozen=frozen)
        self.last_tape = tape  # kept for diagnostics / tape inspection

        near, far = ray_box_span(batch.origins, batch.dirs,
                                 self.dataset.box_min, self.dataset.box_max)
        t, delta = sample_rays(near, far, n, jitter=cfg.sampler.jitter,
                               rng=self.rng)
        pts = (batch.origins[:, None, :]
               + t[..., None] * batch.dirs[:, None, :]).reshape(-1, 3)

        sigma, g = self.model.density(tape, pts)
        if stage == "spiking":
            gated = spiking.attach(sigma, tape.param("theta_th"),
                                   cfg.spiking.k, cfg.spiking.r,
                                   full_input_grad=cfg.spiking.full_input_grad,
                                   threshold_surrogate=cfg.spiking.threshold_surrogate)
        else:
            gated = sigma
        dirs_rep = np.repeat(batch.dirs, n, axis=0)
        colors = self.model.color(tape, g, dirs_rep)
        rgb, acc, w = composite_op(dc.reshape(gated, (m, n)),
                                   dc.reshape(colors, (m, n, 3)),
                                   delta, self.dataset.background)

        terms: dict[str, dc.Var] = {"color": L.color_loss(rgb, batch.colors)}
        enabled = cfg.losses.enabled(stage)
        if "threshold" in enabled and stage == "spiking":
            terms["threshold"] = L.threshold_loss(tape.param("theta_th"),
                                                  cfg.losses.lambda_v)
        if "mask" in enabled and batch.masks is not None:
            terms["mask"] = L.mask_loss(batch.masks, acc)

        need_normals = "orientation" in enabled or "eikonal" in enabled
        if need_normals:
            # one normals evaluation covers both regularizers: batch-sample
            # probes for the orientation term, plus uniform box probes that
            # extend the Eikonal set
            n_probe = min(cfg.sampler.surface_probes, m * n)
            probe_idx = self.rng.choice(m * n, size=n_probe, replace=False)
            box_pts = self.rng.uniform(self.dataset.box_min,
                                       self.dataset.box_max,
                                       size=(cfg.sampler.box_probes, 3))
            all_pts = np.concatenate([pts[probe_idx], box_pts])
            normals, grad_norms, valid = self.model.normal(tape, all_pts)
            if "orientation" in enabled:
                w_probe = dc.take(dc.reshape(w, (-1,)), probe_idx)
                terms["orientation"] = L.orientation_loss(
                    w_probe * valid[:n_probe].astype(np.float64),
                    dc.slice_rows(normals, 0, n_probe),
                    dirs_rep[probe_idx], n_rays=m, scale=(m * n) / n_probe)
            if "eikonal" in enabled:
                terms["eikonal"] = L.eikonal_loss(grad_norms)

        total = L.total_loss(terms, cfg.losses, stage)
        grads = tape.backward(total)

        if stage == "normal":
            frozen_idx = self._theta_idx
        elif cfg.fix_color:
            frozen_idx = self._color_idx
        else:
            frozen_idx = None
        opt = cfg.optimizer
        adam_step(self.params.vector, grads, self.adam, self._lr,
                  opt.beta1, opt.beta2, opt.eps, frozen_idx)
        theta = self.params.view("theta_th")
        theta[...] = max(0.0, float(theta))

        report = L.LossReport(
            iteration=self.iteration, stage=stage,
            color=float(terms["color"].value),
            threshold=float(terms["threshold"].value) if "threshold" in terms else 0.0,
            orientation=float(terms["orientation"].value) if "orientation" in terms else 0.0,
            eikonal=float(terms["eikonal"].value) if "eikonal" in terms else 0.0,
            mask=float(terms["mask"].value) if "mask" in terms else 0.0,
            total=float(total.value), theta_th=float(theta))
        return report

    def train(self, log_path=None, progress: bool = False) -> list[L.LossReport]:
        cfg = self.config
        reports = []
        if log_path is not None:
            Path(log_path).parent.mkdir(parents=True, exist_ok=True)
            open(log_path, "w").close()
        for it in range(cfg.schedule.total_iterations):
            self.iteration = it
            stage = cfg.schedule.stage_of(it)
            batch = ray_batch(self.dataset, cfg.sampler.batch_size, self.rng)
            try:
                report = self.run_iteration(batch, stage)
            except DivergenceError as exc:
                raise DivergenceError(str(exc), stage=stage, iteration=it) from exc
            reports.append(report)
            if log_path is not None:
                L.append_log(log_path, report)
            if progress and (it + 1) % 500 == 0:
                print(f"iter {it + 1}/{cfg.schedule.total_iterations} "
                      f"[{stage}] loss {report.total:.4f} "
                      f"theta {report.theta_th:.4f}")
        return reports

    def save_checkpoint(self, path) -> None:
        self.model.save(path, self.params)


def train(config: TrainConfig, dataset: SceneDataset | None = None,
          log_path=None, progress: bool = False,
          ) -> tuple[Trainer, list[L.LossReport]]:
    """Convenience wrapper: build a Trainer, run the schedule, return both."""
    trainer = Trainer(config, dataset)
    reports = trainer.train(log_path=log_path, progress=progress)
    return trainer, reports
