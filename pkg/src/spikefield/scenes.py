"""Dataset ingestion and procedural ground truth.

Analytic scenes place a solid shape (sphere, torus, or box) in a [-1,1]^3
box with density s * max(0, 1 - max(sd, 0)/tau): full strength inside,
linear falloff across a thin outer shell. Reference images run the same
compositor over that density with normal-shaded colors (c = 0.5 + 0.5*n),
cameras on a ring plus poles, and masks from accumulation > 0.5. Pixels
outside the mask are baked to the configured background color so a
Blender-format export reloads to identical images.

The Blender loader reads transforms_train.json (camera_angle_x +
frames[].transform_matrix) with PNG frames; an alpha channel becomes the
mask and colors are composited over the configured background.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import InputError
from .rendering import Camera, composite, generate_rays, ray_box_span, sample_rays

Array = np.ndarray

SCENE_BOX = (np.array([-1.0, -1.0, -1.0]), np.array([1.0, 1.0, 1.0]))


@dataclass(frozen=True)
class AnalyticShape:
    """Closed-form solid with an exact distance-to-surface."""

    kind: str = "sphere"
    radius: float = 0.5
    major_radius: float = 0.35
    minor_radius: float = 0.15
    half_extents: tuple[float, float, float] = (0.4, 0.4, 0.4)
    sharpness: float = 20.0
    shell_width: float = 0.05

    def __post_init__(self):
        if self.kind not in ("sphere", "torus", "box"):
            raise InputError(f"unknown shape kind {self.kind!r}")

    def signed_distance(self, x: Array) -> Array:
        x = np.asarray(x, dtype=np.float64)
        if self.kind == "sphere":
            return np.linalg.norm(x, axis=-1) - self.radius
        if self.kind == "torus":
            rho = np.linalg.norm(x[..., :2], axis=-1)
            return np.hypot(rho - self.major_radius, x[..., 2]) - self.minor_radius
        q = np.abs(x) - np.asarray(self.half_extents)
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(q.max(axis=-1), 0.0)
        return outside + inside

    def density(self, x: Array) -> Array:
        """s inside the surface, ramping linearly to 0 over the shell."""
        sd = self.signed_distance(x)
        return self.sharpness * np.maximum(0.0, 1.0 - np.maximum(sd, 0.0)
                                           / self.shell_width)

    def distance_to_surface(self, x: Array) -> Array:
        return np.abs(self.signed_distance(x))

    def surface_normal(self, x: Array, eps: float = 1e-6) -> Array:
        """Outward unit normal (gradient of the signed distance)."""
        x = np.asarray(x, dtype=np.float64)
        grad = np.empty_like(x)
        for axis in range(3):
            off = np.zeros(3)
            off[axis] = eps
            grad[..., axis] = (self.signed_distance(x + off)
                               - self.signed_distance(x - off)) / (2 * eps)
        return grad / (np.linalg.norm(grad, axis=-1, keepdims=True) + 1e-30)

    def surface_points(self, n: int, rng: np.random.Generator) -> Array:
        """Uniform (area-weighted) samples on the exact surface."""
        if self.kind == "sphere":
            v = rng.standard_normal((n, 3))
            v /= np.linalg.norm(v, axis=-1, keepdims=True)
            return v * self.radius
        if self.kind == "torus":
            out = np.empty((n, 3))
            done = 0
            while done < n:  # rejection on the (R + r cos v) area factor
                m = 2 * (n - done) + 16
                u = rng.uniform(0, 2 * np.pi, m)
                v = rng.uniform(0, 2 * np.pi, m)
                keep = rng.uniform(0, 1, m) < (
                    (self.major_radius + self.minor_radius * np.cos(v))
                    / (self.major_radius + self.minor_radius))
                u, v = u[keep][:n - done], v[keep][:n - done]
                rho = self.major_radius + self.minor_radius * np.cos(v)
                pts = np.stack([rho * np.cos(u), rho * np.sin(u),
                                self.minor_radius * np.sin(v)], axis=-1)
                out[done:done + len(pts)] = pts
                done += len(pts)
            return out
        hx, hy, hz = self.half_extents
        areas = np.array([hy * hz, hy * hz, hx * hz, hx * hz, hx * hy, hx * hy])
        face = rng.choice(6, size=n, p=areas / areas.sum())
        uv = rng.uniform(-1, 1, size=(n, 2))
        pts = np.empty((n, 3))
        for f in range(6):
            sel = face == f
            axis, sign = f // 2, 1.0 if f % 2 == 0 else -1.0
            others = [a for a in range(3) if a != axis]
            pts[sel, axis] = sign * self.half_extents[axis]
            pts[sel, others[0]] = uv[sel, 0] * self.half_extents[others[0]]
            pts[sel, others[1]] = uv[sel, 1] * self.half_extents[others[1]]
        return pts


@dataclass
class SceneDataset:
    """Posed images with optional masks over a known bounding box."""

    cameras: list[Camera]
    images: Array                 # (V, H, W, 3) in [0, 1]
    masks: Array | None           # (V, H, W) in [0, 1]
    splits: list[str]             # per-view "train" / "eval"
    box_min: Array = field(default_factory=lambda: SCENE_BOX[0].copy())
    box_max: Array = field(default_factory=lambda: SCENE_BOX[1].copy())
    background: Array = field(default_factory=lambda: np.ones(3))

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        v, h, w, _ = self.images.shape
        if len(self.cameras) != v or len(self.splits) != v:
            raise InputError("view count mismatch between cameras and images")
        for cam in self.cameras:
            if cam.width != w or cam.height != h:
                raise InputError("image dimensions do not match camera intrinsics")
        if self.masks is not None:
            self.masks = np.asarray(self.masks, dtype=np.float64)
            if self.masks.shape != (v, h, w):
                raise InputError("mask dimensions do not match images")

    @property
    def train_views(self) -> list[int]:
        return [i for i, s in enumerate(self.splits) if s == "train"]

    @property
    def image_size(self) -> tuple[int, int]:
        return self.images.shape[2], self.images.shape[1]  # (W, H)


@dataclass
class RayBatch:
    origins: Array
    dirs: Array
    colors: Array
    masks: Array | None


def look_at(eye, target=(0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0)) -> Array:
    eye = np.asarray(eye, dtype=np.float64)
    backward = eye - np.asarray(target, dtype=np.float64)
    backward /= np.linalg.norm(backward)
    up = np.asarray(up, dtype=np.float64)
    if abs(np.dot(up, backward)) > 0.99:
        up = np.array([0.0, 1.0, 0.0])
    right = np.cross(up, backward)
    right /= np.linalg.norm(right)
    true_up = np.cross(backward, right)
    c2w = np.eye(4)
    c2w[:3, 0], c2w[:3, 1], c2w[:3, 2], c2w[:3, 3] = right, true_up, backward, eye
    return c2w


def _view_positions(n_views: int, distance: float, elevation: float = np.pi / 6,
                    phase: float = 0.0) -> list[Array]:
    positions = []
    n_ring = n_views - 2 if n_views >= 6 else n_views
    for i in range(n_ring):
        az = 2 * np.pi * i / n_ring + phase
        positions.append(distance * np.array([
            np.cos(elevation) * np.cos(az),
            np.cos(elevation) * np.sin(az),
            np.sin(elevation)]))
    if n_views >= 6:
        positions.append(np.array([0.0, 0.0, distance]))
        positions.append(np.array([0.0, 0.0, -distance]))
    return positions


def render_reference(shape: AnalyticShape, camera: Camera, background: Array,
                     n_samples: int = 256) -> tuple[Array, Array]:
    """Reference image and accumulation for one view: the shared compositor
    over the analytic density with normal-shaded colors."""
    w, h = camera.width, camera.height
    px = np.stack(np.meshgrid(np.arange(w), np.arange(h)), -1).reshape(-1, 2)
    origins, dirs = generate_rays(camera, px)
    near, far = ray_box_span(origins, dirs, *SCENE_BOX)
    t, delta = sample_rays(near, far, n_samples, jitter=False)
    pts = origins[:, None, :] + t[..., None] * dirs[:, None, :]
    flat = pts.reshape(-1, 3)
    sigma = shape.density(flat).reshape(t.shape)
    colors = (0.5 + 0.5 * shape.surface_normal(flat)).reshape(t.shape + (3,))
    rgb, acc, _ = composite(sigma, colors, delta, background)
    return rgb.reshape(h, w, 3), acc.reshape(h, w)


def make_synthetic_scene(shape: AnalyticShape, n_views: int = 16,
                         image_size: int = 64,
                         rng: np.random.Generator | None = None,
                         n_eval_views: int = 4, camera_distance: float = 2.0,
                         camera_angle_x: float = 0.8,
                         background=(1.0, 1.0, 1.0)) -> SceneDataset:
    """Procedural dataset: ring-plus-poles cameras looking at the origin.

    Rendering is deterministic (midpoint quadrature); the rng parameter is
    accepted for interface symmetry with the batch samplers. Images are
    quantized to the 8-bit lattice and background-baked outside the mask,
    so the Blender-format export reloads bit-identically.
    """
    if n_views < 2:
        raise InputError("need at least 2 views")
    bg = np.asarray(background, dtype=np.float64)
    focal = 0.5 * image_size / math.tan(0.5 * camera_angle_x)
    eyes = _view_positions(n_views, camera_distance)
    eyes += _view_positions(max(n_eval_views, 0) + 2, camera_distance,
                            elevation=np.pi / 4.5,
                            phase=np.pi / n_views)[:n_eval_views]
    cameras, images, masks, splits = [], [], [], []
    for i, eye in enumerate(eyes):
        cam = Camera(look_at(eye), focal=focal, width=image_size,
                     height=image_size)
        rgb, acc = render_reference(shape, cam, bg)
        mask = (acc > 0.5).astype(np.float64)
        rgb = np.round(rgb * 255.0) / 255.0
        rgb = np.where(mask[..., None] > 0, rgb, bg)
        cameras.append(cam)
        images.append(rgb)
        masks.append(mask)
        splits.append("train" if i < n_views else "eval")
    return SceneDataset(cameras, np.stack(images), np.stack(masks), splits,
                        background=bg)


def ray_batch(dataset: SceneDataset, m: int, rng: np.random.Generator,
              exhaustive: bool = False) -> RayBatch:
    """Rays with ground truth, sampled uniformly over all train pixels
    (or every train pixel exactly once in exhaustive mode)."""
    if not exhaustive and m < 1:
        raise InputError("batch size must be >= 1")
    views = dataset.train_views
    w, h = dataset.image_size
    per_view = w * h
    total = len(views) * per_view
    if exhaustive:
        flat = np.arange(total)
    else:
        flat = rng.integers(0, total, size=m)
    vidx = flat // per_view
    pix = flat % per_view
    px = np.stack([pix % w, pix // w], axis=-1)
    origins = np.empty((len(flat), 3))
    dirs = np.empty((len(flat), 3))
    colors = np.empty((len(flat), 3))
    mask_vals = np.empty(len(flat)) if dataset.masks is not None else None
    for k, view in enumerate(views):
        sel = np.nonzero(vidx == k)[0]
        if sel.size == 0:
            continue
        o, d = generate_rays(dataset.cameras[view], px[sel])
        origins[sel], dirs[sel] = o, d
        colors[sel] = dataset.images[view][px[sel, 1], px[sel, 0]]
        if mask_vals is not None:
            mask_vals[sel] = dataset.masks[view][px[sel, 1], px[sel, 0]]
    return RayBatch(origins, dirs, colors, mask_vals)


# -- Blender-format IO -------------------------------------------------------

def save_blender(dataset: SceneDataset, directory) -> None:
    """Write transforms_{train,test}.json plus RGBA PNG frames."""
    directory = Path(directory)
    split_names = {"train": "train", "eval": "test"}
    frames: dict[str, list] = {"train": [], "test": []}
    for i, cam in enumerate(dataset.cameras):
        split = split_names[dataset.splits[i]]
        (directory / split).mkdir(parents=True, exist_ok=True)
        name = f"./{split}/r_{i}"
        rgba = np.empty((cam.height, cam.width, 4), dtype=np.uint8)
        rgba[..., :3] = np.round(dataset.images[i] * 255.0).astype(np.uint8)
        alpha = dataset.masks[i] if dataset.masks is not None \
            else np.ones((cam.height, cam.width))
        rgba[..., 3] = np.round(alpha * 255.0).astype(np.uint8)
        Image.fromarray(rgba, mode="RGBA").save(directory / f"{name[2:]}.png")
        frames[split].append({"file_path": name,
                              "transform_matrix": cam.c2w.tolist()})
    angle = 2.0 * math.atan(0.5 * dataset.cameras[0].width
                            / dataset.cameras[0].focal)
    for split, fr in frames.items():
        if not fr:
            continue
        doc = {"camera_angle_x": angle, "frames": fr,
               "scene_box": [dataset.box_min.tolist(), dataset.box_max.tolist()],
               "background": dataset.background.tolist()}
        with open(directory / f"transforms_{split}.json", "w") as fh:
            json.dump(doc, fh, indent=1)


def load_blender_dataset(directory, background=None) -> SceneDataset:
    """Load a Blender-convention dataset (train split required, test split
    used as eval when present)."""
    directory = Path(directory)
    train_path = directory / "transforms_train.json"
    if not train_path.exists():
        raise InputError(f"{directory}: missing transforms_train.json")
    cameras, images, masks, splits = [], [], [], []
    bg = None
    box_min, box_max = SCENE_BOX[0].copy(), SCENE_BOX[1].copy()
    for split, fname in (("train", "transforms_train.json"),
                         ("eval", "transforms_test.json")):
        path = directory / fname
        if not path.exists():
            continue
        with open(path) as fh:
            try:
                doc = json.load(fh)
            except json.JSONDecodeError as exc:
                raise InputError(f"{path}: malformed JSON: {exc}") from exc
        for key in ("camera_angle_x", "frames"):
            if key not in doc:
                raise InputError(f"{path}: missing field {key!r}")
        if "scene_box" in doc:
            box_min = np.asarray(doc["scene_box"][0], dtype=np.float64)
            box_max = np.asarray(doc["scene_box"][1], dtype=np.float64)
        if bg is None:
            if background is not None:
                bg = np.asarray(background, dtype=np.float64)
            else:
                bg = np.asarray(doc.get("background", (1.0, 1.0, 1.0)),
                                dtype=np.float64)
        for fi, frame in enumerate(doc["frames"]):
            for key in ("file_path", "transform_matrix"):
                if key not in frame:
                    raise InputError(f"{path}: frame {fi} missing field {key!r}")
            c2w = np.asarray(frame["transform_matrix"], dtype=np.float64)
            if c2w.shape != (4, 4):
                raise InputError(f"{path}: frame {fi} transform_matrix is not 4x4")
            rot = c2w[:3, :3]
            if np.abs(rot @ rot.T - np.eye(3)).max() > 1e-4:
                raise InputError(
                    f"{path}: frame {fi} rotation block is not orthonormal")
            img_path = directory / (frame["file_path"].removeprefix("./") + ".png")
            if not img_path.exists():
                raise InputError(f"missing image file {img_path}")
            raw = np.asarray(Image.open(img_path), dtype=np.float64) / 255.0
            if raw.ndim == 3 and raw.shape[2] == 4:
                alpha = raw[..., 3]
                rgb = raw[..., :3] * alpha[..., None] + bg * (1 - alpha[..., None])
                masks.append(alpha)
            else:
                rgb = raw[..., :3] if raw.ndim == 3 else np.repeat(
                    raw[..., None], 3, axis=-1)
                masks.append(None)
            h, w = rgb.shape[:2]
            focal = 0.5 * w / math.tan(0.5 * float(doc["camera_angle_x"]))
            cameras.append(Camera(c2w, focal=focal, width=w, height=h))
            images.append(rgb)
            splits.append(split)
    have_masks = all(m is not None for m in masks)
    return SceneDataset(cameras, np.stack(images),
                        np.stack(masks) if have_masks else None,
                        splits, box_min=box_min, box_max=box_max, background=bg)
