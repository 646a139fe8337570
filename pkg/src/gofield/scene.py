"""Synthetic dynamic scenes with an analytic ground truth, and posed-image datasets.

Scenes are built from soft-edged spheres and boxes that translate at a
constant velocity per frame. Density ramps linearly from ``density`` to 0
across a shell of width ``falloff`` centred on the surface, so the fields are
continuous and can be voxelized without aliasing. Ground-truth images use
the same quadrature as the learned renderer.

A dataset on disk is a ``manifest.json`` next to 8-bit RGB PNG images::

    {
      "format": "gofield-dataset", "version": 1,
      "bounds": [[x0, y0, z0], [x1, y1, z1]], "background": [r, g, b],
      "cameras": [{"name": ..., "split": "train" | "test",
                   "fx": ..., "fy": ..., "cx": ..., "cy": ...,
                   "width": ..., "height": ..., "pose": [16 floats, row-major]}],
      "frames": [[image path for camera 0, camera 1, ...], ...],
      "scene": {...}          # optional, the generating scene description
    }
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from PIL import Image

from .errors import DomainError, FormatError, StructuralError
from .field import DEFAULT_BOUNDS, Bounds, FeatureGrid, interp
from .render import Camera, RenderConfig, render_field_image

SPLITS = ("train", "test")


class SceneSpecError(DomainError):
    """The scene description is invalid (e.g. a primitive leaves the bounds)."""


@dataclass
class Primitive:
    kind: str  # "sphere" or "box"
    center: tuple[float, float, float]
    size: float | tuple[float, float, float]  # radius, or box half extents
    color: tuple[float, float, float]
    density: float = 30.0
    velocity: tuple[float, float, float] = (0.0, 0.0, 0.0)  # world units per frame
    falloff: float = 0.05

    def center_at(self, frame: int) -> np.ndarray:
        return np.asarray(self.center, dtype=np.float64) + frame * np.asarray(self.velocity, dtype=np.float64)

    def half_extent(self) -> np.ndarray:
        if self.kind == "sphere":
            return np.full(3, float(self.size))
        return np.asarray(self.size, dtype=np.float64).reshape(3)

    def signed_distance(self, x: torch.Tensor, frame: int) -> torch.Tensor:
        c = x.new_tensor(self.center_at(frame))
        if self.kind == "sphere":
            return torch.linalg.vector_norm(x - c, dim=-1) - float(self.size)
        q = (x - c).abs() - x.new_tensor(self.half_extent())
        outside = torch.linalg.vector_norm(q.clamp(min=0), dim=-1)
        inside = q.amax(-1).clamp(max=0)
        return outside + inside

    def occupancy(self, x: torch.Tensor, frame: int) -> torch.Tensor:
        return (0.5 - self.signed_distance(x, frame) / self.falloff).clamp(0, 1)


@dataclass
class SyntheticScene:
    primitives: list[Primitive]
    frames: int = 10
    bounds: Bounds = DEFAULT_BOUNDS

    def validate(self):
        lo, hi = (np.asarray(b, dtype=np.float64) for b in self.bounds)
        if self.frames < 1:
            raise SceneSpecError("a scene needs at least one frame")
        for i, p in enumerate(self.primitives):
            if p.kind not in ("sphere", "box"):
                raise SceneSpecError(f"primitive {i}: unknown kind {p.kind!r}")
            if not all(0 <= c <= 1 for c in p.color):
                raise SceneSpecError(f"primitive {i}: colors must lie in [0, 1]")
            if p.density < 0 or p.falloff <= 0:
                raise SceneSpecError(f"primitive {i}: density must be >= 0 and falloff > 0")
            reach = p.half_extent() + p.falloff / 2
            for t in range(self.frames):
                c = p.center_at(t)
                if (c - reach < lo).any() or (c + reach > hi).any():
                    raise SceneSpecError(f"primitive {i} leaves the scene bounds at frame {t}")
        return self

    def field(self, frame: int):
        """Analytic (rgb, density) field for ``frame`` (0-based)."""

        def fn(x: torch.Tensor, d: torch.Tensor):
            sigma = torch.zeros(x.shape[:-1], dtype=x.dtype)
            weighted = torch.zeros(x.shape, dtype=x.dtype)
            for p in self.primitives:
                s = p.density * p.occupancy(x, frame)
                sigma = sigma + s
                weighted = weighted + s.unsqueeze(-1) * x.new_tensor(p.color)
            rgb = weighted / sigma.clamp(min=1e-12).unsqueeze(-1)
            return rgb, sigma

        return fn

    def to_dict(self) -> dict:
        return {"frames": self.frames, "bounds": [list(b) for b in self.bounds],
                "primitives": [asdict(p) for p in self.primitives]}

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticScene":
        prims = []
        for p in d["primitives"]:
            p = dict(p)
            for key in ("center", "color", "velocity"):
                if key in p:
                    p[key] = tuple(p[key])
            if isinstance(p.get("size"), list):
                p["size"] = tuple(p["size"])
            prims.append(Primitive(**p))
        bounds = d.get("bounds", DEFAULT_BOUNDS)
        return cls(prims, int(d.get("frames", 10)), (tuple(bounds[0]), tuple(bounds[1])))


def toy_scene(frames: int = 10, speed: float = 0.06) -> SyntheticScene:
    """Default toy scene: a moving red sphere, a static green box and a slow blue sphere."""
    return SyntheticScene(
        [
            Primitive("sphere", (-0.35, 0.0, 0.0), 0.3, (0.9, 0.25, 0.2), velocity=(speed, 0.0, 0.0)),
            Primitive("box", (0.35, 0.3, -0.2), (0.2, 0.15, 0.25), (0.2, 0.8, 0.3)),
            Primitive("sphere", (0.1, -0.45, 0.35), 0.2, (0.25, 0.35, 0.95), velocity=(0.0, speed / 2, 0.0)),
        ],
        frames=frames,
    ).validate()


def fibonacci_directions(n: int, offset: float = 0.0) -> np.ndarray:
    i = np.arange(n, dtype=np.float64) + 0.5
    z = 1 - 2 * i / n
    r = np.sqrt(np.clip(1 - z * z, 0, None))
    phi = math.pi * (3 - math.sqrt(5)) * i + offset
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=-1)


def orbit_cameras(
    n_train: int = 20, n_test: int = 4, width: int = 128, height: int = 128,
    radius: float = 3.5, fov_deg: float = 40.0,
) -> tuple[list[Camera], list[str]]:
    """Cameras on a sphere looking at the origin; test views interleave the training ones."""
    cams, splits = [], []
    for n, offset, split in ((n_train, 0.0, "train"), (n_test, 1.3, "test")):
        for d in fibonacci_directions(n, offset):
            up = (0.0, 0.0, 1.0) if abs(d[2]) < 0.95 else (0.0, 1.0, 0.0)
            cams.append(Camera.look_at(d * radius, (0, 0, 0), up, fov_deg, width, height))
            splits.append(split)
    return cams, splits


@dataclass
class Dataset:
    cameras: list[Camera]
    splits: list[str]
    images: np.ndarray  # (frames, cameras, H, W, 3) float32 in [0, 1]
    bounds: Bounds = DEFAULT_BOUNDS
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)
    paths: list[list[str]] | None = None
    scene: dict | None = None

    def __post_init__(self):
        if self.images.ndim != 5 or self.images.shape[1] != len(self.cameras):
            raise StructuralError("images must be (frames, cameras, H, W, 3)")
        if len(self.splits) != len(self.cameras) or any(s not in SPLITS for s in self.splits):
            raise StructuralError("every camera needs a 'train' or 'test' split")
        for cam in self.cameras:
            if (cam.height, cam.width) != self.images.shape[2:4]:
                raise StructuralError("image size does not match camera dimensions")

    @property
    def frame_count(self) -> int:
        return self.images.shape[0]

    def indices(self, split: str) -> list[int]:
        return [i for i, s in enumerate(self.splits) if s == split]

    def subset_frames(self, frames: Sequence[int]) -> "Dataset":
        return Dataset(self.cameras, self.splits, self.images[list(frames)], self.bounds, self.background)


def generate_scene(
    scene: SyntheticScene,
    cameras: Sequence[Camera],
    splits: Sequence[str] | None = None,
    frames: int | None = None,
    n_samples: int = 256,
    background=(0.0, 0.0, 0.0),
) -> Dataset:
    """Render ground-truth images of ``scene`` for every frame and camera.

    Images are quantized to 8 bits so the in-memory dataset equals what is
    written to PNG.
    """
    scene.validate()
    frames = scene.frames if frames is None else frames
    splits = list(splits) if splits is not None else ["train"] * len(cameras)
    cfg = RenderConfig(n_samples=n_samples, background=tuple(background))
    h, w = cameras[0].height, cameras[0].width
    images = np.zeros((frames, len(cameras), h, w, 3), dtype=np.float32)
    for t in range(frames):
        fn = scene.field(t)
        for c, cam in enumerate(cameras):
            img = render_field_image(fn, scene.bounds, cam, cfg, dtype=torch.float64).numpy()
            images[t, c] = np.clip(np.rint(img * 255), 0, 255) / 255.0
    return Dataset(list(cameras), splits, images, scene.bounds, tuple(background), scene=scene.to_dict())


def voxelize_scene(scene: SyntheticScene, frame: int, resolution: int = 64) -> FeatureGrid:
    """Sample (r, g, b, density) of the analytic field on a lattice."""
    lo, hi = scene.bounds
    axes = [torch.linspace(lo[i], hi[i], resolution, dtype=torch.float64) for i in range(3)]
    pts = torch.stack(torch.meshgrid(*axes, indexing="ij"), dim=-1)
    rgb, sigma = scene.field(frame)(pts, pts)
    return FeatureGrid(torch.cat([rgb, sigma.unsqueeze(-1)], dim=-1), scene.bounds)


def grid_field(grid: FeatureGrid):
    """Field that reads rgb and density straight from a 4-channel grid."""

    def fn(x, d):
        v = interp(grid, x)
        return v[..., :3], v[..., 3].clamp(min=0)

    return fn


def write_dataset(ds: Dataset, directory) -> Path:
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    frames = []
    for t in range(ds.frame_count):
        row = []
        for c in range(len(ds.cameras)):
            rel = f"images/f{t:03d}_c{c:03d}.png"
            save_image(ds.images[t, c], directory / rel)
            row.append(rel)
        frames.append(row)
    manifest = {
        "format": "gofield-dataset",
        "version": 1,
        "bounds": [list(ds.bounds[0]), list(ds.bounds[1])],
        "background": list(ds.background),
        "cameras": [
            {"name": f"cam{c:03d}", "split": s, **cam.to_dict()}
            for c, (cam, s) in enumerate(zip(ds.cameras, ds.splits))
        ],
        "frames": frames,
    }
    if ds.scene is not None:
        manifest["scene"] = ds.scene
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1))
    ds.paths = frames
    return path


def load_dataset(path) -> Dataset:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"no dataset manifest at {path}")
    manifest = json.loads(path.read_text())
    if manifest.get("format") != "gofield-dataset":
        raise FormatError(f"{path} is not a dataset manifest")
    cameras = [Camera.from_dict(c) for c in manifest["cameras"]]
    splits = [c.get("split", "train") for c in manifest["cameras"]]
    frames = manifest["frames"]
    h, w = cameras[0].height, cameras[0].width
    images = np.zeros((len(frames), len(cameras), h, w, 3), dtype=np.float32)
    for t, row in enumerate(frames):
        if len(row) != len(cameras):
            raise StructuralError(f"frame {t} lists {len(row)} images for {len(cameras)} cameras")
        for c, rel in enumerate(row):
            img_path = path.parent / rel
            if not img_path.exists():
                raise FileNotFoundError(f"missing image {img_path}")
            images[t, c] = load_image(img_path)
    b = manifest.get("bounds", DEFAULT_BOUNDS)
    return Dataset(
        cameras, splits, images, (tuple(b[0]), tuple(b[1])),
        tuple(manifest.get("background", (0.0, 0.0, 0.0))), frames, manifest.get("scene"),
    )


def load_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


def save_image(image, path):
    """Write a linear [0, 1] image as 8-bit PNG or binary PPM (picked by suffix)."""
    arr = image.detach().cpu().numpy() if isinstance(image, torch.Tensor) else np.asarray(image)
    arr = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    path = Path(path)
    fmt = "PPM" if path.suffix.lower() in (".ppm", ".pnm") else "PNG"
    Image.fromarray(arr, "RGB").save(path, format=fmt)
