"""Pinhole cameras, stratified ray sampling and differentiable volume rendering.

Cameras follow the OpenCV convention: +x right, +y down, +z forward in camera
space, and ``pose`` maps camera coordinates to world coordinates. Pixel
``(u, v)`` is column ``u``, row ``v``; rays pass through pixel centers.

Along a ray the color is accumulated as ``sum_i T_i (1 - exp(-sigma_i delta_i)) c_i``
with ``T_i = exp(-sum_{j<i} sigma_j delta_j)``. Rendered values are linear;
conversion to 8 bits is plain clamping with no gamma.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch

from .errors import DomainError, UsageError
from .field import Bounds, FrameRepresentation, MultiResBasis, ShadingNetwork, field_features, frame_basis

FieldFn = Callable[[torch.Tensor, torch.Tensor], tuple[torch.Tensor, torch.Tensor]]


@dataclass(frozen=True)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    pose: np.ndarray  # 4x4 world-from-camera

    def __post_init__(self):
        pose = np.asarray(self.pose, dtype=np.float64)
        if pose.shape != (4, 4):
            raise DomainError(f"pose must be 4x4, got {pose.shape}")
        object.__setattr__(self, "pose", pose)
        if self.fx <= 0 or self.fy <= 0:
            raise DomainError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise DomainError("image size must be positive")
        rot = pose[:3, :3]
        if not np.allclose(rot.T @ rot, np.eye(3), atol=1e-6, rtol=0):
            raise DomainError("pose rotation is not orthonormal")

    @classmethod
    def look_at(cls, eye, target, up, fov_deg: float, width: int, height: int) -> "Camera":
        eye, target, up = (np.asarray(v, dtype=np.float64) for v in (eye, target, up))
        forward = target - eye
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, up)
        if np.linalg.norm(right) < 1e-9:
            right = np.cross(forward, [1.0, 0.0, 0.0])
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        pose = np.eye(4)
        pose[:3, 0], pose[:3, 1], pose[:3, 2], pose[:3, 3] = right, down, forward, eye
        focal = 0.5 * width / np.tan(np.radians(fov_deg) / 2)
        return cls(focal, focal, width / 2, height / 2, width, height, pose)

    def to_dict(self) -> dict:
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height,
            "pose": [float(v) for v in self.pose.reshape(-1)],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(
            float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
            int(d["width"]), int(d["height"]), np.asarray(d["pose"], dtype=np.float64).reshape(4, 4),
        )


@dataclass(frozen=True)
class RayBundle:
    origins: torch.Tensor  # (R, 3)
    directions: torch.Tensor  # (R, 3), unit length

    def __len__(self) -> int:
        return self.origins.shape[0]

    def to(self, dtype) -> "RayBundle":
        return RayBundle(self.origins.to(dtype), self.directions.to(dtype))

    def __getitem__(self, idx) -> "RayBundle":
        return RayBundle(self.origins[idx], self.directions[idx])


def all_pixels(camera: Camera) -> np.ndarray:
    v, u = np.mgrid[0 : camera.height, 0 : camera.width]
    return np.stack([u.ravel(), v.ravel()], axis=-1)


def generate_rays(camera: Camera, pixels=None) -> RayBundle:
    """Back-project pixel centers ``(u, v)`` into world-space rays (float64)."""
    pix = all_pixels(camera) if pixels is None else np.asarray(pixels)
    pix = pix.reshape(-1, 2)
    if pix.size and (
        (pix[:, 0] < 0).any() or (pix[:, 0] >= camera.width).any()
        or (pix[:, 1] < 0).any() or (pix[:, 1] >= camera.height).any()
    ):
        raise DomainError("pixel outside the image")
    u = pix[:, 0].astype(np.float64) + 0.5
    v = pix[:, 1].astype(np.float64) + 0.5
    d_cam = np.stack([(u - camera.cx) / camera.fx, (v - camera.cy) / camera.fy, np.ones_like(u)], axis=-1)
    d_world = d_cam @ camera.pose[:3, :3].T
    d_world /= np.linalg.norm(d_world, axis=-1, keepdims=True)
    origins = np.broadcast_to(camera.pose[:3, 3], d_world.shape).copy()
    return RayBundle(torch.from_numpy(origins), torch.from_numpy(d_world))


def intersect_box(rays: RayBundle, bounds: Bounds) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Slab test. Returns (near, far, hit) with near clipped at 0."""
    lo = rays.origins.new_tensor(bounds[0])
    hi = rays.origins.new_tensor(bounds[1])
    d = rays.directions
    safe = torch.where(d.abs() < 1e-12, torch.full_like(d, 1e-12), d)
    t0 = (lo - rays.origins) / safe
    t1 = (hi - rays.origins) / safe
    near = torch.minimum(t0, t1).amax(-1).clamp(min=0)
    far = torch.maximum(t0, t1).amin(-1)
    return near, far, far > near


@dataclass(frozen=True)
class Ray:
    origin: torch.Tensor
    direction: torch.Tensor
    near: float
    far: float

    def __post_init__(self):
        if not (0 <= self.near < self.far):
            raise DomainError(f"need 0 <= near < far, got {self.near}, {self.far}")
        if abs(float(torch.linalg.vector_norm(self.direction)) - 1) > 1e-6:
            raise DomainError("ray direction must be unit length")


@dataclass(frozen=True)
class RaySamples:
    t: torch.Tensor  # (..., n) distances along the ray
    deltas: torch.Tensor  # (..., n) interval lengths
    positions: torch.Tensor | None = None  # (..., n, 3)

    @property
    def count(self) -> int:
        return self.t.shape[-1]


def sample_intervals(
    near: torch.Tensor,
    far: torch.Tensor,
    n: int,
    jitter: bool = False,
    generator: torch.Generator | None = None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Stratified samples on ``[near, far]``: one per equal-width bin.

    Returns ``(t, delta)`` of shape (..., n). Each sample owns the interval
    between the midpoints to its neighbours, with ``near``/``far`` closing the
    first and last interval, so the deltas sum to ``far - near``.
    """
    if n < 1:
        raise DomainError("need at least one sample per ray")
    near = near.unsqueeze(-1)
    far = far.unsqueeze(-1)
    steps = torch.arange(n, dtype=near.dtype)
    if jitter:
        offset = torch.rand((*near.shape[:-1], n), generator=generator, dtype=near.dtype)
    else:
        offset = torch.full((n,), 0.5, dtype=near.dtype)
    t = near + (far - near) * (steps + offset) / n
    mids = 0.5 * (t[..., 1:] + t[..., :-1])
    edges = torch.cat([near, mids, far], dim=-1)
    return t, edges[..., 1:] - edges[..., :-1]


def sample_ray(ray: Ray, n: int, jitter: bool = False, generator: torch.Generator | None = None) -> RaySamples:
    dtype = ray.direction.dtype
    t, deltas = sample_intervals(
        torch.tensor(ray.near, dtype=dtype), torch.tensor(ray.far, dtype=dtype), n, jitter, generator
    )
    positions = ray.origin + t.unsqueeze(-1) * ray.direction
    return RaySamples(t, deltas, positions)


def transmittance(tau: torch.Tensor) -> torch.Tensor:
    """``T_i = exp(-sum_{j<i} tau_j)`` along the last axis."""
    # exclusive cumulative sum by shifting, not by subtracting tau: subtraction
    # can round below the previous partial sum and break monotonicity
    acc = torch.cumsum(tau, dim=-1)
    return torch.exp(-torch.cat([torch.zeros_like(acc[..., :1]), acc[..., :-1]], dim=-1))


def composite(
    rgb: torch.Tensor, sigma: torch.Tensor, deltas: torch.Tensor
) -> tuple[torch.Tensor, torch.Tensor]:
    """Alpha-composite samples along rays.

    ``rgb`` is (..., n, 3), ``sigma`` and ``deltas`` are (..., n). Returns the
    accumulated color (..., 3) and the per-sample weights (..., n).
    """
    if bool((sigma < 0).any()):
        raise DomainError("negative density")
    tau = sigma * deltas
    weights = transmittance(tau) * -torch.expm1(-tau)
    return (weights.unsqueeze(-1) * rgb).sum(dim=-2), weights


def render_ray(samples: RaySamples, rgb: torch.Tensor, sigma: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    return composite(rgb, sigma, samples.deltas)


def render_rays(
    field: FieldFn,
    rays: RayBundle,
    bounds: Bounds,
    n_samples: int,
    background: Sequence[float] = (0.0, 0.0, 0.0),
    jitter: bool = False,
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    """Render a bundle of rays through ``field``; rays that miss the box get the background."""
    near, far, hit = intersect_box(rays, bounds)
    bg = rays.origins.new_tensor(background)
    out = bg.expand(len(rays), 3)
    if not bool(hit.any()):
        return out.clone()
    o, d = rays.origins[hit], rays.directions[hit]
    t, deltas = sample_intervals(near[hit], far[hit], n_samples, jitter, generator)
    x = o.unsqueeze(-2) + t.unsqueeze(-1) * d.unsqueeze(-2)
    lo = x.new_tensor(bounds[0])
    hi = x.new_tensor(bounds[1])
    x = torch.maximum(torch.minimum(x, hi), lo)
    rgb, sigma = field(x, d.unsqueeze(-2).expand_as(x))
    color, weights = composite(rgb, sigma, deltas)
    color = color + (1 - weights.sum(-1, keepdim=True)) * bg
    if bool(hit.all()):
        return color
    return out.index_put((hit.nonzero(as_tuple=True)[0],), color)


def frame_field(frame: FrameRepresentation, keyframe_basis: MultiResBasis | None, net: ShadingNetwork) -> FieldFn:
    basis = frame_basis(frame, keyframe_basis)

    def fn(x, d):
        return net(field_features(frame.coeff, basis, x), d)

    return fn


@dataclass(frozen=True)
class RenderConfig:
    n_samples: int = 128
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)
    chunk: int = 4096


def render_image(
    frame: FrameRepresentation,
    keyframe_basis: MultiResBasis | None,
    net: ShadingNetwork,
    camera: Camera,
    config: RenderConfig = RenderConfig(),
) -> torch.Tensor:
    """Deterministic (no jitter) render of a full image, shape (H, W, 3)."""
    fn = frame_field(frame, keyframe_basis, net)
    return render_field_image(fn, frame.coeff.bounds, camera, config, dtype=frame.coeff.data.dtype)


def render_field_image(
    field: FieldFn, bounds: Bounds, camera: Camera, config: RenderConfig = RenderConfig(), dtype=torch.float32
) -> torch.Tensor:
    rays = generate_rays(camera).to(dtype)
    out = []
    with torch.no_grad():
        for start in range(0, len(rays), config.chunk):
            chunk = rays[start : start + config.chunk]
            out.append(render_rays(field, chunk, bounds, config.n_samples, config.background))
    return torch.cat(out).reshape(camera.height, camera.width, 3)


def to_uint8(image) -> np.ndarray:
    """Linear [0, 1] float image to 8 bits by clamping (no gamma)."""
    arr = image.detach().cpu().numpy() if isinstance(image, torch.Tensor) else np.asarray(image)
    return np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)


@dataclass
class Gradients:
    basis: list[torch.Tensor]
    coeff: torch.Tensor
    net: list[torch.Tensor]


class RenderJob:
    """Forward render of a ray bundle that can later be differentiated.

    ``forward`` records the computation; ``backward`` takes the gradient of a
    loss with respect to the rendered colors and returns the gradients with
    respect to every grid entry of the frame (basis or residual levels and the
    coefficient grid) and every weight of the shading network. Autograd keeps
    the activations of the recorded forward pass.
    """

    def __init__(
        self,
        frame: FrameRepresentation,
        keyframe_basis: MultiResBasis | None,
        net: ShadingNetwork,
        n_samples: int = 128,
        background: Sequence[float] = (0.0, 0.0, 0.0),
    ):
        self.frame = frame
        self.keyframe_basis = keyframe_basis
        self.net = net
        self.n_samples = n_samples
        self.background = tuple(background)
        self._colors = None

    def forward(self, rays: RayBundle, jitter: bool = False, generator: torch.Generator | None = None) -> torch.Tensor:
        self._leaves = [g.data.detach().clone().requires_grad_(True) for g in self.frame.grids()]
        *levels, coeff = [g.with_data(t) for g, t in zip(self.frame.grids(), self._leaves)]
        frame = FrameRepresentation(self.frame.kind, MultiResBasis(tuple(levels)), coeff, self.frame.frame_index)
        field = frame_field(frame, self.keyframe_basis, self.net)
        with torch.enable_grad():
            self._colors = render_rays(
                field, rays, frame.coeff.bounds, self.n_samples, self.background, jitter, generator
            )
        return self._colors.detach()

    def backward(self, pixel_grad: torch.Tensor) -> Gradients:
        if self._colors is None:
            raise UsageError("backward called before forward")
        params = list(self.net.parameters())
        inputs = [*self._leaves, *params]
        live = [t for t in inputs if t.requires_grad]
        found = dict(zip(map(id, live), torch.autograd.grad(
            self._colors, live, grad_outputs=pixel_grad, allow_unused=True
        )))
        grads = [found.get(id(t)) for t in inputs]
        grads = [torch.zeros_like(t) if g is None else g for t, g in zip(inputs, grads)]
        n = len(self._leaves)
        self._colors = None
        return Gradients(basis=grads[: n - 1], coeff=grads[n - 1], net=grads[n:])
