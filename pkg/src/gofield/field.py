"""Dense feature grids and the factorized radiance field built on them.

A frame of the dynamic field is a coefficient grid ``C_t`` and a
multi-resolution basis ``B_t``. Keyframes store the basis directly; every
other frame of a group stores a residual ``R_t`` so that ``B_t = B_1 + R_t``.
The field at a point is a tiny MLP applied to the Hadamard product of the
interpolated coefficient features and the concatenated basis features,
together with an encoding of the view direction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import torch
from torch import nn

from .errors import DomainError, StructuralError

Bounds = tuple[tuple[float, float, float], tuple[float, float, float]]

DEFAULT_BOUNDS: Bounds = ((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0))

# Relative slack for points that sit on a bounding face up to rounding.
_BOUNDS_TOL = 1e-6


def _as_bounds(bounds) -> Bounds:
    lo, hi = bounds
    lo = tuple(float(v) for v in lo)
    hi = tuple(float(v) for v in hi)
    if len(lo) != 3 or len(hi) != 3:
        raise StructuralError(f"bounds must be two 3-vectors, got {bounds!r}")
    return lo, hi


@dataclass(frozen=True)
class FeatureGrid:
    """A dense lattice of feature vectors spanning an axis-aligned box.

    ``data`` has shape ``(nx, ny, nz, channels)``. Lattice nodes sit on the
    box corners and are evenly spaced in between, so node ``(i, j, k)`` is at
    ``lo + (i, j, k) * (hi - lo) / (n - 1)``.
    """

    data: torch.Tensor
    bounds: Bounds = DEFAULT_BOUNDS

    def __post_init__(self):
        object.__setattr__(self, "bounds", _as_bounds(self.bounds))
        if self.data.ndim != 4:
            raise StructuralError(
                f"grid data must be (nx, ny, nz, channels), got shape {tuple(self.data.shape)}"
            )
        if min(self.data.shape[:3]) < 2 or self.data.shape[3] < 1:
            raise StructuralError(
                f"grid needs at least 2 nodes per axis and 1 channel, got {tuple(self.data.shape)}"
            )
        lo, hi = self.bounds
        if any(h - l <= 0 for l, h in zip(lo, hi)):
            raise DomainError(f"bounds must have positive extent, got {self.bounds}")
        if not bool(torch.isfinite(self.data.detach()).all()):
            raise DomainError("grid contains non-finite entries")

    @property
    def resolution(self) -> tuple[int, int, int]:
        return tuple(self.data.shape[:3])

    @property
    def channels(self) -> int:
        return self.data.shape[3]

    def with_data(self, data: torch.Tensor) -> "FeatureGrid":
        return FeatureGrid(data, self.bounds)


def interp(grid: FeatureGrid, x: torch.Tensor) -> torch.Tensor:
    """Trilinearly interpolate ``grid`` at world-space points ``x`` of shape (..., 3).

    Returns features of shape (..., channels). Differentiable with respect to
    the grid entries. Points outside the grid box raise :class:`DomainError`.
    """
    lo = x.new_tensor(grid.bounds[0])
    hi = x.new_tensor(grid.bounds[1])
    slack = _BOUNDS_TOL * (hi - lo)
    if bool(((x < lo - slack) | (x > hi + slack)).any()):
        raise DomainError("interp called with a point outside the grid bounds")

    res = x.new_tensor(grid.resolution)
    u = ((x - lo) / (hi - lo) * (res - 1)).clamp(min=0)
    u = torch.minimum(u, res - 1)
    i0 = torch.minimum(u.floor(), res - 2)
    frac = u - i0
    i0 = i0.long()

    nx, ny, nz, c = grid.data.shape
    flat = grid.data.reshape(nx * ny * nz, c)
    base = (i0[..., 0] * ny + i0[..., 1]) * nz + i0[..., 2]
    fx, fy, fz = frac.unbind(-1)
    gx, gy, gz = 1 - fx, 1 - fy, 1 - fz

    out = None
    for dx, wx in ((0, gx), (1, fx)):
        for dy, wy in ((0, gy), (1, fy)):
            for dz, wz in ((0, gz), (1, fz)):
                w = (wx * wy * wz).unsqueeze(-1)
                term = w * flat[base + (dx * ny + dy) * nz + dz]
                out = term if out is None else out + term
    return out


@dataclass(frozen=True)
class MultiResBasis:
    """An ordered stack of basis grids with strictly increasing resolution."""

    levels: tuple[FeatureGrid, ...]

    def __post_init__(self):
        levels = tuple(self.levels)
        object.__setattr__(self, "levels", levels)
        if not levels:
            raise StructuralError("a basis needs at least one level")
        for a, b in zip(levels, levels[1:]):
            if any(rb < ra for ra, rb in zip(a.resolution, b.resolution)) or a.resolution == b.resolution:
                raise StructuralError(
                    f"basis resolutions must strictly increase, got {a.resolution} then {b.resolution}"
                )
        if any(lvl.bounds != levels[0].bounds for lvl in levels):
            raise StructuralError("all basis levels must share the same bounds")

    @property
    def total_channels(self) -> int:
        return sum(lvl.channels for lvl in self.levels)

    @property
    def bounds(self) -> Bounds:
        return self.levels[0].bounds

    def __len__(self) -> int:
        return len(self.levels)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        """Concatenated per-level features at ``x``."""
        return torch.cat([interp(lvl, x) for lvl in self.levels], dim=-1)

    def zeros_like(self) -> "MultiResBasis":
        return MultiResBasis(tuple(lvl.with_data(torch.zeros_like(lvl.data)) for lvl in self.levels))


def compose_basis(keyframe_basis: MultiResBasis, residual: MultiResBasis) -> MultiResBasis:
    """Return ``keyframe_basis + residual`` level by level (inputs are not modified)."""
    if len(keyframe_basis) != len(residual):
        raise StructuralError(
            f"level count mismatch: keyframe has {len(keyframe_basis)}, residual has {len(residual)}"
        )
    levels = []
    for i, (k, r) in enumerate(zip(keyframe_basis.levels, residual.levels)):
        if k.data.shape != r.data.shape:
            raise StructuralError(
                f"level {i}: keyframe shape {tuple(k.data.shape)} != residual shape {tuple(r.data.shape)}"
            )
        levels.append(FeatureGrid(k.data + r.data, k.bounds))
    return MultiResBasis(tuple(levels))


# Real spherical harmonics, same sign convention as Plenoxels.
_SH_C0 = 0.28209479177387814
_SH_C1 = 0.4886025119029199
_SH_C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)


def direction_encoding_width(degree: int) -> int:
    return (degree + 1) ** 2


def direction_encode(d: torch.Tensor, degree: int = 2) -> torch.Tensor:
    """Real spherical-harmonic encoding of unit directions, shape (..., (degree+1)**2).

    For ``d = (0, 0, 1)`` and degree 2 the encoding is
    ``[C0, 0, C1, 0, 0, 0, 2*C2[2], 0, 0]`` with ``C0 = 0.2820948``,
    ``C1 = 0.4886025`` and ``2*C2[2] = 0.6307831``.
    """
    if degree not in (0, 1, 2):
        raise DomainError(f"direction encoding degree must be 0, 1 or 2, got {degree}")
    norm = torch.linalg.vector_norm(d, dim=-1)
    if bool((torch.abs(norm - 1) > 1e-6).any()):
        raise DomainError("direction_encode expects unit vectors")
    x, y, z = d.unbind(-1)
    terms = [torch.full_like(x, _SH_C0)]
    if degree >= 1:
        terms += [-_SH_C1 * y, _SH_C1 * z, -_SH_C1 * x]
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        terms += [
            _SH_C2[0] * x * y,
            _SH_C2[1] * y * z,
            _SH_C2[2] * (2 * zz - xx - yy),
            _SH_C2[3] * x * z,
            _SH_C2[4] * (xx - yy),
        ]
    return torch.stack(terms, dim=-1)


class ShadingNetwork(nn.Module):
    """Tiny MLP mapping (feature product, encoded direction) to (rgb, density).

    Hidden layers use ReLU. The last layer emits four raw values: a sigmoid
    gives rgb in [0, 1] and a softplus gives a nonnegative density.
    """

    def __init__(
        self,
        feature_channels: int,
        hidden: Sequence[int] = (64, 64),
        sh_degree: int = 2,
        generator: torch.Generator | None = None,
        dtype: torch.dtype = torch.float32,
    ):
        super().__init__()
        self.feature_channels = int(feature_channels)
        self.sh_degree = int(sh_degree)
        self.hidden = tuple(int(h) for h in hidden)
        widths = (self.in_features, *self.hidden, 4)
        self.layers = nn.ModuleList(
            nn.Linear(a, b, dtype=dtype) for a, b in zip(widths[:-1], widths[1:])
        )
        with torch.no_grad():
            for layer in self.layers:
                bound = 1.0 / math.sqrt(layer.in_features)
                layer.weight.copy_(_uniform(layer.weight.shape, bound, generator, dtype))
                layer.bias.copy_(_uniform(layer.bias.shape, bound, generator, dtype))

    @property
    def in_features(self) -> int:
        return self.feature_channels + direction_encoding_width(self.sh_degree)

    def raw(self, features: torch.Tensor, dir_enc: torch.Tensor) -> torch.Tensor:
        h = torch.cat([features, dir_enc], dim=-1)
        for layer in self.layers[:-1]:
            h = torch.relu(layer(h))
        return self.layers[-1](h)

    def forward(self, features: torch.Tensor, d: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        out = self.raw(features, direction_encode(d, self.sh_degree))
        rgb = torch.sigmoid(out[..., :3])
        density = nn.functional.softplus(out[..., 3])
        return rgb, density

    def freeze(self) -> "ShadingNetwork":
        for p in self.parameters():
            p.requires_grad_(False)
        return self


def _uniform(shape, bound, generator, dtype):
    return (torch.rand(shape, generator=generator, dtype=dtype) * 2 - 1) * bound


@dataclass(frozen=True)
class FrameRepresentation:
    """One frame of a group: ``{B_1, C_1}`` for the keyframe, ``{R_t, C_t}`` otherwise.

    ``frame_index`` is the 1-based position inside the group.
    """

    kind: str
    basis: MultiResBasis
    coeff: FeatureGrid
    frame_index: int = 1

    def __post_init__(self):
        if self.kind not in ("keyframe", "residual"):
            raise StructuralError(f"frame kind must be 'keyframe' or 'residual', got {self.kind!r}")
        if self.frame_index < 1:
            raise StructuralError(f"frame_index must be >= 1, got {self.frame_index}")
        if self.kind == "keyframe" and self.frame_index != 1:
            raise StructuralError("the keyframe is always frame 1 of its group")
        if self.coeff.channels != self.basis.total_channels:
            raise StructuralError(
                f"coefficient channels ({self.coeff.channels}) must equal basis channels "
                f"({self.basis.total_channels})"
            )

    def grids(self) -> list[FeatureGrid]:
        """Basis (or residual) levels followed by the coefficient grid."""
        return [*self.basis.levels, self.coeff]


def frame_basis(frame: FrameRepresentation, keyframe_basis: MultiResBasis | None) -> MultiResBasis:
    if frame.kind == "keyframe":
        return frame.basis
    if keyframe_basis is None:
        raise StructuralError("a residual frame needs its keyframe basis")
    return compose_basis(keyframe_basis, frame.basis)


def field_features(coeff: FeatureGrid, basis: MultiResBasis, x: torch.Tensor) -> torch.Tensor:
    return interp(coeff, x) * basis.features(x)


def query_field(
    frame: FrameRepresentation,
    keyframe_basis: MultiResBasis | None,
    net: ShadingNetwork,
    x: torch.Tensor,
    d: torch.Tensor,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Evaluate (rgb, density) of a frame at points ``x`` viewed along ``d``."""
    basis = frame_basis(frame, keyframe_basis)
    return net(field_features(frame.coeff, basis, x), d)


def random_grid(resolution, channels, bounds=DEFAULT_BOUNDS, scale=0.05, generator=None, dtype=torch.float32):
    """Grid with entries drawn from uniform(-scale, scale)."""
    shape = (*_res3(resolution), int(channels))
    return FeatureGrid(_uniform(shape, scale, generator, dtype), bounds)


def zero_grid(resolution, channels, bounds=DEFAULT_BOUNDS, dtype=torch.float32):
    return FeatureGrid(torch.zeros((*_res3(resolution), int(channels)), dtype=dtype), bounds)


def _res3(resolution) -> tuple[int, int, int]:
    if isinstance(resolution, int):
        return (resolution,) * 3
    res = tuple(int(r) for r in resolution)
    if len(res) != 3:
        raise StructuralError(f"resolution must be an int or a 3-tuple, got {resolution!r}")
    return res


@dataclass
class GofRepresentation:
    """A trained group of frames: keyframe, residual frames, shared network and
    the seven entropy models used for each frame (six basis levels + coefficients)."""

    keyframe: FrameRepresentation
    residuals: list[FrameRepresentation]
    net: ShadingNetwork
    models: list[list] = field(default_factory=list)
    first_frame: int = 0

    def __post_init__(self):
        for i, fr in enumerate(self.residuals, start=2):
            if fr.kind != "residual" or fr.frame_index != i:
                raise StructuralError(f"residual frames must be numbered 2..N in order; got {fr.frame_index} at {i}")
            for k, r in zip(self.keyframe.basis.levels, fr.basis.levels):
                if k.data.shape != r.data.shape:
                    raise StructuralError("residual basis shapes must match the keyframe basis")
        if self.models and len(self.models) != len(self):
            raise StructuralError(f"need one model set per frame ({len(self)}), got {len(self.models)}")

    def __len__(self) -> int:
        return 1 + len(self.residuals)

    @property
    def frames(self) -> list[FrameRepresentation]:
        return [self.keyframe, *self.residuals]
