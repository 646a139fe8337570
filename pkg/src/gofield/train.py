"""Sequential end-to-end optimization of groups of frames.

Each group starts with a keyframe stage that learns the basis ``B_1``, the
coefficients ``C_1``, the shading network and the entropy models under
simulated quantization. The reconstructed (quantized) keyframe then stays
fixed while every following frame learns a residual ``R_t`` and its own
coefficients ``C_t``. Every finished group is range coded into one
``.gof`` bitstream.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import yaml

from .codec import GofBitstream, decode_gof, encode_gof, fake_quantize
from .entropy import EntropyModel, fit_entropy_model, rate_loss, simulate_quantize
from .errors import StructuralError, TrainingDivergenceError
from .field import (
    FeatureGrid,
    FrameRepresentation,
    GofRepresentation,
    MultiResBasis,
    ShadingNetwork,
    random_grid,
)
from .metrics import psnr, ssim
from .optim import Adam
from .render import RayBundle, RenderConfig, frame_field, generate_rays, intersect_box, render_image, render_rays
from .scene import Dataset

log = logging.getLogger(__name__)

DEFAULT_Q_SWEEP = (1.0, 2.0, 5.0, 10.0)


@dataclass
class TrainConfig:
    q: float = 10.0
    gof_length: int = 10
    lambda1: float = 1e-6
    lambda2: float = 1e-6
    lambda1_floor: float = 1e-7
    lambda1_hold: float = 0.5  # fraction of iterations at the initial lambda1
    keyframe_iters: int = 4000
    residual_iters: int = 1500
    rays_per_batch: int = 4096
    n_samples: int = 128
    lr_grid: float = 2e-2
    lr_net: float = 1e-3
    lr_entropy: float = 1e-3
    adam_eps: float = 1e-8
    basis_resolutions: tuple[int, ...] = (8, 12, 16, 24, 32, 48)
    basis_channels: int = 4
    coeff_resolution: int = 48
    hidden: tuple[int, ...] = (64, 64)
    sh_degree: int = 2
    init_range: float = 0.05
    joint: bool = True  # simulated quantization and rate term during training
    entropy_fit_iters: int = 300  # post-hoc model fit; used when joint is False
    entropy_fit_lr: float = 1e-2
    rate_voxels: int = 0  # voxels per iteration for the rate estimate; 0 uses every voxel
    seed: int = 0
    log_every: int = 50

    def __post_init__(self):
        self.basis_resolutions = tuple(int(r) for r in self.basis_resolutions)
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.lambda1 < 0 or self.lambda2 < 0 or self.lambda1_floor < 0:
            raise ValueError("lambda values must be nonnegative")
        if self.lambda1_floor > self.lambda1:
            raise ValueError("lambda1_floor must not exceed lambda1")
        if self.gof_length < 1:
            raise ValueError("GOF length must be at least 1")
        if self.q <= 0:
            raise ValueError("q must be positive")
        if not 0 <= self.lambda1_hold <= 1:
            raise ValueError("lambda1_hold must be a fraction in [0, 1]")

    @property
    def entropy_model_count(self) -> int:
        return len(self.basis_resolutions) + 1

    @property
    def total_channels(self) -> int:
        return self.basis_channels * len(self.basis_resolutions)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        """Read a YAML (or JSON) mapping of field names to values."""
        data = yaml.safe_load(Path(path).read_text()) or {}
        if not isinstance(data, dict):
            raise ValueError(f"{path}: config must be a mapping")
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def lambda_schedule(iteration: int, config: TrainConfig, total: int | None = None) -> float:
    """lambda1 at ``iteration``: constant for the hold fraction, then linear down to the floor.

    The last iteration (``total - 1``) gets exactly ``lambda1_floor``.
    """
    total = config.keyframe_iters if total is None else total
    if iteration < 0:
        raise ValueError("iteration must be >= 0")
    hold = int(config.lambda1_hold * total)
    last = total - 1
    if iteration < hold or last <= hold:
        return config.lambda1 if last > hold or iteration < last else config.lambda1_floor
    frac = min(1.0, (iteration - hold) / (last - hold))
    return config.lambda1 + frac * (config.lambda1_floor - config.lambda1)


def total_loss(mse, rate, residual_l1, lambda1: float, lambda2: float):
    """``mse + lambda1 * rate + lambda2 * l1``.

    ``rate`` may be a (basis, coefficient) pair, which is summed;
    ``residual_l1`` is ``None`` for keyframes.
    """
    if isinstance(rate, (tuple, list)):
        rate = rate[0] + rate[1]
    parts = {"mse": mse, "rate": rate, "l1": residual_l1}
    for name, v in parts.items():
        if v is None:
            continue
        v = float(v.detach()) if isinstance(v, torch.Tensor) else float(v)
        if not math.isfinite(v):
            raise TrainingDivergenceError(f"non-finite {name} term: {v}")
    loss = mse
    if rate is not None and lambda1:
        loss = loss + lambda1 * rate
    if residual_l1 is not None and lambda2:
        loss = loss + lambda2 * residual_l1
    return loss


@dataclass
class TrainingRays:
    """Every training pixel of one frame whose ray hits the scene box."""

    rays: RayBundle
    colors: torch.Tensor

    def __len__(self) -> int:
        return len(self.rays)

    def sample(self, n: int, generator: torch.Generator) -> tuple[RayBundle, torch.Tensor]:
        idx = torch.randint(len(self), (min(n, len(self)),), generator=generator)
        return self.rays[idx], self.colors[idx]


def training_rays(dataset: Dataset, frame: int, split: str = "train", dtype=torch.float32) -> TrainingRays:
    origins, dirs, colors = [], [], []
    for c in dataset.indices(split):
        rays = generate_rays(dataset.cameras[c])
        _, _, hit = intersect_box(rays, dataset.bounds)
        origins.append(rays.origins[hit])
        dirs.append(rays.directions[hit])
        colors.append(torch.from_numpy(dataset.images[frame, c].reshape(-1, 3))[hit])
    if not origins:
        raise StructuralError(f"dataset has no '{split}' cameras")
    bundle = RayBundle(torch.cat(origins).to(dtype), torch.cat(dirs).to(dtype))
    return TrainingRays(bundle, torch.cat(colors).to(dtype))


@dataclass
class KeyframeBuffer:
    """What a decoder reconstructs for the keyframe: quantized grids, frozen network, models."""

    basis: MultiResBasis
    coeff: FeatureGrid
    net: ShadingNetwork
    models: list[EntropyModel]
    q: float


@dataclass
class StageLog:
    rows: list[dict] = field(default_factory=list)

    def add(self, **row):
        self.rows.append(row)


@dataclass
class StageResult:
    frame: FrameRepresentation
    models: list[EntropyModel]
    final_rate: float  # estimated bits per element at the end of training


def _quantized_grid(grid: FeatureGrid, q: float) -> FeatureGrid:
    return grid.with_data(fake_quantize(grid.data, q))


class _GradScale(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, scale):
        ctx.scale = scale
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad):
        return grad * ctx.scale, None


def _scale_grad(x: torch.Tensor, scale: float) -> torch.Tensor:
    """Identity whose backward multiplies the incoming gradient by ``scale``."""
    return _GradScale.apply(x, scale)


def _coding_values(grids: Sequence[torch.Tensor], q: float, lam1: float) -> list[torch.Tensor]:
    return [_scale_grad(q * g, lam1) for g in grids]


def _rate_subset(grids: Sequence[torch.Tensor], budget: int, generator: torch.Generator) -> list[torch.Tensor]:
    """Random voxel rows of each channels-last grid, in proportion to grid size.

    Sampling the same fraction from every grid keeps the per-element mean an
    unbiased estimate of the full-grid mean.
    """
    total = sum(g[..., 0].numel() for g in grids)
    if budget <= 0 or budget >= total:
        return list(grids)
    frac = budget / total
    out = []
    for g in grids:
        flat = g.reshape(-1, g.shape[-1])
        k = max(1, round(frac * flat.shape[0]))
        out.append(flat[torch.randint(flat.shape[0], (k,), generator=generator)])
    return out


def _estimate_rate(grids: Sequence[torch.Tensor], models, config: "TrainConfig", lam1: float, generator):
    vals = _rate_subset(_coding_values(grids, config.q, lam1), config.rate_voxels, generator)
    return rate_loss(vals[:-1], vals[-1], models)


def _integer_rate(grids: Sequence[FeatureGrid], models: Sequence[EntropyModel], q: float) -> float:
    """Bits per element at the quantized integer values."""
    with torch.no_grad():
        vals = [q * fake_quantize(g.data, q) for g in grids]
        rb, rc = rate_loss(vals[:-1], vals[-1], models)
        n_b = sum(v.numel() for v in vals[:-1])
        return float((rb * n_b + rc * vals[-1].numel()) / (n_b + vals[-1].numel()))


def _fit_models(models, grids: Sequence[FeatureGrid], config: TrainConfig, generator):
    for m, g in zip(models, grids):
        vals = config.q * fake_quantize(g.data, config.q)
        fit_entropy_model(m, vals, config.entropy_fit_iters, config.entropy_fit_lr, generator=generator)


class _Stage:
    """Shared optimization loop for keyframe and residual stages."""

    def __init__(self, config: TrainConfig, rays: TrainingRays, generator: torch.Generator, bounds, background,
                 log: StageLog | None, label: str, frame_number: int):
        self.config = config
        self.rays = rays
        self.g = generator
        self.bounds = bounds
        self.background = tuple(background)
        self.log = log
        self.label = label
        self.frame_number = frame_number

    def run(self, iters: int, groups: list[tuple[list[torch.Tensor], float]],
            models: list[EntropyModel], forward: Callable, counts: tuple[int, int]):
        """``counts`` holds the basis and coefficient element counts used to report bits per element."""
        cfg = self.config
        n_b, n_c = counts
        opts = [Adam(params, lr=lr, eps=cfg.adam_eps) for params, lr in groups if params]
        model_params = [p for m in models for p in m.parameters()]
        model_opt = Adam(model_params, lr=cfg.lr_entropy, eps=cfg.adam_eps) if cfg.joint else None
        last_rate = float("nan")
        for it in range(iters):
            rays, target = self.rays.sample(cfg.rays_per_batch, self.g)
            lam1 = lambda_schedule(it, cfg, iters) if cfg.joint else 0.0
            field_fn, rate, l1 = forward(lam1)
            colors = render_rays(field_fn, rays, self.bounds, cfg.n_samples, self.background, jitter=True,
                                 generator=self.g)
            mse = torch.mean((colors - target) ** 2)
            loss = total_loss(mse, rate, l1, lam1, cfg.lambda2)
            # rate already carries lambda1 on its value gradients (see _scale_grad), so the
            # objective adds it unweighted and the models descend the plain rate
            objective = total_loss(mse, None, l1, 0.0, cfg.lambda2)
            if rate is not None:
                objective = objective + rate[0] + rate[1]
            params = [p for opt in opts for p in opt.params]
            if model_opt is not None and rate is not None:
                params = params + model_params
            grads = torch.autograd.grad(objective, params, allow_unused=True)
            k = 0
            for opt in opts + ([model_opt] if model_opt is not None and rate is not None else []):
                n = len(opt.params)
                opt.step([torch.zeros_like(p) if g is None else g
                          for p, g in zip(opt.params, grads[k : k + n])])
                k += n
            per_element = 0.0
            if rate is not None:
                per_element = float((rate[0] * n_b + rate[1] * n_c).detach()) / (n_b + n_c)
                last_rate = per_element
            if self.log is not None and (it % cfg.log_every == 0 or it == iters - 1):
                self.log.add(
                    stage=self.label, frame=self.frame_number, iteration=it, mse=float(mse.detach()),
                    rate_bits=per_element,
                    l1=float(l1.detach()) if l1 is not None else 0.0,
                    psnr=-10 * math.log10(max(float(mse.detach()), 1e-10)), loss=float(loss.detach()),
                )
        return last_rate


def _new_models(config: TrainConfig) -> list[EntropyModel]:
    chans = [config.basis_channels] * len(config.basis_resolutions) + [config.total_channels]
    return [EntropyModel(c) for c in chans]


def train_keyframe(
    dataset: Dataset, config: TrainConfig, frame: int = 0, log: StageLog | None = None
) -> tuple[StageResult, ShadingNetwork, KeyframeBuffer]:
    """Optimize ``{B_1, C_1}``, the network and the entropy models for dataset frame ``frame``."""
    cfg = config
    g = torch.Generator().manual_seed(cfg.seed * 1_000_003 + frame)
    bounds = dataset.bounds
    basis = [random_grid(r, cfg.basis_channels, bounds, cfg.init_range, g).data.requires_grad_()
             for r in cfg.basis_resolutions]
    coeff = random_grid(cfg.coeff_resolution, cfg.total_channels, bounds, cfg.init_range, g).data.requires_grad_()
    net = ShadingNetwork(cfg.total_channels, cfg.hidden, cfg.sh_degree, generator=g)
    models = _new_models(cfg)
    rays = training_rays(dataset, frame)

    def forward(lam1):
        if cfg.joint:
            bq = [simulate_quantize(b, cfg.q, g) for b in basis]
            cq = simulate_quantize(coeff, cfg.q, g)
            rate = _estimate_rate(bq + [cq], models, cfg, lam1, g)
        else:
            bq, cq, rate = basis, coeff, None
        fr = FrameRepresentation(
            "keyframe", MultiResBasis(tuple(FeatureGrid(b, bounds) for b in bq)), FeatureGrid(cq, bounds)
        )
        return frame_field(fr, None, net), rate, None

    stage = _Stage(cfg, rays, g, bounds, dataset.background, log, "keyframe", frame)
    final_rate = stage.run(
        cfg.keyframe_iters,
        [(basis + [coeff], cfg.lr_grid), (list(net.parameters()), cfg.lr_net)],
        models,
        forward,
        (sum(b.numel() for b in basis), coeff.numel()),
    )
    result_frame = FrameRepresentation(
        "keyframe",
        MultiResBasis(tuple(FeatureGrid(b.detach(), bounds) for b in basis)),
        FeatureGrid(coeff.detach(), bounds),
    )
    if not cfg.joint:
        _fit_models(models, result_frame.grids(), cfg, g)
    for m in models:
        m.requires_grad_(False)
    net.freeze()
    buffer = KeyframeBuffer(
        MultiResBasis(tuple(_quantized_grid(lvl, cfg.q) for lvl in result_frame.basis.levels)),
        _quantized_grid(result_frame.coeff, cfg.q),
        net,
        models,
        cfg.q,
    )
    return StageResult(result_frame, models, final_rate), net, buffer


def train_residual_frame(
    dataset: Dataset,
    frame: int,
    buffer: KeyframeBuffer,
    config: TrainConfig,
    index_in_gof: int,
    previous: StageResult | None = None,
    log: StageLog | None = None,
) -> StageResult:
    """Optimize ``{R_t, C_t}`` for dataset frame ``frame`` against the keyframe buffer.

    The network and the keyframe grids stay fixed. ``R_t`` and ``C_t`` start
    from the previous frame's reconstruction (zero residual and the keyframe
    coefficients for the first residual frame); the entropy models continue
    from the previous frame's.
    """
    cfg = config
    if buffer.coeff.channels != cfg.total_channels or len(buffer.basis) != len(cfg.basis_resolutions):
        raise StructuralError("keyframe buffer does not match the training configuration")
    g = torch.Generator().manual_seed(cfg.seed * 1_000_003 + frame)
    bounds = dataset.bounds
    if previous is None or previous.frame.kind == "keyframe":
        residual = [torch.zeros_like(lvl.data).requires_grad_() for lvl in buffer.basis.levels]
        coeff = buffer.coeff.data.clone().requires_grad_()
        prev_models = buffer.models
    else:
        residual = [fake_quantize(lvl.data, cfg.q).requires_grad_() for lvl in previous.frame.basis.levels]
        coeff = fake_quantize(previous.frame.coeff.data, cfg.q).requires_grad_()
        prev_models = previous.models
    for lvl, r in zip(buffer.basis.levels, residual):
        if lvl.data.shape != r.shape:
            raise StructuralError("residual shapes must match the keyframe basis")
    models = [m.clone() for m in prev_models]
    for m in models:
        m.requires_grad_(True)
    rays = training_rays(dataset, frame)
    n_res = sum(r.numel() for r in residual)

    def forward(lam1):
        if cfg.joint:
            rq = [simulate_quantize(r, cfg.q, g) for r in residual]
            cq = simulate_quantize(coeff, cfg.q, g)
            rate = _estimate_rate(rq + [cq], models, cfg, lam1, g)
        else:
            rq, cq, rate = residual, coeff, None
        l1 = sum(r.abs().sum() for r in residual) / n_res
        res_basis = MultiResBasis(tuple(FeatureGrid(r, bounds) for r in rq))
        fr = FrameRepresentation("residual", res_basis, FeatureGrid(cq, bounds), index_in_gof)
        return frame_field(fr, buffer.basis, buffer.net), rate, l1

    stage = _Stage(cfg, rays, g, bounds, dataset.background, log, "residual", frame)
    final_rate = stage.run(cfg.residual_iters, [(residual + [coeff], cfg.lr_grid)], models, forward,
                           (n_res, coeff.numel()))
    result = FrameRepresentation(
        "residual",
        MultiResBasis(tuple(FeatureGrid(r.detach(), bounds) for r in residual)),
        FeatureGrid(coeff.detach(), bounds),
        index_in_gof,
    )
    if not cfg.joint:
        _fit_models(models, result.grids(), cfg, g)
    for m in models:
        m.requires_grad_(False)
    return StageResult(result, models, final_rate)


@dataclass
class GofResult:
    gof: GofRepresentation  # raw trained parameters
    bitstream: GofBitstream
    frames: list[int]  # dataset frame indices covered
    estimated_rates: list[float]  # bits/element from the last training iteration, per frame


def train_gof(dataset: Dataset, frames: Sequence[int], config: TrainConfig, log: StageLog | None = None) -> GofResult:
    frames = list(frames)
    key, net, buffer = train_keyframe(dataset, config, frames[0], log)
    results = [key]
    prev = key
    for pos, frame in enumerate(frames[1:], start=2):
        prev = train_residual_frame(dataset, frame, buffer, config, pos, prev, log)
        results.append(prev)
    gof = GofRepresentation(
        keyframe=key.frame,
        residuals=[r.frame for r in results[1:]],
        net=net,
        models=[r.models for r in results],
        first_frame=frames[0],
    )
    return GofResult(gof, encode_gof(gof, config.q), frames, [r.final_rate for r in results])


def partition_frames(frame_count: int, gof_length: int) -> list[list[int]]:
    if frame_count < 1:
        raise ValueError("need at least one frame")
    if gof_length < 1:
        raise ValueError("GOF length must be at least 1")
    return [list(range(s, min(s + gof_length, frame_count))) for s in range(0, frame_count, gof_length)]


@dataclass
class FrameReport:
    frame: int
    gof: int
    kind: str
    bytes: int
    psnr_train: float
    psnr_test: float
    ssim_test: float


def evaluate_gof(
    gof: GofRepresentation, dataset: Dataset, split: str, n_samples: int, with_ssim: bool = False
) -> list[tuple[float, float]]:
    """Per-frame (mean PSNR, mean SSIM) over the cameras of ``split``; images scored individually."""
    cfg = RenderConfig(n_samples=n_samples, background=tuple(dataset.background))
    cams = dataset.indices(split)
    out = []
    for pos, frame in enumerate(gof.frames):
        t = gof.first_frame + pos
        key_basis = gof.keyframe.basis
        scores, sims = [], []
        for c in cams:
            img = render_image(frame, key_basis, gof.net, dataset.cameras[c], cfg).numpy()
            img = np.clip(img, 0.0, 1.0)
            scores.append(psnr(img, dataset.images[t, c]))
            if with_ssim:
                sims.append(ssim(img, dataset.images[t, c]))
        out.append((float(np.mean(scores)) if scores else float("nan"),
                    float(np.mean(sims)) if sims else float("nan")))
    return out


def report_gof(result_bitstream: GofBitstream, dataset: Dataset, gof_index: int, n_samples: int,
               with_ssim: bool = True) -> list[FrameReport]:
    """Decode a bitstream and score every frame it holds against the dataset."""
    decoded = decode_gof(result_bitstream)
    train = evaluate_gof(decoded, dataset, "train", n_samples)
    test = evaluate_gof(decoded, dataset, "test", n_samples, with_ssim) if dataset.indices("test") else \
        [(float("nan"), float("nan"))] * len(decoded)
    sizes = result_bitstream.frame_sizes()
    return [
        FrameReport(decoded.first_frame + i, gof_index, fr.kind, sizes[i], train[i][0], test[i][0], test[i][1])
        for i, fr in enumerate(decoded.frames)
    ]


@dataclass
class SequenceResult:
    gofs: list[GofResult]
    reports: list[FrameReport]
    log: StageLog

    @property
    def bitstreams(self) -> list[GofBitstream]:
        return [g.bitstream for g in self.gofs]

    @property
    def total_bytes(self) -> int:
        return sum(b.size for b in self.bitstreams)


def train_sequence(dataset: Dataset, config: TrainConfig, frames: Sequence[int] | None = None,
                   evaluate: bool = True) -> SequenceResult:
    """Split the frames into groups, train and encode each group, and score the decoded result."""
    frames = list(range(dataset.frame_count)) if frames is None else list(frames)
    log_ = StageLog()
    gofs, reports = [], []
    for gi, start in enumerate(range(0, len(frames), config.gof_length)):
        group = frames[start : start + config.gof_length]
        res = train_gof(dataset, group, config, log_)
        gofs.append(res)
        log.info("GOF %d (frames %s): %d bytes", gi, group, res.bitstream.size)
        if evaluate:
            reports.extend(report_gof(res.bitstream, dataset, gi, config.n_samples))
    return SequenceResult(gofs, reports, log_)


def raw_size(gof: GofRepresentation) -> int:
    """Uncompressed float32 size of all grids and the network (the no-compression baseline)."""
    n = sum(g.data.numel() for fr in gof.frames for g in fr.grids())
    n += sum(p.numel() for p in gof.net.parameters())
    return 4 * n
