"""Training-time compression surrogate: additive-noise quantization and a
learned per-channel CDF used to estimate bits.

Everything here works in the *coding domain*, i.e. on values already
multiplied by the quantization parameter ``q``: an integer symbol ``k`` in
that domain dequantizes to ``k / q``.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .errors import StructuralError

P_MIN = 2.0**-16
DEFAULT_FILTERS = (3, 3, 3)


def simulate_quantize(x: torch.Tensor, q: float, generator: torch.Generator | None = None) -> torch.Tensor:
    """Return ``(q*x + u) / q`` with ``u ~ U(-1/2, 1/2)`` drawn per element.

    The noise is added as ``x + u/q`` so the gradient with respect to ``x`` is
    exactly the identity.
    """
    if q <= 0:
        raise ValueError(f"q must be positive, got {q}")
    u = torch.rand(x.shape, generator=generator, dtype=x.dtype) - 0.5
    return x + u / q


class _LowerBound(torch.autograd.Function):
    """max(x, bound) whose gradient still flows when it would raise x."""

    @staticmethod
    def forward(ctx, x, bound):
        ctx.save_for_backward(x)
        ctx.bound = bound
        return x.clamp_min(bound)

    @staticmethod
    def backward(ctx, grad):
        (x,) = ctx.saved_tensors
        keep = (x >= ctx.bound) | (grad < 0)
        return grad * keep, None


class EntropyModel(nn.Module):
    """Per-channel monotone CDF built from composed monotone layers.

    Each channel owns a chain of affine maps with positive weights (stored as
    log-weights), biases and ``tanh`` gates bounded in (-1, 1), followed by a
    sigmoid. With the default symmetric initialization every channel is the
    logistic CDF with scale ``init_scale`` centred at 0, so ``cdf(0) == 0.5``
    exactly.
    """

    def __init__(
        self,
        channels: int,
        filters: Sequence[int] = DEFAULT_FILTERS,
        init_scale: float = 10.0,
        p_min: float = P_MIN,
        dtype: torch.dtype = torch.float32,
    ):
        super().__init__()
        self.channels = int(channels)
        self.filters = tuple(int(f) for f in filters)
        self.p_min = float(p_min)
        widths = (1, *self.filters, 1)
        n_layers = len(widths) - 1
        scale = init_scale ** (1.0 / n_layers)
        self.log_weights = nn.ParameterList()
        self.biases = nn.ParameterList()
        self.gates = nn.ParameterList()
        for i in range(n_layers):
            w_init = math.log(1.0 / scale / widths[i + 1])
            self.log_weights.append(
                nn.Parameter(torch.full((self.channels, widths[i + 1], widths[i]), w_init, dtype=dtype))
            )
            # antisymmetric biases keep every layer an odd function at init
            b = torch.linspace(-0.5, 0.5, widths[i + 1], dtype=dtype) if widths[i + 1] > 1 else torch.zeros(1, dtype=dtype)
            self.biases.append(nn.Parameter(b.reshape(1, -1, 1).repeat(self.channels, 1, 1)))
            if i < n_layers - 1:
                self.gates.append(nn.Parameter(torch.zeros((self.channels, widths[i + 1], 1), dtype=dtype)))

    @property
    def param_count_per_channel(self) -> int:
        return sum(p[0].numel() for p in self.parameters())

    def logits(self, y: torch.Tensor, channel: int | None = None) -> torch.Tensor:
        """CDF logits. ``y`` is (channels, 1, n), or (1, 1, n) when ``channel`` is given."""
        sl = slice(None) if channel is None else slice(channel, channel + 1)
        h = y
        for i, (w, b) in enumerate(zip(self.log_weights, self.biases)):
            h = torch.matmul(torch.exp(w[sl]), h) + b[sl]
            if i < len(self.gates):
                h = h + torch.tanh(self.gates[i][sl]) * torch.tanh(h)
        return h

    def _channel_major(self, values: torch.Tensor) -> torch.Tensor:
        if values.shape[-1] != self.channels:
            raise StructuralError(f"expected {self.channels} channels, got values with shape {tuple(values.shape)}")
        return values.reshape(-1, self.channels).T.unsqueeze(1)

    def likelihood(self, values: torch.Tensor) -> torch.Tensor:
        """PMF of channels-last ``values`` (..., channels), floored at ``p_min``."""
        y = self._channel_major(values)
        lik = self._pmf(y)
        return lik.squeeze(1).T.reshape(values.shape)

    def _pmf(self, y: torch.Tensor, channel: int | None = None) -> torch.Tensor:
        n = y.shape[-1]
        both = self.logits(torch.cat([y - 0.5, y + 0.5], dim=-1), channel)
        lower, upper = both[..., :n], both[..., n:]
        # evaluate in whichever tail keeps the sigmoid difference well conditioned
        sign = torch.where(lower + upper > 0, -1.0, 1.0).to(y.dtype).detach()
        lik = torch.abs(torch.sigmoid(sign * upper) - torch.sigmoid(sign * lower))
        return _LowerBound.apply(lik, self.p_min)

    def _check_channel(self, channel: int):
        if not 0 <= channel < self.channels:
            raise StructuralError(f"channel {channel} out of range for a {self.channels}-channel model")

    def bits(self, values: torch.Tensor) -> torch.Tensor:
        """Total -log2 likelihood of ``values`` (channels-last)."""
        return -torch.log2(self.likelihood(values)).sum()

    def to_bytes(self) -> bytes:
        """Parameters as little-endian float32, channel-major."""
        parts = []
        for c in range(self.channels):
            for p in self.parameters():
                parts.append(p.detach()[c].reshape(-1).cpu().numpy().astype("<f4").tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, data: bytes, channels: int, filters=DEFAULT_FILTERS, p_min=P_MIN, dtype=torch.float64):
        model = cls(channels, filters, p_min=p_min, dtype=dtype)
        arr = np.frombuffer(data, dtype="<f4")
        per = model.param_count_per_channel
        if arr.size != per * channels:
            raise StructuralError(f"expected {per * channels} parameters, got {arr.size}")
        arr = arr.reshape(channels, per)
        with torch.no_grad():
            offset = 0
            for p in model.parameters():
                n = p[0].numel()
                p.copy_(torch.from_numpy(arr[:, offset : offset + n].astype(np.float64)).reshape(p.shape).to(dtype))
                offset += n
        return model

    def byte_size(self) -> int:
        return 4 * self.param_count_per_channel * self.channels

    def clone(self, dtype=None) -> "EntropyModel":
        dtype = dtype or self.log_weights[0].dtype
        out = EntropyModel(self.channels, self.filters, p_min=self.p_min, dtype=dtype)
        out.load_state_dict({k: v.to(dtype) for k, v in self.state_dict().items()})
        return out


def cdf(model: EntropyModel, channel: int, y) -> torch.Tensor:
    """CDF of ``channel`` at ``y`` (any shape), in (0, 1)."""
    model._check_channel(channel)
    y = torch.as_tensor(y, dtype=model.log_weights[0].dtype)
    return torch.sigmoid(model.logits(y.reshape(1, 1, -1), channel)).reshape(y.shape)


def pmf(model: EntropyModel, channel: int, y) -> torch.Tensor:
    """``max(CDF(y + 1/2) - CDF(y - 1/2), p_min)`` for ``channel``."""
    model._check_channel(channel)
    y = torch.as_tensor(y, dtype=model.log_weights[0].dtype)
    return model._pmf(y.reshape(1, 1, -1), channel).reshape(y.shape)


def rate_loss(
    residual_q: Sequence[torch.Tensor],
    coeff_q: torch.Tensor,
    models: Sequence[EntropyModel],
) -> tuple[torch.Tensor, torch.Tensor]:
    """Estimated bits per element for the basis/residual levels and the coefficients.

    ``residual_q`` holds one channels-last tensor per basis level and
    ``coeff_q`` the coefficient grid, all in the coding domain. ``models`` is
    one model per level followed by the coefficient model. Returns
    ``(bits_per_basis_element, bits_per_coeff_element)``; their sum is the
    rate term of the training loss.
    """
    if len(models) != len(residual_q) + 1:
        raise StructuralError(
            f"need {len(residual_q) + 1} entropy models ({len(residual_q)} levels + coefficients), got {len(models)}"
        )
    basis_bits = sum(m.bits(v) for m, v in zip(models, residual_q))
    n_basis = sum(v.numel() for v in residual_q)
    coeff_bits = models[-1].bits(coeff_q)
    return basis_bits / n_basis, coeff_bits / coeff_q.numel()


def fit_entropy_model(
    model: EntropyModel,
    values: torch.Tensor,
    steps: int = 500,
    lr: float = 1e-2,
    noise: bool = True,
    generator: torch.Generator | None = None,
) -> float:
    """Fit ``model`` to channels-last coding-domain ``values`` by minimizing bits.

    With ``noise`` the values are perturbed by U(-1/2, 1/2) each step, which
    fits the density of the continuous relaxation. Returns the final
    bits-per-element at the unperturbed values.
    """
    from .optim import Adam

    values = values.detach().to(model.log_weights[0].dtype)
    params = list(model.parameters())
    opt = Adam(params, lr=lr)
    for _ in range(steps):
        y = values + (torch.rand(values.shape, generator=generator, dtype=values.dtype) - 0.5) if noise else values
        loss = model.bits(y) / y.numel()
        grads = torch.autograd.grad(loss, params)
        opt.step(grads)
    with torch.no_grad():
        return float(model.bits(values) / values.numel())
