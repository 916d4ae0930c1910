"""Mask mathematics: RBF and independent Bernoulli grids, stochastic mask
sampling, mask application, and the regularizers used to train selectors.

Coordinates are row-major with the origin at the top-left pixel: entry
``(z, t)`` means row ``z``, column ``t``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import torch
import torch.nn.functional as F

from salprune.rng import LOG_EPS, exponential_noise

Scalar = Union[float, torch.Tensor]

SIGMA_EPS = 1e-3  # floor for randomly drawn expansions


@dataclass
class RbfParams:
    """Compact 3-number saliency representation: center row, center column,
    and expansion, all in pixels. ``sigma`` must be positive."""

    c_z: Scalar
    c_t: Scalar
    sigma: Scalar

    def as_tensor(self, dtype=torch.float32) -> torch.Tensor:
        parts = [torch.as_tensor(v, dtype=dtype) for v in (self.c_z, self.c_t, self.sigma)]
        return torch.stack(parts)

    @classmethod
    def from_tensor(cls, t: torch.Tensor) -> "RbfParams":
        if t.shape != (3,):
            raise ValueError(f"expected a 3-vector, got shape {tuple(t.shape)}")
        return cls(float(t[0]), float(t[1]), float(t[2]))


@dataclass
class MaskDistribution:
    """An H x W grid of per-pixel Bernoulli keep-probabilities in [0, 1]."""

    params: torch.Tensor


@dataclass
class Mask:
    """An H x W mask; ``soft`` entries lie in (0, 1), ``hard`` in {0, 1}."""

    values: torch.Tensor
    kind: str  # "soft" | "hard"


def _grid_values(obj) -> torch.Tensor:
    if isinstance(obj, (MaskDistribution, Mask)):
        return obj.params if isinstance(obj, MaskDistribution) else obj.values
    return torch.as_tensor(obj)


def rbf_grid(
    c_z: Scalar,
    c_t: Scalar,
    sigma: Scalar,
    height: int,
    width: int,
    dtype=torch.float32,
) -> torch.Tensor:
    """Radial keep-probability grid: entry (z, t) is
    ``exp(-[(z - c_z)^2 + (t - c_t)^2] / (2 sigma^2))``.

    Scalars broadcast; batched parameters of shape (B,) yield (B, H, W).
    Differentiable in all three parameters.
    """
    c_z = torch.as_tensor(c_z, dtype=None if torch.is_tensor(c_z) else dtype)
    c_t = torch.as_tensor(c_t, dtype=c_z.dtype)
    sigma = torch.as_tensor(sigma, dtype=c_z.dtype)
    rows = torch.arange(height, dtype=c_z.dtype)
    cols = torch.arange(width, dtype=c_z.dtype)
    if c_z.dim() == 0:
        dz = rows.view(height, 1) - c_z
        dt = cols.view(1, width) - c_t
        sq = dz * dz + dt * dt
        return torch.exp(-sq / (2.0 * sigma * sigma))
    dz = rows.view(1, height, 1) - c_z.view(-1, 1, 1)
    dt = cols.view(1, 1, width) - c_t.view(-1, 1, 1)
    sq = dz * dz + dt * dt
    return torch.exp(-sq / (2.0 * sigma.view(-1, 1, 1) ** 2))


def bernoulli_param_grid(p: RbfParams, height: int, width: int) -> MaskDistribution:
    """Evaluate the RBF keep-probability grid for one parameter triple."""
    if height < 1 or width < 1:
        raise ValueError(f"grid must be at least 1x1, got {height}x{width}")
    sigma_val = float(p.sigma) if not torch.is_tensor(p.sigma) else float(p.sigma.detach())
    if sigma_val <= 0:
        raise ValueError(f"sigma must be positive, got {sigma_val}")
    return MaskDistribution(rbf_grid(p.c_z, p.c_t, p.sigma, height, width))


def independent_param_grid(logits: torch.Tensor) -> MaskDistribution:
    """Per-pixel independent parameterization: entrywise sigmoid of logits."""
    return MaskDistribution(torch.sigmoid(torch.as_tensor(logits)))


def gumbel_sigmoid(
    probs: torch.Tensor,
    tau: float,
    rng: torch.Generator | None = None,
    noise: torch.Tensor | None = None,
) -> torch.Tensor:
    """Stochastic relaxation of Bernoulli sampling on a probability grid:

        sigmoid((log p + e) / tau)

    with one unit-exponential draw ``e`` per entry. Thresholding the result
    at 0.5 recovers an exact Bernoulli(p) sample (``e > -log p`` iff
    ``U < p``), so the relaxation stays calibrated as ``tau`` shrinks.
    Pass ``noise`` explicitly to freeze the draw (gradient checks).
    """
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    probs = torch.as_tensor(probs)
    if noise is None:
        noise = exponential_noise(probs.shape, rng, dtype=probs.dtype)
    else:
        noise = torch.as_tensor(noise, dtype=probs.dtype).expand_as(probs)
    logp = torch.log(probs.clamp_min(LOG_EPS))
    return torch.sigmoid((logp + noise) / tau)


def sample_gumbel_sigmoid_mask(
    dist: MaskDistribution,
    tau: float,
    rng: torch.Generator | None = None,
    noise: torch.Tensor | None = None,
) -> Mask:
    """Draw one soft mask from a Bernoulli-parameter grid."""
    return Mask(gumbel_sigmoid(dist.params, tau, rng=rng, noise=noise), kind="soft")


def harden_mask(dist: MaskDistribution) -> Mask:
    """Deterministic binarization: entry is 1 iff its keep-probability is
    strictly greater than 0.5."""
    p = _grid_values(dist)
    return Mask((p > 0.5).to(p.dtype), kind="hard")


def apply_mask(x: torch.Tensor, m: Union[Mask, torch.Tensor]) -> torch.Tensor:
    """Elementwise mask application; the mask broadcasts across channels.

    ``x`` may be (H, W), (C, H, W), or (B, C, H, W); a per-sample mask of
    shape (B, H, W) is accepted for batched inputs.
    """
    values = m.values if isinstance(m, Mask) else torch.as_tensor(m)
    x = torch.as_tensor(x)
    if values.shape[-2:] != x.shape[-2:]:
        raise ValueError(
            f"mask shape {tuple(values.shape)} does not match input {tuple(x.shape)}"
        )
    if values.dim() == 3 and x.dim() == 4:
        if values.shape[0] != x.shape[0]:
            raise ValueError(
                f"mask batch {values.shape[0]} does not match input batch {x.shape[0]}"
            )
        values = values.unsqueeze(1)
    return x * values.to(x.dtype)


def sample_random_rbf_params(
    height: int, width: int, rng: torch.Generator | None = None
) -> RbfParams:
    """Random kernel parameters covering the useful range for an H x W image:
    centers uniform over the image extent, expansion uniform on
    [0, 2 * max(H, W)] with a small positive floor."""
    if height < 1 or width < 1:
        raise ValueError(f"image must be at least 1x1, got {height}x{width}")
    u = torch.rand(3, generator=rng, dtype=torch.float64)
    c_z = float(u[0]) * height
    c_t = float(u[1]) * width
    sigma = max(float(u[2]) * 2.0 * max(height, width), SIGMA_EPS)
    return RbfParams(c_z, c_t, sigma)


def sample_random_rbf_params_batch(
    n: int, height: int, width: int, rng: torch.Generator | None = None
) -> torch.Tensor:
    """Vectorized form of :func:`sample_random_rbf_params`; returns (n, 3)."""
    u = torch.rand(n, 3, generator=rng)
    out = torch.empty(n, 3)
    out[:, 0] = u[:, 0] * height
    out[:, 1] = u[:, 1] * width
    out[:, 2] = (u[:, 2] * 2.0 * max(height, width)).clamp_min(SIGMA_EPS)
    return out


def center_nonlinearity(u: Scalar, scale: Scalar, offset: Scalar) -> torch.Tensor:
    """Squash a raw head output into pixel coordinates:
    ``scale * tanh(u / scale) + offset``, range (offset - scale, offset + scale).

    Use (scale=14, offset=16) for 32x32 inputs and (108, 112) for 224x224.
    """
    scale_val = float(scale) if not torch.is_tensor(scale) else float(scale.detach())
    if scale_val <= 0:
        raise ValueError(f"scale must be positive, got {scale_val}")
    u = torch.as_tensor(u, dtype=None if torch.is_tensor(u) else torch.get_default_dtype())
    return scale * torch.tanh(u / scale) + offset


def sigma_nonlinearity(u: Scalar) -> torch.Tensor:
    """Strictly positive expansion via softplus, log(1 + exp(u))."""
    u = torch.as_tensor(u, dtype=None if torch.is_tensor(u) else torch.get_default_dtype())
    return F.softplus(u)


def mask_l0(m: Union[Mask, MaskDistribution, torch.Tensor]) -> torch.Tensor:
    """Mask size: the entry sum. Exact count for hard masks; for soft masks
    this is the differentiable relaxation (expected count under the grid).

    Sums the last two dims, so a (B, H, W) stack yields per-sample values.
    """
    v = _grid_values(m)
    return v.sum(dim=(-2, -1))


def mask_smoothness(m: Union[Mask, MaskDistribution, torch.Tensor]) -> torch.Tensor:
    """Total squared difference between vertical and horizontal neighbor
    pairs; out-of-range neighbors are excluded. Zero for constant masks."""
    v = _grid_values(m)
    dz = v[..., 1:, :] - v[..., :-1, :]
    dt = v[..., :, 1:] - v[..., :, :-1]
    return (dz * dz).sum(dim=(-2, -1)) + (dt * dt).sum(dim=(-2, -1))
