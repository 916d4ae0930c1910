"""Deterministic pseudorandom plumbing shared by every stochastic stage."""

from __future__ import annotations

import hashlib

import torch

LOG_EPS = 1e-6


def make_rng(seed: int) -> torch.Generator:
    """A seeded generator; identical seed gives an identical sample stream."""
    g = torch.Generator()
    g.manual_seed(int(seed) & 0x7FFFFFFFFFFFFFFF)
    return g


def derive_seed(seed: int, tag: str) -> int:
    """Stable substream seed for (seed, tag), for per-stage noise streams."""
    h = hashlib.sha256(f"{seed}:{tag}".encode()).digest()
    return int.from_bytes(h[:8], "big") & 0x7FFFFFFFFFFFFFFF


def exponential_noise(
    shape, rng: torch.Generator | None = None, dtype=torch.float32
) -> torch.Tensor:
    """Unit-rate exponential draws, e = -log U."""
    out = torch.empty(shape, dtype=dtype)
    out.exponential_(1.0, generator=rng)
    return out


def gumbel_noise(
    shape, rng: torch.Generator | None = None, dtype=torch.float32
) -> torch.Tensor:
    """Standard Gumbel draws, g = -log(-log U)."""
    e = exponential_noise(shape, rng, dtype=dtype)
    return -torch.log(e.clamp_min(LOG_EPS))


def seed_everything(seed: int) -> None:
    """Seed torch's global generator (module init, dropout, etc.)."""
    torch.manual_seed(int(seed) & 0x7FFFFFFFFFFFFFFF)
