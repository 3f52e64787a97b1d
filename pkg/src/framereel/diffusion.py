"""Miniature latent-diffusion building blocks.

Forward process, deterministic reverse step, classifier-free guidance, and a
hash-based text embedding that stands in for a learned encoder. Everything is
a pure function so sampling stays bit-reproducible.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass

import numpy as np

EMBED_DIM = 32

# amplitude of the position-dependent sinusoid mixed into text embeddings
_POSITION_GAIN = 0.35


@dataclass
class NoiseSchedule:
    """Per-step noise levels beta_t and their cumulative products alpha_bar_t."""

    betas: np.ndarray
    alpha_bars: np.ndarray
    T: int

    def __post_init__(self):
        self.betas = np.asarray(self.betas, dtype=np.float64)
        self.alpha_bars = np.asarray(self.alpha_bars, dtype=np.float64)
        if self.T < 1 or self.betas.shape != (self.T,) or self.alpha_bars.shape != (self.T,):
            raise ValueError(f"inconsistent schedule length: T={self.T}")
        if np.any(self.betas <= 0) or np.any(self.betas >= 1):
            raise ValueError("every beta_t must lie strictly in (0, 1)")
        expect = np.cumprod(1.0 - self.betas)
        if not np.allclose(self.alpha_bars, expect, rtol=1e-9):
            raise ValueError("alpha_bars do not match cumprod(1 - betas)")
        if np.any(np.diff(self.alpha_bars) >= 0):
            raise ValueError("alpha_bars must be strictly decreasing")

    @classmethod
    def linear(cls, T: int) -> "NoiseSchedule":
        """Linear betas from 1e-4*(1000/T) to 0.02*(1000/T), rescaled for short T."""
        if T < 1:
            raise ValueError(f"T must be >= 1, got {T}")
        scale = 1000.0 / T
        betas = np.linspace(1e-4 * scale, 0.02 * scale, T)
        return cls(betas=betas, alpha_bars=np.cumprod(1.0 - betas), T=T)

    def alpha_bar(self, t: int) -> float:
        """alpha_bar at step t, with alpha_bar(0) defined as 1."""
        if not 0 <= t <= self.T:
            raise ValueError(f"t must be in [0, {self.T}], got {t}")
        return 1.0 if t == 0 else float(self.alpha_bars[t - 1])


@dataclass
class TextEmbedding:
    """Unit-norm conditioning vector for one prompt."""

    vector: np.ndarray

    def __post_init__(self):
        self.vector = np.asarray(self.vector, dtype=np.float64)
        if self.vector.ndim != 1:
            raise ValueError("embedding vector must be 1-D")
        norm = float(np.linalg.norm(self.vector))
        if abs(norm - 1.0) > 1e-6:
            raise ValueError(f"embedding must be unit-norm, got |v| = {norm}")


def forward_noise_step(z_prev: np.ndarray, beta_t: float, eps: np.ndarray) -> np.ndarray:
    """One Markov noising step: sqrt(1-beta_t) z_prev + sqrt(beta_t) eps."""
    if not 0.0 < beta_t < 1.0:
        raise ValueError(f"beta_t must lie strictly in (0, 1), got {beta_t}")
    z_prev = np.asarray(z_prev, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if z_prev.shape != eps.shape:
        raise ValueError(f"shape mismatch: {z_prev.shape} vs {eps.shape}")
    return math.sqrt(1.0 - beta_t) * z_prev + math.sqrt(beta_t) * eps


def forward_marginal(z0: np.ndarray, alpha_bar_t: float, eps: np.ndarray) -> np.ndarray:
    """Closed-form jump to step t: sqrt(a) z0 + sqrt(1-a) eps with a = alpha_bar_t."""
    if not 0.0 < alpha_bar_t <= 1.0:
        raise ValueError(f"alpha_bar_t must lie in (0, 1], got {alpha_bar_t}")
    z0 = np.asarray(z0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if z0.shape != eps.shape:
        raise ValueError(f"shape mismatch: {z0.shape} vs {eps.shape}")
    return math.sqrt(alpha_bar_t) * z0 + math.sqrt(1.0 - alpha_bar_t) * eps


def cfg_combine(eps_uncond: np.ndarray, eps_cond: np.ndarray, s: float) -> np.ndarray:
    """Classifier-free guidance: uncond + s * (cond - uncond)."""
    eps_uncond = np.asarray(eps_uncond, dtype=np.float64)
    eps_cond = np.asarray(eps_cond, dtype=np.float64)
    if eps_uncond.shape != eps_cond.shape:
        raise ValueError(f"shape mismatch: {eps_uncond.shape} vs {eps_cond.shape}")
    return eps_uncond + s * (eps_cond - eps_uncond)


def ddim_step(
    z_t: np.ndarray, eps_hat: np.ndarray, t: int, t_prev: int, schedule: NoiseSchedule
) -> np.ndarray:
    """Deterministic reverse update from step t to t_prev.

    Predicts z0 from the noise estimate, then re-noises it to the target
    level: sqrt(a_prev) z0_pred + sqrt(1 - a_prev) eps_hat.
    """
    if not (schedule.T >= t > t_prev >= 0):
        raise ValueError(f"need T >= t > t_prev >= 0, got t={t}, t_prev={t_prev}")
    z_t = np.asarray(z_t, dtype=np.float64)
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    if z_t.shape != eps_hat.shape:
        raise ValueError(f"shape mismatch: {z_t.shape} vs {eps_hat.shape}")
    a_t = schedule.alpha_bar(t)
    a_prev = schedule.alpha_bar(t_prev)
    z0_pred = (z_t - math.sqrt(1.0 - a_t) * eps_hat) / math.sqrt(a_t)
    return math.sqrt(a_prev) * z0_pred + math.sqrt(1.0 - a_prev) * eps_hat


def embed_text(prompt: str, dim: int = EMBED_DIM) -> TextEmbedding:
    """Deterministic hashed bag-of-tokens embedding with positional mixing.

    Each whitespace token lands in a crc32 bucket; a position- and
    bucket-dependent sinusoid breaks permutation invariance. The result is
    L2-normalized, so identical prompts embed bit-identically.
    """
    tokens = prompt.split()
    if not tokens:
        raise ValueError("prompt must contain at least one token")
    if dim < 1:
        raise ValueError(f"embedding dim must be >= 1, got {dim}")
    vec = np.zeros(dim, dtype=np.float64)
    idx = np.arange(dim, dtype=np.float64)
    for pos, tok in enumerate(tokens):
        bucket = zlib.crc32(tok.encode("utf-8")) % dim
        vec[bucket] += 1.0
        vec += _POSITION_GAIN * np.sin(2.0 * np.pi * (pos + 1) * (idx + 1.0) / dim + bucket)
    norm = float(np.linalg.norm(vec))
    if norm < 1e-12:  # sinusoids cancelling the bag exactly is pathological
        vec[0] = 1.0
        norm = 1.0
    return TextEmbedding(vector=vec / norm)
