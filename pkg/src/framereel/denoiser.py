"""Toy frame-coupled noise predictor and the reverse-time video sampler.

The predictor is a two-block pre-norm transformer over latent tokens whose
self-attention is the cross-frame dispatch from `attention`. Its noise
estimate is the input latent plus the deviation of each token from the
content retrieved by that same attention over raw latent values, plus a
learned-free feature residual; removing that deviation step by step is what
pulls frames toward their shared reference under the cross-frame modes.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .attention import CrossFrameConfig, FrameQKV, cross_frame_attention
from .diffusion import (
    EMBED_DIM,
    NoiseSchedule,
    TextEmbedding,
    cfg_combine,
    ddim_step,
    embed_text,
)
from .director import FramePromptSet

NULL_PROMPT = "(null)"
TEXT_TOKENS = 4

# site -> attention output; pipeline substitutes a cache-aware callable
AttentionFn = Callable[[str, FrameQKV, CrossFrameConfig, "int | None"], np.ndarray]
# (timestep, t_prime, branch) -> AttentionFn for that denoiser call
AttentionFactory = Callable[[int, "int | None", str], AttentionFn]


def _default_attention(
    site: str, qkv: FrameQKV, config: CrossFrameConfig, t_prime: int | None
) -> np.ndarray:
    return cross_frame_attention(qkv, config, t_prime=t_prime)


def _layer_norm(x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps)


def _gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(np.sqrt(2.0 / np.pi) * (x + 0.044715 * x**3)))


def _softmax_rows(S: np.ndarray) -> np.ndarray:
    e = np.exp(S - S.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _timestep_features(t: int, dim: int) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    angles = t * freqs
    return np.concatenate([np.sin(angles), np.cos(angles)])


@dataclass
class BlockParams:
    Wq: np.ndarray
    Wk: np.ndarray
    Wv: np.ndarray
    Wo: np.ndarray
    Wq_text: np.ndarray
    Wk_text: np.ndarray
    Wv_text: np.ndarray
    Wo_text: np.ndarray
    W_ff1: np.ndarray
    b_ff1: np.ndarray
    W_ff2: np.ndarray
    b_ff2: np.ndarray


@dataclass
class DenoiserParams:
    """All weights, reproducible from the seed that generated them."""

    seed: int
    channels: int
    d_model: int
    embed_dim: int
    kappa: float
    W_in: np.ndarray
    b_in: np.ndarray
    W_time: np.ndarray
    W_out: np.ndarray
    b_out: np.ndarray
    blocks: tuple[BlockParams, ...]

    @classmethod
    def from_seed(
        cls,
        seed: int,
        channels: int = 4,
        d_model: int = 16,
        embed_dim: int = EMBED_DIM,
        num_blocks: int = 2,
        kappa: float = 0.5,
    ) -> "DenoiserParams":
        if channels < 1:
            raise ValueError(f"channels must be >= 1, got {channels}")
        if d_model < channels:
            raise ValueError(
                f"d_model ({d_model}) must be >= channels ({channels}) "
                "so latent values fit in the attention width"
            )
        if d_model % 2 != 0:
            raise ValueError(f"d_model must be even for timestep features, got {d_model}")
        if embed_dim % TEXT_TOKENS != 0:
            raise ValueError(
                f"embed_dim ({embed_dim}) must be divisible by {TEXT_TOKENS} text tokens"
            )
        if num_blocks < 1:
            raise ValueError(f"num_blocks must be >= 1, got {num_blocks}")
        if kappa < 0.0:
            raise ValueError(f"kappa must be >= 0, got {kappa}")
        rng = np.random.default_rng(seed)
        d = d_model
        sub = embed_dim // TEXT_TOKENS

        def w(rows: int, cols: int) -> np.ndarray:
            return rng.standard_normal((rows, cols)) / np.sqrt(rows)

        W_in = w(channels, d)
        b_in = np.zeros(d)
        W_time = w(d, d)
        W_out = w(d, channels)
        b_out = np.zeros(channels)
        blocks = tuple(
            BlockParams(
                Wq=w(d, d), Wk=w(d, d), Wv=w(d, d), Wo=w(d, d),
                Wq_text=w(d, d), Wk_text=w(sub, d), Wv_text=w(sub, d), Wo_text=w(d, d),
                W_ff1=w(d, 2 * d), b_ff1=np.zeros(2 * d),
                W_ff2=w(2 * d, d), b_ff2=np.zeros(d),
            )
            for _ in range(num_blocks)
        )
        return cls(
            seed=seed, channels=channels, d_model=d, embed_dim=embed_dim,
            kappa=kappa, W_in=W_in, b_in=b_in, W_time=W_time,
            W_out=W_out, b_out=b_out, blocks=blocks,
        )


def toy_denoiser(
    z_t: np.ndarray,
    t: int,
    embeddings: Sequence[TextEmbedding],
    params: DenoiserParams,
    attn_config: CrossFrameConfig,
    t_prime: int | None = None,
    attention: AttentionFn | None = None,
) -> np.ndarray:
    """Predict the noise in a stack of frame latents, shape-preserving.

    `attention` substitutes the raw cross-frame dispatch; the pipeline passes
    a cache-aware callable here so later sections can attend into frames
    generated earlier. Sites: "block<i>.self" for feature attention and
    "block0.latent" for the raw-latent retrieval behind the consensus term.
    """
    z_t = np.asarray(z_t, dtype=np.float64)
    if z_t.ndim != 4:
        raise ValueError(f"expected latents shaped (F, h, w, c), got ndim={z_t.ndim}")
    frames, height, width, channels = z_t.shape
    if channels != params.channels:
        raise ValueError(
            f"latent has {channels} channels but params expect {params.channels}"
        )
    if not np.all(np.isfinite(z_t)):
        raise ValueError("latents contain non-finite entries")
    if t < 0:
        raise ValueError(f"timestep must be >= 0, got {t}")
    if len(embeddings) != frames:
        raise ValueError(f"{len(embeddings)} embeddings for {frames} frames")
    for emb in embeddings:
        if emb.vector.shape[0] != params.embed_dim:
            raise ValueError(
                f"embedding dim {emb.vector.shape[0]} != params.embed_dim {params.embed_dim}"
            )
    if attention is None:
        attention = _default_attention

    n_tokens = height * width
    d = params.d_model
    z_tokens = z_t.reshape(frames, n_tokens, channels)
    x = _layer_norm(z_tokens @ params.W_in + params.b_in)
    x = x + _timestep_features(t, d) @ params.W_time
    text = np.stack([e.vector for e in embeddings]).reshape(frames, TEXT_TOKENS, -1)

    consensus = None
    for i, blk in enumerate(params.blocks):
        xn = _layer_norm(x)
        qkv = FrameQKV(Q=xn @ blk.Wq, K=xn @ blk.Wk, V=xn @ blk.Wv)
        x = x + attention(f"block{i}.self", qkv, attn_config, t_prime) @ blk.Wo
        if i == 0:
            # same queries/keys, but the values are the raw latents themselves
            # (zero-padded to width d); this is the content the head pulls toward
            padded = np.concatenate(
                [z_tokens, np.zeros((frames, n_tokens, d - channels))], axis=2
            )
            latent_qkv = FrameQKV(Q=qkv.Q, K=qkv.K, V=padded)
            consensus = attention("block0.latent", latent_qkv, attn_config, t_prime)
            consensus = consensus[..., :channels]
        xn = _layer_norm(x)
        q_text = xn @ blk.Wq_text
        k_text = text @ blk.Wk_text
        v_text = text @ blk.Wv_text
        logits = np.einsum("fnd,fmd->fnm", q_text, k_text) / np.sqrt(d)
        x = x + (_softmax_rows(logits) @ v_text) @ blk.Wo_text
        xn = _layer_norm(x)
        x = x + _gelu(xn @ blk.W_ff1 + blk.b_ff1) @ blk.W_ff2 + blk.b_ff2

    residual = _layer_norm(x) @ params.W_out + params.b_out
    deviation = z_tokens - consensus
    eps = z_tokens + params.kappa * deviation + residual
    return eps.reshape(frames, height, width, channels)


def motion_shift(latent: np.ndarray, frame_index: int, delta: tuple[int, int]) -> np.ndarray:
    """Translate one frame's latent by (k-1) * delta with edge replication.

    Frame indices are 1-based, so the first frame never moves. delta is
    (dx, dy) in latent pixels; positive dx moves content toward larger x.
    """
    latent = np.asarray(latent, dtype=np.float64)
    if latent.ndim != 3:
        raise ValueError(f"expected a single (h, w, c) latent, got ndim={latent.ndim}")
    if frame_index < 1:
        raise ValueError(f"frame_index is 1-based, got {frame_index}")
    dx, dy = delta
    if not (isinstance(dx, (int, np.integer)) and isinstance(dy, (int, np.integer))):
        raise ValueError(f"delta must be integer latent pixels, got {delta!r}")
    height, width = latent.shape[:2]
    shift_x = (frame_index - 1) * int(dx)
    shift_y = (frame_index - 1) * int(dy)
    if abs(shift_x) >= width or abs(shift_y) >= height:
        raise ValueError(
            f"shift ({shift_x}, {shift_y}) leaves no source content for a "
            f"{height}x{width} latent"
        )
    src_rows = np.clip(np.arange(height) - shift_y, 0, height - 1)
    src_cols = np.clip(np.arange(width) - shift_x, 0, width - 1)
    return latent[np.ix_(src_rows, src_cols)]


@dataclass
class LatentVideo:
    """A stack of per-frame latents at one point of the reverse process."""

    data: np.ndarray
    t: int

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 4:
            raise ValueError(f"expected (F, h, w, c) data, got ndim={self.data.ndim}")
        frames, height, width, channels = self.data.shape
        if frames < 1 or channels < 1:
            raise ValueError(f"degenerate shape {self.data.shape}")
        if height < 4 or width < 4:
            raise ValueError(f"latents must be at least 4x4, got {height}x{width}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("latents contain non-finite entries")
        if self.t < 0:
            raise ValueError(f"timestep must be >= 0, got {self.t}")

    @property
    def frame_count(self) -> int:
        return self.data.shape[0]


@dataclass
class SamplerConfig:
    """Reverse-process settings for one video."""

    attention: CrossFrameConfig
    steps: int = 100
    mapped_steps: int = 96
    guidance: float = 12.0
    seed: int = 0
    height: int = 16
    width: int = 16
    channels: int = 4
    motion: tuple[int, int] | None = None
    # batches that continue an earlier video start at frame offset+1
    frame_offset: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if not 0 <= self.mapped_steps <= self.steps:
            raise ValueError(
                f"mapped_steps must lie in [0, steps]; got {self.mapped_steps} "
                f"with steps={self.steps}"
            )
        if self.height < 4 or self.width < 4:
            raise ValueError(f"latents must be at least 4x4, got {self.height}x{self.width}")
        if self.channels < 1:
            raise ValueError(f"channels must be >= 1, got {self.channels}")
        if self.frame_offset < 0:
            raise ValueError(f"frame_offset must be >= 0, got {self.frame_offset}")


def initial_latents(config: SamplerConfig, frames: int) -> np.ndarray:
    """Seeded unit-Gaussian start, drawn frame-major so a shorter video shares
    its leading frames' noise with a longer one at the same seed."""
    rng = np.random.default_rng(config.seed)
    return rng.standard_normal((frames, config.height, config.width, config.channels))


def _shift_all(z: np.ndarray, delta: tuple[int, int], offset: int = 0) -> np.ndarray:
    return np.stack(
        [motion_shift(z[k - 1], k + offset, delta) for k in range(1, z.shape[0] + 1)]
    )


def denoise_video(
    prompts: FramePromptSet,
    schedule: NoiseSchedule,
    params: DenoiserParams,
    config: SamplerConfig,
    attention_factory: AttentionFactory | None = None,
    initial: np.ndarray | None = None,
) -> LatentVideo:
    """Run the full deterministic reverse process for one batch of frames.

    The first steps - mapped_steps iterations warm up with first-frame
    attention (and apply the motion shift once at the end of that phase);
    the remaining iterations use the configured mode with t_prime counting
    up from 0. Each step combines conditional and unconditional predictions
    with classifier-free guidance.
    """
    if schedule.T != config.steps:
        raise ValueError(
            f"schedule has T={schedule.T} but config.steps={config.steps}"
        )
    if params.channels != config.channels:
        raise ValueError(
            f"params predict {params.channels} channels, config wants {config.channels}"
        )
    frames = prompts.frame_count
    if initial is None:
        z = initial_latents(config, frames)
    else:
        z = np.asarray(initial, dtype=np.float64)
        if z.shape != (frames, config.height, config.width, config.channels):
            raise ValueError(
                f"initial latents shaped {z.shape}, expected "
                f"{(frames, config.height, config.width, config.channels)}"
            )
    cond = [embed_text(p, params.embed_dim) for p in prompts.prompts]
    uncond = [embed_text(NULL_PROMPT, params.embed_dim)] * frames

    warmup_steps = config.steps - config.mapped_steps
    warmup_cfg = CrossFrameConfig(mode="first_frame")
    if config.motion is not None and warmup_steps == 0:
        z = _shift_all(z, config.motion, config.frame_offset)
    for i, t in enumerate(range(config.steps, 0, -1)):
        if i < warmup_steps:
            cfg, t_prime = warmup_cfg, None
        else:
            cfg, t_prime = config.attention, i - warmup_steps
        if attention_factory is not None:
            attn_cond = attention_factory(t, t_prime, "cond")
            attn_uncond = attention_factory(t, t_prime, "uncond")
        else:
            attn_cond = attn_uncond = None
        eps_cond = toy_denoiser(z, t, cond, params, cfg, t_prime, attention=attn_cond)
        eps_uncond = toy_denoiser(z, t, uncond, params, cfg, t_prime, attention=attn_uncond)
        eps = cfg_combine(eps_uncond, eps_cond, config.guidance)
        z = ddim_step(z, eps, t, t - 1, schedule)
        if config.motion is not None and i == warmup_steps - 1:
            z = _shift_all(z, config.motion, config.frame_offset)
    return LatentVideo(data=z, t=0)
