"""End-to-end orchestration: prompts to latents to rendered image files.

Videos longer than one batch are generated in sections. The first section
fills an attention cache; every later section attends into those stored
keys/values, so all sections share one set of anchor frames and the video
stays coherent without ever holding more than a batch in flight.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict, replace
from pathlib import Path

import numpy as np
from PIL import Image

from .attention import (
    CrossFrameConfig,
    FrameQKV,
    MODES,
    confidence_mask,
    cross_frame_attention,
    dual_softmax,
    filtered_value_map,
    rotational_reference,
    scaled_attention,
    value_map,
)
from .denoiser import (
    DenoiserParams,
    LatentVideo,
    SamplerConfig,
    _default_attention,
    denoise_video,
    initial_latents,
)
from .diffusion import NoiseSchedule
from .director import ChatClient, DirectorConfig, FramePromptSet, MockChatClient, direct_frames

DEFAULT_FPS = 4
RENDER_SEED = 1853


@dataclass
class PipelineConfig:
    """Everything one generation run needs besides the prompts themselves."""

    frames: int
    mode: str = "rvm_dsf"
    steps: int = 100
    mapped_steps: int = 96
    guidance: float = 12.0
    rotation_period: int = 4
    mask_quantile: float = 0.4
    batch: int = 8
    seed: int = 0
    height: int = 16
    width: int = 16
    channels: int = 4
    motion: tuple[int, int] | None = None
    out_dir: str | None = None

    def __post_init__(self):
        if self.frames < 1:
            raise ValueError(f"frames must be >= 1, got {self.frames}")
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if not 0 <= self.mapped_steps <= self.steps:
            raise ValueError(
                f"mapped_steps must lie in [0, steps]; got {self.mapped_steps} "
                f"with steps={self.steps}"
            )
        if self.rotation_period < 1:
            raise ValueError(f"rotation_period must be >= 1, got {self.rotation_period}")
        if not 0.0 <= self.mask_quantile <= 1.0:
            raise ValueError(f"mask_quantile must be in [0, 1], got {self.mask_quantile}")
        if self.batch < 2:
            raise ValueError(f"batch must be >= 2, got {self.batch}")
        if self.height < 4 or self.width < 4:
            raise ValueError(f"latents must be at least 4x4, got {self.height}x{self.width}")
        if self.channels < 1:
            raise ValueError(f"channels must be >= 1, got {self.channels}")
        if self.motion is not None:
            motion = tuple(self.motion)
            if len(motion) != 2 or not all(isinstance(v, (int, np.integer)) for v in motion):
                raise ValueError(f"motion must be two integers (dx, dy), got {self.motion!r}")
            self.motion = (int(motion[0]), int(motion[1]))


class AttentionCache:
    """Write-once store of per-frame K/V, keyed by (layer id, timestep, frame).

    The layer id folds in the guidance branch, because activations past the
    first text cross-attention differ between the conditional and
    unconditional passes. Reads raise for frames never written: a lookup is
    only legal for frames an earlier section already generated.
    """

    def __init__(self):
        self._store: dict[tuple[str, int, int], tuple[np.ndarray, np.ndarray]] = {}
        self.writes = 0
        self.reads = 0

    def put(self, layer: str, t: int, frame: int, K: np.ndarray, V: np.ndarray) -> None:
        key = (layer, int(t), int(frame))
        if key in self._store:
            raise ValueError(f"attention cache key {key} written twice")
        self._store[key] = (
            np.array(K, dtype=np.float64, copy=True),
            np.array(V, dtype=np.float64, copy=True),
        )
        self.writes += 1

    def get(self, layer: str, t: int, frame: int) -> tuple[np.ndarray, np.ndarray]:
        key = (layer, int(t), int(frame))
        try:
            stored = self._store[key]
        except KeyError:
            raise KeyError(f"attention cache has no entry for {key}") from None
        self.reads += 1
        return stored

    def __contains__(self, key: tuple[str, int, int]) -> bool:
        return key in self._store

    def __len__(self) -> int:
        return len(self._store)

    @property
    def cached_frames(self) -> list[int]:
        return sorted({frame for (_, _, frame) in self._store})


def plan_sections(frames: int, batch: int) -> list[list[int]]:
    """Split 1..frames into generation sections.

    A video that fits in one batch is a single section. Otherwise the first
    section takes floor(batch/2) frames (they become the cached anchors) and
    each later section takes up to batch - floor(batch/2) new frames, so a
    section plus the anchors never exceeds one batch in flight.
    """
    if batch < 2:
        raise ValueError(f"batch must be >= 2, got {batch}")
    if frames < 1:
        raise ValueError(f"frames must be >= 1, got {frames}")
    if frames <= batch:
        return [list(range(1, frames + 1))]
    head = batch // 2
    sections = [list(range(1, head + 1))]
    step = batch - head
    start = head + 1
    while start <= frames:
        stop = min(start + step - 1, frames)
        sections.append(list(range(start, stop + 1)))
        start = stop + 1
    return sections


def _recording_factory(cache: AttentionCache, frame_ids: list[int]):
    """Attention passthrough that also stores every frame's K/V per site."""

    def factory(t, t_prime, branch):
        def hook(site, qkv, cfg, tp):
            for local, frame in enumerate(frame_ids):
                cache.put(f"{site}.{branch}", t, frame, qkv.K[local], qkv.V[local])
            return _default_attention(site, qkv, cfg, tp)

        return hook

    return factory


def _union_attention(site, qkv, cfg, t_prime, *, cache, branch, t, union, n_cached):
    """Cross-frame attention where references resolve over cached + live frames.

    `union` lists global frame ids in ascending order, cached ones first;
    `qkv` holds only the live frames, in union order. The rotation, the first
    frame, and the sparse-causal predecessors are all taken over union
    positions, reading stored K/V whenever the position is a cached frame.
    """
    if cfg.mode == "per_frame":
        return cross_frame_attention(qkv, cfg, t_prime=t_prime)
    n_live = qkv.num_frames

    def kv_at(pos):  # 0-based union position
        if pos < n_cached:
            return cache.get(f"{site}.{branch}", t, union[pos])
        local = pos - n_cached
        return qkv.K[local], qkv.V[local]

    out = []
    if cfg.mode == "first_frame":
        K_ref, V_ref = kv_at(0)
        for i in range(n_live):
            out.append(value_map(qkv.Q[i], K_ref, V_ref))
    elif cfg.mode == "sparse_causal":
        for i in range(n_live):
            pos = n_cached + i
            refs = [0] if pos <= 1 else [0, pos - 1]
            pairs = [kv_at(r) for r in refs]
            K_cat = np.concatenate([k for k, _ in pairs], axis=0)
            V_cat = np.concatenate([v for _, v in pairs], axis=0)
            out.append(scaled_attention(qkv.Q[i], K_cat, V_cat))
    else:
        ref_pos = rotational_reference(t_prime, cfg.m, len(union)) - 1
        K_ref, V_ref = kv_at(ref_pos)
        if cfg.mode == "rvm":
            for i in range(n_live):
                out.append(value_map(qkv.Q[i], K_ref, V_ref))
        else:  # rvm_dsf
            for i in range(n_live):
                C = dual_softmax(qkv.Q[i], K_ref, scale=cfg.scale_dual_softmax)
                mask = confidence_mask(C, cfg.q).mask
                out.append(
                    filtered_value_map(qkv.Q[i], qkv.K[i], qkv.V[i], K_ref, V_ref, mask)
                )
    return np.stack(out)


def _sectioned_factory(cache: AttentionCache, cached_ids: list[int], live_ids: list[int]):
    union = list(cached_ids) + list(live_ids)
    n_cached = len(cached_ids)

    def factory(t, t_prime, branch):
        def hook(site, qkv, cfg, tp):
            return _union_attention(
                site, qkv, cfg, tp,
                cache=cache, branch=branch, t=t, union=union, n_cached=n_cached,
            )

        return hook

    return factory


def _slice_prompts(prompt_set: FramePromptSet, frame_ids: list[int]) -> FramePromptSet:
    return FramePromptSet(
        prompts=[prompt_set.prompts[g - 1] for g in frame_ids],
        fps=prompt_set.fps,
        user_prompt=prompt_set.user_prompt,
    )


@dataclass
class GenerationResult:
    """Rendered frames plus everything needed to inspect or re-run the video."""

    frames: list[np.ndarray]
    latents: LatentVideo
    prompt_set: FramePromptSet
    sections: list[list[int]]
    cache: AttentionCache | None = field(default=None, repr=False)


def generate_video(
    source: FramePromptSet | str,
    config: PipelineConfig,
    client: ChatClient | None = None,
    director: DirectorConfig | None = None,
) -> GenerationResult:
    """Produce a full video from a prompt set, or from one abstract prompt.

    A plain string is first expanded into per-frame prompts through the chat
    client (the offline mock when none is given). Sections are generated in
    order; the first one writes the attention cache and is bit-identical to
    a standalone run of just those frames.
    """
    if isinstance(source, FramePromptSet):
        prompt_set = source
    elif isinstance(source, str):
        dir_config = director or DirectorConfig(frames=config.frames, fps=DEFAULT_FPS)
        if dir_config.frames != config.frames:
            raise ValueError(
                f"director wants {dir_config.frames} frames but config.frames={config.frames}"
            )
        prompt_set = direct_frames(source, dir_config, client or MockChatClient())
    else:
        raise TypeError(f"source must be a FramePromptSet or str, got {type(source)!r}")
    if prompt_set.frame_count != config.frames:
        raise ValueError(
            f"prompt set has {prompt_set.frame_count} prompts but config.frames="
            f"{config.frames}"
        )

    schedule = NoiseSchedule.linear(config.steps)
    params = DenoiserParams.from_seed(config.seed, channels=config.channels)
    sampler = SamplerConfig(
        attention=CrossFrameConfig(
            mode=config.mode, m=config.rotation_period, q=config.mask_quantile
        ),
        steps=config.steps,
        mapped_steps=config.mapped_steps,
        guidance=config.guidance,
        seed=config.seed,
        height=config.height,
        width=config.width,
        channels=config.channels,
        motion=config.motion,
    )
    sections = plan_sections(config.frames, config.batch)
    init = initial_latents(sampler, config.frames)

    if len(sections) == 1:
        video = denoise_video(prompt_set, schedule, params, sampler, initial=init)
        cache = None
    else:
        cache = AttentionCache()
        data = np.empty_like(init)
        anchors = sections[0]
        first = denoise_video(
            _slice_prompts(prompt_set, anchors),
            schedule,
            params,
            sampler,
            attention_factory=_recording_factory(cache, anchors),
            initial=init[: len(anchors)],
        )
        data[: len(anchors)] = first.data
        for section in sections[1:]:
            lo, hi = section[0] - 1, section[-1]
            part = denoise_video(
                _slice_prompts(prompt_set, section),
                schedule,
                params,
                replace(sampler, frame_offset=lo),
                attention_factory=_sectioned_factory(cache, anchors, section),
                initial=init[lo:hi],
            )
            data[lo:hi] = part.data
        video = LatentVideo(data=data, t=0)

    return GenerationResult(
        frames=render_video(video.data),
        latents=video,
        prompt_set=prompt_set,
        sections=sections,
        cache=cache,
    )


def _render_projection(channels: int) -> np.ndarray:
    rng = np.random.default_rng(RENDER_SEED)
    return rng.standard_normal((channels, 3)) / np.sqrt(channels)


def _check_latents(data: np.ndarray) -> np.ndarray:
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 4:
        raise ValueError(f"expected (F, h, w, c) latents, got ndim={data.ndim}")
    if data.shape[3] < 1:
        raise ValueError(f"need at least one channel, got shape {data.shape}")
    if not np.all(np.isfinite(data)):
        raise ValueError("latents contain non-finite entries")
    return data


def _is_flat(projected: np.ndarray) -> bool:
    """True when no color channel varies across frames or pixels."""
    spread = (projected.max(axis=(0, 1, 2)) - projected.min(axis=(0, 1, 2))).max()
    # relative threshold keeps the degenerate test scale invariant
    return spread <= 1e-12 * np.abs(projected).max(initial=0.0)


def _to_pixels(projected: np.ndarray, lo: float, hi: float) -> np.ndarray:
    unit = (projected - lo) / (hi - lo)
    return np.rint(unit * 255.0).astype(np.uint8)


def render_frame(
    z0: np.ndarray, bounds: tuple[float, float] | None = None
) -> np.ndarray:
    """Map one (h, w, c) latent to an 8-bit RGB image.

    Channels go through a fixed seeded linear projection to three color
    planes, then an affine map of [lo, hi] onto [0, 255]. Without explicit
    bounds the frame normalizes against its own range; a constant frame
    renders as uniform mid-gray.
    """
    z0 = np.asarray(z0, dtype=np.float64)
    if z0.ndim != 3:
        raise ValueError(f"expected one (h, w, c) latent, got ndim={z0.ndim}")
    data = _check_latents(z0[None])
    projected = data @ _render_projection(data.shape[3])
    if bounds is None:
        if _is_flat(projected):
            return np.full(projected.shape[1:], 128, dtype=np.uint8)
        lo, hi = float(projected.min()), float(projected.max())
    else:
        lo, hi = float(bounds[0]), float(bounds[1])
        if not hi > lo:
            raise ValueError(f"bounds must satisfy hi > lo, got {bounds!r}")
    return _to_pixels(projected, lo, hi)[0]


def render_video(latents: np.ndarray | LatentVideo) -> list[np.ndarray]:
    """Render every frame with one shared normalization range for the video."""
    data = latents.data if isinstance(latents, LatentVideo) else latents
    data = _check_latents(data)
    projected = data @ _render_projection(data.shape[3])
    if _is_flat(projected):
        pixels = np.full(projected.shape, 128, dtype=np.uint8)
    else:
        pixels = _to_pixels(projected, float(projected.min()), float(projected.max()))
    return [pixels[i].copy() for i in range(pixels.shape[0])]


@dataclass
class OutputPaths:
    frames: list[Path]
    gif: Path
    manifest: Path


def write_outputs(
    frames: list[np.ndarray],
    directory: str | Path,
    prompt_set: FramePromptSet,
    config: PipelineConfig,
) -> OutputPaths:
    """Write numbered PNGs, an animated GIF, and a run manifest.

    The GIF plays at the prompt set's fps: its per-frame delay is
    round(100 / fps) centiseconds. The manifest records the full config,
    the prompts, and the seed, so a run can be reproduced from it alone.
    """
    if not frames:
        raise ValueError("no frames to write")
    arrays = [np.asarray(f) for f in frames]
    shapes = {a.shape for a in arrays}
    if len(shapes) != 1:
        raise ValueError(f"frames disagree on shape: {sorted(shapes)}")
    shape = shapes.pop()
    if len(shape) != 3 or shape[2] != 3:
        raise ValueError(f"frames must be (h, w, 3) RGB arrays, got {shape}")
    if prompt_set.frame_count != len(arrays):
        raise ValueError(
            f"{len(arrays)} frames but prompt set describes {prompt_set.frame_count}"
        )

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    images = [Image.fromarray(a.astype(np.uint8), "RGB") for a in arrays]
    paths = []
    for index, image in enumerate(images, 1):
        path = directory / f"frame_{index:04d}.png"
        image.save(path)
        paths.append(path)

    gif_path = directory / "video.gif"
    delay_cs = round(100 / prompt_set.fps)
    images[0].save(
        gif_path,
        save_all=True,
        append_images=images[1:],
        duration=delay_cs * 10,
        loop=0,
    )

    manifest = {
        "config": asdict(config),
        "user_prompt": prompt_set.user_prompt,
        "fps": prompt_set.fps,
        "prompts": list(prompt_set.prompts),
        "seed": config.seed,
        "frames": [p.name for p in paths],
        "gif": gif_path.name,
    }
    manifest_path = directory / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return OutputPaths(frames=paths, gif=gif_path, manifest=manifest_path)
