"""Tests for section planning, the attention cache, generation, and rendering."""

import json

import numpy as np
import pytest
from PIL import Image

from framereel.attention import CrossFrameConfig, FrameQKV, MODES, cross_frame_attention
from framereel.denoiser import (
    DenoiserParams,
    SamplerConfig,
    denoise_video,
    initial_latents,
)
from framereel.diffusion import NoiseSchedule
from framereel.director import DirectorConfig, FramePromptSet, MockChatClient
from framereel.pipeline import (
    AttentionCache,
    GenerationResult,
    PipelineConfig,
    RENDER_SEED,
    _union_attention,
    generate_video,
    plan_sections,
    render_frame,
    render_video,
    write_outputs,
)


class TestPlanSections:
    def test_fits_one_batch(self):
        assert plan_sections(8, 8) == [[1, 2, 3, 4, 5, 6, 7, 8]]

    def test_single_frame(self):
        assert plan_sections(1, 8) == [[1]]

    def test_half_batch_then_fill(self):
        assert plan_sections(12, 8) == [[1, 2, 3, 4], [5, 6, 7, 8], [9, 10, 11, 12]]

    def test_ragged_tail(self):
        assert plan_sections(9, 8) == [[1, 2, 3, 4], [5, 6, 7, 8], [9]]

    def test_small_batch(self):
        assert plan_sections(7, 4) == [[1, 2], [3, 4], [5, 6], [7]]

    @pytest.mark.parametrize("frames", [1, 2, 5, 8, 9, 16, 23])
    @pytest.mark.parametrize("batch", [2, 3, 8])
    def test_partitions_exactly(self, frames, batch):
        sections = plan_sections(frames, batch)
        flat = [g for sec in sections for g in sec]
        assert flat == list(range(1, frames + 1))
        if frames > batch:
            head = batch // 2
            assert len(sections[0]) == head
            assert all(len(sec) <= batch - head for sec in sections[1:])

    def test_rejects_small_batch(self):
        with pytest.raises(ValueError):
            plan_sections(8, 1)

    def test_rejects_zero_frames(self):
        with pytest.raises(ValueError):
            plan_sections(0, 8)


class TestAttentionCache:
    def test_round_trip(self):
        cache = AttentionCache()
        K = np.arange(6.0).reshape(3, 2)
        V = np.ones((3, 2))
        cache.put("block0.self.cond", 10, 1, K, V)
        got_K, got_V = cache.get("block0.self.cond", 10, 1)
        assert np.array_equal(got_K, K)
        assert np.array_equal(got_V, V)

    def test_stores_copies(self):
        cache = AttentionCache()
        K = np.zeros((2, 2))
        cache.put("s", 1, 1, K, K)
        K[0, 0] = 99.0
        stored_K, _ = cache.get("s", 1, 1)
        assert stored_K[0, 0] == 0.0

    def test_write_once(self):
        cache = AttentionCache()
        arr = np.zeros((2, 2))
        cache.put("s", 1, 1, arr, arr)
        with pytest.raises(ValueError, match="written twice"):
            cache.put("s", 1, 1, arr, arr)

    def test_missing_key_raises(self):
        with pytest.raises(KeyError):
            AttentionCache().get("s", 1, 3)

    def test_counters_and_listing(self):
        cache = AttentionCache()
        arr = np.zeros((2, 2))
        cache.put("s", 1, 2, arr, arr)
        cache.put("s", 1, 5, arr, arr)
        cache.get("s", 1, 5)
        assert cache.writes == 2
        assert cache.reads == 1
        assert len(cache) == 2
        assert cache.cached_frames == [2, 5]


class TestPipelineConfig:
    def test_defaults(self):
        config = PipelineConfig(frames=8)
        assert config.steps == 100
        assert config.mapped_steps == 96
        assert config.guidance == 12.0
        assert config.rotation_period == 4
        assert config.mask_quantile == 0.4
        assert config.batch == 8
        assert config.mode == "rvm_dsf"

    def test_motion_normalized_to_tuple(self):
        config = PipelineConfig(frames=4, motion=[1, -1])
        assert config.motion == (1, -1)

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"frames": 0},
            {"frames": 4, "mode": "dense"},
            {"frames": 4, "steps": 0},
            {"frames": 4, "mapped_steps": 101},
            {"frames": 4, "rotation_period": 0},
            {"frames": 4, "mask_quantile": 1.5},
            {"frames": 4, "batch": 1},
            {"frames": 4, "height": 2},
            {"frames": 4, "channels": 0},
            {"frames": 4, "motion": (0.5, 1)},
            {"frames": 4, "motion": (1, 2, 3)},
        ],
    )
    def test_rejects_invalid(self, kwargs):
        with pytest.raises(ValueError):
            PipelineConfig(**kwargs)


class TestUnionAttention:
    """With nothing cached the union dispatch must equal the batch dispatch."""

    @pytest.mark.parametrize("mode", MODES)
    def test_matches_batch_dispatch_when_uncached(self, mode):
        rng = np.random.default_rng(11)
        qkv = FrameQKV(*rng.standard_normal((3, 5, 7, 4)))
        config = CrossFrameConfig(mode=mode, m=2, q=0.4)
        for t_prime in (0, 3, 9):
            expected = cross_frame_attention(qkv, config, t_prime=t_prime)
            got = _union_attention(
                "block0.self", qkv, config, t_prime,
                cache=AttentionCache(), branch="cond", t=50,
                union=[1, 2, 3, 4, 5], n_cached=0,
            )
            assert np.allclose(got, expected, atol=1e-12)

    def test_reads_cached_reference(self):
        rng = np.random.default_rng(12)
        cache = AttentionCache()
        K1, V1 = rng.standard_normal((2, 6, 4))
        cache.put("block0.self.cond", 30, 1, K1, V1)
        qkv = FrameQKV(*rng.standard_normal((3, 2, 6, 4)))
        config = CrossFrameConfig(mode="first_frame")
        got = _union_attention(
            "block0.self", qkv, config, None,
            cache=cache, branch="cond", t=30, union=[1, 4, 5], n_cached=1,
        )
        from framereel.attention import value_map

        for i in range(2):
            assert np.allclose(got[i], value_map(qkv.Q[i], K1, V1), atol=1e-12)
        assert cache.reads >= 1


def make_prompts(frames, fps=2):
    return FramePromptSet(
        prompts=[f"scene beat {k}" for k in range(1, frames + 1)],
        fps=fps,
        user_prompt="a short scene",
    )


def make_config(frames, **kwargs):
    kwargs.setdefault("steps", 30)
    kwargs.setdefault("mapped_steps", 26)
    kwargs.setdefault("height", 8)
    kwargs.setdefault("width", 8)
    kwargs.setdefault("seed", 3)
    return PipelineConfig(frames=frames, **kwargs)


class TestGenerateVideo:
    def test_single_section_matches_direct_sampler_call(self):
        config = make_config(4, batch=8, mode="rvm")
        prompts = make_prompts(4)
        result = generate_video(prompts, config)
        assert result.sections == [[1, 2, 3, 4]]
        assert result.cache is None

        sampler = SamplerConfig(
            attention=CrossFrameConfig(mode="rvm", m=4, q=0.4),
            steps=30, mapped_steps=26, guidance=12.0, seed=3,
            height=8, width=8, channels=4,
        )
        schedule = NoiseSchedule.linear(30)
        params = DenoiserParams.from_seed(3, channels=4)
        direct = denoise_video(prompts, schedule, params, sampler)
        assert result.latents.data.tobytes() == direct.data.tobytes()

    def test_deterministic_across_runs(self):
        config = make_config(6, batch=4)
        first = generate_video(make_prompts(6), config)
        second = generate_video(make_prompts(6), config)
        assert first.latents.data.tobytes() == second.latents.data.tobytes()
        for a, b in zip(first.frames, second.frames):
            assert np.array_equal(a, b)

    def test_first_frame_mode_sections_match_full_batch(self):
        # in first-frame mode every frame depends only on frame 1 and itself,
        # so the cached-section path must reproduce the one-batch run exactly
        sectioned = generate_video(
            make_prompts(6), make_config(6, batch=4, mode="first_frame")
        )
        full = generate_video(
            make_prompts(6), make_config(6, batch=8, mode="first_frame")
        )
        assert sectioned.sections == [[1, 2], [3, 4], [5, 6]]
        assert full.sections == [[1, 2, 3, 4, 5, 6]]
        assert sectioned.latents.data.tobytes() == full.latents.data.tobytes()

    def test_sectioned_motion_uses_global_frame_index(self):
        sectioned = generate_video(
            make_prompts(6),
            make_config(6, batch=4, mode="first_frame", motion=(1, 0)),
        )
        full = generate_video(
            make_prompts(6),
            make_config(6, batch=8, mode="first_frame", motion=(1, 0)),
        )
        assert sectioned.latents.data.tobytes() == full.latents.data.tobytes()

    def test_anchor_frames_unchanged_by_later_sections(self):
        long_run = generate_video(make_prompts(6), make_config(6, batch=4))
        anchor_prompts = FramePromptSet(
            prompts=make_prompts(6).prompts[:2], fps=2, user_prompt="a short scene"
        )
        short_run = generate_video(anchor_prompts, make_config(2, batch=4))
        assert long_run.sections[0] == [1, 2]
        assert (
            long_run.latents.data[:2].tobytes() == short_run.latents.data.tobytes()
        )

    def test_cache_population_and_use(self):
        config = make_config(6, batch=4)
        result = generate_video(make_prompts(6), config)
        cache = result.cache
        assert cache is not None
        # 3 hook sites x 2 guidance branches x steps x 2 anchor frames
        assert cache.writes == 3 * 2 * config.steps * 2
        assert len(cache) == cache.writes
        assert cache.reads > 0
        assert cache.cached_frames == [1, 2]

    @pytest.mark.parametrize("mode", MODES)
    def test_every_mode_runs_sectioned(self, mode):
        config = make_config(5, batch=4, steps=25, mapped_steps=22, mode=mode)
        result = generate_video(make_prompts(5), config)
        assert result.sections == [[1, 2], [3, 4], [5]]
        assert len(result.frames) == 5
        for frame in result.frames:
            assert frame.shape == (8, 8, 3)
            assert frame.dtype == np.uint8

    def test_string_source_runs_director(self):
        config = make_config(4)
        result = generate_video(
            "a tide pool at dusk",
            config,
            client=MockChatClient(),
            director=DirectorConfig(frames=4, fps=2),
        )
        assert result.prompt_set.frame_count == 4
        assert result.prompt_set.user_prompt == "a tide pool at dusk"
        assert all("tide pool" in p for p in result.prompt_set.prompts)

    def test_string_source_defaults_to_mock(self):
        result = generate_video("a lighthouse", make_config(3))
        assert result.prompt_set.frame_count == 3

    def test_director_frame_mismatch_rejected(self):
        with pytest.raises(ValueError, match="frames"):
            generate_video(
                "a lighthouse", make_config(4), director=DirectorConfig(frames=3, fps=2)
            )

    def test_prompt_count_mismatch_rejected(self):
        with pytest.raises(ValueError, match="prompts"):
            generate_video(make_prompts(3), make_config(4))

    def test_bad_source_type_rejected(self):
        with pytest.raises(TypeError):
            generate_video(123, make_config(4))


class TestRenderFrame:
    def test_constant_latent_renders_mid_gray(self):
        for value in (0.0, 5.0, -2.5):
            frame = render_frame(np.full((4, 4, 2), value))
            assert frame.shape == (4, 4, 3)
            assert np.all(frame == 128)

    def test_hand_computed_projection(self):
        z = np.array([[[0.0], [1.0]], [[2.0], [3.0]]])
        rng = np.random.default_rng(RENDER_SEED)
        W = rng.standard_normal((1, 3))
        expected = np.empty((2, 2, 3))
        for i in range(2):
            for j in range(2):
                for k in range(3):
                    expected[i, j, k] = z[i, j, 0] * W[0, k]
        lo, hi = expected.min(), expected.max()
        pixels = np.rint((expected - lo) / (hi - lo) * 255.0).astype(np.uint8)
        assert np.array_equal(render_frame(z), pixels)

    def test_explicit_bounds_match_video_rendering(self):
        rng = np.random.default_rng(4)
        data = rng.standard_normal((3, 4, 4, 2))
        video_frames = render_video(data)
        projected = data @ (
            np.random.default_rng(RENDER_SEED).standard_normal((2, 3)) / np.sqrt(2)
        )
        bounds = (float(projected.min()), float(projected.max()))
        for i in range(3):
            assert np.array_equal(render_frame(data[i], bounds=bounds), video_frames[i])

    def test_rejects_bad_bounds(self):
        with pytest.raises(ValueError):
            render_frame(np.zeros((4, 4, 1)), bounds=(1.0, 1.0))

    def test_rejects_wrong_rank(self):
        with pytest.raises(ValueError):
            render_frame(np.zeros((4, 4)))

    def test_rejects_non_finite(self):
        z = np.zeros((4, 4, 1))
        z[0, 0, 0] = np.nan
        with pytest.raises(ValueError):
            render_frame(z)


class TestRenderVideo:
    def test_shared_normalization_across_frames(self):
        base = np.ones((4, 4, 1))
        base[:2] = -1.0
        data = np.stack([base, 2.0 * base])
        frames = render_video(data)
        assert 0 not in frames[0] and 255 not in frames[0]
        assert 0 in frames[1] and 255 in frames[1]

    def test_scaling_whole_video_changes_nothing(self):
        rng = np.random.default_rng(9)
        data = rng.standard_normal((4, 5, 5, 3))
        for a, b in zip(render_video(data), render_video(2.0 * data)):
            assert np.array_equal(a, b)

    def test_constant_video_mid_gray(self):
        frames = render_video(np.full((3, 4, 4, 2), 7.0))
        assert all(np.all(f == 128) for f in frames)

    def test_rejects_wrong_rank(self):
        with pytest.raises(ValueError):
            render_video(np.zeros((4, 4, 1)))


class TestWriteOutputs:
    def make_frames(self, count=3):
        rng = np.random.default_rng(21)
        return [
            rng.integers(0, 256, size=(6, 5, 3)).astype(np.uint8) for _ in range(count)
        ]

    def test_writes_pngs_gif_and_manifest(self, tmp_path):
        frames = self.make_frames(3)
        prompts = make_prompts(3, fps=4)
        config = make_config(3)
        out = write_outputs(frames, tmp_path / "run", prompts, config)
        assert [p.name for p in out.frames] == [
            "frame_0001.png", "frame_0002.png", "frame_0003.png"
        ]
        assert out.gif.exists()
        assert out.manifest.exists()

    def test_png_round_trip(self, tmp_path):
        frames = self.make_frames(2)
        out = write_outputs(frames, tmp_path, make_prompts(2), make_config(2))
        for path, frame in zip(out.frames, frames):
            decoded = np.asarray(Image.open(path).convert("RGB"))
            assert np.array_equal(decoded, frame)

    def test_gif_delay_matches_fps(self, tmp_path):
        out = write_outputs(
            self.make_frames(3), tmp_path, make_prompts(3, fps=4), make_config(3)
        )
        with Image.open(out.gif) as gif:
            assert gif.info["duration"] == round(100 / 4) * 10

    def test_manifest_contents(self, tmp_path):
        prompts = make_prompts(3, fps=2)
        config = make_config(3, seed=17)
        out = write_outputs(self.make_frames(3), tmp_path, prompts, config)
        manifest = json.loads(out.manifest.read_text())
        assert manifest["seed"] == 17
        assert manifest["fps"] == 2
        assert manifest["prompts"] == prompts.prompts
        assert manifest["config"]["frames"] == 3
        assert manifest["frames"] == ["frame_0001.png", "frame_0002.png", "frame_0003.png"]

    def test_single_frame_video(self, tmp_path):
        out = write_outputs(
            self.make_frames(1), tmp_path, make_prompts(1), make_config(1)
        )
        assert len(out.frames) == 1
        assert out.gif.exists()

    def test_rejects_empty(self, tmp_path):
        with pytest.raises(ValueError):
            write_outputs([], tmp_path, make_prompts(1), make_config(1))

    def test_rejects_mixed_shapes(self, tmp_path):
        frames = [np.zeros((4, 4, 3), np.uint8), np.zeros((5, 4, 3), np.uint8)]
        with pytest.raises(ValueError):
            write_outputs(frames, tmp_path, make_prompts(2), make_config(2))

    def test_rejects_count_mismatch(self, tmp_path):
        with pytest.raises(ValueError):
            write_outputs(self.make_frames(2), tmp_path, make_prompts(3), make_config(3))

    def test_unwritable_target(self, tmp_path):
        blocker = tmp_path / "occupied"
        blocker.write_text("a file, not a directory")
        with pytest.raises(OSError):
            write_outputs(
                self.make_frames(1), blocker, make_prompts(1), make_config(1)
            )
