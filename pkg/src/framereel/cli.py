"""Command-line front end: directing, generation, lifting, and scoring.

Settings resolve in three layers: built-in defaults, then a JSON config
file (--config), then explicit flags. Exit codes are 0 success, 1 usage,
2 runtime failure, 3 network failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from .attention import MODES
from .director import (
    ChatClientError,
    DirectorConfig,
    DirectorError,
    FramePromptSet,
    HttpChatClient,
    MockChatClient,
    direct_frames,
    lift_fps,
)
from .metrics import (
    AVG_DIST_LABEL,
    AVG_LABEL,
    SimilarityTable,
    csv_text,
    frame_score,
    read_csv,
    write_csv,
    write_summary,
)
from .pipeline import PipelineConfig, generate_video, write_outputs

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2
EXIT_NETWORK = 3

PIPELINE_KEYS = (
    "frames", "mode", "steps", "mapped_steps", "guidance", "rotation_period",
    "mask_quantile", "batch", "seed", "height", "width", "channels", "motion",
    "out_dir",
)
DIRECTOR_KEYS = ("frames", "fps", "endpoint", "model", "timeout", "max_retries")

_DIRECTOR_DEFAULTS = {
    f.name: f.default for f in dataclasses.fields(DirectorConfig)
    if f.default is not dataclasses.MISSING
}

CONFIG_DEFAULTS = {
    "frames": 8,
    "fps": 4,
    "mode": "rvm_dsf",
    "steps": 100,
    "mapped_steps": 96,
    "guidance": 12.0,
    "rotation_period": 4,
    "mask_quantile": 0.4,
    "batch": 8,
    "seed": 0,
    "height": 16,
    "width": 16,
    "channels": 4,
    "motion": None,
    "out_dir": "out",
    "endpoint": _DIRECTOR_DEFAULTS["endpoint"],
    "model": _DIRECTOR_DEFAULTS["model"],
    "timeout": _DIRECTOR_DEFAULTS["timeout"],
    "max_retries": _DIRECTOR_DEFAULTS["max_retries"],
}


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # exit 1 for usage problems, not argparse's 2
        raise _UsageError(message)


def _parse_motion(text: str) -> tuple[int, int]:
    parts = text.split(",")
    if len(parts) != 2:
        raise argparse.ArgumentTypeError(f"motion must look like 'dx,dy', got {text!r}")
    try:
        return (int(parts[0]), int(parts[1]))
    except ValueError:
        raise argparse.ArgumentTypeError(f"motion components must be integers: {text!r}")


def _load_config_file(path: str) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as err:
        raise _UsageError(f"cannot read config file {path}: {err}")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as err:
        raise _UsageError(f"config file {path} is not valid JSON: {err}")
    if not isinstance(doc, dict):
        raise _UsageError(f"config file {path} must hold a JSON object")
    unknown = sorted(set(doc) - set(CONFIG_DEFAULTS))
    if unknown:
        raise _UsageError(f"unknown config keys: {', '.join(unknown)}")
    return doc


def _gather(args, keys) -> tuple[dict, set]:
    """Defaults, overlaid by the config file, overlaid by explicit flags."""
    merged = {k: CONFIG_DEFAULTS[k] for k in keys}
    explicit = set()
    if getattr(args, "config", None):
        for key, value in _load_config_file(args.config).items():
            if key in merged:
                merged[key] = value
                explicit.add(key)
    for key in keys:
        value = getattr(args, key, None)
        if value is not None:
            merged[key] = value
            explicit.add(key)
    return merged, explicit


def _pipeline_config(merged: dict) -> PipelineConfig:
    return PipelineConfig(**{k: merged[k] for k in PIPELINE_KEYS})


def _director_config(merged: dict, frames: int) -> DirectorConfig:
    return DirectorConfig(
        frames=frames,
        fps=merged["fps"],
        endpoint=merged["endpoint"],
        model=merged["model"],
        timeout=merged["timeout"],
        max_retries=merged["max_retries"],
    )


def _make_client(args, explicit: set):
    if getattr(args, "mock", False):
        return MockChatClient()
    if "endpoint" in explicit:
        return HttpChatClient()
    return MockChatClient()


def _emit_prompts(prompt_set: FramePromptSet, output: str | None) -> None:
    text = prompt_set.to_json()
    if output:
        Path(output).write_text(text + "\n")
    else:
        print(text)


def _load_prompt_file(path: str) -> FramePromptSet:
    return FramePromptSet.from_json(Path(path).read_text())


def _pin_frames(merged: dict, explicit: set, prompt_set: FramePromptSet) -> None:
    if "frames" in explicit and merged["frames"] != prompt_set.frame_count:
        raise _UsageError(
            f"--frames {merged['frames']} conflicts with the prompt file's "
            f"{prompt_set.frame_count} prompts"
        )
    merged["frames"] = prompt_set.frame_count


def cmd_direct(args) -> int:
    merged, explicit = _gather(args, DIRECTOR_KEYS)
    config = _director_config(merged, merged["frames"])
    result = direct_frames(args.prompt, config, _make_client(args, explicit))
    _emit_prompts(result, args.output)
    return EXIT_OK


def cmd_generate(args) -> int:
    keys = tuple(dict.fromkeys(PIPELINE_KEYS + DIRECTOR_KEYS))
    merged, explicit = _gather(args, keys)
    if args.prompts_file:
        prompt_set = _load_prompt_file(args.prompts_file)
        _pin_frames(merged, explicit, prompt_set)
        config = _pipeline_config(merged)
        result = generate_video(prompt_set, config)
    elif args.prompt:
        config = _pipeline_config(merged)
        result = generate_video(
            args.prompt,
            config,
            client=_make_client(args, explicit),
            director=_director_config(merged, config.frames),
        )
    else:
        raise _UsageError("provide a prompt or --prompts-file")
    paths = write_outputs(result.frames, merged["out_dir"], result.prompt_set, config)
    print(paths.manifest)
    return EXIT_OK


def cmd_lift_fps(args) -> int:
    merged, explicit = _gather(args, DIRECTOR_KEYS)
    prompt_set = _load_prompt_file(args.prompts_file)
    config = DirectorConfig(
        frames=prompt_set.frame_count,
        fps=prompt_set.fps,
        endpoint=merged["endpoint"],
        model=merged["model"],
        timeout=merged["timeout"],
        max_retries=merged["max_retries"],
    )
    result = lift_fps(prompt_set, args.iterations, config, _make_client(args, explicit))
    _emit_prompts(result, args.output)
    return EXIT_OK


def cmd_eval(args) -> int:
    run_dir = Path(args.run_dir)
    manifest = json.loads((run_dir / "manifest.json").read_text())
    prompts = manifest["prompts"]
    label = manifest["config"]["mode"]
    frames = [
        np.asarray(Image.open(run_dir / name).convert("RGB"))
        for name in manifest["frames"]
    ]
    scores = [frame_score(frame, prompt) for frame, prompt in zip(frames, prompts)]
    table = SimilarityTable({label: scores})
    csv_path = write_csv(table, args.output or run_dir / "scores.csv")
    write_summary(table, args.summary or run_dir / "summary.json")
    aggregates = table.aggregates()
    print(f"{AVG_LABEL} {label}: {aggregates[AVG_LABEL][label]:.4f}")
    print(f"{AVG_DIST_LABEL} {label}: {aggregates[AVG_DIST_LABEL][label]:.4f}")
    print(csv_path)
    return EXIT_OK


def cmd_compare_attention(args) -> int:
    if args.scores_file:
        table = read_csv(args.scores_file)
    else:
        modes = [m.strip() for m in args.modes.split(",") if m.strip()]
        if not modes:
            raise _UsageError("--modes needs at least one mode")
        unknown = [m for m in modes if m not in MODES]
        if unknown:
            raise _UsageError(
                f"unknown mode(s) {', '.join(unknown)}; expected one of {', '.join(MODES)}"
            )
        if len(set(modes)) != len(modes):
            raise _UsageError("--modes lists a mode twice")
        keys = tuple(dict.fromkeys(PIPELINE_KEYS + DIRECTOR_KEYS))
        merged, explicit = _gather(args, keys)
        if args.prompts_file:
            prompt_set = _load_prompt_file(args.prompts_file)
        elif args.prompt:
            prompt_set = direct_frames(
                args.prompt,
                _director_config(merged, merged["frames"]),
                _make_client(args, explicit),
            )
        else:
            raise _UsageError("provide a prompt, --prompts-file, or --scores-file")
        _pin_frames(merged, explicit, prompt_set)
        columns = {}
        for mode in modes:
            config = _pipeline_config({**merged, "mode": mode})
            result = generate_video(prompt_set, config)
            columns[mode] = [
                frame_score(frame, prompt)
                for frame, prompt in zip(result.frames, prompt_set.prompts)
            ]
        table = SimilarityTable(columns)
    if args.output:
        print(write_csv(table, args.output))
    else:
        sys.stdout.write(csv_text(table))
    return EXIT_OK


def _add_config_flag(parser):
    parser.add_argument("--config", metavar="FILE", help="JSON config file (flat keys; flags win)")


def _add_client_flags(parser):
    parser.add_argument("--mock", action="store_true",
                        help="answer director requests with the offline mock (default unless --endpoint is set)")
    parser.add_argument("--endpoint", metavar="URL",
                        help=f"chat-completions endpoint; setting it selects the HTTP client (default {CONFIG_DEFAULTS['endpoint']})")
    parser.add_argument("--model", help=f"model name sent to the endpoint (default {CONFIG_DEFAULTS['model']})")
    parser.add_argument("--timeout", type=float,
                        help=f"request timeout in seconds (default {CONFIG_DEFAULTS['timeout']})")
    parser.add_argument("--max-retries", type=int,
                        help=f"extra attempts after a transient failure (default {CONFIG_DEFAULTS['max_retries']})")


def _add_pipeline_flags(parser):
    parser.add_argument("--frames", type=int, help=f"frame count (default {CONFIG_DEFAULTS['frames']})")
    parser.add_argument("--mode", choices=MODES,
                        help=f"cross-frame attention mode (default {CONFIG_DEFAULTS['mode']})")
    parser.add_argument("--steps", type=int, help=f"diffusion steps T (default {CONFIG_DEFAULTS['steps']})")
    parser.add_argument("--mapped-steps", type=int,
                        help=f"steps run in the configured mode after warm-up (default {CONFIG_DEFAULTS['mapped_steps']})")
    parser.add_argument("--guidance", type=float,
                        help=f"classifier-free guidance scale (default {CONFIG_DEFAULTS['guidance']})")
    parser.add_argument("--rotation-period", type=int,
                        help=f"timesteps per reference frame in rotation (default {CONFIG_DEFAULTS['rotation_period']})")
    parser.add_argument("--mask-quantile", type=float,
                        help=f"confidence quantile for filtered mapping (default {CONFIG_DEFAULTS['mask_quantile']})")
    parser.add_argument("--batch", type=int,
                        help=f"max frames in flight; longer videos run in cached sections (default {CONFIG_DEFAULTS['batch']})")
    parser.add_argument("--seed", type=int, help=f"seed for weights and noise (default {CONFIG_DEFAULTS['seed']})")
    parser.add_argument("--height", type=int, help=f"latent height (default {CONFIG_DEFAULTS['height']})")
    parser.add_argument("--width", type=int, help=f"latent width (default {CONFIG_DEFAULTS['width']})")
    parser.add_argument("--channels", type=int, help=f"latent channels (default {CONFIG_DEFAULTS['channels']})")
    parser.add_argument("--motion", type=_parse_motion, metavar="DX,DY",
                        help="per-frame latent translation applied at the end of warm-up (default off)")
    parser.add_argument("--fps", type=int, help=f"playback rate for prompts and GIF (default {CONFIG_DEFAULTS['fps']})")


def build_parser() -> _Parser:
    parser = _Parser(prog="framereel", description=__doc__.splitlines()[0])
    commands = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    direct = commands.add_parser("direct", help="expand one prompt into per-frame prompts")
    direct.add_argument("prompt", help="abstract scene description")
    direct.add_argument("--frames", type=int, help=f"frame count (default {CONFIG_DEFAULTS['frames']})")
    direct.add_argument("--fps", type=int, help=f"playback rate (default {CONFIG_DEFAULTS['fps']})")
    direct.add_argument("--output", metavar="FILE", help="write the prompts JSON here instead of stdout")
    _add_config_flag(direct)
    _add_client_flags(direct)
    direct.set_defaults(func=cmd_direct)

    generate = commands.add_parser("generate", help="run the full prompt-to-video pipeline")
    generate.add_argument("prompt", nargs="?", help="abstract scene description (or use --prompts-file)")
    generate.add_argument("--prompts-file", metavar="FILE", help="per-frame prompts JSON from `direct`")
    generate.add_argument("--out-dir", metavar="DIR",
                          help=f"directory for PNGs, GIF, and manifest (default {CONFIG_DEFAULTS['out_dir']})")
    _add_config_flag(generate)
    _add_pipeline_flags(generate)
    _add_client_flags(generate)
    generate.set_defaults(func=cmd_generate)

    lift = commands.add_parser("lift-fps", help="double frame count and fps of a prompts file")
    lift.add_argument("--prompts-file", required=True, metavar="FILE", help="prompts JSON to lift")
    lift.add_argument("--iterations", type=int, default=1, help="number of doublings (default 1)")
    lift.add_argument("--output", metavar="FILE", help="write the lifted JSON here instead of stdout")
    _add_config_flag(lift)
    _add_client_flags(lift)
    lift.set_defaults(func=cmd_lift_fps)

    evaluate = commands.add_parser("eval", help="score a generated run against its prompts")
    evaluate.add_argument("--run-dir", required=True, metavar="DIR", help="directory written by `generate`")
    evaluate.add_argument("--output", metavar="FILE", help="scores CSV path (default RUN_DIR/scores.csv)")
    evaluate.add_argument("--summary", metavar="FILE", help="summary JSON path (default RUN_DIR/summary.json)")
    evaluate.set_defaults(func=cmd_eval)

    compare = commands.add_parser("compare-attention",
                                  help="score several attention modes on identical prompts and seed")
    compare.add_argument("prompt", nargs="?", help="abstract scene description")
    compare.add_argument("--modes", default="first_frame,sparse_causal,rvm,rvm_dsf",
                         help="comma-separated attention modes (default first_frame,sparse_causal,rvm,rvm_dsf)")
    compare.add_argument("--prompts-file", metavar="FILE", help="per-frame prompts JSON from `direct`")
    compare.add_argument("--scores-file", metavar="FILE",
                         help="skip generation; recompute aggregates for an existing per-frame score CSV")
    compare.add_argument("--output", metavar="FILE", help="write the CSV here instead of stdout")
    _add_config_flag(compare)
    _add_pipeline_flags(compare)
    _add_client_flags(compare)
    compare.set_defaults(func=cmd_compare_attention)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except _UsageError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except ChatClientError as err:
        print(f"network error: {type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_NETWORK
    except DirectorError as err:
        print(f"error: {type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_RUNTIME
    except (ValueError, TypeError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
