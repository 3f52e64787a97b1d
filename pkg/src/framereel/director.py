"""Frame-level video direction through a chat model.

Turns one scene description into an ordered set of per-frame image prompts:
builds the directing instruction, parses the model's numbered reply, and
doubles the frame rate by asking the model to split every frame in two.
Includes a deterministic mock client and an HTTP client with typed errors.
"""

from __future__ import annotations

import json
import os
import re
import time
from dataclasses import dataclass, field
from typing import Callable, Protocol, Sequence

import requests

ROLES = ("system", "user", "assistant")


class DirectorError(Exception):
    """Base for every error raised by this module."""


class PromptFormatError(DirectorError):
    """The model reply contains no parseable frame lines."""


class FrameCountError(DirectorError):
    def __init__(self, found: int, expected: int):
        super().__init__(f"parsed {found} frame prompts, expected {expected}")
        self.found = found
        self.expected = expected


class DuplicateFrameError(DirectorError):
    def __init__(self, index: int):
        super().__init__(f"frame {index} appears more than once")
        self.index = index


class FpsLiftError(DirectorError):
    """A lift iteration failed; carries which iteration and the underlying error."""

    def __init__(self, iteration: int, cause: Exception):
        super().__init__(f"frame-rate lift failed at iteration {iteration}: {cause}")
        self.iteration = iteration
        self.cause = cause


class ChatClientError(DirectorError):
    """Base for chat transport failures."""


class ChatTimeoutError(ChatClientError):
    pass


class ChatNetworkError(ChatClientError):
    pass


class ChatHttpError(ChatClientError):
    def __init__(self, status: int, detail: str = ""):
        super().__init__(f"chat endpoint returned HTTP {status}" + (f": {detail}" if detail else ""))
        self.status = status


class MalformedResponseError(ChatClientError):
    pass


class RetryExhaustedError(ChatClientError):
    def __init__(self, attempts: int, last_error: ChatClientError):
        super().__init__(f"giving up after {attempts} attempts; last error: {last_error}")
        self.attempts = attempts
        self.last_error = last_error


@dataclass
class ChatMessage:
    role: str
    content: str

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"role must be one of {ROLES}, got {self.role!r}")
        if not self.content:
            raise ValueError("message content must be non-empty")


@dataclass
class FramePromptSet:
    """An ordered, gap-free list of per-frame prompts with its playback rate."""

    prompts: list[str]
    fps: int
    user_prompt: str

    def __post_init__(self):
        self.prompts = list(self.prompts)
        if len(self.prompts) < 1:
            raise ValueError("need at least one frame prompt")
        if any((not isinstance(p, str)) or not p.strip() for p in self.prompts):
            raise ValueError("every frame prompt must be a non-empty string")
        if self.fps < 1:
            raise ValueError(f"fps must be >= 1, got {self.fps}")

    @property
    def frame_count(self) -> int:
        return len(self.prompts)

    def to_json(self) -> str:
        doc = {"user_prompt": self.user_prompt, "fps": self.fps, "prompts": self.prompts}
        return json.dumps(doc, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "FramePromptSet":
        doc = json.loads(text)
        try:
            return cls(prompts=doc["prompts"], fps=doc["fps"], user_prompt=doc["user_prompt"])
        except KeyError as exc:
            raise ValueError(f"prompt-set document missing key {exc}") from exc


@dataclass
class DirectorConfig:
    frames: int
    fps: int
    endpoint: str = "http://localhost:8080/v1/chat/completions"
    model: str = "frame-director"
    timeout: float = 30.0
    max_retries: int = 2

    def __post_init__(self):
        if self.frames < 1:
            raise ValueError(f"frames must be >= 1, got {self.frames}")
        if self.fps < 1:
            raise ValueError(f"fps must be >= 1, got {self.fps}")
        if self.timeout <= 0:
            raise ValueError(f"timeout must be positive, got {self.timeout}")
        if self.max_retries < 0:
            raise ValueError(f"max_retries must be >= 0, got {self.max_retries}")


def build_task_instruction(user_prompt: str, frames: int, fps: int) -> str:
    """Deterministic directing instruction asking for exactly `frames` frame lines."""
    if not user_prompt or not user_prompt.strip():
        raise ValueError("user prompt must be non-empty")
    if frames < 1:
        raise ValueError(f"frames must be >= 1, got {frames}")
    if fps < 1:
        raise ValueError(f"fps must be >= 1, got {fps}")
    noun = "image description" if frames == 1 else "image descriptions"
    contract = ["Frame 1: <description>"]
    if frames == 2:
        contract.append("Frame 2: <description>")
    elif frames > 2:
        contract.extend(["...", f"Frame {frames}: <description>"])
    return (
        "You are directing a short video described one still frame at a time.\n"
        f"Scene: {user_prompt}\n"
        "\n"
        f"Write exactly {frames} numbered {noun}, one per frame, for a video "
        f"playing at {fps} frames per second. Together they must read as a "
        "single continuous shot: keep the subjects and style consistent from frame "
        "to frame and advance the motion a little at a time. Each description must "
        "state the visible actions, the objects in view, the surrounding context, "
        "the camera framing, and how the moment advances the plot.\n"
        "\n"
        "Answer with only these lines and nothing else:\n"
        + "\n".join(contract)
    )


_FRAME_LINE = re.compile(
    r"^\s*(?:[-*•]\s*|\d+\s*[.)]\s*)?frame\s+(\d+)\s*:\s*(\S.*?)\s*$",
    re.IGNORECASE,
)


def parse_frame_prompts(
    llm_text: str, expected_frames: int, fps: int = 1, user_prompt: str = ""
) -> FramePromptSet:
    """Extract "Frame k: <text>" lines, tolerating bullet and number markers."""
    if expected_frames < 1:
        raise ValueError(f"expected_frames must be >= 1, got {expected_frames}")
    found: dict[int, str] = {}
    for line in llm_text.splitlines():
        match = _FRAME_LINE.match(line)
        if match is None:
            continue
        index = int(match.group(1))
        if index in found:
            raise DuplicateFrameError(index)
        found[index] = match.group(2)
    if not found:
        raise PromptFormatError("no 'Frame <k>: <text>' lines found in reply")
    if len(found) != expected_frames:
        raise FrameCountError(found=len(found), expected=expected_frames)
    prompts = [found[k] for k in sorted(found)]
    return FramePromptSet(prompts=prompts, fps=fps, user_prompt=user_prompt)


def build_fps_lift_instruction(fps: int, frames: int) -> str:
    """Instruction that doubles the frame rate by splitting every frame in two."""
    if fps < 1:
        raise ValueError(f"fps must be >= 1, got {fps}")
    if frames < 1:
        raise ValueError(f"frames must be >= 1, got {frames}")
    return (
        f"Now, at a frame rate of {2 * fps} fps, divide each frame in the previous "
        f"result into two separate image descriptions. This should eventually "
        f"result in {2 * frames} frames."
    )


def render_frame_lines(prompts: Sequence[str]) -> str:
    """The canonical assistant-reply form of a prompt list."""
    return "\n".join(f"Frame {k}: {p}" for k, p in enumerate(prompts, start=1))


class ChatClient(Protocol):
    def complete(self, messages: Sequence[ChatMessage], config: DirectorConfig) -> str: ...


def chat_complete(
    messages: Sequence[ChatMessage], config: DirectorConfig, client: ChatClient
) -> str:
    """Validate the conversation and delegate to the configured client."""
    if not messages:
        raise ValueError("conversation must contain at least one message")
    return client.complete(list(messages), config)


def direct_frames(
    user_prompt: str, config: DirectorConfig, client: ChatClient
) -> FramePromptSet:
    """One-shot direction: instruction -> chat -> parsed per-frame prompts."""
    instruction = build_task_instruction(user_prompt, config.frames, config.fps)
    reply = chat_complete([ChatMessage("user", instruction)], config, client)
    return parse_frame_prompts(
        reply, config.frames, fps=config.fps, user_prompt=user_prompt
    )


def lift_fps(
    prompt_set: FramePromptSet,
    iterations: int,
    config: DirectorConfig,
    client: ChatClient,
) -> FramePromptSet:
    """Double frame count and fps `iterations` times via the chat model.

    The conversation is rebuilt from the prompt set (original instruction plus
    its canonical reply) so a set loaded from disk lifts identically to one
    produced in-session.
    """
    if iterations < 0:
        raise ValueError(f"iterations must be >= 0, got {iterations}")
    current = prompt_set
    conversation = [
        ChatMessage("user", build_task_instruction(
            current.user_prompt or "an unnamed scene", current.frame_count, current.fps)),
        ChatMessage("assistant", render_frame_lines(current.prompts)),
    ]
    for i in range(iterations):
        conversation.append(
            ChatMessage("user", build_fps_lift_instruction(current.fps, current.frame_count))
        )
        reply = chat_complete(conversation, config, client)
        try:
            current = parse_frame_prompts(
                reply,
                2 * current.frame_count,
                fps=2 * current.fps,
                user_prompt=current.user_prompt,
            )
        except DirectorError as exc:
            raise FpsLiftError(iteration=i, cause=exc) from exc
        conversation.append(ChatMessage("assistant", reply))
    return current


_SCENE_LINE = re.compile(r"^Scene: (.*)$", re.MULTILINE)
_EXACT_COUNT = re.compile(r"exactly (\d+) numbered")
_LIFT_TARGET = re.compile(r"result in (\d+) frames")

FIRST_HALF_SUFFIX = ", first half of the moment"
SECOND_HALF_SUFFIX = ", second half of the moment"


class MockChatClient:
    """Pure deterministic stand-in for the chat endpoint.

    Answers directing instructions with one derived line per frame, and lift
    instructions by splitting each previous frame into an ordered pair.
    """

    def complete(self, messages: Sequence[ChatMessage], config: DirectorConfig) -> str:
        if not messages:
            raise ValueError("conversation must contain at least one message")
        last = messages[-1]
        if last.role != "user":
            raise ChatClientError("mock client expects the last message to be from the user")
        lift = _LIFT_TARGET.search(last.content)
        if lift and "divide each frame in the previous result" in last.content:
            return self._lift_reply(messages, target=int(lift.group(1)))
        if _SCENE_LINE.search(last.content):
            return self._direct_reply(last.content)
        raise ChatClientError("mock client does not recognize this instruction")

    def _direct_reply(self, instruction: str) -> str:
        scene = _SCENE_LINE.search(instruction).group(1).strip() or "an empty scene"
        count_match = _EXACT_COUNT.search(instruction)
        if count_match is None:
            raise ChatClientError("mock client cannot find the requested frame count")
        frames = int(count_match.group(1))
        lines = [
            f"Frame {k}: {scene}, beat {k} of {frames}" for k in range(1, frames + 1)
        ]
        return "\n".join(lines)

    def _lift_reply(self, messages: Sequence[ChatMessage], target: int) -> str:
        previous = next(
            (m for m in reversed(messages) if m.role == "assistant"), None
        )
        if previous is None:
            raise ChatClientError("nothing to divide: no previous assistant reply")
        parsed = parse_frame_prompts(previous.content, max(target // 2, 1))
        lines = []
        for i, prompt in enumerate(parsed.prompts):
            lines.append(f"Frame {2 * i + 1}: {prompt}{FIRST_HALF_SUFFIX}")
            lines.append(f"Frame {2 * i + 2}: {prompt}{SECOND_HALF_SUFFIX}")
        return "\n".join(lines)


API_KEY_ENV = "FRAMEREEL_API_KEY"


@dataclass
class HttpChatClient:
    """JSON chat-completion client with bounded retries on transient failures.

    Timeouts, connection drops, and 5xx statuses are retried up to
    config.max_retries extra attempts with exponential backoff; 4xx statuses
    and malformed bodies fail immediately. When retries run out the last
    transient error is wrapped in RetryExhaustedError (or raised as-is when
    max_retries is 0).
    """

    api_key_env: str = API_KEY_ENV
    backoff_base: float = 0.5
    sleep: Callable[[float], None] = time.sleep
    session: requests.Session | None = None

    def complete(self, messages: Sequence[ChatMessage], config: DirectorConfig) -> str:
        body = {
            "model": config.model,
            "messages": [{"role": m.role, "content": m.content} for m in messages],
        }
        headers = {"Content-Type": "application/json"}
        token = os.environ.get(self.api_key_env)
        if token:
            headers["Authorization"] = f"Bearer {token}"
        post = (self.session or requests).post

        attempts = config.max_retries + 1
        last_error: ChatClientError | None = None
        for attempt in range(attempts):
            try:
                response = post(
                    config.endpoint, json=body, headers=headers, timeout=config.timeout
                )
            except requests.Timeout as exc:
                last_error = ChatTimeoutError(f"no response within {config.timeout}s")
                last_error.__cause__ = exc
            except requests.ConnectionError as exc:
                last_error = ChatNetworkError(str(exc))
                last_error.__cause__ = exc
            else:
                if 200 <= response.status_code < 300:
                    return self._extract(response)
                if response.status_code >= 500:
                    last_error = ChatHttpError(response.status_code)
                else:
                    raise ChatHttpError(response.status_code, detail=response.text[:200])
            if attempt + 1 < attempts:
                self.sleep(self.backoff_base * (2 ** attempt))
        if config.max_retries == 0:
            raise last_error
        raise RetryExhaustedError(attempts=attempts, last_error=last_error)

    @staticmethod
    def _extract(response) -> str:
        try:
            data = response.json()
        except ValueError as exc:
            raise MalformedResponseError(f"response body is not JSON: {exc}") from exc
        try:
            content = data["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise MalformedResponseError(
                "response JSON missing choices[0].message.content"
            ) from exc
        if not isinstance(content, str) or not content:
            raise MalformedResponseError("assistant content is empty or not text")
        return content
