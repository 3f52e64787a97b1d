"""Similarity and consistency metrics for generated videos.

Per-frame text-image agreement is a cosine between embeddings from a
pluggable provider; a deterministic toy provider ships here so everything
runs offline. The aggregate arithmetic (column mean and mean absolute gap
to frame 1) is what turns per-frame score columns into a comparison table.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol

import numpy as np

from .denoiser import LatentVideo
from .diffusion import EMBED_DIM, embed_text

AVG_LABEL = "Avg."
AVG_DIST_LABEL = "Avg. Dist."
_PROVIDER_SEED = 977


class EmbeddingProvider(Protocol):
    """Maps frames and prompts into one shared unit-norm embedding space."""

    def embed_image(self, frame: np.ndarray) -> np.ndarray: ...

    def embed_prompt(self, prompt: str) -> np.ndarray: ...


@dataclass
class ToyEmbeddingProvider:
    """Deterministic stand-in for a real image/text encoder pair.

    Images are average-pooled to a pool x pool color grid, flattened, pushed
    through a fixed seeded projection, and L2-normalized; prompts reuse the
    hashed text embedding. Scores are stable across runs and machines but
    carry no perceptual meaning.
    """

    dim: int = EMBED_DIM
    pool: int = 4

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError(f"dim must be >= 1, got {self.dim}")
        if self.pool < 1:
            raise ValueError(f"pool must be >= 1, got {self.pool}")

    def embed_image(self, frame: np.ndarray) -> np.ndarray:
        frame = np.asarray(frame, dtype=np.float64)
        if frame.ndim != 3 or frame.shape[2] != 3:
            raise ValueError(f"expected an (h, w, 3) RGB frame, got shape {frame.shape}")
        height, width = frame.shape[:2]
        if height < self.pool or width < self.pool:
            raise ValueError(
                f"frame {height}x{width} is smaller than the {self.pool}x{self.pool} pooling grid"
            )
        if not np.all(np.isfinite(frame)):
            raise ValueError("frame contains non-finite values")
        scaled = frame / 255.0
        rows = np.array_split(np.arange(height), self.pool)
        cols = np.array_split(np.arange(width), self.pool)
        cells = np.empty((self.pool, self.pool, 3))
        for i, r in enumerate(rows):
            for j, c in enumerate(cols):
                cells[i, j] = scaled[np.ix_(r, c)].mean(axis=(0, 1))
        # trailing 1 keeps an all-black frame away from the zero vector
        features = np.append(cells.reshape(-1), 1.0)
        rng = np.random.default_rng(_PROVIDER_SEED)
        projection = rng.standard_normal((features.size, self.dim)) / np.sqrt(features.size)
        vec = features @ projection
        norm = float(np.linalg.norm(vec))
        if norm < 1e-12:
            vec = np.zeros(self.dim)
            vec[0] = 1.0
            norm = 1.0
        return vec / norm

    def embed_prompt(self, prompt: str) -> np.ndarray:
        return embed_text(prompt, self.dim).vector


def _check_unit(name: str, vec: np.ndarray) -> np.ndarray:
    vec = np.asarray(vec, dtype=np.float64)
    if vec.ndim != 1:
        raise ValueError(f"{name} embedding must be 1-D, got ndim={vec.ndim}")
    norm = float(np.linalg.norm(vec))
    if abs(norm - 1.0) > 1e-6:
        raise ValueError(f"{name} embedding must be unit-norm, got |v| = {norm}")
    return vec


def frame_score(
    frame: np.ndarray, prompt: str, provider: EmbeddingProvider | None = None
) -> float:
    """Cosine similarity between one frame and its prompt."""
    provider = provider if provider is not None else ToyEmbeddingProvider()
    image_vec = _check_unit("image", provider.embed_image(frame))
    text_vec = _check_unit("text", provider.embed_prompt(prompt))
    if image_vec.shape != text_vec.shape:
        raise ValueError(
            f"embedding spaces disagree: image {image_vec.shape} vs text {text_vec.shape}"
        )
    return float(image_vec @ text_vec)


def _check_scores(scores) -> np.ndarray:
    arr = np.asarray(scores, dtype=np.float64)
    if arr.ndim != 1:
        raise ValueError(f"scores must be a 1-D vector, got ndim={arr.ndim}")
    if arr.shape[0] < 1:
        raise ValueError("scores vector is empty")
    if not np.all(np.isfinite(arr)):
        raise ValueError("scores contain non-finite values")
    return arr


def avg_score(scores) -> float:
    """Arithmetic mean of one score column."""
    return float(_check_scores(scores).mean())


def avg_dist(scores) -> float:
    """Mean absolute gap between frame 1's score and every frame's.

    The divisor is the full frame count, so frame 1's zero gap is averaged
    in. Zero exactly when every frame scores the same as frame 1.
    """
    arr = _check_scores(scores)
    return float(np.abs(arr - arr[0]).mean())


def temporal_consistency(latents: LatentVideo | np.ndarray) -> float:
    """Mean adjacent-frame L2 distance, normalized by the whole stack's norm.

    Lower is steadier. Scaling all frames together leaves the value
    unchanged; identical frames give exactly zero.
    """
    data = latents.data if isinstance(latents, LatentVideo) else np.asarray(latents, float)
    if data.ndim != 4:
        raise ValueError(f"expected (F, h, w, c) latents, got ndim={data.ndim}")
    frames = data.shape[0]
    if frames < 2:
        raise ValueError(f"need at least 2 frames for adjacent distances, got {frames}")
    if not np.all(np.isfinite(data)):
        raise ValueError("latents contain non-finite values")
    diffs = np.linalg.norm((data[1:] - data[:-1]).reshape(frames - 1, -1), axis=1)
    denom = float(np.linalg.norm(data))
    if denom < 1e-12:
        return 0.0
    return float(diffs.mean() / denom)


@dataclass
class SimilarityTable:
    """Per-frame score columns, one per method label, all the same length."""

    columns: dict[str, list[float]]

    def __post_init__(self):
        if not self.columns:
            raise ValueError("table needs at least one column")
        lengths = set()
        for label, col in self.columns.items():
            if not isinstance(label, str) or not label.strip():
                raise ValueError(f"bad column label {label!r}")
            if label in (AVG_LABEL, AVG_DIST_LABEL, "frame"):
                raise ValueError(f"label {label!r} is reserved")
            arr = _check_scores(col)
            self.columns[label] = [float(v) for v in arr]
            lengths.add(arr.shape[0])
        if len(lengths) != 1:
            raise ValueError(f"columns disagree on frame count: {sorted(lengths)}")

    @property
    def frame_count(self) -> int:
        return len(next(iter(self.columns.values())))

    @property
    def labels(self) -> list[str]:
        return list(self.columns)

    def aggregates(self) -> dict[str, dict[str, float]]:
        return {
            AVG_LABEL: {label: avg_score(col) for label, col in self.columns.items()},
            AVG_DIST_LABEL: {label: avg_dist(col) for label, col in self.columns.items()},
        }


def csv_text(table: SimilarityTable) -> str:
    """One row per frame plus the two aggregate rows, one column per label."""
    aggregates = table.aggregates()
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(["frame"] + table.labels)
    for k in range(table.frame_count):
        writer.writerow([k + 1] + [repr(table.columns[l][k]) for l in table.labels])
    for agg in (AVG_LABEL, AVG_DIST_LABEL):
        writer.writerow([agg] + [repr(aggregates[agg][l]) for l in table.labels])
    return buffer.getvalue()


def write_csv(table: SimilarityTable, path: str | Path) -> Path:
    path = Path(path)
    path.write_text(csv_text(table))
    return path


def read_csv(path: str | Path) -> SimilarityTable:
    """Parse a score table; aggregate rows, if present, are recomputed not read."""
    path = Path(path)
    with path.open(newline="") as handle:
        rows = [row for row in csv.reader(handle) if row]
    if not rows:
        raise ValueError(f"{path} is empty")
    header = rows[0]
    if len(header) < 2 or header[0] != "frame":
        raise ValueError(f"expected header 'frame,<label>,...', got {header!r}")
    labels = header[1:]
    columns: dict[str, list[float]] = {label: [] for label in labels}
    if len(columns) != len(labels):
        raise ValueError(f"duplicate column labels in {labels!r}")
    next_frame = 1
    for row in rows[1:]:
        if row[0] in (AVG_LABEL, AVG_DIST_LABEL):
            continue
        try:
            frame_no = int(row[0])
        except ValueError:
            raise ValueError(f"unrecognized row label {row[0]!r}") from None
        if frame_no != next_frame:
            raise ValueError(f"frame rows must run 1..F in order; got {frame_no}")
        if len(row) != len(labels) + 1:
            raise ValueError(f"row {frame_no} has {len(row) - 1} values for {len(labels)} columns")
        for label, cell in zip(labels, row[1:]):
            columns[label].append(float(cell))
        next_frame += 1
    return SimilarityTable(columns=columns)


def summary(table: SimilarityTable) -> dict:
    return {
        "frames": table.frame_count,
        "columns": {label: list(col) for label, col in table.columns.items()},
        "aggregates": table.aggregates(),
    }


def write_summary(table: SimilarityTable, path: str | Path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(summary(table), indent=2, sort_keys=True) + "\n")
    return path
