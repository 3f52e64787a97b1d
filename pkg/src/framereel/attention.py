"""Cross-frame self-attention variants for frame-coupled video sampling.

All functions here are pure and operate on plain numpy arrays. A "frame" is a
set of N token vectors; cross-frame modes let one frame's queries attend to
another frame's keys/values so appearance propagates through the video.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

MODES = ("per_frame", "first_frame", "sparse_causal", "rvm", "rvm_dsf")


def _require_finite(name: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")


@dataclass
class FrameQKV:
    """Query/key/value stacks for all frames, each shaped (F, N, d)."""

    Q: np.ndarray
    K: np.ndarray
    V: np.ndarray

    def __post_init__(self):
        self.Q = np.asarray(self.Q, dtype=np.float64)
        self.K = np.asarray(self.K, dtype=np.float64)
        self.V = np.asarray(self.V, dtype=np.float64)
        if self.Q.ndim != 3:
            raise ValueError(f"expected (F, N, d) arrays, got ndim={self.Q.ndim}")
        if not (self.Q.shape == self.K.shape == self.V.shape):
            raise ValueError(
                f"Q/K/V shapes differ: {self.Q.shape}, {self.K.shape}, {self.V.shape}"
            )
        if min(self.Q.shape) < 1:
            raise ValueError(f"degenerate shape {self.Q.shape}")
        for name, arr in (("Q", self.Q), ("K", self.K), ("V", self.V)):
            _require_finite(name, arr)

    @property
    def num_frames(self) -> int:
        return self.Q.shape[0]


@dataclass
class CrossFrameConfig:
    """Attention mode plus the knobs shared by the rotational modes.

    m is the rotation period in timesteps, q the confidence quantile for
    dual-softmax filtering, and scale_dual_softmax applies the 1/sqrt(d)
    logit scaling inside the confidence computation.
    """

    mode: str
    m: int = 4
    q: float = 0.4
    scale_dual_softmax: bool = True

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown attention mode {self.mode!r}; expected one of {MODES}")
        if self.m < 1:
            raise ValueError(f"rotation period m must be >= 1, got {self.m}")
        if not 0.0 <= self.q <= 1.0:
            raise ValueError(f"quantile q must be in [0, 1], got {self.q}")


@dataclass
class ConfidenceMask:
    """Per-token keep/replace decisions for one frame plus the threshold used."""

    mask: np.ndarray  # (N,) bool; True = mapping is reliable for that token
    phi: float


def _softmax_rows(S: np.ndarray) -> np.ndarray:
    e = np.exp(S - S.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def scaled_attention(Q: np.ndarray, K: np.ndarray, V: np.ndarray) -> np.ndarray:
    """Softmax(Q K^T / sqrt(d)) V for one frame.

    K and V may carry more tokens than Q (used by the sparse-causal mode,
    which concatenates reference frames along the token axis).
    """
    Q = np.asarray(Q, dtype=np.float64)
    K = np.asarray(K, dtype=np.float64)
    V = np.asarray(V, dtype=np.float64)
    if Q.ndim != 2 or K.ndim != 2 or V.ndim != 2:
        raise ValueError("Q, K, V must be 2-D (N, d) arrays")
    if Q.shape[1] != K.shape[1]:
        raise ValueError(f"channel mismatch: Q has d={Q.shape[1]}, K has d={K.shape[1]}")
    if K.shape[0] != V.shape[0]:
        raise ValueError(f"K has {K.shape[0]} tokens but V has {V.shape[0]}")
    for name, arr in (("Q", Q), ("K", K), ("V", V)):
        _require_finite(name, arr)
    d = Q.shape[1]
    weights = _softmax_rows((Q @ K.T) / math.sqrt(d))
    return weights @ V


def rotational_reference(t_prime: int, m: int, F: int) -> int:
    """Reference frame index (1-based) after t_prime mapped timesteps.

    Rotates through all F frames, dwelling m timesteps on each, so every
    frame serves as the reference exactly once per m*F steps.
    """
    if m < 1:
        raise ValueError(f"period m must be >= 1, got {m}")
    if F < 1:
        raise ValueError(f"frame count F must be >= 1, got {F}")
    if t_prime < 0:
        raise ValueError(f"t_prime must be >= 0, got {t_prime}")
    return (t_prime // m) % F + 1


def value_map(Q_f: np.ndarray, K_ref: np.ndarray, V_ref: np.ndarray) -> np.ndarray:
    """Attend with the current frame's queries against a reference frame's K/V."""
    return scaled_attention(Q_f, K_ref, V_ref)


def dual_softmax(Q_f: np.ndarray, K_ref: np.ndarray, scale: bool) -> np.ndarray:
    """Matching confidence: row-softmax(S) * column-softmax(S) with S = Q K^T.

    The column factor is the softmax over the reference tokens of K Q^T,
    transposed so both factors share the (target, source) layout. With
    scale=True the logits are divided by sqrt(d) first.
    """
    Q_f = np.asarray(Q_f, dtype=np.float64)
    K_ref = np.asarray(K_ref, dtype=np.float64)
    if Q_f.ndim != 2 or K_ref.ndim != 2:
        raise ValueError("Q_f and K_ref must be 2-D (N, d) arrays")
    if Q_f.shape[1] != K_ref.shape[1]:
        raise ValueError(
            f"channel mismatch: Q has d={Q_f.shape[1]}, K has d={K_ref.shape[1]}"
        )
    _require_finite("Q_f", Q_f)
    _require_finite("K_ref", K_ref)
    S = Q_f @ K_ref.T
    if scale:
        S = S / math.sqrt(Q_f.shape[1])
    return _softmax_rows(S) * _softmax_rows(S.T).T


def confidence_mask(C_dual: np.ndarray, q: float) -> ConfidenceMask:
    """Threshold per-token mean confidence at its lower empirical q-quantile.

    A token passes only when its confidence strictly exceeds the threshold;
    q=0 keeps every token.
    """
    if not 0.0 <= q <= 1.0:
        raise ValueError(f"quantile q must be in [0, 1], got {q}")
    C_dual = np.asarray(C_dual, dtype=np.float64)
    _require_finite("C_dual", C_dual)
    conf = C_dual.mean(axis=1)
    n = conf.shape[0]
    idx = min(max(math.ceil(q * n) - 1, 0), n - 1)
    phi = float(np.sort(conf)[idx])
    if q == 0.0:
        mask = np.ones(n, dtype=bool)
    else:
        mask = conf > phi
    return ConfidenceMask(mask=mask, phi=phi)


def filtered_value_map(
    Q_f: np.ndarray,
    K_f: np.ndarray,
    V_f: np.ndarray,
    K_ref: np.ndarray,
    V_ref: np.ndarray,
    mask: np.ndarray,
) -> np.ndarray:
    """Blend: masked-in tokens take the mapped attention, the rest keep their own."""
    mask = np.asarray(mask)
    if mask.ndim != 1 or mask.shape[0] != Q_f.shape[0]:
        raise ValueError(
            f"mask must have one entry per query token ({Q_f.shape[0]}), got {mask.shape}"
        )
    mapped = value_map(Q_f, K_ref, V_ref)
    own = scaled_attention(Q_f, K_f, V_f)
    return np.where(mask.astype(bool)[:, None], mapped, own)


def cross_frame_attention(
    qkv: FrameQKV, config: CrossFrameConfig, t_prime: int | None = None
) -> np.ndarray:
    """Dispatch one attention step for all frames under the configured mode.

    per_frame      every frame attends to itself
    first_frame    every frame attends to frame 1's keys/values
    sparse_causal  frame f attends to frames {1, f-1} concatenated
    rvm            every frame attends to the rotating reference frame
    rvm_dsf        rvm, but low-confidence tokens keep their own attention
    """
    F = qkv.num_frames
    mode = config.mode
    if mode in ("rvm", "rvm_dsf") and t_prime is None:
        raise ValueError(f"mode {mode!r} requires t_prime")

    if mode == "per_frame":
        return np.stack([scaled_attention(qkv.Q[f], qkv.K[f], qkv.V[f]) for f in range(F)])

    if mode == "first_frame":
        return np.stack([value_map(qkv.Q[f], qkv.K[0], qkv.V[0]) for f in range(F)])

    if mode == "sparse_causal":
        out = []
        for f in range(F):
            refs = [0] if f <= 1 else [0, f - 1]
            K_cat = np.concatenate([qkv.K[r] for r in refs], axis=0)
            V_cat = np.concatenate([qkv.V[r] for r in refs], axis=0)
            out.append(scaled_attention(qkv.Q[f], K_cat, V_cat))
        return np.stack(out)

    ref = rotational_reference(t_prime, config.m, F) - 1
    if mode == "rvm":
        return np.stack([value_map(qkv.Q[f], qkv.K[ref], qkv.V[ref]) for f in range(F)])

    # rvm_dsf
    out = []
    for f in range(F):
        C = dual_softmax(qkv.Q[f], qkv.K[ref], scale=config.scale_dual_softmax)
        mask = confidence_mask(C, config.q).mask
        out.append(
            filtered_value_map(qkv.Q[f], qkv.K[f], qkv.V[f], qkv.K[ref], qkv.V[ref], mask)
        )
    return np.stack(out)
