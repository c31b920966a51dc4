"""Contractive compression operators and the error-feedback state machine.

A compressor maps a dense matrix to a cheaper-to-transmit matrix of the same
shape while satisfying E||C(v) - v||^2 <= (1 - alpha) ||v||^2 for a known
contraction factor alpha in (0, 1].  Error feedback keeps a surrogate G that
tracks a moving target by accumulating compressed deltas.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class NonFiniteInput(ValueError):
    pass


class InvalidCompressorSpec(ValueError):
    pass


class ShapeMismatch(ValueError):
    pass


class BatchIndexOutOfRange(IndexError):
    pass


@dataclass(frozen=True)
class CompressorSpec:
    """What to apply to each transmitted delta.

    kind: "identity", "topk" (fraction of entries kept) or "qsgd" (bits per
    entry).  For topk the fraction is resolved to an entry count k against the
    flattened size of whatever submatrix the row selector picked.
    """

    kind: str = "identity"
    fraction: float | None = None  # topk
    bits: int | None = None  # qsgd

    def __post_init__(self):
        if self.kind not in ("identity", "topk", "qsgd"):
            raise InvalidCompressorSpec(f"unknown compressor kind {self.kind!r}")
        if self.kind == "topk":
            if self.fraction is None or not (0.0 < self.fraction <= 1.0):
                raise InvalidCompressorSpec("topk fraction must be in (0, 1]")
        if self.kind == "qsgd":
            if self.bits is None or self.bits < 1:
                raise InvalidCompressorSpec("qsgd bits must be >= 1")

    @property
    def levels(self) -> int:
        assert self.kind == "qsgd"
        return 2 ** self.bits

    def resolve_k(self, d: int) -> int:
        """Entry count kept by topk on a flattened input of length d."""
        assert self.kind == "topk"
        k = max(1, int(round(self.fraction * d)))
        if k > d:
            raise InvalidCompressorSpec(f"topk k={k} exceeds input size d={d}")
        return k

    @staticmethod
    def parse(text: str) -> "CompressorSpec":
        """Parse the config grammar: "identity", "topk:0.10", "qsgd:4"."""
        text = text.strip().strip('"').strip("'")
        if text == "identity":
            return CompressorSpec("identity")
        if ":" in text:
            head, _, arg = text.partition(":")
            if head == "topk":
                return CompressorSpec("topk", fraction=float(arg))
            if head == "qsgd":
                return CompressorSpec("qsgd", bits=int(arg))
        raise InvalidCompressorSpec(f"cannot parse compressor spec {text!r}")

    def __str__(self):
        if self.kind == "topk":
            return f"topk:{self.fraction:g}"
        if self.kind == "qsgd":
            return f"qsgd:{self.bits}"
        return "identity"


def _qsgd_tau(d: int, s: int) -> float:
    return 1.0 + min(d / s**2, math.sqrt(d) / s)


def alpha(spec: CompressorSpec, d: int) -> float:
    """Contraction factor of `spec` applied to a flattened input of length d.

    topk -> k/d, qsgd -> 1/tau with tau = 1 + min(d/s^2, sqrt(d)/s),
    identity -> 1.  For a batch-composed application pass the selected
    submatrix's entry count as d; no claim is made about the contraction of
    the composition as a whole.
    """
    if d < 1:
        raise InvalidCompressorSpec("d must be >= 1")
    if spec.kind == "identity":
        return 1.0
    if spec.kind == "topk":
        return spec.resolve_k(d) / d
    return 1.0 / _qsgd_tau(d, spec.levels)


def _topk_mask_flat(flat_abs: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest-magnitude entries, lowest flat index on ties."""
    d = flat_abs.size
    if k >= d:
        return np.arange(d)
    # argpartition gives *some* k largest set; rebuild deterministically around
    # the threshold value so equal-magnitude ties keep the lowest flat index.
    part = np.argpartition(flat_abs, d - k)[d - k:]
    thr = flat_abs[part].min()
    above = np.flatnonzero(flat_abs > thr)
    ties = np.flatnonzero(flat_abs == thr)[: k - above.size]
    return np.concatenate([above, ties])


def compress(spec: CompressorSpec, v: np.ndarray, rng: np.random.Generator | None = None) -> np.ndarray:
    """Apply the compressor to v, returning a same-shape array.

    Args:
      spec: compressor description.
      v: finite dense matrix or vector.
      rng: per-call RNG state; required for qsgd, ignored otherwise.

    Raises:
      NonFiniteInput: if v contains nan/inf.
      InvalidCompressorSpec: if topk's resolved k is out of range.
    """
    v = np.asarray(v, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise NonFiniteInput("compressor input must be finite")
    if spec.kind == "identity":
        return v.copy()
    if spec.kind == "topk":
        flat = v.ravel()
        keep = _topk_mask_flat(np.abs(flat), spec.resolve_k(flat.size))
        out = np.zeros_like(flat)
        out[keep] = flat[keep]
        return out.reshape(v.shape)
    # qsgd
    if rng is None:
        raise InvalidCompressorSpec("qsgd requires an rng stream")
    norm = float(np.linalg.norm(v))
    if norm == 0.0:
        return np.zeros_like(v)
    s = spec.levels
    tau = _qsgd_tau(v.size, s)
    xi = rng.random(v.shape)
    levels = np.floor(s * np.abs(v) / norm + xi)
    return (norm * np.sign(v) / (s * tau)) * levels


@dataclass
class EfState:
    """Error-feedback surrogate for one transmitted block.

    surrogate holds the receiver-side estimate G (N x E); every replica of it
    must stay bit-identical, which holds because updates are pure functions of
    the broadcast delta.
    """

    surrogate: np.ndarray
    step: int = 0


def apply_feedback(
    state: EfState,
    fresh: np.ndarray,
    spec: CompressorSpec,
    rng: np.random.Generator | None = None,
    rows: np.ndarray | None = None,
) -> np.ndarray:
    """One error-feedback update on the selected rows of the surrogate.

    Computes the round's message, mutates state in place (single writer per
    round), and returns the message so callers can replay it onto every other
    replica with apply_message.  With `rows`, the update touches only that
    batch of rows and `fresh` holds just those rows' new values (batch-sized,
    matching what a client actually evaluates); without it, `fresh` is the
    full matrix.

    The message is C(fresh - G).  Under the identity compressor C(fresh - G)
    carries the same information as fresh itself, so the implementation
    transmits the fresh rows (same payload size) and assigns them; this keeps
    the surrogate tracking the true value with zero floating-point drift.
    """
    if rows is None:
        sub_fresh, sub_g = fresh, state.surrogate
    else:
        rows = np.asarray(rows)
        if rows.size and (rows.min() < 0 or rows.max() >= state.surrogate.shape[0]):
            raise BatchIndexOutOfRange("batch row index outside surrogate")
        sub_fresh, sub_g = fresh, state.surrogate[rows]
    if sub_fresh.shape != sub_g.shape:
        raise ShapeMismatch(f"fresh {sub_fresh.shape} vs surrogate {sub_g.shape}")
    if spec.kind == "identity":
        message = sub_fresh.copy()
    else:
        message = compress(spec, sub_fresh - sub_g, rng)
    apply_message(state, message, spec, rows)
    return message


def apply_message(
    state: EfState,
    message: np.ndarray,
    spec: CompressorSpec,
    rows: np.ndarray | None = None,
) -> None:
    """Replay a received error-feedback message onto a replica."""
    if spec.kind == "identity":
        if rows is None:
            state.surrogate = message.copy()
        else:
            state.surrogate[rows] = message
    else:
        if rows is None:
            state.surrogate = state.surrogate + message
        else:
            state.surrogate[rows] = state.surrogate[rows] + message
    state.step += 1


def compose_with_batch(inner: CompressorSpec, batch: np.ndarray):
    """Row-restricted compressor: `inner` applies to the batch's rows only.

    The returned operator maps a full matrix to the transmitted object for a
    batch-sized message: inner-compressed batch rows, zeros elsewhere.
    Receivers add it for error-feedback deltas (rows outside the batch stay
    untouched) or substitute its batch rows for direct compression.  With
    batch = all rows it degenerates to the inner compressor.
    """
    batch = np.asarray(batch)
    if batch.size and batch.min() < 0:
        raise BatchIndexOutOfRange("negative batch row index")

    def operator(v: np.ndarray, rng: np.random.Generator | None = None) -> np.ndarray:
        v = np.asarray(v, dtype=np.float64)
        if batch.size and batch.max() >= v.shape[0]:
            raise BatchIndexOutOfRange("batch row index outside matrix")
        out = np.zeros_like(v)
        out[batch] = compress(inner, v[batch], rng)
        return out

    return operator


def payload_bits(spec: CompressorSpec, d: int) -> int:
    """Size model of one transmitted tensor with d (selected) entries.

    identity: 32 bits per entry.  topk: value + index per kept entry,
    k * (32 + ceil(log2 d)).  qsgd: a 32-bit norm header plus (bits + 1 sign)
    bits per entry.  No entropy coding.
    """
    if d < 1:
        raise InvalidCompressorSpec("d must be >= 1")
    if spec.kind == "identity":
        return 32 * d
    if spec.kind == "topk":
        return spec.resolve_k(d) * (32 + math.ceil(math.log2(d)))
    return 32 + d * (spec.bits + 1)
