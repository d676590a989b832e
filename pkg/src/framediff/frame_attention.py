"""Frame-structured attention: layouts, causal mask variants, KV cache.

A video sequence interleaves two copies of each frame: the clean context
copy c_i and the diffused copy n_i. Admissibility between tokens depends
only on the (frame index, copy kind) of query and key:

  * a noisy query n_i attends every earlier clean frame c_j (j < i) and
    its own frame's noisy tokens -- never its own clean copy, which would
    leak the target, and never another noisy frame;
  * a clean query c_i attends clean frames c_j with j <= i under the
    "of" variant, or only its own frame under the lightweight "of2"
    variant, which drops cross-frame attention among clean frames;
  * clean queries never attend noisy keys.

The same predicate drives mask construction, the closed-form frame-pair
counts, and the instrumented FLOP counter, so the complexity claims can
be checked exactly against enumeration.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import CapacityError, FrameOrderError, ShapeError
from .tensor import Tensor

CLEAN = "clean"
NOISY = "noisy"


class MaskVariant(enum.Enum):
    """Causal attention variant tag.

    OF keeps full causal attention among clean frames; OF2 removes the
    cross-frame scores between clean frames (each clean frame then only
    self-attends), which is what makes incremental inference linear in
    the frame count without recomputing context features.
    """

    OF = "of"
    OF2 = "of2"


def admits(
    variant: MaskVariant,
    q_frame: int,
    q_kind: str,
    k_frame: int,
    k_kind: str,
    drop_context: bool = False,
) -> bool:
    """Single source of truth for frame-level admissibility.

    `drop_context` removes all noisy->clean edges (the unconditional
    branch used for classifier-free guidance).
    """
    if q_kind == NOISY:
        if k_kind == NOISY:
            return k_frame == q_frame
        if drop_context:
            return False
        return k_frame < q_frame
    # clean query
    if k_kind == NOISY:
        return False
    if variant == MaskVariant.OF:
        return k_frame <= q_frame
    return k_frame == q_frame


@dataclass(frozen=True)
class FrameLayout:
    """Describes a token sequence as per-frame slots of P tokens each.

    `slots` lists (frame_index, kind) in sequence order; token index
    maps bijectively to (slot, intra-frame offset) via slot*P + offset.
    """

    slots: tuple[tuple[int, str], ...]
    tokens_per_frame: int

    def __post_init__(self):
        if self.tokens_per_frame < 1:
            raise ShapeError("tokens_per_frame must be >= 1")
        if not self.slots:
            raise ShapeError("layout needs at least one slot")

    @staticmethod
    def training(frames: int, tokens_per_frame: int) -> "FrameLayout":
        """Interleaved [c1, n1, c2, n2, ...] sequence of length 2*F*P."""
        slots = []
        for i in range(1, frames + 1):
            slots.append((i, CLEAN))
            slots.append((i, NOISY))
        return FrameLayout(tuple(slots), tokens_per_frame)

    @staticmethod
    def inference(frame: int, tokens_per_frame: int) -> "FrameLayout":
        """[c1 ... c_{i-1}, n_i] used when denoising frame i."""
        slots = [(j, CLEAN) for j in range(1, frame)]
        slots.append((frame, NOISY))
        return FrameLayout(tuple(slots), tokens_per_frame)

    @staticmethod
    def clean_prefix(frames: int, tokens_per_frame: int) -> "FrameLayout":
        """[c1 ... cF], the context-encoding / feature-extraction sequence."""
        return FrameLayout(
            tuple((j, CLEAN) for j in range(1, frames + 1)), tokens_per_frame
        )

    @property
    def length(self) -> int:
        return len(self.slots) * self.tokens_per_frame

    @property
    def frames(self) -> int:
        return max(f for f, _ in self.slots)

    def token_info(self, token: int) -> tuple[int, str, int]:
        """(frame index, kind, intra-frame offset) for a token index."""
        if not 0 <= token < self.length:
            raise ShapeError(f"token {token} outside sequence of {self.length}")
        slot, offset = divmod(token, self.tokens_per_frame)
        frame, kind = self.slots[slot]
        return frame, kind, offset

    def token_indices(self, kind: str) -> np.ndarray:
        """All token indices whose slot has the given kind, in order."""
        out = []
        for s, (_, k) in enumerate(self.slots):
            if k == kind:
                start = s * self.tokens_per_frame
                out.extend(range(start, start + self.tokens_per_frame))
        return np.asarray(out, dtype=np.intp)


@dataclass(frozen=True)
class AttentionMask:
    """Boolean query x key admissibility plus the layouts that built it.

    Admissibility is constant within each (query slot, key slot) block,
    which is what lets the FLOP counter read block structure directly
    off the matrix.
    """

    q_slots: tuple[tuple[int, str], ...]
    k_slots: tuple[tuple[int, str], ...]
    tokens_per_frame: int
    variant: MaskVariant
    admissible: np.ndarray = field(repr=False)

    def pair_count(self) -> int:
        """Number of admissible (query slot, key slot) blocks, read off the
        mask itself (block corners), not recomputed from the rules."""
        P = self.tokens_per_frame
        corners = self.admissible[::P, ::P]
        return int(corners.sum())


def build_cross_mask(
    q_slots,
    k_slots,
    tokens_per_frame: int,
    variant: MaskVariant,
    drop_context: bool = False,
) -> AttentionMask:
    """Admissibility matrix for arbitrary query and key slot lists."""
    q_slots = tuple(q_slots)
    k_slots = tuple(k_slots)
    P = tokens_per_frame
    block = np.zeros((len(q_slots), len(k_slots)), dtype=bool)
    for qi, (qf, qk) in enumerate(q_slots):
        for ki, (kf, kk) in enumerate(k_slots):
            block[qi, ki] = admits(variant, qf, qk, kf, kk, drop_context)
    admissible = np.repeat(np.repeat(block, P, axis=0), P, axis=1)
    if not admissible.any(axis=1).all():
        raise ShapeError("mask has a query row with no admissible key")
    return AttentionMask(q_slots, k_slots, P, variant, admissible)


def build_mask(
    layout: FrameLayout, variant: MaskVariant, drop_context: bool = False
) -> AttentionMask:
    """Square admissibility mask for a full sequence layout."""
    return build_cross_mask(
        layout.slots, layout.slots, layout.tokens_per_frame, variant, drop_context
    )


@dataclass(frozen=True)
class FramePairCounts:
    """Admissible frame-pair blocks split by interaction type."""

    clean_clean: int
    noisy_clean: int
    noisy_self: int

    @property
    def total(self) -> int:
        return self.clean_clean + self.noisy_clean + self.noisy_self


def frame_pair_count(variant: MaskVariant, frames: int) -> FramePairCounts:
    """Closed-form frame-pair counts for a training layout of F frames.

    OF: (F(F+1)/2, F(F-1)/2, F), total F^2 + F.
    OF2: (F, F(F-1)/2, F), total F(F+3)/2.
    The OF2/OF total ratio falls monotonically toward 1/2 as F grows.
    """
    if frames < 1:
        raise ShapeError(f"frames must be >= 1, got {frames}")
    F = frames
    noisy_clean = F * (F - 1) // 2
    if variant == MaskVariant.OF:
        clean_clean = F * (F + 1) // 2
    else:
        clean_clean = F
    return FramePairCounts(clean_clean, noisy_clean, F)


class FlopCounter:
    """Accumulates attention multiply-adds over admissible blocks only.

    Each admissible (query frame, key frame) block costs 2 * P^2 * d_h
    multiply-adds per head (the QK^T scores plus the AV mix).
    """

    def __init__(self):
        self.attention_macs = 0

    def add_attention(self, pairs: int, heads: int, tokens_per_frame: int, head_dim: int, batch: int = 1):
        self.attention_macs += 2 * pairs * heads * tokens_per_frame**2 * head_dim * batch

    def reset(self):
        self.attention_macs = 0


def attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    mask: AttentionMask | np.ndarray,
    counter: FlopCounter | None = None,
) -> Tensor:
    """Masked scaled dot-product attention over heads.

    q, k, v have shape [..., heads, L, d_h]; the mask broadcasts over the
    leading axes. Disallowed logits are excluded exactly (zero weight),
    and the FLOP counter is advanced only for admissible frame pairs.
    """
    if q.shape[-1] != k.shape[-1] or k.shape[:-3] != v.shape[:-3] or k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"attention shapes inconsistent: q={q.shape} k={k.shape} v={v.shape}")
    head_dim = q.shape[-1]
    if isinstance(mask, AttentionMask):
        admissible = mask.admissible
        if counter is not None:
            batch = int(np.prod(q.shape[:-3], dtype=np.int64)) if q.ndim > 3 else 1
            counter.add_attention(
                mask.pair_count(), q.shape[-3], mask.tokens_per_frame, head_dim, batch
            )
    else:
        admissible = np.asarray(mask, dtype=bool)
    if admissible.shape[-2:] != (q.shape[-2], k.shape[-2]):
        raise ShapeError(
            f"mask {admissible.shape} does not match q rows {q.shape[-2]} x k rows {k.shape[-2]}"
        )
    # scale q (small) rather than the L x L logits; python-float scale keeps dtype
    logits = T.matmul(T.scale(q, 1.0 / math.sqrt(head_dim)), _swap_last(k))
    probs = T.masked_softmax(logits, admissible)
    return T.matmul(probs, v)


def _swap_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return T.transpose(x, axes)


class KVCache:
    """Append-only per-layer, per-head store of clean-frame key/value rows.

    Rows are preallocated up to `capacity_frames`; appends must come in
    strictly increasing frame order with exactly P rows per layer/head.
    """

    def __init__(self, layers: int, heads: int, tokens_per_frame: int, head_dim: int,
                 capacity_frames: int, dtype=np.float32):
        self.layers = layers
        self.heads = heads
        self.tokens_per_frame = tokens_per_frame
        self.head_dim = head_dim
        self.capacity_frames = capacity_frames
        cap_rows = capacity_frames * tokens_per_frame
        self._k = np.zeros((layers, heads, cap_rows, head_dim), dtype=dtype)
        self._v = np.zeros((layers, heads, cap_rows, head_dim), dtype=dtype)
        self.frames: list[int] = []

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def rows(self) -> int:
        return len(self.frames) * self.tokens_per_frame

    def append(self, frame_index: int, k_rows: list[np.ndarray], v_rows: list[np.ndarray]) -> None:
        """Add one clean frame's projected keys/values for every layer."""
        if self.frames and frame_index <= self.frames[-1]:
            raise FrameOrderError(
                f"frame {frame_index} appended after frame {self.frames[-1]}"
            )
        if len(self.frames) >= self.capacity_frames:
            raise CapacityError(f"cache full at {self.capacity_frames} frames")
        if len(k_rows) != self.layers or len(v_rows) != self.layers:
            raise ShapeError(f"need rows for {self.layers} layers")
        want = (self.heads, self.tokens_per_frame, self.head_dim)
        for arr in (*k_rows, *v_rows):
            if arr.shape != want:
                raise ShapeError(f"cache rows {arr.shape}, expected {want}")
        lo = self.rows
        hi = lo + self.tokens_per_frame
        for layer in range(self.layers):
            self._k[layer, :, lo:hi] = k_rows[layer]
            self._v[layer, :, lo:hi] = v_rows[layer]
        self.frames.append(frame_index)

    def keys(self, layer: int) -> np.ndarray:
        return self._k[layer, :, : self.rows]

    def values(self, layer: int) -> np.ndarray:
        return self._v[layer, :, : self.rows]

    @property
    def memory_floats(self) -> int:
        """Stored floats: 2 (k and v) per layer, head, cached row."""
        return 2 * self.layers * self.heads * self.rows * self.head_dim

    @property
    def memory_bytes(self) -> int:
        return self.memory_floats * self._k.dtype.itemsize
