"""Frame-causal diffusion transformer with rotation time conditioning.

Each video frame enters the sequence twice: a clean context copy and a
diffused copy that shares one diffusion time with every other noisy frame
in the sequence. Blocks are pre-norm residual (norm -> masked attention,
norm -> MLP). Time is injected without parameters: at every block input
the noisy tokens' channel pairs are rotated back by the schedule angle,
so the conditioning adds no weights and no FLOPs beyond the rotation
itself. Clean tokens carry no diffusion time and pass through unrotated.

The output head is a zero-initialized linear map to patch pixels, so a
fresh model predicts exactly zero everywhere.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import FormatError, GeometryError, ShapeError
from .frame_attention import (
    CLEAN,
    NOISY,
    AttentionMask,
    FlopCounter,
    FrameLayout,
    KVCache,
    MaskVariant,
    attention,
    build_cross_mask,
    build_mask,
)
from .rng import substream
from .schedule import Parameterization, theta_of
from .tensor import Tensor

CHECKPOINT_MAGIC = b"FDCK"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    layers: int
    hidden: int
    mlp: int
    heads: int
    patch: int
    channels: int
    height: int
    width: int
    variant: MaskVariant = MaskVariant.OF
    param: Parameterization = Parameterization.COMPANION
    rotate_at: str = "block_input"  # recorded so conditioning placement stays comparable

    def __post_init__(self):
        if self.hidden % self.heads != 0:
            raise GeometryError(f"hidden {self.hidden} not divisible by heads {self.heads}")
        if self.hidden % 2 != 0:
            raise GeometryError(f"hidden {self.hidden} must be even for channel-pair rotation")
        if self.height % self.patch != 0 or self.width % self.patch != 0:
            raise GeometryError(
                f"frame {self.height}x{self.width} not divisible by patch {self.patch}"
            )
        for name in ("layers", "hidden", "mlp", "heads", "patch", "channels"):
            if getattr(self, name) < (0 if name == "layers" else 1):
                raise GeometryError(f"{name} must be positive")

    @property
    def tokens_per_frame(self) -> int:
        return (self.height // self.patch) * (self.width // self.patch)

    @property
    def token_dim(self) -> int:
        return self.channels * self.patch * self.patch

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in (
            "layers", "hidden", "mlp", "heads", "patch", "channels", "height", "width", "rotate_at"
        )}
        d["variant"] = self.variant.value
        d["param"] = self.param.value
        return d

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        d = dict(d)
        d["variant"] = MaskVariant(d.get("variant", "of"))
        d["param"] = Parameterization(d.get("param", "companion"))
        return ModelConfig(**d)


# -- patch rearrangement -------------------------------------------------------


def patchify(frame: np.ndarray, patch: int) -> np.ndarray:
    """(C, H, W) -> (P, C*patch^2) tokens, row-major within each patch."""
    c, h, w = frame.shape
    if h % patch or w % patch:
        raise GeometryError(f"frame {h}x{w} not divisible by patch {patch}")
    hp, wp = h // patch, w // patch
    x = frame.reshape(c, hp, patch, wp, patch)
    x = x.transpose(1, 3, 0, 2, 4)  # (hp, wp, c, patch, patch)
    return np.ascontiguousarray(x.reshape(hp * wp, c * patch * patch))


def unpatchify(tokens: np.ndarray, patch: int, channels: int, height: int, width: int) -> np.ndarray:
    """Exact inverse of patchify."""
    hp, wp = height // patch, width // patch
    if tokens.shape != (hp * wp, channels * patch * patch):
        raise GeometryError(f"tokens {tokens.shape} do not match geometry")
    x = tokens.reshape(hp, wp, channels, patch, patch)
    x = x.transpose(2, 0, 3, 1, 4)
    return np.ascontiguousarray(x.reshape(channels, height, width))


def patchify_frames(frames: np.ndarray, patch: int) -> np.ndarray:
    """(..., C, H, W) -> (..., P, C*patch^2) over any leading axes."""
    lead = frames.shape[:-3]
    c, h, w = frames.shape[-3:]
    hp, wp = h // patch, w // patch
    x = frames.reshape(*lead, c, hp, patch, wp, patch)
    order = tuple(range(len(lead))) + tuple(len(lead) + i for i in (1, 3, 0, 2, 4))
    x = x.transpose(order)
    return np.ascontiguousarray(x.reshape(*lead, hp * wp, c * patch * patch))


# -- positional encodings --------------------------------------------------------


def sinusoid_table(positions: np.ndarray, dim: int) -> np.ndarray:
    """Fixed sin/cos table; works for any (possibly unseen) position index."""
    pos = np.asarray(positions, dtype=np.float64)[:, None]
    half = dim // 2
    freq = np.exp(-math.log(10000.0) * np.arange(half, dtype=np.float64) / half)
    table = np.zeros((pos.shape[0], dim))
    table[:, 0::2] = np.sin(pos * freq)
    table[:, 1::2] = np.cos(pos * freq)
    return table


def rotate_condition(h: Tensor, t: float, layout: FrameLayout) -> Tensor:
    """Parameter-free time conditioning for one sequence of hidden states.

    Channel pairs (2k, 2k+1) of every noisy-frame token are rotated back
    by the schedule angle of t; clean-frame tokens pass through unchanged
    (their angle is 0). h has shape (..., L, hidden) with L matching the
    layout.
    """
    if h.shape[-1] % 2 != 0:
        raise ShapeError(f"hidden width must be even, got {h.shape[-1]}")
    if h.shape[-2] != layout.length:
        raise ShapeError(f"{h.shape[-2]} rows vs layout length {layout.length}")
    thetas = np.zeros(layout.length)
    thetas[layout.token_indices(NOISY)] = theta_of(t)
    cos = np.cos(thetas).astype(h.dtype)[:, None]
    sin = np.sin(thetas).astype(h.dtype)[:, None]
    return T.rotate_pairs(h, cos, sin)


# -- parameter counting ----------------------------------------------------------


def block_core_param_count(config: ModelConfig) -> int:
    """Weight matrices of attention (q,k,v,o) and the MLP, biases excluded."""
    h, m = config.hidden, config.mlp
    return config.layers * (4 * h * h + 2 * h * m)


def param_breakdown(config: ModelConfig) -> dict[str, int]:
    h, m, d = config.hidden, config.mlp, config.token_dim
    return {
        "block_core": block_core_param_count(config),
        "block_biases": config.layers * (4 * h + m + h),
        "block_norms": config.layers * 4 * h,
        "patch_embed": d * h + h,
        "head": h * d + d,
    }


def param_count(config: ModelConfig) -> int:
    """Exact number of scalar parameters a model of this config holds."""
    return sum(param_breakdown(config).values())


# -- the model ---------------------------------------------------------------------


class FrameDiT:
    """Masked-attention transformer over interleaved clean/noisy frames."""

    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype).type
        self.params: dict[str, Tensor] = {}
        rng = substream(seed, "init")
        h, m, d = config.hidden, config.mlp, config.token_dim

        def normal(name, shape, std=0.02):
            self.params[name] = Tensor(
                rng.normal(0.0, std, size=shape).astype(self.dtype), requires_grad=True
            )

        def const(name, shape, value):
            self.params[name] = Tensor(
                np.full(shape, value, dtype=self.dtype), requires_grad=True
            )

        normal("patch_embed.w", (d, h))
        const("patch_embed.b", (h,), 0.0)
        for i in range(config.layers):
            p = f"block{i}"
            for mat in ("wq", "wk", "wv", "wo"):
                normal(f"{p}.attn.{mat}", (h, h))
            for vec in ("bq", "bk", "bv", "bo"):
                const(f"{p}.attn.{vec}", (h,), 0.0)
            normal(f"{p}.mlp.w1", (h, m))
            const(f"{p}.mlp.b1", (m,), 0.0)
            normal(f"{p}.mlp.w2", (m, h))
            const(f"{p}.mlp.b2", (h,), 0.0)
            const(f"{p}.ln1.g", (h,), 1.0)
            const(f"{p}.ln1.b", (h,), 0.0)
            const(f"{p}.ln2.g", (h,), 1.0)
            const(f"{p}.ln2.b", (h,), 0.0)
        const("head.w", (h, d), 0.0)  # zero head: fresh model predicts 0
        const("head.b", (d,), 0.0)

        self._spatial_pos = sinusoid_table(
            np.arange(config.tokens_per_frame), h
        ).astype(self.dtype)

    # -- bookkeeping ---------------------------------------------------------

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def param_digest(self) -> str:
        digest = hashlib.sha256()
        for name, p in self.params.items():
            digest.update(name.encode())
            digest.update(str(p.shape).encode())
            digest.update(np.ascontiguousarray(p.data.astype(np.float32)).tobytes())
        return digest.hexdigest()

    def astype(self, dtype) -> "FrameDiT":
        """Same parameters cast to another float width."""
        out = FrameDiT.__new__(FrameDiT)
        out.config = self.config
        out.dtype = np.dtype(dtype).type
        out.params = {
            name: Tensor(p.data.astype(out.dtype), requires_grad=p.requires_grad)
            for name, p in self.params.items()
        }
        out._spatial_pos = self._spatial_pos.astype(out.dtype)
        return out

    # -- sequence machinery ----------------------------------------------------

    def _positions(self, layout: FrameLayout) -> np.ndarray:
        """(L, hidden) positional table: spatial offset + frame index.

        Both copies of a frame share the frame index, so positions stay
        aligned between the clean and noisy views.
        """
        frames = np.array([f for f, _ in layout.slots]) - 1
        temporal = sinusoid_table(frames, self.config.hidden).astype(self.dtype)
        pos = np.repeat(temporal, layout.tokens_per_frame, axis=0)
        pos += np.tile(self._spatial_pos, (len(layout.slots), 1))
        return pos

    def _forward_sequence(
        self,
        tokens: np.ndarray,
        thetas: np.ndarray | None,
        mask: AttentionMask,
        counter: FlopCounter | None = None,
        collect_features: bool = False,
        head_rows: np.ndarray | None = None,
        positions: np.ndarray | None = None,
    ):
        """Run (B, L, token_dim) tokens through the stack.

        `thetas` is a per-token rotation angle (0 for clean tokens) of
        shape (B, L); None skips the rotation entirely (feature path).
        Returns (head output Tensor, list of pooled per-layer features).
        """
        cfg = self.config
        B, L, _ = tokens.shape
        if thetas is not None:
            cos = np.cos(thetas, dtype=np.float64).astype(self.dtype)[..., None]
            sin = np.sin(thetas, dtype=np.float64).astype(self.dtype)[..., None]
        x = Tensor(tokens.astype(self.dtype))
        h = T.matmul(x, self.params["patch_embed.w"]) + self.params["patch_embed.b"]
        if positions is not None:
            h = h + Tensor(positions)
        features: list[np.ndarray] = []
        for i in range(cfg.layers):
            p = f"block{i}"
            if thetas is not None:
                h = T.rotate_pairs(h, cos, sin)
            a = T.layer_norm(h, self.params[f"{p}.ln1.g"], self.params[f"{p}.ln1.b"])
            q = self._heads(T.matmul(a, self.params[f"{p}.attn.wq"]) + self.params[f"{p}.attn.bq"], B, L)
            k = self._heads(T.matmul(a, self.params[f"{p}.attn.wk"]) + self.params[f"{p}.attn.bk"], B, L)
            v = self._heads(T.matmul(a, self.params[f"{p}.attn.wv"]) + self.params[f"{p}.attn.bv"], B, L)
            att = attention(q, k, v, mask, counter)
            att = T.reshape(T.transpose(att, (0, 2, 1, 3)), (B, L, cfg.hidden))
            h = h + (T.matmul(att, self.params[f"{p}.attn.wo"]) + self.params[f"{p}.attn.bo"])
            n = T.layer_norm(h, self.params[f"{p}.ln2.g"], self.params[f"{p}.ln2.b"])
            mid = T.gelu(T.matmul(n, self.params[f"{p}.mlp.w1"]) + self.params[f"{p}.mlp.b1"])
            h = h + (T.matmul(mid, self.params[f"{p}.mlp.w2"]) + self.params[f"{p}.mlp.b2"])
            if collect_features:
                features.append(h.data.mean(axis=1).copy())
        out = T.matmul(h, self.params["head.w"]) + self.params["head.b"]
        if head_rows is not None:
            out = T.take_rows(out, head_rows)
        return out, features

    def _heads(self, x: Tensor, B: int, L: int) -> Tensor:
        cfg = self.config
        return T.transpose(T.reshape(x, (B, L, cfg.heads, cfg.head_dim)), (0, 2, 1, 3))

    # -- training-mode forward ---------------------------------------------------

    def forward_train(
        self,
        clean: np.ndarray,
        noisy: np.ndarray,
        t: np.ndarray,
        drop_context: bool = False,
        counter: FlopCounter | None = None,
        return_features: bool = False,
    ):
        """Predictions for every noisy token of interleaved sequences.

        clean, noisy: (B, F, C, H, W); t: (B,) shared per sequence. Returns
        a (B, F*P, token_dim) Tensor (plus pooled per-layer features when
        requested).
        """
        cfg = self.config
        if clean.shape != noisy.shape:
            raise ShapeError(f"clean {clean.shape} vs noisy {noisy.shape}")
        B, F = clean.shape[:2]
        self._check_geometry(clean.shape[2:])
        layout = FrameLayout.training(F, cfg.tokens_per_frame)
        clean_idx = layout.token_indices(CLEAN)
        noisy_idx = layout.token_indices(NOISY)

        tokens = np.empty((B, layout.length, cfg.token_dim), dtype=self.dtype)
        tokens[:, clean_idx] = patchify_frames(clean, cfg.patch).reshape(B, -1, cfg.token_dim)
        tokens[:, noisy_idx] = patchify_frames(noisy, cfg.patch).reshape(B, -1, cfg.token_dim)

        thetas = np.zeros((B, layout.length))
        thetas[:, noisy_idx] = np.array([theta_of(float(ti)) for ti in t])[:, None]

        mask = build_mask(layout, cfg.variant, drop_context)
        out, features = self._forward_sequence(
            tokens, thetas, mask, counter, return_features, noisy_idx, self._positions(layout)
        )
        if return_features:
            return out, features
        return out

    # -- feature extraction --------------------------------------------------------

    def clean_features(self, frames: np.ndarray, counter: FlopCounter | None = None) -> list[np.ndarray]:
        """Pooled per-layer hidden states of a clean-only pass.

        frames: (F, C, H, W) or (B, F, C, H, W). No rotation is applied
        (clean tokens carry no diffusion time). Returns one (B, hidden)
        array per layer.
        """
        if frames.ndim == 4:
            frames = frames[None]
        B, F = frames.shape[:2]
        self._check_geometry(frames.shape[2:])
        cfg = self.config
        layout = FrameLayout.clean_prefix(F, cfg.tokens_per_frame)
        tokens = patchify_frames(frames, cfg.patch).reshape(B, layout.length, cfg.token_dim)
        mask = build_mask(layout, cfg.variant)
        with T.no_grad():
            _, features = self._forward_sequence(
                tokens, None, mask, counter, True, None, self._positions(layout)
            )
        return features

    # -- inference: full recompute path ---------------------------------------------

    def predict_noisy_full(
        self,
        noisy_frame: np.ndarray,
        t: float,
        context: list[np.ndarray],
        drop_context: bool = False,
        counter: FlopCounter | None = None,
    ) -> np.ndarray:
        """Prediction for n_i computed from scratch on [c_1..c_{i-1}, n_i]."""
        cfg = self.config
        self._check_geometry(noisy_frame.shape)
        i = len(context) + 1
        layout = FrameLayout.inference(i, cfg.tokens_per_frame)
        frames = list(context) + [noisy_frame]
        tokens = np.stack([patchify(np.asarray(f, dtype=self.dtype), cfg.patch) for f in frames])
        tokens = tokens.reshape(1, layout.length, cfg.token_dim)
        thetas = np.zeros((1, layout.length))
        noisy_rows = layout.token_indices(NOISY)
        thetas[:, noisy_rows] = theta_of(t)
        mask = build_mask(layout, cfg.variant, drop_context)
        with T.no_grad():
            out, _ = self._forward_sequence(
                tokens, thetas, mask, counter, False, noisy_rows, self._positions(layout)
            )
        return unpatchify(
            out.data[0].astype(np.float64), cfg.patch, cfg.channels, cfg.height, cfg.width
        )

    # -- inference: incremental KV-cache path ------------------------------------------

    def new_cache(self, capacity_frames: int) -> KVCache:
        cfg = self.config
        return KVCache(
            cfg.layers, cfg.heads, cfg.tokens_per_frame, cfg.head_dim,
            capacity_frames, dtype=self.dtype,
        )

    def encode_frame(self, frame: np.ndarray, cache: KVCache, counter: FlopCounter | None = None) -> None:
        """Run one clean frame and append its per-layer keys/values.

        Under OF the frame attends every cached clean frame; under OF2 it
        only self-attends, so the cache contents never enter the scores.
        """
        cfg = self.config
        self._check_geometry(frame.shape)
        i = len(cache) + 1
        with T.no_grad():
            self._frame_pass(frame, None, i, cache, kind=CLEAN, counter=counter)

    def predict_noisy(
        self,
        noisy_frame: np.ndarray,
        t: float,
        frame_index: int,
        cache: KVCache,
        drop_context: bool = False,
        counter: FlopCounter | None = None,
    ) -> np.ndarray:
        """Prediction for n_i attending the cached clean context."""
        cfg = self.config
        self._check_geometry(noisy_frame.shape)
        if cache.frames != list(range(1, frame_index)):
            raise GeometryError(
                f"cache holds frames {cache.frames}, need 1..{frame_index - 1}"
            )
        with T.no_grad():
            out = self._frame_pass(
                noisy_frame, theta_of(t), frame_index, cache,
                kind=NOISY, drop_context=drop_context, counter=counter,
            )
        return unpatchify(
            out.astype(np.float64), cfg.patch, cfg.channels, cfg.height, cfg.width
        )

    def _frame_pass(self, frame, theta, frame_index, cache, kind, drop_context=False,
                    counter=None):
        """Single-frame incremental pass against the cache.

        For a clean frame the projected k/v of every layer are appended to
        the cache; for a noisy frame the head output tokens are returned.
        """
        cfg = self.config
        P = cfg.tokens_per_frame
        use_cache = len(cache) > 0 and not drop_context and not (
            kind == CLEAN and cfg.variant == MaskVariant.OF2
        )
        k_slots = tuple((j, CLEAN) for j in cache.frames) if use_cache else ()
        k_slots = k_slots + ((frame_index, kind),)
        mask = build_cross_mask(((frame_index, kind),), k_slots, P, cfg.variant, drop_context)

        tokens = patchify(np.asarray(frame, dtype=self.dtype), cfg.patch)[None]
        positions = (
            self._spatial_pos
            + sinusoid_table(np.array([frame_index - 1]), cfg.hidden).astype(self.dtype)
        )
        x = Tensor(tokens.astype(self.dtype))
        h = T.matmul(x, self.params["patch_embed.w"]) + self.params["patch_embed.b"]
        h = h + Tensor(positions)
        if theta is not None:
            cos = np.full((1, P, 1), math.cos(theta), dtype=self.dtype)
            sin = np.full((1, P, 1), math.sin(theta), dtype=self.dtype)
        k_new, v_new = [], []
        for i in range(cfg.layers):
            p = f"block{i}"
            if theta is not None:
                h = T.rotate_pairs(h, cos, sin)
            a = T.layer_norm(h, self.params[f"{p}.ln1.g"], self.params[f"{p}.ln1.b"])
            q = self._heads(T.matmul(a, self.params[f"{p}.attn.wq"]) + self.params[f"{p}.attn.bq"], 1, P)
            k = self._heads(T.matmul(a, self.params[f"{p}.attn.wk"]) + self.params[f"{p}.attn.bk"], 1, P)
            v = self._heads(T.matmul(a, self.params[f"{p}.attn.wv"]) + self.params[f"{p}.attn.bv"], 1, P)
            if kind == CLEAN:
                k_new.append(k.data[0].astype(self.dtype))
                v_new.append(v.data[0].astype(self.dtype))
            if use_cache:
                keys = Tensor(np.concatenate([cache.keys(i)[None], k.data], axis=2))
                values = Tensor(np.concatenate([cache.values(i)[None], v.data], axis=2))
            else:
                keys, values = k, v
            att = attention(q, keys, values, mask, counter)
            att = T.reshape(T.transpose(att, (0, 2, 1, 3)), (1, P, cfg.hidden))
            h = h + (T.matmul(att, self.params[f"{p}.attn.wo"]) + self.params[f"{p}.attn.bo"])
            n = T.layer_norm(h, self.params[f"{p}.ln2.g"], self.params[f"{p}.ln2.b"])
            mid = T.gelu(T.matmul(n, self.params[f"{p}.mlp.w1"]) + self.params[f"{p}.mlp.b1"])
            h = h + (T.matmul(mid, self.params[f"{p}.mlp.w2"]) + self.params[f"{p}.mlp.b2"])
        if kind == CLEAN:
            cache.append(frame_index, k_new, v_new)
            return None
        out = T.matmul(h, self.params["head.w"]) + self.params["head.b"]
        return out.data[0]

    def _check_geometry(self, shape) -> None:
        cfg = self.config
        if tuple(shape[-3:]) != (cfg.channels, cfg.height, cfg.width):
            raise GeometryError(
                f"frame shape {tuple(shape[-3:])} does not match config "
                f"({cfg.channels}, {cfg.height}, {cfg.width})"
            )

    # -- checkpoint io ------------------------------------------------------------

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(CHECKPOINT_MAGIC)
            fh.write(struct.pack("<H", CHECKPOINT_VERSION))
            blob = json.dumps(self.config.to_dict()).encode("utf-8")
            fh.write(struct.pack("<I", len(blob)))
            fh.write(blob)
            fh.write(struct.pack("<I", len(self.params)))
            for name, p in self.params.items():
                encoded = name.encode("utf-8")
                fh.write(struct.pack("<H", len(encoded)))
                fh.write(encoded)
                fh.write(struct.pack("<B", p.data.ndim))
                for extent in p.shape:
                    fh.write(struct.pack("<I", extent))
                fh.write(np.ascontiguousarray(p.data.astype("<f4")).tobytes())

    @staticmethod
    def load(path, dtype=np.float32) -> "FrameDiT":
        with open(path, "rb") as fh:
            magic = fh.read(4)
            if magic != CHECKPOINT_MAGIC:
                raise FormatError(f"bad checkpoint magic {magic!r} at offset 0")
            (version,) = struct.unpack("<H", fh.read(2))
            if version != CHECKPOINT_VERSION:
                raise FormatError(f"unsupported checkpoint version {version}")
            (blob_len,) = struct.unpack("<I", fh.read(4))
            config = ModelConfig.from_dict(json.loads(fh.read(blob_len).decode("utf-8")))
            (count,) = struct.unpack("<I", fh.read(4))
            model = FrameDiT(config, seed=0, dtype=dtype)
            expected = set(model.params)
            for _ in range(count):
                (name_len,) = struct.unpack("<H", fh.read(2))
                name = fh.read(name_len).decode("utf-8")
                (ndim,) = struct.unpack("<B", fh.read(1))
                shape = tuple(struct.unpack("<I", fh.read(4))[0] for _ in range(ndim))
                n = int(np.prod(shape)) if shape else 1
                raw = fh.read(4 * n)
                if len(raw) != 4 * n:
                    raise FormatError(f"truncated tensor data for {name!r}")
                if name not in expected:
                    raise FormatError(f"unknown parameter {name!r} in checkpoint")
                arr = np.frombuffer(raw, dtype="<f4").reshape(shape)
                model.params[name] = Tensor(arr.astype(model.dtype), requires_grad=True)
                expected.discard(name)
            if expected:
                raise FormatError(f"checkpoint missing parameters: {sorted(expected)[:3]}")
        return model
