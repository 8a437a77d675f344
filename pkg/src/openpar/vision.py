"""Vision encoder: patch embedding plus transformer blocks whose attribute
tokens attend only to their body region.

The input image is cut into non-overlapping patches; K learnable attribute
tokens are prepended and everything gets a learned positional embedding.
Inside every block the additive attention mask enforces three rules:

* token -> token attention is blocked (including self) so tokens cannot copy
  each other's answers instead of reading the image,
* token -> patch attention is restricted to the token's body region,
* patch -> token attention is blocked so group information cannot leak
  between tokens through the patch lane; patches attend to all patches.

Both token-level maskings can be toggled off independently for ablations.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import MASK_BLOCKED, ShapeError, Tensor


@dataclass(frozen=True)
class EncoderConfig:
    """Architecture hyperparameters shared by both encoders."""

    height: int = 32
    width: int = 32
    patch: int = 8
    dim: int = 32
    tokens: int = 8
    layers: int = 2
    heads: int = 2
    text_len: int = 64
    mlp_ratio: int = 4

    def __post_init__(self):
        if self.height % self.patch or self.width % self.patch:
            raise ShapeError(
                f"patch size {self.patch} must divide image {self.height}x{self.width}"
            )
        if self.dim % self.heads:
            raise ShapeError(f"dim {self.dim} not divisible by {self.heads} heads")

    @property
    def grid_rows(self) -> int:
        return self.height // self.patch

    @property
    def grid_cols(self) -> int:
        return self.width // self.patch

    @property
    def num_patches(self) -> int:
        return self.grid_rows * self.grid_cols

    def to_dict(self) -> dict:
        return {
            "height": self.height,
            "width": self.width,
            "patch": self.patch,
            "dim": self.dim,
            "tokens": self.tokens,
            "layers": self.layers,
            "heads": self.heads,
            "text_len": self.text_len,
            "mlp_ratio": self.mlp_ratio,
        }


class RegionLayout:
    """Ordered map from group key to a vertical interval [lo, hi) of image height."""

    def __init__(self, intervals: dict[str, tuple[float, float]]):
        for key, (lo, hi) in intervals.items():
            if not (0.0 <= lo < hi <= 1.0):
                raise ValueError(f"group {key!r}: bad interval [{lo}, {hi})")
        self.intervals = dict(intervals)

    def __getitem__(self, key: str) -> tuple[float, float]:
        return self.intervals[key]

    def keys(self):
        return self.intervals.keys()

    def patch_rows(self, key: str, grid_rows: int) -> list[int]:
        """Patch-grid rows whose vertical band intersects the group interval."""
        lo, hi = self.intervals[key]
        return [
            i
            for i in range(grid_rows)
            if i / grid_rows < hi and (i + 1) / grid_rows > lo
        ]


# Body-region intervals for the standard group keys. Head-area groups sit in
# the top quarter, torso groups in the middle band, and cues like gender or
# age read the whole figure. Unknown group keys fall back to full height.
_STANDARD_INTERVALS = {
    "Hair": (0.0, 0.25),
    "Accessory": (0.0, 0.25),
    "Gender": (0.0, 1.0),
    "Age": (0.0, 1.0),
    "Upperbody": (0.2, 0.6),
    "Carry": (0.2, 0.6),
    "Lowerbody": (0.55, 0.9),
    "Foot": (0.85, 1.0),
}


def default_layout(group_keys) -> RegionLayout:
    return RegionLayout(
        {k: _STANDARD_INTERVALS.get(k, (0.0, 1.0)) for k in group_keys}
    )


class MaskError(ValueError):
    """A mask row ends up with no attendable position."""


@dataclass
class MaskSpec:
    """Additive masks for one encoder geometry.

    ``token_mask`` is KxK over token->token entries, ``region_mask`` is KxS
    over token->patch entries; entries are 0 (attend) or MASK_BLOCKED.
    """

    token_mask: np.ndarray
    region_mask: np.ndarray

    def __post_init__(self):
        k, s = self.region_mask.shape
        if self.token_mask.shape != (k, k):
            raise ShapeError("token_mask / region_mask disagree on K")
        for arr in (self.token_mask, self.region_mask):
            ok = (arr == 0.0) | (arr == MASK_BLOCKED)
            if not ok.all():
                raise MaskError("mask entries must be 0 or the blocked sentinel")
        unblocked = (self.region_mask == 0.0).sum(axis=1)
        if (unblocked == 0).any():
            bad = int(np.argmin(unblocked))
            raise MaskError(f"token {bad} has no unblocked patch")

    @property
    def num_tokens(self) -> int:
        return self.region_mask.shape[0]

    @property
    def num_patches(self) -> int:
        return self.region_mask.shape[1]

    def blocked_patches(self, token: int) -> np.ndarray:
        """Boolean (S,) vector of patches this token cannot see."""
        return self.region_mask[token] == MASK_BLOCKED

    def full(self) -> np.ndarray:
        """(K+S, K+S) additive mask over the whole sequence.

        Patch rows attend to every patch and to no token, regardless of the
        toggles baked into the token rows.
        """
        k, s = self.num_tokens, self.num_patches
        n = k + s
        mask = np.zeros((n, n))
        mask[:k, :k] = self.token_mask
        mask[:k, k:] = self.region_mask
        mask[k:, :k] = MASK_BLOCKED
        return mask


def build_mask(
    layout: RegionLayout,
    config: EncoderConfig,
    group_keys: list[str] | None = None,
    token_mask: bool = True,
    region_mask: bool = True,
) -> MaskSpec:
    """Derive the MaskSpec for a catalog order of groups.

    Row k of the region mask unblocks exactly the patches whose grid rows
    intersect group k's interval. The toggles map to the two ablations:
    ``token_mask=False`` re-enables token->token attention, and
    ``region_mask=False`` lets every token see every patch.
    """
    keys = list(group_keys) if group_keys is not None else list(layout.keys())
    k = len(keys)
    if k != config.tokens:
        raise ShapeError(f"layout has {k} groups but config.tokens={config.tokens}")
    s = config.num_patches
    cols = config.grid_cols
    tok = np.full((k, k), MASK_BLOCKED) if token_mask else np.zeros((k, k))
    region = np.zeros((k, s))
    if region_mask:
        region[:] = MASK_BLOCKED
        for i, key in enumerate(keys):
            rows = layout.patch_rows(key, config.grid_rows)
            if not rows:
                raise MaskError(f"group {key!r}: interval covers no patch row")
            for r in rows:
                region[i, r * cols : (r + 1) * cols] = 0.0
    return MaskSpec(token_mask=tok, region_mask=region)


# ---------------------------------------------------------------------------
# patch handling


def patchify(image: np.ndarray, patch: int) -> np.ndarray:
    """Cut an HxWx3 image in [0,1] into (S, patch, patch, 3) row-major patches."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ShapeError(f"expected HxWx3 image, got {image.shape}")
    h, w, _ = image.shape
    if h % patch or w % patch:
        raise ShapeError(f"patch {patch} does not divide {h}x{w}")
    if image.size and (image.min() < 0.0 or image.max() > 1.0):
        raise ValueError("pixel values must lie in [0, 1]")
    gr, gc = h // patch, w // patch
    tiles = image.reshape(gr, patch, gc, patch, 3).transpose(0, 2, 1, 3, 4)
    return tiles.reshape(gr * gc, patch, patch, 3)


def assemble_input(tokens: Tensor, patches: Tensor, pos: Tensor) -> Tensor:
    """Concatenate [tokens, patches] along the sequence axis and add positions.

    Shapes: tokens (..., K, D), patches (..., S, D), pos (K+S, D).
    """
    joined = T.concat([tokens, patches], axis=-2)
    if joined.shape[-2] != pos.shape[-2] or joined.shape[-1] != pos.shape[-1]:
        raise ShapeError(
            f"positional table {pos.shape} does not match sequence {joined.shape}"
        )
    return T.add(joined, pos)


# ---------------------------------------------------------------------------
# transformer machinery (shared with the text encoder)


@dataclass
class AttentionParams:
    # No key bias: a bias on keys shifts every logit in a row equally, which
    # softmax cancels, leaving a parameter with identically zero gradient.
    wq: Tensor
    bq: Tensor
    wk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor


@dataclass
class BlockParams:
    ln1_gain: Tensor
    ln1_bias: Tensor
    attn: AttentionParams
    ln2_gain: Tensor
    ln2_bias: Tensor
    mlp_w1: Tensor
    mlp_b1: Tensor
    mlp_w2: Tensor
    mlp_b2: Tensor

    def named(self, prefix: str) -> dict[str, Tensor]:
        a = self.attn
        return {
            f"{prefix}.ln1.gain": self.ln1_gain,
            f"{prefix}.ln1.bias": self.ln1_bias,
            f"{prefix}.attn.wq": a.wq,
            f"{prefix}.attn.bq": a.bq,
            f"{prefix}.attn.wk": a.wk,
            f"{prefix}.attn.wv": a.wv,
            f"{prefix}.attn.bv": a.bv,
            f"{prefix}.attn.wo": a.wo,
            f"{prefix}.attn.bo": a.bo,
            f"{prefix}.ln2.gain": self.ln2_gain,
            f"{prefix}.ln2.bias": self.ln2_bias,
            f"{prefix}.mlp.w1": self.mlp_w1,
            f"{prefix}.mlp.b1": self.mlp_b1,
            f"{prefix}.mlp.w2": self.mlp_w2,
            f"{prefix}.mlp.b2": self.mlp_b2,
        }


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> Tensor:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return T.parameter(rng.uniform(-limit, limit, size=(fan_in, fan_out)))


def init_attention(rng: np.random.Generator, dim: int) -> AttentionParams:
    zero = lambda: T.parameter(np.zeros(dim))
    return AttentionParams(
        wq=glorot(rng, dim, dim),
        bq=zero(),
        wk=glorot(rng, dim, dim),
        wv=glorot(rng, dim, dim),
        bv=zero(),
        wo=glorot(rng, dim, dim),
        bo=zero(),
    )


def init_block(rng: np.random.Generator, dim: int, mlp_ratio: int) -> BlockParams:
    hidden = dim * mlp_ratio
    return BlockParams(
        ln1_gain=T.parameter(np.ones(dim)),
        ln1_bias=T.parameter(np.zeros(dim)),
        attn=init_attention(rng, dim),
        ln2_gain=T.parameter(np.ones(dim)),
        ln2_bias=T.parameter(np.zeros(dim)),
        mlp_w1=glorot(rng, dim, hidden),
        mlp_b1=T.parameter(np.zeros(hidden)),
        mlp_w2=glorot(rng, hidden, dim),
        mlp_b2=T.parameter(np.zeros(dim)),
    )


def _split_heads(x: Tensor, heads: int) -> Tensor:
    # (..., N, D) -> (..., heads, N, D/heads)
    *lead, n, d = x.shape
    x = T.reshape(x, (*lead, n, heads, d // heads))
    axes = tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2)
    return T.transpose(x, axes)

def _merge_heads(x: Tensor) -> Tensor:
    # (..., heads, N, dh) -> (..., N, heads*dh)
    *lead, h, n, dh = x.shape
    axes = tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2)
    x = T.transpose(x, axes)
    return T.reshape(x, (*lead, n, h * dh))


def masked_attention(
    x: Tensor,
    mask: np.ndarray,
    params: AttentionParams,
    heads: int,
    record: list | None = None,
    record_tokens: int = 0,
) -> Tensor:
    """Multi-head self-attention with an additive mask.

    ``x`` is (..., N, D); ``mask`` is (N, N) or broadcastable to the logits.
    Per head, logits are scaled by 1/sqrt(head_dim); masked entries carry
    exactly zero attention weight. When ``record`` is given, the head-averaged
    attention rows of the first ``record_tokens`` queries are appended to it.
    """
    d = x.shape[-1]
    dh = d // heads
    q = _split_heads(T.add(T.matmul(x, params.wq), params.bq), heads)
    k = _split_heads(T.matmul(x, params.wk), heads)
    v = _split_heads(T.add(T.matmul(x, params.wv), params.bv), heads)
    logits = T.scale(T.matmul(q, T.transpose(k)), 1.0 / np.sqrt(dh))
    weights = T.masked_softmax(logits, mask)
    if record is not None and record_tokens:
        record.append(weights.data[..., :record_tokens, :].mean(axis=-3).copy())
    ctx = _merge_heads(T.matmul(weights, v))
    return T.add(T.matmul(ctx, params.wo), params.bo)


def transformer_block(
    x: Tensor,
    mask: np.ndarray,
    params: BlockParams,
    heads: int,
    record: list | None = None,
    record_tokens: int = 0,
) -> Tensor:
    """Pre-norm residual block: x + MSA(LN(x)), then + MLP(LN(.))."""
    attended = masked_attention(
        T.layer_norm(x, params.ln1_gain, params.ln1_bias),
        mask,
        params.attn,
        heads,
        record=record,
        record_tokens=record_tokens,
    )
    x = T.add(x, attended)
    h = T.layer_norm(x, params.ln2_gain, params.ln2_bias)
    h = T.gelu(T.add(T.matmul(h, params.mlp_w1), params.mlp_b1))
    h = T.add(T.matmul(h, params.mlp_w2), params.mlp_b2)
    return T.add(x, h)


# ---------------------------------------------------------------------------
# the encoder


@dataclass
class VisualEmbedding:
    """Final attribute-token embeddings (D, K) plus optional attention rows."""

    z_hat: Tensor
    attentions: list[np.ndarray] | None = None


class VisionEncoder:
    """Patch projection + token bank + masked transformer stack."""

    def __init__(self, config: EncoderConfig, rng: np.random.Generator):
        self.config = config
        d = config.dim
        patch_dim = config.patch * config.patch * 3
        self.patch_w = glorot(rng, patch_dim, d)
        self.patch_b = T.parameter(np.zeros(d))
        self.tokens = T.parameter(rng.normal(0.0, 0.02, size=(config.tokens, d)))
        self.pos = T.parameter(
            rng.normal(0.0, 0.02, size=(config.tokens + config.num_patches, d))
        )
        self.blocks = [
            init_block(rng, d, config.mlp_ratio) for _ in range(config.layers)
        ]

    def params(self) -> dict[str, Tensor]:
        named = {
            "vision.patch.w": self.patch_w,
            "vision.patch.b": self.patch_b,
            "vision.tokens": self.tokens,
            "vision.pos": self.pos,
        }
        for i, b in enumerate(self.blocks):
            named.update(b.named(f"vision.block{i}"))
        return named

    def embed_patches(self, images: np.ndarray) -> Tensor:
        """(B, H, W, 3) images -> (B, S, D) projected patch embeddings."""
        cfg = self.config
        flat = np.stack(
            [
                patchify(img, cfg.patch).reshape(cfg.num_patches, -1)
                for img in images
            ]
        )
        return T.add(T.matmul(Tensor(flat), self.patch_w), self.patch_b)

    def encode_batch(
        self, images: np.ndarray, spec: MaskSpec, record: list | None = None
    ) -> Tensor:
        """Encode (B, H, W, 3) images to (B, K, D) token embeddings.

        When ``record`` is a list it receives, per layer, the head-averaged
        (B, K, K+S) attention rows of the attribute tokens.
        """
        cfg = self.config
        k = cfg.tokens
        x = self.embed_patches(images)
        toks = T.broadcast_to(
            T.reshape(self.tokens, (1, k, cfg.dim)), (len(images), k, cfg.dim)
        )
        v = assemble_input(toks, x, self.pos)
        mask = spec.full()
        for block in self.blocks:
            v = transformer_block(
                v, mask, block, cfg.heads, record=record, record_tokens=k
            )
        return T.slice_axis(v, 1, 0, k)

    def encode_image(
        self, image: np.ndarray, spec: MaskSpec, record: bool = False
    ) -> VisualEmbedding:
        """Encode one image to the (D, K) token-embedding matrix."""
        rows: list | None = [] if record else None
        out = self.encode_batch(image[None], spec, record=rows)
        z_hat = T.transpose(T.reshape(out, out.shape[1:]))
        attentions = [r[0] for r in rows] if record else None
        return VisualEmbedding(z_hat=z_hat, attentions=attentions)


def attention_maps(
    embedding: VisualEmbedding, config: EncoderConfig
) -> list[np.ndarray]:
    """Per-layer (K, grid_rows, grid_cols) token-over-patch attention maps."""
    if embedding.attentions is None:
        raise ValueError("encode with record=True to collect attention maps")
    k = config.tokens
    maps = []
    for rows in embedding.attentions:
        over_patches = rows[:, k:]
        maps.append(
            over_patches.reshape(k, config.grid_rows, config.grid_cols).copy()
        )
    return maps
