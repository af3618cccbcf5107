"""Frozen toy dual encoders: a text and a vision transformer.

Both towers are pre-LN transformers at desk scale. Sequences are built
by the callers:

* text: ``[prompt tokens] [class token]`` -> final-token output, projected
  to the shared latent width;
* vision: ``[cls] [visual prompt tokens] [patches]`` -> cls output,
  projected to the shared latent width, plus the last block's projected
  query of the cls token and key vectors of the prompt tokens.

All weights are sampled once from a seeded generator and are permanently
frozen (``requires_grad=False``); gradients can only reach the prompt
arguments.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from typing import BinaryIO, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ShapeError

_MAGIC = b"FPEW"
_FORMAT_VERSION = 1


@dataclass(frozen=True)
class EncoderConfig:
    """Extents and seed for one frozen encoder pair."""

    d_e: int = 16
    d_v: int = 24
    d: int = 16
    layers: int = 2
    heads: int = 2
    patch_count: int = 16
    vocab_size: int = 64
    seed: int = 0
    max_text_tokens: int = 48
    max_image_tokens: int = 48

    def validate(self) -> None:
        for name in ("d_e", "d_v", "d", "layers", "heads", "patch_count",
                     "vocab_size", "max_text_tokens", "max_image_tokens"):
            if getattr(self, name) < 1:
                raise ConfigError(f"EncoderConfig.{name} must be >= 1")
        if self.d_e % self.heads or self.d_v % self.heads:
            raise ConfigError(
                f"widths d_e={self.d_e}, d_v={self.d_v} must be divisible by heads={self.heads}"
            )


@dataclass
class BlockWeights:
    ln1_g: Tensor
    ln1_b: Tensor
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor
    ln2_g: Tensor
    ln2_b: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


@dataclass
class TowerWeights:
    pos: Tensor
    blocks: list[BlockWeights]
    lnf_g: Tensor
    lnf_b: Tensor
    proj: Tensor


@dataclass
class EncoderWeights:
    config: EncoderConfig
    vocab: Tensor
    cls_token: Tensor
    text: TowerWeights
    vision: TowerWeights


@dataclass
class AttentionRecord:
    """Last-block projected cls query and visual-prompt keys.

    ``q_cls`` has shape [d_v] (or [batch, d_v]); ``keys`` has shape
    [n, d_v] (or [batch, n, d_v]) ordered by domain index.
    """

    q_cls: Tensor
    keys: Tensor

    @property
    def n_prompts(self) -> int:
        return self.keys.shape[-2]


def _frozen(arr: np.ndarray) -> Tensor:
    return Tensor(arr, requires_grad=False)


def _init_block(rng: np.random.Generator, dm: int) -> BlockWeights:
    hidden = 2 * dm
    s_in = dm**-0.5
    s_hid = hidden**-0.5
    return BlockWeights(
        ln1_g=_frozen(np.ones(dm)),
        ln1_b=_frozen(np.zeros(dm)),
        wq=_frozen(rng.normal(0.0, s_in, (dm, dm))),
        bq=_frozen(np.zeros(dm)),
        wk=_frozen(rng.normal(0.0, s_in, (dm, dm))),
        bk=_frozen(np.zeros(dm)),
        wv=_frozen(rng.normal(0.0, s_in, (dm, dm))),
        bv=_frozen(np.zeros(dm)),
        wo=_frozen(rng.normal(0.0, s_in, (dm, dm))),
        bo=_frozen(np.zeros(dm)),
        ln2_g=_frozen(np.ones(dm)),
        ln2_b=_frozen(np.zeros(dm)),
        w1=_frozen(rng.normal(0.0, s_in, (dm, hidden))),
        b1=_frozen(np.zeros(hidden)),
        w2=_frozen(rng.normal(0.0, s_hid, (hidden, dm))),
        b2=_frozen(np.zeros(dm)),
    )


def _init_tower(rng: np.random.Generator, dm: int, d_out: int, max_tokens: int, layers: int) -> TowerWeights:
    return TowerWeights(
        pos=_frozen(rng.normal(0.0, 1.0, (max_tokens, dm))),
        blocks=[_init_block(rng, dm) for _ in range(layers)],
        lnf_g=_frozen(np.ones(dm)),
        lnf_b=_frozen(np.zeros(dm)),
        proj=_frozen(rng.normal(0.0, dm**-0.5, (dm, d_out))),
    )


def init_encoders(config: EncoderConfig) -> EncoderWeights:
    """Sample frozen weights; the same seed always yields identical bytes."""
    config.validate()
    rng = np.random.default_rng(np.random.SeedSequence(config.seed))
    vocab = _frozen(rng.normal(0.0, 1.0, (config.vocab_size, config.d_e)))
    cls_token = _frozen(rng.normal(0.0, 1.0, (1, config.d_v)))
    text = _init_tower(rng, config.d_e, config.d, config.max_text_tokens, config.layers)
    vision = _init_tower(rng, config.d_v, config.d, config.max_image_tokens, config.layers)
    return EncoderWeights(config=config, vocab=vocab, cls_token=cls_token, text=text, vision=vision)


def iter_weights(weights: EncoderWeights):
    """Yield (name, tensor) in the fixed declaration order used on disk."""
    yield "vocab", weights.vocab
    yield "cls_token", weights.cls_token
    for tower_name, tower in (("text", weights.text), ("vision", weights.vision)):
        yield f"{tower_name}.pos", tower.pos
        for i, blk in enumerate(tower.blocks):
            for fname in ("ln1_g", "ln1_b", "wq", "bq", "wk", "bk", "wv", "bv",
                          "wo", "bo", "ln2_g", "ln2_b", "w1", "b1", "w2", "b2"):
                yield f"{tower_name}.block{i}.{fname}", getattr(blk, fname)
        yield f"{tower_name}.lnf_g", tower.lnf_g
        yield f"{tower_name}.lnf_b", tower.lnf_b
        yield f"{tower_name}.proj", tower.proj


def weights_hash(weights: EncoderWeights) -> str:
    """Content hash over every weight buffer; stable across training."""
    h = hashlib.sha256()
    for name, tensor in iter_weights(weights):
        h.update(name.encode())
        h.update(tensor.data.tobytes())
    return h.hexdigest()


def trainable_weight_count(weights: EncoderWeights) -> int:
    return sum(t.data.size for _, t in iter_weights(weights) if t.requires_grad)


# ---------------------------------------------------------------------------
# forward passes


def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return ad.linear(x, w, b)


def _run_tower(tower: TowerWeights, heads: int, x: Tensor, capture_qk: bool,
               pos_rows: Tensor | None = None):
    seq = x.shape[-2]
    if pos_rows is None:
        if seq > tower.pos.shape[0]:
            raise ShapeError(
                f"sequence length {seq} exceeds positional table {tower.pos.shape[0]}"
            )
        pos_rows = ad.narrow(tower.pos, 0, 0, seq)
    x = ad.add(x, pos_rows)
    captured = None
    last = len(tower.blocks) - 1
    for i, blk in enumerate(tower.blocks):
        h = ad.layer_norm(x, blk.ln1_g, blk.ln1_b)
        q = _linear(h, blk.wq, blk.bq)
        k = _linear(h, blk.wk, blk.bk)
        v = _linear(h, blk.wv, blk.bv)
        if capture_qk and i == last:
            captured = (q, k)
        a = ad.multi_head_attention(q, k, v, heads)
        x = ad.add(x, _linear(a, blk.wo, blk.bo))
        h2 = ad.layer_norm(x, blk.ln2_g, blk.ln2_b)
        x = ad.add(x, _linear(ad.gelu(_linear(h2, blk.w1, blk.b1)), blk.w2, blk.b2))
    x = ad.layer_norm(x, tower.lnf_g, tower.lnf_b)
    return x, captured


def embed_class_name(class_id: int, weights: EncoderWeights) -> Tensor:
    """Single-token class embedding: row ``class_id`` of the vocab table."""
    if not 0 <= class_id < weights.config.vocab_size:
        raise IndexError(f"class id {class_id} out of range [0, {weights.config.vocab_size})")
    return Tensor(weights.vocab.data[class_id : class_id + 1])


def encode_text_batch(prompt: Tensor, class_tokens: Tensor, weights: EncoderWeights) -> Tensor:
    """Encode ``[prompt | class tokens]`` for a batch of class-token rows.

    prompt: [m, d_e] shared over the batch; class_tokens: [B, l, d_e].
    Returns [B, d].
    """
    cfg = weights.config
    if prompt.data.ndim != 2 or prompt.shape[1] != cfg.d_e:
        raise ShapeError(f"prompt must be [m, {cfg.d_e}], got {prompt.shape}")
    if prompt.shape[0] < 1:
        raise ShapeError("prompt must contain at least one token row")
    if class_tokens.data.ndim != 3 or class_tokens.shape[2] != cfg.d_e:
        raise ShapeError(f"class tokens must be [B, l, {cfg.d_e}], got {class_tokens.shape}")
    batch = class_tokens.shape[0]
    seq = ad.concat([ad.tile_rows(prompt, batch), class_tokens], axis=-2)
    out, _ = _run_tower(weights.text, cfg.heads, seq, capture_qk=False)
    length = seq.shape[-2]
    last = ad.reshape(ad.narrow(out, -2, length - 1, 1), (batch, cfg.d_e))
    return ad.matmul(last, weights.text.proj)


def encode_text(prompt: Tensor, class_tokens: Tensor, weights: EncoderWeights) -> Tensor:
    """Single-sequence text encoding; class_tokens is [l, d_e]. Returns [d]."""
    if class_tokens.data.ndim != 2:
        raise ShapeError(f"class tokens must be [l, d_e], got {class_tokens.shape}")
    batched = encode_text_batch(prompt, ad.reshape(class_tokens, (1,) + class_tokens.shape), weights)
    return ad.reshape(batched, (weights.config.d,))


def _vision_sequence(weights: EncoderWeights, visual_prompts: Optional[Tensor], patches: Tensor):
    """Assemble [cls | prompts | patches] plus its positional rows.

    Prompt tokens carry no positional embedding, so swapping two visual
    prompts permutes their key vectors exactly; cls and patches keep
    their learned positions regardless of the prompt count.
    """
    cfg = weights.config
    if patches.data.ndim != 3 or patches.shape[2] != cfg.d_v:
        raise ShapeError(f"patches must be [B, p, {cfg.d_v}], got {patches.shape}")
    if patches.shape[1] != cfg.patch_count:
        raise ShapeError(
            f"expected {cfg.patch_count} patches per image, got {patches.shape[1]}"
        )
    if 1 + cfg.patch_count > cfg.max_image_tokens:
        raise ShapeError("positional table too small for cls + patches")
    batch = patches.shape[0]
    parts = [ad.tile_rows(weights.cls_token, batch)]
    n = 0
    if visual_prompts is not None:
        if visual_prompts.data.ndim != 2 or visual_prompts.shape[1] != cfg.d_v:
            raise ShapeError(f"visual prompts must be [n, {cfg.d_v}], got {visual_prompts.shape}")
        n = visual_prompts.shape[0]
        if n < 1:
            raise ShapeError("visual prompt set must contain at least one token")
        parts.append(ad.tile_rows(visual_prompts, batch))
    parts.append(patches)
    pos_table = weights.vision.pos.data
    pos_rows = Tensor(np.concatenate([
        pos_table[0:1],
        np.zeros((n, cfg.d_v)),
        pos_table[1 : 1 + cfg.patch_count],
    ]))
    return ad.concat(parts, axis=-2), batch, n, pos_rows


def encode_image_batch(
    visual_prompts: Tensor, patches: Tensor, weights: EncoderWeights
) -> tuple[Tensor, AttentionRecord]:
    """Encode ``[cls | visual prompts | patches]`` for a batch of images.

    patches: [B, p, d_v]. Returns (f_V [B, d], record with q_cls [B, d_v]
    and keys [B, n, d_v]).
    """
    cfg = weights.config
    seq, batch, n, pos_rows = _vision_sequence(weights, visual_prompts, patches)
    out, qk = _run_tower(weights.vision, cfg.heads, seq, capture_qk=True, pos_rows=pos_rows)
    q, k = qk
    cls_out = ad.reshape(ad.narrow(out, -2, 0, 1), (batch, cfg.d_v))
    f_v = ad.matmul(cls_out, weights.vision.proj)
    q_cls = ad.reshape(ad.narrow(q, -2, 0, 1), (batch, cfg.d_v))
    keys = ad.narrow(k, -2, 1, n)
    return f_v, AttentionRecord(q_cls=q_cls, keys=keys)


def encode_image(
    visual_prompts: Tensor, patches: Tensor, weights: EncoderWeights
) -> tuple[Tensor, AttentionRecord]:
    """Single-image encoding; patches is [p, d_v]. Returns ([d], record)."""
    if patches.data.ndim != 2:
        raise ShapeError(f"patches must be [p, d_v], got {patches.shape}")
    f_v, rec = encode_image_batch(
        visual_prompts, ad.reshape(patches, (1,) + patches.shape), weights
    )
    cfg = weights.config
    n = rec.keys.shape[-2]
    return (
        ad.reshape(f_v, (cfg.d,)),
        AttentionRecord(
            q_cls=ad.reshape(rec.q_cls, (cfg.d_v,)),
            keys=ad.reshape(rec.keys, (n, cfg.d_v)),
        ),
    )


def encode_image_plain_batch(patches: Tensor, weights: EncoderWeights) -> Tensor:
    """Vision encoding without prompt tokens (ablation variants). [B, d]."""
    cfg = weights.config
    seq, batch, _, pos_rows = _vision_sequence(weights, None, patches)
    out, _ = _run_tower(weights.vision, cfg.heads, seq, capture_qk=False, pos_rows=pos_rows)
    cls_out = ad.reshape(ad.narrow(out, -2, 0, 1), (batch, cfg.d_v))
    return ad.matmul(cls_out, weights.vision.proj)


def encode_image_plain(patches: Tensor, weights: EncoderWeights) -> Tensor:
    if patches.data.ndim != 2:
        raise ShapeError(f"patches must be [p, d_v], got {patches.shape}")
    out = encode_image_plain_batch(ad.reshape(patches, (1,) + patches.shape), weights)
    return ad.reshape(out, (weights.config.d,))


# ---------------------------------------------------------------------------
# binary weight files: header (magic, version, config) + float64 LE buffers


_HEADER = struct.Struct("<4sI9Iq")
_CONFIG_INT_FIELDS = (
    "d_e", "d_v", "d", "layers", "heads",
    "patch_count", "vocab_size", "max_text_tokens", "max_image_tokens",
)


def save_weights(weights: EncoderWeights, fh: BinaryIO) -> None:
    cfg = weights.config
    fh.write(_HEADER.pack(
        _MAGIC, _FORMAT_VERSION,
        *(getattr(cfg, f) for f in _CONFIG_INT_FIELDS),
        cfg.seed,
    ))
    for _, tensor in iter_weights(weights):
        fh.write(np.ascontiguousarray(tensor.data, dtype="<f8").tobytes())


def load_weights(fh: BinaryIO) -> EncoderWeights:
    header = fh.read(_HEADER.size)
    if len(header) != _HEADER.size:
        raise ConfigError("weight file truncated before header end")
    magic, version, *ints, seed = _HEADER.unpack(header)
    if magic != _MAGIC:
        raise ConfigError(f"bad magic {magic!r} in weight file")
    if version != _FORMAT_VERSION:
        raise ConfigError(f"unsupported weight file version {version}")
    cfg = EncoderConfig(**dict(zip(_CONFIG_INT_FIELDS, ints)), seed=seed)
    weights = init_encoders(cfg)
    for name, tensor in iter_weights(weights):
        raw = fh.read(tensor.data.size * 8)
        if len(raw) != tensor.data.size * 8:
            raise ConfigError(f"weight file truncated inside {name}")
        tensor.data[...] = np.frombuffer(raw, dtype="<f8").reshape(tensor.shape)
    if fh.read(1):
        raise ConfigError("trailing bytes after final weight buffer")
    return weights
