"""Per-domain prompt parameters, domain weighting, fusion, losses, variants.

A :class:`PromptModel` bundles the learnable prompts for one variant with
the frozen encoders and exposes training losses and two-step inference.
The inference pipeline: (1) encode the image with the visual prompt
tokens and turn the cls-query / prompt-key affinities into per-domain
weights; (2) fuse the per-domain class text features with those weights
and pick the class whose fused feature best matches the image feature.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from typing import BinaryIO, Optional, Sequence

import numpy as np

from . import autodiff as ad
from . import encoders as enc
from .autodiff import Tensor
from .errors import ConfigError, ParameterError, ShapeError

VARIANT_MODES = (
    "zero_shot",
    "single_domain",
    "visual_only",
    "textual_only",
    "domain_agnostic",
    "adapt",
)

ZERO_SHOT_CONTEXT_LEN = 4  # reserved rows at the top of the vocab table

PROMPT_INIT_STD = 0.02


@dataclass(frozen=True)
class VariantSpec:
    """Which prompts exist and whether attention fusion runs."""

    mode: str

    def __post_init__(self):
        if self.mode not in VARIANT_MODES:
            raise ConfigError(f"unknown variant mode {self.mode!r}")

    @property
    def has_visual_prompts(self) -> bool:
        return self.mode in ("visual_only", "domain_agnostic", "adapt")

    @property
    def has_domain_text_prompts(self) -> bool:
        return self.mode in ("domain_agnostic", "adapt")

    @property
    def trains_text(self) -> bool:
        return self.mode in ("single_domain", "textual_only", "domain_agnostic", "adapt")

    @property
    def fusion(self) -> str:
        """'attention' (weighted sum), 'uniform', or 'single'."""
        if self.mode == "adapt":
            return "attention"
        if self.mode == "domain_agnostic":
            return "uniform"
        return "single"

    @property
    def uses_domain_loss(self) -> bool:
        return self.mode == "adapt"

    @property
    def federated(self) -> bool:
        return self.mode in ("visual_only", "textual_only", "domain_agnostic", "adapt")


@dataclass(frozen=True)
class LossConfig:
    """Training loss: 'cosine' (negative cosine) or 'ce' over cosine logits."""

    mode: str = "cosine"
    lambda_domain: float = 1.0
    ce_temperature: float = 0.1

    def validate(self) -> None:
        if self.mode not in ("cosine", "ce"):
            raise ConfigError(f"unknown loss mode {self.mode!r}")
        if self.ce_temperature <= 0:
            raise ConfigError("ce_temperature must be positive")


@dataclass
class DomainWeights:
    """Per-domain probabilities from the cls-to-prompt attention scores."""

    values: Tensor

    @property
    def n(self) -> int:
        return self.values.shape[-1]

    def as_array(self) -> np.ndarray:
        return np.array(self.values.data)

    def validate(self) -> None:
        arr = self.values.data
        if np.any(arr < 0):
            raise ParameterError("domain weights must be nonnegative")
        if np.any(np.abs(arr.sum(axis=-1) - 1.0) > 1e-12):
            raise ParameterError("domain weights must sum to 1 within 1e-12")


class TextPromptSet:
    """The n per-domain prompt matrices; only the owner's requires grad."""

    def __init__(self, prompts: list[Tensor], owner_domain: int):
        if not prompts:
            raise ConfigError("prompt set must not be empty")
        rows = prompts[0].shape
        for p in prompts:
            if p.shape != rows:
                raise ShapeError("all text prompts must share a shape")
        if not 0 <= owner_domain < len(prompts):
            raise IndexError(f"owner domain {owner_domain} out of range")
        self.prompts = prompts
        self.owner_domain = owner_domain

    def __len__(self) -> int:
        return len(self.prompts)

    def __getitem__(self, k: int) -> Tensor:
        return self.prompts[k]

    @property
    def owner(self) -> Tensor:
        return self.prompts[self.owner_domain]


def domain_weights(attn: enc.AttentionRecord, tau_d: float) -> DomainWeights:
    """Softmax over ``<q_cls, k_i> / tau_d``; one weight per domain prompt."""
    if tau_d <= 0:
        raise ParameterError(f"tau_d must be positive, got {tau_d}")
    if attn.keys.data.size == 0:
        raise ShapeError("attention record carries no prompt keys")
    q = attn.q_cls
    if q.data.ndim == 1:
        scores = ad.dot_last(attn.keys, q)
    else:
        batch, d_v = q.shape
        scores = ad.dot_last(attn.keys, ad.reshape(q, (batch, 1, d_v)))
    return DomainWeights(values=ad.softmax(scores, tau=tau_d, axis=-1))


def fuse_text_features(w: DomainWeights, feats: Tensor) -> Tensor:
    """Convex combination ``sum_i w_i * feats[i]`` of per-domain features."""
    if w.values.data.ndim == 1:
        n = w.n
        if feats.data.ndim != 2 or feats.shape[0] != n:
            raise ShapeError(f"expected {n} feature rows, got {feats.shape}")
        d = feats.shape[1]
        return ad.reshape(ad.matmul(ad.reshape(w.values, (1, n)), feats), (d,))
    batch, n = w.values.shape
    if feats.data.ndim != 3 or feats.shape[:2] != (batch, n):
        raise ShapeError(f"expected [batch={batch}, {n}, d] features, got {feats.shape}")
    d = feats.shape[2]
    return ad.reshape(ad.matmul(ad.reshape(w.values, (batch, 1, n)), feats), (batch, d))


def _domain_term(w: DomainWeights, target_domain: int) -> Tensor:
    """Cross-entropy of the weight vector against the true domain index."""
    n = w.n
    if not 0 <= target_domain < n:
        raise IndexError(f"target domain {target_domain} out of range [0, {n})")
    picked = ad.narrow(w.values, -1, target_domain, 1)
    return ad.neg(ad.log(picked))


def adapt_loss(
    f_v: Tensor,
    per_class_fused: Tensor,
    target_class: int,
    w: Optional[DomainWeights],
    target_domain: int,
    loss_cfg: LossConfig,
) -> Tensor:
    """Classification term plus ``lambda_domain`` times the domain term.

    ``per_class_fused`` is the [C, d] matrix of fused class features
    (Eq.-style weighted sums already applied); cosine mode compares the
    image feature with the target row, ce mode builds cosine logits over
    all C rows.
    """
    loss_cfg.validate()
    c = per_class_fused.shape[0]
    if not 0 <= target_class < c:
        raise IndexError(f"target class {target_class} out of range [0, {c})")
    if loss_cfg.mode == "cosine":
        target_row = ad.reshape(
            ad.narrow(per_class_fused, 0, target_class, 1), (per_class_fused.shape[1],)
        )
        cls_term = ad.cosine_loss(f_v, target_row)
    else:
        sims = ad.dot_last(ad.l2_normalize(per_class_fused), ad.l2_normalize(f_v))
        logits = ad.scale(sims, 1.0 / loss_cfg.ce_temperature)
        cls_term = ad.cross_entropy_loss(logits, target_class)
    lam = loss_cfg.lambda_domain
    if lam == 0.0:
        return cls_term
    if w is None:
        raise ConfigError("domain term requested but no domain weights supplied")
    dom = ad.reshape(_domain_term(w, target_domain), ())
    return ad.add(cls_term, ad.scale(dom, lam))


def decode_prompt_nearest_words(prompt, vocab) -> list[int]:
    """Per token, index of the Euclidean-nearest vocab row (ties: lowest)."""
    p = prompt.data if isinstance(prompt, Tensor) else np.asarray(prompt, dtype=np.float64)
    v = vocab.data if isinstance(vocab, Tensor) else np.asarray(vocab, dtype=np.float64)
    if v.size == 0:
        raise ShapeError("vocab table is empty")
    diffs = p[:, None, :] - v[None, :, :]
    dists = np.sqrt((diffs * diffs).sum(axis=-1))
    return [int(i) for i in dists.argmin(axis=1)]


def _class_tokens(weights: enc.EncoderWeights, classes: Sequence[int]) -> Tensor:
    rows = [enc.embed_class_name(int(c), weights).data for c in classes]
    return Tensor(np.stack(rows, axis=0))  # [C, 1, d_e]


def zero_shot_prompt(weights: enc.EncoderWeights) -> Tensor:
    """Fixed hand-crafted context: the last reserved rows of the vocab."""
    v = weights.config.vocab_size
    if v < ZERO_SHOT_CONTEXT_LEN:
        raise ConfigError(f"vocab_size must be >= {ZERO_SHOT_CONTEXT_LEN}")
    return Tensor(weights.vocab.data[v - ZERO_SHOT_CONTEXT_LEN :])


class PromptModel:
    """Learnable prompts for one variant bound to frozen encoder weights."""

    def __init__(
        self,
        variant: VariantSpec,
        weights: enc.EncoderWeights,
        n_domains: int,
        prompt_len: int,
        owner_domain: int = 0,
        tau_d: float = 0.1,
        loss_cfg: LossConfig | None = None,
        init_seed: int = 0,
        train_all_text: bool = False,
    ):
        if n_domains < 1:
            raise ConfigError("n_domains must be >= 1")
        if prompt_len < 1:
            raise ConfigError("prompt_len must be >= 1")
        if not 0 <= owner_domain < n_domains:
            raise ConfigError(f"owner_domain {owner_domain} out of range [0, {n_domains})")
        if tau_d <= 0:
            raise ParameterError(f"tau_d must be positive, got {tau_d}")
        self.variant = variant
        self.weights = weights
        self.n_domains = n_domains
        self.prompt_len = prompt_len
        self.owner_domain = owner_domain
        self.tau_d = float(tau_d)
        self.loss_cfg = loss_cfg or LossConfig()
        self.loss_cfg.validate()
        self.train_all_text = bool(train_all_text)

        cfg = weights.config
        rng = np.random.default_rng(np.random.SeedSequence([init_seed, 0x9E3779B9]))
        mode = variant.mode

        self.text_prompts: TextPromptSet | None = None
        self.shared_prompt: Tensor | None = None
        self.fixed_prompt: Tensor | None = None
        self.visual_prompts: Tensor | None = None
        self._fixed_text_cache: dict[tuple[int, ...], np.ndarray] = {}

        if variant.has_domain_text_prompts:
            prompts = []
            for k in range(n_domains):
                data = rng.normal(0.0, PROMPT_INIT_STD, (prompt_len, cfg.d_e))
                trainable = self.train_all_text or k == owner_domain
                prompts.append(Tensor(data, requires_grad=trainable))
            self.text_prompts = TextPromptSet(prompts, owner_domain)
        elif variant.trains_text:
            data = rng.normal(0.0, PROMPT_INIT_STD, (prompt_len, cfg.d_e))
            self.shared_prompt = Tensor(data, requires_grad=True)
        else:
            self.fixed_prompt = zero_shot_prompt(weights)

        if variant.has_visual_prompts:
            self.visual_prompts = Tensor(
                rng.normal(0.0, PROMPT_INIT_STD, (n_domains, cfg.d_v)), requires_grad=True
            )

    # -- parameter bookkeeping ------------------------------------------------

    def trainable_params(self) -> list[Tensor]:
        params: list[Tensor] = []
        if self.text_prompts is not None:
            params.extend(p for p in self.text_prompts.prompts if p.requires_grad)
        if self.shared_prompt is not None:
            params.append(self.shared_prompt)
        if self.visual_prompts is not None:
            params.append(self.visual_prompts)
        return params

    def parameter_count(self) -> int:
        """System-wide trainable capacity (every prompt slot, all domains)."""
        total = 0
        if self.text_prompts is not None:
            total += sum(p.data.size for p in self.text_prompts.prompts)
        if self.shared_prompt is not None:
            total += self.shared_prompt.data.size
        if self.visual_prompts is not None:
            total += self.visual_prompts.data.size
        return total

    # -- prompt exchange ------------------------------------------------------

    def text_prompt_array(self, k: int) -> np.ndarray:
        assert self.text_prompts is not None
        return np.array(self.text_prompts[k].data)

    def set_text_prompt(self, k: int, value: np.ndarray) -> None:
        assert self.text_prompts is not None
        self.text_prompts[k].data[...] = value

    def visual_prompt_array(self) -> np.ndarray:
        assert self.visual_prompts is not None
        return np.array(self.visual_prompts.data)

    def set_visual_prompts(self, value: np.ndarray) -> None:
        assert self.visual_prompts is not None
        self.visual_prompts.data[...] = value

    # -- feature computation ---------------------------------------------------

    def _prompt_list(self) -> list[Tensor]:
        if self.text_prompts is not None:
            return list(self.text_prompts.prompts)
        if self.shared_prompt is not None:
            return [self.shared_prompt]
        assert self.fixed_prompt is not None
        return [self.fixed_prompt]

    def class_text_features(self, classes: Sequence[int]) -> Tensor:
        """[P, C, d] stack of class features, one slab per prompt."""
        if not classes:
            raise ConfigError("class set must not be empty")
        key = tuple(int(c) for c in classes)
        fixed = self.fixed_prompt is not None
        if fixed and key in self._fixed_text_cache:
            return Tensor(self._fixed_text_cache[key])
        tokens = _class_tokens(self.weights, classes)
        slabs = []
        for prompt in self._prompt_list():
            feats = enc.encode_text_batch(prompt, tokens, self.weights)  # [C, d]
            c, d = feats.shape
            slabs.append(ad.reshape(feats, (1, c, d)))
        out = slabs[0] if len(slabs) == 1 else ad.concat(slabs, axis=0)
        if fixed:
            self._fixed_text_cache[key] = np.array(out.data)
        return out

    def image_features_batch(self, patches: Tensor):
        """(f_V [B, d], DomainWeights | None) for a patch batch."""
        if self.visual_prompts is not None:
            f_v, attn = enc.encode_image_batch(self.visual_prompts, patches, self.weights)
            w = domain_weights(attn, self.tau_d)
            return f_v, w
        return enc.encode_image_plain_batch(patches, self.weights), None

    def _fused_all_classes(self, feats: Tensor, w: Optional[DomainWeights]):
        """Fused [B, C, d] (attention) or shared [C, d] (uniform/single)."""
        fusion = self.variant.fusion
        p, c, d = feats.shape
        if fusion == "attention":
            assert w is not None
            flat = ad.reshape(feats, (p, c * d))
            mixed = ad.matmul(w.values, flat)
            return ad.reshape(mixed, (w.values.shape[0], c, d))
        if fusion == "uniform":
            ones = Tensor(np.full((1, p), 1.0 / p))
            return ad.reshape(ad.matmul(ones, ad.reshape(feats, (p, c * d))), (c, d))
        return ad.reshape(feats, (c, d))

    def _cosine_sims(self, fused_all: Tensor, f_v: Tensor, batch: int) -> Tensor:
        """[B, C] cosines; fused_all may be [B, C, d] or a shared [C, d]."""
        f_v_n = ad.reshape(ad.l2_normalize(f_v), (batch, 1, self.weights.config.d))
        return ad.dot_last(ad.l2_normalize(fused_all), f_v_n)

    def _fused_target_features(self, feats: Tensor, targets: np.ndarray, w):
        """Fused feature of each sample's own class: [B, d]."""
        p, _, d = feats.shape
        batch = targets.shape[0]
        picked = ad.transpose(ad.take_rows(feats, targets, axis=1), (1, 0, 2))  # [B, P, d]
        if self.variant.fusion == "attention":
            assert w is not None
            return ad.reshape(ad.matmul(ad.reshape(w.values, (batch, 1, p)), picked), (batch, d))
        if self.variant.fusion == "uniform":
            ones = Tensor(np.full((1, p), 1.0 / p))
            flat = ad.reshape(ad.transpose(picked, (1, 0, 2)), (p, batch * d))
            return ad.reshape(ad.matmul(ones, flat), (batch, d))
        return ad.reshape(picked, (batch, d))

    # -- training -------------------------------------------------------------

    def training_loss_batch(self, patches: np.ndarray, targets: np.ndarray, classes: Sequence[int]):
        """Mean batch loss plus reporting stats.

        ``targets`` holds positions into ``classes``; the domain term uses
        this model's owner domain as the true label.
        """
        targets = np.asarray(targets, dtype=np.int64)
        batch = targets.shape[0]
        f_v, w = self.image_features_batch(Tensor(patches))
        feats = self.class_text_features(classes)

        if self.loss_cfg.mode == "cosine":
            fused_t = self._fused_target_features(feats, targets, w)
            per_sample = ad.cosine_loss(f_v, fused_t)
        else:
            fused_all = self._fused_all_classes(feats, w)
            sims = self._cosine_sims(fused_all, f_v, batch)
            logits = ad.scale(sims, 1.0 / self.loss_cfg.ce_temperature)
            per_sample = ad.cross_entropy_loss(logits, targets)
        cls_loss = ad.mean_all(per_sample)

        stats = {
            "cls_loss": float(cls_loss.data),
            "dom_loss": 0.0,
            "true_domain_weight": float("nan"),
        }
        loss = cls_loss
        if w is not None:
            stats["true_domain_weight"] = float(w.values.data[..., self.owner_domain].mean())
        if self.variant.uses_domain_loss and self.loss_cfg.lambda_domain != 0.0:
            assert w is not None
            dom = ad.mean_all(_domain_term(w, self.owner_domain))
            stats["dom_loss"] = float(dom.data)
            loss = ad.add(loss, ad.scale(dom, self.loss_cfg.lambda_domain))
        return loss, stats

    # -- inference ------------------------------------------------------------

    def classify_batch(self, patches: np.ndarray, classes: Sequence[int],
                       feats: Tensor | None = None):
        """Two-step inference over a batch; returns numpy results.

        Returns (predicted positions [B], probabilities [B, C],
        domain weight array [B, n] or None, per-class similarities [B, C]).
        ``feats`` may carry precomputed class features so a caller that
        evaluates many batches under fixed prompts pays for the text
        encoder once.
        """
        if not classes:
            raise ConfigError("class set must not be empty")
        f_v, w = self.image_features_batch(Tensor(patches))
        if feats is None:
            feats = self.class_text_features(classes)
        fused_all = self._fused_all_classes(feats, w)
        batch = f_v.shape[0]
        sims_arr = self._cosine_sims(fused_all, f_v, batch).data  # [B, C]
        z = sims_arr / self.tau_d
        z = z - z.max(axis=-1, keepdims=True)
        e = np.exp(z)
        probs = e / e.sum(axis=-1, keepdims=True)
        preds = sims_arr.argmax(axis=-1)
        w_arr = w.as_array() if w is not None else None
        return preds, probs, w_arr, sims_arr

    def per_sample_losses(self, sims: np.ndarray, targets: np.ndarray, w_arr) -> np.ndarray:
        """Reporting-only losses from precomputed similarities."""
        targets = np.asarray(targets, dtype=np.int64)
        if self.loss_cfg.mode == "cosine":
            cls = -np.take_along_axis(sims, targets[:, None], axis=1)[:, 0]
        else:
            z = sims / self.loss_cfg.ce_temperature
            zmax = z.max(axis=-1, keepdims=True)
            lse = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=-1))
            cls = lse - np.take_along_axis(z, targets[:, None], axis=1)[:, 0]
        if self.variant.uses_domain_loss and self.loss_cfg.lambda_domain != 0.0 and w_arr is not None:
            cls = cls + self.loss_cfg.lambda_domain * (-np.log(w_arr[:, self.owner_domain]))
        return cls


def classify(
    patches: Tensor,
    text_prompts: Sequence[Tensor],
    visual_prompts: Tensor,
    classes: Sequence[int],
    weights: enc.EncoderWeights,
    tau_d: float = 0.1,
):
    """Two-step single-image inference with explicit prompt arguments.

    Returns (predicted position in ``classes``, per-class probabilities,
    DomainWeights).
    """
    if not classes:
        raise ConfigError("class set must not be empty")
    f_v, attn = enc.encode_image(visual_prompts, patches, weights)
    w = domain_weights(attn, tau_d)
    fused_rows = []
    for cid in classes:
        tokens = enc.embed_class_name(int(cid), weights)
        feats = [enc.encode_text(p, tokens, weights) for p in text_prompts]
        stacked = ad.concat([ad.reshape(f, (1, weights.config.d)) for f in feats], axis=0)
        fused = fuse_text_features(w, stacked)
        fused_rows.append(fused)
    f_v_n = ad.l2_normalize(f_v)
    sims = np.array([float(ad.dot_last(ad.l2_normalize(r), f_v_n).data) for r in fused_rows])
    z = sims / tau_d
    z -= z.max()
    e = np.exp(z)
    probs = e / e.sum()
    return int(sims.argmax()), probs, w


def build_variant(
    spec: VariantSpec,
    weights: enc.EncoderWeights,
    n_domains: int,
    prompt_len: int,
    owner_domain: int = 0,
    tau_d: float = 0.1,
    loss_cfg: LossConfig | None = None,
    init_seed: int = 0,
    train_all_text: bool = False,
) -> PromptModel:
    """Instantiate the prompts and wiring for one ablation variant."""
    return PromptModel(
        variant=spec,
        weights=weights,
        n_domains=n_domains,
        prompt_len=prompt_len,
        owner_domain=owner_domain,
        tau_d=tau_d,
        loss_cfg=loss_cfg,
        init_seed=init_seed,
        train_all_text=train_all_text,
    )


# ---------------------------------------------------------------------------
# prompt checkpoints: header + float64 LE buffers (same scheme as encoders)

_PROMPT_MAGIC = b"FPPR"
_PROMPT_VERSION = 1
_PROMPT_HEADER = struct.Struct("<4sI16sIIIIII9Iq")


def save_prompts(model: PromptModel, fh: BinaryIO) -> None:
    cfg = model.weights.config
    text_list = model._prompt_list()
    has_visual = 1 if model.visual_prompts is not None else 0
    fh.write(_PROMPT_HEADER.pack(
        _PROMPT_MAGIC, _PROMPT_VERSION,
        model.variant.mode.encode().ljust(16, b"\0"),
        model.owner_domain, len(text_list), text_list[0].shape[0],
        model.n_domains, model.prompt_len, has_visual,
        cfg.d_e, cfg.d_v, cfg.d, cfg.layers, cfg.heads,
        cfg.patch_count, cfg.vocab_size, cfg.max_text_tokens, cfg.max_image_tokens,
        cfg.seed,
    ))
    for prompt in text_list:
        fh.write(np.ascontiguousarray(prompt.data, dtype="<f8").tobytes())
    if has_visual:
        fh.write(np.ascontiguousarray(model.visual_prompts.data, dtype="<f8").tobytes())


def load_prompts(fh: BinaryIO) -> PromptModel:
    header = fh.read(_PROMPT_HEADER.size)
    if len(header) != _PROMPT_HEADER.size:
        raise ConfigError("prompt checkpoint truncated before header end")
    (magic, version, mode_raw, owner, n_text, rows, n_domains, prompt_len,
     has_visual, *cfg_ints, seed) = _PROMPT_HEADER.unpack(header)
    if magic != _PROMPT_MAGIC:
        raise ConfigError(f"bad magic {magic!r} in prompt checkpoint")
    if version != _PROMPT_VERSION:
        raise ConfigError(f"unsupported prompt checkpoint version {version}")
    mode = mode_raw.rstrip(b"\0").decode()
    cfg = enc.EncoderConfig(
        **dict(zip(enc._CONFIG_INT_FIELDS, cfg_ints)), seed=seed
    )
    weights = enc.init_encoders(cfg)
    model = build_variant(
        VariantSpec(mode), weights, n_domains=n_domains, prompt_len=prompt_len,
        owner_domain=owner,
    )
    text_list = model._prompt_list()
    if len(text_list) != n_text:
        raise ConfigError("prompt checkpoint text-slot count mismatch")
    for prompt in text_list:
        want = rows * cfg.d_e * 8
        raw = fh.read(want)
        if len(raw) != want:
            raise ConfigError("prompt checkpoint truncated inside a text prompt")
        prompt.data[...] = np.frombuffer(raw, dtype="<f8").reshape(rows, cfg.d_e)
    if has_visual:
        want = n_domains * cfg.d_v * 8
        raw = fh.read(want)
        if len(raw) != want:
            raise ConfigError("prompt checkpoint truncated inside visual prompts")
        model.visual_prompts.data[...] = np.frombuffer(raw, dtype="<f8").reshape(n_domains, cfg.d_v)
    if fh.read(1):
        raise ConfigError("trailing bytes after final prompt buffer")
    model._fixed_text_cache.clear()
    return model
