"""Frozen dual encoders: determinism, shapes, locality, an independent
forward oracle, the permutation property, and the binary weight format."""

import io

import numpy as np
import pytest

from fedprompt import autodiff as ad
from fedprompt.autodiff import GradientTape, Tensor
from fedprompt.encoders import (
    EncoderConfig,
    embed_class_name,
    encode_image,
    encode_image_batch,
    encode_image_plain,
    encode_text,
    encode_text_batch,
    init_encoders,
    iter_weights,
    load_weights,
    save_weights,
    weights_hash,
)
from fedprompt.errors import ConfigError, ShapeError

SMALL = EncoderConfig(d_e=6, d_v=8, d=6, layers=2, heads=2, patch_count=4,
                      vocab_size=16, seed=5)

from oracles import oracle_encode_image, oracle_encode_text


# ---------------------------------------------------------------------------
# init_encoders


def test_same_seed_bitwise_identical():
    a, b = init_encoders(SMALL), init_encoders(SMALL)
    assert weights_hash(a) == weights_hash(b)
    for (_, ta), (_, tb) in zip(iter_weights(a), iter_weights(b)):
        assert np.array_equal(ta.data, tb.data)


def test_different_seeds_differ():
    a = init_encoders(SMALL)
    b = init_encoders(EncoderConfig(**{**SMALL.__dict__, "seed": 6}))
    assert weights_hash(a) != weights_hash(b)


def test_invalid_config_rejected():
    with pytest.raises(ConfigError):
        EncoderConfig(d_e=0).validate()
    with pytest.raises(ConfigError):
        EncoderConfig(d_e=15, heads=2).validate()


def test_forward_smoke_over_100_seeds():
    rng = np.random.default_rng(0)
    for seed in range(100):
        cfg = EncoderConfig(d_e=4, d_v=4, d=4, layers=1, heads=1, patch_count=3,
                            vocab_size=8, seed=seed)
        weights = init_encoders(cfg)
        prompts = Tensor(rng.normal(size=(2, 4)))
        patches = Tensor(rng.normal(size=(3, 4)))
        f_v, _ = encode_image(prompts, patches, weights)
        assert np.all(np.isfinite(f_v.data))
        assert 0.0 < np.linalg.norm(f_v.data) < 100.0


def test_all_weights_frozen():
    weights = init_encoders(SMALL)
    assert all(not t.requires_grad for _, t in iter_weights(weights))


# ---------------------------------------------------------------------------
# embed_class_name


def test_embed_repeatable_and_distinct():
    weights = init_encoders(SMALL)
    a, b = embed_class_name(3, weights), embed_class_name(3, weights)
    assert np.array_equal(a.data, b.data)
    c = embed_class_name(4, weights)
    assert not np.array_equal(a.data, c.data)


def test_embed_is_exact_table_row():
    weights = init_encoders(SMALL)
    out = embed_class_name(7, weights)
    assert np.array_equal(out.data, weights.vocab.data[7:8])


def test_embed_out_of_range():
    weights = init_encoders(SMALL)
    with pytest.raises(IndexError):
        embed_class_name(16, weights)
    with pytest.raises(IndexError):
        embed_class_name(-1, weights)


# ---------------------------------------------------------------------------
# encode_text


def test_encode_text_deterministic_and_shaped():
    weights = init_encoders(SMALL)
    rng = np.random.default_rng(1)
    prompt = Tensor(rng.normal(size=(3, 6)))
    tokens = embed_class_name(2, weights)
    a = encode_text(prompt, tokens, weights)
    b = encode_text(Tensor(prompt.data), embed_class_name(2, weights), weights)
    assert np.array_equal(a.data, b.data)
    assert a.shape == (SMALL.d,)


def test_encode_text_micro_oracle():
    # 1 layer, 1 head, d_e = d = 2: independently recomputed forward.
    cfg = EncoderConfig(d_e=2, d_v=2, d=2, layers=1, heads=1, patch_count=2,
                        vocab_size=8, seed=9)
    weights = init_encoders(cfg)
    rng = np.random.default_rng(2)
    prompt = rng.normal(size=(2, 2))
    tokens = rng.normal(size=(1, 2))
    got = encode_text(Tensor(prompt), Tensor(tokens), weights)
    want = oracle_encode_text(prompt, tokens, weights)
    np.testing.assert_allclose(got.data, want, rtol=0, atol=1e-10)


def test_encode_text_matches_oracle_at_default_scale():
    weights = init_encoders(SMALL)
    rng = np.random.default_rng(3)
    prompt = rng.normal(size=(4, 6))
    tokens = rng.normal(size=(1, 6))
    got = encode_text(Tensor(prompt), Tensor(tokens), weights)
    np.testing.assert_allclose(got.data, oracle_encode_text(prompt, tokens, weights), atol=1e-10)


def test_encode_text_width_mismatch():
    weights = init_encoders(SMALL)
    with pytest.raises(ShapeError):
        encode_text(Tensor(np.zeros((3, 5))), Tensor(np.zeros((1, 6))), weights)


def test_encode_text_batch_matches_singles():
    weights = init_encoders(SMALL)
    rng = np.random.default_rng(4)
    prompt = Tensor(rng.normal(size=(3, 6)))
    toks = rng.normal(size=(4, 1, 6))
    batched = encode_text_batch(prompt, Tensor(toks), weights)
    for i in range(4):
        single = encode_text(prompt, Tensor(toks[i]), weights)
        np.testing.assert_allclose(batched.data[i], single.data, atol=1e-12, rtol=0)


def test_text_gradients_reach_prompt_only():
    weights = init_encoders(SMALL)
    rng = np.random.default_rng(5)
    prompt = Tensor(rng.normal(size=(3, 6)), requires_grad=True)
    tokens = embed_class_name(1, weights)
    with GradientTape() as tape:
        out = encode_text(prompt, tokens, weights)
        tape.backward(ad.sum_all(out))
    assert np.any(prompt.grad != 0)
    assert all(t.grad is None for _, t in iter_weights(weights))


# ---------------------------------------------------------------------------
# encode_image


def test_encode_image_deterministic_and_shaped():
    weights = init_encoders(SMALL)
    rng = np.random.default_rng(6)
    prompts = Tensor(rng.normal(size=(3, 8)))
    patches = Tensor(rng.normal(size=(4, 8)))
    f1, rec1 = encode_image(prompts, patches, weights)
    f2, rec2 = encode_image(Tensor(prompts.data), Tensor(patches.data), weights)
    assert np.array_equal(f1.data, f2.data)
    assert np.array_equal(rec1.keys.data, rec2.keys.data)
    assert f1.shape == (SMALL.d,)
    assert rec1.keys.shape == (3, SMALL.d_v)
    assert rec1.q_cls.shape == (SMALL.d_v,)


def test_encode_image_matches_oracle():
    weights = init_encoders(SMALL)
    rng = np.random.default_rng(7)
    prompts = rng.normal(size=(2, 8))
    patches = rng.normal(size=(4, 8))
    f_v, rec = encode_image(Tensor(prompts), Tensor(patches), weights)
    want_f, want_q, want_k = oracle_encode_image(prompts, patches, weights)
    np.testing.assert_allclose(f_v.data, want_f, atol=1e-10)
    np.testing.assert_allclose(rec.q_cls.data, want_q, atol=1e-10)
    np.testing.assert_allclose(rec.keys.data, want_k, atol=1e-10)


def test_encode_image_permutation_oracle():
    weights = init_encoders(SMALL)
    rng = np.random.default_rng(8)
    for _ in range(5):
        prompts = rng.normal(size=(3, 8))
        patches = Tensor(rng.normal(size=(4, 8)))
        f_a, rec_a = encode_image(Tensor(prompts), patches, weights)
        swapped = prompts[[1, 0, 2]]
        f_b, rec_b = encode_image(Tensor(swapped), patches, weights)
        np.testing.assert_allclose(rec_b.keys.data, rec_a.keys.data[[1, 0, 2]], atol=1e-12)
        np.testing.assert_allclose(f_b.data, f_a.data, atol=1e-12)


def test_encode_image_wrong_patch_count():
    weights = init_encoders(SMALL)
    with pytest.raises(ShapeError):
        encode_image(Tensor(np.zeros((2, 8))), Tensor(np.zeros((3, 8))), weights)


def test_encode_image_empty_prompt_set():
    weights = init_encoders(SMALL)
    with pytest.raises(ShapeError):
        encode_image(Tensor(np.zeros((0, 8))), Tensor(np.zeros((4, 8))), weights)


def test_encode_image_batch_matches_singles():
    weights = init_encoders(SMALL)
    rng = np.random.default_rng(9)
    prompts = Tensor(rng.normal(size=(2, 8)))
    patches = rng.normal(size=(3, 4, 8))
    f_b, rec_b = encode_image_batch(prompts, Tensor(patches), weights)
    for i in range(3):
        f_s, rec_s = encode_image(prompts, Tensor(patches[i]), weights)
        np.testing.assert_allclose(f_b.data[i], f_s.data, atol=1e-12, rtol=0)
        np.testing.assert_allclose(rec_b.keys.data[i], rec_s.keys.data, atol=1e-12, rtol=0)


def test_image_gradients_reach_visual_prompts_only():
    weights = init_encoders(SMALL)
    rng = np.random.default_rng(10)
    prompts = Tensor(rng.normal(size=(2, 8)), requires_grad=True)
    patches = Tensor(rng.normal(size=(4, 8)))
    with GradientTape() as tape:
        f_v, rec = encode_image(prompts, patches, weights)
        tape.backward(ad.sum_all(f_v))
    assert np.any(prompts.grad != 0)
    assert all(t.grad is None for _, t in iter_weights(weights))


def test_encode_image_plain_drops_prompts():
    weights = init_encoders(SMALL)
    rng = np.random.default_rng(11)
    patches = rng.normal(size=(4, 8))
    out = encode_image_plain(Tensor(patches), weights)
    assert out.shape == (SMALL.d,)
    assert np.all(np.isfinite(out.data))


# ---------------------------------------------------------------------------
# frozen-ness under training


def test_weight_hash_stable_after_gradient_steps():
    weights = init_encoders(SMALL)
    before = weights_hash(weights)
    rng = np.random.default_rng(12)
    prompt = Tensor(rng.normal(size=(3, 6)), requires_grad=True)
    from fedprompt.optim import AdamW

    opt = AdamW([prompt], lr=0.05)
    for _ in range(5):
        with GradientTape() as tape:
            out = encode_text(prompt, embed_class_name(0, weights), weights)
            tape.backward(ad.sum_all(out))
        opt.step()
    assert weights_hash(weights) == before


# ---------------------------------------------------------------------------
# save/load round trip


def test_weight_file_round_trip():
    weights = init_encoders(SMALL)
    buf = io.BytesIO()
    save_weights(weights, buf)
    buf.seek(0)
    loaded = load_weights(buf)
    assert loaded.config == weights.config
    assert weights_hash(loaded) == weights_hash(weights)


def test_weight_file_rejects_bad_magic():
    buf = io.BytesIO(b"NOPE" + b"\0" * 60)
    with pytest.raises(ConfigError):
        load_weights(buf)


def test_weight_file_rejects_truncation():
    weights = init_encoders(SMALL)
    buf = io.BytesIO()
    save_weights(weights, buf)
    raw = buf.getvalue()
    with pytest.raises(ConfigError):
        load_weights(io.BytesIO(raw[: len(raw) - 8]))
