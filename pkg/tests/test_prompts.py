"""Domain weighting, fusion, losses, variants, decoding, two-step inference."""

import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import oracle_two_step_inference

from fedprompt import autodiff as ad
from fedprompt.autodiff import GradientTape, Tensor
from fedprompt.encoders import AttentionRecord, EncoderConfig, init_encoders
from fedprompt.errors import ConfigError, ParameterError, ShapeError
from fedprompt.prompts import (
    DomainWeights,
    LossConfig,
    PromptModel,
    VariantSpec,
    adapt_loss,
    build_variant,
    classify,
    decode_prompt_nearest_words,
    domain_weights,
    fuse_text_features,
    load_prompts,
    save_prompts,
    zero_shot_prompt,
)

CFG = EncoderConfig(d_e=6, d_v=8, d=6, layers=1, heads=2, patch_count=4,
                    vocab_size=16, seed=21)


def make_weights():
    return init_encoders(CFG)


def make_record(q, keys):
    return AttentionRecord(q_cls=Tensor(q), keys=Tensor(keys))


# ---------------------------------------------------------------------------
# domain_weights


def test_identical_keys_give_uniform_weights():
    q = np.array([1.0, -2.0, 0.5])
    keys = np.tile(np.array([0.3, 0.1, -0.2]), (4, 1))
    w = domain_weights(make_record(q, keys), tau_d=0.7)
    np.testing.assert_allclose(w.as_array(), np.full(4, 0.25), atol=1e-15)


def test_aligned_key_dominates():
    rng = np.random.default_rng(0)
    q = rng.normal(size=6)
    q /= np.linalg.norm(q)
    k1 = q * 10.0
    others = [v - (v @ q) * q for v in rng.normal(size=(2, 6))]  # orthogonal to q
    keys = np.stack([k1, *others])
    w = domain_weights(make_record(q, keys), tau_d=0.1).as_array()
    # Direct formula: scores are [100, 0, 0] / 0.1.
    assert w[0] > 0.99
    scores = keys @ q / 0.1
    expected = np.exp(scores - scores.max())
    expected /= expected.sum()
    np.testing.assert_allclose(w, expected, atol=1e-12)


def test_tau_never_changes_argmax():
    rng = np.random.default_rng(1)
    q = rng.normal(size=5)
    keys = rng.normal(size=(4, 5))
    base = domain_weights(make_record(q, keys), tau_d=1.0).as_array().argmax()
    for tau in (0.01, 0.1, 0.5, 2.0, 50.0):
        w = domain_weights(make_record(q, keys), tau_d=tau).as_array()
        assert w.argmax() == base


def test_domain_weights_rejects_bad_tau():
    with pytest.raises(ParameterError):
        domain_weights(make_record(np.ones(3), np.ones((2, 3))), tau_d=0.0)


def test_domain_weights_rejects_empty_keys():
    with pytest.raises(ShapeError):
        domain_weights(make_record(np.ones(3), np.zeros((0, 3))), tau_d=1.0)


@settings(max_examples=150, deadline=None)
@given(
    seed=st.integers(0, 10_000),
    n=st.integers(1, 8),
    tau=st.floats(0.05, 5.0),
)
def test_domain_weights_sum_to_one(seed, n, tau):
    rng = np.random.default_rng(seed)
    w = domain_weights(make_record(rng.normal(size=6), rng.normal(size=(n, 6))), tau)
    w.validate()
    assert abs(w.as_array().sum() - 1.0) <= 1e-12


# ---------------------------------------------------------------------------
# fuse_text_features


def test_one_hot_fusion_is_bitwise_selection():
    rng = np.random.default_rng(2)
    feats = rng.normal(size=(5, 7))
    for j in range(5):
        onehot = np.zeros(5)
        onehot[j] = 1.0
        fused = fuse_text_features(DomainWeights(Tensor(onehot)), Tensor(feats))
        assert np.array_equal(fused.data, feats[j])


def test_identical_features_ignore_weights():
    rng = np.random.default_rng(3)
    row = rng.normal(size=6)
    feats = np.tile(row, (4, 1))
    w = rng.dirichlet(np.ones(4))
    fused = fuse_text_features(DomainWeights(Tensor(w)), Tensor(feats))
    np.testing.assert_allclose(fused.data, row, atol=1e-15)


def test_fusion_stays_in_coordinate_hull():
    rng = np.random.default_rng(4)
    for _ in range(50):
        n, d = int(rng.integers(1, 6)), int(rng.integers(1, 6))
        feats = rng.normal(size=(n, d))
        w = rng.dirichlet(np.ones(n))
        fused = fuse_text_features(DomainWeights(Tensor(w)), Tensor(feats)).data
        assert np.all(fused >= feats.min(axis=0) - 1e-12)
        assert np.all(fused <= feats.max(axis=0) + 1e-12)


def test_fusion_length_mismatch():
    with pytest.raises(ShapeError):
        fuse_text_features(DomainWeights(Tensor(np.ones(3) / 3)), Tensor(np.zeros((4, 2))))


# ---------------------------------------------------------------------------
# adapt_loss


def _uniform_weights(n):
    return DomainWeights(Tensor(np.full(n, 1.0 / n)))


def test_cosine_mode_parallel_feature_gives_minus_one():
    rng = np.random.default_rng(5)
    f_v = rng.normal(size=6)
    fused = np.stack([f_v * 2.5, rng.normal(size=6), rng.normal(size=6)])
    loss = adapt_loss(
        Tensor(f_v), Tensor(fused), target_class=0, w=_uniform_weights(3),
        target_domain=0, loss_cfg=LossConfig(mode="cosine", lambda_domain=0.0),
    )
    assert abs(loss.item() + 1.0) <= 1e-12


def test_uniform_weights_domain_term_is_ln_n():
    rng = np.random.default_rng(6)
    f_v = rng.normal(size=6)
    fused = np.stack([f_v, rng.normal(size=6)])
    for n in (2, 3, 5):
        loss = adapt_loss(
            Tensor(f_v), Tensor(fused), target_class=0, w=_uniform_weights(n),
            target_domain=1, loss_cfg=LossConfig(mode="cosine", lambda_domain=1.0),
        )
        # cls term is exactly -1 (parallel), so loss + 1 isolates the domain term.
        assert abs((loss.item() + 1.0) - np.log(n)) <= 1e-12


def test_ce_mode_matches_scalar_oracle():
    rng = np.random.default_rng(7)
    f_v = rng.normal(size=5)
    fused = rng.normal(size=(4, 5))
    tau = 0.37
    loss = adapt_loss(
        Tensor(f_v), Tensor(fused), target_class=2, w=None, target_domain=0,
        loss_cfg=LossConfig(mode="ce", lambda_domain=0.0, ce_temperature=tau),
    )
    # Independent scalar implementation of softmax-CE over cosine logits.
    logits = []
    for row in fused:
        dot = sum(a * b for a, b in zip(row, f_v))
        nr = sum(a * a for a in row) ** 0.5
        nv = sum(a * a for a in f_v) ** 0.5
        logits.append(dot / (nr * nv) / tau)
    logits = np.array(logits)
    expected = np.log(np.exp(logits - logits.max()).sum()) + logits.max() - logits[2]
    assert abs(loss.item() - expected) <= 1e-12


def test_adapt_loss_unknown_mode():
    with pytest.raises(ConfigError):
        adapt_loss(
            Tensor(np.ones(3)), Tensor(np.ones((2, 3))), 0, _uniform_weights(2), 0,
            LossConfig(mode="huber"),
        )


def test_adapt_loss_target_out_of_range():
    with pytest.raises(IndexError):
        adapt_loss(
            Tensor(np.ones(3)), Tensor(np.ones((2, 3))), 5, _uniform_weights(2), 0,
            LossConfig(lambda_domain=0.0),
        )


def test_adapt_loss_requires_weights_for_domain_term():
    with pytest.raises(ConfigError):
        adapt_loss(Tensor(np.ones(3)), Tensor(np.ones((2, 3))), 0, None, 0, LossConfig())


# ---------------------------------------------------------------------------
# full-loss gradients vs finite differences (trainable prompts only)


def _model_loss(model, patches, target, classes):
    loss, _ = model.training_loss_batch(
        patches[None], np.array([target], dtype=np.int64), classes
    )
    return loss


@pytest.mark.parametrize("loss_mode", ["cosine", "ce"])
def test_full_loss_prompt_gradients_match_finite_differences(loss_mode):
    weights = make_weights()
    rng = np.random.default_rng(8)
    model = build_variant(
        VariantSpec("adapt"), weights, n_domains=2, prompt_len=2, owner_domain=1,
        loss_cfg=LossConfig(mode=loss_mode), init_seed=3,
    )
    patches = rng.normal(size=(4, 8))
    classes = [0, 1, 2]
    target = 1
    params = model.trainable_params()
    ad.zero_grads(params)
    with GradientTape() as tape:
        loss = _model_loss(model, patches, target, classes)
        tape.backward(loss)
    analytic = [p.grad.copy() for p in params]

    h = 1e-6
    for p, grad in zip(params, analytic):
        flat = p.data.reshape(-1)
        gf = grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(_model_loss(model, patches, target, classes).data)
            flat[i] = orig - h
            fm = float(_model_loss(model, patches, target, classes).data)
            flat[i] = orig
            fd = (fp - fm) / (2 * h)
            assert abs(gf[i] - fd) <= 1e-5 * max(abs(fd), abs(gf[i]), 1e-3)


def test_adapt_trainable_set_is_owner_plus_visual():
    weights = make_weights()
    model = build_variant(VariantSpec("adapt"), weights, n_domains=3, prompt_len=2, owner_domain=1)
    params = model.trainable_params()
    assert len(params) == 2
    assert params[0] is model.text_prompts[1]
    assert params[1] is model.visual_prompts
    assert not model.text_prompts[0].requires_grad
    assert not model.text_prompts[2].requires_grad


# ---------------------------------------------------------------------------
# build_variant parameter accounting


def test_zero_shot_has_no_trainable_parameters():
    model = build_variant(VariantSpec("zero_shot"), make_weights(), n_domains=3, prompt_len=2)
    assert model.trainable_params() == []
    assert model.parameter_count() == 0


@pytest.mark.parametrize("n,m", [(2, 2), (3, 4), (6, 16)])
def test_adapt_parameter_count_formula(n, m):
    cfg = EncoderConfig(d_e=6, d_v=8, d=6, layers=1, heads=2, patch_count=4,
                        vocab_size=32, seed=1)
    model = build_variant(VariantSpec("adapt"), init_encoders(cfg), n_domains=n, prompt_len=m)
    assert model.parameter_count() == n * m * cfg.d_e + n * cfg.d_v


def test_variant_parameter_counts():
    weights = make_weights()
    n, m = 3, 4
    counts = {
        "single_domain": m * CFG.d_e,
        "textual_only": m * CFG.d_e,
        "visual_only": n * CFG.d_v,
        "domain_agnostic": n * m * CFG.d_e + n * CFG.d_v,
    }
    for mode, expected in counts.items():
        model = build_variant(VariantSpec(mode), weights, n_domains=n, prompt_len=m)
        assert model.parameter_count() == expected, mode


def test_unknown_variant_rejected():
    with pytest.raises(ConfigError):
        VariantSpec("prompt_soup")


# ---------------------------------------------------------------------------
# classify


def _random_setup(rng, n, n_classes):
    weights = make_weights()
    prompts = [Tensor(rng.normal(0, 0.5, size=(2, CFG.d_e))) for _ in range(n)]
    visual = Tensor(rng.normal(0, 0.5, size=(n, CFG.d_v)))
    patches = Tensor(rng.normal(size=(CFG.patch_count, CFG.d_v)))
    classes = list(range(n_classes))
    return weights, prompts, visual, patches, classes


def test_classify_single_domain_reduces_to_plain_matching():
    rng = np.random.default_rng(9)
    weights, prompts, visual, patches, classes = _random_setup(rng, 1, 4)
    pred, probs, w = classify(patches, prompts, visual, classes, weights, tau_d=0.1)
    np.testing.assert_allclose(w.as_array(), [1.0], atol=1e-15)
    # With one domain the fused feature is the single prompt's feature.
    from fedprompt.encoders import embed_class_name, encode_image, encode_text

    f_v, _ = encode_image(visual, patches, weights)
    sims = []
    for cid in classes:
        f_t = encode_text(prompts[0], embed_class_name(cid, weights), weights)
        sims.append(float(ad.dot_last(ad.l2_normalize(f_t), ad.l2_normalize(f_v)).data))
    assert pred == int(np.argmax(sims))


def test_classify_single_class_certainty():
    rng = np.random.default_rng(10)
    weights, prompts, visual, patches, _ = _random_setup(rng, 2, 4)
    pred, probs, _ = classify(patches, prompts, visual, [3], weights, tau_d=0.1)
    assert pred == 0
    np.testing.assert_allclose(probs, [1.0], atol=1e-15)


def test_classify_empty_class_set():
    rng = np.random.default_rng(11)
    weights, prompts, visual, patches, _ = _random_setup(rng, 2, 4)
    with pytest.raises(ConfigError):
        classify(patches, prompts, visual, [], weights)


def test_classify_matches_pipeline_oracle_on_20_cases():
    rng = np.random.default_rng(12)
    weights = make_weights()
    for case in range(20):
        n = int(rng.integers(1, 4))
        n_classes = int(rng.integers(2, 5))
        prompts = [Tensor(rng.normal(0, 0.5, size=(2, CFG.d_e))) for _ in range(n)]
        visual = Tensor(rng.normal(0, 0.5, size=(n, CFG.d_v)))
        patches = Tensor(rng.normal(size=(CFG.patch_count, CFG.d_v)))
        classes = list(range(n_classes))
        pred, probs, w = classify(patches, prompts, visual, classes, weights, tau_d=0.1)
        want_pred, want_sims, want_w = oracle_two_step_inference(
            patches.data, [p.data for p in prompts], visual.data, classes,
            weights, tau_d=0.1,
        )
        assert pred == want_pred
        np.testing.assert_allclose(w.as_array(), want_w, atol=1e-10)
        z = want_sims / 0.1
        z -= z.max()
        want_probs = np.exp(z) / np.exp(z).sum()
        np.testing.assert_allclose(probs, want_probs, atol=1e-10)


def test_prediction_invariant_to_positive_similarity_scaling():
    rng = np.random.default_rng(13)
    weights = make_weights()
    model = build_variant(VariantSpec("adapt"), weights, n_domains=2, prompt_len=2)
    patches = rng.normal(size=(3, CFG.patch_count, CFG.d_v))
    preds, probs, _, sims = model.classify_batch(patches, [0, 1, 2])
    for c in (0.2, 1.0, 7.5):
        assert np.array_equal((sims * c).argmax(axis=1), preds)
    assert np.array_equal(probs.argmax(axis=1), preds)


def test_classify_batch_matches_functional_classify():
    rng = np.random.default_rng(14)
    weights = make_weights()
    model = build_variant(VariantSpec("adapt"), weights, n_domains=2, prompt_len=2, init_seed=9)
    patches = rng.normal(size=(4, CFG.patch_count, CFG.d_v))
    preds, probs, w_arr, _ = model.classify_batch(patches, [0, 1, 2])
    for i in range(4):
        pred, p, w = classify(
            Tensor(patches[i]), list(model.text_prompts.prompts), model.visual_prompts,
            [0, 1, 2], weights, tau_d=model.tau_d,
        )
        assert pred == preds[i]
        np.testing.assert_allclose(p, probs[i], atol=1e-10)
        np.testing.assert_allclose(w.as_array(), w_arr[i], atol=1e-10)


# ---------------------------------------------------------------------------
# decode_prompt_nearest_words


def test_decode_prefers_nearby_row():
    vocab = Tensor(np.array([[0.0, 0.0], [1.0, 1.0]]))
    assert decode_prompt_nearest_words(Tensor(np.array([[0.9, 0.9]])), vocab) == [1]


def test_decode_exact_row_matches_itself():
    rng = np.random.default_rng(15)
    vocab = rng.normal(size=(10, 4))
    token = vocab[6:7].copy()
    assert decode_prompt_nearest_words(Tensor(token), Tensor(vocab)) == [6]


def test_decode_tie_breaks_to_lowest_index():
    vocab = Tensor(np.array([[1.0, 0.0], [-1.0, 0.0]]))
    assert decode_prompt_nearest_words(Tensor(np.array([[0.0, 0.0]])), vocab) == [0]


def test_decode_matches_bruteforce_oracle_on_1000_tokens():
    rng = np.random.default_rng(16)
    vocab = rng.normal(size=(32, 6))
    tokens = rng.normal(size=(1000, 6))
    got = decode_prompt_nearest_words(Tensor(tokens), Tensor(vocab))
    for i in range(1000):
        best_idx, best_d = 0, np.inf
        for j in range(32):
            dist = np.linalg.norm(tokens[i] - vocab[j])
            if dist < best_d:
                best_idx, best_d = j, dist
        assert got[i] == best_idx
    assert len(got) == 1000


def test_decode_rejects_empty_vocab():
    with pytest.raises(ShapeError):
        decode_prompt_nearest_words(Tensor(np.ones((1, 2))), Tensor(np.zeros((0, 2))))


# ---------------------------------------------------------------------------
# prompt checkpoints


def test_prompt_checkpoint_round_trip():
    weights = make_weights()
    model = build_variant(VariantSpec("adapt"), weights, n_domains=3, prompt_len=2,
                          owner_domain=2, init_seed=4)
    rng = np.random.default_rng(17)
    for k in range(3):
        model.set_text_prompt(k, rng.normal(size=(2, CFG.d_e)))
    model.set_visual_prompts(rng.normal(size=(3, CFG.d_v)))
    buf = io.BytesIO()
    save_prompts(model, buf)
    buf.seek(0)
    loaded = load_prompts(buf)
    assert loaded.variant.mode == "adapt"
    assert loaded.owner_domain == 2
    for k in range(3):
        assert np.array_equal(loaded.text_prompt_array(k), model.text_prompt_array(k))
    assert np.array_equal(loaded.visual_prompt_array(), model.visual_prompt_array())


def test_zero_shot_prompt_is_reserved_tail_rows():
    weights = make_weights()
    zs = zero_shot_prompt(weights)
    assert np.array_equal(zs.data, weights.vocab.data[-4:])
    assert not zs.requires_grad
