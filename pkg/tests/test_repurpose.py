import numpy as np
import pytest

from mwt import mdm, synth
from mwt.multiway import MultiwayConfig, encode, init_model
from mwt.repurpose import (DualHeads, FinetuneConfig, FusionHead, RetrievalIndex, caption_batch,
                           caption_finetune_step, caption_generate, caption_mask,
                           classify_by_retrieval, dual_embed, dual_encode, fusion_classify,
                           fusion_input, greedy_decode, intermediate_finetune_contrastive,
                           matched_cosine, next_token_logprobs, recall_at_k, retrieve,
                           two_pair_classify, two_pair_logits)
from mwt.training import OptimConfig


@pytest.fixture(scope="module")
def toy():
    cfg = MultiwayConfig.toy()
    rng = np.random.default_rng(0)
    scenes = synth.all_scenes()
    vocab = mdm.Vocab.build([s.caption() for s in scenes] + list(synth.COPY_COLORS), max_size=cfg.text_vocab)
    images = [synth.render_scene(s, rng) for s in scenes]
    caps = [mdm.tokenize_text(s.caption(), vocab) for s in scenes]
    return cfg, vocab, images, caps


@pytest.fixture
def model(toy):
    return init_model(toy[0], 0)


# ---- fusion heads ---------------------------------------------------------------


def test_zero_head_gives_uniform(toy, model):
    _, _, images, caps = toy
    head = FusionHead(64, 8)
    for p in head.params.values():
        p.data[:] = 0
    probs = fusion_classify(model, images[0], caps[0], head)
    np.testing.assert_allclose(probs, np.full(8, 1 / 8), atol=1e-7)


def test_fusion_distribution_sums_to_one(toy, model):
    _, _, images, caps = toy
    probs = fusion_classify(model, images[:3], caps[:3], FusionHead(64, 5, hidden=32, seed=1))
    assert probs.shape == (3, 5)
    np.testing.assert_allclose(probs.sum(1), 1, atol=1e-6)
    with pytest.raises(ValueError):
        fusion_classify(model, images[0], caps[0], FusionHead(64, 5), num_labels=8)


def test_two_pair_feature_width_and_symmetry(toy, model):
    _, _, images, caps = toy
    H = 64
    head = FusionHead(2 * H, 2, seed=3)
    assert head.in_dim == 2 * H
    with pytest.raises(ValueError):
        two_pair_classify(model, images[0], images[1], caps[0], FusionHead(H, 2))
    # a head that weights both halves equally cannot see pair order
    w = head["out.w"]
    w.data[H:] = w.data[:H]
    ab = two_pair_classify(model, images[0], images[1], caps[0], head)
    ba = two_pair_classify(model, images[1], images[0], caps[0], head)
    # equal up to the summation order inside the matmul
    np.testing.assert_allclose(ab, ba, rtol=0, atol=1e-7)
    logits = two_pair_logits(model, images[:2], images[2:4], caps[:2], head)
    assert logits.shape == (2, 2)


# ---- dual encoder ---------------------------------------------------------------------


def test_dual_embeddings_are_unit_and_stable(toy, model):
    _, _, images, caps = toy
    heads = DualHeads(64, seed=0)
    e = dual_encode(model, images[:4], heads, kind="image")
    np.testing.assert_allclose(np.linalg.norm(e, axis=1), 1, atol=1e-6)
    t1 = dual_encode(model, caps[5], heads)
    t2 = dual_encode(model, caps[5], heads)
    assert t1.tobytes() == t2.tobytes()
    assert float(t1.astype(np.float64) @ t1.astype(np.float64)) == pytest.approx(1, abs=1e-6)


def test_dual_text_ignores_images(toy, model):
    _, _, images, caps = toy
    heads = DualHeads(64, seed=0)
    alone = dual_encode(model, caps[7], heads)
    dual_encode(model, images, heads, kind="image")
    assert dual_encode(model, caps[7], heads).tobytes() == alone.tobytes()
    with pytest.raises(ValueError):
        dual_embed(model, fusion_input(model, images[:1], caps[:1]), heads)


def test_dual_text_batch_padding_is_inert(toy, model):
    _, _, _, caps = toy
    heads = DualHeads(64, seed=0)
    short = mdm.TokenSequence([mdm.CLS, 300, mdm.SEP], [1] * 3, "mono-text")
    alone = dual_encode(model, short, heads)
    batched = dual_encode(model, [short, caps[0]], heads, kind="text")[0]
    np.testing.assert_allclose(batched, alone, atol=1e-6)


# ---- retrieval ------------------------------------------------------------------


def _random_index(n, d=8, seed=0):
    e = np.random.default_rng(seed).standard_normal((n, d))
    e /= np.linalg.norm(e, axis=1, keepdims=True)
    return RetrievalIndex([f"id{i:04d}" for i in range(n)], e)


def _oracle(index, q, k):
    scores = [(float(index.embeddings[i] @ q), index.ids[i]) for i in range(len(index))]
    scores.sort(key=lambda s: (-s[0], s[1]))
    return [sid for _, sid in scores[:k]]


def test_retrieve_self_query_ranks_first():
    idx = _random_index(32)
    top = retrieve(idx, idx.embeddings[9], 1)
    assert top[0][0] == "id0009" and top[0][1] == pytest.approx(1.0)


def test_retrieve_full_ranking_is_permutation():
    idx = _random_index(40)
    got = [i for i, _ in retrieve(idx, idx.embeddings[0], 40)]
    assert sorted(got) == sorted(idx.ids)


def test_retrieve_matches_scan_oracle():
    idx = _random_index(256, seed=1)
    rng = np.random.default_rng(2)
    for _ in range(5):
        q = rng.standard_normal(8)
        q /= np.linalg.norm(q)
        for k in (1, 5, 50, 256):
            assert [i for i, _ in retrieve(idx, q, k)] == _oracle(idx, q, k)


def test_retrieve_ties_by_id():
    e = np.tile([[1.0, 0.0]], (4, 1))
    idx = RetrievalIndex(["d", "b", "c", "a"], e)
    assert [i for i, _ in retrieve(idx, np.array([1.0, 0.0]), 4)] == ["a", "b", "c", "d"]


def test_retrieve_errors():
    with pytest.raises(ValueError):
        retrieve(RetrievalIndex([], np.zeros((0, 3))), np.ones(3), 1)
    idx = _random_index(4)
    with pytest.raises(ValueError):
        retrieve(idx, idx.embeddings[0], 5)
    with pytest.raises(ValueError):
        RetrievalIndex(["a", "a"], idx.embeddings[:2])
    with pytest.raises(ValueError):
        RetrievalIndex(["a"], np.ones((1, 3)))


def test_recall_monotone_and_oracle():
    rng = np.random.default_rng(0)
    sim = rng.standard_normal((30, 30))
    r = recall_at_k(sim, ks=(1, 2, 5, 10, 30))
    vals = list(r.values())
    assert vals == sorted(vals) and vals[-1] == 1.0
    ranks = [int((sim[i] > sim[i, i]).sum()) for i in range(30)]
    assert r["R@5"] == np.mean([k < 5 for k in ranks])


# ---- classification by retrieval ---------------------------------------------------


def test_classify_single_label_and_empty(toy, model):
    _, _, images, caps = toy
    heads = DualHeads(64)
    assert classify_by_retrieval(model, heads, images[0], [caps[3]]) == 0
    with pytest.raises(ValueError):
        classify_by_retrieval(model, heads, images[0], [])


def test_classify_is_argmax_of_cosine(toy, model):
    _, _, images, caps = toy
    heads = DualHeads(64, seed=4)
    labels = caps[:8]
    pred = classify_by_retrieval(model, heads, images[:6], labels)
    s = dual_encode(model, images[:6], heads, kind="image").astype(np.float64) @ \
        dual_encode(model, labels, heads, kind="text").astype(np.float64).T
    np.testing.assert_array_equal(pred, s.argmax(1))
    np.testing.assert_array_equal(np.exp(3 * s + 1).argmax(1), s.argmax(1))


# ---- contrastive finetuning --------------------------------------------------------


def _ft(epochs, lr=1e-4, **kw):
    return FinetuneConfig(epochs=epochs, batch_size=16, optim=OptimConfig(
        peak_lr=lr, warmup_steps=2, total_steps=100, beta2=0.999, eps=1e-8), **kw)


def test_zero_epochs_leaves_model_unchanged(toy, model):
    _, _, images, caps = toy
    before = {k: p.data.copy() for k, p in model.params.items()}
    heads = DualHeads(64)
    intermediate_finetune_contrastive(model, heads, images, caps, _ft(0))
    assert all(before[k].tobytes() == model[k].data.tobytes() for k in before)


def test_contrastive_finetune_raises_matched_cosine(toy, model):
    _, _, images, caps = toy
    heads = DualHeads(64)
    start = matched_cosine(model, heads, images, caps)
    intermediate_finetune_contrastive(model, heads, images, caps, _ft(3))
    assert matched_cosine(model, heads, images, caps) > start


# ---- captioning -----------------------------------------------------------------------


def test_caption_mask_rules():
    rng = np.random.default_rng(0)
    assert caption_mask(5, 1.0, rng).all()
    for _ in range(100):
        assert caption_mask(3, 0.01, rng).sum() >= 1
    assert caption_mask(10, 0.6, rng, fixed_fraction=True).sum() == 6
    with pytest.raises(ValueError):
        caption_mask(0, 0.5, rng)


def test_caption_batch_masks_caption_and_sep_only(toy, model):
    cfg, _, images, caps = toy
    inp, flat, targets = caption_batch(model, images[:2], caps[:2], 1.0, np.random.default_rng(0))
    S = cfg.image_len + inp.n_text
    assert (flat % S >= cfg.image_len + 1).all()
    assert inp.image_masked is None
    n = len(caps[0]) - 1
    np.testing.assert_array_equal(targets[:n], caps[0].ids[1:])
    assert targets[n - 1] == mdm.SEP
    assert (inp.text_ids[0, 1:len(caps[0])] == mdm.MASK).all()
    empty = mdm.TokenSequence([mdm.CLS, mdm.SEP], [1, 1], "mono-text")
    with pytest.raises(ValueError):
        caption_finetune_step(model, images[0], empty)


def test_caption_loss_ignores_tokens_right_of_masked_position(toy, model):
    cfg, _, images, caps = toy
    cap = caps[0].ids.copy()
    i = 3  # only caption slot i is supervised
    inp, flat, targets = caption_batch(model, images[:1], [cap], 1.0, np.random.default_rng(0))
    ids = cap.copy()
    ids[i] = mdm.MASK

    def logits_at_i(ids):
        from mwt.multiway import EncoderInput, gather_rows, text_logits
        x = EncoderInput(image_patches=inp.image_patches, text_ids=ids[None])
        h, _ = encode(model, x, "seq2seq")
        return text_logits(model, gather_rows(h, [cfg.image_len + i])).data

    base = logits_at_i(ids)
    for j in range(i + 1, len(ids)):
        changed = ids.copy()
        changed[j] = 400 + j
        assert logits_at_i(changed).tobytes() == base.tobytes()
    changed = ids.copy()
    changed[i - 1] = 400
    assert logits_at_i(changed).tobytes() != base.tobytes()


def test_next_token_logprobs_normalised_and_no_banned(toy, model):
    cfg, _, images, _ = toy
    lp = next_token_logprobs(model, mdm.image_to_patches(images[0], cfg.patch_size), [[300, 301]])
    assert np.exp(lp).sum() == pytest.approx(1.0, abs=1e-9)
    assert np.isneginf(lp[0, [mdm.PAD, mdm.CLS, mdm.MASK]]).all()


def test_beam_one_is_greedy(toy):
    cfg, _, images, _ = toy
    for seed in range(5):
        model = init_model(cfg, seed)
        assert caption_generate(model, images[seed], beam_size=1, max_len=5) == greedy_decode(model, images[seed], 5)


def test_generation_reproducible_and_flagged(toy, model):
    _, _, images, _ = toy
    a = caption_generate(model, images[2], beam_size=3, max_len=4)
    b = caption_generate(model, images[2], beam_size=3, max_len=4)
    assert a == b
    assert mdm.MASK not in a.tokens
    if not a.terminated:
        assert len(a.tokens) == 4
    with pytest.raises(ValueError):
        caption_generate(model, images[2], beam_size=0)
