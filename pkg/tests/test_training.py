import math

import numpy as np
import pytest

from mwt import mdm, synth
from mwt.checkpoint import load_checkpoint
from mwt.multiway import MultiwayConfig, init_model
from mwt.tensorcore import NonFiniteError, Tensor, grad_check_fn
from mwt.training import (OptimConfig, OptimizerState, PretrainConfig, PretrainData, Schedule,
                          Trainer, TrainingDiverged, adamw_step, clip_gradients, contrastive_loss,
                          label_smoothed_ce, layerwise_lr, lr_at, mdm_loss, param_layer,
                          pretrain_loop)


def _unit(rows):
    rows = np.asarray(rows, dtype=np.float64)
    return Tensor(rows / np.linalg.norm(rows, axis=1, keepdims=True), dtype="f64")


# ---- mdm_loss --------------------------------------------------------------


def test_mdm_loss_uniform_is_log_vocab():
    loss = mdm_loss(Tensor(np.zeros((5, 64))), [3], [2])
    assert float(loss.data) == pytest.approx(math.log(64), abs=1e-6)
    assert math.log(64) == pytest.approx(4.1589, abs=1e-4)


def test_mdm_loss_confident_correct_goes_to_zero():
    logits = np.zeros((3, 10))
    logits[1, 7] = 50.0
    assert float(mdm_loss(Tensor(logits), [7], [1]).data) < 1e-12


def test_mdm_loss_averages_positions():
    rng = np.random.default_rng(0)
    logits = Tensor(rng.standard_normal((6, 12)), dtype="f64")
    a = float(mdm_loss(logits, [4], [1]).data)
    b = float(mdm_loss(logits, [9], [5]).data)
    assert float(mdm_loss(logits, [4, 9], [1, 5]).data) == pytest.approx((a + b) / 2, rel=1e-12)


def test_mdm_loss_needs_positions():
    with pytest.raises(ValueError):
        mdm_loss(Tensor(np.zeros((3, 4))), [], [])


def test_mdm_loss_grad_check():
    logits = Tensor(np.random.default_rng(1).standard_normal((6, 9)), requires_grad=True, dtype="f64")
    err = grad_check_fn(lambda t: mdm_loss(t, [2, 8, 0], [0, 3, 5]), [logits], eps=1e-5)
    assert err < 1e-5


# ---- contrastive_loss -----------------------------------------------------------


def test_contrastive_single_pair_is_zero():
    e = _unit([[1.0, 2.0, 3.0]])
    assert float(contrastive_loss(e, e, 0.07).data) == pytest.approx(0.0, abs=1e-12)


def test_contrastive_orthogonal_pairs_hand_value():
    e = _unit([[1.0, 0.0], [0.0, 1.0]])
    assert float(contrastive_loss(e, e, 1.0).data) == pytest.approx(math.log(1 + math.exp(-1)), abs=1e-12)
    assert math.log(1 + math.exp(-1)) == pytest.approx(0.3133, abs=1e-4)


def test_contrastive_permutation_invariant():
    rng = np.random.default_rng(0)
    img, txt = _unit(rng.standard_normal((6, 5))), _unit(rng.standard_normal((6, 5)))
    perm = rng.permutation(6)
    a = float(contrastive_loss(img, txt, 0.1).data)
    b = float(contrastive_loss(Tensor(img.data[perm], dtype="f64"), Tensor(txt.data[perm], dtype="f64"), 0.1).data)
    assert a == pytest.approx(b, rel=1e-12)


def test_contrastive_learnable_scale_matches_float():
    rng = np.random.default_rng(1)
    img, txt = _unit(rng.standard_normal((4, 3))), _unit(rng.standard_normal((4, 3)))
    scale = Tensor(np.array(1 / 0.07), dtype="f64")
    assert float(contrastive_loss(img, txt, scale).data) == pytest.approx(
        float(contrastive_loss(img, txt, 0.07).data), rel=1e-12)


def test_contrastive_errors():
    with pytest.raises(ValueError):
        contrastive_loss(Tensor(np.zeros((0, 3))), Tensor(np.zeros((0, 3))))
    with pytest.raises(ValueError):
        contrastive_loss(Tensor(np.ones((2, 3))), _unit(np.ones((2, 3))))


def test_contrastive_matched_beats_shuffled():
    rng = np.random.default_rng(2)
    for _ in range(100):
        e = _unit(rng.standard_normal((2, 4)))
        matched = float(contrastive_loss(e, e, 0.5).data)
        swapped = float(contrastive_loss(e, Tensor(e.data[::-1].copy(), dtype="f64"), 0.5).data)
        assert matched < swapped


# ---- label smoothing ----------------------------------------------------------------


def test_label_smoothing_zero_is_plain_ce():
    z = np.array([2.0, -1.0, 0.5, 0.0])
    lse = np.log(np.exp(z).sum())
    assert float(label_smoothed_ce(Tensor(z, dtype="f64"), 2, 0.0).data) == pytest.approx(lse - 0.5)


def test_label_smoothing_uniform_is_log_vocab():
    for eps in (0.0, 0.1, 0.5):
        assert float(label_smoothed_ce(Tensor(np.zeros(7)), 3, eps).data) == pytest.approx(math.log(7), abs=1e-6)


def test_label_smoothing_hand_value():
    z = np.array([10.0, 0.0, 0.0, 0.0])
    lse = np.logaddexp.reduce(z)
    ce = lse - z
    expected = 0.9 * ce[0] + 0.1 * ce.mean()
    got = float(label_smoothed_ce(Tensor(z, dtype="f64"), 0, 0.1).data)
    assert got == pytest.approx(expected, rel=1e-12)


def test_label_smoothing_range():
    with pytest.raises(ValueError):
        label_smoothed_ce(Tensor(np.zeros(3)), 0, 1.0)


# ---- AdamW ------------------------------------------------------------------------


def _p(x):
    return {"w": Tensor(np.array(x, dtype=np.float64), requires_grad=True, dtype="f64")}


def test_adamw_zero_grad_no_decay_is_identity():
    params = _p([1.0, -2.0])
    adamw_step(params, {"w": np.zeros(2)}, OptimizerState(lr=0.1, weight_decay=0.0))
    np.testing.assert_array_equal(params["w"].data, [1.0, -2.0])


def test_adamw_first_step():
    params = _p(0.0)
    st = OptimizerState(lr=0.1, weight_decay=0.0, eps=1e-6)
    adamw_step(params, {"w": np.array(1.0)}, st)
    assert float(params["w"].data) == pytest.approx(-0.1 / (1 + 1e-6), rel=1e-12)
    assert st.t == 1


def test_adamw_decoupled_decay():
    params = _p(1.0)
    adamw_step(params, {"w": np.array(0.0)}, OptimizerState(lr=0.1, weight_decay=0.05))
    assert float(params["w"].data) == pytest.approx(0.995, rel=1e-12)


def test_adamw_non_finite_leaves_state_untouched():
    params = _p([1.0, 2.0])
    st = OptimizerState(lr=0.1)
    adamw_step(params, {"w": np.array([0.5, 0.5])}, st)
    before = (params["w"].data.copy(), st.t, st.m["w"].copy(), st.v["w"].copy())
    with pytest.raises(NonFiniteError):
        adamw_step(params, {"w": np.array([np.nan, 1.0])}, st)
    assert np.array_equal(params["w"].data, before[0]) and st.t == before[1]
    assert np.array_equal(st.m["w"], before[2]) and np.array_equal(st.v["w"], before[3])


def test_adamw_descends_convex_quadratic():
    rng = np.random.default_rng(0)
    A = rng.standard_normal((5, 5))
    Q = A @ A.T + np.eye(5)
    params = _p(rng.standard_normal(5))
    f = lambda x: 0.5 * x @ Q @ x  # noqa: E731
    start = f(params["w"].data)
    st = OptimizerState(lr=0.05, weight_decay=0.0)
    for _ in range(50):
        adamw_step(params, {"w": Q @ params["w"].data}, st)
    assert f(params["w"].data) < start


# ---- schedules ---------------------------------------------------------------------


def test_lr_schedule_points():
    s = Schedule(peak_lr=1e-3, warmup_steps=10_000, total_steps=1_000_000)
    assert lr_at(10_000, s) == 1e-3
    assert lr_at(5_000, s) == pytest.approx(5e-4)
    assert lr_at(0, s) == 0.0
    assert lr_at(505_000, s) == pytest.approx(5e-4)
    assert lr_at(2_000_000, s) == 0.0


def test_lr_schedule_continuous_at_warmup():
    s = Schedule(peak_lr=2e-3, warmup_steps=100, total_steps=1000, floor_lr=1e-5)
    left = s.peak_lr * (100 - 1e-9) / 100
    assert left == pytest.approx(lr_at(100, s), rel=1e-9)
    assert lr_at(101, s) == pytest.approx(s.peak_lr, rel=1e-4)


def test_schedule_validation():
    with pytest.raises(ValueError):
        Schedule(warmup_steps=10, total_steps=10)
    with pytest.raises(ValueError):
        Schedule(warmup_steps=1, total_steps=10, floor_lr=-1)


def test_layerwise_lr():
    assert all(layerwise_lr(1.0, 1.0, l, 4) == 1.0 for l in range(5))
    assert layerwise_lr(1.0, 0.95, 12, 12) == 1.0
    assert layerwise_lr(1.0, 0.8, 0, 4) == pytest.approx(0.4096)
    with pytest.raises(ValueError):
        layerwise_lr(1.0, 0.0, 1, 4)


def test_param_layer_assignment():
    assert param_layer("embed.text", 4) == 0
    assert param_layer("pos.image", 4) == 0
    assert param_layer("layers.3.attn.q.w", 4) == 3
    assert param_layer("pooler.w", 4) == 4
    assert param_layer("head.cls.w", 4) == 4


def test_clip_gradients():
    g = {"a": np.array([6.0, 0.0])}
    out, norm = clip_gradients(g, 3.0)
    assert norm == 6.0
    np.testing.assert_allclose(out["a"], [3.0, 0.0])
    out, norm = clip_gradients({"a": np.array([2.0])}, 3.0)
    assert norm == 2.0 and out["a"][0] == 2.0


# ---- pretraining loop --------------------------------------------------------------


def _tiny_data(cfg, n=24, seed=0):
    rng = np.random.default_rng(seed)
    sentences = [synth.random_sentence(rng) for _ in range(n)]
    vocab = mdm.Vocab.build(sentences, max_size=cfg.text_vocab)
    cb = mdm.VisualCodebook.create(cfg.visual_vocab, cfg.patch_dim, seed=1)
    texts = [mdm.tokenize_text(s, vocab) for s in sentences]
    imgs = [mdm.image_sequence(synth.render_scene(synth.random_scene(rng), rng), cb, cfg.patch_size)
            for _ in range(n)]
    pairs = [mdm.pair_sequence(i, t) for i, t in zip(imgs, texts)]
    return PretrainData(texts, imgs, pairs)


def test_pretrain_loop_runs_and_is_deterministic(tmp_path):
    cfg = MultiwayConfig.toy()
    data = _tiny_data(cfg)
    pc = PretrainConfig(steps=3, quotas=(2, 2, 2), seed=5,
                        optim=OptimConfig(warmup_steps=1, total_steps=3))
    _, m1 = pretrain_loop(init_model(cfg, 0), data, pc, out_dir=tmp_path / "a")
    _, m2 = pretrain_loop(init_model(cfg, 0), data, pc, out_dir=tmp_path / "b")
    assert m1 == m2
    assert (tmp_path / "a" / "metrics.jsonl").read_bytes() == (tmp_path / "b" / "metrics.jsonl").read_bytes()
    assert (tmp_path / "a" / "checkpoint.mwt").read_bytes() == (tmp_path / "b" / "checkpoint.mwt").read_bytes()
    rec = m1[0]
    for key in ("step", "lr", "loss_text", "loss_image", "loss_pair", "grad_norm", "wall_ms"):
        assert key in rec
    assert rec["loss"] == pytest.approx(rec["loss_text"] + rec["loss_image"] + rec["loss_pair"], rel=1e-5)


def test_pretrain_divergence_keeps_last_checkpoint(tmp_path):
    cfg = MultiwayConfig.toy()
    model = init_model(cfg, 0)
    pc = PretrainConfig(steps=6, quotas=(1, 1, 1), save_every=2,
                        optim=OptimConfig(warmup_steps=1, total_steps=6))

    def poison(rec):
        if rec["step"] == 2:
            model["embed.text"].data[:] = np.inf

    with pytest.raises(TrainingDiverged) as e:
        pretrain_loop(model, _tiny_data(cfg, n=6), pc, out_dir=tmp_path, log=poison)
    assert e.value.step == 3
    good = load_checkpoint(e.value.last_checkpoint)
    assert np.isfinite(good.tensors["embed.text"]).all()
    assert not (tmp_path / "checkpoint.mwt").exists()


def test_trainer_layer_decay_scales_steps():
    cfg = MultiwayConfig.toy()
    model = init_model(cfg, 0, dtype="f64")
    tr = Trainer(model.params, OptimConfig(layer_decay=0.5), cfg.num_layers)
    assert tr.lr_scale["embed.text"] == 0.5 ** 4
    assert tr.lr_scale["layers.4.attn.q.w"] == 1.0
    assert "layers.1.attn.q.b" in tr.no_decay and "layers.1.attn.q.w" not in tr.no_decay
