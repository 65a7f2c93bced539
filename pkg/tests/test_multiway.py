import numpy as np
import pytest

from mwt import mdm
from mwt.multiway import (ConfigError, EncoderInput, ModalityTag, MultiwayConfig, block_forward,
                          build_attention_mask, count_params, drop_path_rate_at, encode,
                          init_model, output_scale, param_specs, route)
from mwt.tensorcore import Tensor, apply

V, L = ModalityTag.VISION, ModalityTag.LANGUAGE


def small_config(**kw):
    base = dict(num_layers=4, hidden=8, ffn_inner=16, num_heads=2, vl_expert_layers=1,
                patch_grid=(2, 2), patch_size=2, channels=3, text_vocab=300, visual_vocab=8,
                max_seq=16, drop_path_rate=0.1)
    base.update(kw)
    return MultiwayConfig(**base)


# ---- config and init ---------------------------------------------------------


def test_config_validation():
    with pytest.raises(ConfigError):
        small_config(hidden=9).validate()
    with pytest.raises(ConfigError):
        small_config(vl_expert_layers=5).validate()
    with pytest.raises(ConfigError):
        small_config(ffn_inner=0).validate()
    with pytest.raises(ConfigError):
        init_model(small_config(num_heads=3))


def test_paper_config_grid():
    cfg = MultiwayConfig.paper()
    assert cfg.patch_grid == (16, 16) and cfg.patch_size * 16 == 224
    assert (cfg.num_layers, cfg.hidden, cfg.ffn_inner, cfg.num_heads, cfg.vl_expert_layers) == \
        (40, 1408, 6144, 16, 3)


def test_vl_experts_only_in_top_layers():
    model = init_model(MultiwayConfig.toy(), 0)
    names = set(model.params)
    assert "layers.4.VL.fc1.w" in names
    for layer in (1, 2, 3):
        assert f"layers.{layer}.VL.fc1.w" not in names
        assert f"layers.{layer}.V.fc1.w" in names and f"layers.{layer}.L.fc1.w" in names
    # one attention copy per layer
    assert sum(1 for n in names if n.startswith("layers.1.attn.") and n.endswith(".w")) == 4


def test_init_is_deterministic():
    a = init_model(MultiwayConfig.toy(), 7)
    b = init_model(MultiwayConfig.toy(), 7)
    c = init_model(MultiwayConfig.toy(), 8)
    assert all(a[k].data.tobytes() == b[k].data.tobytes() for k in a.params)
    assert a["layers.1.attn.q.w"].data.tobytes() != c["layers.1.attn.q.w"].data.tobytes()


def test_init_ranges_and_rescale():
    model = init_model(MultiwayConfig.toy(), 0)
    assert output_scale(8) == 0.25
    for name, _, kind in param_specs(model.config):
        arr = model[name].data
        if kind == "gain":
            assert np.all(arr == 1)
        elif kind == "bias":
            assert np.all(arr == 0)
        else:
            bound = 0.02
            if name.endswith(("attn.o.w", "fc2.w")):
                bound *= output_scale(int(name.split(".")[1]))
            assert np.abs(arr).max() <= bound + 1e-9


def test_layer1_output_std_is_base_over_sqrt2():
    cfg = MultiwayConfig(num_layers=1, hidden=256, ffn_inner=512, num_heads=4, vl_expert_layers=0)
    model = init_model(cfg, 0)
    base = model["layers.1.V.fc1.w"].data.std()
    np.testing.assert_allclose(model["layers.1.V.fc2.w"].data.std(), base / np.sqrt(2), rtol=0.02)


# ---- routing ---------------------------------------------------------------


def test_route_examples():
    cfg = small_config()
    assert route([V, V, L, L], 1, "fusion", cfg) == ["V", "V", "L", "L"]
    assert route([V, V, L, L], 4, "fusion", cfg) == ["VL"] * 4
    for layer in range(1, 5):
        assert route([L, L, L], layer, "language-encoder", cfg) == ["L"] * 3
    assert route([V, L], 4, "seq2seq", cfg) == ["VL", "VL"]


def test_route_errors():
    cfg = small_config()
    with pytest.raises(ValueError):
        route([V, L], 0, "fusion", cfg)
    with pytest.raises(ValueError):
        route([V, L], 1, "sideways", cfg)
    with pytest.raises(ValueError):
        route([V, L], 1, "dual", cfg)
    with pytest.raises(ValueError):
        route([L], 1, "vision-encoder", cfg)
    # with no VL experts fusion keeps modality routing at every layer
    assert route([V, L], 4, "fusion", small_config(vl_expert_layers=0)) == ["V", "L"]


def test_block_rejects_missing_expert():
    model = init_model(small_config(), 0, dtype="f64")
    h = Tensor(np.zeros((3, 8)), dtype="f64")
    with pytest.raises(ValueError):
        block_forward(model, 1, h, np.ones((3, 3), bool), ["VL"] * 3)


# ---- attention masks ---------------------------------------------------------


def test_seq2seq_mask_example():
    got = build_attention_mask("seq2seq", 2, 2).astype(int)
    np.testing.assert_array_equal(got, [[1, 1, 0, 0], [1, 1, 0, 0], [1, 1, 1, 0], [1, 1, 1, 1]])


def test_mask_degenerate_cases():
    assert build_attention_mask("seq2seq", 3, 0).all()
    np.testing.assert_array_equal(build_attention_mask("seq2seq", 0, 4), np.tril(np.ones((4, 4), bool)))
    assert build_attention_mask("fusion", 2, 3).all()


# ---- block and encode --------------------------------------------------------


def test_single_token_block_has_no_cross_terms():
    model = init_model(small_config(), 1, dtype="f64")
    rng = np.random.default_rng(0)
    x = rng.standard_normal((1, 8))
    out = block_forward(model, 1, Tensor(x, dtype="f64"), np.ones((1, 1), bool), ["L"]).data
    # attention over one token returns its own value projection
    p = lambda n: model[n].data
    def ln(h, pre):
        mu, var = h.mean(-1, keepdims=True), h.var(-1, keepdims=True)
        return (h - mu) / np.sqrt(var + 1e-5) * p(pre + ".g") + p(pre + ".b")
    h = x + (ln(x, "layers.1.L.ln_attn") @ p("layers.1.attn.v.w") + p("layers.1.attn.v.b")) \
        @ p("layers.1.attn.o.w") + p("layers.1.attn.o.b")
    f = ln(h, "layers.1.L.ln_ffn") @ p("layers.1.L.fc1.w") + p("layers.1.L.fc1.b")
    f = apply("gelu", Tensor(f, dtype="f64")).data
    np.testing.assert_allclose(out, h + f @ p("layers.1.L.fc2.w") + p("layers.1.L.fc2.b"), atol=1e-12)


def test_block_shape_errors():
    model = init_model(small_config(), 0)
    h = Tensor(np.zeros((3, 8), np.float32))
    with pytest.raises(Exception):
        block_forward(model, 1, h, np.ones((2, 2), bool), ["L"] * 3)
    with pytest.raises(Exception):
        block_forward(model, 1, h, np.ones((3, 3), bool), ["L"] * 2)


def _text_input(ids):
    ids = np.asarray(ids)[None]
    return EncoderInput(text_ids=ids, text_pad=np.zeros(ids.shape, bool))


def test_text_parity_fusion_vs_language_below_top():
    cfg = MultiwayConfig.toy()
    model = init_model(cfg, 3)
    rng = np.random.default_rng(0)
    h0 = Tensor(rng.standard_normal((2, 9, cfg.hidden)).astype(np.float32))
    mask = np.ones((9, 9), bool)
    tags = [L] * 9
    a = b = h0
    for layer in range(1, cfg.num_layers - cfg.vl_expert_layers + 1):
        a = block_forward(model, layer, a, mask, route(tags, layer, "fusion", cfg))
        b = block_forward(model, layer, b, mask, route(tags, layer, "language-encoder", cfg))
        assert a.data.tobytes() == b.data.tobytes()


def test_empty_text_encodes():
    model = init_model(MultiwayConfig.toy(), 0)
    h, pooled = encode(model, _text_input([mdm.CLS, mdm.SEP]), "language-encoder")
    assert h.shape == (1, 2, 64) and np.isfinite(pooled.data).all()


def test_fusion_sequence_length():
    cfg = MultiwayConfig.toy()
    model = init_model(cfg, 0)
    patches = np.random.default_rng(0).random((1, cfg.num_patches, cfg.patch_dim))
    inp = EncoderInput(image_patches=patches, text_ids=np.array([[1, 300, 301, 2]]),
                       text_pad=np.zeros((1, 4), bool))
    h, _ = encode(model, inp, "fusion")
    assert h.shape[1] == 1 + cfg.num_patches + 4


def test_encode_deterministic_and_too_long():
    cfg = MultiwayConfig.toy()
    model = init_model(cfg, 0)
    inp = _text_input([1, 300, 301, 302, 2])
    p1 = encode(model, inp, "language-encoder")[1].data
    p2 = encode(model, inp, "language-encoder")[1].data
    assert p1.tobytes() == p2.tobytes()
    with pytest.raises(Exception):
        encode(model, _text_input(np.ones(cfg.text_max_len + 1, int)), "language-encoder")


def test_stochastic_depth_ramp_and_eval_identity():
    cfg = MultiwayConfig.toy()
    assert drop_path_rate_at(cfg, 4) == pytest.approx(0.1)
    assert drop_path_rate_at(cfg, 2) == pytest.approx(0.05)
    model = init_model(cfg, 0)
    inp = _text_input([1, 300, 301, 2])
    eval_out = encode(model, inp, "language-encoder")[0].data
    no_rate = encode(model, inp, "language-encoder", rng=np.random.default_rng(0), drop_path=0.0)[0].data
    assert eval_out.tobytes() == no_rate.tobytes()
    trained = encode(model, inp, "language-encoder", rng=np.random.default_rng(1), drop_path=0.9)[0].data
    assert not np.array_equal(trained, eval_out)


# ---- parameter accounting ----------------------------------------------------


def test_count_params_paper():
    c = count_params(MultiwayConfig.paper())
    assert c["V-FFN"] == c["L-FFN"] == 692_362_240
    assert c["VL-FFN"] == 51_927_168
    assert c["shared attention"] == 317_419_520


def test_count_params_small_hand_values():
    c = count_params(small_config())
    assert c["V-FFN"] == c["L-FFN"] == 1_120
    assert c["shared attention"] == 1_152
    assert count_params(small_config(vl_expert_layers=0))["VL-FFN"] == 0


@pytest.mark.parametrize("cfg", [MultiwayConfig.toy(), small_config(), small_config(vl_expert_layers=0)])
def test_count_params_matches_instantiated(cfg):
    model = init_model(cfg, 0)
    assert model.num_parameters() == count_params(cfg)["total"]
