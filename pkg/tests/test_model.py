import dataclasses
import math

import numpy as np
import pytest
import torch

from oracles import softmax
from vsdn.charset import BOS, EOS, N_CTC, N_DEC, PAD
from vsdn.netcore import VSDN, GeometryError, ModelConfig, SymbolError, tiny_config
from vsdn.netcore.model import target_ids, text_ids


def test_default_geometry_feature_shape():
    # 32x96 -> three 2x2 pools -> 4x12 map; adaptive pooling squeezes height to 1 and keeps 12 frames
    torch.manual_seed(0)
    model = VSDN(ModelConfig()).eval()
    h = model.extract_features(torch.rand(2, 32, 96))
    assert h.shape == (2, 12, 96)
    assert torch.isfinite(h).all()


def test_geometry_mismatch_names_both_shapes(tiny_model):
    with pytest.raises(GeometryError, match="8x16.*10x16"):
        tiny_model.extract_features(torch.zeros(1, 10, 16))


def test_blank_image_gives_finite_features(tiny_model):
    tiny_model.eval()
    h = tiny_model.extract_features(torch.zeros(3, 8, 16))
    assert torch.isfinite(h).all()
    assert torch.equal(h[0], h[1])


def test_identical_images_identical_features(tiny_model):
    tiny_model.eval()
    x = torch.rand(1, 8, 16)
    assert torch.equal(tiny_model.extract_features(torch.cat([x, x])[:1]),
                       tiny_model.extract_features(x))


def test_ctc_rows_are_distributions(tiny_model):
    h = tiny_model.extract_features(torch.rand(4, 8, 16))
    P = tiny_model.ctc_probs(h)
    assert P.shape == (4, 4, N_CTC)
    assert torch.allclose(P.sum(-1), torch.ones(4, 4), atol=1e-6)


def test_uniform_ctc_logits(tiny_model):
    with torch.no_grad():
        tiny_model.ctc.classifier.weight.zero_()
        tiny_model.ctc.classifier.bias.zero_()
    P = tiny_model.ctc_probs(tiny_model.extract_features(torch.rand(1, 8, 16)))
    assert torch.allclose(P, torch.full_like(P, 1 / 37))


GOLDEN_CTC = {  # class -> per-frame probability
    0: [0.025521852944, 0.024883512525, 0.024269103776, 0.023641231313],
    36: [0.019596696116, 0.019607504222, 0.019645343232, 0.019900206837],
}


def test_ctc_golden_values():
    # frozen from the first implementation: tiny config, torch seed 0, fixed input
    torch.manual_seed(0)
    model = VSDN(tiny_config()).double().eval()
    x = torch.linspace(0, 1, 128, dtype=torch.float64).reshape(1, 8, 16)
    P = model.ctc_probs(model.extract_features(x))[0]
    for k, expected in GOLDEN_CTC.items():
        assert np.allclose(P[:, k].detach().numpy(), expected, rtol=0, atol=1e-10)


def test_semantic_encoder_properties(tiny_model):
    a = tiny_model.semantic_encode(["cat", "cat", "cta"])
    assert a.shape == (3, 8)
    assert torch.equal(a[0], a[1])
    assert (a[0] - a[2]).abs().max() > 1e-6


def test_semantic_encoder_zero_recurrent_weights(tiny_model):
    with torch.no_grad():
        for name, p in tiny_model.se.rnn.named_parameters():
            if name.startswith("weight"):
                p.zero_()
    s = tiny_model.semantic_encode(["ab", "zz9", ""])
    assert torch.allclose(s[0], s[1]) and torch.allclose(s[0], s[2])


def test_sd_init_properties(tiny_model):
    s0, e_w = tiny_model.sd_init(torch.zeros(1, 8))
    assert torch.equal(s0[0], tiny_model.sd.init_state.bias)
    assert torch.equal(e_w[0], tiny_model.sd.init_word.bias)
    g = torch.randn(2, 8)
    a, b = tiny_model.sd_init(torch.cat([g[:1], g[:1], g[1:]]))
    assert torch.equal(a[0], a[1]) and torch.equal(b[0], b[1])
    assert not torch.allclose(a[0], a[2]) and not torch.allclose(b[0], b[2])


def test_sd_step_carry_through(tiny_model):
    # saturate the update gate (z -> 1): h' = z*h + (1-z)*n = h
    cell = tiny_model.sd.rnn
    d = cell.hidden_size
    with torch.no_grad():
        cell.weight_ih.zero_()
        cell.weight_hh.zero_()
        cell.bias_ih.zero_()
        cell.bias_hh.zero_()
        cell.bias_ih[d:2 * d] = 100.0
    s_prev = torch.randn(2, d)
    s = tiny_model.sd_step(s_prev, torch.tensor([3, BOS]), torch.randn(2, d))
    assert torch.allclose(s, s_prev, atol=1e-6)


def test_sd_steps_match_batched_gru(tiny_model64):
    m = tiny_model64
    cell = m.sd.rnn
    gru = torch.nn.GRU(cell.input_size, cell.hidden_size, batch_first=True).double()
    with torch.no_grad():
        gru.weight_ih_l0.copy_(cell.weight_ih)
        gru.weight_hh_l0.copy_(cell.weight_hh)
        gru.bias_ih_l0.copy_(cell.bias_ih)
        gru.bias_hh_l0.copy_(cell.bias_hh)
    s0, e_w = m.sd_init(m.semantic_encode(["cab"]))
    ys = torch.tensor([BOS, 2, 0])
    s, states = s0, []
    for y in ys:
        s = m.sd_step(s, y[None], e_w)
        states.append(s)
    inputs = torch.cat([m.embed(ys), e_w.expand(3, -1)], -1)[None]
    ref = gru(inputs, s0[None])[0][0]
    assert torch.allclose(torch.cat(states), ref, atol=1e-6)


def test_symbol_range_checked(tiny_model):
    s = torch.zeros(1, 8)
    with pytest.raises(SymbolError):
        tiny_model.sd_step(s, torch.tensor([BOS + 1]), s)
    with pytest.raises(SymbolError):
        tiny_model.sd_step(s, torch.tensor([-1]), s)


def test_classifiers_are_distributions_and_uniform_at_zero(tiny_model):
    s = torch.randn(5, 8)
    for logits in (tiny_model.sd_classify(s), tiny_model.vd_classify(s), tiny_model.fuse(s, s)):
        p = torch.softmax(logits, -1)
        assert p.shape == (5, N_DEC)
        assert torch.allclose(p.sum(-1), torch.ones(5), atol=1e-6)
    with torch.no_grad():
        for lin in (tiny_model.sd.classifier, tiny_model.fusion):
            lin.weight.zero_()
            lin.bias.zero_()
    for logits in (tiny_model.sd_classify(s), tiny_model.fuse(s, s)):
        assert torch.allclose(torch.softmax(logits, -1), torch.full((5, N_DEC), 1 / N_DEC))
    assert torch.equal(tiny_model.sd_classify(s).argmax(-1), tiny_model.sd_classify(s).argmax(-1))


def test_fusion_permutation_invariance(tiny_model64):
    m = tiny_model64
    sv, ss = torch.randn(3, 8, dtype=torch.float64), torch.randn(3, 8, dtype=torch.float64)
    ref = m.fuse(sv, ss)
    W, b = m.fusion.weight, m.fusion.bias
    # [s_s, s_v] with columns swapped accordingly
    Wp = torch.cat([W[:, 8:], W[:, :8]], 1)
    swapped = torch.cat([ss, sv], -1) @ Wp.T + b
    assert torch.allclose(ref, swapped, atol=1e-12)


def test_attention_sums_to_one_and_uniform_for_constant_features(tiny_model):
    h = torch.randn(2, 4, 8)
    q = torch.randn(2, 8)
    for t in range(4):
        a = tiny_model.vd_attend(q, t, h)
        assert torch.allclose(a.sum(-1), torch.ones(2), atol=1e-6) and (a >= 0).all()
    const = torch.randn(1, 1, 8).expand(2, 4, 8)
    a = tiny_model.vd_attend(q, 1, const)
    assert torch.equal(a, torch.full_like(a, 0.25))


def test_attention_two_way_closed_form():
    cfg = tiny_config(t_max=2, feat_dim=2, sem_dim=2, vis_dim=2, step_dim=1, attn_dim=1)
    m = VSDN(cfg).double()
    u, v, b, w, e = 0.7, -1.3, 0.2, 1.5, 0.4
    with torch.no_grad():
        m.vd.attn_U.copy_(torch.tensor([[u, 0.0, u]], dtype=torch.float64))
        m.vd.attn_V.copy_(torch.tensor([[v, 0.0]], dtype=torch.float64))
        m.vd.attn_b.fill_(b)
        m.vd.attn_W.fill_(w)
        m.vd.step_emb.fill_(e)
    q = torch.tensor([[0.5, 9.0]], dtype=torch.float64)
    h = torch.tensor([[[1.0, 5.0], [-2.0, 5.0]]], dtype=torch.float64)
    c1 = w * math.tanh(u * 0.5 + u * e + v * 1.0 + b)
    c2 = w * math.tanh(u * 0.5 + u * e + v * -2.0 + b)
    p1 = 1 / (1 + math.exp(c2 - c1))
    a = m.vd_attend(q, 0, h)[0]
    assert a[0].item() == pytest.approx(p1, abs=1e-12)
    assert a[1].item() == pytest.approx(1 - p1, abs=1e-12)


def test_glimpse_is_convex_combination(tiny_model):
    v = torch.randn(8)
    h = v.expand(1, 4, 8)
    alpha = torch.softmax(torch.randn(1, 4), -1)
    g, _ = tiny_model.vd_step(alpha, h, torch.zeros(1, 8))
    assert torch.allclose(g[0], v, atol=1e-6)
    h = torch.randn(1, 4, 8)
    g, _ = tiny_model.vd_step(torch.tensor([[0.0, 0.0, 1.0, 0.0]]), h, torch.zeros(1, 8))
    assert torch.equal(g[0], h[0, 2])


def _vd_outputs(model, y_prev):
    torch.manual_seed(1)
    h = torch.randn(2, 4, 8)
    alpha = torch.softmax(torch.randn(2, 4), -1)
    s_prev = torch.randn(2, 8)
    return model.vd_step(alpha, h, s_prev, torch.tensor(y_prev))


def test_decoupled_vd_ignores_previous_symbol(tiny_model):
    g1, s1 = _vd_outputs(tiny_model, [3, 5])
    g2, s2 = _vd_outputs(tiny_model, [EOS, BOS])
    assert torch.equal(g1, g2) and torch.equal(s1, s2)


def test_coupled_vd_depends_on_previous_symbol():
    torch.manual_seed(0)
    m = VSDN(tiny_config(coupled_baseline=True))
    g1, s1 = _vd_outputs(m, [3, 5])
    g2, s2 = _vd_outputs(m, [EOS, BOS])
    assert torch.equal(g1, g2)
    assert not torch.equal(s1, s2)
    star = VSDN(tiny_config(coupled_baseline=True, feed_prev_symbol=False))
    assert star.vd.rnn.input_size == 8
    g1, s1 = _vd_outputs(star, [3, 5])
    g2, s2 = _vd_outputs(star, [EOS, BOS])
    assert torch.equal(s1, s2)


def test_teacher_forced_trace_shapes(tiny_model):
    tr = tiny_model.decode(torch.rand(2, 8, 16), labels=["ab", "c"])
    assert tr.steps == 4
    assert tr.alpha.shape == (2, 4, 4)
    assert torch.allclose(tr.alpha.sum(-1), torch.ones(2, 4), atol=1e-6)
    # label of length L supervises L + 1 steps (characters then EoS)
    supervised = (tr.targets != PAD).sum(1).tolist()
    assert supervised == [3, 2]
    assert tr.targets[0, 2] == EOS


def test_free_running_stops_and_respects_t_max(tiny_model):
    tiny_model.eval()
    with torch.no_grad():
        tiny_model.fusion.bias.zero_()
        tiny_model.fusion.bias[EOS] = 1e3
    tr = tiny_model.decode(torch.rand(3, 8, 16))
    assert tr.steps == 1 and tr.predictions() == ["", "", ""]
    assert tr.emitted_lengths() == [1, 1, 1]
    tiny_model.fusion.bias.data.zero_()
    tr = tiny_model.decode(torch.rand(3, 8, 16))
    assert tr.steps <= 4


def test_query_mode_changes_attention_input():
    sem = VSDN(tiny_config(sem_dim=6))
    vis = VSDN(tiny_config(sem_dim=6, query_mode="previous_visual"))
    assert sem.vd.attn_U.shape[1] == 6 + 4
    assert vis.vd.attn_U.shape[1] == 8 + 4
    with pytest.raises(ValueError):
        tiny_config(query_mode="other")


def test_config_validation_and_round_trip():
    cfg = tiny_config()
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.max_label_len == 3
    with pytest.raises(ValueError):
        ModelConfig(t_max=0)
    with pytest.raises(ValueError):
        ModelConfig(feat_dim=7)
    with pytest.raises(ValueError):
        ModelConfig(pool_layers=9)


def test_text_and_target_ids():
    ids = text_ids(["ab", ""], 3)
    assert ids.tolist() == [[0, 1, PAD], [PAD, PAD, PAD]]
    assert target_ids(["ab"], 4).tolist() == [[0, 1, EOS, PAD]]
    with pytest.raises(ValueError):
        target_ids(["abcd"], 4)


def test_every_model_array_has_a_named_parameter(tiny_model):
    names = dict(tiny_model.named_parameters())
    for n in ("vd.attn_W", "vd.attn_U", "vd.attn_V", "vd.attn_b", "vd.step_emb",
              "sd.init_state.weight", "sd.init_word.weight", "embed.weight",
              "fusion.weight", "fusion.bias", "ctc.classifier.weight", "vd.classifier.weight"):
        assert n in names
    assert names["embed.weight"].shape[0] == BOS + 1
    assert all(torch.isfinite(p).all() for p in names.values())
    assert softmax([0.0, 0.0]).tolist() == [0.5, 0.5]
