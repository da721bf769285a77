import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from davi import gradcheck
from davi import model as M
from davi import tensor as T
from davi.data import VOCAB
from davi.tensor import Tensor


def closed_form_count(c: M.ModelConfig) -> int:
    d, m = c.d_model, c.ffn_mult
    attn = 4 * (d * d + d)
    ffn = d * m * d + m * d + m * d * d + d
    ln = 2 * d
    enc_block = attn + ffn + 2 * ln
    xattn_block = 2 * attn + ffn + 3 * ln
    seg = (d // 2) * d * 9 + d // 2 + (d // 4) * (d // 2) * 9 + d // 4 + d // 4 + 1
    ve = c.patch_dim * d + d + c.n_patches * d + c.ve_layers * enc_block + c.lvd_levels * ln
    vle = c.text_vocab_size * d + c.max_question_len * d + c.vle_layers * xattn_block + ln
    ld = c.answer_vocab_size * d + (c.max_answer_len - 1) * d + c.ld_layers * xattn_block + ln
    ld += d * c.answer_vocab_size + c.answer_vocab_size
    lvd = c.lvd_levels * (d * d + d + ln + attn) + ln
    return ve + vle + ld + lvd + seg


def random_inputs(cfg, rng, batch=None, n_valid=None):
    shape = (3, cfg.image_size, cfg.image_size) if batch is None else (batch, 3, cfg.image_size, cfg.image_size)
    img = rng.uniform(0, 1, size=shape)
    lq = cfg.max_question_len
    n_valid = n_valid or lq - 1
    q = np.full(lq if batch is None else (batch, lq), VOCAB.pad)
    body = rng.integers(4, cfg.text_vocab_size, size=q[..., :n_valid].shape)
    q[..., :n_valid] = body
    q[..., 0] = VOCAB.bos
    return img, q, q != VOCAB.pad


# --- init -----------------------------------------------------------------


def test_init_deterministic():
    cfg = M.tiny_config()
    a, b = M.init_params(cfg, 3), M.init_params(cfg, 3)
    assert list(a) == list(b)
    for k in a:
        assert a[k].data.tobytes() == b[k].data.tobytes()


def test_default_patch_projection_shape():
    assert M.param_manifest(M.ModelConfig())["ve.patch_embed.weight"] == (3 * 8 * 8, 128)


def test_default_param_count_matches_closed_form():
    cfg = M.ModelConfig()
    assert M.init_params(cfg, 0).count() == closed_form_count(cfg)


def test_init_statistics():
    p = M.init_params(M.ModelConfig(), 0)
    w = p["ve.block0.ffn.fc1.weight"].data
    assert abs(w.std() - 0.02) < 1e-3
    assert not p["ve.block0.ffn.fc1.bias"].data.any()
    assert (p["vle.ln_out.gain"].data == 1).all()


@pytest.mark.parametrize(
    "bad",
    [dict(image_size=60), dict(d_model=130), dict(lvd_levels=7), dict(n_heads=3), dict(max_answer_len=1)],
)
def test_invalid_config_rejected(bad):
    with pytest.raises(T.ConfigurationError):
        M.init_params(M.ModelConfig(**bad), 0)


def test_default_taps():
    assert M.ModelConfig().taps == (2, 4, 6)


# --- visual encoder -------------------------------------------------------


def test_ve_default_shapes(rng):
    cfg = M.ModelConfig()
    levels = M.ve_forward(M.init_params(cfg, 0), rng.uniform(size=(3, 64, 64)))
    assert [l.shape for l in levels] == [(64, 128)] * 3


def test_ve_wrong_image_size(rng):
    cfg = M.tiny_config()
    with pytest.raises(T.DimensionError):
        M.ve_forward(M.init_params(cfg, 0), rng.uniform(size=(3, 24, 24)))


def permute_patches(img, perm, patch):
    c, h, w = img.shape
    g = h // patch
    blocks = img.reshape(c, g, patch, g, patch).transpose(1, 3, 0, 2, 4).reshape(g * g, c, patch, patch)
    blocks = blocks[perm]
    return blocks.reshape(g, g, c, patch, patch).transpose(2, 0, 3, 1, 4).reshape(c, h, w)


def test_ve_permutation_equivariance_without_positions(rng):
    cfg = M.tiny_config(image_size=24)
    p = M.init_params(cfg, 1)
    p["ve.pos_embed"].data[:] = 0
    img = rng.uniform(size=(3, 24, 24))
    perm = rng.permutation(cfg.n_patches)
    a = M.ve_forward(p, img)
    b = M.ve_forward(p, permute_patches(img, perm, cfg.patch_size))
    for la, lb in zip(a, b):
        np.testing.assert_allclose(la.data[perm], lb.data, atol=1e-10)


# --- hand-rolled oracles ----------------------------------------------------


def o_ln(v, g, b):
    mu = sum(v) / len(v)
    var = sum((x - mu) ** 2 for x in v) / len(v)
    return [(x - mu) / math.sqrt(var + 1e-5) * gi + bi for x, gi, bi in zip(v, g, b)]


def o_lin(v, w, b):
    return [sum(v[i] * w[i][j] for i in range(len(v))) + b[j] for j in range(len(b))]


def o_gelu(x):
    return 0.5 * x * (1 + math.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x**3)))


def o_attn(P, name, qs, kvs, key_valid=None, causal=False):
    """Single-head attention with explicit loops."""
    w = lambda n: P[f"{name}.{n}.weight"].data.tolist()
    b = lambda n: P[f"{name}.{n}.bias"].data.tolist()
    Q = [o_lin(x, w("q_proj"), b("q_proj")) for x in qs]
    K = [o_lin(x, w("k_proj"), b("k_proj")) for x in kvs]
    V = [o_lin(x, w("v_proj"), b("v_proj")) for x in kvs]
    d = len(Q[0])
    out = []
    for i, q in enumerate(Q):
        allowed = [j for j in range(len(K)) if (key_valid is None or key_valid[j]) and (not causal or j <= i)]
        s = {j: sum(a * c for a, c in zip(q, K[j])) / math.sqrt(d) for j in allowed}
        mx = max(s.values())
        e = {j: math.exp(v - mx) for j, v in s.items()}
        z = sum(e.values())
        ctx = [sum(e[j] / z * V[j][t] for j in allowed) for t in range(d)]
        out.append(o_lin(ctx, w("o_proj"), b("o_proj")))
    return out


def o_block(P, name, xs, valid=None, causal=False, mem=None, mem_valid=None):
    g = lambda n: P[f"{name}.{n}.gain"].data.tolist()
    bb = lambda n: P[f"{name}.{n}.bias"].data.tolist()
    h = [o_ln(x, g("ln1"), bb("ln1")) for x in xs]
    a = o_attn(P, f"{name}.attn", h, h, valid, causal)
    xs = [[u + v for u, v in zip(x, y)] for x, y in zip(xs, a)]
    if mem is not None:
        h = [o_ln(x, g("ln_cross"), bb("ln_cross")) for x in xs]
        a = o_attn(P, f"{name}.cross", h, mem, mem_valid)
        xs = [[u + v for u, v in zip(x, y)] for x, y in zip(xs, a)]
    w1, b1 = P[f"{name}.ffn.fc1.weight"].data.tolist(), P[f"{name}.ffn.fc1.bias"].data.tolist()
    w2, b2 = P[f"{name}.ffn.fc2.weight"].data.tolist(), P[f"{name}.ffn.fc2.bias"].data.tolist()
    out = []
    for x in xs:
        h = o_ln(x, g("ln2"), bb("ln2"))
        f = o_lin([o_gelu(v) for v in o_lin(h, w1, b1)], w2, b2)
        out.append([u + v for u, v in zip(x, f)])
    return out


def hand_set(cfg, seed, scale=0.5):
    p = M.init_params(cfg, 0)
    r = np.random.default_rng(seed)
    for t in p.values():
        t.data = r.standard_normal(t.shape) * scale
    return p


ORACLE_CFG = M.tiny_config(d_model=4, n_heads=1, ve_layers=1, vle_layers=1, ld_layers=1, lvd_levels=1, max_question_len=2)


def test_ve_matches_attention_oracle(rng):
    cfg = ORACLE_CFG
    P = hand_set(cfg, 5)
    img = rng.uniform(size=(3, 16, 16))
    patches = []
    for gy in range(2):
        for gx in range(2):
            patches.append([img[c, gy * 8 + i, gx * 8 + j] for c in range(3) for i in range(8) for j in range(8)])
    pw, pb = P["ve.patch_embed.weight"].data.tolist(), P["ve.patch_embed.bias"].data.tolist()
    pos = P["ve.pos_embed"].data.tolist()
    xs = [[a + b for a, b in zip(o_lin(v, pw, pb), pos[i])] for i, v in enumerate(patches)]
    xs = o_block(P, "ve.block0", xs)
    expected = [o_ln(x, P["ve.tap0.ln.gain"].data.tolist(), P["ve.tap0.ln.bias"].data.tolist()) for x in xs]
    got = M.ve_forward(P, img)[0].data
    np.testing.assert_allclose(got, expected, atol=1e-10)


def test_vle_matches_attention_oracle(rng):
    cfg = ORACLE_CFG
    P = hand_set(cfg, 6)
    vis = rng.standard_normal((2, 4))
    tokens = np.array([VOCAB.bos, 7])
    emb, pos = P["vle.tok_embed"].data, P["vle.pos_embed"].data
    xs = [(emb[t] + pos[i]).tolist() for i, t in enumerate(tokens)]
    xs = o_block(P, "vle.block0", xs, valid=[True, True], mem=vis.tolist())
    expected = [o_ln(x, P["vle.ln_out.gain"].data.tolist(), P["vle.ln_out.bias"].data.tolist()) for x in xs]
    got = M.vle_forward(P, tokens, None, Tensor(vis)).features.data
    np.testing.assert_allclose(got, expected, atol=1e-10)


def test_lvd_matches_attention_oracle(rng):
    cfg = M.tiny_config(d_model=4, n_heads=1, ve_layers=1, lvd_levels=1, image_size=16, patch_size=8)
    P = hand_set(cfg, 7)
    level = rng.standard_normal((4, 4))
    ev = rng.standard_normal((2, 4))
    valid = np.array([True, True])
    w, b = P["lvd.level0.proj.weight"].data.tolist(), P["lvd.level0.proj.bias"].data.tolist()
    vs = [o_lin(x, w, b) for x in level.tolist()]
    g, bb = P["lvd.level0.ln_cross.gain"].data.tolist(), P["lvd.level0.ln_cross.bias"].data.tolist()
    a = o_attn(P, "lvd.level0.cross", [o_ln(v, g, bb) for v in vs], ev.tolist(), valid)
    fused = [o_ln([x + y for x, y in zip(v, u)], P["lvd.ln_fuse.gain"].data.tolist(), P["lvd.ln_fuse.bias"].data.tolist()) for v, u in zip(vs, a)]
    expected = np.array(fused).T.reshape(4, 2, 2)
    got = M.lvd_forward(P, [Tensor(level)], M.EvidenceFeatures(Tensor(ev), valid)).data
    np.testing.assert_allclose(got, expected, atol=1e-10)


# --- VLE ---------------------------------------------------------------------


def test_vle_shape_independent_of_image(rng):
    cfg = M.tiny_config()
    p = M.init_params(cfg, 0)
    for _ in range(2):
        img, q, v = random_inputs(cfg, rng)
        ev = M.vle_forward(p, q, v, M.ve_forward(p, img)[-1])
        assert ev.features.shape == (cfg.max_question_len, cfg.d_model)


def test_vle_pad_positions_get_zero_weight(rng):
    cfg = M.tiny_config()
    p = M.init_params(cfg, 0)
    q = np.array([VOCAB.bos] + [VOCAB.pad] * (cfg.max_question_len - 1))
    valid = q != VOCAB.pad
    x = M._text_embed(p, "vle", q[None], cfg.text_vocab_size)
    h = M._ln(p, "vle.block0.ln1", x)
    _, w = M.attention(p, "vle.block0.attn", h, h, key_valid=valid[None], return_weights=True)
    assert np.all(w.data[0, :, 0, 1:] == 0.0)
    np.testing.assert_allclose(w.data[0, :, 0, 0], 1.0)


def test_vle_truncation_flag(rng):
    cfg = M.tiny_config()
    p = M.init_params(cfg, 0)
    vis = Tensor(rng.standard_normal((cfg.n_patches, cfg.d_model)))
    ev = M.vle_forward(p, np.full(cfg.max_question_len + 3, 5), None, vis)
    assert ev.truncated and ev.features.shape[0] == cfg.max_question_len


# --- LD ----------------------------------------------------------------------


def test_ld_teacher_forced_shape_and_greedy_determinism(rng):
    cfg = M.tiny_config()
    p = M.init_params(cfg, 2)
    img, q, v = random_inputs(cfg, rng)
    out = M.davi_forward(p, img, q, v, answer_inputs=np.array([VOCAB.bos, 9]))
    assert out.answer_logits.shape == (2, cfg.answer_vocab_size)
    a = M.ld_decode(p, out.evidence)
    b = M.ld_decode(p, out.evidence)
    assert a == b and 1 <= len(a) <= cfg.max_answer_len - 1


def test_ld_causality_probe(rng):
    cfg = M.tiny_config(max_answer_len=6)
    p = M.init_params(cfg, 2)
    img, q, v = random_inputs(cfg, rng)
    ev = M.vle_forward(p, q, v, M.ve_forward(p, img)[-1])
    base = rng.integers(4, cfg.answer_vocab_size, size=cfg.max_answer_len - 1)
    ref = M.ld_logits(p, ev, base).data
    for t in range(len(base)):
        pert = base.copy()
        pert[t] = (pert[t] + 1 - 4) % (cfg.answer_vocab_size - 4) + 4
        got = M.ld_logits(p, ev, pert).data
        np.testing.assert_array_equal(got[:t], ref[:t])
        assert np.abs(got[t:] - ref[t:]).max() > 0


# --- LVD + segmentor ---------------------------------------------------------


def test_lvd_default_shape(rng):
    cfg = M.ModelConfig()
    p = M.init_params(cfg, 0)
    img, q, v = random_inputs(cfg, rng)
    levels = M.ve_forward(p, img)
    fused = M.lvd_forward(p, levels, M.vle_forward(p, q, v, levels[-1]))
    assert fused.shape == (128, 8, 8)
    assert M.segment_head(p, fused).shape == (64, 64)


def test_lvd_level_count_mismatch(rng):
    cfg = M.tiny_config()
    p = M.init_params(cfg, 0)
    ev = M.EvidenceFeatures(Tensor(np.zeros((5, 16))), np.ones(5, bool))
    with pytest.raises(T.DimensionError):
        M.lvd_forward(p, [Tensor(np.zeros((4, 16)))], ev)


def test_lvd_zero_evidence_reduces_to_bias_path(rng):
    cfg = M.tiny_config()
    p = hand_set(cfg, 8, scale=0.3)
    levels = [Tensor(rng.standard_normal((cfg.n_patches, cfg.d_model))) for _ in range(cfg.lvd_levels)]
    ev = M.EvidenceFeatures(Tensor(np.zeros((cfg.max_question_len, cfg.d_model))), np.ones(cfg.max_question_len, bool))
    got = M.lvd_forward(p, levels, ev).data
    total = 0
    for i, lv in enumerate(levels):
        proj = lv.data @ p[f"lvd.level{i}.proj.weight"].data + p[f"lvd.level{i}.proj.bias"].data
        bias_path = p[f"lvd.level{i}.cross.v_proj.bias"].data @ p[f"lvd.level{i}.cross.o_proj.weight"].data
        total = total + proj + bias_path + p[f"lvd.level{i}.cross.o_proj.bias"].data
    mu = total.mean(-1, keepdims=True)
    var = total.var(-1, keepdims=True)
    fused = (total - mu) / np.sqrt(var + 1e-5) * p["lvd.ln_fuse.gain"].data + p["lvd.ln_fuse.bias"].data
    np.testing.assert_allclose(got, fused.T.reshape(cfg.d_model, cfg.grid, cfg.grid), atol=1e-10)


def test_segment_head_zero_input_is_constant():
    cfg = M.tiny_config(image_size=32)
    p = hand_set(cfg, 9)
    out = M.segment_head(p, Tensor(np.zeros((cfg.d_model, cfg.grid, cfg.grid)))).data
    assert out.shape == (32, 32)
    np.testing.assert_allclose(out, out[0, 0], atol=1e-12)


def test_segment_head_matches_composed_oracles(rng):
    from test_tensor import naive_conv

    cfg = M.tiny_config(image_size=32)
    p = hand_set(cfg, 10)
    x = rng.standard_normal((cfg.d_model, cfg.grid, cfg.grid))
    h = naive_conv(x, p["seg.conv1.weight"].data, pad=1, edge=True) + p["seg.conv1.bias"].data[:, None, None]
    h = np.vectorize(o_gelu)(h)
    h = naive_conv(h, p["seg.conv2.weight"].data, pad=1, edge=True) + p["seg.conv2.bias"].data[:, None, None]
    h = np.vectorize(o_gelu)(h)
    h = naive_conv(h, p["seg.conv3.weight"].data) + p["seg.conv3.bias"].data[:, None, None]
    g, n = cfg.grid, cfg.image_size

    def src(o):
        return min(max((o + 0.5) * g / n - 0.5, 0.0), g - 1)

    up = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            y, xx = src(i), src(j)
            y0, x0 = int(math.floor(y)), int(math.floor(xx))
            y1, x1 = min(y0 + 1, g - 1), min(x0 + 1, g - 1)
            fy, fx = y - y0, xx - x0
            up[i, j] = (
                h[0, y0, x0] * (1 - fy) * (1 - fx) + h[0, y0, x1] * (1 - fy) * fx + h[0, y1, x0] * fy * (1 - fx) + h[0, y1, x1] * fy * fx
            )
    np.testing.assert_allclose(M.segment_head(p, Tensor(x)).data, up, atol=1e-10)


# --- full models -------------------------------------------------------------


def test_davi_default_output_shapes(rng):
    cfg = M.ModelConfig()
    p = M.init_params(cfg, 0)
    img, q, v = random_inputs(cfg, rng)
    out = M.davi_forward(p, img, q, v, answer_inputs=np.array([VOCAB.bos, 5]))
    assert out.answer_logits.shape == (2, cfg.answer_vocab_size)
    assert out.mask_logits.shape == (64, 64)


def tiny_loss(p, img, q, v):
    from davi.train import compute_loss

    out = M.davi_forward(p, img, q, v, answer_inputs=np.array([VOCAB.bos, 9]))
    gt = (np.arange(16 * 16).reshape(16, 16) % 3 == 0).astype(float)
    return compute_loss(out.answer_logits, np.array([9, VOCAB.eos]), out.mask_logits, gt).total


def test_every_parameter_receives_gradient(rng):
    cfg = M.tiny_config()
    p = hand_set(cfg, 11, scale=0.3)
    img, q, v = random_inputs(cfg, rng)
    T.backward(tiny_loss(p, img, q, v))
    dead = [k for k, t in p.items() if t.grad is None or not np.any(t.grad)]
    assert dead == []


def test_tiny_end_to_end_gradcheck(rng):
    cfg = M.tiny_config()
    p = hand_set(cfg, 12, scale=0.3)
    img, q, v = random_inputs(cfg, rng)
    failures = gradcheck.check(lambda: tiny_loss(p, img, q, v), list(p.values()), rng=rng, max_coords=4)
    assert failures == []


def test_baseline_shape_determinism_and_parity(rng):
    cfg = M.ModelConfig()
    img, q, v = random_inputs(cfg, rng)
    a = M.baseline_forward(M.init_baseline_params(cfg, 4), img, q, v).data
    b = M.baseline_forward(M.init_baseline_params(cfg, 4), img, q, v).data
    assert a.shape == (64, 64)
    assert a.tobytes() == b.tobytes()
    ratio = M.init_baseline_params(cfg, 0).count() / M.init_params(cfg, 0).count()
    assert 0.9 <= ratio <= 1.1


def test_pad_embedding_invariance(rng):
    cfg = M.tiny_config(max_question_len=7)
    p = hand_set(cfg, 13, scale=0.3)
    img, q, v = random_inputs(cfg, rng, n_valid=4)
    ref = M.davi_forward(p, img, q, v)
    bp = M.init_baseline_params(cfg, 1)
    ref_b = M.baseline_forward(bp, img, q, v).data
    for _ in range(3):
        p["vle.tok_embed"].data[VOCAB.pad] = rng.standard_normal(cfg.d_model) * 5
        bp["le.tok_embed"].data[VOCAB.pad] = rng.standard_normal(cfg.d_model) * 5
        out = M.davi_forward(p, img, q, v)
        np.testing.assert_array_equal(out.answer_logits.data, ref.answer_logits.data)
        np.testing.assert_array_equal(out.mask_logits.data, ref.mask_logits.data)
        np.testing.assert_array_equal(M.baseline_forward(bp, img, q, v).data, ref_b)


def test_batched_matches_single(rng):
    cfg = M.tiny_config()
    p = hand_set(cfg, 14, scale=0.3)
    img, q, v = random_inputs(cfg, rng, batch=3)
    batched = M.davi_forward(p, img, q, v, answer_inputs=np.array([VOCAB.bos, 5]))
    for i in range(3):
        single = M.davi_forward(p, img[i], q[i], v[i], answer_inputs=np.array([VOCAB.bos, 5]))
        np.testing.assert_allclose(batched.mask_logits.data[i], single.mask_logits.data, atol=1e-12)
        np.testing.assert_allclose(batched.answer_logits.data[i], single.answer_logits.data, atol=1e-12)


@st.composite
def configs(draw):
    heads = draw(st.sampled_from([1, 2, 4]))
    d = heads * 4 * draw(st.integers(1, 2))
    patch = draw(st.sampled_from([4, 8]))
    grid = draw(st.integers(1, 3))
    ve = draw(st.integers(1, 3))
    return M.ModelConfig(
        image_size=patch * grid, patch_size=patch, d_model=d, n_heads=heads,
        ve_layers=ve, vle_layers=draw(st.integers(1, 2)), ld_layers=draw(st.integers(1, 2)),
        lvd_levels=draw(st.integers(1, ve)), max_question_len=draw(st.integers(2, 6)),
        max_answer_len=draw(st.integers(2, 4)), ffn_mult=draw(st.integers(1, 4)),
    )


@settings(max_examples=25, deadline=None)
@given(cfg=configs(), seed=st.integers(0, 1000))
def test_shape_contracts_hold_for_random_configs(cfg, seed):
    rng = np.random.default_rng(seed)
    p = M.init_params(cfg, seed)
    img, q, v = random_inputs(cfg, rng, n_valid=max(1, cfg.max_question_len - 1))
    levels = M.ve_forward(p, img)
    assert [l.shape for l in levels] == [(cfg.n_patches, cfg.d_model)] * cfg.lvd_levels
    ev = M.vle_forward(p, q, v, levels[-1])
    assert ev.features.shape == (cfg.max_question_len, cfg.d_model)
    ans_in = np.full(cfg.max_answer_len - 1, VOCAB.bos)
    assert M.ld_logits(p, ev, ans_in).shape == (cfg.max_answer_len - 1, cfg.answer_vocab_size)
    fused = M.lvd_forward(p, levels, ev)
    assert fused.shape == (cfg.d_model, cfg.grid, cfg.grid)
    assert M.segment_head(p, fused).shape == (cfg.image_size, cfg.image_size)
    assert M.init_params(cfg, seed).count() == closed_form_count(cfg)
    assert M.baseline_forward(M.init_baseline_params(cfg, seed), img, q, v).shape == (cfg.image_size, cfg.image_size)


def test_visual_positions_start_from_grid_table():
    cfg = M.tiny_config(image_size=32)
    p = M.init_params(cfg, 0)
    np.testing.assert_array_equal(p["ve.pos_embed"].data, M.grid_positions(cfg.n_patches, cfg.d_model))
    np.testing.assert_array_equal(M.init_baseline_params(cfg, 0)["lve.pos_embed"].data, p["ve.pos_embed"].data)
    table = M.grid_positions(16, 8)  # 4×4 grid: a cos channel falls monotonically along x
    row = table[:4, 2]  # channels 0-1 sin(x), 2-3 cos(x)
    assert np.all(np.diff(row) < 0)


def test_init_std_is_configurable():
    lo = M.init_params(M.tiny_config(init_std=0.02), 0)["vle.block0.ffn.fc1.weight"].data
    hi = M.init_params(M.tiny_config(init_std=0.2), 0)["vle.block0.ffn.fc1.weight"].data
    np.testing.assert_allclose(hi, 10 * lo, rtol=1e-12)
    with pytest.raises(T.ConfigurationError):
        M.tiny_config(init_std=0.0).validate()
