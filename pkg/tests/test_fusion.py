import numpy as np
import pytest
from scipy.special import erf

from lightcap import tensor as T
from lightcap.errors import ConfigError, DimensionError, UsageError
from lightcap.fusion import (
    FusionConfig,
    FusionInputs,
    FusionParams,
    build_seq2seq_mask,
    forward,
    make_positions,
    make_segments,
    mask_to_additive,
    pollution_logit,
    project_visual,
)
from lightcap.tensor import Tensor
from lightcap.vision import GridFeature


def tiny_config(**kw):
    base = dict(layers=1, hidden=4, heads=1, ffn=6, max_positions=32,
                vocab_size=12, grid_channels=3)
    base.update(kw)
    return FusionConfig(**base)


def make_inputs(params, n_visual, concept_ids, caption_ids, cls_index=None, rng=None):
    rng = rng or np.random.default_rng(0)
    d = params.config.hidden
    visual = Tensor(rng.normal(size=(n_visual, d)))
    token_ids = np.asarray(list(concept_ids) + list(caption_ids), dtype=np.int64)
    n_con, n_cap = len(concept_ids), len(caption_ids)
    return FusionInputs(
        visual=visual,
        token_ids=token_ids,
        segments=make_segments(n_visual, n_con, n_cap),
        positions=make_positions(n_visual, n_con, n_cap),
        cls_index=cls_index,
    )


class TestMask:
    def test_single_context_position(self):
        np.testing.assert_array_equal(build_seq2seq_mask(1, 0, 0), [[True]])

    def test_hand_constructed_example(self):
        mask = build_seq2seq_mask(1, 1, 2)
        want = np.array(
            [
                [True, True, False, False],
                [True, True, False, False],
                [True, True, True, False],
                [True, True, True, True],
            ]
        )
        np.testing.assert_array_equal(mask, want)

    def test_no_caption_is_fully_bidirectional(self):
        mask = build_seq2seq_mask(3, 2, 0)
        assert mask.all()

    def test_rejects_empty_context(self):
        with pytest.raises(UsageError):
            build_seq2seq_mask(0, 0, 3)

    def test_additive_requires_self_attention(self):
        bad = np.array([[False]])
        with pytest.raises(UsageError):
            mask_to_additive(bad)


class TestProjectVisual:
    def test_zero_grid_gives_bias(self):
        params = FusionParams(tiny_config(), seed=0)
        grid = GridFeature(Tensor(np.zeros((2, 2, 3))))
        out = project_visual(grid, params)
        np.testing.assert_allclose(
            out.data, np.broadcast_to(params.visual_bias.data, (4, 4)), atol=1e-15
        )

    def test_identity_like_projection_copies(self):
        params = FusionParams(tiny_config(grid_channels=4), seed=0)
        params.visual_proj.data[...] = np.eye(4)
        params.visual_bias.data[...] = 0.0
        rng = np.random.default_rng(1)
        arr = rng.normal(size=(2, 2, 4))
        out = project_visual(GridFeature(Tensor(arr)), params)
        np.testing.assert_allclose(out.data, arr.reshape(4, 4), atol=1e-15)

    def test_matches_matmul_oracle(self):
        params = FusionParams(tiny_config(), seed=2)
        rng = np.random.default_rng(2)
        arr = rng.normal(size=(3, 2, 3))
        out = project_visual(GridFeature(Tensor(arr)), params)
        want = arr.reshape(6, 3) @ params.visual_proj.data + params.visual_bias.data
        np.testing.assert_allclose(out.data, want, atol=1e-12)

    def test_channel_mismatch(self):
        params = FusionParams(tiny_config(), seed=0)
        with pytest.raises(DimensionError):
            project_visual(GridFeature(Tensor(np.zeros((2, 2, 5)))), params)


def single_token_oracle(params, token_id, position, segment):
    """Plain-numpy transformer for one token (attention weight is 1)."""

    def ln(v, gain, bias, eps=1e-12):
        mu = v.mean()
        var = ((v - mu) ** 2).mean()
        return (v - mu) / np.sqrt(var + eps) * gain + bias

    def gelu(v):
        return 0.5 * v * (1.0 + erf(v / np.sqrt(2.0)))

    x = (
        params.word_emb.data[token_id]
        + params.pos_emb.data[position]
        + params.seg_emb.data[segment]
    )
    x = ln(x, params.emb_ln_gain.data, params.emb_ln_bias.data)
    for layer in params.layers:
        v = x @ layer["wv"].data + layer["bv"].data
        attn_out = v @ layer["wo"].data + layer["bo"].data
        x = ln(x + attn_out, layer["ln1_gain"].data, layer["ln1_bias"].data)
        ff = gelu(x @ layer["w_ff1"].data + layer["b_ff1"].data)
        ff = ff @ layer["w_ff2"].data + layer["b_ff2"].data
        x = ln(x + ff, layer["ln2_gain"].data, layer["ln2_bias"].data)
    return x


class TestForward:
    def test_single_token_matches_oracle(self):
        params = FusionParams(tiny_config(), seed=3)
        inputs = FusionInputs(
            visual=Tensor(np.zeros((0, 4))),
            token_ids=np.array([7], dtype=np.int64),
            segments=np.array([1], dtype=np.int64),
            positions=np.array([0], dtype=np.int64),
        )
        trace = forward(inputs, build_seq2seq_mask(0, 1, 0), params)
        want = single_token_oracle(params, 7, 0, 1)
        np.testing.assert_allclose(trace.final_hidden.data[0], want, atol=1e-12)

    def test_attention_rows_sum_to_one_over_allowed(self):
        params = FusionParams(tiny_config(layers=2, heads=2, hidden=8), seed=4)
        inputs = make_inputs(params, 3, [5, 6], [7, 8, 9])
        mask = build_seq2seq_mask(3, 2, 3)
        trace = forward(inputs, mask, params)
        for scores in trace.attentions:
            probs = np.exp(scores.data - scores.data.max(-1, keepdims=True))
            probs /= probs.sum(-1, keepdims=True)
            np.testing.assert_allclose(probs.sum(-1), 1.0, atol=1e-12)
            # masked entries carry exactly zero weight
            assert (probs[:, ~mask] == 0.0).all()

    def test_trace_has_one_record_per_layer(self):
        params = FusionParams(tiny_config(layers=3), seed=5)
        inputs = make_inputs(params, 2, [5], [6, 7])
        trace = forward(inputs, build_seq2seq_mask(2, 1, 2), params)
        assert len(trace.attentions) == 3
        assert len(trace.hiddens) == 3

    def test_causality_perturbing_later_caption_token(self):
        """Changing a caption token never changes logits at earlier slots."""
        params = FusionParams(tiny_config(layers=2, heads=2, hidden=8, vocab_size=16), seed=6)
        rng = np.random.default_rng(6)
        caption = [6, 7, 8, 9]
        inputs_a = make_inputs(params, 2, [5], caption, rng=np.random.default_rng(9))
        mask = build_seq2seq_mask(2, 1, 4)
        trace_a = forward(inputs_a, mask, params)

        perturbed = list(caption)
        perturbed[3] = 11  # last caption token
        inputs_b = FusionInputs(
            visual=Tensor(inputs_a.visual.data.copy()),
            token_ids=np.asarray([5] + perturbed, dtype=np.int64),
            segments=inputs_a.segments,
            positions=inputs_a.positions,
        )
        trace_b = forward(inputs_b, mask, params)
        # earlier caption rows and all context rows are bitwise identical
        assert (trace_a.final_hidden.data[:6] == trace_b.final_hidden.data[:6]).all()

    def test_cls_hidden_immune_to_caption_perturbation(self):
        params = FusionParams(tiny_config(layers=2, heads=2, hidden=8, vocab_size=16), seed=7)
        caption_block = [1, 6, 7, 8]  # [CLS]-like token first
        inputs_a = make_inputs(params, 2, [5], caption_block, cls_index=3,
                               rng=np.random.default_rng(10))
        mask = build_seq2seq_mask(2, 1, 4)
        cls_a = forward(inputs_a, mask, params).cls_hidden.data
        changed = [1, 9, 10, 11]
        inputs_b = FusionInputs(
            visual=Tensor(inputs_a.visual.data.copy()),
            token_ids=np.asarray([5] + changed, dtype=np.int64),
            segments=inputs_a.segments,
            positions=inputs_a.positions,
            cls_index=3,
        )
        cls_b = forward(inputs_b, mask, params).cls_hidden.data
        assert np.abs(cls_a - cls_b).max() <= 1e-12

    def test_concept_permutation_equivariance(self):
        """Permuting concepts with their positions permutes their hiddens and
        leaves caption rows unchanged."""
        params = FusionParams(tiny_config(layers=2, heads=2, hidden=8, vocab_size=16), seed=8)
        rng = np.random.default_rng(11)
        visual = Tensor(rng.normal(size=(2, 8)))
        concepts = [5, 6, 7]
        caption = [8, 9]
        perm = [2, 0, 1]
        base_positions = make_positions(2, 3, 2)
        base_segments = make_segments(2, 3, 2)
        mask = build_seq2seq_mask(2, 3, 2)

        inputs_a = FusionInputs(visual=visual, token_ids=np.array(concepts + caption),
                                segments=base_segments, positions=base_positions)
        permuted_positions = base_positions.copy()
        permuted_positions[2:5] = base_positions[2:5][perm]
        inputs_b = FusionInputs(
            visual=Tensor(visual.data.copy()),
            token_ids=np.array([concepts[p] for p in perm] + caption),
            segments=base_segments,
            positions=permuted_positions,
        )
        ha = forward(inputs_a, mask, params).final_hidden.data
        hb = forward(inputs_b, mask, params).final_hidden.data
        np.testing.assert_allclose(hb[2:5], ha[2:5][perm], atol=1e-9)
        np.testing.assert_allclose(hb[5:], ha[5:], atol=1e-9)

    def test_length_mismatch_rejected(self):
        params = FusionParams(tiny_config(), seed=9)
        inputs = make_inputs(params, 2, [5], [6])
        with pytest.raises(DimensionError):
            forward(inputs, build_seq2seq_mask(2, 1, 2), params)

    def test_forward_gradients(self):
        config = tiny_config(layers=1, hidden=4, heads=2, ffn=5, vocab_size=8)
        params = FusionParams(config, seed=10)
        inputs = make_inputs(params, 1, [5], [6, 7], rng=np.random.default_rng(12))
        mask = build_seq2seq_mask(1, 1, 2)
        probe = Tensor(np.random.default_rng(13).normal(size=(4, 4)))
        checked = [params.word_emb, params.layers[0]["wq"], params.layers[0]["w_ff1"],
                   params.emb_ln_gain, params.layers[0]["ln2_bias"]]

        def f():
            trace = forward(inputs, mask, params)
            return T.sum_all(T.mul(trace.final_hidden, probe))

        T.gradient_check(f, checked)


def test_multi_token_forward_matches_scalar_attention_oracle():
    """Two context tokens + one caption token, one layer, two heads: the
    whole block recomputed with explicit per-head python loops."""
    config = tiny_config(layers=1, hidden=4, heads=2, ffn=5, vocab_size=9)
    params = FusionParams(config, seed=20)
    rng = np.random.default_rng(21)
    inputs = make_inputs(params, 0, [5, 6], [7], rng=rng)
    mask = build_seq2seq_mask(0, 2, 1)
    got = forward(inputs, mask, params).final_hidden.data

    def ln(v, gain, bias):
        mu = sum(v) / len(v)
        var = sum((x - mu) ** 2 for x in v) / len(v)
        return [(x - mu) / np.sqrt(var + 1e-12) * g + b
                for x, g, b in zip(v, gain, bias)]

    def gelu(x):
        return 0.5 * x * (1.0 + erf(x / np.sqrt(2.0)))

    d, h, dh = 4, 2, 2
    x = []
    for pos, (tok, seg) in enumerate(zip([5, 6, 7], [1, 1, 2])):
        row = [
            params.word_emb.data[tok][j]
            + params.pos_emb.data[pos][j]
            + params.seg_emb.data[seg][j]
            for j in range(d)
        ]
        x.append(ln(row, params.emb_ln_gain.data, params.emb_ln_bias.data))
    layer = params.layers[0]

    def project(v, w, b):
        return [sum(v[i] * w[i, j] for i in range(len(v))) + b[j]
                for j in range(w.shape[1])]

    q = [project(r, layer["wq"].data, layer["bq"].data) for r in x]
    k = [project(r, layer["wk"].data, layer["bk"].data) for r in x]
    v = [project(r, layer["wv"].data, layer["bv"].data) for r in x]
    ctx = [[0.0] * d for _ in range(3)]
    for head in range(h):
        lo, hi = head * dh, (head + 1) * dh
        for i in range(3):
            scores = []
            for j in range(3):
                s = sum(q[i][a] * k[j][a] for a in range(lo, hi)) / np.sqrt(dh)
                scores.append(s if mask[i, j] else -1e9)
            m = max(scores)
            ws = [np.exp(s - m) for s in scores]
            z = sum(ws)
            probs = [w / z for w in ws]
            for a in range(lo, hi):
                ctx[i][a] = sum(probs[j] * v[j][a] for j in range(3))
    out = []
    for i in range(3):
        attn = project(ctx[i], layer["wo"].data, layer["bo"].data)
        row = ln([x[i][j] + attn[j] for j in range(d)],
                 layer["ln1_gain"].data, layer["ln1_bias"].data)
        ff1 = [gelu(u) for u in project(row, layer["w_ff1"].data, layer["b_ff1"].data)]
        ff2 = project(ff1, layer["w_ff2"].data, layer["b_ff2"].data)
        out.append(ln([row[j] + ff2[j] for j in range(d)],
                      layer["ln2_gain"].data, layer["ln2_bias"].data))
    np.testing.assert_allclose(got, np.array(out), atol=1e-10)


class TestPollution:
    def test_zero_weights_give_bias(self):
        params = FusionParams(tiny_config(), seed=11)
        params.pollution_w.data[...] = 0.0
        params.pollution_b.data[...] = 0.37
        out = pollution_logit(Tensor(np.ones(4)), params)
        assert out.item() == pytest.approx(0.37)

    def test_matches_dot_product(self):
        params = FusionParams(tiny_config(), seed=12)
        rng = np.random.default_rng(14)
        h = rng.normal(size=4)
        want = float(h @ params.pollution_w.data + params.pollution_b.data)
        assert pollution_logit(Tensor(h), params).item() == pytest.approx(want, rel=1e-12)

    def test_gradient(self):
        params = FusionParams(tiny_config(), seed=13)
        h = Tensor(np.random.default_rng(15).normal(size=4), requires_grad=True)
        T.gradient_check(
            lambda: pollution_logit(h, params), [h, params.pollution_w, params.pollution_b]
        )


def test_config_requires_divisible_heads():
    with pytest.raises(ConfigError):
        FusionConfig(hidden=10, heads=3)
