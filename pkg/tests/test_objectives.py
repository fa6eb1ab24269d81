import math

import numpy as np
import pytest

from lightcap import tensor as T
from lightcap.errors import RangeError, UsageError
from lightcap.model import CaptionModel, forward_item
from lightcap.objectives import (
    assemble_finetune_item,
    assemble_pretrain_item,
    caption_loss,
    concept_loss,
    finetune_loss,
    mask_caption,
    pollute_concepts,
    pretrain_loss,
)
from lightcap.tensor import Tensor

from conftest import toy_config


class TestMaskCaption:
    def test_forced_minimum_one_mask(self):
        rng = np.random.default_rng(0)
        masked, slots, targets = mask_caption([5, 6, 7, 8], rate=1e-9, rng=rng, mask_id=3)
        assert len(slots) == 1
        assert masked[slots[0]] == 3
        assert targets[0] in (5, 6, 7, 8)

    def test_near_one_rate_masks_everything(self):
        for seed in range(10):
            rng = np.random.default_rng(seed)
            masked, slots, _ = mask_caption(list(range(5, 25)), 1 - 1e-9, rng, mask_id=3)
            assert (masked == 3).all()
            assert len(slots) == 20

    def test_masked_slots_carry_original_targets(self):
        rng = np.random.default_rng(1)
        ids = [10, 11, 12, 13, 14]
        masked, slots, targets = mask_caption(ids, 0.5, rng, mask_id=3)
        for s, t in zip(slots, targets):
            assert t == ids[s]
            assert masked[s] == 3
        untouched = [i for i in range(5) if i not in slots]
        for i in untouched:
            assert masked[i] == ids[i]

    def test_monte_carlo_rate(self):
        rng = np.random.default_rng(2)
        total, hits = 0, 0
        for _ in range(100):
            ids = list(range(5, 105))  # 100 tokens, forcing is negligible
            _, slots, _ = mask_caption(ids, 0.15, rng, mask_id=3)
            hits += len(slots)
            total += 100
        assert hits / total == pytest.approx(0.15, abs=0.01)

    def test_rejects_bad_rate_and_empty(self):
        rng = np.random.default_rng(3)
        with pytest.raises(UsageError):
            mask_caption([5], rate=0.0, rng=rng, mask_id=3)
        with pytest.raises(UsageError):
            mask_caption([], rate=0.5, rng=rng, mask_id=3)


class TestPolluteConcepts:
    def pool(self):
        return [np.array([5, 6]), np.array([7, 8]), np.array([9, 10])]

    def test_p_zero_keeps_clean(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            c_star, y = pollute_concepts([5, 6], self.pool(), 0.0, rng)
            assert y == 1
            np.testing.assert_array_equal(c_star, [5, 6])

    def test_p_one_always_pollutes_with_different_set(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            c_star, y = pollute_concepts([5, 6], self.pool(), 1.0, rng)
            assert y == 0
            assert not np.array_equal(c_star, [5, 6])

    def test_monte_carlo_half(self):
        rng = np.random.default_rng(6)
        clean = sum(
            pollute_concepts([5, 6], self.pool(), 0.5, rng)[1] for _ in range(10_000)
        )
        assert clean / 10_000 == pytest.approx(0.5, abs=0.02)

    def test_pool_too_small(self):
        rng = np.random.default_rng(7)
        with pytest.raises(UsageError):
            pollute_concepts([5, 6], [np.array([5, 6])], 0.5, rng)


class TestCaptionLoss:
    def test_huge_margin_is_nearly_zero(self):
        logits = np.zeros((2, 6))
        logits[0, 3] = 50.0
        logits[1, 1] = 50.0
        loss = caption_loss(Tensor(logits), [3, 1])
        assert loss.item() < 1e-20

    def test_uniform_logits_give_log_v(self):
        loss = caption_loss(Tensor(np.zeros((3, 8))), [0, 5, 7])
        assert loss.item() == pytest.approx(math.log(8.0), rel=1e-12)

    def test_matches_scalar_ce_oracle(self):
        rng = np.random.default_rng(8)
        logits = rng.normal(size=(4, 9))
        targets = rng.integers(0, 9, size=4)
        expected = 0.0
        for row, t in zip(logits, targets):
            z = row - row.max()
            expected += -(z[t] - math.log(sum(math.exp(v) for v in z)))
        expected /= 4
        loss = caption_loss(Tensor(logits), targets)
        assert loss.item() == pytest.approx(expected, rel=1e-12)

    def test_target_out_of_range(self):
        with pytest.raises(RangeError):
            caption_loss(Tensor(np.zeros((1, 4))), [4])


class TestConceptLoss:
    def test_zero_logit_gives_ln2(self):
        for y in (0, 1):
            loss = concept_loss(Tensor(np.asarray(0.0)), y)
            assert loss.item() == pytest.approx(math.log(2.0), rel=1e-12)

    def test_confident_correct_is_nearly_zero(self):
        assert concept_loss(Tensor(np.asarray(50.0)), 1).item() < 1e-20

    def test_matches_scalar_oracle_both_labels(self):
        rng = np.random.default_rng(9)
        for _ in range(10):
            logit = float(rng.normal() * 3)
            s = 1.0 / (1.0 + math.exp(-logit))
            for y in (0, 1):
                want = -(y * math.log(s) + (1 - y) * math.log(1 - s))
                got = concept_loss(Tensor(np.asarray(logit)), y).item()
                assert got == pytest.approx(want, rel=1e-9)

    def test_gradient(self):
        logit = Tensor(np.asarray(0.7), requires_grad=True)
        T.gradient_check(lambda: concept_loss(logit, 0), [logit])


def assemble_pretrain_batch(model, items, seed=0, **kw):
    pool = [it.concept_ids for it in items]
    return [
        assemble_pretrain_item(it, model.config, np.random.default_rng((seed, i)), pool, **kw)
        for i, it in enumerate(items)
    ]


class TestStageLosses:
    def test_pretrain_concept_term_only(self, toy_model, toy_items):
        """With masking suppressed via the test hook, only Eq-2 remains."""
        items = [it for it in toy_items]
        for it in items:
            it.caption_ids = np.zeros(0, dtype=np.int64)  # no caption tokens at all
        batch = assemble_pretrain_batch(toy_model, items, force_one_mask=False)
        forwards = [forward_item(toy_model, b) for b in batch]
        total = pretrain_loss(toy_model, batch, forwards)
        concept_terms = [
            concept_loss(f.pollution, b.pollution_label).item()
            for f, b in zip(forwards, batch)
        ]
        assert total.item() == pytest.approx(np.mean(concept_terms), rel=1e-12)

    def test_pretrain_analytic_uniform_case(self, toy_items):
        """Zeroed heads + zeroed classifier: loss is ln V + ln 2 exactly."""
        model = CaptionModel(toy_config(), seed=1)
        for branch in model.head.branches:
            for p in branch.values():
                p.data[...] = 0.0
        model.head.shared_embedding.data[...] = 0.0
        model.fusion.pollution_w.data[...] = 0.0
        model.fusion.pollution_b.data[...] = 0.0
        batch = assemble_pretrain_batch(model, toy_items)
        loss = pretrain_loss(model, batch)
        v = model.config.fusion.vocab_size
        assert loss.item() == pytest.approx(math.log(v) + math.log(2.0), rel=1e-9)

    def test_pretrain_is_compositional(self, toy_model, toy_items):
        batch = assemble_pretrain_batch(toy_model, toy_items, seed=3)
        forwards = [forward_item(toy_model, b) for b in batch]
        total = pretrain_loss(toy_model, batch, forwards)
        from lightcap.objectives import batch_caption_loss, batch_concept_loss

        cap = batch_caption_loss(forwards, batch).item()
        con = batch_concept_loss(forwards, batch).item()
        assert total.item() == pytest.approx(cap + con, rel=1e-12)

    def test_finetune_equals_caption_only(self, toy_model, toy_items):
        batch = [assemble_finetune_item(it, toy_model.config) for it in toy_items]
        forwards = [forward_item(toy_model, b) for b in batch]
        total = finetune_loss(toy_model, batch, forwards)
        from lightcap.objectives import batch_caption_loss

        assert total.item() == pytest.approx(
            batch_caption_loss(forwards, batch).item(), rel=1e-12
        )
        assert all(b.pollution_label is None for b in batch)

    def test_finetune_slot_layout(self, toy_model, toy_items):
        item = toy_items[0]
        b = assemble_finetune_item(item, toy_model.config)
        n = len(item.caption_ids)
        ctx = item.grid.height * item.grid.width + len(item.concept_ids)
        assert len(b.slot_indices) == n + 1
        assert list(b.slot_targets) == list(item.caption_ids) + [toy_model.config.specials.sep]
        # slot i attends context, true tokens < i, and itself
        for i in range(n + 1):
            row = b.mask[ctx + n + i]
            assert row[:ctx].all()
            assert row[ctx : ctx + i].all()
            assert not row[ctx + i : ctx + n].any()
            assert row[ctx + n + i]
            assert not row[ctx + n + i + 1 :].any()
        # slot positions mirror the true-token positions
        np.testing.assert_array_equal(
            b.positions[ctx + n :], ctx + np.arange(n + 1)
        )

    def test_finetune_independent_of_pollution_rng(self, toy_model, toy_items):
        a = [assemble_finetune_item(it, toy_model.config) for it in toy_items]
        b = [assemble_finetune_item(it, toy_model.config) for it in toy_items]
        la = finetune_loss(toy_model, a).item()
        lb = finetune_loss(toy_model, b).item()
        assert la == lb

    def test_one_descent_step_reduces_finetune_loss(self, toy_model, toy_items):
        batch = [assemble_finetune_item(it, toy_model.config) for it in toy_items]
        before = finetune_loss(toy_model, batch)
        toy_model.zero_grad()
        T.backward(before)
        for p in toy_model.parameters():
            if p.grad is not None:
                p.data = p.data - 0.05 * p.grad
        after = finetune_loss(toy_model, batch)
        assert after.item() < before.item()

    def test_sampling_pipeline_reproducible(self, toy_model, toy_items):
        a = assemble_pretrain_batch(toy_model, toy_items, seed=11)
        b = assemble_pretrain_batch(toy_model, toy_items, seed=11)
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x.caption_block_ids, y.caption_block_ids)
            np.testing.assert_array_equal(x.concept_ids, y.concept_ids)
            np.testing.assert_array_equal(x.slot_indices, y.slot_indices)
            assert x.pollution_label == y.pollution_label

    def test_pollution_never_touches_caption(self, toy_model, toy_items):
        batch = assemble_pretrain_batch(toy_model, toy_items, seed=12)
        for item, assembled in zip(toy_items, batch):
            sp = toy_model.config.specials
            block = assembled.caption_block_ids
            assert block[0] == sp.cls and block[-1] == sp.sep
            inner = block[1:-1]
            for i, tok in enumerate(inner):
                if tok != sp.mask:
                    assert tok == item.caption_ids[i]

    def test_memorizing_model_reaches_tiny_loss(self, toy_model, toy_items):
        """Direct check that fused log-probs drive the caption loss: a
        perfectly-peaked fused row gives < 1e-6."""
        batch = [assemble_finetune_item(it, toy_model.config) for it in toy_items[:1]]
        f = forward_item(toy_model, batch[0])
        n_slots, v = f.fused_logprobs.shape
        peaked = np.full((n_slots, v), -60.0)
        peaked[np.arange(n_slots), batch[0].slot_targets] = 0.0
        assert caption_loss(Tensor(peaked), batch[0].slot_targets).item() < 1e-6
