import math
import random

import numpy as np
import pytest
import torch
import torch.nn as nn

from oracles import (
    oracle_imc,
    oracle_itc,
    oracle_two_way_ce,
    random_unit_vectors,
)
from promptvlp.errors import ContractError
from promptvlp.objectives import (
    EmbeddingQueue,
    QueuePair,
    TemperatureParam,
    contrastive_targets,
    enqueue,
    imc_loss,
    itc_loss,
    itm_loss,
    itm_match_probability,
    mask_tokens,
    masked_lm_loss,
    sample_itm_negatives,
    similarity,
    total_loss,
)


def unit(v):
    v = torch.tensor(v, dtype=torch.float64)
    return v / v.norm()


def make_queues(dim, capacity=8, image=None, text=None):
    queues = QueuePair(image=EmbeddingQueue(capacity, dim),
                       text=EmbeddingQueue(capacity, dim))
    if image is not None:
        vectors, cats = image
        queues.image.enqueue(torch.as_tensor(np.asarray(vectors), dtype=torch.float64), cats)
    if text is not None:
        vectors, cats = text
        queues.text.enqueue(torch.as_tensor(np.asarray(vectors), dtype=torch.float64), cats)
    return queues


def fixed_temperature(value):
    temp = TemperatureParam().double()
    with torch.no_grad():
        temp.log_tau.copy_(torch.log(torch.tensor(float(value), dtype=torch.float64)))
    return temp


class TestSimilarity:
    def test_identity(self):
        v = unit([0.3, -0.4, 0.5])
        assert float(similarity(v, v)) == pytest.approx(1.0, abs=1e-12)

    def test_orthonormal(self):
        a = unit([1.0, 0.0]); b = unit([0.0, 1.0])
        assert float(similarity(a, b)) == pytest.approx(0.0, abs=1e-12)

    def test_antipodal(self):
        v = unit([0.6, 0.8])
        assert float(similarity(v, -v)) == pytest.approx(-1.0, abs=1e-12)


class TestTemperature:
    def test_init_and_positivity(self):
        temp = TemperatureParam()
        assert float(temp.value().detach()) == pytest.approx(0.07, rel=1e-6)
        assert float(temp.value().detach()) > 0

    def test_clamped_to_bounds(self):
        temp = TemperatureParam()
        with torch.no_grad():
            temp.log_tau.fill_(50.0)
        assert float(temp.value().detach()) == pytest.approx(10.0)
        with torch.no_grad():
            temp.log_tau.fill_(-50.0)
        assert float(temp.value().detach()) == pytest.approx(1e-3)

    def test_bad_init(self):
        with pytest.raises(ValueError):
            TemperatureParam(init=0.0)


class TestEmbeddingQueue:
    def one_hot(self, dim, i):
        v = torch.zeros(dim, dtype=torch.float64)
        v[i] = 1.0
        return v

    def test_fifo_eviction(self):
        q = EmbeddingQueue(4, 6)
        q.enqueue(torch.stack([self.one_hot(6, i) for i in range(3)]), ["a", "b", "c"])
        q.enqueue(torch.stack([self.one_hot(6, i + 3) for i in range(3)]), ["d", "e", "f"])
        assert len(q) == 4
        vectors, cats = q.snapshot()
        assert cats == ("c", "d", "e", "f")
        assert float(vectors[0, 2]) == 1.0  # oldest survivor is the sentinel for "c"

    def test_push_larger_than_capacity_keeps_last(self):
        q = EmbeddingQueue(3, 5)
        q.enqueue(torch.stack([self.one_hot(5, i) for i in range(5)]),
                  ["a", "b", "c", "d", "e"])
        _, cats = q.snapshot()
        assert cats == ("c", "d", "e")

    def test_category_tags_travel_with_vectors(self):
        # Bookkeeping oracle: one-hot sentinels labeled by their hot index.
        q = EmbeddingQueue(4, 8)
        order = [5, 1, 7, 0, 3, 6]
        for i in order:
            enqueue(q, self.one_hot(8, i).unsqueeze(0), [f"cat{i}"])
        vectors, cats = q.snapshot()
        for vec, cat in zip(vectors, cats):
            assert cat == f"cat{int(vec.argmax())}"

    def test_norm_contract(self):
        q = EmbeddingQueue(4, 3)
        with pytest.raises(ContractError):
            q.enqueue(torch.tensor([[1.0, 1.0, 0.0]]), ["a"])

    def test_state_roundtrip(self):
        q = EmbeddingQueue(4, 3)
        q.enqueue(torch.eye(3, dtype=torch.float64), ["a", "b", "c"])
        restored = EmbeddingQueue.from_state_dict(q.state_dict())
        assert restored.snapshot()[1] == q.snapshot()[1]
        assert torch.equal(restored.snapshot()[0], q.snapshot()[0])


class TestContrastiveTargets:
    def test_uniform_rows_sum_to_one(self):
        targets, has_pos = contrastive_targets(["a", "b"], ["a", "a", "b", "c"])
        np.testing.assert_allclose(targets.sum(1).numpy(), [1.0, 1.0])
        np.testing.assert_allclose(targets[0].numpy(), [0.5, 0.5, 0.0, 0.0])
        assert has_pos.tolist() == [True, True]

    def test_no_positive_row_is_zero(self):
        targets, has_pos = contrastive_targets(["z"], ["a", "b"])
        np.testing.assert_allclose(targets.numpy(), [[0.0, 0.0]])
        assert has_pos.tolist() == [False]

    def test_binary_sum_mode(self):
        targets, _ = contrastive_targets(["a"], ["a", "a", "b"], mode="binary-sum")
        np.testing.assert_allclose(targets.numpy(), [[1.0, 1.0, 0.0]])


class TestItcLoss:
    def test_two_candidate_scalar_case(self):
        # One query; candidates at similarity 1 (positive) and 0 (negative).
        dim = 4
        v = torch.zeros((1, dim), dtype=torch.float64); v[0, 0] = 1.0
        distractor = torch.zeros((1, dim), dtype=torch.float64); distractor[0, 1] = 1.0
        queues = make_queues(dim, image=(distractor, ["neg"]), text=(distractor, ["neg"]))
        temp = fixed_temperature(1.0)
        result = itc_loss(v, v.clone(), ["pos"], queues, temp, update_queues=False)
        expected = -math.log(math.e / (math.e + 1.0))
        assert float(result.forward_loss.detach()) == pytest.approx(expected, rel=1e-12)
        assert float(result.backward_loss.detach()) == pytest.approx(expected, rel=1e-12)
        assert float(result.loss.detach()) == pytest.approx(expected, rel=1e-12)

    def test_uniform_candidates_give_log_m(self):
        # All similarities equal: softmax is uniform, loss = log(M_eff).
        dim = 6
        query = torch.zeros((1, dim), dtype=torch.float64); query[0, 0] = 1.0
        cand = torch.zeros((3, dim), dtype=torch.float64)
        cand[:, 1] = 1.0  # all orthogonal to the query
        queues = make_queues(dim, image=(cand, ["p", "x", "y"]), text=(cand, ["p", "x", "y"]))
        temp = fixed_temperature(1.0)
        own = torch.zeros((1, dim), dtype=torch.float64); own[0, 2] = 1.0
        result = itc_loss(query, own, ["p"], queues, temp, update_queues=False)
        # M_eff = 3 queue + 1 in-batch = 4 equal-similarity candidates.
        assert float(result.forward_loss.detach()) == pytest.approx(math.log(4.0), rel=1e-12)

    def test_two_positive_merged_mass_equals_hand_enumeration(self):
        # Hand enumeration for M_eff = 3: two identical positives (sim s+) and
        # one distractor; uniform half targets merge into -log p(single positive).
        dim = 3
        query = unit([1.0, 0.0, 0.0]).unsqueeze(0)
        pos = torch.stack([unit([1.0, 0.0, 0.0]), unit([1.0, 0.0, 0.0])])
        neg = unit([0.0, 1.0, 0.0]).unsqueeze(0)
        tau = 0.5
        queues = make_queues(dim, text=(torch.cat([pos, neg]), ["p", "p", "n"]),
                             image=(torch.cat([pos, neg]), ["p", "p", "n"]))
        temp = fixed_temperature(tau)
        own_text = unit([0.0, 0.0, 1.0]).unsqueeze(0)  # wrong-ish but same category
        result = itc_loss(query, own_text, ["p"], queues, temp, update_queues=False)
        # Enumerate softmax by hand over 4 candidates: s = [1, 1, 0, 0] / tau
        scores = [1 / tau, 1 / tau, 0.0, 0.0]
        z = sum(math.exp(s) for s in scores)
        p_pos = math.exp(1 / tau) / z
        p_own = math.exp(0.0) / z
        hand = -(math.log(p_pos) / 3 + math.log(p_pos) / 3 + math.log(p_own) / 3)
        assert float(result.forward_loss.detach()) == pytest.approx(hand, rel=1e-12)
        merged_single = -math.log(p_pos)
        two_pos_only = -(0.5 * math.log(p_pos) + 0.5 * math.log(p_pos))
        assert two_pos_only == pytest.approx(merged_single, rel=1e-15)

    def test_matches_oracle_on_randomized_instances(self):
        rng = np.random.default_rng(17)
        for trial in range(25):
            dim = int(rng.integers(3, 8))
            batch = int(rng.integers(1, 5))
            queue_n = int(rng.integers(0, 9))
            cats = [f"c{int(c)}" for c in rng.integers(0, 4, size=batch)]
            img = random_unit_vectors(rng, batch, dim)
            txt = random_unit_vectors(rng, batch, dim)
            q_img = random_unit_vectors(rng, queue_n, dim)
            q_txt = random_unit_vectors(rng, queue_n, dim)
            q_cats = [f"c{int(c)}" for c in rng.integers(0, 4, size=queue_n)]
            tau = float(rng.uniform(0.05, 2.0))
            mode = "uniform" if trial % 2 == 0 else "binary-sum"
            queues = make_queues(dim, image=(q_img, q_cats) if queue_n else None,
                                 text=(q_txt, q_cats) if queue_n else None)
            temp = fixed_temperature(tau)
            result = itc_loss(torch.tensor(img), torch.tensor(txt), cats, queues, temp,
                              target_mode=mode, update_queues=False)
            expected = oracle_itc(img, txt, cats, q_img, q_cats, q_txt, q_cats, tau,
                                  mode=mode)
            assert float(result.loss.detach()) == pytest.approx(expected, rel=1e-10)

    def test_enqueues_batch_afterwards_by_default(self):
        dim = 4
        rng = np.random.default_rng(0)
        img = torch.tensor(random_unit_vectors(rng, 2, dim))
        txt = torch.tensor(random_unit_vectors(rng, 2, dim))
        queues = make_queues(dim)
        itc_loss(img, txt, ["a", "b"], queues, fixed_temperature(1.0))
        assert len(queues.image) == 2 and len(queues.text) == 2
        assert queues.image.snapshot()[1] == ("a", "b")

    def test_all_excluded_defined_as_zero_with_warning(self, caplog):
        dim = 4
        rng = np.random.default_rng(1)
        img = torch.tensor(random_unit_vectors(rng, 2, dim))
        txt = torch.tensor(random_unit_vectors(rng, 2, dim))
        queues = make_queues(dim)
        temp = fixed_temperature(1.0)
        with caplog.at_level("WARNING"):
            result = imc_loss(img, txt, ["a", "b"], queues, temp)
        # Empty queues and self-exclusion leave no positives for any query.
        assert float(result.loss.detach()) == 0.0
        assert "excluded" in caplog.text

    def test_temperature_monotonicity_on_grid(self):
        # Fixed gap s+ > s-: sharper softmax concentrates on the positive,
        # so the loss increases with tau.
        dim = 3
        query = unit([1.0, 0.0, 0.0]).unsqueeze(0)
        cands = torch.stack([unit([1.0, 0.0, 0.0]), unit([0.0, 1.0, 0.0])])
        losses = []
        for tau in np.linspace(0.05, 5.0, 12):
            queues = make_queues(dim, text=(cands, ["p", "n"]), image=(cands, ["p", "n"]))
            own = unit([1.0, 0.0, 0.0]).unsqueeze(0)
            result = itc_loss(query, own, ["p"], queues, fixed_temperature(float(tau)),
                              update_queues=False)
            losses.append(float(result.loss.detach()))
        assert all(b > a for a, b in zip(losses, losses[1:]))

    def test_batch_permutation_invariance(self):
        rng = np.random.default_rng(3)
        dim, batch = 5, 4
        img = random_unit_vectors(rng, batch, dim)
        txt = random_unit_vectors(rng, batch, dim)
        cats = ["a", "b", "c", "d"]
        q = random_unit_vectors(rng, 6, dim)
        q_cats = ["a", "b", "c", "d", "a", "b"]
        perm = [2, 0, 3, 1]
        temp = fixed_temperature(0.3)
        base = itc_loss(torch.tensor(img), torch.tensor(txt), cats,
                        make_queues(dim, image=(q, q_cats), text=(q, q_cats)),
                        temp, update_queues=False)
        shuffled = itc_loss(torch.tensor(img[perm]), torch.tensor(txt[perm]),
                            [cats[i] for i in perm],
                            make_queues(dim, image=(q, q_cats), text=(q, q_cats)),
                            temp, update_queues=False)
        assert float(base.loss.detach()) == pytest.approx(float(shuffled.loss.detach()), abs=1e-6)


class TestImcLoss:
    def test_scalar_case_with_identical_positive(self):
        # Two same-category images with identical embeddings, one distractor at
        # similarity 0: each query sees one positive at sim 1, one at sim 0.
        dim = 3
        img = torch.stack([unit([1.0, 0.0, 0.0]), unit([1.0, 0.0, 0.0])])
        txt = torch.stack([unit([0.0, 0.0, 1.0]), unit([0.0, 0.0, 1.0])])
        distractor = unit([0.0, 1.0, 0.0]).unsqueeze(0)
        queues = make_queues(dim, image=(distractor, ["n"]), text=(distractor, ["n"]))
        result = imc_loss(img, txt, ["p", "p"], queues, fixed_temperature(1.0))
        expected = -math.log(math.e / (math.e + 1.0))
        assert float(result.forward_loss.detach()) == pytest.approx(expected, rel=1e-12)

    def test_query_with_category_absent_from_queue_excluded(self):
        dim = 4
        img = torch.eye(dim, dtype=torch.float64)[:2]
        txt = torch.eye(dim, dtype=torch.float64)[2:4]
        queue_vec = torch.eye(dim, dtype=torch.float64)[:1]
        queues = make_queues(dim, image=(queue_vec, ["a"]), text=(queue_vec, ["a"]))
        result = imc_loss(img, txt, ["a", "b"], queues, fixed_temperature(1.0))
        # Query "b" has no positive anywhere (self excluded): one exclusion per side.
        assert result.excluded_queries == 2

    def test_matches_oracle_on_randomized_instances(self):
        rng = np.random.default_rng(23)
        for trial in range(25):
            dim = int(rng.integers(3, 8))
            batch = int(rng.integers(2, 5))
            queue_n = int(rng.integers(1, 9))
            cats = [f"c{int(c)}" for c in rng.integers(0, 3, size=batch)]
            img = random_unit_vectors(rng, batch, dim)
            txt = random_unit_vectors(rng, batch, dim)
            q_img = random_unit_vectors(rng, queue_n, dim)
            q_txt = random_unit_vectors(rng, queue_n, dim)
            q_cats = [f"c{int(c)}" for c in rng.integers(0, 3, size=queue_n)]
            tau = float(rng.uniform(0.05, 2.0))
            queues = make_queues(dim, image=(q_img, q_cats), text=(q_txt, q_cats))
            result = imc_loss(torch.tensor(img), torch.tensor(txt), cats, queues,
                              fixed_temperature(tau))
            expected = oracle_imc(img, txt, cats, q_img, q_cats, q_txt, q_cats, tau)
            assert float(result.loss.detach()) == pytest.approx(expected, rel=1e-10)

    def test_probabilities_sum_to_one_over_candidates(self):
        # Softmax normalization over the non-excluded candidate set.
        rng = np.random.default_rng(5)
        dim, batch, queue_n = 4, 3, 5
        img = torch.tensor(random_unit_vectors(rng, batch, dim))
        q_img = torch.tensor(random_unit_vectors(rng, queue_n, dim))
        tau = 0.7
        cands = torch.cat([q_img, img])
        logits = img @ cands.t() / tau
        for i in range(batch):
            logits[i, queue_n + i] = float("-inf")
        probs = torch.softmax(logits, dim=1)
        np.testing.assert_allclose(probs.sum(1).numpy(), 1.0, rtol=1e-12)

    def test_does_not_update_queues(self):
        dim = 4
        rng = np.random.default_rng(2)
        img = torch.tensor(random_unit_vectors(rng, 2, dim))
        txt = torch.tensor(random_unit_vectors(rng, 2, dim))
        q = torch.tensor(random_unit_vectors(rng, 3, dim))
        queues = make_queues(dim, image=(q, list("abc")), text=(q, list("abc")))
        imc_loss(img, txt, ["a", "b"], queues, fixed_temperature(1.0))
        assert len(queues.image) == 3 and len(queues.text) == 3


class TestSinglePositiveReduction:
    def test_equals_infonce_oracle(self):
        from oracles import oracle_infonce

        rng = np.random.default_rng(41)
        for _ in range(10):
            dim, batch, queue_n = 5, 3, 6
            img = random_unit_vectors(rng, batch, dim)
            txt = random_unit_vectors(rng, batch, dim)
            cats = [f"u{i}" for i in range(batch)]  # all distinct in batch
            q_cats = [f"q{i}" for i in range(queue_n)]  # disjoint from batch
            q_img = random_unit_vectors(rng, queue_n, dim)
            q_txt = random_unit_vectors(rng, queue_n, dim)
            tau = float(rng.uniform(0.1, 1.5))
            queues = make_queues(dim, image=(q_img, q_cats), text=(q_txt, q_cats))
            result = itc_loss(torch.tensor(img), torch.tensor(txt), cats, queues,
                              fixed_temperature(tau), update_queues=False)
            text_cands = np.concatenate([q_txt, txt])
            image_cands = np.concatenate([q_img, img])
            i2t = oracle_infonce(img, [queue_n + i for i in range(batch)],
                                 [text_cands] * batch, tau)
            t2i = oracle_infonce(txt, [queue_n + i for i in range(batch)],
                                 [image_cands] * batch, tau)
            expected = 0.5 * (i2t + t2i)
            assert float(result.loss.detach()) == pytest.approx(expected, rel=1e-12)


class TestItmLoss:
    def probs_to_logits(self, probs):
        return torch.tensor([[math.log(1.0 - p), math.log(p)] for p in probs],
                            dtype=torch.float64)

    def test_coin_flip_classifier_gives_log_two(self):
        logits = self.probs_to_logits([0.5, 0.5, 0.5])
        labels = torch.tensor([1, 0, 1])
        loss = itm_loss(logits, labels, nn.Identity())
        assert float(loss) == pytest.approx(math.log(2.0), rel=1e-12)

    def test_perfect_classifier_loss_vanishes(self):
        logits = torch.tensor([[-20.0, 20.0], [20.0, -20.0]], dtype=torch.float64)
        labels = torch.tensor([1, 0])
        assert float(itm_loss(logits, labels, nn.Identity()).detach()) < 1e-8

    def test_hand_batch_matches_scalar_oracle(self):
        # -(ln .9 + ln .8 + ln .8 + ln .7) / 4 computed by the BCE oracle.
        from oracles import oracle_binary_ce

        probs = [0.9, 0.8, 0.2, 0.3]
        labels = [1, 1, 0, 0]
        expected = oracle_binary_ce(probs, labels)
        assert expected == pytest.approx(-(math.log(0.9) + math.log(0.8)
                                           + math.log(0.8) + math.log(0.7)) / 4,
                                         rel=1e-15)
        loss = itm_loss(self.probs_to_logits(probs), torch.tensor(labels), nn.Identity())
        assert float(loss) == pytest.approx(expected, rel=1e-12)

    def test_matches_two_way_ce_oracle_on_random_logits(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            n = int(rng.integers(2, 6))
            logits = rng.normal(size=(n, 2))
            labels = rng.integers(0, 2, size=n)
            loss = itm_loss(torch.tensor(logits), torch.tensor(labels), nn.Identity())
            assert float(loss) == pytest.approx(oracle_two_way_ce(logits, labels),
                                                rel=1e-10)

    def test_single_class_batch_still_defined(self):
        logits = self.probs_to_logits([0.6, 0.7])
        loss = itm_loss(logits, torch.tensor([1, 1]), nn.Identity())
        assert math.isfinite(float(loss))

    def test_match_probability(self):
        logits = self.probs_to_logits([0.25])
        assert float(itm_match_probability(logits)) == pytest.approx(0.25, rel=1e-12)


class TestSampleItmNegatives:
    def test_uniform_negatives_cross_categories(self):
        cats = ["a", "a", "b", "b"]
        sel = sample_itm_negatives(cats, random.Random(0))
        assert sel.labels[:4] == [1, 1, 1, 1]
        for image_i, text_i, label in zip(sel.image_indices, sel.text_indices, sel.labels):
            if label == 0:
                assert cats[image_i] != cats[text_i]
        # One image->wrong-text and one text->wrong-image negative per pair.
        assert len(sel.labels) == 12
        assert sel.skipped == 0

    def test_hard_strategy_picks_argmax_disjoint(self):
        cats = ["a", "b", "c"]
        sims = torch.tensor([
            [0.9, 0.1, 0.8],
            [0.2, 0.9, 0.3],
            [0.7, 0.6, 0.9],
        ])
        sel = sample_itm_negatives(cats, random.Random(0), strategy="hard",
                                   itc_similarities=sims)
        # Image anchors: argmax over category-disjoint columns of row i.
        img_negs = {(i, t) for i, t, l in zip(sel.image_indices, sel.text_indices,
                                              sel.labels) if l == 0 and i < 3
                    and (i, t) in {(0, 2), (1, 2), (2, 0), (0, 1), (1, 0), (2, 1)}}
        expected_img = {(0, 2), (1, 2), (2, 0)}  # rows: 0.8 max, 0.3 max, 0.7 max
        pairs = list(zip(sel.image_indices[3:6], sel.text_indices[3:6]))
        assert set(pairs) == expected_img
        # Text anchors: argmax over category-disjoint rows of column i.
        pairs_t = list(zip(sel.image_indices[6:], sel.text_indices[6:]))
        assert set(pairs_t) == {(2, 0), (2, 1), (0, 2)}

    def test_hard_requires_similarities(self):
        with pytest.raises(ValueError):
            sample_itm_negatives(["a", "b"], random.Random(0), strategy="hard")

    def test_single_category_batch_skips_with_counter(self):
        sel = sample_itm_negatives(["a", "a", "a"], random.Random(0))
        assert sel.labels == [1, 1, 1]
        assert sel.skipped == 6


class TestMaskTokens:
    def make_inputs(self, rows=200, length=12, vocab=30, seed=0):
        gen = torch.Generator().manual_seed(seed)
        ids = torch.randint(4, vocab, (rows, length), generator=gen)
        ids[:, 0] = 2
        mask = torch.ones_like(ids)
        return ids, mask

    def test_specials_and_padding_never_selected(self):
        ids, mask = self.make_inputs(rows=50)
        ids[:, 3] = 0  # PAD id inside the visible region
        mask[:, 8:] = 0
        gen = torch.Generator().manual_seed(1)
        corrupted, labels = mask_tokens(ids, mask, (0, 1, 2, 3), 3, 30, 0.5, gen)
        assert (labels[:, 0] == -100).all()
        assert (labels[:, 3] == -100).all()
        assert (labels[:, 8:] == -100).all()
        assert torch.equal(corrupted[:, 8:], ids[:, 8:])

    def test_empirical_rate_and_corruption_mix(self):
        ids, mask = self.make_inputs(rows=2000, length=10)
        gen = torch.Generator().manual_seed(2)
        corrupted, labels = mask_tokens(ids, mask, (0, 1, 2, 3), 3, 30, 0.15, gen)
        maskable = 2000 * 9
        selected = int((labels != -100).sum())
        rate = selected / maskable
        assert abs(rate - 0.15) < 0.01
        chosen = labels != -100
        masked = (corrupted == 3) & chosen
        kept = (corrupted == ids) & chosen
        randomized = chosen & ~masked & ~kept
        assert abs(masked.sum() / selected - 0.8) < 0.03
        # Random replacement can coincide with the original token, so the
        # observed "kept" share is slightly above 0.1.
        assert abs(kept.sum() / selected - 0.1) < 0.035
        assert abs(randomized.sum() / selected - 0.1) < 0.035

    def test_deterministic_given_generator_seed(self):
        ids, mask = self.make_inputs()
        a = mask_tokens(ids, mask, (0, 1, 2, 3), 3, 30, 0.15,
                        torch.Generator().manual_seed(3))
        b = mask_tokens(ids, mask, (0, 1, 2, 3), 3, 30, 0.15,
                        torch.Generator().manual_seed(3))
        assert torch.equal(a[0], b[0]) and torch.equal(a[1], b[1])

    def test_invalid_rate(self):
        ids, mask = self.make_inputs(rows=1)
        with pytest.raises(ValueError):
            mask_tokens(ids, mask, (0,), 3, 30, 0.0)


class TestMaskedLmLoss:
    def test_uniform_logits_give_log_vocab(self):
        vocab = 32
        logits = torch.zeros((2, 5, vocab), dtype=torch.float64)
        labels = torch.full((2, 5), -100)
        labels[0, 1] = 7
        labels[1, 3] = 2
        loss = masked_lm_loss(logits, labels)
        assert float(loss) == pytest.approx(math.log(vocab), rel=1e-12)

    def test_matches_loop_oracle(self):
        from oracles import oracle_masked_ce

        rng = np.random.default_rng(11)
        logits = rng.normal(size=(3, 6, 16))
        labels = np.full((3, 6), -100)
        labels[0, 2] = 5
        labels[1, 1] = 0
        labels[2, 5] = 15
        loss = masked_lm_loss(torch.tensor(logits), torch.tensor(labels))
        assert float(loss) == pytest.approx(oracle_masked_ce(logits, labels), rel=1e-10)

    def test_gradient_zero_at_unselected_positions(self):
        logits = torch.randn((2, 4, 8), dtype=torch.float64, requires_grad=True)
        labels = torch.full((2, 4), -100)
        labels[0, 1] = 3
        masked_lm_loss(logits, labels).backward()
        grad = logits.grad
        assert float(grad[0, 1].abs().sum()) > 0
        unselected = grad.clone()
        unselected[0, 1] = 0
        assert float(unselected.abs().sum()) == 0.0

    def test_zero_maskable_tokens_warns_and_returns_zero(self, caplog):
        logits = torch.randn((1, 3, 8), requires_grad=True)
        labels = torch.full((1, 3), -100)
        with caplog.at_level("WARNING"):
            loss = masked_lm_loss(logits, labels)
        assert float(loss.detach()) == 0.0
        assert "no maskable" in caplog.text
        loss.backward()  # still connected to the graph


class TestTotalLoss:
    def test_sum(self):
        parts = [torch.tensor(v, dtype=torch.float64) for v in (0.3, 0.7, 2.0, 0.4)]
        assert float(total_loss(*parts)) == pytest.approx(3.4, rel=1e-12)

    def test_nan_propagates(self):
        parts = [torch.tensor(v, dtype=torch.float64)
                 for v in (0.3, float("nan"), 2.0, 0.4)]
        assert math.isnan(float(total_loss(*parts)))

    def test_zeroing_three_components_leaves_the_fourth(self):
        zero = torch.tensor(0.0)
        assert float(total_loss(zero, zero, torch.tensor(1.25), zero)) == 1.25
