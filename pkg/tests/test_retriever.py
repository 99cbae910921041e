"""Retriever contracts: contrastive loss values, exact Top-K search against
a full-sort oracle, index invariants, rank selection rules, and set F1.
"""

import numpy as np
import pytest

from mmrag.data import CLS, ImageFeatures, KnowledgeItem, RetrievalBatch
from mmrag.encoder import HyperParams, MultimodalEncoder
from mmrag.errors import ContractError
from mmrag.fusion import FusionModule
from mmrag.optim import Rng
from mmrag.retriever import (EmbeddingIndex, RankHead, build_index,
                             classification_loss, contrastive_loss,
                             encode_question, mips_topk, pool_item,
                             rank_select, rank_train, retr_f1)
from mmrag.tensor import Tensor

HP = HyperParams(n_queries=3, d=16, n_heads=2, enc_layers=1, max_len=16,
                 vocab=12, d_img=5, patches=2)


@pytest.fixture()
def models():
    rng = Rng(8)
    encoder = MultimodalEncoder(HP, rng)
    fusion = FusionModule(HP, rng, encoder)
    return encoder, fusion


def text_item(i, tokens):
    return KnowledgeItem(f"t{i}", "text", text_payload=[CLS] + tokens)


class TestContrastiveLoss:
    def test_singleton_batch_is_zero(self, models):
        encoder, fusion = models
        batch = RetrievalBatch(questions=[[CLS, 4, 5]],
                               candidates=[text_item(0, [6, 7])],
                               positive_map={0: {0}})
        loss = contrastive_loss(encoder, fusion, batch)
        assert abs(loss.item()) < 1e-12

    def test_equal_scores_give_log_b(self):
        # force equal similarities by duplicating one candidate's content
        encoder = MultimodalEncoder(HP, Rng(1))
        fusion = FusionModule(HP, Rng(1), encoder)
        b = 4
        cands = [KnowledgeItem(f"c{i}", "text", text_payload=[CLS, 5, 6])
                 for i in range(b)]
        batch = RetrievalBatch(questions=[[CLS, 4]], candidates=cands,
                               positive_map={0: {0}})
        loss = contrastive_loss(encoder, fusion, batch)
        assert abs(loss.item() - np.log(b)) < 1e-10

    def test_two_questions_match_hand_softmax_oracle(self, models):
        encoder, fusion = models
        cands = [text_item(i, [4 + i, 5]) for i in range(4)]
        questions = [[CLS, 6, 7], [CLS, 7, 8]]
        batch = RetrievalBatch(questions=questions, candidates=cands,
                               positive_map={0: {0}, 1: {2, 3}})
        tau = 0.1
        loss = contrastive_loss(encoder, fusion, batch, temperature=tau)
        # oracle: recompute scores from pooled vectors with plain numpy
        mat = np.stack([encoder.pool_knowledge(c).data for c in cands])
        expect = 0.0
        for qi, q in enumerate(questions):
            qv = encode_question(encoder, q).data
            s = mat @ qv / tau
            z = s - s.max()
            logp = z - np.log(np.exp(z).sum())
            pos = sorted(batch.positive_map[qi])
            expect -= logp[pos].mean()
        expect /= len(questions)
        assert abs(loss.item() - expect) < 1e-10

    def test_question_without_positive_rejected(self, models):
        encoder, fusion = models
        batch = RetrievalBatch(questions=[[CLS, 4]],
                               candidates=[text_item(0, [5])],
                               positive_map={0: set()})
        with pytest.raises(ContractError):
            contrastive_loss(encoder, fusion, batch)

    def test_nonnegative(self, models):
        encoder, fusion = models
        cands = [text_item(i, [4 + i]) for i in range(3)]
        batch = RetrievalBatch(questions=[[CLS, 5], [CLS, 6]],
                               candidates=cands,
                               positive_map={0: {0}, 1: {1}})
        assert contrastive_loss(encoder, fusion, batch).item() >= 0.0


class TestIndex:
    def test_duplicate_ids_rejected(self):
        v = np.eye(2)
        with pytest.raises(ContractError):
            EmbeddingIndex(["a", "a"], v)

    def test_norm_invariant_enforced(self):
        with pytest.raises(ContractError):
            EmbeddingIndex(["a"], np.array([[0.5, 0.5]]))

    def test_zero_rows_allowed(self):
        idx = EmbeddingIndex(["a", "b"], np.array([[0.0, 0.0], [1.0, 0.0]]))
        assert len(idx) == 2

    def test_build_is_deterministic(self, models):
        encoder, fusion = models
        items = [text_item(i, [4 + i, 5]) for i in range(4)]
        items.append(KnowledgeItem("img", "image",
                                   image_payload=ImageFeatures(
                                       Rng(2).normal((HP.patches, HP.d_img)))))
        a = build_index(encoder, fusion, items)
        b = build_index(encoder, fusion, items)
        assert a.ids == b.ids
        assert np.array_equal(a.vectors, b.vectors)
        assert np.all(np.abs(np.linalg.norm(a.vectors, axis=1) - 1.0) <= 1e-9)

    def test_single_item_always_retrieved(self, models):
        encoder, fusion = models
        idx = build_index(encoder, fusion, [text_item(0, [4])])
        q = Rng(3).normal((HP.d,))
        assert mips_topk(idx, q, 1)[0][0] == "t0"

    def test_build_rejects_duplicate_items(self, models):
        encoder, fusion = models
        items = [text_item(0, [4]), text_item(0, [5])]
        with pytest.raises(ContractError):
            build_index(encoder, fusion, items)


def brute_force_topk(vectors, ids, query, k):
    """Full-sort oracle with the same tie rule: score desc, index asc."""
    scores = vectors @ query
    order = sorted(range(len(ids)), key=lambda i: (-scores[i], i))
    return [(ids[i], scores[i]) for i in order[:k]]


class TestMips:
    def test_identity_basis(self):
        idx = EmbeddingIndex([f"e{i}" for i in range(4)], np.eye(4))
        for j in range(4):
            top = mips_topk(idx, np.eye(4)[j], 1)
            assert top[0][0] == f"e{j}" and abs(top[0][1] - 1.0) < 1e-15

    def test_k_equals_size_fully_sorted(self):
        rng = Rng(5)
        v = rng.normal((8, 4))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        idx = EmbeddingIndex([f"i{i}" for i in range(8)], v)
        q = rng.normal((4,))
        got = mips_topk(idx, q, 8)
        assert got == brute_force_topk(v, idx.ids, q, 8)

    def test_oracle_equivalence_on_seeded_instances(self):
        for trial in range(10):
            rng = Rng(100 + trial)
            v = rng.normal((200, 16))
            v /= np.linalg.norm(v, axis=1, keepdims=True)
            ids = [f"i{i}" for i in range(200)]
            idx = EmbeddingIndex(ids, v)
            q = rng.normal((16,))
            got = mips_topk(idx, q, 10)
            expect = brute_force_topk(v, ids, q, 10)
            assert [g[0] for g in got] == [e[0] for e in expect]

    def test_tie_break_lowest_index(self):
        v = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
        idx = EmbeddingIndex(["a", "b", "c"], v)
        got = mips_topk(idx, np.array([1.0, 0.0]), 2)
        assert [g[0] for g in got] == ["a", "b"]

    def test_prefix_property(self):
        rng = Rng(7)
        v = rng.normal((30, 8))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        idx = EmbeddingIndex([f"i{i}" for i in range(30)], v)
        q = rng.normal((8,))
        for k in range(1, 29):
            a = [x[0] for x in mips_topk(idx, q, k)]
            b = [x[0] for x in mips_topk(idx, q, k + 1)]
            assert b[:k] == a

    def test_scale_invariance_of_order(self):
        rng = Rng(9)
        v = rng.normal((20, 8))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        idx = EmbeddingIndex([f"i{i}" for i in range(20)], v)
        q = rng.normal((8,))
        base = [x[0] for x in mips_topk(idx, q, 5)]
        scaled = [x[0] for x in mips_topk(idx, q * 7.5, 5)]
        assert base == scaled

    def test_k_out_of_range(self):
        idx = EmbeddingIndex(["a"], np.array([[1.0, 0.0]]))
        for k in (0, 2):
            with pytest.raises(ContractError):
                mips_topk(idx, np.array([1.0, 0.0]), k)


class TestRetrF1:
    def test_exact_match(self):
        assert retr_f1({"a", "b"}, {"a", "b"}) == 1.0

    def test_disjoint(self):
        assert retr_f1({"a"}, {"b"}) == 0.0

    def test_half_overlap(self):
        assert abs(retr_f1({"a", "b"}, {"b", "c"}) - 0.5) < 1e-15

    def test_empty_prediction(self):
        assert retr_f1(set(), {"a"}) == 0.0

    def test_empty_gold_rejected(self):
        with pytest.raises(ContractError):
            retr_f1({"a"}, set())


class RankCfg:
    lr = 0.1
    weight_decay = 0.0
    epochs = 30
    batch_size = 16
    warmup_steps = 2


class TestRankStage:
    def test_frozen_reencoder_never_updates(self, models):
        encoder, fusion = models
        head = RankHead(HP, Rng(4))
        before = {p.name: p.data.copy() for p in head.frozen_params()}
        rng = Rng(5)
        feats = rng.normal((40, HP.d))
        labels = (feats[:, 0] > 0).astype(int)
        rank_train(head, feats, labels, RankCfg(), Rng(6))
        for p in head.frozen_params():
            assert np.array_equal(p.data, before[p.name]), p.name

    def test_learns_separable_labels(self):
        head = RankHead(HP, Rng(4))
        rng = Rng(5)
        feats = rng.normal((60, HP.d))
        labels = (feats[:, 2] > 0).astype(int)
        rank_train(head, feats, labels, RankCfg(), Rng(6))
        probs = head.relevance_probabilities(feats)
        acc = ((probs >= 0.5).astype(int) == labels).mean()
        assert acc >= 0.9

    def test_zero_weight_head_falls_back_to_retrieval_order(self):
        head = RankHead(HP, Rng(4))
        head.z_w.tensor.data[...] = 0.0
        head.z_b.tensor.data[...] = 0.0
        feats = Rng(5).normal((4, HP.d))
        probs = head.relevance_probabilities(feats)
        assert np.allclose(probs, 0.5)
        kept = rank_select(["r0", "r1", "r2", "r3"], probs, cap=2)
        assert kept == ["r0", "r1"]  # retrieval order preserved on ties

    def test_rank_select_cap_and_threshold(self):
        kept = rank_select(["a", "b", "c"], [0.9, 0.8, 0.7], cap=2)
        assert kept == ["a", "b"]

    def test_rank_select_floor_rule(self):
        kept = rank_select(["a", "b", "c"], [0.2, 0.4, 0.3], cap=2)
        assert kept == ["b"]

    def test_rank_select_orders_by_probability(self):
        kept = rank_select(["a", "b", "c"], [0.6, 0.95, 0.7], cap=2)
        assert kept == ["b", "c"]

    def test_classification_loss_matches_manual(self):
        head = RankHead(HP, Rng(4))
        feats = Rng(5).normal((3, HP.d))
        labels = [1, 0, 1]
        loss = classification_loss(head, feats, labels)
        logits = feats @ head.z_w.data + head.z_b.data
        expect = 0.0
        for r, y in enumerate(labels):
            z = logits[r] - logits[r].max()
            expect -= z[y] - np.log(np.exp(z).sum())
        assert abs(loss.item() - expect / 3) < 1e-12

    def test_features_shape_and_purity(self, models):
        encoder, fusion = models
        head = RankHead(HP, Rng(4))
        q = [CLS, 4, 5]
        item = text_item(0, [6, 7])
        f1 = head.features(encoder, fusion, q, item)
        f2 = head.features(encoder, fusion, q, item)
        assert f1.shape == (HP.d,)
        assert np.array_equal(f1, f2)


class TestPoolItem:
    def test_plain_pooling_for_mixed_items(self, models):
        encoder, fusion = models
        item = KnowledgeItem("m", "image_text", text_payload=[CLS, 4, 5],
                             image_payload=ImageFeatures(
                                 Rng(2).normal((HP.patches, HP.d_img))))
        with_fusion = pool_item(encoder, item, fusion, use_fusion=True)
        without = pool_item(encoder, item, fusion, use_fusion=False)
        assert abs(np.linalg.norm(without.data) - 1.0) < 1e-9
        assert not np.allclose(with_fusion.data, without.data)
