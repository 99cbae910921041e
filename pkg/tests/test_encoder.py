"""Query-transformer encoder contracts: shapes, freezing, masking,
image-order invariance, and pooling, checked against straight-line oracles.
"""

import numpy as np
import pytest

from mmrag.data import CLS, PAD, ImageFeatures, KnowledgeItem
from mmrag.encoder import HyperParams, MultimodalEncoder, l2_normalize
from mmrag.errors import ConfigError, ContractError
from mmrag.fusion import FusionModule
from mmrag.optim import Rng
from mmrag.tensor import Tensor

HP = HyperParams(n_queries=4, d=16, n_heads=2, enc_layers=2, max_len=16,
                 vocab=12, d_img=6, patches=3, max_images=3)


@pytest.fixture()
def encoder():
    return MultimodalEncoder(HP, Rng(42))


def make_image(seed, hp=HP):
    return ImageFeatures(Rng(seed).normal((hp.patches, hp.d_img)))


INSTR = [CLS, 4, 5]


class TestShapes:
    def test_visual_rep_has_n_rows_for_any_image_count(self, encoder):
        for m in (1, 2, 3):
            images = [make_image(i) for i in range(m)]
            out = encoder.encode_image(images, INSTR)
            assert out.shape == (HP.n_queries, HP.d)

    def test_zero_images_rejected(self, encoder):
        with pytest.raises(ContractError):
            encoder.encode_image([], INSTR)

    def test_image_cap_enforced(self, encoder):
        images = [make_image(i) for i in range(HP.max_images + 1)]
        with pytest.raises(ContractError):
            encoder.encode_image(images, INSTR)

    def test_long_instruction_rejected(self, encoder):
        with pytest.raises(ContractError):
            encoder.encode_image([make_image(0)], [CLS] + [4] * HP.max_len)

    def test_hyperparams_validation(self):
        with pytest.raises(ConfigError):
            HyperParams(d=10, n_heads=4).validate()
        with pytest.raises(ConfigError):
            HyperParams(n_queries=0).validate()


class TestEncodeImage:
    def test_singleton_list_matches_single_image_bitwise(self, encoder):
        img = make_image(7)
        a = encoder.encode_image([img], INSTR)
        b = encoder.encode_image([img], INSTR)
        assert np.array_equal(a.data, b.data)

    def test_duplicate_image_matches_duplicated_key_oracle(self, encoder):
        # the two-image path must equal a straight-line oracle that simply
        # duplicates the patch key set of the single image
        img = make_image(9)
        two = encoder.encode_image([img, img], INSTR)
        oracle = oracle_encode_image(encoder, [img, img], INSTR)
        assert np.allclose(two.data, oracle, atol=1e-10, rtol=0)

    def test_image_order_invariance(self, encoder):
        img_a, img_b = make_image(1), make_image(2)
        ab = encoder.encode_image([img_a, img_b], INSTR)
        ba = encoder.encode_image([img_b, img_a], INSTR)
        assert np.allclose(ab.data, ba.data, atol=1e-10, rtol=0)

    def test_no_gradient_reaches_image_features(self, encoder):
        img = make_image(3)
        out = encoder.encode_image([img], INSTR)
        out.sum().backward()
        # encoder weights received gradient, the raw features never do
        assert encoder.img_proj.grad is not None
        assert encoder.query_emb.grad is not None

    def test_instruction_awareness(self, encoder):
        # different instructions change the representation nearly always
        rng = Rng(5)
        img = make_image(4)
        differs = 0
        trials = 40
        for _ in range(trials):
            ia = [CLS] + [int(t) for t in rng.integers(4, HP.vocab, size=3)]
            ib = [CLS] + [int(t) for t in rng.integers(4, HP.vocab, size=3)]
            if ia == ib:
                differs += 1
                continue
            ra = encoder.encode_image([img], ia)
            rb = encoder.encode_image([img], ib)
            differs += not np.allclose(ra.data, rb.data, atol=1e-12)
        assert differs / trials >= 0.95


class TestEncodeText:
    def test_deterministic(self, encoder):
        ids = [CLS, 5, 6, 7]
        a = encoder.encode_text(ids)
        b = encoder.encode_text(ids)
        assert np.array_equal(a.data, b.data)

    def test_pad_appended_leaves_rep_unchanged(self, encoder):
        ids = [CLS, 5, 6]
        base = encoder.encode_text(ids)
        padded = encoder.encode_text(ids + [PAD])
        assert np.array_equal(base.data, padded.data)

    def test_seeded_tiny_weights_match_oracle(self, encoder):
        ids = [CLS, 4, 9, 6]
        got = encoder.encode_text(ids)
        expect = oracle_encode_text(encoder, ids)
        assert np.allclose(got.data, expect[0], atol=1e-10, rtol=0)

    def test_empty_rejected(self, encoder):
        with pytest.raises(ContractError):
            encoder.encode_text([])

    def test_missing_cls_rejected(self, encoder):
        with pytest.raises(ContractError):
            encoder.encode_text([4, 5])


class TestPooling:
    def test_text_item_equals_normalized_cls(self, encoder):
        item = KnowledgeItem("t", "text", text_payload=[CLS, 4, 5])
        pooled = encoder.pool_knowledge(item)
        direct = encoder.encode_text([CLS, 4, 5])
        expect = direct.data / np.linalg.norm(direct.data)
        assert np.allclose(pooled.data, expect, atol=1e-12)
        assert abs(np.linalg.norm(pooled.data) - 1.0) < 1e-9

    def test_image_item_pools_query_rows(self, encoder):
        item = KnowledgeItem("i", "image", image_payload=make_image(11))
        pooled = encoder.pool_knowledge(item)
        assert pooled.shape == (HP.d,)
        assert abs(np.linalg.norm(pooled.data) - 1.0) < 1e-9

    def test_image_text_requires_fusion(self, encoder):
        item = KnowledgeItem("m", "image_text", text_payload=[CLS, 4],
                             image_payload=make_image(12))
        with pytest.raises(ContractError):
            encoder.pool_knowledge(item)
        fusion = FusionModule(HP, Rng(1), encoder)
        pooled = encoder.pool_knowledge(item, fusion=fusion)
        assert abs(np.linalg.norm(pooled.data) - 1.0) < 1e-9

    def test_degenerate_zero_vector_returned_unchanged(self):
        vec = Tensor(np.zeros(4))
        out = l2_normalize(vec)
        assert np.array_equal(out.data, np.zeros(4))


# -- straight-line oracles (plain numpy, no tape) -----------------------------------


def _np_ln(x, g, b, eps=1e-5):
    mu = x.mean(-1, keepdims=True)
    var = x.var(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


def _np_gelu(x):
    c = np.sqrt(2.0 / np.pi)
    return 0.5 * x * (1.0 + np.tanh(c * (x + 0.044715 * x ** 3)))


def _np_softmax(x):
    z = x - x.max(-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(-1, keepdims=True)


def _np_attention(xq, xkv, wq, wk, wv, wo, n_heads, mask=None):
    lq, d = xq.shape
    dh = d // n_heads
    out = np.zeros((lq, d))
    q = xq @ wq
    k = xkv @ wk
    v = xkv @ wv
    for h in range(n_heads):
        sl = slice(h * dh, (h + 1) * dh)
        scores = q[:, sl] @ k[:, sl].T / np.sqrt(dh)
        if mask is not None:
            scores = scores + mask
        out[:, sl] = _np_softmax(scores) @ v[:, sl]
    return out @ wo


def _np_layer(layer, x, mask=None, cross_kv=None, cross_rows=None):
    h = _np_ln(x, layer.ln1_g.data, layer.ln1_b.data)
    x = x + _np_attention(h, h, layer.wq.data, layer.wk.data, layer.wv.data,
                          layer.wo.data, layer.n_heads, mask)
    if layer.with_cross and cross_kv is not None:
        n = x.shape[0] if cross_rows is None else cross_rows
        xq = x[:n]
        h = _np_ln(xq, layer.lnc_g.data, layer.lnc_b.data)
        xq = xq + _np_attention(h, cross_kv, layer.cq.data, layer.ck.data,
                                layer.cv.data, layer.co.data, layer.n_heads)
        x = np.concatenate([xq, x[n:]], axis=0)
    h = _np_ln(x, layer.ln2_g.data, layer.ln2_b.data)
    h = _np_gelu(h @ layer.w1.data + layer.b1.data)
    return x + h @ layer.w2.data + layer.b2.data


def oracle_encode_text(encoder, ids):
    x = encoder.token_emb.data[ids] + encoder.pos_emb.data[:len(ids)]
    mask = np.zeros((len(ids), len(ids)))
    mask[:, np.asarray(ids) == PAD] = -1e30
    for layer in encoder.layers:
        x = _np_layer(layer, x, mask)
    return _np_ln(x, encoder.final.g.data, encoder.final.b.data)


def oracle_encode_image(encoder, images, instruction):
    keys = np.concatenate([img.patches @ encoder.img_proj.data
                           + encoder.img_pos.data for img in images], axis=0)
    instr = encoder.token_emb.data[instruction] \
        + encoder.pos_emb.data[:len(instruction)]
    x = np.concatenate([encoder.query_emb.data, instr], axis=0)
    n = encoder.hp.n_queries
    mask = np.zeros((x.shape[0], x.shape[0]))
    for layer in encoder.layers:
        x = _np_layer(layer, x, mask, cross_kv=keys, cross_rows=n)
    return _np_ln(x, encoder.final.g.data, encoder.final.b.data)[:n]
