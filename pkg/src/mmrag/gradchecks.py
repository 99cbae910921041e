"""Finite-difference verification for every exposed training loss on tiny
shapes (2 queries, width 8, text length 3, vocabulary 8).
"""

from __future__ import annotations

import numpy as np

from .data import CLS, ASKGExample, ImageFeatures, KnowledgeItem, RetrievalBatch
from .encoder import HyperParams, MultimodalEncoder
from .fusion import FusionModule
from .generator import Decoder, GenSettings, generation_loss
from .optim import Rng, gradient_check
from .retriever import RankHead, classification_loss, contrastive_loss

TINY = HyperParams(n_queries=2, d=8, n_heads=2, enc_layers=1, max_len=8,
                   vocab=8, d_img=4, patches=2, max_images=2, dec_layers=1,
                   max_answer_len=4)

# Weight scale for the checked models. At the training init (std 0.02) many
# true gradients sit near the checker's 1e-8 denominator floor, where central
# differences measure only roundoff; a wider init keeps every coordinate well
# above that floor without changing the code under test.
_CHECK_SCALE = 15.0


def tiny_models(seed: int = 0):
    rng = Rng(seed)
    encoder = MultimodalEncoder(TINY, rng)
    fusion = FusionModule(TINY, rng, encoder)
    decoder = Decoder(TINY, rng)
    rank = RankHead(TINY, rng)
    for p in (encoder.params() + fusion.params() + decoder.params()
              + rank.params()):
        if p.data.std() > 0:  # leave layer-norm gains/biases at identity
            p.tensor.data[...] *= _CHECK_SCALE
    return encoder, fusion, decoder, rank


def tiny_image(seed: int) -> ImageFeatures:
    return ImageFeatures(Rng(seed).normal((TINY.patches, TINY.d_img)))


def check_itm(seed: int = 0, eps: float = 1e-5) -> float:
    encoder, fusion, _, _ = tiny_models(seed)
    encoder.set_frozen(True)
    batch = [(tiny_image(1), [CLS, 4, 5, 6], 1),
             (tiny_image(2), [CLS, 6, 4], 0)]
    return gradient_check(lambda: fusion.itm_loss(batch),
                          fusion.params(), eps=eps)


def check_itg(seed: int = 0, eps: float = 1e-5) -> float:
    encoder, fusion, _, _ = tiny_models(seed)
    encoder.set_frozen(True)
    image, text = tiny_image(3), [4, 5, 6]
    return gradient_check(lambda: fusion.itg_loss(image, text),
                          fusion.params(), eps=eps)


def check_contrastive(seed: int = 0, eps: float = 1e-5) -> float:
    encoder, fusion, _, _ = tiny_models(seed)
    items = [
        KnowledgeItem("a", "text", text_payload=[CLS, 4, 5]),
        KnowledgeItem("b", "image", image_payload=tiny_image(4)),
        KnowledgeItem("c", "image_text", text_payload=[CLS, 5, 6],
                      image_payload=tiny_image(5)),
    ]
    batch = RetrievalBatch(
        questions=[[CLS, 6, 7], [CLS, 7, 4]],
        candidates=items,
        positive_map={0: {0}, 1: {1, 2}},
    )
    params = encoder.params() + fusion.params()
    return gradient_check(
        lambda: contrastive_loss(encoder, fusion, batch, temperature=0.5),
        params, eps=eps)


def check_rank_classifier(seed: int = 0, eps: float = 1e-5) -> float:
    _, _, _, rank = tiny_models(seed)
    feats = Rng(seed + 1).normal((4, TINY.d))
    labels = np.array([1, 0, 0, 1])
    return gradient_check(
        lambda: classification_loss(rank, feats, labels),
        rank.trainable_params(), eps=eps)


def check_generation(seed: int = 0, eps: float = 1e-5) -> float:
    encoder, fusion, decoder, _ = tiny_models(seed)
    items = [
        KnowledgeItem("a", "text", text_payload=[CLS, 4, 5]),
        KnowledgeItem("b", "image", image_payload=tiny_image(6)),
    ]
    qa_batch = [(items, [CLS, 6, 7], [5])]
    askg_batch = [ASKGExample(prompt=[CLS, 7, 4, 5], answer=[6, 4],
                              positive_position=0, positive_id="a",
                              reference_ids=("a", "b"))]
    settings = GenSettings(alpha=1.0)
    params = decoder.params() + encoder.params()
    return gradient_check(
        lambda: generation_loss(decoder, encoder, qa_batch, askg_batch,
                                settings),
        params, eps=eps)


LOSS_CHECKS = {
    "itm_matching_loss": check_itm,
    "itg_captioning_loss": check_itg,
    "contrastive_retrieval_loss": check_contrastive,
    "rank_classification_loss": check_rank_classifier,
    "generation_loss": check_generation,
}


def run_all_checks(seed: int = 0, eps: float = 1e-5) -> dict[str, float]:
    return {name: fn(seed=seed, eps=eps) for name, fn in LOSS_CHECKS.items()}
