"""Contrastive retriever training, an exact inner-product Top-K index, and
the rank stage that filters confusable candidates with a trainable binary
head over frozen re-encoded features.
"""

from __future__ import annotations

import numpy as np

from .data import CLS, TEXT, KnowledgeItem, RetrievalBatch
from .encoder import MultimodalEncoder, l2_normalize
from .errors import ContractError
from .fusion import BIDIRECTIONAL_ITM, FusionModule
from .layers import FinalNorm, TransformerLayer, init_param, zeros_param
from .optim import AdamW, Parameter, Rng, cosine_lr
from .tensor import Tensor, concat, cross_entropy, log_softmax, matmul, no_grad, softmax

DEFAULT_TEMPERATURE = 0.05


def encode_question(encoder: MultimodalEncoder, ids: list[int]) -> Tensor:
    """Question embedding: CLS representation, L2-normalized, (D,)."""
    return l2_normalize(encoder.encode_text(ids), context="question")


def pool_item(encoder: MultimodalEncoder, item: KnowledgeItem,
              fusion: FusionModule | None, use_fusion: bool = True,
              instruction_policy: str = "self_text") -> Tensor:
    """Pool one candidate. ``use_fusion=False`` is the ablation path: mixed
    items become the normalized mean over [query rows; CLS row] without the
    fusion stack."""
    instruction = [CLS] if instruction_policy == "none" else None
    if use_fusion or item.modality != "image_text":
        return encoder.pool_knowledge(item, instruction=instruction,
                                      fusion=fusion if use_fusion else None)
    visual = encoder.encode_image([item.image_payload], item.text_payload)
    cls_row = encoder.encode_text(item.text_payload).reshape(1, -1)
    pooled = concat([visual, cls_row], axis=0).mean(axis=0)
    return l2_normalize(pooled, context=item.id)


def contrastive_loss(encoder: MultimodalEncoder, fusion: FusionModule,
                     batch: RetrievalBatch,
                     temperature: float = DEFAULT_TEMPERATURE,
                     use_fusion: bool = True) -> Tensor:
    """Softmax cross-entropy over temperature-scaled similarities, pulling
    each question toward its positives against the pooled candidate set.
    Multiple positives are averaged per question."""
    if not batch.questions or not batch.candidates:
        raise ContractError("retrieval batch needs questions and candidates")
    for qi in range(len(batch.questions)):
        if not batch.positive_map.get(qi):
            raise ContractError(f"question {qi} has no positive candidate")
    cand_rows = concat([pool_item(encoder, c, fusion,
                                  use_fusion=use_fusion).reshape(1, -1)
                        for c in batch.candidates], axis=0)
    total = None
    inv_t = 1.0 / temperature
    for qi, q_ids in enumerate(batch.questions):
        q_vec = encode_question(encoder, q_ids)
        scores = matmul(cand_rows, q_vec.reshape(-1, 1)).reshape(-1) * inv_t
        logp = log_softmax(scores, axis=-1)
        positives = sorted(batch.positive_map[qi])
        term = -logp[positives].mean()
        total = term if total is None else total + term
    return total * (1.0 / len(batch.questions))


# -- index ------------------------------------------------------------------------


class EmbeddingIndex:
    """Id-aligned matrix of pooled knowledge embeddings; row i belongs to
    ids[i] and is either zero or unit-norm."""

    def __init__(self, ids: list[str], vectors: np.ndarray, built_at: str = ""):
        if len(ids) != len(set(ids)):
            raise ContractError("duplicate ids in index")
        vectors = np.asarray(vectors, dtype=np.float64)
        if vectors.shape[0] != len(ids):
            raise ContractError("index rows do not match ids")
        norms = np.linalg.norm(vectors, axis=1)
        bad = ~((norms == 0.0) | (np.abs(norms - 1.0) <= 1e-9))
        if bad.any():
            raise ContractError(
                f"index rows not normalized: ids {[ids[i] for i in np.flatnonzero(bad)][:4]}")
        self.ids = list(ids)
        self.vectors = vectors
        self.built_at = built_at

    def __len__(self):
        return len(self.ids)


def build_index(encoder: MultimodalEncoder, fusion: FusionModule,
                items: list[KnowledgeItem], instruction_policy: str = "self_text",
                built_at: str = "", use_fusion: bool = True) -> EmbeddingIndex:
    """Deterministically pool every item under the given instruction policy.

    ``self_text`` conditions image encoding on the item's own caption when
    one exists; ``none`` uses a bare CLS instruction for everything.
    """
    if instruction_policy not in ("self_text", "none"):
        raise ContractError(f"unknown instruction policy {instruction_policy!r}")
    ids = [it.id for it in items]
    if len(set(ids)) != len(ids):
        raise ContractError("duplicate item ids")
    rows = []
    with no_grad():
        for it in items:
            rows.append(pool_item(encoder, it, fusion, use_fusion=use_fusion,
                                  instruction_policy=instruction_policy).data)
    return EmbeddingIndex(ids, np.stack(rows), built_at=built_at)


def mips_topk(index: EmbeddingIndex, query: np.ndarray, k: int
              ) -> list[tuple[str, float]]:
    """Exactly the K largest inner products, descending; ties broken by
    lower row index. Linear scan with partial selection."""
    n = len(index)
    if not (1 <= k <= n):
        raise ContractError(f"k={k} out of range for index of {n}")
    scores = index.vectors @ np.asarray(query, dtype=np.float64)
    if k < n:
        part = np.argpartition(-scores, k - 1)[:k]
        kth = scores[part].min()
        cand = np.flatnonzero(scores >= kth)  # keep all boundary ties
    else:
        cand = np.arange(n)
    order = cand[np.lexsort((cand, -scores[cand]))][:k]
    return [(index.ids[i], float(scores[i])) for i in order]


def retr_f1(predicted: set[str], gold: set[str]) -> float:
    """Set-level F1 between retrieved and gold evidence ids."""
    if not gold:
        raise ContractError("gold evidence set is empty")
    predicted = set(predicted)
    gold = set(gold)
    if not predicted:
        return 0.0
    hit = len(predicted & gold)
    if hit == 0:
        return 0.0
    precision = hit / len(predicted)
    recall = hit / len(gold)
    return 2 * precision * recall / (precision + recall)


# -- retriever training --------------------------------------------------------------


def train_retriever(encoder: MultimodalEncoder, fusion: FusionModule,
                    world, cfg, rng: Rng, use_fusion: bool = True) -> list[dict]:
    """Contrastive training over the train split; updates encoder and
    fusion parameters. Candidates are the batch questions' positives pooled
    (in-batch negatives)."""
    train_examples = world.examples_for("train")
    train_examples = [ex for ex in train_examples if ex.hops == 1]
    params = encoder.params() + (fusion.params() if use_fusion else [])
    opt = AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    n = len(train_examples)
    steps_per_epoch = max(1, (n + cfg.batch_size - 1) // cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    curve = []
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.split(f"retriever/epoch{epoch}").permutation(n)
        losses = []
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            batch = _make_batch(world, [train_examples[i] for i in idx])
            loss = contrastive_loss(encoder, fusion, batch,
                                    temperature=cfg.temperature,
                                    use_fusion=use_fusion)
            opt.zero_grad()
            loss.backward()
            opt.step(lr=cosine_lr(step, total_steps, cfg.lr, cfg.warmup_steps))
            step += 1
            losses.append(loss.item())
        curve.append({"epoch": epoch, "loss": float(np.mean(losses))})
    return curve


def _make_batch(world, examples) -> RetrievalBatch:
    candidates: list[KnowledgeItem] = []
    seen: dict[str, int] = {}
    positive_map: dict[int, set[int]] = {}
    for qi, ex in enumerate(examples):
        pos = set()
        for gid in sorted(ex.gold_ids):
            if gid not in seen:
                seen[gid] = len(candidates)
                candidates.append(world.item_by_id(gid))
            pos.add(seen[gid])
        positive_map[qi] = pos
    return RetrievalBatch(questions=[ex.question for ex in examples],
                          candidates=candidates, positive_map=positive_map)


def recall_at_k(encoder: MultimodalEncoder, index: EmbeddingIndex,
                examples, k: int) -> float:
    """Fraction of questions whose every gold id appears in the top K."""
    hits = 0
    with no_grad():
        for ex in examples:
            q = encode_question(encoder, ex.question).data
            got = {i for i, _ in mips_topk(index, q, min(k, len(index)))}
            hits += ex.gold_ids <= got
    return hits / max(1, len(examples))


# -- rank stage -----------------------------------------------------------------------


class RankHead:
    """Permanently frozen single-layer re-encoder (a stand-in for a fixed
    language-model encoder) plus a trainable two-class linear head."""

    def __init__(self, hp, rng: Rng):
        self.hp = hp
        r = rng.split("rank")
        self.reencoder = TransformerLayer("rank.re", hp.d, hp.n_heads, r)
        self.re_final = FinalNorm("rank.re", hp.d)
        self.segment = init_param("rank.segment", (2, hp.d), r, std=0.1)
        for p in self.frozen_params():
            p.set_frozen(True)
        self.z_w = init_param("rank.z.w", (hp.d, 2), r)
        self.z_b = zeros_param("rank.z.b", 2)

    def frozen_params(self) -> list[Parameter]:
        return self.reencoder.params() + self.re_final.params() + [self.segment]

    def trainable_params(self) -> list[Parameter]:
        return [self.z_w, self.z_b]

    def params(self) -> list[Parameter]:
        return self.frozen_params() + self.trainable_params()

    def candidate_rows(self, encoder: MultimodalEncoder, fusion: FusionModule,
                       question: list[int], item: KnowledgeItem) -> Tensor:
        if item.modality == TEXT:
            return encoder.text_rows(item.text_payload)
        if item.modality == IMAGE:
            return encoder.encode_image([item.image_payload], question)
        visual = encoder.encode_image([item.image_payload], item.text_payload)
        fused = fusion.fuse(visual, item.text_payload, BIDIRECTIONAL_ITM)
        return fused[:self.hp.n_queries + 1]

    def features(self, encoder: MultimodalEncoder, fusion: FusionModule,
                 question: list[int], item: KnowledgeItem) -> np.ndarray:
        """Mean over re-encoded [question rows; candidate rows], (D,)."""
        with no_grad():
            q_rows = encoder.text_rows(question) + self.segment.tensor[0]
            c_rows = self.candidate_rows(encoder, fusion, question, item) \
                + self.segment.tensor[1]
            x = concat([q_rows, c_rows], axis=0)
            x = self.reencoder.forward(x)
            x = self.re_final.forward(x)
            return x.mean(axis=0).data

    def logits(self, features: np.ndarray) -> Tensor:
        f = Tensor(np.atleast_2d(features))
        return matmul(f, self.z_w.tensor) + self.z_b.tensor

    def relevance_probabilities(self, features: np.ndarray) -> np.ndarray:
        with no_grad():
            return softmax(self.logits(features), axis=-1).data[:, 1]


def classification_loss(head: RankHead, features: np.ndarray, labels) -> Tensor:
    """Two-class cross-entropy of the trainable head over cached features."""
    return cross_entropy(head.logits(features), labels)


def rank_train(head: RankHead, features: np.ndarray, labels: np.ndarray,
               cfg, rng: Rng) -> list[dict]:
    """Fit the linear head on (feature, gold-membership) pairs gathered from
    the retriever's Top-K lists. Only the head's parameters update."""
    if len(features) == 0:
        raise ContractError("no rank training data")
    opt = AdamW(head.trainable_params(), lr=cfg.lr,
                weight_decay=cfg.weight_decay)
    n = len(features)
    steps_per_epoch = max(1, (n + cfg.batch_size - 1) // cfg.batch_size)
    total = cfg.epochs * steps_per_epoch
    curve = []
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.split(f"rank/epoch{epoch}").permutation(n)
        losses = []
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss = classification_loss(head, features[idx], labels[idx])
            opt.zero_grad()
            loss.backward()
            opt.step(lr=cosine_lr(step, total, cfg.lr, cfg.warmup_steps))
            step += 1
            losses.append(loss.item())
        curve.append({"epoch": epoch, "loss": float(np.mean(losses))})
    return curve


def rank_select(candidate_ids: list[str], probabilities, cap: int = 2
                ) -> list[str]:
    """Keep candidates with relevance probability >= 0.5, capped at ``cap``,
    ordered by probability with retrieval order breaking ties; if all fall
    below threshold, keep the single best-scoring candidate."""
    probs = np.asarray(probabilities, dtype=np.float64)
    if len(candidate_ids) != len(probs):
        raise ContractError("candidate/probability length mismatch")
    order = np.lexsort((np.arange(len(probs)), -probs))
    kept = [candidate_ids[i] for i in order if probs[i] >= 0.5][:max(1, cap)]
    if not kept:
        kept = [candidate_ids[order[0]]]
    return kept
