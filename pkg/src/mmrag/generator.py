"""Answer decoder with cross-attention to encoded evidence, the
relevance-selection dataset builder, the joint generation loss, greedy
decoding, answer metrics, and the marginalized answer likelihood.
"""

from __future__ import annotations

import string
from collections import Counter
from dataclasses import dataclass

import numpy as np

from .data import BOS, CLS, EOS, ASKGExample, IMAGE, IMAGE_TEXT, KnowledgeItem, TEXT
from .encoder import MultimodalEncoder
from .errors import ContractError
from .layers import FinalNorm, TransformerLayer, causal_mask, init_param, zeros_param
from .optim import AdamW, Parameter, Rng, cosine_lr
from .retriever import encode_question
from .synthworld import SELECTION_ANSWER_TEMPLATE, SELECTION_PREAMBLE, Vocab
from .tensor import Tensor, concat, cross_entropy, matmul, no_grad, take_rows


@dataclass
class GenSettings:
    """Generation-stage knobs; alpha weighs the selection-dataset term."""

    alpha: float = 1.0
    negatives_per_prompt: int = 1
    askg_enabled: bool = True

    def validate(self) -> "GenSettings":
        if not (0.0 <= self.alpha <= 5.0):
            raise ContractError(f"alpha {self.alpha} outside [0, 5]")
        if self.negatives_per_prompt < 1:
            raise ContractError("negatives_per_prompt must be >= 1")
        return self


class Decoder:
    """Small autoregressive transformer: causal self-attention plus
    cross-attention to the encoded context, with a vocabulary head."""

    def __init__(self, hp, rng: Rng):
        self.hp = hp
        r = rng.split("decoder")
        self.token_emb = init_param("dec.token_emb", (hp.vocab, hp.d), r)
        self.pos_emb = init_param("dec.pos_emb", (hp.max_answer_len + 2, hp.d), r)
        self.layers = [TransformerLayer(f"dec.layer{i}", hp.d, hp.n_heads, r,
                                        with_cross=True)
                       for i in range(hp.dec_layers)]
        self.final = FinalNorm("dec", hp.d)
        self.lm_w = init_param("dec.lm.w", (hp.d, hp.vocab), r)
        self.lm_b = zeros_param("dec.lm.b", hp.vocab)

    def params(self) -> list[Parameter]:
        out = [self.token_emb, self.pos_emb]
        for layer in self.layers:
            out += layer.params()
        return out + self.final.params() + [self.lm_w, self.lm_b]

    def logits(self, context: Tensor, input_ids: list[int]) -> Tensor:
        """Teacher-forced logits (T, V); position t sees inputs <= t and the
        full context."""
        t = len(input_ids)
        if t > self.hp.max_answer_len + 2:
            raise ContractError(f"answer length {t} exceeds decoder window")
        x = take_rows(self.token_emb.tensor, input_ids) + self.pos_emb.tensor[:t]
        mask = causal_mask(t)
        for layer in self.layers:
            x = layer.forward(x, self_mask=mask, cross_kv=context)
        return matmul(self.final.forward(x), self.lm_w.tensor) + self.lm_b.tensor


def encode_context(encoder: MultimodalEncoder, items: list[KnowledgeItem],
                   question: list[int], one_set: bool = True) -> Tensor:
    """Encode retrieved evidence plus the question as decoder context rows.

    Image payloads are gathered and encoded jointly through the single query
    set (N rows total); with ``one_set=False`` each image is encoded
    separately and the query blocks are concatenated (m*N rows). Text
    payloads contribute their per-token rows. The question comes last.
    """
    blocks: list[Tensor] = []
    images = [it.image_payload for it in items
              if it.modality in (IMAGE, IMAGE_TEXT)]
    if images:
        if one_set:
            blocks.append(encoder.encode_image(images, question))
        else:
            for img in images:
                blocks.append(encoder.encode_image([img], question))
    for it in items:
        if it.modality in (TEXT, IMAGE_TEXT):
            blocks.append(encoder.text_rows(it.text_payload))
    blocks.append(encoder.text_rows(question))
    return concat(blocks, axis=0)


def sequence_nll(decoder: Decoder, context: Tensor, answer: list[int]) -> Tensor:
    """Token-level NLL of the answer (teacher forced), summed over the
    answer tokens plus the terminating EOS."""
    targets = list(answer) + [EOS]
    inputs = [BOS] + list(answer)
    logits = decoder.logits(context, inputs)
    return cross_entropy(logits, targets) * float(len(targets))


def generation_loss(decoder: Decoder, encoder: MultimodalEncoder,
                    qa_batch: list[tuple[list[KnowledgeItem], list[int], list[int]]],
                    askg_batch: list[ASKGExample], settings: GenSettings,
                    one_set: bool = True) -> Tensor:
    """Answer NLL over (evidence, question, answer) triples plus alpha times
    the selection-prompt NLL; both terms are per-example means."""
    settings.validate()
    if not qa_batch:
        raise ContractError("generation loss requires a nonempty QA batch")
    use_askg = settings.askg_enabled and settings.alpha != 0.0
    if use_askg and not askg_batch:
        raise ContractError("selection batch empty while alpha != 0")
    qa_total = None
    for items, question, answer in qa_batch:
        ctx = encode_context(encoder, items, question, one_set=one_set)
        term = sequence_nll(decoder, ctx, answer)
        qa_total = term if qa_total is None else qa_total + term
    loss = qa_total * (1.0 / len(qa_batch))
    if use_askg:
        askg_total = None
        for ex in askg_batch:
            ctx = encoder.text_rows(ex.prompt)
            term = sequence_nll(decoder, ctx, ex.answer)
            askg_total = term if askg_total is None else askg_total + term
        loss = loss + settings.alpha * (askg_total * (1.0 / len(askg_batch)))
    return loss


def decode_answer(decoder: Decoder, encoder: MultimodalEncoder,
                  question: list[int], items: list[KnowledgeItem],
                  one_set: bool = True, max_len: int | None = None) -> list[int]:
    """Greedy argmax decoding up to ``max_len`` or EOS; deterministic."""
    limit = decoder.hp.max_answer_len if max_len is None else max_len
    with no_grad():
        ctx = encode_context(encoder, items, question, one_set=one_set)
        out: list[int] = []
        for _ in range(limit):
            logits = decoder.logits(ctx, [BOS] + out)
            nxt = int(np.argmax(logits.data[-1]))
            if nxt == EOS:
                break
            out.append(nxt)
    return out


def decode_from_prompt(decoder: Decoder, encoder: MultimodalEncoder,
                       prompt: list[int], max_len: int | None = None) -> list[int]:
    """Greedy decoding conditioned on a rendered selection prompt."""
    limit = decoder.hp.max_answer_len if max_len is None else max_len
    with no_grad():
        ctx = encoder.text_rows(prompt)
        out: list[int] = []
        for _ in range(limit):
            logits = decoder.logits(ctx, [BOS] + out)
            nxt = int(np.argmax(logits.data[-1]))
            if nxt == EOS:
                break
            out.append(nxt)
    return out


def marginal_answer_likelihood(decoder: Decoder, encoder: MultimodalEncoder,
                               fusion, question: list[int],
                               kb_subsets: list[list[KnowledgeItem]],
                               answer: list[int], one_set: bool = True) -> float:
    """Sum over candidate evidence subsets of p(subset | question) times
    p(answer | question, subset). Subset probabilities are the softmax of
    mean pooled similarity scores; the result lies in (0, 1]."""
    if not kb_subsets:
        raise ContractError("at least one evidence subset is required")
    with no_grad():
        q_vec = encode_question(encoder, question).data
        scores = []
        for subset in kb_subsets:
            if not subset:
                raise ContractError("empty evidence subset")
            sims = [float(q_vec @ encoder.pool_knowledge(it, fusion=fusion).data)
                    for it in subset]
            scores.append(float(np.mean(sims)))
        scores = np.asarray(scores)
        z = scores - scores.max()
        probs = np.exp(z) / np.exp(z).sum()
        total = 0.0
        for p, subset in zip(probs, kb_subsets):
            ctx = encode_context(encoder, subset, question, one_set=one_set)
            nll = sequence_nll(decoder, ctx, answer).item()
            total += float(p) * float(np.exp(-nll))
    return total


# -- selection dataset -------------------------------------------------------------


def render_selection_prompt(vocab: Vocab, question_text: str,
                            references: list[tuple[str, str]]) -> tuple[str, list[int]]:
    """Instantiate the relevance-ranking template over an ordered reference
    list; returns (text, CLS-leading token ids)."""
    parts = [SELECTION_PREAMBLE, f"Question: {question_text}."]
    for rid, content in references:
        parts.append(f"Reference {rid}: {content}.")
    text = " ".join(parts)
    return text, [CLS] + vocab.encode(text)


def render_selection_answer(vocab: Vocab, rid: str) -> tuple[str, list[int]]:
    text = SELECTION_ANSWER_TEMPLATE.format(rid=rid)
    return text, vocab.encode(text)


def build_askg_dataset(examples, retrieved: dict[str, list[KnowledgeItem]],
                       vocab: Vocab, settings: GenSettings, rng: Rng
                       ) -> tuple[list[ASKGExample], int]:
    """One selection example per QA example: a shuffled reference list with
    exactly one gold positive and sampled text-renderable negatives, rendered
    through the template; the answer names the positive's id.

    Returns (dataset, skipped): examples without a gold positive or enough
    negatives among their candidates are skipped and counted.
    """
    settings.validate()
    out: list[ASKGExample] = []
    skipped = 0
    for ex in examples:
        candidates = retrieved.get(ex.id, [])
        golds = [c for c in candidates if c.id in ex.gold_ids
                 and c.text_payload is not None]
        negatives = [c for c in candidates if c.id not in ex.gold_ids
                     and c.text_payload is not None]
        if not golds or len(negatives) < settings.negatives_per_prompt:
            skipped += 1
            continue
        positive = golds[0]
        erng = rng.split(f"askg/{ex.id}")
        pick = erng.choice(len(negatives), settings.negatives_per_prompt,
                           replace=False)
        refs = [positive] + [negatives[int(i)] for i in pick]
        order = erng.permutation(len(refs))
        refs = [refs[int(i)] for i in order]
        pos_slot = next(i for i, r in enumerate(refs) if r.id == positive.id)
        ref_pairs = [(r.id, vocab.decode(r.text_payload)) for r in refs]
        prompt_text, prompt_ids = render_selection_prompt(
            vocab, ex.question_text or vocab.decode(ex.question), ref_pairs)
        answer_text, answer_ids = render_selection_answer(vocab, refs[pos_slot].id)
        out.append(ASKGExample(
            prompt=prompt_ids, answer=answer_ids,
            positive_position=pos_slot, positive_id=positive.id,
            reference_ids=tuple(r.id for r in refs),
            prompt_text=prompt_text, answer_text=answer_text))
    return out, skipped


def selection_accuracy(decoder: Decoder, encoder: MultimodalEncoder,
                       dataset: list[ASKGExample], vocab: Vocab) -> float:
    """Fraction of selection prompts whose decoded answer names the right
    reference id."""
    if not dataset:
        return 0.0
    hits = 0
    for ex in dataset:
        ids = decode_from_prompt(decoder, encoder, ex.prompt)
        words = vocab.decode(ids).split()
        hits += bool(words) and words[-1] == ex.positive_id
    return hits / len(dataset)


# -- answer metrics ------------------------------------------------------------------


def normalize_answer(text: str) -> list[str]:
    return text.lower().translate(
        str.maketrans("", "", string.punctuation)).split()


def em_f1(prediction: str, gold: str) -> tuple[int, float]:
    """Exact match and token-multiset F1 after lowercasing, punctuation
    stripping, and whitespace tokenization."""
    gold_tokens = normalize_answer(gold)
    if not gold_tokens:
        raise ContractError("gold answer is empty")
    pred_tokens = normalize_answer(prediction)
    em = int(pred_tokens == gold_tokens)
    if not pred_tokens:
        return em, 0.0
    overlap = sum((Counter(pred_tokens) & Counter(gold_tokens)).values())
    if overlap == 0:
        return em, 0.0
    precision = overlap / len(pred_tokens)
    recall = overlap / len(gold_tokens)
    return em, 2 * precision * recall / (precision + recall)


# -- training -----------------------------------------------------------------------


def train_generator(decoder: Decoder, encoder: MultimodalEncoder, world,
                    contexts: dict[str, list[KnowledgeItem]],
                    askg_data: list[ASKGExample], cfg, settings: GenSettings,
                    rng: Rng, one_set: bool = True) -> list[dict]:
    """Teacher-forced training of decoder plus encoder on retrieved (or
    injected) evidence contexts, with the selection term weighted by alpha."""
    settings.validate()
    train_examples = [ex for ex in world.examples_for("train")
                      if ex.id in contexts]
    if not train_examples:
        raise ContractError("no training examples with evidence contexts")
    use_askg = settings.askg_enabled and settings.alpha != 0.0
    if use_askg and not askg_data:
        raise ContractError("selection dataset empty while alpha != 0")
    opt = AdamW(decoder.params() + encoder.params(), lr=cfg.lr,
                weight_decay=cfg.weight_decay)
    n = len(train_examples)
    steps_per_epoch = max(1, (n + cfg.batch_size - 1) // cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    curve = []
    step = 0
    askg_cursor = 0
    for epoch in range(cfg.epochs):
        order = rng.split(f"generator/epoch{epoch}").permutation(n)
        losses = []
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            qa_batch = []
            for i in idx:
                ex = train_examples[i]
                qa_batch.append((contexts[ex.id], ex.question, ex.answer))
            askg_batch: list[ASKGExample] = []
            if use_askg:
                take = min(len(qa_batch), len(askg_data))
                for _ in range(take):
                    askg_batch.append(askg_data[askg_cursor % len(askg_data)])
                    askg_cursor += 1
            loss = generation_loss(decoder, encoder, qa_batch, askg_batch,
                                   settings, one_set=one_set)
            opt.zero_grad()
            loss.backward()
            opt.step(lr=cosine_lr(step, total_steps, cfg.lr, cfg.warmup_steps))
            step += 1
            losses.append(loss.item())
        curve.append({"epoch": epoch, "loss": float(np.mean(losses))})
    return curve
