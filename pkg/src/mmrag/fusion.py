"""Multimodal fusion stack: three transformer blocks over concatenated
query rows and text embeddings, trained with a matching head and a
prefix-causal captioning head while the base encoder stays frozen.
"""

from __future__ import annotations

import numpy as np

from .data import BOS, CLS, PAD, ImageFeatures
from .encoder import MultimodalEncoder
from .errors import ContractError
from .layers import MASKED, FinalNorm, TransformerLayer, init_param, zeros_param
from .optim import AdamW, Parameter, Rng, cosine_lr
from .tensor import Tensor, concat, cross_entropy, matmul, softmax

BIDIRECTIONAL_ITM = "bidirectional_itm"
MULTIMODAL_CAUSAL_ITG = "multimodal_causal_itg"
N_FUSION_LAYERS = 3


def fusion_mask(mode: str, n_queries: int, text_len: int,
                text_ids: list[int] | None = None) -> np.ndarray:
    """Additive (N+L, N+L) attention mask for the requested mode.

    bidirectional_itm: all-true over valid (non-pad) positions.
    multimodal_causal_itg: query rows attend to query columns only; text
    row t attends to all query columns and text columns <= t.
    """
    total = n_queries + text_len
    if mode == BIDIRECTIONAL_ITM:
        m = np.zeros((total, total))
        if text_ids is not None:
            invalid = np.asarray(text_ids) == PAD
            m[:, n_queries:][:, invalid] = MASKED
        return m
    if mode == MULTIMODAL_CAUSAL_ITG:
        m = np.full((total, total), MASKED)
        m[:n_queries, :n_queries] = 0.0
        m[n_queries:, :n_queries] = 0.0
        for t in range(text_len):
            m[n_queries + t, n_queries:n_queries + t + 1] = 0.0
        return m
    raise ContractError(f"unknown mask mode {mode!r}")


class FusionModule:
    """Three shared transformer blocks with mode-selected masks, a binary
    per-query matching head, and a vocabulary projection head."""

    def __init__(self, hp, rng: Rng, encoder: MultimodalEncoder):
        self.hp = hp
        self.encoder = encoder
        r = rng.split("fusion")
        self.layers = [TransformerLayer(f"fus.layer{i}", hp.d, hp.n_heads, r)
                       for i in range(N_FUSION_LAYERS)]
        self.final = FinalNorm("fus", hp.d)
        self.itm_w = init_param("fus.itm.w", (hp.d, 2), r)
        self.itm_b = zeros_param("fus.itm.b", 2)
        self.itg_w = init_param("fus.itg.w", (hp.d, hp.vocab), r)
        self.itg_b = zeros_param("fus.itg.b", hp.vocab)

    def params(self) -> list[Parameter]:
        out = []
        for layer in self.layers:
            out += layer.params()
        return out + self.final.params() + [self.itm_w, self.itm_b,
                                            self.itg_w, self.itg_b]

    def set_frozen(self, flag: bool) -> None:
        for p in self.params():
            p.set_frozen(flag)

    # -- forward ---------------------------------------------------------------

    def fuse(self, visual: Tensor, text_ids: list[int], mask_mode: str) -> Tensor:
        """Concatenate visual rows with text embeddings and run the stack
        under the selected mask. Returns (N+L, D)."""
        if len(text_ids) > self.hp.max_len:
            raise ContractError(
                f"text length {len(text_ids)} exceeds max {self.hp.max_len}")
        n = visual.shape[0]
        mask = fusion_mask(mask_mode, n, len(text_ids), text_ids)
        x = concat([visual, self.encoder.embed_tokens(text_ids)], axis=0)
        for layer in self.layers:
            x = layer.forward(x, self_mask=mask)
        return self.final.forward(x)

    def itm_score(self, fused: Tensor) -> Tensor:
        """Binary match logits (2,): per-query logits averaged over the N
        query positions."""
        n = self.hp.n_queries
        logits = matmul(fused[:n], self.itm_w.tensor) + self.itm_b.tensor
        return logits.mean(axis=0)

    # -- losses -----------------------------------------------------------------

    def itm_pair_logits(self, image: ImageFeatures, text_ids: list[int]) -> Tensor:
        visual = self.encoder.encode_image([image], text_ids)
        fused = self.fuse(visual, text_ids, BIDIRECTIONAL_ITM)
        return self.itm_score(fused)

    def itm_loss(self, batch: list[tuple[ImageFeatures, list[int], int]]) -> Tensor:
        """Mean two-class cross-entropy over (image, text, label) triples;
        label 1 marks a corresponding pair."""
        if not batch:
            raise ContractError("itm_loss requires a nonempty batch")
        logits = concat([self.itm_pair_logits(img, txt).reshape(1, 2)
                         for img, txt, _ in batch], axis=0)
        labels = [int(lbl) for _, _, lbl in batch]
        return cross_entropy(logits, labels)

    def itg_loss(self, image: ImageFeatures, text_ids: list[int]) -> Tensor:
        """Captioning NLL under the prefix-causal mask: the sum over
        positions t of -log p(y_t | queries, y_<t), teacher forced."""
        if not text_ids:
            raise ContractError("itg_loss requires a nonempty text")
        visual = self.encoder.encode_image([image], [*text_ids])
        shifted = [BOS] + list(text_ids[:-1])
        fused = self.fuse(visual, shifted, MULTIMODAL_CAUSAL_ITG)
        text_out = fused[self.hp.n_queries:]
        logits = matmul(text_out, self.itg_w.tensor) + self.itg_b.tensor
        return cross_entropy(logits, text_ids) * float(len(text_ids))

    def match_probability(self, image: ImageFeatures, text_ids: list[int]) -> float:
        return float(softmax(self.itm_pair_logits(image, text_ids)).data[1])


def pretrain_fusion(fusion: FusionModule,
                    corpus: list[tuple[ImageFeatures, list[int]]],
                    cfg, rng: Rng) -> list[dict]:
    """Optimize matching + captioning losses over an image-text corpus.

    The base encoder must be frozen; only fusion parameters change. One
    negative text per image and one negative image per text are resampled
    each epoch. Returns the per-epoch loss curve.
    """
    if not corpus:
        raise ContractError("pretraining corpus is empty")
    if any(not p.frozen for p in fusion.encoder.params()):
        raise ContractError("encoder must be frozen during fusion pretraining")
    opt = AdamW(fusion.params(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    curve = []
    n = len(corpus)
    steps_per_epoch = max(1, (n + cfg.batch_size - 1) // cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    step = 0
    for epoch in range(cfg.epochs):
        erng = rng.split(f"fusion/epoch{epoch}")
        order = erng.permutation(n)
        neg_text = derangement(n, erng)
        neg_image = derangement(n, erng)
        losses = []
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            pairs, itg_items = [], []
            for i in idx:
                img, txt = corpus[i]
                pairs.append((img, txt, 1))
                pairs.append((img, corpus[neg_text[i]][1], 0))
                pairs.append((corpus[neg_image[i]][0], txt, 0))
                itg_items.append((img, txt))
            loss = fusion.itm_loss(pairs)
            itg_total = None
            for img, txt in itg_items:
                term = fusion.itg_loss(img, text_content(txt))
                itg_total = term if itg_total is None else itg_total + term
            loss = loss + itg_total * (1.0 / len(itg_items))
            opt.zero_grad()
            loss.backward()
            opt.step(lr=cosine_lr(step, total_steps, cfg.lr, cfg.warmup_steps))
            step += 1
            losses.append(loss.item())
        curve.append({"epoch": epoch, "loss": float(np.mean(losses))})
    return curve


def text_content(ids: list[int]) -> list[int]:
    """Strip the leading CLS for captioning targets."""
    return list(ids[1:]) if ids and ids[0] == CLS else list(ids)


def derangement(n: int, rng: Rng) -> np.ndarray:
    """Random pairing with no fixed points (negative-sampling helper)."""
    if n == 1:
        return np.array([0])
    perm = rng.permutation(n)
    for i in range(n):
        if perm[i] == i:
            j = (i + 1) % n
            perm[i], perm[j] = perm[j], perm[i]
    return perm
