"""Querying-transformer encoder: a fixed set of learnable query vectors
cross-attends to frozen image patch features under instruction conditioning,
and a text path over the same shared layers produces a CLS representation.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .data import CLS, PAD, IMAGE, IMAGE_TEXT, TEXT, ImageFeatures, KnowledgeItem
from .errors import ConfigError, ContractError
from .layers import FinalNorm, TransformerLayer, init_param, pad_mask
from .optim import Parameter, Rng
from .tensor import Tensor, concat, matmul, take_rows

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class HyperParams:
    n_queries: int = 8        # learnable query vectors (one shared set)
    d: int = 32               # hidden width
    n_heads: int = 4
    enc_layers: int = 2
    max_len: int = 32         # max text length
    vocab: int = 64
    d_img: int = 16           # frozen image-feature width
    patches: int = 4          # patches per image
    max_images: int = 4
    dec_layers: int = 2
    max_answer_len: int = 12

    def validate(self) -> "HyperParams":
        if self.d % self.n_heads != 0:
            raise ConfigError(f"hidden width {self.d} not divisible by "
                              f"{self.n_heads} heads")
        for name in ("n_queries", "d", "n_heads", "enc_layers", "max_len",
                     "vocab", "d_img", "patches", "max_images"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        return self


class MultimodalEncoder:
    """Shared-layer encoder with an image branch (queries + cross-attention)
    and a text branch (CLS pooling). Image features never receive gradient."""

    def __init__(self, hp: HyperParams, rng: Rng):
        hp.validate()
        self.hp = hp
        r = rng.split("encoder")
        self.token_emb = init_param("enc.token_emb", (hp.vocab, hp.d), r)
        self.pos_emb = init_param("enc.pos_emb", (hp.max_len, hp.d), r)
        # exactly one query set, shared across all images and modalities
        self.query_emb = init_param("enc.query_emb", (hp.n_queries, hp.d), r)
        self.img_proj = init_param("enc.img_proj", (hp.d_img, hp.d), r)
        self.img_pos = init_param("enc.img_pos", (hp.patches, hp.d), r)
        self.layers = [TransformerLayer(f"enc.layer{i}", hp.d, hp.n_heads, r,
                                        with_cross=True)
                       for i in range(hp.enc_layers)]
        self.final = FinalNorm("enc", hp.d)

    def params(self) -> list[Parameter]:
        out = [self.token_emb, self.pos_emb, self.query_emb,
               self.img_proj, self.img_pos]
        for layer in self.layers:
            out += layer.params()
        return out + self.final.params()

    def set_frozen(self, flag: bool) -> None:
        for p in self.params():
            p.set_frozen(flag)

    # -- embedding helpers -----------------------------------------------------

    def embed_tokens(self, ids: list[int]) -> Tensor:
        """Token + position embeddings, (L, D). No transformer layers."""
        ids = list(ids)
        if len(ids) > self.hp.max_len:
            raise ContractError(
                f"sequence length {len(ids)} exceeds max {self.hp.max_len}")
        tok = take_rows(self.token_emb.tensor, ids)
        pos = self.pos_emb.tensor[:len(ids)]
        return tok + pos

    def _patch_keys(self, images: list[ImageFeatures]) -> Tensor:
        """Project every image's patches into the hidden space. Patch
        positions are encoded within each image only, so key order across
        images carries no signal."""
        keys = []
        for img in images:
            feats = np.asarray(img.patches, dtype=np.float64)
            if feats.shape != (self.hp.patches, self.hp.d_img):
                raise ContractError(
                    f"image features {feats.shape} do not match "
                    f"({self.hp.patches}, {self.hp.d_img})")
            projected = matmul(Tensor(feats), self.img_proj.tensor)
            keys.append(projected + self.img_pos.tensor)
        return concat(keys, axis=0)

    # -- public encoders ---------------------------------------------------------

    def encode_image(self, images: list[ImageFeatures],
                     instruction: list[int]) -> Tensor:
        """Encode one or more images under an instruction; output (N, D).

        Queries and instruction tokens self-attend jointly; only query rows
        cross-attend to the concatenated patch keys; only query rows are
        returned. Row count is N regardless of the number of images.
        """
        if not images:
            raise ContractError("encode_image requires at least one image")
        if len(images) > self.hp.max_images:
            raise ContractError(
                f"{len(images)} images exceed the cap {self.hp.max_images}")
        if not instruction:
            raise ContractError("instruction must be nonempty")
        n = self.hp.n_queries
        keys = self._patch_keys(images)
        x = concat([self.query_emb.tensor, self.embed_tokens(instruction)], axis=0)
        valid = np.ones(x.shape[0], dtype=bool)
        valid[n:] = np.asarray(instruction) != PAD
        mask = pad_mask(valid)
        for layer in self.layers:
            x = layer.forward(x, self_mask=mask, cross_kv=keys, cross_rows=n)
        return self.final.forward(x)[:n]

    def text_rows(self, ids: list[int]) -> Tensor:
        """Per-token final-layer rows for a CLS-leading sequence, (L, D)."""
        if not ids:
            raise ContractError("encode_text requires a nonempty sequence")
        if ids[0] != CLS:
            raise ContractError("encoder text input must start with CLS")
        x = self.embed_tokens(ids)
        mask = pad_mask(np.asarray(ids) != PAD)
        for layer in self.layers:
            x = layer.forward(x, self_mask=mask)
        return self.final.forward(x)

    def encode_text(self, ids: list[int]) -> Tensor:
        """CLS-position representation of a text sequence, shape (D,)."""
        return self.text_rows(ids)[0]

    # -- pooling -------------------------------------------------------------------

    def pool_knowledge(self, item: KnowledgeItem,
                       instruction: list[int] | None = None,
                       fusion=None) -> Tensor:
        """Pool one knowledge item to a single L2-normalized vector (D,).

        text: CLS representation. image: mean over query rows. image_text:
        mean over the fusion stack's query+CLS rows (requires ``fusion``).
        """
        if item.modality == TEXT:
            vec = self.encode_text(item.text_payload)
        elif item.modality == IMAGE:
            instr = instruction if instruction else [CLS]
            vec = self.encode_image([item.image_payload], instr).mean(axis=0)
        elif item.modality == IMAGE_TEXT:
            if fusion is None:
                raise ContractError(
                    "image_text pooling requires the fusion module")
            instr = instruction if instruction else item.text_payload
            visual = self.encode_image([item.image_payload], instr)
            fused = fusion.fuse(visual, item.text_payload, "bidirectional_itm")
            vec = fused[:self.hp.n_queries + 1].mean(axis=0)
        else:  # pragma: no cover - guarded by KnowledgeItem
            raise ContractError(f"unknown modality {item.modality}")
        return l2_normalize(vec, context=item.id)


def l2_normalize(vec: Tensor, context: str = "") -> Tensor:
    """Scale to unit norm (differentiably); a zero vector is returned
    unchanged and flagged as degenerate."""
    if float((vec.data ** 2).sum()) == 0.0:
        log.warning("degenerate zero vector during pooling%s",
                    f" ({context})" if context else "")
        return vec
    return vec / (vec * vec).sum().sqrt()
