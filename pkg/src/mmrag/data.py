"""Domain records shared across the retrieval and generation stages.

Token id conventions: 0=PAD, 1=CLS, 2=BOS, 3=EOS. Encoder input sequences
carry CLS at position 0; decoder sequences use BOS/EOS framing.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

PAD, CLS, BOS, EOS = 0, 1, 2, 3
N_RESERVED = 4

TEXT = "text"
IMAGE = "image"
IMAGE_TEXT = "image_text"
MODALITIES = (TEXT, IMAGE, IMAGE_TEXT)


@dataclass
class ImageFeatures:
    """Frozen patch features standing in for a vision backbone's output.

    Never receives gradient; produced only by the synthetic world.
    """

    patches: np.ndarray  # (P, D_img)


@dataclass
class KnowledgeItem:
    id: str
    modality: str
    text_payload: list[int] | None = None   # token ids, CLS-leading
    image_payload: ImageFeatures | None = None

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise ValueError(f"unknown modality {self.modality!r}")
        has_text = self.text_payload is not None
        has_image = self.image_payload is not None
        ok = ((self.modality == TEXT and has_text and not has_image)
              or (self.modality == IMAGE and has_image and not has_text)
              or (self.modality == IMAGE_TEXT and has_text and has_image))
        if not ok:
            raise ValueError(
                f"payload does not match modality {self.modality!r} for {self.id}")


@dataclass
class QAExample:
    id: str
    question: list[int]           # token ids, CLS-leading
    answer: list[int]             # raw answer token ids (no BOS/EOS)
    gold_ids: frozenset[str]
    hops: int
    confusers: tuple[str, ...] = ()
    question_text: str = ""
    answer_text: str = ""


@dataclass
class ASKGExample:
    """A relevance-selection training example rendered from a template over
    an ordered reference list; exactly one reference is the positive."""

    prompt: list[int]             # token ids, CLS-leading
    answer: list[int]             # raw answer token ids
    positive_position: int
    positive_id: str
    reference_ids: tuple[str, ...]
    prompt_text: str = ""
    answer_text: str = ""


@dataclass
class RetrievalBatch:
    """Questions with a pooled candidate list; every question must have at
    least one positive among the candidates."""

    questions: list[list[int]]
    candidates: list[KnowledgeItem]
    positive_map: dict[int, set[int]] = field(default_factory=dict)
