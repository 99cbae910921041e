"""Deterministic synthetic multimodal QA universe with known gold evidence.

Entities carry attribute values. Every (entity, attribute) fact is housed in
exactly one knowledge item whose modality follows its entity's assignment:
text items verbalize the fact, image items encode it through a fixed linear
code over (entity, attribute, value) indicator vectors plus Gaussian noise,
and image-text items carry both payloads. Questions name an entity and an
attribute; two-hop questions pair two facts and expect both values.

The whole corpus is a pure function of the WorldSpec.
"""

from __future__ import annotations

import base64
import json
import re
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import (BOS, CLS, EOS, N_RESERVED, PAD, IMAGE, IMAGE_TEXT, TEXT,
                   ImageFeatures, KnowledgeItem, QAExample)
from .errors import ConfigError, ContractError
from .optim import Rng

QUESTION_WORDS = ("what", "tell")
TWO_HOP_WORD = "both"

SELECTION_PREAMBLE = (
    "We would like to request your feedback on ranking the questions "
    "according to their relevance to the references below. Relevance refers "
    "to the degree to which the reference can answer the question. The input "
    "format is Question: [content], Reference [knowledge ID]: [content]. The "
    "output format is: Related content is [knowledge ID].")
SELECTION_ANSWER_TEMPLATE = "The most relevant reference is Reference {rid}."

_WORD_RE = re.compile(r"[a-z0-9_]+")


class Vocab:
    """Word-level vocabulary; encoding lowercases and drops punctuation."""

    def __init__(self, words: list[str]):
        self.words = list(words)
        self.index = {w: i for i, w in enumerate(self.words)}
        if len(self.index) != len(self.words):
            raise ConfigError("duplicate words in vocabulary")

    def __len__(self):
        return len(self.words)

    def encode(self, text: str) -> list[int]:
        out = []
        for w in _WORD_RE.findall(text.lower()):
            if w not in self.index:
                raise ContractError(f"word {w!r} not in vocabulary")
            out.append(self.index[w])
        return out

    def decode(self, ids) -> str:
        return " ".join(self.words[int(i)] for i in ids
                        if int(i) not in (PAD, CLS, BOS, EOS))


@dataclass(frozen=True)
class WorldSpec:
    num_entities: int = 64
    attrs_per_entity: int = 4
    values_per_attr: int = 8
    text_entities: int = 32
    image_entities: int = 16
    imagetext_entities: int = 16
    questions_per_fact: int = 2
    num_two_hop: int = 0
    confusion_per_gold: int = 0
    noise_sigma: float = 0.1
    d_img: int = 16
    patches: int = 4
    seed: int = 0
    vocab_budget: int | None = None

    def validate(self) -> "WorldSpec":
        if self.text_entities + self.image_entities + self.imagetext_entities \
                != self.num_entities:
            raise ConfigError("modality split does not cover all entities")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be nonnegative")
        for name in ("num_entities", "attrs_per_entity", "values_per_attr",
                     "questions_per_fact", "d_img", "patches"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        return self


@dataclass
class World:
    spec: WorldSpec
    vocab: Vocab
    items: list[KnowledgeItem]
    examples: list[QAExample]
    splits: dict[str, list[int]]
    code_matrix: np.ndarray                 # fixed linear code, frozen
    facts: dict[tuple[int, int], int]       # (entity, attr) -> value index
    item_fact: dict[str, tuple[int, int]]   # item id -> housed fact
    fact_item: dict[tuple[int, int], str]   # fact -> housing item id
    initial_code_matrix: np.ndarray = field(default=None)

    def item_by_id(self, item_id: str) -> KnowledgeItem:
        return self._by_id[item_id]

    def finalize(self):
        self._by_id = {it.id: it for it in self.items}
        return self

    def examples_for(self, split: str) -> list[QAExample]:
        return [self.examples[i] for i in self.splits[split]]


def entity_word(e: int) -> str:
    return f"ent{e:03d}"


def attr_word(a: int) -> str:
    return f"attr{a}"


def value_word(a: int, k: int) -> str:
    return f"v{a}_{k}"


def item_word(fact_index: int) -> str:
    return f"k{fact_index:03d}"


def confusion_word(fact_index: int, j: int) -> str:
    return f"c{fact_index:03d}x{j}"


def build_vocab(spec: WorldSpec) -> Vocab:
    words = ["<pad>", "<cls>", "<bos>", "<eos>"]
    assert words.index("<pad>") == PAD and words.index("<eos>") == EOS
    words += list(QUESTION_WORDS) + [TWO_HOP_WORD]
    seen = set(words)
    for w in _WORD_RE.findall((SELECTION_PREAMBLE + " "
                               + SELECTION_ANSWER_TEMPLATE).lower()):
        if w not in seen:
            seen.add(w)
            words.append(w)
    for e in range(spec.num_entities):
        words.append(entity_word(e))
    for a in range(spec.attrs_per_entity):
        words.append(attr_word(a))
    for a in range(spec.attrs_per_entity):
        for k in range(spec.values_per_attr):
            words.append(value_word(a, k))
    n_facts = spec.num_entities * spec.attrs_per_entity
    for fi in range(n_facts):
        words.append(item_word(fi))
    if spec.confusion_per_gold > 0:
        for fi in range(n_facts):
            for j in range(spec.confusion_per_gold):
                words.append(confusion_word(fi, j))
    if spec.vocab_budget is not None and len(words) > spec.vocab_budget:
        raise ConfigError(
            f"vocabulary of {len(words)} words overflows budget "
            f"{spec.vocab_budget}")
    return Vocab(words)


def _entity_modality(spec: WorldSpec, e: int) -> str:
    if e < spec.text_entities:
        return TEXT
    if e < spec.text_entities + spec.image_entities:
        return IMAGE
    return IMAGE_TEXT


def _code_input_dim(spec: WorldSpec) -> int:
    return (spec.num_entities + spec.attrs_per_entity
            + spec.attrs_per_entity * spec.values_per_attr)


def fact_indicator(spec: WorldSpec, e: int, a: int, v: int) -> np.ndarray:
    x = np.zeros(_code_input_dim(spec))
    x[e] = 1.0
    x[spec.num_entities + a] = 1.0
    x[spec.num_entities + spec.attrs_per_entity
      + a * spec.values_per_attr + v] = 1.0
    return x


def image_features(spec: WorldSpec, code: np.ndarray, e: int, a: int, v: int,
                   rng: Rng) -> ImageFeatures:
    flat = code @ fact_indicator(spec, e, a, v)
    noise = rng.normal((spec.patches, spec.d_img), std=spec.noise_sigma) \
        if spec.noise_sigma > 0 else 0.0
    return ImageFeatures(flat.reshape(spec.patches, spec.d_img) + noise)


def generate_world(spec: WorldSpec) -> World:
    """Build the complete corpus: knowledge items, questions, and splits."""
    spec.validate()
    vocab = build_vocab(spec)
    rng = Rng(spec.seed)
    n_e, n_a = spec.num_entities, spec.attrs_per_entity

    value_rng = rng.split("values")
    facts = {(e, a): int(value_rng.integers(0, spec.values_per_attr))
             for e in range(n_e) for a in range(n_a)}

    code = rng.split("image_code").normal(
        (spec.patches * spec.d_img, _code_input_dim(spec)), std=0.6)

    noise_rng = rng.split("image_noise")
    items: list[KnowledgeItem] = []
    item_fact: dict[str, tuple[int, int]] = {}
    fact_item: dict[tuple[int, int], str] = {}
    for e in range(n_e):
        modality = _entity_modality(spec, e)
        for a in range(n_a):
            fi = e * n_a + a
            v = facts[(e, a)]
            item_id = item_word(fi)
            caption = [CLS] + vocab.encode(
                f"{entity_word(e)} {attr_word(a)} {value_word(a, v)}")
            if modality == TEXT:
                item = KnowledgeItem(item_id, TEXT, text_payload=caption)
            elif modality == IMAGE:
                feats = image_features(spec, code, e, a, v, noise_rng)
                item = KnowledgeItem(item_id, IMAGE, image_payload=feats)
            else:
                feats = image_features(spec, code, e, a, v, noise_rng)
                item = KnowledgeItem(item_id, IMAGE_TEXT, text_payload=caption,
                                     image_payload=feats)
            items.append(item)
            item_fact[item_id] = (e, a)
            fact_item[(e, a)] = item_id

    examples: list[QAExample] = []
    for e in range(n_e):
        for a in range(n_a):
            fi = e * n_a + a
            v = facts[(e, a)]
            gold = fact_item[(e, a)]
            confusers = tuple(confusion_word(fi, j)
                              for j in range(spec.confusion_per_gold)
                              ) if _entity_modality(spec, e) == TEXT else ()
            for variant in range(spec.questions_per_fact):
                qw = QUESTION_WORDS[variant % len(QUESTION_WORDS)]
                q_text = f"{qw} {entity_word(e)} {attr_word(a)}"
                a_text = value_word(a, v)
                examples.append(QAExample(
                    id=f"q{len(examples):04d}",
                    question=[CLS] + vocab.encode(q_text),
                    answer=vocab.encode(a_text),
                    gold_ids=frozenset({gold}),
                    hops=1,
                    confusers=confusers,
                    question_text=q_text,
                    answer_text=a_text,
                ))

    hop_rng = rng.split("two_hop")
    n_facts = n_e * n_a
    for _ in range(spec.num_two_hop):
        f1 = int(hop_rng.integers(0, n_facts))
        f2 = int(hop_rng.integers(0, n_facts - 1))
        if f2 >= f1:
            f2 += 1
        (e1, a1), (e2, a2) = divmod(f1, n_a), divmod(f2, n_a)
        v1, v2 = facts[(e1, a1)], facts[(e2, a2)]
        q_text = (f"{TWO_HOP_WORD} {entity_word(e1)} {attr_word(a1)} "
                  f"{entity_word(e2)} {attr_word(a2)}")
        a_text = f"{value_word(a1, v1)} {value_word(a2, v2)}"
        examples.append(QAExample(
            id=f"q{len(examples):04d}",
            question=[CLS] + vocab.encode(q_text),
            answer=vocab.encode(a_text),
            gold_ids=frozenset({fact_item[(e1, a1)], fact_item[(e2, a2)]}),
            hops=2,
            question_text=q_text,
            answer_text=a_text,
        ))

    splits = _split_examples(spec, examples, rng.split("splits"))

    world = World(spec=spec, vocab=vocab, items=items, examples=examples,
                  splits=splits, code_matrix=code, facts=facts,
                  item_fact=item_fact, fact_item=fact_item,
                  initial_code_matrix=code.copy())
    return world.finalize()


def _split_examples(spec: WorldSpec, examples: list[QAExample],
                    rng: Rng) -> dict[str, list[int]]:
    """Disjoint train/dev/test splits over question ids. One phrasing of
    every fact stays in train so held-out questions probe unseen phrasings
    of reachable knowledge, never unreachable facts."""
    n = len(examples)
    n_hop1 = spec.num_entities * spec.attrs_per_entity * spec.questions_per_fact
    anchored: set[int] = set()
    if spec.questions_per_fact > 1:
        for fact_start in range(0, n_hop1, spec.questions_per_fact):
            pick = int(rng.integers(0, spec.questions_per_fact))
            anchored.add(fact_start + pick)
    rest = [i for i in range(n) if i not in anchored]
    order = [rest[int(i)] for i in rng.permutation(len(rest))]
    n_test = max(1, n // 8)
    n_dev = max(1, n // 8)
    return {
        "test": sorted(order[:n_test]),
        "dev": sorted(order[n_test:n_test + n_dev]),
        "train": sorted(order[n_test + n_dev:] + list(anchored)),
    }


def generate_confusion_set(world: World, per_gold: int | None = None
                           ) -> list[KnowledgeItem]:
    """Near-duplicate distractors: for each gold text item, ``per_gold``
    items sharing its entity and attribute tokens but carrying a value token
    from a different attribute's range (token-similar, answer-invalid)."""
    spec = world.spec
    if per_gold is None:
        per_gold = spec.confusion_per_gold
    if per_gold < 1:
        raise ContractError("per_gold must be >= 1")
    if per_gold > spec.confusion_per_gold:
        raise ContractError(
            f"per_gold {per_gold} exceeds the allocated "
            f"confusion_per_gold {spec.confusion_per_gold}")
    rng = Rng(spec.seed).split("confusion")
    out: list[KnowledgeItem] = []
    n_a = spec.attrs_per_entity
    for item in world.items:
        if item.modality != TEXT:
            continue
        e, a = world.item_fact[item.id]
        fi = e * n_a + a
        for j in range(per_gold):
            if n_a > 1:
                wrong_a = int(rng.integers(0, n_a - 1))
                if wrong_a >= a:
                    wrong_a += 1
            else:
                wrong_a = a
            wrong_v = int(rng.integers(0, spec.values_per_attr))
            while n_a == 1 and wrong_v == world.facts[(e, a)]:
                wrong_v = (wrong_v + 1) % spec.values_per_attr
            payload = [CLS] + world.vocab.encode(
                f"{entity_word(e)} {attr_word(a)} {value_word(wrong_a, wrong_v)}")
            out.append(KnowledgeItem(confusion_word(fi, j), TEXT,
                                     text_payload=payload))
    return out


def oracle_answer(world: World, example: QAExample) -> str | None:
    """Symbolic lookup: answer the question from its gold items alone."""
    q = example.question
    body = [world.vocab.words[i] for i in q[1:]]
    gold_facts = {world.item_fact[g] for g in example.gold_ids}
    if body[0] == TWO_HOP_WORD:
        pairs = [(body[1], body[2]), (body[3], body[4])]
    else:
        pairs = [(body[1], body[2])]
    values = []
    for ent_w, attr_w in pairs:
        e = int(ent_w[3:])
        a = int(attr_w[4:])
        if (e, a) not in gold_facts:
            return None
        values.append(value_word(a, world.facts[(e, a)]))
    return " ".join(values)


# -- corpus export --------------------------------------------------------------


def _encode_features(feats: ImageFeatures | None) -> str | None:
    if feats is None:
        return None
    arr = np.asarray(feats.patches, dtype="<f4")
    return base64.b64encode(arr.tobytes()).decode("ascii")


def decode_features(payload: str, patches: int, d_img: int) -> ImageFeatures:
    raw = base64.b64decode(payload.encode("ascii"))
    arr = np.frombuffer(raw, dtype="<f4").astype(np.float64)
    return ImageFeatures(arr.reshape(patches, d_img))


def export_world(world: World, path) -> None:
    """Newline-delimited corpus: a header record echoing the spec, then one
    record per knowledge item and per QA example."""
    with open(path, "w", encoding="utf-8") as fh:
        header = {"type": "world_spec", **asdict(world.spec),
                  "vocab_size": len(world.vocab)}
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for item in world.items:
            rec = {
                "type": "item",
                "id": item.id,
                "modality": item.modality,
                "tokens": item.text_payload,
                "features": _encode_features(item.image_payload),
            }
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
        split_of = {i: s for s, idx in world.splits.items() for i in idx}
        for i, ex in enumerate(world.examples):
            split = split_of[i]
            rec = {
                "type": "qa",
                "id": ex.id,
                "question": ex.question,
                "answer": ex.answer,
                "gold_ids": sorted(ex.gold_ids),
                "hops": ex.hops,
                "confusers": list(ex.confusers),
                "split": split,
            }
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
