"""Seeded comparative benchmarks: rank vs retrieve-only on confusable
distractors, selection-augmented vs plain generation, one query set vs
per-image query sets, and the alpha sensitivity sweep. The ablation suite
wraps all of them and renders paired metrics.

All arms share trained prefixes in memory; parameter snapshots keep arms
independent of each other.
"""

from __future__ import annotations

from pathlib import Path
from types import SimpleNamespace

import numpy as np

from .config import Config
from .encoder import HyperParams
from .fusion import pretrain_fusion
from .generator import (Decoder, build_askg_dataset, decode_answer, em_f1,
                        train_generator)
from .metrics import MetricsReport
from .optim import Rng
from .pipeline import _fusion_corpus, _topk_items, build_models
from .report import render_ablation, render_alpha_sweep
from .retriever import (build_index, rank_select, rank_train, recall_at_k,
                        retr_f1, train_retriever)
from .synthworld import WorldSpec
from .tensor import no_grad


def snapshot(params) -> dict[str, np.ndarray]:
    return {p.name: p.data.copy() for p in params}


def restore(params, snap: dict[str, np.ndarray]) -> None:
    for p in params:
        p.tensor.data[...] = snap[p.name]


# -- benchmark configurations --------------------------------------------------------


def confusion_config(seed: int = 0) -> Config:
    """Small text-heavy world with two near-duplicate distractors per gold;
    sized for the retrieve-then-rank comparison."""
    world = WorldSpec(num_entities=24, attrs_per_entity=2, values_per_attr=6,
                      text_entities=18, image_entities=3, imagetext_entities=3,
                      questions_per_fact=2, confusion_per_gold=2,
                      noise_sigma=0.05, seed=seed)
    cfg = Config(world=world, seed=seed)
    cfg.hyper = HyperParams(max_len=96)
    cfg.retriever.epochs = 8
    cfg.retriever.batch_size = 16
    cfg.fusion.epochs = 2
    cfg.ranker.epochs = 40
    return cfg.validate()


def generation_config(seed: int = 0) -> Config:
    """Small world for generation arms: noisy top-k evidence contexts with
    distractors make relevance discrimination matter."""
    world = WorldSpec(num_entities=16, attrs_per_entity=2, values_per_attr=6,
                      text_entities=12, image_entities=2, imagetext_entities=2,
                      questions_per_fact=2, confusion_per_gold=2,
                      noise_sigma=0.05, seed=seed)
    cfg = Config(world=world, seed=seed)
    cfg.hyper = HyperParams(max_len=96)
    cfg.fusion.epochs = 2
    cfg.retriever.epochs = 8
    cfg.generator.epochs = 8
    cfg.generator.batch_size = 16
    cfg.generator.context_source = "topk"
    return cfg.validate()


def two_hop_config(seed: int = 0) -> Config:
    """All-image world with two-hop questions; evidence is gold-injected so
    the arms differ only in how multiple images are encoded."""
    world = WorldSpec(num_entities=12, attrs_per_entity=2, values_per_attr=6,
                      text_entities=0, image_entities=12, imagetext_entities=0,
                      questions_per_fact=1, num_two_hop=96,
                      noise_sigma=0.05, seed=seed)
    cfg = Config(world=world, seed=seed)
    cfg.hyper = HyperParams(max_len=96)
    cfg.generator.epochs = 10
    cfg.generator.batch_size = 16
    cfg.generator.askg_enabled = False
    cfg.generator.alpha = 0.0
    cfg.generator.context_source = "gold"
    return cfg.validate()


# -- shared training stack -------------------------------------------------------------


def train_stack(cfg: Config, with_fusion_pretrain: bool = True,
                with_ranker: bool = True, use_fusion: bool = True
                ) -> SimpleNamespace:
    """In-memory pipeline prefix: fusion pretraining, retriever training,
    index over the full KB (distractors included), and optionally the rank
    head fitted on Top-K candidates of the train split."""
    models = build_models(cfg)
    if with_fusion_pretrain and use_fusion:
        models.encoder.set_frozen(True)
        pretrain_fusion(models.fusion, _fusion_corpus(models.world),
                        cfg.fusion, Rng(cfg.seed).split("fusion_pretrain"))
        models.encoder.set_frozen(False)
    train_retriever(models.encoder, models.fusion, models.world,
                    cfg.retriever, Rng(cfg.seed).split("retriever"),
                    use_fusion=use_fusion)
    models.index = build_index(models.encoder, models.fusion, models.kb_items,
                               built_at="retriever", use_fusion=use_fusion)
    if with_ranker:
        fit_ranker(models, cfg)
    return models


def fit_ranker(models, cfg: Config) -> int:
    """Collect Top-K candidates for train questions, label them by gold
    membership, and fit the rank head's trainable classifier."""
    feats, labels, skipped = [], [], 0
    for ex in models.world.examples_for("train"):
        cands = _topk_items(models, models.index, ex.question, cfg.ranker.top_k)
        lab = [int(it.id in ex.gold_ids) for it, _ in cands]
        if not any(lab):
            skipped += 1
            continue
        for (it, _), y in zip(cands, lab):
            feats.append(models.rank_head.features(
                models.encoder, models.fusion, ex.question, it))
            labels.append(y)
    rank_train(models.rank_head, np.asarray(feats), np.asarray(labels),
               cfg.ranker, Rng(cfg.seed).split("ranker"))
    return skipped


def ranked_prediction(models, cfg: Config, question: list[int]) -> set[str]:
    cands = _topk_items(models, models.index, question, cfg.ranker.top_k)
    feats = np.asarray([models.rank_head.features(
        models.encoder, models.fusion, question, it) for it, _ in cands])
    probs = models.rank_head.relevance_probabilities(feats)
    return set(rank_select([it.id for it, _ in cands], probs,
                           cap=cfg.ranker.keep_cap))


def topk_prediction(models, cfg: Config, question: list[int]) -> set[str]:
    cands = _topk_items(models, models.index, question, cfg.ranker.keep_cap)
    return {it.id for it, _ in cands}


# -- rank benchmark ---------------------------------------------------------------------


def rank_benchmark(cfg: Config | None = None, seed: int = 0) -> dict:
    """Retrieve-then-rank vs retrieve-only set F1 on the confusable world.

    The retrieve-only arm predicts the fixed top-cap retrieval set; the rank
    arm re-scores Top-K and keeps candidates past the relevance threshold.
    """
    cfg = cfg or confusion_config(seed)
    models = train_stack(cfg)
    test = models.world.examples_for("test")
    plain, ranked = [], []
    for ex in test:
        plain.append(retr_f1(topk_prediction(models, cfg, ex.question),
                             set(ex.gold_ids)))
        ranked.append(retr_f1(ranked_prediction(models, cfg, ex.question),
                              set(ex.gold_ids)))
    recall = recall_at_k(models.encoder, models.index, test, k=5)
    return {
        "retrieve_only_f1": float(np.mean(plain)),
        "rank_f1": float(np.mean(ranked)),
        "delta": float(np.mean(ranked) - np.mean(plain)),
        "recall_at_5": recall,
        "n_questions": len(test),
    }


# -- generation benchmarks ----------------------------------------------------------------


def _generation_stack(cfg: Config) -> SimpleNamespace:
    """Trained retrieval prefix plus fixed evidence contexts and the
    selection dataset; arms re-train only the generator."""
    models = train_stack(cfg, with_ranker=False)
    settings = cfg.generator.settings()
    contexts, retrieved = {}, {}
    for ex in models.world.examples:
        cands = _topk_items(models, models.index, ex.question,
                            cfg.ranker.top_k)
        retrieved[ex.id] = [it for it, _ in cands]
        contexts[ex.id] = [it for it, _ in cands[:cfg.ranker.keep_cap]]
    train_examples = models.world.examples_for("train")
    askg_data, skipped = build_askg_dataset(
        train_examples, retrieved, models.world.vocab, settings,
        Rng(cfg.seed).split("askg"))
    models.contexts = contexts
    models.askg_data = askg_data
    models.askg_skipped = skipped
    models.base_params = snapshot(models.encoder.params()
                                  + models.fusion.params())
    return models


def _held_out_em(models, cfg: Config, split: str = "test",
                 one_set: bool = True) -> float:
    ems = []
    for ex in models.world.examples_for(split):
        pred = decode_answer(models.decoder, models.encoder, ex.question,
                             models.contexts[ex.id], one_set=one_set)
        em, _ = em_f1(models.world.vocab.decode(pred) or "<empty>",
                      ex.answer_text)
        ems.append(em)
    return float(np.mean(ems)) if ems else 0.0


def train_generator_arm(models, cfg: Config, alpha: float,
                        one_set: bool = True) -> float:
    """Reset to the shared post-retrieval parameters, train a fresh
    generator at the given alpha, and return held-out exact match."""
    restore(models.encoder.params() + models.fusion.params(),
            models.base_params)
    models.decoder = Decoder(cfg.hyper, Rng(cfg.seed))
    settings = cfg.generator.settings()
    settings.alpha = float(alpha)
    train_generator(models.decoder, models.encoder, models.world,
                    models.contexts, models.askg_data, cfg.generator,
                    settings, Rng(cfg.seed).split("generator"),
                    one_set=one_set)
    return _held_out_em(models, cfg, one_set=one_set)


def askg_benchmark(alphas=(0.0, 1.0), cfg: Config | None = None,
                   seed: int = 0, stack=None) -> dict:
    """Held-out EM per alpha on the noisy-evidence world; alpha=0 is the
    plain-NLL arm."""
    cfg = cfg or generation_config(seed)
    models = stack or _generation_stack(cfg)
    ems = {}
    for alpha in alphas:
        ems[float(alpha)] = train_generator_arm(models, cfg, alpha)
    return {"em_by_alpha": ems, "askg_examples": len(models.askg_data),
            "askg_skipped": models.askg_skipped, "stack": models}


def query_set_benchmark(cfg: Config | None = None, seed: int = 0) -> dict:
    """One shared query set vs one query set per image on two-hop questions
    over image evidence; contexts are gold-injected."""
    cfg = cfg or two_hop_config(seed)
    models = build_models(cfg)
    models.contexts = {ex.id: [models.item_by_id[g]
                               for g in sorted(ex.gold_ids)]
                       for ex in models.world.examples}
    models.askg_data = []
    models.askg_skipped = 0
    models.base_params = snapshot(models.encoder.params()
                                  + models.fusion.params())
    n = cfg.hyper.n_queries
    two_hop = next(ex for ex in models.world.examples if ex.hops == 2)
    with no_grad():
        images = [models.item_by_id[g].image_payload
                  for g in sorted(two_hop.gold_ids)]
        one_rows = models.encoder.encode_image(images, two_hop.question)
        multi_rows = [models.encoder.encode_image([img], two_hop.question)
                      for img in images]
    em_one = train_generator_arm(models, cfg, alpha=0.0, one_set=True)
    em_multi = train_generator_arm(models, cfg, alpha=0.0, one_set=False)
    return {
        "one_set_em": em_one,
        "multi_set_em": em_multi,
        "one_set_rows": int(one_rows.shape[0]),
        "multi_set_rows": int(sum(r.shape[0] for r in multi_rows)),
        "n_queries": n,
    }


def fusion_ablation(cfg: Config | None = None, seed: int = 0) -> dict:
    """Retrieval quality with and without the fusion stack in the pooling
    path (mixed items fall back to plain query/CLS averaging)."""
    cfg = cfg or confusion_config(seed)
    results = {}
    for label, use_fusion in (("fusion_on", True), ("fusion_off", False)):
        models = train_stack(cfg, with_ranker=False, use_fusion=use_fusion)
        test = models.world.examples_for("test")
        recall = recall_at_k(models.encoder, models.index, test, k=5)
        f1 = float(np.mean([
            retr_f1(topk_prediction(models, cfg, ex.question),
                    set(ex.gold_ids)) for ex in test]))
        results[label] = {"recall_at_5": recall, "retr_f1": f1}
    return results


# -- the suite -------------------------------------------------------------------------


ARM_LABELS = ("askg_on", "askg_off", "one_set", "multi_set",
              "rank_on", "rank_off", "fusion_on", "fusion_off")


def ablation_suite(cfg: Config, out_dir) -> dict:
    """Paired comparisons on seeded synthetic benchmarks: selection
    augmentation on/off, one query set vs per-image sets, retrieval with and
    without ranking, and pooling with and without the fusion stack."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    seed = cfg.seed
    report = MetricsReport("ablate", seed)

    gen = askg_benchmark(alphas=(0.0, 1.0), seed=seed)
    rank = rank_benchmark(seed=seed)
    queries = query_set_benchmark(seed=seed)
    fusion_arms = fusion_ablation(seed=seed)

    arms = {
        "askg_on": {"em": gen["em_by_alpha"][1.0]},
        "askg_off": {"em": gen["em_by_alpha"][0.0]},
        "one_set": {"em": queries["one_set_em"],
                    "context_rows": queries["one_set_rows"]},
        "multi_set": {"em": queries["multi_set_em"],
                      "context_rows": queries["multi_set_rows"]},
        "rank_on": {"retr_f1": rank["rank_f1"]},
        "rank_off": {"retr_f1": rank["retrieve_only_f1"]},
        "fusion_on": fusion_arms["fusion_on"],
        "fusion_off": fusion_arms["fusion_off"],
    }
    for label, metrics in arms.items():
        report.add("arm", arm=label, **metrics)
    report.add("contract", one_set_rows=queries["one_set_rows"],
               multi_set_rows=queries["multi_set_rows"],
               n_queries=queries["n_queries"])
    report.finalize(arms=sorted(arms))
    report.write(out_dir / "ablation_metrics.jsonl")
    render_ablation(
        {k: {m: v for m, v in vals.items() if isinstance(v, (int, float))}
         for k, vals in arms.items()},
        "ablation arms", out_dir / "ablation.png")
    return arms


def alpha_sweep(alphas=(0.01, 0.1, 1.0, 5.0), cfg: Config | None = None,
                seed: int = 0, out_dir=None) -> dict:
    """EM across the alpha range; reports the max-min spread."""
    result = askg_benchmark(alphas=alphas, cfg=cfg, seed=seed)
    ems = result["em_by_alpha"]
    spread = max(ems.values()) - min(ems.values())
    if out_dir is not None:
        render_alpha_sweep(ems, "alpha sensitivity",
                           Path(out_dir) / "alpha_sweep.png")
    return {"em_by_alpha": ems, "spread": float(spread)}
