"""Stage orchestration: fusion pretraining, retriever training, index
construction, rank training, generator training, evaluation, and the
ablation suite. Stages run in a fixed order, load their prerequisites from
disk, and emit a checkpoint manifest plus a metrics report with figures.
"""

from __future__ import annotations

import os
from pathlib import Path
from types import SimpleNamespace

import numpy as np

from .checkpoint import (CheckpointManifest, bytes_to_ids, ids_to_bytes,
                         load_manifest, load_params_from, params_to_arrays,
                         save_manifest)
from .config import Config, config_hash
from .data import CLS, KnowledgeItem
from .encoder import MultimodalEncoder
from .errors import ConfigError
from .fusion import FusionModule, pretrain_fusion
from .generator import (Decoder, build_askg_dataset, decode_answer, em_f1,
                        selection_accuracy, train_generator)
from .metrics import MetricsReport
from .optim import Rng
from .report import render_loss_curve, render_metric_bars
from .retriever import (EmbeddingIndex, RankHead, build_index, encode_question,
                        mips_topk, rank_select, rank_train, recall_at_k,
                        retr_f1, train_retriever)
from .synthworld import (World, attr_word, entity_word, generate_confusion_set,
                         generate_world, value_word)
from .tensor import no_grad

STAGE_SEQUENCE = ("fusion", "retriever", "index", "ranker", "generator")


def manifest_path(out_dir, stage: str) -> Path:
    return Path(out_dir) / f"{stage}.ckpt"


class RunLock:
    """One run owns its output directory exclusively."""

    def __init__(self, out_dir):
        self.path = Path(out_dir) / ".lock"

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise ConfigError(
                f"output directory {self.path.parent} is locked by another run")
        os.close(fd)
        return self

    def __exit__(self, *exc):
        self.path.unlink(missing_ok=True)
        return False


def build_models(cfg: Config) -> SimpleNamespace:
    """World plus seed-deterministic model components. Frozen stand-ins
    (image features, rank re-encoder) are pure functions of the seed."""
    cfg.validate()
    world = generate_world(cfg.world)
    rng = Rng(cfg.seed)
    encoder = MultimodalEncoder(cfg.hyper, rng)
    fusion = FusionModule(cfg.hyper, rng, encoder)
    rank_head = RankHead(cfg.hyper, rng)
    decoder = Decoder(cfg.hyper, rng)
    distractors = (generate_confusion_set(world)
                   if cfg.world.confusion_per_gold > 0 else [])
    kb_items = list(world.items) + list(distractors)
    by_id = {it.id: it for it in kb_items}
    return SimpleNamespace(world=world, encoder=encoder, fusion=fusion,
                           rank_head=rank_head, decoder=decoder,
                           distractors=distractors, kb_items=kb_items,
                           item_by_id=by_id)


def _require(out_dir, stage: str, cfg: Config) -> CheckpointManifest:
    path = manifest_path(out_dir, stage)
    if not path.exists():
        raise ConfigError(f"requires checkpoint: {stage}")
    manifest = load_manifest(path)
    if manifest.config_hash != config_hash(cfg):
        raise ConfigError(
            f"checkpoint {path} was produced under a different config")
    return manifest


def _save(out_dir, stage: str, cfg: Config, arrays: dict) -> CheckpointManifest:
    manifest = CheckpointManifest(stage=stage, seed=cfg.seed,
                                  config_hash=config_hash(cfg), arrays=arrays)
    save_manifest(manifest_path(out_dir, stage), manifest)
    return manifest


def _fusion_corpus(world: World) -> list:
    """Image-caption pairs for fusion pretraining; pure-image items get
    their housed fact verbalized."""
    corpus = []
    for item in world.items:
        if item.image_payload is None:
            continue
        caption = item.text_payload
        if caption is None:
            e, a = world.item_fact[item.id]
            v = world.facts[(e, a)]
            caption = [CLS] + world.vocab.encode(
                f"{entity_word(e)} {attr_word(a)} {value_word(a, v)}")
        corpus.append((item.image_payload, caption))
    return corpus


def run_stage(stage: str, cfg: Config, out_dir) -> tuple[CheckpointManifest, MetricsReport]:
    """Execute one pipeline stage; prerequisites must exist on disk."""
    if stage not in STAGE_SEQUENCE:
        raise ConfigError(f"unknown stage {stage!r}; "
                          f"expected one of {STAGE_SEQUENCE}")
    cfg.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with RunLock(out_dir):
        return _STAGE_FNS[stage](cfg, out_dir)


def _finish(report: MetricsReport, cfg, out_dir, stage, manifest,
            curve=None, **final) -> tuple[CheckpointManifest, MetricsReport]:
    report.finalize(**final)
    report.write(out_dir / f"{stage}_metrics.jsonl")
    if curve:
        render_loss_curve(curve, f"{stage} loss", out_dir / f"{stage}_loss.png")
    return manifest, report


def stage_fusion(cfg: Config, out_dir) -> tuple[CheckpointManifest, MetricsReport]:
    models = build_models(cfg)
    report = MetricsReport("fusion", cfg.seed)
    models.encoder.set_frozen(True)
    corpus = _fusion_corpus(models.world)
    curve = pretrain_fusion(models.fusion, corpus, cfg.fusion,
                            Rng(cfg.seed).split("fusion_pretrain"))
    models.encoder.set_frozen(False)
    report.add_series("epoch", curve)
    arrays = params_to_arrays(models.encoder.params() + models.fusion.params())
    manifest = _save(out_dir, "fusion", cfg, arrays)
    return _finish(report, cfg, out_dir, "fusion", manifest, curve,
                   final_loss=curve[-1]["loss"] if curve else None,
                   corpus_size=len(corpus))


def stage_retriever(cfg: Config, out_dir) -> tuple[CheckpointManifest, MetricsReport]:
    models = build_models(cfg)
    report = MetricsReport("retriever", cfg.seed)
    if not cfg.flags.skip_fusion_pretrain:
        manifest = _require(out_dir, "fusion", cfg)
        load_params_from(manifest, models.encoder.params() +
                         models.fusion.params())
    curve = train_retriever(models.encoder, models.fusion, models.world,
                            cfg.retriever, Rng(cfg.seed).split("retriever"))
    report.add_series("epoch", curve)
    arrays = params_to_arrays(models.encoder.params() + models.fusion.params())
    manifest = _save(out_dir, "retriever", cfg, arrays)
    return _finish(report, cfg, out_dir, "retriever", manifest, curve,
                   final_loss=curve[-1]["loss"] if curve else None)


def stage_index(cfg: Config, out_dir) -> tuple[CheckpointManifest, MetricsReport]:
    models = build_models(cfg)
    report = MetricsReport("index", cfg.seed)
    retr = _require(out_dir, "retriever", cfg)
    load_params_from(retr, models.encoder.params() + models.fusion.params())
    index = build_index(models.encoder, models.fusion, models.kb_items,
                        built_at="retriever")
    arrays = {"ids": ids_to_bytes(index.ids), "vectors": index.vectors}
    manifest = _save(out_dir, "index", cfg, arrays)
    report.add("index", size=len(index), dim=int(index.vectors.shape[1]))
    return _finish(report, cfg, out_dir, "index", manifest, None,
                   size=len(index))


def _load_index(out_dir, cfg) -> EmbeddingIndex:
    manifest = _require(out_dir, "index", cfg)
    ids = bytes_to_ids(manifest.array("ids"))
    vectors = manifest.array("vectors").astype(np.float64)
    return EmbeddingIndex(ids, vectors, built_at="retriever")


def _topk_items(models, index: EmbeddingIndex, question: list[int], k: int
                ) -> list[tuple[KnowledgeItem, float]]:
    with no_grad():
        q = encode_question(models.encoder, question).data
    hits = mips_topk(index, q, min(k, len(index)))
    return [(models.item_by_id[i], s) for i, s in hits]


def stage_ranker(cfg: Config, out_dir) -> tuple[CheckpointManifest, MetricsReport]:
    models = build_models(cfg)
    report = MetricsReport("ranker", cfg.seed)
    retr = _require(out_dir, "retriever", cfg)
    load_params_from(retr, models.encoder.params() + models.fusion.params())
    index = _load_index(out_dir, cfg)
    models.encoder.set_frozen(True)
    models.fusion.set_frozen(True)
    feats, labels, skipped = [], [], 0
    for ex in models.world.examples_for("train"):
        cands = _topk_items(models, index, ex.question, cfg.ranker.top_k)
        lab = [int(it.id in ex.gold_ids) for it, _ in cands]
        if not any(lab):
            skipped += 1
            continue
        for (it, _), y in zip(cands, lab):
            feats.append(models.rank_head.features(
                models.encoder, models.fusion, ex.question, it))
            labels.append(y)
    curve = rank_train(models.rank_head, np.asarray(feats),
                       np.asarray(labels), cfg.ranker,
                       Rng(cfg.seed).split("ranker"))
    models.encoder.set_frozen(False)
    models.fusion.set_frozen(False)
    report.add_series("epoch", curve)
    report.add("rank_data", pairs=len(labels), skipped=skipped)
    arrays = params_to_arrays(models.encoder.params() + models.fusion.params()
                              + models.rank_head.params())
    manifest = _save(out_dir, "ranker", cfg, arrays)
    return _finish(report, cfg, out_dir, "ranker", manifest, curve,
                   final_loss=curve[-1]["loss"] if curve else None,
                   skipped=skipped)


def _ranked_ids(models, cfg, index, question: list[int]) -> list[str]:
    cands = _topk_items(models, index, question, cfg.ranker.top_k)
    feats = np.asarray([models.rank_head.features(
        models.encoder, models.fusion, question, it) for it, _ in cands])
    probs = models.rank_head.relevance_probabilities(feats)
    return rank_select([it.id for it, _ in cands], probs,
                       cap=cfg.ranker.keep_cap)


def _context_items(models, cfg, index, ex, source: str) -> list[KnowledgeItem]:
    cap = cfg.ranker.keep_cap
    if source == "gold":
        items = [models.item_by_id[g] for g in sorted(ex.gold_ids)]
        for it, _ in _topk_items(models, index, ex.question, cap):
            if len(items) >= max(cap, len(ex.gold_ids)):
                break
            if it.id not in ex.gold_ids:
                items.append(it)
        return items
    if source == "topk":
        return [it for it, _ in _topk_items(models, index, ex.question, cap)]
    if source == "ranked":
        ids = _ranked_ids(models, cfg, index, ex.question)
        return [models.item_by_id[i] for i in ids]
    raise ConfigError(f"unknown context source {source!r}")


def _generation_inputs(models, cfg, index, examples, source: str,
                       settings) -> tuple[dict, list, int]:
    contexts = {}
    retrieved = {}
    for ex in examples:
        contexts[ex.id] = _context_items(models, cfg, index, ex, source)
        retrieved[ex.id] = [it for it, _ in _topk_items(
            models, index, ex.question, cfg.ranker.top_k)]
    askg_data, skipped = build_askg_dataset(
        examples, retrieved, models.world.vocab, settings,
        Rng(cfg.seed).split("askg"))
    return contexts, askg_data, skipped


def stage_generator(cfg: Config, out_dir) -> tuple[CheckpointManifest, MetricsReport]:
    models = build_models(cfg)
    report = MetricsReport("generator", cfg.seed)
    source = cfg.generator.context_source
    if cfg.flags.skip_rank:
        source = "gold"
        prev = _require(out_dir, "retriever", cfg)
        load_params_from(prev, models.encoder.params() + models.fusion.params())
    elif source == "ranked":
        prev = _require(out_dir, "ranker", cfg)
        load_params_from(prev, models.encoder.params() + models.fusion.params()
                         + models.rank_head.params())
    else:
        prev = _require(out_dir, "retriever", cfg)
        load_params_from(prev, models.encoder.params() + models.fusion.params())
    index = _load_index(out_dir, cfg)
    settings = cfg.generator.settings()
    train_examples = models.world.examples_for("train")
    contexts, askg_data, skipped = _generation_inputs(
        models, cfg, index, train_examples, source, settings)
    one_set = not cfg.flags.multiset_queries_baseline
    curve = train_generator(models.decoder, models.encoder, models.world,
                            contexts, askg_data, cfg.generator, settings,
                            Rng(cfg.seed).split("generator"), one_set=one_set)
    report.add_series("epoch", curve)
    report.add("askg", examples=len(askg_data), skipped=skipped,
               alpha=settings.alpha, enabled=settings.askg_enabled)
    arrays = params_to_arrays(models.encoder.params() + models.fusion.params()
                              + models.rank_head.params()
                              + models.decoder.params())
    manifest = _save(out_dir, "generator", cfg, arrays)
    return _finish(report, cfg, out_dir, "generator", manifest, curve,
                   final_loss=curve[-1]["loss"] if curve else None,
                   context_source=source)


_STAGE_FNS = {
    "fusion": stage_fusion,
    "retriever": stage_retriever,
    "index": stage_index,
    "ranker": stage_ranker,
    "generator": stage_generator,
}


def run_pipeline(cfg: Config, out_dir) -> dict[str, CheckpointManifest]:
    """All stages in order, honoring skip flags."""
    out = {}
    for stage in STAGE_SEQUENCE:
        if stage == "fusion" and cfg.flags.skip_fusion_pretrain:
            continue
        if stage == "ranker" and cfg.flags.skip_rank:
            continue
        out[stage], _ = run_stage(stage, cfg, out_dir)
    return out


# -- evaluation ------------------------------------------------------------------


def load_trained(cfg: Config, out_dir, stage: str = "generator") -> SimpleNamespace:
    models = build_models(cfg)
    manifest = _require(out_dir, stage, cfg)
    params = models.encoder.params() + models.fusion.params()
    if stage in ("ranker", "generator") and not cfg.flags.skip_rank:
        params += models.rank_head.params()
    if stage == "generator":
        params += models.decoder.params()
    load_params_from(manifest, params)
    models.index = _load_index(out_dir, cfg)
    return models


def evaluate(cfg: Config, out_dir, split: str = "test") -> MetricsReport:
    """Held-out metrics for the deployed path: recall, retrieval F1 with and
    without ranking, answer EM / word F1, and selection accuracy."""
    cfg.validate()
    out_dir = Path(out_dir)
    models = load_trained(cfg, out_dir, "generator")
    index = models.index
    report = MetricsReport("eval", cfg.seed)
    examples = models.world.examples_for(split)
    cap = cfg.ranker.keep_cap
    have_ranker = not cfg.flags.skip_rank
    source = "gold" if cfg.flags.skip_rank else cfg.generator.context_source
    one_set = not cfg.flags.multiset_queries_baseline

    recall = recall_at_k(models.encoder, index, examples, k=5)
    random_baseline = min(1.0, 5 / len(index))

    f1_plain, f1_rank, ems, f1s = [], [], [], []
    for ex in examples:
        top = _topk_items(models, index, ex.question, cap)
        f1_plain.append(retr_f1({it.id for it, _ in top}, set(ex.gold_ids)))
        if have_ranker:
            ids = _ranked_ids(models, cfg, index, ex.question)
            f1_rank.append(retr_f1(set(ids), set(ex.gold_ids)))
        items = _context_items(models, cfg, index, ex, source)
        pred = decode_answer(models.decoder, models.encoder, ex.question,
                             items, one_set=one_set)
        pred_text = models.world.vocab.decode(pred)
        em, f1 = em_f1(pred_text, ex.answer_text)
        ems.append(em)
        f1s.append(f1)
        report.add("question", id=ex.id, prediction=pred_text,
                   gold=ex.answer_text, em=em, f1=f1)

    settings = cfg.generator.settings()
    retrieved = {ex.id: [it for it, _ in _topk_items(
        models, index, ex.question, cfg.ranker.top_k)] for ex in examples}
    askg_data, _ = build_askg_dataset(examples, retrieved, models.world.vocab,
                                      settings, Rng(cfg.seed).split("askg_eval"))
    sel_acc = selection_accuracy(models.decoder, models.encoder, askg_data,
                                 models.world.vocab)

    final = {
        "recall_at_5": recall,
        "random_baseline_recall": random_baseline,
        "retr_f1_retrieve_only": float(np.mean(f1_plain)) if f1_plain else 0.0,
        "retr_f1_ranked": float(np.mean(f1_rank)) if f1_rank else None,
        "em": float(np.mean(ems)) if ems else 0.0,
        "word_f1": float(np.mean(f1s)) if f1s else 0.0,
        "selection_accuracy": sel_acc,
        "split": split,
    }
    report.finalize(**final)
    report.write(out_dir / "eval_metrics.jsonl")
    bars = {k: v for k, v in final.items()
            if isinstance(v, (int, float)) and v is not None}
    render_metric_bars(bars, f"evaluation ({split})",
                       out_dir / "eval_summary.png")
    return report
