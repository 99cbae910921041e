"""Command-line surface.

Exit codes: 0 success, 2 contract/config errors, 3 corrupted or malformed
files.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import benchmarks
from .config import Config, load_config
from .data import CLS
from .errors import ContractError, CorruptionError, FormatError
from .generator import decode_answer
from .pipeline import (_context_items, _ranked_ids, _topk_items, evaluate,
                       load_trained, run_stage)
from .retriever import mips_topk, encode_question
from .tensor import no_grad

STAGE_BY_COMMAND = {
    "pretrain-fusion": "fusion",
    "train-retriever": "retriever",
    "build-index": "index",
    "train-ranker": "ranker",
    "train-generator": "generator",
}


def _load_cfg(args) -> Config:
    cfg = load_config(args.config) if args.config else Config()
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg.validate()


def _tokenize_question(models, text: str) -> list[int]:
    return [CLS] + models.world.vocab.encode(text)


def cmd_gen_world(args) -> int:
    from .pipeline import build_models
    from .synthworld import export_world
    cfg = _load_cfg(args)
    models = build_models(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "world.jsonl"
    export_world(models.world, path)
    print(f"wrote {path} ({len(models.world.items)} items, "
          f"{len(models.world.examples)} questions)")
    return 0


def cmd_stage(args) -> int:
    cfg = _load_cfg(args)
    stage = STAGE_BY_COMMAND[args.command]
    manifest, report = run_stage(stage, cfg, args.out)
    final = report.final()
    print(f"stage {stage} complete; "
          f"{len(manifest.arrays)} arrays saved to "
          f"{Path(args.out) / (stage + '.ckpt')}")
    for key, value in final.items():
        if key in ("stage", "seed", "kind"):
            continue
        print(f"  {key}: {value}")
    return 0


def cmd_retrieve(args) -> int:
    cfg = _load_cfg(args)
    models = load_trained(cfg, args.out, stage="retriever")
    question = _tokenize_question(models, args.question)
    hits = _topk_items(models, models.index, question, args.k)
    for item, score in hits:
        print(f"{item.id}\t{score:.6f}")
    return 0


def cmd_rank(args) -> int:
    cfg = _load_cfg(args)
    models = load_trained(cfg, args.out, stage="ranker")
    question = _tokenize_question(models, args.question)
    kept = _ranked_ids(models, cfg, models.index, question)
    cands = _topk_items(models, models.index, question, cfg.ranker.top_k)
    feats = np.asarray([models.rank_head.features(
        models.encoder, models.fusion, question, it) for it, _ in cands])
    probs = models.rank_head.relevance_probabilities(feats)
    for (item, score), p in zip(cands, probs):
        marker = "*" if item.id in kept else " "
        print(f"{marker} {item.id}\tretrieval={score:.4f}\trelevance={p:.4f}")
    print("selected:", " ".join(kept))
    return 0


def cmd_ask(args) -> int:
    cfg = _load_cfg(args)
    models = load_trained(cfg, args.out, stage="generator")
    question = _tokenize_question(models, args.question)
    if cfg.flags.skip_rank:
        ids = [i for i, _ in mips_topk(
            models.index, _question_vec(models, question), args.k)]
    else:
        ids = _ranked_ids(models, cfg, models.index, question)[:args.k]
    items = [models.item_by_id[i] for i in ids]
    pred = decode_answer(models.decoder, models.encoder, question, items,
                         one_set=not cfg.flags.multiset_queries_baseline)
    print("answer:", models.world.vocab.decode(pred))
    print("evidence:", " ".join(ids))
    return 0


def _question_vec(models, question):
    with no_grad():
        return encode_question(models.encoder, question).data


def cmd_eval(args) -> int:
    cfg = _load_cfg(args)
    report = evaluate(cfg, args.out, split=args.split)
    for key, value in report.final().items():
        if key in ("stage", "seed", "kind"):
            continue
        print(f"{key}: {value}")
    return 0


def cmd_ablate(args) -> int:
    cfg = _load_cfg(args)
    arms = benchmarks.ablation_suite(cfg, args.out)
    sweep = benchmarks.alpha_sweep(seed=cfg.seed, out_dir=args.out)
    print(json.dumps({"arms": arms, "alpha_sweep": sweep["em_by_alpha"],
                      "alpha_spread": sweep["spread"]}, indent=2))
    return 0


def cmd_grad_check(args) -> int:
    from .gradchecks import run_all_checks
    results = run_all_checks(seed=args.seed if args.seed is not None else 0)
    worst_name = max(results, key=results.get)
    ok = all(v < 1e-4 for v in results.values())
    for name, err in results.items():
        print(f"{name}: max rel err {err:.3e} "
              f"{'PASS' if err < 1e-4 else 'FAIL'}")
    print(f"worst: {worst_name} ({results[worst_name]:.3e})")
    return 0 if ok else 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mmrag",
        description="Desk-scale retrieval-augmented multimodal QA pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", type=str, default=None,
                       help="JSON config path (defaults apply when omitted)")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config seed")
        p.add_argument("--out", type=str, default="runs/default",
                       help="run output directory")

    add_common(sub.add_parser("gen-world", help="export the synthetic corpus"))
    for cmd in STAGE_BY_COMMAND:
        add_common(sub.add_parser(cmd, help=f"run the {STAGE_BY_COMMAND[cmd]} stage"))
    p = sub.add_parser("retrieve", help="top-K retrieval for a question")
    add_common(p)
    p.add_argument("--question", required=True)
    p.add_argument("--k", type=int, default=5)
    p = sub.add_parser("rank", help="re-score and filter retrieved candidates")
    add_common(p)
    p.add_argument("--question", required=True)
    p = sub.add_parser("ask", help="answer a question with selected evidence")
    add_common(p)
    p.add_argument("--question", required=True)
    p.add_argument("--k", type=int, default=2)
    p = sub.add_parser("eval", help="held-out metrics for a trained run")
    add_common(p)
    p.add_argument("--split", default="test", choices=("train", "dev", "test"))
    add_common(sub.add_parser("ablate", help="paired ablation benchmarks"))
    add_common(sub.add_parser("grad-check",
                              help="finite-difference checks for every loss"))
    return parser


COMMANDS = {
    "gen-world": cmd_gen_world,
    "pretrain-fusion": cmd_stage,
    "train-retriever": cmd_stage,
    "build-index": cmd_stage,
    "train-ranker": cmd_stage,
    "train-generator": cmd_stage,
    "retrieve": cmd_retrieve,
    "rank": cmd_rank,
    "ask": cmd_ask,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "grad-check": cmd_grad_check,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except CorruptionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except FormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except ContractError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
