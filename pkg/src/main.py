#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
OmniVL Desk - COMMAND LINE

Batch entry point: synthesize a corpus, pretrain, evaluate.

    python src/main.py synth --outdir work/corpus --video-fraction 0.5
    python src/main.py pretrain --config config/toy.json --seed 0 --outdir work/run
    python src/main.py eval --task retrieval --checkpoint work/run/checkpoints/ckpt_00000040.npz --outdir work/eval

Exit codes: 0 success, 2 usage/config error, 3 runtime failure.
"""

import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import click
import pandas as pd
from dotenv import load_dotenv
from rich.console import Console
from rich.logging import RichHandler

from corpus import Corpus, build_vocabulary, load_corpus, make_qa_pairs, save_manifest, stack_frames, synth_corpus
from errors import ArgumentError, ConfigError, ManifestError, OmniVLError
from evaluator import (ablate_paradigms, caption_eval, evaluate_retrieval, export_curves, format_table,
                       probe_encoder, qa_eval, render_table, zero_shot_classify)
from settings import load_config, save_snapshot
from state_store import RunStore, load_checkpoint
from text_encoder import Vocabulary
from trainer import finetune_qa, restore_model, train

logger = logging.getLogger("omnivl")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3
EVAL_TASKS = ("retrieval", "zeroshot", "probe", "caption", "qa", "ablate")
VISUAL_TASKS = ("retrieval", "zeroshot", "probe", "caption", "qa")

console = Console()


def setup_logging(level: str = "INFO"):
    logging.basicConfig(
        level=getattr(logging, level.upper(), logging.INFO),
        format="%(message)s",
        datefmt="[%X]",
        handlers=[RichHandler(console=Console(stderr=True), rich_tracebacks=True, show_path=False)],
        force=True,
    )


def _fail(message: str, code: int):
    logger.error(message)
    click.echo(f"ERROR: {message}", err=True)
    sys.exit(code)


def _guarded(action):
    """Run a command body and map errors to exit codes."""
    try:
        action()
    except (ConfigError, ArgumentError, ManifestError) as e:
        _fail(str(e), EXIT_USAGE)
    except OmniVLError as e:
        _fail(str(e), EXIT_RUNTIME)
    except KeyboardInterrupt:
        _fail("Interrupted by user", EXIT_RUNTIME)
    except Exception as e:
        logger.exception("Unexpected failure")
        _fail(f"{type(e).__name__}: {e}", EXIT_RUNTIME)


def _load(config: Optional[str], overrides: Sequence[str], seed: Optional[int]):
    cfg = load_config(config, overrides)
    if seed is not None:
        cfg.seed = seed
    setup_logging(cfg.log_level)
    return cfg


def _write_records(path: Path, records: List[Dict]):
    path.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame(records).to_json(path, orient="records", lines=True)
    logger.info(f"Report written to {path}")


def common_options(func):
    func = click.option("--override", "overrides", multiple=True, metavar="KEY=VALUE",
                        help="Dotted config override, repeatable")(func)
    func = click.option("--outdir", type=click.Path(file_okay=False), required=True,
                        help="Output directory")(func)
    func = click.option("--seed", type=int, default=None, help="Experiment seed")(func)
    func = click.option("--config", type=click.Path(dir_okay=False), default=None,
                        help="JSON/YAML config file")(func)
    return func


@click.group()
def cli():
    """OmniVL desk-scale pretraining and evaluation."""
    load_dotenv()


# ----------------------------------------------------------------------------
# synth
# ----------------------------------------------------------------------------

@cli.command()
@common_options
@click.option("--video-fraction", type=float, default=None, help="Share of each class stored as video")
@click.option("--n-classes", type=int, default=None)
@click.option("--n-per-class", type=int, default=None)
@click.option("--held-out", type=int, default=None, help="Held-out samples per class and modality")
def synth(config, seed, outdir, overrides, video_fraction, n_classes, n_per_class, held_out):
    """Write the procedural corpus as a manifest plus payload files."""
    def run():
        cfg = _load(config, overrides, None)
        params = cfg.corpus.synth
        corpus = synth_corpus(
            seed=params.seed if seed is None else seed,
            n_classes=params.n_classes if n_classes is None else n_classes,
            n_per_class=params.n_per_class if n_per_class is None else n_per_class,
            image_size=params.image_size,
            video_T=params.video_T,
            video_fraction=params.video_fraction if video_fraction is None else video_fraction,
            held_out_per_class=params.held_out_per_class if held_out is None else held_out,
            image_templates=cfg.corpus.image_templates,
            video_templates=cfg.corpus.video_templates,
        )
        path = save_manifest(corpus, outdir)
        console.print(f"[green]Wrote {len(corpus)} triplets to {path}[/green]")

    _guarded(run)


# ----------------------------------------------------------------------------
# pretrain
# ----------------------------------------------------------------------------

@cli.command()
@common_options
@click.option("--resume", is_flag=True, help="Continue from the newest checkpoint in --outdir")
def pretrain(config, seed, outdir, overrides, resume):
    """Run the configured pretraining schedule."""
    def run():
        cfg = _load(config, overrides, seed)
        corpus = load_corpus(cfg.corpus)
        vocab = build_vocabulary(corpus, [cfg.eval.caption_prefix])

        store = RunStore(outdir, cfg.train.keep_checkpoints)
        save_snapshot(cfg, store.config_file)
        vocab.save(store.vocab_file)

        result = train(cfg, corpus, vocab, store, resume=resume)
        export_curves(store.read_metrics(), Path(outdir) / "curves.csv")
        last = result.metrics[-1] if result.metrics else {}
        console.print(f"[green]Pretraining done: {result.state.steps_done} steps, "
                      f"final loss {last.get('loss_total', float('nan')):.4f}[/green]")

    _guarded(run)


# ----------------------------------------------------------------------------
# eval
# ----------------------------------------------------------------------------

def _vocabulary_for(checkpoint: Optional[Path], corpus: Corpus, cfg) -> Vocabulary:
    """The run's saved vocabulary next to the checkpoint, else one rebuilt from the corpus."""
    if checkpoint is not None:
        saved = checkpoint.parent.parent / "vocab.txt"
        if saved.exists():
            return Vocabulary.load(saved)
    return build_vocabulary(corpus, [cfg.eval.caption_prefix])


def _eval_split(corpus: Corpus, modality: Optional[str] = None) -> List[int]:
    held_out = corpus.indices(modality, "test")
    return held_out if held_out else corpus.indices(modality, "train")


def _task_retrieval(model, corpus, vocab, cfg, k, task: str = "retrieval") -> List[Dict]:
    records = []
    for modality in corpus.modalities():
        result = evaluate_retrieval(model, corpus, _eval_split(corpus, modality), vocab, cfg.corpus.text_len, k)
        for direction, recall in result.recall.items():
            records.append({"task": task, "modality": modality, "direction": direction, "k": k,
                            **{f"r@{at}": value for at, value in recall.items()}})
    return records


def _task_zeroshot(model, corpus, vocab, cfg, k) -> List[Dict]:
    """Retrieval and prompt-based classification straight from the pretrained weights."""
    records = [{**r, "kind": "retrieval"}
               for r in _task_retrieval(model, corpus, vocab, cfg, k, task="zeroshot")]
    for modality in corpus.modalities():
        indices = [i for i in _eval_split(corpus, modality) if corpus[i].is_label_data]
        if not indices:
            continue
        names = sorted({corpus[i].class_name for i in indices})
        frames = stack_frames(corpus, indices, next(model.parameters()).dtype)
        labels = [names.index(corpus[i].class_name) for i in indices]
        result = zero_shot_classify(model, frames, names, corpus.templates[modality], vocab,
                                    cfg.corpus.text_len, labels)
        records.append({"task": "zeroshot", "kind": "classification", "modality": modality,
                        "classes": len(names), "accuracy": result["accuracy"]})
    return records


def _task_probe(model, corpus, vocab, cfg) -> List[Dict]:
    records = []
    for modality in corpus.modalities():
        train_idx = corpus.indices(modality, "train")
        result = probe_encoder(model, corpus, train_idx, _eval_split(corpus, modality),
                               cfg.eval.probe_C, cfg.eval.probe_max_iter)
        records.append({"task": "probe", "modality": modality, "accuracy": result.accuracy,
                        "train_accuracy": result.train_accuracy, "frozen_encoder": result.frozen_encoder})
    return records


def _task_caption(model, corpus, vocab, cfg, max_len, beam, outdir: Path) -> List[Dict]:
    indices = _eval_split(corpus)
    result = caption_eval(model, corpus, indices, vocab, max_len, beam, cfg.eval.caption_prefix)
    _write_records(outdir / "captions.jsonl",
                   [{"candidate": c, "reference": r} for c, r in zip(result.candidates, result.references)])
    return [{"task": "caption", "bleu4": result.bleu4, "exact_match": result.exact_match,
             "items": len(indices)}]


def _task_qa(model, corpus, vocab, cfg) -> List[Dict]:
    pairs = make_qa_pairs(corpus)
    train_pairs = [p for p in pairs if corpus[p.index].split == "train"]
    test_pairs = [p for p in pairs if corpus[p.index].split == "test"] or train_pairs
    finetune_qa(model, corpus, train_pairs, vocab, cfg.eval.finetune_preset, seed=cfg.seed,
                show_progress=cfg.train.show_progress)
    records = []
    for modality in corpus.modalities():
        chosen = [p for p in test_pairs if corpus[p.index].modality == modality]
        if chosen:
            result = qa_eval(model, corpus, chosen, vocab)
            records.append({"task": "qa", "modality": modality, "accuracy": result.accuracy,
                            "pairs": len(chosen)})
    return records


@cli.command(name="eval")
@common_options
@click.option("--task", type=click.Choice(EVAL_TASKS), required=True,
              help="Evaluation task (zeroshot: retrieval and classification without fine-tuning)")
@click.option("--checkpoint", type=click.Path(dir_okay=False), default=None,
              help="Checkpoint (.npz) to evaluate; not used by 'ablate'")
@click.option("--k", "k", type=int, default=None, help="Re-ranking shortlist size (default 128)")
@click.option("--max-len", type=int, default=None, help="Maximum generated length")
@click.option("--beam", type=int, default=None, help="Beam width (1 = greedy)")
def evaluate(config, seed, outdir, overrides, task, checkpoint, k, max_len, beam):
    """Evaluate a checkpoint on a downstream task, or run the paradigm ablation."""
    def run():
        cfg = _load(config, overrides, seed)
        k_value = cfg.eval.k if k is None else k
        out = Path(outdir)
        corpus = load_corpus(cfg.corpus)
        checkpoint_path = Path(checkpoint) if checkpoint else None

        if task == "ablate":
            vocab = _vocabulary_for(None, corpus, cfg)
            table = ablate_paradigms(cfg, corpus, vocab)
            out.mkdir(parents=True, exist_ok=True)
            table.reset_index().to_json(out / "ablation.jsonl", orient="records", lines=True)
            (out / "ablation.txt").write_text(format_table(table) + "\n", encoding="utf-8")
            console.print(render_table(table))
            return

        if checkpoint_path is None:
            raise ConfigError(f"task '{task}' needs --checkpoint")
        arrays = load_checkpoint(checkpoint_path)
        if task in VISUAL_TASKS and not any(name.startswith("model/visual.") for name in arrays):
            raise ArgumentError(f"checkpoint {checkpoint_path} holds no visual encoder weights; "
                                f"task '{task}' needs them")

        vocab = _vocabulary_for(checkpoint_path, corpus, cfg)
        model = restore_model(cfg, len(vocab), arrays)
        logger.info(f"Loaded {checkpoint_path} for task '{task}'")

        if task == "retrieval":
            records = _task_retrieval(model, corpus, vocab, cfg, k_value)
        elif task == "zeroshot":
            records = _task_zeroshot(model, corpus, vocab, cfg, k_value)
        elif task == "probe":
            records = _task_probe(model, corpus, vocab, cfg)
        elif task == "caption":
            records = _task_caption(model, corpus, vocab, cfg, max_len or cfg.eval.max_len,
                                    beam or cfg.eval.beam, out)
        else:
            records = _task_qa(model, corpus, vocab, cfg)

        _write_records(out / f"report_{task}.jsonl", records)
        for record in records:
            console.print(record)

    _guarded(run)


def main():
    cli()


if __name__ == "__main__":
    main()
