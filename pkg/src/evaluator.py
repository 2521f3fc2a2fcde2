#!/usr/bin/env python3
"""
Evaluator Module

Downstream evaluation of a pretrained model:
- Retrieval: cosine shortlist of the top K, re-ranked by p_vlm
- Zero-shot classification against class prompts
- Linear probe on frozen v_cls features
- Captioning (corpus BLEU@4) and question answering (exact match)
- Paradigm ablation table and plot-data export
"""

import copy
import hashlib
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd
import torch
from rich.table import Table
from sklearn.linear_model import LogisticRegression
from sklearn.metrics import accuracy_score

from corpus import Corpus, QAPair, label_to_text, make_qa_pairs, stack_frames
from errors import ArgumentError
from generation_decoder import GenerationConfig, qa_forward
from text_encoder import TokenSequence, Vocabulary, tokenize_batch
from trainer import finetune_qa, plan_batches, train
from visual_encoder import EncodedVisual

logger = logging.getLogger(__name__)

RECALL_AT = (1, 5, 10)
PARADIGM_ROWS = ("image_only", "video_only", "joint_scratch", "img2vid", "decoupled")
TABLE_COLUMNS = ("image_tr@1", "image_ir@1", "video_ir@1", "caption_b@4", "image_qa", "video_qa")
IMAGE_COLUMNS = ("image_tr@1", "image_ir@1", "caption_b@4", "image_qa")


# ----------------------------------------------------------------------------
# Encoding helpers
# ----------------------------------------------------------------------------

@torch.no_grad()
def encode_visuals(model, frames: torch.Tensor, batch_size: int = 64) -> EncodedVisual:
    chunks = [model.encode_visual(frames[i:i + batch_size]) for i in range(0, frames.shape[0], batch_size)]
    return EncodedVisual(tokens=torch.cat([c.tokens for c in chunks]),
                         v_cls=torch.cat([c.v_cls for c in chunks]),
                         temporal_positions=chunks[0].temporal_positions)


@torch.no_grad()
def pairwise_vlm(model, visual: EncodedVisual, texts: TokenSequence, visual_index: torch.Tensor,
                 text_index: torch.Tensor, vocab: Vocabulary, batch_size: int = 256) -> torch.Tensor:
    """p_vlm for the pairs (visual_index[n], text_index[n])."""
    scores = []
    for start in range(0, visual_index.shape[0], batch_size):
        vi = visual_index[start:start + batch_size]
        ti = text_index[start:start + batch_size]
        fused = model.align.fuse(texts.index_select(ti).with_first(vocab.enc_id), visual.index_select(vi))
        scores.append(model.align.vlm_head(fused).p_vlm)
    return torch.cat(scores) if scores else torch.zeros(0)


# ----------------------------------------------------------------------------
# Retrieval
# ----------------------------------------------------------------------------

@dataclass
class RetrievalResult:
    """
    Ranked gallery lists per query and recall@{1,5,10} per direction.

    ``v2t[i]`` ranks the texts for visual query i, ``t2v[j]`` the visuals for
    text query j.
    """
    v2t: List[List[int]]
    t2v: List[List[int]]
    recall: Dict[str, Dict[int, float]] = field(default_factory=dict)
    k: int = 128


def _recall(rankings: List[List[int]], query_labels: np.ndarray, gallery_labels: np.ndarray) -> Dict[int, float]:
    result = {}
    for at in RECALL_AT:
        hits = [bool(np.any(gallery_labels[ranking[:at]] == query_labels[q]))
                for q, ranking in enumerate(rankings)]
        result[at] = float(np.mean(hits)) if hits else 0.0
    return result


def _rerank(similarity: np.ndarray, k: int, score_fn) -> List[List[int]]:
    """Stage-1 stable cosine order, then the first k re-sorted by ``score_fn``."""
    rankings = []
    for q in range(similarity.shape[0]):
        order = np.argsort(-similarity[q], kind="stable")
        top = order[:k]
        p = score_fn(q, top)
        reranked = top[np.argsort(-p, kind="stable")]
        rankings.append([int(i) for i in np.concatenate([reranked, order[k:]])])
    return rankings


@torch.no_grad()
def retrieve(model, frames: torch.Tensor, texts: TokenSequence, vocab: Vocabulary, k: int = 128,
             visual_labels: Optional[Sequence[int]] = None, text_labels: Optional[Sequence[int]] = None,
             batch_size: int = 64) -> RetrievalResult:
    """
    Two-stage retrieval in both directions.

    Stage 1 ranks by cosine similarity of the projected embeddings. Stage 2
    re-scores the top ``k`` candidates of each query by p_vlm; the remaining
    candidates follow in stage-1 order. A candidate is correct when its label
    equals the query's (labels default to pair identity).
    """
    if k < 1:
        raise ArgumentError(f"k must be at least 1, got {k}")
    if frames.shape[0] == 0 or texts.batch_size == 0:
        raise ArgumentError("retrieval gallery is empty")

    model.eval()
    visual = encode_visuals(model, frames, batch_size)
    v = model.vision_proj(visual.v_cls)
    w = torch.cat([model.embed_text(texts.index_select(torch.arange(i, min(i + batch_size, texts.batch_size))))
                   for i in range(0, texts.batch_size, batch_size)])
    similarity = (v @ w.t()).double().cpu().numpy()

    def v2t_scores(q, top):
        index = torch.as_tensor(top, dtype=torch.long)
        return pairwise_vlm(model, visual, texts, torch.full_like(index, q), index, vocab).double().cpu().numpy()

    def t2v_scores(q, top):
        index = torch.as_tensor(top, dtype=torch.long)
        return pairwise_vlm(model, visual, texts, index, torch.full_like(index, q), vocab).double().cpu().numpy()

    v2t = _rerank(similarity, k, v2t_scores)
    t2v = _rerank(similarity.T, k, t2v_scores)

    vy = np.asarray(visual_labels if visual_labels is not None else range(frames.shape[0]))
    ty = np.asarray(text_labels if text_labels is not None else range(texts.batch_size))
    recall = {"v2t": _recall(v2t, vy, ty), "t2v": _recall(t2v, ty, vy)}
    return RetrievalResult(v2t=v2t, t2v=t2v, recall=recall, k=k)


def evaluate_retrieval(model, corpus: Corpus, indices: Sequence[int], vocab: Vocabulary,
                       text_len: int, k: int = 128) -> RetrievalResult:
    """Retrieval over a corpus slice of one modality, pairs matched by label."""
    frames = stack_frames(corpus, indices, next(model.parameters()).dtype)
    texts = tokenize_batch([corpus[i].t for i in indices], vocab, text_len, add_eos=True)
    labels = [corpus[i].y for i in indices]
    result = retrieve(model, frames, texts, vocab, k, labels, labels)
    logger.info(f"Retrieval over {len(indices)} items (K={k}): "
                f"v2t R@1={result.recall['v2t'][1]:.3f}, t2v R@1={result.recall['t2v'][1]:.3f}")
    return result


# ----------------------------------------------------------------------------
# Zero-shot classification and linear probe
# ----------------------------------------------------------------------------

@torch.no_grad()
def zero_shot_classify(model, frames: torch.Tensor, class_names: Sequence[str], templates: Sequence[str],
                       vocab: Vocabulary, text_len: int, labels: Optional[Sequence[int]] = None) -> Dict:
    """
    Predict the class whose prompt embedding (averaged over templates) is
    closest to each visual embedding.

    Returns a dict with ``predictions`` and, when labels are given, ``accuracy``.
    """
    if not class_names:
        raise ArgumentError("no class names given")
    model.eval()
    prototypes = []
    for name in class_names:
        prompts = [label_to_text(name, templates, i) for i in range(len(templates))]
        w = model.embed_text(tokenize_batch(prompts, vocab, text_len, add_eos=True)).mean(dim=0)
        prototypes.append(torch.nn.functional.normalize(w, dim=0))
    _, v = model.embed_visual(frames)
    predictions = (v @ torch.stack(prototypes).t()).argmax(dim=1).cpu().numpy()

    result = {"predictions": predictions.tolist()}
    if labels is not None:
        result["accuracy"] = float(accuracy_score(np.asarray(labels), predictions))
    return result


@dataclass
class ProbeResult:
    accuracy: float
    train_accuracy: float
    n_classes: int
    frozen_encoder: bool = True


def parameter_hash(module: torch.nn.Module) -> str:
    """SHA-256 over every tensor of the module's state dict."""
    digest = hashlib.sha256()
    for name, tensor in module.state_dict().items():
        digest.update(name.encode("utf-8"))
        digest.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


def linear_probe(train_features: np.ndarray, train_labels: Sequence[int], test_features: np.ndarray,
                 test_labels: Sequence[int], C: float = 0.316, max_iter: int = 1000) -> ProbeResult:
    """Multinomial logistic regression on fixed features."""
    train_labels = np.asarray(train_labels)
    if len(np.unique(train_labels)) < 2:
        raise ArgumentError("linear probe needs at least 2 classes")
    classifier = LogisticRegression(random_state=0, C=C, max_iter=max_iter)
    classifier.fit(train_features, train_labels)
    return ProbeResult(
        accuracy=float(accuracy_score(test_labels, classifier.predict(test_features))),
        train_accuracy=float(accuracy_score(train_labels, classifier.predict(train_features))),
        n_classes=int(len(np.unique(train_labels))),
    )


def probe_encoder(model, corpus: Corpus, train_indices: Sequence[int], test_indices: Sequence[int],
                  C: float = 0.316, max_iter: int = 1000) -> ProbeResult:
    """Linear probe on v_cls of the frozen visual encoder."""
    before = parameter_hash(model.visual)
    model.visual.eval()

    def features(indices):
        frames = stack_frames(corpus, indices, next(model.parameters()).dtype)
        with torch.no_grad():
            return encode_visuals(model, frames).v_cls.double().cpu().numpy()

    result = linear_probe(features(train_indices), [corpus[i].y for i in train_indices],
                          features(test_indices), [corpus[i].y for i in test_indices], C, max_iter)
    no_grads = all(p.grad is None or not p.grad.abs().sum() for p in model.visual.parameters())
    result.frozen_encoder = no_grads and parameter_hash(model.visual) == before
    logger.info(f"Linear probe: accuracy={result.accuracy:.3f} ({result.n_classes} classes), "
                f"frozen={result.frozen_encoder}")
    return result


# ----------------------------------------------------------------------------
# Captioning and QA
# ----------------------------------------------------------------------------

def _ngrams(tokens: List[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu4(candidates: Sequence[str], references: Sequence[Union[str, Sequence[str]]]) -> float:
    """
    Corpus-level BLEU with uniform 1-4 gram weights and brevity penalty.

    Each reference entry may be a string or a list of alternative strings.
    """
    if not candidates or len(candidates) != len(references):
        raise ArgumentError("bleu4 needs equally many candidates and references, at least one")

    matches = [0] * 4
    totals = [0] * 4
    cand_len = ref_len = 0
    for candidate, refs in zip(candidates, references):
        refs = [refs] if isinstance(refs, str) else list(refs)
        cand = candidate.split()
        ref_tokens = [r.split() for r in refs]
        cand_len += len(cand)
        ref_len += min((abs(len(r) - len(cand)), len(r)) for r in ref_tokens)[1]
        for n in range(1, 5):
            counts = _ngrams(cand, n)
            max_ref = Counter()
            for r in ref_tokens:
                max_ref |= _ngrams(r, n)
            matches[n - 1] += sum(min(c, max_ref[g]) for g, c in counts.items())
            totals[n - 1] += max(len(cand) - n + 1, 0)

    if min(matches) == 0 or min(totals) == 0:
        return 0.0
    log_precision = sum(math.log(m / t) for m, t in zip(matches, totals)) / 4.0
    brevity = 1.0 if cand_len > ref_len else math.exp(1.0 - ref_len / cand_len)
    return brevity * math.exp(log_precision)


@dataclass
class CaptionResult:
    bleu4: float
    candidates: List[str]
    references: List[str]
    exact_match: float


def caption_eval(model, corpus: Corpus, indices: Sequence[int], vocab: Vocabulary,
                 max_len: int = 20, beam: int = 1, image_prefix: str = "a picture of") -> CaptionResult:
    """Generate captions (images seeded with ``image_prefix``, videos unprompted) and score them."""
    if not indices:
        raise ArgumentError("no items to caption")
    model.eval()
    candidates, references = [], []
    for modality in ("image", "video"):
        chosen = [i for i in indices if corpus[i].modality == modality]
        if not chosen:
            continue
        cfg = GenerationConfig(max_len=max_len, strategy="beam" if beam > 1 else "greedy", width=beam,
                               prefix=image_prefix if modality == "image" else "")
        visual = encode_visuals(model, stack_frames(corpus, chosen, next(model.parameters()).dtype))
        results = model.gen.generate(visual, vocab, cfg)
        candidates.extend(r.text for r in results)
        references.extend(corpus[i].t for i in chosen)

    exact = float(np.mean([c == r for c, r in zip(candidates, references)]))
    score = bleu4(candidates, references)
    logger.info(f"Captioning {len(candidates)} items: BLEU@4={score:.4f}, exact={exact:.3f}")
    return CaptionResult(score, candidates, references, exact)


@dataclass
class QAResult:
    accuracy: float
    predictions: List[str]
    answers: List[str]


def qa_eval(model, corpus: Corpus, pairs: Sequence[QAPair], vocab: Vocabulary,
            text_len: int = 8, max_len: int = 4) -> QAResult:
    """Exact-match accuracy of generated answers."""
    if not pairs:
        raise ArgumentError("no QA pairs to evaluate")
    model.eval()
    dtype = next(model.parameters()).dtype
    predictions, answers = [], []
    by_modality: Dict[str, List[QAPair]] = {}
    for pair in pairs:
        by_modality.setdefault(corpus[pair.index].modality, []).append(pair)

    for modality in sorted(by_modality):
        group = by_modality[modality]
        visual = encode_visuals(model, stack_frames(corpus, [p.index for p in group], dtype))
        question = tokenize_batch([p.question for p in group], vocab, text_len)
        results = qa_forward(visual, question, model.align, model.gen, vocab, GenerationConfig(max_len=max_len))
        predictions.extend(r.text for r in results)
        answers.extend(p.answer for p in group)

    accuracy = float(np.mean([p == a for p, a in zip(predictions, answers)]))
    return QAResult(accuracy, predictions, answers)


# ----------------------------------------------------------------------------
# Paradigm ablation
# ----------------------------------------------------------------------------

def matched_budget(cfg, corpus: Corpus) -> int:
    """
    Step budget shared by every ablation row: ``schedule.budget_steps`` when
    set, else the natural length of the decoupled plan on this corpus.
    """
    if cfg.schedule.budget_steps is not None:
        return cfg.schedule.budget_steps
    schedule = copy.deepcopy(cfg.schedule)
    schedule.paradigm = "decoupled"
    schedule.stages = []
    sizes = {m: len(corpus.indices(m, "train")) for m in ("image", "video")}
    return len(plan_batches(schedule, sizes, cfg.seed))


def paradigm_config(cfg, paradigm: str, seed: int, budget_steps: int):
    """Copy of ``cfg`` training ``paradigm`` for exactly ``budget_steps`` steps."""
    run_cfg = copy.deepcopy(cfg)
    run_cfg.seed = seed
    run_cfg.schedule.paradigm = paradigm
    run_cfg.schedule.stages = []
    run_cfg.schedule.budget_steps = budget_steps
    run_cfg.train.show_progress = False
    return run_cfg


def _paradigm_row(cfg, corpus: Corpus, vocab: Vocabulary, paradigm: str, seed: int,
                  with_qa: bool, budget_steps: int) -> Dict[str, Optional[float]]:
    run_cfg = paradigm_config(cfg, paradigm, seed, budget_steps)
    model = train(run_cfg, corpus, vocab).model

    text_len = run_cfg.corpus.text_len
    k = run_cfg.eval.k
    test_images = corpus.indices("image", "test")
    test_videos = corpus.indices("video", "test")
    row: Dict[str, Optional[float]] = {column: None for column in TABLE_COLUMNS}

    if paradigm != "video_only" and test_images:
        image = evaluate_retrieval(model, corpus, test_images, vocab, text_len, k)
        row["image_tr@1"] = image.recall["v2t"][1]
        row["image_ir@1"] = image.recall["t2v"][1]
        row["caption_b@4"] = caption_eval(model, corpus, test_images, vocab, run_cfg.eval.max_len,
                                          run_cfg.eval.beam, run_cfg.eval.caption_prefix).bleu4
    if test_videos:
        row["video_ir@1"] = evaluate_retrieval(model, corpus, test_videos, vocab, text_len, k).recall["t2v"][1]

    qa_pairs = make_qa_pairs(corpus) if with_qa else []
    train_pairs = [p for p in qa_pairs if corpus[p.index].split == "train"
                   and (paradigm != "video_only" or corpus[p.index].modality == "video")]
    if train_pairs:
        finetune_qa(model, corpus, train_pairs, vocab, run_cfg.eval.finetune_preset, seed=seed)
        for modality, column in (("image", "image_qa"), ("video", "video_qa")):
            test_pairs = [p for p in qa_pairs if corpus[p.index].split == "test"
                          and corpus[p.index].modality == modality]
            if test_pairs:
                row[column] = qa_eval(model, corpus, test_pairs, vocab).accuracy

    if paradigm == "video_only":
        row.update({column: None for column in IMAGE_COLUMNS})
    return row


def ablate_paradigms(cfg, corpus: Corpus, vocab: Vocabulary, seeds: Optional[Sequence[int]] = None,
                     paradigms: Sequence[str] = PARADIGM_ROWS, with_qa: bool = True) -> pd.DataFrame:
    """
    Train every paradigm with the same budget and seeds and evaluate on the
    held-out split. Cells are averaged over seeds; absent entries are NaN.
    ``with_qa`` adds QA fine-tuning and evaluation per run.
    """
    if not corpus.indices("image") or not corpus.indices("video"):
        raise ArgumentError("paradigm ablation needs both image and video data")
    seeds = list(seeds if seeds is not None else cfg.eval.ablation_seeds)
    budget_steps = matched_budget(cfg, corpus)
    logger.info(f"Every paradigm trains for {budget_steps} steps")

    rows = {}
    for paradigm in paradigms:
        logger.info("=" * 60)
        logger.info(f"ABLATION: {paradigm} over seeds {seeds}")
        logger.info("=" * 60)
        runs = [_paradigm_row(cfg, corpus, vocab, paradigm, seed, with_qa, budget_steps) for seed in seeds]
        rows[paradigm] = {column: _mean([r[column] for r in runs]) for column in TABLE_COLUMNS}

    table = pd.DataFrame.from_dict(rows, orient="index", columns=list(TABLE_COLUMNS))
    table.index.name = "paradigm"
    return table


def _mean(values: List[Optional[float]]) -> float:
    present = [v for v in values if v is not None]
    return float(np.mean(present)) if present else float("nan")


def format_table(table: pd.DataFrame) -> str:
    return table.to_string(na_rep="-", float_format=lambda x: f"{x:.4f}")


def render_table(table: pd.DataFrame, title: str = "Pretraining paradigms") -> Table:
    """rich Table for console output, absent cells shown as '-'."""
    rich_table = Table(title=title)
    rich_table.add_column(table.index.name or "", style="bold")
    for column in table.columns:
        rich_table.add_column(column, justify="right")
    for name, row in table.iterrows():
        rich_table.add_row(str(name), *["-" if pd.isna(v) else f"{v:.4f}" for v in row])
    return rich_table


def export_curves(metrics: Sequence[Dict], path: Union[str, Path],
                  series: Sequence[str] = ("loss_total", "loss_univlc", "loss_vlm", "loss_lm", "lr")) -> Path:
    """Plot-data CSV with one (series, x, y) row per metric point."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame(list(metrics))
    if frame.empty:
        pd.DataFrame(columns=["series", "x", "y"]).to_csv(path, index=False)
        return path
    present = [s for s in series if s in frame.columns]
    long = frame.melt(id_vars=["step"], value_vars=present, var_name="series", value_name="y")
    long = long.rename(columns={"step": "x"})[["series", "x", "y"]]
    long.to_csv(path, index=False)
    return path
