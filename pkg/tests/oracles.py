"""
Brute-force reference implementations used by the tests.

Nothing here imports the loss or ranking code under test; every reference is a
plain loop over explicit index sets in float64.
"""

import math
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence

import numpy as np
import torch


@dataclass
class OracleReport:
    name: str
    max_abs: float
    max_rel: float
    tolerance: float
    relative: bool = False

    @property
    def passed(self) -> bool:
        return (self.max_rel if self.relative else self.max_abs) <= self.tolerance


def compare(name: str, actual, expected, tolerance: float, relative: bool = False) -> OracleReport:
    a = np.asarray(torch.as_tensor(actual).detach().double().cpu(), dtype=np.float64).ravel()
    e = np.asarray(torch.as_tensor(expected).detach().double().cpu(), dtype=np.float64).ravel()
    diff = np.abs(a - e)
    scale = max(float(np.abs(e).max(initial=0.0)), 1e-12)
    max_abs = float(diff.max(initial=0.0))
    return OracleReport(name, max_abs, max_abs / scale, tolerance, relative)


def oracle_univlc(v, w, y, bank_v, bank_w, bank_y, tau: float,
                  key_v=None, key_w=None, normalize: bool = True) -> float:
    """
    Double-loop label-aware contrastive loss.

    Keys are the batch keys (``key_v``/``key_w``, defaulting to v/w) followed by
    the bank entries; positives of sample i are the keys with label y_i.
    """
    v, w = np.asarray(v, dtype=np.float64), np.asarray(w, dtype=np.float64)
    key_v = v if key_v is None else np.asarray(key_v, dtype=np.float64)
    key_w = w if key_w is None else np.asarray(key_w, dtype=np.float64)
    keys_v = list(key_v) + list(np.asarray(bank_v, dtype=np.float64))
    keys_w = list(key_w) + list(np.asarray(bank_w, dtype=np.float64))
    labels = [int(t) for t in y] + [int(t) for t in bank_y]

    def one_direction(queries, keys) -> List[float]:
        losses = []
        for i, query in enumerate(queries):
            logits = [float(np.dot(query, key)) / tau for key in keys]
            top = max(logits)
            log_denominator = top + math.log(sum(math.exp(s - top) for s in logits))
            positives = [k for k in range(len(keys)) if labels[k] == int(y[i])]
            total = 0.0
            for k in positives:
                total -= logits[k] - log_denominator
            losses.append(total / len(positives) if normalize else total)
        return losses

    v2t = one_direction(v, keys_w)
    t2v = one_direction(w, keys_v)
    return 0.5 * (sum(v2t) / len(v2t) + sum(t2v) / len(t2v))


def oracle_infonce(v, w, tau: float) -> float:
    """Textbook symmetric InfoNCE over the in-batch pairs."""
    v, w = np.asarray(v, dtype=np.float64), np.asarray(w, dtype=np.float64)
    logits = v @ w.T / tau
    def nll(matrix):
        shifted = matrix - matrix.max(axis=1, keepdims=True)
        log_softmax = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        return -np.mean(np.diag(log_softmax))
    return 0.5 * (nll(logits) + nll(logits.T))


def fd_gradient(f: Callable[[], torch.Tensor], x: torch.Tensor, eps: float = 1e-5,
                indices: Optional[Sequence[int]] = None) -> torch.Tensor:
    """
    Central differences of the scalar ``f()`` w.r.t. the entries of ``x``
    (perturbed in place). ``indices`` restricts the estimate to those flat
    positions; the others stay zero.
    """
    grad = torch.zeros_like(x, dtype=torch.float64)
    flat = x.data.view(-1)
    positions = range(flat.numel()) if indices is None else indices
    with torch.no_grad():
        for i in positions:
            original = float(flat[i])
            flat[i] = original + eps
            plus = float(f())
            flat[i] = original - eps
            minus = float(f())
            flat[i] = original
            grad.view(-1)[i] = (plus - minus) / (2 * eps)
    return grad


@torch.no_grad()
def oracle_rank(model, frames: torch.Tensor, texts, vocab, direction: str = "v2t") -> List[List[int]]:
    """Score every (visual, text) pair one at a time through the alignment decoder and sort."""
    def p_vlm(i: int, j: int) -> float:
        text = type(texts)(texts.ids[j:j + 1].clone(), texts.mask[j:j + 1])
        text.ids[:, 0] = vocab.enc_id
        visual = model.encode_visual(frames[i:i + 1])
        logits = model.align.match_head(model.align.fuse(text, visual).enc_vec)[0]
        return float(torch.softmax(logits, dim=0)[0])

    n_visual, n_text = frames.shape[0], texts.ids.shape[0]
    rankings = []
    if direction == "v2t":
        for i in range(n_visual):
            scores = [p_vlm(i, j) for j in range(n_text)]
            rankings.append(sorted(range(n_text), key=lambda j: -scores[j]))
    else:
        for j in range(n_text):
            scores = [p_vlm(i, j) for i in range(n_visual)]
            rankings.append(sorted(range(n_visual), key=lambda i: -scores[i]))
    return rankings
