"""Inference helpers: batched free-running decode and semantic-decoder search."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from ..charset import BOS, EOS, PAD, UKN, decode_ids
from .model import VSDN


def as_batch(images) -> torch.Tensor:
    """uint8 or float arrays (N, H, W) to a float tensor in [0, 1]."""
    if isinstance(images, torch.Tensor):
        return images.float() / 255.0 if images.dtype == torch.uint8 else images
    arr = np.asarray(images)
    if arr.dtype == np.uint8:
        return torch.from_numpy(arr.astype(np.float32) / 255.0)
    return torch.from_numpy(arr.astype(np.float32))


@dataclass
class Predictions:
    final: list[str]
    vd: list[str]
    ctc: list[str]


@torch.no_grad()
def predict(model: VSDN, images, batch_size: int = 256) -> Predictions:
    was_training = model.training
    model.eval()
    dtype = next(model.parameters()).dtype
    final, vd, ctc = [], [], []
    try:
        for i in range(0, len(images), batch_size):
            x = as_batch(images[i:i + batch_size]).to(dtype)
            tr = model.decode(x)
            final += tr.predictions()
            vd += tr.vd_predictions()
            ctc += tr.coarse
    finally:
        model.train(was_training)
    return Predictions(final, vd, ctc)


@torch.no_grad()
def semantic_greedy(model: VSDN, texts, batch_size: int = 512) -> list[str]:
    """Word correction by the semantic module alone, feeding back its own argmax."""
    out = []
    for i in range(0, len(texts), batch_size):
        chunk = list(texts[i:i + batch_size])
        s, e_w = model.sd_init(model.semantic_encode(chunk))
        y = torch.full((len(chunk),), BOS, dtype=torch.long)
        syms = []
        for _ in range(model.cfg.t_max):
            s = model.sd_step(s, y, e_w)
            y = model.sd_classify(s).argmax(-1)
            syms.append(y)
            if bool((torch.stack(syms, 1) == EOS).any(1).all()):
                break
        out += [decode_ids(row) for row in torch.stack(syms, 1).tolist()]
    return out


@dataclass(frozen=True)
class Hypothesis:
    text: str
    score: float  # mean log-probability per emitted symbol (EoS included)
    finished: bool


@torch.no_grad()
def semantic_beam_search(model: VSDN, text: str, width: int = 5) -> list[Hypothesis]:
    """Beam search over the SD classifier; returned hypotheses are sorted by score, best first.

    Beams are expanded by cumulative log-probability and finish at EoS; the
    final ranking uses length-normalized scores. PAD and UKN are never expanded.
    """
    s, e_w = model.sd_init(model.semantic_encode([text]))
    beams = [((), 0.0)]
    states = s
    finished: list[Hypothesis] = []
    for _ in range(model.cfg.t_max):
        n = len(beams)
        last = torch.tensor([b[0][-1] if b[0] else BOS for b in beams], dtype=torch.long)
        states = model.sd_step(states, last, e_w.expand(n, -1))
        logp = torch.log_softmax(model.sd_classify(states), dim=-1).double()
        logp[:, PAD] = -np.inf
        logp[:, UKN] = -np.inf
        cum = torch.tensor([b[1] for b in beams], dtype=torch.float64)[:, None] + logp
        flat = cum.flatten()
        k = min(width, int(torch.isfinite(flat).sum()))
        top = torch.topk(flat, k)
        new_beams, keep = [], []
        for score, idx in zip(top.values.tolist(), top.indices.tolist()):
            b, c = divmod(idx, logp.shape[1])
            toks = beams[b][0] + (c,)
            if c == EOS:
                finished.append(Hypothesis(decode_ids(toks), score / len(toks), True))
            else:
                new_beams.append((toks, score))
                keep.append(b)
        if len(finished) >= width or not new_beams:
            break
        beams = new_beams
        states = states[keep]
    else:
        for toks, score in beams:
            finished.append(Hypothesis(decode_ids(toks), score / len(toks), False))
    if not finished:
        for toks, score in beams:
            finished.append(Hypothesis(decode_ids(toks), score / len(toks), False))
    best: dict[str, Hypothesis] = {}
    for h in finished:
        if h.text not in best or h.score > best[h.text].score:
            best[h.text] = h
    return sorted(best.values(), key=lambda h: -h.score)
