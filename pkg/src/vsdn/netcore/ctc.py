"""CTC alignment loss (log-space forward recursion) and greedy decoding."""

from __future__ import annotations

import numpy as np
import torch

from ..charset import CHARSET, CTC_BLANK, N_VIS, ctc_min_length, encode

NEG = -1e30  # finite stand-in for log(0) keeps logsumexp gradients NaN-free


class CTCInfeasibleError(ValueError):
    pass


def _check_feasible(T: int, label_ids) -> None:
    need = len(label_ids) + sum(1 for a, b in zip(label_ids, label_ids[1:]) if a == b)
    if need > T:
        raise CTCInfeasibleError(
            f"label of length {len(label_ids)} needs {need} frames but only {T} are available")


def ctc_nll(log_probs: torch.Tensor, targets, blank: int = CTC_BLANK) -> torch.Tensor:
    """Per-sample negative log-likelihood, shape (B,).

    log_probs: (B, T, C) log-softmax outputs. targets: list of label id lists.
    Raises CTCInfeasibleError when a label cannot be aligned to T frames.
    """
    B, T, C = log_probs.shape
    lengths = [len(t) for t in targets]
    for t in targets:
        _check_feasible(T, t)
    L = max(lengths) if lengths else 0
    S = 2 * L + 1
    dev = log_probs.device
    ext = torch.full((B, S), blank, dtype=torch.long, device=dev)
    for b, t in enumerate(targets):
        if t:
            ext[b, 1:2 * len(t):2] = torch.as_tensor(t, dtype=torch.long, device=dev)
    lp = log_probs.gather(2, ext[:, None, :].expand(B, T, S))  # (B, T, S)

    skip = torch.zeros((B, S), dtype=torch.bool, device=dev)
    if S > 3:
        skip[:, 3::2] = ext[:, 3::2] != ext[:, 1:-2:2]
    neg = lp.new_full((B, 1), NEG)
    neg2 = lp.new_full((B, 2), NEG)

    init = lp.new_full((B, S), NEG)
    init[:, 0] = lp[:, 0, 0]
    if S > 1:
        init[:, 1] = lp[:, 0, 1]
    alpha = init
    for t in range(1, T):
        stay = alpha
        step = torch.cat([neg, alpha[:, :-1]], dim=1)
        jump = torch.cat([neg2, alpha[:, :-2]], dim=1).masked_fill(~skip, NEG)
        alpha = torch.logsumexp(torch.stack([stay, step, jump]), dim=0) + lp[:, t]

    last = torch.as_tensor([2 * n for n in lengths], device=dev)
    end_blank = alpha.gather(1, last[:, None]).squeeze(1)
    prev = alpha.gather(1, (last - 1).clamp(min=0)[:, None]).squeeze(1)
    prev = torch.where(last > 0, prev, torch.full_like(prev, NEG))
    return -torch.logaddexp(end_blank, prev)


def ctc_loss(P_c, label: str) -> float:
    """-log p(label | P_c) for a single (T, 37) matrix of per-frame probabilities."""
    P = torch.as_tensor(np.asarray(P_c), dtype=torch.float64)
    ids = encode(label)
    with torch.no_grad():
        return float(ctc_nll(torch.log(P)[None], [ids])[0])


def ctc_greedy_ids(frame_argmax, blank: int = CTC_BLANK) -> list[int]:
    out, prev = [], None
    for k in frame_argmax:
        k = int(k)
        if k != prev and k != blank:
            out.append(k)
        prev = k
    return out


def ctc_greedy_decode(P_c) -> str:
    """Per-frame argmax, merge repeats, drop blanks."""
    arr = np.asarray(P_c.detach().cpu() if isinstance(P_c, torch.Tensor) else P_c)
    return "".join(CHARSET[i] for i in ctc_greedy_ids(arr.argmax(axis=-1)) if i < N_VIS)


def ctc_greedy_batch(log_probs: torch.Tensor) -> list[str]:
    best = log_probs.argmax(dim=-1).cpu().numpy()
    return ["".join(CHARSET[i] for i in ctc_greedy_ids(row)) for row in best]


def ctc_feasible(label: str, T: int) -> bool:
    return ctc_min_length(label) <= T
