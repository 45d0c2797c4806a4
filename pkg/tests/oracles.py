"""Independent reference computations used by the tests."""

import itertools
import math

import numpy as np


def collapse(path, blank):
    out, prev = [], None
    for k in path:
        if k != prev and k != blank:
            out.append(k)
        prev = k
    return tuple(out)


def brute_ctc_nll(probs, label, blank):
    """-log of the summed probability of every frame path that collapses to `label`."""
    T, C = probs.shape
    total = 0.0
    for path in itertools.product(range(C), repeat=T):
        if collapse(path, blank) == tuple(label):
            total += math.prod(probs[t, k] for t, k in enumerate(path))
    return -math.log(total) if total > 0 else math.inf


def random_ctc_instance(rng, max_T=5, max_alpha=4, max_len=3):
    """A feasible (probs, label, blank) triple in double precision."""
    while True:
        T = int(rng.integers(1, max_T + 1))
        A = int(rng.integers(1, max_alpha + 1))
        L = int(rng.integers(1, max_len + 1))
        label = [int(x) for x in rng.integers(0, A, size=L)]
        repeats = sum(a == b for a, b in zip(label, label[1:]))
        if L + repeats <= T:
            break
    logits = rng.normal(scale=2.0, size=(T, A + 1))
    probs = np.exp(logits - logits.max(axis=1, keepdims=True))
    probs /= probs.sum(axis=1, keepdims=True)
    return probs, label, A


def softmax(z):
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)
