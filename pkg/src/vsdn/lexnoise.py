"""Character confusion matrix and corrupted-word pairs for word-correction pre-training."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .charset import CHAR_TO_ID, CHARSET, N_VIS
from .glyphforge import GlyphFont, Vocabulary, default_font

DEFAULT_TEMPERATURE = 3.0
OPS = ("replace", "insert", "delete", "none")


@dataclass
class SimilarityMatrix:
    S: np.ndarray  # row-stochastic confusion distribution
    S0: np.ndarray  # cosine similarities, zero diagonal
    k: float = DEFAULT_TEMPERATURE
    source: str = ""
    charset: str = CHARSET

    def row(self, ch: str) -> np.ndarray:
        return self.S[self.charset.index(ch)]


def build_similarity(weights, k: float = DEFAULT_TEMPERATURE, source: str = "",
                     charset: str = CHARSET) -> SimilarityMatrix:
    """Cosine similarity between classifier rows, diagonal zeroed, then a row softmax at temperature k.

    `weights` has one row per character of `charset` (blank excluded).
    """
    W = np.asarray(weights, dtype=np.float64)
    if W.ndim != 2 or W.shape[0] < 2:
        raise ValueError(f"need a (C >= 2) x d weight matrix, got shape {W.shape}")
    if W.shape[0] != len(charset):
        raise ValueError(f"{W.shape[0]} weight rows for a {len(charset)}-character charset")
    if not np.all(np.isfinite(W)):
        bad = np.where(~np.all(np.isfinite(W), axis=1))[0][0]
        raise ValueError(f"non-finite weights in row for {charset[bad]!r}")
    norms = np.linalg.norm(W, axis=1)
    if np.any(norms == 0):
        bad = int(np.where(norms == 0)[0][0])
        raise ValueError(f"weight row for {charset[bad]!r} has zero norm")
    unit = W / norms[:, None]
    S0 = unit @ unit.T
    S0 = 0.5 * (S0 + S0.T)
    np.fill_diagonal(S0, 0.0)
    z = k * S0
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    S = e / e.sum(axis=1, keepdims=True)
    return SimilarityMatrix(S, S0, float(k), source, charset)


def glyph_similarity(font: GlyphFont | None = None, k: float = DEFAULT_TEMPERATURE) -> SimilarityMatrix:
    """Proxy for the CTC classifier weights: flattened glyph bitmaps."""
    font = font or default_font()
    W = np.stack([font.bitmaps[c].ravel().astype(np.float64) for c in CHARSET])
    return build_similarity(W, k, source=f"glyphs:{font.name}")


def save_similarity(sim: SimilarityMatrix, path) -> None:
    lines = [
        "# vsdn-similarity/1",
        f"charset {sim.charset}",
        f"k {sim.k!r}",
        f"source {sim.source}",
        "S",
    ]
    lines += [" ".join(repr(float(v)) for v in row) for row in sim.S]
    lines.append("S0")
    lines += [" ".join(repr(float(v)) for v in row) for row in sim.S0]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_similarity(path) -> SimilarityMatrix:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != "# vsdn-similarity/1":
        raise ValueError(f"{path} is not a similarity matrix file")
    fields = {}
    i = 1
    while lines[i] != "S":
        key, _, value = lines[i].partition(" ")
        fields[key] = value
        i += 1
    n = len(fields["charset"])
    S = np.array([[float(v) for v in ln.split()] for ln in lines[i + 1:i + 1 + n]])
    S0 = np.array([[float(v) for v in ln.split()] for ln in lines[i + 2 + n:i + 2 + 2 * n]])
    return SimilarityMatrix(S, S0, float(fields["k"]), fields.get("source", ""), fields["charset"])


@dataclass(frozen=True)
class CorruptionConfig:
    p_replace: float = 0.40
    p_insert: float = 0.10
    p_delete: float = 0.15
    seed: int = 0

    def __post_init__(self):
        ps = (self.p_replace, self.p_insert, self.p_delete)
        if min(ps) < 0 or sum(ps) > 1 + 1e-12:
            raise ValueError(f"invalid corruption probabilities {ps}")


@dataclass(frozen=True)
class CorrectionPair:
    corrupted: str
    target: str
    op: str = "none"
    position: int = -1


def _sample_char(sim: SimilarityMatrix, ch: str, rng: np.random.Generator) -> str:
    row = sim.S[CHAR_TO_ID[ch]]
    return CHARSET[int(rng.choice(N_VIS, p=row))]


def corrupt_word(word: str, sim: SimilarityMatrix, cfg: CorruptionConfig,
                 rng: np.random.Generator) -> CorrectionPair:
    """Apply at most one edit to `word`.

    Replacement characters are drawn from the S row of the replaced
    character; since the diagonal of S is positive a replacement can
    return the same character. Length-1 words are never deleted, their
    deletion mass goes to replacement.
    """
    if not word:
        raise ValueError("cannot corrupt an empty word")
    p_r, p_i, p_d = cfg.p_replace, cfg.p_insert, cfg.p_delete
    if len(word) == 1:
        p_r, p_d = p_r + p_d, 0.0
    u = rng.uniform()
    n = len(word)
    if u < p_r:
        pos = int(rng.integers(n))
        new = _sample_char(sim, word[pos], rng)
        return CorrectionPair(word[:pos] + new + word[pos + 1:], word, "replace", pos)
    if u < p_r + p_i:
        pos = int(rng.integers(n + 1))
        neighbour = word[pos - 1] if pos > 0 else word[0]
        new = _sample_char(sim, neighbour, rng)
        return CorrectionPair(word[:pos] + new + word[pos:], word, "insert", pos)
    if u < p_r + p_i + p_d:
        pos = int(rng.integers(n))
        return CorrectionPair(word[:pos] + word[pos + 1:], word, "delete", pos)
    return CorrectionPair(word, word, "none", -1)


def make_correction_corpus(vocab: Vocabulary, pairs_per_word: int, sim: SimilarityMatrix,
                           cfg: CorruptionConfig | None = None, seed: int = 0) -> list[CorrectionPair]:
    """`pairs_per_word` corruptions of every word; pair i draws from its own (seed, i) stream."""
    if len(vocab) == 0:
        raise ValueError("vocabulary is empty")
    if pairs_per_word < 1:
        raise ValueError("pairs_per_word must be >= 1")
    cfg = cfg or CorruptionConfig(seed=seed)
    pairs = []
    idx = 0
    for word in vocab:
        for _ in range(pairs_per_word):
            rng = np.random.default_rng([seed, idx])
            pairs.append(corrupt_word(word, sim, cfg, rng))
            idx += 1
    return pairs


def expected_normalized_edit_distance(words, sim: SimilarityMatrix, cfg: CorruptionConfig) -> float:
    """Closed-form mean of edit_distance(corrupted, target) / len(target) over uniformly drawn words."""
    total = 0.0
    diag = np.diag(sim.S)
    for w in words:
        n = len(w)
        p_r, p_i, p_d = cfg.p_replace, cfg.p_insert, cfg.p_delete
        if n == 1:
            p_r, p_d = p_r + p_d, 0.0
        p_same = float(np.mean([diag[CHAR_TO_ID[c]] for c in w]))
        total += (p_r * (1.0 - p_same) + p_i + p_d) / n
    return total / len(words)


def edit_distance(a: str, b: str) -> int:
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def write_corpus(pairs, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for p in pairs:
            fh.write(f"{p.corrupted}\t{p.target}\t{p.op}\n")


def read_corpus(path) -> list[CorrectionPair]:
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                corrupted, target, op = line.rstrip("\n").split("\t")
                pairs.append(CorrectionPair(corrupted, target, op))
    return pairs
