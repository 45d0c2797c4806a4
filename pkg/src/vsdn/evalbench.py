"""Word accuracy, in/out-of-vocabulary splits, component analysis, ablations, attention export."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .charset import EOS, PAD, UKN, decode_ids
from .glyphforge import Dataset, Vocabulary, save_image
from .netcore import VSDN, LossWeights, ModelConfig
from .netcore.decoding import as_batch, predict, semantic_beam_search, semantic_greedy
from .trainkit import TrainConfig, config_digest, load_model, train_joint

log = logging.getLogger(__name__)

_NON_ALNUM = re.compile(r"[^0-9a-z]")
SPLITS = ("invoc", "outvoc", "total")


def normalize(text: str) -> str:
    return _NON_ALNUM.sub("", text.lower())


def word_accuracy(predictions, labels) -> float:
    if len(predictions) != len(labels):
        raise ValueError(f"{len(predictions)} predictions for {len(labels)} labels")
    if not labels:
        return 0.0
    hits = sum(normalize(p) == normalize(t) for p, t in zip(predictions, labels))
    return hits / len(labels)


def split_by_vocab(labels, vocab) -> tuple[list[int], list[int]]:
    words = {normalize(w) for w in (vocab or ())}
    inv, outv = [], []
    for i, lab in enumerate(labels):
        (inv if normalize(lab) in words else outv).append(i)
    return inv, outv


# ----------------------------------------------------------------------------
# semantic top-k


def semantic_candidates(model: VSDN, text: str, width: int = 5) -> list[str]:
    """Ranked corrections of `text`: the greedy decode first, then beam hypotheses by score."""
    out = semantic_greedy(model, [text])
    for h in semantic_beam_search(model, text, width):
        if h.text not in out:
            out.append(h.text)
    return out


def semantic_topk_hits(model: VSDN, coarse, labels, ks=(1, 3, 5)) -> dict[int, list[bool]]:
    width = max(max(ks), 5)
    hits = {k: [] for k in ks}
    greedy = semantic_greedy(model, list(coarse))
    with torch.no_grad():
        for g, text, lab in zip(greedy, coarse, labels):
            cands = [g] + [h.text for h in semantic_beam_search(model, text, width) if h.text != g]
            target = normalize(lab)
            norm = [normalize(c) for c in cands]
            for k in ks:
                hits[k].append(target in norm[:k])
    return hits


def topk_semantic(model, images, labels, k: int) -> float:
    """Top-k word accuracy of the semantic decoder seeded by the CTC coarse string."""
    if k < 1:
        raise ValueError("k must be >= 1")
    model = load_model(model) if isinstance(model, (str, Path)) else model
    coarse = predict(model, images).ctc
    hits = semantic_topk_hits(model, coarse, labels, (k,))[k]
    return sum(hits) / len(hits) if hits else 0.0


# ----------------------------------------------------------------------------
# reports


@dataclass
class EvalReport:
    counts: dict[str, int]
    hits: dict[str, dict[str, int]]  # component -> split -> number correct
    config_digest: str = ""
    dataset_digest: str = ""
    has_vocab_split: bool = True

    @property
    def accuracy(self) -> dict[str, dict[str, float]]:
        return {comp: {s: (h[s] / self.counts[s] if self.counts[s] else 0.0) for s in h}
                for comp, h in self.hits.items()}

    def acc(self, component: str = "final", split: str = "total") -> float:
        return self.accuracy[component][split]

    def splits(self) -> tuple[str, ...]:
        return SPLITS if self.has_vocab_split else ("total",)

    def to_tsv(self) -> str:
        lines = ["component\t" + "\t".join(self.splits())]
        lines.append("count\t" + "\t".join(str(self.counts[s]) for s in self.splits()))
        for comp, accs in self.accuracy.items():
            lines.append(comp + "\t" + "\t".join(f"{accs[s]:.4f}" for s in self.splits()))
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        cols = self.splits()
        head = f"{'component':<10}" + "".join(f"{c:>10}" for c in cols)
        rows = [head, "-" * len(head),
                f"{'images':<10}" + "".join(f"{self.counts[c]:>10d}" for c in cols)]
        for comp, accs in self.accuracy.items():
            rows.append(f"{comp:<10}" + "".join(f"{100 * accs[c]:>10.1f}" for c in cols))
        rows.append(f"config {self.config_digest}  dataset {self.dataset_digest[:16]}")
        return "\n".join(rows) + "\n"

    def to_dict(self) -> dict:
        return dataclasses.asdict(self) | {"accuracy": self.accuracy}

    def write(self, out_dir) -> Path:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "report.tsv").write_text(self.to_tsv())
        (out_dir / "report.txt").write_text(self.to_text())
        (out_dir / "report.json").write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))
        return out_dir


def _split_hits(correct: list[bool], inv, outv) -> dict[str, int]:
    if inv is None:
        return {"total": sum(correct)}
    return {"invoc": sum(correct[i] for i in inv), "outvoc": sum(correct[i] for i in outv),
            "total": sum(correct)}


def evaluate_model(model, images, labels, train_vocab: Vocabulary | None = None,
                   topk=(1, 3, 5), dataset_digest: str = "") -> EvalReport:
    """Free-running evaluation of every supervised component.

    Components: final (fused head), vd (VD head argmax), ctc (greedy coarse
    string) and sd@k (semantic decoder top-k seeded by the coarse string).
    Without `train_vocab` only the total split is meaningful.
    """
    model = load_model(model) if isinstance(model, (str, Path)) else model
    labels = list(labels)
    preds = predict(model, images)
    if train_vocab is not None:
        inv, outv = split_by_vocab(labels, train_vocab)
    else:
        inv = outv = None

    def correct(ps):
        return [normalize(p) == normalize(t) for p, t in zip(ps, labels)]

    hits = {"final": _split_hits(correct(preds.final), inv, outv),
            "vd": _split_hits(correct(preds.vd), inv, outv),
            "ctc": _split_hits(correct(preds.ctc), inv, outv)}
    if model.cfg.has_semantic and topk:
        sd = semantic_topk_hits(model, preds.ctc, labels, tuple(topk))
        for k in topk:
            hits[f"sd@{k}"] = _split_hits(sd[k], inv, outv)
    counts = {"total": len(labels)}
    if inv is not None:
        counts = {"invoc": len(inv), "outvoc": len(outv), "total": len(labels)}
    return EvalReport(counts, hits, config_digest(model.cfg.to_dict()), dataset_digest,
                      has_vocab_split=train_vocab is not None)


def evaluate_dataset(model, dataset: Dataset, train_vocab=None, split: str = "test", topk=(1, 3, 5)):
    images, labels = dataset.subset(split)
    return evaluate_model(model, images, labels, train_vocab, topk, dataset.manifest.digest)


# ----------------------------------------------------------------------------
# ablations

LOSS_TERM_ROWS = [  # (name, use L_v, use L_s)
    ("no_Lv_no_Ls", False, False),
    ("Lv_only", True, False),
    ("Ls_only", False, True),
    ("Lv_Ls", True, True),
]


def ablation_variants(suite: str, base: ModelConfig, train: TrainConfig, pretrained=None):
    """(name, model config, train config) for every row of `suite`."""
    mc = dataclasses.replace
    train = mc(train, sem_init=None, freeze_semantic=False)
    w = train.loss_weights
    aster = mc(base, coupled_baseline=True, feed_prev_symbol=True)
    aster_star = mc(base, coupled_baseline=True, feed_prev_symbol=False)
    vsdn = mc(base, coupled_baseline=False)
    if suite == "loss_terms":
        return [(name, vsdn, mc(train, loss_weights=LossWeights(w.ctc, w.v if lv else 0.0,
                                                                  w.s if ls else 0.0, w.f)))
                for name, lv, ls in LOSS_TERM_ROWS]
    if suite == "query_mode":
        return [("query_prev_visual", mc(vsdn, query_mode="previous_visual"), train),
                ("query_semantic", mc(vsdn, query_mode="semantic"), train)]
    if suite == "coupled_baseline":
        return [("aster", aster, train), ("aster_star", aster_star, train), ("vsdn", vsdn, train)]
    if suite == "vocab_reliance":
        if pretrained is None:
            raise ValueError("vocab_reliance needs a pre-trained semantic checkpoint")
        return [("aster", aster, train), ("aster_star", aster_star, train), ("vsdn", vsdn, train),
                ("vsdn_pretrained", vsdn, mc(train, sem_init=str(pretrained),
                                              freeze_semantic=True))]
    raise ValueError(f"unknown ablation suite {suite!r}")


ABLATION_SUITES = ("loss_terms", "query_mode", "coupled_baseline", "vocab_reliance")


@dataclass
class AblationReport:
    suite: str
    rows: list[tuple[str, EvalReport]] = field(default_factory=list)
    dataset_digest: str = ""

    def report(self, name: str) -> EvalReport:
        return dict(self.rows)[name]

    def to_text(self) -> str:
        comps = ["final", "ctc", "vd", "sd@1", "sd@3", "sd@5"]
        head = (f"{'variant':<18}{'InVoc':>8}{'OutVoc':>8}{'Total':>8}"
                + "".join(f"{c:>8}" for c in comps[1:]))
        lines = [f"ablation: {self.suite}  dataset {self.dataset_digest[:16]}", head,
                 "-" * len(head)]
        for name, r in self.rows:
            a = r.accuracy
            cells = [a["final"].get(s, 0.0) for s in SPLITS]
            cells += [a[c]["total"] if c in a else float("nan") for c in comps[1:]]
            lines.append(f"{name:<18}" + "".join(f"{100 * v:>8.1f}" for v in cells))
        return "\n".join(lines) + "\n"

    def to_tsv(self) -> str:
        lines = ["variant\tcomponent\tsplit\tcount\taccuracy"]
        for name, r in self.rows:
            for comp, accs in r.accuracy.items():
                for s, v in accs.items():
                    lines.append(f"{name}\t{comp}\t{s}\t{r.counts[s]}\t{v:.6f}")
        return "\n".join(lines) + "\n"


def run_ablation(suite: str, dataset: Dataset, base: ModelConfig, train: TrainConfig,
                 run_dir=None, pretrained=None, topk=(1, 3, 5)) -> AblationReport:
    """Train and evaluate every variant of `suite` on the same data and seed."""
    variants = ablation_variants(suite, base, train, pretrained)
    report = AblationReport(suite, dataset_digest=dataset.manifest.digest)
    for name, mcfg, tcfg in variants:
        log.info("ablation %s: training %s", suite, name)
        sub = Path(run_dir) / name if run_dir else None
        res = train_joint(dataset, mcfg, tcfg, run_dir=sub)
        rep = evaluate_dataset(res.model, dataset, dataset.manifest.vocab, topk=topk)
        rep.config_digest = config_digest(mcfg.to_dict(), tcfg.to_dict())
        if sub:
            rep.write(sub)
        report.rows.append((name, rep))
    if run_dir:
        Path(run_dir, f"ablation_{suite}.txt").write_text(report.to_text())
        Path(run_dir, f"ablation_{suite}.tsv").write_text(report.to_tsv())
    return report


# ----------------------------------------------------------------------------
# attention maps


def attention_strip(alpha: np.ndarray, width: int, height: int = 8) -> np.ndarray:
    """One step's attention spread across the image width, intensity proportional to alpha."""
    T = len(alpha)
    cols = np.minimum((np.arange(width) * T) // width, T - 1)
    peak = float(alpha.max()) or 1.0
    row = np.round(255.0 * alpha[cols] / peak).astype(np.uint8)
    return np.tile(row, (height, 1))


_SPECIAL = {EOS: "<eos>", UKN: "<ukn>", PAD: "<pad>"}


@torch.no_grad()
def export_attention(model, image, out_dir, image_format: str = "png") -> dict:
    """Write strip_XX images, an overlay and attention.csv for one free-running decode."""
    model = load_model(model) if isinstance(model, (str, Path)) else model
    model.eval()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    x = as_batch(np.asarray(image)[None]).to(next(model.parameters()).dtype)
    trace = model.decode(x)
    n = trace.emitted_lengths()[0]
    alpha = trace.alpha[0, :n].double().numpy()
    symbols = trace.symbols[0, :n].tolist()
    img = np.asarray(image)
    img = img if img.dtype == np.uint8 else np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)
    H, W = img.shape

    strips = []
    for t in range(n):
        strip = attention_strip(alpha[t], W)
        path = out_dir / f"strip_{t:02d}.{image_format}"
        save_image(path, strip)
        strips.append(path)
    rows = [img]
    for t in range(n):
        heat = attention_strip(alpha[t], W, H).astype(np.float64) / 255.0
        rows.append(np.round(img * (0.25 + 0.75 * heat)).astype(np.uint8))
    overlay = out_dir / f"overlay.{image_format}"
    save_image(overlay, np.vstack(rows))

    csv_path = out_dir / "attention.csv"
    with open(csv_path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["step", "symbol"] + [f"a{i}" for i in range(alpha.shape[1])])
        for t in range(n):
            sym = _SPECIAL.get(symbols[t]) or decode_ids([symbols[t]], stop_at_eos=False)
            wr.writerow([t, sym] + [repr(float(v)) for v in alpha[t]])
    return {"strips": strips, "overlay": overlay, "csv": csv_path,
            "prediction": trace.predictions()[0]}
