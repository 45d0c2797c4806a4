"""Command-line entry point.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
Progress goes to stderr; machine-readable results go to stdout as JSON.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .charset import ctc_min_length
from .config import ConfigError, RunConfig, run_root
from .glyphforge import (Vocabulary, build_vocab_subset, bundled_words, load_image,
                         load_word_list, merge_vocabularies, random_digit_words, read_dataset,
                         reliance_dataset, synthesize_dataset, write_dataset)
from .lexnoise import (build_similarity, glyph_similarity, load_similarity, make_correction_corpus,
                       save_similarity, write_corpus)
from .netcore import load_checkpoint

log = logging.getLogger("vsdn")


class UsageError(Exception):
    pass


def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj, sort_keys=True, default=str) + "\n")
    sys.stdout.flush()


def _run_dir(args, cfg: RunConfig, command: str) -> Path:
    out = Path(args.out) if args.out else run_root() / f"{command}-{cfg.digest()}"
    out.mkdir(parents=True, exist_ok=True)
    cfg.write_echo(out)
    return out


def _load_words(source: str, cfg: RunConfig) -> Vocabulary:
    if source == "bundled":
        vocab = bundled_words(cfg["min_len"], cfg["max_len"])
        if cfg["digit_words"]:
            # fixed seed: the base list must not depend on the run seed
            digits = random_digit_words(cfg["digit_words"], 0, cfg["min_len"],
                                        max(cfg["min_len"], min(6, cfg["max_len"])))
            vocab = merge_vocabularies(vocab, digits)
    else:
        vocab = load_word_list(source, cfg["min_len"], cfg["max_len"])
    fits = tuple(w for w in vocab if len(w) < cfg["t_max"] and ctc_min_length(w) <= cfg["t_max"])
    if len(fits) < len(vocab):
        log.info("dropped %d words that do not fit t_max=%d", len(vocab) - len(fits), cfg["t_max"])
    if cfg["base_size"]:
        fits = fits[:cfg["base_size"]]
    if not fits:
        raise UsageError(f"no usable words in {source}")
    return Vocabulary(fits, vocab.source)


# ----------------------------------------------------------------------------
# commands


def cmd_gen_data(args, cfg: RunConfig) -> None:
    base = _load_words(args.words, cfg)
    render = dict(height=cfg["height"], width=cfg["width"])
    if cfg["test_invoc"] or cfg["test_outvoc"]:
        ds = reliance_dataset(base, cfg["fraction"], cfg["samples_per_word"], cfg["seed"],
                              cfg["test_invoc"], cfg["test_outvoc"],
                              cfg["test_samples_per_word"], **render)
    else:
        vocab = base if cfg["fraction"] >= 1 else build_vocab_subset(base, cfg["fraction"],
                                                                      cfg["seed"])
        ds = synthesize_dataset(vocab, cfg["samples_per_word"], seed=cfg["seed"], **render)
    out = Path(args.out) if args.out else run_root() / f"data-{cfg.digest()}"
    write_dataset(ds, out)
    cfg.write_echo(out)
    counts = {s: len(ds.manifest.split(s)) for s in ("train", "test")}
    _emit({"manifest": str(out / "manifest.json"), "vocab_size": len(ds.manifest.vocab),
           "images": counts, "digest": ds.manifest.digest})


def cmd_build_sim(args, cfg: RunConfig) -> None:
    if args.from_glyphs:
        sim = glyph_similarity(k=cfg["k"])
    else:
        ckpt = load_checkpoint(args.from_checkpoint)
        w = ckpt.arrays.get("ctc.classifier.weight")
        if w is None:
            raise RuntimeError(f"{args.from_checkpoint} has no CTC classifier weights")
        sim = build_similarity(w.astype(np.float64)[:36], cfg["k"],
                               source=f"checkpoint:{args.from_checkpoint}")
    out = Path(args.out) if args.out else run_root() / "similarity.txt"
    out.parent.mkdir(parents=True, exist_ok=True)
    save_similarity(sim, out)
    _emit({"similarity": str(out), "k": sim.k, "source": sim.source,
           "max_row_error": float(np.abs(sim.S.sum(axis=1) - 1).max())})


def cmd_pretrain_sem(args, cfg: RunConfig) -> None:
    from .trainkit import pretrain_semantic

    vocab = _load_words(args.words, cfg)
    sim = load_similarity(args.sim) if args.sim else glyph_similarity(k=cfg["k"])
    pairs = make_correction_corpus(vocab, cfg["pairs_per_word"], sim, cfg.corruption_config(),
                                   seed=cfg["seed"])
    run_dir = _run_dir(args, cfg, "pretrain")
    write_corpus(pairs, run_dir / "pairs.tsv")
    res = pretrain_semantic(pairs, cfg.model_config(), cfg.train_config(), run_dir=run_dir)
    _emit({"checkpoint": str(run_dir / "semantic.ckpt"), "pairs": len(pairs),
           "final_loss": res.history[-1]["loss"] if res.history else None})


def cmd_train(args, cfg: RunConfig) -> None:
    from .trainkit import train_joint

    ds = read_dataset(args.data)
    run_dir = _run_dir(args, cfg, "train")
    res = train_joint(ds, cfg.model_config(), cfg.train_config(), run_dir=run_dir)
    _emit({"run_dir": str(run_dir), "best_checkpoint": str(run_dir / "best.ckpt"),
           "best_val_acc": res.best_val, "epochs": len(res.history)})


def cmd_eval(args, cfg: RunConfig) -> None:
    from .evalbench import evaluate_dataset
    from .trainkit import load_model

    ds = read_dataset(args.data)
    vocab = None
    if args.train_vocab:
        vocab = ds.manifest.vocab if args.train_vocab == "manifest" else load_word_list(
            args.train_vocab)
    model = load_model(args.checkpoint)
    report = evaluate_dataset(model, ds, vocab, split=args.split, topk=cfg.topk())
    out = Path(args.out) if args.out else run_root() / f"eval-{report.config_digest}"
    report.write(out)
    sys.stderr.write(report.to_text())
    _emit({"report": str(out / "report.tsv"), "counts": report.counts,
           "accuracy": report.accuracy})


def cmd_ablate(args, cfg: RunConfig) -> None:
    from .evalbench import run_ablation

    ds = read_dataset(args.data)
    run_dir = _run_dir(args, cfg, f"ablate-{args.suite}")
    rep = run_ablation(args.suite, ds, cfg.model_config(), cfg.train_config(), run_dir,
                       pretrained=args.sem_init or cfg["sem_init"], topk=cfg.topk())
    sys.stderr.write(rep.to_text())
    _emit({"suite": args.suite, "table": str(run_dir / f"ablation_{args.suite}.tsv"),
           "rows": {name: r.accuracy["final"] for name, r in rep.rows}})


def cmd_export_attention(args, cfg: RunConfig) -> None:
    from .evalbench import export_attention

    if args.image:
        image = load_image(args.image)
    elif args.data is not None:
        ds = read_dataset(args.data)
        image = ds.images[args.index]
    else:
        raise UsageError("give --image or --data")
    out = Path(args.out) if args.out else run_root() / "attention"
    res = export_attention(args.checkpoint, image, out)
    _emit({"prediction": res["prediction"], "strips": [str(p) for p in res["strips"]],
           "overlay": str(res["overlay"]), "csv": str(res["csv"])})


# ----------------------------------------------------------------------------
# parser


def _kv(text: str) -> tuple[str, str]:
    key, sep, value = text.partition("=")
    if not sep:
        raise argparse.ArgumentTypeError(f"expected key=value, got {text!r}")
    return key.strip(), value.strip()


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--set", type=_kv, action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output path (default: under $VSDN_RUN_DIR or ./runs)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="vsdn", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", parents=[common], help="render a synthetic word-image dataset")
    g.add_argument("--words", required=True, help="word list file, or 'bundled'")
    g.add_argument("--fraction", type=float, help="fraction of the word list used for training")
    g.add_argument("--samples-per-word", type=int)
    g.add_argument("--base-size", type=int, help="keep only the first N usable words")
    g.add_argument("--test-invoc", type=int, help="test words drawn from the training vocabulary")
    g.add_argument("--test-outvoc", type=int, help="test words outside the training vocabulary")
    g.add_argument("--test-samples-per-word", type=int)
    g.set_defaults(func=cmd_gen_data)

    b = sub.add_parser("build-sim", parents=[common], help="build the character similarity matrix")
    src = b.add_mutually_exclusive_group(required=True)
    src.add_argument("--from-checkpoint", help="use the CTC classifier weights of a checkpoint")
    src.add_argument("--from-glyphs", action="store_true", help="use flattened glyph bitmaps")
    b.add_argument("--k", type=float, help="softmax temperature (default 3)")
    b.set_defaults(func=cmd_build_sim)

    s = sub.add_parser("pretrain-sem", parents=[common], help="pre-train the semantic module")
    s.add_argument("--words", required=True, help="word list file, or 'bundled'")
    s.add_argument("--sim", help="similarity matrix file (default: glyph proxy)")
    s.add_argument("--pairs-per-word", type=int)
    s.add_argument("--epochs", type=int)
    s.set_defaults(func=cmd_pretrain_sem)

    t = sub.add_parser("train", parents=[common], help="joint training")
    t.add_argument("--data", required=True)
    t.add_argument("--sem-init", help="pre-trained semantic checkpoint")
    t.add_argument("--epochs", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="test")
    e.add_argument("--train-vocab", help="word list, or 'manifest' for the dataset vocabulary")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", parents=[common], help="train and compare ablation variants")
    a.add_argument("--data", required=True)
    a.add_argument("--suite", required=True,
                   choices=("loss_terms", "query_mode", "coupled_baseline", "vocab_reliance"))
    a.add_argument("--sem-init", help="semantic checkpoint for the pre-trained variant")
    a.add_argument("--epochs", type=int)
    a.set_defaults(func=cmd_ablate)

    x = sub.add_parser("export-attention", parents=[common], help="write attention maps")
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--image", help="image file")
    x.add_argument("--data", help="dataset directory (with --index)")
    x.add_argument("--index", type=int, default=0)
    x.set_defaults(func=cmd_export_attention)
    return p


_FLAG_KEYS = ("seed", "fraction", "samples_per_word", "base_size", "test_invoc", "test_outvoc",
              "test_samples_per_word", "k", "pairs_per_word", "epochs", "sem_init")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        overrides = dict(args.set)
        overrides.update({k: getattr(args, k) for k in _FLAG_KEYS
                          if getattr(args, k, None) is not None})
        cfg = RunConfig.resolve(args.config, overrides)
        cfg.model_config()
        cfg.train_config()
        args.func(args, cfg)
    except (ConfigError, UsageError) as exc:
        log.error("%s", exc)
        return 2
    except KeyboardInterrupt:
        return 1
    except Exception as exc:  # noqa: BLE001 - reported and mapped to the runtime exit code
        log.error("%s: %s", type(exc).__name__, exc)
        log.debug("traceback", exc_info=True)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
