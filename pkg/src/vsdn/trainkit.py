"""Word-correction pre-training, joint training, checkpoint I/O and gradient verification."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .charset import ctc_min_length
from .glyphforge import Dataset
from .lexnoise import CorruptionConfig, SimilarityMatrix, corrupt_word, glyph_similarity
from .netcore import (VSDN, LossWeights, ModelConfig, NonFiniteLossError, apply_to_model,
                      load_checkpoint, model_state_arrays, save_checkpoint, total_loss)
from .netcore.checkpoint import load_optimizer_state, optimizer_state_arrays
from .netcore.decoding import as_batch, predict, semantic_greedy
from .netcore.loss import masked_cross_entropy
from .netcore.model import SEMANTIC_PREFIXES, target_ids

log = logging.getLogger(__name__)

SE_SOURCES = ("ctc", "mixed", "label")


class TrainingDiverged(RuntimeError):
    def __init__(self, message, branch=None, checkpoint=None):
        super().__init__(message)
        self.branch = branch
        self.checkpoint = checkpoint


@dataclass
class TrainConfig:
    batch_size: int = 64
    epochs: int = 10
    optimizer: str = "adam"  # "adam" | "adadelta"
    lr: float = 1e-3
    schedule: dict | None = None  # epoch (1-based) -> lr multiplier, held until the next key
    seed: int = 0
    loss_weights: LossWeights = field(default_factory=LossWeights)
    teacher_forcing: bool = True
    se_source: str = "ctc"  # SE input during joint training
    se_mix_prob: float = 0.5  # "mixed": chance of a corrupted ground-truth input instead of T_c
    sem_init: str | None = None  # pre-trained semantic checkpoint
    freeze_semantic: bool = False
    val_fraction: float = 0.05
    grad_clip: float = 5.0
    eval_batch_size: int = 256

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.optimizer not in ("adam", "adadelta"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.se_source not in SE_SOURCES:
            raise ValueError(f"se_source must be one of {SE_SOURCES}")
        if self.schedule:
            self.schedule = {int(k): float(v) for k, v in self.schedule.items()}
            bad = [k for k in self.schedule if not 1 <= k <= max(self.epochs, 1)]
            if bad:
                raise ValueError(f"schedule epochs {bad} outside [1, {self.epochs}]")

    def lr_multiplier(self, epoch: int) -> float:
        sched = self.schedule if self.schedule is not None else default_schedule(self.epochs)
        mult = 1.0
        for k in sorted(sched):
            if epoch >= k:
                mult = sched[k]
        return mult

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["loss_weights"] = dataclasses.asdict(self.loss_weights)
        return d


def default_schedule(epochs: int) -> dict[int, float]:
    """x0.1 at 2/3 and x0.01 at 5/6 of the run (epochs 4 and 5 of 6)."""
    if epochs < 3:
        return {}
    return {max(2, math.ceil(2 * epochs / 3)): 0.1, max(3, math.ceil(5 * epochs / 6)): 0.01}


def make_optimizer(params, cfg: TrainConfig) -> torch.optim.Optimizer:
    if cfg.optimizer == "adadelta":
        return torch.optim.Adadelta(params, lr=cfg.lr)
    return torch.optim.Adam(params, lr=cfg.lr)


def source_version() -> str:
    """Package version plus a digest of its source files."""
    h = hashlib.sha256()
    root = resources.files("vsdn")
    for path in sorted(Path(str(root)).rglob("*.py")):
        h.update(path.read_bytes())
    return f"{__version__}+{h.hexdigest()[:12]}"


def config_digest(*parts: dict) -> str:
    return hashlib.sha256(json.dumps(parts, sort_keys=True, default=str).encode()).hexdigest()[:16]


# ----------------------------------------------------------------------------
# checkpoints


def save_model(path, model: VSDN, optimizer=None, meta: dict | None = None) -> str:
    arrays = model_state_arrays(model)
    if optimizer is not None:
        arrays.update(optimizer_state_arrays(optimizer, model))
    return save_checkpoint(path, arrays, config=model.cfg.to_dict(), meta=meta or {},
                           rng_state=torch.get_rng_state().numpy().tobytes())


def load_model(path, dtype=torch.float32) -> VSDN:
    ckpt = load_checkpoint(path)
    cfg = ModelConfig.from_dict(ckpt.config)
    model = VSDN(cfg).to(dtype)
    apply_to_model(ckpt, model)
    model.eval()
    return model


def load_semantic(path, model: VSDN) -> list[str]:
    """Copy only the shared embedding, SE and SD arrays from a checkpoint."""
    return apply_to_model(load_checkpoint(path), model, prefixes=SEMANTIC_PREFIXES)


# ----------------------------------------------------------------------------
# run manifest


class RunManifest:
    """Append-only JSON-lines log: one config record, then one record per epoch."""

    def __init__(self, path):
        self.path = Path(path)

    def append(self, record: dict) -> None:
        with open(self.path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")

    def records(self) -> list[dict]:
        if not self.path.exists():
            return []
        return [json.loads(ln) for ln in self.path.read_text().splitlines() if ln.strip()]


@dataclass
class TrainResult:
    model: VSDN
    history: list[dict]
    best_val: float = 0.0
    run_dir: Path | None = None


def _weighted_total(losses: dict, w: LossWeights) -> float:
    return w.ctc * losses["ctc"] + w.v * losses["v"] + w.s * losses["s"] + w.f * losses["f"]


def word_accuracy_simple(preds, labels) -> float:
    if not labels:
        return 0.0
    return sum(p == t for p, t in zip(preds, labels)) / len(labels)


# ----------------------------------------------------------------------------
# pre-training


def pretrain_semantic(pairs, model_cfg: ModelConfig, cfg: TrainConfig, run_dir=None,
                      val_pairs=None, model: VSDN | None = None) -> TrainResult:
    """Train embedding + SE + SD on (corrupted -> target) pairs with teacher forcing.

    Only semantic parameters receive updates; everything else stays at its
    initial value. Returns the whole model so the checkpoint loads into the
    full network.
    """
    if not pairs:
        raise ValueError("correction corpus is empty")
    if model_cfg.coupled_baseline:
        raise ValueError("the coupled baseline has no semantic module to pre-train")
    torch.manual_seed(cfg.seed)
    model = model or VSDN(model_cfg)
    params = [p for n, p in model.named_parameters() if n.startswith(SEMANTIC_PREFIXES)]
    opt = make_optimizer(params, cfg)
    run_dir = Path(run_dir) if run_dir else None
    manifest = None
    if run_dir:
        run_dir.mkdir(parents=True, exist_ok=True)
        manifest = RunManifest(run_dir / "pretrain_manifest.jsonl")
        manifest.append({"record": "config", "kind": "pretrain", "model": model_cfg.to_dict(),
                         "train": cfg.to_dict(), "n_pairs": len(pairs), "source": source_version()})
        save_model(run_dir / "semantic.ckpt", model)

    inputs = [p.corrupted for p in pairs]
    targets = [p.target for p in pairs]
    too_long = [t for t in targets if len(t) > model_cfg.max_label_len]
    if too_long:
        raise ValueError(f"target {too_long[0]!r} exceeds {model_cfg.max_label_len} characters")
    history = []
    n = len(pairs)
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.time()
        for g in opt.param_groups:
            g["lr"] = cfg.lr * cfg.lr_multiplier(epoch)
        order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        loss_sum, count = 0.0, 0
        for i in range(0, n, cfg.batch_size):
            idx = order[i:i + cfg.batch_size]
            tb = [targets[j] for j in idx]
            logits = model.semantic_forward([inputs[j] for j in idx], tb)
            loss = masked_cross_entropy(logits, target_ids(tb, model_cfg.t_max))
            if not torch.isfinite(loss):
                raise TrainingDiverged(
                    f"non-finite semantic loss at epoch {epoch}", "s",
                    str(run_dir / "semantic.ckpt") if run_dir else None)
            opt.zero_grad()
            loss.backward()
            if cfg.grad_clip:
                torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
            opt.step()
            loss_sum += float(loss.detach()) * len(idx)
            count += len(idx)
        rec = {"record": "epoch", "epoch": epoch, "loss": loss_sum / count,
               "lr": opt.param_groups[0]["lr"], "wall": round(time.time() - t0, 3)}
        if val_pairs:
            preds = semantic_greedy(model, [p.corrupted for p in val_pairs])
            rec["val_acc"] = word_accuracy_simple(preds, [p.target for p in val_pairs])
        if run_dir:
            rec["checkpoint"] = save_model(run_dir / "semantic.ckpt", model)
            manifest.append(rec)
        history.append(rec)
        log.info("pretrain epoch %d loss %.4f%s", epoch, rec["loss"],
                 f" val {rec['val_acc']:.3f}" if "val_acc" in rec else "")
    return TrainResult(model, history, history[-1].get("val_acc", 0.0) if history else 0.0, run_dir)


# ----------------------------------------------------------------------------
# joint training


def split_train_val(dataset: Dataset, val_fraction: float, seed: int) -> tuple[list[int], list[int]]:
    train = dataset.manifest.split("train")
    n_val = int(round(val_fraction * len(train)))
    perm = np.random.default_rng([seed, 7919]).permutation(len(train))
    val = sorted(train[i] for i in perm[:n_val])
    rest = sorted(train[i] for i in perm[n_val:])
    return rest, val


def _se_inputs(coarse, labels, cfg: TrainConfig, rng, sim: SimilarityMatrix | None):
    if cfg.se_source == "ctc":
        return coarse
    if cfg.se_source == "label":
        return list(labels)
    out = []
    ccfg = CorruptionConfig()
    for c, lab in zip(coarse, labels):
        out.append(corrupt_word(lab, sim, ccfg, rng).corrupted if rng.uniform() < cfg.se_mix_prob else c)
    return out


def evaluate_accuracy(model: VSDN, images, labels, batch_size: int = 256) -> float:
    return word_accuracy_simple(predict(model, images, batch_size).final, labels)


def train_joint(dataset: Dataset, model_cfg: ModelConfig, cfg: TrainConfig, run_dir=None,
                val_fraction: float | None = None) -> TrainResult:
    """Optimize the four-term loss on the training split.

    Batch order is a pure function of (seed, epoch). The model returned holds
    the weights of the epoch with the best free-running validation accuracy
    (the last epoch when there is no validation split).
    """
    torch.manual_seed(cfg.seed)
    labels_all = [e.label for e in dataset.manifest.entries]
    for lab in set(labels_all[i] for i in dataset.manifest.split("train")):
        if len(lab) > model_cfg.max_label_len or ctc_min_length(lab) > model_cfg.t_max:
            raise ValueError(f"label {lab!r} does not fit t_max={model_cfg.t_max}")
    model = VSDN(model_cfg)
    if cfg.sem_init:
        if not model_cfg.has_semantic:
            raise ValueError("sem_init given for a model without a semantic module")
        load_semantic(cfg.sem_init, model)
    frozen = cfg.freeze_semantic and model_cfg.has_semantic
    params = [p for n, p in model.named_parameters()
              if not (frozen and n.startswith(SEMANTIC_PREFIXES))]
    opt = make_optimizer(params, cfg)
    sim = glyph_similarity() if cfg.se_source == "mixed" else None

    vf = cfg.val_fraction if val_fraction is None else val_fraction
    train_idx, val_idx = split_train_val(dataset, vf, cfg.seed)
    if not train_idx:
        raise ValueError("no training images")
    val_labels = [labels_all[i] for i in val_idx]

    run_dir = Path(run_dir) if run_dir else None
    manifest = None
    if run_dir:
        run_dir.mkdir(parents=True, exist_ok=True)
        manifest = RunManifest(run_dir / "run_manifest.jsonl")
        manifest.append({"record": "config", "kind": "joint", "model": model_cfg.to_dict(),
                         "train": cfg.to_dict(), "dataset_digest": dataset.manifest.digest,
                         "n_train": len(train_idx), "n_val": len(val_idx),
                         "torch_threads": torch.get_num_threads(), "source": source_version()})
        save_model(run_dir / "last.ckpt", model, opt)

    history, best_val, best_state = [], -1.0, None
    w = cfg.loss_weights
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.time()
        model.train()
        for g in opt.param_groups:
            g["lr"] = cfg.lr * cfg.lr_multiplier(epoch)
        rng = np.random.default_rng([cfg.seed, epoch])
        order = rng.permutation(train_idx)
        sums = {"ctc": 0.0, "v": 0.0, "s": 0.0, "f": 0.0}
        count = 0
        for i in range(0, len(order), cfg.batch_size):
            idx = np.sort(order[i:i + cfg.batch_size])
            x = as_batch(dataset.images[idx])
            labs = [labels_all[j] for j in idx]
            transform = None
            if model_cfg.has_semantic and cfg.se_source != "ctc":
                def transform(coarse, labs=labs):
                    return _se_inputs(coarse, labs, cfg, rng, sim)
            trace = model.decode(x, labels=labs, se_transform=transform)
            try:
                parts = total_loss(trace, labs, w)
            except NonFiniteLossError as exc:
                ckpt = str(run_dir / "last.ckpt") if run_dir else None
                raise TrainingDiverged(f"epoch {epoch}: {exc}", exc.branch, ckpt) from exc
            opt.zero_grad()
            parts.total.backward()
            if cfg.grad_clip:
                torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
            opt.step()
            for k in sums:
                sums[k] += float(getattr(parts, k).detach()) * len(idx)
            count += len(idx)
        losses = {k: v / count for k, v in sums.items()}
        losses["total"] = _weighted_total(losses, w)
        val_acc = evaluate_accuracy(model, dataset.images[val_idx], val_labels,
                                    cfg.eval_batch_size) if val_idx else 0.0
        rec = {"record": "epoch", "epoch": epoch, "loss": losses, "val_acc": val_acc,
               "lr": opt.param_groups[0]["lr"], "wall": round(time.time() - t0, 3)}
        # without a validation split the latest epoch is the one kept
        improved = val_acc > best_val or not val_idx
        if improved:
            best_val = val_acc
            best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
        if run_dir:
            rec["checkpoint"] = save_model(run_dir / "last.ckpt", model, opt)
            if improved:
                rec["best_checkpoint"] = save_model(run_dir / "best.ckpt", model)
            manifest.append(rec)
        history.append(rec)
        log.info("epoch %d total %.4f (ctc %.3f v %.3f s %.3f f %.3f) val %.4f [%.0fs]", epoch,
                 losses["total"], losses["ctc"], losses["v"], losses["s"], losses["f"], val_acc,
                 rec["wall"])
    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    return TrainResult(model, history, max(best_val, 0.0), run_dir)


def resume_optimizer(path, model: VSDN, cfg: TrainConfig) -> torch.optim.Optimizer:
    opt = make_optimizer(model.parameters(), cfg)
    load_optimizer_state(load_checkpoint(path), opt, model)
    return opt


# ----------------------------------------------------------------------------
# gradient verification


@dataclass
class GradCheckReport:
    errors: dict[str, float]  # parameter name -> relative error over sampled coordinates
    sampled: dict[str, int]
    analytic_norm: dict[str, float]

    def groups(self) -> dict[str, float]:
        out: dict[str, float] = {}
        for name, err in self.errors.items():
            g = name.split(".")[0]
            out[g] = max(out.get(g, 0.0), err)
        return out

    @property
    def max_error(self) -> float:
        return max(self.errors.values()) if self.errors else 0.0


def gradient_check(model_cfg: ModelConfig, n_params_sampled: int = 20, seed: int = 0,
                   weights: LossWeights = LossWeights(), step: float = 1e-5,
                   batch: int = 2, perturb: float = 0.3) -> GradCheckReport:
    """Compare autograd gradients of the total loss with central differences in float64.

    Parameters are evaluated at init + perturb * N(0, 1): at the raw init the
    attention scores are nearly uniform and their gradients sit at the
    round-off floor of the difference quotient.

    The semantic-encoder input is the CTC coarse string at the unperturbed
    point, held fixed: the argmax has zero derivative, so this is the exact
    local behaviour of the loss.
    """
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    model = VSDN(model_cfg).double()
    model.train()
    if perturb:
        with torch.no_grad():
            for p in model.parameters():
                p.add_(perturb * torch.randn_like(p))
    images = torch.from_numpy(rng.uniform(size=(batch, model_cfg.height, model_cfg.width)))
    max_len = min(3, model_cfg.max_label_len)
    alphabet = "abcdefghij"
    labels = []
    while len(labels) < batch:
        lab = "".join(rng.choice(list(alphabet), size=int(rng.integers(1, max_len + 1))))
        if ctc_min_length(lab) <= model_cfg.t_max:
            labels.append(lab)

    with torch.no_grad():
        se_texts = model.decode(images, labels=labels).coarse if model_cfg.has_semantic else None

    def loss_fn():
        trace = model.decode(images, labels=labels, se_texts=se_texts)
        return total_loss(trace, labels, weights).total

    model.zero_grad()
    loss_fn().backward()
    errors, sampled, norms = {}, {}, {}
    for name, p in model.named_parameters():
        analytic = p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p)
        flat = p.data.view(-1)
        k = min(n_params_sampled, flat.numel())
        coords = rng.choice(flat.numel(), size=k, replace=False)
        a_vals, n_vals = [], []
        with torch.no_grad():
            for c in coords:
                orig = flat[c].item()
                flat[c] = orig + step
                up = loss_fn().item()
                flat[c] = orig - step
                down = loss_fn().item()
                flat[c] = orig
                n_vals.append((up - down) / (2 * step))
                a_vals.append(analytic.view(-1)[c].item())
        a = np.array(a_vals)
        n = np.array(n_vals)
        denom = max(np.linalg.norm(a), np.linalg.norm(n), 1e-8)
        errors[name] = float(np.linalg.norm(a - n) / denom)
        sampled[name] = k
        norms[name] = float(np.linalg.norm(analytic.numpy()))
    return GradCheckReport(errors, sampled, norms)
