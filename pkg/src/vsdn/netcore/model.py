"""The decoupled recognizer: shared extractor, CTC branch, semantic encoder/decoder,
visual decoder with semantic-query attention, and the fusion classifier.

All tensors are batch-first. The step-level methods (``sd_step``, ``vd_attend``,
``vd_step``, ``fuse``) are what ``decode`` chains together; they are public so
tests can drive a single step with hand-picked inputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from ..charset import BOS, CHAR_TO_ID, EOS, N_CTC, N_DEC, N_EMBED, PAD, decode_ids
from .config import ModelConfig
from .ctc import ctc_greedy_batch

SEMANTIC_PREFIXES = ("embed.", "se.", "sd.")


class GeometryError(ValueError):
    pass


class SymbolError(ValueError):
    pass


def text_ids(texts, length: int) -> torch.Tensor:
    """Encode strings for the semantic encoder: char ids, PAD-filled and truncated to `length`."""
    out = torch.full((len(texts), length), PAD, dtype=torch.long)
    for b, s in enumerate(texts):
        ids = [CHAR_TO_ID[c] for c in s[:length] if c in CHAR_TO_ID]
        if ids:
            out[b, :len(ids)] = torch.tensor(ids)
    return out


def target_ids(labels, steps: int) -> torch.Tensor:
    """Decoder targets: label ids, EoS, then PAD up to `steps`."""
    out = torch.full((len(labels), steps), PAD, dtype=torch.long)
    for b, s in enumerate(labels):
        if len(s) + 1 > steps:
            raise ValueError(f"label {s!r} is too long for {steps} decode steps")
        ids = [CHAR_TO_ID[c] for c in s]
        out[b, :len(ids)] = torch.tensor(ids, dtype=torch.long)
        out[b, len(ids)] = EOS
    return out


class FeatureExtractor(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        layers, prev = [], 1
        for i, ch in enumerate(cfg.conv_channels):
            layers.append(nn.Conv2d(prev, ch, 3, padding=1, bias=not cfg.batch_norm))
            if cfg.batch_norm:
                layers.append(nn.BatchNorm2d(ch))
            layers.append(nn.ReLU() if cfg.activation == "relu" else nn.GELU())
            if i < cfg.pool_layers:
                layers.append(nn.MaxPool2d(2) if cfg.pool == "max" else nn.AvgPool2d(2))
            prev = ch
        self.conv = nn.Sequential(*layers)
        # height squeezed to 1, width resampled to t_max frames
        self.pool = nn.AdaptiveAvgPool2d((1, cfg.t_max))
        if cfg.extractor_rnn_layers > 0:
            self.rnn = nn.LSTM(prev, cfg.feat_dim // 2, num_layers=cfg.extractor_rnn_layers,
                               bidirectional=True, batch_first=True)
            self.proj = None
        else:
            self.rnn = None
            self.proj = nn.Linear(prev, cfg.feat_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.pool(self.conv(x[:, None]))  # (B, C, 1, T)
        seq = x.squeeze(2).transpose(1, 2)  # (B, T, C)
        if self.rnn is not None:
            return self.rnn(seq)[0]
        return self.proj(seq)


class CTCBranch(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.feat_dim
        self.rnn = (nn.LSTM(d, d // 2, num_layers=cfg.ctc_rnn_layers, bidirectional=True,
                            batch_first=True) if cfg.ctc_rnn_layers > 0 else None)
        self.classifier = nn.Linear(d, N_CTC)  # rows 0..35 are W_ctc for the visual chars

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        x = self.rnn(h)[0] if self.rnn is not None else h
        return F.log_softmax(self.classifier(x), dim=-1)


class SemanticEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.rnn = nn.GRU(cfg.emb_dim, cfg.sem_dim // 2, num_layers=cfg.se_rnn_layers,
                          bidirectional=True, batch_first=True)
        self.proj = nn.Linear(cfg.sem_dim, cfg.sem_dim)

    def forward(self, emb: torch.Tensor) -> torch.Tensor:
        return self.proj(self.rnn(emb)[0]).mean(dim=1)


class SemanticDecoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.sem_dim
        self.init_state = nn.Linear(d, d)  # s_g -> s_0
        self.init_word = nn.Linear(d, d)  # s_g -> e_w
        self.rnn = nn.GRUCell(cfg.emb_dim + d, d)
        self.classifier = nn.Linear(d, N_DEC)


class VisualDecoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        query_dim = (cfg.vis_dim if cfg.coupled_baseline or cfg.query_mode == "previous_visual"
                     else cfg.sem_dim)
        a = cfg.attn_dim
        # c_{t,i} = W^T tanh(U [query, e_t] + V h_i + b)
        self.attn_U = nn.Parameter(torch.empty(a, query_dim + cfg.step_dim))
        self.attn_V = nn.Parameter(torch.empty(a, cfg.feat_dim))
        self.attn_b = nn.Parameter(torch.zeros(a))
        self.attn_W = nn.Parameter(torch.empty(a))
        self.step_emb = nn.Parameter(torch.empty(cfg.t_max, cfg.step_dim))
        in_dim = cfg.feat_dim
        if cfg.coupled_baseline and cfg.feed_prev_symbol:
            in_dim += cfg.emb_dim
        self.rnn = nn.GRUCell(in_dim, cfg.vis_dim)
        self.classifier = nn.Linear(cfg.vis_dim, N_DEC)
        nn.init.xavier_uniform_(self.attn_U)
        nn.init.xavier_uniform_(self.attn_V)
        nn.init.uniform_(self.attn_W, -1 / np.sqrt(a), 1 / np.sqrt(a))
        nn.init.normal_(self.step_emb, std=0.5)


@dataclass
class DecodeTrace:
    """Batched record of one decode. Step tensors are (B, steps, ...)."""

    ctc_log_probs: torch.Tensor  # (B, T, 37)
    coarse: list[str]  # greedy CTC strings
    se_input: list[str] | None
    alpha: torch.Tensor  # (B, S, T)
    glimpse: torch.Tensor
    s_vis: torch.Tensor
    s_sem: torch.Tensor | None
    vd_logits: torch.Tensor
    sd_logits: torch.Tensor | None
    fused_logits: torch.Tensor
    symbols: torch.Tensor  # (B, S) emitted symbol (fused argmax)
    targets: torch.Tensor | None = None  # teacher forcing only

    @property
    def steps(self) -> int:
        return self.symbols.shape[1]

    def predictions(self) -> list[str]:
        return [decode_ids(row) for row in self.symbols.tolist()]

    def vd_predictions(self) -> list[str]:
        return [decode_ids(row) for row in self.vd_logits.argmax(-1).tolist()]

    def sd_predictions(self) -> list[str]:
        if self.sd_logits is None:
            return [""] * len(self.coarse)
        return [decode_ids(row) for row in self.sd_logits.argmax(-1).tolist()]

    def emitted_lengths(self) -> list[int]:
        """Steps up to and including the first EoS (all steps if none)."""
        out = []
        for row in self.symbols.tolist():
            out.append(row.index(EOS) + 1 if EOS in row else len(row))
        return out


class VSDN(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.extractor = FeatureExtractor(cfg)
        self.ctc = CTCBranch(cfg)
        self.embed = nn.Embedding(N_EMBED, cfg.emb_dim)  # f(.), shared by SE and SD; row BOS is the start symbol
        if cfg.has_semantic:
            self.se = SemanticEncoder(cfg)
            self.sd = SemanticDecoder(cfg)
            self.fusion = nn.Linear(cfg.vis_dim + cfg.sem_dim, N_DEC)
        self.vd = VisualDecoder(cfg)

    # -- components -------------------------------------------------------

    def extract_features(self, images: torch.Tensor) -> torch.Tensor:
        if images.dim() == 2:
            images = images[None]
        H, W = images.shape[-2:]
        if (H, W) != (self.cfg.height, self.cfg.width):
            raise GeometryError(
                f"expected {self.cfg.height}x{self.cfg.width} images, got {H}x{W}")
        return self.extractor(images)

    def ctc_log_probs(self, h: torch.Tensor) -> torch.Tensor:
        return self.ctc(h)

    def ctc_probs(self, h: torch.Tensor) -> torch.Tensor:
        return self.ctc(h).exp()

    def semantic_encode(self, texts) -> torch.Tensor:
        """Global semantic embedding s_g for a batch of strings."""
        ids = text_ids(texts, self.cfg.t_max).to(self.embed.weight.device)
        return self.se(self.embed(ids))

    def sd_init(self, s_g: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        return self.sd.init_state(s_g), self.sd.init_word(s_g)

    def _check_symbols(self, y: torch.Tensor) -> None:
        if y.numel() and (int(y.min()) < 0 or int(y.max()) >= N_EMBED):
            raise SymbolError(f"symbol index out of range [0, {N_EMBED}): {y.tolist()}")

    def sd_step(self, s_prev: torch.Tensor, y_prev: torch.Tensor, e_w: torch.Tensor) -> torch.Tensor:
        self._check_symbols(y_prev)
        return self.sd.rnn(torch.cat([self.embed(y_prev), e_w], dim=-1), s_prev)

    def sd_classify(self, s: torch.Tensor) -> torch.Tensor:
        return self.sd.classifier(s)

    def attention_keys(self, h: torch.Tensor) -> torch.Tensor:
        return h @ self.vd.attn_V.T  # V h_i, (B, T, A)

    def vd_attend(self, query: torch.Tensor, t: int, h: torch.Tensor,
                  keys: torch.Tensor | None = None) -> torch.Tensor:
        if keys is None:
            keys = self.attention_keys(h)
        e_t = self.vd.step_emb[t].expand(query.shape[0], -1)
        q = torch.cat([query, e_t], dim=-1) @ self.vd.attn_U.T  # (B, A)
        scores = torch.tanh(q[:, None, :] + keys + self.vd.attn_b) @ self.vd.attn_W  # (B, T)
        return torch.softmax(scores, dim=-1)

    def vd_step(self, alpha: torch.Tensor, h: torch.Tensor, s_prev: torch.Tensor,
                y_prev: torch.Tensor | None = None) -> tuple[torch.Tensor, torch.Tensor]:
        g = torch.einsum("bt,btd->bd", alpha, h)
        x = g
        if self.cfg.coupled_baseline and self.cfg.feed_prev_symbol:
            if y_prev is None:
                raise ValueError("coupled decoder needs the previous symbol")
            self._check_symbols(y_prev)
            x = torch.cat([self.embed(y_prev), g], dim=-1)
        return g, self.vd.rnn(x, s_prev)

    def vd_classify(self, s_v: torch.Tensor) -> torch.Tensor:
        return self.vd.classifier(s_v)

    def fuse(self, s_v: torch.Tensor, s_s: torch.Tensor) -> torch.Tensor:
        return self.fusion(torch.cat([s_v, s_s], dim=-1))

    # -- full pipeline ----------------------------------------------------

    def decode(self, images: torch.Tensor, labels=None, se_texts=None,
               max_steps: int | None = None, se_transform=None) -> DecodeTrace:
        """Run the whole network.

        With `labels` the decoders are teacher-forced for t_max steps; without,
        each step feeds back the fused argmax and decoding stops once every
        sample has emitted EoS. `se_texts` overrides the CTC coarse string as
        semantic-encoder input.
        """
        cfg = self.cfg
        steps = max_steps or cfg.t_max
        h = self.extract_features(images)
        B = h.shape[0]
        ctc_lp = self.ctc_log_probs(h)
        coarse = ctc_greedy_batch(ctc_lp.detach())
        targets = target_ids(labels, steps).to(h.device) if labels is not None else None

        s_sem = e_w = None
        se_input = None
        if cfg.has_semantic:
            if se_texts is not None:
                se_input = list(se_texts)
            elif se_transform is not None:
                se_input = list(se_transform(coarse))
            else:
                se_input = coarse
            s_sem, e_w = self.sd_init(self.semantic_encode(se_input))
        s_vis = h.new_zeros(B, cfg.vis_dim)
        y_prev = torch.full((B,), BOS, dtype=torch.long, device=h.device)
        keys = self.attention_keys(h)
        done = torch.zeros(B, dtype=torch.bool, device=h.device)

        rec = {k: [] for k in ("alpha", "g", "sv", "ss", "vd", "sd", "fused", "sym")}
        for t in range(steps):
            if cfg.has_semantic:
                s_sem = self.sd_step(s_sem, y_prev, e_w)
                rec["ss"].append(s_sem)
                rec["sd"].append(self.sd_classify(s_sem))
            query = s_sem if cfg.has_semantic and cfg.query_mode == "semantic" else s_vis
            alpha = self.vd_attend(query, t, h, keys)
            g, s_vis = self.vd_step(alpha, h, s_vis, y_prev)
            vd_logits = self.vd_classify(s_vis)
            fused = self.fuse(s_vis, s_sem) if cfg.has_semantic else vd_logits
            sym = fused.argmax(dim=-1)
            for k, v in (("alpha", alpha), ("g", g), ("sv", s_vis), ("vd", vd_logits),
                         ("fused", fused), ("sym", sym)):
                rec[k].append(v)
            if targets is not None:
                y_prev = targets[:, t]
            else:
                y_prev = sym
                done = done | (sym == EOS)
                if bool(done.all()):
                    break

        def stack(k):
            return torch.stack(rec[k], dim=1) if rec[k] else None

        return DecodeTrace(
            ctc_log_probs=ctc_lp, coarse=coarse, se_input=se_input, alpha=stack("alpha"),
            glimpse=stack("g"), s_vis=stack("sv"), s_sem=stack("ss"), vd_logits=stack("vd"),
            sd_logits=stack("sd"), fused_logits=stack("fused"), symbols=stack("sym"),
            targets=targets,
        )

    # -- semantic module alone (pre-training, top-k analysis) -------------

    def semantic_forward(self, inputs, targets_text) -> torch.Tensor:
        """Teacher-forced SD logits (B, t_max, 39) for the word-correction task."""
        targets = target_ids(targets_text, self.cfg.t_max).to(self.embed.weight.device)
        s, e_w = self.sd_init(self.semantic_encode(inputs))
        y_prev = torch.full((len(inputs),), BOS, dtype=torch.long, device=s.device)
        out = []
        for t in range(self.cfg.t_max):
            s = self.sd_step(s, y_prev, e_w)
            out.append(self.sd_classify(s))
            y_prev = targets[:, t]
        return torch.stack(out, dim=1)

    def param_groups(self) -> dict[str, list[str]]:
        """Parameter names keyed by component."""
        groups: dict[str, list[str]] = {}
        for name, _ in self.named_parameters():
            groups.setdefault(name.split(".")[0], []).append(name)
        return groups

    def semantic_parameter_names(self) -> list[str]:
        return [n for n, _ in self.named_parameters() if n.startswith(SEMANTIC_PREFIXES)]

    def ctc_classifier_weights(self) -> np.ndarray:
        """W_ctc rows for the 36 visual characters (blank row dropped)."""
        return self.ctc.classifier.weight.detach().cpu().double().numpy()[:N_CTC - 1]


def softmax(logits: torch.Tensor) -> torch.Tensor:
    return torch.softmax(logits, dim=-1)
