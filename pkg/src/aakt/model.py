"""Causal decoder over alternate token streams.

Question tokens are rows of a learned embedding table; response tokens are a
correct/incorrect base vector plus the normalized response time times a
trainable direction. The backbone is a stack of pre-norm blocks whose
attention and feed-forward branches run in parallel off a shared layer norm,
with rotary position encoding applied to a leading slice of each attention
head. The output head reads the hidden state at each question token and emits
a (raw-correct, raw-incorrect) pair; the predicted probability is the sigmoid
of their difference. Skill supervision never enters the forward pass directly:
an auxiliary classifier predicts each question's skill distribution from its
embedding row, so skill information reaches the table only through gradients.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import ConfigError
from .sequencing import DEFAULT_TIME_CLIP, DEFAULT_TIME_FACTOR, TokenKind, Window

SKILL_MODES = ("aux", "additive", "none")


@dataclass
class ModelConfig:
    n_questions: int
    n_skills: int
    dim: int = 64
    n_blocks: int = 2
    n_heads: int = 8
    dropout: float = 0.1
    ffn_mult: int = 4
    # "aux": skill info via the auxiliary loss only (default).
    # "additive": mean skill embedding added to the question token, no aux loss.
    # "none": no skill information at all.
    skill_mode: str = "aux"
    time_factor: float = DEFAULT_TIME_FACTOR
    time_clip: float = DEFAULT_TIME_CLIP
    rotary_base: float = 10_000.0

    def __post_init__(self):
        if self.n_questions < 1 or self.n_skills < 1:
            raise ConfigError("n_questions and n_skills must be >= 1")
        if self.dim % self.n_heads:
            raise ConfigError(f"dim={self.dim} not divisible by n_heads={self.n_heads}")
        if self.rotary_dim <= 0 or self.rotary_dim % 2:
            raise ConfigError(
                f"rotary dim {self.rotary_dim} (= dim / (2 * heads)) must be a positive even integer"
            )
        if self.skill_mode not in SKILL_MODES:
            raise ConfigError(f"skill_mode must be one of {SKILL_MODES}")

    @property
    def head_dim(self) -> int:
        return self.dim // self.n_heads

    @property
    def rotary_dim(self) -> int:
        return self.dim // (2 * self.n_heads)


@dataclass
class ForwardOutput:
    probs: torch.Tensor  # (B, slots) P(correct) at each question slot
    aux_probs: torch.Tensor | None  # (B, slots, n_skills) predicted skill distributions
    hidden: torch.Tensor  # (B, 2*slots, dim) final-layer states
    attn_weights: list[torch.Tensor] | None  # per block: (B, heads, T, T)


def predict_prob(v: torch.Tensor) -> torch.Tensor:
    """Probability of a correct response from a (raw-correct, raw-incorrect)
    pair: ``sigmoid(v_correct - v_incorrect)``."""
    return torch.sigmoid(v[..., 0] - v[..., 1])


def true_skill_distribution(skill_ids, n_skills: int) -> torch.Tensor:
    """Supervision target: uniform mass over the question's skills."""
    ids = list(skill_ids)
    if not ids:
        raise ValueError("skill set must be non-empty")
    dist = torch.zeros(n_skills)
    dist[torch.as_tensor(ids)] = 1.0 / len(ids)
    return dist


def rope_rotate(
    x: torch.Tensor,
    positions: torch.Tensor,
    rotary_dim: int | None = None,
    base: float = 10_000.0,
) -> torch.Tensor:
    """Rotate the leading ``rotary_dim`` dims of ``x`` by position-dependent angles.

    Coordinates are paired as (0,1), (2,3), ...; pair j at position m rotates
    by angle ``m * base**(-2j / rotary_dim)``. The trailing dims pass through.
    ``x`` has shape (..., seq, d); ``positions`` has shape (seq,).
    """
    d = x.shape[-1] if rotary_dim is None else rotary_dim
    if d % 2:
        raise ConfigError(f"rotary dim must be even, got {d}")
    if d == 0:
        return x
    half = d // 2
    inv_freq = base ** (-2.0 * torch.arange(half, dtype=x.dtype, device=x.device) / d)
    angles = positions.to(x.dtype)[:, None] * inv_freq[None, :]  # (seq, half)
    cos, sin = torch.cos(angles), torch.sin(angles)
    x1 = x[..., 0:d:2]
    x2 = x[..., 1:d:2]
    out = x.clone()
    out[..., 0:d:2] = x1 * cos - x2 * sin
    out[..., 1:d:2] = x1 * sin + x2 * cos
    return out


class ResponseEmbedding(nn.Module):
    """Correct/incorrect base vector plus time_norm * trainable time vector."""

    def __init__(self, dim: int):
        super().__init__()
        self.right = nn.Parameter(torch.empty(dim))
        self.wrong = nn.Parameter(torch.empty(dim))
        self.time = nn.Parameter(torch.empty(dim))
        for p in (self.right, self.wrong, self.time):
            nn.init.trunc_normal_(p, std=0.02)

    def forward(self, correct: torch.Tensor, time_norm: torch.Tensor) -> torch.Tensor:
        base = torch.where(correct.bool().unsqueeze(-1), self.right, self.wrong)
        return base + time_norm.unsqueeze(-1).to(self.time.dtype) * self.time


class SkillClassifier(nn.Module):
    """Feed-forward skill head over question embeddings, softmax on top."""

    def __init__(self, dim: int, n_skills: int):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(dim, dim), nn.GELU(), nn.Linear(dim, n_skills))

    def forward(self, q_emb: torch.Tensor) -> torch.Tensor:
        return F.softmax(self.net(q_emb), dim=-1)


class CausalSelfAttention(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.qkv = nn.Linear(cfg.dim, 3 * cfg.dim)
        self.proj = nn.Linear(cfg.dim, cfg.dim)
        self.attn_drop = nn.Dropout(cfg.dropout)

    def forward(
        self, x: torch.Tensor, key_valid: torch.Tensor, collect: bool = False
    ) -> tuple[torch.Tensor, torch.Tensor | None]:
        B, T, D = x.shape
        H, hd = self.cfg.n_heads, self.cfg.head_dim
        q, k, v = self.qkv(x).split(D, dim=-1)
        q = q.view(B, T, H, hd).transpose(1, 2)  # (B, H, T, hd)
        k = k.view(B, T, H, hd).transpose(1, 2)
        v = v.view(B, T, H, hd).transpose(1, 2)
        positions = torch.arange(T, device=x.device)
        q = rope_rotate(q, positions, self.cfg.rotary_dim, self.cfg.rotary_base)
        k = rope_rotate(k, positions, self.cfg.rotary_dim, self.cfg.rotary_base)

        scores = q @ k.transpose(-2, -1) / math.sqrt(hd)
        causal = torch.tril(torch.ones(T, T, dtype=torch.bool, device=x.device))
        allowed = causal[None, None, :, :] & key_valid[:, None, None, :]
        scores = scores.masked_fill(~allowed, float("-inf"))
        weights = F.softmax(scores, dim=-1)
        y = self.attn_drop(weights) @ v
        y = y.transpose(1, 2).reshape(B, T, D)
        return self.proj(y), (weights if collect else None)


class DecoderBlock(nn.Module):
    """Pre-norm block: x + Attn(LN(x)) + FFN(LN(x)), branches in parallel."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.ln = nn.LayerNorm(cfg.dim)
        self.attn = CausalSelfAttention(cfg)
        self.ffn = nn.Sequential(
            nn.Linear(cfg.dim, cfg.ffn_mult * cfg.dim),
            nn.GELU(),
            nn.Linear(cfg.ffn_mult * cfg.dim, cfg.dim),
            nn.Dropout(cfg.dropout),
        )

    def forward(self, x, key_valid, collect=False):
        h = self.ln(x)
        a, w = self.attn(h, key_valid, collect)
        return x + a + self.ffn(h), w


class AAKTModel(nn.Module):
    """Alternate autoregressive knowledge-tracing network."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.question_emb = nn.Embedding(cfg.n_questions, cfg.dim)
        self.response_emb = ResponseEmbedding(cfg.dim)
        self.skill_emb = (
            nn.Embedding(cfg.n_skills, cfg.dim) if cfg.skill_mode == "additive" else None
        )
        self.skill_head = SkillClassifier(cfg.dim, cfg.n_skills) if cfg.skill_mode == "aux" else None
        self.blocks = nn.ModuleList(DecoderBlock(cfg) for _ in range(cfg.n_blocks))
        self.ln_f = nn.LayerNorm(cfg.dim)
        self.out_head = nn.Sequential(nn.Linear(cfg.dim, cfg.dim), nn.GELU(), nn.Linear(cfg.dim, 2))
        self.apply(self._init_weights)

    @staticmethod
    def _init_weights(module: nn.Module) -> None:
        if isinstance(module, (nn.Linear, nn.Embedding)):
            nn.init.trunc_normal_(module.weight, std=0.02)
            if isinstance(module, nn.Linear) and module.bias is not None:
                nn.init.zeros_(module.bias)

    def embed_question(self, question_id: torch.Tensor | int) -> torch.Tensor:
        ids = torch.as_tensor(question_id)
        if ids.numel() and (ids.min() < 0 or ids.max() >= self.cfg.n_questions):
            raise IndexError(f"question id out of range [0, {self.cfg.n_questions})")
        return self.question_emb(ids)

    def forward(self, batch: dict[str, torch.Tensor], collect_attention: bool = False) -> ForwardOutput:
        qids = batch["question_ids"]  # (B, S)
        B, S = qids.shape
        T = 2 * S
        dtype = self.question_emb.weight.dtype
        q_tok = self.embed_question(qids)
        if self.skill_emb is not None:
            # skill_dist rows are the uniform per-question skill distributions,
            # so this adds the mean of the question's skill embeddings.
            q_tok = q_tok + batch["skill_dist"].to(dtype) @ self.skill_emb.weight
        r_tok = self.response_emb(batch["corrects"], batch["time_norm"])
        x = torch.stack((q_tok, r_tok), dim=2).reshape(B, T, self.cfg.dim)

        key_valid = (
            torch.arange(T, device=x.device)[None, :] < batch["attn_len"][:, None]
        )
        attn_all: list[torch.Tensor] = []
        for block in self.blocks:
            x, w = block(x, key_valid, collect_attention)
            if collect_attention:
                attn_all.append(w)
        x = self.ln_f(x)

        v = self.out_head(x[:, 0::2])  # (B, S, 2), one pair per question slot
        probs = predict_prob(v)
        aux = self.skill_head(self.embed_question(qids)) if self.skill_head is not None else None
        return ForwardOutput(
            probs=probs,
            aux_probs=aux,
            hidden=x,
            attn_weights=attn_all if collect_attention else None,
        )


def collate_windows(windows: list[Window], n_skills: int, dtype=torch.float32) -> dict[str, torch.Tensor]:
    """Turn same-size windows into model input tensors.

    Raises if any window breaks the question/response alternation. PAD slots
    get question id 0 and zero responses; they are excluded from attention by
    ``attn_len`` and from losses and predictions by ``q_valid``.
    """
    if not windows:
        raise ValueError("cannot collate an empty window list")
    B, size = len(windows), windows[0].size
    S = size // 2
    qids = torch.zeros(B, S, dtype=torch.long)
    skill_dist = torch.zeros(B, S, n_skills, dtype=dtype)
    corrects = torch.zeros(B, S, dtype=dtype)
    time_norm = torch.zeros(B, S, dtype=dtype)
    labels = torch.zeros(B, S, dtype=dtype)
    attn_len = torch.zeros(B, dtype=torch.long)
    q_valid = torch.zeros(B, S, dtype=torch.bool)
    fresh = torch.zeros(B, S, dtype=torch.bool)
    for b, w in enumerate(windows):
        if w.size != size:
            raise ValueError("all windows in a batch must share a size")
        attn_len[b] = w.attn_len
        for slot in range(w.n_slots):
            q, r = w.tokens[2 * slot], w.tokens[2 * slot + 1]
            if slot < w.n_valid_slots:
                if q.kind is not TokenKind.QUESTION or r.kind is not TokenKind.RESPONSE:
                    raise ValueError(
                        f"window does not alternate question/response at slot {slot}"
                    )
                qids[b, slot] = q.question_id
                skill_dist[b, slot, list(q.skill_ids)] = 1.0 / len(q.skill_ids)
                corrects[b, slot] = r.correct
                time_norm[b, slot] = r.time_norm
                labels[b, slot] = q.label
                q_valid[b, slot] = True
                fresh[b, slot] = w.fresh_mask[slot]
            elif q.kind is not TokenKind.PAD or r.kind is not TokenKind.PAD:
                raise ValueError(f"non-PAD token after attn_len in slot {slot}")
    return {
        "question_ids": qids,
        "skill_dist": skill_dist,
        "corrects": corrects,
        "time_norm": time_norm,
        "labels": labels,
        "attn_len": attn_len,
        "q_valid": q_valid,
        "fresh": fresh,
    }


def save_checkpoint(model: AAKTModel, path: str | Path) -> Path:
    """Write a self-describing checkpoint: JSON config header plus named
    little-endian float32 parameter arrays."""
    path = Path(path)
    arrays = {
        name: np.ascontiguousarray(p.detach().cpu().numpy(), dtype="<f4")
        for name, p in model.state_dict().items()
    }
    np.savez(path, __config__=np.array(json.dumps(asdict(model.cfg))), **arrays)
    return path if path.suffix == ".npz" else Path(str(path) + ".npz")


def load_checkpoint(path: str | Path) -> AAKTModel:
    with np.load(path, allow_pickle=False) as archive:
        cfg = ModelConfig(**json.loads(str(archive["__config__"])))
        model = AAKTModel(cfg)
        state = {
            name: torch.from_numpy(np.asarray(archive[name], dtype=np.float32))
            for name in archive.files
            if name != "__config__"
        }
    model.load_state_dict(state)
    return model
