"""Dual-head decoder-only transformer over JSON token streams."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from .tokenizer import NUM, PAD

LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    n_layers: int = 8
    n_heads: int = 4
    d_ff: int = 512
    n_components: int = 5
    max_index: int = 256
    max_seq_len: int = 4096
    dropout: float = 0.1
    attn_dropout: float | None = None  # None: same as dropout
    position_encoding: str = "kvpe"  # or "sequential" for the ablation
    logvar_floor: float = -13.8

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.n_components < 1 or self.n_layers < 1:
            raise ValueError("need at least one layer and one mixture component")
        if self.position_encoding not in ("kvpe", "sequential"):
            raise ValueError(f"unknown position encoding {self.position_encoding!r}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Batch:
    """Left-padded tensors; ``kinds``/``rows`` index the masks for token ``t + 1``."""

    tokens: torch.Tensor  # (B, T) long
    path_ids: torch.Tensor  # (B, T, D) long, -1 = empty slot
    path_is_index: torch.Tensor  # (B, T, D) bool
    values: torch.Tensor  # (B, T) float, scaled value at NUM positions
    positions: torch.Tensor  # (B, T) long, 0 at the first real token
    kinds: torch.Tensor | None = None  # (B, T) long
    rows: torch.Tensor | None = None  # (B, T) long

    def to(self, dtype: torch.dtype) -> "Batch":
        return Batch(**{**self.__dict__, "values": self.values.to(dtype)})


@dataclass
class MoGOutput:
    log_weights: torch.Tensor  # (..., K)
    means: torch.Tensor
    log_vars: torch.Tensor

    @property
    def weights(self) -> torch.Tensor:
        return self.log_weights.exp()


@dataclass
class KVCache:
    keys: list = field(default_factory=list)
    values: list = field(default_factory=list)
    length: int = 0


class CausalSelfAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int, attn_dropout: float, resid_dropout: float):
        super().__init__()
        self.n_heads = n_heads
        self.qkv = nn.Linear(d_model, 3 * d_model)
        self.proj = nn.Linear(d_model, d_model)
        self.attn_dropout = attn_dropout
        self.resid_dropout = nn.Dropout(resid_dropout)

    def forward(self, x, allowed=None, cache: KVCache | None = None, layer: int = 0):
        B, T, d = x.shape
        q, k, v = self.qkv(x).split(d, dim=-1)
        q, k, v = (t.view(B, T, self.n_heads, d // self.n_heads).transpose(1, 2) for t in (q, k, v))
        if cache is not None:
            if layer < len(cache.keys):
                k = torch.cat([cache.keys[layer], k], dim=2)
                v = torch.cat([cache.values[layer], v], dim=2)
                cache.keys[layer], cache.values[layer] = k, v
            else:
                cache.keys.append(k)
                cache.values.append(v)
        y = F.scaled_dot_product_attention(
            q, k, v, attn_mask=allowed, dropout_p=self.attn_dropout if self.training else 0.0
        )
        y = y.transpose(1, 2).reshape(B, T, d)
        return self.resid_dropout(self.proj(y))


class Block(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.ln1 = nn.LayerNorm(cfg.d_model)
        attn_dropout = cfg.dropout if cfg.attn_dropout is None else cfg.attn_dropout
        self.attn = CausalSelfAttention(cfg.d_model, cfg.n_heads, attn_dropout, cfg.dropout)
        self.ln2 = nn.LayerNorm(cfg.d_model)
        self.ffn = nn.Sequential(
            nn.Linear(cfg.d_model, cfg.d_ff),
            nn.GELU(),
            nn.Linear(cfg.d_ff, cfg.d_model),
            nn.Dropout(cfg.dropout),
        )

    def forward(self, h, allowed=None, cache=None, layer=0):
        z = h + self.attn(self.ln1(h), allowed, cache, layer)
        return z + self.ffn(self.ln2(z))


class DualHeadTransformer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.d_model
        self.tok_emb = nn.Embedding(cfg.vocab_size, d)
        self.idx_emb = nn.Embedding(cfg.max_index + 1, d)
        self.v_num = nn.Parameter(torch.empty(d))
        if cfg.position_encoding == "sequential":
            self.pos_emb = nn.Embedding(cfg.max_seq_len, d)
        self.emb_dropout = nn.Dropout(cfg.dropout)
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.n_layers))
        self.ln_f = nn.LayerNorm(d)
        self.head_discrete = nn.Linear(d, cfg.vocab_size)
        self.head_continuous = nn.Linear(d, 3 * cfg.n_components)
        self.reset_parameters()

    def reset_parameters(self):
        for m in self.modules():
            if isinstance(m, (nn.Linear, nn.Embedding)):
                nn.init.normal_(m.weight, 0.0, 0.02)
                if getattr(m, "bias", None) is not None:
                    nn.init.zeros_(m.bias)
            elif isinstance(m, nn.LayerNorm):
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)
        nn.init.normal_(self.v_num, 0.0, 0.02)

    def kvpe(self, path_ids: torch.Tensor, is_index: torch.Tensor) -> torch.Tensor:
        """Sum of path-element embeddings; keys share the token table."""
        present = path_ids >= 0
        ids = path_ids.clamp(min=0)
        if bool((ids[is_index & present] > self.cfg.max_index).any()):
            raise ValueError(f"array index beyond capacity {self.cfg.max_index}")
        key_mask = (present & ~is_index).unsqueeze(-1)
        idx_mask = (present & is_index).unsqueeze(-1)
        keys = self.tok_emb(ids.masked_fill(is_index, 0)) * key_mask
        idx = self.idx_emb(ids.masked_fill(~is_index, 0)) * idx_mask
        return (keys + idx).sum(dim=-2)

    def embed(self, batch: Batch) -> torch.Tensor:
        tok = self.tok_emb(batch.tokens)
        is_num = (batch.tokens == NUM).unsqueeze(-1)
        tok = torch.where(is_num, batch.values.unsqueeze(-1).to(tok.dtype) * self.v_num, tok)
        if self.cfg.position_encoding == "kvpe":
            pos = self.kvpe(batch.path_ids, batch.path_is_index)
        else:
            pos = self.pos_emb(batch.positions)
        return tok + pos

    def forward(self, batch: Batch, cache: KVCache | None = None) -> torch.Tensor:
        """Final hidden states ``(B, T, d)``."""
        B, T = batch.tokens.shape
        past = cache.length if cache is not None else 0
        if past + T > self.cfg.max_seq_len:
            raise ValueError(f"sequence length {past + T} exceeds {self.cfg.max_seq_len}")
        h = self.emb_dropout(self.embed(batch))
        bias = None
        if cache is None or T > 1:
            # additive float masks take a faster SDPA path than boolean ones
            allowed = self.attention_mask(batch.tokens, past)
            bias = torch.zeros(allowed.shape, dtype=h.dtype).masked_fill(~allowed, float("-inf"))
        for i, block in enumerate(self.blocks):
            h = block(h, bias, cache, i)
        if cache is not None:
            cache.length = past + T
        return self.ln_f(h)

    @staticmethod
    def attention_mask(tokens: torch.Tensor, past: int = 0) -> torch.Tensor:
        """``(B, 1, T, past+T)``: causal, pad keys hidden, pads may see themselves."""
        B, T = tokens.shape
        S = past + T
        q = torch.arange(T, device=tokens.device).unsqueeze(1) + past
        k = torch.arange(S, device=tokens.device).unsqueeze(0)
        causal = k <= q
        not_pad = torch.ones(B, S, dtype=torch.bool, device=tokens.device)
        not_pad[:, past:] = tokens != PAD
        allowed = causal.unsqueeze(0) & not_pad.unsqueeze(1)
        allowed = allowed | (k == q).unsqueeze(0)
        return allowed.unsqueeze(1)

    def discrete_logits(self, h: torch.Tensor) -> torch.Tensor:
        return self.head_discrete(h)

    def mog_params(self, h: torch.Tensor) -> MoGOutput:
        raw = self.head_continuous(h)
        logits, means, log_vars = raw.split(self.cfg.n_components, dim=-1)
        return MoGOutput(
            log_weights=F.log_softmax(logits, dim=-1),
            means=means,
            log_vars=log_vars.clamp(min=self.cfg.logvar_floor),
        )

    def n_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())


def apply_mask(logits: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Disabled entries become ``-inf``."""
    if not bool(mask.any(dim=-1).all()):
        raise ValueError("mask disables every token")
    return logits.masked_fill(~mask, float("-inf"))


def mog_nll(out: MoGOutput, target: torch.Tensor) -> torch.Tensor:
    """``-log sum_j pi_j N(target; mu_j, sigma_j^2)`` via log-sum-exp."""
    x = target.unsqueeze(-1)
    log_norm = -0.5 * (LOG_2PI + out.log_vars + (x - out.means) ** 2 * torch.exp(-out.log_vars))
    return -torch.logsumexp(out.log_weights + log_norm, dim=-1)


@dataclass
class LossParts:
    total: torch.Tensor
    ce: torch.Tensor
    nll: torch.Tensor
    lam: float
    n_targets: int
    n_num: int


def total_loss(
    model: DualHeadTransformer,
    batch: Batch,
    grammar_table: torch.Tensor | None,
    schema_matrix: torch.Tensor | None,
) -> LossParts:
    """Masked next-token CE plus ``lambda`` times the MoG NLL on NUM targets.

    ``lambda`` is the share of NUM tokens among non-pad targets in the batch.
    Passing ``None`` tables trains without constraint masks.
    """
    h = model(batch)
    targets = batch.tokens[:, 1:]
    valid = targets != PAD
    hs = h[:, :-1][valid]
    tgt = targets[valid]
    logits = model.discrete_logits(hs)
    if grammar_table is not None:
        mask = grammar_table[batch.kinds[:, :-1][valid]]
        if schema_matrix is not None:
            mask = mask & schema_matrix[batch.rows[:, :-1][valid]]
        logits = apply_mask(logits, mask)
    ce = F.cross_entropy(logits, tgt)
    n = int(tgt.numel())
    is_num = tgt == NUM
    n_num = int(is_num.sum())
    if n_num:
        mog = model.mog_params(hs[is_num])
        nll = mog_nll(mog, batch.values[:, 1:][valid][is_num].to(hs.dtype)).mean()
        lam = n_num / n
        total = ce + lam * nll
    else:
        nll = torch.zeros((), dtype=ce.dtype)
        lam = 0.0
        total = ce
    return LossParts(total, ce, nll, lam, n, n_num)
