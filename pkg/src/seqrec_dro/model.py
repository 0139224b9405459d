"""SASRec-style causal transformer with full-catalogue softmax losses."""
from __future__ import annotations

import copy
import hashlib
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, NumericError


@dataclass
class ModelConfig:
    catalogue_size: int
    embed_dim: int = 64
    ff_dim: int = 64
    num_blocks: int = 2
    num_heads: int = 1
    dropout_rate: float = 0.2
    max_len: int = 200
    seed: int = 0
    denominator: str = "valid"

    def __post_init__(self):
        for name in ("embed_dim", "ff_dim", "num_blocks", "num_heads", "max_len", "catalogue_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"model.{name} must be >= 1")
        if not 0 <= self.dropout_rate < 1:
            raise ConfigError("model.dropout_rate must be in [0, 1)")
        if self.embed_dim % self.num_heads:
            raise ConfigError("model.embed_dim must be divisible by model.num_heads")
        if self.denominator not in ("valid", "L"):
            raise ConfigError("model.denominator must be 'valid' or 'L'")


# Best backbone settings reported for the two public datasets.
BACKBONES = {
    "retailrocket": dict(embed_dim=256, ff_dim=256, num_blocks=3, num_heads=1, dropout_rate=0.2, max_len=200),
    "ml1m": dict(embed_dim=256, ff_dim=256, num_blocks=3, num_heads=1, dropout_rate=0.5, max_len=200),
}
BACKBONE_BATCH_SIZE = {"retailrocket": 128, "ml1m": 256}


class CausalSelfAttention(nn.Module):
    def __init__(self, d: int, heads: int, dropout: float):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(d, 3 * d)
        self.out = nn.Linear(d, d)
        self.drop = nn.Dropout(dropout)

    def forward(self, x, attn_mask):
        B, L, d = x.shape
        q, k, v = self.qkv(x).view(B, L, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        scores = q @ k.transpose(-1, -2) / math.sqrt(d // self.heads) + attn_mask[:, None]
        att = self.drop(torch.softmax(scores, dim=-1))
        y = (att @ v).transpose(1, 2).reshape(B, L, d)
        return self.out(y)


class Block(nn.Module):
    def __init__(self, d: int, ff: int, heads: int, dropout: float):
        super().__init__()
        self.ln1 = nn.LayerNorm(d)
        self.attn = CausalSelfAttention(d, heads, dropout)
        self.ln2 = nn.LayerNorm(d)
        self.ff = nn.Sequential(nn.Linear(d, ff), nn.GELU(), nn.Dropout(dropout), nn.Linear(ff, d))
        self.drop = nn.Dropout(dropout)

    def forward(self, x, attn_mask):
        x = x + self.drop(self.attn(self.ln1(x), attn_mask))
        return x + self.drop(self.ff(self.ln2(x)))


class SASRec(nn.Module):
    """Transformer decoder over left-padded item sequences.

    Item scores are dot products with the item embedding table, so the output
    layer shares weights with the input embedding. Row 0 of the table is the
    padding token and never scored.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        c = config
        self.item_emb = nn.Embedding(c.catalogue_size + 1, c.embed_dim, padding_idx=0)
        self.pos_emb = nn.Parameter(torch.empty(c.max_len, c.embed_dim))
        self.emb_drop = nn.Dropout(c.dropout_rate)
        self.blocks = nn.ModuleList(
            Block(c.embed_dim, c.ff_dim, c.num_heads, c.dropout_rate) for _ in range(c.num_blocks)
        )
        self.final_ln = nn.LayerNorm(c.embed_dim)
        self.reset_parameters(c.seed)

    @torch.no_grad()
    def reset_parameters(self, seed: int):
        gen = torch.Generator().manual_seed(seed)
        for name, p in self.named_parameters():
            if name.endswith("bias"):
                p.zero_()
            elif "ln" in name:
                p.fill_(1.0)
            else:
                # truncated normal, std 0.02, cut at 2 std
                p.copy_(torch.fmod(torch.randn(p.shape, generator=gen), 2.0) * 0.02)
        self.item_emb.weight[0].zero_()

    def hidden(self, tokens: torch.Tensor) -> torch.Tensor:
        """Per-position sequence representations, shape ``(B, L, d)``."""
        c = self.config
        if tokens.dim() != 2 or tokens.shape[1] != c.max_len:
            raise ValueError(f"expected tokens of shape (B, {c.max_len}), got {tuple(tokens.shape)}")
        if tokens.numel() and (tokens.min() < 0 or tokens.max() > c.catalogue_size):
            raise IndexError("token index outside the item catalogue")
        valid = tokens > 0
        x = self.item_emb(tokens) * math.sqrt(c.embed_dim) + self.pos_emb
        x = self.emb_drop(x) * valid[..., None]
        L = tokens.shape[1]
        causal = torch.tril(torch.ones(L, L, dtype=torch.bool, device=tokens.device))
        eye = torch.eye(L, dtype=torch.bool, device=tokens.device)
        # padded keys are hidden; a query may always see itself so no row is empty
        allowed = causal & (valid[:, None, :] | eye)
        attn_mask = torch.zeros(allowed.shape, dtype=x.dtype, device=x.device).masked_fill(~allowed, float("-inf"))
        for block in self.blocks:
            x = block(x, attn_mask) * valid[..., None]
        return self.final_ln(x)

    def score(self, h: torch.Tensor) -> torch.Tensor:
        """Logits over items ``1..|I|``; column ``j`` scores item ``j + 1``."""
        return h @ self.item_emb.weight[1:].T

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        return self.score(self.hidden(tokens))


def build_model(config: ModelConfig) -> SASRec:
    return SASRec(config)


def forward(model: SASRec, tokens, train_mode: bool = False) -> torch.Tensor:
    """``(B, L, |I|)`` logits; dropout is active only in ``train_mode``."""
    model.train(train_mode)
    return model(torch.as_tensor(tokens, dtype=torch.long))


@dataclass
class BatchLosses:
    user_ids: list
    per_position: torch.Tensor  # (B, L) float64, zero where masked
    per_user: torch.Tensor  # (B,) float64
    valid_counts: torch.Tensor  # (B,) int64
    targets: torch.Tensor  # (B, L) item indices, 0 = masked
    normalizer: torch.Tensor  # (B,) float64

    @property
    def empty_users(self) -> torch.Tensor:
        return self.valid_counts == 0


def batch_losses(
    model: SASRec, tokens, targets, user_ids=None, denominator: str | None = None
) -> BatchLosses:
    """Per-position softmax cross entropy and per-user averages.

    Logits are formed only at non-masked target positions, so memory scales
    with the number of targets rather than ``B * L * |I|``.
    """
    tokens = torch.as_tensor(tokens, dtype=torch.long)
    targets = torch.as_tensor(targets, dtype=torch.long)
    if targets.shape != tokens.shape:
        raise ValueError("targets must align with tokens")
    denominator = denominator or model.config.denominator
    h = model.hidden(tokens)
    mask = targets > 0
    logits = model.score(h[mask])
    nll = -torch.log_softmax(logits, dim=-1).gather(1, (targets[mask] - 1)[:, None]).squeeze(1)
    per_position = torch.zeros(targets.shape, dtype=torch.float64)
    per_position = per_position.masked_scatter(mask, nll.to(torch.float64))
    counts = mask.sum(dim=1)
    if denominator == "valid":
        normalizer = counts.clamp(min=1).to(torch.float64)
    else:
        normalizer = torch.full((len(counts),), float(targets.shape[1]), dtype=torch.float64)
    per_user = per_position.sum(dim=1) / normalizer
    if user_ids is None:
        user_ids = list(range(len(counts)))
    return BatchLosses(list(user_ids), per_position, per_user, counts, targets, normalizer)


def params_finite(model: nn.Module) -> bool:
    return all(bool(torch.isfinite(p).all()) for p in model.parameters())


def gradient_check(
    model: SASRec,
    tokens,
    targets,
    epsilon: float = 1e-4,
    objective: Callable[[BatchLosses], torch.Tensor] | None = None,
    n_samples: int = 60,
    seed: int = 0,
) -> float:
    """Max relative error between autograd and central finite differences.

    Runs on a float64 copy of ``model`` with dropout off. ``objective`` maps
    BatchLosses to a scalar (default: mean per-user loss). Gradients are
    checked on ``n_samples`` entries drawn across every parameter tensor.
    """
    objective = objective or (lambda b: b.per_user.mean())
    m = copy.deepcopy(model).double().eval()

    def loss() -> torch.Tensor:
        return objective(batch_losses(m, tokens, targets))

    m.zero_grad()
    loss().backward()
    params = [(n, p) for n, p in m.named_parameters()]
    for name, p in params:
        if p.grad is not None and not torch.isfinite(p.grad).all():
            raise NumericError(f"non-finite gradient in {name}")
    rng = np.random.default_rng(seed)
    worst = 0.0
    with torch.no_grad():
        for k in range(n_samples):
            name, p = params[k % len(params)]
            flat = p.view(-1)
            idx = int(rng.integers(flat.numel()))
            if name == "item_emb.weight" and idx < p.shape[1]:
                idx += p.shape[1]  # padding row is not trained
            analytic = 0.0 if p.grad is None else float(p.grad.view(-1)[idx])
            orig = float(flat[idx])
            flat[idx] = orig + epsilon
            up = float(loss())
            flat[idx] = orig - epsilon
            down = float(loss())
            flat[idx] = orig
            numeric = (up - down) / (2 * epsilon)
            err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst


def save_checkpoint(path, model: SASRec, epoch: int, extra: dict | None = None) -> str:
    """Write ``<path>.bin`` (raw little-endian float32 tensors) and ``<path>.json``.

    The JSON manifest lists every tensor's name, shape and byte offset plus
    the model config; returns the sha256 of the binary blob.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blobs, entries, offset = [], [], 0
    for name, t in model.state_dict().items():
        arr = t.detach().cpu().to(torch.float32).numpy().astype("<f4")
        raw = arr.tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    data = b"".join(blobs)
    digest = hashlib.sha256(data).hexdigest()
    path.with_suffix(".bin").write_bytes(data)
    manifest = {
        "format": "seqrec-dro-checkpoint/1",
        "dtype": "float32-le",
        "config": asdict(model.config),
        "seed": model.config.seed,
        "epoch": epoch,
        "sha256": digest,
        "tensors": entries,
        "extra": extra or {},
    }
    path.with_suffix(".json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return digest


def load_checkpoint(path) -> tuple[SASRec, dict]:
    path = Path(path)
    manifest = json.loads(path.with_suffix(".json").read_text())
    data = path.with_suffix(".bin").read_bytes()
    if hashlib.sha256(data).hexdigest() != manifest["sha256"]:
        raise ValueError(f"checkpoint {path} failed its integrity check")
    model = SASRec(ModelConfig(**manifest["config"]))
    state = {}
    for e in manifest["tensors"]:
        arr = np.frombuffer(data, dtype="<f4", count=int(np.prod(e["shape"], dtype=np.int64)), offset=e["offset"])
        state[e["name"]] = torch.from_numpy(arr.reshape(e["shape"]).copy())
    model.load_state_dict(state)
    return model.eval(), manifest
