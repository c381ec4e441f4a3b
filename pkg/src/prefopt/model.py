"""Transformer policy over preference histories.

Duels and candidate points are embedded with separate MLPs into a shared
token space, run through a masked pre-norm transformer (no positional
encodings: histories are sets), and decoded by two heads: an acquisition
head scoring candidate pairs (its SoftMax is the proposal policy) and a
prediction head emitting a Gaussian utility belief per point.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .data import History, PredictionSplit

VAR_FLOOR = 1e-6


@dataclass
class ModelConfig:
    dimension: int
    embed_dim: int = 64
    ff_dim: int = 128
    layers: int = 6
    heads: int = 4
    embedder_hidden_layers: int = 3
    head_hidden_layers: int = 1
    head_hidden_dim: int = 128
    use_time_features: bool = True

    def __post_init__(self):
        if self.embed_dim % self.heads != 0:
            raise ValueError("embed_dim must be divisible by heads")

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def _mlp(in_dim: int, hidden: int, out_dim: int, hidden_layers: int) -> nn.Sequential:
    dims = [in_dim] + [hidden] * hidden_layers + [out_dim]
    layers: list[nn.Module] = []
    for i in range(len(dims) - 1):
        layers.append(nn.Linear(dims[i], dims[i + 1]))
        if i < len(dims) - 2:
            layers.append(nn.ReLU())
    return nn.Sequential(*layers)


def build_mask(n_ctx: int, n_query: int, device=None) -> torch.Tensor:
    """Boolean attention mask (True = may attend).

    Context tokens attend to all context tokens; each query token attends to
    all context tokens and to itself only.
    """
    if n_ctx < 0 or n_query < 1:
        raise ValueError("need n_ctx >= 0 and n_query >= 1")
    n = n_ctx + n_query
    mask = torch.zeros(n, n, dtype=torch.bool, device=device)
    mask[:n_ctx, :n_ctx] = True
    mask[n_ctx:, :n_ctx] = True
    mask[n_ctx:, n_ctx:] = torch.eye(n_query, dtype=torch.bool, device=device)
    return mask


class SelfAttention(nn.Module):
    def __init__(self, embed_dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.head_dim = embed_dim // heads
        self.qkv = nn.Linear(embed_dim, 3 * embed_dim)
        self.out = nn.Linear(embed_dim, embed_dim)

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        b, n, e = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.heads, self.head_dim)
        q, k, v = qkv.permute(2, 0, 3, 1, 4)  # each (b, h, n, dh)
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        if mask.dim() == 2:
            blocked = ~mask[None, None]
        else:
            blocked = ~mask[:, None]
        scores = scores.masked_fill(blocked, float("-inf"))
        attn = torch.softmax(scores, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, e)
        return self.out(out)


class TransformerBlock(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.norm1 = nn.LayerNorm(cfg.embed_dim)
        self.attn = SelfAttention(cfg.embed_dim, cfg.heads)
        self.norm2 = nn.LayerNorm(cfg.embed_dim)
        self.ff = nn.Sequential(
            nn.Linear(cfg.embed_dim, cfg.ff_dim),
            nn.GELU(),
            nn.Linear(cfg.ff_dim, cfg.embed_dim),
        )

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x), mask)
        x = x + self.ff(self.norm2(x))
        return x


@dataclass
class PolicyDistribution:
    """Categorical distribution over candidate pairs."""

    pairs: np.ndarray  # (M, 2) indices, aligned with logits
    logits: torch.Tensor  # (M,)
    log_probs: torch.Tensor = field(init=False)

    def __post_init__(self):
        if self.logits.numel() == 0:
            raise ValueError("policy needs at least one candidate pair")
        if torch.all(torch.isinf(self.logits) & (self.logits < 0)):
            raise ValueError("all logits are -inf")
        self.log_probs = torch.log_softmax(self.logits, dim=-1)

    @property
    def probs(self) -> torch.Tensor:
        return self.log_probs.exp()

    def sample(self, generator: torch.Generator | None = None) -> int:
        return int(
            torch.multinomial(self.probs.detach(), 1, generator=generator).item()
        )

    def argmax(self) -> int:
        return int(torch.argmax(self.logits).item())


@dataclass
class GaussianPrediction:
    mean: torch.Tensor
    var: torch.Tensor


class PreferencePolicy(nn.Module):
    """Embedders, masked transformer trunk, acquisition and prediction heads."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        e = cfg.embed_dim
        self.embed_x1 = _mlp(cfg.dimension, e, e, cfg.embedder_hidden_layers)
        self.embed_x2 = _mlp(cfg.dimension, e, e, cfg.embedder_hidden_layers)
        self.embed_label = _mlp(1, e, e, cfg.embedder_hidden_layers)
        self.blocks = nn.ModuleList(
            TransformerBlock(cfg) for _ in range(cfg.layers)
        )
        self.final_norm = nn.LayerNorm(e)
        acq_in = 2 * e + (1 if cfg.use_time_features else 0)
        self.acq_head = _mlp(acq_in, cfg.head_hidden_dim, 1, cfg.head_hidden_layers)
        self.pred_head = _mlp(e, cfg.head_hidden_dim, 2, cfg.head_hidden_layers)

    @property
    def _dtype(self) -> torch.dtype:
        return next(self.parameters()).dtype

    def _tensor(self, arr) -> torch.Tensor:
        return torch.as_tensor(np.asarray(arr), dtype=self._dtype)

    # -- embedding ---------------------------------------------------------

    def embed_duel(self, x1, x2, labels) -> torch.Tensor:
        """Duel token: sum of the two point embeddings and the label
        embedding. Distinct embedders for the first and second point keep
        the pair order recoverable."""
        x1, x2 = self._tensor(x1), self._tensor(x2)
        lab = self._tensor(labels).unsqueeze(-1)
        if x1.shape[-1] != self.cfg.dimension:
            raise ValueError("duel point dimension does not match model")
        return self.embed_x1(x1) + self.embed_x2(x2) + self.embed_label(lab)

    def embed_point(self, x) -> torch.Tensor:
        x = self._tensor(x)
        if x.shape[-1] != self.cfg.dimension:
            raise ValueError("point dimension does not match model")
        return self.embed_x1(x)

    # -- trunk -------------------------------------------------------------

    def transformer_forward(self, tokens: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        """Apply the masked pre-norm transformer stack.

        ``tokens`` is (B, L, E) or (L, E); ``mask`` is (L, L) or (B, L, L).
        """
        squeeze = tokens.dim() == 2
        if squeeze:
            tokens = tokens.unsqueeze(0)
        x = tokens
        for block in self.blocks:
            x = block(x, mask)
        x = self.final_norm(x)
        if not torch.isfinite(x).all():
            raise FloatingPointError("non-finite transformer output")
        return x.squeeze(0) if squeeze else x

    def encode_query(
        self,
        ctx_tokens: torch.Tensor,
        query_tokens: torch.Tensor,
        mask: torch.Tensor | None = None,
    ) -> torch.Tensor:
        """Run context + query tokens through the trunk, returning the query
        outputs. Works batched ((B, n, E)) or flat ((n, E))."""
        n_ctx = ctx_tokens.shape[-2]
        n_query = query_tokens.shape[-2]
        tokens = torch.cat([ctx_tokens, query_tokens], dim=-2)
        if mask is None:
            mask = build_mask(n_ctx, n_query, device=tokens.device)
        out = self.transformer_forward(tokens, mask)
        return out[..., n_ctx:, :]

    # -- heads -------------------------------------------------------------

    def acquisition_scores(
        self, lam_q: torch.Tensor, pairs, t: int, budget: int
    ) -> torch.Tensor:
        """Pair logits from query-token outputs. ``lam_q`` is (S, E) or
        (B, S, E); ``pairs`` is (M, 2) or (B, M, 2) index array."""
        if t > budget:
            raise ValueError(f"step {t} exceeds budget {budget}")
        pairs_t = torch.as_tensor(np.asarray(pairs), dtype=torch.long)
        if lam_q.dim() == 2:
            feat_i = lam_q[pairs_t[:, 0]]
            feat_j = lam_q[pairs_t[:, 1]]
        else:
            b = lam_q.shape[0]
            bi = torch.arange(b)[:, None]
            feat_i = lam_q[bi, pairs_t[..., 0]]
            feat_j = lam_q[bi, pairs_t[..., 1]]
        feats = [feat_i, feat_j]
        if self.cfg.use_time_features:
            tau = torch.full(
                feat_i.shape[:-1] + (1,), t / budget, dtype=lam_q.dtype
            )
            feats.append(tau)
        return self.acq_head(torch.cat(feats, dim=-1)).squeeze(-1)

    def predict_gaussian(self, lam: torch.Tensor) -> GaussianPrediction:
        out = self.pred_head(lam)
        mean = out[..., 0]
        var = nn.functional.softplus(out[..., 1]) + VAR_FLOOR
        return GaussianPrediction(mean=mean, var=var)

    @staticmethod
    def preference_probability(
        pred: GaussianPrediction,
        pairs: torch.Tensor,
        noise: torch.Tensor,
    ) -> torch.Tensor:
        """Probability that the second point of each pair is preferred.

        Utilities are sampled with the reparameterization trick from the
        per-point Gaussians; ``noise`` holds the standard-normal draws,
        aligned with ``pred``.
        """
        ybar = pred.mean + torch.sqrt(pred.var) * noise
        return torch.sigmoid(ybar[..., pairs[..., 1]] - ybar[..., pairs[..., 0]])

    # -- composed passes ---------------------------------------------------

    def forward_acquisition(
        self,
        history: History,
        query_points: np.ndarray,
        pairs: np.ndarray,
        t: int,
        budget: int,
    ) -> PolicyDistribution:
        """Policy over candidate pairs given the duel history."""
        hx1, hx2, hl = history.arrays()
        ctx = (
            self.embed_duel(hx1, hx2, hl)
            if hl.shape[0]
            else torch.zeros(0, self.cfg.embed_dim, dtype=self._dtype)
        )
        lam_q = self.encode_query(ctx, self.embed_point(query_points))
        logits = self.acquisition_scores(lam_q, pairs, t, budget)
        return PolicyDistribution(pairs=np.asarray(pairs), logits=logits)

    def forward_prediction(
        self,
        split: PredictionSplit,
        generator: torch.Generator | None = None,
        noise: torch.Tensor | None = None,
    ) -> tuple[torch.Tensor, GaussianPrediction]:
        """Predicted preference probability for each held-out pair."""
        if split.n_ctx < 1:
            raise ValueError("prediction context must hold at least one duel")
        ctx = self.embed_duel(split.ctx_x1, split.ctx_x2, split.ctx_labels)
        lam = self.encode_query(ctx, self.embed_point(split.tar_points))
        pred = self.predict_gaussian(lam)
        if noise is None:
            noise = torch.randn(
                pred.mean.shape, dtype=pred.mean.dtype, generator=generator
            )
        pairs = torch.as_tensor(split.tar_pairs, dtype=torch.long)
        lbar = self.preference_probability(pred, pairs, noise)
        return lbar, pred
