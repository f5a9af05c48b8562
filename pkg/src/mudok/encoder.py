"""Item-centric transformer encoder without positional embeddings.

An item sequence is the projected head feature followed by ``n`` tail tokens,
each the projected tail feature plus its relation embedding. Padding tails are
masked out of every attention softmax and zeroed after every layer.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

from . import autodiff as ad
from .kg_data import PAD, FeatureTable, MultiDomainKG, sample_batch_neighborhoods


@dataclass(frozen=True)
class EncoderConfig:
    d_feat: int = 768
    d_model: int = 128
    n_relations: int = 1
    n_layers: int = 2
    heads: int = 4
    d_ff: int | None = None
    dropout: float = 0.1
    init_std: float = 0.02

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by heads={self.heads}")
        if self.d_ff is None:
            object.__setattr__(self, "d_ff", 4 * self.d_model)

    def to_dict(self) -> dict:
        return asdict(self)


class EncoderLayer(nn.Module):
    def __init__(self, d_model: int, d_ff: int):
        super().__init__()
        self.W_q = nn.Parameter(torch.empty(d_model, d_model))
        self.W_k = nn.Parameter(torch.empty(d_model, d_model))
        self.W_v = nn.Parameter(torch.empty(d_model, d_model))
        self.W_o = nn.Parameter(torch.empty(d_model, d_model))
        self.ffn_W1 = nn.Parameter(torch.empty(d_model, d_ff))
        self.ffn_b1 = nn.Parameter(torch.zeros(d_ff))
        self.ffn_W2 = nn.Parameter(torch.empty(d_ff, d_model))
        self.ffn_b2 = nn.Parameter(torch.zeros(d_model))
        self.ln1_gamma = nn.Parameter(torch.ones(d_model))
        self.ln1_beta = nn.Parameter(torch.zeros(d_model))
        self.ln2_gamma = nn.Parameter(torch.ones(d_model))
        self.ln2_beta = nn.Parameter(torch.zeros(d_model))

    def forward(self, x, mask, heads, rate, stream, train):
        B, T, D = x.shape
        dk = D // heads

        def split(t):
            return t.view(B, T, heads, dk).transpose(1, 2)  # B,h,T,dk

        q = split(ad.matmul(x, self.W_q))
        k = split(ad.matmul(x, self.W_k))
        v = split(ad.matmul(x, self.W_v))
        logits = ad.matmul(q, k.transpose(-1, -2)) / math.sqrt(dk)
        probs = ad.softmax_row(logits, mask[:, None, None, :])
        probs = ad.dropout(probs, rate, stream, train)
        attn = ad.matmul(probs, v).transpose(1, 2).reshape(B, T, D)
        x = ad.layer_norm(ad.add(x, ad.matmul(attn, self.W_o)), self.ln1_gamma, self.ln1_beta)

        hidden = ad.relu(ad.add(ad.matmul(x, self.ffn_W1), self.ffn_b1))
        hidden = ad.dropout(hidden, rate, stream, train)
        ffn = ad.add(ad.matmul(hidden, self.ffn_W2), self.ffn_b2)
        x = ad.layer_norm(ad.add(x, ffn), self.ln2_gamma, self.ln2_beta)
        return x * mask[..., None].to(x.dtype)


class ItemEncoder(nn.Module):
    """Projection, relation table and the stack of encoder layers."""

    def __init__(self, config: EncoderConfig, device: str | torch.device | None = None, seed: int | None = 0):
        super().__init__()
        self.config = config
        self.W_proj = nn.Parameter(torch.empty(config.d_feat, config.d_model, device=device))
        self.relation_table = nn.Parameter(torch.empty(config.n_relations, config.d_model, device=device))
        self.layers = nn.ModuleList(EncoderLayer(config.d_model, config.d_ff) for _ in range(config.n_layers))
        if device is not None:
            self.to(device)
        if seed is not None and self.W_proj.device.type != "meta":
            self.reset_parameters(seed)

    def reset_parameters(self, seed: int) -> None:
        g = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for name, p in self.named_parameters():
                if "gamma" in name:
                    p.fill_(1.0)
                elif "_b" in name or "beta" in name:
                    p.zero_()
                else:
                    p.copy_(torch.randn(p.shape, generator=g, dtype=torch.float64) * self.config.init_std)

    # ------------------------------------------------------------ input

    def input_tokens(
        self,
        head_feats: torch.Tensor,
        tail_feats: torch.Tensor,
        rels: torch.Tensor,
        mask: torch.Tensor,
        head_offset: torch.Tensor | None = None,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Build (B, n+1, d_model) tokens and the (B, n+1) validity mask.

        ``head_feats`` (B, d_feat), ``tail_feats`` (B, n, d_feat), ``rels`` (B, n)
        with PAD at padding, ``mask`` (B, n). ``head_offset`` is added to the head
        token only.
        """
        d_feat = self.config.d_feat
        if head_feats.shape[-1] != d_feat or tail_feats.shape[-1] != d_feat:
            raise ad.ShapeError(
                f"feature dim {head_feats.shape[-1]}/{tail_feats.shape[-1]} does not match d_feat={d_feat}"
            )
        mask = torch.as_tensor(mask, dtype=torch.bool)
        dtype = self.W_proj.dtype
        head = ad.matmul(head_feats.to(dtype), self.W_proj)
        if head_offset is not None:
            head = ad.add(head, head_offset)
        rels = torch.as_tensor(rels, dtype=torch.long)
        rel_emb = ad.embedding_lookup(self.relation_table, rels.clamp_min(0)) * mask[..., None].to(dtype)
        tails = ad.add(ad.matmul(tail_feats.to(dtype), self.W_proj), rel_emb) * mask[..., None].to(dtype)
        tokens = ad.concat([head[:, None, :], tails], dim=1)
        full_mask = torch.cat([torch.ones(mask.shape[0], 1, dtype=torch.bool), mask], dim=1)
        return tokens, full_mask

    def encode(
        self,
        tokens: torch.Tensor,
        mask: torch.Tensor,
        stream: ad.RngStream | None = None,
        train: bool = False,
    ) -> torch.Tensor:
        """Run the layer stack; accepts (n+1, d) or (B, n+1, d)."""
        single = tokens.dim() == 2
        if single:
            tokens, mask = tokens[None], torch.as_tensor(mask)[None]
        mask = torch.as_tensor(mask, dtype=torch.bool)
        if tokens.shape[:2] != mask.shape or tokens.shape[-1] != self.config.d_model:
            raise ad.ShapeError(f"encode: tokens {tuple(tokens.shape)} vs mask {tuple(mask.shape)}")
        x = tokens
        for layer in self.layers:
            x = layer(x, mask, self.config.heads, self.config.dropout, stream, train)
        return x[0] if single else x

    def forward(self, head_feats, tail_feats, rels, mask, stream=None, train=False, head_offset=None):
        tokens, full_mask = self.input_tokens(head_feats, tail_feats, rels, mask, head_offset)
        return self.encode(tokens, full_mask, stream, train), full_mask


@dataclass
class InputSequence:
    tokens: torch.Tensor  # (n+1, d_model)
    mask: torch.Tensor  # (n+1,)


def gather_features(
    features: FeatureTable, kg: MultiDomainKG, items, pairs: np.ndarray
) -> tuple[torch.Tensor, torch.Tensor]:
    rows = features.rows
    if rows.shape[0] != kg.n_entities:
        raise ad.ShapeError(f"feature table has {rows.shape[0]} rows for {kg.n_entities} entities")
    head = torch.from_numpy(rows[np.asarray(items, dtype=np.int64)])
    tails = np.where(pairs[..., 1] == PAD, 0, pairs[..., 1])
    tail = torch.from_numpy(rows[tails])
    return head, tail


def build_input_sequence(
    kg: MultiDomainKG,
    features: FeatureTable,
    params: ItemEncoder,
    item: int,
    neighborhood: tuple[np.ndarray, np.ndarray],
    head_offset: torch.Tensor | None = None,
) -> InputSequence:
    pairs, mask = neighborhood
    if features.dim != params.config.d_feat:
        raise ad.ShapeError(f"feature dim {features.dim} does not match d_feat={params.config.d_feat}")
    head, tail = gather_features(features, kg, [item], pairs[None])
    offset = None if head_offset is None else head_offset[None]
    tokens, full = params.input_tokens(head, tail, torch.from_numpy(pairs[None, :, 0]), torch.from_numpy(mask[None]), offset)
    return InputSequence(tokens[0], full[0])


def encode_items(
    params: ItemEncoder,
    kg: MultiDomainKG,
    features: FeatureTable,
    items,
    n: int,
    rng: np.random.Generator,
    stream: ad.RngStream | None = None,
    train: bool = False,
    head_offset: torch.Tensor | None = None,
    neighborhoods: tuple[np.ndarray, np.ndarray] | None = None,
):
    """Batched sample + build + encode. Returns (outputs, full mask, pairs)."""
    if features.dim != params.config.d_feat:
        raise ad.ShapeError(f"feature dim {features.dim} does not match d_feat={params.config.d_feat}")
    pairs, mask = neighborhoods if neighborhoods is not None else sample_batch_neighborhoods(kg, items, n, rng)
    head, tail = gather_features(features, kg, items, pairs)
    out, full = params(head, tail, torch.from_numpy(pairs[..., 0]), torch.from_numpy(mask), stream, train, head_offset)
    return out, full, pairs


def item_representation(
    params: ItemEncoder,
    kg: MultiDomainKG,
    features: FeatureTable,
    item: int,
    n: int = 8,
    rng: np.random.Generator | None = None,
    stream: ad.RngStream | None = None,
    train: bool = False,
) -> torch.Tensor:
    rng = rng if rng is not None else np.random.default_rng(0)
    out, _, _ = encode_items(params, kg, features, [item], n, rng, stream, train)
    return out[0, 0]
