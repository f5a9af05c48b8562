"""Prefix prompt tuning: one trainable token per item, added to the head input."""
from __future__ import annotations

from typing import Mapping, Sequence

import numpy as np
import torch
from torch import nn

from . import autodiff as ad
from .encoder import ItemEncoder, encode_items, gather_features
from .kg_data import FeatureTable, MultiDomainKG, sample_batch_neighborhoods


class FrozenBackboneError(AssertionError):
    pass


class PrefixTable(nn.Module):
    """``tokens`` (|items|, d_p) start at zero; ``W_p`` (d_p, d_model) maps them
    into the encoder's input space."""

    def __init__(self, items: Sequence[int], d_p: int = 16, d_model: int = 128, seed: int | None = 0,
                 init_std: float = 0.02):
        super().__init__()
        self.items = [int(i) for i in items]
        self.row = {item: k for k, item in enumerate(self.items)}
        self.tokens = nn.Parameter(torch.zeros(len(self.items), d_p))
        if seed is None:  # shape-only construction (e.g. on the meta device)
            self.W_p = nn.Parameter(torch.empty(d_p, d_model))
        else:
            g = torch.Generator().manual_seed(seed)
            self.W_p = nn.Parameter(torch.randn(d_p, d_model, generator=g) * init_std)

    def rows_for(self, items: Sequence[int]) -> torch.Tensor:
        missing = [i for i in items if int(i) not in self.row]
        if missing:
            raise KeyError(f"no prefix row for item(s) {missing[:5]}")
        return torch.tensor([self.row[int(i)] for i in items], dtype=torch.long)

    def offsets(self, items: Sequence[int]) -> torch.Tensor:
        return ad.matmul(ad.embedding_lookup(self.tokens, self.rows_for(items)), self.W_p)

    def named_tensors(self) -> dict[str, torch.Tensor]:
        return {"ppt.tokens": self.tokens.detach(), "ppt.W_p": self.W_p.detach()}


def prompted_representations(
    backbone: ItemEncoder,
    prefix: PrefixTable | None,
    kg: MultiDomainKG,
    features: FeatureTable,
    items: Sequence[int],
    n: int = 8,
    rng: np.random.Generator | None = None,
    stream: ad.RngStream | None = None,
    train: bool = False,
    neighborhoods=None,
) -> torch.Tensor:
    """Position-0 encoder outputs (B, d_model) with prefixes injected."""
    rng = rng if rng is not None else np.random.default_rng(0)
    offset = prefix.offsets(items).to(backbone.W_proj.dtype) if prefix is not None else None
    out, _, _ = encode_items(backbone, kg, features, items, n, rng, stream, train, offset, neighborhoods)
    return out[:, 0]


class FrozenInputs:
    """Projected input tokens of a fixed item list under a frozen backbone.

    With the backbone frozen and neighbourhoods fixed, everything before the
    prefix addition is constant, so it is computed once.
    """

    def __init__(self, backbone: ItemEncoder, kg: MultiDomainKG, features: FeatureTable, items: Sequence[int],
                 n: int = 8, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.backbone = backbone
        self.items = [int(i) for i in items]
        self.pos = {item: k for k, item in enumerate(self.items)}
        pairs, mask = sample_batch_neighborhoods(kg, self.items, n, rng)
        head, tail = gather_features(features, kg, self.items, pairs)
        with torch.no_grad():
            self.tokens, self.mask = backbone.input_tokens(head, tail, torch.from_numpy(pairs[..., 0]), torch.from_numpy(mask))

    def encode(self, prefix: PrefixTable | None, items: Sequence[int] | None = None,
               stream: ad.RngStream | None = None, train: bool = False) -> torch.Tensor:
        items = self.items if items is None else [int(i) for i in items]
        idx = torch.tensor([self.pos[i] for i in items], dtype=torch.long)
        tokens, mask = self.tokens[idx], self.mask[idx]
        if prefix is not None:
            offset = prefix.offsets(items).to(tokens.dtype)
            tokens = ad.concat([ad.add(tokens[:, :1], offset[:, None, :]), tokens[:, 1:]], dim=1)
        return self.backbone.encode(tokens, mask, stream, train)[:, 0]


def prompted_item_representation(backbone, prefix, kg, features, item, n=8, rng=None, stream=None, train=False):
    return prompted_representations(backbone, prefix, kg, features, [item], n, rng, stream, train)[0]


def snapshot(modules: Mapping[str, nn.Module], extra: Mapping[str, torch.Tensor] | None = None) -> dict[str, torch.Tensor]:
    """Detached copies of every parameter, keyed ``<prefix>.<name>``."""
    snap = {}
    for prefix, mod in modules.items():
        for name, p in mod.named_parameters():
            snap[f"{prefix}.{name}"] = p.detach().clone()
    for name, t in (extra or {}).items():
        snap[name] = torch.as_tensor(np.array(t, copy=True)) if not isinstance(t, torch.Tensor) else t.detach().clone()
    return snap


def verify_frozen_backbone(
    before: Mapping[str, torch.Tensor],
    after: Mapping[str, torch.Tensor],
    trainable_prefixes: Sequence[str] = ("ppt.",),
) -> dict:
    """Diff two snapshots. Any changed tensor outside ``trainable_prefixes`` is a
    failure naming it; the report lists what changed."""
    changed = sorted(k for k in before if k not in after or not torch.equal(before[k], after[k]))
    illegal = [k for k in changed if not any(k.startswith(p) for p in trainable_prefixes)]
    report = {"changed": changed, "checked": len(before), "ok": not illegal}
    if illegal:
        raise FrozenBackboneError(f"frozen tensors changed during tuning: {', '.join(illegal)}")
    return report
