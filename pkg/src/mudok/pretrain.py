"""Dual-objective pre-training over the merged KG, checkpoints and parameter census."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from . import autodiff as ad
from .checkpoint import load_checkpoint, save_checkpoint, sidecar_path
from .encoder import EncoderConfig, ItemEncoder, encode_items
from .kg_data import FeatureTable, MultiDomainKG, sample_batch_neighborhoods
from .losses import contrastive_loss, kg_triple_loss, total_loss

log = logging.getLogger(__name__)


class PretrainDivergence(FloatingPointError):
    pass


@dataclass
class PretrainConfig:
    batch_size: int = 1024
    d_model: int = 128
    d_feat: int = 768
    n: int = 8
    tau: float = 0.1
    lam: float = 0.1
    epochs: int = 5
    learning_rate: float = 5e-4
    dropout: float = 0.1
    n_layers: int = 2
    heads: int = 4
    seed: int = 0
    use_con: bool = True
    cross_batch_negatives: bool = False
    dtype: str = "float32"

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be > 0")
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        for name in ("batch_size", "d_model", "d_feat", "n", "epochs", "heads"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    def encoder_config(self, n_relations: int) -> EncoderConfig:
        return EncoderConfig(
            d_feat=self.d_feat,
            d_model=self.d_model,
            n_relations=n_relations,
            n_layers=self.n_layers,
            heads=self.heads,
            dropout=self.dropout,
        )

    @classmethod
    def from_dict(cls, d: dict) -> "PretrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown pretrain config keys: {sorted(unknown)}")
        return cls(**d)


def torch_dtype(name: str) -> torch.dtype:
    return {"float32": torch.float32, "float64": torch.float64}[name]


# ---------------------------------------------------------------- losses on a batch


def batch_losses(
    encoder: ItemEncoder,
    kg: MultiDomainKG,
    features: FeatureTable,
    items: Sequence[int],
    neighborhoods: tuple[np.ndarray, np.ndarray],
    config: PretrainConfig,
    stream: ad.RngStream,
    train: bool = True,
) -> tuple[torch.Tensor, torch.Tensor]:
    """(L_con, L_kg) as batch sums. Two passes share the neighbourhoods and draw
    successive (disjoint) dropout counters from ``stream``."""
    out1, full, pairs = encode_items(encoder, kg, features, items, config.n, None, stream, train, neighborhoods=neighborhoods)
    if config.use_con:
        out2, _, _ = encode_items(encoder, kg, features, items, config.n, None, stream, train, neighborhoods=neighborhoods)
        l_con = contrastive_loss(out1[:, 0], out2[:, 0], config.tau)
    else:
        l_con = out1.new_zeros(())
    mask = full[:, 1:]
    rel = ad.embedding_lookup(encoder.relation_table, torch.from_numpy(pairs[..., 0]).clamp_min(0))
    if config.cross_batch_negatives:
        l_kg = _cross_batch_kg_loss(out1[:, 0], rel, out1[:, 1:], mask)
    else:
        l_kg = kg_triple_loss(out1[:, 0], rel, out1[:, 1:], mask)
    return l_con, l_kg


def _cross_batch_kg_loss(heads, relations, tails, mask):
    B, n, d = tails.shape
    flat_tails = tails.reshape(B * n, d)
    flat_mask = mask.reshape(B * n)
    scores = (heads[:, None, :] * relations) @ flat_tails.T  # B,n,B*n
    scores = scores.masked_fill(~flat_mask[None, None, :], float("-inf"))
    target = torch.arange(B * n).view(B, n)
    usable = mask & (flat_mask.sum() >= 2)
    safe = scores.masked_fill(~usable[:, :, None], 0.0)
    logp = safe.gather(2, target[..., None])[..., 0] - torch.logsumexp(safe, dim=2)
    return -(logp * usable.to(logp.dtype)).sum()


def pretrain_step(
    encoder: ItemEncoder,
    optimizer: torch.optim.Optimizer,
    kg: MultiDomainKG,
    features: FeatureTable,
    items: Sequence[int],
    config: PretrainConfig,
    rng: np.random.Generator,
    stream: ad.RngStream,
) -> dict:
    """One optimiser step on the mean loss; reports summed components."""
    neigh = sample_batch_neighborhoods(kg, items, config.n, rng)
    optimizer.zero_grad(set_to_none=True)
    l_con, l_kg = batch_losses(encoder, kg, features, items, neigh, config, stream)
    loss = total_loss(l_con, l_kg, config.lam, config.use_con)
    if not bool(torch.isfinite(loss)):
        raise PretrainDivergence(
            f"non-finite loss: L_con={l_con.item()}, L_kg={l_kg.item()}, items={list(items)[:16]}..."
        )
    ad.backward(loss / len(items), list(encoder.parameters()))
    optimizer.step()
    return {
        "l_con": l_con.item() if config.use_con else 0.0,
        "l_kg": l_kg.item(),
        "lam": config.lam,
        "kg_term": config.lam * l_kg.item(),
        "total": loss.item(),
        "batch": len(items),
    }


def make_optimizer(params: Iterable[torch.nn.Parameter], lr: float) -> torch.optim.Optimizer:
    return torch.optim.Adam(params, lr=lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0)


@dataclass
class PretrainResult:
    encoder: ItemEncoder
    steps: list[dict] = field(default_factory=list)
    epochs: list[dict] = field(default_factory=list)


def pretrain(
    kg: MultiDomainKG,
    features: FeatureTable,
    config: PretrainConfig,
    domains: Sequence[str] | None = None,
    encoder: ItemEncoder | None = None,
) -> PretrainResult:
    """Train a fresh (or given) encoder on the items of ``domains`` (default all)."""
    if features.rows is not None and features.dim != config.d_feat:
        raise ValueError(f"features have dim {features.dim}, config expects d_feat={config.d_feat}")
    domains = list(kg.domains) if domains is None else list(domains)
    if not domains:
        raise ValueError("empty domain selection")
    items = [i for d in domains for i in kg.domain_items(d)]
    if not items:
        raise ValueError(f"no items in domains {domains}")
    torch.manual_seed(config.seed)
    if encoder is None:
        encoder = ItemEncoder(config.encoder_config(kg.n_relations), seed=config.seed)
    encoder = encoder.to(torch_dtype(config.dtype))
    optimizer = make_optimizer(encoder.parameters(), config.learning_rate)
    stream = ad.RngStream(config.seed)
    result = PretrainResult(encoder)
    for epoch in range(config.epochs):
        rng = np.random.default_rng([config.seed, epoch])
        order = rng.permutation(len(items))
        t0 = time.perf_counter()
        sums = {"l_con": 0.0, "l_kg": 0.0, "total": 0.0}
        encoder.train()
        for start in range(0, len(order), config.batch_size):
            batch = [items[k] for k in order[start : start + config.batch_size]]
            rep = pretrain_step(encoder, optimizer, kg, features, batch, config, rng, stream)
            rep["epoch"] = epoch
            result.steps.append(rep)
            for k in sums:
                sums[k] += rep[k]
        seconds = time.perf_counter() - t0
        ep = {"epoch": epoch, **{k: v / len(items) for k, v in sums.items()}, "seconds": round(seconds, 1)}
        result.epochs.append(ep)
        log.info("epoch %d  L_con %.4f  L_kg %.4f  %.1fs", epoch, ep["l_con"], ep["l_kg"], seconds)
    encoder.eval()
    return result


# ---------------------------------------------------------------- checkpoints


def encoder_tensors(encoder: ItemEncoder) -> dict[str, torch.Tensor]:
    return {name: p.detach() for name, p in encoder.named_parameters()}


def expected_encoder_shapes(config: EncoderConfig) -> dict[str, tuple[int, ...]]:
    meta = ItemEncoder(config, device="meta", seed=None)
    return {name: tuple(p.shape) for name, p in meta.named_parameters()}


def save_encoder(path: str | Path, encoder: ItemEncoder, extra: dict | None = None, tensors: dict | None = None) -> Path:
    named = encoder_tensors(encoder)
    if tensors:
        named.update(tensors)
    return save_checkpoint(path, named, {"encoder": encoder.config.to_dict(), **(extra or {})})


def load_encoder(path: str | Path, config: EncoderConfig | None = None) -> tuple[ItemEncoder, dict, dict]:
    """Returns (encoder, sidecar config, extra tensors not owned by the encoder)."""
    side = json.loads(sidecar_path(path).read_text(encoding="utf-8")) if sidecar_path(path).exists() else {}
    stored = side.get("config", {}).get("encoder")
    if config is None:
        if stored is None:
            raise ValueError(f"{path}: no encoder config in sidecar and none supplied")
        config = EncoderConfig(**stored)
    shapes = expected_encoder_shapes(config)
    tensors, cfg = load_checkpoint(path, shapes)
    encoder = ItemEncoder(config, seed=None)
    own = encoder.state_dict()
    with torch.no_grad():
        for name in own:
            own[name].copy_(tensors[name])
    extra = {k: v for k, v in tensors.items() if k not in own}
    encoder.eval()
    return encoder, cfg, extra


# ---------------------------------------------------------------- census


def _numel(x) -> int:
    if isinstance(x, FeatureTable):
        x = x.rows
    shape = x.shape if hasattr(x, "shape") else tuple(x)
    return math.prod(int(s) for s in shape)


def parameter_census(
    encoder: torch.nn.Module,
    features,
    prefix_table: torch.nn.Module | None = None,
    heads: Sequence[torch.nn.Module] = (),
) -> dict:
    """Walk every tensor: frozen features, encoder, optional prefix table and task heads."""
    breakdown: dict[str, int] = {"features": _numel(features)}
    trainable = 0
    modules = [("encoder", encoder)] + ([("ppt", prefix_table)] if prefix_table is not None else [])
    modules += [(f"head{i}", h) for i, h in enumerate(heads)]
    for prefix, mod in modules:
        for name, p in mod.named_parameters():
            breakdown[f"{prefix}.{name}"] = p.numel()
            if p.requires_grad:
                trainable += p.numel()
    total = sum(breakdown.values())
    return {"total": total, "trainable": trainable, "ratio": trainable / total, "breakdown": breakdown}


def closed_form_census(
    config: EncoderConfig,
    n_entities: int,
    n_items: int = 0,
    d_p: int = 0,
    head_params: int = 0,
    backbone_trainable: bool = True,
) -> dict:
    d, f = config.d_model, config.d_ff
    per_layer = 4 * d * d + 2 * d * f + f + d + 4 * d
    backbone = config.d_feat * d + config.n_relations * d + config.n_layers * per_layer
    prefix = n_items * d_p + d_p * d if d_p else 0
    total = n_entities * config.d_feat + backbone + prefix + head_params
    trainable = (backbone if backbone_trainable else 0) + prefix + head_params
    return {"total": total, "trainable": trainable, "ratio": trainable / total}


def freeze(module: torch.nn.Module) -> torch.nn.Module:
    for p in module.parameters():
        p.requires_grad_(False)
    return module


def config_dict(config: PretrainConfig) -> dict:
    return asdict(config)
