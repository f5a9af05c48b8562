"""Recommendation adapter: MF / graph-propagation backbones with prompted items, BPR."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, fields
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import autodiff as ad
from .encoder import ItemEncoder
from .kg_data import FeatureTable, MultiDomainKG
from .metrics import evaluate_ranking
from .ppt import FrozenInputs, PrefixTable, snapshot

log = logging.getLogger(__name__)


class NegativeSamplingError(RuntimeError):
    pass


@dataclass
class InteractionGraph:
    n_users: int
    n_items: int
    item_entities: list[int]  # local item -> KG entity index
    train: np.ndarray  # (E, 2) user, local item
    valid: np.ndarray
    test: np.ndarray

    def __post_init__(self):
        self.train_pos = self._by_user(self.train)
        self.valid_pos = self._by_user(self.valid)
        self.test_pos = self._by_user(self.test)

    def _by_user(self, edges: np.ndarray) -> dict[int, set[int]]:
        out: dict[int, set[int]] = {}
        for u, i in edges:
            out.setdefault(int(u), set()).add(int(i))
        return out

    @classmethod
    def from_interactions(cls, inter) -> "InteractionGraph":
        as_arr = lambda e: np.asarray(e, dtype=np.int64).reshape(-1, 2)
        return cls(len(inter.users), len(inter.items), list(inter.items), as_arr(inter.train), as_arr(inter.valid), as_arr(inter.test))

    def normalized_adjacency(self) -> torch.Tensor:
        """Sparse symmetric (U+I)x(U+I) matrix with 1/sqrt(deg_u deg_i) on train edges."""
        n = self.n_users + self.n_items
        if len(self.train) == 0:
            return torch.sparse_coo_tensor(torch.zeros(2, 0, dtype=torch.long), torch.zeros(0), (n, n),
                                           check_invariants=True).coalesce()
        u = self.train[:, 0]
        i = self.train[:, 1] + self.n_users
        deg = np.bincount(np.concatenate([u, i]), minlength=n).astype(np.float64)
        w = 1.0 / np.sqrt(deg[u] * deg[i])
        rows = np.concatenate([u, i])
        cols = np.concatenate([i, u])
        vals = np.concatenate([w, w])
        return torch.sparse_coo_tensor(
            torch.from_numpy(np.stack([rows, cols])), torch.from_numpy(vals), (n, n), check_invariants=True
        ).coalesce()


@dataclass
class RecConfig:
    backbone: str = "MF"  # MF | GraphProp
    layers: int = 2
    d_rec: int = 32
    lr: float = 1e-3
    batch_size: int = 4096
    epochs: int = 50
    mu: float = 1e-4
    init_std: float = 0.1
    d_p: int = 16
    n: int = 8
    seed: int = 0
    eval_every: int = 0  # 0: evaluate only at the end; otherwise keep the best-validation state
    dropout_in_tuning: bool = False

    @classmethod
    def from_dict(cls, d: dict) -> "RecConfig":
        known = {f.name for f in fields(cls)}
        if set(d) - known:
            raise ValueError(f"unknown rec config keys: {sorted(set(d) - known)}")
        return cls(**d)


class RecModel(nn.Module):
    def __init__(self, n_users: int, n_items: int, d_rec: int = 32, d_model: int = 128, backbone: str = "MF",
                 layers: int = 2, init_std: float = 0.1, seed: int = 0):
        super().__init__()
        if backbone not in ("MF", "GraphProp"):
            raise ValueError(f"unknown backbone {backbone!r}")
        g = torch.Generator().manual_seed(seed)
        self.backbone = backbone
        self.layers = layers
        self.user_emb = nn.Parameter(torch.randn(n_users, d_rec, generator=g) * init_std)
        self.item_emb = nn.Parameter(torch.randn(n_items, d_rec, generator=g) * init_std)
        # zero start: the prompted signal enters only once it has been learned
        self.proj = nn.Parameter(torch.zeros(d_model, d_rec))

    def project(self, prompted: torch.Tensor) -> torch.Tensor:
        return ad.matmul(prompted.to(self.proj.dtype), self.proj)


def propagate_embeddings(
    model: RecModel, adjacency: torch.Tensor | None, prompted_items: torch.Tensor | None
) -> tuple[torch.Tensor, torch.Tensor]:
    """Item input = item_emb + projected prompted representation, then the backbone's
    interaction module (identity for MF; mean over K propagation layers otherwise)."""
    items = model.item_emb if prompted_items is None else ad.add(model.item_emb, prompted_items)
    users = model.user_emb
    if model.backbone == "MF" or model.layers == 0:
        return users, items
    n_users = users.shape[0]
    x = torch.cat([users, items], dim=0)
    adj = adjacency.to(x.dtype)
    acc = x
    for _ in range(model.layers):
        x = torch.sparse.mm(adj, x)
        acc = acc + x
    out = acc / (model.layers + 1)
    return out[:n_users], out[n_users:]


def bpr_loss(pos: torch.Tensor, neg: torch.Tensor, reg_rows: Sequence[torch.Tensor], mu: float) -> torch.Tensor:
    """Summed -log sigmoid(y_uv - y_uw) + mu * squared L2 of the batch's embedding rows."""
    rank = -F.logsigmoid(pos - neg).sum()
    reg = sum((r**2).sum() for r in reg_rows)
    return rank + mu * reg


def sample_negatives(users: np.ndarray, graph: InteractionGraph, rng: np.random.Generator, max_tries: int = 100) -> np.ndarray:
    neg = rng.integers(graph.n_items, size=len(users))
    for k, u in enumerate(users):
        pos = graph.train_pos.get(int(u), set())
        tries = 0
        while int(neg[k]) in pos:
            tries += 1
            if tries > max_tries or len(pos) >= graph.n_items:
                raise NegativeSamplingError(f"user {u}: no negative found after {max_tries} draws")
            neg[k] = rng.integers(graph.n_items)
    return neg


@dataclass
class RecTuner:
    """Everything a recommendation tuning run needs; ``prefix=None`` is the base model."""

    graph: InteractionGraph
    model: RecModel
    config: RecConfig
    backbone: ItemEncoder | None = None
    prefix: PrefixTable | None = None
    kg: MultiDomainKG | None = None
    features: FeatureTable | None = None
    history: list[dict] = field(default_factory=list)

    def __post_init__(self):
        self.adjacency = self.graph.normalized_adjacency() if self.model.backbone == "GraphProp" else None
        self.rng = np.random.default_rng(self.config.seed)
        self.stream = ad.RngStream(self.config.seed + 1)
        params = list(self.model.parameters()) + (list(self.prefix.parameters()) if self.prefix is not None else [])
        self.optimizer = torch.optim.Adam(params, lr=self.config.lr)
        if self.backbone is not None:
            for p in self.backbone.parameters():
                p.requires_grad_(False)
            self.backbone.eval()
            self.inputs = FrozenInputs(self.backbone, self.kg, self.features, self.graph.item_entities, self.config.n,
                                       np.random.default_rng(self.config.seed + 2))

    @property
    def enhanced(self) -> bool:
        return self.backbone is not None

    def prompted_items(self) -> torch.Tensor | None:
        if not self.enhanced:
            return None
        h = self.inputs.encode(self.prefix, None, self.stream, self.config.dropout_in_tuning)
        return self.model.project(h)

    def embeddings(self) -> tuple[torch.Tensor, torch.Tensor]:
        return propagate_embeddings(self.model, self.adjacency, self.prompted_items())

    def batch_loss(self, users: np.ndarray, pos: np.ndarray, neg: np.ndarray) -> torch.Tensor:
        """Summed BPR loss of one batch of (user, positive, negative) triples."""
        U, V = self.embeddings()
        u_t, p_t, n_t = (torch.as_tensor(np.asarray(x), dtype=torch.long) for x in (users, pos, neg))
        y_pos = (U[u_t] * V[p_t]).sum(-1)
        y_neg = (U[u_t] * V[n_t]).sum(-1)
        regs = [self.model.user_emb[u_t], self.model.item_emb[p_t], self.model.item_emb[n_t]]
        return bpr_loss(y_pos, y_neg, regs, self.config.mu)

    def step(self, users: np.ndarray, pos: np.ndarray) -> float:
        neg = sample_negatives(users, self.graph, self.rng)
        self.optimizer.zero_grad(set_to_none=True)
        loss = self.batch_loss(users, pos, neg)
        ad.backward(loss / len(users))
        self.optimizer.step()
        return loss.item() / len(users)

    def fit(self, steps: int | None = None) -> list[dict]:
        """Train for ``config.epochs`` epochs, or exactly ``steps`` optimiser steps."""
        edges = self.graph.train
        if len(edges) == 0:
            raise ValueError("no training interactions")
        best, best_state = -1.0, None
        done = 0
        epoch = 0
        while True:
            if steps is None and epoch >= self.config.epochs:
                break
            order = self.rng.permutation(len(edges))
            losses = []
            for s in range(0, len(order), self.config.batch_size):
                if steps is not None and done >= steps:
                    break
                b = edges[order[s : s + self.config.batch_size]]
                losses.append(self.step(b[:, 0], b[:, 1]))
                done += 1
            epoch += 1
            rec = {"epoch": epoch, "loss": float(np.mean(losses)) if losses else float("nan"), "steps": done}
            if self.config.eval_every and epoch % self.config.eval_every == 0 and self.graph.valid_pos:
                rec["valid"] = self.evaluate("valid")
                score = rec["valid"]["Recall@20"]
                if score > best:
                    best, best_state = score, self._state()
            self.history.append(rec)
            if steps is not None and done >= steps:
                break
        if best_state is not None:
            self._load_state(best_state)
        return self.history

    def _state(self):
        return {k: v.clone() for k, v in snapshot(self._modules_map()).items()}

    def _load_state(self, state):
        with torch.no_grad():
            for prefix, mod in self._modules_map().items():
                for name, p in mod.named_parameters():
                    p.copy_(state[f"{prefix}.{name}"])

    def _modules_map(self) -> dict[str, nn.Module]:
        mods: dict[str, nn.Module] = {"rec": self.model}
        if self.prefix is not None:
            mods["ppt"] = self.prefix
        return mods

    @torch.no_grad()
    def scores(self) -> np.ndarray:
        U, V = self.embeddings()
        return (U @ V.T).double().numpy()

    def evaluate(self, split: str = "test") -> dict[str, float]:
        target = {"test": self.graph.test_pos, "valid": self.graph.valid_pos}[split]
        return evaluate_ranking(self.scores(), self.graph.train_pos, target)

    def tensors(self) -> dict[str, torch.Tensor]:
        out = {f"rec.{k}": v.detach() for k, v in self.model.named_parameters()}
        if self.prefix is not None:
            out.update(self.prefix.named_tensors())
        return out


def make_rec_tuner(
    graph: InteractionGraph,
    config: RecConfig,
    backbone: ItemEncoder | None = None,
    kg: MultiDomainKG | None = None,
    features: FeatureTable | None = None,
) -> RecTuner:
    """Base model when ``backbone`` is None, otherwise prefix-prompted enhancement."""
    d_model = backbone.config.d_model if backbone is not None else 128
    model = RecModel(graph.n_users, graph.n_items, config.d_rec, d_model, config.backbone, config.layers,
                     config.init_std, config.seed)
    prefix = None
    if backbone is not None:
        prefix = PrefixTable(graph.item_entities, config.d_p, d_model, seed=config.seed)
        prefix = prefix.to(backbone.W_proj.dtype)
        model = model.to(backbone.W_proj.dtype)
    return RecTuner(graph, model, config, backbone, prefix, kg, features)
