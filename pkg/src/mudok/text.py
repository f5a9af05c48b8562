"""Text-understanding adapter: pooled text encoder + prompted-item fusion + softmax head."""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import autodiff as ad
from .encoder import ItemEncoder
from .kg_data import FeatureTable, MultiDomainKG, entity_text, hash_featurize, read_matrix_file, write_matrix_file
from .metrics import classification_metrics
from .ppt import FrozenInputs, PrefixTable, snapshot

log = logging.getLogger(__name__)

POOLED_MAGIC = b"MDKP"

Example = tuple[int, int, str]  # (label, item entity, text)


@dataclass
class TextDataset:
    n_labels: int
    train: list[Example]
    valid: list[Example]
    test: list[Example]
    item_names: dict[int, str] = field(default_factory=dict)

    def __post_init__(self):
        if self.n_labels < 2:
            raise ValueError("need at least two labels")
        for split in (self.train, self.valid, self.test):
            for y, _, _ in split:
                if not 0 <= y < self.n_labels:
                    raise ValueError(f"label {y} outside [0, {self.n_labels})")
        missing = set(range(self.n_labels)) - {y for y, _, _ in self.train}
        if missing:
            warnings.warn(f"classes absent from the train split: {sorted(missing)}", stacklevel=2)

    @classmethod
    def from_splits(cls, splits, kg: MultiDomainKG) -> "TextDataset":
        names = {i: entity_text(kg.entities[i]) for s in (splits.train, splits.valid, splits.test) for _, i, _ in s}
        bad = [i for i in names if i not in kg.item_adjacency]
        if bad:
            raise ValueError(f"text examples reference non-item entities: {bad[:5]}")
        return cls(splits.n_labels, list(splits.train), list(splits.valid), list(splits.test), names)

    def split(self, name: str) -> list[Example]:
        return {"train": self.train, "valid": self.valid, "test": self.test}[name]


class HashTextEncoder(nn.Module):
    """Hashed bag of words over ``text + " " + item_text`` through one ReLU layer."""

    def __init__(self, d_text: int = 64, seed: int = 0, init_std: float = 0.1):
        super().__init__()
        self.d_text = d_text
        self.hash_seed = seed
        g = torch.Generator().manual_seed(seed + 17)
        self.W = nn.Parameter(torch.randn(d_text, d_text, generator=g) * init_std)
        self.b = nn.Parameter(torch.zeros(d_text))

    def inputs(self, texts: Sequence[str], item_texts: Sequence[str], split: str = "") -> torch.Tensor:
        rows = [hash_featurize(f"{t} {it}", self.d_text, self.hash_seed) for t, it in zip(texts, item_texts)]
        return torch.from_numpy(np.stack(rows)).to(self.W.dtype) if rows else torch.zeros(0, self.d_text)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return ad.relu(ad.add(ad.matmul(x.to(self.W.dtype), self.W), self.b))


class PrecomputedTextEncoder(nn.Module):
    """Serves pooled vectors read from ``MDKP`` files; row i belongs to example i of the split."""

    def __init__(self, vectors: dict[str, np.ndarray]):
        super().__init__()
        dims = {v.shape[1] for v in vectors.values()}
        if len(dims) != 1:
            raise ValueError("pooled vectors of every split must share one dimension")
        self.d_text = dims.pop()
        self.vectors = {k: torch.from_numpy(np.asarray(v, dtype=np.float32)) for k, v in vectors.items()}

    @classmethod
    def from_files(cls, paths: dict[str, str | Path]) -> "PrecomputedTextEncoder":
        return cls({k: read_matrix_file(p, POOLED_MAGIC) for k, p in paths.items()})

    def inputs(self, texts: Sequence[str], item_texts: Sequence[str], split: str = "train") -> torch.Tensor:
        vec = self.vectors[split]
        if vec.shape[0] != len(texts):
            raise ValueError(f"{split}: {vec.shape[0]} pooled rows for {len(texts)} examples")
        return vec

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x


def write_pooled_file(path: str | Path, rows: np.ndarray) -> None:
    write_matrix_file(path, rows, POOLED_MAGIC)


def encode_text(encoder: nn.Module, text: str, item_text: str) -> torch.Tensor:
    return encoder(encoder.inputs([text], [item_text]))[0]


class TextHead(nn.Module):
    def __init__(self, d_text: int, n_labels: int, d_model: int = 128, seed: int = 0, init_std: float = 0.1):
        super().__init__()
        g = torch.Generator().manual_seed(seed + 29)
        # zero start: the prompted signal enters only once it has been learned
        self.fuse = nn.Parameter(torch.zeros(d_model, d_text))
        self.W_c = nn.Parameter(torch.randn(d_text, n_labels, generator=g) * init_std)
        self.b_c = nn.Parameter(torch.zeros(n_labels))

    def logits(self, pooled: torch.Tensor, prompted: torch.Tensor | None = None) -> torch.Tensor:
        x = pooled if prompted is None else ad.add(pooled, ad.matmul(prompted.to(self.fuse.dtype), self.fuse))
        return ad.add(ad.matmul(x, self.W_c), self.b_c)


def classify(pooled: torch.Tensor, prompted_projected: torch.Tensor | None, head: TextHead) -> torch.Tensor:
    """Class probabilities; ``prompted_projected`` is already in the pooled space."""
    x = pooled if prompted_projected is None else ad.add(pooled, prompted_projected)
    return ad.softmax_row(ad.add(ad.matmul(x, head.W_c), head.b_c))


def cross_entropy(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean negative log-likelihood of the true class."""
    return -F.log_softmax(logits, dim=-1).gather(1, labels[:, None]).mean()


@dataclass
class TextConfig:
    d_text: int = 64
    lr: float = 5e-3
    batch_size: int = 32
    epochs: int = 10
    d_p: int = 16
    n: int = 8
    seed: int = 0
    dropout_in_tuning: bool = False

    @classmethod
    def from_dict(cls, d: dict) -> "TextConfig":
        known = {f.name for f in fields(cls)}
        if set(d) - known:
            raise ValueError(f"unknown text config keys: {sorted(set(d) - known)}")
        return cls(**d)


@dataclass
class TextTuner:
    dataset: TextDataset
    encoder: nn.Module
    head: TextHead
    config: TextConfig
    backbone: ItemEncoder | None = None
    prefix: PrefixTable | None = None
    kg: MultiDomainKG | None = None
    features: FeatureTable | None = None
    history: list[dict] = field(default_factory=list)

    def __post_init__(self):
        self.rng = np.random.default_rng(self.config.seed)
        self.stream = ad.RngStream(self.config.seed + 1)
        self._inputs: dict[str, torch.Tensor] = {}
        params = list(self.encoder.parameters()) + list(self.head.parameters())
        if self.prefix is not None:
            params += list(self.prefix.parameters())
        self.optimizer = torch.optim.Adam(params, lr=self.config.lr)
        if self.backbone is not None:
            for p in self.backbone.parameters():
                p.requires_grad_(False)
            self.backbone.eval()
            self.frozen = FrozenInputs(self.backbone, self.kg, self.features, self.prefix.items, self.config.n,
                                       np.random.default_rng(self.config.seed + 2))

    def inputs(self, split: str) -> torch.Tensor:
        if split not in self._inputs:
            ex = self.dataset.split(split)
            texts = [t for _, _, t in ex]
            items = [self.dataset.item_names.get(i, "") for _, i, _ in ex]
            self._inputs[split] = self.encoder.inputs(texts, items, split)
        return self._inputs[split]

    def prompted(self, items: Sequence[int]) -> torch.Tensor | None:
        if self.backbone is None:
            return None
        return self.frozen.encode(self.prefix, items, self.stream, self.config.dropout_in_tuning)

    def logits(self, split: str, idx: np.ndarray) -> torch.Tensor:
        ex = self.dataset.split(split)
        pooled = self.encoder(self.inputs(split)[torch.from_numpy(idx)])
        return self.head.logits(pooled, self.prompted([ex[k][1] for k in idx]))

    def loss(self, split: str, idx: np.ndarray) -> torch.Tensor:
        ex = self.dataset.split(split)
        labels = torch.tensor([ex[k][0] for k in idx], dtype=torch.long)
        return cross_entropy(self.logits(split, idx), labels)

    def step(self, idx: np.ndarray) -> float:
        self.optimizer.zero_grad(set_to_none=True)
        loss = self.loss("train", idx)
        ad.backward(loss)
        self.optimizer.step()
        return loss.item()

    def fit(self, steps: int | None = None) -> list[dict]:
        n = len(self.dataset.train)
        if n == 0:
            raise ValueError("empty train split")
        done, epoch = 0, 0
        while steps is not None or epoch < self.config.epochs:
            order = self.rng.permutation(n)
            losses = []
            for s in range(0, n, self.config.batch_size):
                if steps is not None and done >= steps:
                    break
                losses.append(self.step(order[s : s + self.config.batch_size]))
                done += 1
            epoch += 1
            self.history.append({"epoch": epoch, "loss": float(np.mean(losses)) if losses else float("nan"), "steps": done})
            if steps is not None and done >= steps:
                break
        return self.history

    @torch.no_grad()
    def predict(self, split: str = "test") -> np.ndarray:
        idx = np.arange(len(self.dataset.split(split)))
        return self.logits(split, idx).argmax(-1).numpy()

    def evaluate(self, split: str = "test") -> dict[str, float]:
        y = [e[0] for e in self.dataset.split(split)]
        return classification_metrics(y, self.predict(split), self.dataset.n_labels)

    def modules_map(self) -> dict[str, nn.Module]:
        mods = {"text.encoder": self.encoder, "text.head": self.head}
        if self.prefix is not None:
            mods["ppt"] = self.prefix
        return mods

    def tensors(self) -> dict[str, torch.Tensor]:
        return {k: v for k, v in snapshot(self.modules_map()).items()}


def make_text_tuner(
    dataset: TextDataset,
    config: TextConfig,
    backbone: ItemEncoder | None = None,
    kg: MultiDomainKG | None = None,
    features: FeatureTable | None = None,
    encoder: nn.Module | None = None,
    prefix_items: Sequence[int] | None = None,
) -> TextTuner:
    encoder = encoder if encoder is not None else HashTextEncoder(config.d_text, config.seed)
    d_model = backbone.config.d_model if backbone is not None else 128
    head = TextHead(encoder.d_text, dataset.n_labels, d_model, config.seed)
    prefix = None
    if backbone is not None:
        items = prefix_items if prefix_items is not None else sorted(
            {i for s in (dataset.train, dataset.valid, dataset.test) for _, i, _ in s}
        )
        dtype = backbone.W_proj.dtype
        prefix = PrefixTable(items, config.d_p, d_model, seed=config.seed).to(dtype)
        head = head.to(dtype)
        encoder = encoder.to(dtype)
    return TextTuner(dataset, encoder, head, config, backbone, prefix, kg, features)
