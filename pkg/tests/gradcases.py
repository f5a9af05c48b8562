"""Finite-difference cases for the three training objectives (f64, toy sizes)."""
import numpy as np
import torch
from conftest import make_toy_kg, toy_encoder

from mudok import autodiff as ad
from mudok.kg_data import sample_batch_neighborhoods
from mudok.losses import total_loss
from mudok.pretrain import PretrainConfig, batch_losses
from mudok.rec import InteractionGraph, RecConfig, make_rec_tuner
from mudok.text import TextConfig, TextDataset, make_text_tuner


def _jitter(params, seed, scale=0.3):
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in params:
            p.add_(torch.randn(p.shape, generator=g, dtype=p.dtype) * scale)


def pretrain_case(seed=0, cross_batch=False):
    """Full pre-training objective, d_model=8, B=4, n=3, dropout masks frozen."""
    kg, feats = make_toy_kg(n_items=8, attrs=3, d_feat=6, seed=seed)
    cfg = PretrainConfig(batch_size=4, d_model=8, d_feat=6, n=3, heads=2, n_layers=1, dropout=0.1, lam=0.5,
                         tau=0.5, dtype="float64", seed=seed, cross_batch_negatives=cross_batch)
    enc = toy_encoder(kg, d_feat=6, d_model=8, layers=1, heads=2, dropout=0.1, seed=seed)
    # away from the 0.02-std init, where attention is near-uniform and the q/k gradients
    # (~1e-8) sit at the round-off floor of central differences
    _jitter(list(enc.parameters()), seed)
    items = list(kg.items[:4])
    neigh = sample_batch_neighborhoods(kg, items, 3, np.random.default_rng(seed))

    def f():
        stream = ad.RngStream(seed + 1)  # same masks on every call
        l_con, l_kg = batch_losses(enc, kg, feats, items, neigh, cfg, stream)
        return total_loss(l_con, l_kg, cfg.lam)

    return f, list(enc.parameters())


def bpr_case(seed=0, backbone="GraphProp"):
    """BPR through prompted items, propagation, projection and prefixes (3 users, 4 items)."""
    kg, feats = make_toy_kg(n_items=8, attrs=3, d_feat=6, seed=seed)
    enc = toy_encoder(kg, d_feat=6, d_model=8, layers=1, heads=2, seed=seed)
    train = np.array([[0, 0], [0, 1], [1, 1], [1, 2], [2, 3]])
    graph = InteractionGraph(3, 4, list(kg.items[:4]), train, np.zeros((0, 2), int), np.zeros((0, 2), int))
    cfg = RecConfig(backbone=backbone, layers=2, d_rec=4, d_p=3, n=3, mu=1e-2, seed=seed)
    tuner = make_rec_tuner(graph, cfg, enc, kg, feats)
    params = [tuner.model.user_emb, tuner.model.item_emb, tuner.model.proj, tuner.prefix.tokens, tuner.prefix.W_p]
    _jitter([tuner.model.proj, tuner.prefix.tokens], seed)
    users, pos, neg = np.array([0, 1, 2, 0]), np.array([0, 2, 3, 1]), np.array([2, 0, 1, 3])
    return (lambda: tuner.batch_loss(users, pos, neg)), params


def text_case(seed=0):
    """Cross-entropy through the pooled encoder, fusion projection and prefixes."""
    kg, feats = make_toy_kg(n_items=8, attrs=3, d_feat=6, seed=seed)
    enc = toy_encoder(kg, d_feat=6, d_model=8, layers=1, heads=2, seed=seed)
    items = list(kg.items)
    words = ["red fox", "blue sky", "green tree", "red sky", "blue fox", "green sky"]
    train = [(k % 3, items[k % len(items)], w) for k, w in enumerate(words)]
    ds = TextDataset(3, train, [], [], {i: kg.entities[i] for i in items})
    tuner = make_text_tuner(ds, TextConfig(d_text=6, d_p=3, n=3, seed=seed), enc, kg, feats)
    head, te = tuner.head, tuner.encoder
    params = [te.W, te.b, head.fuse, head.W_c, head.b_c, tuner.prefix.tokens, tuner.prefix.W_p]
    _jitter([head.fuse, tuner.prefix.tokens, te.b], seed)
    idx = np.arange(len(train))
    return (lambda: tuner.loss("train", idx)), params


CASES = {"pretrain": pretrain_case, "bpr": bpr_case, "text": text_case}
