import math

import numpy as np
import pytest
import torch

from mudok.rec import (
    InteractionGraph,
    NegativeSamplingError,
    RecConfig,
    RecModel,
    bpr_loss,
    make_rec_tuner,
    propagate_embeddings,
    sample_negatives,
)

EMPTY = np.zeros((0, 2), dtype=np.int64)


def _graph(n_users, n_items, train, test=None):
    test = EMPTY if test is None else np.asarray(test)
    return InteractionGraph(n_users, n_items, list(range(n_items)), np.asarray(train), EMPTY, test)


def test_zero_layers_returns_inputs():
    g = _graph(2, 3, [[0, 0], [1, 2]])
    m = RecModel(2, 3, d_rec=4, backbone="GraphProp", layers=0)
    u, v = propagate_embeddings(m, g.normalized_adjacency(), None)
    assert torch.equal(u, m.user_emb) and torch.equal(v, m.item_emb)


def test_single_edge_propagation():
    g = _graph(1, 1, [[0, 0]])
    m = RecModel(1, 1, d_rec=3, backbone="GraphProp", layers=1).double()
    u, v = propagate_embeddings(m, g.normalized_adjacency(), None)
    mid = (m.user_emb[0] + m.item_emb[0]) / 2
    assert torch.allclose(u[0], mid, atol=1e-15) and torch.allclose(v[0], mid, atol=1e-15)


def test_isolated_node_gets_no_messages():
    g = _graph(2, 2, [[0, 0]])
    m = RecModel(2, 2, d_rec=3, backbone="GraphProp", layers=2).double()
    u, v = propagate_embeddings(m, g.normalized_adjacency(), None)
    assert torch.allclose(u[1], m.user_emb[1] / 3, atol=1e-15)
    assert torch.allclose(v[1], m.item_emb[1] / 3, atol=1e-15)


@pytest.mark.parametrize("backbone", ["MF", "GraphProp"])
def test_zero_injection_matches_plain_backbone(backbone):
    g = _graph(3, 4, [[0, 0], [1, 1], [2, 3], [0, 2]])
    m = RecModel(3, 4, d_rec=4, d_model=6, backbone=backbone)
    adj = g.normalized_adjacency()
    plain = propagate_embeddings(m, adj, None)
    injected = propagate_embeddings(m, adj, m.project(torch.randn(4, 6)))  # projection starts at zero
    assert torch.equal(plain[0], injected[0]) and torch.equal(plain[1], injected[1])


def test_unknown_backbone():
    with pytest.raises(ValueError):
        RecModel(1, 1, backbone="NCF")


def test_bpr_equal_scores_is_ln2():
    s = torch.tensor([0.7, -1.2], dtype=torch.float64)
    assert bpr_loss(s, s.clone(), [], 0.0).item() == pytest.approx(2 * math.log(2), abs=1e-12)


def test_bpr_large_margin_goes_to_zero():
    loss = bpr_loss(torch.tensor([60.0], dtype=torch.float64), torch.tensor([0.0], dtype=torch.float64), [], 0.0)
    assert 0.0 <= loss.item() < 1e-20


def test_bpr_scalar_oracle():
    g = torch.Generator().manual_seed(3)
    pos = torch.randn(8, generator=g, dtype=torch.float64)
    neg = torch.randn(8, generator=g, dtype=torch.float64)
    rows = [torch.randn(8, 4, generator=g, dtype=torch.float64) for _ in range(3)]
    mu = 1e-2
    want = sum(-math.log(1.0 / (1.0 + math.exp(-(p - n)))) for p, n in zip(pos.tolist(), neg.tolist()))
    want += mu * sum(x * x for r in rows for x in r.flatten().tolist())
    assert abs(bpr_loss(pos, neg, rows, mu).item() - want) <= 1e-10


def test_negatives_avoid_train_positives():
    g = _graph(2, 6, [[0, 0], [0, 1], [0, 2], [1, 5]])
    neg = sample_negatives(np.array([0, 0, 0, 1, 1] * 20), g, np.random.default_rng(0))
    for u, n in zip([0, 0, 0, 1, 1] * 20, neg):
        assert int(n) not in g.train_pos[u]


def test_user_with_every_item_positive():
    g = _graph(1, 3, [[0, 0], [0, 1], [0, 2]])
    with pytest.raises(NegativeSamplingError):
        sample_negatives(np.array([0]), g, np.random.default_rng(0))


def test_base_model_learns_to_rank_held_out_item():
    # two user groups with disjoint tastes; the held-out item of each user belongs to its group
    train, test = [], []
    for u in range(20):
        group = u % 2
        items = list(range(group * 5, group * 5 + 5))
        held = items[u // 2 % 5]
        train += [[u, i] for i in items if i != held]
        test.append([u, held])
    g = InteractionGraph(20, 10, list(range(10)), np.array(train), EMPTY, np.array(test))
    for backbone in ("MF", "GraphProp"):
        tuner = make_rec_tuner(g, RecConfig(backbone=backbone, d_rec=8, lr=5e-2, batch_size=32, epochs=150))
        tuner.fit()
        assert tuner.evaluate()["Recall@5"] >= 0.9


def test_step_zero_enhanced_equals_base():
    from conftest import make_toy_kg, toy_encoder

    kg, feats = make_toy_kg()
    train = np.array([[0, 0], [0, 1], [1, 2], [1, 3], [2, 4]])
    g = InteractionGraph(3, 5, list(kg.items[:5]), train, EMPTY, np.array([[0, 3], [1, 0], [2, 1]]))
    cfg = RecConfig(d_rec=4, d_p=3, n=3)
    base = make_rec_tuner(g, cfg)
    enhanced = make_rec_tuner(g, cfg, toy_encoder(kg), kg, feats)
    np.testing.assert_allclose(base.scores(), enhanced.scores(), atol=1e-7)


def test_fit_with_step_budget():
    g = _graph(3, 5, [[0, 0], [0, 1], [1, 2], [1, 3], [2, 4]])
    tuner = make_rec_tuner(g, RecConfig(d_rec=4, batch_size=2))
    tuner.fit(steps=7)
    assert tuner.history[-1]["steps"] == 7


def test_config_rejects_unknown_keys():
    with pytest.raises(ValueError, match="unknown"):
        RecConfig.from_dict({"depth": 3})
