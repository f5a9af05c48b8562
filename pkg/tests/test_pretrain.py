import math

import numpy as np
import pytest
import torch
from conftest import make_toy_kg

from mudok import pretrain as pt
from mudok.kg_data import build_multidomain_kg, hashed_feature_table
from mudok.pretrain import PretrainConfig, PretrainDivergence, pretrain

TOY = dict(d_model=8, d_feat=16, n=3, heads=2, dtype="float64")


def test_overfit_fixture_halves_loss():
    kg, feats = make_toy_kg(n_items=20, attrs=3)
    cfg = PretrainConfig(batch_size=20, epochs=200, learning_rate=5e-3, tau=0.5, lam=0.5, seed=0, **TOY)
    steps = pretrain(kg, feats, cfg).steps
    assert len(steps) == 200
    assert steps[-1]["total"] <= 0.5 * steps[0]["total"]


def test_features_never_mutated():
    kg, feats = make_toy_kg()
    before = feats.checksum()
    pretrain(kg, feats, PretrainConfig(batch_size=8, epochs=2, **TOY))
    assert feats.checksum() == before
    with pytest.raises(ValueError):
        feats.rows[0, 0] = 1.0


def test_pretraining_is_deterministic():
    kg, feats = make_toy_kg()
    cfg = PretrainConfig(batch_size=8, epochs=2, seed=3, **TOY)
    a, b = pretrain(kg, feats, cfg).encoder, pretrain(kg, feats, cfg).encoder
    for (name, p), (_, q) in zip(a.named_parameters(), b.named_parameters()):
        assert torch.equal(p, q), name


def test_excluded_domain_relations_untouched():
    doms = [
        ("A", [(f"a{i}", "colour", f"c{i % 3}") for i in range(6)] + [(f"a{i}", "size", f"s{i % 2}") for i in range(6)]),
        ("B", [(f"b{i}", "flavour", f"f{i % 3}") for i in range(6)] + [(f"b{i}", "size", f"s{i % 2}") for i in range(6)]),
    ]
    kg = build_multidomain_kg(doms, {"A": [f"a{i}" for i in range(6)], "B": [f"b{i}" for i in range(6)]})
    feats = hashed_feature_table(kg.entities, 16)
    cfg = PretrainConfig(batch_size=3, epochs=3, **TOY)
    start = pt.ItemEncoder(cfg.encoder_config(kg.n_relations), seed=cfg.seed).to(torch.float64)
    init = start.relation_table.detach().clone()
    enc = pretrain(kg, feats, cfg, domains=["A"], encoder=start).encoder
    flavour = kg.relation_index["flavour"]
    assert torch.equal(enc.relation_table[flavour], init[flavour])
    assert not torch.equal(enc.relation_table[kg.relation_index["colour"]], init[kg.relation_index["colour"]])


def test_non_finite_loss_aborts(monkeypatch):
    kg, feats = make_toy_kg()
    monkeypatch.setattr(pt, "total_loss", lambda *a, **k: torch.tensor(float("nan")))
    with pytest.raises(PretrainDivergence, match="L_con"):
        pretrain(kg, feats, PretrainConfig(batch_size=8, epochs=1, **TOY))


@pytest.mark.parametrize("bad", [{"tau": 0.0}, {"lam": -1.0}, {"batch_size": 0}, {"heads": 0}])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        PretrainConfig(**bad)


def test_unknown_config_key():
    with pytest.raises(ValueError, match="unknown"):
        PretrainConfig.from_dict({"temperature": 0.1})


def test_empty_domain_selection():
    kg, feats = make_toy_kg()
    with pytest.raises(ValueError, match="empty"):
        pretrain(kg, feats, PretrainConfig(**TOY), domains=[])


def test_feature_dim_must_match():
    kg, _ = make_toy_kg()
    with pytest.raises(ValueError, match="d_feat"):
        pretrain(kg, hashed_feature_table(kg.entities, 32), PretrainConfig(**TOY))


def test_zero_lambda_drops_kg_term():
    kg, feats = make_toy_kg()
    steps = pretrain(kg, feats, PretrainConfig(batch_size=8, epochs=2, lam=0.0, **TOY)).steps
    assert all(s["kg_term"] == 0.0 and s["total"] == s["l_con"] for s in steps)
    assert any(s["l_kg"] > 0 for s in steps)


def test_no_contrastive_term():
    kg, feats = make_toy_kg()
    steps = pretrain(kg, feats, PretrainConfig(batch_size=8, epochs=1, use_con=False, lam=0.5, **TOY)).steps
    assert all(s["l_con"] == 0.0 for s in steps)
    assert all(math.isclose(s["total"], s["kg_term"]) for s in steps)


def test_epoch_log_averages_steps():
    kg, feats = make_toy_kg()
    res = pretrain(kg, feats, PretrainConfig(batch_size=8, epochs=1, **TOY))
    n = len(kg.items)
    assert res.epochs[0]["l_kg"] == pytest.approx(sum(s["l_kg"] for s in res.steps) / n)
    assert sum(s["batch"] for s in res.steps) == n


def test_census_counts_features():
    kg, feats = make_toy_kg()
    enc = pt.ItemEncoder(PretrainConfig(**TOY).encoder_config(kg.n_relations))
    c = pt.parameter_census(enc, feats)
    assert c["breakdown"]["features"] == kg.n_entities * 16
    assert c["total"] == c["breakdown"]["features"] + sum(p.numel() for p in enc.parameters())
    closed = pt.closed_form_census(enc.config, kg.n_entities)
    assert (closed["total"], closed["trainable"]) == (c["total"], c["trainable"])


def test_full_scale_feature_count():
    from mudok.experiments import run_census

    rep = run_census()
    walk = rep["rows"][0]
    assert rep["meta"]["match"]
    assert walk["total"] - rep["meta"]["backbone_params"] - (50_000 * 16 + 16 * 128) == 384_000_000
    assert walk["ratio"] < 0.01
