import numpy as np
import pytest
import torch

from mudok.encoder import EncoderConfig, ItemEncoder
from mudok.kg_data import build_multidomain_kg, hashed_feature_table


def make_toy_kg(n_items=20, attrs=3, n_values=12, n_domains=2, seed=0, d_feat=16):
    """``n_items`` items per run spread over domains, each with ``attrs`` distinct values."""
    rng = np.random.default_rng(seed)
    domains, decl = [], {}
    for d in range(n_domains):
        name = f"dom{d}"
        triples = []
        items = [f"{name}_item_{i}" for i in range(n_items // n_domains)]
        for it in items:
            for j, v in enumerate(rng.choice(n_values, size=attrs, replace=False)):
                triples.append((it, f"rel{j}", f"value_{v}"))
        domains.append((name, triples))
        decl[name] = items
    kg = build_multidomain_kg(domains, decl)
    return kg, hashed_feature_table(kg.entities, d_feat, seed=0)


def toy_encoder(kg, d_feat=16, d_model=8, layers=2, heads=2, dropout=0.1, seed=0, dtype=torch.float64):
    cfg = EncoderConfig(d_feat=d_feat, d_model=d_model, n_relations=kg.n_relations, n_layers=layers, heads=heads,
                        dropout=dropout)
    return ItemEncoder(cfg, seed=seed).to(dtype)


@pytest.fixture
def toy():
    return make_toy_kg()


def pytest_terminal_summary(terminalreporter):
    """One line per acceptance criterion that ran."""
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
