import filecmp

import numpy as np
import pytest

from mudok.synthetic import SyntheticSpec, generate_synthetic_benchmark, load_benchmark, write_benchmark

SPEC = SyntheticSpec(n_domains=3, items_per_domain=100, attrs_per_domain=20, shared_attr_fraction=0.3,
                     triples_per_item=6, n_users=50, interactions_per_user=20, text_examples_per_domain=200,
                     n_labels=5, seed=7)


def test_generation_byte_identical(tmp_path):
    a = write_benchmark(generate_synthetic_benchmark(SPEC), tmp_path / "a").parent
    b = write_benchmark(generate_synthetic_benchmark(SPEC), tmp_path / "b").parent
    names = sorted(p.name for p in a.iterdir())
    assert names == sorted(p.name for p in b.iterdir())
    match, mismatch, errors = filecmp.cmpfiles(a, b, names, shallow=False)
    assert not mismatch and not errors and len(match) == len(names)


def test_different_seed_differs():
    a = generate_synthetic_benchmark(SPEC)
    b = generate_synthetic_benchmark(SyntheticSpec(seed=8))
    assert a.kg.entities != b.kg.entities or not np.array_equal(a.kg.triples, b.kg.triples)


def _attribute_values(kg, domain):
    items = set(kg.domain_items(domain))
    return {t for h, _, t in kg.domain_triples(domain)} - {kg.entities[i] for i in items}


def test_zero_shared_fraction_has_no_overlap():
    kg = generate_synthetic_benchmark(SyntheticSpec(shared_attr_fraction=0.0, seed=1)).kg
    vals = [_attribute_values(kg, d) for d in kg.domains]
    for i in range(len(vals)):
        for j in range(i + 1, len(vals)):
            assert not vals[i] & vals[j]


def test_shared_fraction_creates_overlap():
    kg = generate_synthetic_benchmark(SyntheticSpec(shared_attr_fraction=0.5, seed=1)).kg
    vals = [_attribute_values(kg, d) for d in kg.domains]
    assert vals[0] & vals[1]


def test_splits_disjoint_per_user():
    bench = generate_synthetic_benchmark(SPEC)
    for inter in bench.interactions.values():
        for u in range(len(inter.users)):
            sets = [{i for uu, i in getattr(inter, s) if uu == u} for s in ("train", "valid", "test")]
            assert not sets[0] & sets[1] and not sets[0] & sets[2] and not sets[1] & sets[2]
            assert sum(len(s) for s in sets) == SPEC.interactions_per_user


def test_interactions_exceeding_items_rejected():
    with pytest.raises(ValueError, match="interactions_per_user"):
        generate_synthetic_benchmark(SyntheticSpec(items_per_domain=5, interactions_per_user=6))


@pytest.mark.parametrize("bad", [{"n_domains": 0}, {"shared_attr_fraction": 1.5}, {"n_labels": 1}])
def test_spec_validation(bad):
    with pytest.raises(ValueError):
        SyntheticSpec(**bad).validate()


def test_text_labels_in_range_and_items_are_domain_items():
    bench = generate_synthetic_benchmark(SPEC)
    for name, txt in bench.text.items():
        items = set(bench.kg.domain_items(name))
        for split in (txt.train, txt.valid, txt.test):
            for y, item, text in split:
                assert 0 <= y < SPEC.n_labels and item in items and text
        assert len(txt.train) + len(txt.valid) + len(txt.test) == SPEC.text_examples_per_domain


def test_round_trip_preserves_tasks(tmp_path):
    bench = generate_synthetic_benchmark(SyntheticSpec(seed=3, items_per_domain=40, n_users=12,
                                                       interactions_per_user=10, text_examples_per_domain=30))
    back = load_benchmark(write_benchmark(bench, tmp_path))
    assert back.spec == bench.spec
    for name, inter in bench.interactions.items():
        got = back.interactions[name]
        for split in ("train", "valid", "test"):
            mine = {(inter.users[u], i) for u, i in getattr(inter, split)}
            theirs = {(got.users[u], i) for u, i in getattr(got, split)}
            assert mine == theirs
    for name, txt in bench.text.items():
        assert back.text[name].test == txt.test


def _top_value_share(kg, item_sets):
    """Mean over users of: count of the most frequent attribute value among their items / items."""
    out = []
    for items in item_sets:
        counts: dict[int, int] = {}
        for it in items:
            for _, t in kg.item_adjacency[it]:
                counts[t] = counts.get(t, 0) + 1
        out.append(max(counts.values()) / len(items))
    return float(np.mean(out))


def test_planted_user_preference_signal():
    # a user's items share attribute values far more than random item sets of the same size
    bench = generate_synthetic_benchmark(SPEC)
    kg = bench.kg
    inter = bench.interactions[kg.domains[0]]
    per_user: dict[int, list[int]] = {}
    for u, i in inter.train + inter.valid + inter.test:
        per_user.setdefault(u, []).append(inter.items[i])
    rng = np.random.default_rng(0)
    observed = _top_value_share(kg, per_user.values())
    null = [
        _top_value_share(kg, [list(rng.choice(inter.items, size=len(v), replace=False)) for v in per_user.values()])
        for _ in range(20)
    ]
    assert observed > max(null)
