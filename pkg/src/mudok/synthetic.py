"""Seeded multi-domain benchmark with planted, learnable structure.

Each domain owns a set of attribute values grouped into topics. Items draw most
of their values from one topic. Each user prefers a small set of attribute
values and interacts mostly with items carrying them. Text labels are a
majority vote over the item's attribute values. A fraction of the attribute
values is shared verbatim across domains, and every value's surface text
carries a concept word that also recurs across domains.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .kg_data import (
    FeatureTable,
    MultiDomainKG,
    RawTriple,
    build_multidomain_kg,
    hashed_feature_table,
    load_manifest,
    write_feature_file,
    write_triple_file,
)

DOMAIN_NAMES = ("books", "music", "movies", "games", "toys", "garden", "sports", "beauty")
CUE_WORDS = 12
FILLER_WORDS = 40


@dataclass(frozen=True)
class SyntheticSpec:
    n_domains: int = 3
    items_per_domain: int = 100
    attrs_per_domain: int = 20
    shared_attr_fraction: float = 0.3
    triples_per_item: int = 6
    n_users: int = 50
    interactions_per_user: int = 20
    text_examples_per_domain: int = 200
    n_labels: int = 5
    seed: int = 7
    feature_dim: int = 768
    topics_per_domain: int = 4
    user_pref_size: int = 2
    affinity: float = 2.5

    def validate(self) -> None:
        counts = {k: v for k, v in asdict(self).items() if k not in ("shared_attr_fraction", "seed", "affinity")}
        bad = [k for k, v in counts.items() if v < 1]
        if bad:
            raise ValueError(f"counts must be >= 1: {', '.join(bad)}")
        if not 0.0 <= self.shared_attr_fraction <= 1.0:
            raise ValueError("shared_attr_fraction must lie in [0, 1]")
        if self.interactions_per_user > self.items_per_domain:
            raise ValueError(
                f"interactions_per_user ({self.interactions_per_user}) exceeds items_per_domain ({self.items_per_domain})"
            )
        if self.triples_per_item > self.attrs_per_domain:
            raise ValueError("triples_per_item exceeds attrs_per_domain")
        if self.n_labels < 2:
            raise ValueError("n_labels must be >= 2")


@dataclass
class Interactions:
    users: list[str]
    items: list[int]  # KG entity indices of the domain's items, in local order
    train: list[tuple[int, int]] = field(default_factory=list)  # (user, local item)
    valid: list[tuple[int, int]] = field(default_factory=list)
    test: list[tuple[int, int]] = field(default_factory=list)


@dataclass
class TextSplits:
    n_labels: int
    train: list[tuple[int, int, str]] = field(default_factory=list)  # (label, item entity, text)
    valid: list[tuple[int, int, str]] = field(default_factory=list)
    test: list[tuple[int, int, str]] = field(default_factory=list)


@dataclass
class Benchmark:
    kg: MultiDomainKG
    features: FeatureTable
    interactions: dict[str, Interactions]
    text: dict[str, TextSplits]
    spec: SyntheticSpec | None = None


def _split(n: int) -> tuple[int, int]:
    """Sizes of (valid, test) for a list of ``n``; roughly 10% each, test >= 1."""
    n_test = max(1, round(0.1 * n))
    n_valid = max(1, round(0.1 * n)) if n - n_test >= 3 else 0
    return n_valid, n_test


def domain_name(d: int) -> str:
    return DOMAIN_NAMES[d] if d < len(DOMAIN_NAMES) else f"domain{d}"


def generate_synthetic_benchmark(spec: SyntheticSpec) -> Benchmark:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    A = spec.attrs_per_domain
    n_shared = int(round(spec.shared_attr_fraction * A))
    n_rel = max(1, min(4, A))
    n_topics = min(spec.topics_per_domain, A)
    n_concepts = 2 * A

    domains: list[tuple[str, list[RawTriple]]] = []
    item_decl: dict[str, list[str]] = {}
    value_topic: dict[str, list[int]] = {}
    item_values: dict[str, list[list[int]]] = {}
    item_topic: dict[str, list[int]] = {}

    for d in range(spec.n_domains):
        name = domain_name(d)
        shared_ids = np.sort(rng.choice(A, size=n_shared, replace=False)) if n_shared else np.array([], int)
        own_concepts = rng.choice(n_concepts, size=A - n_shared, replace=False)
        values: list[tuple[str, str]] = []  # (value id, relation id)
        for k in shared_ids:
            values.append((f"shared_c{k}", f"shared_rel{k % n_rel}"))
        for j, c in enumerate(own_concepts):
            values.append((f"{name}_c{c}", f"{name}_rel{j % n_rel}"))
        order = rng.permutation(A)
        values = [values[i] for i in order]
        topics = [i % n_topics for i in range(A)]
        value_topic[name] = topics

        triples: list[RawTriple] = []
        items, vals_per_item, topic_per_item = [], [], []
        for i in range(spec.items_per_domain):
            ident = f"{name}_item_{i}"
            t = int(rng.integers(n_topics))
            in_topic = [v for v in range(A) if topics[v] == t]
            off_topic = [v for v in range(A) if topics[v] != t]
            n_in = min(len(in_topic), max(1, int(round(0.7 * spec.triples_per_item))))
            n_off = min(len(off_topic), spec.triples_per_item - n_in)
            chosen = list(rng.choice(in_topic, size=n_in, replace=False))
            if n_off:
                chosen += list(rng.choice(off_topic, size=n_off, replace=False))
            chosen = [int(v) for v in chosen]
            for v in chosen:
                triples.append((ident, values[v][1], values[v][0]))
            items.append(ident)
            vals_per_item.append(chosen)
            topic_per_item.append(t)
        domains.append((name, triples))
        item_decl[name] = items
        item_values[name] = vals_per_item
        item_topic[name] = topic_per_item

    kg = build_multidomain_kg(domains, item_decl)
    features = hashed_feature_table(kg.entities, spec.feature_dim, seed=0)

    interactions: dict[str, Interactions] = {}
    text: dict[str, TextSplits] = {}
    for d in range(spec.n_domains):
        name = domain_name(d)
        topics = value_topic[name]
        ent_items = [kg.entity_index[x] for x in item_decl[name]]
        # items x topics and items x values incidence
        overlap = np.zeros((spec.items_per_domain, n_topics))
        carries = np.zeros((spec.items_per_domain, A))
        for i, vals in enumerate(item_values[name]):
            for v in vals:
                overlap[i, topics[v]] += 1
                carries[i, v] = 1
        inter = Interactions(users=[f"{name}_user_{u}" for u in range(spec.n_users)], items=ent_items)
        for u in range(spec.n_users):
            pref = rng.choice(A, size=min(spec.user_pref_size, A), replace=False)
            w = np.exp(spec.affinity * carries[:, pref].sum(1))
            picked = rng.choice(spec.items_per_domain, size=spec.interactions_per_user, replace=False, p=w / w.sum())
            picked = [int(x) for x in rng.permutation(picked)]
            n_valid, n_test = _split(len(picked))
            inter.test += [(u, i) for i in picked[:n_test]]
            inter.valid += [(u, i) for i in picked[n_test : n_test + n_valid]]
            inter.train += [(u, i) for i in picked[n_test + n_valid :]]
        interactions[name] = inter

        # each value votes for label v mod n_labels; ties go to the item's earliest drawn value
        labels = []
        for vals in item_values[name]:
            votes = np.bincount([v % spec.n_labels for v in vals], minlength=spec.n_labels)
            labels.append(next(v % spec.n_labels for v in vals if votes[v % spec.n_labels] == votes.max()))
        examples = []
        for _ in range(spec.text_examples_per_domain):
            i = int(rng.integers(spec.items_per_domain))
            y = labels[i]
            cue = y if rng.random() < 0.5 else int(rng.integers(spec.n_labels))
            words = [f"w{int(x)}" for x in rng.integers(FILLER_WORDS, size=4)]
            words.insert(int(rng.integers(len(words) + 1)), f"cue{cue % CUE_WORDS}")
            examples.append((y, ent_items[i], " ".join(words)))
        n_valid, n_test = _split(len(examples))
        text[name] = TextSplits(
            n_labels=spec.n_labels,
            test=examples[:n_test],
            valid=examples[n_test : n_test + n_valid],
            train=examples[n_test + n_valid :],
        )
    return Benchmark(kg=kg, features=features, interactions=interactions, text=text, spec=spec)


# ---------------------------------------------------------------- disk layout


def write_benchmark(bench: Benchmark, out_dir: str | Path) -> Path:
    """Write triples, items, features, interaction and text TSVs plus a manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    kg = bench.kg
    manifest: dict = {"domains": [], "features_path": "features.mdkf"}
    for d, name in enumerate(kg.domains):
        write_triple_file(out / f"{name}.triples.tsv", kg.domain_triples(d))
        (out / f"{name}.items.txt").write_text(
            "".join(kg.entities[i] + "\n" for i in kg.domain_items(d)), encoding="utf-8"
        )
        entry = {"name": name, "triples_path": f"{name}.triples.tsv", "items_path": f"{name}.items.txt"}
        inter = bench.interactions.get(name)
        if inter is not None:
            entry["interactions"] = {}
            for split in ("train", "valid", "test"):
                fn = f"{name}.inter.{split}.tsv"
                with open(out / fn, "w", encoding="utf-8") as fh:
                    for u, i in getattr(inter, split):
                        fh.write(f"{inter.users[u]}\t{kg.entities[inter.items[i]]}\n")
                entry["interactions"][split] = fn
        txt = bench.text.get(name)
        if txt is not None:
            entry["text"] = {"n_labels": txt.n_labels}
            for split in ("train", "valid", "test"):
                fn = f"{name}.text.{split}.tsv"
                with open(out / fn, "w", encoding="utf-8") as fh:
                    for y, item, s in getattr(txt, split):
                        fh.write(f"{y}\t{kg.entities[item]}\t{s}\n")
                entry["text"][split] = fn
        manifest["domains"].append(entry)
    if bench.spec is not None:
        manifest["synthetic_spec"] = asdict(bench.spec)
    write_feature_file(out / "features.mdkf", bench.features)
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _read_tsv(path: Path, n_fields: int) -> list[list[str]]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t", n_fields - 1)
            if len(parts) != n_fields:
                raise ValueError(f"{path}: line {lineno}: expected {n_fields} fields")
            rows.append(parts)
    return rows


def load_benchmark(manifest_path: str | Path) -> Benchmark:
    manifest_path = Path(manifest_path)
    base = manifest_path.parent
    kg, feats, spec = load_manifest(manifest_path)
    interactions: dict[str, Interactions] = {}
    text: dict[str, TextSplits] = {}
    for entry in spec["domains"]:
        name = entry["name"]
        if "interactions" in entry:
            items = kg.domain_items(name)
            local = {it: k for k, it in enumerate(items)}
            users: dict[str, int] = {}
            inter = Interactions(users=[], items=items)
            for split in ("train", "valid", "test"):
                for u, i in _read_tsv(base / entry["interactions"][split], 2):
                    if i not in kg.entity_index or kg.entity_index[i] not in local:
                        raise ValueError(f"{name}: interaction item {i!r} is not an item of the domain")
                    uid = users.setdefault(u, len(users))
                    getattr(inter, split).append((uid, local[kg.entity_index[i]]))
            inter.users = list(users)
            interactions[name] = inter
        if "text" in entry:
            txt = TextSplits(n_labels=int(entry["text"]["n_labels"]))
            for split in ("train", "valid", "test"):
                for y, i, s in _read_tsv(base / entry["text"][split], 3):
                    if i not in kg.entity_index:
                        raise ValueError(f"{name}: text item {i!r} unknown")
                    getattr(txt, split).append((int(y), kg.entity_index[i], s))
            text[name] = txt
    synth = SyntheticSpec(**spec["synthetic_spec"]) if "synthetic_spec" in spec else None
    return Benchmark(kg=kg, features=feats, interactions=interactions, text=text, spec=synth)
