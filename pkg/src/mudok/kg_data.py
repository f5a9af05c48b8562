"""Multi-domain item knowledge graphs: parsing, merging, sampling, featurising.

File formats
------------
triple file   ``head<TAB>relation<TAB>tail`` per line, ``#`` lines ignored
items file    one entity identifier per line
manifest      ``{"domains": [{"name", "triples_path", "items_path", ...}], "features_path"?}``
feature file  ``MDKF`` | u32 version=1 | u64 n_rows | u32 dim | n_rows*dim f32 LE
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

PAD = -1
FEATURE_MAGIC = b"MDKF"
FEATURE_VERSION = 1


class KGFormatError(ValueError):
    pass


RawTriple = tuple[str, str, str]


def parse_triple_file(path: str | Path, domain_name: str = "") -> list[RawTriple]:
    triples: list[RawTriple] = []
    label = f"{path}" + (f" [{domain_name}]" if domain_name else "")
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if not line.strip() or line.startswith("#"):
                continue
            fields = line.split("\t")
            if len(fields) != 3:
                raise KGFormatError(f"{label}: line {lineno}: expected 3 tab-separated fields, got {len(fields)}")
            if any(not f for f in fields):
                raise KGFormatError(f"{label}: line {lineno}: empty field")
            triples.append((fields[0], fields[1], fields[2]))
    return triples


def read_items_file(path: str | Path) -> list[str]:
    with open(path, encoding="utf-8") as fh:
        return [ln.strip() for ln in fh if ln.strip() and not ln.startswith("#")]


@dataclass(frozen=True)
class MultiDomainKG:
    entities: tuple[str, ...]
    relations: tuple[str, ...]
    # rows of (head, rel, tail, domain)
    triples: np.ndarray
    domains: tuple[str, ...]
    items: tuple[int, ...]
    item_domain: dict[int, int]
    item_adjacency: dict[int, tuple[tuple[int, int], ...]]
    entity_index: dict[str, int] = field(repr=False, compare=False, default_factory=dict)
    relation_index: dict[str, int] = field(repr=False, compare=False, default_factory=dict)

    @property
    def n_entities(self) -> int:
        return len(self.entities)

    @property
    def n_relations(self) -> int:
        return len(self.relations)

    def degree(self, item: int) -> int:
        return len(self.item_adjacency.get(item, ()))

    def domain_items(self, domain: str | int) -> list[int]:
        d = self.domains.index(domain) if isinstance(domain, str) else domain
        return [i for i in self.items if self.item_domain[i] == d]

    def domain_vocab(self, domain: str | int) -> tuple[set[int], set[int]]:
        """(entity set, relation set) touched by one domain's triples."""
        d = self.domains.index(domain) if isinstance(domain, str) else domain
        rows = self.triples[self.triples[:, 3] == d]
        return set(rows[:, 0]) | set(rows[:, 2]), set(rows[:, 1])

    def domain_triples(self, domain: str | int) -> list[RawTriple]:
        d = self.domains.index(domain) if isinstance(domain, str) else domain
        rows = self.triples[self.triples[:, 3] == d]
        return [(self.entities[h], self.relations[r], self.entities[t]) for h, r, t, _ in rows]


def build_multidomain_kg(
    domains: Sequence[tuple[str, Sequence[RawTriple]]],
    item_declarations: dict[str, Sequence[str]],
) -> MultiDomainKG:
    """Merge per-domain triples into one graph; identical strings share one index."""
    if not domains:
        raise KGFormatError("at least one domain is required")
    ent: dict[str, int] = {}
    rel: dict[str, int] = {}
    rows: list[tuple[int, int, int, int]] = []
    names = []
    for d, (name, triples) in enumerate(domains):
        names.append(name)
        for h, r, t in triples:
            hi = ent.setdefault(h, len(ent))
            ri = rel.setdefault(r, len(rel))
            ti = ent.setdefault(t, len(ent))
            rows.append((hi, ri, ti, d))

    items: list[int] = []
    item_domain: dict[int, int] = {}
    for name, declared in item_declarations.items():
        if name not in names:
            raise KGFormatError(f"items declared for unknown domain {name!r}")
        for ident in declared:
            if ident not in ent:
                raise KGFormatError(f"declared item {ident!r} ({name}) never appears in any triple")
            idx = ent[ident]
            if idx not in item_domain:
                items.append(idx)
                item_domain[idx] = names.index(name)

    triples = np.asarray(rows, dtype=np.int64).reshape(-1, 4)
    adjacency: dict[int, list[tuple[int, int]]] = {i: [] for i in items}
    for h, r, t, _ in rows:
        if h in adjacency:
            adjacency[h].append((r, t))
    return MultiDomainKG(
        entities=tuple(ent),
        relations=tuple(rel),
        triples=triples,
        domains=tuple(names),
        items=tuple(items),
        item_domain=item_domain,
        item_adjacency={k: tuple(v) for k, v in adjacency.items()},
        entity_index=ent,
        relation_index=rel,
    )


def sample_item_neighborhood(
    kg: MultiDomainKG, item: int, n: int, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """``n`` (relation, tail) pairs for ``item`` plus a validity mask.

    Sampling is without replacement; short neighbourhoods are padded with ``PAD``.
    """
    if item not in kg.item_adjacency:
        raise KeyError(f"entity {item} is not an item")
    adj = kg.item_adjacency[item]
    pairs = np.full((n, 2), PAD, dtype=np.int64)
    mask = np.zeros(n, dtype=bool)
    if len(adj) > n:
        pick = np.sort(rng.choice(len(adj), size=n, replace=False))
        chosen = [adj[i] for i in pick]
    else:
        chosen = list(adj)
    if chosen:
        pairs[: len(chosen)] = np.asarray(chosen, dtype=np.int64)
        mask[: len(chosen)] = True
    return pairs, mask


def sample_batch_neighborhoods(
    kg: MultiDomainKG, items: Iterable[int], n: int, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    out = [sample_item_neighborhood(kg, int(i), n, rng) for i in items]
    return np.stack([p for p, _ in out]), np.stack([m for _, m in out])


# ---------------------------------------------------------------- features


def _hash64(token: str, seed: int) -> int:
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8, key=seed.to_bytes(8, "little")).digest()
    return int.from_bytes(digest, "little")


def hash_featurize(text: str, dim: int, seed: int = 0) -> np.ndarray:
    """Signed feature hashing of lower-cased whitespace tokens, L2-normalised."""
    if dim < 1:
        raise ValueError("dim must be >= 1")
    vec = np.zeros(dim, dtype=np.float64)
    for tok in text.lower().split():
        h = _hash64(tok, seed)
        vec[h % dim] += 1.0 if (h >> 63) & 1 == 0 else -1.0
    norm = np.linalg.norm(vec)
    if norm > 0:
        vec /= norm
    return vec


def entity_text(identifier: str) -> str:
    """Surface text used for hashed features: identifier with '_' read as spaces."""
    return identifier.replace("_", " ")


@dataclass(frozen=True)
class FeatureTable:
    rows: np.ndarray

    def __post_init__(self):
        if self.rows.ndim != 2:
            raise ValueError("feature rows must be 2-D")
        if not np.isfinite(self.rows).all():
            raise ValueError("feature table contains non-finite values")
        self.rows.setflags(write=False)

    @property
    def dim(self) -> int:
        return self.rows.shape[1]

    def __len__(self) -> int:
        return self.rows.shape[0]

    def checksum(self) -> str:
        return hashlib.sha256(np.ascontiguousarray(self.rows).tobytes()).hexdigest()


def hashed_feature_table(entities: Sequence[str], dim: int = 768, seed: int = 0) -> FeatureTable:
    rows = np.stack([hash_featurize(entity_text(e), dim, seed) for e in entities]).astype(np.float32)
    return FeatureTable(rows)


def write_matrix_file(path: str | Path, rows: np.ndarray, magic: bytes = FEATURE_MAGIC, version: int = 1) -> None:
    rows = np.ascontiguousarray(rows, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(magic + struct.pack("<IQI", version, rows.shape[0], rows.shape[1]))
        fh.write(rows.tobytes())


def read_matrix_file(path: str | Path, magic: bytes = FEATURE_MAGIC, version: int = 1) -> np.ndarray:
    data = Path(path).read_bytes()
    head = 4 + struct.calcsize("<IQI")
    if len(data) < head or data[:4] != magic:
        raise KGFormatError(f"{path}: bad magic, expected {magic!r}")
    ver, n_rows, dim = struct.unpack("<IQI", data[4:head])
    if ver != version:
        raise KGFormatError(f"{path}: unsupported version {ver}")
    if len(data) != head + n_rows * dim * 4:
        raise KGFormatError(f"{path}: truncated payload ({len(data) - head} bytes for {n_rows}x{dim})")
    return np.frombuffer(data, dtype="<f4", offset=head).reshape(n_rows, dim).astype(np.float32)


def write_feature_file(path: str | Path, table: FeatureTable) -> None:
    write_matrix_file(path, table.rows)


def read_feature_file(path: str | Path) -> FeatureTable:
    return FeatureTable(read_matrix_file(path))


# ---------------------------------------------------------------- manifests


def write_triple_file(path: str | Path, triples: Iterable[RawTriple]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for h, r, t in triples:
            fh.write(f"{h}\t{r}\t{t}\n")


def load_manifest(path: str | Path) -> tuple[MultiDomainKG, FeatureTable, dict]:
    """Build the merged KG (and features) a manifest describes.

    Returns the raw manifest dict too; relative paths resolve against its folder.
    """
    path = Path(path)
    base = path.parent
    spec = json.loads(path.read_text(encoding="utf-8"))
    if not spec.get("domains"):
        raise KGFormatError(f"{path}: manifest lists no domains")
    domains = []
    items = {}
    for d in spec["domains"]:
        domains.append((d["name"], parse_triple_file(base / d["triples_path"], d["name"])))
        items[d["name"]] = read_items_file(base / d["items_path"])
    kg = build_multidomain_kg(domains, items)
    if spec.get("features_path"):
        feats = read_feature_file(base / spec["features_path"])
        if len(feats) != kg.n_entities:
            raise KGFormatError(f"feature rows {len(feats)} != entity count {kg.n_entities}")
    else:
        feats = hashed_feature_table(kg.entities, spec.get("feature_dim", 768), spec.get("feature_seed", 0))
    return kg, feats, spec
