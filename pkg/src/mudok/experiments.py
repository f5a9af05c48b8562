"""Experiment protocols: pre-train, tune, transfer, ablation and the census.

Every protocol takes an ``ExperimentConfig`` and returns a report dict with a
fixed shape: ``{"command", "seed", "config", "rows", "meta"}`` where ``rows``
is a list of flat ``{"name": ..., metric: value}`` records.
"""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .checkpoint import load_checkpoint, save_checkpoint
from .encoder import EncoderConfig, ItemEncoder
from .kg_data import MultiDomainKG
from .ppt import snapshot, verify_frozen_backbone
from .pretrain import (
    PretrainConfig,
    closed_form_census,
    encoder_tensors,
    load_encoder,
    parameter_census,
    pretrain,
    save_encoder,
)
from .rec import InteractionGraph, RecConfig, make_rec_tuner
from .synthetic import Benchmark, SyntheticSpec, generate_synthetic_benchmark, load_benchmark
from .text import TextConfig, TextDataset, make_text_tuner

log = logging.getLogger(__name__)

ABLATIONS = ("full", "G3_no_pretrain", "G4_no_Lcon", "G5_no_Lkg")
MODES = ("base", "mudok")
TASKS = ("rec", "text")

# Desk-scale defaults. The full-size settings (batch 1024, tau 0.1, lr 5e-4) stay the
# PretrainConfig defaults; a 300-item KG needs smaller batches and cross-item negatives.
DESK_PRETRAIN = {"batch_size": 32, "learning_rate": 3e-3, "lam": 0.5, "tau": 0.5, "cross_batch_negatives": True}
DESK_REC = {"epochs": 50, "batch_size": 256, "lr": 1e-2}
DESK_TEXT = {"epochs": 10, "batch_size": 32, "lr": 5e-3}


class ConfigError(ValueError):
    """Invalid experiment configuration (CLI exit code 1)."""


@dataclass
class ExperimentConfig:
    manifest: str | None = None  # None: generate the synthetic benchmark from ``synthetic``
    output_dir: str = "runs"
    seed: int = 0
    pretrain: dict = field(default_factory=lambda: dict(DESK_PRETRAIN))
    tuning: dict = field(default_factory=dict)
    synthetic: dict = field(default_factory=dict)
    task: str = "rec"
    target_domain: str | None = None  # None: domains[seed % n_domains]
    include_domains: list[str] = field(default_factory=list)
    exclude_domains: list[str] = field(default_factory=list)
    mode: str = "mudok"
    ablation: str = "full"
    checkpoint: str | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.ablation not in ABLATIONS:
            raise ConfigError(f"ablation must be one of {ABLATIONS}, got {self.ablation!r}")
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}, got {self.task!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown experiment config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    def pretrain_config(self, ablation: str | None = None) -> PretrainConfig:
        ablation = ablation or self.ablation
        overrides = {"seed": self.seed, **self.pretrain}
        if ablation == "G4_no_Lcon":
            overrides["use_con"] = False
        elif ablation == "G5_no_Lkg":
            overrides["lam"] = 0.0
        try:
            return PretrainConfig.from_dict(overrides)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def rec_config(self) -> RecConfig:
        try:
            return RecConfig.from_dict({**DESK_REC, "seed": self.seed, **self.tuning})
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def text_config(self) -> TextConfig:
        try:
            return TextConfig.from_dict({**DESK_TEXT, "seed": self.seed, **self.tuning})
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc


def make_report(command: str, config: ExperimentConfig, rows: list[dict], **meta) -> dict:
    return {"command": command, "seed": config.seed, "config": config.to_dict(), "rows": rows, "meta": meta}


# ---------------------------------------------------------------- data


def load_or_generate(config: ExperimentConfig, workdir: str | Path = ".") -> Benchmark:
    if config.manifest:
        path = Path(workdir) / config.manifest
        if not path.exists():
            raise ConfigError(f"manifest not found: {path}")
        return load_benchmark(path)
    try:
        spec = SyntheticSpec(**{"seed": config.seed, **config.synthetic})
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    try:
        return generate_synthetic_benchmark(spec)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def selected_domains(kg: MultiDomainKG, config: ExperimentConfig) -> list[str]:
    unknown = (set(config.include_domains) | set(config.exclude_domains)) - set(kg.domains)
    if unknown:
        raise ConfigError(f"unknown domain(s): {sorted(unknown)}")
    chosen = list(config.include_domains) or list(kg.domains)
    chosen = [d for d in chosen if d not in set(config.exclude_domains)]
    if not chosen:
        raise ConfigError("empty domain selection")
    return chosen


def target_domain(kg: MultiDomainKG, config: ExperimentConfig) -> str:
    if config.target_domain is not None:
        if config.target_domain not in kg.domains:
            raise ConfigError(f"unknown target domain {config.target_domain!r}")
        return config.target_domain
    return kg.domains[config.seed % len(kg.domains)]


# ---------------------------------------------------------------- pre-training


def random_backbone(bench: Benchmark, config: ExperimentConfig) -> ItemEncoder:
    """Random-init encoder for the no-pretrain control; seeded apart from training runs."""
    enc = ItemEncoder(config.pretrain_config().encoder_config(bench.kg.n_relations), seed=config.seed + 100_003)
    enc.eval()
    return enc


def pretrain_backbone(bench: Benchmark, config: ExperimentConfig, domains: Sequence[str] | None = None,
                      ablation: str | None = None):
    pc = config.pretrain_config(ablation)
    return pretrain(bench.kg, bench.features, pc, domains=domains), pc


def run_pretrain(config: ExperimentConfig, bench: Benchmark | None = None, out_dir: str | Path | None = None) -> dict:
    """Pre-train on the selected domains; rows are per-epoch losses and timings.

    Writes ``encoder.mdkc`` (plus sidecar) to ``out_dir`` when given.
    """
    bench = bench if bench is not None else load_or_generate(config)
    domains = selected_domains(bench.kg, config)
    result, pc = pretrain_backbone(bench, config, domains)
    census = parameter_census(result.encoder, bench.features)
    census.pop("breakdown")
    meta = {
        "domains": domains,
        "census": {**census, "epoch_seconds": [e["seconds"] for e in result.epochs]},
        "pretrain_config": asdict(pc),
    }
    if out_dir is not None:
        path = save_encoder(Path(out_dir) / "encoder.mdkc", result.encoder, {"pretrain": asdict(pc), "domains": domains})
        meta["checkpoint"] = str(path)
    rows = [{"name": f"epoch{e['epoch']}", **{k: v for k, v in e.items() if k != "epoch"}} for e in result.epochs]
    report = make_report("pretrain", config, rows, **meta)
    report["encoder"] = result.encoder
    return report


# ---------------------------------------------------------------- tuning


def build_tuner(bench: Benchmark, config: ExperimentConfig, domain: str, backbone: ItemEncoder | None):
    """Untrained tuner plus the map of its trainable modules."""
    if config.task == "rec":
        if domain not in bench.interactions:
            raise ConfigError(f"domain {domain!r} has no interaction data")
        graph = InteractionGraph.from_interactions(bench.interactions[domain])
        tuner = make_rec_tuner(graph, config.rec_config(), backbone, bench.kg, bench.features)
        modules = {"rec": tuner.model}
    else:
        if domain not in bench.text:
            raise ConfigError(f"domain {domain!r} has no text data")
        dataset = TextDataset.from_splits(bench.text[domain], bench.kg)
        tuner = make_text_tuner(dataset, config.text_config(), backbone, bench.kg, bench.features)
        modules = dict(tuner.modules_map())
    if tuner.prefix is not None:
        modules["ppt"] = tuner.prefix
    return tuner, modules


def tune(bench: Benchmark, config: ExperimentConfig, domain: str, backbone: ItemEncoder | None,
         steps: int | None = None, check_frozen: bool = True):
    """Tune one adapter on ``domain``; returns (tuner, metrics, freeze report)."""
    tuner, modules = build_tuner(bench, config, domain, backbone)
    frozen = {"encoder": backbone} if backbone is not None else {}
    before = snapshot({**frozen, **modules}, {"features": bench.features.rows}) if check_frozen else None
    tuner.fit(steps)
    freeze_report = None
    if check_frozen:
        after = snapshot({**frozen, **modules}, {"features": bench.features.rows})
        freeze_report = verify_frozen_backbone(before, after, tuple(f"{k}." for k in modules))
    return tuner, tuner.evaluate("test"), freeze_report


def _metric_row(name: str, metrics: dict, **extra) -> dict:
    return {"name": name, **extra, **metrics}


def run_tune(config: ExperimentConfig, bench: Benchmark | None = None, backbone: ItemEncoder | None = None,
             out_dir: str | Path | None = None) -> dict:
    """Base or prefix-enhanced tuning on the target domain."""
    bench = bench if bench is not None else load_or_generate(config)
    domain = target_domain(bench.kg, config)
    if config.mode == "mudok" and backbone is None:
        if config.checkpoint:
            backbone, _, _ = load_encoder(config.checkpoint)
        else:
            backbone = pretrain_backbone(bench, config, selected_domains(bench.kg, config))[0].encoder
    if config.mode == "base":
        backbone = None
    tuner, metrics, freeze = tune(bench, config, domain, backbone)
    meta = {"domain": domain, "frozen_check": freeze}
    if out_dir is not None:
        tensors = dict(tuner.tensors())
        if backbone is not None:
            tensors.update({f"encoder.{k}": v for k, v in encoder_tensors(backbone).items()})
        side = {"experiment": config.to_dict(), "domain": domain}
        if backbone is not None:
            side["encoder"] = backbone.config.to_dict()
        path = save_checkpoint(Path(out_dir) / f"tuned_{config.task}.mdkc", tensors, side)
        meta["checkpoint"] = str(path)
    report = make_report(f"tune-{config.task}", config, [_metric_row(config.mode, metrics, domain=domain)], **meta)
    report["tuner"] = tuner
    return report


def evaluate_checkpoint(path: str | Path, workdir: str | Path = ".", split: str = "test") -> dict:
    """Rebuild a tuned model from a ``tune-*`` checkpoint and score it on ``split``."""
    tensors, side = load_checkpoint(path)
    if "experiment" not in side:
        raise ConfigError(f"{path}: not a tuned-model checkpoint")
    config = ExperimentConfig.from_dict(side["experiment"])
    bench = load_or_generate(config, workdir)
    backbone = None
    if "encoder" in side:
        backbone = ItemEncoder(EncoderConfig(**side["encoder"]), seed=None)
        with torch.no_grad():
            for name, p in backbone.named_parameters():
                p.copy_(tensors[f"encoder.{name}"])
        backbone.eval()
    tuner, modules = build_tuner(bench, config, side["domain"], backbone)
    with torch.no_grad():
        for prefix, mod in modules.items():
            for name, p in mod.named_parameters():
                key = f"{prefix}.{name}"
                if key not in tensors:
                    raise ConfigError(f"{path}: missing tensor {key}")
                p.copy_(tensors[key])
    metrics = tuner.evaluate(split)
    return make_report("eval", config, [_metric_row(config.mode, metrics, domain=side["domain"], split=split)],
                       checkpoint=str(path))


# ---------------------------------------------------------------- protocols


def run_transfer(config: ExperimentConfig, target: str | None = None, bench: Benchmark | None = None,
                 include_full: bool = True) -> dict:
    """Pre-train without ``target``, tune on it; compare with no pre-training and all-domain pre-training."""
    bench = bench if bench is not None else load_or_generate(config)
    kg = bench.kg
    target = target or target_domain(kg, config)
    if target not in kg.domains:
        raise ConfigError(f"unknown target domain {target!r}")
    others = [d for d in kg.domains if d != target]
    if len(others) < 2:
        raise ConfigError(f"transfer needs >= 2 domains besides {target!r}, have {len(others)}")
    items = kg.domain_items(target)
    norms = np.linalg.norm(bench.features.rows[items], axis=1)
    if not np.all(norms > 0):
        missing = [kg.entities[i] for i, nrm in zip(items, norms) if nrm == 0]
        raise ValueError(f"target items lacking features: {missing[:5]}")

    rows = []
    ood = pretrain_backbone(bench, config, others)[0].encoder
    rows.append(_metric_row("OOD-pretrained", tune(bench, config, target, ood)[1]))
    rows.append(_metric_row("no-pretrain", tune(bench, config, target, random_backbone(bench, config))[1]))
    if include_full:
        full = pretrain_backbone(bench, config, list(kg.domains))[0].encoder
        rows.append(_metric_row("full-pretrain", tune(bench, config, target, full)[1]))
    return make_report("transfer", config, rows, target=target, pretrain_domains=others)


def run_ablation(config: ExperimentConfig, bench: Benchmark | None = None, include_base: bool = False) -> dict:
    """full, G3 (random backbone), G4 (no contrastive loss), G5 (lambda = 0), all with shared seeds."""
    bench = bench if bench is not None else load_or_generate(config)
    domain = target_domain(bench.kg, config)
    domains = selected_domains(bench.kg, config)
    rows, logs = [], {}
    if include_base:
        rows.append(_metric_row("base", tune(bench, config, domain, None)[1]))
    for ab in ABLATIONS:
        if ab == "G3_no_pretrain":
            backbone = random_backbone(bench, config)
            logs[ab] = {"pretrained": False}
        else:
            result, pc = pretrain_backbone(bench, config, domains, ab)
            backbone = result.encoder
            logs[ab] = {
                "lam": pc.lam,
                "use_con": pc.use_con,
                "max_kg_term": max(abs(s["kg_term"]) for s in result.steps),
                "max_l_con": max(abs(s["l_con"]) for s in result.steps),
            }
        _, metrics, freeze = tune(bench, config, domain, backbone)
        rows.append(_metric_row(ab, metrics))
        logs[ab]["frozen_ok"] = freeze["ok"]
    return make_report("ablate", config, rows, domain=domain, groups=logs)


def run_census(
    n_entities: int = 500_000,
    n_items: int = 50_000,
    d_feat: int = 768,
    d_model: int = 128,
    n_layers: int = 2,
    n_relations: int = 1_000,
    d_p: int = 16,
    head_params: int = 0,
    seed: int = 0,
) -> dict:
    """Tensor-walk versus closed-form parameter counts, on meta tensors (no allocation)."""
    from .encoder import EncoderConfig
    from .ppt import PrefixTable

    cfg = EncoderConfig(d_feat=d_feat, d_model=d_model, n_relations=n_relations, n_layers=n_layers)
    enc = ItemEncoder(cfg, device="meta", seed=None)
    for p in enc.parameters():
        p.requires_grad_(False)
    with torch.device("meta"):
        prefix = PrefixTable(range(n_items), d_p, d_model, seed=None)
        features = torch.empty(n_entities, d_feat)
        heads = [torch.nn.Linear(head_params, 1, bias=False)] if head_params else []
    walk = parameter_census(enc, features, prefix, heads)
    closed = closed_form_census(cfg, n_entities, n_items, d_p, head_params, backbone_trainable=False)
    backbone_walk = sum(v for k, v in walk["breakdown"].items() if k.startswith("encoder."))
    rows = [
        {"name": "tensor-walk", "total": walk["total"], "trainable": walk["trainable"], "ratio": walk["ratio"]},
        {"name": "closed-form", **closed},
    ]
    cfgd = ExperimentConfig(seed=seed)
    return make_report(
        "census", cfgd, rows,
        n_entities=n_entities, n_items=n_items, d_p=d_p, backbone_params=backbone_walk,
        match=walk["total"] == closed["total"] and walk["trainable"] == closed["trainable"],
    )


# ---------------------------------------------------------------- multi-seed harnesses


def learning_smoke(seeds: Sequence[int] = range(5), config: ExperimentConfig | None = None) -> dict:
    """base vs full vs G3 prefix-enhanced MF, one target domain per seed (rotating)."""
    base_cfg = config or ExperimentConfig()
    per_seed = []
    t0 = time.perf_counter()
    for seed in seeds:
        cfg = ExperimentConfig.from_dict({**base_cfg.to_dict(), "seed": seed})
        bench = load_or_generate(cfg)
        domain = target_domain(bench.kg, cfg)
        full = pretrain_backbone(bench, cfg, list(bench.kg.domains))[0].encoder
        rec = {"seed": seed, "domain": domain}
        for name, bb in (("base", None), ("full", full), ("G3", random_backbone(bench, cfg))):
            rec[name] = tune(bench, cfg, domain, bb, check_frozen=False)[1]["Recall@5"]
        per_seed.append(rec)
        log.info("seed %d %s", seed, rec)
    means = {k: float(np.mean([r[k] for r in per_seed])) for k in ("base", "full", "G3")}
    return {"per_seed": per_seed, "mean": means, "seconds": round(time.perf_counter() - t0, 1)}


def transfer_smoke(seeds: Sequence[int] = range(5), config: ExperimentConfig | None = None) -> dict:
    base_cfg = config or ExperimentConfig(synthetic={"shared_attr_fraction": 0.5})
    per_seed = []
    t0 = time.perf_counter()
    for seed in seeds:
        cfg = ExperimentConfig.from_dict({**base_cfg.to_dict(), "seed": seed})
        rep = run_transfer(cfg)
        rec = {"seed": seed, "target": rep["meta"]["target"]}
        rec.update({r["name"]: r["Recall@5"] for r in rep["rows"]})
        per_seed.append(rec)
        log.info("seed %d %s", seed, rec)
    names = ("OOD-pretrained", "no-pretrain", "full-pretrain")
    means = {k: float(np.mean([r[k] for r in per_seed])) for k in names}
    return {"per_seed": per_seed, "mean": means, "seconds": round(time.perf_counter() - t0, 1)}
