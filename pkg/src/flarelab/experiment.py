"""Declarative experiments: config parsing, run orchestration, sweeps.

Layout under ``output_dir``::

    <config-hash>/config.json, manifest.json
    <config-hash>/<method>/<language>/<seed>/   metrics, predictions, checkpoints
    bases/<base-hash>/<seed>/base.ckpt           English base models, shared
    mt/<mt-hash>/<language>/<seed>/mt.ckpt       MT stand-in encoders, shared
    sweeps/<kind>-<hash>/                        sweep tables and figures
"""
from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

from . import flops as flop_counter
from .adapters import FUSION_FUNCTIONS, save_adapters
from .checkpoint import load_checkpoint, save_checkpoint
from .data import (DEFAULT_SIZES, LOW_RESOURCE_K, SEQ_LEN, CipherLanguage, english_splits,
                   default_languages, generate_task_corpus, low_resource_subsample, make_parallel_splits, write_jsonl)
from .model import ModelConfig, TransformerEncoder
from .mt import MtEncoder, pretrain_mt_standin
from .probe import probe_activations, write_probe_csv
from .train import (METHODS as TRAIN_METHODS, TrainConfig, ablate_zero_source, evaluate,
                    train_base_english, train_translate_train)

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
TASKS = ("classification", "span")
EVAL_METHODS = ("zero_shot", "translate_test")
ALL_METHODS = TRAIN_METHODS + EVAL_METHODS
METRIC_NAMES = {"classification": "accuracy", "span": "exact_match"}
SWEEP_KINDS = ("fusion_fn", "rank", "mt_quality", "mix_layer", "low_resource")
RANK_VALUES = (8, 64, 128)
QUALITY_VALUES = (1.0, 0.95, 0.9, 0.8)
FUSED_METHODS = ("flare", "flare_mt")


class ConfigError(ValueError):
    """Invalid experiment config; ``keys`` names the offending entries."""

    def __init__(self, message: str, keys: list[str] | None = None):
        self.keys = keys or []
        super().__init__(message + (f": {', '.join(self.keys)}" if self.keys else ""))


@dataclass(frozen=True)
class LanguageSpec:
    name: str
    swap_rate: float = 0.1
    seed: int = 1235

    def build(self, vocab_size: int) -> CipherLanguage:
        return CipherLanguage.create(self.name, self.swap_rate, self.seed, vocab_size)


@dataclass
class TrainSettings:
    lr: float = 2e-3
    head_lr: float = 2e-3
    epochs: int = 10
    batch_size: int = 16
    weight_decay: float = 0.01
    clip_norm: float = 1.0
    base_lr: float = 3e-3
    base_epochs: int = 10
    base_r: int = 64
    base_alpha: float = 128.0
    xmixup_lambda: float = 0.1
    fused_fraction: float = 0.5
    mt_epochs: int = 4


def default_language_specs() -> list[LanguageSpec]:
    """The three-language suite (swap rates 0, 0.1 and 0.3)."""
    return [LanguageSpec(lang.name, lang.swap_rate, 1234 + k) for k, lang in enumerate(default_languages())]


@dataclass
class ExperimentConfig:
    schema_version: int = SCHEMA_VERSION
    task: str = "classification"
    model: ModelConfig = field(default_factory=ModelConfig)
    languages: list[LanguageSpec] = field(default_factory=lambda: default_language_specs())
    methods: list[str] = field(default_factory=lambda: ["lora", "flare"])
    fusion: str = "add_relu"
    r: int = 8
    alpha: float = 16.0
    q_train: float = 0.9
    q_eval: float = 0.9
    seeds: list[int] = field(default_factory=lambda: [0])
    output_dir: str = "runs"
    data_seed: int = 0
    sizes: dict[str, int] | None = None
    low_resource_k: int | None = None
    source_offset: int = 0
    mix_layer: int | None = None
    probe: bool = True
    variant: str = ""
    train: TrainSettings = field(default_factory=TrainSettings)

    # --- (de)serialization ----------------------------------------------------

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        bad = _unknown(raw, cls, "")
        if isinstance(raw.get("model"), dict):
            bad += _unknown(raw["model"], ModelConfig, "model.")
        if isinstance(raw.get("train"), dict):
            bad += _unknown(raw["train"], TrainSettings, "train.")
        for k, lang in enumerate(raw.get("languages") or []):
            if isinstance(lang, dict):
                bad += _unknown(lang, LanguageSpec, f"languages[{k}].")
        if bad:
            raise ConfigError("unknown config keys", bad)
        data = dict(raw)
        try:
            data["model"] = ModelConfig(**raw.get("model", {}))
            data["train"] = TrainSettings(**raw.get("train", {}))
            if "languages" in raw:
                data["languages"] = [LanguageSpec(**lang) for lang in raw["languages"]]
            if "methods" in raw:
                data["methods"] = list(raw["methods"])
            if "seeds" in raw:
                data["seeds"] = list(raw["seeds"])
            config = cls(**data)
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"invalid config value ({exc})") from None
        config.validate()
        return config

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from None
        return cls.from_dict(raw)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")

    def validate(self) -> None:
        bad = []
        if self.schema_version != SCHEMA_VERSION:
            bad.append("schema_version")
        if self.task not in TASKS:
            bad.append("task")
        if not self.methods or any(m not in ALL_METHODS for m in self.methods) \
                or len(set(self.methods)) != len(self.methods):
            bad.append("methods")
        if self.fusion not in FUSION_FUNCTIONS:
            bad.append("fusion")
        if not isinstance(self.r, int) or self.r < 1:
            bad.append("r")
        if not self.alpha > 0:
            bad.append("alpha")
        for name in ("q_train", "q_eval"):
            if not 0.0 < getattr(self, name) <= 1.0:
                bad.append(name)
        if not self.seeds or any(not isinstance(s, int) or s < 0 for s in self.seeds) \
                or len(set(self.seeds)) != len(self.seeds):
            bad.append("seeds")
        names = [lang.name for lang in self.languages]
        if not names or len(set(names)) != len(names) or any(n in ("en", "avg", "") for n in names) \
                or any(not 0.0 <= lang.swap_rate <= 1.0 for lang in self.languages):
            bad.append("languages")
        if self.sizes is not None and set(self.sizes) != {"train", "validation", "test"}:
            bad.append("sizes")
        if self.low_resource_k is not None and self.low_resource_k < 1:
            bad.append("low_resource_k")
        if self.source_offset not in (0, 1):
            bad.append("source_offset")
        if self.mix_layer is not None and not 0 <= self.mix_layer < self.model.num_layers:
            bad.append("mix_layer")
        if self.model.max_seq_len < 2 * SEQ_LEN + 1 and "input_fusion" in self.methods:
            bad.append("model.max_seq_len")
        if bad:
            raise ConfigError("invalid config values", bad)

    # --- derived ----------------------------------------------------------------

    @property
    def split_sizes(self) -> dict[str, int]:
        return dict(self.sizes or DEFAULT_SIZES[self.task])

    @property
    def metric_name(self) -> str:
        return METRIC_NAMES[self.task]

    def config_hash(self) -> str:
        payload = self.to_dict()
        payload.pop("output_dir")
        return _digest(payload)

    def base_hash(self) -> str:
        t = self.train
        return _digest({"task": self.task, "model": asdict(self.model), "data_seed": self.data_seed,
                        "sizes": self.split_sizes, "lr": t.base_lr, "epochs": t.base_epochs,
                        "batch_size": t.batch_size, "weight_decay": t.weight_decay,
                        "clip_norm": t.clip_norm, "base_r": t.base_r, "base_alpha": t.base_alpha})

    def train_config(self, method: str, seed: int) -> TrainConfig:
        t = self.train
        epochs = t.epochs
        return TrainConfig(lr=t.lr, head_lr=t.head_lr, epochs=epochs, batch_size=t.batch_size, seed=seed,
                           weight_decay=t.weight_decay, clip_norm=t.clip_norm, method=method,
                           fusion=self.fusion, r=self.r, alpha=self.alpha, base_r=t.base_r,
                           base_alpha=t.base_alpha, mt_quality=self.q_eval,
                           low_resource_k=self.low_resource_k, source_offset=self.source_offset,
                           mix_layer=self.mix_layer, xmixup_lambda=t.xmixup_lambda,
                           fused_fraction=t.fused_fraction)


def _unknown(raw: dict, cls, prefix: str) -> list[str]:
    known = {f.name for f in fields(cls)}
    return [prefix + k for k in sorted(raw) if k not in known]


def _digest(payload: Any) -> str:
    text = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:12]


# --- file helpers -------------------------------------------------------------------

def write_json(path: Path, payload: Any) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


METRIC_FIELDS = ["method", "language", "seed", "metric", "value", "flops_per_step"]


def write_metrics(cell: Path, method: str, language: str, seed: int, metrics: dict[str, float],
                  flops_per_step: int, extra: dict | None = None) -> None:
    """metrics.csv holds one row per metric; metrics.json adds run facts."""
    cell.mkdir(parents=True, exist_ok=True)
    with open(cell / "metrics.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRIC_FIELDS)
        for name in sorted(metrics):
            writer.writerow([method, language, seed, name, repr(float(metrics[name])), flops_per_step])
    write_json(cell / "metrics.json", {"method": method, "language": language, "seed": seed,
                                       "metrics": {k: float(v) for k, v in metrics.items()},
                                       "flops_per_step": flops_per_step, **(extra or {})})


def fit_record(fit) -> dict:
    return {"initial_loss": fit.initial_loss, "final_loss": fit.final_loss,
            "converged": fit.converged, "epoch_losses": fit.epoch_losses,
            "validation": fit.validation, "best_epoch": fit.best_epoch, "steps": fit.steps,
            "peak_tape_bytes": fit.peak_tape_bytes}


def step_flops(config: ExperimentConfig, method: str, r: int | None = None) -> tuple[int, dict]:
    r = config.r if r is None else r
    counter = flop_counter.count_flops(method, config.model, SEQ_LEN, r=r, fusion=config.fusion,
                                       task=config.task, mix_layer=config.mix_layer)
    if method in EVAL_METHODS:
        per_step = 2 * config.train.batch_size * counter.total
    else:
        per_step = counter.step_flops(config.train.batch_size)
    return per_step, counter.to_dict()


# --- shared caches -------------------------------------------------------------------

@dataclass
class Workspace:
    """Data and cached models shared by every cell of one config."""
    config: ExperimentConfig
    root: Path

    def __post_init__(self):
        c = self.config
        total = sum(c.split_sizes.values())
        self.corpus = generate_task_corpus(c.task, total, seed=c.data_seed, vocab_size=c.model.vocab_size,
                                           num_classes=c.model.num_classes)
        self.english = english_splits(self.corpus, c.split_sizes, seed=c.data_seed)
        self._splits: dict[str, Any] = {}

    def splits(self, lang: LanguageSpec):
        if lang.name not in self._splits:
            c = self.config
            splits = make_parallel_splits(self.corpus, lang.build(c.model.vocab_size), c.q_train, c.q_eval,
                                          c.split_sizes, seed=c.data_seed)
            if c.low_resource_k is not None:
                splits = replace(splits, train=low_resource_subsample(splits.train, c.low_resource_k,
                                                                      seed=c.data_seed))
            self._splits[lang.name] = splits
        return self._splits[lang.name]

    def base_dir(self, seed: int) -> Path:
        return self.root / "bases" / self.config.base_hash() / str(seed)

    def base(self, seed: int) -> tuple[TransformerEncoder, dict]:
        """English base model for ``seed``; trained once and reused from disk."""
        d = self.base_dir(seed)
        ckpt, info = d / "base.ckpt", d / "base.json"
        timing = d / "timing.json"
        if ckpt.exists() and info.exists() and timing.exists():
            record = json.loads(info.read_text(encoding="utf-8"))
            record["seconds"] = json.loads(timing.read_text(encoding="utf-8"))["wall_seconds"]
            return load_checkpoint(ckpt), record
        c = self.config
        t = c.train
        cfg = replace(c.train_config("lora", seed), lr=t.base_lr, head_lr=t.base_lr, epochs=t.base_epochs)
        t0 = time.perf_counter()
        result = train_base_english(TransformerEncoder(c.model, c.task, seed=seed), self.english["train"],
                                    self.english["validation"], cfg)
        english = evaluate(result.model, "english", self.english["test"], language="en")
        d.mkdir(parents=True, exist_ok=True)
        save_checkpoint(result.model, ckpt, seed=seed, base_hash=c.base_hash())
        record = {"english_metric": english.metric, "fit": fit_record(result.fit),
                  "predictions": english.predictions}
        write_json(info, record)
        seconds = time.perf_counter() - t0
        write_json(timing, {"wall_seconds": seconds})  # kept apart so base.json is reproducible
        return result.model, {**json.loads(json.dumps(record)), "seconds": seconds}

    def mt_encoder(self, lang: LanguageSpec, seed: int) -> tuple[MtEncoder, float]:
        c = self.config
        key = _digest({"lang": asdict(lang), "vocab": c.model.vocab_size, "data_seed": c.data_seed,
                       "sizes": c.split_sizes, "task": c.task, "epochs": c.train.mt_epochs})
        d = self.root / "mt" / key / lang.name / str(seed)
        ckpt, info = d / "mt.ckpt", d / "mt.json"
        if ckpt.exists() and info.exists():
            enc = MtEncoder(load_checkpoint(ckpt)).freeze()
            return enc, json.loads(info.read_text(encoding="utf-8"))["heldout_accuracy"]
        result = pretrain_mt_standin(lang.build(c.model.vocab_size), self.english["train"], seed=seed,
                                     epochs=c.train.mt_epochs)
        d.mkdir(parents=True, exist_ok=True)
        save_checkpoint(result.encoder.model, ckpt, seed=seed)
        write_json(info, {"heldout_accuracy": result.heldout_accuracy})
        return MtEncoder(load_checkpoint(ckpt)).freeze(), result.heldout_accuracy


# --- running ------------------------------------------------------------------------

@dataclass
class RunSummary:
    run_dir: Path
    config: ExperimentConfig
    failures: list[dict]
    artifacts: list[str]

    @property
    def ok(self) -> bool:
        return not self.failures


def parameter_digest(model: TransformerEncoder) -> str:
    """sha256 over every parameter's raw bytes, in name order."""
    h = hashlib.sha256()
    for name in sorted(model.params):
        h.update(name.encode("utf-8"))
        h.update(model.params[name].data.tobytes())
    return h.hexdigest()


def run_dir_for(config: ExperimentConfig) -> Path:
    return Path(config.output_dir) / config.config_hash()


def run_experiment(config: ExperimentConfig | str | Path, methods: list[str] | None = None) -> RunSummary:
    """Train the base once per seed, then every method per language; writes a manifest.

    A failing cell is recorded in the manifest (status "partial") and the
    remaining cells still run.
    """
    if not isinstance(config, ExperimentConfig):
        config = ExperimentConfig.load(config)
    methods = list(methods or config.methods)
    root = Path(config.output_dir)
    run_dir = run_dir_for(config)
    run_dir.mkdir(parents=True, exist_ok=True)
    config.save(run_dir / "config.json")
    ws = Workspace(config, root)
    failures: list[dict] = []
    bases: list[str] = []
    for seed in config.seeds:
        try:
            base, info = ws.base(seed)
        except Exception as exc:  # recorded, the seed's cells are skipped
            log.error("base training failed for seed %d: %s", seed, exc)
            failures.append({"cell": f"base/en/{seed}", "error": f"{type(exc).__name__}: {exc}"})
            continue
        bases.append(str((ws.base_dir(seed) / "base.ckpt").relative_to(root)))
        _write_base_cell(run_dir / "base" / "en" / str(seed), config, seed, info)
        for lang in config.languages:
            for method in methods:
                cell = run_dir / method / lang.name / str(seed)
                try:
                    _run_cell(ws, cell, base, method, lang, seed)
                except Exception as exc:
                    log.error("cell %s/%s/%d failed: %s", method, lang.name, seed, exc)
                    failures.append({"cell": f"{method}/{lang.name}/{seed}",
                                     "error": f"{type(exc).__name__}: {exc}"})
    artifacts = sorted(str(p.relative_to(run_dir)) for p in run_dir.rglob("*")
                       if p.is_file() and p.name != "manifest.json")
    manifest = {"schema_version": SCHEMA_VERSION, "config_hash": config.config_hash(),
                "status": "partial" if failures else "complete", "failures": failures,
                "base_checkpoints": bases, "artifacts": artifacts + ["manifest.json"]}
    write_json(run_dir / "manifest.json", manifest)
    return RunSummary(run_dir, config, failures, manifest["artifacts"])


def _write_base_cell(cell: Path, config: ExperimentConfig, seed: int, info: dict) -> None:
    per_step, counter = step_flops(config, "lora", r=config.train.base_r)
    fit = info["fit"]
    write_metrics(cell, "base", "en", seed, {config.metric_name: info["english_metric"]}, per_step,
                  {"fit": fit})
    write_jsonl(cell / "predictions.jsonl", info["predictions"], kind="predictions")
    write_json(cell / "fit.json", fit)
    write_json(cell / "flops.json", counter)
    write_json(cell / "timing.json", {"wall_seconds": info["seconds"]})


def _run_cell(ws: Workspace, cell: Path, base: TransformerEncoder, method: str, lang: LanguageSpec,
              seed: int) -> None:
    config = ws.config
    splits = ws.splits(lang)
    metric = config.metric_name
    per_step, counter = step_flops(config, method)
    cell.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    if method in EVAL_METHODS:
        result = evaluate(base, method, splits.test, language=lang.name)
        write_metrics(cell, method, lang.name, seed, {metric: result.metric}, per_step)
        write_jsonl(cell / "predictions.jsonl", result.predictions, kind="predictions")
        write_json(cell / "flops.json", counter)
        write_json(cell / "timing.json", {"wall_seconds": time.perf_counter() - t0})
        return
    cfg = config.train_config(method, seed)
    mt_encoder, extra_facts = None, {}
    if method == "flare_mt":
        mt_encoder, mt_acc = ws.mt_encoder(lang, seed)
        extra_facts["mt_heldout_accuracy"] = mt_acc
    before = parameter_digest(base)
    runner, fit = train_translate_train(base, splits, cfg, mt_encoder)
    after = parameter_digest(base)
    if after != before:
        raise RuntimeError(f"{method} training modified the frozen base model")
    result = evaluate(runner, "target", splits.test, language=lang.name)
    metrics = {metric: result.metric}
    if method == "flare" and config.fusion in ("add", "add_relu"):
        ablation = ablate_zero_source(runner, splits.test)
        metrics[f"{metric}_zero_source"] = ablation["ablated"]
        metrics["zero_source_drop"] = ablation["drop"]
    if method == "train_only":
        extra_facts["fused_batch_fraction"] = runner.fused_batches / max(runner.total_batches, 1)
    facts = {"fit": fit_record(fit), "trainable_parameters": runner.trainable_count(),
             "base_digest_before": before, "base_digest_after": after,
             "peak_tape_bytes": fit.peak_tape_bytes, **extra_facts}
    write_metrics(cell, method, lang.name, seed, metrics, per_step, facts)
    write_jsonl(cell / "predictions.jsonl", result.predictions, kind="predictions")
    write_json(cell / "fit.json", fit_record(fit))
    write_json(cell / "flops.json", counter)
    extra = {}
    if runner.projection is not None:
        extra.update(runner.projection.parameters())
    if runner.mixer is not None:
        extra.update(runner.mixer.parameters())
    extra.update(runner.model.head_parameters())
    save_adapters(cell / "adapters.ckpt", runner.adapters, extra, method=method, seed=seed,
                  language=lang.name, source_offset=config.source_offset)
    if method == "flare" and config.probe:
        write_probe_csv(probe_activations(runner, splits.test, language=lang.name), cell)
    write_json(cell / "timing.json", {"wall_seconds": time.perf_counter() - t0,
                                      "train_seconds": fit.seconds,
                                      "seconds_per_step": fit.seconds / max(fit.steps, 1)})


# --- sweeps ------------------------------------------------------------------------

@dataclass
class SweepResult:
    kind: str
    directory: Path
    cells: list[tuple[str, RunSummary]]
    table: list[dict]

    @property
    def ok(self) -> bool:
        return all(summary.ok for _, summary in self.cells)


def expand_sweep(kind: str, config: ExperimentConfig) -> list[tuple[str, ExperimentConfig]]:
    """One config per value of the swept axis, labelled ``axis=value``."""
    if kind not in SWEEP_KINDS:
        raise ConfigError(f"unknown sweep kind {kind!r}; expected one of {SWEEP_KINDS}", ["kind"])
    base = copy.deepcopy(config)
    cells: list[tuple[str, ExperimentConfig]] = []
    if kind == "fusion_fn":
        methods = [m for m in base.methods if m in FUSED_METHODS] or ["flare"]
        for fn in FUSION_FUNCTIONS:
            cells.append((f"fusion={fn}", replace(base, fusion=fn, methods=methods)))
    elif kind == "rank":
        methods = [m for m in base.methods if m in TRAIN_METHODS] or ["lora", "flare"]
        for r in RANK_VALUES:
            # alpha follows r so the update scale alpha/r stays fixed
            scale = base.alpha / base.r
            cells.append((f"r={r}", replace(base, r=r, alpha=scale * r, methods=methods)))
    elif kind == "mt_quality":
        for q in QUALITY_VALUES:
            cells.append((f"q={q}", replace(base, q_train=q, q_eval=q)))
    elif kind == "mix_layer":
        for k in range(base.model.num_layers):
            cells.append((f"k={k}", replace(base, mix_layer=k, methods=["xmixup"])))
    elif kind == "low_resource":
        low_train = replace(base.train, epochs=20)
        cells.append((f"k={LOW_RESOURCE_K}", replace(base, low_resource_k=LOW_RESOURCE_K, train=low_train)))
        cells.append(("k=full", replace(base, low_resource_k=None)))
    return [(label, replace(cfg, variant=label)) for label, cfg in cells]


def sweep(kind: str, config: ExperimentConfig, figures: bool = True) -> SweepResult:
    """Run every cell of the sweep and emit one comparison table (mean and std over seeds)."""
    from .report import aggregate, collect_rows, write_table

    cells = expand_sweep(kind, config)
    out = Path(config.output_dir) / "sweeps" / f"{kind}-{config.config_hash()}"
    out.mkdir(parents=True, exist_ok=True)
    summaries = []
    rows = []
    for label, cell_config in cells:
        summary = run_experiment(cell_config)
        summaries.append((label, summary))
        rows.extend(r for r in collect_rows(summary.run_dir) if r.method != "base")
    table = aggregate(rows)
    write_table(out / "sweep_table", table)
    write_json(out / "cells.json", [{"variant": label, "run_dir": str(s.run_dir), "status":
                                     "complete" if s.ok else "partial"} for label, s in summaries])
    if figures:
        from .plots import plot_sweep
        plot_sweep(table, kind, out / "sweep.png")
    return SweepResult(kind, out, summaries, table)
