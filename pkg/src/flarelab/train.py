"""Two-stage training: English base fine-tune, then target-language adapter training.

Every translate-train method is wrapped in a :class:`MethodRunner` exposing the
same three calls (``loss``, ``predict``, ``trainable``) so the fit loop,
checkpoint selection and evaluation do not care which method is running.
"""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .adapters import (AdapterSet, MtProjection, XMixupLite, build_source_cache, flare_mt_forward,
                       input_level_concat, merge_lora, xmixup_layer_forward)
from .autodiff import Tensor, no_grad
from .data import SEP_ID, ParallelPair, TaskInstance
from .model import TransformerEncoder, encode, span_decode
from .optim import AdamW

log = logging.getLogger(__name__)

METHODS = ("lora", "flare", "flare_mt", "input_fusion", "xmixup", "train_only")


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 2e-3
    head_lr: float = 2e-3
    epochs: int = 10
    batch_size: int = 16
    seed: int = 0
    weight_decay: float = 0.01
    clip_norm: float = 1.0
    method: str = "lora"
    fusion: str = "add_relu"
    r: int = 8
    alpha: float = 16.0
    base_r: int = 64
    base_alpha: float = 128.0
    mt_quality: float = 0.9
    low_resource_k: int | None = None
    source_offset: int = 0
    mix_layer: int | None = None
    xmixup_lambda: float = 0.1
    fused_fraction: float = 0.5  # train_only variant

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Batch:
    ids: np.ndarray
    source: np.ndarray
    target: np.ndarray
    labels: np.ndarray  # [B] class ids or [B x 2] spans


def make_batch(pairs: Sequence[ParallelPair], task: str) -> Batch:
    src = np.asarray([p.source.tokens for p in pairs], dtype=np.int64)
    tgt = np.asarray([p.target.tokens for p in pairs], dtype=np.int64)
    if task == "classification":
        labels = np.asarray([p.target.label for p in pairs], dtype=np.int64)
    else:
        labels = np.asarray([p.target.span for p in pairs], dtype=np.int64)
    return Batch(np.asarray([p.id for p in pairs]), src, tgt, labels)


def iterate_batches(pairs: Sequence[ParallelPair], task: str, batch_size: int,
                    rng: np.random.Generator | None = None):
    order = np.arange(len(pairs)) if rng is None else rng.permutation(len(pairs))
    for start in range(0, len(pairs), batch_size):
        yield make_batch([pairs[i] for i in order[start:start + batch_size]], task)


def usable(pairs: Sequence[ParallelPair]) -> list[ParallelPair]:
    """Drop pairs whose span could not be re-projected."""
    return [p for p in pairs if p.valid]


def english_pairs(instances: Sequence[TaskInstance]) -> list[ParallelPair]:
    return [ParallelPair(inst, inst, "english") for inst in instances]


def task_loss(task: str, head_out, labels: np.ndarray) -> Tensor:
    if task == "classification":
        return ad.cross_entropy(head_out, labels)
    start, end = head_out
    return ad.scale(ad.cross_entropy(start, labels[:, 0]) + ad.cross_entropy(end, labels[:, 1]), 0.5)


def decode(task: str, head_out, lo: int = 0) -> list:
    if task == "classification":
        return [int(k) for k in np.argmax(head_out.data, axis=1)]
    start, end = head_out
    return [tuple(int(v) - lo for v in span_decode(s, e, lo=lo)) for s, e in zip(start.data, end.data)]


class MethodRunner:
    """Forward/loss/predict for one translate-train method on top of a frozen base."""

    def __init__(self, base: TransformerEncoder, cfg: TrainConfig, mt_encoder=None):
        self.base = base
        self.cfg = cfg
        self.task = base.task
        self.model = base.copy()
        for p in self.model.head_parameters().values():
            p.requires_grad = True
        method = cfg.method
        fusion = None
        if method in ("flare", "flare_mt"):
            fusion = cfg.fusion
        elif method == "train_only":
            fusion = "add"
        seed = cfg.seed
        self.adapters = AdapterSet(base.config, cfg.r, cfg.alpha, fusion, seed=seed + 101, dtype=base.dtype)
        self.projection = None
        self.mixer = None
        self.mt_encoder = mt_encoder
        if method == "flare_mt":
            if mt_encoder is None:
                raise ValueError("flare_mt needs a pretrained MT stand-in encoder")
            self.projection = MtProjection(mt_encoder.hidden_dim, base.config.hidden_dim,
                                           seed=seed + 202, dtype=base.dtype)
        if method == "xmixup":
            self.mixer = XMixupLite(base.config, cfg.mix_layer, cfg.xmixup_lambda,
                                    seed=seed + 303, dtype=base.dtype)
        self.rng = np.random.default_rng(seed + 404)
        self.fused_batches = 0
        self.total_batches = 0
        self._schedule: list[bool] = []

    def plan_epoch(self, n_batches: int) -> None:
        """train_only: fuse exactly round(fraction * n) of the coming batches, in shuffled order."""
        fused = int(round(self.cfg.fused_fraction * n_batches))
        mask = np.zeros(n_batches, dtype=bool)
        mask[:fused] = True
        self._schedule = list(self.rng.permutation(mask))

    @property
    def method(self) -> str:
        return self.cfg.method

    def trainable(self) -> dict[str, Tensor]:
        params = {f"adapter.{k}": v for k, v in self.adapters.parameters().items()}
        params.update(self.model.head_parameters())
        if self.projection is not None:
            params.update(self.projection.parameters())
        if self.mixer is not None:
            params.update(self.mixer.parameters())
        return params

    def trainable_count(self, include_head: bool = False) -> int:
        params = self.trainable()
        return int(sum(t.size for k, t in params.items() if include_head or not k.startswith("head.")))

    def fusion_inputs(self, batch: Batch, zero_source: bool = False):
        if self.method == "flare":
            cache = build_source_cache(self.base, batch.source, self.cfg.source_offset)
            return cache.zeros_like() if zero_source else cache
        if self.method == "flare_mt":
            if zero_source:
                m = batch.target.shape[1]
                return Tensor(np.zeros((batch.target.shape[0], m, self.base.config.hidden_dim),
                                       dtype=self.base.dtype))
            return flare_mt_forward(self.mt_encoder, self.projection, batch.target)
        return None

    def forward(self, batch: Batch, training: bool = False, zero_source: bool = False):
        """Returns (head output, auxiliary loss or None, span offset)."""
        method = self.method
        if method in ("lora",):
            out = encode(self.model, batch.target, self.adapters)
            return self.model.head_logits(out.final), None, 0
        if method in ("flare", "flare_mt"):
            out = encode(self.model, batch.target, self.adapters, self.fusion_inputs(batch, zero_source))
            return self.model.head_logits(out.final), None, 0
        if method == "train_only":
            source = None
            if training:
                self.total_batches += 1
                fused = self._schedule.pop(0) if self._schedule else self.rng.random() < self.cfg.fused_fraction
                if fused:
                    self.fused_batches += 1
                    source = build_source_cache(self.base, batch.source, self.cfg.source_offset)
                else:
                    source = build_source_cache(self.base, batch.source, self.cfg.source_offset).zeros_like()
            out = encode(self.model, batch.target, self.adapters, source)
            return self.model.head_logits(out.final), None, 0
        if method == "input_fusion":
            tokens = input_level_concat(batch.source, batch.target, SEP_ID, self.base.config.max_seq_len)
            out = encode(self.model, tokens, self.adapters)
            return self.model.head_logits(out.final), None, batch.source.shape[1] + 1
        if method == "xmixup":
            head_out, consistency = xmixup_layer_forward(self.model, batch.source, batch.target,
                                                         self.mixer, self.adapters)
            return head_out, consistency, 0
        raise ValueError(method)

    def loss(self, batch: Batch) -> Tensor:
        head_out, aux, offset = self.forward(batch, training=True)
        labels = batch.labels + offset if self.task == "span" else batch.labels
        loss = task_loss(self.task, head_out, labels)
        if aux is not None:
            loss = loss + aux
        return loss

    def predict(self, batch: Batch, zero_source: bool = False) -> list:
        with no_grad():
            head_out, _, offset = self.forward(batch, zero_source=zero_source)
        return decode(self.task, head_out, lo=offset)

    def eval_loss(self, pairs: Sequence[ParallelPair], batch_size: int = 64) -> float:
        total, count = 0.0, 0
        with no_grad():
            for batch in iterate_batches(pairs, self.task, batch_size):
                head_out, aux, offset = self.forward(batch)
                labels = batch.labels + offset if self.task == "span" else batch.labels
                value = task_loss(self.task, head_out, labels).item()
                if aux is not None:
                    value += aux.item()
                total += value * len(batch.ids)
                count += len(batch.ids)
        return total / max(count, 1)

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.trainable().items()}

    def restore(self, state: dict[str, np.ndarray]) -> None:
        for k, v in self.trainable().items():
            v.data = state[k].copy()


def select_checkpoint(trace: Sequence[float]) -> int:
    """Index of the best validation score; ties go to the earliest epoch."""
    if not trace:
        raise ValueError("empty validation trace")
    best = 0
    for i, value in enumerate(trace):
        if value > trace[best]:
            best = i
    return best


def metric_value(task: str, predictions: Sequence, golds: Sequence) -> float:
    if not golds:
        return float("nan")
    hits = sum(1 for p, g in zip(predictions, golds) if (tuple(p) == tuple(g) if task == "span" else p == g))
    return hits / len(golds)


def gold_of(task: str, inst: TaskInstance):
    return inst.label if task == "classification" else tuple(inst.span)


def runner_metric(runner: MethodRunner, pairs: Sequence[ParallelPair], batch_size: int = 64,
                  zero_source: bool = False) -> tuple[float, list]:
    pairs = usable(pairs)
    preds: list = []
    for batch in iterate_batches(pairs, runner.task, batch_size):
        preds.extend(runner.predict(batch, zero_source=zero_source))
    golds = [gold_of(runner.task, p.target) for p in pairs]
    return metric_value(runner.task, preds, golds), preds


@dataclass
class FitResult:
    step_losses: list[float]
    epoch_losses: list[float]
    validation: list[float]
    best_epoch: int
    initial_loss: float
    final_loss: float
    steps: int
    seconds: float
    peak_tape_bytes: int = 0  # bytes held by the recorded graph of the first step
    snapshots: list[dict] = field(default_factory=list, repr=False)

    @property
    def converged(self) -> bool:
        return self.final_loss <= 0.5 * self.initial_loss


def fit(runner: MethodRunner, train: Sequence[ParallelPair], validation: Sequence[ParallelPair],
        keep_snapshots: bool = False) -> FitResult:
    """Train the runner's trainable parameters; restores the best-validation epoch.

    ``initial_loss`` is the mean training loss before the first update and
    ``final_loss`` the mean of the step losses in the last epoch.
    """
    cfg = runner.cfg
    train = usable(train)
    optimizer = AdamW(runner.trainable(), lr=cfg.lr, weight_decay=cfg.weight_decay,
                      clip_norm=cfg.clip_norm, lr_overrides={"head.": cfg.head_lr})
    rng = np.random.default_rng(cfg.seed + 505)
    initial = runner.eval_loss(train)
    step_losses, epoch_losses, trace, snapshots = [], [], [], []
    t0 = time.perf_counter()
    step = 0
    peak = 0
    for epoch in range(cfg.epochs):
        losses = []
        runner.plan_epoch(-(-len(train) // cfg.batch_size))
        for batch in iterate_batches(train, runner.task, cfg.batch_size, rng):
            optimizer.zero_grad()
            loss = runner.loss(batch)
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingError(f"non-finite loss {value} at step {step} ({cfg.method})")
            if step == 0:
                peak = int(sum(t.data.nbytes for t in ad.tape(loss)))
            ad.backward(loss)
            optimizer.step()
            losses.append(value)
            step += 1
        step_losses.extend(losses)
        epoch_losses.append(float(np.mean(losses)))
        score, _ = runner_metric(runner, validation)
        trace.append(score)
        snapshots.append(runner.snapshot())
        log.debug("%s epoch %d loss %.4f val %.4f", cfg.method, epoch, epoch_losses[-1], score)
    best = select_checkpoint(trace)
    runner.restore(snapshots[best])
    return FitResult(step_losses, epoch_losses, trace, best, initial, epoch_losses[-1], step,
                     time.perf_counter() - t0, peak, snapshots if keep_snapshots else [])


@dataclass
class BaseResult:
    model: TransformerEncoder
    fit: FitResult
    pre_merge_runner: MethodRunner


def train_base_english(model: TransformerEncoder, train: Sequence[TaskInstance],
                       validation: Sequence[TaskInstance], cfg: TrainConfig) -> BaseResult:
    """Fine-tune head + plain LoRA on English, then merge the LoRA into the weights."""
    cfg = replace(cfg, method="lora", r=cfg.base_r, alpha=cfg.base_alpha)
    runner = MethodRunner(model, cfg)
    result = fit(runner, english_pairs(train), english_pairs(validation))
    merged = merge_lora(runner.model, runner.adapters)
    for p in merged.params.values():
        p.requires_grad = False
    return BaseResult(merged, result, runner)


def train_translate_train(base: TransformerEncoder, splits, cfg: TrainConfig, mt_encoder=None,
                          keep_snapshots: bool = False) -> tuple[MethodRunner, FitResult]:
    runner = MethodRunner(base, cfg, mt_encoder)
    result = fit(runner, splits.train, splits.validation, keep_snapshots)
    return runner, result


def train_only_fusion_variant(base: TransformerEncoder, splits, cfg: TrainConfig):
    """FLARE with fusion on a random fraction of batches and no source at inference."""
    return train_translate_train(base, splits, replace(cfg, method="train_only"))


# --- evaluation settings ------------------------------------------------------

SETTINGS = ("zero_shot", "translate_test", "target", "english")


@dataclass
class EvalResult:
    setting: str
    metric: float
    predictions: list[dict]


def predict_model(model: TransformerEncoder, tokens: np.ndarray, batch_size: int = 64) -> list:
    preds: list = []
    with no_grad():
        for start in range(0, len(tokens), batch_size):
            out = encode(model, tokens[start:start + batch_size])
            preds.extend(decode(model.task, model.head_logits(out.final)))
    return preds


def evaluate(model_or_runner, setting: str, pairs: Sequence, language: str = "") -> EvalResult:
    """Score one evaluation setting.

    zero_shot: base model on the gold target side.
    translate_test: base model on the MT-to-English side.
    target: adapted runner on the target side (FLARE variants also see the source side).
    english: base model on plain English instances (``pairs`` are TaskInstances).
    """
    if setting not in SETTINGS:
        raise ValueError(f"unknown setting {setting!r}")
    if setting == "english":
        insts = [p for p in pairs if p.valid]
        model = model_or_runner
        preds = predict_model(model, np.asarray([i.tokens for i in insts], dtype=np.int64))
        golds = [gold_of(model.task, i) for i in insts]
        ids = [i.id for i in insts]
        task = model.task
    else:
        pairs = usable(pairs)
        golds = [gold_of(_task(model_or_runner), p.target) for p in pairs]
        ids = [p.id for p in pairs]
        task = _task(model_or_runner)
        if setting == "target":
            _, preds = runner_metric(model_or_runner, pairs)
        else:
            side = "target" if setting == "zero_shot" else "source"
            tokens = np.asarray([getattr(p, side).tokens for p in pairs], dtype=np.int64)
            preds = predict_model(model_or_runner, tokens)
    records = [{"id": int(i), "prediction": _jsonable(p), "gold": _jsonable(g),
                "language": language, "setting": setting} for i, p, g in zip(ids, preds, golds)]
    return EvalResult(setting, metric_value(task, preds, golds), records)


def _task(obj) -> str:
    return obj.task


def _jsonable(v):
    return list(v) if isinstance(v, tuple) else v


def ablate_zero_source(runner: MethodRunner, pairs: Sequence[ParallelPair]) -> dict:
    """Accuracy with the real source vs. with the source representation zeroed."""
    normal, _ = runner_metric(runner, pairs)
    ablated, _ = runner_metric(runner, pairs, zero_source=True)
    return {"normal": normal, "ablated": ablated, "drop": normal - ablated}
