"""Synthetic bilingual tasks built on token-permutation cipher languages.

"English" instances come from a seeded generator whose labels are simple
functions of the tokens. A :class:`CipherLanguage` is a bijection over content
ids plus an adjacent-swap rate; translating through it at quality ``q`` keeps
each content token's correct image with probability ``q`` and otherwise
substitutes a different random content token.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .autodiff import ContractError

PAD_ID, CLS_ID, SEP_ID, QUERY_ID = 0, 1, 2, 3
RESERVED_IDS = (PAD_ID, CLS_ID, SEP_ID, QUERY_ID)
FIRST_CONTENT_ID = len(RESERVED_IDS)

SEQ_LEN = 15
NUM_KEYWORDS = 3
NUM_TERMINALS = 12
MAX_ANSWER_LEN = 4
SCHEMA_VERSION = 1
ENGLISH = "en"

DEFAULT_SIZES = {
    "classification": {"train": 2000, "validation": 300, "test": 500},
    "span": {"train": 1500, "validation": 200, "test": 400},
}
LOW_RESOURCE_K = 100


def content_ids(vocab_size: int) -> np.ndarray:
    return np.arange(FIRST_CONTENT_ID, vocab_size)


def keyword_ids(num_classes: int = NUM_KEYWORDS) -> np.ndarray:
    """Content ids whose presence determines the class label (English side)."""
    return np.arange(FIRST_CONTENT_ID, FIRST_CONTENT_ID + num_classes)


def terminal_ids(vocab_size: int, count: int = NUM_TERMINALS) -> np.ndarray:
    """Content ids that close an answer span (English side)."""
    return np.arange(vocab_size - count, vocab_size)


@dataclass(frozen=True)
class TaskInstance:
    id: int
    tokens: tuple[int, ...]
    language: str
    label: int | None = None
    span: tuple[int, int] | None = None
    valid: bool = True  # False when span re-projection failed

    def to_record(self, provenance: str | None = None) -> dict:
        rec = {"id": self.id, "tokens": list(self.tokens), "language": self.language}
        if self.label is not None:
            rec["label"] = self.label
        if self.span is not None:
            rec["span"] = list(self.span)
        if not self.valid:
            rec["valid"] = False
        if provenance is not None:
            rec["provenance"] = provenance
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> "TaskInstance":
        return cls(id=rec["id"], tokens=tuple(rec["tokens"]), language=rec["language"],
                   label=rec.get("label"), span=tuple(rec["span"]) if "span" in rec else None,
                   valid=rec.get("valid", True))


# --- corpus generation --------------------------------------------------------

def generate_task_corpus(task: str, n: int, seed: int, vocab_size: int = 64,
                         num_classes: int = NUM_KEYWORDS, seq_len: int = SEQ_LEN) -> list[TaskInstance]:
    """English task instances.

    classification: one of ``num_classes`` keyword tokens occurs two or three
    times among filler tokens; the label is that keyword's index.
    span: a query marker is followed by 1..4 answer tokens; the answer ends at
    the first terminal token after the marker.
    """
    if n < 1:
        raise ContractError(f"corpus size must be >= 1, got {n}")
    rng = np.random.default_rng(seed)
    if task == "classification":
        return [_classification_instance(i, rng, vocab_size, num_classes, seq_len) for i in range(n)]
    if task == "span":
        return [_span_instance(i, rng, vocab_size, seq_len) for i in range(n)]
    raise ValueError(f"unknown task {task!r}")


def _classification_instance(idx, rng, vocab_size, num_classes, seq_len) -> TaskInstance:
    keywords = keyword_ids(num_classes)
    filler = content_ids(vocab_size)[num_classes:]
    label = int(rng.integers(num_classes))
    body = rng.choice(filler, size=seq_len - 1)
    count = int(rng.integers(2, 4))
    body[rng.choice(seq_len - 1, size=count, replace=False)] = keywords[label]
    return TaskInstance(idx, (CLS_ID, *map(int, body)), ENGLISH, label=label)


def _span_instance(idx, rng, vocab_size, seq_len) -> TaskInstance:
    terminals = terminal_ids(vocab_size)
    plain = np.setdiff1d(content_ids(vocab_size), terminals)
    length = int(rng.integers(1, MAX_ANSWER_LEN + 1))
    marker = int(rng.integers(1, seq_len - length))
    tokens = rng.choice(content_ids(vocab_size), size=seq_len)
    tokens[0] = CLS_ID
    tokens[marker] = QUERY_ID
    start, end = marker + 1, marker + length
    tokens[start:end] = rng.choice(plain, size=length - 1)
    tokens[end] = rng.choice(terminals)
    return TaskInstance(idx, tuple(map(int, tokens)), ENGLISH, span=(start, end))


def classification_rule(tokens: Sequence[int], num_classes: int = NUM_KEYWORDS) -> int | None:
    """Label implied by the tokens: the most frequent keyword, None on a tie or absence."""
    counts = [list(tokens).count(int(k)) for k in keyword_ids(num_classes)]
    best = max(counts)
    if best == 0 or counts.count(best) > 1:
        return None
    return counts.index(best)


def span_rule(tokens: Sequence[int], vocab_size: int = 64) -> tuple[int, int] | None:
    """Answer implied by the tokens: from after the marker to the first terminal."""
    terminals = set(terminal_ids(vocab_size).tolist())
    if tokens.count(QUERY_ID) != 1:
        return None
    start = tokens.index(QUERY_ID) + 1
    for j in range(start, len(tokens)):
        if tokens[j] in terminals:
            return start, j
    return None


# --- cipher languages -----------------------------------------------------------

@dataclass(frozen=True)
class CipherLanguage:
    name: str
    permutation: tuple[int, ...]
    swap_rate: float = 0.0

    @classmethod
    def create(cls, name: str, swap_rate: float = 0.0, seed: int = 0,
               vocab_size: int = 64) -> "CipherLanguage":
        rng = np.random.default_rng(seed)
        perm = np.arange(vocab_size)
        content = content_ids(vocab_size)
        perm[content] = rng.permutation(content)
        return cls(name, tuple(int(p) for p in perm), float(swap_rate))

    @property
    def vocab_size(self) -> int:
        return len(self.permutation)

    @property
    def forward_map(self) -> np.ndarray:
        return np.asarray(self.permutation)

    @property
    def inverse_map(self) -> np.ndarray:
        inv = np.empty(self.vocab_size, dtype=np.int64)
        inv[self.forward_map] = np.arange(self.vocab_size)
        return inv

    def to_dict(self) -> dict:
        return {"name": self.name, "swap_rate": self.swap_rate, "permutation": list(self.permutation)}


DEFAULT_LANGUAGES = (("c00", 0.0), ("c10", 0.1), ("c30", 0.3))


def default_languages(seed: int = 1234, vocab_size: int = 64) -> list[CipherLanguage]:
    return [CipherLanguage.create(name, rate, seed + k, vocab_size)
            for k, (name, rate) in enumerate(DEFAULT_LANGUAGES)]


@dataclass(frozen=True)
class MtStandin:
    """Translation through a cipher language at per-token fidelity ``quality``."""
    base: CipherLanguage
    quality: float = 1.0

    def translate(self, instance: TaskInstance, direction: str, seed: int) -> TaskInstance:
        return apply_cipher(self.base, instance, direction, self.quality, seed)


def apply_cipher(lang: CipherLanguage, instance: TaskInstance, direction: str,
                 quality: float, seed: int) -> TaskInstance:
    """Translate ``instance`` into the other language.

    ``direction`` is ``"to_target"`` (English -> ``lang``) or ``"to_source"``.
    Each content token maps correctly with probability ``quality``; adjacent
    content-token pairs are then transposed at ``lang.swap_rate``. Span
    endpoints follow the swaps; a swap that moves a token across a span
    boundary marks the instance invalid.
    """
    if direction == "to_target":
        if instance.language != ENGLISH:
            raise ContractError(f"to_target expects an English instance, got {instance.language!r}")
        mapping, out_lang = lang.forward_map, lang.name
    elif direction == "to_source":
        if instance.language != lang.name:
            raise ContractError(f"to_source expects a {lang.name!r} instance, got {instance.language!r}")
        mapping, out_lang = lang.inverse_map, ENGLISH
    else:
        raise ValueError(f"direction must be 'to_target' or 'to_source', got {direction!r}")

    rng = np.random.default_rng([seed, instance.id])
    tokens = np.asarray(instance.tokens, dtype=np.int64)
    out = mapping[tokens]
    is_content = tokens >= FIRST_CONTENT_ID
    corrupt = is_content & (rng.random(tokens.size) >= quality)
    n_content = lang.vocab_size - FIRST_CONTENT_ID
    for j in np.flatnonzero(corrupt):
        # uniform over the other content tokens
        k = int(rng.integers(n_content - 1)) + FIRST_CONTENT_ID
        out[j] = k if k < out[j] else k + 1

    positions = np.arange(tokens.size)
    swaps: list[int] = []
    if lang.swap_rate > 0:
        draws = rng.random(tokens.size)
        j = 0
        while j < tokens.size - 1:
            if (out[j] >= FIRST_CONTENT_ID and out[j + 1] >= FIRST_CONTENT_ID
                    and draws[j] < lang.swap_rate):
                out[[j, j + 1]] = out[[j + 1, j]]
                positions[[j, j + 1]] = positions[[j + 1, j]]
                swaps.append(j)
                j += 2
            else:
                j += 1

    span, valid = instance.span, instance.valid
    if span is not None:
        s, e = span
        for j in swaps:
            if (j < s <= j + 1) or (j <= e < j + 1):
                valid = False
    return TaskInstance(instance.id, tuple(int(t) for t in out), out_lang,
                        label=instance.label, span=span, valid=valid)


# --- parallel splits ------------------------------------------------------------

PROVENANCE_TRAIN = "gold-source+mt-target"
PROVENANCE_EVAL = "gold-target+mt-source"


@dataclass(frozen=True)
class ParallelPair:
    source: TaskInstance
    target: TaskInstance
    provenance: str

    @property
    def id(self) -> int:
        return self.source.id

    @property
    def valid(self) -> bool:
        return self.source.valid and self.target.valid


@dataclass
class ParallelSplits:
    train: list[ParallelPair]
    validation: list[ParallelPair]
    test: list[ParallelPair]
    language: str = ""
    meta: dict = field(default_factory=dict)

    def items(self):
        return (("train", self.train), ("validation", self.validation), ("test", self.test))


def make_parallel_splits(corpus: Sequence[TaskInstance], lang: CipherLanguage, q_train: float,
                         q_eval: float, sizes: dict[str, int], seed: int) -> ParallelSplits:
    """Carve disjoint train/validation/test parallel sets out of an English corpus.

    Train pairs are (gold English, MT into ``lang`` at ``q_train``). Evaluation
    pairs are (MT back into English at ``q_eval``, gold target obtained with a
    perfect cipher), matching a world where the target text is authentic.
    """
    n_train, n_val, n_test = sizes["train"], sizes["validation"], sizes["test"]
    if n_train + n_val + n_test > len(corpus):
        raise ContractError(f"split sizes {sizes} exceed corpus size {len(corpus)}")
    order = np.random.default_rng(seed).permutation(len(corpus))
    chunks = np.split(order[: n_train + n_val + n_test], [n_train, n_train + n_val])
    train = []
    for i in chunks[0]:
        src = corpus[i]
        tgt = apply_cipher(lang, src, "to_target", q_train, seed)
        train.append(ParallelPair(src, tgt, PROVENANCE_TRAIN))
    evals = []
    for idx in chunks[1:]:
        pairs = []
        for i in idx:
            gold = apply_cipher(lang, corpus[i], "to_target", 1.0, seed + 1)
            src = apply_cipher(lang, gold, "to_source", q_eval, seed + 2)
            pairs.append(ParallelPair(src, gold, PROVENANCE_EVAL))
        evals.append(pairs)
    return ParallelSplits(train, evals[0], evals[1], language=lang.name,
                          meta={"q_train": q_train, "q_eval": q_eval, "seed": seed})


def english_splits(corpus: Sequence[TaskInstance], sizes: dict[str, int], seed: int) -> dict[str, list[TaskInstance]]:
    """The same disjoint partition as :func:`make_parallel_splits`, English side only."""
    n_train, n_val, n_test = sizes["train"], sizes["validation"], sizes["test"]
    if n_train + n_val + n_test > len(corpus):
        raise ContractError(f"split sizes {sizes} exceed corpus size {len(corpus)}")
    order = np.random.default_rng(seed).permutation(len(corpus))
    chunks = np.split(order[: n_train + n_val + n_test], [n_train, n_train + n_val])
    return {name: [corpus[i] for i in idx] for name, idx in zip(("train", "validation", "test"), chunks)}


def low_resource_subsample(split: Sequence, k: int, seed: int) -> list:
    """Seeded subsample of size ``k`` whose per-class counts differ by at most one."""
    if k > len(split):
        raise ContractError(f"cannot draw {k} items from a split of {len(split)}")
    rng = np.random.default_rng(seed)

    def label_of(item):
        inst = item.source if isinstance(item, ParallelPair) else item
        return inst.label

    groups: dict = {}
    for pos, item in enumerate(split):
        groups.setdefault(label_of(item), []).append(pos)
    queues = [list(rng.permutation(groups[key])) for key in sorted(groups, key=lambda x: (x is None, x))]
    class_order = list(rng.permutation(len(queues)))
    chosen: list[int] = []
    while len(chosen) < k:
        for c in class_order:
            if queues[c] and len(chosen) < k:
                chosen.append(int(queues[c].pop()))
    return [split[i] for i in sorted(chosen)]


# --- serialization --------------------------------------------------------------

def write_jsonl(path, records: Iterable[dict], kind: str = "corpus") -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"schema_version": SCHEMA_VERSION, "kind": kind}) + "\n")
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_jsonl(path) -> tuple[dict, list[dict]]:
    with open(path, encoding="utf-8") as fh:
        lines = [json.loads(line) for line in fh if line.strip()]
    if not lines or lines[0].get("schema_version") != SCHEMA_VERSION:
        raise ValueError(f"{path}: missing or unsupported schema version header")
    return lines[0], lines[1:]


def save_corpus(path, instances: Iterable[TaskInstance], provenance: str | None = None) -> None:
    write_jsonl(path, (inst.to_record(provenance) for inst in instances))


def load_corpus(path) -> list[TaskInstance]:
    _, records = read_jsonl(path)
    return [TaskInstance.from_record(r) for r in records]


def save_splits(directory, splits: ParallelSplits) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name, pairs in splits.items():
        records = []
        for p in pairs:
            records.append(dict(p.source.to_record(p.provenance), side="source"))
            records.append(dict(p.target.to_record(p.provenance), side="target"))
        write_jsonl(directory / f"{name}.jsonl", records, kind=f"parallel-{name}")


def stack_tokens(instances: Sequence[TaskInstance]) -> np.ndarray:
    return np.asarray([inst.tokens for inst in instances], dtype=np.int64)


def with_language(instance: TaskInstance, language: str) -> TaskInstance:
    return replace(instance, language=language)
