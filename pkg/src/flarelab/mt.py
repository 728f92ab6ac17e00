"""Tiny frozen "MT encoder" whose hidden states serve as latent translations."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, no_grad
from .data import CipherLanguage, TaskInstance, apply_cipher
from .model import ModelConfig, TransformerEncoder, encode
from .optim import AdamW
from .train import TrainingError

MT_HIDDEN = 48


def mt_config(vocab_size: int = 64, max_seq_len: int = 32) -> ModelConfig:
    return ModelConfig(num_layers=2, hidden_dim=MT_HIDDEN, num_heads=4, ffn_dim=96,
                       vocab_size=vocab_size, max_seq_len=max_seq_len, num_classes=vocab_size)


class MtEncoder:
    """Per-position de-ciphering model; ``latent`` returns its last block output."""

    def __init__(self, model: TransformerEncoder):
        self.model = model

    @property
    def hidden_dim(self) -> int:
        return self.model.config.hidden_dim

    def freeze(self) -> "MtEncoder":
        for p in self.model.params.values():
            p.requires_grad = False
        return self

    def token_logits(self, tokens) -> Tensor:
        out = encode(self.model, np.atleast_2d(tokens))
        feats = self.model.features(out.final)
        return feats @ self.model.params["head.weight"] + self.model.params["head.bias"]

    def latent(self, tokens) -> Tensor:
        with no_grad():
            out = encode(self.model, np.atleast_2d(tokens))
        return Tensor(out.final.data, dtype=out.final.dtype)

    def accuracy(self, tokens: np.ndarray, targets: np.ndarray) -> float:
        with no_grad():
            pred = np.argmax(self.token_logits(tokens).data, axis=-1)
        return float(np.mean(pred == targets))


@dataclass
class MtPretrainResult:
    encoder: MtEncoder
    heldout_accuracy: float
    losses: list[float]


def _training_pairs(lang: CipherLanguage, corpus: Sequence[TaskInstance], seed: int):
    # target-language text (exact cipher incl. word-order swaps) -> per-position English ids
    tokens = np.asarray([apply_cipher(lang, inst, "to_target", 1.0, seed).tokens for inst in corpus],
                        dtype=np.int64)
    return tokens, lang.inverse_map[tokens]


def pretrain_mt_standin(lang: CipherLanguage, corpus: Sequence[TaskInstance], seed: int = 0,
                        epochs: int = 4, batch_size: int = 32, lr: float = 5e-3,
                        heldout: int = 200) -> MtPretrainResult:
    """Train a 2-block encoder to predict the de-ciphered token at every position, then freeze it."""
    tokens, targets = _training_pairs(lang, corpus, seed)
    split = max(len(tokens) - heldout, 1)
    train_x, train_y = tokens[:split], targets[:split]
    test_x, test_y = tokens[split:], targets[split:]
    model = TransformerEncoder(mt_config(lang.vocab_size), "classification", seed=seed)
    for p in model.params.values():
        p.requires_grad = True
    enc = MtEncoder(model)
    opt = AdamW(model.params, lr=lr, weight_decay=0.0)
    rng = np.random.default_rng(seed)
    losses = []
    for _ in range(epochs):
        order = rng.permutation(len(train_x))
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            logits = enc.token_logits(train_x[idx])
            c = logits.shape[-1]
            loss = ad.cross_entropy(logits.reshape(-1, c), train_y[idx].reshape(-1))
            if not np.isfinite(loss.item()):
                raise TrainingError(f"MT stand-in diverged at step {len(losses)}")
            opt.zero_grad()
            ad.backward(loss)
            opt.step()
            losses.append(loss.item())
    enc.freeze()
    acc = enc.accuracy(test_x, test_y) if len(test_x) else enc.accuracy(train_x, train_y)
    return MtPretrainResult(enc, acc, losses)
