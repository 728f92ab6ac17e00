"""Pre-layer-norm transformer encoder used as the frozen multilingual model stand-in."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Tensor

TASKS = ("classification", "span")
MAX_SPAN_LEN = 8


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int = 4
    hidden_dim: int = 64
    num_heads: int = 4
    ffn_dim: int = 128
    vocab_size: int = 64
    max_seq_len: int = 32
    num_classes: int = 3

    def __post_init__(self):
        for name, value in asdict(self).items():
            if not isinstance(value, int) or value < 1:
                raise ValueError(f"ModelConfig.{name} must be a positive integer, got {value!r}")
        if self.hidden_dim % self.num_heads:
            raise ValueError(f"hidden_dim {self.hidden_dim} not divisible by num_heads {self.num_heads}")

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.num_heads

    def to_dict(self) -> dict:
        return asdict(self)


def parameter_shapes(config: ModelConfig, task: str) -> dict[str, tuple[int, ...]]:
    """Name -> shape for every parameter of an encoder with the given task head."""
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}; expected one of {TASKS}")
    d, f = config.hidden_dim, config.ffn_dim
    shapes: dict[str, tuple[int, ...]] = {
        "embed.token": (config.vocab_size, d),
        "embed.position": (config.max_seq_len, d),
    }
    for i in range(config.num_layers):
        p = f"blocks.{i}"
        shapes.update({
            f"{p}.ln1.gain": (d,), f"{p}.ln1.bias": (d,),
            f"{p}.attn.query": (d, d), f"{p}.attn.key": (d, d),
            f"{p}.attn.value": (d, d), f"{p}.attn.output": (d, d),
            f"{p}.ln2.gain": (d,), f"{p}.ln2.bias": (d,),
            f"{p}.ffn.in": (d, f), f"{p}.ffn.out": (f, d),
        })
    shapes["final_ln.gain"] = (d,)
    shapes["final_ln.bias"] = (d,)
    if task == "classification":
        shapes["head.weight"] = (d, config.num_classes)
        shapes["head.bias"] = (config.num_classes,)
    else:
        shapes["head.start_weight"] = (d, 1)
        shapes["head.start_bias"] = (1,)
        shapes["head.end_weight"] = (d, 1)
        shapes["head.end_bias"] = (1,)
    return shapes


def parameter_count(config: ModelConfig, task: str) -> int:
    return int(sum(np.prod(s) for s in parameter_shapes(config, task).values()))


class EncoderOutput(NamedTuple):
    hidden_states: list[Tensor]  # one [B x m x d] tensor per block
    final: Tensor                # output of the last block, before the final layer norm

    def stacked(self) -> np.ndarray:
        """Per-block outputs as an array shaped [l x B x m x d] (or [l x m x d] unbatched)."""
        return np.stack([h.data for h in self.hidden_states])


class TransformerEncoder:
    """Encoder plus a classification or span-extraction head.

    Parameters live in ``self.params`` (ordered name -> Tensor). Nothing is
    trainable by default; training code flips ``requires_grad`` on the subset
    it updates.
    """

    def __init__(self, config: ModelConfig | None = None, task: str = "classification",
                 seed: int = 0, dtype=np.float32):
        self.config = config or ModelConfig()
        self.task = task
        self.seed = seed
        rng = np.random.default_rng(seed)
        bound = 1.0 / math.sqrt(self.config.hidden_dim)
        self.params: dict[str, Tensor] = {}
        for name, shape in parameter_shapes(self.config, task).items():
            if name.endswith("gain"):
                value = np.ones(shape)
            elif name.endswith("bias"):
                value = np.zeros(shape)
            else:
                value = rng.uniform(-bound, bound, size=shape)
            self.params[name] = Tensor(value.astype(dtype), dtype=dtype)

    @property
    def dtype(self):
        return self.params["embed.token"].dtype

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def head_parameters(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.params.items() if k.startswith("head.")}

    def base_parameters(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.params.items() if not k.startswith("head.")}

    def parameter_count(self) -> int:
        return int(sum(t.size for t in self.params.values()))

    def copy(self) -> "TransformerEncoder":
        clone = object.__new__(TransformerEncoder)
        clone.config, clone.task, clone.seed = self.config, self.task, self.seed
        clone.params = {k: Tensor(v.data.copy(), dtype=v.dtype) for k, v in self.params.items()}
        return clone

    def astype(self, dtype) -> "TransformerEncoder":
        clone = self.copy()
        for k, v in clone.params.items():
            clone.params[k] = Tensor(v.data.astype(dtype), dtype=dtype)
        return clone

    # --- forward pieces ----------------------------------------------------

    def check_tokens(self, tokens) -> np.ndarray:
        tokens = np.asarray(tokens)
        if tokens.ndim not in (1, 2):
            raise ContractError(f"tokens must be [m] or [B x m], got shape {tokens.shape}")
        if tokens.shape[-1] > self.config.max_seq_len:
            raise ContractError(
                f"sequence length {tokens.shape[-1]} exceeds max_seq_len {self.config.max_seq_len}")
        if tokens.size and (tokens.min() < 0 or tokens.max() >= self.config.vocab_size):
            raise ContractError(f"token ids must lie in [0, {self.config.vocab_size})")
        return tokens.astype(np.int64, copy=False)

    def embed(self, tokens: np.ndarray) -> Tensor:
        m = tokens.shape[-1]
        tok = ad.embedding_lookup(self.params["embed.token"], tokens)
        return tok + self.params["embed.position"][:m]

    def attention(self, i: int, x: Tensor, adapters=None, source=None,
                  return_weights: bool = False):
        """Self-attention sub-block with residual; ``x`` is [B x m x d].

        When ``adapters`` is given, its ``delta(i, kind, h, source)`` output is
        added to the query and value projections of the normalized input ``h``.
        """
        p = f"blocks.{i}"
        cfg = self.config
        b, m, d = x.shape
        nh, dh = cfg.num_heads, cfg.head_dim
        h = ad.layer_norm(x, self.params[f"{p}.ln1.gain"], self.params[f"{p}.ln1.bias"])
        q = h @ self.params[f"{p}.attn.query"]
        k = h @ self.params[f"{p}.attn.key"]
        v = h @ self.params[f"{p}.attn.value"]
        if adapters is not None:
            dq = adapters.delta(i, "query", h, source)
            dv = adapters.delta(i, "value", h, source)
            if dq is not None:
                q = q + dq
            if dv is not None:
                v = v + dv
        q = ad.transpose(q.reshape(b, m, nh, dh), (0, 2, 1, 3))
        k = ad.transpose(k.reshape(b, m, nh, dh), (0, 2, 3, 1))
        v = ad.transpose(v.reshape(b, m, nh, dh), (0, 2, 1, 3))
        weights = ad.softmax(ad.scale(q @ k, 1.0 / math.sqrt(dh)), axis=-1)
        ctx = ad.transpose(weights @ v, (0, 2, 1, 3)).reshape(b, m, d)
        out = x + ctx @ self.params[f"{p}.attn.output"]
        return (out, weights) if return_weights else out

    def feed_forward(self, i: int, x: Tensor) -> Tensor:
        p = f"blocks.{i}"
        h = ad.layer_norm(x, self.params[f"{p}.ln2.gain"], self.params[f"{p}.ln2.bias"])
        return x + ad.relu(h @ self.params[f"{p}.ffn.in"]) @ self.params[f"{p}.ffn.out"]

    def block(self, i: int, x: Tensor, adapters=None, source=None) -> Tensor:
        return self.feed_forward(i, self.attention(i, x, adapters, source))

    def features(self, final: Tensor) -> Tensor:
        return ad.layer_norm(final, self.params["final_ln.gain"], self.params["final_ln.bias"])

    # --- task surface --------------------------------------------------------

    def head_logits(self, final: Tensor):
        feats = self.features(final)
        if self.task == "classification":
            return feats[:, 0, :] @ self.params["head.weight"] + self.params["head.bias"]
        start = (feats @ self.params["head.start_weight"] + self.params["head.start_bias"])
        end = (feats @ self.params["head.end_weight"] + self.params["head.end_bias"])
        b, m, _ = feats.shape
        return start.reshape(b, m), end.reshape(b, m)


def _source_for_block(source, i: int):
    if source is None:
        return None
    if hasattr(source, "block"):
        return source.block(i)
    return source


def encode(model: TransformerEncoder, tokens, adapters=None, fusion_inputs=None) -> EncoderOutput:
    """Run every block and return the per-block outputs plus the final hidden state.

    ``fusion_inputs`` is either a source cache (anything with ``block(i)``)
    whose block-``i`` entry is fused at block ``i``, or a single latent tensor
    fused at every block.
    """
    tokens = model.check_tokens(tokens)
    single = tokens.ndim == 1
    batch = tokens[None, :] if single else tokens
    x = model.embed(batch)
    states = []
    for i in range(model.config.num_layers):
        x = model.block(i, x, adapters, _source_for_block(fusion_inputs, i))
        states.append(x)
    if single:
        states = [s[0] for s in states]
    return EncoderOutput(states, states[-1])


def _batched(tokens) -> tuple[np.ndarray, bool]:
    tokens = np.asarray(tokens)
    return (tokens[None, :], True) if tokens.ndim == 1 else (tokens, False)


def classify(model: TransformerEncoder, tokens, adapters=None, fusion_inputs=None) -> Tensor:
    """Class logits [C] (or [B x C]) read from the first position."""
    if model.task != "classification":
        raise ContractError(f"classify() on a {model.task} model")
    batch, single = _batched(tokens)
    out = encode(model, batch, adapters, fusion_inputs)
    logits = model.head_logits(out.final)
    return logits[0] if single else logits


def span_decode(start_logits, end_logits, max_span_len: int = MAX_SPAN_LEN,
                lo: int = 0) -> tuple[int, int]:
    """Best (i, j) with lo <= i <= j <= i + max_span_len; ties go to the earliest pair."""
    s = np.asarray(start_logits, dtype=np.float64)
    e = np.asarray(end_logits, dtype=np.float64)
    m = s.shape[0]
    i = np.arange(m)[:, None]
    j = np.arange(m)[None, :]
    valid = (j >= i) & (j - i <= max_span_len) & (i >= lo)
    scores = np.where(valid, s[:, None] + e[None, :], -np.inf)
    flat = int(np.argmax(scores))
    return flat // m, flat % m


def span_predict(model: TransformerEncoder, tokens, adapters=None, fusion_inputs=None,
                 max_span_len: int = MAX_SPAN_LEN, lo: int = 0):
    """Start/end logits per position plus decoded spans (one per sequence when batched)."""
    if model.task != "span":
        raise ContractError(f"span_predict() on a {model.task} model")
    batch, single = _batched(tokens)
    out = encode(model, batch, adapters, fusion_inputs)
    start, end = model.head_logits(out.final)
    spans = [span_decode(s, e, max_span_len, lo) for s, e in zip(start.data, end.data)]
    if single:
        return start[0], end[0], spans[0]
    return start, end, spans
