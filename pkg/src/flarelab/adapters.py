"""Low-rank adapters and representation fusion inside their bottlenecks.

A plain LoRA adapter perturbs a frozen projection by ``(alpha/r) * x W_down W_up``.
A fusion adapter down-projects both the target hidden state and a source-language
representation with the *same* ``W_down``, combines the two ``[m x r]`` bottleneck
matrices with a fusion function, and up-projects the result.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Tensor, no_grad
from .checkpoint import (CorruptHeaderError, ShapeMismatchError, read_arrays, read_header,
                         write_arrays)
from .model import ModelConfig, TransformerEncoder, encode

FUSION_FUNCTIONS = ("add", "mul", "add_relu", "cross_attn")
ATTACHMENTS = ("query", "value")
METHODS = ("lora", "flare", "flare_mt", "input_fusion", "xmixup")
SEPARATOR_ID = 2


@dataclass(frozen=True)
class FusionSpec:
    function: str = "add_relu"

    def __post_init__(self):
        if self.function not in FUSION_FUNCTIONS:
            raise ValueError(f"unknown fusion function {self.function!r}; expected one of {FUSION_FUNCTIONS}")

    def extra_parameters(self, r: int) -> int:
        return 3 * r * r if self.function == "cross_attn" else 0


class LoraAdapter:
    """Trainable pair ``W_down [d x r]``, ``W_up [r x d]`` attached to one projection."""

    def __init__(self, d: int, r: int, alpha: float, block: int, kind: str,
                 rng: np.random.Generator, dtype=np.float32, fusion: FusionSpec | None = None):
        if kind not in ATTACHMENTS:
            raise ValueError(f"attachment must be one of {ATTACHMENTS}, got {kind!r}")
        self.r, self.alpha, self.block, self.kind = r, float(alpha), block, kind
        self.fusion = fusion
        self.down = Tensor(rng.normal(0.0, 0.02, size=(d, r)).astype(dtype), requires_grad=True)
        self.up = Tensor(np.zeros((r, d), dtype=dtype), requires_grad=True)
        self.attn: dict[str, Tensor] = {}
        if fusion is not None and fusion.function == "cross_attn":
            self.attn = {k: Tensor(np.eye(r, dtype=dtype), requires_grad=True)
                         for k in ("query", "key", "value")}

    @property
    def scaling(self) -> float:
        return self.alpha / self.r

    def parameters(self) -> dict[str, Tensor]:
        prefix = f"blocks.{self.block}.{self.kind}"
        out = {f"{prefix}.down": self.down, f"{prefix}.up": self.up}
        out.update({f"{prefix}.fusion_{k}": v for k, v in self.attn.items()})
        return out

    def parameter_count(self) -> int:
        return int(sum(t.size for t in self.parameters().values()))


def lora_forward(adapter: LoraAdapter, x: Tensor) -> Tensor:
    """``(alpha/r) * (x W_down) W_up``; the caller adds it to the frozen projection output."""
    return ad.scale((x @ adapter.down) @ adapter.up, adapter.scaling)


def cross_attention_fusion(S: Tensor, T: Tensor, w_query: Tensor, w_key: Tensor,
                           w_value: Tensor, return_weights: bool = False):
    """Single-head attention with queries from ``S`` and keys/values from ``T``.

    Row-vector convention: queries are ``S W_q``, keys ``T W_k``, values ``T W_v``.
    """
    r = S.shape[-1]
    q = S @ w_query
    k = T @ w_key
    v = T @ w_value
    weights = ad.softmax(ad.scale(q @ ad.transpose(k), 1.0 / math.sqrt(r)), axis=-1)
    out = weights @ v
    return (out, weights) if return_weights else out


def fuse(S: Tensor, T: Tensor, spec: FusionSpec | str, attn: dict[str, Tensor] | None = None) -> Tensor:
    """Combine source and target bottleneck representations token by token."""
    if isinstance(spec, str):
        spec = FusionSpec(spec)
    if S.shape[-2:] != T.shape[-2:]:
        raise ContractError(f"fusion needs aligned bottlenecks, got {S.shape} and {T.shape}")
    fn = spec.function
    if fn == "add":
        return S + T
    if fn == "mul":
        return ad.mul(S, T)
    if fn == "add_relu":
        return ad.relu(S) + ad.relu(T)
    if not attn:
        raise ContractError("cross_attn fusion needs query/key/value matrices")
    # batched matmul needs matching leading axes
    if S.ndim > T.ndim:
        T = T + Tensor(np.zeros(S.shape, dtype=T.dtype))
    elif T.ndim > S.ndim:
        S = S + Tensor(np.zeros(T.shape, dtype=S.dtype))
    return cross_attention_fusion(S, T, attn["query"], attn["key"], attn["value"])


def align_length(S: Tensor, m: int) -> Tensor:
    """Truncate or zero-pad the sequence axis (-2) of ``S`` to length ``m``."""
    m_s = S.shape[-2]
    if m_s == m:
        return S
    if m_s > m:
        return S[..., :m, :]
    pad_shape = S.shape[:-2] + (m - m_s, S.shape[-1])
    return ad.concat([S, Tensor(np.zeros(pad_shape, dtype=S.dtype))], axis=-2)


class SourceCache:
    """Per-block outputs of the adapter-free base pass over the source sequence.

    ``states`` is ``[l x m_S x d]`` (or ``[l x B x m_S x d]`` for a batch) and
    is made read-only. ``offset`` selects which block output feeds block ``i``:
    0 uses block ``i``'s own output, 1 uses the next block's (clamped at the end).
    """

    def __init__(self, states: np.ndarray, offset: int = 0):
        if offset not in (0, 1):
            raise ValueError(f"source offset must be 0 or 1, got {offset}")
        states = np.array(states, copy=True)
        states.flags.writeable = False
        self.states = states
        self.offset = offset

    @property
    def num_layers(self) -> int:
        return self.states.shape[0]

    @property
    def shape(self) -> tuple[int, ...]:
        return self.states.shape

    def block(self, i: int) -> Tensor:
        if not 0 <= i < self.num_layers:
            raise ContractError(f"source cache has {self.num_layers} layers; block {i} requested")
        j = min(i + self.offset, self.num_layers - 1)
        return Tensor(self.states[j], dtype=self.states.dtype)

    def zeros_like(self) -> "SourceCache":
        return SourceCache(np.zeros_like(self.states), self.offset)


def build_source_cache(base_model: TransformerEncoder, x_S, offset: int = 0) -> SourceCache:
    """Run the base model with no adapters over ``x_S`` and keep every block output."""
    with no_grad():
        out = encode(base_model, x_S)
    return SourceCache(out.stacked(), offset)


class AdapterSet:
    """Query and value adapters for every block, optionally with a fusion function.

    ``delta(i, kind, h, source)`` is the hook the encoder calls. With ``source``
    absent (or no fusion configured) it is plain LoRA; otherwise the source
    representation is fused inside the bottleneck.
    """

    def __init__(self, config: ModelConfig, r: int = 8, alpha: float = 16.0,
                 fusion: FusionSpec | str | None = None, seed: int = 0, dtype=np.float32,
                 attachments: tuple[str, ...] = ATTACHMENTS):
        if isinstance(fusion, str):
            fusion = FusionSpec(fusion)
        self.config, self.r, self.alpha, self.fusion = config, r, float(alpha), fusion
        rng = np.random.default_rng(seed)
        self.adapters: dict[tuple[int, str], LoraAdapter] = {}
        for i in range(config.num_layers):
            for kind in attachments:
                self.adapters[(i, kind)] = LoraAdapter(config.hidden_dim, r, alpha, i, kind, rng, dtype, fusion)

    def __getitem__(self, key: tuple[int, str]) -> LoraAdapter:
        return self.adapters[key]

    def delta(self, i: int, kind: str, h: Tensor, source=None) -> Tensor | None:
        adapter = self.adapters.get((i, kind))
        if adapter is None:
            return None
        T = h @ adapter.down
        if source is None or self.fusion is None:
            z = T
        else:
            S = align_length(source @ adapter.down, T.shape[-2])
            z = fuse(S, T, self.fusion, adapter.attn)
        return ad.scale(z @ adapter.up, adapter.scaling)

    def parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for adapter in self.adapters.values():
            out.update(adapter.parameters())
        return out

    def parameter_count(self) -> int:
        return int(sum(t.size for t in self.parameters().values()))

    def zero_up(self) -> None:
        for adapter in self.adapters.values():
            adapter.up.data[...] = 0


def flare_attention_hook(i: int, x_T: Tensor, cache: SourceCache, adapters: AdapterSet):
    """Query and value deltas for block ``i`` fused against the cached source state."""
    source = cache.block(i)
    return adapters.delta(i, "query", x_T, source), adapters.delta(i, "value", x_T, source)


def merge_lora(model: TransformerEncoder, adapters: AdapterSet) -> TransformerEncoder:
    """Fold plain-LoRA updates into a copy of the frozen weights."""
    merged = model.copy()
    for (i, kind), a in adapters.adapters.items():
        w = merged.params[f"blocks.{i}.attn.{kind}"]
        update = (a.down.data.astype(np.float64) @ a.up.data.astype(np.float64)) * a.scaling
        w.data = (w.data.astype(np.float64) + update).astype(w.dtype)
    return merged


# --- FLARE-MT -----------------------------------------------------------------

class MtProjection:
    """Trainable ``W_proj [d_M x d]`` mapping latent translations into model space."""

    def __init__(self, d_mt: int, d: int, seed: int = 0, dtype=np.float32):
        rng = np.random.default_rng(seed)
        bound = 1.0 / math.sqrt(d_mt)
        self.weight = Tensor(rng.uniform(-bound, bound, size=(d_mt, d)).astype(dtype), requires_grad=True)

    def parameters(self) -> dict[str, Tensor]:
        return {"mt_projection": self.weight}


def flare_mt_forward(mt_encoder, projection: MtProjection | Tensor, x_T) -> Tensor:
    """Latent translation of ``x_T`` projected to the model width: ``M(x_T) W_proj``."""
    weight = projection.weight if isinstance(projection, MtProjection) else projection
    latent = mt_encoder.latent(x_T)
    return latent @ weight


# --- input-level fusion --------------------------------------------------------

def input_level_concat(x_S, x_T, separator: int = SEPARATOR_ID, max_len: int | None = None) -> np.ndarray:
    """``[x_S; SEP; x_T]`` along the last axis."""
    x_S, x_T = np.asarray(x_S, dtype=np.int64), np.asarray(x_T, dtype=np.int64)
    if x_S.ndim == 2 and x_S.shape[1] == 0:
        x_S = x_S.reshape(x_T.shape[0], 0)
    sep = np.full(x_T.shape[:-1] + (1,), separator, dtype=np.int64)
    out = np.concatenate([x_S.reshape(x_T.shape[:-1] + (-1,)), sep, x_T], axis=-1)
    if max_len is not None and out.shape[-1] > max_len:
        raise ContractError(f"concatenated length {out.shape[-1]} exceeds max_seq_len {max_len}")
    return out


# --- X-Mixup-lite ---------------------------------------------------------------

class XMixupLite:
    """Simplified manifold mixup: one cross-attention into the source at block ``k``.

    The output projection starts at zero so the mixed model equals the plain
    forward at initialization.
    """

    def __init__(self, config: ModelConfig, mix_layer: int | None = None, lam: float = 0.1,
                 seed: int = 0, dtype=np.float32):
        k = config.num_layers // 2 if mix_layer is None else mix_layer
        if not 0 <= k < config.num_layers:
            raise ContractError(f"mix layer {k} outside [0, {config.num_layers})")
        self.mix_layer, self.lam = k, float(lam)
        d = config.hidden_dim
        rng = np.random.default_rng(seed)
        bound = 1.0 / math.sqrt(d)
        self.params = {name: Tensor(rng.uniform(-bound, bound, size=(d, d)).astype(dtype), requires_grad=True)
                       for name in ("query", "key", "value")}
        self.params["output"] = Tensor(np.zeros((d, d), dtype=dtype), requires_grad=True)

    def parameters(self) -> dict[str, Tensor]:
        return {f"xmixup.{k}": v for k, v in self.params.items()}

    def mix(self, target: Tensor, source: Tensor) -> Tensor:
        p = self.params
        attended = cross_attention_fusion(target, source, p["query"], p["key"], p["value"])
        return target + attended @ p["output"]


def xmixup_layer_forward(model: TransformerEncoder, x_S, x_T, mixer: XMixupLite,
                         adapters: AdapterSet | None = None):
    """Return (head output, consistency loss) for the mixed target pass."""
    xs = model.check_tokens(x_S)
    xt = model.check_tokens(x_T)
    if xs.ndim == 1:
        xs, xt = xs[None, :], xt[None, :]
    s = model.embed(xs)
    t = model.embed(xt)
    k = mixer.mix_layer
    for i in range(k + 1):
        s = model.block(i, s, adapters)
        t = model.block(i, t, adapters)
    mixed = mixer.mix(t, s)
    diff = mixed - t
    consistency = ad.scale(ad.mean(ad.mul(diff, diff)), mixer.lam)
    x = mixed
    for i in range(k + 1, model.config.num_layers):
        x = model.block(i, x, adapters)
    return model.head_logits(x), consistency


# --- serialization --------------------------------------------------------------

def save_adapters(path, adapters: AdapterSet, extra: dict[str, Tensor] | None = None,
                  method: str = "lora", **meta) -> None:
    arrays = {f"adapter.{k}": v.data for k, v in adapters.parameters().items()}
    for k, v in (extra or {}).items():
        arrays[k] = v.data
    header = {
        "kind": "adapters",
        "method": method,
        "config": adapters.config.to_dict(),
        "rank": adapters.r,
        "alpha": adapters.alpha,
        "fusion": None if adapters.fusion is None else {"function": adapters.fusion.function},
        "meta": meta,
    }
    write_arrays(path, arrays, header)


def load_adapters(path) -> tuple[AdapterSet, dict[str, np.ndarray], dict]:
    header, _ = read_header(path)
    if header.get("kind") != "adapters":
        raise CorruptHeaderError(f"{path}: expected an adapter checkpoint, found {header.get('kind')!r}")
    config = ModelConfig(**header["config"])
    fusion = header["fusion"]["function"] if header.get("fusion") else None
    adapters = AdapterSet(config, r=header["rank"], alpha=header["alpha"], fusion=fusion)
    expected = {f"adapter.{k}": v.shape for k, v in adapters.parameters().items()}
    _, arrays = read_arrays(path)
    for name, shape in expected.items():
        if name not in arrays:
            raise ShapeMismatchError(f"{path}: adapter parameter {name!r} missing")
        if arrays[name].shape != shape:
            raise ShapeMismatchError(f"{path}: parameter {name!r} has shape {arrays[name].shape}, expected {shape}")
    params = adapters.parameters()
    extra = {}
    for name, arr in arrays.items():
        if name.startswith("adapter."):
            params[name[len("adapter."):]].data = arr.copy()
        else:
            extra[name] = arr
    return adapters, extra, header
