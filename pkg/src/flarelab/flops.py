"""Analytic multiply-accumulate counts per forward pass, itemized by operation class.

Counts come from shapes alone. Layer norms, softmax, embeddings lookups and
other elementwise work are ignored except for the fusion functions themselves,
where the elementwise op is the whole cost and is tallied as one MAC per element.
"""
from __future__ import annotations

from dataclasses import dataclass, field

from .model import ModelConfig

CATEGORIES = ("attention_scores", "attention_output", "projections", "ffn",
              "adapters", "fusion", "mt_encoder", "head")
ADAPTERS_PER_BLOCK = 2  # query and value


@dataclass
class FlopCounter:
    macs: dict[str, int] = field(default_factory=lambda: {c: 0 for c in CATEGORIES})
    no_grad_macs: int = 0  # part of the total spent in passes that need no backward

    @property
    def total(self) -> int:
        return int(sum(self.macs.values()))

    def __add__(self, other: "FlopCounter") -> "FlopCounter":
        return FlopCounter({c: self.macs[c] + other.macs[c] for c in CATEGORIES},
                           self.no_grad_macs + other.no_grad_macs)

    def frozen(self) -> "FlopCounter":
        """The same counts marked as a pass without backward."""
        return FlopCounter(dict(self.macs), self.total)

    def step_flops(self, batch_size: int = 1) -> int:
        """FLOPs of one training step: backward costs twice the forward on the grad path."""
        grad_path = self.total - self.no_grad_macs
        return 2 * batch_size * (3 * grad_path + self.no_grad_macs)

    def to_dict(self) -> dict:
        return dict(self.macs, total=self.total, no_grad=self.no_grad_macs)


def encoder_macs(config: ModelConfig, m: int, layers: int | None = None) -> FlopCounter:
    """Plain encoder blocks at sequence length ``m`` (no head)."""
    d, f = config.hidden_dim, config.ffn_dim
    n = config.num_layers if layers is None else layers
    c = FlopCounter()
    c.macs["projections"] = n * 4 * m * d * d
    # heads * m^2 * (d / heads) per block
    c.macs["attention_scores"] = n * m * m * d
    c.macs["attention_output"] = n * m * m * d
    c.macs["ffn"] = n * 2 * m * d * f
    return c


def head_macs(config: ModelConfig, m: int, task: str) -> int:
    d = config.hidden_dim
    return d * config.num_classes if task == "classification" else 2 * m * d


def adapter_macs(config: ModelConfig, m: int, r: int, layers: int | None = None) -> int:
    n = config.num_layers if layers is None else layers
    return n * ADAPTERS_PER_BLOCK * 2 * m * config.hidden_dim * r


def fusion_op_macs(function: str, m: int, r: int) -> int:
    if function in ("add", "mul"):
        return m * r
    if function == "add_relu":
        return 2 * m * r
    if function == "cross_attn":
        return 3 * m * r * r + 2 * m * m * r
    raise ValueError(f"unknown fusion function {function!r}")


def fusion_macs(config: ModelConfig, m: int, m_source: int, r: int, function: str) -> int:
    """Down-projecting the source with each adapter's W_down, plus the fusion op."""
    per_adapter = m_source * config.hidden_dim * r + fusion_op_macs(function, m, r)
    return config.num_layers * ADAPTERS_PER_BLOCK * per_adapter


def count_flops(method: str, config: ModelConfig, m: int, r: int = 8, fusion: str = "add_relu",
                task: str = "classification", m_source: int | None = None,
                mt_config: ModelConfig | None = None, mix_layer: int | None = None) -> FlopCounter:
    """Forward MACs per example for one translate-train method."""
    m_s = m if m_source is None else m_source
    if method in ("lora", "zero_shot", "translate_test", "base"):
        c = encoder_macs(config, m)
        if method == "lora":
            c.macs["adapters"] = adapter_macs(config, m, r)
        c.macs["head"] = head_macs(config, m, task)
        return c
    if method in ("flare", "train_only"):
        c = count_flops("lora", config, m, r, task=task)
        c = c + encoder_macs(config, m_s).frozen()
        c.macs["fusion"] += fusion_macs(config, m, m_s, r, fusion if method == "flare" else "add")
        return c
    if method == "flare_mt":
        from .mt import mt_config as default_mt_config
        mt = mt_config or default_mt_config(config.vocab_size, config.max_seq_len)
        c = count_flops("lora", config, m, r, task=task)
        frozen_mt = encoder_macs(mt, m).total
        c.macs["mt_encoder"] = frozen_mt + m * mt.hidden_dim * config.hidden_dim
        c.no_grad_macs += frozen_mt
        # the single latent is down-projected by every adapter
        c.macs["fusion"] += fusion_macs(config, m, m, r, fusion)
        return c
    if method == "input_fusion":
        return count_flops("lora", config, m_s + 1 + m, r, task=task)
    if method == "xmixup":
        k = config.num_layers // 2 if mix_layer is None else mix_layer
        c = count_flops("lora", config, m, r, task=task)
        src = encoder_macs(config, m_s, layers=k + 1)
        src.macs["adapters"] = adapter_macs(config, m_s, r, layers=k + 1)
        c = c + src
        d = config.hidden_dim
        c.macs["fusion"] += 3 * max(m, m_s) * d * d + 2 * m * m_s * d + m * d * d
        return c
    raise ValueError(f"unknown method {method!r}")


def attention_score_ratio(config: ModelConfig, m: int, factor: int = 2) -> float:
    """Attention-score MACs at ``factor * m`` relative to ``m``."""
    big = encoder_macs(config, factor * m).macs["attention_scores"]
    small = encoder_macs(config, m).macs["attention_scores"]
    return big / small
