"""Mean |bottleneck activation| of the source and target streams inside FLARE adapters."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .adapters import AdapterSet, align_length
from .autodiff import no_grad
from .data import ParallelPair
from .train import MethodRunner, iterate_batches, usable

SOURCE_LANGUAGE = "en"


class _RecordingAdapters:
    """Stands in for an AdapterSet and tallies |S| and |T| for one attachment."""

    def __init__(self, inner: AdapterSet, attachment: str, m: int):
        self.inner = inner
        self.attachment = attachment
        n = inner.config.num_layers
        self.sums = {s: np.zeros((n, m)) for s in ("source", "target")}
        self.counts = np.zeros(n)

    def delta(self, i, kind, h, source=None):
        if kind == self.attachment and source is not None:
            adapter = self.inner[(i, kind)]
            T = (h.data @ adapter.down.data).astype(np.float64)
            S = align_length(source @ adapter.down, T.shape[-2]).data.astype(np.float64)
            T = T.reshape(-1, T.shape[-2], T.shape[-1])
            S = S.reshape(-1, S.shape[-2], S.shape[-1])
            m = T.shape[1]
            self.sums["target"][i, :m] += np.abs(T).sum(axis=(0, 2))
            self.sums["source"][i, :m] += np.abs(S).sum(axis=(0, 2))
            self.counts[i] += T.shape[0] * T.shape[2]
        return self.inner.delta(i, kind, h, source)


@dataclass
class ProbeResult:
    language: str
    attachment: str
    positions: np.ndarray  # [2 x l x m]: source stream, target stream
    layers: np.ndarray     # [2 x l]

    def position_rows(self) -> list[dict]:
        rows = []
        names = (SOURCE_LANGUAGE, self.language)
        for s, name in enumerate(names):
            for layer in range(self.positions.shape[1]):
                for pos in range(self.positions.shape[2]):
                    rows.append({"layer": layer, "position": pos, "language": name,
                                 "mean_abs_activation": float(self.positions[s, layer, pos])})
        return rows

    def layer_rows(self) -> list[dict]:
        rows = []
        for s, name in enumerate((SOURCE_LANGUAGE, self.language)):
            for layer in range(self.layers.shape[1]):
                rows.append({"layer": layer, "language": name,
                             "mean_abs_activation": float(self.layers[s, layer])})
        return rows

    def ratios(self) -> np.ndarray:
        """Per-layer mean(source) / mean(target)."""
        return self.layers[0] / self.layers[1]


def probe_activations(runner: MethodRunner, pairs: Sequence[ParallelPair], language: str = "target",
                      attachment: str = "query", batch_size: int = 64) -> ProbeResult:
    """Average |x W_down| over the split for both streams, per layer and position."""
    if runner.method != "flare":
        raise ValueError(f"activation probe needs a FLARE runner, got {runner.method!r}")
    pairs = usable(pairs)
    if not pairs:
        raise ValueError("activation probe needs at least one usable pair")
    m = len(pairs[0].target.tokens)
    recorder = _RecordingAdapters(runner.adapters, attachment, m)
    real = runner.adapters
    runner.adapters = recorder
    try:
        with no_grad():
            for batch in iterate_batches(pairs, runner.task, batch_size):
                runner.forward(batch)
    finally:
        runner.adapters = real
    # counts hold examples x r per layer, the same at every position
    positions = np.stack([recorder.sums["source"], recorder.sums["target"]]) / recorder.counts[None, :, None]
    layers = positions.mean(axis=2)
    return ProbeResult(language, attachment, positions, layers)


def write_probe_csv(result: ProbeResult, directory: str | Path) -> tuple[Path, Path]:
    """Write the per-position file and the per-layer aggregate; returns both paths."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    pos_path = directory / f"probe_positions_{result.attachment}.csv"
    layer_path = directory / f"probe_layers_{result.attachment}.csv"
    for path, rows, fields in ((pos_path, result.position_rows(),
                                ["layer", "position", "language", "mean_abs_activation"]),
                               (layer_path, result.layer_rows(), ["layer", "language", "mean_abs_activation"])):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
            writer.writeheader()
            for row in rows:
                writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    return pos_path, layer_path
