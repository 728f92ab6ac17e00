"""PNG figures rendered next to the report CSVs (Agg backend, no display needed)."""
from __future__ import annotations

from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

MAIN_METRICS = ("accuracy", "exact_match")


def _save(fig, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    # fixed metadata keeps reruns byte-stable
    fig.savefig(path, dpi=110, metadata={"Software": None})
    plt.close(fig)
    return path


def _main_rows(table: list[dict]) -> list[dict]:
    return [r for r in table if r["status"] == "ok" and r["metric"] in MAIN_METRICS]


def plot_methods(table: list[dict], path: Path) -> Path | None:
    """Bar chart of mean main metric per method and language, std as error bars."""
    rows = [r for r in _main_rows(table) if not r["variant"]]
    if not rows:
        return None
    methods = sorted({r["method"] for r in rows})
    languages = sorted({r["language"] for r in rows})
    fig, ax = plt.subplots(figsize=(1.2 + 0.9 * len(methods) * max(len(languages), 1) / 2, 3.4))
    width = 0.8 / len(languages)
    for j, lang in enumerate(languages):
        xs, ys, es = [], [], []
        for i, method in enumerate(methods):
            hit = [r for r in rows if r["method"] == method and r["language"] == lang]
            if hit:
                xs.append(i + j * width)
                ys.append(hit[0]["mean"])
                es.append(hit[0]["std"] or 0.0)
        ax.bar(xs, ys, width, yerr=es, label=lang, capsize=2)
    ax.set_xticks([i + 0.4 - width / 2 for i in range(len(methods))])
    ax.set_xticklabels(methods, rotation=30, ha="right")
    ax.set_ylim(0, 1.05)
    ax.set_ylabel(rows[0]["metric"])
    ax.legend(fontsize=7, frameon=False)
    return _save(fig, path)


def plot_curves(curve_rows: list[dict], directory: Path) -> dict[str, Path]:
    """One line plot per swept axis: mean metric against the axis value."""
    out = {}
    by_axis = defaultdict(list)
    for row in curve_rows:
        by_axis[row["axis"]].append(row)
    for axis, rows in sorted(by_axis.items()):
        fig, ax = plt.subplots(figsize=(4.2, 3.2))
        values = list(dict.fromkeys(r["value"] for r in rows))
        for (method, lang) in sorted({(r["method"], r["language"]) for r in rows}):
            pts = [r for r in rows if r["method"] == method and r["language"] == lang]
            pts.sort(key=lambda r: values.index(r["value"]))
            xs = [values.index(r["value"]) for r in pts]
            ax.errorbar(xs, [r["mean"] for r in pts], yerr=[r["std"] or 0.0 for r in pts],
                        marker="o", capsize=2, label=f"{method} {lang}")
        ax.set_xticks(range(len(values)))
        ax.set_xticklabels(values)
        ax.set_xlabel(axis)
        ax.set_ylabel(rows[0]["metric"])
        ax.legend(fontsize=7, frameon=False)
        out[f"curve_{axis}_png"] = _save(fig, directory / f"curve_{axis}.png")
    return out


def plot_probe_layers(layer_rows: list[dict], path: Path) -> Path | None:
    if not layer_rows:
        return None
    fig, ax = plt.subplots(figsize=(4.2, 3.2))
    for (variant, lang) in sorted({(r["variant"], r["language"]) for r in layer_rows}):
        pts = sorted((r for r in layer_rows if r["variant"] == variant and r["language"] == lang),
                     key=lambda r: r["layer"])
        label = f"{lang} {variant}".strip()
        ax.plot([r["layer"] for r in pts], [r["mean"] for r in pts], marker="o", label=label)
    ax.set_xlabel("layer")
    ax.set_ylabel("mean |bottleneck activation|")
    ax.legend(fontsize=7, frameon=False)
    return _save(fig, path)


def plot_probe_positions(position_rows: list[dict], path: Path) -> Path | None:
    if not position_rows:
        return None
    fig, ax = plt.subplots(figsize=(5.0, 3.0))
    for (variant, lang) in sorted({(r["variant"], r["language"]) for r in position_rows}):
        pts = sorted((r for r in position_rows if r["variant"] == variant and r["language"] == lang),
                     key=lambda r: r["position"])
        ax.plot([r["position"] for r in pts], [r["mean"] for r in pts], label=f"{lang} {variant}".strip())
    ax.set_xlabel("position (first query adapter)")
    ax.set_ylabel("mean |activation|")
    ax.legend(fontsize=7, frameon=False)
    return _save(fig, path)


def plot_sweep(table: list[dict], kind: str, path: Path) -> Path | None:
    from .report import curves

    rows = curves(table)
    if not rows:
        return None
    return plot_curves(rows, path.parent).get(f"curve_{rows[0]['axis']}_png")


def render_report(out: Path, table, curve_rows, layer_rows, position_rows) -> dict[str, Path]:
    files = {}
    for key, path in (("methods_png", plot_methods(table, out / "methods.png")),
                      ("probe_layers_png", plot_probe_layers(layer_rows, out / "probe_layers.png")),
                      ("probe_positions_png", plot_probe_positions(position_rows, out / "probe_positions.png"))):
        if path is not None:
            files[key] = path
    files.update(plot_curves(curve_rows, out))
    return files
