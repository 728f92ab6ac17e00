"""Collect raw per-seed rows from run directories and aggregate them into tables.

Every aggregated number is recomputed from ``metrics.csv`` files on disk, so a
table can always be traced back to the rows that produced it.
"""
from __future__ import annotations

import csv
import json
import math
from collections import defaultdict
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

ROW_FIELDS = ["task", "variant", "method", "language", "seed", "metric", "value",
              "flops_per_step", "wall_seconds"]
TABLE_FIELDS = ["task", "variant", "method", "language", "metric", "mean", "std", "n", "seeds",
                "flops_per_step", "aggregate", "status"]
CURVE_FIELDS = ["axis", "value", "method", "language", "metric", "mean", "std", "n"]
PROBE_FIELDS = ["variant", "layer", "language", "mean", "std", "n"]
POSITION_FIELDS = ["variant", "layer", "position", "language", "mean", "std", "n"]
AVERAGE = "avg"
MAIN_METRICS = ("accuracy", "exact_match")
FUSED_METHODS = ("flare", "flare_mt")


@dataclass(frozen=True)
class ReportRow:
    method: str
    language: str
    seed: int
    metric: str
    value: float
    flops_per_step: int
    wall_seconds: float | None = None
    variant: str = ""
    task: str = ""


def _run_config(cell: Path) -> dict:
    for parent in cell.parents:
        path = parent / "config.json"
        if path.exists():
            return json.loads(path.read_text(encoding="utf-8"))
    return {}


def collect_rows(root: str | Path) -> list[ReportRow]:
    """Every metrics row below ``root``, in a stable order.

    Fused-method rows from runs without an explicit variant are labelled with
    their fusion function so different fusions never share a group.
    """
    root = Path(root)
    rows: list[ReportRow] = []
    seen: set[tuple] = set()
    configs: dict[Path, dict] = {}
    for path in sorted(root.rglob("metrics.csv")):
        cell = path.parent
        if cell.parent not in configs:
            configs[cell.parent] = _run_config(cell)
        cfg = configs[cell.parent]
        wall = None
        timing = cell / "timing.json"
        if timing.exists():
            wall = json.loads(timing.read_text(encoding="utf-8")).get("wall_seconds")
        with open(path, newline="", encoding="utf-8") as fh:
            for rec in csv.DictReader(fh):
                variant = cfg.get("variant", "")
                if not variant and rec["method"] in FUSED_METHODS:
                    variant = f"fusion={cfg.get('fusion', '')}"
                row = ReportRow(rec["method"], rec["language"], int(rec["seed"]), rec["metric"],
                                float(rec["value"]), int(rec["flops_per_step"]), wall, variant,
                                cfg.get("task", ""))
                # runs sharing a base or an identical cell report the same row twice
                key = (row.task, row.variant, row.method, row.language, row.seed, row.metric, rec["value"])
                if key not in seen:
                    seen.add(key)
                    rows.append(row)
    return sorted(rows, key=lambda r: (r.task, r.variant, r.method, r.language, r.metric, r.seed))


def collect_failures(root: str | Path) -> list[dict]:
    """Failed cells recorded in manifests, as (task, variant, method, language) entries."""
    out = []
    for path in sorted(Path(root).rglob("manifest.json")):
        manifest = json.loads(path.read_text(encoding="utf-8"))
        cfg = _run_config(path)
        for failure in manifest.get("failures", []):
            method, language, _seed = failure["cell"].split("/")
            out.append({"task": cfg.get("task", ""), "variant": cfg.get("variant", ""),
                        "method": method, "language": language})
    return out


def mean_std(values: Sequence[float]) -> tuple[float, float | None]:
    """Arithmetic mean and sample standard deviation (None below two values)."""
    n = len(values)
    mean = math.fsum(values) / n
    if n < 2:
        return mean, None
    return mean, math.sqrt(math.fsum((v - mean) ** 2 for v in values) / (n - 1))


def aggregate(rows: Iterable[ReportRow], failures: Iterable[dict] = ()) -> list[dict]:
    """Mean and std over seeds per (task, variant, method, language, metric).

    With two or more target languages an ``avg`` row per seed is formed first
    (mean over languages) and then aggregated over seeds; it is flagged.
    """
    groups: dict[tuple, list[ReportRow]] = defaultdict(list)
    for row in rows:
        groups[(row.task, row.variant, row.method, row.language, row.metric)].append(row)
    table = []
    for key in sorted(groups):
        members = sorted(groups[key], key=lambda r: r.seed)
        table.append(_table_row(key, [r.value for r in members], [r.seed for r in members],
                                members[0].flops_per_step, False))
    # language averages
    by_cell: dict[tuple, dict[str, dict[int, float]]] = defaultdict(dict)
    flops: dict[tuple, int] = {}
    for (task, variant, method, language, metric), members in groups.items():
        if language in ("en", AVERAGE):
            continue
        cell = (task, variant, method, AVERAGE, metric)
        by_cell[cell][language] = {r.seed: r.value for r in members}
        flops[cell] = members[0].flops_per_step
    for cell in sorted(by_cell):
        langs = by_cell[cell]
        if len(langs) < 2:
            continue
        seeds = sorted(set.intersection(*(set(v) for v in langs.values())))
        if not seeds:
            continue
        per_seed = [math.fsum(langs[name][s] for name in sorted(langs)) / len(langs) for s in seeds]
        table.append(_table_row(cell, per_seed, seeds, flops[cell], True))
    present = {(r["task"], r["variant"], r["method"], r["language"]) for r in table}
    absent = set()
    for f in failures:
        key = (f["task"], f["variant"], f["method"], f["language"])
        if key not in present and key not in absent:
            absent.add(key)
    for task, variant, method, language in sorted(absent):
        table.append({"task": task, "variant": variant, "method": method, "language": language,
                      "metric": "", "mean": None, "std": None, "n": 0, "seeds": "",
                      "flops_per_step": None, "aggregate": False, "status": "absent"})
    return table


def _table_row(key: tuple, values: list[float], seeds: list[int], flops_per_step: int, flagged: bool) -> dict:
    task, variant, method, language, metric = key
    mean, std = mean_std(values)
    return {"task": task, "variant": variant, "method": method, "language": language, "metric": metric,
            "mean": mean, "std": std, "n": len(values), "seeds": " ".join(str(s) for s in seeds),
            "flops_per_step": flops_per_step, "aggregate": flagged, "status": "ok"}


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_csv(path: Path, rows: Iterable[dict], fieldnames: list[str]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(fieldnames)
        for row in rows:
            writer.writerow([_cell(row.get(k)) for k in fieldnames])
    return path


def write_table(stem: Path, table: list[dict]) -> tuple[Path, Path]:
    """``stem``.csv and ``stem``.json with the same rows."""
    csv_path = write_csv(stem.with_suffix(".csv"), table, TABLE_FIELDS)
    json_path = stem.with_suffix(".json")
    json_path.write_text(json.dumps(table, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return csv_path, json_path


def read_table(path: str | Path) -> list[dict]:
    """Parse a table CSV back into typed rows (empty cells become None)."""
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        for rec in csv.DictReader(fh):
            row = dict(rec)
            for k in ("mean", "std"):
                row[k] = float(row[k]) if row[k] else None
            row["n"] = int(row["n"])
            row["flops_per_step"] = int(row["flops_per_step"]) if row["flops_per_step"] else None
            row["aggregate"] = row["aggregate"] == "True"
            out.append(row)
    return out


# --- plot data ------------------------------------------------------------------------

def curves(table: list[dict]) -> list[dict]:
    """Main-metric means along every swept axis found in the variant labels."""
    out = []
    for row in table:
        if row["status"] != "ok" or "=" not in row["variant"] or row["metric"] not in MAIN_METRICS:
            continue
        axis, _, value = row["variant"].partition("=")
        out.append({"axis": axis, "value": value, "method": row["method"], "language": row["language"],
                    "metric": row["metric"], "mean": row["mean"], "std": row["std"], "n": row["n"]})
    return out


def probe_tables(root: Path) -> tuple[list[dict], list[dict]]:
    """Per-layer and first-layer per-position activation means over seeds."""
    layers: dict[tuple, list[float]] = defaultdict(list)
    positions: dict[tuple, list[float]] = defaultdict(list)
    for path in sorted(root.rglob("probe_layers_query.csv")):
        variant = _run_config(path).get("variant", "")
        with open(path, newline="", encoding="utf-8") as fh:
            for rec in csv.DictReader(fh):
                layers[(variant, int(rec["layer"]), rec["language"])].append(float(rec["mean_abs_activation"]))
        pos_path = path.parent / "probe_positions_query.csv"
        if pos_path.exists():
            with open(pos_path, newline="", encoding="utf-8") as fh:
                for rec in csv.DictReader(fh):
                    if int(rec["layer"]) == 0:
                        key = (variant, 0, int(rec["position"]), rec["language"])
                        positions[key].append(float(rec["mean_abs_activation"]))
    layer_rows = []
    for (variant, layer, language), vals in sorted(layers.items()):
        mean, std = mean_std(vals)
        layer_rows.append({"variant": variant, "layer": layer, "language": language,
                           "mean": mean, "std": std, "n": len(vals)})
    position_rows = []
    for (variant, layer, pos, language), vals in sorted(positions.items()):
        mean, std = mean_std(vals)
        position_rows.append({"variant": variant, "layer": layer, "position": pos, "language": language,
                              "mean": mean, "std": std, "n": len(vals)})
    return layer_rows, position_rows


def emit_report(root: str | Path, out_dir: str | Path | None = None, figures: bool = True) -> dict[str, Path]:
    """Write raw rows, aggregated tables, plot-data CSVs and (optionally) PNG figures.

    An empty ``root`` gives header-only CSVs and an empty JSON table.
    """
    root = Path(root)
    out = Path(out_dir) if out_dir is not None else root / "report"
    out.mkdir(parents=True, exist_ok=True)
    rows = collect_rows(root)
    table = aggregate(rows, collect_failures(root))
    files: dict[str, Path] = {}
    files["rows"] = write_csv(out / "rows.csv", (asdict(r) for r in rows), ROW_FIELDS)
    files["table"], files["table_json"] = write_table(out / "table_main", table)
    curve_rows = curves(table)
    files["curves"] = write_csv(out / "curves.csv", curve_rows, CURVE_FIELDS)
    layer_rows, position_rows = probe_tables(root)
    files["probe_layers"] = write_csv(out / "probe_layers.csv", layer_rows, PROBE_FIELDS)
    files["probe_positions"] = write_csv(out / "probe_positions.csv", position_rows, POSITION_FIELDS)
    if figures:
        from . import plots
        files.update(plots.render_report(out, table, curve_rows, layer_rows, position_rows))
    return files
