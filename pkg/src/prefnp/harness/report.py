"""Report tables, their tab-separated file format, and plot-data emission.

Each table file starts with two comment lines, a format tag and the column
types, followed by a header row and the data rows::

    # prefnp-table v1 accuracy
    # types: str int str int float float int str
    model  n_context  z_star  ...

Floats are written with 17 significant digits so values round-trip exactly
and identical runs give identical bytes.
"""

from __future__ import annotations

import csv
import io
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

TABLE_TAG = "# prefnp-table v1"
MANIFEST = "manifest.json"

# plot file -> (source table, row filter, columns); `None` keeps every column
PLOT_FILES = {
    "fig1b_accuracy": ("accuracy", lambda r: r.get("z_star") == "all" and str(r.get("model", "")).startswith("np_"),
                       ["model", "n_context", "accuracy_mean", "accuracy_stderr", "n_tasks"]),
    "fig2_accuracy": ("accuracy", lambda r: True,
                      ["model", "n_context", "z_star", "accuracy_mean", "accuracy_stderr", "n_tasks"]),
    "fig3_pca": ("pca", lambda r: True, None),
    "fig4_error_curves": ("error_curves", lambda r: True, None),
    "fig5_conflict_sweep": ("conflict_sweep", lambda r: True, None),
    "figD2_simplex_bins": ("simplex_bins", lambda r: True, None),
}
STAMP = ["seed", "config_hash"]


@dataclass
class Report:
    config: dict
    config_hash: str
    seed: int
    code_version: str
    tables: dict[str, list[dict]] = field(default_factory=dict)
    runtime: dict[str, list[dict]] = field(default_factory=dict)
    notes: list[str] = field(default_factory=list)

    def add_table(self, name: str, rows: list[dict], runtime: bool = False) -> None:
        """Store rows stamped with the seed and config hash."""
        stamped = [{**r, "seed": self.seed, "config_hash": self.config_hash} for r in rows]
        (self.runtime if runtime else self.tables)[name] = stamped


def _type_of(values) -> str:
    kinds = {type(v) for v in values if v is not None}
    if kinds <= {bool}:
        return "bool" if kinds else "str"
    if kinds <= {int}:
        return "int"
    if kinds <= {int, float}:
        return "float"
    return "str"


def _fmt(v, kind: str) -> str:
    if v is None:
        return ""
    if kind == "float":
        return format(float(v), ".17g")
    if kind == "bool":
        return "true" if v else "false"
    return str(v)


def _parse(s: str, kind: str):
    if s == "":
        return None
    if kind == "int":
        return int(s)
    if kind == "float":
        return float(s)
    if kind == "bool":
        return s == "true"
    return s


def table_text(name: str, rows: list[dict], columns: list[str] | None = None) -> str:
    if columns is None:
        columns = []
        for r in rows:
            columns.extend(k for k in r if k not in columns)
    types = [_type_of([r.get(c) for r in rows]) for c in columns]
    buf = io.StringIO()
    buf.write(f"{TABLE_TAG} {name}\n# types: {' '.join(types)}\n")
    w = csv.writer(buf, delimiter="\t", lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r.get(c), t) for c, t in zip(columns, types)])
    return buf.getvalue()


def parse_table(text: str) -> tuple[str, list[dict]]:
    lines = text.splitlines()
    if len(lines) < 3 or not lines[0].startswith(TABLE_TAG) or not lines[1].startswith("# types:"):
        raise ValueError("not a prefnp table file")
    name = lines[0][len(TABLE_TAG):].strip()
    types = lines[1][len("# types:"):].split()
    reader = csv.reader(lines[2:], delimiter="\t")
    header = next(reader)
    if len(header) != len(types):
        raise ValueError("table header and type line disagree")
    rows = [{c: _parse(v, t) for c, v, t in zip(header, vals, types)} for vals in reader]
    return name, rows


def atomic_write(path: Path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def write_report(report: Report, out_dir) -> Path:
    """Write metric tables, runtime tables, config and manifest into ``out_dir``."""
    out = Path(out_dir)
    files = {}
    for name, rows in sorted(report.tables.items()):
        atomic_write(out / f"{name}.tsv", table_text(name, rows))
        files[name] = f"{name}.tsv"
    runtime_files = {}
    for name, rows in sorted(report.runtime.items()):
        atomic_write(out / "runtime" / f"{name}.tsv", table_text(name, rows))
        runtime_files[name] = f"runtime/{name}.tsv"
    atomic_write(out / "config.json", json.dumps(report.config, indent=2, sort_keys=True) + "\n")
    manifest = {
        "format": "prefnp-report v1",
        "config_hash": report.config_hash,
        "seed": report.seed,
        "code_version": report.code_version,
        "tables": files,
        "runtime": runtime_files,
        "notes": report.notes,
    }
    atomic_write(out / MANIFEST, json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out


def emit_plot_data(report: Report, out_dir) -> dict:
    """One tab-separated file per figure analogue under ``out_dir/plots``.

    Figures whose source table is absent are skipped and listed in the
    plot manifest.
    """
    out = Path(out_dir) / "plots"
    written, omitted = {}, {}
    for fig, (table, keep, cols) in PLOT_FILES.items():
        rows = report.tables.get(table)
        if not rows:
            omitted[fig] = f"no {table} table in this report"
            continue
        sel = [r for r in rows if keep(r)]
        if not sel:
            omitted[fig] = f"{table} table has no matching rows"
            continue
        columns = None if cols is None else [c for c in cols if any(c in r for r in sel)] + STAMP
        atomic_write(out / f"{fig}.tsv", table_text(fig, sel, columns))
        written[fig] = f"plots/{fig}.tsv"
    manifest = {"written": written, "omitted": omitted}
    atomic_write(out / "plots_manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def load_report(out_dir) -> Report:
    """Rebuild a Report (metric and runtime tables) from a written directory."""
    out = Path(out_dir)
    m = json.loads((out / MANIFEST).read_text())
    config = json.loads((out / "config.json").read_text())
    rep = Report(config, m["config_hash"], m["seed"], m["code_version"], notes=list(m.get("notes", [])))
    for name, rel in m["tables"].items():
        rep.tables[name] = parse_table((out / rel).read_text())[1]
    for name, rel in m.get("runtime", {}).items():
        rep.runtime[name] = parse_table((out / rel).read_text())[1]
    return rep


def load_plot_files(out_dir) -> dict[str, list[dict]]:
    out = Path(out_dir) / "plots"
    m = json.loads((out / "plots_manifest.json").read_text())
    return {fig: parse_table((Path(out_dir) / rel).read_text())[1] for fig, rel in m["written"].items()}
