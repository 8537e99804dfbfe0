"""CSV schemas for every emitted report, a checker, and the run manifest.

Run ``python3 -m magnneto.reports FILE...`` to validate report files; the
schema is picked from the header row.
"""

from __future__ import annotations

import csv
import json
import math
import subprocess
import sys
from pathlib import Path


class ReportError(ValueError):
    pass


def _float(text: str) -> float:
    return float(text)


def _opt_float(text: str) -> float | None:
    return None if text == "" else float(text)


def _int(text: str) -> int:
    return int(text)


def _bool(text: str) -> bool:
    if text not in ("0", "1"):
        raise ValueError(f"expected 0 or 1, got {text!r}")
    return text == "1"


def _str(text: str) -> str:
    return text


SCHEMAS: dict[str, tuple[tuple[str, object], ...]] = {
    "train_log": (
        ("iteration", _int),
        ("mean_reward", _float),
        ("best_maxutil", _float),
        ("actor_loss", _float),
        ("critic_loss", _float),
        ("entropy", _float),
    ),
    "eval": (
        ("tm", _str),
        ("mode", _str),
        ("best_maxutil", _float),
        ("default_maxutil", _float),
        ("improvement_pct", _opt_float),
        ("wall_time_s", _float),
        ("flag", _str),
    ),
    "eval_summary": (("mode", _str), ("statistic", _str), ("value", _float)),
    "eval_cdf": (("mode", _str), ("tm", _str), ("improvement_pct", _float), ("cdf", _float)),
    "compare": (
        ("tm", _str),
        ("optimizer", _str),
        ("max_utilization", _float),
        ("improvement_pct", _opt_float),
        ("wall_time_s", _float),
    ),
    "dist_check": (
        ("topology", _str),
        ("seed", _int),
        ("diverged", _bool),
        ("max_logit_diff", _float),
        ("same_actions", _bool),
        ("same_best", _bool),
    ),
    "overhead": (
        ("link", _int),
        ("bytes_hidden", _float),
        ("bytes_logits", _float),
        ("total_MB", _float),
        ("MB_per_s", _float),
    ),
}


def header(schema: str) -> list[str]:
    return [name for name, _ in SCHEMAS[schema]]


def format_value(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_csv(path, schema: str, rows: list[dict]) -> None:
    cols = header(schema)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for row in rows:
            w.writerow([format_value(row[c]) for c in cols])


def detect_schema(cols: list[str]) -> str:
    for name in SCHEMAS:
        if header(name) == cols:
            return name
    raise ReportError(f"header {cols} matches no known report schema")


def read_csv(path, schema: str | None = None) -> tuple[str, list[dict]]:
    """Parse and type-check a report; returns ``(schema name, rows)``."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            cols = next(reader)
        except StopIteration:
            raise ReportError(f"{path}: empty file") from None
        name = schema or detect_schema(cols)
        if cols != header(name):
            raise ReportError(f"{path}: header {cols} != expected {header(name)}")
        rows = []
        for lineno, raw in enumerate(reader, start=2):
            if len(raw) != len(cols):
                raise ReportError(f"{path}:{lineno}: expected {len(cols)} fields, got {len(raw)}")
            row = {}
            for (col, parse), text in zip(SCHEMAS[name], raw):
                try:
                    row[col] = parse(text)
                except ValueError as exc:
                    raise ReportError(f"{path}:{lineno}: column {col}: {exc}") from None
            rows.append(row)
    return name, rows


def check_csv(path, schema: str | None = None) -> str:
    """Validate a report, including a few cross-field rules; returns the schema name."""
    name, rows = read_csv(path, schema)
    for i, row in enumerate(rows, start=2):
        if name == "train_log" and row["iteration"] != i - 2:
            raise ReportError(f"{path}:{i}: iterations must count up from 0")
        if name == "eval" and (row["improvement_pct"] is None) != (row["flag"] != ""):
            raise ReportError(f"{path}:{i}: flag must be set exactly when improvement is undefined")
        if name == "eval_cdf" and not 0 < row["cdf"] <= 1:
            raise ReportError(f"{path}:{i}: cdf value out of (0, 1]")
        for col, value in row.items():
            if isinstance(value, float) and col != "max_logit_diff" and not math.isfinite(value):
                if not (name == "eval_summary" and math.isnan(value)):
                    raise ReportError(f"{path}:{i}: non-finite {col}")
    return name


def git_hash() -> str | None:
    try:
        out = subprocess.run(
            ["git", "rev-parse", "HEAD"],
            cwd=Path(__file__).resolve().parent,
            capture_output=True,
            text=True,
            timeout=10,
        )
    except (OSError, subprocess.SubprocessError):
        return None
    if out.returncode != 0:
        return None
    return out.stdout.strip() or None


def write_manifest(out_dir, command: str, args: dict, seeds: dict) -> Path:
    """JSON record of how a report was produced. Holds no timestamps, so
    reruns with equal arguments write identical manifests."""
    path = Path(out_dir) / "manifest.json"
    doc = {"command": command, "args": args, "seeds": seeds, "git": git_hash()}
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, default=str) + "\n")
    return path


def main(argv=None) -> int:
    paths = sys.argv[1:] if argv is None else argv
    status = 0
    for p in paths:
        try:
            print(f"{p}: ok ({check_csv(p)})")
        except (ReportError, OSError) as exc:
            print(f"{p}: {exc}", file=sys.stderr)
            status = 1
    return status


if __name__ == "__main__":
    sys.exit(main())
