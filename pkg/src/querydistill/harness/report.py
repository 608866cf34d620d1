"""Comparison tables over completed run directories."""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path


def _describe(config: dict) -> str:
    d = config.get("distill", {})
    parts = []
    if d.get("md"):
        parts.append("md" if d.get("md_variant") == "multi_target" else f"md:{d['md_variant']}")
    if d.get("pd"):
        parts.append(f"pd:{d.get('pd_variant')}")
    if d.get("aux"):
        parts.append(f"aux:{d.get('aux_variant')}")
    if config.get("ema", {}).get("stop_update"):
        parts.append("stop_update")
    return "+".join(parts) if parts else "baseline"


def load_run(run_dir: str | Path) -> dict:
    path = Path(run_dir) / "run.json"
    if not path.exists():
        raise FileNotFoundError(f"no run.json under {run_dir}")
    return json.loads(path.read_text(encoding="utf-8"))


def report(run_dirs: list[str | Path]) -> dict:
    """Aggregate runs into a text table plus plot-ready CSV rows."""
    rows = []
    for run_dir in run_dirs:
        run = load_run(run_dir)
        final = run["metrics"][-1] if run["metrics"] else {}
        rows.append(
            {
                "run_dir": str(run_dir),
                "label": _describe(run["config"]),
                "seed": run["seed"],
                "epochs": len(run["metrics"]),
                "ap": final.get("ap", float("nan")),
                "ap50": final.get("ap50", float("nan")),
                "consistency": final.get("consistency", float("nan")),
                "instability_online": final.get("instability_online", float("nan")),
                "instability_ema": final.get("instability_ema", float("nan")),
                "wall_clock": run.get("wall_clock", float("nan")),
            }
        )

    lines = [
        f"{'label':<28} {'seed':>4} {'ap':>8} {'ap50':>8} {'consist':>8} {'instab':>8}"
    ]
    for row in rows:
        lines.append(
            f"{row['label']:<28} {row['seed']:>4} {row['ap']:>8.4f} {row['ap50']:>8.4f} "
            f"{row['consistency']:>8.4f} {row['instability_online']:>8.4f}"
        )

    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(rows[0].keys()) if rows else ["run_dir"])
    writer.writeheader()
    writer.writerows(rows)
    return {"rows": rows, "table": "\n".join(lines), "csv": buf.getvalue()}
