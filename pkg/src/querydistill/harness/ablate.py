"""Ablation presets: configuration grids mirroring the study tables, run
over several seeds with a comparison summary."""

from __future__ import annotations

import copy
import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

from .config import TrainConfig, apply_overrides
from .train import RunRecord, train

# Each preset is an ordered list of (label, overrides); overrides are nested
# {section: {key: value}} patches applied on top of the base config.
PRESETS: dict[str, list[tuple[str, dict]]] = {
    "components": [
        ("baseline", {"distill": {"md": False, "pd": False, "aux": False}}),
        ("md", {"distill": {"md": True}}),
        ("md_pd", {"distill": {"md": True, "pd": True}, "ema": {"stop_update": True}}),
        ("md_aux", {"distill": {"md": True, "aux": True}}),
        (
            "md_pd_aux",
            {"distill": {"md": True, "pd": True, "aux": True}, "ema": {"stop_update": True}},
        ),
    ],
    "md_variants": [
        ("qfl_no_md", {"distill": {"md": False}}),
        ("conditional", {"distill": {"md": True, "md_variant": "conditional_hard"}}),
        ("multi_target", {"distill": {"md": True, "md_variant": "multi_target"}}),
        ("multi_target_conditional", {"distill": {"md": True, "md_variant": "conditional"}}),
    ],
    "downweight": [
        ("cls_only", {"distill": {"md": True, "md_reg": False}}),
        ("reg_no_downweight", {"distill": {"md": True, "md_downweight": 1.0}}),
        ("reg_downweight", {"distill": {"md": True, "md_downweight": 0.51}}),
        (
            "cls_and_reg_downweight",
            {"distill": {"md": True, "md_downweight": 0.51, "md_cls_downweight": True}},
        ),
    ],
    "pd_variants": [
        ("no_pd", {"distill": {"md": True}}),
        ("naive", {"distill": {"md": True, "pd": True, "pd_variant": "naive"}}),
        ("weighted", {"distill": {"md": True, "pd": True, "pd_variant": "weighted"}}),
        ("gated", {"distill": {"md": True, "pd": True, "pd_variant": "gated"}}),
        (
            "gated_stop_update",
            {
                "distill": {"md": True, "pd": True, "pd_variant": "gated"},
                "ema": {"stop_update": True},
            },
        ),
        ("query_prior", {"distill": {"md": True, "pd": True, "pd_variant": "query_prior"}}),
    ],
    "aux_variants": [
        (
            "original_matching",
            {"distill": {"md": True, "aux": True, "aux_variant": "original_matching"}},
        ),
        ("re_matching", {"distill": {"md": True, "aux": True, "aux_variant": "re_matching"}}),
        ("md_fused", {"distill": {"md": True, "aux": True, "aux_variant": "md"}}),
    ],
    "share_decoder": [
        ("baseline_separate", {"distill": {}, "model": {"share_decoder": "false"}}),
        ("baseline_shared", {"distill": {}, "model": {"share_decoder": "true"}}),
        (
            "distill_separate",
            {
                "distill": {"md": True, "pd": True, "aux": True},
                "ema": {"stop_update": True},
                "model": {"share_decoder": "false"},
            },
        ),
        (
            "distill_shared",
            {
                "distill": {"md": True, "pd": True, "aux": True},
                "ema": {"stop_update": True},
                "model": {"share_decoder": "true"},
            },
        ),
    ],
}


@dataclass
class AblationResult:
    preset: str
    seeds: list[int]
    records: dict[str, list[RunRecord]] = field(default_factory=dict)

    def final_aps(self, label: str) -> list[float]:
        return [r.final["ap"] for r in self.records[label]]

    def summary_rows(self) -> list[dict]:
        rows = []
        for label, records in self.records.items():
            aps = [r.final["ap"] for r in records]
            ap50s = [r.final["ap50"] for r in records]
            rows.append(
                {
                    "preset": self.preset,
                    "label": label,
                    "seeds": len(records),
                    "ap_mean": sum(aps) / len(aps),
                    "ap_min": min(aps),
                    "ap_max": max(aps),
                    "ap50_mean": sum(ap50s) / len(ap50s),
                    "ap_per_seed": aps,
                }
            )
        return rows

    def table_text(self) -> str:
        lines = [
            f"preset: {self.preset} ({len(self.seeds)} seeds)",
            f"{'label':<26} {'ap mean':>9} {'ap range':>19} {'ap50 mean':>10}",
        ]
        for row in self.summary_rows():
            rng = f"[{row['ap_min']:.4f}, {row['ap_max']:.4f}]"
            lines.append(
                f"{row['label']:<26} {row['ap_mean']:>9.4f} {rng:>19} {row['ap50_mean']:>10.4f}"
            )
        return "\n".join(lines)

    def csv_text(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["preset", "label", "seed", "ap", "ap50"])
        for label, records in self.records.items():
            for record in records:
                writer.writerow(
                    [self.preset, label, record.seed, record.final["ap"], record.final["ap50"]]
                )
        return buf.getvalue()


def preset_configs(
    preset: str, base: TrainConfig | None = None
) -> list[tuple[str, TrainConfig]]:
    if preset not in PRESETS:
        raise ValueError(f"unknown preset: {preset} (have {sorted(PRESETS)})")
    base = base if base is not None else TrainConfig()
    return [(label, apply_overrides(base, overrides)) for label, overrides in PRESETS[preset]]


def ablate(
    preset: str,
    seeds: int = 4,
    out_root: str | Path | None = None,
    base: TrainConfig | None = None,
) -> AblationResult:
    """Run a preset's configuration grid over ``seeds`` model seeds.

    Runs execute sequentially (shared-nothing output directories), so a
    reference-mode grid is bitwise reproducible.
    """
    seed_list = list(range(seeds))
    result = AblationResult(preset=preset, seeds=seed_list)
    root = Path(out_root) if out_root is not None else None
    for label, cfg in preset_configs(preset, base):
        records = []
        for seed in seed_list:
            run_cfg = copy.deepcopy(cfg)
            run_cfg.run.seed = seed
            run_dir = root / preset / label / f"seed_{seed}" if root is not None else None
            records.append(train(run_cfg, run_dir))
        result.records[label] = records
    if root is not None:
        (root / preset / "summary.txt").write_text(result.table_text(), encoding="utf-8")
        (root / preset / "summary.csv").write_text(result.csv_text(), encoding="utf-8")
        (root / preset / "summary.json").write_text(
            json.dumps(result.summary_rows(), indent=2), encoding="utf-8"
        )
    return result
