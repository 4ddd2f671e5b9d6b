"""Pipeline configuration and taxonomy loading.

Configs are a single JSON file whose flat keys mirror
:class:`PipelineConfig`; the ``backend`` key nests a
:class:`~issuepatch.gateway.BackendConfig`.  Taxonomies (seven error types,
twelve patch types) live in JSON files; documented placeholder sets ship as
package data.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .distance import DISTANCE_MODES, RAW
from .errors import UsageError
from .gateway import BackendConfig, DEFAULT_LOOP_CAP

#: Configuration toggles that disable or swap one pipeline component each.
ABLATION_TOGGLES = frozenset(
    {
        "no_vul_type",
        "no_completer",
        "no_extractor",
        "no_vulcok",
        "cok_plain",
        "no_patch_type",
        "no_joint",
        "no_focus_list",
        "no_autoprompt",
        "icl_stub",
    }
)

VERDICT_PROVIDERS = ("dataset", "threshold")

DEFAULT_K = 10
DEFAULT_TAU = 0.8
DEFAULT_MASK_FRACTION = 0.2


@dataclass
class PipelineConfig:
    backend: BackendConfig = field(default_factory=lambda: BackendConfig(script=[]))
    theta: int = DEFAULT_LOOP_CAP
    k: int = DEFAULT_K
    seeds: dict[str, int] = field(default_factory=lambda: {"split": 0, "mask": 0})
    distance_mode: str = RAW
    taxonomies: dict[str, str] = field(default_factory=dict)
    ablations: set[str] = field(default_factory=set)
    verdict_provider: str = "threshold"
    tau: float = DEFAULT_TAU
    top_r: int = 3
    mask_fraction: float = DEFAULT_MASK_FRACTION
    pairs_per_call: int = 5
    epochs: int = 10
    early_stop: int = 3
    concurrency: int = 1
    retrieval_penalty: float = 100.0
    max_queries: int = 8
    via_llm_queries: bool = True
    match_line_target: str = "diff_region"

    def __post_init__(self) -> None:
        if self.theta < 1:
            raise UsageError(f"theta must be >= 1, got {self.theta}")
        if self.k < 1:
            raise UsageError(f"k must be >= 1, got {self.k}")
        if not 0 < self.tau <= 1:
            raise UsageError(f"tau must be in (0, 1], got {self.tau}")
        if self.distance_mode not in DISTANCE_MODES:
            raise UsageError(f"unknown distance_mode {self.distance_mode!r}")
        if self.verdict_provider not in VERDICT_PROVIDERS:
            raise UsageError(f"unknown verdict_provider {self.verdict_provider!r}")
        if self.match_line_target not in ("diff_region", "full"):
            raise UsageError(f"unknown match_line_target {self.match_line_target!r}")
        unknown = set(self.ablations) - ABLATION_TOGGLES
        if unknown:
            raise UsageError(f"unknown ablation toggles: {sorted(unknown)}")

    def has(self, toggle: str) -> bool:
        return toggle in self.ablations

    def seed(self, stage: str) -> int:
        return self.seeds.get(stage, 0)

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        d = dict(d)
        if "backend" in d and isinstance(d["backend"], dict):
            d["backend"] = BackendConfig.from_dict(d["backend"])
        if "ablations" in d:
            d["ablations"] = set(d["ablations"])
        known = set(cls.__dataclass_fields__)
        stray = set(d) - known
        if stray:
            raise UsageError(f"unknown config keys: {sorted(stray)}")
        return cls(**d)

    def header(self) -> dict:
        """Run identity echoed into every report."""
        return {
            "ablations": sorted(self.ablations),
            "distance_mode": self.distance_mode,
            "k": self.k,
            "theta": self.theta,
            "tau": self.tau,
            "verdict_provider": self.verdict_provider,
        }


def load_config(path: str | Path) -> PipelineConfig:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise UsageError(f"cannot read config {path}: {e}") from e
    return PipelineConfig.from_dict(data)


def _load_taxonomy(cfg: PipelineConfig, key: str, default_file: str) -> list[str]:
    path = cfg.taxonomies.get(key)
    if path:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    else:
        data = json.loads(
            resources.files("issuepatch.data").joinpath(default_file).read_text("utf-8")
        )
    values = data.get(key)
    if not isinstance(values, list) or not values:
        raise UsageError(f"taxonomy file for {key!r} holds no entries")
    return [str(v) for v in values]


def load_error_types(cfg: PipelineConfig) -> list[str]:
    return _load_taxonomy(cfg, "error_types", "error_types.json")


def load_patch_types(cfg: PipelineConfig) -> list[str]:
    return _load_taxonomy(cfg, "patch_types", "patch_types.json")
