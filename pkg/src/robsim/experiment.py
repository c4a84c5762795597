"""Batch experiment driver: config, sweeps, CSV artifacts, exit status.

A run is a sweep over (scenario, defense, mitigation-set) cells. Every cell
executes both secret values for n trials, the blind receiver recovers the
bit, and the cell is judged against its security promise: dom mode and any
applicable active mitigation promise secret-independent observations, and a
broken promise is reported as a distinct exit status so CI can gate on it.

Artifacts are deterministic byte-for-byte given the same config: a raw
report CSV, a per-cell summary CSV, and one occupancy time series per
(cell, secret) for the representative first trial.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Iterable, Mapping

import yaml

from .analysis import AnalysisError
from .cache import CacheConfig
from .core import CoreConfig, MachineConfig, SimulationLimitError
from .defenses import DefenseMode, Mitigation
from .scenarios import (
    REPORT_FIELDS,
    SCENARIO_NAMES,
    ScenarioError,
    ScenarioReport,
    build_scenario,
    format_observation,
    prepare,
    run_single,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_SIM_FAULT = 2
EXIT_SECURITY = 3

SUMMARY_FIELDS = [
    "scenario",
    "defense",
    "mitigations",
    "status",
    "trials",
    "mean_s0",
    "min_s0",
    "max_s0",
    "mean_s1",
    "min_s1",
    "max_s1",
    "windowed_s0",
    "windowed_s1",
    "accuracy",
    "leak",
    "expected_clean",
    "violation",
    "note",
]

SUMMARY_WINDOW = 100


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    scenarios: tuple[str, ...]
    out_dir: Path
    defenses: tuple[DefenseMode, ...] = tuple(DefenseMode)
    mitigation_sets: tuple[frozenset[Mitigation], ...] = (frozenset(),)
    n_trials: int = 100
    seed: int = 0
    jitter: int = 0
    core: CoreConfig = field(default_factory=CoreConfig)
    cache: CacheConfig = field(default_factory=CacheConfig)

    def __post_init__(self) -> None:
        if not self.scenarios:
            raise ConfigError("scenario list is empty")
        for name in self.scenarios:
            if name not in SCENARIO_NAMES:
                raise ConfigError(
                    f"unknown scenario {name!r}; expected one of {', '.join(SCENARIO_NAMES)}"
                )
        if not self.defenses:
            raise ConfigError("defense list is empty")
        if self.n_trials < 1:
            raise ConfigError(f"trials must be at least 1, got {self.n_trials}")
        if self.jitter < 0:
            raise ConfigError("jitter amplitude cannot be negative")

    @property
    def machine(self) -> MachineConfig:
        return MachineConfig(
            core=self.core,
            cache=self.cache,
            jitter_amplitude=self.jitter,
            jitter_seed=self.seed,
        )


def parse_defense(name: str) -> DefenseMode:
    try:
        return DefenseMode(name)
    except ValueError:
        valid = ", ".join(m.value for m in DefenseMode)
        raise ConfigError(f"unknown defense {name!r}; expected one of {valid}") from None


def parse_mitigation_set(spec: str | Iterable[str]) -> frozenset[Mitigation]:
    """'none' or '+'-joined mitigation names; a list of names also works."""
    if isinstance(spec, str):
        parts = [p for p in spec.split("+") if p and p != "none"]
    else:
        parts = [p for p in spec if p != "none"]
    out = set()
    for part in parts:
        try:
            out.add(Mitigation(part))
        except ValueError:
            valid = ", ".join(m.value for m in Mitigation)
            raise ConfigError(
                f"unknown mitigation {part!r}; expected one of {valid}"
            ) from None
    return frozenset(out)


def mitigation_label(mitigations: frozenset[Mitigation]) -> str:
    if not mitigations:
        return "none"
    return "+".join(sorted(m.value for m in mitigations))


_TOP_KEYS = {
    "scenarios",
    "defenses",
    "mitigations",
    "trials",
    "seed",
    "jitter",
    "out",
    "core",
    "cache",
}


def _sub_config(cls, mapping: Mapping, label: str):
    known = {f.name for f in fields(cls)}
    unknown = set(mapping) - known
    if unknown:
        raise ConfigError(f"unknown {label} keys: {', '.join(sorted(unknown))}")
    try:
        return cls(**mapping)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad {label} config: {exc}") from None


def config_from_mapping(
    mapping: Mapping, out_dir: Path | None = None
) -> ExperimentConfig:
    unknown = set(mapping) - _TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    scenarios = tuple(mapping.get("scenarios", ()))
    defenses = tuple(parse_defense(d) for d in mapping.get("defenses", ()))
    if not defenses:
        defenses = tuple(DefenseMode)
    specs = mapping.get("mitigations", ["none"])
    if isinstance(specs, str):
        specs = [specs]
    mitigation_sets = tuple(parse_mitigation_set(s) for s in specs)
    out = out_dir or mapping.get("out")
    if out is None:
        raise ConfigError("output directory is required (out: or --out)")
    core = _sub_config(CoreConfig, mapping.get("core", {}), "core")
    cache = _sub_config(CacheConfig, mapping.get("cache", {}), "cache")
    try:
        return ExperimentConfig(
            scenarios=scenarios,
            out_dir=Path(out),
            defenses=defenses,
            mitigation_sets=mitigation_sets,
            n_trials=int(mapping.get("trials", 100)),
            seed=int(mapping.get("seed", 0)),
            jitter=int(mapping.get("jitter", 0)),
            core=core,
            cache=cache,
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def load_config_file(path: str | Path) -> dict:
    try:
        raw = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    try:
        data = yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from None
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"config {path} must be a mapping")
    return data


# --- sweep ------------------------------------------------------------------


@dataclass
class CellResult:
    scenario: str
    defense: DefenseMode
    mitigations: frozenset[Mitigation]
    status: str  # ok | not_applicable | fault
    reports: list[ScenarioReport] = field(default_factory=list)
    occupancy: dict[int, list[int]] = field(default_factory=dict)
    leak: bool | None = None
    expected_clean: bool = False
    note: str = ""

    @property
    def violation(self) -> bool:
        return bool(self.leak) and self.expected_clean


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    cells: list[CellResult]
    exit_code: int
    artifacts: list[Path] = field(default_factory=list)


def _expects_clean(defense: DefenseMode, mitigations: frozenset[Mitigation]) -> bool:
    """Cells that promise secret-independent observations.

    dom gates every shadowed access, and a mitigation that survived the
    applicability check claims to close its channel under any mode.
    """
    return defense is DefenseMode.DOM or bool(mitigations)


def run_cell(
    name: str,
    defense: DefenseMode,
    mitigations: frozenset[Mitigation],
    config: ExperimentConfig,
) -> CellResult:
    cell = CellResult(name, defense, mitigations, "ok")
    cell.expected_clean = _expects_clean(defense, mitigations)
    streams: list[list[object]] = []
    for secret in (0, 1):
        try:
            scenario, policy = prepare(
                build_scenario(name, secret, config.machine), defense, mitigations
            )
        except (ScenarioError, AnalysisError) as exc:
            return CellResult(name, defense, mitigations, "not_applicable", note=str(exc))
        stream: list[object] = []
        for trial in range(config.n_trials):
            try:
                trace, report = run_single(scenario, policy, trial)
            except SimulationLimitError as exc:
                return CellResult(
                    name,
                    defense,
                    mitigations,
                    "fault",
                    reports=cell.reports,
                    note=f"cycle limit: {exc}",
                )
            if trial == 0:
                cell.occupancy[secret] = trace.occupancy
            cell.reports.append(report)
            stream.append(report.observation)
        streams.append(stream)
    cell.leak = streams[0] != streams[1]
    return cell


def run_experiment(config: ExperimentConfig) -> ExperimentResult:
    cells = [
        run_cell(name, defense, mitigations, config)
        for name in config.scenarios
        for defense in config.defenses
        for mitigations in config.mitigation_sets
    ]
    if all(c.status == "not_applicable" for c in cells):
        raise ConfigError(
            "no runnable cells: " + "; ".join(c.note for c in cells if c.note)
        )
    if any(c.status == "fault" for c in cells):
        code = EXIT_SIM_FAULT
    elif any(c.violation for c in cells):
        code = EXIT_SECURITY
    else:
        code = EXIT_OK
    result = ExperimentResult(config, cells, code)
    result.artifacts = write_artifacts(result)
    return result


# --- summaries --------------------------------------------------------------


@dataclass(frozen=True)
class SecretSummary:
    scenario: str
    defense: str
    mitigations: str
    secret: int
    trials: int
    mean: float | None
    minimum: float | None
    maximum: float | None
    windowed: tuple[float, ...]
    accuracy: float


def _windowed_means(values: list[float], window: int) -> tuple[float, ...]:
    return tuple(
        sum(chunk) / len(chunk)
        for chunk in (values[i : i + window] for i in range(0, len(values), window))
    )


def summarize(
    reports: Iterable[ScenarioReport], window: int = SUMMARY_WINDOW
) -> list[SecretSummary]:
    """Per-secret stats for each cell: mean/min/max, windowed means, accuracy.

    Numeric stats cover timing observations; set-order snapshots only carry
    accuracy. Windowed means average consecutive runs of `window` trials.
    """
    reports = list(reports)
    if not reports:
        raise ValueError("summarize needs at least one report")
    if window < 1:
        raise ValueError("window must be positive")
    groups: dict[tuple, list[ScenarioReport]] = {}
    for r in reports:
        key = (r.scenario, r.defense, "+".join(r.mitigations) or "none", r.ground_truth)
        groups.setdefault(key, []).append(r)
    out = []
    for (scenario, defense, mitigations, secret), rows in groups.items():
        numeric = [
            float(r.observation)
            for r in rows
            if isinstance(r.observation, (int, float)) and not isinstance(r.observation, bool)
        ]
        have_numbers = len(numeric) == len(rows)
        accuracy = sum(r.inferred_secret == r.ground_truth for r in rows) / len(rows)
        out.append(
            SecretSummary(
                scenario=scenario,
                defense=defense,
                mitigations=mitigations,
                secret=secret,
                trials=len(rows),
                mean=sum(numeric) / len(numeric) if have_numbers else None,
                minimum=min(numeric) if have_numbers else None,
                maximum=max(numeric) if have_numbers else None,
                windowed=_windowed_means(numeric, window) if have_numbers else (),
                accuracy=accuracy,
            )
        )
    return out


def _num(x: float | None) -> str:
    return "" if x is None else f"{x:.6g}"


def summary_csv(cells: list[CellResult]) -> str:
    out = io.StringIO()
    writer = csv.writer(out)
    writer.writerow(SUMMARY_FIELDS)
    for cell in cells:
        label = mitigation_label(cell.mitigations)
        row = {
            "scenario": cell.scenario,
            "defense": cell.defense.value,
            "mitigations": label,
            "status": cell.status,
            "trials": len(cell.reports),
            "leak": "" if cell.leak is None else int(cell.leak),
            "expected_clean": int(cell.expected_clean),
            "violation": int(cell.violation),
            "note": cell.note,
            "accuracy": "",
        }
        for s in (0, 1):
            for k in ("mean", "min", "max", "windowed"):
                row[f"{k}_s{s}"] = ""
        if cell.reports:
            per_secret = summarize(cell.reports)
            total = sum(s.trials for s in per_secret)
            row["accuracy"] = f"{sum(s.accuracy * s.trials for s in per_secret) / total:.4f}"
            for s in per_secret:
                row[f"mean_s{s.secret}"] = _num(s.mean)
                row[f"min_s{s.secret}"] = _num(s.minimum)
                row[f"max_s{s.secret}"] = _num(s.maximum)
                row[f"windowed_s{s.secret}"] = "|".join(_num(w) for w in s.windowed)
        writer.writerow([row[fieldname] for fieldname in SUMMARY_FIELDS])
    return out.getvalue()


def reports_csv(cells: list[CellResult]) -> str:
    out = io.StringIO()
    writer = csv.writer(out)
    writer.writerow(REPORT_FIELDS)
    for cell in cells:
        for r in cell.reports:
            writer.writerow(
                [
                    r.trial,
                    r.scenario,
                    r.defense,
                    "+".join(r.mitigations) or "none",
                    format_observation(r.observation),
                    r.inferred_secret,
                    r.ground_truth,
                    r.occupancy_peak,
                ]
            )
    return out.getvalue()


def occupancy_csv(series: list[int]) -> str:
    out = io.StringIO()
    writer = csv.writer(out)
    writer.writerow(["cycle", "occupancy"])
    for cycle, occ in enumerate(series, start=1):
        writer.writerow([cycle, occ])
    return out.getvalue()


def write_artifacts(result: ExperimentResult) -> list[Path]:
    out_dir = result.config.out_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    reports_path = out_dir / "reports.csv"
    reports_path.write_text(reports_csv(result.cells))
    written.append(reports_path)
    summary_path = out_dir / "summary.csv"
    summary_path.write_text(summary_csv(result.cells))
    written.append(summary_path)
    occ_dir = out_dir / "occupancy"
    occ_dir.mkdir(exist_ok=True)
    for cell in result.cells:
        label = mitigation_label(cell.mitigations)
        for secret, series in sorted(cell.occupancy.items()):
            name = f"{cell.scenario}__{cell.defense.value}__{label}__s{secret}.csv"
            path = occ_dir / name
            path.write_text(occupancy_csv(series))
            written.append(path)
    return written


__all__ = [
    "CellResult",
    "ConfigError",
    "EXIT_OK",
    "EXIT_SECURITY",
    "EXIT_SIM_FAULT",
    "EXIT_USAGE",
    "ExperimentConfig",
    "ExperimentResult",
    "SecretSummary",
    "SUMMARY_FIELDS",
    "config_from_mapping",
    "load_config_file",
    "mitigation_label",
    "parse_defense",
    "parse_mitigation_set",
    "run_cell",
    "run_experiment",
    "summarize",
    "summary_csv",
]
