"""Experiment configs, named presets, and the run / sweep / compare drivers.

A config is layered: preset, then the JSON file sections, then explicit
overrides (CLI flags). Run ``k`` of a repeated experiment uses seed
``base_seed + k``; the same seed drives workload generation and the engine.

Every run directory holds five files, each written atomically:

    config.json      fully resolved config (reloadable with ``load_config``)
    requests.csv     per-request records
    summary.json     run-level metrics
    timeseries.csv   per-GPU role/cap/queue samples
    events.jsonl     the event trace
"""

from __future__ import annotations

import csv
import io
import json
import os
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Sequence

from pdsim.controller import ControllerConfig
from pdsim.engine import SimConfig, SimResult, run_simulation
from pdsim.errors import ConfigError
from pdsim.metrics import CurvePoint, attainment_curve, max_qps_at_attainment
from pdsim.perf_model import Calibration, PerfModel, load_calibration
from pdsim.workload import PhaseSpec, Workload, WorkloadSpec, build_workload

RUN_FILES = ("config.json", "requests.csv", "summary.json", "timeseries.csv", "events.jsonl")

_P, _D = "prefill", "decode"


def _split(n_prefill: int, n: int = 8) -> list[str]:
    return [_P] * n_prefill + [_D] * (n - n_prefill)


PRESETS: dict[str, dict[str, Any]] = {
    "coalesced-750": {"sim": {"mode": "coalesced", "node_power_budget": 6000, "caps": [750] * 8}},
    "4P4D-750": {"sim": {"node_power_budget": 6000, "roles": _split(4), "caps": [750] * 8}},
    "4P4D-600": {"sim": {"roles": _split(4), "caps": [600] * 8}},
    "5P3D-600": {"sim": {"roles": _split(5), "caps": [600] * 8}},
    "4P750-4D450": {"sim": {"roles": _split(4), "caps": [750] * 4 + [450] * 4}},
    "4P675-4D525": {"sim": {"roles": _split(4), "caps": [675] * 4 + [525] * 4}},
    "dynpower": {"sim": {"roles": _split(4), "caps": [600] * 8}, "controller": {"policy": "dyn-power"}},
    "dyngpu": {"sim": {"roles": _split(4), "caps": [600] * 8}, "controller": {"policy": "dyn-gpu"}},
    "dynboth": {"sim": {"roles": _split(4), "caps": [600] * 8}, "controller": {"policy": "dyn-both"}},
}

TOP_LEVEL_KEYS = {"name", "preset", "sim", "workload", "controller", "calibration", "sweep", "repeats", "seed",
                  "out", "parallel"}


@dataclass
class ExperimentConfig:
    name: str = "run"
    sim: SimConfig = field(default_factory=SimConfig)
    workload: WorkloadSpec = field(default_factory=WorkloadSpec)
    controller: ControllerConfig = field(default_factory=ControllerConfig)
    calibration: Calibration = field(default_factory=Calibration)
    qps: list[float] = field(default_factory=lambda: [1.5])
    slo_scales: list[float] = field(default_factory=lambda: [1.0])
    repeats: int = 1
    seed: int = 0
    out: str = "runs"
    parallel: int = 1

    def validate(self) -> None:
        if not self.qps or not self.slo_scales:
            raise ConfigError("sweep lists (qps, slo_scale) must be non-empty")
        if any(q <= 0 for q in self.qps) or any(s <= 0 for s in self.slo_scales):
            raise ConfigError("qps and slo_scale values must be > 0")
        if self.repeats < 1:
            raise ConfigError("repeats must be >= 1")
        if self.parallel < 1:
            raise ConfigError("parallel must be >= 1")
        if self.workload.gpu_count != self.sim.gpu_count:
            raise ConfigError("workload.gpu_count must equal sim.gpu_count")
        self.sim.validate(PerfModel(self.calibration))
        if self.controller.min_p < self.calibration.min_power or self.controller.max_p > self.calibration.max_power:
            raise ConfigError("controller power range must lie inside the calibration range")

    def to_dict(self) -> dict[str, Any]:
        wl = asdict(self.workload)
        wl["input_range"] = list(self.workload.input_range)
        wl["output_range"] = list(self.workload.output_range)
        return {
            "name": self.name,
            "sim": self.sim.to_dict(),
            "workload": wl,
            "controller": asdict(self.controller),
            "calibration": self.calibration.to_dict(),
            "sweep": {"qps": list(self.qps), "slo_scale": list(self.slo_scales)},
            "repeats": self.repeats,
            "seed": self.seed,
            "out": self.out,
            "parallel": self.parallel,
        }

    def point(self, qps: float, slo_scale: float = 1.0, run_index: int = 0) -> "ExperimentConfig":
        """Single-run config for one sweep point; seed is ``seed + run_index``."""
        seed = self.seed + run_index
        sim = replace(self.sim, seed=seed, ttft_slo=self.sim.ttft_slo * slo_scale,
                      tpot_slo=self.sim.tpot_slo * slo_scale)
        phases = tuple(
            replace(p,
                    ttft_slo=None if p.ttft_slo is None else p.ttft_slo * slo_scale,
                    tpot_slo=None if p.tpot_slo is None else p.tpot_slo * slo_scale)
            for p in self.workload.phases
        )
        workload = replace(self.workload, qps_per_gpu=qps, seed=seed, phases=phases)
        controller = replace(self.controller, ttft_slo=sim.ttft_slo, tpot_slo=sim.tpot_slo)
        return replace(self, sim=sim, workload=workload, controller=controller, qps=[qps],
                       slo_scales=[1.0], repeats=1, seed=seed)


def _build(cls, data: dict[str, Any], section: str):
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown {section} keys: {sorted(unknown)}")
    return data


def _merge(base: dict, extra: dict) -> dict:
    out = dict(base)
    for k, v in extra.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def config_from_dict(data: dict[str, Any], base_dir: Path | None = None) -> ExperimentConfig:
    """Resolve a JSON-style dict (optionally naming a preset) into a config."""
    unknown = set(data) - TOP_LEVEL_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    preset = data.get("preset")
    merged: dict[str, Any] = {}
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; known: {sorted(PRESETS)}")
        merged = _merge(merged, PRESETS[preset])
        merged["name"] = preset
    merged = _merge(merged, {k: v for k, v in data.items() if k != "preset"})

    sim_d = _build(SimConfig, dict(merged.get("sim", {})), "sim")
    sim = SimConfig(**sim_d)

    wl_d = _build(WorkloadSpec, dict(merged.get("workload", {})), "workload")
    if "phases" in wl_d:
        wl_d["phases"] = tuple(PhaseSpec(**p) if isinstance(p, dict) else p for p in wl_d["phases"])
    for key in ("input_range", "output_range"):
        if key in wl_d:
            wl_d[key] = tuple(wl_d[key])
    if wl_d.get("trace_path") and base_dir is not None and not Path(wl_d["trace_path"]).is_absolute():
        wl_d["trace_path"] = str(base_dir / wl_d["trace_path"])
    wl_d.setdefault("gpu_count", sim.gpu_count)
    wl_d.setdefault("seed", data.get("seed", 0))
    workload = WorkloadSpec(**wl_d)

    ctl_d = _build(ControllerConfig, dict(merged.get("controller", {})), "controller")
    ctl_d.setdefault("ttft_slo", sim.ttft_slo)
    ctl_d.setdefault("tpot_slo", sim.tpot_slo)
    controller = ControllerConfig(**ctl_d)

    cal = merged.get("calibration")
    if cal is None:
        calibration = Calibration()
    elif isinstance(cal, dict):
        calibration = Calibration.from_dict(cal)
    else:
        path = Path(cal)
        if base_dir is not None and not path.is_absolute():
            path = base_dir / path
        calibration = load_calibration(path)

    sweep = merged.get("sweep", {})
    unknown = set(sweep) - {"qps", "slo_scale"}
    if unknown:
        raise ConfigError(f"unknown sweep keys: {sorted(unknown)}")
    cfg = ExperimentConfig(
        name=str(merged.get("name", "run")),
        sim=sim,
        workload=workload,
        controller=controller,
        calibration=calibration,
        qps=[float(q) for q in sweep.get("qps", [workload.qps_per_gpu])],
        slo_scales=[float(s) for s in sweep.get("slo_scale", [1.0])],
        repeats=int(merged.get("repeats", 1)),
        seed=int(merged.get("seed", workload.seed)),
        out=str(merged.get("out", "runs")),
        parallel=int(merged.get("parallel", 1)),
    )
    cfg.validate()
    return cfg


def load_config(path: str | Path | None = None, preset: str | None = None,
                overrides: dict[str, Any] | None = None) -> ExperimentConfig:
    data: dict[str, Any] = {}
    base_dir = None
    if path is not None:
        path = Path(path)
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be an object")
        base_dir = path.parent
    if preset is not None:
        data = {**data, "preset": preset}
    if overrides:
        data = _merge(data, overrides)
    return config_from_dict(data, base_dir)


# -- running ----------------------------------------------------------------


def _write_atomic(path: Path, text: str) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def simulate(cfg: ExperimentConfig, workload: Workload | None = None) -> SimResult:
    """Run a single-point config (the first qps value, unscaled SLOs)."""
    if workload is None:
        workload = build_workload(replace(cfg.workload, qps_per_gpu=cfg.qps[0]))
    return run_simulation(cfg.sim, workload, cfg.controller, PerfModel(cfg.calibration))


def write_run(cfg: ExperimentConfig, result: SimResult, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_atomic(out / "config.json", json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    _write_atomic(out / "requests.csv", result.records_csv())
    _write_atomic(out / "summary.json", json.dumps(result.summary.to_dict(), indent=2, sort_keys=True) + "\n")
    _write_atomic(out / "timeseries.csv", result.timeseries_csv())
    _write_atomic(out / "events.jsonl", result.trace_jsonl())
    return out


def run(cfg: ExperimentConfig, out_dir: str | Path | None = None) -> tuple[SimResult, Path]:
    point = cfg.point(cfg.qps[0], cfg.slo_scales[0], 0)
    result = simulate(point)
    return result, write_run(point, result, out_dir or cfg.out)


def _run_point(args: tuple[ExperimentConfig, str]) -> dict[str, Any]:
    point, out_dir = args
    result = simulate(point)
    write_run(point, result, out_dir)
    return result.summary.to_dict()


@dataclass(frozen=True)
class SweepRow:
    qps_per_gpu: float
    slo_scale: float
    attainment: float
    attainment_min: float
    attainment_max: float
    goodput: float
    qps_per_watt: float
    qps_per_node_watt: float
    repeats: int


SWEEP_COLUMNS = tuple(f.name for f in fields(SweepRow))


def sweep(cfg: ExperimentConfig, out_dir: str | Path | None = None) -> list[SweepRow]:
    """One run per (qps, slo scale, repeat); repeats are averaged per point."""
    cfg.validate()
    root = Path(out_dir or cfg.out)
    jobs = []
    keys = []
    for q in cfg.qps:
        for s in cfg.slo_scales:
            for k in range(cfg.repeats):
                jobs.append((cfg.point(q, s, k), str(root / f"qps{q:g}_slo{s:g}_rep{k}")))
                keys.append((q, s))
    if cfg.parallel > 1:
        with ProcessPoolExecutor(max_workers=cfg.parallel) as pool:
            summaries = list(pool.map(_run_point, jobs))
    else:
        summaries = [_run_point(j) for j in jobs]

    grouped: dict[tuple[float, float], list[dict]] = {}
    for key, summary in zip(keys, summaries):
        grouped.setdefault(key, []).append(summary)
    rows = []
    for (q, s), group in grouped.items():
        att = [g["attainment"] for g in group]
        mean = lambda k: sum(g[k] for g in group) / len(group)  # noqa: E731
        rows.append(SweepRow(q, s, sum(att) / len(att), min(att), max(att), mean("goodput"),
                             mean("qps_per_watt"), mean("qps_per_node_watt"), len(group)))
    rows.sort(key=lambda r: (r.slo_scale, r.qps_per_gpu))

    root.mkdir(parents=True, exist_ok=True)
    _write_atomic(root / "attainment_curve.csv", sweep_rows_csv(rows))
    _write_atomic(root / "slo_scaling.csv", slo_scaling_csv(rows))
    knee = {}
    for s in cfg.slo_scales:
        curve = attainment_curve(CurvePoint(r.qps_per_gpu, r.attainment) for r in rows if r.slo_scale == s)
        knee[f"{s:g}"] = max_qps_at_attainment(curve, 0.8)
    _write_atomic(root / "sweep_summary.json", json.dumps(
        {"config": cfg.to_dict(), "max_qps_at_80pct_attainment": knee}, indent=2, sort_keys=True) + "\n")
    return rows


def sweep_rows_csv(rows: Sequence[SweepRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(SWEEP_COLUMNS)
    for r in rows:
        writer.writerow([repr(getattr(r, c)) if isinstance(getattr(r, c), float) else getattr(r, c)
                         for c in SWEEP_COLUMNS])
    return buf.getvalue()


def slo_scaling_csv(rows: Sequence[SweepRow]) -> str:
    """SLO scale factor against attainment, one column per QPS point."""
    qps = sorted({r.qps_per_gpu for r in rows})
    scales = sorted({r.slo_scale for r in rows}, reverse=True)
    table = {(r.slo_scale, r.qps_per_gpu): r.attainment for r in rows}
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["slo_scale"] + [f"attainment_qps{q:g}" for q in qps])
    for s in scales:
        writer.writerow([repr(s)] + [repr(table[(s, q)]) for q in qps])
    return buf.getvalue()


# -- comparison ---------------------------------------------------------------

COMPARE_METRICS = ("attainment", "goodput", "qps_per_watt", "qps_per_node_watt")


@dataclass(frozen=True)
class CompareRow:
    name: str
    attainment: float
    goodput: float
    qps_per_watt: float
    qps_per_node_watt: float
    avg_provisioned_gpu_power: float


def compare(configs: Sequence[ExperimentConfig], out_dir: str | Path | None = None
            ) -> tuple[list[CompareRow], dict[str, str]]:
    """Run every config on one shared workload and pick a winner per metric.

    All configs must describe the same workload (spec, qps and seed); the
    trace is generated once and replayed for each config.
    """
    if not configs:
        raise ConfigError("compare needs at least one config")
    points = [c.point(c.qps[0], c.slo_scales[0], 0) for c in configs]
    ref = points[0].workload
    for c in points[1:]:
        if c.workload != ref:
            raise ConfigError(f"config {c.name!r} uses a different workload than {points[0].name!r}")
    workload = build_workload(ref)
    rows = []
    for c in points:
        result = simulate(c, workload)
        s = result.summary
        rows.append(CompareRow(c.name, s.attainment, s.goodput, s.qps_per_watt, s.qps_per_node_watt,
                               s.avg_provisioned_gpu_power))
        if out_dir is not None:
            write_run(c, result, Path(out_dir) / c.name)
    winners = {m: max(rows, key=lambda r: getattr(r, m)).name for m in COMPARE_METRICS}
    if out_dir is not None:
        _write_atomic(Path(out_dir) / "compare.csv", compare_csv(rows))
        _write_atomic(Path(out_dir) / "winners.json", json.dumps(winners, indent=2, sort_keys=True) + "\n")
    return rows, winners


def compare_csv(rows: Sequence[CompareRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    cols = [f.name for f in fields(CompareRow)]
    writer.writerow(cols)
    for r in rows:
        writer.writerow([r.name] + [repr(getattr(r, c)) for c in cols[1:]])
    return buf.getvalue()
