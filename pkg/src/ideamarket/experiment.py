"""Replicate runs, parameter sweeps and the experiment summary tables.

Seeding: run ``(grid point g, replicate r)`` under base seed ``s`` uses
``SeedSequence(s, spawn_key=(g, r))``. Its child ``0`` builds the network
(further split into human, bot and infiltration streams) and child ``1``
drives the diffusion. Runs that differ only in wiring strategy share a grid
point and therefore see identical subnetworks and diffusion uniforms.
"""

from __future__ import annotations

import dataclasses
import enum
import hashlib
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import stats

from .engine import SimParams, SimResult, SteadyConfig, run_to_steady_state
from .metrics import NAN, POPULARITY_EDGES, MetricsReport, ccdf_from_histogram, evaluate
from .netgen import Generator, NetGenParams, Wiring, build_network
from .table import atomic_write_text, write_csv

CI_LEVEL = 0.95
CI_METHOD = "student-t"
RUN_COLUMNS = ["gamma", "phi", "mu", "alpha", "wiring", "seed", "Q", "D", "tau", "gini_hub", "eta",
               "n_memes", "converged"]


class ExperimentKind(str, enum.Enum):
    PHASE_MAP = "phase-map"
    TARGETING = "targeting"
    POPULARITY = "popularity"
    AMPLIFICATION = "amplification"
    ALPHA_MU_TAU = "alpha-mu-tau"


class ManifestMismatch(RuntimeError):
    """Resuming against a manifest written for a different configuration."""


def derive_seed(base_seed: int, grid_index: int, replicate: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(base_seed, spawn_key=(grid_index, replicate))


def _child(ss: np.random.SeedSequence, k: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(ss.entropy, spawn_key=ss.spawn_key + (k,))


def run_seed_id(ss: np.random.SeedSequence) -> int:
    """A 64-bit integer naming the run's stream, for output tables."""
    return int(ss.generate_state(1, np.uint64)[0])


def simulate(params: SimParams, ss: np.random.SeedSequence) -> SimResult:
    network = build_network(params.net, _child(ss, 0))
    return run_to_steady_state(params, network, np.random.default_rng(_child(ss, 1)))


def run_one(params: SimParams, base_seed: int, grid_index: int, replicate: int) -> MetricsReport:
    return evaluate(simulate(params, derive_seed(base_seed, grid_index, replicate)))


def _star_run_one(args):
    return run_one(*args)


def _map(tasks: list[tuple], workers: int) -> list[MetricsReport]:
    if workers <= 1 or len(tasks) <= 1:
        return [run_one(*t) for t in tasks]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_star_run_one, tasks, chunksize=1))


def run_replicates(
    params: SimParams, replicates: int, base_seed: int, grid_index: int = 0, workers: int = 1
) -> list[MetricsReport]:
    """Fresh network and diffusion per replicate; order follows replicate index."""
    if replicates < 1:
        raise ValueError("replicates must be >= 1")
    return _map([(params, base_seed, grid_index, r) for r in range(replicates)], workers)


def confidence_interval(values: Iterable[float], level: float = CI_LEVEL) -> tuple[float, float]:
    """Mean and Student-t half-width of the finite values (NaN half-width if n < 2)."""
    x = np.asarray([v for v in values if v is not None and math.isfinite(v)], dtype=np.float64)
    if x.size == 0:
        return NAN, NAN
    mean = float(x.mean())
    if x.size < 2:
        return mean, NAN
    sd = float(x.std(ddof=1))
    return mean, float(stats.t.ppf(0.5 + level / 2, x.size - 1) * sd / math.sqrt(x.size))


def ci_overlap(a: tuple[float, float], b: tuple[float, float]) -> bool:
    return abs(a[0] - b[0]) <= a[1] + b[1]


@dataclass(frozen=True)
class SweepSpec:
    kind: ExperimentKind
    gamma_grid: tuple[float, ...] = ()
    phi_grid: tuple[float, ...] = ()
    mu_grid: tuple[float, ...] = ()
    alpha_grid: tuple[int, ...] = ()
    replicates: int = 20
    base_seed: int = 0

    def __post_init__(self):
        if self.replicates < 2:
            raise ValueError("a sweep needs at least 2 replicates for confidence intervals")

    @classmethod
    def defaults(cls, kind: ExperimentKind | str, **overrides) -> "SweepSpec":
        kind = ExperimentKind(kind)
        gammas = tuple(float(g) for g in np.logspace(-3, 0, 12))
        base = {
            ExperimentKind.PHASE_MAP: dict(gamma_grid=gammas, phi_grid=tuple(float(p) for p in range(1, 11))),
            ExperimentKind.TARGETING: dict(gamma_grid=gammas, mu_grid=(0.25, 0.75)),
            ExperimentKind.POPULARITY: dict(gamma_grid=(0.001, 0.01, 0.1), phi_grid=(1.0, 10.0)),
            ExperimentKind.AMPLIFICATION: dict(gamma_grid=(0.5,), phi_grid=(1.0,)),
            ExperimentKind.ALPHA_MU_TAU: dict(
                mu_grid=(0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9), alpha_grid=(2, 5, 10, 15, 20, 30, 50)
            ),
        }[kind]
        base.update({k: tuple(v) if isinstance(v, list) else v for k, v in overrides.items()})
        return cls(kind=kind, **base)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["kind"] = self.kind.value
        for k in ("gamma_grid", "phi_grid", "mu_grid", "alpha_grid"):
            d[k] = list(d[k])
        return d


def alpha_mu_base(params: SimParams) -> SimParams:
    """No bots on an undirected preferential-attachment network."""
    net = dataclasses.replace(params.net, beta=0.0, gamma=0.0, generator=Generator.UNDIRECTED_PA)
    return dataclasses.replace(params, net=net)


def grid_points(spec: SweepSpec) -> list[dict]:
    """Ordered grid points; each lists the wirings run under its shared seed."""
    k = spec.kind
    if k is ExperimentKind.TARGETING:
        return [
            {"mu": mu, "gamma": g, "wirings": ["random", "preferential"]}
            for mu in spec.mu_grid
            for g in spec.gamma_grid
        ]
    if k is ExperimentKind.ALPHA_MU_TAU:
        return [{"mu": mu, "alpha": a, "wirings": [None]} for mu in spec.mu_grid for a in spec.alpha_grid]
    return [{"gamma": g, "phi": p, "wirings": [None]} for g in spec.gamma_grid for p in spec.phi_grid]


def apply_point(base: SimParams, point: dict, wiring: str | None) -> SimParams:
    net = base.net
    if "gamma" in point:
        net = dataclasses.replace(net, gamma=point["gamma"])
    if wiring is not None:
        net = dataclasses.replace(net, wiring=Wiring(wiring))
    params = dataclasses.replace(base, net=net)
    for key in ("mu", "alpha", "phi"):
        if key in point:
            params = dataclasses.replace(params, **{key: point[key]})
    return params


@dataclass
class SweepRecord:
    """All replicate reports at one grid point, keyed by wiring (``"-"`` if none)."""

    index: int
    point: dict
    reports: dict[str, list[MetricsReport]]

    def values(self, metric: str, wiring: str = "-") -> list[float]:
        return [getattr(r, metric) for r in self.reports[wiring]]

    def summary(self, metric: str, wiring: str = "-") -> tuple[float, float]:
        return confidence_interval(self.values(metric, wiring))

    def n_nonconverged(self) -> int:
        return sum(not r.converged for reps in self.reports.values() for r in reps)

    def to_dict(self) -> dict:
        return {
            "index": self.index,
            "point": self.point,
            "reports": {w: [r.to_dict() for r in reps] for w, reps in self.reports.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SweepRecord":
        reports = {w: [MetricsReport.from_dict(r) for r in reps] for w, reps in d["reports"].items()}
        return cls(d["index"], d["point"], reports)


def _params_dict(params: SimParams) -> dict:
    d = dataclasses.asdict(params)
    d["net"]["wiring"] = params.net.wiring.value
    d["net"]["generator"] = params.net.generator.value
    return d


def params_from_dict(d: dict) -> SimParams:
    net = dict(d["net"])
    net["wiring"] = Wiring(net["wiring"])
    net["generator"] = Generator(net["generator"])
    rest = {k: v for k, v in d.items() if k not in ("net", "steady")}
    return SimParams(net=NetGenParams(**net), steady=SteadyConfig(**d["steady"]), **rest)


def run_sweep(
    spec: SweepSpec,
    base: SimParams,
    workers: int = 1,
    completed: dict[int, SweepRecord] | None = None,
    on_point: Callable[[SweepRecord], None] | None = None,
) -> list[SweepRecord]:
    """Run every grid point not already in ``completed``; returns records in grid order."""
    if spec.kind is ExperimentKind.ALPHA_MU_TAU:
        base = alpha_mu_base(base)
    completed = dict(completed or {})
    for idx, point in enumerate(grid_points(spec)):
        if idx in completed:
            continue
        tasks, keys = [], []
        for wiring in point["wirings"]:
            params = apply_point(base, point, wiring)
            for r in range(spec.replicates):
                tasks.append((params, spec.base_seed, idx, r))
                keys.append(wiring or "-")
        reports: dict[str, list[MetricsReport]] = {}
        for key, rep in zip(keys, _map(tasks, workers)):
            reports.setdefault(key, []).append(rep)
        record = SweepRecord(idx, {k: v for k, v in point.items() if k != "wirings"}, reports)
        completed[idx] = record
        if on_point is not None:
            on_point(record)
    return [completed[i] for i in sorted(completed)]


# Experiment-specific views over sweep records.

def phase_map_sweep(spec: SweepSpec, base: SimParams, workers: int = 1) -> list[SweepRecord]:
    return run_sweep(spec, base, workers)


@dataclass(frozen=True)
class TargetingRow:
    mu: float
    gamma: float
    q_rand: tuple[float, float]
    q_pref: tuple[float, float]
    ratio: tuple[float, float]
    gini_rand: tuple[float, float]
    gini_pref: tuple[float, float]


def targeting_rows(records: Sequence[SweepRecord]) -> list[TargetingRow]:
    rows = []
    for rec in records:
        q_r, q_p = rec.values("Q", "random"), rec.values("Q", "preferential")
        ratios = [p / r if r > 0 else NAN for p, r in zip(q_p, q_r)]
        rows.append(TargetingRow(
            rec.point["mu"], rec.point["gamma"],
            confidence_interval(q_r), confidence_interval(q_p), confidence_interval(ratios),
            rec.summary("gini_hub", "random"), rec.summary("gini_hub", "preferential"),
        ))
    return rows


def targeting_experiment(spec: SweepSpec, base: SimParams, workers: int = 1) -> list[TargetingRow]:
    return targeting_rows(run_sweep(spec, base, workers))


def pooled_ccdf(reports: Sequence[MetricsReport], attr: str) -> np.ndarray:
    hists = [np.asarray(getattr(r, attr), dtype=np.int64) for r in reports]
    width = max((len(h) for h in hists), default=0)
    total = np.zeros(width, dtype=np.int64)
    for h in hists:
        total[: len(h)] += h
    return ccdf_from_histogram(total)


def sign_test_p(wins: int, n: int) -> float:
    """One-sided binomial sign-test p-value for ``wins`` of ``n`` at p = 1/2."""
    return float(stats.binomtest(wins, n, 0.5, alternative="greater").pvalue) if n else NAN


@dataclass(frozen=True)
class PopularityRow:
    gamma: float
    phi: float
    ks: tuple[float, float]
    top_low: tuple[float, float]
    top_high: tuple[float, float]
    low_wins: int
    n: int
    sign_p: float
    ccdf_low: np.ndarray = field(repr=False)
    ccdf_high: np.ndarray = field(repr=False)


def popularity_rows(records: Sequence[SweepRecord]) -> list[PopularityRow]:
    rows = []
    for rec in records:
        reps = rec.reports["-"]
        pairs = [(r.top_decile_low, r.top_decile_high) for r in reps
                 if math.isfinite(r.top_decile_low) and math.isfinite(r.top_decile_high)]
        wins = sum(lo > hi for lo, hi in pairs)
        rows.append(PopularityRow(
            rec.point["gamma"], rec.point["phi"], rec.summary("ks_popularity"),
            rec.summary("top_decile_low"), rec.summary("top_decile_high"),
            wins, len(pairs), sign_test_p(wins, len(pairs)),
            pooled_ccdf(reps, "hist_low"), pooled_ccdf(reps, "hist_high"),
        ))
    return rows


def popularity_experiment(spec: SweepSpec, base: SimParams, workers: int = 1) -> list[PopularityRow]:
    return popularity_rows(run_sweep(spec, base, workers))


@dataclass(frozen=True)
class AmplificationRow:
    gamma: float
    phi: float
    eta_hat: tuple[float, float]
    bins: list[tuple[int, int, float, float, float]]  # index, count, mean V_b, mean V_h, eta


def amplification_rows(records: Sequence[SweepRecord]) -> list[AmplificationRow]:
    rows = []
    for rec in records:
        pooled: dict[int, list[float]] = {}
        for rep in rec.reports["-"]:
            for idx, count, svb, svh in rep.amp_bins:
                acc = pooled.setdefault(int(idx), [0, 0.0, 0.0])
                acc[0] += int(count)
                acc[1] += svb
                acc[2] += svh
        bins = []
        for idx in sorted(pooled):
            c, svb, svh = pooled[idx]
            vb, vh = svb / c, svh / c
            bins.append((idx, c, vb, vh, math.log(vh) / math.log(vb)))
        rows.append(AmplificationRow(rec.point["gamma"], rec.point["phi"], rec.summary("eta"), bins))
    return rows


def amplification_experiment(spec: SweepSpec, base: SimParams, workers: int = 1) -> list[AmplificationRow]:
    return amplification_rows(run_sweep(spec, base, workers))


def alpha_mu_tau_map(spec: SweepSpec, base: SimParams, workers: int = 1) -> dict[tuple[float, int], tuple[float, float]]:
    return {(r.point["mu"], r.point["alpha"]): r.summary("tau") for r in run_sweep(spec, base, workers)}


# Output tables.

def run_rows(records: Sequence[SweepRecord], spec: SweepSpec, base: SimParams) -> list[list]:
    if spec.kind is ExperimentKind.ALPHA_MU_TAU:
        base = alpha_mu_base(base)
    rows = []
    for rec in records:
        for wiring, reps in sorted(rec.reports.items()):
            params = apply_point(base, rec.point, None if wiring == "-" else wiring)
            for r, rep in enumerate(reps):
                rows.append(report_row(params, run_seed_id(derive_seed(spec.base_seed, rec.index, r)), rep))
    return rows


def report_row(params: SimParams, seed: int, rep: MetricsReport) -> list:
    return [params.net.gamma, params.phi, params.mu, params.alpha, params.net.wiring.value, seed,
            rep.Q, rep.D, rep.tau, rep.gini_hub, rep.eta, rep.n_memes, int(rep.converged)]


def experiment_tables(spec: SweepSpec, base: SimParams, records: Sequence[SweepRecord]) -> dict[str, tuple[list, list]]:
    """Table name -> (header, rows) for one experiment kind, plus the run-level table."""
    tables: dict[str, tuple[list, list]] = {"runs.csv": (RUN_COLUMNS, run_rows(records, spec, base))}
    k = spec.kind
    if k is ExperimentKind.PHASE_MAP:
        header = ["gamma", "phi", "metric", "mean", "ci_half_width", "n", "nonconverged"]
        rows = [
            [r.point["gamma"], r.point["phi"], m, *r.summary(m), len(r.values(m)), r.n_nonconverged()]
            for r in records
            for m in ("Q", "D", "tau")
        ]
        tables["phase_map.csv"] = (header, rows)
        phis = sorted({r.point["phi"] for r in records})
        cuts = {phis[0], phis[len(phis) // 2], phis[-1]} if phis else set()
        tables["phase_map_cuts.csv"] = (header, [row for row in rows if row[1] in cuts])
    elif k is ExperimentKind.TARGETING:
        header = ["mu", "gamma", "q_rand", "q_rand_ci", "q_pref", "q_pref_ci", "ratio", "ratio_ci",
                  "gini_rand", "gini_rand_ci", "gini_pref", "gini_pref_ci"]
        rows = [[t.mu, t.gamma, *t.q_rand, *t.q_pref, *t.ratio, *t.gini_rand, *t.gini_pref]
                for t in targeting_rows(records)]
        tables["targeting.csv"] = (header, rows)
    elif k is ExperimentKind.POPULARITY:
        prow = popularity_rows(records)
        tables["popularity_summary.csv"] = (
            ["gamma", "phi", "ks", "ks_ci", "top_decile_low", "top_decile_low_ci", "top_decile_high",
             "top_decile_high_ci", "low_wins", "n", "sign_test_p"],
            [[p.gamma, p.phi, *p.ks, *p.top_low, *p.top_high, p.low_wins, p.n, p.sign_p] for p in prow],
        )
        rows = []
        for p in prow:
            for label, ccdf in (("q=0", p.ccdf_low), ("q>0", p.ccdf_high)):
                rows.extend([p.gamma, p.phi, label, int(POPULARITY_EDGES[i]), float(c)] for i, c in enumerate(ccdf))
        tables["popularity.csv"] = (["gamma", "phi", "quality", "popularity_at_least", "ccdf"], rows)
    elif k is ExperimentKind.AMPLIFICATION:
        arow = amplification_rows(records)
        tables["amplification_summary.csv"] = (
            ["gamma", "phi", "eta_hat", "eta_hat_ci", "n"],
            [[a.gamma, a.phi, *a.eta_hat, len(rec.reports["-"])] for a, rec in zip(arow, records)],
        )
        tables["amplification.csv"] = (
            ["gamma", "phi", "bin", "count", "mean_bot_posts", "mean_human_posts", "eta"],
            [[a.gamma, a.phi, *b] for a in arow for b in a.bins],
        )
    elif k is ExperimentKind.ALPHA_MU_TAU:
        tables["alpha_mu_tau.csv"] = (
            ["mu", "alpha", "tau", "tau_ci", "n", "nonconverged"],
            [[r.point["mu"], r.point["alpha"], *r.summary("tau"), len(r.values("tau")), r.n_nonconverged()]
             for r in records],
        )
    return tables


# Persisted sweeps with resume.

MANIFEST = "manifest.json"


def _dump(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True, allow_nan=True) + "\n"


def _config_block(spec: SweepSpec, base: SimParams) -> dict:
    return {"sweep": spec.to_dict(), "params": _params_dict(base), "ci_method": CI_METHOD, "ci_level": CI_LEVEL}


def run_persisted_sweep(
    spec: SweepSpec,
    base: SimParams,
    out_dir: str | Path,
    workers: int = 1,
    resume: bool = False,
    on_point: Callable[[SweepRecord], None] | None = None,
) -> dict[str, Path]:
    """Run a sweep into ``out_dir``, checkpointing each grid point in the manifest.

    With ``resume`` set, grid points recorded in an existing manifest are
    skipped; a manifest from a different configuration is an error.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest_path = out / MANIFEST
    config = _config_block(spec, base)
    completed: dict[int, SweepRecord] = {}
    if resume and manifest_path.exists():
        old = json.loads(manifest_path.read_text(encoding="utf-8"))
        if old.get("config") != json.loads(_dump(config)):
            raise ManifestMismatch(f"{manifest_path} was written for a different configuration")
        completed = {int(k): SweepRecord.from_dict(v) for k, v in old.get("completed", {}).items()}

    points = grid_points(spec)
    seeds = [
        {"grid_index": i, "replicate": r, "seed": run_seed_id(derive_seed(spec.base_seed, i, r))}
        for i in range(len(points))
        for r in range(spec.replicates)
    ]

    def checkpoint(record: SweepRecord) -> None:
        completed[record.index] = record
        doc = {"config": config, "seeds": seeds, "status": "partial",
               "completed": {str(i): completed[i].to_dict() for i in sorted(completed)}}
        atomic_write_text(manifest_path, _dump(doc))
        if on_point is not None:
            on_point(record)

    records = run_sweep(spec, base, workers, completed, checkpoint)
    written: dict[str, Path] = {}
    for name, (header, rows) in experiment_tables(spec, base, records).items():
        written[name] = write_csv(out / name, header, rows)
    hashes = {name: hashlib.sha256(p.read_bytes()).hexdigest() for name, p in sorted(written.items())}
    doc = {"config": config, "seeds": seeds, "status": "complete", "artifacts": hashes,
           "completed": {str(r.index): r.to_dict() for r in records}}
    atomic_write_text(manifest_path, _dump(doc))
    written[MANIFEST] = manifest_path
    return written


__all__ = [
    "ExperimentKind", "SweepSpec", "SweepRecord", "derive_seed", "run_replicates", "confidence_interval",
    "phase_map_sweep", "targeting_experiment", "popularity_experiment", "amplification_experiment",
    "alpha_mu_tau_map", "run_persisted_sweep",
]
