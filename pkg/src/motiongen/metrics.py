"""Motion-quality metrics.

Five quantities per rollout, all Euclidean-norm based and to be minimized:
object (marker) acceleration, instrument jerk, instrument energy, path
length, and episode length. Derivatives come from central finite
differences; boundary samples of a derivative series are excluded from
downstream means. Reports can be normalized elementwise against aggregated
demonstrator statistics, so values below 1.0 mean better than the
demonstrations.

Instrument metrics are computed on commanded positions, which isolates the
quality of the policy output from servo tracking dynamics. Object
acceleration uses marker positions sampled at the low (observation) rate
for both rollouts and demonstrations, so the two are comparable.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import envs
from .errors import ContractError

METRIC_FIELDS = (
    "object_acceleration",
    "instrument_jerk",
    "instrument_energy",
    "path_length",
    "episode_length",
)


@dataclass(frozen=True)
class MetricsReport:
    object_acceleration: float
    instrument_jerk: float
    instrument_energy: float
    path_length: float
    episode_length: float

    def as_dict(self) -> dict[str, float]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def finite_difference(series: np.ndarray, order: int, dt: float) -> np.ndarray:
    """Central differences of order 1, 2, or 3; interior points only."""
    series = np.asarray(series, dtype=float)
    if series.ndim == 1:
        series = series[:, None]
    if dt <= 0:
        raise ContractError(f"dt must be positive, got {dt}")
    n = series.shape[0]
    if order == 1:
        if n < 3:
            raise ContractError("need at least 3 samples for order-1 differences")
        return (series[2:] - series[:-2]) / (2.0 * dt)
    if order == 2:
        if n < 3:
            raise ContractError("need at least 3 samples for order-2 differences")
        return (series[2:] - 2.0 * series[1:-1] + series[:-2]) / dt**2
    if order == 3:
        if n < 5:
            raise ContractError("need at least 5 samples for order-3 differences")
        return (
            series[4:] - 2.0 * series[3:-1] + 2.0 * series[1:-3] - series[:-4]
        ) / (2.0 * dt**3)
    raise ContractError(f"order must be 1, 2, or 3, got {order}")


def _per_instrument_norms(derivatives: np.ndarray, dims_per_instrument: int) -> np.ndarray:
    """(T, k) derivative series -> (T, n_instruments) Euclidean norms."""
    t, k = derivatives.shape
    if k % dims_per_instrument != 0:
        raise ContractError(
            f"{k} action dims do not split into groups of {dims_per_instrument}"
        )
    grouped = derivatives.reshape(t, k // dims_per_instrument, dims_per_instrument)
    return np.linalg.norm(grouped, axis=2)


def _instrument_metrics(commands: np.ndarray, dt: float, dims_per_instrument: int):
    if commands.shape[0] < 5:
        return 0.0, 0.0, 0.0
    accel = _per_instrument_norms(
        finite_difference(commands, 2, dt), dims_per_instrument
    )
    jerk = _per_instrument_norms(finite_difference(commands, 3, dt), dims_per_instrument)
    steps = np.diff(commands, axis=0)
    path = _per_instrument_norms(steps, dims_per_instrument)
    energy = float(np.sum(np.mean(accel, axis=1)))
    return float(np.mean(jerk)), energy, float(np.mean(np.sum(path, axis=0)))


def _object_acceleration(markers: np.ndarray, dt: float, dims: int) -> float:
    if markers.shape[0] < 3:
        return 0.0
    accel = _per_instrument_norms(finite_difference(markers, 2, dt), dims)
    return float(np.mean(accel))


def motion_metrics(trace, dims_per_instrument: int = 2) -> MetricsReport:
    """Metrics for one rollout trace (see policy.RolloutTrace)."""
    if trace.commands.shape[0] == 0:
        raise ContractError("empty trace")
    jerk, energy, path = _instrument_metrics(
        trace.commands, trace.dt_high, dims_per_instrument
    )
    object_accel = _object_acceleration(trace.markers, trace.dt_low, dims_per_instrument)
    steps = trace.steps_to_success if trace.success else trace.max_steps
    return MetricsReport(
        object_acceleration=object_accel,
        instrument_jerk=jerk,
        instrument_energy=energy,
        path_length=path,
        episode_length=steps * trace.dt_low,
    )


def metrics_from_episode(episode: envs.Episode, dims_per_instrument: int = 2) -> MetricsReport:
    """Demonstrator reference metrics from a recorded episode.

    Instrument metrics use the action stream at the episode rate; markers
    are read from the observation layout of the episode's task.
    """
    jerk, energy, path = _instrument_metrics(
        episode.actions, episode.dt, dims_per_instrument
    )
    if episode.task == envs.LATTICE:
        markers = episode.observations[:, 4:8]
    else:
        markers = episode.observations[:, 0:2]
    object_accel = _object_acceleration(markers, episode.dt, dims_per_instrument)
    return MetricsReport(
        object_acceleration=object_accel,
        instrument_jerk=jerk,
        instrument_energy=energy,
        path_length=path,
        episode_length=episode.length * episode.dt,
    )


def mean_report(reports: list[MetricsReport]) -> MetricsReport:
    if not reports:
        raise ContractError("cannot aggregate an empty report list")
    return MetricsReport(
        **{
            name: float(np.mean([getattr(r, name) for r in reports]))
            for name in METRIC_FIELDS
        }
    )


def aggregate_reports(reports: list[MetricsReport]) -> dict[str, dict[str, float]]:
    """mean/min/max per metric, for error-bar style reporting."""
    if not reports:
        raise ContractError("cannot aggregate an empty report list")
    out: dict[str, dict[str, float]] = {}
    for name in METRIC_FIELDS:
        values = np.array([getattr(r, name) for r in reports])
        out[name] = {
            "mean": float(values.mean()),
            "min": float(values.min()),
            "max": float(values.max()),
        }
    return out


def normalize_report(
    report: MetricsReport, reference: MetricsReport
) -> tuple[MetricsReport, list[str]]:
    """Elementwise ratio to the reference. A zero reference entry is guarded:
    the absolute value is reported instead and the field name is flagged."""
    ratios = {}
    flagged = []
    for name in METRIC_FIELDS:
        ref = getattr(reference, name)
        val = getattr(report, name)
        if ref == 0.0:
            ratios[name] = abs(val)
            flagged.append(name)
        else:
            ratios[name] = val / ref
    return MetricsReport(**ratios), flagged


def write_metrics_csv(
    path: str | Path,
    reports: list[MetricsReport],
    normalized: list[MetricsReport] | None = None,
) -> None:
    """One row per rollout plus aggregate mean/min/max rows."""
    header = ["rollout"] + list(METRIC_FIELDS)
    if normalized is not None:
        header += [f"norm_{name}" for name in METRIC_FIELDS]
    rows = []
    for i, report in enumerate(reports):
        row = [str(i)] + [f"{getattr(report, n):.17g}" for n in METRIC_FIELDS]
        if normalized is not None:
            row += [f"{getattr(normalized[i], n):.17g}" for n in METRIC_FIELDS]
        rows.append(row)
    agg = aggregate_reports(reports)
    norm_agg = aggregate_reports(normalized) if normalized else None
    for stat in ("mean", "min", "max"):
        row = [stat] + [f"{agg[n][stat]:.17g}" for n in METRIC_FIELDS]
        if norm_agg is not None:
            row += [f"{norm_agg[n][stat]:.17g}" for n in METRIC_FIELDS]
        rows.append(row)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)
