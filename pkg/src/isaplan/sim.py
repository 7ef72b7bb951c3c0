"""Closed-loop simulation, scripted disturbances, and the experiment harness.

Surrounding vehicles advance on the linear feedback primitives toward their
lane references; scripted events override longitudinal acceleration or start
feedback lane changes (at a fixed step or on a time-headway trigger against
the nearest SV leader).  SV motion never depends on the ego vehicle, which is
what makes paired Monte Carlo streams byte-identical across planners.
"""

from __future__ import annotations

import csv
import json
import math
import time
import zlib
from dataclasses import dataclass, field, replace

import numpy as np

from . import planner as pl
from . import predictor as pd
from . import primitives as pr
from .world import (
    BrakeEvent,
    LaneChangeEvent,
    ManeuverId,
    PlannerParams,
    ScenarioConfig,
    SvState,
    lane_of,
)


@dataclass
class StepRecord:
    step: int
    ego: pl.EgoState
    sv_states: dict[str, SvState]
    plan: pl.PlanStep
    events: tuple[str, ...]
    timestamp: float


@dataclass
class SimTrace:
    config: ScenarioConfig
    records: list[StepRecord] = field(default_factory=list)

    @property
    def steps(self) -> int:
        return len(self.records)

    def ego_path(self) -> np.ndarray:
        return np.array([[r.ego.x, r.ego.y] for r in self.records])

    def sv_path(self, sv_id: str) -> np.ndarray:
        return np.array([[r.sv_states[sv_id].x, r.sv_states[sv_id].y]
                         for r in self.records])


@dataclass(frozen=True)
class MedStat:
    label: str
    d_min: tuple[float, ...]
    baseline: tuple[float, ...]

    @property
    def diffs(self) -> np.ndarray:
        return np.asarray(self.d_min) - np.asarray(self.baseline)

    @property
    def mean(self) -> float:
        return float(np.mean(self.diffs))

    @property
    def std(self) -> float:
        d = self.diffs
        return 0.0 if d.size == 1 else float(np.std(d, ddof=1))

    @property
    def min(self) -> float:
        return float(np.min(self.diffs))


class _SvBehavior:
    """Per-SV simulation state: active maneuver, references, overrides."""

    def __init__(self, spec, geometry):
        self.spec = spec
        lane = lane_of(spec.state.y, geometry)
        self.maneuver = next(m for m in ManeuverId.admissible(lane) if m.is_lane_keep)
        self.v_ref = geometry.nominal_speed(lane)
        self.y_ref = geometry.center(lane)
        self.brake: BrakeEvent | None = None
        self.lane_change_fired = False


def _fire_events(cfg: ScenarioConfig, behaviors: dict[str, _SvBehavior],
                 sv_states: dict[str, SvState], k: int) -> tuple[str, ...]:
    fired = []
    for ev in cfg.events:
        if isinstance(ev, BrakeEvent):
            beh = behaviors[ev.vehicle_id]
            active = ev.start_step <= k and (ev.end_step is None or k <= ev.end_step)
            was = beh.brake is not None
            beh.brake = ev if active else None
            if active and not was:
                fired.append(f"brake:{ev.vehicle_id}")
        else:
            beh = behaviors[ev.vehicle_id]
            if beh.lane_change_fired:
                continue
            trigger = False
            if ev.at_step is not None and k >= ev.at_step:
                trigger = True
            if ev.headway_lt is not None:
                me = sv_states[ev.vehicle_id]
                my_lane = lane_of(me.y, cfg.geometry)
                # leaders are SVs only: the trigger must not depend on the EV,
                # otherwise paired runs would diverge across planners
                gaps = [s.x - me.x for c, s in sv_states.items()
                        if c != ev.vehicle_id and s.x > me.x
                        and lane_of(s.y, cfg.geometry) == my_lane]
                if gaps and me.v_x > 1e-6 and min(gaps) / me.v_x < ev.headway_lt:
                    trigger = True
            if trigger:
                me = sv_states[ev.vehicle_id]
                source = lane_of(me.y, cfg.geometry)
                if source != ev.target_lane:
                    beh.maneuver = ManeuverId.lane_change_to(source, ev.target_lane)
                beh.v_ref = cfg.geometry.nominal_speed(ev.target_lane)
                beh.y_ref = cfg.geometry.center(ev.target_lane)
                beh.lane_change_fired = True
                fired.append(f"lane_change:{ev.vehicle_id}->{ev.target_lane}")
    return tuple(fired)


def _advance_sv(state: SvState, beh: _SvBehavior, gain_sets, T: float,
                sv_rng: np.random.Generator) -> SvState:
    gs = gain_sets[beh.maneuver]
    if beh.spec.resample_gains:
        k_lon = gs.lon_gains[int(sv_rng.integers(0, gs.lon_gains.shape[0]))]
        k_lat = gs.lat_gains[int(sv_rng.integers(0, gs.lat_gains.shape[0]))]
    else:
        k_lon, k_lat = gs.k_lon_mean, gs.k_lat_mean
    model = pr.PrimitiveModel(T=T, v_ref=beh.v_ref, y_ref=beh.y_ref,
                              k_lon=tuple(k_lon), k_lat=tuple(k_lat))
    nxt = pr.step_primitive(state, model)
    if beh.brake is not None:
        # constant-acceleration override of the longitudinal channel,
        # stopping exactly at v = 0
        a = beh.brake.accel
        v_new = state.v_x + a * T
        if v_new < 0.0 and a < 0.0:
            dt = state.v_x / (-a)
            x_new = state.x + state.v_x * dt + 0.5 * a * dt * dt
            v_new, a_eff = 0.0, 0.0
        else:
            x_new = state.x + state.v_x * T + 0.5 * a * T * T
            a_eff = a
        nxt = replace(nxt, x=x_new, v_x=v_new, a_x=a_eff)
    if nxt.v_x < 0.0:
        nxt = replace(nxt, v_x=0.0, a_x=max(nxt.a_x, 0.0))
    return nxt


def initial_ego_state(cfg: ScenarioConfig) -> pl.EgoState:
    s = cfg.ev.state
    # yaw, jerk, and steering start at zero (not specified by the scenarios)
    return pl.EgoState(x=s.x, y=s.y, phi=0.0, v=s.v_x, a=s.a_x,
                       eta=0.0, delta=0.0, omega=0.0)


def _planner_stream_key(params: PlannerParams) -> int:
    label = f"{params.kind}:{params.eps:.6f}:{params.k_sc}"
    return zlib.crc32(label.encode("ascii"))


def planner_label(params: PlannerParams) -> str:
    if params.kind == "isa":
        return f"isa(eps={params.eps:g})"
    if params.kind == "scmpc":
        return f"scmpc(k={params.k_sc})"
    return "deterministic"


def run_closed_loop(cfg: ScenarioConfig, gain_sets: dict,
                    sv_rng: np.random.Generator | None = None,
                    planner_rng: np.random.Generator | None = None) -> SimTrace:
    """Simulate the scenario to completion under its configured planner."""
    if sv_rng is None or planner_rng is None:
        root = np.random.SeedSequence(cfg.seed)
        sv_ss, planner_ss = root.spawn(2)
        sv_rng = sv_rng or np.random.default_rng(sv_ss)
        planner_rng = planner_rng or np.random.default_rng(planner_ss)

    planner = pl.Planner(gain_sets, cfg.geometry, cfg.shape, cfg.planner,
                         cfg.horizon, cfg.interval)
    ego = initial_ego_state(cfg)
    sv_states = {v.vehicle_id: v.state for v in cfg.svs}
    behaviors = {v.vehicle_id: _SvBehavior(v, cfg.geometry) for v in cfg.svs}
    trace = SimTrace(config=cfg)
    for k in range(cfg.steps):
        fired = _fire_events(cfg, behaviors, sv_states, k)
        for sv_id, beh in behaviors.items():
            if beh.brake is not None:
                s = sv_states[sv_id]
                if s.v_x > 0.0 and s.a_x != beh.brake.accel:
                    sv_states[sv_id] = replace(s, a_x=beh.brake.accel)
        step = planner.plan(ego, sv_states, planner_rng)
        trace.records.append(StepRecord(step=k, ego=ego,
                                        sv_states=dict(sv_states), plan=step,
                                        events=fired,
                                        timestamp=time.perf_counter()))
        sv_states = {sv_id: _advance_sv(sv_states[sv_id], behaviors[sv_id],
                                        gain_sets, cfg.interval, sv_rng)
                     for sv_id in sv_states}
        ego = pl.step_ego(ego, tuple(step.result.inputs[0]), cfg.interval, cfg.planner)
    return trace


def med(trace: SimTrace, sv_id: str) -> float:
    """Minimum center-to-center Euclidean distance between the EV and one SV."""
    best = math.inf
    for rec in trace.records:
        if sv_id not in rec.sv_states:
            raise KeyError(f"vehicle {sv_id!r} absent from the trace")
        s = rec.sv_states[sv_id]
        best = min(best, math.hypot(rec.ego.x - s.x, rec.ego.y - s.y))
    return best


def collision_free(trace: SimTrace) -> bool:
    """True when the EV footprint never overlaps any SV footprint."""
    shape = trace.config.shape
    for rec in trace.records:
        for s in rec.sv_states.values():
            if (abs(rec.ego.x - s.x) < shape.length
                    and abs(rec.ego.y - s.y) < shape.width):
                return False
    return True


def run_monte_carlo(cfg: ScenarioConfig, replicas: int,
                    planners: list[PlannerParams], gain_sets: dict,
                    med_sv: str | None = None) -> dict[str, MedStat]:
    """Paired-replica experiment: every planner sees identical SV randomness.

    The deterministic baseline must be among the planners; each other
    planner's statistic is the distribution of d_min(planner) - d_min(base).
    """
    if replicas < 1:
        raise ValueError("replicas must be >= 1")
    sv_id = med_sv or cfg.med_vehicle
    if sv_id is None:
        raise ValueError("no med vehicle configured")
    if not any(p.kind == "deterministic" for p in planners):
        raise ValueError("planner list needs the deterministic baseline")

    root = np.random.SeedSequence(cfg.seed)
    rep_entropy = [int(ss.generate_state(1)[0]) for ss in root.spawn(replicas)]
    d_min: dict[str, list[float]] = {planner_label(p): [] for p in planners}
    for r in range(replicas):
        for params in planners:
            run_cfg = replace(cfg, planner=params)
            sv_rng = np.random.default_rng(np.random.SeedSequence(rep_entropy[r]))
            planner_rng = np.random.default_rng(
                np.random.SeedSequence(entropy=rep_entropy[r],
                                       spawn_key=(_planner_stream_key(params),)))
            trace = run_closed_loop(run_cfg, gain_sets, sv_rng, planner_rng)
            d_min[planner_label(params)].append(med(trace, sv_id))
    base_label = planner_label(next(p for p in planners if p.kind == "deterministic"))
    baseline = tuple(d_min[base_label])
    return {label: MedStat(label=label, d_min=tuple(vals), baseline=baseline)
            for label, vals in d_min.items() if label != base_label}


# ---------------------------------------------------------------------------
# Timing report
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TimingReport:
    planning_mean: float
    planning_std: float
    ocp_mean: float
    ocp_std: float
    budget: float
    steps: int

    @property
    def within_budget(self) -> bool:
        return self.planning_mean <= self.budget

    def as_dict(self) -> dict:
        return {
            "steps": self.steps,
            "planning_time_mean_s": self.planning_mean,
            "planning_time_std_s": self.planning_std,
            "ocp_time_mean_s": self.ocp_mean,
            "ocp_time_std_s": self.ocp_std,
            "budget_s": self.budget,
            "within_budget": self.within_budget,
        }


def timing_report(trace: SimTrace) -> TimingReport:
    planning = np.array([r.plan.total_time for r in trace.records])
    ocp = np.array([r.plan.ocp_time for r in trace.records])
    return TimingReport(planning_mean=float(planning.mean()),
                        planning_std=float(planning.std(ddof=1)) if len(planning) > 1 else 0.0,
                        ocp_mean=float(ocp.mean()),
                        ocp_std=float(ocp.std(ddof=1)) if len(ocp) > 1 else 0.0,
                        budget=trace.config.interval,
                        steps=trace.steps)


# ---------------------------------------------------------------------------
# File outputs
# ---------------------------------------------------------------------------


def _fmt(v: float) -> str:
    return f"{v:.9g}"


def write_trace_csv(trace: SimTrace, path) -> None:
    """World trace: one row per (step, vehicle) in ground-frame coordinates."""
    params = trace.config.planner
    wheelbase = params.l_f + params.l_r
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "vehicle_id", "x", "y", "v_x", "v_y", "a_x", "a_y", "yaw"])
        for rec in trace.records:
            e = rec.ego
            w.writerow([rec.step, "EV", _fmt(e.x), _fmt(e.y),
                        _fmt(e.v * math.cos(e.phi)), _fmt(e.v * math.sin(e.phi)),
                        _fmt(e.a), _fmt(e.v ** 2 * e.delta / wheelbase), _fmt(e.phi)])
            for sv_id in sorted(rec.sv_states):
                s = rec.sv_states[sv_id]
                yaw = math.atan2(s.v_y, s.v_x) if s.v_x > 1e-9 else 0.0
                w.writerow([rec.step, sv_id, _fmt(s.x), _fmt(s.y), _fmt(s.v_x),
                            _fmt(s.v_y), _fmt(s.a_x), _fmt(s.a_y), _fmt(yaw)])


def write_diagnostics_csv(trace: SimTrace, path) -> None:
    """Per-step planner diagnostics.

    Wall times are intentionally not written: file outputs stay byte-identical
    across repeated seeded runs; use the timing report for durations.
    """
    n = trace.config.horizon
    header = (["step", "maneuver", "v_ref", "y_ref"]
              + [f"j_vt{i}" for i in (1, 2, 3)] + [f"p_vt{i}" for i in (1, 2, 3)]
              + ["solver_status", "iterations", "cost"]
              + [f"dv_{t:02d}" for t in range(1, n + 1)]
              + ["events"])
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for rec in trace.records:
            t = rec.plan.target
            row = [rec.step, t.maneuver.name, _fmt(t.v_ref), _fmt(t.y_ref)]
            row += [_fmt(t.costs[m]) for m in pl.EgoManeuver]
            row += [_fmt(t.probabilities[m]) for m in pl.EgoManeuver]
            row += [rec.plan.result.status, rec.plan.result.iterations,
                    _fmt(rec.plan.result.cost)]
            row += ["inf" if math.isinf(v) else _fmt(v) for v in rec.plan.dv]
            row += [";".join(rec.events)]
            w.writerow(row)


def write_rectangles_csv(occupancy: dict, path) -> None:
    from .occupancy import rects_to_rows

    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "vehicle_id", "center_x", "center_y", "length", "width"])
        for t, sv_id, ox, oy, length, width in rects_to_rows(occupancy):
            w.writerow([t, sv_id, _fmt(ox), _fmt(oy), _fmt(length), _fmt(width)])


def write_predictions_json(trace: SimTrace, path) -> None:
    doc = [{"step": rec.step,
            "predictions": pd.predictions_to_jsonable(rec.plan.predictions)}
           for rec in trace.records]
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)


def write_medstats_json(stats: dict[str, MedStat], path) -> None:
    doc = {
        label: {
            "d_min": list(st.d_min),
            "baseline_d_min": list(st.baseline),
            "diff_mean": st.mean,
            "diff_std": st.std,
            "diff_min": st.min,
        }
        for label, st in sorted(stats.items())
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
