"""Road geometry, vehicle states, maneuver ids, and scenario configuration.

Ground frame: x runs along the road in the direction of travel, y is lateral
with y = 0 at the right road edge.  Lane i (1-based) spans
y in [(i-1)*w_lane, i*w_lane] with its center line at (i-0.5)*w_lane.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace

import yaml

KMH = 1.0 / 3.6  # km/h -> m/s

LANE_COUNT = 3


class ScenarioError(ValueError):
    """Raised when a scenario file fails parsing or invariant validation."""


@dataclass(frozen=True)
class LaneGeometry:
    """Three-lane road with a per-lane nominal speed."""

    lane_width: float = 3.75
    nominal_speeds: tuple[float, float, float] = (65.0 * KMH, 90.0 * KMH, 90.0 * KMH)

    def __post_init__(self):
        if self.lane_width <= 0:
            raise ScenarioError("lane_width must be > 0")
        if len(self.nominal_speeds) != LANE_COUNT or any(v <= 0 for v in self.nominal_speeds):
            raise ScenarioError("nominal_speeds must be %d positive values" % LANE_COUNT)

    @property
    def road_width(self) -> float:
        return LANE_COUNT * self.lane_width

    def center(self, lane: int) -> float:
        """Center-line lateral position of a 1-based lane index."""
        if not 1 <= lane <= LANE_COUNT:
            raise ScenarioError(f"lane index {lane} outside 1..{LANE_COUNT}")
        return (lane - 0.5) * self.lane_width

    def nominal_speed(self, lane: int) -> float:
        if not 1 <= lane <= LANE_COUNT:
            raise ScenarioError(f"lane index {lane} outside 1..{LANE_COUNT}")
        return self.nominal_speeds[lane - 1]


@dataclass(frozen=True)
class SvState:
    """Planar double-integrator-with-acceleration state of one vehicle."""

    x: float
    v_x: float
    a_x: float
    y: float
    v_y: float
    a_y: float

    def as_vector(self):
        return [self.x, self.v_x, self.a_x, self.y, self.v_y, self.a_y]

    @staticmethod
    def from_vector(vec) -> "SvState":
        return SvState(*(float(v) for v in vec))


class ManeuverId(enum.Enum):
    """Lane-dependent motion primitives for surrounding vehicles.

    m0/m3/m6 keep lanes 1/2/3; the others change to an adjacent lane.
    """

    M0 = "m0"  # keep lane 1
    M1 = "m1"  # lane 1 -> lane 2
    M2 = "m2"  # lane 2 -> lane 1
    M3 = "m3"  # keep lane 2
    M4 = "m4"  # lane 2 -> lane 3
    M5 = "m5"  # lane 3 -> lane 2
    M6 = "m6"  # keep lane 3

    @property
    def source_lane(self) -> int:
        return _MANEUVER_LANES[self][0]

    @property
    def target_lane(self) -> int:
        return _MANEUVER_LANES[self][1]

    @property
    def is_lane_keep(self) -> bool:
        return self.source_lane == self.target_lane

    @staticmethod
    def admissible(lane: int) -> tuple["ManeuverId", ...]:
        """Maneuvers available to an SV currently in `lane`."""
        return _ADMISSIBLE[lane]

    @staticmethod
    def lane_change_to(source: int, target: int) -> "ManeuverId":
        for m in ManeuverId.admissible(source):
            if m.target_lane == target:
                return m
        raise ScenarioError(f"no maneuver from lane {source} to lane {target}")


_MANEUVER_LANES = {
    ManeuverId.M0: (1, 1),
    ManeuverId.M1: (1, 2),
    ManeuverId.M2: (2, 1),
    ManeuverId.M3: (2, 2),
    ManeuverId.M4: (2, 3),
    ManeuverId.M5: (3, 2),
    ManeuverId.M6: (3, 3),
}

_ADMISSIBLE = {
    1: (ManeuverId.M0, ManeuverId.M1),
    2: (ManeuverId.M2, ManeuverId.M3, ManeuverId.M4),
    3: (ManeuverId.M5, ManeuverId.M6),
}


class EgoManeuver(enum.Enum):
    """Velocity-tracking maneuvers of the ego vehicle, one per lane."""

    VT1 = 1
    VT2 = 2
    VT3 = 3

    @property
    def lane(self) -> int:
        return self.value


@dataclass(frozen=True)
class VehicleShape:
    """Common rectangular footprint of every vehicle."""

    length: float = 4.3
    width: float = 1.8

    def __post_init__(self):
        if self.length <= 0 or self.width <= 0:
            raise ScenarioError("vehicle shape dimensions must be > 0")


def lane_of(y: float, geometry: LaneGeometry, margin: float = 0.0) -> int:
    """Lane index of lateral position `y` via the ceiling rule with a margin.

    The margin variant is used for the ego vehicle; occupancy-edge tests use
    margin 0.  Raises if y is outside the road.
    """
    if not 0.0 <= y <= geometry.road_width:
        raise ScenarioError(f"lateral position {y} outside road [0, {geometry.road_width}]")
    lane = math.ceil((y - margin) / geometry.lane_width)
    return min(max(lane, 1), LANE_COUNT)


# ---------------------------------------------------------------------------
# Scenario configuration
# ---------------------------------------------------------------------------

ROLE_EV = "ev"
ROLE_SCRIPTED = "scripted"
ROLE_CLOSED_LOOP = "closed_loop"
_ROLES = (ROLE_EV, ROLE_SCRIPTED, ROLE_CLOSED_LOOP)


@dataclass(frozen=True)
class VehicleSpec:
    vehicle_id: str
    role: str
    state: SvState
    resample_gains: bool = False  # draw fresh primitive gains every sim step


@dataclass(frozen=True)
class BrakeEvent:
    """Piecewise-constant longitudinal acceleration override from start_step on."""

    vehicle_id: str
    start_step: int
    accel: float
    end_step: int | None = None


@dataclass(frozen=True)
class LaneChangeEvent:
    """Feedback-model lane change, fired at a fixed step or on a headway trigger."""

    vehicle_id: str
    target_lane: int
    at_step: int | None = None
    headway_lt: float | None = None  # trigger when time headway to leader < this


@dataclass(frozen=True)
class PlannerParams:
    """Planner selection plus every tuning knob of the decision stack."""

    kind: str = "isa"  # isa | scmpc | deterministic
    eps: float = 0.2
    k_sc: int = 10
    k_sam: int = 30
    # time headways: reference-target inference vs the OCP safety constraint
    tau_h_targets: float = 1.5
    tau_h_ocp: float = 2.0
    # maneuver-cost weights
    w_x: float = 0.1
    w_y: float = 0.3
    w_v: float = 0.1
    w_l: float = 0.5
    varsigma: float = 1e-4
    # OCP cost weights
    q1: float = 0.5
    q2: float = 0.1
    q3: float = 0.5
    q4: float = 0.1
    q5_y: float = 0.05
    q5_v: float = 1.0
    q6: float = 0.055
    # state bounds
    delta_max: float = 0.8
    a_max: float = 6.0
    # geometry thresholds of the direct-vehicle extraction
    zeta_ev: float = 0.5
    lambda_phi: float = 0.015
    lambda_y: float = 1.8
    # ego body
    l_f: float = 1.477
    l_r: float = 1.446
    k_lon_ev: tuple[float, float] = (0.1029, 0.3423)
    k_lat_ev: tuple[float, float, float] = (0.0984, 0.4656, 0.5417)
    # occupancy discretization
    grid_dx: float = 0.1
    grid_dy: float = 0.05
    sigma_floor: float = 0.05
    max_iterations: int = 100
    # mode-filter noise levels (per-state process std; x, v_x, y measurement stds)
    process_std: float = 0.1
    meas_std: tuple[float, float, float] = (0.2, 0.2, 0.1)

    def validated(self) -> "PlannerParams":
        if self.kind not in ("isa", "scmpc", "deterministic"):
            raise ScenarioError(f"unknown planner kind {self.kind!r}")
        if not 0.0 < self.eps <= 1.0:
            raise ScenarioError("planner eps must lie in (0, 1]")
        if self.k_sam < 2:
            raise ScenarioError("k_sam must be >= 2")
        if self.k_sc < 1:
            raise ScenarioError("k_sc must be >= 1")
        if self.tau_h_targets <= 0 or self.tau_h_ocp <= 0:
            raise ScenarioError("time headways must be > 0")
        return self


@dataclass(frozen=True)
class ScenarioConfig:
    geometry: LaneGeometry
    vehicles: tuple[VehicleSpec, ...]
    events: tuple[object, ...]
    horizon: int  # N, prediction steps
    interval: float  # T, seconds
    steps: int  # closed-loop simulation length
    seed: int
    planner: PlannerParams
    shape: VehicleShape = field(default_factory=VehicleShape)
    med_vehicle: str | None = None  # SV whose distance statistic is reported

    @property
    def ev(self) -> VehicleSpec:
        return next(v for v in self.vehicles if v.role == ROLE_EV)

    @property
    def svs(self) -> tuple[VehicleSpec, ...]:
        return tuple(v for v in self.vehicles if v.role != ROLE_EV)

    def validate(self) -> "ScenarioConfig":
        if self.horizon < 1:
            raise ScenarioError("horizon N must be >= 1")
        if self.interval <= 0:
            raise ScenarioError("interval T must be > 0")
        if self.steps < 1:
            raise ScenarioError("steps must be >= 1")
        ev_count = sum(1 for v in self.vehicles if v.role == ROLE_EV)
        if ev_count != 1:
            raise ScenarioError(f"exactly one EV required, found {ev_count}")
        ids = [v.vehicle_id for v in self.vehicles]
        if len(set(ids)) != len(ids):
            raise ScenarioError("vehicle ids must be unique")
        for v in self.vehicles:
            if v.role not in _ROLES:
                raise ScenarioError(f"unknown role {v.role!r} for {v.vehicle_id}")
            vec = v.state.as_vector()
            if any(not math.isfinite(s) for s in vec):
                raise ScenarioError(f"non-finite initial state for {v.vehicle_id}")
            if v.state.v_x < 0:
                raise ScenarioError(f"negative initial speed for {v.vehicle_id}")
            lane_of(v.state.y, self.geometry)  # road-extent check
        known = set(ids)
        for ev in self.events:
            if ev.vehicle_id not in known:
                raise ScenarioError(f"event references unknown vehicle {ev.vehicle_id!r}")
            if isinstance(ev, LaneChangeEvent):
                if not 1 <= ev.target_lane <= LANE_COUNT:
                    raise ScenarioError(f"lane-change target lane {ev.target_lane} invalid")
                if ev.at_step is None and ev.headway_lt is None:
                    raise ScenarioError("lane-change event needs at_step or headway_lt")
        if self.med_vehicle is not None and self.med_vehicle not in known:
            raise ScenarioError(f"med vehicle {self.med_vehicle!r} not in scenario")
        self.planner.validated()
        return self


def _vehicle_from_mapping(item: dict, geometry: LaneGeometry) -> VehicleSpec:
    try:
        vid = str(item["id"])
        role = str(item.get("role", ROLE_CLOSED_LOOP))
        x = float(item["x"])
        if "v_kmh" in item:
            v = float(item["v_kmh"]) * KMH
        else:
            v = float(item["v"])
        if "y" in item:
            y = float(item["y"])
        else:
            y = geometry.center(int(item["lane"]))
    except KeyError as exc:
        raise ScenarioError(f"vehicle entry missing key {exc}") from exc
    state = SvState(x=x, v_x=v, a_x=float(item.get("a_x", 0.0)),
                    y=y, v_y=float(item.get("v_y", 0.0)), a_y=float(item.get("a_y", 0.0)))
    return VehicleSpec(vehicle_id=vid, role=role, state=state,
                       resample_gains=bool(item.get("resample_gains", False)))


def _event_from_mapping(item: dict):
    kind = item.get("type")
    if kind == "brake":
        return BrakeEvent(vehicle_id=str(item["vehicle"]), start_step=int(item["start_step"]),
                          accel=float(item["accel"]),
                          end_step=int(item["end_step"]) if "end_step" in item else None)
    if kind == "lane_change":
        return LaneChangeEvent(vehicle_id=str(item["vehicle"]), target_lane=int(item["target_lane"]),
                               at_step=int(item["at_step"]) if "at_step" in item else None,
                               headway_lt=float(item["headway_lt"]) if "headway_lt" in item else None)
    raise ScenarioError(f"unknown event type {kind!r}")


def scenario_from_mapping(doc: dict) -> ScenarioConfig:
    """Build and validate a ScenarioConfig from a parsed mapping."""
    if not isinstance(doc, dict):
        raise ScenarioError("scenario document must be a mapping")
    lanes = doc.get("lanes", {})
    speeds = lanes.get("nominal_speeds_kmh")
    if speeds is not None:
        nominal = tuple(float(s) * KMH for s in speeds)
    else:
        nominal = tuple(float(s) for s in lanes.get("nominal_speeds", LaneGeometry().nominal_speeds))
    geometry = LaneGeometry(lane_width=float(lanes.get("width", 3.75)), nominal_speeds=nominal)

    try:
        vehicles = tuple(_vehicle_from_mapping(v, geometry) for v in doc["vehicles"])
    except KeyError:
        raise ScenarioError("scenario needs a 'vehicles' list") from None
    events = tuple(_event_from_mapping(e) for e in doc.get("events", []))

    planner_doc = dict(doc.get("planner", {}))
    known_fields = PlannerParams.__dataclass_fields__
    unknown = set(planner_doc) - set(known_fields)
    if unknown:
        raise ScenarioError(f"unknown planner keys: {sorted(unknown)}")
    for key in ("k_lon_ev", "k_lat_ev", "meas_std"):
        if key in planner_doc:
            planner_doc[key] = tuple(float(v) for v in planner_doc[key])
    planner = PlannerParams(**planner_doc)

    shape_doc = doc.get("shape", {})
    shape = VehicleShape(length=float(shape_doc.get("length", 4.3)),
                         width=float(shape_doc.get("width", 1.8)))

    cfg = ScenarioConfig(
        geometry=geometry,
        vehicles=vehicles,
        events=events,
        horizon=int(doc.get("horizon", 25)),
        interval=float(doc.get("interval", 0.32)),
        steps=int(doc.get("steps", 50)),
        seed=int(doc.get("seed", 0)),
        planner=planner,
        shape=shape,
        med_vehicle=str(doc["med_vehicle"]) if "med_vehicle" in doc else None,
    )
    return cfg.validate()


def load_scenario(path) -> ScenarioConfig:
    """Load and validate a YAML scenario file."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = yaml.safe_load(fh)
    except yaml.YAMLError as exc:
        raise ScenarioError(f"cannot parse {path}: {exc}") from exc
    except OSError as exc:
        raise ScenarioError(f"cannot read {path}: {exc}") from exc
    return scenario_from_mapping(doc)


def dump_scenario(cfg: ScenarioConfig) -> str:
    """Serialize a config back to YAML; load_scenario of the result is equal."""
    doc: dict = {
        "seed": cfg.seed,
        "horizon": cfg.horizon,
        "interval": cfg.interval,
        "steps": cfg.steps,
        "lanes": {
            "width": cfg.geometry.lane_width,
            "nominal_speeds": list(cfg.geometry.nominal_speeds),
        },
        "shape": {"length": cfg.shape.length, "width": cfg.shape.width},
        "planner": {k: (list(v) if isinstance(v, tuple) else v)
                    for k, v in cfg.planner.__dict__.items()},
        "vehicles": [
            {
                "id": v.vehicle_id, "role": v.role,
                "x": v.state.x, "v": v.state.v_x, "a_x": v.state.a_x,
                "y": v.state.y, "v_y": v.state.v_y, "a_y": v.state.a_y,
                **({"resample_gains": True} if v.resample_gains else {}),
            }
            for v in cfg.vehicles
        ],
    }
    events = []
    for ev in cfg.events:
        if isinstance(ev, BrakeEvent):
            entry = {"type": "brake", "vehicle": ev.vehicle_id,
                     "start_step": ev.start_step, "accel": ev.accel}
            if ev.end_step is not None:
                entry["end_step"] = ev.end_step
        else:
            entry = {"type": "lane_change", "vehicle": ev.vehicle_id,
                     "target_lane": ev.target_lane}
            if ev.at_step is not None:
                entry["at_step"] = ev.at_step
            if ev.headway_lt is not None:
                entry["headway_lt"] = ev.headway_lt
        events.append(entry)
    if events:
        doc["events"] = events
    if cfg.med_vehicle is not None:
        doc["med_vehicle"] = cfg.med_vehicle
    return yaml.safe_dump(doc, sort_keys=False)


def with_planner(cfg: ScenarioConfig, **kwargs) -> ScenarioConfig:
    """Copy of `cfg` with planner parameters overridden."""
    return replace(cfg, planner=replace(cfg.planner, **kwargs).validated())
