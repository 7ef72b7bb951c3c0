"""Interaction-aware multi-modal prediction of surrounding vehicles.

Vehicles are predicted sequentially down a dynamic priority list.  Each SV
gets one prediction per admissible maneuver: reference speed and lane
inferred under collision-avoidance constraints against all higher-priority
vehicles, a nominal rollout under the mean gains, and a mode probability
fusing per-maneuver Kalman innovation likelihoods with maneuver costs.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field

import numpy as np

from . import primitives as pr
from .world import (
    LaneGeometry,
    ManeuverId,
    PlannerParams,
    SvState,
    VehicleShape,
    lane_of,
)

LOG_2PI = math.log(2.0 * math.pi)


def build_priority_list(sv_states: dict[str, SvState], geometry: LaneGeometry,
                        N: int, T: float) -> list[str]:
    """Descending-priority ordering of the SVs (ego excluded by construction).

    Same-lane pairs: leader first.  Different-lane pairs: larger constant-
    velocity terminal position x + v_x*N*T first.  Vehicle id breaks exact
    ties to keep the order deterministic.
    """
    horizon = N * T
    lanes = {c: lane_of(s.y, geometry) for c, s in sv_states.items()}

    def compare(a: str, b: str) -> int:
        sa, sb = sv_states[a], sv_states[b]
        if lanes[a] == lanes[b]:
            ka, kb = sa.x, sb.x
        else:
            ka, kb = sa.x + sa.v_x * horizon, sb.x + sb.v_x * horizon
        if ka != kb:
            return -1 if ka > kb else 1
        if sa.x != sb.x:
            return -1 if sa.x > sb.x else 1
        return -1 if a < b else (1 if a > b else 0)

    return sorted(sv_states, key=functools.cmp_to_key(compare))


@dataclass(frozen=True)
class ManeuverPrediction:
    sv_id: str
    maneuver: ManeuverId
    probability: float
    v_ref: float
    y_ref: float
    states: np.ndarray = field(repr=False)  # (N, 6) rollout at t = k+1..k+N
    state0: SvState | None = None  # observed state at step k the rollout started from
    infeasible: bool = False

    @property
    def x_nom(self) -> np.ndarray:
        return self.states[:, 0]

    @property
    def y_nom(self) -> np.ndarray:
        return self.states[:, 3]


def _feedback_matrices(k_lon, k_lat, T: float) -> tuple[np.ndarray, np.ndarray]:
    """Closed-loop transition matrix and reference input map for Eq.-style model."""
    A, B = pr.full_matrices(T)
    K = np.zeros((2, 6))
    K[0, 1], K[0, 2] = k_lon[0], k_lon[1]
    K[1, 3], K[1, 4], K[1, 5] = k_lat[0], k_lat[1], k_lat[2]
    Acl = A - B @ K
    # closed loop input offset is B @ [k_lon[0]*v_ref, k_lat[0]*y_ref]
    ref_map = B @ np.diag([k_lon[0], k_lat[0]])
    return Acl, ref_map


def _rollout(state: SvState, k_lon, k_lat, v_ref: float, y_ref: float,
             T: float, N: int) -> np.ndarray:
    Acl, ref_map = _feedback_matrices(k_lon, k_lat, T)
    offset = ref_map @ np.array([v_ref, y_ref])
    x = np.asarray(state.as_vector(), dtype=float)
    out = np.empty((N, 6))
    for t in range(N):
        x = Acl @ x + offset
        out[t] = x
    return out


def infer_references(state: SvState, maneuver: ManeuverId,
                     higher_rollouts: list[tuple[float, np.ndarray]],
                     geometry: LaneGeometry, shape: VehicleShape,
                     params: PlannerParams, T: float, N: int,
                     k_lon, k_lat) -> tuple[float, float, bool]:
    """Reference lane center and constrained reference speed for one maneuver.

    The speed is the 1-D affine-constrained least-squares optimum: stay as
    close as possible to the target lane's nominal speed subject to keeping a
    time-headway gap behind every laterally-close higher-priority rollout.
    Lateral closeness gates on the maneuver's intended lane position: gating
    on the transient rollout would let the current lane's headway cap leak
    into every lane-change alternative for the seconds the slow lateral
    feedback needs to clear the lane, and the transient itself is protected
    by the planner's hard safety constraint downstream.
    `higher_rollouts` pairs each higher-priority vehicle's current x with its
    most-probable (N, 6) rollout.  Returns (v_ref, y_ref, infeasible).
    """
    y_ref = geometry.center(maneuver.target_lane)
    v_nom = geometry.nominal_speed(maneuver.target_lane)

    # superposition: x_t(v_ref) = base_t + sens_t * v_ref; y_t independent of v_ref
    roll0 = _rollout(state, k_lon, k_lat, 0.0, y_ref, T, N)
    roll1 = _rollout(state, k_lon, k_lat, 1.0, y_ref, T, N)
    base = roll0[:, 0]
    sens = roll1[:, 0] - roll0[:, 0]

    bound = math.inf
    for x_now, other in higher_rollouts:
        if x_now < state.x:  # the headway constraint only applies to leaders
            continue
        close = np.abs(y_ref - other[:, 3]) <= shape.width
        if not np.any(close):
            continue
        num = other[close, 0] - base[close] - shape.length
        den = sens[close] + params.tau_h_targets
        bound = min(bound, float(np.min(num / den)))

    infeasible = bound < 0.0
    v_ref = max(0.0, min(v_nom, bound))
    return v_ref, y_ref, infeasible


def maneuver_cost(state: SvState, rollout: np.ndarray, v_ref: float, y_ref: float,
                  params: PlannerParams) -> float:
    """Acceleration-effort plus reference-deviation cost of one maneuver."""
    ax = np.concatenate(([state.a_x], rollout[:, 2]))
    ay = np.concatenate(([state.a_y], rollout[:, 5]))
    return float(params.w_x * np.sum(ax ** 2) + params.w_y * np.sum(ay ** 2)
                 + params.w_v * (state.v_x - v_ref) ** 2
                 + params.w_l * (state.y - y_ref) ** 2)


def fuse_probabilities(log_likelihoods: dict[ManeuverId, float | None],
                       costs: dict[ManeuverId, float], varsigma: float
                       ) -> dict[ManeuverId, float]:
    """Normalized likelihood x inverse-root-cost fusion with a cost-only fallback."""
    maneuvers = list(costs)
    inv_root = np.array([1.0 / math.sqrt(costs[m] + varsigma) for m in maneuvers])
    logs = [log_likelihoods.get(m) for m in maneuvers]
    usable = [v for v in logs if v is not None and math.isfinite(v)]
    if usable:
        top = max(usable)
        lik = np.array([math.exp(v - top) if v is not None and math.isfinite(v) else 0.0
                        for v in logs])
        weights = lik * inv_root
        if weights.sum() <= 0.0:
            weights = inv_root
    else:
        weights = inv_root
    weights = weights / weights.sum()
    return dict(zip(maneuvers, weights.tolist()))


class ModeFilterBank:
    """Per-(vehicle, maneuver) linear Kalman filters on the primitive model.

    Measured signals are longitudinal position, longitudinal speed, and
    lateral position.  Filters are created lazily and dropped when a vehicle's
    admissible maneuver set changes.
    """

    H = np.zeros((3, 6))
    H[0, 0] = H[1, 1] = H[2, 3] = 1.0

    def __init__(self, params: PlannerParams):
        self.params = params
        self.q_proc = np.eye(6) * params.process_std ** 2
        self.r_meas = np.diag(np.asarray(params.meas_std, dtype=float) ** 2)
        self.p0 = np.diag([0.5, 0.3, 0.3, 0.3, 0.2, 0.2]) ** 2
        self._filters: dict[tuple[str, ManeuverId], list] = {}  # [x_hat, P, n_updates]

    def sync(self, sv_id: str, admissible: tuple[ManeuverId, ...], state: SvState) -> None:
        for key in [k for k in self._filters if k[0] == sv_id and k[1] not in admissible]:
            del self._filters[key]
        for m in admissible:
            if (sv_id, m) not in self._filters:
                self._filters[(sv_id, m)] = [np.asarray(state.as_vector(), dtype=float),
                                             self.p0.copy(), 0]

    def step(self, sv_id: str, maneuver: ManeuverId, state: SvState,
             v_ref: float, y_ref: float, k_lon, k_lat, T: float) -> float | None:
        """Predict + update the mode filter; returns the innovation log-likelihood.

        Returns None on the very first step of a filter (no prior to predict
        from), in which case the caller falls back to cost-only weighting.
        """
        entry = self._filters[(sv_id, maneuver)]
        x_hat, P, n_updates = entry
        Acl, ref_map = _feedback_matrices(k_lon, k_lat, T)
        offset = ref_map @ np.array([v_ref, y_ref])
        x_pred = Acl @ x_hat + offset
        p_pred = Acl @ P @ Acl.T + self.q_proc
        z = np.array([state.x, state.v_x, state.y])
        innovation = z - self.H @ x_pred
        S = self.H @ p_pred @ self.H.T + self.r_meas
        S_inv = np.linalg.inv(S)
        gain = p_pred @ self.H.T @ S_inv
        entry[0] = x_pred + gain @ innovation
        p_new = (np.eye(6) - gain @ self.H) @ p_pred
        entry[1] = 0.5 * (p_new + p_new.T)
        entry[2] = n_updates + 1
        if n_updates == 0:
            return None
        sign, logdet = np.linalg.slogdet(S)
        if sign <= 0:
            return None
        return float(-0.5 * (innovation @ S_inv @ innovation + logdet + 3 * LOG_2PI))

    def covariance(self, sv_id: str, maneuver: ManeuverId) -> np.ndarray:
        return self._filters[(sv_id, maneuver)][1]


class Predictor:
    """Sequential interaction-aware predictor over the priority list."""

    def __init__(self, gain_sets: dict[ManeuverId, pr.GainSet], geometry: LaneGeometry,
                 shape: VehicleShape, params: PlannerParams, N: int, T: float):
        self.gain_sets = gain_sets
        self.geometry = geometry
        self.shape = shape
        self.params = params
        self.N = N
        self.T = T
        self.filters = ModeFilterBank(params)

    def predict(self, sv_states: dict[str, SvState]) -> dict[str, list[ManeuverPrediction]]:
        """Predictions for every SV, most-probable-first interaction ordering."""
        order = build_priority_list(sv_states, self.geometry, self.N, self.T)
        higher: list[tuple[float, np.ndarray]] = []
        out: dict[str, list[ManeuverPrediction]] = {}
        for sv_id in order:
            state = sv_states[sv_id]
            lane = lane_of(state.y, self.geometry)
            admissible = ManeuverId.admissible(lane)
            self.filters.sync(sv_id, admissible, state)
            rollouts: dict[ManeuverId, np.ndarray] = {}
            refs: dict[ManeuverId, tuple[float, float, bool]] = {}
            logliks: dict[ManeuverId, float | None] = {}
            costs: dict[ManeuverId, float] = {}
            for m in admissible:
                gs = self.gain_sets[m]
                k_lon, k_lat = gs.k_lon_mean, gs.k_lat_mean
                v_ref, y_ref, infeasible = infer_references(
                    state, m, higher, self.geometry, self.shape,
                    self.params, self.T, self.N, k_lon, k_lat)
                refs[m] = (v_ref, y_ref, infeasible)
                rollouts[m] = _rollout(state, k_lon, k_lat, v_ref, y_ref, self.T, self.N)
                logliks[m] = self.filters.step(sv_id, m, state, v_ref, y_ref,
                                               k_lon, k_lat, self.T)
                costs[m] = maneuver_cost(state, rollouts[m], v_ref, y_ref, self.params)
            probs = fuse_probabilities(logliks, costs, self.params.varsigma)
            preds = [ManeuverPrediction(sv_id=sv_id, maneuver=m, probability=probs[m],
                                        v_ref=refs[m][0], y_ref=refs[m][1],
                                        states=rollouts[m], state0=state,
                                        infeasible=refs[m][2])
                     for m in admissible]
            out[sv_id] = preds
            best = max(preds, key=lambda p: p.probability)
            higher.append((state.x, best.states))
        return out


def most_probable(predictions: list[ManeuverPrediction]) -> ManeuverPrediction:
    return max(predictions, key=lambda p: p.probability)


def predictions_to_jsonable(predictions: dict[str, list[ManeuverPrediction]]) -> dict:
    """JSON-ready dump of one prediction step (see README for the schema)."""
    return {
        sv_id: [
            {
                "maneuver": p.maneuver.value,
                "probability": p.probability,
                "v_ref": p.v_ref,
                "y_ref": p.y_ref,
                "infeasible": p.infeasible,
                "x_nom": [float(v) for v in p.x_nom],
                "y_nom": [float(v) for v in p.y_nom],
            }
            for p in preds
        ]
        for sv_id, preds in predictions.items()
    }
