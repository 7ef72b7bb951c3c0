"""Ego-side decision stack: moving targets, direct-vehicle extraction, and
the receding-horizon optimal control problem.

The ego model is an 8th-order kinematic chain driven by longitudinal snap and
steering angular acceleration, discretized with one RK4 step per sampling
interval.  Under RK4 the longitudinal chain (x, v, a, eta | s) and the
steering chain (delta, omega | alpha) stay exactly linear in the inputs; only
lateral position and yaw are nonlinear.  The OCP is therefore transcribed by
condensing: decision variables are the input sequences plus slacks, every
constraint is linear, and the single nonlinear cost term (terminal lateral
deviation) is handled by Gauss-Newton SQP iterations with convex QP
subproblems.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np
import cvxopt
import cvxopt.solvers

from . import occupancy as oc
from . import predictor as pd
from . import uncertainty as un
from .occupancy import OccupancyRect
from .world import EgoManeuver, LaneGeometry, PlannerParams, SvState, VehicleShape

cvxopt.solvers.options.update({
    "show_progress": False,
    "abstol": 1e-10,
    "reltol": 1e-10,
    "feastol": 1e-9,
    "maxiters": 200,
})

# state ordering: x, y, phi, v, a, eta, delta, omega
IX, IY, IPHI, IV, IA, IETA, IDELTA, IOMEGA = range(8)


@dataclass(frozen=True)
class EgoState:
    x: float
    y: float
    phi: float
    v: float
    a: float
    eta: float
    delta: float
    omega: float

    def as_vector(self) -> np.ndarray:
        return np.array([self.x, self.y, self.phi, self.v,
                         self.a, self.eta, self.delta, self.omega])

    @staticmethod
    def from_vector(vec) -> "EgoState":
        return EgoState(*(float(v) for v in vec))

    def as_sv_state(self, params: PlannerParams) -> SvState:
        """Ground-frame planar state for the linear feedback rollouts."""
        wheelbase = params.l_f + params.l_r
        ratio = params.l_r / wheelbase
        v_y = self.v * self.phi + ratio * self.v * self.delta
        a_y = (self.a * self.phi + self.v ** 2 * self.delta / wheelbase
               + ratio * (self.a * self.delta + self.v * self.omega))
        return SvState(x=self.x, v_x=self.v * math.cos(self.phi), a_x=self.a,
                       y=self.y, v_y=v_y, a_y=a_y)


def _f(xi: np.ndarray, u: np.ndarray, l_f: float, l_r: float) -> np.ndarray:
    wheelbase = l_f + l_r
    out = np.empty(8)
    out[IX] = xi[IV]
    out[IY] = xi[IV] * xi[IPHI] + (l_r / wheelbase) * xi[IV] * xi[IDELTA]
    out[IPHI] = xi[IV] * xi[IDELTA] / wheelbase
    out[IV] = xi[IA]
    out[IA] = xi[IETA]
    out[IETA] = u[0]
    out[IDELTA] = xi[IOMEGA]
    out[IOMEGA] = u[1]
    return out


def _f_jac(xi: np.ndarray, l_f: float, l_r: float) -> np.ndarray:
    wheelbase = l_f + l_r
    ratio = l_r / wheelbase
    J = np.zeros((8, 8))
    J[IX, IV] = 1.0
    J[IY, IPHI] = xi[IV]
    J[IY, IV] = xi[IPHI] + ratio * xi[IDELTA]
    J[IY, IDELTA] = ratio * xi[IV]
    J[IPHI, IV] = xi[IDELTA] / wheelbase
    J[IPHI, IDELTA] = xi[IV] / wheelbase
    J[IV, IA] = 1.0
    J[IA, IETA] = 1.0
    J[IDELTA, IOMEGA] = 1.0
    return J


_JU = np.zeros((8, 2))
_JU[IETA, 0] = 1.0
_JU[IOMEGA, 1] = 1.0


def rk4_step(xi: np.ndarray, u: np.ndarray, T: float, l_f: float, l_r: float) -> np.ndarray:
    k1 = _f(xi, u, l_f, l_r)
    k2 = _f(xi + 0.5 * T * k1, u, l_f, l_r)
    k3 = _f(xi + 0.5 * T * k2, u, l_f, l_r)
    k4 = _f(xi + T * k3, u, l_f, l_r)
    return xi + (T / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)


def rk4_step_with_jac(xi: np.ndarray, u: np.ndarray, T: float, l_f: float, l_r: float
                      ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One RK4 step plus d(next)/d(xi) and d(next)/d(u) by the chain rule."""
    eye = np.eye(8)
    k1 = _f(xi, u, l_f, l_r)
    x2 = xi + 0.5 * T * k1
    k2 = _f(x2, u, l_f, l_r)
    x3 = xi + 0.5 * T * k2
    k3 = _f(x3, u, l_f, l_r)
    x4 = xi + T * k3
    k4 = _f(x4, u, l_f, l_r)
    nxt = xi + (T / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)

    J1 = _f_jac(xi, l_f, l_r)
    J2 = _f_jac(x2, l_f, l_r)
    J3 = _f_jac(x3, l_f, l_r)
    J4 = _f_jac(x4, l_f, l_r)
    D1 = J1
    D2 = J2 @ (eye + 0.5 * T * D1)
    D3 = J3 @ (eye + 0.5 * T * D2)
    D4 = J4 @ (eye + T * D3)
    A = eye + (T / 6.0) * (D1 + 2 * D2 + 2 * D3 + D4)

    E1 = _JU
    E2 = J2 @ (0.5 * T * E1) + _JU
    E3 = J3 @ (0.5 * T * E2) + _JU
    E4 = J4 @ (T * E3) + _JU
    B = (T / 6.0) * (E1 + 2 * E2 + 2 * E3 + E4)
    return nxt, A, B


def step_ego(state: EgoState, u: tuple[float, float], T: float,
             params: PlannerParams) -> EgoState:
    """RK4 integration over one interval with piecewise-constant inputs."""
    nxt = rk4_step(state.as_vector(), np.asarray(u, dtype=float), T,
                   params.l_f, params.l_r)
    return EgoState.from_vector(nxt)


def rollout_ego(state: EgoState, inputs: np.ndarray, T: float,
                params: PlannerParams) -> np.ndarray:
    """(N, 8) states at t = k+1..k+N for an (N, 2) input sequence."""
    xi = state.as_vector()
    out = np.empty((len(inputs), 8))
    for t, u in enumerate(inputs):
        xi = rk4_step(xi, u, T, params.l_f, params.l_r)
        out[t] = xi
    return out


# ---------------------------------------------------------------------------
# Moving targets
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MovingTarget:
    maneuver: EgoManeuver
    v_ref: float
    y_ref: float
    probabilities: dict[EgoManeuver, float]
    costs: dict[EgoManeuver, float]
    infeasible: dict[EgoManeuver, bool]

    def __post_init__(self):
        total = sum(self.probabilities.values())
        if not math.isclose(total, 1.0, abs_tol=1e-9):
            raise ValueError(f"maneuver probabilities sum to {total}")


def _ev_linear_rollout(sv0: SvState, v_ref: float, y_ref: float,
                       params: PlannerParams, T: float, N: int) -> np.ndarray:
    return pd._rollout(sv0, np.asarray(params.k_lon_ev), np.asarray(params.k_lat_ev),
                       v_ref, y_ref, T, N)


def ego_maneuver_targets(ego: EgoState, occupancy: dict[str, list[OccupancyRect]],
                         geometry: LaneGeometry, shape: VehicleShape,
                         params: PlannerParams, T: float, N: int) -> MovingTarget:
    """Per-lane velocity-tracking targets, costs, probabilities, and the argmax.

    For each candidate lane: the reference speed solves the 1-D headway-
    constrained least squares against every laterally-close occupancy
    rectangle ahead, using the affine dependence of the feedback rollout on
    the reference speed (two rollouts and superposition).  Closeness gates on
    the candidate lane center; the lane-change transient is protected by the
    OCP's hard headway constraint, not here.
    """
    sv0 = ego.as_sv_state(params)
    current_lane = min(max(math.ceil(sv0.y / geometry.lane_width), 1), 3)
    results: dict[EgoManeuver, tuple[float, float, bool]] = {}
    costs: dict[EgoManeuver, float] = {}
    for m in EgoManeuver:
        y_ref = geometry.center(m.lane)
        v_nom = geometry.nominal_speed(m.lane)
        roll0 = _ev_linear_rollout(sv0, 0.0, y_ref, params, T, N)
        roll1 = _ev_linear_rollout(sv0, 1.0, y_ref, params, T, N)
        base = roll0[:, 0]
        sens = roll1[:, 0] - roll0[:, 0]

        bound = math.inf
        for rects in occupancy.values():
            if rects[0].center_x < sv0.x:
                continue  # headway constraints only against vehicles ahead
            o_x = np.array([r.center_x for r in rects])
            o_y = np.array([r.center_y for r in rects])
            length = np.array([r.length for r in rects])
            width = np.array([r.width for r in rects])
            close = np.abs(y_ref - o_y) <= (shape.width + width) / 2.0
            if not np.any(close):
                continue
            num = o_x[close] - base[close] - (length[close] + shape.length) / 2.0
            den = sens[close] + params.tau_h_targets
            bound = min(bound, float(np.min(num / den)))

        infeasible = bound < 0.0
        v_ref = max(0.0, min(v_nom, bound))
        results[m] = (v_ref, y_ref, infeasible)
        roll = _ev_linear_rollout(sv0, v_ref, y_ref, params, T, N)
        ax = np.concatenate(([sv0.a_x], roll[:, 2]))
        ay = np.concatenate(([sv0.a_y], roll[:, 5]))
        costs[m] = float(params.w_x * np.sum(ax ** 2) + params.w_y * np.sum(ay ** 2)
                         + params.w_v * (sv0.v_x - v_ref) ** 2
                         + params.w_l * (sv0.y - y_ref) ** 2)

    weights = {m: 1.0 / math.sqrt(costs[m] + params.varsigma) for m in EgoManeuver}
    total = sum(weights.values())
    probs = {m: w / total for m, w in weights.items()}

    if all(results[m][2] for m in EgoManeuver):
        best = EgoManeuver(current_lane)
    else:
        # argmax probability among feasible; exact ties prefer the current lane
        feasible = [m for m in EgoManeuver if not results[m][2]]
        best = max(feasible, key=lambda m: (probs[m], -abs(m.lane - current_lane)))
    v_ref, y_ref, _ = results[best]
    return MovingTarget(maneuver=best, v_ref=v_ref, y_ref=y_ref,
                        probabilities=probs, costs=costs,
                        infeasible={m: results[m][2] for m in EgoManeuver})


# ---------------------------------------------------------------------------
# Direct-vehicle extraction
# ---------------------------------------------------------------------------


def _ceil_lane(y: float, lane_width: float) -> int:
    return math.ceil(y / lane_width)


def extract_dv(maneuver: EgoManeuver, y_ev: float, phi_ev: float,
               occupancy: dict[str, list[OccupancyRect]],
               geometry: LaneGeometry, params: PlannerParams, N: int) -> np.ndarray:
    """Per-step front-edge position of the nearest applicable occupancy.

    Follows the lane-flag bookkeeping verbatim, including its asymmetric
    ceiling tests; +inf marks steps with no applicable rectangle.
    """
    w = geometry.lane_width
    c_l = min(max(math.ceil((y_ev - params.zeta_ev) / w), 1), 3)
    if c_l == 1:
        d_y = y_ev - 0.5 * w
        if maneuver is EgoManeuver.VT2 or (phi_ev >= params.lambda_phi
                                           and d_y >= params.lambda_y):
            lanes = (1, 2)
        else:
            lanes = (1,)
    elif c_l == 2:
        d_y = y_ev - 1.5 * w
        if maneuver is EgoManeuver.VT1 or (phi_ev <= -params.lambda_phi
                                           and d_y <= -params.lambda_y):
            lanes = (1, 2)
        elif maneuver is EgoManeuver.VT3 or (phi_ev >= params.lambda_phi
                                             and d_y >= params.lambda_y):
            lanes = (2, 3)
        else:
            lanes = (2,)
    else:
        d_y = y_ev - 2.5 * w
        if maneuver is EgoManeuver.VT2 or (phi_ev <= -params.lambda_phi
                                           and d_y <= -params.lambda_y):
            lanes = (2, 3)
        else:
            lanes = (3,)

    dv = np.full(N, math.inf)
    for rects in occupancy.values():
        for t, rect in enumerate(rects[:N]):
            lo = _ceil_lane(rect.center_y - rect.width / 2.0, w)
            mid = _ceil_lane(rect.center_y, w)
            hi = _ceil_lane(rect.center_y + rect.width / 2.0, w)
            flags = {1: lo == 1 or mid == 1,
                     2: lo == 2 or mid == 2 or hi == 2,
                     3: mid == 3 or hi == 3}
            if any(flags[lane] for lane in lanes):
                dv[t] = min(dv[t], rect.front_edge)
    return dv


# ---------------------------------------------------------------------------
# OCP transcription and SQP solver
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PlanResult:
    inputs: np.ndarray  # (N, 2) applied at t = k..k+N-1
    states: np.ndarray  # (N, 8) at t = k+1..k+N
    rho: np.ndarray  # (N,)
    cost: float
    status: str  # converged | degraded
    iterations: int
    wall_time: float


class OcpTranscription:
    """Condensed direct-shooting transcription of the receding-horizon OCP.

    Decision vector w = [s_0..s_{N-1}, alpha_0..alpha_{N-1}, rho_1..rho_N].
    The longitudinal and steering chains are exactly linear in w under RK4,
    so speed/acceleration/steering bounds and the headway constraint are
    linear; only the terminal lateral deviation requires SQP iterations.
    """

    def __init__(self, params: PlannerParams, T: float, N: int):
        self.params = params
        self.T = T
        self.N = N
        self.n_dec = 3 * N
        self._build_chain_maps()

    def _build_chain_maps(self) -> None:
        T, N = self.T, self.N
        # exact RK4 discretization of the nilpotent chains
        A4 = np.array([[1, T, T * T / 2, T ** 3 / 6],
                       [0, 1, T, T * T / 2],
                       [0, 0, 1, T],
                       [0, 0, 0, 1.0]])
        B4 = np.array([T ** 4 / 24, T ** 3 / 6, T * T / 2, T])
        A2 = np.array([[1.0, T], [0.0, 1.0]])
        B2 = np.array([T * T / 2, T])
        # sensitivities of (x, v, a) and delta w.r.t. the input sequences
        self.x_map = np.zeros((N, N))
        self.v_map = np.zeros((N, N))
        self.a_map = np.zeros((N, N))
        self.d_map = np.zeros((N, N))
        self.lon_free = np.zeros((N, 4, 4))  # propagates the initial (x,v,a,eta)
        self.steer_free = np.zeros((N, 2, 2))
        sens4 = np.zeros((4, N))
        sens2 = np.zeros((2, N))
        free4 = np.eye(4)
        free2 = np.eye(2)
        for t in range(N):
            sens4 = A4 @ sens4
            sens4[:, t] += B4
            sens2 = A2 @ sens2
            sens2[:, t] += B2
            free4 = A4 @ free4
            free2 = A2 @ free2
            self.x_map[t] = sens4[0]
            self.v_map[t] = sens4[1]
            self.a_map[t] = sens4[2]
            self.d_map[t] = sens2[0]
            self.lon_free[t] = free4
            self.steer_free[t] = free2

    # -- linear channel evaluations -------------------------------------

    def linear_offsets(self, xi0: np.ndarray) -> dict[str, np.ndarray]:
        lon0 = xi0[[IX, IV, IA, IETA]]
        steer0 = xi0[[IDELTA, IOMEGA]]
        return {
            "x": self.lon_free[:, 0, :] @ lon0,
            "v": self.lon_free[:, 1, :] @ lon0,
            "a": self.lon_free[:, 2, :] @ lon0,
            "delta": self.steer_free[:, 0, :] @ steer0,
        }

    def split(self, w: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        N = self.N
        return w[:N], w[N:2 * N], w[2 * N:]

    def inputs_of(self, w: np.ndarray) -> np.ndarray:
        s, alpha, _ = self.split(w)
        return np.stack([s, alpha], axis=1)

    def rollout(self, xi0: np.ndarray, w: np.ndarray) -> np.ndarray:
        return rollout_ego(EgoState.from_vector(xi0), self.inputs_of(w),
                           self.T, self.params)

    def objective(self, xi0: np.ndarray, w: np.ndarray, v_ref: float, y_ref: float
                  ) -> float:
        p = self.params
        s, alpha, rho = self.split(w)
        states = self.rollout(xi0, w)
        a = states[:, IA]
        delta = states[:, IDELTA]
        y_n = states[-1, IY]
        v_n = states[-1, IV]
        return float(p.q1 * np.sum(s ** 2) + p.q2 * np.sum(alpha ** 2)
                     + p.q3 * np.sum(a ** 2) + p.q4 * np.sum(delta ** 2)
                     + p.q5_y * (y_n - y_ref) ** 2 + p.q5_v * (v_n - v_ref) ** 2
                     + p.q6 * np.sum(rho ** 2))

    def terminal_y_and_grad(self, xi0: np.ndarray, w: np.ndarray
                            ) -> tuple[float, np.ndarray]:
        """Terminal lateral position and its gradient via the adjoint chain."""
        p = self.params
        inputs = self.inputs_of(w)
        xi = xi0.copy()
        A_steps = []
        B_steps = []
        for u in inputs:
            xi, A, B = rk4_step_with_jac(xi, u, self.T, p.l_f, p.l_r)
            A_steps.append(A)
            B_steps.append(B)
        y_n = float(xi[IY])
        lam = np.zeros(8)
        lam[IY] = 1.0
        grad = np.zeros(self.n_dec)
        for t in range(self.N - 1, -1, -1):
            gu = B_steps[t].T @ lam
            grad[t] = gu[0]
            grad[self.N + t] = gu[1]
            lam = A_steps[t].T @ lam
        return y_n, grad

    def objective_grad(self, xi0: np.ndarray, w: np.ndarray, v_ref: float,
                       y_ref: float) -> np.ndarray:
        """Analytic gradient: constant quadratic parts plus the adjoint y-term."""
        p = self.params
        N = self.N
        s, alpha, rho = self.split(w)
        off = self.linear_offsets(xi0)
        a = off["a"] + self.a_map @ s
        delta = off["delta"] + self.d_map @ alpha
        v_n = off["v"][-1] + self.v_map[-1] @ s
        grad = np.zeros(self.n_dec)
        grad[:N] = (2 * p.q1 * s + 2 * p.q3 * (self.a_map.T @ a)
                    + 2 * p.q5_v * (v_n - v_ref) * self.v_map[-1])
        grad[N:2 * N] = 2 * p.q2 * alpha + 2 * p.q4 * (self.d_map.T @ delta)
        grad[2 * N:] = 2 * p.q6 * rho
        y_n, y_grad = self.terminal_y_and_grad(xi0, w)
        grad += 2 * p.q5_y * (y_n - y_ref) * y_grad
        return grad

    # -- linear constraints ----------------------------------------------

    def constraints(self, xi0: np.ndarray, dv: np.ndarray, shape_length: float
                    ) -> tuple[np.ndarray, np.ndarray]:
        """Stack G w <= h: speed, acceleration, steering bounds, slack
        positivity, and the soft headway rows for finite direct vehicles."""
        p = self.params
        N = self.N
        off = self.linear_offsets(xi0)
        rows = []
        rhs = []
        zeros = np.zeros((N, N))

        def block(mat_s, mat_alpha, mat_rho, rh):
            rows.append(np.hstack([mat_s, mat_alpha, mat_rho]))
            rhs.append(rh)

        block(-self.v_map, zeros, zeros, off["v"])  # v >= 0
        block(self.a_map, zeros, zeros, p.a_max - off["a"])
        block(-self.a_map, zeros, zeros, p.a_max + off["a"])
        block(zeros, self.d_map, zeros, p.delta_max - off["delta"])
        block(zeros, -self.d_map, zeros, p.delta_max + off["delta"])
        block(zeros, zeros, -np.eye(N), np.zeros(N))  # rho >= 0
        finite = np.isfinite(dv)
        if np.any(finite):
            sel = np.flatnonzero(finite)
            mat_s = p.tau_h_ocp * self.v_map[sel] + self.x_map[sel]
            rh = dv[sel] - shape_length / 2.0 - (p.tau_h_ocp * off["v"][sel]
                                                 + off["x"][sel])
            block(mat_s, np.zeros((sel.size, N)), -np.eye(N)[sel], rh)
        return np.vstack(rows), np.concatenate(rhs)

    def quadratic_hessian(self) -> np.ndarray:
        """Constant Hessian of every cost term except the terminal y part."""
        p = self.params
        N = self.N
        H = np.zeros((self.n_dec, self.n_dec))
        H[:N, :N] = (2 * p.q1 * np.eye(N) + 2 * p.q3 * self.a_map.T @ self.a_map
                     + 2 * p.q5_v * np.outer(self.v_map[-1], self.v_map[-1]))
        H[N:2 * N, N:2 * N] = (2 * p.q2 * np.eye(N)
                               + 2 * p.q4 * self.d_map.T @ self.d_map)
        H[2 * N:, 2 * N:] = 2 * p.q6 * np.eye(N)
        return H


def solve_ocp(ego: EgoState, target: MovingTarget, dv: np.ndarray,
              params: PlannerParams, T: float, N: int, shape: VehicleShape,
              warm: PlanResult | None = None,
              transcription: OcpTranscription | None = None) -> PlanResult:
    """Gauss-Newton SQP on the condensed transcription with QP subproblems.

    Warm starting shifts the previous solution by one step.  The returned
    trajectory always satisfies the RK4 dynamics exactly (states are the
    rollout of the returned inputs); bounds and the headway rows are enforced
    by the QP to interior-point accuracy.
    """
    t_start = time.perf_counter()
    tr = transcription or OcpTranscription(params, T, N)
    xi0_abs = ego.as_vector()
    xi0 = xi0_abs.copy()
    xi0[IX] = 0.0  # plan in a vehicle-local longitudinal frame
    dv_local = np.asarray(dv, dtype=float) - xi0_abs[IX]

    w = np.zeros(tr.n_dec)
    if warm is not None:
        n_w = min(len(warm.inputs), N)
        w[:n_w - 1] = warm.inputs[1:n_w, 0]
        w[n_w - 1:N] = warm.inputs[n_w - 1, 0]
        w[N:N + n_w - 1] = warm.inputs[1:n_w, 1]
        w[N + n_w - 1:2 * N] = warm.inputs[n_w - 1, 1]
        w[2 * N + 1:2 * N + n_w] = warm.rho[1:n_w]
        w[2 * N:2 * N + 1] = warm.rho[0]

    G, h = tr.constraints(xi0, dv_local, shape.length)
    # make the start point feasible in the slacks (they appear with -I rows)
    residual = G @ w - h
    if np.any(residual > 0):
        s_, a_, rho = tr.split(w)
        off = tr.linear_offsets(xi0)
        v_lin = off["v"] + tr.v_map @ s_
        x_lin = off["x"] + tr.x_map @ s_
        need = params.tau_h_ocp * v_lin + x_lin - (dv_local - shape.length / 2.0)
        need[~np.isfinite(need)] = 0.0
        rho_new = np.maximum(rho, np.maximum(need, 0.0))
        w[2 * N:] = rho_new

    H0 = tr.quadratic_hessian()
    p = params
    cost = tr.objective(xi0, w, target.v_ref, target.y_ref)
    status = "degraded"
    iterations = 0
    for it in range(1, params.max_iterations + 1):
        iterations = it
        y_n, y_grad = tr.terminal_y_and_grad(xi0, w)
        grad = tr.objective_grad(xi0, w, target.v_ref, target.y_ref)
        H = H0 + 2 * p.q5_y * np.outer(y_grad, y_grad)
        qp = cvxopt.solvers.qp(cvxopt.matrix(H), cvxopt.matrix(grad),
                               cvxopt.matrix(G), cvxopt.matrix(h - G @ w))
        if qp["status"] not in ("optimal", "unknown"):
            break
        d = np.asarray(qp["x"]).ravel()
        step = 1.0
        accepted = False
        for _ in range(8):
            candidate = w + step * d
            new_cost = tr.objective(xi0, candidate, target.v_ref, target.y_ref)
            if new_cost <= cost + 1e-12:
                w = candidate
                improvement = cost - new_cost
                cost = new_cost
                accepted = True
                break
            step *= 0.5
        if not accepted:
            status = "converged"  # no descent direction left at QP accuracy
            break
        if (np.max(np.abs(step * d)) < 1e-9
                or improvement < 1e-12 * max(1.0, abs(cost))):
            status = "converged"
            break

    states_local = tr.rollout(xi0, w)
    states = states_local.copy()
    states[:, IX] += xi0_abs[IX]
    return PlanResult(inputs=tr.inputs_of(w), states=states, rho=tr.split(w)[2],
                      cost=cost, status=status, iterations=iterations,
                      wall_time=time.perf_counter() - t_start)


# ---------------------------------------------------------------------------
# Full planning step
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PlanStep:
    result: PlanResult
    target: MovingTarget
    predictions: dict = field(repr=False)
    occupancy: dict[str, list[OccupancyRect]] = field(repr=False)
    dv: np.ndarray = field(repr=False)
    predict_time: float = 0.0
    occupancy_time: float = 0.0
    ocp_time: float = 0.0
    total_time: float = 0.0


class Planner:
    """Receding-horizon decision stack for one run of one planner flavor.

    kind "isa" builds the eps-superlevel mixture occupancy, "scmpc" the
    maneuver-sampled occupancy, and "deterministic" the dilated most-probable
    nominal trajectory.  Holds the mode-filter bank and the warm start across
    steps.
    """

    def __init__(self, gain_sets: dict, geometry: LaneGeometry, shape: VehicleShape,
                 params: PlannerParams, N: int, T: float):
        params.validated()
        self.gain_sets = gain_sets
        self.geometry = geometry
        self.shape = shape
        self.params = params
        self.N = N
        self.T = T
        self.predictor = pd.Predictor(gain_sets, geometry, shape, params, N, T)
        self.transcription = OcpTranscription(params, T, N)
        self.warm: PlanResult | None = None

    def build_occupancy(self, predictions: dict, rng: np.random.Generator
                        ) -> dict[str, list[OccupancyRect]]:
        p = self.params
        if p.kind == "deterministic":
            return oc.deterministic_occupancy(predictions, self.shape)
        if p.kind == "scmpc":
            return oc.scmpc_occupancy(predictions, self.gain_sets, p.k_sc,
                                      self.shape, self.T, rng)
        tracks = {}
        for sv_id, preds in predictions.items():
            for pred in preds:
                track = un.quantify(sv_id, pred.state0, pred.maneuver,
                                    pred.v_ref, pred.y_ref,
                                    self.gain_sets[pred.maneuver],
                                    p.k_sam, self.N, self.T, rng)
                if pred.maneuver.is_lane_keep:
                    track = un.apply_lane_keep_constant(
                        track, self.gain_sets[pred.maneuver].lane_keep_std_y)
                tracks[(sv_id, pred.maneuver)] = track
        return oc.build_occupancy(predictions, tracks, p.eps, self.shape,
                                  p, self.N)

    def plan(self, ego: EgoState, sv_states: dict[str, SvState],
             rng: np.random.Generator) -> PlanStep:
        t0 = time.perf_counter()
        predictions = self.predictor.predict(sv_states)
        t1 = time.perf_counter()
        occupancy = self.build_occupancy(predictions, rng)
        t2 = time.perf_counter()
        target = ego_maneuver_targets(ego, occupancy, self.geometry, self.shape,
                                      self.params, self.T, self.N)
        dv = extract_dv(target.maneuver, ego.y, ego.phi, occupancy,
                        self.geometry, self.params, self.N)
        result = solve_ocp(ego, target, dv, self.params, self.T, self.N,
                           self.shape, warm=self.warm,
                           transcription=self.transcription)
        self.warm = result
        t3 = time.perf_counter()
        return PlanStep(result=result, target=target, predictions=predictions,
                        occupancy=occupancy, dv=dv,
                        predict_time=t1 - t0, occupancy_time=t2 - t1,
                        ocp_time=result.wall_time, total_time=t3 - t0)
