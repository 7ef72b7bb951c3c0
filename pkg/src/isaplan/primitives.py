"""Linear state-feedback motion primitives and offline gain identification.

The primitive model propagates X = [x, v_x, a_x, y, v_y, a_y] with
piecewise-constant jerk inputs computed by longitudinal/lateral state
feedback toward a reference speed and lane position.  Per-maneuver gain sets
are identified from trajectory clusters by fitting LQR weights, which keeps
every identified gain stabilizing.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.optimize
import yaml

from .world import LaneGeometry, ManeuverId, ScenarioError, SvState


def lat_matrices(T: float) -> tuple[np.ndarray, np.ndarray]:
    """Discrete triple-integrator blocks (A_y, B_y) for the lateral channel."""
    A = np.array([[1.0, T, T * T / 2.0], [0.0, 1.0, T], [0.0, 0.0, 1.0]])
    B = np.array([[T ** 3 / 6.0], [T * T / 2.0], [T]])
    return A, B


def lon_matrices(T: float) -> tuple[np.ndarray, np.ndarray]:
    """Discrete blocks (A_x, B_x); input enters at velocity level."""
    A = np.array([[1.0, T, T * T / 2.0], [0.0, 1.0, T], [0.0, 0.0, 1.0]])
    B = np.array([[0.0], [T * T / 2.0], [T]])
    return A, B


def lon_reduced(T: float) -> tuple[np.ndarray, np.ndarray]:
    """(v_x, a_x) sub-block actually driven by the longitudinal feedback."""
    A = np.array([[1.0, T], [0.0, 1.0]])
    B = np.array([[T * T / 2.0], [T]])
    return A, B


def full_matrices(T: float) -> tuple[np.ndarray, np.ndarray]:
    """6x6 / 6x2 block-diagonal model matrices."""
    Ax, Bx = lon_matrices(T)
    Ay, By = lat_matrices(T)
    A = scipy.linalg.block_diag(Ax, Ay)
    B = np.zeros((6, 2))
    B[:3, 0:1] = Bx
    B[3:, 1:2] = By
    return A, B


@dataclass(frozen=True)
class PrimitiveModel:
    """One maneuver's closed-loop model: matrices, references, and gains."""

    T: float
    v_ref: float
    y_ref: float
    k_lon: tuple[float, float]
    k_lat: tuple[float, float, float]
    A: np.ndarray = field(repr=False, default=None)
    B: np.ndarray = field(repr=False, default=None)

    def __post_init__(self):
        A, B = full_matrices(self.T)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)

    def input_for(self, state_vec: np.ndarray) -> np.ndarray:
        k_lon = np.asarray(self.k_lon)
        k_lat = np.asarray(self.k_lat)
        u_lon = -(k_lon[0] * (state_vec[1] - self.v_ref) + k_lon[1] * state_vec[2])
        u_lat = -(k_lat[0] * (state_vec[3] - self.y_ref)
                  + k_lat[1] * state_vec[4] + k_lat[2] * state_vec[5])
        return np.array([u_lon, u_lat])


def step_primitive(state: SvState, model: PrimitiveModel) -> SvState:
    """One sampling interval of the closed-loop primitive."""
    vec = np.asarray(state.as_vector())
    nxt = model.A @ vec + model.B @ model.input_for(vec)
    return SvState.from_vector(nxt)


def rollout_states(state: SvState, model: PrimitiveModel, n_steps: int) -> np.ndarray:
    """(n_steps, 6) array of states at t = 1..n_steps."""
    vec = np.asarray(state.as_vector(), dtype=float)
    out = np.empty((n_steps, 6))
    for t in range(n_steps):
        vec = model.A @ vec + model.B @ model.input_for(vec)
        out[t] = vec
    return out


def rollout_batch(states: np.ndarray, k_lon: np.ndarray, k_lat: np.ndarray,
                  v_ref: float, y_ref: float, T: float, n_steps: int) -> np.ndarray:
    """Vectorized rollouts: states (K, 6), gains (K, 2) and (K, 3).

    Returns (n_steps, K, 6).
    """
    A, B = full_matrices(T)
    X = np.array(states, dtype=float)
    out = np.empty((n_steps, X.shape[0], 6))
    for t in range(n_steps):
        u_lon = -(k_lon[:, 0] * (X[:, 1] - v_ref) + k_lon[:, 1] * X[:, 2])
        u_lat = -(k_lat[:, 0] * (X[:, 3] - y_ref) + k_lat[:, 1] * X[:, 4]
                  + k_lat[:, 2] * X[:, 5])
        U = np.stack([u_lon, u_lat], axis=1)
        X = X @ A.T + U @ B.T
        out[t] = X
    return out


# ---------------------------------------------------------------------------
# Trajectory clusters
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrajectoryCluster:
    """Equal-length (y, v_x) trajectories of one maneuver, sampled at T."""

    maneuver: ManeuverId
    y: np.ndarray  # (n_traj, n_steps)
    vx: np.ndarray  # (n_traj, n_steps)
    T: float

    @property
    def n_traj(self) -> int:
        return self.y.shape[0]

    @property
    def n_steps(self) -> int:
        return self.y.shape[1]

    @property
    def duration(self) -> float:
        return self.n_steps * self.T


def normalize_cluster(maneuver: ManeuverId, raw: list[tuple[np.ndarray, np.ndarray]],
                      T: float) -> TrajectoryCluster:
    """Extend every trajectory to the cluster's longest duration.

    Shorter trajectories continue from their terminal point with constant
    lateral position and longitudinal velocity.
    """
    if not raw:
        raise ScenarioError("cannot normalize an empty cluster")
    n_steps = max(len(y) for y, _ in raw)
    ys = np.empty((len(raw), n_steps))
    vxs = np.empty((len(raw), n_steps))
    for i, (y, vx) in enumerate(raw):
        y = np.asarray(y, dtype=float)
        vx = np.asarray(vx, dtype=float)
        if len(y) != len(vx):
            raise ScenarioError("trajectory y and vx lengths differ")
        n = len(y)
        ys[i, :n] = y
        vxs[i, :n] = vx
        if n < n_steps:
            ys[i, n:] = y[-1]
            vxs[i, n:] = vx[-1]
    return TrajectoryCluster(maneuver=maneuver, y=ys, vx=vxs, T=T)


def load_cluster_csv(path, maneuver: ManeuverId, T: float) -> TrajectoryCluster:
    """Read a cluster CSV (trajectory_id, step, y_meters, vx_meters_per_second)."""
    by_traj: dict[str, list[tuple[int, float, float]]] = {}
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        required = {"trajectory_id", "step", "y_meters", "vx_meters_per_second"}
        if reader.fieldnames is None or not required <= set(reader.fieldnames):
            raise ScenarioError(f"{path}: cluster CSV must have columns {sorted(required)}")
        for row in reader:
            by_traj.setdefault(row["trajectory_id"], []).append(
                (int(row["step"]), float(row["y_meters"]), float(row["vx_meters_per_second"])))
    raw = []
    for _, samples in sorted(by_traj.items()):
        samples.sort(key=lambda s: s[0])
        raw.append((np.array([s[1] for s in samples]), np.array([s[2] for s in samples])))
    return normalize_cluster(maneuver, raw, T)


# ---------------------------------------------------------------------------
# Gain identification
# ---------------------------------------------------------------------------


def _dare_doubling(A: np.ndarray, B: np.ndarray, Q: np.ndarray, R: np.ndarray) -> np.ndarray:
    """Stabilizing Riccati solution via structure-preserving doubling.

    Quadratically convergent and much cheaper than the generic Schur solver
    for the tiny systems used here; falls back to scipy on stagnation.
    """
    n = A.shape[0]
    eye = np.eye(n)
    Ak = A.copy()
    Gk = B @ np.linalg.solve(R, B.T)
    Hk = Q.copy()
    for _ in range(60):
        W = eye + Gk @ Hk
        try:
            WiA = np.linalg.solve(W, Ak)
            WiG = np.linalg.solve(W, Gk)
        except np.linalg.LinAlgError:
            return scipy.linalg.solve_discrete_are(A, B, Q, R)
        H_next = Hk + Ak.T @ Hk @ WiA
        Gk = Gk + Ak @ WiG @ Ak.T
        Ak = Ak @ WiA
        delta = np.max(np.abs(H_next - Hk))
        Hk = H_next
        if delta <= 1e-14 * max(1.0, np.max(np.abs(Hk))):
            return Hk
    return scipy.linalg.solve_discrete_are(A, B, Q, R)


def dlqr(A: np.ndarray, B: np.ndarray, Q: np.ndarray, R: np.ndarray) -> np.ndarray:
    """Discrete-time infinite-horizon LQR gain K (u = -K x is stabilizing)."""
    P = _dare_doubling(A, B, Q, R)
    return np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)


def closed_loop_radius(A: np.ndarray, B: np.ndarray, K: np.ndarray) -> float:
    return float(np.max(np.abs(np.linalg.eigvals(A - B @ K))))


@dataclass(frozen=True)
class GainSet:
    """Identified feedback-gain samples of one maneuver plus their means."""

    maneuver: ManeuverId
    lon_gains: np.ndarray  # (n, 2)
    lat_gains: np.ndarray  # (n, 3)
    warnings: int = 0
    lane_keep_std_y: float = 0.0  # cluster lateral STD, used for lane-keep modes

    def __post_init__(self):
        if self.lon_gains.shape[0] == 0 or self.lat_gains.shape[0] == 0:
            raise ScenarioError("gain set must be nonempty")

    @property
    def k_lon_mean(self) -> np.ndarray:
        return self.lon_gains.mean(axis=0)

    @property
    def k_lat_mean(self) -> np.ndarray:
        return self.lat_gains.mean(axis=0)


def _fd_terminal(samples: np.ndarray, T: float) -> tuple[float, float]:
    d1 = (samples[-1] - samples[-2]) / T
    d2 = (samples[-1] - 2.0 * samples[-2] + samples[-3]) / (T * T) if len(samples) >= 3 else 0.0
    return float(d1), float(d2)


def _consistent_initial(samples: np.ndarray, Acl: np.ndarray, offset: np.ndarray,
                        n_known: int) -> np.ndarray:
    """Initial state whose closed-loop response reproduces the first samples.

    The first `n_known` state components are read off the data directly; the
    remaining derivatives are solved from the next samples, which is exact for
    data generated by the model class itself and otherwise a least-surprise
    estimate of the unobserved derivatives.
    """
    n = Acl.shape[0]
    n_free = n - n_known
    x_known = np.zeros(n)
    x_known[:n_known] = samples[:n_known] if n_known > 1 else samples[0]
    rows = np.empty((n_free, n_free))
    rhs = np.empty(n_free)
    Apow = np.eye(n)
    drift = np.zeros(n)
    for j in range(1, n_free + 1):
        drift = Acl @ drift + offset
        Apow = Acl @ Apow
        rows[j - 1] = Apow[0, n_known:]
        rhs[j - 1] = samples[n_known - 1 + j] - Apow[0] @ x_known - drift[0]
    try:
        free = np.linalg.solve(rows, rhs)
    except np.linalg.LinAlgError:
        free = np.zeros(n_free)
    x0 = x_known.copy()
    x0[n_known:] = free
    return x0


def _tracking_cost(log_q: np.ndarray, A, B, x_ref, data, H, n_known) -> float:
    Q = np.diag(np.exp(log_q))
    try:
        K = dlqr(A, B, Q, np.eye(1))
    except np.linalg.LinAlgError:
        return 1e12
    Acl = A - B @ K
    offset = (B @ K @ x_ref).ravel()
    x = _consistent_initial(data, Acl, offset, n_known)
    cost = 0.0
    for j in range(len(data)):
        cost += (data[j] - x[0]) ** 2
        x = Acl @ x + offset
    return float(cost)


LOG_Q_BOUND = 4.0 * math.log(10.0)  # Q diagonals constrained to [1e-4, 1e4]


def identify_gain(samples: np.ndarray, maneuver: ManeuverId, axis: str, T: float
                  ) -> tuple[np.ndarray, bool]:
    """Fit one trajectory's feedback gain by optimizing LQR weights.

    `samples` is the lateral-position sequence for axis="lateral" or the
    longitudinal-velocity sequence for axis="longitudinal".  Returns
    (gain, warned); warned is True when the search could not improve on the
    identity weighting.
    """
    samples = np.asarray(samples, dtype=float)
    if len(samples) < 4:
        raise ScenarioError("trajectory too short for identification (need >= 4 samples)")
    if axis == "lateral":
        A, B = lat_matrices(T)
        t1, t2 = _fd_terminal(samples, T)
        x_ref = np.array([samples[-1], t1, t2])
        n_q = 3
    elif axis == "longitudinal":
        A, B = lon_reduced(T)
        t1, _ = _fd_terminal(samples, T)
        x_ref = np.array([samples[-1], t1])
        n_q = 2
    else:
        raise ScenarioError(f"unknown identification axis {axis!r}")
    H = np.zeros(n_q)
    H[0] = 1.0

    def cost(log_q):
        clipped = np.clip(log_q, -LOG_Q_BOUND, LOG_Q_BOUND)
        return _tracking_cost(clipped, A, B, x_ref, samples, H, n_known=1)

    log_q0 = np.zeros(n_q)
    cost0 = cost(log_q0)
    res = scipy.optimize.minimize(cost, log_q0, method="Nelder-Mead",
                                  options={"xatol": 1e-4, "fatol": 1e-14,
                                           "maxiter": 500, "maxfev": 500})
    warned = False
    if res.fun < cost0 - max(1e-15, 1e-9 * cost0):
        log_q = np.clip(res.x, -LOG_Q_BOUND, LOG_Q_BOUND)
    else:
        log_q = log_q0
        warned = True
    K = dlqr(A, B, np.diag(np.exp(log_q)), np.eye(1))
    return K.ravel(), warned


def refit_rmse(samples: np.ndarray, gain: np.ndarray, axis: str, T: float) -> float:
    """RMSE between a trajectory and its closed-loop reconstruction under `gain`."""
    samples = np.asarray(samples, dtype=float)
    if axis == "lateral":
        A, B = lat_matrices(T)
        t1, t2 = _fd_terminal(samples, T)
        x_ref = np.array([samples[-1], t1, t2])
    else:
        A, B = lon_reduced(T)
        t1, _ = _fd_terminal(samples, T)
        x_ref = np.array([samples[-1], t1])
    K = gain.reshape(1, -1)
    Acl = A - B @ K
    offset = (B @ K @ x_ref).ravel()
    x = _consistent_initial(samples, Acl, offset, n_known=1)
    err = 0.0
    for j in range(len(samples)):
        err += (samples[j] - x[0]) ** 2
        x = Acl @ x + offset
    return math.sqrt(err / len(samples))


def build_gain_sets(clusters: dict[ManeuverId, TrajectoryCluster]) -> dict[ManeuverId, GainSet]:
    """Identify longitudinal and lateral gain sets for every maneuver cluster."""
    out: dict[ManeuverId, GainSet] = {}
    for m, cluster in clusters.items():
        if cluster.n_traj == 0:
            raise ScenarioError(f"empty cluster for {m.value}")
        lon = np.empty((cluster.n_traj, 2))
        lat = np.empty((cluster.n_traj, 3))
        warnings = 0
        for n in range(cluster.n_traj):
            k_lat, w1 = identify_gain(cluster.y[n], m, "lateral", cluster.T)
            k_lon, w2 = identify_gain(cluster.vx[n], m, "longitudinal", cluster.T)
            lat[n] = k_lat
            lon[n] = k_lon
            warnings += int(w1) + int(w2)
        std_y = float(np.mean(np.std(cluster.y, axis=0, ddof=1))) if cluster.n_traj > 1 else 0.0
        out[m] = GainSet(maneuver=m, lon_gains=lon, lat_gains=lat,
                         warnings=warnings, lane_keep_std_y=std_y)
    return out


# ---------------------------------------------------------------------------
# Synthetic clusters (stand-in for recorded data)
# ---------------------------------------------------------------------------

# LQR weight ranges for the synthetic drivers; chosen so lane changes settle
# within the recording cap while keeping visible driver-to-driver spread.
_LAT_LOGQ_RANGE = ((0.0, 2.5), (-3.0, 0.0), (-3.0, -1.0))
_LON_LOGQ_RANGE = ((-1.5, 0.5), (-2.0, -0.5))


def _draw_gain(rng: np.random.Generator, A, B, ranges) -> np.ndarray:
    log_q = np.array([rng.uniform(lo, hi) for lo, hi in ranges])
    return dlqr(A, B, np.diag(np.exp(log_q)), np.eye(1)).ravel()


def synthesize_clusters(seed: int, geometry: LaneGeometry, T: float = 0.32,
                        n_traj: int = 30) -> dict[ManeuverId, list[tuple[np.ndarray, np.ndarray]]]:
    """Generate raw per-maneuver trajectory lists from dispersed LQR drivers.

    Trajectories use a maneuver-local frame: y = 0 at the source-lane center,
    lane changes end one lane width up or down.  Durations are randomized so
    normalization has real work to do.
    """
    rng = np.random.default_rng(seed)
    A_lat, B_lat = lat_matrices(T)
    A_lon, B_lon = lon_reduced(T)
    max_steps = int(10.0 / T)
    out: dict[ManeuverId, list[tuple[np.ndarray, np.ndarray]]] = {}
    for m in ManeuverId:
        v_nom = geometry.nominal_speed(m.source_lane)
        dy_target = (m.target_lane - m.source_lane) * geometry.lane_width
        raw = []
        for _ in range(n_traj):
            k_lat = _draw_gain(rng, A_lat, B_lat, _LAT_LOGQ_RANGE)
            k_lon = _draw_gain(rng, A_lon, B_lon, _LON_LOGQ_RANGE)
            if m.is_lane_keep:
                y0 = rng.normal(0.0, 0.15)
                y_ref = rng.normal(0.0, 0.15)
            else:
                y0 = rng.normal(0.0, 0.08)
                y_ref = dy_target + float(np.clip(rng.normal(0.0, 0.08), -0.25, 0.25))
            v0 = v_nom + rng.uniform(-3.0, 3.0)
            v_ref = max(1.0, v0 + rng.uniform(-2.0, 3.0))
            min_steps = int(rng.uniform(3.5, 5.0) / T)
            tail = int(rng.uniform(0.0, 1.6) / T)
            x_lat = np.array([y0, 0.0, 0.0])
            x_lon = np.array([v0, 0.0])
            ys, vxs = [], []
            settled_at = None
            for j in range(max_steps):
                ys.append(x_lat[0])
                vxs.append(x_lon[0])
                settled = (abs(x_lat[0] - y_ref) < 0.04 and abs(x_lat[1]) < 0.03
                           and abs(x_lon[0] - v_ref) < 0.08 and j + 1 >= min_steps)
                if settled and settled_at is None:
                    settled_at = j
                if settled_at is not None and j >= settled_at + tail:
                    break
                u_lat = k_lat @ (np.array([y_ref, 0.0, 0.0]) - x_lat)
                u_lon = k_lon @ (np.array([v_ref, 0.0]) - x_lon)
                x_lat = A_lat @ x_lat + (B_lat * u_lat).ravel()
                x_lon = A_lon @ x_lon + (B_lon * u_lon).ravel()
            raw.append((np.array(ys), np.array(vxs)))
        out[m] = raw
    return out


def synthesize_normalized(seed: int, geometry: LaneGeometry, T: float = 0.32,
                          n_traj: int = 30) -> dict[ManeuverId, TrajectoryCluster]:
    raw = synthesize_clusters(seed, geometry, T, n_traj)
    return {m: normalize_cluster(m, trajs, T) for m, trajs in raw.items()}


# ---------------------------------------------------------------------------
# Gain-set cache file
# ---------------------------------------------------------------------------


def save_gain_sets(gain_sets: dict[ManeuverId, GainSet], path) -> None:
    doc = {}
    for m, gs in sorted(gain_sets.items(), key=lambda kv: kv[0].value):
        doc[m.value] = {
            "lon_gains": [[float(v) for v in row] for row in gs.lon_gains],
            "lat_gains": [[float(v) for v in row] for row in gs.lat_gains],
            "warnings": int(gs.warnings),
            "lane_keep_std_y": float(gs.lane_keep_std_y),
        }
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(doc, fh, sort_keys=True)


def load_gain_sets(path) -> dict[ManeuverId, GainSet]:
    with open(path, "r", encoding="utf-8") as fh:
        doc = yaml.safe_load(fh)
    out = {}
    for key, entry in doc.items():
        m = ManeuverId(key)
        out[m] = GainSet(maneuver=m,
                         lon_gains=np.array(entry["lon_gains"], dtype=float),
                         lat_gains=np.array(entry["lat_gains"], dtype=float),
                         warnings=int(entry.get("warnings", 0)),
                         lane_keep_std_y=float(entry.get("lane_keep_std_y", 0.0)))
    return out


def default_gain_sets(geometry: LaneGeometry, T: float = 0.32, seed: int = 7,
                      n_traj: int = 30) -> dict[ManeuverId, GainSet]:
    """Gain sets identified from the built-in synthetic clusters."""
    return build_gain_sets(synthesize_normalized(seed, geometry, T, n_traj))
