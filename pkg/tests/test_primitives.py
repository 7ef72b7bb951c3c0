import numpy as np
import pytest

from isaplan import primitives as pr
from isaplan.world import LaneGeometry, ManeuverId, ScenarioError, SvState

T = 0.32
GEO = LaneGeometry()


def test_block_matrices_match_model_forms():
    A, B = pr.full_matrices(T)
    Ax = np.array([[1, T, T * T / 2], [0, 1, T], [0, 0, 1]])
    assert np.allclose(A[:3, :3], Ax)
    assert np.allclose(A[3:, 3:], Ax)
    assert np.allclose(A[:3, 3:], 0.0)
    assert np.allclose(B[:3, 0], [0.0, T * T / 2, T])
    assert np.allclose(B[3:, 1], [T ** 3 / 6, T * T / 2, T])


def test_step_primitive_equilibrium():
    # at the references with zero speed nothing moves
    model = pr.PrimitiveModel(T=T, v_ref=0.0, y_ref=2.0, k_lon=(0.1, 0.3), k_lat=(0.1, 0.4, 0.5))
    state = SvState(x=5.0, v_x=0.0, a_x=0.0, y=2.0, v_y=0.0, a_y=0.0)
    assert pr.step_primitive(state, model) == state


def test_step_primitive_constant_velocity_row():
    model = pr.PrimitiveModel(T=T, v_ref=10.0, y_ref=0.0, k_lon=(0.2, 0.3), k_lat=(0.1, 0.4, 0.5))
    state = SvState(x=0.0, v_x=10.0, a_x=0.0, y=0.0, v_y=0.0, a_y=0.0)
    nxt = pr.step_primitive(state, model)
    assert nxt.x == pytest.approx(3.2)
    assert nxt.v_x == pytest.approx(10.0)
    assert nxt.a_x == pytest.approx(0.0)
    assert nxt.y == pytest.approx(0.0)


def test_rollout_affine_in_references():
    # linear closed loop: state response is affine in (v_ref, y_ref)
    rng = np.random.default_rng(5)
    k_lon = (0.15, 0.35)
    k_lat = (0.12, 0.45, 0.5)
    state = SvState(x=3.0, v_x=22.0, a_x=0.1, y=5.5, v_y=0.05, a_y=0.0)

    def roll(v_ref, y_ref):
        model = pr.PrimitiveModel(T=T, v_ref=v_ref, y_ref=y_ref, k_lon=k_lon, k_lat=k_lat)
        return pr.rollout_states(state, model, 20)

    base = roll(0.0, 0.0)
    unit_v = roll(1.0, 0.0) - base
    unit_y = roll(0.0, 1.0) - base
    for _ in range(5):
        v_ref = rng.uniform(-30, 30)
        y_ref = rng.uniform(-8, 8)
        assert np.allclose(roll(v_ref, y_ref), base + v_ref * unit_v + y_ref * unit_y,
                           rtol=1e-10, atol=1e-9)


def test_normalize_cluster_extends_short_trajectories():
    y1 = np.linspace(0.0, 3.0, 10)
    v1 = np.full(10, 20.0)
    y2 = np.linspace(0.0, 2.0, 7)
    v2 = np.linspace(20.0, 22.0, 7)
    cluster = pr.normalize_cluster(ManeuverId.M1, [(y1, v1), (y2, v2)], T)
    assert cluster.n_steps == 10
    assert np.allclose(cluster.y[1, 7:], y2[-1])
    assert np.allclose(cluster.vx[1, 7:], v2[-1])
    # samples before the original end are untouched
    assert np.allclose(cluster.y[1, :7], y2)
    assert np.allclose(cluster.vx[0], v1)


def test_normalize_cluster_single_and_equal():
    y = np.linspace(0.0, 1.0, 8)
    v = np.full(8, 15.0)
    single = pr.normalize_cluster(ManeuverId.M0, [(y, v)], T)
    assert np.allclose(single.y[0], y)
    equal = pr.normalize_cluster(ManeuverId.M0, [(y, v), (y + 1, v)], T)
    assert equal.n_steps == 8
    assert np.allclose(equal.y[1], y + 1)


def test_normalize_cluster_empty_rejected():
    with pytest.raises(ScenarioError):
        pr.normalize_cluster(ManeuverId.M0, [], T)


def test_identify_gain_roundtrip_known_gain():
    # forward-simulate oracle: data from a known LQR gain, then re-identify
    A, B = pr.lat_matrices(T)
    k_true = pr.dlqr(A, B, np.diag([2.0, 0.3, 0.05]), np.eye(1)).ravel()
    ref = np.array([3.75, 0.0, 0.0])
    x = np.array([0.0, 0.0, 0.0])
    ys = []
    for _ in range(60):
        ys.append(x[0])
        u = k_true @ (ref - x)
        x = A @ x + (B * u).ravel()
    ys = np.array(ys)
    k_id, warned = pr.identify_gain(ys, ManeuverId.M1, "lateral", T)
    assert not warned
    rmse = pr.refit_rmse(ys, k_id, "lateral", T)
    assert rmse < 1e-3 * GEO.lane_width
    assert pr.closed_loop_radius(A, B, k_id.reshape(1, -1)) < 1.0


def test_identify_gain_constant_trajectory_degenerate():
    ys = np.full(20, 5.625)
    k_id, warned = pr.identify_gain(ys, ManeuverId.M3, "lateral", T)
    # zero tracking error everywhere: the identity-weight gain comes back
    assert warned
    A, B = pr.lat_matrices(T)
    k0 = pr.dlqr(A, B, np.eye(3), np.eye(1)).ravel()
    assert np.allclose(k_id, k0)


def test_build_gain_sets_cardinality_and_means():
    y = np.linspace(0.0, 3.75, 25)
    v = np.full(25, 20.0)
    cluster = pr.normalize_cluster(ManeuverId.M1, [(y, v)] * 4, T)
    sets = pr.build_gain_sets({ManeuverId.M1: cluster})
    gs = sets[ManeuverId.M1]
    assert gs.lon_gains.shape == (4, 2)
    assert gs.lat_gains.shape == (4, 3)
    # identical trajectories give identical gains; the mean equals each member
    assert np.allclose(gs.lat_gains, gs.lat_gains[0])
    assert np.allclose(gs.k_lat_mean, gs.lat_gains[0])
    assert np.allclose(gs.k_lon_mean, gs.lon_gains[0])


def test_ev_table_gains_are_stabilizing():
    from isaplan.world import PlannerParams

    p = PlannerParams()
    assert p.k_lon_ev == (0.1029, 0.3423)
    assert p.k_lat_ev == (0.0984, 0.4656, 0.5417)
    A, B = pr.lon_reduced(T)
    assert pr.closed_loop_radius(A, B, np.array([p.k_lon_ev])) < 1.0
    A, B = pr.lat_matrices(T)
    assert pr.closed_loop_radius(A, B, np.array([p.k_lat_ev])) < 1.0


def test_synthesize_deterministic_and_shapes():
    raw1 = pr.synthesize_clusters(42, GEO, T, n_traj=6)
    raw2 = pr.synthesize_clusters(42, GEO, T, n_traj=6)
    for m in ManeuverId:
        assert len(raw1[m]) == 6
        for (y1, v1), (y2, v2) in zip(raw1[m], raw2[m]):
            assert np.array_equal(y1, y2)
            assert np.array_equal(v1, v2)


def test_synthesize_m1_terminal_near_target():
    clusters = pr.synthesize_normalized(7, GEO, T, n_traj=12)
    c = clusters[ManeuverId.M1]
    assert np.all(np.abs(c.y[:, -1] - GEO.lane_width) < 0.3)


def test_synthesize_lane_keep_std_roughly_constant():
    clusters = pr.synthesize_normalized(7, GEO, T, n_traj=25)
    stds = np.std(clusters[ManeuverId.M0].y, axis=0, ddof=1)
    assert stds.max() / stds.min() < 2.5


def test_cluster_csv_roundtrip(tmp_path):
    import csv

    clusters = pr.synthesize_normalized(3, GEO, T, n_traj=3)
    c = clusters[ManeuverId.M4]
    path = tmp_path / "m4.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["trajectory_id", "step", "y_meters", "vx_meters_per_second"])
        for n in range(c.n_traj):
            for j in range(c.n_steps):
                w.writerow([f"t{n}", j, repr(float(c.y[n, j])), repr(float(c.vx[n, j]))])
    loaded = pr.load_cluster_csv(path, ManeuverId.M4, T)
    assert np.allclose(loaded.y, c.y)
    assert np.allclose(loaded.vx, c.vx)


def test_gain_set_cache_roundtrip(tmp_path):
    rng = np.random.default_rng(1)
    gs = {
        ManeuverId.M0: pr.GainSet(
            maneuver=ManeuverId.M0,
            lon_gains=rng.uniform(0.05, 0.5, (5, 2)),
            lat_gains=rng.uniform(0.05, 0.5, (5, 3)),
            warnings=1,
            lane_keep_std_y=0.17,
        )
    }
    path = tmp_path / "gains.yaml"
    pr.save_gain_sets(gs, path)
    loaded = pr.load_gain_sets(path)
    assert np.allclose(loaded[ManeuverId.M0].lon_gains, gs[ManeuverId.M0].lon_gains)
    assert np.allclose(loaded[ManeuverId.M0].lat_gains, gs[ManeuverId.M0].lat_gains)
    assert loaded[ManeuverId.M0].lane_keep_std_y == pytest.approx(0.17)
    assert loaded[ManeuverId.M0].warnings == 1
