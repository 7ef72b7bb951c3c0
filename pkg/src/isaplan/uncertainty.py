"""Online sampling-based quantification of per-maneuver trajectory spread.

For one (vehicle, maneuver) pair: draw gain pairs uniformly from the
identified sets, roll the primitive model out from the exactly-observed
current state toward the inferred references, and report per-step sample
standard deviations of the longitudinal and lateral positions.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import primitives as pr
from .world import ManeuverId, SvState


@dataclass(frozen=True)
class StdTrack:
    """Per-step position standard deviations over the prediction horizon."""

    sv_id: str
    maneuver: ManeuverId
    sigma_x: np.ndarray = field(repr=False)  # (N,) for t = k+1..k+N
    sigma_y: np.ndarray = field(repr=False)

    def __post_init__(self):
        if np.any(self.sigma_x < 0) or np.any(self.sigma_y < 0):
            raise ValueError("standard deviations must be nonnegative")


def sample_rollouts(state: SvState, v_ref: float, y_ref: float, gains: pr.GainSet,
                    k_sam: int, N: int, T: float, rng: np.random.Generator) -> np.ndarray:
    """(N, k_sam, 6) rollouts under gains drawn uniformly with replacement.

    Longitudinal and lateral gains are drawn independently, matching their
    treatment as independent uniform random variables over the sets.
    """
    lon_idx = rng.integers(0, gains.lon_gains.shape[0], size=k_sam)
    lat_idx = rng.integers(0, gains.lat_gains.shape[0], size=k_sam)
    k_lon = gains.lon_gains[lon_idx]
    k_lat = gains.lat_gains[lat_idx]
    states = np.tile(np.asarray(state.as_vector(), dtype=float), (k_sam, 1))
    return pr.rollout_batch(states, k_lon, k_lat, v_ref, y_ref, T, N)


def quantify(sv_id: str, state: SvState, maneuver: ManeuverId,
             v_ref: float, y_ref: float, gains: pr.GainSet,
             k_sam: int, N: int, T: float, rng: np.random.Generator) -> StdTrack:
    """Sample-based STD track of one maneuver from the current state."""
    if k_sam < 2:
        raise ValueError("k_sam must be >= 2")
    rolls = sample_rollouts(state, v_ref, y_ref, gains, k_sam, N, T, rng)
    sigma_x = np.std(rolls[:, :, 0], axis=1, ddof=1)
    sigma_y = np.std(rolls[:, :, 3], axis=1, ddof=1)
    return StdTrack(sv_id=sv_id, maneuver=maneuver, sigma_x=sigma_x, sigma_y=sigma_y)


def lane_keep_std(cluster: pr.TrajectoryCluster) -> float:
    """Constant lateral STD for lane-keeping modes: per-step cluster STD,
    averaged over the horizon."""
    if not cluster.maneuver.is_lane_keep:
        raise ValueError(f"{cluster.maneuver.value} is not a lane-keeping maneuver")
    if cluster.n_traj < 2:
        return 0.0
    return float(np.mean(np.std(cluster.y, axis=0, ddof=1)))


def apply_lane_keep_constant(track: StdTrack, constant_sigma_y: float) -> StdTrack:
    """Replace the lateral STD of a lane-keeping mode by its cluster constant."""
    return StdTrack(sv_id=track.sv_id, maneuver=track.maneuver,
                    sigma_x=track.sigma_x,
                    sigma_y=np.full_like(track.sigma_y, constant_sigma_y))


def export_sampled_cluster(path, rolls: np.ndarray) -> None:
    """Write sampled rollouts (N, K, 6) as a plotting-friendly CSV."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample_id", "step", "x", "y", "v_x", "v_y"])
        n_steps, n_samples, _ = rolls.shape
        for i in range(n_samples):
            for t in range(n_steps):
                writer.writerow([i, t + 1,
                                 f"{rolls[t, i, 0]:.9g}", f"{rolls[t, i, 3]:.9g}",
                                 f"{rolls[t, i, 1]:.9g}", f"{rolls[t, i, 4]:.9g}"])
