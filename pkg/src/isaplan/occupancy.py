"""Safety-aware obstacle occupancy from truncated Gaussian mixtures.

Each (vehicle, time-step) slice holds one peak-normalized Gaussian component
per maneuver: component m contributes p_m at its own peak, so thresholding
the mixture at a fraction eps of the global peak keeps exactly the modes
whose probability competes with the dominant one.  The consumed quantity is
the axis-aligned bounding box of the eps-superlevel set, dilated by the
common vehicle footprint.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import primitives as pr
from .predictor import ManeuverPrediction, most_probable
from .uncertainty import StdTrack
from .world import PlannerParams, VehicleShape

TRUNCATION_SIGMAS = 4.0


@dataclass(frozen=True)
class GmmMode:
    weight: float
    mu_x: float
    mu_y: float
    sigma_x: float
    sigma_y: float


@dataclass(frozen=True)
class GmmSlice:
    """Mixture over one vehicle's maneuvers at one prediction step."""

    sv_id: str
    t: int
    modes: tuple[GmmMode, ...]
    x_bounds: tuple[float, float] = field(init=False)
    y_bounds: tuple[float, float] = field(init=False)

    def __post_init__(self):
        if not self.modes:
            raise ValueError("GmmSlice needs at least one mode")
        total = sum(m.weight for m in self.modes)
        if not math.isclose(total, 1.0, abs_tol=1e-6):
            raise ValueError(f"mode weights sum to {total}, expected 1")
        if any(m.sigma_x <= 0 or m.sigma_y <= 0 for m in self.modes):
            raise ValueError("mode sigmas must be positive (apply the sigma floor)")
        xs_lo = min(m.mu_x - TRUNCATION_SIGMAS * m.sigma_x for m in self.modes)
        xs_hi = max(m.mu_x + TRUNCATION_SIGMAS * m.sigma_x for m in self.modes)
        ys_lo = min(m.mu_y - TRUNCATION_SIGMAS * m.sigma_y for m in self.modes)
        ys_hi = max(m.mu_y + TRUNCATION_SIGMAS * m.sigma_y for m in self.modes)
        object.__setattr__(self, "x_bounds", (xs_lo, xs_hi))
        object.__setattr__(self, "y_bounds", (ys_lo, ys_hi))


@dataclass(frozen=True)
class OccupancyRect:
    """Axis-aligned occupancy rectangle: center plus side lengths."""

    center_x: float
    center_y: float
    length: float
    width: float

    @property
    def front_edge(self) -> float:
        return self.center_x - self.length / 2.0  # edge facing a follower

    def contains(self, other: "OccupancyRect", tol: float = 1e-9) -> bool:
        return (self.center_x - self.length / 2 <= other.center_x - other.length / 2 + tol
                and self.center_x + self.length / 2 >= other.center_x + other.length / 2 - tol
                and self.center_y - self.width / 2 <= other.center_y - other.width / 2 + tol
                and self.center_y + self.width / 2 >= other.center_y + other.width / 2 - tol)

    def overlaps(self, other: "OccupancyRect") -> bool:
        return (abs(self.center_x - other.center_x) < (self.length + other.length) / 2
                and abs(self.center_y - other.center_y) < (self.width + other.width) / 2)


def eval_pdf(slc: GmmSlice, x: float, y: float) -> float:
    """Peak-normalized mixture density; zero outside the truncation box."""
    if not (slc.x_bounds[0] <= x <= slc.x_bounds[1]
            and slc.y_bounds[0] <= y <= slc.y_bounds[1]):
        return 0.0
    total = 0.0
    for m in slc.modes:
        dx = (x - m.mu_x) / m.sigma_x
        dy = (y - m.mu_y) / m.sigma_y
        total += m.weight * math.exp(-0.5 * (dx * dx + dy * dy))
    return total


def level_rect(slc: GmmSlice, eps: float, grid_dx: float = 0.1,
               grid_dy: float = 0.05) -> OccupancyRect:
    """Bounding box of the eps-superlevel set, found on a regular grid.

    The superlevel set shares its bounding box with the level-set boundary,
    which is the only quantity consumed downstream.
    """
    if not 0.0 < eps <= 1.0:
        raise ValueError(f"eps must lie in (0, 1], got {eps}")
    xs = np.arange(slc.x_bounds[0], slc.x_bounds[1] + grid_dx / 2, grid_dx)
    ys = np.arange(slc.y_bounds[0], slc.y_bounds[1] + grid_dy / 2, grid_dy)
    # separable components: mixture grid = sum of weighted outer products
    density = np.zeros((xs.size, ys.size))
    for m in slc.modes:
        gx = np.exp(-0.5 * ((xs - m.mu_x) / m.sigma_x) ** 2)
        gy = np.exp(-0.5 * ((ys - m.mu_y) / m.sigma_y) ** 2)
        density += m.weight * np.outer(gx, gy)
    f_max = density.max()
    mask = density >= eps * f_max
    x_any = mask.any(axis=1)
    y_any = mask.any(axis=0)
    x_sel = xs[x_any]
    y_sel = ys[y_any]
    return OccupancyRect(center_x=float((x_sel[0] + x_sel[-1]) / 2),
                         center_y=float((y_sel[0] + y_sel[-1]) / 2),
                         length=float(x_sel[-1] - x_sel[0]),
                         width=float(y_sel[-1] - y_sel[0]))


def dilate(rect: OccupancyRect, shape: VehicleShape) -> OccupancyRect:
    """Minkowski sum with the vehicle footprint (heading ignored)."""
    return OccupancyRect(center_x=rect.center_x, center_y=rect.center_y,
                         length=rect.length + shape.length,
                         width=rect.width + shape.width)


def assemble_slices(sv_id: str, predictions: list[ManeuverPrediction],
                    std_tracks: dict, N: int, sigma_floor: float) -> list[GmmSlice]:
    """Per-step GMM slices for one vehicle from predictions and STD tracks."""
    slices = []
    for t in range(N):
        modes = []
        for p in predictions:
            key = (sv_id, p.maneuver)
            if key not in std_tracks:
                raise KeyError(f"missing STD track for vehicle {sv_id}, "
                               f"maneuver {p.maneuver.value}, step {t + 1}")
            track: StdTrack = std_tracks[key]
            if t >= len(track.sigma_x):
                raise KeyError(f"STD track too short for vehicle {sv_id}, "
                               f"maneuver {p.maneuver.value}, step {t + 1}")
            modes.append(GmmMode(weight=p.probability,
                                 mu_x=float(p.states[t, 0]), mu_y=float(p.states[t, 3]),
                                 sigma_x=max(float(track.sigma_x[t]), sigma_floor),
                                 sigma_y=max(float(track.sigma_y[t]), sigma_floor)))
        slices.append(GmmSlice(sv_id=sv_id, t=t + 1, modes=tuple(modes)))
    return slices


def build_occupancy(predictions: dict[str, list[ManeuverPrediction]],
                    std_tracks: dict, eps: float, shape: VehicleShape,
                    params: PlannerParams, N: int) -> dict[str, list[OccupancyRect]]:
    """Per-SV dilated occupancy rectangles for every prediction step."""
    out: dict[str, list[OccupancyRect]] = {}
    for sv_id, preds in predictions.items():
        slices = assemble_slices(sv_id, preds, std_tracks, N, params.sigma_floor)
        out[sv_id] = [dilate(level_rect(s, eps, params.grid_dx, params.grid_dy), shape)
                      for s in slices]
    return out


def deterministic_occupancy(predictions: dict[str, list[ManeuverPrediction]],
                            shape: VehicleShape) -> dict[str, list[OccupancyRect]]:
    """Baseline: the most probable nominal trajectory dilated by the footprint."""
    out: dict[str, list[OccupancyRect]] = {}
    for sv_id, preds in predictions.items():
        best = most_probable(preds)
        out[sv_id] = [dilate(OccupancyRect(center_x=float(x), center_y=float(y),
                                           length=0.0, width=0.0), shape)
                      for x, y in zip(best.x_nom, best.y_nom)]
    return out


def scmpc_occupancy(predictions: dict[str, list[ManeuverPrediction]],
                    gain_sets: dict, k_sc: int, shape: VehicleShape,
                    T: float, rng: np.random.Generator,
                    return_samples: bool = False):
    """Scenario baseline: bounding boxes of maneuver-sampled rollouts.

    Each vehicle consumes an independent child generator so that the first
    draws are shared when k_sc grows (monotone occupancy under a common seed).
    """
    out: dict[str, list[OccupancyRect]] = {}
    samples: dict[str, np.ndarray] = {}
    sv_ids = list(predictions)
    children = rng.spawn(len(sv_ids))
    for sv_id, child in zip(sv_ids, children):
        preds = predictions[sv_id]
        probs = np.array([p.probability for p in preds])
        probs = probs / probs.sum()
        n_steps = preds[0].states.shape[0]
        pts = np.empty((n_steps, k_sc, 2))
        for i in range(k_sc):
            pick = int(child.choice(len(preds), p=probs))
            p = preds[pick]
            gs = gain_sets[p.maneuver]
            lon = gs.lon_gains[int(child.integers(0, gs.lon_gains.shape[0]))]
            lat = gs.lat_gains[int(child.integers(0, gs.lat_gains.shape[0]))]
            state0 = np.asarray(p.state0.as_vector(), dtype=float)
            roll = pr.rollout_batch(state0[None, :], lon[None, :], lat[None, :],
                                    p.v_ref, p.y_ref, T, n_steps)[:, 0, :]
            pts[:, i, 0] = roll[:, 0]
            pts[:, i, 1] = roll[:, 3]
        rects = []
        for t in range(n_steps):
            x_lo, x_hi = pts[t, :, 0].min(), pts[t, :, 0].max()
            y_lo, y_hi = pts[t, :, 1].min(), pts[t, :, 1].max()
            rects.append(dilate(OccupancyRect(center_x=float((x_lo + x_hi) / 2),
                                              center_y=float((y_lo + y_hi) / 2),
                                              length=float(x_hi - x_lo),
                                              width=float(y_hi - y_lo)), shape))
        out[sv_id] = rects
        samples[sv_id] = pts
    if return_samples:
        return out, samples
    return out


def rects_to_rows(occupancy: dict[str, list[OccupancyRect]]) -> list[tuple]:
    """(t, sv_id, center_x, center_y, length, width) rows for CSV export."""
    rows = []
    for sv_id in sorted(occupancy):
        for t, r in enumerate(occupancy[sv_id], start=1):
            rows.append((t, sv_id, r.center_x, r.center_y, r.length, r.width))
    return rows
