"""Per-sensor multi-object filtering with hard measurement-to-object assignment.

Each step: predict all tracks, score every measurement against every predicted
track, pick the single best permutation (auction algorithm), update each track
with its assigned measurement.  The log-likelihood of the winning assignment
(the row-sum of the cost matrix along the permutation) is kept per step; it is
the step's scale factor in downstream pairwise likelihood evaluation.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field

import numpy as np

from .gaussians import (
    Gaussian,
    MotionModel,
    SensorModel,
    gaussian_logpdf,
    kf_predict,
    kf_update,
)

# Module-level instrumentation: how many sensor-window filter runs happened.
_RUN_COUNT = 0


def filter_run_count() -> int:
    return _RUN_COUNT


def reset_filter_run_count() -> None:
    global _RUN_COUNT
    _RUN_COUNT = 0


@dataclass
class TrackSet:
    """M object tracks (4-d Gaussians in the sensor's local frame) at step k."""

    tracks: list[Gaussian]
    step: int

    def __post_init__(self) -> None:
        if not self.tracks:
            raise ValueError("track set cannot be empty")
        for g in self.tracks:
            if g.dim != 4:
                raise ValueError("tracks must be 4-d Gaussians")

    @property
    def size(self) -> int:
        return len(self.tracks)

    def means(self) -> np.ndarray:
        return np.stack([g.mean for g in self.tracks])

    def covs(self) -> np.ndarray:
        return np.stack([g.cov for g in self.tracks])


@dataclass
class AssignmentSolution:
    """A permutation (measurement slot -> object index) and its total log-cost."""

    perm: np.ndarray
    total_logcost: float

    def __post_init__(self) -> None:
        self.perm = np.asarray(self.perm, dtype=np.int64)
        M = self.perm.shape[0]
        if sorted(self.perm.tolist()) != list(range(M)):
            raise ValueError("perm must be a bijection on 0..M-1")

    def inverse(self) -> np.ndarray:
        """Object index -> measurement slot."""
        inv = np.empty_like(self.perm)
        inv[self.perm] = np.arange(self.perm.shape[0])
        return inv


def build_cost_matrix(pred: TrackSet, Z: np.ndarray, s: SensorModel) -> np.ndarray:
    """c[o, m] = log N(z_o; H mean_m, R + H cov_m H^T) for predicted tracks."""
    Z = np.asarray(Z, dtype=np.float64)
    M = pred.size
    if Z.shape != (M, 2):
        raise ValueError(f"expected {M} 2-d measurements, got shape {Z.shape}")
    cost = np.empty((M, M))
    for m, g in enumerate(pred.tracks):
        innov_model = Gaussian(s.H @ g.mean, s.R + s.H @ g.cov @ s.H.T)
        for o in range(M):
            cost[o, m] = gaussian_logpdf(Z[o], innov_model)
    return cost


def brute_force_assign(cost: np.ndarray) -> AssignmentSolution:
    """Exact argmax over all M! permutations; lexicographically first on ties."""
    cost = np.asarray(cost, dtype=np.float64)
    M = cost.shape[0]
    if cost.shape != (M, M):
        raise ValueError("cost matrix must be square")
    if M > 8:
        raise ValueError("brute force limited to M <= 8")
    best_perm = None
    best_total = -np.inf
    rows = np.arange(M)
    for perm in itertools.permutations(range(M)):
        total = cost[rows, perm].sum()
        if total > best_total:
            best_total = total
            best_perm = perm
    return AssignmentSolution(np.array(best_perm), float(best_total))


def auction_assign(cost: np.ndarray) -> AssignmentSolution:
    """Forward auction with epsilon scaling, maximizing the total cost.

    Scaling schedule: eps starts at cost-range / M and divides by 4 until
    eps < 1e-6 / M; prices carry across scales.  Ties in bidding go to the
    lower object index, making the result deterministic.
    """
    cost = np.asarray(cost, dtype=np.float64)
    M = cost.shape[0]
    if cost.ndim != 2 or cost.shape != (M, M):
        raise ValueError("cost matrix must be square")
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost entries must be finite")
    if M == 1:
        return AssignmentSolution(np.array([0]), float(cost[0, 0]))

    spread = float(cost.max() - cost.min())
    eps_final = 1e-6 / M
    eps = max(spread / M, eps_final)
    prices = np.zeros(M)
    owner = np.full(M, -1, dtype=np.int64)  # object -> measurement
    assigned = np.full(M, -1, dtype=np.int64)  # measurement -> object

    while True:
        owner.fill(-1)
        assigned.fill(-1)
        unassigned = list(range(M))
        while unassigned:
            o = unassigned.pop(0)
            values = cost[o] - prices
            best = 0
            for m in range(1, M):  # strict > keeps the lowest index on ties
                if values[m] > values[best]:
                    best = m
            second = -np.inf
            for m in range(M):
                if m != best and values[m] > second:
                    second = values[m]
            bid = values[best] - second + eps
            prev = owner[best]
            if prev >= 0:
                assigned[prev] = -1
                unassigned.append(prev)
            owner[best] = o
            assigned[o] = best
            prices[best] += bid
        if eps < eps_final:
            break
        eps /= 4.0
    total = float(cost[np.arange(M), assigned].sum())
    return AssignmentSolution(assigned.copy(), total)


@dataclass
class FilterStep:
    """All artifacts of one predict-assign-update cycle."""

    step: int
    predicted: TrackSet
    posterior: TrackSet
    assignment: AssignmentSolution
    log_s: float

    @property
    def tau(self) -> np.ndarray:
        """Measurement slot -> object index."""
        return self.assignment.perm

    @property
    def rho(self) -> np.ndarray:
        """Object index -> measurement slot."""
        return self.assignment.inverse()


def filter_step(
    prev: TrackSet,
    Z_k: np.ndarray,
    motion: MotionModel,
    sensor: SensorModel,
    step: int = 0,
    fixed_assignment: np.ndarray | None = None,
) -> FilterStep:
    """Predict, associate (auction unless fixed), update.

    log_s is the total log-cost of the chosen assignment.
    """
    Z_k = np.asarray(Z_k, dtype=np.float64)
    M = prev.size
    if Z_k.shape != (M, 2):
        raise ValueError(f"closed world violated: expected {M} measurements, got {Z_k.shape}")
    predicted = TrackSet([kf_predict(g, motion) for g in prev.tracks], step)
    cost = build_cost_matrix(predicted, Z_k, sensor)
    if fixed_assignment is not None:
        perm = np.asarray(fixed_assignment, dtype=np.int64)
        sol = AssignmentSolution(perm, float(cost[np.arange(M), perm].sum()))
    else:
        sol = auction_assign(cost)
    rho = sol.inverse()
    posterior_tracks = []
    for m in range(M):
        post, _, _ = kf_update(predicted.tracks[m], Z_k[rho[m]], sensor)
        posterior_tracks.append(post)
    return FilterStep(
        step=step,
        predicted=predicted,
        posterior=TrackSet(posterior_tracks, step),
        assignment=sol,
        log_s=sol.total_logcost,
    )


@dataclass
class FilterOutput:
    """Per-step filter artifacts for one sensor over a window.

    measurements holds the sensor's own window (t, M, 2); downstream pairwise
    factors read one sensor's measurements and the other's tracks only.
    """

    steps: list[FilterStep]
    seed_tracks: TrackSet
    measurements: np.ndarray
    sensor: SensorModel = field(repr=False)
    motion: MotionModel = field(repr=False)

    @property
    def window_length(self) -> int:
        return len(self.steps)

    @property
    def n_objects(self) -> int:
        return self.seed_tracks.size

    def log_s(self) -> np.ndarray:
        return np.array([st.log_s for st in self.steps])


def seed_tracks_from_measurements(
    Z0: np.ndarray, sensor: SensorModel, velocity_std: float = 100.0
) -> TrackSet:
    """Position = measurement, velocity = 0, variance (R-scale, velocity_std^2)."""
    Z0 = np.asarray(Z0, dtype=np.float64)
    pos_var = float(sensor.R[0, 0])
    tracks = []
    for z in Z0:
        mean = np.array([z[0], z[1], 0.0, 0.0])
        cov = np.diag([pos_var, pos_var, velocity_std**2, velocity_std**2])
        tracks.append(Gaussian(mean, cov))
    return TrackSet(tracks, step=0)


def run_local_filter(
    Z_window: np.ndarray,
    motion: MotionModel,
    sensor: SensorModel,
    fixed_assignments: np.ndarray | None = None,
    velocity_std: float = 100.0,
) -> FilterOutput:
    """Filter one sensor's measurement window Z_window of shape (t, M, 2).

    Tracks are seeded from the first window step, then the uniform
    predict/associate/update cycle runs for every step including the first.
    fixed_assignments (t, M) bypasses the auction (known-association runs).
    """
    global _RUN_COUNT
    Z_window = np.asarray(Z_window, dtype=np.float64)
    if Z_window.ndim != 3 or Z_window.shape[2] != 2:
        raise ValueError("Z_window must be (t, M, 2)")
    t = Z_window.shape[0]
    if t < 1:
        raise ValueError("window must contain at least one step")
    if fixed_assignments is not None:
        fixed_assignments = np.asarray(fixed_assignments, dtype=np.int64)
        if fixed_assignments.shape != Z_window.shape[:2]:
            raise ValueError("fixed_assignments must be (t, M)")
    seed = seed_tracks_from_measurements(Z_window[0], sensor, velocity_std)
    steps: list[FilterStep] = []
    prev = seed
    for k in range(t):
        fixed = None if fixed_assignments is None else fixed_assignments[k]
        st = filter_step(prev, Z_window[k], motion, sensor, step=k + 1, fixed_assignment=fixed)
        steps.append(st)
        prev = st.posterior
    _RUN_COUNT += 1
    return FilterOutput(
        steps=steps,
        seed_tracks=seed,
        measurements=Z_window.copy(),
        sensor=sensor,
        motion=motion,
    )


# --- JSON round trip ---------------------------------------------------------

def _trackset_to_dict(ts: TrackSet) -> dict:
    return {
        "step": ts.step,
        "means": ts.means().tolist(),
        "covs": ts.covs().tolist(),
    }


def _trackset_from_dict(d: dict) -> TrackSet:
    tracks = [Gaussian(np.array(m), np.array(c)) for m, c in zip(d["means"], d["covs"])]
    return TrackSet(tracks, d["step"])


def filter_output_to_dict(out: FilterOutput) -> dict:
    return {
        "seed_tracks": _trackset_to_dict(out.seed_tracks),
        "steps": [
            {
                "step": st.step,
                "predicted": _trackset_to_dict(st.predicted),
                "posterior": _trackset_to_dict(st.posterior),
                "perm": st.assignment.perm.tolist(),
                "total_logcost": st.assignment.total_logcost,
                "log_s": st.log_s,
            }
            for st in out.steps
        ],
    }


def filter_output_to_json(out: FilterOutput) -> str:
    return json.dumps(filter_output_to_dict(out))
