"""Scenario generation: sensor grid, object trajectories, permuted measurements.

Closed world: every sensor sees exactly M measurements per step, one per
object, stored in a uniformly random order.  The generating permutation per
sensor and step is kept as ground truth for association scoring.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .gaussians import MotionModel, SensorModel


@dataclass
class NetworkGraph:
    """Sensor ids (1-based), ground-truth offsets, undirected edges, anchor."""

    node_ids: list[int]
    offsets: np.ndarray  # (n, 2), row i is the offset of node_ids[i]
    edges: list[tuple[int, int]]  # (lower id, higher id)
    anchor: int = 1

    def __post_init__(self) -> None:
        self.offsets = np.asarray(self.offsets, dtype=np.float64).reshape(len(self.node_ids), 2)
        self.edges = [(min(a, b), max(a, b)) for a, b in self.edges]
        ids = set(self.node_ids)
        if self.anchor not in ids:
            raise ValueError("anchor must be a node")
        for a, b in self.edges:
            if a not in ids or b not in ids:
                raise ValueError(f"edge ({a},{b}) references unknown node")
        if not self.is_connected():
            raise ValueError("network must be connected")

    def index(self, node_id: int) -> int:
        return self.node_ids.index(node_id)

    def offset_of(self, node_id: int) -> np.ndarray:
        return self.offsets[self.index(node_id)]

    def neighbors(self, node_id: int) -> list[int]:
        out = []
        for a, b in self.edges:
            if a == node_id:
                out.append(b)
            elif b == node_id:
                out.append(a)
        return sorted(out)

    def is_connected(self) -> bool:
        if not self.node_ids:
            return False
        seen = {self.node_ids[0]}
        frontier = [self.node_ids[0]]
        while frontier:
            nxt = []
            for u in frontier:
                for v in self.neighbors(u):
                    if v not in seen:
                        seen.add(v)
                        nxt.append(v)
            frontier = nxt
        return len(seen) == len(self.node_ids)


def build_grid_network(rows: int, cols: int, spacing: float) -> NetworkGraph:
    """Lattice of sensors with 4-neighbour edges; node 1 sits at the origin.

    Node ids are row-major starting at 1; offsets are lattice coordinates in
    metres relative to node 1.
    """
    if rows * cols < 2:
        raise ValueError("need at least two nodes")
    if spacing <= 0:
        raise ValueError("spacing must be positive")
    node_ids = []
    offsets = []
    edges = []
    for r in range(rows):
        for c in range(cols):
            nid = r * cols + c + 1
            node_ids.append(nid)
            offsets.append([c * spacing, r * spacing])
            if c + 1 < cols:
                edges.append((nid, nid + 1))
            if r + 1 < rows:
                edges.append((nid, nid + cols))
    return NetworkGraph(node_ids=node_ids, offsets=np.array(offsets), edges=edges, anchor=1)


@dataclass
class ScenarioConfig:
    """Everything needed to regenerate a scenario bit-exactly."""

    rows: int = 4
    cols: int = 4
    spacing: float = 1000.0
    n_objects: int = 4
    n_steps: int = 60
    sigma_n: float = 10.0
    motion: MotionModel = field(default_factory=MotionModel)
    initial_states: np.ndarray | None = None  # (M, 4) or None for defaults
    initial_speed: float = 10.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.spacing <= 0:
            raise ValueError("spacing must be positive")
        if self.n_steps < 1:
            raise ValueError("need at least one step")
        if self.n_objects < 1:
            raise ValueError("need at least one object")
        if self.initial_states is not None:
            self.initial_states = np.asarray(self.initial_states, dtype=np.float64).reshape(
                self.n_objects, 4
            )

    def sensor_model(self) -> SensorModel:
        return SensorModel.position_sensor(self.sigma_n)


@dataclass
class Scenario:
    """Ground truth plus everything each sensor observed."""

    config: ScenarioConfig
    network: NetworkGraph
    trajectories: np.ndarray  # (M, K, 4) global frame
    measurements: dict[int, np.ndarray]  # sensor id -> (K, M, 2), permuted order
    true_permutations: dict[int, np.ndarray]  # sensor id -> (K, M); slot -> object
    rng_seed: int = 0

    def measurement_window(self, sensor_id: int, start: int, length: int) -> np.ndarray:
        """Rows start..start+length-1 (0-based step index) for one sensor."""
        K = self.trajectories.shape[1]
        if start < 0 or start + length > K:
            raise ValueError(f"window [{start}, {start + length}) exceeds scenario length {K}")
        return self.measurements[sensor_id][start : start + length]


def default_initial_states(cfg: ScenarioConfig, net: NetworkGraph, rng: np.random.Generator) -> np.ndarray:
    """Objects start in the central part of the sensor hull, ~initial_speed."""
    lo = net.offsets.min(axis=0)
    hi = net.offsets.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    pos = rng.uniform(lo + 0.2 * span, hi - 0.2 * span, size=(cfg.n_objects, 2))
    heading = rng.uniform(0.0, 2.0 * np.pi, size=cfg.n_objects)
    vel = cfg.initial_speed * np.stack([np.cos(heading), np.sin(heading)], axis=1)
    return np.hstack([pos, vel])


def simulate_trajectories(cfg: ScenarioConfig, net: NetworkGraph, rng: np.random.Generator) -> np.ndarray:
    """Sample x_k = F x_{k-1} + w, w ~ N(0, Q), for all objects."""
    m = cfg.motion
    x0 = cfg.initial_states
    if x0 is None:
        x0 = default_initial_states(cfg, net, rng)
    # Q may be singular PSD; sample noise through an eigendecomposition.
    evals, evecs = np.linalg.eigh(m.Q)
    root = evecs @ np.diag(np.sqrt(np.clip(evals, 0.0, None)))
    traj = np.empty((cfg.n_objects, cfg.n_steps, 4))
    traj[:, 0] = x0
    for k in range(1, cfg.n_steps):
        noise = rng.standard_normal((cfg.n_objects, 4)) @ root.T
        traj[:, k] = traj[:, k - 1] @ m.F.T + noise
    return traj


def generate_measurements(
    traj: np.ndarray,
    net: NetworkGraph,
    sensor: SensorModel,
    rng: np.random.Generator,
) -> tuple[dict[int, np.ndarray], dict[int, np.ndarray]]:
    """Per sensor and step: z = H (x - [offset; 0, 0]) + v, shuffled uniformly.

    Returns (measurements, permutations); measurements[j][k, o] was generated
    by object permutations[j][k, o].
    """
    M, K, _ = traj.shape
    chol_R = np.linalg.cholesky(sensor.R)
    measurements: dict[int, np.ndarray] = {}
    permutations: dict[int, np.ndarray] = {}
    for idx, node_id in enumerate(net.node_ids):
        local = traj.copy()
        local[:, :, :2] -= net.offsets[idx]
        clean = np.einsum("ij,mkj->mki", sensor.H, local)  # (M, K, 2)
        noise = rng.standard_normal((M, K, 2)) @ chol_R.T
        noisy = clean + noise
        Z = np.empty((K, M, 2))
        P = np.empty((K, M), dtype=np.int64)
        for k in range(K):
            perm = rng.permutation(M)
            P[k] = perm
            Z[k] = noisy[perm, k]
        measurements[node_id] = Z
        permutations[node_id] = P
    return measurements, permutations


def make_scenario(cfg: ScenarioConfig) -> Scenario:
    """Generate network, trajectories, and measurements from cfg.seed."""
    net = build_grid_network(cfg.rows, cfg.cols, cfg.spacing)
    rng = np.random.default_rng(cfg.seed)
    traj = simulate_trajectories(cfg, net, rng)
    meas, perms = generate_measurements(traj, net, cfg.sensor_model(), rng)
    return Scenario(
        config=cfg,
        network=net,
        trajectories=traj,
        measurements=meas,
        true_permutations=perms,
        rng_seed=cfg.seed,
    )


# --- JSON round trip ---------------------------------------------------------
# Layout: {"config": {...}, "network": {...}, "trajectories": [...],
#          "measurements": {"<sensor id>": [...]},
#          "true_permutations": {"<sensor id>": [...]}, "rng_seed": int}

def scenario_to_dict(s: Scenario) -> dict:
    cfg = s.config
    return {
        "config": {
            "rows": cfg.rows,
            "cols": cfg.cols,
            "spacing": cfg.spacing,
            "n_objects": cfg.n_objects,
            "n_steps": cfg.n_steps,
            "sigma_n": cfg.sigma_n,
            "motion": {
                "dt": cfg.motion.dt,
                "sigma2": cfg.motion.sigma2,
                "q1": cfg.motion.q1,
                "q2": cfg.motion.q2,
                "q3": cfg.motion.q3,
            },
            "initial_states": None
            if cfg.initial_states is None
            else cfg.initial_states.tolist(),
            "initial_speed": cfg.initial_speed,
            "seed": cfg.seed,
        },
        "network": {
            "node_ids": s.network.node_ids,
            "offsets": s.network.offsets.tolist(),
            "edges": [list(e) for e in s.network.edges],
            "anchor": s.network.anchor,
        },
        "trajectories": s.trajectories.tolist(),
        "measurements": {str(j): z.tolist() for j, z in s.measurements.items()},
        "true_permutations": {str(j): p.tolist() for j, p in s.true_permutations.items()},
        "rng_seed": s.rng_seed,
    }


def scenario_from_dict(d: dict) -> Scenario:
    c = d["config"]
    cfg = ScenarioConfig(
        rows=c["rows"],
        cols=c["cols"],
        spacing=c["spacing"],
        n_objects=c["n_objects"],
        n_steps=c["n_steps"],
        sigma_n=c["sigma_n"],
        motion=MotionModel(**c["motion"]),
        initial_states=None if c["initial_states"] is None else np.array(c["initial_states"]),
        initial_speed=c["initial_speed"],
        seed=c["seed"],
    )
    n = d["network"]
    net = NetworkGraph(
        node_ids=list(n["node_ids"]),
        offsets=np.array(n["offsets"]),
        edges=[tuple(e) for e in n["edges"]],
        anchor=n["anchor"],
    )
    return Scenario(
        config=cfg,
        network=net,
        trajectories=np.array(d["trajectories"]),
        measurements={int(j): np.array(z) for j, z in d["measurements"].items()},
        true_permutations={
            int(j): np.array(p, dtype=np.int64) for j, p in d["true_permutations"].items()
        },
        rng_seed=d["rng_seed"],
    )


def save_scenario(s: Scenario, path: str) -> None:
    with open(path, "w") as fh:
        json.dump(scenario_to_dict(s), fh)


def load_scenario(path: str) -> Scenario:
    with open(path) as fh:
        return scenario_from_dict(json.load(fh))
