"""Nonparametric loopy belief propagation over sensor offsets.

Each node carries a particle belief over its own 2-d offset.  Messages are
weighted Gaussian-kernel mixtures.  One round is bulk-synchronous: every
directed edge builds its message from the previous round's state, then every
node redraws its belief from prior times incoming messages.

Offsets are only identifiable relative to the anchor node, whose Dirac prior
pins the coordinate frame.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .gaussians import (
    LOG_2PI,
    Gaussian,
    NumericalError,
    gaussian_product,
    regularize_cov,
)
from .likelihood import EdgePotentialEvaluator
from .scenario import NetworkGraph, Scenario
from .tracking import FilterOutput, filter_run_count, run_local_filter


def _logsumexp(a: np.ndarray, axis: int | None = None) -> np.ndarray:
    return np.logaddexp.reduce(a, axis=axis)


@dataclass
class ParticleBelief:
    """Equally many samples and weights over one node's offset.

    weights are normalized on construction; after resampling they are 1/L.
    """

    node_id: int
    samples: np.ndarray  # (L, 2)
    weights: np.ndarray  # (L,)

    def __post_init__(self) -> None:
        self.samples = np.asarray(self.samples, dtype=np.float64)
        self.samples = self.samples.reshape(self.samples.shape[0], 2)
        self.weights = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        if self.weights.shape[0] != self.samples.shape[0]:
            raise ValueError("sample/weight count mismatch")
        if np.any(self.weights < 0) or not np.all(np.isfinite(self.weights)):
            raise ValueError("weights must be finite and non-negative")
        total = self.weights.sum()
        if total <= 0:
            raise NumericalError("zero total weight")
        self.weights = self.weights / total

    @property
    def size(self) -> int:
        return self.samples.shape[0]

    def mean(self) -> np.ndarray:
        return self.weights @ self.samples

    def covariance(self) -> np.ndarray:
        diff = self.samples - self.mean()
        return np.einsum("l,li,lj->ij", self.weights, diff, diff)

    def ess(self) -> float:
        return float(1.0 / np.sum(self.weights**2))


@dataclass
class KernelMessage:
    """Gaussian-kernel mixture message along a directed edge."""

    source: int
    target: int
    locations: np.ndarray  # (L, 2)
    weights: np.ndarray  # (L,), normalized
    bandwidth: np.ndarray  # (2, 2) SPD, shared by all kernels
    underflow: bool = False
    # Kernel weights as the raw potentials set them, before any flattening:
    # kept so a holding receiver can resample from this edge's evidence
    # alone instead of averaging it into the product.
    natural_weights: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.locations = np.asarray(self.locations, dtype=np.float64)
        self.weights = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        self.bandwidth = np.asarray(self.bandwidth, dtype=np.float64).reshape(2, 2)
        total = self.weights.sum()
        if total <= 0 or not np.isfinite(total):
            raise NumericalError("message weights do not normalize")
        self.weights = self.weights / total
        np.linalg.cholesky(self.bandwidth)  # SPD check

    def log_density(self, points: np.ndarray, extra_var: float = 0.0) -> np.ndarray:
        """Log of the mixture density at each point; points is (n, 2).

        extra_var softens every kernel by that per-axis variance, letting a
        receiver that knows its own offset is unsettled discount how sharply
        the message claims to pin it down.
        """
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        chol = np.linalg.cholesky(self.bandwidth + extra_var * np.eye(2))
        diff = points[:, None, :] - self.locations[None, :, :]  # (n, L, 2)
        sol = np.linalg.solve(chol, diff[..., None])[..., 0]
        quad = np.sum(sol**2, axis=-1)
        log_norm = LOG_2PI + np.log(np.diag(chol)).sum()
        logw = np.where(self.weights > 0, np.log(np.maximum(self.weights, 1e-300)), -np.inf)
        return _logsumexp(logw[None, :] - 0.5 * quad - log_norm, axis=1)

    def moment_matched(self) -> Gaussian:
        """Single Gaussian with the mixture's mean and covariance."""
        mean = self.weights @ self.locations
        diff = self.locations - mean
        spread = np.einsum("l,li,lj->ij", self.weights, diff, diff)
        return Gaussian(mean, regularize_cov(spread + self.bandwidth))


@dataclass
class UniformBoxPrior:
    """Axis-aligned uniform box prior for an unlocalized node."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self) -> None:
        self.lo = np.asarray(self.lo, dtype=np.float64).reshape(2)
        self.hi = np.asarray(self.hi, dtype=np.float64).reshape(2)
        if np.any(self.hi <= self.lo):
            raise ValueError("box must have positive extent")

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return rng.uniform(self.lo, self.hi, size=(n, 2))

    def log_density(self, points: np.ndarray) -> np.ndarray:
        points = np.atleast_2d(points)
        inside = np.all((points >= self.lo) & (points <= self.hi), axis=1)
        log_vol = float(np.sum(np.log(self.hi - self.lo)))
        return np.where(inside, -log_vol, -np.inf)


@dataclass
class DiracPrior:
    """Pins a node (the anchor) to a fixed offset."""

    point: np.ndarray

    def __post_init__(self) -> None:
        self.point = np.asarray(self.point, dtype=np.float64).reshape(2)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return np.tile(self.point, (n, 1))


def prior_box(network: NetworkGraph, margin: float = 0.25) -> UniformBoxPrior:
    """Deployment-region box with a fractional margin on each side."""
    lo = network.offsets.min(axis=0)
    hi = network.offsets.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    return UniformBoxPrior(lo - margin * span, hi + margin * span)


@dataclass
class MrfModel:
    """Graph, node priors, and one edge-potential evaluator per edge."""

    graph: NetworkGraph
    priors: dict[int, UniformBoxPrior | DiracPrior]
    evaluators: dict[tuple[int, int], EdgePotentialEvaluator]
    n_particles: int = 100

    def __post_init__(self) -> None:
        for node in self.graph.node_ids:
            if node not in self.priors:
                raise ValueError(f"node {node} has no prior")
        for edge in self.graph.edges:
            if edge not in self.evaluators:
                raise ValueError(f"edge {edge} has no potential evaluator")
        if not isinstance(self.priors[self.graph.anchor], DiracPrior):
            raise ValueError("anchor prior must be a Dirac")
        if self.n_particles < 2:
            raise ValueError("need at least two particles")


def rule_of_thumb_bandwidth(locations: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Kernel bandwidth (4 / ((2d+1) L))^(2/(d+4)) * C for d = 2.

    C is the weighted sample covariance; degenerate spreads fall back to the
    regularization floor.
    """
    locations = np.atleast_2d(np.asarray(locations, dtype=np.float64))
    weights = np.asarray(weights, dtype=np.float64).reshape(-1)
    L = locations.shape[0]
    if weights.shape[0] != L:
        raise ValueError("location/weight count mismatch")
    w = weights / weights.sum()
    mean = w @ locations
    diff = locations - mean
    cov = np.einsum("l,li,lj->ij", w, diff, diff)
    factor = (4.0 / (5.0 * L)) ** (1.0 / 3.0)
    return regularize_cov(factor * cov)


# Fluctuation allowance when comparing a realized best potential against the
# edge's expected-at-truth level; shortfalls inside it are treated as noise.
REF_MARGIN_NATS = 30.0

# Tighter allowance against the best potential an edge has ever realized:
# once near-true pairs have been seen, falling more than this far below that
# high-water mark means the edge has drifted, not that the level was optimistic.
BEST_PAIR_MARGIN_NATS = 5.0

# Shortfall, in nats, above which an incident edge counts as dissenting.
# Pair-sampling noise sits well below this, so a settled node with a
# dissent beyond it is facing a genuinely inconsistent neighborhood and
# engages the backstop hold.
HOLD_ENTER_NATS = 10.0

# Hysteresis exit: a holding node keeps sourcing its belief from its front
# parent's edge alone until that edge realizes its potential to within this
# of target, i.e. until the node's cloud has actually absorbed the parent's
# evidence.
HOLD_EXIT_NATS = 5.0

# Rounds the engage condition must persist before the hold takes over:
# ordinary convergence clears a dissent within a round or two on its own,
# while a neighborhood stuck at a collectively wrong offset cannot.
CONFLICT_PATIENCE = 3

# A node only engages the backstop hold once its belief is settled, meaning
# its covariance trace is within this multiple of the potential's intrinsic
# conditional variance (2/curvature per axis).  A node that is still wide
# is still searching and the shortfall widening is the right tool for it;
# the backstop is for nodes whose local product has converged at an offset
# their front parent rules out.
SETTLED_TRACE_MULT = 25.0

# Per-axis exploration floor, in m^2, for nodes the information front has
# not reached yet.  Kept at the prior-box scale: a pre-front node stays
# spread over the whole search box, so no premature local consensus can
# form and veto the front's evidence when it arrives.
FRONT_FLOOR_VAR = 2.0e6


def temper_log_weights(log_w: np.ndarray, target_ess: float) -> np.ndarray:
    """Flatten weights just enough that the effective sample size reaches
    target_ess; returns normalized linear weights.

    Identity when the ESS already meets the target, so the flattening only
    acts while the weights are more degenerate than the floor allows.
    """
    log_w = np.asarray(log_w, dtype=np.float64).reshape(-1)
    finite = np.isfinite(log_w)
    if not np.any(finite):
        raise NumericalError("no finite weights to temper")
    shifted = log_w - log_w[finite].max()

    def ess_at(T: float) -> tuple[float, np.ndarray]:
        w = np.where(finite, np.exp(shifted / T), 0.0)
        w = w / w.sum()
        return float(1.0 / np.sum(w**2)), w

    ess, w = ess_at(1.0)
    if ess >= target_ess:
        return w
    if float(np.sum(finite)) <= target_ess:
        w = finite.astype(np.float64)
        return w / w.sum()
    lo, hi = 1.0, 2.0
    while ess_at(hi)[0] < target_ess:
        hi *= 2.0
        if hi > 1e15:
            w = finite.astype(np.float64)
            return w / w.sum()
    for _ in range(64):
        mid = 0.5 * (lo + hi)
        if ess_at(mid)[0] >= target_ess:
            hi = mid
        else:
            lo = mid
    return ess_at(hi)[1]


def shortfall_nats(log_potentials: np.ndarray, target_level: float) -> float:
    """Gap, in nats, between the best realized potential and a target level
    the edge is known to support; zero once reached or when nothing is
    finite."""
    log_potentials = np.asarray(log_potentials, dtype=np.float64).reshape(-1)
    finite = np.isfinite(log_potentials)
    if not np.any(finite):
        return 0.0
    return max(0.0, target_level - float(log_potentials[finite].max()))


def shortfall_variance(shortfall: float, curvature: float) -> float:
    """Per-axis variance covering a potential shortfall of that many nats.

    The potential is locally quadratic around its peak with direction-averaged
    curvature, so a pair displaced by distance d loses about curvature/4 * d^2
    nats; a shortfall of g nats therefore corresponds to d^2 = 4g/curvature,
    split evenly over the two axes.
    """
    if curvature <= 0.0:
        return 0.0
    return 2.0 * max(0.0, shortfall) / curvature


def build_message(
    source: int,
    target: int,
    cavity_samples: np.ndarray,
    source_samples: np.ndarray,
    target_samples: np.ndarray,
    log_potentials: np.ndarray,
    ess_floor: float = 0.0,
    extra_var: float = 0.0,
) -> KernelMessage:
    """Kernel message from the sender's refined samples and edge potentials.

    Kernels sit where the potential, which depends on the offset difference
    only, transports the sender's refined sample: the paired difference
    (source_samples - target_samples) is subtracted from each cavity sample.
    Weights are the normalized potentials of the paired samples, flattened
    to keep at least ess_floor of them effective so the kernel mixture never
    collapses onto a single particle while the graph is still searching.

    extra_var widens each kernel by that per-axis variance on top of the
    rule-of-thumb bandwidth; callers pass the shortfall_variance of the edge
    so the message stays honest about how far from the best explored pair the
    truth may still sit.  It vanishes as the pairs close in on the reference
    level.  If every potential underflows to zero, weights fall back to
    uniform and the message is flagged.
    """
    cavity_samples = np.asarray(cavity_samples, dtype=np.float64)
    source_samples = np.asarray(source_samples, dtype=np.float64)
    target_samples = np.asarray(target_samples, dtype=np.float64)
    log_potentials = np.asarray(log_potentials, dtype=np.float64).reshape(-1)
    L = log_potentials.shape[0]
    locations = cavity_samples + target_samples - source_samples
    finite = np.isfinite(log_potentials)
    underflow = not np.any(finite)
    if underflow:
        weights = np.full(L, 1.0 / L)
    elif ess_floor > 1.0:
        weights = temper_log_weights(log_potentials, ess_floor)
    else:
        weights = np.exp(log_potentials - _logsumexp(log_potentials))
        weights = weights / weights.sum()
    bandwidth = rule_of_thumb_bandwidth(locations, weights)
    if extra_var > 0.0:
        bandwidth = bandwidth + extra_var * np.eye(2)
    natural = None
    if not underflow:
        natural = np.exp(log_potentials - _logsumexp(log_potentials))
        natural = natural / natural.sum()
    return KernelMessage(
        source=source,
        target=target,
        locations=locations,
        weights=weights,
        bandwidth=bandwidth,
        underflow=underflow,
        natural_weights=natural,
    )


def _systematic_resample(weights: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    positions = (rng.random() + np.arange(n)) / n
    cumsum = np.cumsum(weights)
    cumsum[-1] = 1.0
    return np.searchsorted(cumsum, positions)


def sample_belief_product(
    node_id: int,
    prior: UniformBoxPrior | DiracPrior,
    messages: list[KernelMessage],
    n_particles: int,
    rng: np.random.Generator,
    uniform_mix: float = 0.1,
    current: ParticleBelief | None = None,
    ess_floor: float = 0.0,
    explore_var: float = 0.0,
    sharp_senders: set[int] | frozenset[int] = frozenset(),
) -> ParticleBelief:
    """Weighted bootstrap draw from prior times incoming kernel messages.

    Proposals come from the product of the messages' moment-matched
    Gaussians (and the moment-matched current belief, when given), defended
    by a uniform component over the prior box so the importance ratio stays
    well defined when the product is overconfident.  explore_var is the
    node's own evidence of being unsettled (a disagreeing incident edge, or
    an information front that has not arrived yet): it softens incoming
    factors by that per-axis variance and additionally inflates the
    proposal, so candidates stay spread over the unresolved scale instead of
    trusting a product that cannot see that a locally consistent
    neighborhood may sit at a collectively wrong offset.  Factors from
    sharp_senders are exempt from the softening: those senders sit closer
    to a pinned node than the receiver does, their absolute information is
    older than any local consensus, and keeping their full precision is
    what lets the front overrule a softened majority.  Importance weights
    are flattened to keep at least ess_floor of them effective (so the
    widened candidates survive resampling), then samples are resampled
    systematically to equal weights.
    """
    if isinstance(prior, DiracPrior):
        samples = prior.sample(rng, n_particles)
        return ParticleBelief(node_id, samples, np.full(n_particles, 1.0 / n_particles))
    if not messages:
        samples = prior.sample(rng, n_particles)
        return ParticleBelief(node_id, samples, np.full(n_particles, 1.0 / n_particles))

    soften = explore_var * np.eye(2)
    matched = []
    for m in messages:
        g = m.moment_matched()
        if explore_var > 0.0 and m.source not in sharp_senders:
            g = Gaussian(g.mean, g.cov + soften)
        matched.append(g)
    if current is not None:
        cur = Gaussian(current.mean(), regularize_cov(current.covariance() + soften))
        matched.append(cur)
    product = gaussian_product(matched)
    prop_cov = product.cov + soften
    chol = np.linalg.cholesky(regularize_cov(prop_cov))

    from_box = rng.random(n_particles) < uniform_mix
    n_box = int(from_box.sum())
    samples = np.empty((n_particles, 2))
    if n_box:
        samples[from_box] = prior.sample(rng, n_box)
    n_gauss = n_particles - n_box
    if n_gauss:
        eps = rng.standard_normal((n_gauss, 2))
        samples[~from_box] = product.mean + eps @ chol.T

    log_prior = prior.log_density(samples)
    log_msgs = np.zeros(n_particles)
    for m in messages:
        ev = 0.0 if m.source in sharp_senders else explore_var
        log_msgs += m.log_density(samples, extra_var=ev)
    diff = samples - product.mean
    sol = np.linalg.solve(chol, diff[..., None])[..., 0]
    log_gauss = -0.5 * np.sum(sol**2, axis=1) - LOG_2PI - np.log(np.diag(chol)).sum()
    if uniform_mix > 0.0:
        log_f = np.logaddexp(
            np.log1p(-uniform_mix) + log_gauss, np.log(uniform_mix) + log_prior
        )
    else:
        log_f = log_gauss

    log_w = log_prior + log_msgs - log_f
    if not np.any(np.isfinite(log_w)):
        raise NumericalError("zero total weight in belief product")
    if ess_floor > 1.0:
        weights = temper_log_weights(log_w, ess_floor)
    else:
        log_w = log_w - _logsumexp(log_w)
        weights = np.exp(log_w)
        weights = weights / weights.sum()
    idx = _systematic_resample(weights, n_particles, rng)
    return ParticleBelief(node_id, samples[idx], np.full(n_particles, 1.0 / n_particles))


def hops_from_pinned(graph: NetworkGraph, pinned: set[int]) -> dict[int, int]:
    """Breadth-first hop counts from the pinned set.

    Absolute position information enters the graph only at pinned nodes and
    travels one edge per round, so a node's count is the earliest round an
    anchored message chain can reach it.  Unreachable nodes get no entry.
    """
    hops = {node: 0 for node in pinned}
    frontier = sorted(pinned)
    depth = 0
    while frontier:
        depth += 1
        grown = []
        for node in frontier:
            for nbr in graph.neighbors(node):
                if nbr not in hops:
                    hops[nbr] = depth
                    grown.append(nbr)
        frontier = sorted(grown)
    return hops


def resample_from_message(
    node_id: int,
    message: KernelMessage,
    n_particles: int,
    rng: np.random.Generator,
) -> ParticleBelief:
    """Belief drawn from one edge's evidence alone, bypassing the product.

    Used while a node holds to its front parent: the neighbor one hop
    closer to a pinned node, through which all of the node's absolute
    position information arrives.  The product would average that edge
    against factors that can all be wrong together; the parent's edge
    cannot be, so the node trusts it outright until its own cloud has
    absorbed it.  Draws from the message kernels under the raw potential
    weights, so the landing spot is the evidence's peak rather than a
    tempered compromise, with the kernel bandwidth still carrying the
    honest residual search width.
    """
    weights = message.natural_weights
    if weights is None:
        weights = message.weights
    idx = _systematic_resample(weights, n_particles, rng)
    chol = np.linalg.cholesky(regularize_cov(message.bandwidth))
    samples = message.locations[idx] + rng.standard_normal((n_particles, 2)) @ chol.T
    return ParticleBelief(node_id, samples, np.full(n_particles, 1.0 / n_particles))


@dataclass
class LbpState:
    """One bulk-synchronous round's snapshot."""

    round_index: int
    beliefs: dict[int, ParticleBelief]
    messages: dict[tuple[int, int], KernelMessage] = field(default_factory=dict)
    underflow_edges: list[tuple[int, int, int]] = field(default_factory=list)
    # Highest potential each edge has realized so far; a high-water mark used
    # to detect drift away from configurations the edge already reached.
    best_log_psi: dict[tuple[int, int], float] = field(default_factory=dict)
    # Consecutive rounds each node has been in conflict with a pinned
    # neighbor, and whether the pinned-edge reset is currently engaged.
    conflict_streak: dict[int, int] = field(default_factory=dict)
    reset_active: dict[int, bool] = field(default_factory=dict)


def init_beliefs(model: MrfModel, rng: np.random.Generator) -> LbpState:
    beliefs = {
        node: sample_belief_product(
            node, model.priors[node], [], model.n_particles, rng
        )
        for node in sorted(model.graph.node_ids)
    }
    return LbpState(round_index=0, beliefs=beliefs)


def lbp_iterate(
    model: MrfModel,
    state: LbpState,
    rng: np.random.Generator,
    uniform_mix: float = 0.1,
    ess_fraction: float = 0.1,
) -> LbpState:
    """One synchronous round: evaluate potentials, build all messages from
    the previous round's beliefs and messages, then update every belief."""
    beliefs = state.beliefs
    ess_floor = ess_fraction * model.n_particles

    pinned = {
        node
        for node in model.graph.node_ids
        if isinstance(model.priors[node], DiracPrior)
    }
    holding = {n for n in model.graph.node_ids if state.reset_active.get(n, False)}
    # Absolute information spreads outward from the pins one edge per round;
    # a node's front parent is the neighbor one hop closer to a pin.
    hops = hops_from_pinned(model.graph, pinned)
    current_round = state.round_index + 1

    log_psi: dict[tuple[int, int], np.ndarray] = {}
    widen: dict[tuple[int, int], float] = {}
    intrinsic: dict[tuple[int, int], float] = {}
    best_log_psi: dict[tuple[int, int], float] = {}
    node_gap: dict[int, float] = {}
    front_gap: dict[int, float] = {}
    front_parent: dict[int, int] = {}
    front_curv: dict[int, float] = {}
    for a, b in sorted(model.graph.edges):
        # One evaluation per edge: the potential is symmetric in the pair.
        ev = model.evaluators[(a, b)]
        lp = ev.evaluate(beliefs[a].samples, beliefs[b].samples)
        log_psi[(a, b)] = lp
        finite = lp[np.isfinite(lp)]
        best_now = float(finite.max()) if finite.size else -np.inf
        best_ever = max(best_now, state.best_log_psi.get((a, b), -np.inf))
        best_log_psi[(a, b)] = best_ever
        # An edge should reach its expected-at-truth level, and should never
        # fall far below the level it already realized once; the margins
        # absorb the analytic spread of the former and the pair-sampling
        # noise of the latter.
        target = ev.ref_log_potential - REF_MARGIN_NATS
        if np.isfinite(best_ever):
            target = max(target, best_ever - BEST_PAIR_MARGIN_NATS)
        gap = shortfall_nats(lp, target)
        # The potential cannot resolve offsets finer than its own conditional
        # width (inverse curvature), so kernels keep at least that much
        # bandwidth; the shortfall term adds search range while the edge
        # still disagrees.
        intrinsic[(a, b)] = 2.0 / ev.curvature
        widen[(a, b)] = shortfall_variance(gap, ev.curvature) + intrinsic[(a, b)]
        node_gap[a] = max(node_gap.get(a, 0.0), gap)
        node_gap[b] = max(node_gap.get(b, 0.0), gap)
        # Front-parent edge for each free endpoint whose other end is one
        # hop closer to a pin; among several parents prefer the most
        # consistent edge, so holds chain back toward a pin.
        for x, y in ((a, b), (b, a)):
            hx, hy = hops.get(x), hops.get(y)
            if x in pinned or hx is None or hy is None or hy != hx - 1:
                continue
            if gap < front_gap.get(x, np.inf):
                front_gap[x] = gap
                front_parent[x] = y
                front_curv[x] = ev.curvature

    # Any still-disagreeing incident edge means a node's offset is not
    # settled, however tight its local product looks.  On top of that, a
    # node h hops from the nearest pin has zero absolute information before
    # round h, so its exploration stays floored at the prior-box scale until
    # the information front can actually have reached it; premature local
    # consensus is what collectively shifted clusters are made of.
    explore: dict[int, float] = {}
    for node in model.graph.node_ids:
        var = max(
            (
                widen[(min(node, nbr), max(node, nbr))]
                for nbr in model.graph.neighbors(node)
            ),
            default=0.0,
        )
        if current_round < hops.get(node, np.inf):
            prior = model.priors[node]
            if isinstance(prior, UniformBoxPrior):
                box_var = float(np.max((prior.hi - prior.lo) ** 2)) / 12.0
                var = max(var, min(box_var, FRONT_FLOOR_VAR))
        explore[node] = var


    directed = []
    for a, b in sorted(model.graph.edges):
        directed.append((a, b))
        directed.append((b, a))
    directed.sort()

    new_messages: dict[tuple[int, int], KernelMessage] = {}
    underflow = list(state.underflow_edges)
    for src, dst in directed:
        if src in holding:
            # A holding node's outgoing evidence is its held belief itself;
            # the ordinary cavity would let the dissenting side back in.
            cavity_samples = beliefs[src].samples
        else:
            incoming = [
                state.messages[(nbr, src)]
                for nbr in model.graph.neighbors(src)
                if nbr != dst and (nbr, src) in state.messages
            ]
            cavity_samples = sample_belief_product(
                src,
                model.priors[src],
                incoming,
                model.n_particles,
                rng,
                uniform_mix,
                ess_floor=ess_floor,
                explore_var=explore[src],
            ).samples
        edge = (min(src, dst), max(src, dst))
        msg = build_message(
            src,
            dst,
            cavity_samples,
            beliefs[src].samples,
            beliefs[dst].samples,
            log_psi[edge],
            ess_floor=ess_floor,
            extra_var=widen[edge],
        )
        if msg.underflow:
            underflow.append((state.round_index + 1, src, dst))
        new_messages[(src, dst)] = msg

    new_beliefs: dict[int, ParticleBelief] = {}
    conflict_streak: dict[int, int] = {}
    reset_active: dict[int, bool] = {}
    for node in sorted(model.graph.node_ids):
        incoming = [new_messages[(nbr, node)] for nbr in model.graph.neighbors(node)]
        engaged = node in holding
        candidate = node in front_parent
        if candidate and not engaged:
            trace = float(np.trace(beliefs[node].covariance()))
            settled = trace <= SETTLED_TRACE_MULT * 4.0 / front_curv[node]
        else:
            settled = False
        conflicted = settled and node_gap.get(node, 0.0) > HOLD_ENTER_NATS
        streak = state.conflict_streak.get(node, 0) + 1 if conflicted else 0
        conflict_streak[node] = streak
        # Hysteresis: engage only after the dissent has outlived ordinary
        # convergence, disengage once the parent edge's potential is
        # realized, i.e. the node's cloud has actually absorbed the
        # correction rather than merely brushed it.
        if engaged:
            active = candidate and front_gap[node] > HOLD_EXIT_NATS
        else:
            active = streak >= CONFLICT_PATIENCE
        if active:
            held = new_messages[(front_parent[node], node)]
            if held.natural_weights is None:
                active = False
        reset_active[node] = active
        if active:
            new_beliefs[node] = resample_from_message(
                node, held, model.n_particles, rng
            )
            continue
        new_beliefs[node] = sample_belief_product(
            node,
            model.priors[node],
            incoming,
            model.n_particles,
            rng,
            uniform_mix,
            current=beliefs[node],
            ess_floor=ess_floor,
            explore_var=explore[node],
        )
    return LbpState(
        round_index=state.round_index + 1,
        beliefs=new_beliefs,
        messages=new_messages,
        underflow_edges=underflow,
        best_log_psi=best_log_psi,
        conflict_streak=conflict_streak,
        reset_active=reset_active,
    )


@dataclass
class CalibrationConfig:
    """Knobs for one calibration run over a fixed scenario."""

    window_start: int = 20
    window_length: int = 10
    n_particles: int = 100
    n_iterations: int = 16
    variant: str = "quad"
    seed: int = 0
    prior_margin: float = 0.25
    uniform_mix: float = 0.1
    ess_fraction: float = 0.1
    velocity_std: float = 100.0
    keep_belief_history: bool = True

    def __post_init__(self) -> None:
        if self.window_length < 1:
            raise ValueError("window must cover at least one step")
        if self.n_particles < 2:
            raise ValueError("need at least two particles")
        if self.n_iterations < 1:
            raise ValueError("need at least one iteration")
        if self.variant not in ("quad", "dual"):
            raise ValueError("variant must be 'quad' or 'dual'")
        if not 0.0 <= self.uniform_mix < 1.0:
            raise ValueError("uniform_mix must be in [0, 1)")
        if not 0.0 <= self.ess_fraction <= 1.0:
            raise ValueError("ess_fraction must be in [0, 1]")


@dataclass
class CalibrationResult:
    """Per-iteration estimates plus bookkeeping for reports."""

    node_ids: list[int]
    true_offsets: np.ndarray  # (n, 2)
    estimates: np.ndarray  # (S, n, 2)
    belief_history: list[dict[int, np.ndarray]]
    underflow_edges: list[tuple[int, int, int]]
    filter_runs: int
    eval_seconds: float
    eval_count: int
    variant: str

    def miss_distances(self) -> np.ndarray:
        """(S, n) Euclidean errors per iteration and node."""
        return np.linalg.norm(self.estimates - self.true_offsets[None], axis=2)

    def network_mse(self) -> np.ndarray:
        """(S,) summed squared error over nodes per iteration."""
        return np.sum(self.miss_distances() ** 2, axis=1)

    @property
    def per_eval_ms(self) -> float:
        if self.eval_count == 0:
            return 0.0
        return 1e3 * self.eval_seconds / self.eval_count


def build_mrf(
    scenario: Scenario,
    outputs: dict[int, FilterOutput],
    variant: str = "quad",
    n_particles: int = 100,
    prior_margin: float = 0.25,
) -> MrfModel:
    """Assemble priors and per-edge evaluators over already-filtered outputs."""
    net = scenario.network
    box = prior_box(net, prior_margin)
    priors: dict[int, UniformBoxPrior | DiracPrior] = {}
    for node in net.node_ids:
        if node == net.anchor:
            priors[node] = DiracPrior(net.offset_of(node))
        else:
            priors[node] = box
    evaluators = {
        (a, b): EdgePotentialEvaluator(a, outputs[a], b, outputs[b], variant=variant)
        for a, b in net.edges
    }
    return MrfModel(graph=net, priors=priors, evaluators=evaluators, n_particles=n_particles)


def run_calibration(scenario: Scenario, config: CalibrationConfig) -> CalibrationResult:
    """Local filtering once per sensor, then S rounds of kernel-message LBP.

    Returns the empirical belief means after every round; determinism is
    guaranteed by a single seeded generator driving every draw in a fixed
    node/edge order.
    """
    motion = scenario.config.motion
    sensor = scenario.config.sensor_model()
    runs_before = filter_run_count()
    outputs: dict[int, FilterOutput] = {}
    for node in sorted(scenario.network.node_ids):
        Z = scenario.measurement_window(node, config.window_start, config.window_length)
        outputs[node] = run_local_filter(
            Z, motion, sensor, velocity_std=config.velocity_std
        )
    filter_runs = filter_run_count() - runs_before

    model = build_mrf(
        scenario,
        outputs,
        variant=config.variant,
        n_particles=config.n_particles,
        prior_margin=config.prior_margin,
    )
    rng = np.random.default_rng(config.seed)
    state = init_beliefs(model, rng)

    node_ids = sorted(scenario.network.node_ids)
    estimates = np.empty((config.n_iterations, len(node_ids), 2))
    history: list[dict[int, np.ndarray]] = []
    for s in range(config.n_iterations):
        state = lbp_iterate(
            model,
            state,
            rng,
            uniform_mix=config.uniform_mix,
            ess_fraction=config.ess_fraction,
        )
        for n_idx, node in enumerate(node_ids):
            estimates[s, n_idx] = state.beliefs[node].mean()
        if config.keep_belief_history:
            history.append({node: state.beliefs[node].samples.copy() for node in node_ids})

    eval_seconds = sum(ev.seconds for ev in model.evaluators.values())
    eval_count = sum(ev.n_evals for ev in model.evaluators.values())
    truth = np.stack([scenario.network.offset_of(n) for n in node_ids])
    return CalibrationResult(
        node_ids=node_ids,
        true_offsets=truth,
        estimates=estimates,
        belief_history=history,
        underflow_edges=state.underflow_edges,
        filter_runs=filter_runs,
        eval_seconds=eval_seconds,
        eval_count=eval_count,
        variant=config.variant,
    )
