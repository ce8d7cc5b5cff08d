"""Monte Carlo diagnostics for the unit-time chain on the sphere.

Everything measure-valued here is discretized through a fixed
nearest-centroid partition fitted to chain samples: cell-level total
variation is a computable lower bound on the variational distance that
sharpens as the partition refines.  Rate estimates (mixing, survival tails,
meeting tails) are always read against a noise floor measured from same-law
ensembles with different seeds, so Monte Carlo error is never mistaken for
signal.  The coupled two-chain construction advances independently driven
legs until both sit inside the anchor ball, attempts a cell-level maximal
coupling there, and shares one drive after meeting, which makes meeting
absorbing by construction.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Union

import numpy as np
from scipy import stats

from .core import SystemSpec, sphere_renormalize
from .dynamics import DEFAULT_CONFIG, PropagatorConfig, step_markov_ensemble
from .errors import (
    ConfigError,
    DegenerateSamples,
    HeavyCensoring,
    InsufficientSignal,
    PartitionMismatch,
)
from .noise import NoiseModel

__all__ = [
    "ContractionReport",
    "CoupledPair",
    "EmpiricalMeasure",
    "HittingReport",
    "MixingReport",
    "Partition",
    "TransitionEstimate",
    "contraction_probe",
    "coupled_chain",
    "default_cell_count",
    "empirical_measure",
    "ensemble_push",
    "estimate_kernel",
    "hitting_report_to_json",
    "hitting_time",
    "log_slope",
    "make_partition",
    "maximal_coupling_sample",
    "meeting_tail",
    "mixing_experiment",
    "mixing_rate",
    "mixing_report_to_json",
    "sphere_ball_sample",
    "tv_distance",
    "tv_series_to_csv",
]

KMEANS_ITERATIONS = 50       # fixed so partitions are reproducible artifacts
WEIGHT_SUM_TOL = 1e-12
COLLAPSE_TOL = 1e-8          # sample spread below this means a dead chain
MEET_TOL = 1e-12             # state distance treated as already-met
CENSOR_LIMIT = 0.05          # hitting-time reports refuse beyond this


def default_cell_count(n: int) -> int:
    """Partition size tuned for the lab systems: 64 cells at n = 2, 256 above."""
    return 64 if n <= 2 else 256


def _anchor(n: int) -> np.ndarray:
    e1 = np.zeros(n, dtype=np.complex128)
    e1[0] = 1.0
    return e1


# --------------------------------------------------------------------------
# partition and measures


@dataclass(frozen=True)
class Partition:
    """Nearest-centroid cells discretizing the visited part of the sphere."""

    cells: np.ndarray  # (M, n) unit rows

    def __post_init__(self):
        cells = np.ascontiguousarray(self.cells, dtype=np.complex128)
        if cells.ndim != 2 or cells.shape[0] < 2:
            raise ConfigError("a partition needs at least two centroids")
        if np.any(np.abs(np.linalg.norm(cells, axis=1) - 1.0) > 1e-9):
            raise ConfigError("centroids must lie on the unit sphere")
        object.__setattr__(self, "cells", cells)

    @property
    def size(self) -> int:
        return self.cells.shape[0]

    def assign(self, states: np.ndarray) -> np.ndarray:
        """Cell index per state row; distance ties resolve to the lowest index.

        On the sphere ||z - c||^2 = 2 - 2 Re<c, z>, so the nearest centroid
        maximizes the real Gram row and argmax keeps the first maximum.
        """
        states = np.atleast_2d(np.asarray(states, dtype=np.complex128))
        gram = (states @ self.cells.conj().T).real
        return np.argmax(gram, axis=1)


def _squared_dist(samples: np.ndarray, point: np.ndarray) -> np.ndarray:
    diff = samples - point
    return np.einsum("ij,ij->i", diff, diff.conj()).real


def _seed_centroids(samples: np.ndarray, m: int, rng: np.random.Generator) -> np.ndarray:
    # first centroid uniform, the rest proportional to squared distance from
    # the chosen set; exact duplicates carry zero weight and are never reused
    chosen = [int(rng.integers(samples.shape[0]))]
    d2 = np.full(samples.shape[0], np.inf)
    while len(chosen) < m:
        d2 = np.minimum(d2, _squared_dist(samples, samples[chosen[-1]]))
        total = d2.sum()
        if total <= 0.0:
            raise DegenerateSamples(
                f"only {len(chosen)} distinct sample points for {m} cells"
            )
        chosen.append(int(rng.choice(samples.shape[0], p=d2 / total)))
    return samples[chosen].copy()


def _kmeans(samples: np.ndarray, m: int, rng: np.random.Generator) -> np.ndarray:
    cells = _seed_centroids(samples, m, rng)
    for _ in range(KMEANS_ITERATIONS):
        gram = (samples @ cells.conj().T).real
        owner = np.argmax(gram, axis=1)
        closeness = gram[np.arange(samples.shape[0]), owner]
        for c in range(m):
            mask = owner == c
            if not mask.any():
                # park an empty cell on the worst-covered sample
                far = int(np.argmin(closeness))
                cells[c] = samples[far]
                closeness[far] = np.inf
                continue
            mean = samples[mask].mean(axis=0)
            norm = np.linalg.norm(mean)
            # antipodal cancellation can zero the mean; keep the old centroid
            if norm > 1e-12:
                cells[c] = mean / norm
    return cells


def make_partition(
    spec: SystemSpec,
    model: NoiseModel,
    m_cells: int,
    n_seed: int,
    rng: np.random.Generator,
    config: PropagatorConfig = DEFAULT_CONFIG,
) -> Partition:
    """Centroid partition fitted to chain samples started from the anchor.

    A batch of chains runs from e_1 and every post-step state is pooled, so
    the sample cloud mixes early- and late-time laws and covers the visited
    region.  Lloyd iterations are fixed at 50 to keep the construction
    deterministic given the generator.
    """
    if m_cells < 2:
        raise ConfigError("m_cells must be at least 2")
    if n_seed < m_cells:
        raise ConfigError("need at least one seed sample per cell")
    if model.mean_square_norm() == 0.0:
        raise DegenerateSamples(
            "drive amplitude is identically zero: chain samples trace a "
            "deterministic orbit"
        )
    n_chains = min(n_seed, 256)
    steps = -(-n_seed // n_chains)
    states = np.tile(_anchor(spec.n), (n_chains, 1))
    samples = np.empty((steps * n_chains, spec.n), dtype=np.complex128)
    for k in range(steps):
        states = step_markov_ensemble(spec, states, model, rng, config)
        samples[k * n_chains:(k + 1) * n_chains] = states
    samples = samples[:n_seed]
    spread = float(np.sqrt(_squared_dist(samples, samples[0]).max()))
    if spread <= COLLAPSE_TOL:
        raise DegenerateSamples(f"chain collapsed to a point (spread {spread:.2e})")
    return Partition(_kmeans(samples, m_cells, rng))


@dataclass(frozen=True)
class EmpiricalMeasure:
    """Cell weights over a fixed partition, normalized to total mass one."""

    partition: Partition
    weights: np.ndarray

    def __post_init__(self):
        w = np.ascontiguousarray(self.weights, dtype=float)
        if w.shape != (self.partition.size,):
            raise ConfigError(
                f"expected {self.partition.size} weights, got shape {w.shape}"
            )
        if np.any(w < 0.0):
            raise ConfigError("weights must be nonnegative")
        if abs(w.sum() - 1.0) > WEIGHT_SUM_TOL:
            raise ConfigError(f"weights sum to {w.sum():.15f}, not 1")
        object.__setattr__(self, "weights", w)


def empirical_measure(partition: Partition, states: np.ndarray) -> EmpiricalMeasure:
    """Histogram of states over the partition's cells."""
    counts = np.bincount(partition.assign(states), minlength=partition.size)
    return EmpiricalMeasure(partition, counts / counts.sum())


def _require_same_partition(p: EmpiricalMeasure, q: EmpiricalMeasure) -> None:
    if p.partition is q.partition:
        return
    if p.partition.size == q.partition.size and np.array_equal(
        p.partition.cells, q.partition.cells
    ):
        return
    raise PartitionMismatch("measures live on different partitions")


def tv_distance(p: EmpiricalMeasure, q: EmpiricalMeasure) -> float:
    """Half the L1 distance of cell weights: the variational distance
    restricted to unions of cells."""
    _require_same_partition(p, q)
    return 0.5 * float(np.abs(p.weights - q.weights).sum())


# --------------------------------------------------------------------------
# pushforward and kernel estimation

InitialLaw = Union[np.ndarray, Callable[[int, np.random.Generator], np.ndarray]]


def _draw_initial(law: InitialLaw, count: int, rng: np.random.Generator, n: int) -> np.ndarray:
    if callable(law):
        states = np.ascontiguousarray(law(count, rng), dtype=np.complex128)
        if states.shape != (count, n):
            raise ConfigError(
                f"initial sampler returned shape {states.shape}, expected {(count, n)}"
            )
    else:
        z = np.asarray(law, dtype=np.complex128)
        if z.shape != (n,):
            raise ConfigError(f"initial state has shape {z.shape}, expected ({n},)")
        states = np.tile(z, (count, 1))
    norms = np.linalg.norm(states, axis=1)
    if np.any(norms < 1e-12):
        raise ConfigError("initial law produced a zero vector")
    return states / norms[:, None]


def ensemble_push(
    spec: SystemSpec,
    model: NoiseModel,
    law: InitialLaw,
    k_max: int,
    n_traj: int,
    partition: Partition,
    rng: np.random.Generator,
    config: PropagatorConfig = DEFAULT_CONFIG,
) -> list[EmpiricalMeasure]:
    """Push n_traj chains from an initial law, one cell histogram per step.

    ``law`` is a state vector (point mass) or a callable (count, rng) ->
    (count, n).  Returns measures for k = 0 .. k_max, so k_max = 0 is the
    histogram of the initial law itself.
    """
    if n_traj < 100:
        raise ConfigError("need at least 100 trajectories per ensemble")
    if k_max < 0:
        raise ConfigError("k_max must be nonnegative")
    states = _draw_initial(law, n_traj, rng, spec.n)
    measures = [empirical_measure(partition, states)]
    for _ in range(k_max):
        states = step_markov_ensemble(spec, states, model, rng, config)
        measures.append(empirical_measure(partition, states))
    return measures


@dataclass(frozen=True)
class TransitionEstimate:
    """One-step kernel row from a fixed source state."""

    source: np.ndarray
    row: EmpiricalMeasure
    count: int

    def __post_init__(self):
        if self.count < 1:
            raise ConfigError("sample count must be positive")
        object.__setattr__(
            self, "source", np.ascontiguousarray(self.source, dtype=np.complex128)
        )


def estimate_kernel(
    spec: SystemSpec,
    model: NoiseModel,
    z: np.ndarray,
    partition: Partition,
    n_samples: int,
    rng: np.random.Generator,
    config: PropagatorConfig = DEFAULT_CONFIG,
) -> TransitionEstimate:
    """Cell histogram of n_samples one-step draws from z."""
    if n_samples < 1000:
        raise ConfigError("kernel rows need at least 1000 samples")
    z = sphere_renormalize(np.asarray(z, dtype=np.complex128))
    states = step_markov_ensemble(spec, np.tile(z, (n_samples, 1)), model, rng, config)
    return TransitionEstimate(z, empirical_measure(partition, states), n_samples)


# --------------------------------------------------------------------------
# rate fitting


def log_slope(
    x: np.ndarray, y: np.ndarray, min_points: int = 3
) -> tuple[float, tuple[float, float]]:
    """Least-squares slope of log y against x with a 95% interval.

    Only strictly positive y values enter; fewer than min_points of them is
    InsufficientSignal.  min_points stays >= 3 so the interval has at least
    one degree of freedom.
    """
    if min_points < 3:
        raise ConfigError("min_points below 3 leaves no degrees of freedom")
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    keep = y > 0.0
    if keep.sum() < min_points:
        raise InsufficientSignal(
            f"only {int(keep.sum())} positive values, need {min_points}"
        )
    fit = stats.linregress(x[keep], np.log(y[keep]))
    spread = stats.t.ppf(0.975, int(keep.sum()) - 2) * fit.stderr
    return float(fit.slope), (float(fit.slope - spread), float(fit.slope + spread))


@dataclass(frozen=True)
class MixingReport:
    """TV series between two pushed laws and its fitted exponential decay."""

    steps: np.ndarray
    tv: np.ndarray
    noise_floor: float
    fit_steps: np.ndarray         # subset of steps the fit actually used
    rate: float                   # decay exponent per step (negated slope)
    rate_ci: tuple[float, float]  # 95% confidence interval for the rate
    amplitude: float              # fitted prefactor

    def __post_init__(self):
        steps = np.ascontiguousarray(self.steps, dtype=np.int64)
        tv = np.ascontiguousarray(self.tv, dtype=float)
        if steps.shape != tv.shape:
            raise ConfigError("steps and tv must align")
        if np.any((tv < -WEIGHT_SUM_TOL) | (tv > 1.0 + WEIGHT_SUM_TOL)):
            raise ConfigError("TV values must lie in [0, 1]")
        object.__setattr__(self, "steps", steps)
        object.__setattr__(self, "tv", tv)
        object.__setattr__(
            self, "fit_steps", np.ascontiguousarray(self.fit_steps, dtype=np.int64)
        )
        object.__setattr__(
            self, "rate_ci", (float(self.rate_ci[0]), float(self.rate_ci[1]))
        )


def mixing_rate(series: Sequence, noise_floor: float) -> MixingReport:
    """Exponential-decay fit of a TV series against a measured noise floor.

    Fits log TV_k against k over the steps k >= 1 whose TV clears twice the
    floor; the floor should come from same-law ensembles with different
    seeds, so the fit never chases Monte Carlo error.  Fewer than four usable
    points is InsufficientSignal.
    """
    pairs = [(int(k), float(v)) for k, v in series]
    if len(pairs) < 10:
        raise ConfigError("need a TV series of at least 10 steps")
    if noise_floor < 0.0:
        raise ConfigError("noise floor must be nonnegative")
    steps = np.array([k for k, _ in pairs], dtype=np.int64)
    tv = np.array([v for _, v in pairs], dtype=float)
    usable = (steps >= 1) & (tv > 0.0) & (tv >= 2.0 * noise_floor)
    if usable.sum() < 4:
        raise InsufficientSignal(
            f"only {int(usable.sum())} TV points clear the noise floor"
        )
    fit = stats.linregress(steps[usable], np.log(tv[usable]))
    spread = stats.t.ppf(0.975, int(usable.sum()) - 2) * fit.stderr
    rate = -float(fit.slope)
    return MixingReport(
        steps=steps,
        tv=tv,
        noise_floor=float(noise_floor),
        fit_steps=steps[usable],
        rate=rate,
        rate_ci=(rate - float(spread), rate + float(spread)),
        amplitude=float(np.exp(fit.intercept)),
    )


def mixing_experiment(
    spec: SystemSpec,
    model: NoiseModel,
    law_a: InitialLaw,
    law_b: InitialLaw,
    k_max: int,
    n_traj: int,
    partition: Partition,
    seed: int,
    config: PropagatorConfig = DEFAULT_CONFIG,
) -> MixingReport:
    """Mixing measurement between two initial laws.

    Pushes each law twice with independent streams; the cross-law TV series
    carries the signal and the median same-law TV (per side, k >= 1) is the
    noise floor handed to :func:`mixing_rate`.
    """
    streams = [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(4)]
    push_a = ensemble_push(spec, model, law_a, k_max, n_traj, partition, streams[0], config)
    push_b = ensemble_push(spec, model, law_b, k_max, n_traj, partition, streams[1], config)
    replica_a = ensemble_push(spec, model, law_a, k_max, n_traj, partition, streams[2], config)
    replica_b = ensemble_push(spec, model, law_b, k_max, n_traj, partition, streams[3], config)
    tv = [tv_distance(pa, pb) for pa, pb in zip(push_a, push_b)]
    floor_samples = [tv_distance(a, b) for a, b in zip(push_a[1:], replica_a[1:])]
    floor_samples += [tv_distance(a, b) for a, b in zip(push_b[1:], replica_b[1:])]
    return mixing_rate(list(enumerate(tv)), float(np.median(floor_samples)))


# --------------------------------------------------------------------------
# hitting times


@dataclass(frozen=True)
class HittingReport:
    """First-entry statistics of the anchor ball B(e_1, delta)."""

    delta: float
    alpha: float
    tau: np.ndarray                    # uncensored hitting steps
    k_max: int
    censored: int
    moment: float                      # mean of exp(alpha * tau), uncensored
    tail_slope: Optional[float]        # survival log-slope, None if unfittable
    tail_ci: Optional[tuple[float, float]]

    def __post_init__(self):
        tau = np.ascontiguousarray(self.tau, dtype=np.int64)
        if tau.size and tau.min() < 0:
            raise ConfigError("hitting times must be nonnegative")
        if not np.isfinite(self.moment):
            raise ConfigError("exponential-moment estimate must be finite")
        object.__setattr__(self, "tau", tau)


def hitting_time(
    spec: SystemSpec,
    model: NoiseModel,
    z: np.ndarray,
    delta: float,
    alpha: float,
    k_max: int,
    n_traj: int,
    rng: np.random.Generator,
    config: PropagatorConfig = DEFAULT_CONFIG,
) -> HittingReport:
    """Hitting-time sample of the ball around the anchor from a fixed start.

    Runs n_traj chains from z, recording the first step k with
    ||U_k - e_1|| < delta (step 0 counts).  Chains still outside at k_max are
    censored; more than 5% of them aborts instead of reporting a biased
    moment.  The survival curve's log-slope doubles as a geometric-tail
    check and is fitted only over steps still holding at least ten chains.
    """
    if delta <= 0.0 or alpha <= 0.0:
        raise ConfigError("delta and alpha must be positive")
    if k_max < 1:
        raise ConfigError("k_max must be at least 1")
    if n_traj < 100:
        raise ConfigError("need at least 100 chains")
    e1 = _anchor(spec.n)
    states = np.tile(sphere_renormalize(np.asarray(z, dtype=np.complex128)), (n_traj, 1))
    tau = np.full(n_traj, -1, dtype=np.int64)
    tau[np.linalg.norm(states - e1, axis=1) < delta] = 0
    for k in range(1, k_max + 1):
        open_idx = np.flatnonzero(tau < 0)
        if open_idx.size == 0:
            break
        advanced = step_markov_ensemble(spec, states[open_idx], model, rng, config)
        states[open_idx] = advanced
        hit = np.linalg.norm(advanced - e1, axis=1) < delta
        tau[open_idx[hit]] = k
    censored = int((tau < 0).sum())
    if censored > CENSOR_LIMIT * n_traj:
        raise HeavyCensoring(
            f"{censored}/{n_traj} chains missed B(e_1, {delta}) within {k_max} steps"
        )
    hits = tau[tau >= 0]
    moment = float(np.exp(alpha * hits).mean())
    slope, ci = _survival_slope(tau, k_max, n_traj)
    return HittingReport(
        delta=float(delta),
        alpha=float(alpha),
        tau=hits,
        k_max=int(k_max),
        censored=censored,
        moment=moment,
        tail_slope=slope,
        tail_ci=ci,
    )


def _survival_slope(tau: np.ndarray, k_max: int, n_traj: int):
    # censored chains exceed every threshold up to k_max, so they stay in
    # the survival counts without an assumed hitting step
    exceed = np.sort(np.where(tau < 0, k_max + 1, tau))
    top = min(int(exceed.max()), k_max)
    ms = np.arange(0, top)
    surv = 1.0 - np.searchsorted(exceed, ms, side="right") / n_traj
    keep = surv >= 10.0 / n_traj
    try:
        slope, ci = log_slope(ms[keep], surv[keep], min_points=4)
    except InsufficientSignal:
        return None, None
    return slope, ci


# --------------------------------------------------------------------------
# kernel contraction


def sphere_ball_sample(
    anchor: np.ndarray, radius: float, count: int, rng: np.random.Generator
) -> np.ndarray:
    """Draws from the sphere patch within ambient ``radius`` of ``anchor``.

    Uniform ambient-ball offsets projected back to the sphere, rejecting the
    few projections that land outside; adequate for the small radii the
    contraction and coupling probes use.
    """
    anchor = sphere_renormalize(np.asarray(anchor, dtype=np.complex128))
    if radius <= 0.0:
        raise ConfigError("radius must be positive")
    n = anchor.size
    out = np.empty((count, n), dtype=np.complex128)
    got = 0
    while got < count:
        want = count - got
        direction = rng.standard_normal((want, 2 * n))
        direction /= np.linalg.norm(direction, axis=1)[:, None]
        scale = radius * rng.random(want) ** (1.0 / (2 * n))
        offset = scale[:, None] * (direction[:, :n] + 1j * direction[:, n:])
        cand = anchor + offset
        cand /= np.linalg.norm(cand, axis=1)[:, None]
        ok = np.linalg.norm(cand - anchor, axis=1) <= radius
        took = int(ok.sum())
        out[got:got + took] = cand[ok]
        got += took
    return out


@dataclass(frozen=True)
class ContractionReport:
    """Worst-pair kernel TV near the anchor, floor-subtracted."""

    delta0: float
    pair_tv: np.ndarray    # raw per-pair kernel TVs
    noise_floor: float     # median TV between re-estimates at one state
    p_hat: float           # max pair TV minus the floor, clipped to [0, 1]

    @property
    def margin(self) -> float:
        return 1.0 - self.p_hat


def contraction_probe(
    spec: SystemSpec,
    model: NoiseModel,
    delta0: float,
    partition: Partition,
    n_samples: int,
    n_pairs: int,
    rng: np.random.Generator,
    config: PropagatorConfig = DEFAULT_CONFIG,
) -> ContractionReport:
    """Worst one-step kernel TV over random state pairs near the anchor.

    Each pair contributes the TV between its two estimated kernel rows; the
    first state of every pair is estimated twice more to measure the Monte
    Carlo floor, and the reported p_hat is the worst raw TV minus the median
    floor, so it reflects signal rather than sampling error.
    """
    if delta0 <= 0.0:
        raise ConfigError("delta0 must be positive")
    if n_pairs < 1:
        raise ConfigError("need at least one pair")
    e1 = _anchor(spec.n)
    pair_tv = np.empty(n_pairs)
    floor = np.empty(n_pairs)
    for i in range(n_pairs):
        za, zb = sphere_ball_sample(e1, delta0, 2, rng)
        row_a = estimate_kernel(spec, model, za, partition, n_samples, rng, config).row
        row_b = estimate_kernel(spec, model, zb, partition, n_samples, rng, config).row
        repeat = estimate_kernel(spec, model, za, partition, n_samples, rng, config).row
        pair_tv[i] = tv_distance(row_a, row_b)
        floor[i] = tv_distance(row_a, repeat)
    noise_floor = float(np.median(floor))
    p_hat = float(np.clip(pair_tv.max() - noise_floor, 0.0, 1.0))
    return ContractionReport(float(delta0), pair_tv, noise_floor, p_hat)


# --------------------------------------------------------------------------
# coupling


def maximal_coupling_sample(
    p: EmpiricalMeasure,
    q: EmpiricalMeasure,
    rng: np.random.Generator,
    size: Optional[int] = None,
):
    """Cell pairs whose marginals are exactly p and q.

    With probability equal to the overlap mass (1 - TV) both draws coincide
    and come from the normalized overlap; otherwise the sides draw
    independently from their normalized residuals.  Scalar by default;
    ``size`` switches to arrays.
    """
    _require_same_partition(p, q)
    overlap = np.minimum(p.weights, q.weights)
    mass = float(overlap.sum())
    m = overlap.size
    count = 1 if size is None else int(size)
    if count < 1:
        raise ConfigError("size must be positive")
    met = rng.random(count) < mass
    left = np.empty(count, dtype=np.int64)
    right = np.empty(count, dtype=np.int64)
    n_met = int(met.sum())
    if n_met:
        both = rng.choice(m, size=n_met, p=overlap / mass)
        left[met] = both
        right[met] = both
    if n_met < count:
        res_p = p.weights - overlap
        res_q = q.weights - overlap
        miss = ~met
        left[miss] = rng.choice(m, size=count - n_met, p=res_p / res_p.sum())
        right[miss] = rng.choice(m, size=count - n_met, p=res_q / res_q.sum())
    if size is None:
        return int(left[0]), int(right[0]), bool(met[0])
    return left, right, met


@dataclass(frozen=True)
class CoupledPair:
    """Final state of one coupled run plus its meeting record."""

    y: np.ndarray
    y_prime: np.ndarray
    met: bool
    steps: int
    meet_step: Optional[int]   # None when the budget ran out unmet
    entries: np.ndarray        # times at which both legs sat inside the ball
    history: np.ndarray        # (steps + 1, 2, n) state record

    def __post_init__(self):
        if self.met and not np.array_equal(self.y, self.y_prime):
            raise ConfigError("a met pair must coincide exactly")
        object.__setattr__(
            self, "entries", np.ascontiguousarray(self.entries, dtype=np.int64)
        )


def _cell_row(
    cache: dict,
    cell: int,
    spec: SystemSpec,
    model: NoiseModel,
    partition: Partition,
    n_kernel: int,
    rng: np.random.Generator,
    config: PropagatorConfig,
) -> EmpiricalMeasure:
    row = cache.get(cell)
    if row is None:
        row = estimate_kernel(
            spec, model, partition.cells[cell], partition, n_kernel, rng, config
        ).row
        cache[cell] = row
    return row


def coupled_chain(
    spec: SystemSpec,
    model: NoiseModel,
    z0: np.ndarray,
    z0_prime: np.ndarray,
    delta0: float,
    partition: Partition,
    n_kernel: int,
    max_steps: int,
    rng: np.random.Generator,
    config: PropagatorConfig = DEFAULT_CONFIG,
    row_cache: Optional[dict] = None,
    post_meet_steps: int = 0,
) -> CoupledPair:
    """One run of the two-chain coupling around the anchor ball.

    Outside B(e_1, delta0) the legs advance under independent drives.  When
    both sit inside, the step goes through the cell chain: each leg's kernel
    row is estimated at its cell centroid (cached, so repeat visits reuse the
    row; pass row_cache to share it across runs) and the pair of next cells
    comes from a maximal coupling of the two rows.  A successful coupling
    lands both legs on the same centroid; afterwards one shared segment is
    applied and copied, so meeting is absorbing by construction.

    The run stops at meeting (plus post_meet_steps shared steps when asked)
    or after max_steps; running out of budget is reported through met=False
    rather than an exception.
    """
    if delta0 <= 0.0:
        raise ConfigError("delta0 must be positive")
    if max_steps < 1:
        raise ConfigError("max_steps must be at least 1")
    if post_meet_steps < 0:
        raise ConfigError("post_meet_steps must be nonnegative")
    e1 = _anchor(spec.n)
    y = sphere_renormalize(np.asarray(z0, dtype=np.complex128)).copy()
    y_prime = sphere_renormalize(np.asarray(z0_prime, dtype=np.complex128)).copy()
    cache = {} if row_cache is None else row_cache
    met = bool(np.linalg.norm(y - y_prime) <= MEET_TOL)
    if met:
        y_prime = y.copy()
    meet_step = 0 if met else None
    entries: list[int] = []
    history = [np.stack([y, y_prime])]
    step = 0
    while step < max_steps:
        if met:
            if step >= meet_step + post_meet_steps:
                break
            shared = step_markov_ensemble(spec, y[None], model, rng, config)[0]
            y = shared
            y_prime = shared.copy()
        elif (
            np.linalg.norm(y - e1) < delta0
            and np.linalg.norm(y_prime - e1) < delta0
        ):
            entries.append(step)
            cell_a = int(partition.assign(y)[0])
            cell_b = int(partition.assign(y_prime)[0])
            row_a = _cell_row(cache, cell_a, spec, model, partition, n_kernel, rng, config)
            row_b = _cell_row(cache, cell_b, spec, model, partition, n_kernel, rng, config)
            next_a, next_b, coincide = maximal_coupling_sample(row_a, row_b, rng)
            y = partition.cells[next_a].copy()
            if coincide:
                met = True
                meet_step = step + 1
                y_prime = y.copy()
            else:
                y_prime = partition.cells[next_b].copy()
        else:
            both = step_markov_ensemble(spec, np.stack([y, y_prime]), model, rng, config)
            y = both[0].copy()
            y_prime = both[1].copy()
        step += 1
        history.append(np.stack([y, y_prime]))
    return CoupledPair(
        y=y,
        y_prime=y_prime,
        met=met,
        steps=step,
        meet_step=meet_step,
        entries=np.array(entries, dtype=np.int64),
        history=np.array(history),
    )


def meeting_tail(pairs: Sequence[CoupledPair], n_max: Optional[int] = None):
    """Empirical P{meeting later than the (n + 1)-th joint ball visit}.

    Every recorded ball co-visit is one coupling attempt, and a met run's
    last attempt is the successful one.  A run decides the indicator for n
    once it met (no further failures accrue) or once it has already failed
    n + 1 attempts; unmet runs with fewer attempts are censored and drop out
    of that n's denominator.
    """
    met = np.array([p.met for p in pairs], dtype=bool)
    failures = np.array(
        [len(p.entries) - 1 if p.met else len(p.entries) for p in pairs],
        dtype=np.int64,
    )
    if n_max is None:
        n_max = int(failures.max(initial=0))
    levels: list[int] = []
    probs: list[float] = []
    for n in range(n_max + 1):
        exceed = failures >= n + 1
        decidable = met | exceed
        if not decidable.any():
            break
        levels.append(n)
        probs.append(float(exceed[decidable].mean()))
    return np.array(levels, dtype=np.int64), np.array(probs)


# --------------------------------------------------------------------------
# exports


def mixing_report_to_json(report: MixingReport) -> dict:
    return {
        "steps": [int(k) for k in report.steps],
        "tv": [float(v) for v in report.tv],
        "noise_floor": report.noise_floor,
        "fit_steps": [int(k) for k in report.fit_steps],
        "rate": report.rate,
        "rate_ci": [report.rate_ci[0], report.rate_ci[1]],
        "amplitude": report.amplitude,
    }


def hitting_report_to_json(report: HittingReport) -> dict:
    return {
        "delta": report.delta,
        "alpha": report.alpha,
        "tau": [int(t) for t in report.tau],
        "k_max": report.k_max,
        "censored": report.censored,
        "moment": report.moment,
        "tail_slope": report.tail_slope,
        "tail_ci": None if report.tail_ci is None else list(report.tail_ci),
    }


def tv_series_to_csv(report: MixingReport, fh) -> None:
    """Rows (k, tv, noise_floor); the floor repeats so rows stand alone."""
    writer = csv.writer(fh)
    writer.writerow(["k", "tv", "noise_floor"])
    for k, v in zip(report.steps, report.tv):
        writer.writerow([int(k), repr(float(v)), repr(report.noise_floor)])
