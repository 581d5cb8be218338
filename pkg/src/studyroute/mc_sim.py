"""Monte Carlo pseudo-study experiment for confidence-weighted voting.

A simulated calibrated classifier with per-series accuracy ``alpha`` draws a
confidence T ~ Beta(4*alpha, 4*(1 - alpha)) and is right with probability T.
Votes carry weight T; a study is decided by weighted plurality.

Random numbers come from numpy's PCG64, one stream per (cell, block) with
seed material (seed, correlated, series_per_study, alpha in micro-units,
block index), so results do not depend on grid composition or worker count.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from typing import Iterable, Optional, Sequence

import numpy as np

from studyroute.model import Vote, VoteSource
from studyroute.votes import break_tie, tally, tally_batch

RNG_ALGORITHM = "PCG64"
BLOCK_SIZE = 1 << 16
BETA_CONCENTRATION = 4.0


@dataclass(frozen=True)
class McParams:
    alpha: float = 0.7
    series_per_study: int = 1
    n_studies: int = 100_000
    n_false_labels: int = 11
    correlated: bool = False
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError(f"alpha must be in (0, 1], got {self.alpha}")
        if self.series_per_study < 1:
            raise ValueError("series_per_study must be >= 1")
        if self.n_studies < 1:
            raise ValueError("n_studies must be >= 1")
        if self.n_false_labels < 1:
            raise ValueError("n_false_labels must be >= 1")

    @property
    def beta_shapes(self) -> tuple[float, float]:
        return BETA_CONCENTRATION * self.alpha, BETA_CONCENTRATION * (1.0 - self.alpha)

    @property
    def n_labels(self) -> int:
        return self.n_false_labels + 1


@dataclass(frozen=True)
class McCurvePoint:
    alpha: float
    series_per_study: int
    mean_accuracy: float
    std_accuracy: float
    correlated: bool = False
    n_studies: int = 0


def label_token(index: int) -> str:
    # zero padding keeps lexicographic order equal to numeric order
    return f"{index:03d}"


def draw_thresholds(alpha: float, size, rng: np.random.Generator):
    if alpha >= 1.0:
        return 1.0 if size is None else np.ones(size)
    return rng.beta(BETA_CONCENTRATION * alpha, BETA_CONCENTRATION * (1.0 - alpha), size=size)


def _false_labels(truth: np.ndarray, offsets: np.ndarray, n_labels: int, correlated: bool) -> np.ndarray:
    if correlated:
        return np.broadcast_to((truth + 1) % n_labels, offsets.shape)
    # uniform over the labels other than the truth
    return offsets + (offsets >= truth)


def simulate_vote(
    alpha: float,
    truth_label: int,
    rng: np.random.Generator,
    n_false_labels: int = 11,
    correlated: bool = False,
) -> Vote:
    t = float(draw_thresholds(alpha, None, rng))
    p = rng.random()
    if p < t:
        label = truth_label
    elif correlated:
        label = (truth_label + 1) % (n_false_labels + 1)
    else:
        r = int(rng.integers(n_false_labels))
        label = r + (r >= truth_label)
    return Vote(label_token(label), t, VoteSource.NETWORK)


def simulate_study(params: McParams, rng: np.random.Generator) -> bool:
    """One pseudo-study through the scalar tally; True when the truth label wins."""
    truth = int(rng.integers(params.n_labels))
    votes = [
        simulate_vote(params.alpha, truth, rng, params.n_false_labels, params.correlated)
        for _ in range(params.series_per_study)
    ]
    outcome = tally(votes)
    winner = outcome.winner if outcome.is_winner else break_tie(votes, outcome.tied)
    return winner == label_token(truth)


def _stream(params: McParams, block: int) -> np.random.Generator:
    key = (int(params.correlated), params.series_per_study, int(round(params.alpha * 1_000_000)), block)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(params.seed, spawn_key=key)))


def simulate_block(params: McParams, block: int, size: int) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized draws for ``size`` studies: (truth, labels, weights, winners)."""
    rng = _stream(params, block)
    m, n_labels = params.series_per_study, params.n_labels
    truth = rng.integers(n_labels, size=size)
    weights = draw_thresholds(params.alpha, (size, m), rng)
    hits = rng.random((size, m)) < weights
    offsets = rng.integers(params.n_false_labels, size=(size, m))
    wrong = _false_labels(truth[:, None], offsets, n_labels, params.correlated)
    labels = np.where(hits, truth[:, None], wrong)
    winners = tally_batch(labels, weights, n_labels)
    return truth, labels, weights, winners


def _count_block(args: tuple[McParams, int, int]) -> int:
    params, block, size = args
    truth, _, _, winners = simulate_block(params, block, size)
    return int(np.count_nonzero(winners == truth))


def _blocks(n: int) -> list[tuple[int, int]]:
    return [(b, min(BLOCK_SIZE, n - b * BLOCK_SIZE)) for b in range(math.ceil(n / BLOCK_SIZE))]


def _curve_point(params: McParams, correct: int) -> McCurvePoint:
    p = correct / params.n_studies
    return McCurvePoint(params.alpha, params.series_per_study, p, math.sqrt(p * (1.0 - p)), params.correlated, params.n_studies)


def _run_cells(cells: Sequence[McParams], workers: int) -> list[McCurvePoint]:
    tasks = [(cell, b, size) for cell in cells for b, size in _blocks(cell.n_studies)]
    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            counts = list(pool.map(_count_block, tasks, chunksize=4))
    else:
        counts = [_count_block(t) for t in tasks]
    out, i = [], 0
    for cell in cells:
        k = len(_blocks(cell.n_studies))
        out.append(_curve_point(cell, sum(counts[i : i + k])))
        i += k
    return out


def study_accuracy(params: McParams, workers: int = 1) -> McCurvePoint:
    return _run_cells([params], workers)[0]


def run_experiment(
    alphas: Iterable[float],
    series_counts: Iterable[int],
    params: McParams,
    correlated_modes: Sequence[bool] = (False,),
    workers: int = 1,
) -> list[McCurvePoint]:
    """Accuracy curve over a grid, ordered by (correlated, series count, alpha)."""
    cells = [
        replace(params, alpha=float(a), series_per_study=int(m), correlated=bool(c))
        for c in sorted(set(correlated_modes))
        for m in sorted(set(series_counts))
        for a in sorted(set(alphas))
    ]
    return _run_cells(cells, workers)


def vote_statistics(params: McParams, n_votes: int, bins: int = 10) -> tuple[float, float]:
    """Per-vote accuracy and binned calibration error of simulated votes.

    Calibration error is the count-weighted mean |accuracy - mean weight| over
    ``bins`` equal-width weight bins.
    """
    rng = _stream(replace(params, series_per_study=1), block=(1 << 31) - 1)
    weights = draw_thresholds(params.alpha, n_votes, rng)
    correct = rng.random(n_votes) < weights
    idx = np.clip(np.ceil(weights * bins).astype(np.int64) - 1, 0, bins - 1)
    counts = np.bincount(idx, minlength=bins)
    hit_sum = np.bincount(idx, weights=correct.astype(np.float64), minlength=bins)
    w_sum = np.bincount(idx, weights=weights, minlength=bins)
    nz = counts > 0
    gaps = np.abs(hit_sum[nz] / counts[nz] - w_sum[nz] / counts[nz])
    error = float(np.sum(counts[nz] / n_votes * gaps))
    return float(correct.mean()), error


def format_curve(points: Sequence[McCurvePoint], seed: Optional[int] = None) -> str:
    header = f"# rng={RNG_ALGORITHM}" + (f" seed={seed}" if seed is not None else "")
    rows = [header, "correlated,series_per_study,alpha,mean,std"]
    for p in points:
        rows.append(f"{str(p.correlated).lower()},{p.series_per_study},{p.alpha:.6g},{p.mean_accuracy:.6f},{p.std_accuracy:.6f}")
    return "\n".join(rows) + "\n"
