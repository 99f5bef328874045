"""Discrete-observation hidden Markov models.

Evaluation (forward algorithm), decoding (Viterbi), learning (Baum-Welch
over multi-sequence corpora) and sampling for HMMs over a small symbol
alphabet. All recursions run in log space with log-sum-exp so sequences
of up to ~10^4 symbols and emission probabilities that collapse to exact
zeros stay numerically well behaved (convention: 0 * log 0 = 0).

Parameters and sequences are immutable after construction; every
operation here is a pure function and safe to call concurrently. The
corpus E-step accumulates over sequences in a fixed order, so a given
input always produces bit-identical results.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.special import logsumexp

from ._util import mix_seed

ROW_SUM_ATOL = 1e-12
# Fitted transition rows are floored here so log(transition) stays finite
# on paths that are actually possible; emissions are never floored, which
# lets the estimator drive them to exact zeros.
TRANSITION_FLOOR = 1e-300


class InvalidModelError(ValueError):
    """Model parameters are malformed (bad shapes, NaN, non-stochastic rows)."""


class InvalidSequenceError(ValueError):
    """An observation sequence leaves the model's alphabet."""


class ImpossibleSequenceError(ValueError):
    """A sequence has probability zero under the model."""


@dataclass(frozen=True, eq=False)
class HmmParameters:
    """Initial distribution, transition matrix and emission matrix.

    ``transition[i, k]`` is the probability of moving from hidden state
    ``i`` to state ``k``; ``emission[i, j]`` the probability of emitting
    symbol ``j`` from state ``i``. Rows must sum to one within 1e-12 and
    entries must lie in [0, 1]; exact zeros are permitted. ``seed``
    records provenance of fitted parameters and plays no role in any
    computation.
    """

    n_states: int
    n_symbols: int
    initial: np.ndarray
    transition: np.ndarray
    emission: np.ndarray
    seed: int | None = None

    def __post_init__(self):
        initial = np.asarray(self.initial, dtype=float)
        transition = np.asarray(self.transition, dtype=float)
        emission = np.asarray(self.emission, dtype=float)
        if self.n_states < 1 or self.n_symbols < 1:
            raise InvalidModelError("n_states and n_symbols must be positive")
        if initial.shape != (self.n_states,):
            raise InvalidModelError(f"initial must have shape ({self.n_states},)")
        if transition.shape != (self.n_states, self.n_states):
            raise InvalidModelError("transition must be n_states x n_states")
        if emission.shape != (self.n_states, self.n_symbols):
            raise InvalidModelError("emission must be n_states x n_symbols")
        for name, arr in (("initial", initial), ("transition", transition), ("emission", emission)):
            if not np.all(np.isfinite(arr)):
                raise InvalidModelError(f"{name} contains NaN or infinity")
            if np.any(arr < 0.0) or np.any(arr > 1.0 + ROW_SUM_ATOL):
                raise InvalidModelError(f"{name} entries must lie in [0, 1]")
        if abs(initial.sum() - 1.0) > ROW_SUM_ATOL:
            raise InvalidModelError("initial distribution must sum to 1")
        for name, mat in (("transition", transition), ("emission", emission)):
            if np.any(np.abs(mat.sum(axis=1) - 1.0) > ROW_SUM_ATOL):
                raise InvalidModelError(f"every {name} row must sum to 1")
        for arr in (initial, transition, emission):
            arr.setflags(write=False)
        object.__setattr__(self, "initial", initial)
        object.__setattr__(self, "transition", transition)
        object.__setattr__(self, "emission", emission)


@dataclass(frozen=True)
class FitConfig:
    """Knobs for Baum-Welch: iteration cap, relative-improvement tolerance
    on the corpus log-likelihood, and number of random restarts (the best
    held-in likelihood wins)."""

    max_iterations: int = 500
    tolerance: float = 1e-6
    n_restarts: int = 5

    def __post_init__(self):
        if self.max_iterations < 0:
            raise ValueError("max_iterations must be >= 0")
        if self.tolerance < 0:
            raise ValueError("tolerance must be >= 0")
        if self.n_restarts < 1:
            raise ValueError("n_restarts must be >= 1")


@dataclass(frozen=True)
class FitResult:
    params: HmmParameters
    log_likelihood_trace: tuple[float, ...]
    converged: bool
    iterations: int
    seed: int


@dataclass(frozen=True)
class PosteriorMarginals:
    """Per-time state posteriors ``gamma`` (T x I) and per-transition
    posteriors ``xi`` (T-1 x I x I), both conditioned on the full sequence."""

    gamma: np.ndarray
    xi: np.ndarray


def _as_symbols(seq, n_symbols: int) -> np.ndarray:
    symbols = np.asarray(seq, dtype=np.int64)
    if symbols.ndim != 1 or symbols.size == 0:
        raise InvalidSequenceError("sequence must be a non-empty 1-D array of symbols")
    if symbols.min() < 0 or symbols.max() >= n_symbols:
        raise InvalidSequenceError(
            f"symbols must lie in [0, {n_symbols}); got range "
            f"[{symbols.min()}, {symbols.max()}]"
        )
    return symbols


def _log_params(params: HmmParameters):
    with np.errstate(divide="ignore"):
        return (
            np.log(params.initial),
            np.log(params.transition),
            np.log(params.emission),
        )


def log_likelihood(params: HmmParameters, seq) -> float:
    """Log-probability of ``seq`` under ``params`` in nats.

    Returns ``-inf`` for sequences the model assigns probability zero.
    """
    symbols = _as_symbols(seq, params.n_symbols)
    log_pi, log_a, log_b = _log_params(params)
    log_alpha = log_pi + log_b[:, symbols[0]]
    for t in range(1, symbols.size):
        log_alpha = logsumexp(log_alpha[:, None] + log_a, axis=0) + log_b[:, symbols[t]]
    return float(logsumexp(log_alpha))


def sequence_log_likelihoods(params: HmmParameters, seqs: Sequence) -> np.ndarray:
    """Per-sequence log-likelihoods for a corpus, in input order.

    Duplicates are evaluated once internally; the result is identical to
    mapping :func:`log_likelihood` over ``seqs``.
    """
    compact = _compact_corpus(seqs, params.n_symbols)
    log_pi, log_a, log_b = _log_params(params)
    out = np.empty(compact.n_sequences)
    for start, stop in _chunk_bounds(compact.lengths, params.n_states):
        lengths = compact.lengths[start:stop]
        symbols = compact.symbols[start:stop, : int(lengths[0])]
        _, ll, _ = _forward_chunk(log_pi, log_a, log_b, symbols, lengths)
        for offset, positions in enumerate(compact.positions[start:stop]):
            out[positions] = ll[offset]
    return out


def posteriors(params: HmmParameters, seq) -> PosteriorMarginals:
    """State and transition posteriors given the full sequence.

    Raises :class:`ImpossibleSequenceError` when the sequence has
    probability zero (posteriors would be 0/0).
    """
    symbols = _as_symbols(seq, params.n_symbols)
    log_pi, log_a, log_b = _log_params(params)
    symbols = symbols[None, :]
    lengths = np.array([symbols.shape[1]], dtype=np.int64)
    la, ll, lbx = _forward_chunk(log_pi, log_a, log_b, symbols, lengths)
    if not np.isfinite(ll[0]):
        raise ImpossibleSequenceError("impossible sequence: probability 0 under the model")
    lb = _backward_chunk(log_a, lbx, lengths)
    gamma = np.exp(la[0] + lb[0] - ll[0])
    gamma /= gamma.sum(axis=1, keepdims=True)
    T = symbols.shape[1]
    n_states = params.n_states
    xi = np.zeros((max(T - 1, 0), n_states, n_states))
    for t in range(T - 1):
        log_xi = la[0, t][:, None] + log_a + (lbx[0, t + 1] + lb[0, t + 1])[None, :] - ll[0]
        xi_t = np.exp(log_xi)
        xi[t] = xi_t / xi_t.sum()
    return PosteriorMarginals(gamma=gamma, xi=xi)


def viterbi(params: HmmParameters, seq) -> np.ndarray:
    """Most likely hidden-state path; ties are broken toward the lowest
    state index at each backtrack step (and at the final state)."""
    symbols = _as_symbols(seq, params.n_symbols)
    log_pi, log_a, log_b = _log_params(params)
    T = symbols.size
    n_states = params.n_states
    delta = log_pi + log_b[:, symbols[0]]
    back = np.zeros((T, n_states), dtype=np.int64)
    for t in range(1, T):
        scores = delta[:, None] + log_a
        back[t] = np.argmax(scores, axis=0)  # first max = lowest index
        delta = scores[back[t], np.arange(n_states)] + log_b[:, symbols[t]]
    best = float(np.max(delta))
    if best == -np.inf:
        raise ImpossibleSequenceError("impossible sequence: probability 0 under the model")
    path = np.empty(T, dtype=np.int64)
    path[-1] = int(np.argmax(delta))
    for t in range(T - 1, 0, -1):
        path[t - 1] = back[t, path[t]]
    return path


def canonicalize_states(params: HmmParameters) -> HmmParameters:
    """Deterministically relabel states so results are comparable across
    fits: descending probability of emitting symbol 0, ties broken by
    descending probability of the last "loud" symbol (index 2 when the
    alphabet has three symbols). A pure permutation; likelihoods of every
    sequence are unchanged.
    """
    emission = params.emission
    primary = emission[:, 0]
    secondary = emission[:, min(2, params.n_symbols - 1)]
    order = np.lexsort((-secondary, -primary))
    if np.array_equal(order, np.arange(params.n_states)):
        return params
    return HmmParameters(
        n_states=params.n_states,
        n_symbols=params.n_symbols,
        initial=params.initial[order],
        transition=params.transition[np.ix_(order, order)],
        emission=emission[order],
        seed=params.seed,
    )


def sample(params: HmmParameters, rng: np.random.Generator, max_length: int,
           stop_symbol: int | None = None) -> np.ndarray:
    """Draw one observation sequence from the model.

    Generation halts immediately after the first emission of
    ``stop_symbol`` (which is included in the output) and is otherwise
    truncated at ``max_length``.
    """
    if max_length < 1:
        raise ValueError("max_length must be >= 1")
    cum_initial = np.cumsum(params.initial)
    cum_transition = np.cumsum(params.transition, axis=1)
    cum_emission = np.cumsum(params.emission, axis=1)
    state = int(np.searchsorted(cum_initial, rng.random(), side="right"))
    state = min(state, params.n_states - 1)
    out = []
    for _ in range(max_length):
        symbol = int(np.searchsorted(cum_emission[state], rng.random(), side="right"))
        symbol = min(symbol, params.n_symbols - 1)
        out.append(symbol)
        if stop_symbol is not None and symbol == stop_symbol:
            break
        state = int(np.searchsorted(cum_transition[state], rng.random(), side="right"))
        state = min(state, params.n_states - 1)
    return np.asarray(out, dtype=np.int64)


def sample_corpus(params: HmmParameters, rng: np.random.Generator, n_sequences: int,
                  max_length: int, stop_symbol: int | None = None) -> list[np.ndarray]:
    """Draw many sequences at once (lockstep across sequences, so it is much
    faster than repeated :func:`sample` calls but consumes the RNG stream
    differently)."""
    if max_length < 1:
        raise ValueError("max_length must be >= 1")
    if n_sequences < 0:
        raise ValueError("n_sequences must be >= 0")
    if n_sequences == 0:
        return []
    cum_initial = np.cumsum(params.initial)
    cum_transition = np.cumsum(params.transition, axis=1)
    cum_emission = np.cumsum(params.emission, axis=1)
    # last cumulative may fall a hair below 1; keep draws in range
    cum_initial[-1] = cum_transition[:, -1] = cum_emission[:, -1] = 1.1

    def pick(cum_rows: np.ndarray, u: np.ndarray) -> np.ndarray:
        # inverse-CDF draw per row: first column where u < cumulative
        chosen = (u[:, None] < cum_rows).argmax(axis=1)
        return chosen

    states = np.searchsorted(cum_initial, rng.random(n_sequences), side="right")
    states = np.minimum(states, params.n_states - 1)
    active = np.arange(n_sequences)
    columns: list[list[int]] = [[] for _ in range(n_sequences)]
    for _ in range(max_length):
        symbols = pick(cum_emission[states], rng.random(active.size))
        for idx, symbol in zip(active, symbols):
            columns[idx].append(int(symbol))
        if stop_symbol is not None:
            keep = symbols != stop_symbol
            active = active[keep]
            states = states[keep]
            if active.size == 0:
                break
        states = pick(cum_transition[states], rng.random(active.size)) if active.size else states
    return [np.asarray(seq, dtype=np.int64) for seq in columns]


def random_parameters(n_states: int, n_symbols: int, rng: np.random.Generator) -> HmmParameters:
    """Rows drawn from a flat Dirichlet; the standard fit initialization."""
    return HmmParameters(
        n_states=n_states,
        n_symbols=n_symbols,
        initial=rng.dirichlet(np.ones(n_states)),
        transition=np.vstack([rng.dirichlet(np.ones(n_states)) for _ in range(n_states)]),
        emission=np.vstack([rng.dirichlet(np.ones(n_symbols)) for _ in range(n_states)]),
    )


# --- corpus compaction -------------------------------------------------------

# Memory budget for one chunk's forward/backward lattice (floats).
_LATTICE_BUDGET = 8_000_000


@dataclass(frozen=True)
class _CompactCorpus:
    """Unique sequences sorted by descending length in one padded matrix.

    Baum-Welch statistics are additive over sequences, so identical
    sequences contribute one forward-backward pass weighted by their
    multiplicity; bootstrap samples drawn with replacement benefit a lot.
    Descending length order means the sequences still alive at time t
    always form a prefix of the rows, which keeps the time recursion a
    plain slice.
    """

    symbols: np.ndarray                # (n_unique, max_len), padded with 0
    lengths: np.ndarray                # (n_unique,), descending
    weights: np.ndarray                # multiplicity of each unique sequence
    positions: tuple[np.ndarray, ...]  # original corpus indices per unique row
    n_sequences: int


def _compact_corpus(seqs: Sequence, n_symbols: int) -> _CompactCorpus:
    if len(seqs) == 0:
        raise ValueError("corpus must contain at least one sequence")
    index: dict[tuple[int, bytes], list[int]] = {}
    arrays: list[np.ndarray] = []
    for pos, seq in enumerate(seqs):
        symbols = _as_symbols(seq, n_symbols)
        key = (symbols.size, symbols.tobytes())
        if key in index:
            index[key].append(pos)
        else:
            index[key] = [pos]
            arrays.append(symbols)
    lengths = np.array([a.size for a in arrays], dtype=np.int64)
    order = np.argsort(-lengths, kind="stable")
    max_len = int(lengths.max())
    matrix = np.zeros((len(arrays), max_len), dtype=np.int64)
    for row, src in enumerate(order):
        matrix[row, : lengths[src]] = arrays[src]
    keys = list(index)
    positions = tuple(np.asarray(index[keys[src]], dtype=np.int64) for src in order)
    weights = np.array([p.size for p in positions], dtype=float)
    return _CompactCorpus(
        symbols=matrix,
        lengths=lengths[order],
        weights=weights,
        positions=positions,
        n_sequences=len(seqs),
    )


def _chunk_bounds(lengths: np.ndarray, n_states: int) -> list[tuple[int, int]]:
    """Split rows (already sorted by descending length) into contiguous
    chunks whose (rows x max_len x n_states) lattice fits the budget and
    whose shortest row is at least half the chunk's longest, so padding
    never more than doubles the work."""
    bounds = []
    start = 0
    n = lengths.size
    while start < n:
        max_len = int(lengths[start])
        rows = max(1, _LATTICE_BUDGET // max(max_len * n_states, 1))
        stop = min(n, start + rows)
        # shrink to keep the chunk dense: all rows >= max_len / 2
        min_ok = max(max_len // 2, 1)
        dense_stop = start + int(np.searchsorted(-lengths[start:stop], -min_ok, side="right"))
        stop = max(start + 1, dense_stop)
        bounds.append((start, stop))
        start = stop
    return bounds


def _forward_chunk(log_pi, log_a, log_b, symbols, lengths):
    """Forward lattice for one chunk of descending-length rows.

    Returns (log_alpha, log_lik, log_emission_at_obs); log_alpha entries
    past each row's length stay at -inf. ``np.logaddexp`` keeps exact
    -inf arithmetic (impossible states never turn into NaN).
    """
    n, max_len = symbols.shape
    n_states = log_pi.size
    lbx = log_b.T[symbols]  # (n, T, I)
    la = np.full((n, max_len, n_states), -np.inf)
    la[:, 0] = log_pi[None, :] + lbx[:, 0]
    for t in range(1, max_len):
        k = int(np.searchsorted(-lengths, -t))  # rows with length > t
        if k == 0:
            break
        la[:k, t] = np.logaddexp.reduce(
            la[:k, t - 1][:, :, None] + log_a[None, :, :], axis=1
        ) + lbx[:k, t]
    ll = np.logaddexp.reduce(la[np.arange(n), lengths - 1], axis=-1)
    return la, ll, lbx


def _backward_chunk(log_a, lbx, lengths):
    n, max_len, n_states = lbx.shape
    lb = np.zeros((n, max_len, n_states))
    for t in range(max_len - 2, -1, -1):
        k = int(np.searchsorted(-lengths, -(t + 1)))  # rows with length > t+1
        if k == 0:
            continue
        lb[:k, t] = np.logaddexp.reduce(
            log_a[None, :, :] + (lbx[:k, t + 1] + lb[:k, t + 1])[:, None, :], axis=2
        )
    return lb


@dataclass
class _EStepStats:
    log_likelihood: float
    initial_acc: np.ndarray
    transition_num: np.ndarray
    transition_den: np.ndarray
    emission_num: np.ndarray
    emission_den: np.ndarray


def _e_step(params: HmmParameters, compact: _CompactCorpus) -> _EStepStats:
    n_states, n_symbols = params.n_states, params.n_symbols
    log_pi, log_a, log_b = _log_params(params)
    stats = _EStepStats(
        log_likelihood=0.0,
        initial_acc=np.zeros(n_states),
        transition_num=np.zeros((n_states, n_states)),
        transition_den=np.zeros(n_states),
        emission_num=np.zeros((n_states, n_symbols)),
        emission_den=np.zeros(n_states),
    )
    for start, stop in _chunk_bounds(compact.lengths, n_states):
        lengths = compact.lengths[start:stop]
        max_len = int(lengths[0])
        symbols = compact.symbols[start:stop, :max_len]
        weights = compact.weights[start:stop]
        la, ll, lbx = _forward_chunk(log_pi, log_a, log_b, symbols, lengths)
        if not np.all(np.isfinite(ll)):
            raise ImpossibleSequenceError(
                "impossible sequence: corpus contains a sequence with probability 0"
            )
        lb = _backward_chunk(log_a, lbx, lengths)
        valid = np.arange(max_len)[None, :] < lengths[:, None]
        lgamma = np.where(valid[:, :, None], la + lb - ll[:, None, None], -np.inf)
        gamma = np.exp(lgamma)  # (n, T, I), zero at padded positions
        weighted_gamma = gamma * weights[:, None, None]
        stats.initial_acc += weighted_gamma[:, 0].sum(axis=0)
        stats.emission_den += weighted_gamma.sum(axis=(0, 1))
        for j in range(n_symbols):
            mask = ((symbols == j) & valid).astype(float)
            stats.emission_num[:, j] += np.einsum("nt,nti->i", mask, weighted_gamma)
        before_last = np.arange(max_len)[None, :] < (lengths - 1)[:, None]
        stats.transition_den += (gamma * before_last[:, :, None] * weights[:, None, None]).sum(axis=(0, 1))
        for t in range(max_len - 1):
            k = int(np.searchsorted(-lengths, -(t + 1)))  # rows with length > t+1
            if k == 0:
                break
            log_xi = (
                la[:k, t][:, :, None]
                + log_a[None, :, :]
                + (lbx[:k, t + 1] + lb[:k, t + 1])[:, None, :]
                - ll[:k, None, None]
            )
            stats.transition_num += np.einsum("n,nij->ij", weights[:k], np.exp(log_xi))
        stats.log_likelihood += float(weights @ ll)
    return stats


def _m_step(stats: _EStepStats, previous: HmmParameters) -> HmmParameters:
    n_states = previous.n_states
    initial = stats.initial_acc / stats.initial_acc.sum()
    transition = np.empty_like(previous.transition)
    for i in range(n_states):
        if stats.transition_den[i] > 0.0:
            row = stats.transition_num[i] / stats.transition_den[i]
        else:
            row = previous.transition[i]  # state never followed; keep as-is
        row = np.maximum(row, TRANSITION_FLOOR)
        transition[i] = row / row.sum()
    emission = np.empty_like(previous.emission)
    for i in range(n_states):
        if stats.emission_den[i] > 0.0:
            row = stats.emission_num[i] / stats.emission_den[i]
        else:
            row = previous.emission[i]  # state never occupied
        emission[i] = row / row.sum()
    return HmmParameters(
        n_states=n_states,
        n_symbols=previous.n_symbols,
        initial=initial,
        transition=transition,
        emission=emission,
    )


def baum_welch_fit(train: Sequence, n_states: int, config: FitConfig | None = None,
                   seed: int = 0, n_symbols: int | None = None) -> FitResult:
    """Fit an HMM to a corpus by expectation-maximization.

    Runs ``config.n_restarts`` independent EM runs from flat-Dirichlet
    initializations derived from ``seed`` and keeps the one with the best
    final corpus log-likelihood. The trace records the total corpus
    log-likelihood once per E-step (so its last entry belongs to the
    returned parameters) and is nondecreasing up to float noise.
    Convergence: relative improvement of the corpus log-likelihood below
    ``config.tolerance``. The returned parameters are canonicalized.

    ``n_symbols`` defaults to one past the largest symbol seen in the
    corpus; pass it explicitly when a sample might be missing the top
    symbol (e.g. bootstrap draws).
    """
    if config is None:
        config = FitConfig()
    if n_states < 1:
        raise ValueError("n_states must be >= 1")
    if len(train) == 0:
        raise ValueError("training corpus must not be empty")
    if n_symbols is None:
        n_symbols = 1 + max(int(np.max(np.asarray(seq))) for seq in train)
    compact = _compact_corpus(train, n_symbols)

    best: tuple[float, HmmParameters, list[float], bool, int] | None = None
    for restart in range(config.n_restarts):
        rng = np.random.default_rng(mix_seed(seed, restart))
        params = random_parameters(n_states, n_symbols, rng)
        trace: list[float] = []
        converged = False
        iterations = 0
        for iteration in range(config.max_iterations + 1):
            stats = _e_step(params, compact)
            trace.append(stats.log_likelihood)
            if iteration > 0:
                improvement = trace[-1] - trace[-2]
                if improvement / max(abs(trace[-2]), 1e-12) < config.tolerance:
                    converged = True
                    break
            if iteration == config.max_iterations:
                break
            params = _m_step(stats, params)
            iterations += 1
        if best is None or trace[-1] > best[0]:
            best = (trace[-1], params, trace, converged, iterations)

    _, params, trace, converged, iterations = best
    params = dataclasses.replace(canonicalize_states(params), seed=seed)
    return FitResult(
        params=params,
        log_likelihood_trace=tuple(trace),
        converged=converged,
        iterations=iterations,
        seed=seed,
    )


# --- serialization -----------------------------------------------------------

def params_to_json(params: HmmParameters) -> str:
    """JSON wire format with row-major matrices; floats render with
    shortest-roundtrip precision so deserialization is bit-exact."""
    doc = {
        "n_states": params.n_states,
        "n_symbols": params.n_symbols,
        "initial": params.initial.tolist(),
        "transition": params.transition.tolist(),
        "emission": params.emission.tolist(),
        "seed": params.seed,
    }
    return json.dumps(doc)


def params_from_json(text: str) -> HmmParameters:
    doc = json.loads(text)
    return HmmParameters(
        n_states=int(doc["n_states"]),
        n_symbols=int(doc["n_symbols"]),
        initial=np.asarray(doc["initial"], dtype=float),
        transition=np.asarray(doc["transition"], dtype=float),
        emission=np.asarray(doc["emission"], dtype=float),
        seed=doc.get("seed"),
    )
