"""Toxicity-and-disengagement analysis for threaded conversations.

Encode comment threads as short symbol sequences, fit hidden Markov
models over bootstrap ensembles, and compute the emission and
relative-risk diagnostics that flag a terminal conversational state.
"""

from .hmm import (
    FitConfig,
    FitResult,
    HmmParameters,
    ImpossibleSequenceError,
    InvalidModelError,
    InvalidSequenceError,
    PosteriorMarginals,
    baum_welch_fit,
    canonicalize_states,
    log_likelihood,
    params_from_json,
    params_to_json,
    posteriors,
    sample,
    sample_corpus,
    sequence_log_likelihoods,
    viterbi,
)

__version__ = "0.1.0"
