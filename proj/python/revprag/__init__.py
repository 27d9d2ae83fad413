"""Retrieval poisoning detection from LM activations."""

from ._core import (
    Corpus,
    Index,
    RevpragError,
    add_noise,
    config_hash,
    encode,
    full_run,
    gen_corpus,
    load_corpus,
    metrics,
    normalized_config,
    parse_jsonl,
    poison,
    project2d,
    sim,
    triplet_loss,
)

__all__ = [
    "Corpus",
    "Index",
    "RevpragError",
    "add_noise",
    "config_hash",
    "encode",
    "full_run",
    "gen_corpus",
    "load_corpus",
    "metrics",
    "normalized_config",
    "parse_jsonl",
    "poison",
    "project2d",
    "sim",
    "triplet_loss",
]
