"""Synthetic corpora for desk-scale runs: a planted-motif classification task
and an unlabeled genome drawn from the same distribution."""

from __future__ import annotations

import numpy as np

from .seqcore import LabeledDataset, NucleotideSequence

DEFAULT_MOTIF = "GATTACAG"
_BASES = np.array(list("ACGT"))


def _background(rng: np.random.Generator, length: int, motif: str) -> str:
    """Uniform ACGT string with no occurrence of ``motif``."""
    while True:
        s = "".join(rng.choice(_BASES, length))
        if motif not in s:
            return s


def _plant(s: str, motif: str, pos: int) -> str:
    return s[:pos] + motif + s[pos + len(motif) :]


def motif_dataset(
    n: int = 2000, length: int = 128, motif: str = DEFAULT_MOTIF, seed: int = 0
) -> LabeledDataset:
    """Balanced two-class set: label 1 carries ``motif`` at a uniform position, label 0 never does."""
    if length < len(motif):
        raise ValueError("length must fit the motif")
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n) % 2)
    records = []
    for i, y in enumerate(labels):
        s = _background(rng, length, motif)
        if y:
            s = _plant(s, motif, int(rng.integers(0, length - len(motif) + 1)))
        records.append((NucleotideSequence(f"motif{i}", s), int(y)))
    return LabeledDataset(records, 2)


def motif_genome(
    length: int = 200_000, motif: str = DEFAULT_MOTIF, spacing: int = 256, seed: int = 0, name: str = "synth"
) -> NucleotideSequence:
    """Random genome with one motif copy per ``spacing`` bases on average."""
    rng = np.random.default_rng(seed)
    chars = rng.choice(_BASES, length)
    count = length // spacing
    for pos in rng.integers(0, length - len(motif) + 1, count):
        chars[pos : pos + len(motif)] = list(motif)
    return NucleotideSequence(name, "".join(chars))
