"""Nucleotide alphabet, one-hot encoding and corpus ingestion.

Sequences are plain strings over ``ACGTN``. Encoded matrices are ``(L, 5)``
float64 arrays with columns ordered A, C, G, T, N. An all-zero row is a
masked token and decodes to :data:`MASK_GLYPH`.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

ALPHABET = "ACGTN"
WIDTH = len(ALPHABET)
MASK_GLYPH = "·"
AMBIGUITY_CODES = set("RYSWKMBDHV")

_INDEX = {base: i for i, base in enumerate(ALPHABET)}


class SequenceError(ValueError):
    """Invalid nucleotide data (bad character, empty record, bad label)."""


class EncodingError(SequenceError):
    pass


class DecodingError(SequenceError):
    pass


class FastaParseError(SequenceError):
    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


@dataclass(frozen=True)
class NucleotideSequence:
    id: str
    bases: str

    def __post_init__(self):
        if not self.bases:
            raise SequenceError(f"sequence {self.id!r} is empty")
        pos = first_invalid(self.bases)
        if pos is not None:
            raise SequenceError(
                f"sequence {self.id!r}: invalid character {self.bases[pos]!r} at position {pos}"
            )

    def __len__(self) -> int:
        return len(self.bases)


@dataclass
class LabeledDataset:
    records: list[tuple[NucleotideSequence, int]]
    num_classes: int
    splits: list[str] | None = None

    def __post_init__(self):
        if self.num_classes < 2:
            raise SequenceError("num_classes must be >= 2")
        for i, (_, label) in enumerate(self.records):
            if not 0 <= label < self.num_classes:
                raise SequenceError(f"record {i}: label {label} outside [0, {self.num_classes})")
        if self.splits is not None and len(self.splits) != len(self.records):
            raise SequenceError("splits must align with records")

    def __len__(self) -> int:
        return len(self.records)

    @property
    def labels(self) -> np.ndarray:
        return np.array([label for _, label in self.records], dtype=np.int64)

    @property
    def sequences(self) -> list[NucleotideSequence]:
        return [seq for seq, _ in self.records]


def first_invalid(bases: str) -> int | None:
    for i, ch in enumerate(bases):
        if ch not in _INDEX:
            return i
    return None


def normalize_bases(raw: str, coerce_ambiguous: bool = False) -> str:
    """Uppercase ``raw`` and optionally map IUPAC ambiguity codes to N."""
    bases = raw.strip().upper()
    if coerce_ambiguous:
        bases = "".join("N" if ch in AMBIGUITY_CODES else ch for ch in bases)
    return bases


def encode_one_hot(seq: NucleotideSequence | str) -> np.ndarray:
    bases = seq.bases if isinstance(seq, NucleotideSequence) else seq
    if not bases:
        raise EncodingError("cannot encode an empty sequence")
    idx = np.empty(len(bases), dtype=np.int64)
    for j, ch in enumerate(bases):
        try:
            idx[j] = _INDEX[ch]
        except KeyError:
            raise EncodingError(f"invalid character {ch!r} at position {j}") from None
    out = np.zeros((len(bases), WIDTH))
    out[np.arange(len(bases)), idx] = 1.0
    return out


def decode_one_hot(m: np.ndarray, id: str = "decoded") -> NucleotideSequence | str:
    """Inverse of :func:`encode_one_hot`.

    Returns a :class:`NucleotideSequence` when no row is masked, otherwise the
    raw string with :data:`MASK_GLYPH` at masked rows (the glyph is outside the
    alphabet, so such strings are not valid sequences).
    """
    m = np.asarray(m)
    if m.ndim != 2 or m.shape[1] != WIDTH:
        raise DecodingError(f"expected an (L, {WIDTH}) matrix, got shape {m.shape}")
    chars = []
    for j, row in enumerate(m):
        nonzero = np.flatnonzero(row)
        if nonzero.size == 0:
            chars.append(MASK_GLYPH)
        elif nonzero.size == 1 and row[nonzero[0]] == 1.0:
            chars.append(ALPHABET[nonzero[0]])
        else:
            raise DecodingError(f"row {j} is not a one-hot or mask row: {row.tolist()}")
    text = "".join(chars)
    if MASK_GLYPH in text:
        return text
    return NucleotideSequence(id, text)


def decode_to_string(m: np.ndarray) -> str:
    out = decode_one_hot(m)
    return out.bases if isinstance(out, NucleotideSequence) else out


def _read_text(source: str | Path | io.TextIOBase) -> Iterable[str]:
    if isinstance(source, (str, Path)):
        with open(source, encoding="utf-8", newline="") as fh:
            yield from fh
    else:
        yield from source


def parse_fasta(source: str | Path | io.TextIOBase, coerce_ambiguous: bool = False) -> list[NucleotideSequence]:
    records: list[NucleotideSequence] = []
    header: str | None = None
    header_line = 0
    chunks: list[str] = []

    def flush():
        if header is None:
            return
        if not chunks:
            raise FastaParseError(f"record {header!r} has no sequence", header_line)
        records.append(NucleotideSequence(header, "".join(chunks)))

    for lineno, raw in enumerate(_read_text(source), start=1):
        line = raw.rstrip("\r\n")
        if not line.strip():
            continue
        if line.startswith(">"):
            flush()
            name = line[1:].strip()
            if not name:
                raise FastaParseError("header has no identifier", lineno)
            header, header_line, chunks = name.split()[0], lineno, []
            continue
        if header is None:
            raise FastaParseError("sequence data before the first header", lineno)
        bases = normalize_bases(line, coerce_ambiguous)
        pos = first_invalid(bases)
        if pos is not None:
            raise FastaParseError(f"illegal character {bases[pos]!r} at column {pos + 1}", lineno)
        chunks.append(bases)
    flush()
    return records


def format_fasta(records: Iterable[NucleotideSequence], width: int = 60) -> str:
    out = []
    for rec in records:
        out.append(f">{rec.id}\n")
        for i in range(0, len(rec.bases), width):
            out.append(rec.bases[i : i + width] + "\n")
    return "".join(out)


def load_labeled_csv(
    source: str | Path | io.TextIOBase, num_classes: int, coerce_ambiguous: bool = False
) -> LabeledDataset:
    """Read a ``sequence,label[,split]`` CSV into a validated dataset.

    Row numbers in error messages count the header as row 1.
    """
    if isinstance(source, (str, Path)):
        text = Path(source).read_text(encoding="utf-8")
    else:
        text = source.read()
    reader = csv.reader(io.StringIO(text, newline=""))
    header = next(reader, None)
    if header is None:
        raise SequenceError("empty file: no records")
    header = [h.strip().lower() for h in header]
    if header[:2] != ["sequence", "label"] or len(header) > 3 or (len(header) == 3 and header[2] != "split"):
        raise SequenceError(f"expected header 'sequence,label[,split]', got {','.join(header)!r}")
    has_split = len(header) == 3
    records: list[tuple[NucleotideSequence, int]] = []
    splits: list[str] = []
    for rowno, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise SequenceError(f"row {rowno}: expected {len(header)} fields, got {len(row)}")
        bases = normalize_bases(row[0], coerce_ambiguous)
        try:
            seq = NucleotideSequence(f"row{rowno}", bases)
        except SequenceError as exc:
            raise SequenceError(f"row {rowno}: {exc}") from None
        try:
            label = int(row[1])
        except ValueError:
            raise SequenceError(f"row {rowno}: label {row[1]!r} is not an integer") from None
        if not 0 <= label < num_classes:
            raise SequenceError(f"row {rowno}: label {label} outside [0, {num_classes})")
        records.append((seq, label))
        if has_split:
            split = row[2].strip().lower()
            if split not in ("train", "val", "test"):
                raise SequenceError(f"row {rowno}: split {row[2]!r} not in train/val/test")
            splits.append(split)
    if not records:
        raise SequenceError("no records")
    return LabeledDataset(records, num_classes, splits if has_split else None)


def write_labeled_csv(path: str | Path, dataset: LabeledDataset) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        if dataset.splits is None:
            writer.writerow(["sequence", "label"])
            for seq, label in dataset.records:
                writer.writerow([seq.bases, label])
        else:
            writer.writerow(["sequence", "label", "split"])
            for (seq, label), split in zip(dataset.records, dataset.splits):
                writer.writerow([seq.bases, label, split])


def sample_windows(
    genome: list[NucleotideSequence], window: int, count: int, seed: int
) -> list[NucleotideSequence]:
    """Draw ``count`` windows uniformly over all valid start positions.

    Sampling is with replacement; each source is weighted by its number of
    start positions, so every valid window in the corpus is equally likely.
    """
    if window < 1:
        raise SequenceError("window must be >= 1")
    if count < 0:
        raise SequenceError("count must be >= 0")
    starts = np.array([max(len(s) - window + 1, 0) for s in genome], dtype=np.int64)
    total = int(starts.sum())
    if total == 0:
        raise SequenceError(f"no source sequence is at least {window} bp long")
    rng = np.random.default_rng(seed)
    flat = rng.integers(0, total, size=count)
    bounds = np.cumsum(starts)
    src = np.searchsorted(bounds, flat, side="right")
    offset = flat - (bounds[src] - starts[src])
    out = []
    for i, o in zip(src.tolist(), offset.tolist()):
        rec = genome[i]
        out.append(NucleotideSequence(f"{rec.id}:{o}-{o + window}", rec.bases[o : o + window]))
    return out
