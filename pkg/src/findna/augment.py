"""Augmentation operators on one-hot matrices and view pipelines.

Every operator maps an ``(L, 5)`` matrix to another ``(L, 5)`` matrix; length
is preserved by construction. Stochastic operators take their randomness from
explicit arguments (breakpoints, positions, seeds) so that each one is a pure
function. :class:`ViewPipeline` draws those arguments from per-op streams split
off the pipeline seed.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .seqcore import WIDTH, NucleotideSequence, encode_one_hot


class AugmentationError(ValueError):
    pass


class PipelineConfigError(AugmentationError):
    pass


class Kind(str, enum.Enum):
    TRANSLOCATION = "translocation"
    INSERTION = "insertion"
    DELETION = "deletion"
    REVERSE_COMPLEMENT = "reverse_complement"
    GAUSSIAN_NOISE = "gaussian_noise"
    MASKING = "masking"


# A<->T, C<->G, N fixed
_RC_COLUMNS = np.array([3, 2, 1, 0, 4])
_ACGT = np.eye(WIDTH)[:4]


@dataclass(frozen=True)
class AugmentationSpec:
    """One augmentation step.

    ``min_len``/``max_len`` bound the insertion fragment or deletion length;
    ``None`` means ``[1, floor(0.05 * L)]`` resolved at apply time.
    """

    kind: Kind
    min_len: int | None = None
    max_len: int | None = None
    rc_probability: float = 0.5
    noise_mean: float = 0.0
    noise_std: float = 0.2
    mask_ratio: float = 0.3

    def __post_init__(self):
        object.__setattr__(self, "kind", Kind(self.kind))
        if self.min_len is not None and self.min_len < 0:
            raise AugmentationError("min_len must be nonnegative")
        if self.max_len is not None and self.max_len < 0:
            raise AugmentationError("max_len must be nonnegative")
        if self.min_len is not None and self.max_len is not None and self.min_len > self.max_len:
            raise AugmentationError("empty length range")
        if not 0.0 <= self.rc_probability <= 1.0:
            raise AugmentationError("rc_probability must be in [0, 1]")
        if self.noise_std < 0:
            raise AugmentationError("noise_std must be nonnegative")
        if not 0.0 <= self.mask_ratio < 1.0:
            raise AugmentationError("mask_ratio must be in [0, 1)")

    def length_range(self, L: int) -> tuple[int, int]:
        default_hi = max(1, int(math.floor(0.05 * L)))
        lo = 1 if self.min_len is None else self.min_len
        hi = default_hi if self.max_len is None else self.max_len
        return lo, min(hi, L)


@dataclass
class EncodedView:
    matrix: np.ndarray
    masked_positions: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    mnm_targets: np.ndarray = field(default_factory=lambda: np.zeros((0, WIDTH)))

    def __post_init__(self):
        self.masked_positions = np.asarray(self.masked_positions, dtype=np.int64)
        self.mnm_targets = np.asarray(self.mnm_targets, dtype=np.float64).reshape(-1, WIDTH)
        if len(self.mnm_targets) != len(self.masked_positions):
            raise AugmentationError("mnm_targets and masked_positions differ in length")

    @property
    def length(self) -> int:
        return self.matrix.shape[0]

    def target_matrix(self) -> np.ndarray:
        """``(L, 5)`` matrix holding targets at masked rows and zeros elsewhere."""
        out = np.zeros_like(self.matrix)
        out[self.masked_positions] = self.mnm_targets
        return out


def _check_matrix(m: np.ndarray) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[1] != WIDTH:
        raise AugmentationError(f"expected an (L, {WIDTH}) matrix, got {m.shape}")
    return m


def _is_clean(m: np.ndarray) -> bool:
    """True when every row is a one-hot indicator or all zero."""
    binary = np.all((m == 0.0) | (m == 1.0))
    return bool(binary and np.all(m.sum(axis=1) <= 1.0))


def random_dna(length: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform A/C/G/T rows (never N)."""
    return _ACGT[rng.integers(0, 4, size=length)].copy()


def translocate(m: np.ndarray, breakpoint: int) -> np.ndarray:
    m = _check_matrix(m)
    L = m.shape[0]
    if not 0 <= breakpoint <= L:
        raise AugmentationError(f"breakpoint {breakpoint} outside [0, {L}]")
    return np.concatenate([m[breakpoint:], m[:breakpoint]], axis=0)


def insert_fragment(m: np.ndarray, pos: int, fragment: np.ndarray) -> np.ndarray:
    m = _check_matrix(m)
    fragment = _check_matrix(fragment) if np.size(fragment) else np.zeros((0, WIDTH))
    L = m.shape[0]
    if not 0 <= pos <= L:
        raise AugmentationError(f"insertion position {pos} outside [0, {L}]")
    if fragment.shape[0] < 1:
        raise AugmentationError("insertion fragment must have length >= 1")
    spliced = np.concatenate([m[:pos], fragment, m[pos:]], axis=0)
    return spliced[:L]


def delete_segment(m: np.ndarray, start: int, dlen: int, pad: np.ndarray) -> np.ndarray:
    m = _check_matrix(m)
    L = m.shape[0]
    pad = np.asarray(pad, dtype=np.float64).reshape(-1, WIDTH)
    if start < 0 or dlen < 0 or start + dlen > L:
        raise AugmentationError(f"deletion [{start}, {start + dlen}) outside [0, {L}]")
    if pad.shape[0] != dlen:
        raise AugmentationError(f"pad length {pad.shape[0]} != deletion length {dlen}")
    return np.concatenate([m[:start], m[start + dlen :], pad], axis=0)


def reverse_complement(m: np.ndarray, apply: bool = True, strict: bool = True) -> np.ndarray:
    """Reverse rows and swap A/T and C/G columns.

    With ``strict`` the input must be clean (one-hot or mask rows). Passing
    ``strict=False`` applies the same row/column permutation to arbitrary real
    rows, which is how noisy matrices are handled in noise-first mode.
    """
    m = _check_matrix(m)
    if strict and not _is_clean(m):
        raise AugmentationError("reverse_complement requires clean one-hot rows; apply it before noise")
    if not apply:
        return m.copy()
    return m[::-1, _RC_COLUMNS].copy()


def add_gaussian_noise(m: np.ndarray, mean: float = 0.0, std: float = 0.2, seed: int = 0) -> np.ndarray:
    m = _check_matrix(m)
    if std < 0:
        raise AugmentationError("std must be nonnegative")
    rng = np.random.default_rng(seed)
    return m + rng.normal(mean, std, size=m.shape) if std > 0 else m + mean


def mask_random(m: np.ndarray, ratio: float = 0.3, seed: int = 0) -> EncodedView:
    m = _check_matrix(m)
    if not 0.0 <= ratio < 1.0:
        raise AugmentationError("mask ratio must be in [0, 1)")
    L = m.shape[0]
    # the epsilon keeps e.g. 0.29 * 100 = 28.999... from flooring to 28
    count = int(math.floor(ratio * L + 1e-9))
    rng = np.random.default_rng(seed)
    positions = np.sort(rng.choice(L, size=count, replace=False)) if count else np.zeros(0, dtype=np.int64)
    targets = m[positions].copy()
    out = m.copy()
    out[positions] = 0.0
    return EncodedView(out, positions, targets)


def _op_seed(seed: int, index: int) -> np.random.SeedSequence:
    # counter-based split: stream i depends only on (seed, i)
    return np.random.SeedSequence([seed & 0xFFFFFFFF, seed >> 32 & 0xFFFFFFFF, index])


def _apply_one(spec: AugmentationSpec, m: np.ndarray, ss: np.random.SeedSequence, strict_rc: bool):
    rng = np.random.default_rng(ss)
    L = m.shape[0]
    kind = spec.kind
    if kind is Kind.TRANSLOCATION:
        return translocate(m, int(rng.integers(0, L + 1)))
    if kind is Kind.INSERTION:
        lo, hi = spec.length_range(L)
        flen = max(1, int(rng.integers(lo, hi + 1)))
        pos = int(rng.integers(0, L + 1))
        return insert_fragment(m, pos, random_dna(flen, rng))
    if kind is Kind.DELETION:
        lo, hi = spec.length_range(L)
        dlen = int(rng.integers(lo, hi + 1))
        start = int(rng.integers(0, L - dlen + 1))
        return delete_segment(m, start, dlen, random_dna(dlen, rng))
    if kind is Kind.REVERSE_COMPLEMENT:
        return reverse_complement(m, bool(rng.random() < spec.rc_probability), strict=strict_rc)
    if kind is Kind.GAUSSIAN_NOISE:
        return add_gaussian_noise(m, spec.noise_mean, spec.noise_std, int(rng.integers(0, 2**63)))
    raise AssertionError(kind)


@dataclass(frozen=True)
class ViewPipeline:
    """Ordered augmentations applied to produce one view.

    Masking, if present, must be last. Gaussian noise must follow every
    operator that needs clean rows unless ``noise_first`` is set, in which
    case a reverse-complement after noise is applied as a pure permutation.
    """

    steps: tuple[AugmentationSpec, ...] = ()
    noise_first: bool = False

    def __post_init__(self):
        object.__setattr__(self, "steps", tuple(self.steps))
        kinds = [s.kind for s in self.steps]
        if Kind.MASKING in kinds[:-1]:
            raise PipelineConfigError("masking must be the last augmentation")
        if Kind.GAUSSIAN_NOISE in kinds:
            after = kinds[kinds.index(Kind.GAUSSIAN_NOISE) + 1 :]
            bad = [k for k in after if k is not Kind.MASKING]
            if bad and not (self.noise_first and all(k is Kind.REVERSE_COMPLEMENT for k in bad)):
                raise PipelineConfigError(
                    f"{bad[0].value} after gaussian_noise needs clean rows; reorder or enable noise_first"
                )

    @property
    def names(self) -> list[str]:
        return [s.kind.value for s in self.steps]

    def apply_matrix(self, m: np.ndarray, seed: int) -> EncodedView:
        m = _check_matrix(m)
        for i, spec in enumerate(self.steps):
            ss = _op_seed(seed, i)
            if spec.kind is Kind.MASKING:
                return mask_random(m, spec.mask_ratio, int(np.random.default_rng(ss).integers(0, 2**63)))
            m = _apply_one(spec, m, ss, strict_rc=not self.noise_first)
        return EncodedView(m)

    def __call__(self, seq: NucleotideSequence | str, seed: int) -> EncodedView:
        return apply_pipeline(seq, self, seed)


def apply_pipeline(seq: NucleotideSequence | str, pipeline: ViewPipeline, seed: int) -> EncodedView:
    return pipeline.apply_matrix(encode_one_hot(seq), seed)


# Short pipeline codes: M, D, I, T, N (noise), R (reverse complement)
_CODES = {
    "M": Kind.MASKING,
    "D": Kind.DELETION,
    "I": Kind.INSERTION,
    "T": Kind.TRANSLOCATION,
    "N": Kind.GAUSSIAN_NOISE,
    "R": Kind.REVERSE_COMPLEMENT,
}


def pipeline_from_codes(codes: str, noise_first: bool = False, **params) -> ViewPipeline:
    """Build a pipeline from letter codes such as ``"MDT"`` or ``"NoAug"``.

    Letters name the set of operators; execution order is canonical
    (D, I, T, R, N, M) except that ``noise_first`` runs N before R.
    """
    if codes in ("", "NoAug"):
        return ViewPipeline((), noise_first)
    unknown = set(codes) - set(_CODES)
    if unknown:
        raise PipelineConfigError(f"unknown augmentation codes: {''.join(sorted(unknown))}")
    order = "DITNRM" if noise_first else "DITRNM"
    steps = [AugmentationSpec(_CODES[c], **params) for c in order if c in codes]
    return ViewPipeline(tuple(steps), noise_first)


def pipeline_from_names(names: Iterable[str], noise_first: bool = False, **params) -> ViewPipeline:
    return ViewPipeline(tuple(AugmentationSpec(Kind(n.strip()), **params) for n in names if n.strip()), noise_first)


def default_u_pipeline(mask_ratio: float = 0.3) -> ViewPipeline:
    return ViewPipeline(
        (
            AugmentationSpec(Kind.DELETION),
            AugmentationSpec(Kind.INSERTION),
            AugmentationSpec(Kind.TRANSLOCATION),
            AugmentationSpec(Kind.MASKING, mask_ratio=mask_ratio),
        )
    )


def default_v_pipeline(noise_first: bool = False, noise_std: float = 0.2) -> ViewPipeline:
    noise = AugmentationSpec(Kind.GAUSSIAN_NOISE, noise_mean=0.0, noise_std=noise_std)
    rc = AugmentationSpec(Kind.REVERSE_COMPLEMENT)
    return ViewPipeline((noise, rc) if noise_first else (rc, noise), noise_first)


def row_softmax(m: np.ndarray) -> np.ndarray:
    z = m - m.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def kl_dissimilarity(u: np.ndarray, v: np.ndarray) -> float:
    """Row-softmax KL divergence ``KL(softmax(u) || softmax(v))`` summed over rows."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise AugmentationError(f"shape mismatch: {u.shape} vs {v.shape}")
    log_u = u - u.max(axis=-1, keepdims=True)
    log_u = log_u - np.log(np.exp(log_u).sum(axis=-1, keepdims=True))
    log_v = v - v.max(axis=-1, keepdims=True)
    log_v = log_v - np.log(np.exp(log_v).sum(axis=-1, keepdims=True))
    return float(np.sum(np.exp(log_u) * (log_u - log_v)))


ABLATION_PAIRS = ("M+NoAug", "M+DIT", "MDT+DIT", "MDT+NR")


def parse_pair(name: str, noise_first: bool = False) -> tuple[ViewPipeline, ViewPipeline]:
    try:
        left, right = name.split("+")
    except ValueError:
        raise PipelineConfigError(f"pair {name!r} must look like 'U+V'") from None
    return pipeline_from_codes(left, noise_first), pipeline_from_codes(right, noise_first)


def corpus_kl(
    sequences: Sequence[NucleotideSequence],
    u: ViewPipeline,
    v: ViewPipeline,
    seed: int,
    tie_seeds: bool = False,
) -> float:
    """Sum of view dissimilarities over a corpus.

    Each sequence gets its own pair of view seeds; ``tie_seeds`` gives both
    views the same seed, so identical pipelines yield exactly zero.
    """
    total = 0.0
    for i, seq in enumerate(sequences):
        ss = np.random.SeedSequence([seed & 0xFFFFFFFF, i])
        su, sv = (int(s.generate_state(1, np.uint64)[0] >> 1) for s in ss.spawn(2))
        if tie_seeds:
            sv = su
        total += kl_dissimilarity(u(seq, su).matrix, v(seq, sv).matrix)
    return total
