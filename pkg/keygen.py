#!/usr/bin/env python3
"""
Key Generation for PBLS
Samples the masking keys P (signed permutation) and Q (scaled permutation)
from a seeded PCG64 generator, and offers a small key-space census.

The generator is reproducible, not cryptographic: the masking argument is
combinatorial (key-space size), so keys are only as secret as the seed.
"""

import logging
import math
import struct
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Dict, Tuple, Union

import numpy as np
from scipy import stats

from matrix_core import InvalidArgumentError, ScaledPermutation, SignedPermutation

logger = logging.getLogger(__name__)

KEY_FILE_MAGIC = b'PBLSKEY1'
MAX_CENSUS_SIZE = 6


class KeyFileError(ValueError):
    """Raised when an exported key file cannot be read back"""
    pass


class ScaleMode(str, Enum):
    """How the nonzero scales a_i of Q are drawn"""
    PAPER = 'paper'  # uniform integers in 1..n
    POW2 = 'pow2'  # uniform powers of two in 1..2^ceil(log2 n); exact to divide by

    @classmethod
    def parse(cls, value: Union[str, 'ScaleMode']) -> 'ScaleMode':
        if value == 'integer':
            return cls.PAPER
        try:
            return cls(value)
        except ValueError:
            raise InvalidArgumentError(f"Unknown scale mode '{value}' (expected paper or pow2)")


@dataclass(frozen=True)
class MaskKeys:
    """The pair (P, Q) plus what is needed to regenerate it"""
    p: SignedPermutation
    q: ScaledPermutation
    seed: int
    scale_mode: ScaleMode

    @property
    def m(self) -> int:
        return self.p.size

    @property
    def n(self) -> int:
        return self.q.size


def _check_dims(m: int, n: int) -> None:
    if m < 1 or n < 1:
        raise InvalidArgumentError(f"Key dimensions must be >= 1, got m={m}, n={n}")


def sample_signed(rng: np.random.Generator, m: int) -> SignedPermutation:
    """Fisher-Yates permutation plus i.i.d. uniform signs"""
    perm = rng.permutation(m)
    signs = rng.integers(0, 2, size=m) * 2 - 1
    return SignedPermutation(perm, signs)


def sample_scaled(rng: np.random.Generator, n: int, scale_mode: ScaleMode) -> ScaledPermutation:
    """Fisher-Yates permutation plus scales drawn independently of it"""
    perm = rng.permutation(n)
    if scale_mode is ScaleMode.POW2:
        max_exponent = (n - 1).bit_length()
        scales = np.left_shift(1, rng.integers(0, max_exponent + 1, size=n))
    else:
        scales = rng.integers(1, n + 1, size=n)
    return ScaledPermutation(perm, scales)


def sample_keys(rng: np.random.Generator, m: int, n: int,
                scale_mode: Union[str, ScaleMode] = ScaleMode.POW2, seed: int = 0) -> MaskKeys:
    """Draw a fresh (P, Q) from an existing generator"""
    _check_dims(m, n)
    mode = ScaleMode.parse(scale_mode)
    p = sample_signed(rng, m)
    q = sample_scaled(rng, n, mode)
    return MaskKeys(p=p, q=q, seed=seed, scale_mode=mode)


def generate_keys(m: int, n: int, seed: int,
                  scale_mode: Union[str, ScaleMode] = ScaleMode.POW2) -> MaskKeys:
    """
    Generate masking keys for an m x n input

    Args:
        m: Row count of A (size of P)
        n: Column count of A (size of Q)
        seed: 64-bit seed; the same (seed, m, n, scale_mode) gives the same keys
        scale_mode: 'pow2' (default) or 'paper'

    Returns:
        MaskKeys

    Raises:
        InvalidArgumentError: for zero dimensions or an unknown scale mode
    """
    _check_dims(m, n)
    rng = np.random.default_rng(seed)
    keys = sample_keys(rng, m, n, scale_mode, seed=seed)
    logger.debug(f"Generated keys m={m} n={n} mode={keys.scale_mode.value}")
    return keys


def inverse_signed(p: SignedPermutation) -> SignedPermutation:
    """P^-1 = P^T as another signed permutation"""
    inv_perm = np.empty_like(p.perm)
    inv_perm[p.perm] = np.arange(p.size)
    return SignedPermutation(inv_perm, p.signs[inv_perm])


def inverse_scaled(q: ScaledPermutation) -> np.ndarray:
    """Dense Q^-1: entry 1/a_i at the transposed position (perm[i], i)"""
    inv = np.zeros((q.size, q.size))
    inv[q.perm, np.arange(q.size)] = 1.0 / q.scales
    inv.flags.writeable = False
    return inv


def keyspace_size(size: int, kind: str = 'signed') -> int:
    """2^m * m! for signed permutations, n^n * n! for paper-mode scaled ones"""
    if kind == 'signed':
        return 2 ** size * math.factorial(size)
    if kind == 'scaled':
        return size ** size * math.factorial(size)
    raise InvalidArgumentError(f"Unknown key kind '{kind}'")


@dataclass(frozen=True)
class CensusReport:
    """Empirical key frequencies and a chi-square test against uniform"""
    kind: str
    size: int
    samples: int
    keyspace: int
    counts: Dict[Tuple[int, ...], int]
    chi_square: float
    p_value: float

    @property
    def observed_keys(self) -> int:
        return len(self.counts)


def key_space_census(size: int, samples: int, seed: int = 0, kind: str = 'signed') -> CensusReport:
    """
    Sample `samples` keys of the given size and test them for uniformity

    Args:
        size: Key size, at most MAX_CENSUS_SIZE
        samples: Number of keys to draw
        seed: Generator seed
        kind: 'signed' (P) or 'scaled' (Q in paper mode)

    Returns:
        CensusReport; unobserved keys count as zero-frequency cells
    """
    if size < 1 or size > MAX_CENSUS_SIZE:
        raise InvalidArgumentError(f"Census size must be in 1..{MAX_CENSUS_SIZE}, got {size}")
    if samples < 1:
        raise InvalidArgumentError("Census needs at least one sample")

    total = keyspace_size(size, kind)
    rng = np.random.default_rng(seed)
    counts: Dict[Tuple[int, ...], int] = {}

    for _ in range(samples):
        if kind == 'signed':
            key = sample_signed(rng, size)
            ident = tuple(key.perm.tolist()) + tuple(key.signs.tolist())
        else:
            key = sample_scaled(rng, size, ScaleMode.PAPER)
            ident = tuple(key.perm.tolist()) + tuple(key.scales.tolist())
        counts[ident] = counts.get(ident, 0) + 1

    expected = samples / total
    observed = np.fromiter(counts.values(), dtype=np.float64)
    chi_square = float(np.sum((observed - expected) ** 2) / expected + (total - len(counts)) * expected)
    p_value = float(stats.chi2.sf(chi_square, total - 1)) if total > 1 else 1.0

    logger.info(f"Census of {kind} keys, size {size}: {len(counts)}/{total} keys seen, "
                f"chi2={chi_square:.2f} p={p_value:.4f}")
    return CensusReport(kind=kind, size=size, samples=samples, keyspace=total,
                        counts=counts, chi_square=chi_square, p_value=p_value)


def export_keys(keys: MaskKeys, path: Union[str, Path]) -> None:
    """
    Write keys to a debug record: magic, m, n, perm1, signs, perm2, scales (i64 LE).

    Keys on disk defeat the masking; this exists for debugging only.
    """
    body = [KEY_FILE_MAGIC, struct.pack('<qq', keys.m, keys.n)]
    for arr in (keys.p.perm, keys.p.signs, keys.q.perm, keys.q.scales):
        body.append(np.asarray(arr, dtype='<i8').tobytes())
    Path(path).write_bytes(b''.join(body))
    logger.warning(f"Exported masking keys to {path} (insecure, debug only)")


def import_keys(path: Union[str, Path], seed: int = 0,
                scale_mode: Union[str, ScaleMode] = ScaleMode.POW2) -> MaskKeys:
    """Read a record written by export_keys"""
    data = Path(path).read_bytes()
    if data[:8] != KEY_FILE_MAGIC:
        raise KeyFileError(f"{path}: not a PBLS key file")
    if len(data) < 24:
        raise KeyFileError(f"{path}: truncated header")
    m, n = struct.unpack_from('<qq', data, 8)
    if m < 1 or n < 1 or len(data) != 24 + 8 * (2 * m + 2 * n):
        raise KeyFileError(f"{path}: size does not match m={m}, n={n}")

    ints = np.frombuffer(data, dtype='<i8', offset=24)
    try:
        p = SignedPermutation(ints[:m], ints[m:2 * m])
        q = ScaledPermutation(ints[2 * m:2 * m + n], ints[2 * m + n:])
    except InvalidArgumentError as e:
        raise KeyFileError(f"{path}: {e}")
    return MaskKeys(p=p, q=q, seed=seed, scale_mode=ScaleMode.parse(scale_mode))
