"""Discretized model CDFs with 16-bit precision for the range coder.

Every pmf is evaluated on the fixed integer grid [-255, 255]. The coded
range keeps all but 1e-6 of the model mass (split evenly between the two
tails), always contains the mode, and is widened by one guard symbol on
each side that still carries model mass.
"""
from bisect import bisect_right
from dataclasses import dataclass
from typing import Callable, List, Optional, Tuple

import numpy as np
import torch

from app.core.exceptions import EntropyCodingError

PRECISION_BITS = 16
TOTAL = 1 << PRECISION_BITS
SYMBOL_CAP = 255
GRID_SIZE = 2 * SYMBOL_CAP + 1
TAIL_MASS = 1e-6
PMF_FLOOR = 2.0**-16


@dataclass(frozen=True)
class CdfTable:
    s_min: int
    s_max: int
    cdf: Tuple[int, ...]  # cumulative counts, cdf[0] = 0 and cdf[-1] = TOTAL

    def __post_init__(self) -> None:
        if self.s_max < self.s_min:
            raise EntropyCodingError(
                "Empty symbol range", details={"s_min": self.s_min, "s_max": self.s_max}
            )
        if len(self.cdf) != self.num_symbols + 1:
            raise EntropyCodingError("CDF length does not match the symbol range")
        if self.cdf[0] != 0 or self.cdf[-1] != TOTAL:
            raise EntropyCodingError("CDF must run from 0 to 2^16")
        if any(b <= a for a, b in zip(self.cdf, self.cdf[1:])):
            raise EntropyCodingError("CDF must be strictly increasing")

    @property
    def num_symbols(self) -> int:
        return self.s_max - self.s_min + 1

    @property
    def counts(self) -> List[int]:
        return [b - a for a, b in zip(self.cdf, self.cdf[1:])]

    def clamp(self, symbol: int) -> int:
        return min(max(int(symbol), self.s_min), self.s_max)

    def interval(self, symbol: int) -> Tuple[int, int]:
        """(cumulative count, count) of an in-range symbol."""
        i = symbol - self.s_min
        return self.cdf[i], self.cdf[i + 1] - self.cdf[i]

    def lookup(self, value: int) -> int:
        """Symbol whose cumulative interval contains ``value``."""
        return self.s_min + bisect_right(self.cdf, value) - 1


def symbol_grid(dtype: torch.dtype = torch.float64) -> torch.Tensor:
    return torch.arange(-SYMBOL_CAP, SYMBOL_CAP + 1, dtype=dtype)


def quantize_pmf(pmf: np.ndarray, mode: Optional[int] = None) -> CdfTable:
    """Turn a pmf sampled on the symbol grid into a 16-bit CDF table."""
    p = np.asarray(pmf, dtype=np.float64).reshape(-1)
    if p.shape[0] != GRID_SIZE:
        raise EntropyCodingError(
            "pmf must cover the full symbol grid",
            details={"expected": GRID_SIZE, "got": p.shape[0]},
        )
    p = np.where(np.isfinite(p) & (p > 0), p, 0.0)
    if p.max() < PMF_FLOOR:
        raise EntropyCodingError("Degenerate pmf: all mass below the probability floor")
    p = p / p.sum()

    half_tail = TAIL_MASS / 2
    lo = int(np.searchsorted(np.cumsum(p), half_tail, side="left"))
    hi = GRID_SIZE - 1 - int(np.searchsorted(np.cumsum(p[::-1]), half_tail, side="left"))
    center = int(np.argmax(p)) if mode is None else int(mode) + SYMBOL_CAP
    center = min(max(center, 0), GRID_SIZE - 1)
    lo, hi = min(lo, center), max(hi, center)
    if lo > 0 and p[lo - 1] > 0:
        lo -= 1
    if hi < GRID_SIZE - 1 and p[hi + 1] > 0:
        hi += 1

    inside = p[lo : hi + 1]
    n = inside.shape[0]
    counts = np.floor(inside / inside.sum() * (TOTAL - n)).astype(np.int64) + 1
    counts[int(np.argmax(inside))] += TOTAL - int(counts.sum())

    cdf = np.concatenate([[0], np.cumsum(counts)])
    return CdfTable(s_min=lo - SYMBOL_CAP, s_max=hi - SYMBOL_CAP, cdf=tuple(int(c) for c in cdf))


def build_cdf(
    likelihood: Callable[[torch.Tensor], torch.Tensor], mode: Optional[int] = None
) -> CdfTable:
    """Tabulate ``likelihood`` over the integer grid and quantize it."""
    with torch.no_grad():
        pmf = likelihood(symbol_grid())
    return quantize_pmf(torch.as_tensor(pmf).detach().cpu().double().numpy(), mode=mode)


def build_tables(pmfs: np.ndarray) -> List[CdfTable]:
    """One table per row of a ``(K, GRID_SIZE)`` pmf matrix."""
    pmfs = np.asarray(pmfs, dtype=np.float64)
    if pmfs.ndim != 2:
        raise EntropyCodingError(
            "pmf matrix must be two-dimensional", details={"shape": list(pmfs.shape)}
        )
    return [quantize_pmf(row) for row in pmfs]
