"""Quantized descriptor matching.

Descriptors are mapped to signed 8-bit integers with a symmetric scale;
the scale cancels out of cosine distances, so matching never needs to
undo the quantization. All dot products and squared norms stay in 64-bit
integers; one real division produces each distance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .detect import Descriptors, KeypointSet

QMAX = 127
DEFAULT_SCALE = 127.0
DEFAULT_MAX_DISTANCE = 0.7
DEFAULT_INLIER_THRESHOLD = 5.0


@dataclass(frozen=True)
class QuantizationScheme:
    scale: float = DEFAULT_SCALE

    def __post_init__(self) -> None:
        if not self.scale > 0:
            raise ValueError("scale must be positive")


@dataclass(frozen=True)
class QuantizedDescriptors:
    vectors: np.ndarray  # (N, D) int8 in [-127, 127]
    scheme: QuantizationScheme

    def __post_init__(self) -> None:
        if self.vectors.dtype != np.int8:
            raise TypeError("quantized descriptors must be int8")
        if self.vectors.size and int(np.abs(self.vectors).max()) > QMAX:
            raise ValueError("component outside [-127, 127]")

    def __len__(self) -> int:
        return len(self.vectors)


@dataclass(frozen=True)
class Match:
    index_a: int
    index_b: int
    distance: float


def calibrate_scale(sample: Descriptors) -> QuantizationScheme:
    """s = 127 / max |component| over the sample.

    Unit-norm rows have components in [-1, 1], so s >= 127 there.
    """
    if len(sample) == 0:
        raise ValueError("cannot calibrate on an empty sample")
    peak = float(np.abs(sample.vectors).max())
    if peak == 0:
        raise ValueError("cannot calibrate on an all-zero sample")
    return QuantizationScheme(QMAX / peak)


def quantize(desc: Descriptors,
             scheme: QuantizationScheme | None = None) -> QuantizedDescriptors:
    """clamp(round(d * s), -127, 127), rounding half away from zero."""
    if scheme is None:
        scheme = QuantizationScheme()
    scaled = desc.vectors.astype(np.float64) * scheme.scale
    rounded = np.copysign(np.floor(np.abs(scaled) + 0.5), scaled)
    q = np.clip(rounded, -QMAX, QMAX).astype(np.int8)
    return QuantizedDescriptors(q, scheme)


def cosine_distance(a: np.ndarray, b: np.ndarray) -> float:
    """1 - dot(a,b)/(|a|*|b|) on integer vectors.

    Computed as 1 - sign(dot)*sqrt(dot^2/(aa*bb)) so the integer products
    cancel a common scale exactly before the single division. A zero-norm
    operand yields the maximal distance 2.
    """
    av = np.asarray(a, dtype=np.int64)
    bv = np.asarray(b, dtype=np.int64)
    dot = int(av @ bv)
    aa = int(av @ av)
    bb = int(bv @ bv)
    if aa == 0 or bb == 0:
        return 2.0
    ratio = np.sqrt(np.float64(dot * dot) / np.float64(aa * bb))
    return float(1.0 - np.copysign(ratio, dot))


def distance_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise cosine distances between int8 descriptor sets.

    Same arithmetic as ``cosine_distance``, vectorized; rows or columns
    with zero norm read 2 everywhere.
    """
    av = a.astype(np.int64)
    bv = b.astype(np.int64)
    dots = av @ bv.T
    aa = (av * av).sum(axis=1)
    bb = (bv * bv).sum(axis=1)
    denom = (aa[:, None] * bb[None, :]).astype(np.float64)
    good = denom > 0
    dist = np.full(dots.shape, 2.0)
    ratio = np.sqrt((dots[good].astype(np.float64) ** 2) / denom[good])
    dist[good] = 1.0 - np.copysign(ratio, dots[good])
    return dist


def match_mutual_nn(a: QuantizedDescriptors, b: QuantizedDescriptors,
                    max_distance: float = DEFAULT_MAX_DISTANCE) -> list[Match]:
    """Mutual nearest-neighbor matches under a distance ceiling.

    (i, j) is kept iff j is i's nearest in b, i is j's nearest in a, and
    the distance is at most ``max_distance``. Ties resolve to the lower
    index on both sides, so each index appears at most once.
    """
    if a.scheme != b.scheme:
        raise ValueError("descriptor sets quantized under different schemes")
    if len(a) == 0 or len(b) == 0:
        return []
    if a.vectors.shape[1] != b.vectors.shape[1]:
        raise ValueError("descriptor dimensionality differs")
    dist = distance_matrix(a.vectors, b.vectors)
    best_b = dist.argmin(axis=1)   # first minimum = lowest index
    best_a = dist.argmin(axis=0)
    out = []
    for i, j in enumerate(best_b):
        if best_a[j] == i and dist[i, j] <= max_distance:
            out.append(Match(int(i), int(j), float(dist[i, j])))
    return out


def verify_matches(matches: list[Match], kps_a: KeypointSet,
                   kps_b: KeypointSet, warp,
                   threshold: float = DEFAULT_INLIER_THRESHOLD) -> np.ndarray:
    """Inlier flags under a ground-truth warp.

    A match is an inlier iff the Euclidean reprojection error
    ||warp(kp_a) - kp_b|| is strictly below ``threshold``.
    """
    if not matches:
        return np.zeros(0, dtype=bool)
    ia = np.array([m.index_a for m in matches])
    ib = np.array([m.index_b for m in matches])
    projected = np.asarray(warp(kps_a.xy[ia]), dtype=np.float64)
    errors = np.linalg.norm(projected - kps_b.xy[ib], axis=1)
    return errors < threshold


def write_matches_csv(matches: list[Match],
                      inliers: np.ndarray | None = None) -> bytes:
    """CSV export; the inlier column appears only when verification ran."""
    if inliers is not None and len(inliers) != len(matches):
        raise ValueError("one inlier flag per match required")
    if inliers is None:
        lines = ["index_a,index_b,distance"]
        lines += [f"{m.index_a},{m.index_b},{m.distance:.6f}" for m in matches]
    else:
        lines = ["index_a,index_b,distance,inlier"]
        lines += [f"{m.index_a},{m.index_b},{m.distance:.6f},{int(f)}"
                  for m, f in zip(matches, inliers)]
    return ("\n".join(lines) + "\n").encode("ascii")
