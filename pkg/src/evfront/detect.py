"""Keypoint detection and description on multi-channel time surfaces.

Two detector paths share the keypoint/descriptor types: a small learned
network (4-layer conv encoder, cell-softmax detector head, 64-dim
descriptor head) run as a pure numpy forward pass, and a deterministic
Harris-style fallback that needs no weights.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.ndimage import maximum_filter

from .surface import MctsTensor

WEIGHTS_MAGIC = b"SLWT"
WEIGHTS_VERSION = 1

HARRIS_K = 0.04
PATCH = 8  # classical descriptor patch side; 8*8 = 64 = learned D


@dataclass(frozen=True)
class NetworkSpec:
    """Architecture constants. The encoder is fixed at four stages, each
    halving resolution, so the cell size is 2**4 = 16."""

    input_channels: int = 8
    encoder_widths: tuple[int, ...] = (32, 64, 128, 128)
    descriptor_dim: int = 64

    def __post_init__(self) -> None:
        if len(self.encoder_widths) != 4:
            raise ValueError("encoder must have exactly 4 layers")
        if self.input_channels < 1 or self.descriptor_dim < 1:
            raise ValueError("channel counts must be positive")
        if any(w < 1 for w in self.encoder_widths):
            raise ValueError("encoder widths must be positive")

    @property
    def cell(self) -> int:
        return 2 ** len(self.encoder_widths)

    @property
    def detector_head_channels(self) -> int:
        return self.cell * self.cell + 1  # cell scores plus dustbin


@dataclass(frozen=True)
class WeightBundle:
    spec: NetworkSpec
    conv_kernels: tuple[np.ndarray, ...]      # (out, in, 3, 3) per layer
    bn_scale: tuple[np.ndarray, ...]
    bn_shift: tuple[np.ndarray, ...]
    bn_mean: tuple[np.ndarray, ...]
    bn_var: tuple[np.ndarray, ...]
    bn_epsilon: float
    detector_kernel: np.ndarray               # (cell^2+1, last_width)
    detector_bias: np.ndarray
    descriptor_kernel: np.ndarray             # (D, last_width)
    descriptor_bias: np.ndarray

    def __post_init__(self) -> None:
        spec = self.spec
        widths = spec.encoder_widths
        ins = (spec.input_channels,) + widths[:-1]
        if len(self.conv_kernels) != len(widths):
            raise ValueError("one conv kernel per encoder layer required")
        for i, (kern, cin, cout) in enumerate(zip(self.conv_kernels, ins,
                                                  widths)):
            if kern.shape != (cout, cin, 3, 3):
                raise ValueError(f"layer {i} kernel shape {kern.shape}, "
                                 f"expected {(cout, cin, 3, 3)}")
            for name in ("bn_scale", "bn_shift", "bn_mean", "bn_var"):
                arr = getattr(self, name)[i]
                if arr.shape != (cout,):
                    raise ValueError(f"layer {i} {name} shape {arr.shape}, "
                                     f"expected ({cout},)")
        head_in = widths[-1]
        if self.detector_kernel.shape != (spec.detector_head_channels, head_in):
            raise ValueError("detector head shape mismatch")
        if self.detector_bias.shape != (spec.detector_head_channels,):
            raise ValueError("detector bias shape mismatch")
        if self.descriptor_kernel.shape != (spec.descriptor_dim, head_in):
            raise ValueError("descriptor head shape mismatch")
        if self.descriptor_bias.shape != (spec.descriptor_dim,):
            raise ValueError("descriptor bias shape mismatch")
        if not self.bn_epsilon > 0:
            raise ValueError("bn epsilon must be positive")


@dataclass(frozen=True)
class KeypointSet:
    """Detected points, scores descending, pairwise at least radius apart."""

    xy: np.ndarray      # (N, 2) float64 image coordinates
    scores: np.ndarray  # (N,) float

    def __len__(self) -> int:
        return len(self.scores)


@dataclass(frozen=True)
class Descriptors:
    """Row-normalized descriptors; rows that were zero stay zero and are
    marked invalid in ``valid``."""

    vectors: np.ndarray  # (N, D) float32, unit rows where valid
    valid: np.ndarray    # (N,) bool

    def __len__(self) -> int:
        return len(self.valid)


def random_weights(spec: NetworkSpec, seed: int) -> WeightBundle:
    """Seeded uniform init in [-1/sqrt(fan_in), +1/sqrt(fan_in)]."""
    rng = np.random.default_rng(seed)

    def uniform(fan_in: int, shape) -> np.ndarray:
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, shape).astype(np.float32)

    ins = (spec.input_channels,) + spec.encoder_widths[:-1]
    kernels, scales, shifts, means, variances = [], [], [], [], []
    for cin, cout in zip(ins, spec.encoder_widths):
        kernels.append(uniform(cin * 9, (cout, cin, 3, 3)))
        scales.append(np.ones(cout, dtype=np.float32))
        shifts.append(np.zeros(cout, dtype=np.float32))
        means.append(np.zeros(cout, dtype=np.float32))
        variances.append(np.ones(cout, dtype=np.float32))
    head_in = spec.encoder_widths[-1]
    return WeightBundle(
        spec=spec,
        conv_kernels=tuple(kernels),
        bn_scale=tuple(scales), bn_shift=tuple(shifts),
        bn_mean=tuple(means), bn_var=tuple(variances),
        bn_epsilon=float(np.float32(1e-5)),
        detector_kernel=uniform(head_in, (spec.detector_head_channels, head_in)),
        detector_bias=uniform(head_in, (spec.detector_head_channels,)),
        descriptor_kernel=uniform(head_in, (spec.descriptor_dim, head_in)),
        descriptor_bias=uniform(head_in, (spec.descriptor_dim,)),
    )


def zero_weights(spec: NetworkSpec) -> WeightBundle:
    """All-zero kernels and biases; useful for head-contract checks."""
    ins = (spec.input_channels,) + spec.encoder_widths[:-1]
    kernels = tuple(np.zeros((cout, cin, 3, 3), dtype=np.float32)
                    for cin, cout in zip(ins, spec.encoder_widths))
    ones = tuple(np.ones(w, dtype=np.float32) for w in spec.encoder_widths)
    zeros = tuple(np.zeros(w, dtype=np.float32) for w in spec.encoder_widths)
    head_in = spec.encoder_widths[-1]
    return WeightBundle(
        spec=spec, conv_kernels=kernels,
        bn_scale=ones, bn_shift=zeros, bn_mean=zeros, bn_var=ones,
        bn_epsilon=float(np.float32(1e-5)),
        detector_kernel=np.zeros((spec.detector_head_channels, head_in),
                                 dtype=np.float32),
        detector_bias=np.zeros(spec.detector_head_channels, dtype=np.float32),
        descriptor_kernel=np.zeros((spec.descriptor_dim, head_in),
                                   dtype=np.float32),
        descriptor_bias=np.zeros(spec.descriptor_dim, dtype=np.float32),
    )


# ---------------------------------------------------------------------------
# forward pass


def _conv3x3(x: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    # im2col + one gemm; stride 1, zero padding 1, so H and W are kept
    cout, cin = kernel.shape[:2]
    h, w = x.shape[1:]
    padded = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    windows = sliding_window_view(padded, (3, 3), axis=(1, 2))
    cols = windows.transpose(1, 2, 0, 3, 4).reshape(h * w, cin * 9)
    out = cols @ kernel.reshape(cout, cin * 9).T
    return out.T.reshape(cout, h, w)


def _batchnorm(x: np.ndarray, scale, shift, mean, var, eps: float) -> np.ndarray:
    # inference form only; running statistics come with the weights
    inv = 1.0 / np.sqrt(var + np.float32(eps))
    return ((x - mean[:, None, None]) * inv[:, None, None]
            * scale[:, None, None] + shift[:, None, None])


def _maxpool2(x: np.ndarray) -> np.ndarray:
    c, h, w = x.shape
    return x.reshape(c, h // 2, 2, w // 2, 2).max(axis=(2, 4))


def _softmax_channels(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=0, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=0, keepdims=True)


def _encode(weights: WeightBundle, x: np.ndarray) -> np.ndarray:
    spec = weights.spec
    cell = spec.cell
    if x.ndim != 3 or x.shape[0] != spec.input_channels:
        raise ValueError(f"input shape {x.shape} does not carry "
                         f"{spec.input_channels} channels")
    h, w = x.shape[1:]
    if h % cell or w % cell:
        raise ValueError(f"input {h}x{w} not divisible by cell {cell}")

    feat = x.astype(np.float32, copy=False)
    for i in range(len(spec.encoder_widths)):
        feat = _conv3x3(feat, weights.conv_kernels[i])
        feat = _batchnorm(feat, weights.bn_scale[i], weights.bn_shift[i],
                          weights.bn_mean[i], weights.bn_var[i],
                          weights.bn_epsilon)
        feat = np.maximum(feat, np.float32(0))
        feat = _maxpool2(feat)
    return feat


def _detector_head(weights: WeightBundle, feat: np.ndarray) -> np.ndarray:
    logits = np.tensordot(weights.detector_kernel, feat, axes=([1], [0])) \
        + weights.detector_bias[:, None, None]
    return _softmax_channels(logits)


def detector_probabilities(weights: WeightBundle,
                           x: np.ndarray) -> np.ndarray:
    """Per-cell detector softmax with the dustbin channel still attached.

    Returns (cell*cell + 1, H/cell, W/cell); channels sum to one at every
    cell. ``forward`` reports the same distribution minus the dustbin,
    rearranged to full resolution.
    """
    return _detector_head(weights, _encode(weights, x))


def forward(weights: WeightBundle,
            x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Run the network on a (2K, H, W) float32 tensor.

    Returns (heatmap, descriptor_map): a full-resolution (H, W) score map
    in [0, 1] and an unnormalized (D, H/cell, W/cell) descriptor map.
    Normalization happens after interpolation, not here.
    """
    cell = weights.spec.cell
    feat = _encode(weights, x)
    probs = _detector_head(weights, feat)
    cells = probs[:-1]  # drop the dustbin
    hc, wc = cells.shape[1:]
    heatmap = cells.reshape(cell, cell, hc, wc) \
        .transpose(2, 0, 3, 1).reshape(hc * cell, wc * cell)

    desc_map = np.tensordot(weights.descriptor_kernel, feat, axes=([1], [0])) \
        + weights.descriptor_bias[:, None, None]
    return heatmap.astype(np.float32, copy=False), \
        desc_map.astype(np.float32, copy=False)


# ---------------------------------------------------------------------------
# keypoint selection


def nms(heatmap: np.ndarray, radius: int, threshold: float,
        max_k: int) -> KeypointSet:
    """Greedy non-maximum suppression.

    Candidates must reach ``threshold`` and be the strict maximum of
    their (2*radius+1)^2 neighborhood; they are taken in descending score
    order, ties broken row-major, at most ``max_k``. Two strict maxima
    can never share a neighborhood, so selected points are automatically
    spaced by more than ``radius``.
    """
    if radius < 1:
        raise ValueError("radius must be at least 1")
    size = 2 * radius + 1
    footprint = np.ones((size, size), dtype=bool)
    footprint[radius, radius] = False
    neighbor_max = maximum_filter(heatmap, footprint=footprint,
                                  mode="constant", cval=-np.inf)
    cand = (heatmap > neighbor_max) & (heatmap >= threshold)
    ys, xs = np.nonzero(cand)  # row-major, the tie order
    scores = heatmap[ys, xs]
    order = np.argsort(-scores, kind="stable")[:max_k]
    xy = np.stack([xs[order], ys[order]], axis=1).astype(np.float64)
    return KeypointSet(xy, scores[order])


def interpolate_descriptors(desc_map: np.ndarray, keypoints: KeypointSet,
                            cell: int) -> Descriptors:
    """Bilinear descriptor lookup at sub-cell precision.

    Image coordinates map to cell-map coordinates via
    ((x + 0.5)/cell - 0.5); the four surrounding cells are blended with
    edge clamping, then each row is L2-normalized. Rows with zero norm
    are kept at zero and flagged invalid.
    """
    d, mh, mw = desc_map.shape
    n = len(keypoints)
    if n == 0:
        return Descriptors(np.zeros((0, d), dtype=np.float32),
                           np.zeros(0, dtype=bool))
    mx = (keypoints.xy[:, 0] + 0.5) / cell - 0.5
    my = (keypoints.xy[:, 1] + 0.5) / cell - 0.5
    x0 = np.floor(mx)
    y0 = np.floor(my)
    fx = (mx - x0)[:, None]
    fy = (my - y0)[:, None]

    def cell_at(cx, cy):
        cx = np.clip(cx, 0, mw - 1).astype(np.intp)
        cy = np.clip(cy, 0, mh - 1).astype(np.intp)
        return desc_map[:, cy, cx].T  # (N, D)

    v00 = cell_at(x0, y0)
    v10 = cell_at(x0 + 1, y0)
    v01 = cell_at(x0, y0 + 1)
    v11 = cell_at(x0 + 1, y0 + 1)
    blend = ((1 - fy) * ((1 - fx) * v00 + fx * v10)
             + fy * ((1 - fx) * v01 + fx * v11))
    return _normalize_rows(blend.astype(np.float32))


def _normalize_rows(vectors: np.ndarray) -> Descriptors:
    norms = np.linalg.norm(vectors.astype(np.float64), axis=1)
    valid = norms > 0
    out = vectors.copy()
    out[valid] = (vectors[valid] / norms[valid, None]).astype(np.float32)
    return Descriptors(out, valid)


# ---------------------------------------------------------------------------
# classical fallback


def classical_detect(tensor: MctsTensor, channel_pair: int, radius: int,
                     threshold: float, max_k: int
                     ) -> tuple[KeypointSet, Descriptors]:
    """Harris corners plus patch descriptors, no weights involved.

    Channels ``channel_pair`` and ``K + channel_pair`` are merged by
    maximum; the corner response is det - 0.04*trace^2 of the 3x3-summed
    structure tensor of finite-difference gradients. Descriptors are the
    flattened 8x8 patch around each keypoint, mean-subtracted and
    L2-normalized, making them 64-dim like the learned path.
    """
    k_pairs = tensor.K
    if not 0 <= channel_pair < k_pairs:
        raise ValueError(f"channel pair {channel_pair} outside 0..{k_pairs - 1}")
    merged = np.maximum(tensor.channels[channel_pair],
                        tensor.channels[k_pairs + channel_pair])

    gy, gx = np.gradient(merged.astype(np.float64))
    sxx = _boxsum3(gx * gx)
    syy = _boxsum3(gy * gy)
    sxy = _boxsum3(gx * gy)
    response = sxx * syy - sxy * sxy - HARRIS_K * (sxx + syy) ** 2

    keypoints = nms(response, radius, threshold, max_k)
    if len(keypoints) == 0:
        return keypoints, Descriptors(np.zeros((0, PATCH * PATCH),
                                               dtype=np.float32),
                                      np.zeros(0, dtype=bool))

    # 8x8 patch with top-left 3 px up/left of the keypoint, edge-replicated
    pad = PATCH
    padded = np.pad(merged, pad, mode="edge")
    patches = np.empty((len(keypoints), PATCH * PATCH), dtype=np.float32)
    for i, (x, y) in enumerate(keypoints.xy.astype(int)):
        y0 = y - PATCH // 2 + 1 + pad
        x0 = x - PATCH // 2 + 1 + pad
        patches[i] = padded[y0:y0 + PATCH, x0:x0 + PATCH].ravel()
    patches -= patches.mean(axis=1, keepdims=True)
    return keypoints, _normalize_rows(patches)


def _boxsum3(x: np.ndarray) -> np.ndarray:
    padded = np.pad(x, 1)
    return sliding_window_view(padded, (3, 3)).sum(axis=(-1, -2))


def keypoints_to_jsonl(keypoints: KeypointSet, descriptors: Descriptors) -> str:
    """One JSON object per keypoint: {x, y, score, descriptor}."""
    lines = []
    for (x, y), s, vec in zip(keypoints.xy, keypoints.scores,
                              descriptors.vectors):
        lines.append(json.dumps(
            {"x": float(x), "y": float(y), "score": float(s),
             "descriptor": [float(v) for v in vec]},
            separators=(",", ":")))
    return "\n".join(lines) + ("\n" if lines else "")


# ---------------------------------------------------------------------------
# weight serialization


def save_weights(weights: WeightBundle) -> bytes:
    """SLWT container: magic, u32 header (version, input channels, layer
    count, widths, descriptor dim, cell), f32 epsilon, then every tensor
    in declared order as little-endian float32."""
    spec = weights.spec
    head = [WEIGHTS_VERSION, spec.input_channels, len(spec.encoder_widths),
            *spec.encoder_widths, spec.descriptor_dim, spec.cell]
    parts = [WEIGHTS_MAGIC,
             np.asarray(head, dtype="<u4").tobytes(),
             np.float32(weights.bn_epsilon).astype("<f4").tobytes()]
    for arr in _tensor_sequence(weights):
        parts.append(arr.astype("<f4").tobytes())
    return b"".join(parts)


def load_weights(data: bytes) -> WeightBundle:
    if len(data) < 4 or data[:4] != WEIGHTS_MAGIC:
        raise ValueError(f"bad magic {data[:4]!r}")
    if len(data) < 16:
        raise ValueError("weights header truncated")
    fixed = np.frombuffer(data, dtype="<u4", offset=4, count=3)
    version, input_channels, n_layers = (int(v) for v in fixed)
    if version != WEIGHTS_VERSION:
        raise ValueError(f"unsupported weights version {version}")
    if n_layers != 4:
        raise ValueError(f"encoder must have exactly 4 layers, header says "
                         f"{n_layers}")
    if len(data) < 16 + 4 * (n_layers + 2) + 4:
        raise ValueError("weights header truncated")
    tail = np.frombuffer(data, dtype="<u4", offset=16, count=n_layers + 2)
    widths = tuple(int(v) for v in tail[:n_layers])
    descriptor_dim, cell = int(tail[n_layers]), int(tail[n_layers + 1])
    spec = NetworkSpec(input_channels, widths, descriptor_dim)
    if cell != spec.cell:
        raise ValueError(f"header cell {cell} contradicts layer count")
    offset = 16 + 4 * (n_layers + 2)
    epsilon = float(np.frombuffer(data, dtype="<f4", offset=offset, count=1)[0])
    offset += 4

    shapes = [arr.shape for arr in _tensor_sequence(_template(spec, epsilon))]
    tensors = []
    for shape in shapes:
        count = int(np.prod(shape))
        end = offset + 4 * count
        if end > len(data):
            raise ValueError(
                f"weight tensor of shape {shape} truncated: needs {count} "
                f"values, file has {(len(data) - offset) // 4}")
        tensors.append(np.frombuffer(data, dtype="<f4", offset=offset,
                                     count=count).reshape(shape).copy())
        offset = end
    if offset != len(data):
        raise ValueError(f"{len(data) - offset} trailing bytes after tensors")

    n = len(spec.encoder_widths)
    return WeightBundle(
        spec=spec,
        conv_kernels=tuple(tensors[0:5 * n:5]),
        bn_scale=tuple(tensors[1:5 * n:5]),
        bn_shift=tuple(tensors[2:5 * n:5]),
        bn_mean=tuple(tensors[3:5 * n:5]),
        bn_var=tuple(tensors[4:5 * n:5]),
        bn_epsilon=epsilon,
        detector_kernel=tensors[5 * n],
        detector_bias=tensors[5 * n + 1],
        descriptor_kernel=tensors[5 * n + 2],
        descriptor_bias=tensors[5 * n + 3],
    )


def _template(spec: NetworkSpec, epsilon: float) -> WeightBundle:
    return replace(zero_weights(spec), bn_epsilon=epsilon)


def _tensor_sequence(weights: WeightBundle) -> list[np.ndarray]:
    seq = []
    for i in range(len(weights.spec.encoder_widths)):
        seq += [weights.conv_kernels[i], weights.bn_scale[i],
                weights.bn_shift[i], weights.bn_mean[i], weights.bn_var[i]]
    seq += [weights.detector_kernel, weights.detector_bias,
            weights.descriptor_kernel, weights.descriptor_bias]
    return seq
