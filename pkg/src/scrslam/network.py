"""Scene-coordinate regression networks: the implicit map.

Two architectures regress a 3D global coordinate from a feature descriptor:

* ``TriMlp`` — an MLP trunk whose output logits are split into three blocks, one
  per coordinate plane (XY, XZ, YZ). Each block is softmax-normalized into a
  voting distribution over a grid of fixed basis coordinates; the expected grid
  coordinate of each plane contributes two axis estimates, and each axis is the
  average of its two plane estimates. Outputs are convex combinations of cell
  centers and therefore always lie inside the configured scene bounds.
* ``HomMlp`` — a plain MLP with additive skip connections every two hidden
  layers that outputs homogeneous coordinates (X, Y, Z, w); the result is
  (X, Y, Z) / (softplus(w) + eps).

Forward, analytic backward, the Adam optimizer, and the `SCRM` byte format live
here. Parameters are float32; `astype(np.float64)` gives a copy for
finite-difference gradient verification.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from .errors import SerializationError

MAGIC = b"SCRM"
FORMAT_VERSION = 1
KIND_TRIMLP = 0
KIND_HOMMLP = 1

# Plane order everywhere (logit blocks, caches, serialization docs): XY, XZ, YZ.
PLANES = ("xy", "xz", "yz")
PLANE_AXES = {"xy": (0, 1), "xz": (0, 2), "yz": (1, 2)}


@dataclass(frozen=True)
class TriplaneConfig:
    """Triplane voting map: grid resolutions, scene bounds, and trunk size."""

    r_x: int = 16
    r_y: int = 16
    r_z: int = 16
    bounds_min: tuple[float, float, float] = (-5.0, -5.0, -5.0)
    bounds_max: tuple[float, float, float] = (5.0, 5.0, 5.0)
    hidden_width: int = 128
    hidden_depth: int = 3
    descriptor_dim: int = 128

    def __post_init__(self) -> None:
        for r in (self.r_x, self.r_y, self.r_z):
            if r < 2:
                raise ValueError("grid resolutions must be >= 2")
        for lo, hi in zip(self.bounds_min, self.bounds_max):
            if not lo < hi:
                raise ValueError("scene bounds must satisfy min < max per axis")
        if self.hidden_width < 1 or self.hidden_depth < 1 or self.descriptor_dim < 1:
            raise ValueError("network dimensions must be positive")

    @property
    def resolutions(self) -> tuple[int, int, int]:
        return (self.r_x, self.r_y, self.r_z)

    @property
    def n_logits(self) -> int:
        return self.r_x * self.r_y + self.r_x * self.r_z + self.r_y * self.r_z


@dataclass(frozen=True)
class HomMlpConfig:
    """Direct homogeneous-coordinate regressor: trunk size and divisor floor."""

    descriptor_dim: int = 128
    hidden_width: int = 128
    hidden_depth: int = 3
    w_epsilon: float = 1e-6

    def __post_init__(self) -> None:
        if self.hidden_width < 1 or self.hidden_depth < 1 or self.descriptor_dim < 1:
            raise ValueError("network dimensions must be positive")


def axis_centers(lo: float, hi: float, r: int, dtype=np.float64) -> np.ndarray:
    """Cell-center coordinates of a uniform r-cell partition of [lo, hi]."""
    return (lo + (np.arange(r) + 0.5) * (hi - lo) / r).astype(dtype)


def make_bases(config: TriplaneConfig) -> dict[str, np.ndarray]:
    """Basis coordinate grids per plane, shape (r_I, r_J, 2) of cell centers."""
    centers = [axis_centers(config.bounds_min[a], config.bounds_max[a],
                            config.resolutions[a]) for a in range(3)]
    bases = {}
    for plane, (ai, aj) in PLANE_AXES.items():
        ci, cj = centers[ai], centers[aj]
        grid = np.empty((len(ci), len(cj), 2))
        grid[:, :, 0] = ci[:, None]
        grid[:, :, 1] = cj[None, :]
        bases[plane] = grid
    return bases


def coordinates_from_votes(config: TriplaneConfig, votes: dict[str, np.ndarray]
                           ) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Map per-plane voting distributions to 3D coordinates.

    ``votes[plane]`` has shape (N, r_I, r_J) and each row sums to 1. Returns the
    (N, 3) coordinates and the per-plane (N, 2) expected grid coordinates.
    """
    bases = make_bases(config)
    plane_coords = {}
    for plane in PLANES:
        b = bases[plane]
        c = np.asarray(votes[plane], dtype=np.float64)
        plane_coords[plane] = np.stack(
            [(c * b[None, :, :, 0]).sum(axis=(1, 2)),
             (c * b[None, :, :, 1]).sum(axis=(1, 2))], axis=1)
    xy, xz, yz = plane_coords["xy"], plane_coords["xz"], plane_coords["yz"]
    out = np.stack([(xy[:, 0] + xz[:, 0]) / 2,
                    (xy[:, 1] + yz[:, 0]) / 2,
                    (xz[:, 1] + yz[:, 1]) / 2], axis=1)
    return out, plane_coords


@dataclass
class TriMlpCache:
    inputs: np.ndarray
    preacts: list[np.ndarray]
    acts: list[np.ndarray]
    distributions: dict[str, np.ndarray]   # plane -> (N, r_I * r_J), rows sum to 1
    plane_coords: dict[str, np.ndarray]    # plane -> (N, 2)
    outputs: np.ndarray

    @property
    def batch_size(self) -> int:
        return self.inputs.shape[0]


@dataclass
class HomMlpCache:
    inputs: np.ndarray
    preacts: list[np.ndarray]
    acts: list[np.ndarray]
    raw: np.ndarray       # (N, 4) homogeneous output
    divisor: np.ndarray   # (N,) softplus(w) + eps
    outputs: np.ndarray

    @property
    def batch_size(self) -> int:
        return self.inputs.shape[0]


ForwardCache = Union[TriMlpCache, HomMlpCache]


def _init_trunk(rng: np.random.Generator, dims: list[int], dtype) -> tuple[list, list]:
    """Fan-in-scaled uniform init (ReLU gain) for all but the last layer, zeroed.

    The sqrt(6/fan_in) bound keeps activation magnitudes roughly constant
    through ReLU depth; a zeroed output layer makes the first prediction the
    neutral prior (box center / origin).
    """
    weights, biases = [], []
    for i in range(len(dims) - 1):
        fan_in, fan_out = dims[i], dims[i + 1]
        if i == len(dims) - 2:
            w = np.zeros((fan_in, fan_out), dtype=dtype)
            b = np.zeros(fan_out, dtype=dtype)
        else:
            bound = np.sqrt(6.0 / fan_in)
            w = rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype)
            b = rng.uniform(-bound, bound, size=fan_out).astype(dtype)
        weights.append(w)
        biases.append(b)
    return weights, biases


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(np.asarray(0, dtype=x.dtype), x)


class ScrNetwork:
    """Common parameter bookkeeping for both regressor kinds."""

    kind: str

    def __init__(self, config, weights: list[np.ndarray], biases: list[np.ndarray]):
        self.config = config
        self.weights = weights
        self.biases = biases

    @property
    def dtype(self):
        return self.weights[0].dtype

    def parameters(self) -> list[np.ndarray]:
        """Flat parameter list in declaration order: W0, b0, W1, b1, ..."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out

    @property
    def param_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def _check_descriptors(self, descriptors: np.ndarray) -> np.ndarray:
        descriptors = np.asarray(descriptors, dtype=self.dtype)
        if descriptors.ndim != 2 or descriptors.shape[1] != self.config.descriptor_dim:
            raise ValueError(
                f"descriptors must have shape (N, {self.config.descriptor_dim}), "
                f"got {descriptors.shape}")
        return descriptors

    def _trunk_forward(self, x: np.ndarray) -> tuple[list, list]:
        """Plain ReLU trunk over all hidden layers; returns (preacts, acts)."""
        preacts, acts = [], [x]
        h = x
        for w, b in zip(self.weights[:-1], self.biases[:-1]):
            z = h @ w
            z += b
            h = np.maximum(z, 0)
            preacts.append(z)
            acts.append(h)
        return preacts, acts

    def astype(self, dtype) -> "ScrNetwork":
        """Copy of the network with parameters converted to ``dtype``."""
        return type(self)(self.config,
                          [w.astype(dtype) for w in self.weights],
                          [b.astype(dtype) for b in self.biases])

    def forward(self, descriptors: np.ndarray, want_cache: bool = False):
        raise NotImplementedError

    def backward(self, cache: ForwardCache, grad_outputs: np.ndarray) -> list[np.ndarray]:
        raise NotImplementedError


class TriMlp(ScrNetwork):
    """Triplane coordinate-voting regressor."""

    kind = "trimlp"

    def __init__(self, config: TriplaneConfig, weights, biases):
        super().__init__(config, weights, biases)
        self._centers = [axis_centers(config.bounds_min[a], config.bounds_max[a],
                                      config.resolutions[a], dtype=self.dtype)
                         for a in range(3)]
        # Flat per-logit coordinate lookups: block (i, j) flattens row-major.
        self._flat_coords = {}
        self._block_slices = {}
        offset = 0
        for plane, (ai, aj) in PLANE_AXES.items():
            ci, cj = self._centers[ai], self._centers[aj]
            self._flat_coords[plane] = (np.repeat(ci, len(cj)), np.tile(cj, len(ci)))
            size = len(ci) * len(cj)
            self._block_slices[plane] = slice(offset, offset + size)
            offset += size

    @classmethod
    def create(cls, config: TriplaneConfig, rng: Optional[np.random.Generator] = None,
               dtype=np.float32) -> "TriMlp":
        rng = rng if rng is not None else np.random.default_rng(0)
        dims = [config.descriptor_dim] + [config.hidden_width] * config.hidden_depth \
            + [config.n_logits]
        weights, biases = _init_trunk(rng, dims, dtype)
        return cls(config, weights, biases)

    def bases(self) -> dict[str, np.ndarray]:
        return make_bases(self.config)

    def forward(self, descriptors: np.ndarray, want_cache: bool = False):
        x = self._check_descriptors(descriptors)
        preacts, acts = self._trunk_forward(x)
        logits = acts[-1] @ self.weights[-1]
        logits += self.biases[-1]
        distributions, plane_coords = {}, {}
        for plane in PLANES:
            block = np.ascontiguousarray(logits[:, self._block_slices[plane]])
            block -= block.max(axis=1, keepdims=True)
            # Floor at exp(-30) ~ 1e-13: negligible mass, but keeps the whole
            # pipeline out of subnormal arithmetic when logits saturate.
            np.maximum(block, -30.0, out=block)
            np.exp(block, out=block)
            inv = (1.0 / block.sum(axis=1, dtype=np.float64)).astype(self.dtype)
            block *= inv[:, None]
            wi, wj = self._flat_coords[plane]
            plane_coords[plane] = np.stack([block @ wi, block @ wj], axis=1)
            distributions[plane] = block
        xy, xz, yz = plane_coords["xy"], plane_coords["xz"], plane_coords["yz"]
        half = np.asarray(0.5, dtype=self.dtype)
        outputs = np.stack([(xy[:, 0] + xz[:, 0]) * half,
                            (xy[:, 1] + yz[:, 0]) * half,
                            (xz[:, 1] + yz[:, 1]) * half], axis=1)
        if not want_cache:
            return outputs, None
        return outputs, TriMlpCache(inputs=x, preacts=preacts, acts=acts,
                                    distributions=distributions,
                                    plane_coords=plane_coords, outputs=outputs)

    def backward(self, cache: TriMlpCache, grad_outputs: np.ndarray) -> list[np.ndarray]:
        grad_outputs = np.asarray(grad_outputs, dtype=self.dtype)
        if grad_outputs.shape != (cache.batch_size, 3):
            raise ValueError(
                f"output gradients must have shape ({cache.batch_size}, 3), "
                f"got {grad_outputs.shape}")
        half = np.asarray(0.5, dtype=self.dtype)
        plane_grads = {
            "xy": np.stack([grad_outputs[:, 0], grad_outputs[:, 1]], axis=1) * half,
            "xz": np.stack([grad_outputs[:, 0], grad_outputs[:, 2]], axis=1) * half,
            "yz": np.stack([grad_outputs[:, 1], grad_outputs[:, 2]], axis=1) * half,
        }
        n = cache.batch_size
        d_logits = np.empty((n, self.config.n_logits), dtype=self.dtype)
        for plane in PLANES:
            c = cache.distributions[plane]
            gi = plane_grads[plane][:, 0]
            gj = plane_grads[plane][:, 1]
            wi, wj = self._flat_coords[plane]
            # d/dz of expectation through a softmax: C * (w - <w>_C) per row.
            w_per_logit = gi[:, None] * wi
            w_per_logit += gj[:, None] * wj
            mean_w = gi * cache.plane_coords[plane][:, 0] \
                + gj * cache.plane_coords[plane][:, 1]
            w_per_logit -= mean_w[:, None]
            np.multiply(c, w_per_logit, out=d_logits[:, self._block_slices[plane]])
        return self._trunk_backward(cache, d_logits)

    def _trunk_backward(self, cache, d_top: np.ndarray) -> list[np.ndarray]:
        grads_w = [None] * len(self.weights)
        grads_b = [None] * len(self.biases)
        grads_w[-1] = cache.acts[-1].T @ d_top
        grads_b[-1] = d_top.sum(axis=0)
        dh = d_top @ self.weights[-1].T
        for k in range(len(self.weights) - 2, -1, -1):
            dz = dh * (cache.preacts[k] > 0)
            grads_w[k] = cache.acts[k].T @ dz
            grads_b[k] = dz.sum(axis=0)
            if k > 0:
                dh = dz @ self.weights[k].T
        out = []
        for gw, gb in zip(grads_w, grads_b):
            out.append(gw)
            out.append(gb)
        return out


class HomMlp(ScrNetwork):
    """Direct regressor with homogeneous output and skip connections."""

    kind = "hommlp"

    @classmethod
    def create(cls, config: HomMlpConfig, rng: Optional[np.random.Generator] = None,
               dtype=np.float32) -> "HomMlp":
        rng = rng if rng is not None else np.random.default_rng(0)
        dims = [config.descriptor_dim] + [config.hidden_width] * config.hidden_depth + [4]
        weights, biases = _init_trunk(rng, dims, dtype)
        return cls(config, weights, biases)

    @staticmethod
    def _has_skip(layer_index: int) -> bool:
        # Additive skip from two layers back, after every second hidden layer.
        return layer_index >= 2 and layer_index % 2 == 0

    def forward(self, descriptors: np.ndarray, want_cache: bool = False):
        x = self._check_descriptors(descriptors)
        preacts, acts = [], [x]
        h = x
        n_hidden = len(self.weights) - 1
        for k in range(n_hidden):
            z = h @ self.weights[k] + self.biases[k]
            h = np.maximum(z, 0)
            if self._has_skip(k):
                h = h + acts[k - 1]  # acts[k - 1] is the activation of layer k - 2
            preacts.append(z)
            acts.append(h)
        raw = h @ self.weights[-1] + self.biases[-1]
        divisor = _softplus(raw[:, 3]) + np.asarray(self.config.w_epsilon, self.dtype)
        outputs = raw[:, :3] / divisor[:, None]
        if not want_cache:
            return outputs, None
        return outputs, HomMlpCache(inputs=x, preacts=preacts, acts=acts, raw=raw,
                                    divisor=divisor, outputs=outputs)

    def backward(self, cache: HomMlpCache, grad_outputs: np.ndarray) -> list[np.ndarray]:
        grad_outputs = np.asarray(grad_outputs, dtype=self.dtype)
        if grad_outputs.shape != (cache.batch_size, 3):
            raise ValueError(
                f"output gradients must have shape ({cache.batch_size}, 3), "
                f"got {grad_outputs.shape}")
        s = cache.divisor
        d_raw = np.empty_like(cache.raw)
        d_raw[:, :3] = grad_outputs / s[:, None]
        sigmoid_w = 1.0 / (1.0 + np.exp(-cache.raw[:, 3]))
        d_raw[:, 3] = -(grad_outputs * cache.raw[:, :3]).sum(axis=1) / s**2 * sigmoid_w

        n_hidden = len(self.weights) - 1
        grads_w = [None] * len(self.weights)
        grads_b = [None] * len(self.biases)
        grads_w[-1] = cache.acts[-1].T @ d_raw
        grads_b[-1] = d_raw.sum(axis=0)
        # d_acts[k] accumulates the gradient on the activation of hidden layer k.
        d_acts = [np.zeros_like(a) for a in cache.acts]
        d_acts[n_hidden] = d_raw @ self.weights[-1].T
        for k in range(n_hidden - 1, -1, -1):
            g = d_acts[k + 1]
            dz = g * (cache.preacts[k] > 0)
            grads_w[k] = cache.acts[k].T @ dz
            grads_b[k] = dz.sum(axis=0)
            d_acts[k] += dz @ self.weights[k].T
            if self._has_skip(k):
                d_acts[k - 1] += g  # identity branch of the skip
        out = []
        for gw, gb in zip(grads_w, grads_b):
            out.append(gw)
            out.append(gb)
        return out


class AdamOptimizer:
    """Adam with bias correction; updates network parameters in place."""

    def __init__(self, learning_rate: float = 2e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m: Optional[list[np.ndarray]] = None
        self._v: Optional[list[np.ndarray]] = None

    def step(self, net: ScrNetwork, grads: list[np.ndarray]) -> None:
        params = net.parameters()
        if len(grads) != len(params):
            raise ValueError(f"expected {len(params)} gradient arrays, got {len(grads)}")
        for p, g in zip(params, grads):
            if p.shape != np.shape(g):
                raise ValueError(f"gradient shape {np.shape(g)} != parameter {p.shape}")
        if self._m is None:
            self._m = [np.zeros_like(p) for p in params]
            self._v = [np.zeros_like(p) for p in params]
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(params, grads, self._m, self._v):
            g = np.asarray(g, dtype=p.dtype)
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


_HEADER = struct.Struct("<4sIBIIIIII6f")


def serialize(net: ScrNetwork) -> bytes:
    """Encode a network as `SCRM` bytes: header + float32 little-endian params.

    Parameters are written in declaration order (W0, b0, W1, b1, ...), weight
    matrices row-major. The serialized length is the reported map size.
    """
    if net.kind == "trimlp":
        kind = KIND_TRIMLP
        cfg = net.config
        res = cfg.resolutions
        bounds = tuple(cfg.bounds_min) + tuple(cfg.bounds_max)
    elif net.kind == "hommlp":
        kind = KIND_HOMMLP
        cfg = net.config
        res = (0, 0, 0)
        bounds = (0.0,) * 6
    else:
        raise SerializationError(f"unknown network kind {net.kind!r}")
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, kind, cfg.descriptor_dim,
                          cfg.hidden_width, cfg.hidden_depth, *res, *bounds)
    chunks = [header]
    for p in net.parameters():
        chunks.append(np.ascontiguousarray(p, dtype="<f4").tobytes())
    return b"".join(chunks)


def deserialize(data: bytes) -> ScrNetwork:
    """Decode `SCRM` bytes; raises SerializationError on any malformed input."""
    if len(data) < _HEADER.size:
        raise SerializationError("byte stream shorter than header")
    (magic, version, kind, descriptor_dim, hidden_width, hidden_depth,
     r_x, r_y, r_z, *bounds) = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise SerializationError(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise SerializationError(f"unsupported format version {version}")
    if kind == KIND_TRIMLP:
        config = TriplaneConfig(r_x=r_x, r_y=r_y, r_z=r_z,
                                bounds_min=tuple(bounds[:3]),
                                bounds_max=tuple(bounds[3:]),
                                hidden_width=hidden_width, hidden_depth=hidden_depth,
                                descriptor_dim=descriptor_dim)
        out_dim = config.n_logits
        cls = TriMlp
    elif kind == KIND_HOMMLP:
        config = HomMlpConfig(descriptor_dim=descriptor_dim,
                              hidden_width=hidden_width, hidden_depth=hidden_depth)
        out_dim = 4
        cls = HomMlp
    else:
        raise SerializationError(f"unknown network kind byte {kind}")
    dims = [descriptor_dim] + [hidden_width] * hidden_depth + [out_dim]
    n_params = sum(dims[i] * dims[i + 1] + dims[i + 1] for i in range(len(dims) - 1))
    expected = _HEADER.size + 4 * n_params
    if len(data) != expected:
        raise SerializationError(
            f"expected {expected} bytes for this configuration, got {len(data)}")
    flat = np.frombuffer(data, dtype="<f4", offset=_HEADER.size).astype(np.float32)
    weights, biases, offset = [], [], 0
    for i in range(len(dims) - 1):
        w = flat[offset:offset + dims[i] * dims[i + 1]].reshape(dims[i], dims[i + 1])
        offset += w.size
        b = flat[offset:offset + dims[i + 1]]
        offset += b.size
        weights.append(w.copy())
        biases.append(b.copy())
    return cls(config, weights, biases)


def save_map(path, net: ScrNetwork) -> None:
    with open(path, "wb") as f:
        f.write(serialize(net))


def load_map(path) -> ScrNetwork:
    with open(path, "rb") as f:
        return deserialize(f.read())
