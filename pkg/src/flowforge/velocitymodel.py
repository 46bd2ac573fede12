"""Conditional velocity-field MLP and its checkpoint format."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensorcore as tc
from ._util import fnv1a64

FORMAT_VERSION = "v1"
MAGIC = b"FFCK"


class CheckpointError(Exception):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointChecksumError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    latent_dim: int = 192
    cond_dim: int = 13
    hidden_dims: tuple = (256, 256)
    time_embed_dim: int = 8
    activation: str = "tanh"
    # linear input->output path, stored as one extra (weight, bias) pair
    skip: bool = False
    # > 0 divides the output by (1 - t + time_scale); see forward_nodes
    time_scale: float = 0.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        for name in ("latent_dim", "cond_dim", "time_embed_dim"):
            if int(getattr(self, name)) <= 0:
                raise ValueError(f"{name} must be positive")
        if not self.hidden_dims or any(h <= 0 for h in self.hidden_dims):
            raise ValueError("hidden_dims must be a non-empty list of positive ints")
        if self.time_embed_dim % 2:
            raise ValueError("time_embed_dim must be even (sin/cos pairs)")
        if self.activation not in ("tanh", "relu", "sigmoid"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if not self.time_scale >= 0:
            raise ValueError("time_scale must be >= 0")

    @property
    def input_dim(self):
        return self.latent_dim + self.cond_dim + self.time_embed_dim

    def layer_shapes(self):
        dims = [self.input_dim, *self.hidden_dims, self.latent_dim]
        shapes = list(zip(dims[:-1], dims[1:]))
        if self.skip:
            shapes.append((self.input_dim, self.latent_dim))
        return shapes


def desk_config(**kw) -> ModelConfig:
    """Configuration the pipeline trains by default (relu, skip path, output gain)."""
    return ModelConfig(**{"activation": "relu", "skip": True, "time_scale": 0.05, **kw})


@dataclass
class ModelParams:
    weights: list
    biases: list
    config: ModelConfig
    version: str = FORMAT_VERSION

    def __post_init__(self):
        shapes = self.config.layer_shapes()
        if len(self.weights) != len(shapes) or len(self.biases) != len(shapes):
            raise ValueError("layer count does not match config")
        for (fin, fout), w, b in zip(shapes, self.weights, self.biases):
            if w.shape != (fin, fout) or b.shape != (fout,):
                raise ValueError(f"layer shape {w.shape}/{b.shape} != {(fin, fout)}")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValueError("parameters must be finite")

    def arrays(self):
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend([w, b])
        return out

    @classmethod
    def from_arrays(cls, arrays, config):
        return cls(
            [np.array(a, dtype=np.float64) for a in arrays[0::2]],
            [np.array(a, dtype=np.float64) for a in arrays[1::2]],
            config,
        )

    def copy(self):
        return ModelParams.from_arrays([a.copy() for a in self.arrays()], self.config)

    def n_params(self):
        return sum(a.size for a in self.arrays())

    def equals(self, other):
        return all(np.array_equal(a, b) for a, b in zip(self.arrays(), other.arrays()))


def init_params(config: ModelConfig) -> ModelParams:
    gen = np.random.default_rng(config.seed)
    weights, biases = [], []
    for fin, fout in config.layer_shapes():
        bound = 1.0 / math.sqrt(fin)
        weights.append(gen.uniform(-bound, bound, size=(fin, fout)))
        biases.append(np.zeros(fout))
    return ModelParams(weights, biases, config)


def zero_params(config: ModelConfig) -> ModelParams:
    return ModelParams(
        [np.zeros(s) for s in config.layer_shapes()],
        [np.zeros(s[1]) for s in config.layer_shapes()],
        config,
    )


def time_embed(t, dim=8):
    """Sinusoidal features [sin(2*pi*2^i*t), cos(2*pi*2^i*t)] for i < dim/2."""
    t_arr = np.atleast_1d(np.asarray(t, dtype=np.float64))
    if np.any(t_arr < 0.0) or np.any(t_arr > 1.0):
        raise ValueError("t must lie in [0, 1]")
    freqs = 2.0 ** np.arange(dim // 2)
    ang = 2.0 * np.pi * t_arr[:, None] * freqs[None, :]
    out = np.empty((t_arr.size, dim))
    out[:, 0::2] = np.sin(ang)
    out[:, 1::2] = np.cos(ang)
    return out[0] if np.ndim(t) == 0 else out


def param_nodes(params: ModelParams, trainable=True):
    """Leaf nodes for each weight/bias, biases as 1-by-n rows."""
    nodes = []
    make = tc.leaf if trainable else (lambda x: tc.const(x))
    for w, b in zip(params.weights, params.biases):
        nodes.append(make(w))
        nodes.append(make(b.reshape(1, -1)))
    return nodes


_ACT = {"tanh": tc.tanh, "relu": tc.relu, "sigmoid": tc.sigmoid}


def forward_nodes(nodes, config: ModelConfig, z_t, cond, t):
    """Graph-building forward pass. ``z_t`` may be a Node; returns (B, D) node."""
    z = z_t if isinstance(z_t, tc.Node) else tc.const(np.atleast_2d(np.asarray(z_t, dtype=np.float64)))
    if z.value.ndim == 1:
        raise tc.ShapeError("z_t node must be 2-D (batch, latent)")
    batch = z.shape[0]
    c = np.asarray(cond, dtype=np.float64)
    c = np.broadcast_to(c, (batch, config.cond_dim)) if c.ndim == 1 else c
    if z.shape[1] != config.latent_dim or c.shape != (batch, config.cond_dim):
        raise tc.ShapeError(
            f"forward: latent {list(z.shape)} / cond {list(c.shape)} do not match config "
            f"(latent_dim={config.latent_dim}, cond_dim={config.cond_dim})"
        )
    t_arr = np.broadcast_to(np.asarray(t, dtype=np.float64), (batch,))
    emb = time_embed(t_arr, config.time_embed_dim)
    h = tc.concat(z, tc.const(np.concatenate([c, emb], axis=1)))
    ones = tc.const(np.ones((batch, 1)))
    act = _ACT[config.activation]
    x = h
    n_layers = len(config.hidden_dims) + 1
    for i in range(n_layers):
        w, b = nodes[2 * i], nodes[2 * i + 1]
        h = tc.add(tc.matmul(h, w), tc.matmul(ones, b))
        if i < n_layers - 1:
            h = act(h)
    if config.skip:
        h = tc.add(h, tc.add(tc.matmul(x, nodes[-2]), tc.matmul(ones, nodes[-1])))
    if config.time_scale:
        # the target velocity grows like 1/(1-t) off the data manifold; a fixed
        # output gain lets the network fit it with O(1) activations
        col = 1.0 / (1.0 - t_arr + config.time_scale)
        h = tc.mul(h, tc.const(np.repeat(col[:, None], config.latent_dim, axis=1)))
    return h


def forward(params: ModelParams, z_t, cond, t):
    """Velocity u(z_t, cond, t) as a numpy array with the shape of ``z_t``."""
    z = np.asarray(z_t, dtype=np.float64)
    if not np.all(np.isfinite(z)) or not np.all(np.isfinite(np.asarray(cond, dtype=np.float64))):
        raise ValueError("forward: non-finite input")
    out = forward_nodes(param_nodes(params, trainable=False), params.config, np.atleast_2d(z), cond, t)
    return out.value[0] if z.ndim == 1 else out.value


# checkpoint I/O --------------------------------------------------------------

def _config_block(config: ModelConfig) -> bytes:
    d = asdict(config)
    d["hidden_dims"] = list(config.hidden_dims)
    return json.dumps(d, sort_keys=True).encode()


def checkpoint_bytes(params: ModelParams) -> bytes:
    cfg = _config_block(params.config)
    payload = b"".join(a.astype("<f8").tobytes() for a in params.arrays())
    version = params.version.encode()
    return b"".join(
        [
            MAGIC,
            struct.pack("<H", len(version)),
            version,
            struct.pack("<I", len(cfg)),
            cfg,
            struct.pack("<Q", len(payload)),
            payload,
            struct.pack("<Q", fnv1a64(payload)),
        ]
    )


def save_checkpoint(params: ModelParams, path) -> None:
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(params))


def _take(buf, pos, n, what):
    if pos + n > len(buf):
        raise CheckpointTruncatedError(f"checkpoint truncated while reading {what}")
    return buf[pos:pos + n], pos + n


def parse_checkpoint(buf: bytes, expected_version=FORMAT_VERSION) -> ModelParams:
    magic, pos = _take(buf, 0, 4, "magic")
    if magic != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    raw, pos = _take(buf, pos, 2, "version length")
    (vlen,) = struct.unpack("<H", raw)
    version, pos = _take(buf, pos, vlen, "version")
    version = version.decode(errors="replace")
    if version != expected_version:
        raise CheckpointVersionError(f"checkpoint version {version!r}, reader expects {expected_version!r}")
    raw, pos = _take(buf, pos, 4, "config length")
    (clen,) = struct.unpack("<I", raw)
    cfg_raw, pos = _take(buf, pos, clen, "config")
    raw, pos = _take(buf, pos, 8, "payload length")
    (plen,) = struct.unpack("<Q", raw)
    payload, pos = _take(buf, pos, plen, "payload")
    raw, pos = _take(buf, pos, 8, "checksum")
    (checksum,) = struct.unpack("<Q", raw)
    if fnv1a64(payload) != checksum:
        raise CheckpointChecksumError("checkpoint payload checksum mismatch")
    config = ModelConfig(**json.loads(cfg_raw.decode()))
    arrays, off = [], 0
    for fin, fout in config.layer_shapes():
        for shape in ((fin, fout), (fout,)):
            n = int(np.prod(shape)) * 8
            if off + n > len(payload):
                raise CheckpointTruncatedError("payload shorter than config implies")
            arrays.append(np.frombuffer(payload[off:off + n], dtype="<f8").reshape(shape).astype(np.float64))
            off += n
    return ModelParams.from_arrays(arrays, config)


def load_checkpoint(path, expected_version=FORMAT_VERSION) -> ModelParams:
    with open(path, "rb") as fh:
        return parse_checkpoint(fh.read(), expected_version)
