"""Modified U-Net: four resolution levels, BN after every convolution,
zero-padded 3x3 convolutions, 2x2 transposed-conv upsampling with skip
concatenation, final 1x1 convolution and channel softmax.

Feature count at level ``l`` is ``base_features * 2**l``. Parameters are
drawn deterministically from a seed in layer-creation order, so the same
seed always yields bit-identical weights.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError, StateError

_DOWNSAMPLE_DIVISOR = 16  # three 2x pools below the top level, times 2


@dataclass(frozen=True)
class NetConfig:
    in_channels: int = 1
    base_features: int = 8
    levels: int = 4
    classes: int = 2
    upsample: str = "transposed"  # or "nearest"

    def __post_init__(self):
        if self.in_channels < 1:
            raise ConfigError("in_channels must be positive")
        if self.base_features < 1:
            raise ConfigError("base_features must be positive")
        if self.levels != 4:
            raise ConfigError("this architecture is fixed at four resolution levels")
        if self.classes != 2:
            raise ConfigError("binary segmentation: classes must be 2")
        if self.upsample not in ("transposed", "nearest"):
            raise ConfigError(f"unknown upsample mode {self.upsample!r}")


class Conv2d:
    def __init__(self, name, cin, cout, k, rng, dtype):
        fan_in = cin * k * k
        std = np.sqrt(2.0 / fan_in)
        self.name = name
        self.pad = (k - 1) // 2
        self.weight = T.Tensor(rng.normal(0.0, std, (cout, cin, k, k)).astype(dtype),
                               requires_grad=True)
        self.bias = T.Tensor(np.zeros(cout, dtype=dtype), requires_grad=True)

    def __call__(self, x, mode):
        return T.conv2d(x, self.weight, self.bias, self.pad)

    def params(self):
        return [(f"{self.name}.weight", self.weight, True),
                (f"{self.name}.bias", self.bias, False)]


class BatchNorm2d:
    def __init__(self, name, channels, dtype, eps=1e-5, momentum=0.9):
        self.name = name
        self.eps = eps
        self.momentum = momentum
        self.gamma = T.Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = T.Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.running = T.BatchNormState(channels, dtype=dtype)

    def __call__(self, x, mode):
        return T.batchnorm(x, self.gamma, self.beta, eps=self.eps, mode=mode,
                           running=self.running, momentum=self.momentum)

    def params(self):
        return [(f"{self.name}.gamma", self.gamma, False),
                (f"{self.name}.beta", self.beta, False)]


class ReLU:
    def __call__(self, x, mode):
        return T.relu(x)

    def params(self):
        return []


class UpConv2:
    def __init__(self, name, cin, cout, rng, dtype):
        std = np.sqrt(2.0 / (cin * 4))
        self.name = name
        self.weight = T.Tensor(rng.normal(0.0, std, (cin, cout, 2, 2)).astype(dtype),
                               requires_grad=True)

    def __call__(self, x, mode):
        return T.upconv2(x, self.weight)

    def params(self):
        return [(f"{self.name}.weight", self.weight, True)]


def _conv_block(name, cin, cout, rng, dtype):
    # conv3x3 -> BN -> ReLU, twice
    return [
        Conv2d(f"{name}.conv1", cin, cout, 3, rng, dtype),
        BatchNorm2d(f"{name}.bn1", cout, dtype),
        ReLU(),
        Conv2d(f"{name}.conv2", cout, cout, 3, rng, dtype),
        BatchNorm2d(f"{name}.bn2", cout, dtype),
        ReLU(),
    ]


class Network:
    """The assembled U-shape with recorded forward state for backprop."""

    def __init__(self, config: NetConfig, seed: int, dtype=np.float32):
        self.config = config
        self.seed = int(seed)
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(self.seed)
        f = config.base_features
        feats = [f * 2 ** level for level in range(config.levels)]

        self.enc = []
        cin = config.in_channels
        for level, cf in enumerate(feats):
            self.enc.append(_conv_block(f"enc{level}", cin, cf, rng, self.dtype))
            cin = cf

        self.ups = []
        self.dec = []
        for level in range(config.levels - 2, -1, -1):
            cf = feats[level]
            if config.upsample == "transposed":
                up = [UpConv2(f"up{level}.tconv", feats[level + 1], cf, rng, self.dtype)]
            else:
                up = ["nearest", Conv2d(f"up{level}.conv", feats[level + 1], cf, 3, rng, self.dtype)]
            self.ups.append(up)
            self.dec.append(_conv_block(f"dec{level}", 2 * cf, cf, rng, self.dtype))

        self.final = Conv2d("final.conv", feats[0], config.classes, 1, rng, self.dtype)
        self._last_output: T.Tensor | None = None

    # -- structure ---------------------------------------------------------

    def _layers(self):
        for block in self.enc:
            yield from block
        for up, block in zip(self.ups, self.dec):
            for lay in up:
                if lay != "nearest":
                    yield lay
            yield from block
        yield self.final

    def parameters(self):
        """(name, tensor, decayable) triples in a fixed order."""
        out = []
        for lay in self._layers():
            out.extend(lay.params())
        return out

    def weight_tensors(self):
        """Conv / upconv weights only (the L2-penalized set)."""
        return [(n, t) for n, t, decay in self.parameters() if decay]

    def zero_grad(self):
        for _, t, _ in self.parameters():
            t.zero_grad()

    # -- execution ---------------------------------------------------------

    def forward(self, x, mode: str = "train") -> T.Tensor:
        """Run the network; returns per-pixel class probabilities."""
        if not isinstance(x, T.Tensor):
            x = T.Tensor(np.asarray(x, dtype=self.dtype))
        N, C, H, W = x.data.shape
        if C != self.config.in_channels:
            raise ShapeError(f"network expects {self.config.in_channels} channels, got {C}")
        if H % _DOWNSAMPLE_DIVISOR or W % _DOWNSAMPLE_DIVISOR:
            raise ShapeError(
                f"input extents must be divisible by {_DOWNSAMPLE_DIVISOR}, got {H}x{W}"
            )

        def run(block, t):
            for lay in block:
                t = lay(t, mode)
            return t

        skips = []
        t = x
        for level, block in enumerate(self.enc):
            t = run(block, t)
            if level < self.config.levels - 1:
                skips.append(t)
                t = T.maxpool2(t)

        for up, block, skip in zip(self.ups, self.dec, reversed(skips)):
            if up[0] == "nearest":
                t = T.nearest_upsample2(t)
                t = up[1](t, mode)
            else:
                t = up[0](t, mode)
            t = T.concat_channels(skip, t)
            t = run(block, t)

        t = self.final(t, mode)
        out = T.softmax_channels(t)
        self._last_output = out
        return out

    def backward(self, loss_grad_at_output):
        """Backpropagate from the recorded softmax output; returns name->grad."""
        if self._last_output is None:
            raise StateError("backward called before any forward pass")
        self._last_output.backward(np.asarray(loss_grad_at_output, dtype=self.dtype))
        return {name: t.grad for name, t, _ in self.parameters()}


def build_unet(config: NetConfig, seed: int, dtype=np.float32) -> Network:
    return Network(config, seed, dtype=dtype)


def network_backward(net: Network, loss_grad_at_output) -> dict:
    return net.backward(loss_grad_at_output)


# -- serialization: JSON manifest + little-endian float32 blobs -------------

_MAGIC = b"RTSENET1"


def _blob_entries(net: Network):
    """Parameter and running-statistic arrays in manifest order."""
    entries = [(name, t.data) for name, t, _ in net.parameters()]
    for lay in net._layers():
        if isinstance(lay, BatchNorm2d):
            entries.append((f"{lay.name}.running_mean", lay.running.mean))
            entries.append((f"{lay.name}.running_var", lay.running.var))
    return entries


def save_network(net: Network, path):
    entries = _blob_entries(net)
    manifest = {
        "format": "radtse-net-v1",
        "seed": net.seed,
        "config": {
            "in_channels": net.config.in_channels,
            "base_features": net.config.base_features,
            "levels": net.config.levels,
            "classes": net.config.classes,
            "upsample": net.config.upsample,
        },
        "bn_initialized": [
            bool(lay.running.initialized)
            for lay in net._layers() if isinstance(lay, BatchNorm2d)
        ],
        "blobs": [{"name": n, "shape": list(a.shape)} for n, a in entries],
    }
    payload = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(payload)))
        fh.write(payload)
        for _, arr in entries:
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_network(path, dtype=np.float32) -> Network:
    with open(path, "rb") as fh:
        magic = fh.read(len(_MAGIC))
        if magic != _MAGIC:
            raise ConfigError(f"{path}: not a network file")
        (mlen,) = struct.unpack("<I", fh.read(4))
        manifest = json.loads(fh.read(mlen).decode("utf-8"))
        net = Network(NetConfig(**manifest["config"]), manifest["seed"], dtype=dtype)
        entries = _blob_entries(net)
        names = [b["name"] for b in manifest["blobs"]]
        if names != [n for n, _ in entries]:
            raise ConfigError(f"{path}: manifest does not match architecture")
        for spec, (_, arr) in zip(manifest["blobs"], entries):
            n = int(np.prod(spec["shape"])) if spec["shape"] else 1
            raw = np.frombuffer(fh.read(4 * n), dtype="<f4").reshape(spec["shape"])
            arr[...] = raw.astype(arr.dtype)
        for lay, init in zip(
            (l for l in net._layers() if isinstance(l, BatchNorm2d)),
            manifest["bn_initialized"],
        ):
            lay.running.initialized = bool(init)
    return net
