"""Numpy action-value network: three strided 3D conv + batch-norm blocks
feeding one fully connected head.

Everything runs in float64 with hand-written backward passes, which keeps
finite-difference gradient checks tight and seeded training runs bit-exact
across machines. Weights serialize to a JSON manifest plus a raw
little-endian float32 payload.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

__all__ = ["Conv3d", "BatchNorm3d", "QNetwork"]


def _conv_out(n: int) -> int:
    # kernel 3, stride 2, padding 1
    return (n - 1) // 2 + 1


class Conv3d:
    """3x3x3 convolution, stride 2, zero padding 1."""

    def __init__(self, in_channels: int, out_channels: int, rng: np.random.Generator):
        fan_in = in_channels * 27
        self.w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(out_channels, in_channels, 3, 3, 3))
        self.b = np.zeros(out_channels)
        self.gw = np.zeros_like(self.w)
        self.gb = np.zeros_like(self.b)
        self._patches = None
        self._in_shape = None

    @staticmethod
    def _slices(out_n: int, offset: int) -> slice:
        return slice(offset, offset + 2 * (out_n - 1) + 1, 2)

    def _gather(self, xp: np.ndarray, out_dims) -> np.ndarray:
        b, c = xp.shape[0], xp.shape[1]
        do, ho, wo = out_dims
        patches = np.empty((27, b, c, do, ho, wo))
        k = 0
        for dz in range(3):
            sz = self._slices(do, dz)
            for dy in range(3):
                sy = self._slices(ho, dy)
                for dx in range(3):
                    patches[k] = xp[:, :, sz, sy, self._slices(wo, dx)]
                    k += 1
        return patches

    def forward(self, x: np.ndarray, train: bool) -> np.ndarray:
        self._in_shape = x.shape
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1), (1, 1)))
        out_dims = tuple(_conv_out(n) for n in x.shape[2:])
        patches = self._gather(xp, out_dims)
        if train:
            self._patches = patches
        wk = self.w.reshape(self.w.shape[0], self.w.shape[1], 27)
        out = np.einsum("kbczyx,ock->bozyx", patches, wk, optimize=True)
        return out + self.b[None, :, None, None, None]

    def backward(self, grad: np.ndarray) -> np.ndarray:
        patches = self._patches
        wk = self.w.reshape(self.w.shape[0], self.w.shape[1], 27)
        self.gb += grad.sum(axis=(0, 2, 3, 4))
        self.gw += np.einsum("kbczyx,bozyx->ock", patches, grad, optimize=True).reshape(self.w.shape)
        gpatches = np.einsum("ock,bozyx->kbczyx", wk, grad, optimize=True)

        b, c, d, h, w = self._in_shape
        gxp = np.zeros((b, c, d + 2, h + 2, w + 2))
        do, ho, wo = grad.shape[2:]
        k = 0
        for dz in range(3):
            sz = self._slices(do, dz)
            for dy in range(3):
                sy = self._slices(ho, dy)
                for dx in range(3):
                    gxp[:, :, sz, sy, self._slices(wo, dx)] += gpatches[k]
                    k += 1
        self._patches = None
        return gxp[:, :, 1:-1, 1:-1, 1:-1]

    def params(self, prefix: str) -> dict:
        return {f"{prefix}.w": self.w, f"{prefix}.b": self.b}

    def grads(self, prefix: str) -> dict:
        return {f"{prefix}.w": self.gw, f"{prefix}.b": self.gb}


class BatchNorm3d:
    """Per-channel normalization over batch and all spatial axes.

    Training mode normalizes by batch statistics (biased variance) and updates
    the running buffers; inference mode normalizes by the running buffers, so
    a frozen network is a pure function of its input.
    """

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.gamma = np.ones(channels)
        self.beta = np.zeros(channels)
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.momentum = momentum
        self.eps = eps
        self.ggamma = np.zeros_like(self.gamma)
        self.gbeta = np.zeros_like(self.beta)
        self._xhat = None
        self._inv_std = None

    def forward(self, x: np.ndarray, train: bool) -> np.ndarray:
        axes = (0, 2, 3, 4)
        if train:
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            self.running_mean = (1 - self.momentum) * self.running_mean + self.momentum * mean
            self.running_var = (1 - self.momentum) * self.running_var + self.momentum * var
        else:
            mean, var = self.running_mean, self.running_var
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean[None, :, None, None, None]) * inv_std[None, :, None, None, None]
        if train:
            self._xhat = xhat
            self._inv_std = inv_std
        return self.gamma[None, :, None, None, None] * xhat + self.beta[None, :, None, None, None]

    def backward(self, grad: np.ndarray) -> np.ndarray:
        axes = (0, 2, 3, 4)
        xhat = self._xhat
        n = grad.shape[0] * grad.shape[2] * grad.shape[3] * grad.shape[4]
        self.ggamma += (grad * xhat).sum(axis=axes)
        self.gbeta += grad.sum(axis=axes)

        g_sum = grad.sum(axis=axes)[None, :, None, None, None]
        gx_sum = (grad * xhat).sum(axis=axes)[None, :, None, None, None]
        coef = (self.gamma * self._inv_std)[None, :, None, None, None] / n
        gx = coef * (n * grad - g_sum - xhat * gx_sum)
        self._xhat = None
        self._inv_std = None
        return gx

    def params(self, prefix: str) -> dict:
        return {f"{prefix}.gamma": self.gamma, f"{prefix}.beta": self.beta}

    def grads(self, prefix: str) -> dict:
        return {f"{prefix}.gamma": self.ggamma, f"{prefix}.beta": self.gbeta}

    def buffers(self, prefix: str) -> dict:
        return {
            f"{prefix}.running_mean": self.running_mean,
            f"{prefix}.running_var": self.running_var,
        }


class _Linear:
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator):
        self.w = rng.normal(0.0, np.sqrt(2.0 / in_features), size=(out_features, in_features))
        self.b = np.zeros(out_features)
        self.gw = np.zeros_like(self.w)
        self.gb = np.zeros_like(self.b)
        self._x = None

    def forward(self, x: np.ndarray, train: bool) -> np.ndarray:
        if train:
            self._x = x
        return x @ self.w.T + self.b

    def backward(self, grad: np.ndarray) -> np.ndarray:
        self.gw += grad.T @ self._x
        self.gb += grad.sum(axis=0)
        self._x = None
        return grad @ self.w

    def params(self, prefix: str) -> dict:
        return {f"{prefix}.w": self.w, f"{prefix}.b": self.b}

    def grads(self, prefix: str) -> dict:
        return {f"{prefix}.w": self.gw, f"{prefix}.b": self.gb}


_CHANNELS = (8, 16, 32)
_WEIGHTS_VERSION = 1


class QNetwork:
    """Maps a (2, dx, dy, dz) observation to angle_bins + 1 action values."""

    def __init__(
        self,
        input_dims: tuple[int, int, int] = (16, 16, 16),
        angle_bins: int = 36,
        in_channels: int = 2,
        seed: int = 0,
    ):
        self.input_dims = tuple(int(d) for d in input_dims)
        self.angle_bins = int(angle_bins)
        self.in_channels = int(in_channels)
        self.n_actions = self.angle_bins + 1
        rng = np.random.default_rng(seed)

        chans = (self.in_channels,) + _CHANNELS
        self.convs = [Conv3d(chans[i], chans[i + 1], rng) for i in range(3)]
        self.bns = [BatchNorm3d(c) for c in _CHANNELS]

        dims = self.input_dims
        for _ in range(3):
            dims = tuple(_conv_out(n) for n in dims)
        self._flat_dims = dims
        flat = _CHANNELS[-1] * dims[0] * dims[1] * dims[2]
        self.fc = _Linear(flat, self.n_actions, rng)
        self._relu_masks: list[np.ndarray] = []

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        """Q-values, shape (batch, angle_bins + 1). ``train`` switches the
        batch-norm layers to batch statistics and keeps backward caches."""
        x = np.asarray(x, dtype=np.float64)
        expected = (self.in_channels,) + self.input_dims
        if x.ndim != 5 or x.shape[1:] != expected:
            raise ValueError(f"expected input (batch, {expected}), got {x.shape}")
        self._relu_masks = []
        for conv, bn in zip(self.convs, self.bns):
            x = bn.forward(conv.forward(x, train), train)
            mask = x > 0
            if train:
                self._relu_masks.append(mask)
            x = x * mask
        self._batch = x.shape[0]
        return self.fc.forward(x.reshape(x.shape[0], -1), train)

    def backward(self, grad_out: np.ndarray) -> None:
        """Accumulate parameter gradients; call after ``forward(train=True)``."""
        g = self.fc.backward(np.asarray(grad_out, dtype=np.float64))
        g = g.reshape(self._batch, _CHANNELS[-1], *self._flat_dims)
        for conv, bn, mask in zip(
            reversed(self.convs), reversed(self.bns), reversed(self._relu_masks)
        ):
            g = bn.backward(g * mask)
            g = conv.backward(g)

    def parameters(self) -> dict[str, np.ndarray]:
        """Live parameter arrays keyed by name, in a fixed order."""
        out: dict[str, np.ndarray] = {}
        for i, (conv, bn) in enumerate(zip(self.convs, self.bns), start=1):
            out.update(conv.params(f"conv{i}"))
            out.update(bn.params(f"bn{i}"))
        out.update(self.fc.params("fc"))
        return out

    def gradients(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for i, (conv, bn) in enumerate(zip(self.convs, self.bns), start=1):
            out.update(conv.grads(f"conv{i}"))
            out.update(bn.grads(f"bn{i}"))
        out.update(self.fc.grads("fc"))
        return out

    def buffers(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for i, bn in enumerate(self.bns, start=1):
            out.update(bn.buffers(f"bn{i}"))
        return out

    def zero_grads(self) -> None:
        for g in self.gradients().values():
            g[...] = 0.0

    def clone(self) -> "QNetwork":
        other = QNetwork(self.input_dims, self.angle_bins, self.in_channels, seed=0)
        dst_params, dst_buffers = other.parameters(), other.buffers()
        for name, arr in self.parameters().items():
            dst_params[name][...] = arr
        for name, arr in self.buffers().items():
            dst_buffers[name][...] = arr
        return other

    # -- serialization ------------------------------------------------------

    def save(self, path_prefix: str | Path) -> Path:
        """Write ``<prefix>.json`` + ``<prefix>.raw`` (little-endian float32)."""
        prefix = Path(path_prefix)
        prefix.parent.mkdir(parents=True, exist_ok=True)
        arrays = {**self.parameters(), **self.buffers()}
        entries = []
        payload = bytearray()
        for name, arr in arrays.items():
            raw = np.asarray(arr, dtype="<f4").tobytes()
            entries.append({"name": name, "shape": list(arr.shape), "offset": len(payload)})
            payload.extend(raw)
        manifest = {
            "format_version": _WEIGHTS_VERSION,
            "input_dims": list(self.input_dims),
            "angle_bins": self.angle_bins,
            "in_channels": self.in_channels,
            "dtype": "<f4",
            "arrays": entries,
        }
        Path(str(prefix) + ".raw").write_bytes(bytes(payload))
        Path(str(prefix) + ".json").write_text(json.dumps(manifest, indent=2) + "\n")
        return prefix

    @classmethod
    def load(cls, path_prefix: str | Path) -> "QNetwork":
        prefix = Path(path_prefix)
        manifest = json.loads(Path(str(prefix) + ".json").read_text())
        if manifest.get("format_version") != _WEIGHTS_VERSION:
            raise ValueError(f"unsupported weights format_version {manifest.get('format_version')!r}")
        net = cls(
            tuple(manifest["input_dims"]),
            manifest["angle_bins"],
            manifest.get("in_channels", 2),
            seed=0,
        )
        raw = Path(str(prefix) + ".raw").read_bytes()
        arrays = {**net.parameters(), **net.buffers()}
        for entry in manifest["arrays"]:
            arr = arrays[entry["name"]]
            shape = tuple(entry["shape"])
            if shape != arr.shape:
                raise ValueError(f"weights entry {entry['name']!r} has shape {shape}, expected {arr.shape}")
            count = int(np.prod(shape)) if shape else 1
            start = entry["offset"]
            chunk = raw[start : start + 4 * count]
            if len(chunk) != 4 * count:
                raise ValueError(f"weights payload too short for {entry['name']!r}")
            arr[...] = np.frombuffer(chunk, dtype="<f4").reshape(shape).astype(np.float64)
        return net
