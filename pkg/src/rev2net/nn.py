"""3D convolution, transposed convolution, pooling and dense layers.

Video tensors are laid out ``[N, C, T, H, W]``. Convolution weights are
``[C_out, C_in, kt, kh, kw]``; transposed-convolution weights are
``[C_in, C_out, kt, kh, kw]`` so that a transposed convolution is exactly the
adjoint (data gradient) of the convolution sharing its weight array.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Mapping

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import container
from .errors import FormatError, InvalidInputError, InvalidShapeError
from .seeding import derive_seed
from .tensor import Tensor, get_default_dtype, record_op


def _triple(v, name: str) -> tuple[int, int, int]:
    if isinstance(v, (int, np.integer)):
        return (int(v),) * 3
    v = tuple(int(x) for x in v)
    if len(v) != 3:
        raise InvalidShapeError(f"{name} needs 3 entries, got {v}")
    return v


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: tuple = (3, 3, 3)
    stride: tuple = (1, 1, 1)
    padding: tuple = (0, 0, 0)

    def __post_init__(self):
        object.__setattr__(self, "kernel", _triple(self.kernel, "kernel"))
        object.__setattr__(self, "stride", _triple(self.stride, "stride"))
        object.__setattr__(self, "padding", _triple(self.padding, "padding"))
        if self.in_channels < 1 or self.out_channels < 1:
            raise InvalidShapeError(f"channel counts must be >= 1: {self}")
        if min(self.kernel) < 1 or min(self.stride) < 1 or min(self.padding) < 0:
            raise InvalidShapeError(f"bad kernel/stride/padding: {self}")

    def conv_out(self, size) -> tuple[int, int, int]:
        out = tuple((n + 2 * p - k) // s + 1 for n, k, s, p in zip(size, self.kernel, self.stride, self.padding))
        if min(out) < 1 or any(n + 2 * p < k for n, k, p in zip(size, self.kernel, self.padding)):
            raise InvalidShapeError(f"conv of {tuple(size)} with {self} has degenerate output {out}")
        return out

    def transposed_out(self, size) -> tuple[int, int, int]:
        out = tuple((n - 1) * s - 2 * p + k for n, k, s, p in zip(size, self.kernel, self.stride, self.padding))
        if min(out) < 1:
            raise InvalidShapeError(f"transposed conv of {tuple(size)} with {self} has degenerate output {out}")
        return out

    @property
    def taps(self) -> int:
        return self.kernel[0] * self.kernel[1] * self.kernel[2]


@dataclass(frozen=True)
class DenseSpec:
    in_features: int
    out_features: int


# -- raw numpy kernels ----------------------------------------------------------

def _pad(x: np.ndarray, padding) -> np.ndarray:
    if not any(padding):
        return x
    pt, ph, pw = padding
    return np.pad(x, ((0, 0), (0, 0), (pt, pt), (ph, ph), (pw, pw)))


def _im2col(x: np.ndarray, kernel, stride, padding, out) -> np.ndarray:
    """Rows are output positions (n, t, h, w); columns are (c, kt, kh, kw)."""
    xp = _pad(x, padding)
    win = sliding_window_view(xp, kernel, axis=(2, 3, 4))
    st, sh, sw = stride
    to, ho, wo = out
    win = win[:, :, : st * (to - 1) + 1 : st, : sh * (ho - 1) + 1 : sh, : sw * (wo - 1) + 1 : sw]
    n, c = x.shape[:2]
    return np.ascontiguousarray(win.transpose(0, 2, 3, 4, 1, 5, 6, 7)).reshape(n * to * ho * wo, -1)


def _col2im(cols: np.ndarray, x_shape, kernel, stride, padding, out) -> np.ndarray:
    """Adjoint of :func:`_im2col`: scatter-add columns back into an input-shaped array."""
    n, c, t, h, w = x_shape
    pt, ph, pw = padding
    kt, kh, kw = kernel
    st, sh, sw = stride
    to, ho, wo = out
    cols = cols.reshape(n, to, ho, wo, c, kt, kh, kw).transpose(0, 4, 5, 6, 7, 1, 2, 3)
    xp = np.zeros((n, c, t + 2 * pt, h + 2 * ph, w + 2 * pw), dtype=cols.dtype)
    for a in range(kt):
        for b in range(kh):
            for d in range(kw):
                xp[:, :, a : a + st * to : st, b : b + sh * ho : sh, d : d + sw * wo : sw] += cols[:, :, a, b, d]
    return xp[:, :, pt : pt + t, ph : ph + h, pw : pw + w]


def _to_ncthw(rows: np.ndarray, n, out) -> np.ndarray:
    return rows.reshape(n, *out, -1).transpose(0, 4, 1, 2, 3)


def _from_ncthw(g: np.ndarray) -> np.ndarray:
    return g.transpose(0, 2, 3, 4, 1).reshape(-1, g.shape[1])


def _check_video(x: Tensor, channels: int, what: str) -> None:
    if x.ndim != 5:
        raise InvalidShapeError(f"{what} expects [N, C, T, H, W], got {x.shape}")
    if x.shape[1] != channels:
        raise InvalidShapeError(f"{what} expects {channels} input channels, got {x.shape[1]}")


# -- layers -----------------------------------------------------------------------

def conv3d(x: Tensor, spec: ConvSpec, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Cross-correlation plus bias."""
    _check_video(x, spec.in_channels, "conv3d")
    if weight.shape != (spec.out_channels, spec.in_channels) + spec.kernel:
        raise InvalidShapeError(f"conv3d weight {weight.shape} does not match {spec}")
    out = spec.conv_out(x.shape[2:])
    n = x.shape[0]
    cols = _im2col(x.data, spec.kernel, spec.stride, spec.padding, out)
    wmat = weight.data.reshape(spec.out_channels, -1)
    rows = cols @ wmat.T
    if bias is not None:
        rows = rows + bias.data
    x_shape = x.shape
    need_gx = x.requires_grad or x.tracked

    def bwd(g):
        gmat = _from_ncthw(g)
        gx = _col2im(gmat @ wmat, x_shape, spec.kernel, spec.stride, spec.padding, out) if need_gx else None
        gw = (gmat.T @ cols).reshape(weight.shape)
        return (gx, gw) + ((gmat.sum(axis=0),) if bias is not None else ())

    inputs = (x, weight) + ((bias,) if bias is not None else ())
    return record_op("conv3d", inputs, _to_ncthw(rows, n, out), bwd)


def conv_transpose3d(x: Tensor, spec: ConvSpec, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Transposed convolution: the data-gradient of :func:`conv3d` with the same weights."""
    _check_video(x, spec.in_channels, "conv_transpose3d")
    if weight.shape != (spec.in_channels, spec.out_channels) + spec.kernel:
        raise InvalidShapeError(f"conv_transpose3d weight {weight.shape} does not match {spec}")
    size = x.shape[2:]
    out = spec.transposed_out(size)
    n = x.shape[0]
    wmat = weight.data.reshape(spec.in_channels, -1)
    xmat = _from_ncthw(x.data)
    y_shape = (n, spec.out_channels) + out
    y = _col2im(xmat @ wmat, y_shape, spec.kernel, spec.stride, spec.padding, size)
    if bias is not None:
        y = y + bias.data.reshape(1, -1, 1, 1, 1)

    def bwd(g):
        gcols = _im2col(g, spec.kernel, spec.stride, spec.padding, size)
        gx = _to_ncthw(gcols @ wmat.T, n, size)
        gw = (xmat.T @ gcols).reshape(weight.shape)
        return (gx, gw) + ((g.sum(axis=(0, 2, 3, 4)),) if bias is not None else ())

    inputs = (x, weight) + ((bias,) if bias is not None else ())
    return record_op("conv_transpose3d", inputs, y, bwd)


def pool3d(x: Tensor, kind: str, kernel, stride=None) -> Tensor:
    """Max or average pooling without padding.

    Max backward routes each window's gradient to its first maximum in
    row-major window order.
    """
    if kind not in ("max", "avg"):
        raise InvalidInputError(f"unknown pool kind {kind!r}")
    kernel = _triple(kernel, "kernel")
    stride = kernel if stride is None else _triple(stride, "stride")
    if x.ndim != 5:
        raise InvalidShapeError(f"pool3d expects [N, C, T, H, W], got {x.shape}")
    size = x.shape[2:]
    out = tuple((n - k) // s + 1 for n, k, s in zip(size, kernel, stride))
    if min(min(out), min(n - k for n, k in zip(size, kernel)) + 1) < 1:
        raise InvalidShapeError(f"pool3d of {size} with kernel {kernel} stride {stride} is degenerate")
    if kernel == (1, 1, 1) and stride == (1, 1, 1):
        return x
    st, sh, sw = stride
    to, ho, wo = out
    win = sliding_window_view(x.data, kernel, axis=(2, 3, 4))
    win = win[:, :, : st * (to - 1) + 1 : st, : sh * (ho - 1) + 1 : sh, : sw * (wo - 1) + 1 : sw]
    win = win.reshape(win.shape[:5] + (-1,))
    taps = win.shape[-1]
    x_shape = x.shape
    kt, kh, kw = kernel

    if kind == "max":
        idx = win.argmax(axis=-1)
        y = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    else:
        y = win.mean(axis=-1)

    def bwd(g):
        gx = np.zeros(x_shape, dtype=g.dtype)
        for k in range(taps):
            a, rem = divmod(k, kh * kw)
            b, d = divmod(rem, kw)
            contrib = g * (idx == k) if kind == "max" else g / taps
            gx[:, :, a : a + st * to : st, b : b + sh * ho : sh, d : d + sw * wo : sw] += contrib
        return (gx,)

    return record_op(f"{kind}pool3d", (x,), y, bwd)


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Add a per-feature bias along the last axis of a 2-D tensor."""
    if x.ndim != 2 or bias.shape != (x.shape[1],):
        raise InvalidShapeError(f"bias {bias.shape} does not fit {x.shape}")
    return record_op("add_bias", (x, bias), x.data + bias.data, lambda g: (g, g.sum(axis=0)))


def dense(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise InvalidShapeError(f"dense: input {x.shape} does not match weight {weight.shape}")
    y = x @ weight
    return add_bias(y, bias) if bias is not None else y


def global_avg_pool(x: Tensor) -> Tensor:
    return x.mean(axes=(2, 3, 4))


# -- parameters --------------------------------------------------------------------

class ParamSet:
    """Ordered mapping ``layer name -> {"weights": Tensor, "bias": Tensor}``."""

    KINDS = ("weights", "bias")

    def __init__(self, layers: Mapping[str, Mapping[str, Tensor]] | None = None):
        self._layers: dict[str, dict[str, Tensor]] = {}
        for name, params in (layers or {}).items():
            self[name] = params

    def __getitem__(self, name: str) -> dict[str, Tensor]:
        return self._layers[name]

    def __setitem__(self, name: str, params: Mapping[str, Tensor]) -> None:
        unknown = set(params) - set(self.KINDS)
        if unknown:
            raise InvalidInputError(f"layer {name!r} has unknown parameter kinds {sorted(unknown)}")
        self._layers[name] = dict(params)

    def __contains__(self, name) -> bool:
        return name in self._layers

    def __iter__(self):
        return iter(self._layers)

    def __len__(self):
        return len(self._layers)

    def layers(self):
        return self._layers.items()

    def tensors(self) -> Iterator[tuple[str, Tensor]]:
        for layer, params in self._layers.items():
            for kind in self.KINDS:
                if kind in params:
                    yield f"{layer}/{kind}", params[kind]

    def num_params(self) -> int:
        return sum(t.size for _, t in self.tensors())

    def subset(self, keep) -> "ParamSet":
        return ParamSet({name: p for name, p in self._layers.items() if keep(name)})

    def set_requires_grad(self, flag: bool = True) -> None:
        for _, t in self.tensors():
            t.requires_grad = flag

    def zero_grad(self) -> None:
        for _, t in self.tensors():
            t.grad = None

    def to_bytes(self, extra: dict | None = None) -> bytes:
        flat, index, offset = [], {}, 0
        dtype = np.result_type(*[t.dtype for _, t in self.tensors()]) if len(self) else np.dtype(np.float32)
        for name, t in self.tensors():
            index[name] = {"offset": offset, "shape": list(t.shape)}
            flat.append(t.data.astype(dtype).ravel())
            offset += t.size
        payload = np.concatenate(flat) if flat else np.zeros(1, dtype=dtype)
        return container.encode(payload, {"kind": "paramset", "index": index, **(extra or {})})

    def save(self, path, extra: dict | None = None) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(self.to_bytes(extra))
        return path

    @classmethod
    def from_container(cls, payload: np.ndarray, meta: dict, path=None) -> "ParamSet":
        if meta.get("kind") != "paramset" or not isinstance(meta.get("index"), dict):
            raise FormatError("metadata", "not a parameter set", path)
        layers: dict[str, dict[str, Tensor]] = {}
        for name, entry in meta["index"].items():
            layer, _, kind = name.rpartition("/")
            shape = tuple(entry["shape"])
            start = entry["offset"]
            stop = start + int(np.prod(shape))
            if stop > payload.size:
                raise FormatError("index", f"{name} overruns payload", path)
            t = Tensor._wrap(payload[start:stop].reshape(shape).copy())
            layers.setdefault(layer, {})[kind] = t
        return cls(layers)

    @classmethod
    def load(cls, path) -> tuple["ParamSet", dict]:
        payload, meta = container.read(path)
        return cls.from_container(payload, meta, path), meta


def he_std(spec) -> float:
    """He-gaussian std ``sqrt(2 / fan_in)``.

    For a transposed conv, fan-in counts the inputs that reach one output:
    ``C_in * taps / prod(stride)`` (at least ``C_in``).
    """
    if isinstance(spec, DenseSpec):
        fan_in = spec.in_features
    elif isinstance(spec, TransposedSpec):
        fan_in = max(spec.in_channels, spec.in_channels * spec.taps / math.prod(spec.stride))
    else:
        fan_in = spec.in_channels * spec.taps
    return math.sqrt(2.0 / fan_in)


class TransposedSpec(ConvSpec):
    """A ConvSpec used by a transposed convolution (weights laid out [C_in, C_out, k])."""


def weight_shape(spec) -> tuple:
    if isinstance(spec, DenseSpec):
        return (spec.in_features, spec.out_features)
    if isinstance(spec, TransposedSpec):
        return (spec.in_channels, spec.out_channels) + spec.kernel
    return (spec.out_channels, spec.in_channels) + spec.kernel


def bias_size(spec) -> int:
    return spec.out_features if isinstance(spec, DenseSpec) else spec.out_channels


def init_params(model_spec: Mapping[str, ConvSpec | DenseSpec], seed: int, dtype=None) -> ParamSet:
    """He-gaussian weights and zero biases, one independent stream per layer name."""
    dtype = dtype or get_default_dtype()
    layers = {}
    for name, spec in model_spec.items():
        rng = np.random.default_rng(derive_seed(seed, "init", name))
        w = rng.normal(0.0, he_std(spec), size=weight_shape(spec))
        layers[name] = {
            "weights": Tensor(w, requires_grad=True, dtype=dtype),
            "bias": Tensor(np.zeros(bias_size(spec)), requires_grad=True, dtype=dtype),
        }
    return ParamSet(layers)
