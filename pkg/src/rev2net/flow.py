"""Duality-based TV-L1 optical flow and an exhaustive block-matching oracle.

Flow fields are ``[2, H, W]`` with channel 0 the horizontal displacement ``u``
and channel 1 the vertical displacement ``v``, in pixels, such that
``frame_b(x + flow(x)) ~= frame_a(x)``.

The solver works on stacks of image pairs (``[P, H, W]``) so all frame pairs
of a clip are solved together; each pair's result is independent of the others.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import container
from .errors import ConfigError, FormatError, InvalidInputError, InvalidShapeError

# Published defaults are tuned for intensities in [0, 255]; inputs in [0, 1] are
# rescaled by this factor so lambda keeps its usual meaning.
INTENSITY_SCALE = 255.0
MIN_LEVEL_EXTENT = 8
GRAD_EPS = 1e-10


@dataclass(frozen=True)
class TvL1Params:
    lambda_data: float = 0.15
    theta: float = 0.3
    tau: float = 0.25
    n_warps: int = 5
    n_iters: int = 25
    n_levels: int | None = None  # None: coarsen until the short side reaches 8 px
    scale: float = 0.5

    def __post_init__(self):
        self.validate()

    def validate(self, prefix: str = "flow") -> None:
        if not self.lambda_data > 0:
            raise ConfigError(f"{prefix}.lambda_data", "must be > 0")
        if not self.theta > 0:
            raise ConfigError(f"{prefix}.theta", "must be > 0")
        if not 0 < self.tau <= 0.25:
            raise ConfigError(f"{prefix}.tau", "must be in (0, 0.25]")
        for name in ("n_warps", "n_iters"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{prefix}.{name}", "must be >= 1")
        if self.n_levels is not None and int(self.n_levels) < 1:
            raise ConfigError(f"{prefix}.n_levels", "must be >= 1")
        if not 0 < self.scale < 1:
            raise ConfigError(f"{prefix}.scale", "must be in (0, 1)")

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class FlowField:
    flows: np.ndarray  # [T-1, 2, H, W]
    clip_id: str = ""

    def __post_init__(self):
        if self.flows.ndim != 4 or self.flows.shape[1] != 2:
            raise InvalidShapeError(f"flow field must be [T-1, 2, H, W], got {self.flows.shape}")
        if not np.all(np.isfinite(self.flows)):
            raise InvalidInputError(f"flow field for {self.clip_id!r} has non-finite values")


# -- image helpers -------------------------------------------------------------

def _resize(img: np.ndarray, shape) -> np.ndarray:
    """Bilinear resize of the last two axes (pixel-centre aligned, border clamp)."""
    h, w = img.shape[-2:]
    nh, nw = shape
    ys = np.clip((np.arange(nh) + 0.5) * h / nh - 0.5, 0, h - 1)
    xs = np.clip((np.arange(nw) + 0.5) * w / nw - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    top = img[..., y0, :][..., x0] * (1 - fx) + img[..., y0, :][..., x1] * fx
    bot = img[..., y1, :][..., x0] * (1 - fx) + img[..., y1, :][..., x1] * fx
    return top * (1 - fy) + bot * fy


def _warp(img: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Sample ``img`` at ``(x + u, y + v)`` bilinearly, clamping to the border."""
    p, h, w = img.shape
    x = np.clip(np.arange(w)[None, None, :] + u, 0, w - 1)
    y = np.clip(np.arange(h)[None, :, None] + v, 0, h - 1)
    x0 = np.minimum(np.floor(x).astype(int), w - 2) if w > 1 else np.zeros_like(x, dtype=int)
    y0 = np.minimum(np.floor(y).astype(int), h - 2) if h > 1 else np.zeros_like(y, dtype=int)
    fx = x - x0
    fy = y - y0
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    pi = np.arange(p)[:, None, None]
    return (
        img[pi, y0, x0] * (1 - fx) * (1 - fy)
        + img[pi, y0, x1] * fx * (1 - fy)
        + img[pi, y1, x0] * (1 - fx) * fy
        + img[pi, y1, x1] * fx * fy
    )


def _centered_gradient(img: np.ndarray):
    gy, gx = np.gradient(img, axis=(1, 2))
    return gx, gy


def _forward_gradient(u: np.ndarray):
    ux = np.zeros_like(u)
    uy = np.zeros_like(u)
    ux[:, :, :-1] = u[:, :, 1:] - u[:, :, :-1]
    uy[:, :-1, :] = u[:, 1:, :] - u[:, :-1, :]
    return ux, uy


def _divergence(px: np.ndarray, py: np.ndarray) -> np.ndarray:
    """Negative adjoint of :func:`_forward_gradient`."""
    div = np.zeros_like(px)
    div[:, :, 0] = px[:, :, 0]
    div[:, :, 1:-1] += px[:, :, 1:-1] - px[:, :, :-2]
    div[:, :, -1] -= px[:, :, -2]
    div[:, 0, :] += py[:, 0, :]
    div[:, 1:-1, :] += py[:, 1:-1, :] - py[:, :-2, :]
    div[:, -1, :] -= py[:, -2, :]
    return div


def _pyramid_shapes(shape, params: TvL1Params) -> list[tuple[int, int]]:
    shapes = [tuple(shape)]
    while params.n_levels is None or len(shapes) < params.n_levels:
        h, w = shapes[-1]
        nh, nw = int(round(h * params.scale)), int(round(w * params.scale))
        if min(nh, nw) < MIN_LEVEL_EXTENT:
            break
        shapes.append((nh, nw))
    return shapes


def _solve_level(a, b, u, v, params: TvL1Params):
    lt = params.lambda_data * params.theta
    taut = params.tau / params.theta
    bx, by = _centered_gradient(b)
    pux = np.zeros_like(u)
    puy = np.zeros_like(u)
    pvx = np.zeros_like(u)
    pvy = np.zeros_like(u)
    for _ in range(params.n_warps):
        u0, v0 = u.copy(), v.copy()
        bw = _warp(b, u0, v0)
        gx = _warp(bx, u0, v0)
        gy = _warp(by, u0, v0)
        grad2 = gx * gx + gy * gy
        rho_c = bw - gx * u0 - gy * v0 - a
        for _ in range(params.n_iters):
            rho = rho_c + gx * u + gy * v
            low = rho < -lt * grad2
            high = rho > lt * grad2
            step = np.where(low, lt, np.where(high, -lt, -rho / np.maximum(grad2, GRAD_EPS)))
            step = np.where(~low & ~high & (grad2 <= GRAD_EPS), 0.0, step)
            vu = u + step * gx
            vv = v + step * gy
            u = vu + params.theta * _divergence(pux, puy)
            v = vv + params.theta * _divergence(pvx, pvy)
            ux, uy = _forward_gradient(u)
            vx, vy = _forward_gradient(v)
            nu = 1.0 + taut * np.sqrt(ux * ux + uy * uy)
            nv = 1.0 + taut * np.sqrt(vx * vx + vy * vy)
            pux = (pux + taut * ux) / nu
            puy = (puy + taut * uy) / nu
            pvx = (pvx + taut * vx) / nv
            pvy = (pvy + taut * vy) / nv
    return u, v


def _solve(a: np.ndarray, b: np.ndarray, params: TvL1Params) -> np.ndarray:
    """Coarse-to-fine TV-L1 on stacks ``a, b`` of shape [P, H, W]; returns [P, 2, H, W]."""
    a = a.astype(np.float64) * INTENSITY_SCALE
    b = b.astype(np.float64) * INTENSITY_SCALE
    shapes = _pyramid_shapes(a.shape[1:], params)
    sigma = 0.6 * np.sqrt(1.0 / params.scale**2 - 1.0)
    pyr_a, pyr_b = [a], [b]
    for shape in shapes[1:]:
        pyr_a.append(_resize(ndimage.gaussian_filter(pyr_a[-1], sigma, axes=(1, 2), mode="nearest"), shape))
        pyr_b.append(_resize(ndimage.gaussian_filter(pyr_b[-1], sigma, axes=(1, 2), mode="nearest"), shape))
    u = np.zeros((a.shape[0],) + shapes[-1])
    v = np.zeros_like(u)
    for level in range(len(shapes) - 1, -1, -1):
        if u.shape[1:] != shapes[level]:
            fy = shapes[level][0] / u.shape[1]
            fx = shapes[level][1] / u.shape[2]
            u = _resize(u, shapes[level]) * fx
            v = _resize(v, shapes[level]) * fy
        u, v = _solve_level(pyr_a[level], pyr_b[level], u, v, params)
    return np.stack([u, v], axis=1)


def _check_pair(frame_a, frame_b):
    a = np.asarray(frame_a, dtype=np.float64)
    b = np.asarray(frame_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim < 2:
        raise InvalidShapeError(f"frame shapes differ or are not images: {a.shape} vs {b.shape}")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise InvalidInputError("frames contain NaN or Inf")
    return a, b


def tvl1_flow(frame_a, frame_b, params: TvL1Params | None = None) -> np.ndarray:
    """Flow [2, H, W] from grayscale ``frame_a`` to ``frame_b`` (values in [0, 1]).

    Stacks of pairs ``[P, H, W]`` are accepted and give ``[P, 2, H, W]``.
    """
    params = params or TvL1Params()
    a, b = _check_pair(frame_a, frame_b)
    if a.ndim == 2:
        return _solve(a[None], b[None], params)[0]
    if a.ndim == 3:
        return _solve(a, b, params)
    raise InvalidShapeError(f"expected [H, W] or [P, H, W] frames, got {a.shape}")


def data_residual(frame_a, frame_b, flow: np.ndarray) -> float:
    """Mean absolute brightness-constancy residual ``|b(x + flow) - a(x)|``."""
    a, b = _check_pair(frame_a, frame_b)
    warped = _warp(b[None], flow[0][None], flow[1][None])[0]
    return float(np.mean(np.abs(warped - a)))


def block_match(frame_a, frame_b, radius: int = 3, patch: int = 5) -> np.ndarray:
    """Integer flow [2, H, W] minimising the patch SAD over displacements within ±radius.

    Out-of-range samples clamp to the border. Ties go to the smallest
    displacement norm, then to row-major (dy, dx) order.
    """
    a, b = _check_pair(frame_a, frame_b)
    if a.ndim != 2:
        raise InvalidShapeError(f"block_match expects [H, W] frames, got {a.shape}")
    if radius < 1:
        raise InvalidInputError("radius must be >= 1")
    if patch < 1 or patch % 2 == 0:
        raise InvalidInputError("patch must be a positive odd number")
    h, w = a.shape
    half = patch // 2
    pad = radius + half
    bp = np.pad(b, pad, mode="edge")
    ap = np.pad(a, half, mode="edge")
    candidates = sorted(
        ((dy, dx) for dy in range(-radius, radius + 1) for dx in range(-radius, radius + 1)),
        key=lambda d: (d[0] ** 2 + d[1] ** 2, d[0], d[1]),
    )
    best = np.full((h, w), np.inf)
    flow = np.zeros((2, h, w))
    for dy, dx in candidates:
        shifted = bp[radius + dy : radius + dy + h + 2 * half, radius + dx : radius + dx + w + 2 * half]
        diff = np.abs(shifted - ap)
        sad = ndimage.uniform_filter(diff, size=patch, mode="constant")[half : half + h, half : half + w] * patch * patch
        better = sad < best - 1e-9
        best = np.where(better, sad, best)
        flow[0][better] = dx
        flow[1][better] = dy
    return flow


def luminance(frames: np.ndarray) -> np.ndarray:
    """Channel mean of [T, C, H, W] frames."""
    return np.asarray(frames, dtype=np.float64).mean(axis=1)


def flows_for_clip(clip, params: TvL1Params | None = None, cache_dir=None) -> FlowField:
    """T-1 flow fields between consecutive frames of ``clip``, cached as ``<clip-id>.flow.bin``."""
    params = params or TvL1Params()
    frames = np.asarray(clip.frames)
    if frames.ndim != 4 or frames.shape[0] < 2:
        raise InvalidInputError(f"clip {clip.clip_id!r} needs at least 2 frames, got shape {frames.shape}")
    key = params.digest()
    path = Path(cache_dir) / f"{clip.clip_id}.flow.bin" if cache_dir is not None else None
    if path is not None and path.exists():
        try:
            flows, meta = container.read(path)
            if meta.get("params") == key and meta.get("clip_id") == clip.clip_id:
                return FlowField(flows, clip.clip_id)
        except FormatError:
            pass
    gray = luminance(frames)
    flows = tvl1_flow(gray[:-1], gray[1:], params).astype(np.float32)
    field = FlowField(flows, clip.clip_id)
    if path is not None:
        container.write(path, flows, {"clip_id": clip.clip_id, "params": key, "kind": "flow"})
    return field
