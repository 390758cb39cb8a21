"""Training objective: cross-entropy, the two decoder-discrepancy penalties, and the
flow / reversed-frame reconstruction norms, combined as

    total = ce + alpha * ddp_high + beta * ddp_low + lambda_flow * flow + lambda_im * recon
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import InvalidInputError, InvalidShapeError
from .tensor import Tensor

FROB_EPS = 1e-8
COMPONENTS = ("ce", "ddp_high", "ddp_low", "flow", "recon")


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.01
    beta: float = 0.1
    lambda_flow: float = 0.1
    lambda_im: float = 0.1

    @classmethod
    def from_config(cls, config) -> "LossWeights":
        return cls(config.alpha, config.beta, config.lambda_flow, config.lambda_im)

    def coefficients(self) -> dict:
        return {"ce": 1.0, "ddp_high": self.alpha, "ddp_low": self.beta,
                "flow": self.lambda_flow, "recon": self.lambda_im}


@dataclass
class LossBreakdown:
    ce: float
    ddp_high: float
    ddp_low: float
    flow: float
    recon: float
    total: float
    weights: LossWeights
    total_tensor: Tensor | None = None

    def components(self) -> dict:
        return {k: getattr(self, k) for k in COMPONENTS}

    def reconstructed_total(self) -> float:
        coef = self.weights.coefficients()
        return float(sum(coef[k] * getattr(self, k) for k in COMPONENTS))

    def check_total(self, tol: float = 1e-6) -> None:
        gap = abs(self.reconstructed_total() - self.total)
        if not gap <= tol:
            raise AssertionError(f"loss total {self.total} differs from its components by {gap}")

    def to_dict(self) -> dict:
        out = self.components()
        out["total"] = self.total
        out.update({f"w_{k}": v for k, v in self.weights.coefficients().items() if k != "ce"})
        return out


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Batch-mean negative log-likelihood via the log-sum-exp form; shape (1,)."""
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise InvalidShapeError(f"need logits [N, K] and labels [N], got {logits.shape} and {labels.shape}")
    n, k = logits.shape
    if not np.issubdtype(labels.dtype, np.integer) or labels.min(initial=0) < 0 or labels.max(initial=0) >= k:
        raise InvalidInputError(f"labels must be integers in [0, {k}), got {labels.tolist()}")
    z = logits.data
    m = z.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(z - m).sum(axis=1))
    rows = np.arange(n)
    out = np.array([np.mean(lse - z[rows, labels])], dtype=z.dtype)

    def bwd(g):
        p = np.exp(z - lse[:, None])
        p[rows, labels] -= 1.0
        return ((g[0] / n) * p).astype(z.dtype),

    return T.record_op("cross_entropy", (logits,), out, bwd)


def _frob(diff: Tensor) -> Tensor:
    return T.sqrt_eps(T.reduce_sum(T.square(diff)), FROB_EPS)


def ddp_low(features1, features2) -> Tensor:
    """Sum over compared layers of the (unsquared) Frobenius norm of the difference."""
    if len(features1) != len(features2) or not features1:
        raise InvalidShapeError("need the same nonempty set of compared layers from both decoders")
    total = None
    for a, b in zip(features1, features2):
        if a.shape != b.shape:
            raise InvalidShapeError(f"compared layer shapes differ: {a.shape} vs {b.shape}")
        term = _frob(T.sub(a, b))
        total = term if total is None else T.add(total, term)
    return total


def ddp_high(mu1: Tensor, sigma1: Tensor, mu2: Tensor, sigma2: Tensor) -> Tensor:
    """KL(N(mu1, sigma1) || N(mu2, sigma2)) for diagonal Gaussians, summed over dims, batch mean."""
    shapes = {mu1.shape, sigma1.shape, mu2.shape, sigma2.shape}
    if len(shapes) != 1 or mu1.ndim != 2:
        raise InvalidShapeError(f"need four [N, d] tensors, got shapes {sorted(shapes)}")
    for name, s in (("sigma1", sigma1), ("sigma2", sigma2)):
        if not np.all(s.data > 0):
            raise InvalidInputError(f"{name} must be strictly positive")
    log_ratio = T.sub(T.log(sigma2), T.log(sigma1))
    num = T.add(T.square(sigma1), T.square(T.sub(mu1, mu2)))
    quad = T.div(num, T.scale(T.square(sigma2), 2.0))
    per_dim = T.shift(T.add(log_ratio, quad), -0.5)
    n = mu1.shape[0]
    return T.scale(T.reduce_sum(per_dim), 1.0 / n)


def frob_loss(pred: Tensor, target) -> Tensor:
    """Frobenius norm of ``pred - target`` over the whole batch, divided by batch size."""
    if not isinstance(target, Tensor):
        target = Tensor(np.asarray(target), dtype=pred.dtype)
    if pred.shape != target.shape:
        raise InvalidShapeError(f"prediction {pred.shape} and target {target.shape} differ")
    return T.scale(_frob(T.sub(pred, target)), 1.0 / pred.shape[0])


def combine(terms: dict, weights: LossWeights) -> LossBreakdown:
    """Weighted sum of scalar terms; missing terms count as exactly 0.

    The sum is formed in float64 so the reported total matches its parts to 1e-6.
    """
    coef = weights.coefficients()
    total = None
    values = {}
    for k in COMPONENTS:
        t = terms.get(k)
        if t is None:
            values[k] = 0.0
            continue
        t64 = T.cast(t, np.float64)
        values[k] = float(t64.data[0])
        if coef[k] == 0.0 and k != "ce":
            continue
        part = t64 if k == "ce" else T.scale(t64, coef[k])
        total = part if total is None else T.add(total, part)
    if total is None:
        total = Tensor(np.zeros(1))
    return LossBreakdown(total=float(total.data[0]), weights=weights, total_tensor=total, **values)


def reversed_batch(frames: np.ndarray) -> np.ndarray:
    """Time-reverse a ``[N, T, C, H, W]`` batch."""
    return np.ascontiguousarray(frames[:, ::-1])


def total_loss(outputs, frames, flow_targets, labels, config) -> LossBreakdown:
    """Assemble every active term for one batch.

    ``frames`` are the clips in playback order ``[N, T, 3, H, W]``; the frame decoder is
    scored against their time-reversed copy. ``config`` supplies weights, ``ddp_mode``
    and which decoders exist.
    """
    weights = LossWeights.from_config(config)
    use_flow, use_frame = config.decoders
    low_on, high_on = config.ddp_active
    terms = {"ce": cross_entropy(outputs.logits, labels)}
    if use_flow and weights.lambda_flow > 0:
        if flow_targets is None:
            raise InvalidInputError("flow targets are required when the flow decoder is trained")
        terms["flow"] = frob_loss(outputs.flows, np.asarray(flow_targets))
    if use_frame and weights.lambda_im > 0:
        terms["recon"] = frob_loss(outputs.recon, reversed_batch(np.asarray(frames)))
    if low_on and weights.beta > 0:
        terms["ddp_low"] = ddp_low(outputs.flow_features, outputs.frame_features)
    if high_on and weights.alpha > 0:
        terms["ddp_high"] = ddp_high(outputs.mu1, outputs.sigma1, outputs.mu2, outputs.sigma2)
    return combine(terms, weights)
