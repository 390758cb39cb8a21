"""Central finite-difference self-test for every layer op, loss term and a micro Rev2Net."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import losses as L
from . import model as M
from . import nn
from . import tensor as T
from .nn import ConvSpec, TransposedSpec
from .seeding import rng
from .tensor import Tensor

TOLERANCE = 1e-4
STEP = {64: 1e-6, 32: 1e-2}


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error <= self.tolerance)


def micro_config(**overrides) -> M.Rev2NetConfig:
    """Smallest geometry that still exercises every Rev2Net layer."""
    base = dict(frames=4, height=8, width=8, encoder_widths=(2, 2, 2, 2),
                encoder_pools=((1, 2, 2), (2, 2, 2), (1, 2, 2), (1, 1, 1)),
                latent_dim=2, decoder_width=2, frame_width=2)
    base.update(overrides)
    return M.Rev2NetConfig(**base)


def _probe(shape, g):
    """Random projection that turns a tensor output into a scalar with a generic gradient."""
    w = Tensor(g.standard_normal(shape))
    return lambda y: T.reduce_sum(T.mul(y, w))


def _leaf(g, shape, lo=None):
    data = g.standard_normal(shape) if lo is None else g.uniform(lo, lo + 1.5, shape)
    return Tensor(data, requires_grad=True)


def op_cases(seed: int = 0):
    """``(name, f, [tensors to perturb])`` for every differentiable building block."""
    g = rng(seed, "gradcheck", "ops")
    cases = []

    conv = ConvSpec(2, 3, kernel=(2, 3, 3), stride=(1, 2, 2), padding=(1, 1, 1))
    x, w, b = _leaf(g, (2, 2, 3, 5, 5)), _leaf(g, (3, 2, 2, 3, 3)), _leaf(g, (3,))
    p = _probe((2, 3) + conv.conv_out((3, 5, 5)), g)
    cases.append(("conv3d", lambda *_: p(nn.conv3d(x, conv, w, b)), [x, w, b]))

    tconv = TransposedSpec(3, 2, kernel=(2, 2, 2), stride=(1, 2, 2), padding=(1, 0, 0))
    xt, wt, bt = _leaf(g, (2, 3, 3, 2, 2)), _leaf(g, (3, 2, 2, 2, 2)), _leaf(g, (2,))
    pt = _probe((2, 2) + tconv.transposed_out((3, 2, 2)), g)
    cases.append(("conv_transpose3d", lambda *_: pt(nn.conv_transpose3d(xt, tconv, wt, bt)), [xt, wt, bt]))

    xp = _leaf(g, (1, 2, 4, 4, 4))
    pp = _probe((1, 2, 2, 2, 2), g)
    cases.append(("pool3d.max", lambda *_: pp(nn.pool3d(xp, "max", 2)), [xp]))
    cases.append(("pool3d.avg", lambda *_: pp(nn.pool3d(xp, "avg", 2)), [xp]))

    xd, wd, bd = _leaf(g, (3, 4)), _leaf(g, (4, 5)), _leaf(g, (5,))
    pd = _probe((3, 5), g)
    cases.append(("dense", lambda *_: pd(nn.dense(xd, wd, bd)), [xd, wd, bd]))
    xg = _leaf(g, (2, 3, 2, 3, 3))
    pg = _probe((2, 3), g)
    cases.append(("global_avg_pool", lambda *_: pg(nn.global_avg_pool(xg)), [xg]))

    a, pos = _leaf(g, (3, 4)), _leaf(g, (3, 4), lo=0.5)
    pe = _probe((3, 4), g)
    cases.append(("softplus", lambda *_: pe(T.softplus(a)), [a]))
    cases.append(("exp", lambda *_: pe(T.exp(a)), [a]))
    cases.append(("log", lambda *_: pe(T.log(pos)), [pos]))
    cases.append(("sqrt_eps", lambda *_: pe(T.sqrt_eps(pos)), [pos]))
    cases.append(("div", lambda *_: pe(T.div(a, pos)), [a, pos]))
    cases.append(("square", lambda *_: pe(T.square(a)), [a]))
    z, feat = _leaf(g, (2, 3)), _leaf(g, (2, 2, 2, 2, 2))
    pz = _probe((2, 5, 2, 2, 2), g)
    tiled = lambda: T.broadcast_to(T.reshape(z, (2, 3, 1, 1, 1)), (2, 3, 2, 2, 2))
    cases.append(("broadcast_concat", lambda *_: pz(T.concat([feat, tiled()], axis=1)), [z, feat]))

    logits = _leaf(g, (4, 6))
    labels = np.array([0, 3, 5, 1])
    cases.append(("cross_entropy", lambda *_: L.cross_entropy(logits, labels), [logits]))
    f1 = [_leaf(g, (2, 3, 2, 2)), _leaf(g, (2, 5))]
    f2 = [_leaf(g, (2, 3, 2, 2)), _leaf(g, (2, 5))]
    cases.append(("ddp_low", lambda *_: L.ddp_low(f1, f2), f1 + f2))
    mu1, mu2 = _leaf(g, (3, 4)), _leaf(g, (3, 4))
    s1, s2 = _leaf(g, (3, 4), lo=0.3), _leaf(g, (3, 4), lo=0.3)
    cases.append(("ddp_high", lambda *_: L.ddp_high(mu1, s1, mu2, s2), [mu1, s1, mu2, s2]))
    pred = _leaf(g, (2, 3, 4))
    target = Tensor(pred.data + 0.3 * g.standard_normal(pred.shape))
    cases.append(("frob_loss", lambda *_: L.frob_loss(pred, target), [pred]))
    return cases


def micro_problem(seed: int = 0, config: M.Rev2NetConfig | None = None):
    """A one-clip micro model with generic (non-zero) weights, its batch and targets."""
    cfg = config or micro_config()
    model = M.build(cfg, seed, dtype=T.get_default_dtype())
    g = rng(seed, "gradcheck", "micro")
    # replace the structured init so every path (latent injection included) carries gradient
    for _, p in model.params.tensors():
        p.data = (0.5 * g.standard_normal(p.shape)).astype(p.dtype)
    frames = g.uniform(0, 1, (1, cfg.frames, cfg.in_channels, cfg.height, cfg.width))
    flows = g.standard_normal((1, cfg.frames - 1, 2, cfg.height, cfg.width))
    labels = np.array([int(g.integers(cfg.num_classes))])

    def loss(*_):
        out = M.forward_train(model, frames, noise_seed=seed)
        return L.total_loss(out, frames, flows, labels, cfg).total_tensor

    return model, loss


def run_suite(precision: int = 64, seed: int = 0, include_model: bool = True) -> list[CheckResult]:
    """Check ops, loss terms and every micro-model parameter against central differences."""
    h = STEP.get(precision, 1e-6)
    tol = TOLERANCE if precision == 64 else 1e-2
    results = []
    with T.precision(precision):
        for name, f, leaves in op_cases(seed):
            err = max(T.finite_diff_check(f, x, h) for x in leaves)
            results.append(CheckResult(name, err, tol))
        if include_model:
            model, loss = micro_problem(seed)
            for name, p in model.params.tensors():
                model.params.zero_grad()
                results.append(CheckResult(f"model/{name}", T.finite_diff_check(loss, p, h), tol))
            model.params.zero_grad()
            worst = max(r.max_rel_error for r in results if r.name.startswith("model/"))
            results.append(CheckResult("total_loss", worst, tol))
    return results
