"""Optimisation loop, evaluation, coordinate grid search, ablation and cross-domain runs."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import time
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import losses as L
from . import model as M
from . import tensor as T
from ._strict import from_mapping, to_mapping
from .data import DatasetManifest, VideoClip
from .errors import ConfigError, DataError, InvalidInputError
from .flow import TvL1Params, flows_for_clip
from .seeding import derive_seed, rng

log = logging.getLogger(__name__)

COARSE_GRID = (0.0, 1e-4, 1e-3, 0.1, 1.0, 10.0)
FINE_GRID = (0.0, 0.25, 0.5, 0.75, 1.0)
WEIGHT_NAMES = ("alpha", "beta", "lambda_flow", "lambda_im")
ABLATION_VARIANTS = ("Rev2Net w/o frame dec.", "Rev2Net w/o flow dec.", "Rev2Net w/o DDP", "Rev2Net (ours)")
XDOMAIN_VARIANTS = ("RGB classifier", "Flow classifier", "Rev2Net")
EVAL_BATCH = 16


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 8
    optimizer: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    precision: int = 32
    manifest: str = ""
    out_dir: str = "runs"
    flow_cache: str = ""
    train_split: str = "train"
    domain: str = ""
    eval_split: str = "test"
    grid_epochs: int = 1

    def __post_init__(self):
        self.validate()

    def validate(self, prefix: str = "train") -> None:
        if self.epochs < 1:
            raise ConfigError(f"{prefix}.epochs", f"must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"{prefix}.batch_size", f"must be >= 1, got {self.batch_size}")
        if self.optimizer != "adam":
            raise ConfigError(f"{prefix}.optimizer", f"only 'adam' is supported, got {self.optimizer!r}")
        if not self.lr > 0:
            raise ConfigError(f"{prefix}.lr", f"must be > 0, got {self.lr}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError(f"{prefix}.beta1", "Adam betas must lie in [0, 1)")
        if not self.adam_eps > 0:
            raise ConfigError(f"{prefix}.adam_eps", "must be > 0")
        if self.precision not in (32, 64):
            raise ConfigError(f"{prefix}.precision", f"must be 32 or 64, got {self.precision}")
        if self.grid_epochs < 0:
            raise ConfigError(f"{prefix}.grid_epochs", "must be >= 0")

    @property
    def dtype(self):
        return np.float64 if self.precision == 64 else np.float32

    def to_dict(self) -> dict:
        return to_mapping(self)

    @classmethod
    def from_dict(cls, data, prefix: str = "train") -> "TrainConfig":
        return from_mapping(cls, data, prefix)


# -- data ---------------------------------------------------------------------------

@dataclass
class TrainingData:
    """Arrays ready for batching.

    ``inputs`` feed the encoder (RGB ``[n, T, 3, H, W]`` or flow ``[n, T-1, 2, H, W]``);
    ``frames`` are the RGB clips used for the reversed-frame target.
    """
    inputs: np.ndarray
    labels: np.ndarray
    clip_ids: list
    frames: np.ndarray | None = None
    flow_targets: np.ndarray | None = None

    def __post_init__(self):
        n = len(self.clip_ids)
        if self.inputs.shape[0] != n or self.labels.shape != (n,):
            raise InvalidInputError("inputs, labels and clip ids must have matching lengths")

    def __len__(self):
        return len(self.clip_ids)

    @classmethod
    def from_clips(cls, clips: Sequence[VideoClip], modality: str = "rgb", flows=None,
                   flow_params: TvL1Params | None = None, cache_dir=None) -> "TrainingData":
        """``flows``: None (compute, cached if ``cache_dir``), ``False`` (no flow targets),
        or a mapping ``clip_id -> [T-1, 2, H, W]`` which must cover every clip."""
        if not clips:
            raise InvalidInputError("no clips given")
        if modality not in ("rgb", "flow"):
            raise ConfigError("modality", f"must be 'rgb' or 'flow', got {modality!r}")
        ids = [c.clip_id for c in clips]
        frames = np.stack([c.frames for c in clips])
        labels = np.array([c.label for c in clips], dtype=np.int64)
        stack = None
        if flows is None:
            stack = np.stack([flows_for_clip(c, flow_params, cache_dir).flows for c in clips])
        elif flows is not False:
            missing = [i for i in ids if i not in flows]
            if missing:
                raise DataError(f"no flow target for clip {missing[0]}")
            stack = np.stack([np.asarray(getattr(flows[i], "flows", flows[i]), dtype=np.float32) for i in ids])
        if modality == "flow":
            if stack is None:
                raise DataError(f"flow input requested but no flow for clip {ids[0]}")
            return cls(stack, labels, ids, frames, stack)
        return cls(frames, labels, ids, frames, stack)

    def subset(self, idx) -> "TrainingData":
        idx = np.asarray(idx)
        pick = lambda a: None if a is None else a[idx]
        return TrainingData(self.inputs[idx], self.labels[idx], [self.clip_ids[i] for i in idx],
                            pick(self.frames), pick(self.flow_targets))


# -- optimiser ----------------------------------------------------------------------

class Adam:
    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = dict(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.t = 0

    def step(self) -> None:
        self.t += 1
        c1 = 1 - self.beta1 ** self.t
        c2 = 1 - self.beta2 ** self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            self.m[k] = self.beta1 * self.m[k] + (1 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1 - self.beta2) * g * g
            step = self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            p.data = (p.data - step).astype(p.data.dtype)


# -- training -----------------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    losses: dict
    train_accuracy: float
    test_accuracy: float | None
    steps: int


@dataclass
class TrainReport:
    epochs: list
    wall_time: float
    checkpoint: str | None
    config: dict
    batch_digest: str
    final_total: float

    @property
    def final(self) -> EpochRecord:
        return self.epochs[-1]

    def to_dict(self) -> dict:
        return {"epochs": [vars(e) for e in self.epochs], "wall_time": self.wall_time,
                "checkpoint": self.checkpoint, "config": self.config,
                "batch_digest": self.batch_digest, "final_total": self.final_total}


def batch_orders(n: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    perm = rng(seed, "shuffle", epoch).permutation(n)
    return [perm[i : i + batch_size] for i in range(0, n, batch_size)]


def _needs_flow(config: M.Rev2NetConfig) -> bool:
    return config.decoders[0] and config.lambda_flow > 0


def train(model: M.Rev2NetModel, config: TrainConfig, data: TrainingData, test_data: TrainingData | None = None,
          out_dir=None, on_step: Callable | None = None) -> TrainReport:
    """Minimise the joint objective with Adam; returns per-epoch means and accuracies.

    When ``out_dir`` is given, per-step metrics go to ``metrics.jsonl``, the final
    parameters to ``checkpoint.rv2n`` (plus JSON sidecar) and the report to ``report.json``.
    """
    if len(data) == 0:
        raise InvalidInputError("empty training set")
    mcfg = model.config
    if _needs_flow(mcfg) and data.flow_targets is None:
        raise DataError(f"no flow target for clip {data.clip_ids[0]}")
    if mcfg.decoders[1] and data.frames is None:
        raise DataError(f"no frames for clip {data.clip_ids[0]}")
    out = Path(out_dir) if out_dir is not None else None
    metrics = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        metrics = open(out / "metrics.jsonl", "w")
    opt = Adam(model.params.tensors(), config.lr, config.beta1, config.beta2, config.adam_eps)
    digest = hashlib.blake2b(digest_size=16)
    epochs = []
    start = time.perf_counter()
    last_total = float("nan")
    try:
        for epoch in range(1, config.epochs + 1):
            sums = dict.fromkeys(L.COMPONENTS + ("total",), 0.0)
            orders = batch_orders(len(data), config.batch_size, config.seed, epoch)
            for step, idx in enumerate(orders):
                digest.update(idx.astype(np.int64).tobytes())
                model.params.zero_grad()
                with T.Tape():
                    outputs = M.forward_train(model, data.inputs[idx], derive_seed(config.seed, "noise", epoch, step))
                    frames = data.frames[idx] if data.frames is not None else None
                    flows = data.flow_targets[idx] if data.flow_targets is not None else None
                    br = L.total_loss(outputs, frames, flows, data.labels[idx], mcfg)
                    br.check_total()
                    T.backward(br.total_tensor)
                opt.step()
                row = br.to_dict()
                for k in sums:
                    sums[k] += row[k]
                last_total = br.total
                if metrics is not None:
                    metrics.write(json.dumps({"epoch": epoch, "step": step, **row}) + "\n")
                if on_step is not None:
                    on_step(epoch, step, br)
            means = {k: v / len(orders) for k, v in sums.items()}
            rec = EpochRecord(epoch, means, evaluate(model, data),
                              evaluate(model, test_data) if test_data is not None and len(test_data) else None,
                              len(orders))
            epochs.append(rec)
            log.info("epoch %d total %.4f train acc %.3f", epoch, means["total"], rec.train_accuracy)
    finally:
        if metrics is not None:
            metrics.close()
    ckpt = None
    if out is not None:
        ckpt = str(M.save_checkpoint(model, out / "checkpoint.rv2n",
                                     {"train_accuracy": epochs[-1].train_accuracy,
                                      "test_accuracy": epochs[-1].test_accuracy}))
    report = TrainReport(epochs, time.perf_counter() - start, ckpt,
                         {"train": config.to_dict(), "model": mcfg.to_dict()}, digest.hexdigest(), last_total)
    if out is not None:
        (out / "report.json").write_text(json.dumps(report.to_dict(), indent=2))
    return report


def predict(model: M.Rev2NetModel, data: TrainingData) -> np.ndarray:
    preds = []
    with T.no_grad():
        for i in range(0, len(data), EVAL_BATCH):
            logits = M.forward_infer(model, data.inputs[i : i + EVAL_BATCH])
            preds.append(np.argmax(logits.data, axis=1))
    return np.concatenate(preds)


def evaluate(model: M.Rev2NetModel, data: TrainingData | None) -> float:
    """Fraction of clips whose argmax logit equals the label (inference path only)."""
    if data is None or len(data) == 0:
        raise InvalidInputError("cannot evaluate on an empty split")
    return float(np.mean(predict(model, data) == data.labels))


def evaluate_manifest(model: M.Rev2NetModel, manifest: DatasetManifest, split: str = "test",
                      domain: str | None = None, flow_params=None, cache_dir=None) -> float:
    clips = manifest.load_clips(split, domain)
    if not clips:
        raise InvalidInputError(f"split {split!r} is empty")
    modality = "flow" if model.config.in_channels == 2 else "rgb"
    flows = None if modality == "flow" else False
    return evaluate(model, TrainingData.from_clips(clips, modality, flows, flow_params, cache_dir))


# -- grid search --------------------------------------------------------------------

@dataclass
class GridResult:
    best: dict
    table: list
    coarse_winners: dict
    meta: dict = field(default_factory=dict)


def _pick(cells: list[tuple[float, float]]) -> float:
    """Highest accuracy; ties go to the smaller weight."""
    return min(cells, key=lambda c: (-c[1], c[0]))[0]


def fine_grid(winner: float) -> tuple[float, ...]:
    """Fine points spanning [0, 2 * winner]; a zero winner is probed on [0, 1e-4]."""
    span = 2.0 * winner if winner > 0 else COARSE_GRID[1]
    return tuple(f * span for f in FINE_GRID)


def grid_search(model_config: M.Rev2NetConfig, train_config: TrainConfig, train_data: TrainingData | None = None,
                val_data: TrainingData | None = None, epochs_per_cell: int | None = None,
                evaluator: Callable[[dict], float] | None = None) -> GridResult:
    """Coordinate-wise coarse-then-fine sweep of the four loss weights.

    Stage 1 varies one weight over the coarse grid with the others at the config's
    values; stage 2 sweeps each weight over a fine grid around its stage-1 winner, the
    others held at their stage-1 winners. ``evaluator(weights) -> accuracy`` replaces
    the default train-then-validate cell.
    """
    budget = train_config.grid_epochs if epochs_per_cell is None else epochs_per_cell
    if budget < 1:
        raise InvalidInputError(f"grid search needs a budget of at least one epoch per cell, got {budget}")
    base = {k: getattr(model_config, k) for k in WEIGHT_NAMES}
    if evaluator is None:
        if train_data is None or val_data is None:
            raise InvalidInputError("grid search needs training and validation data")
        cell_cfg = replace(train_config, epochs=budget)

        def evaluator(weights):
            m = M.build(replace(model_config, **weights), train_config.seed, dtype=train_config.dtype)
            train(m, cell_cfg, train_data)
            return evaluate(m, val_data)

    table = []

    def run(stage, name, values, held):
        cells = []
        for v in values:
            weights = {**held, name: float(v)}
            acc = float(evaluator(dict(weights)))
            cells.append((float(v), acc))
            table.append({"stage": stage, "weight": name, "value": float(v), "accuracy": acc, **weights})
        return _pick(cells)

    coarse = {name: run("coarse", name, COARSE_GRID, base) for name in WEIGHT_NAMES}
    best = {name: run("fine", name, fine_grid(coarse[name]), coarse) for name in WEIGHT_NAMES}
    meta = {"search": "coordinate-wise", "epochs_per_cell": budget, "coarse_grid": list(COARSE_GRID),
            "fine_grid": list(FINE_GRID), "fine_span": "fine points scaled to [0, 2 * coarse winner]"}
    return GridResult(best, table, coarse, meta)


# -- ablation -----------------------------------------------------------------------

def ablation_configs(base: M.Rev2NetConfig) -> dict:
    return {
        "Rev2Net w/o frame dec.": replace(base, use_frame_decoder=False, lambda_im=0.0, ddp_mode="off"),
        "Rev2Net w/o flow dec.": replace(base, use_flow_decoder=False, lambda_flow=0.0, ddp_mode="off"),
        "Rev2Net w/o DDP": replace(base, alpha=0.0, beta=0.0, ddp_mode="off"),
        "Rev2Net (ours)": base,
    }


@dataclass
class AblationReport:
    rows: list
    directional_ok: bool

    def to_dict(self) -> dict:
        return {"rows": self.rows, "directional_ok": self.directional_ok}


def ablation_suite(model_config: M.Rev2NetConfig, train_config: TrainConfig, train_data: TrainingData,
                   test_data: TrainingData, out_dir=None) -> AblationReport:
    """Train the four variants from one seed over identical batches; report held-out accuracy."""
    rows = []
    for name, cfg in ablation_configs(model_config).items():
        m = M.build(cfg, train_config.seed, dtype=train_config.dtype)
        sub = None if out_dir is None else Path(out_dir) / _slug(name)
        rep = train(m, train_config, train_data, None, sub)
        rows.append({"variant": name, "accuracy": evaluate(m, test_data),
                     "train_accuracy": rep.final.train_accuracy, "params": m.num_params(),
                     "layers": list(m.params), "batch_digest": rep.batch_digest,
                     "checkpoint": rep.checkpoint})
    acc = {r["variant"]: r["accuracy"] for r in rows}
    ok = acc["Rev2Net (ours)"] >= acc["Rev2Net w/o DDP"]
    if not ok:
        warnings.warn(f"full model ({acc['Rev2Net (ours)']:.3f}) scored below the no-penalty variant "
                      f"({acc['Rev2Net w/o DDP']:.3f}) on held-out clips", RuntimeWarning, stacklevel=2)
    return AblationReport(rows, ok)


def _slug(name: str) -> str:
    return "".join(ch if ch.isalnum() else "-" for ch in name.lower()).strip("-").replace("--", "-")


# -- cross-domain -------------------------------------------------------------------

@dataclass
class XDomainReport:
    rows: list

    def accuracy(self, variant: str, direction: str) -> float:
        for r in self.rows:
            if r["variant"] == variant and r["direction"] == direction:
                return r["accuracy"]
        raise KeyError((variant, direction))

    def to_dict(self) -> dict:
        return {"rows": self.rows}


def plain_classifier(base: M.Rev2NetConfig, modality: str) -> M.Rev2NetConfig:
    cfg = replace(base, use_flow_decoder=False, use_frame_decoder=False, ddp_mode="off")
    if modality == "flow":
        cfg = replace(cfg, in_channels=2, frames=base.frames - 1, input_scale=1.0, input_offset=0.0)
    return cfg


def cross_domain(manifest: DatasetManifest, model_config: M.Rev2NetConfig, train_config: TrainConfig,
                 flow_params: TvL1Params | None = None, cache_dir=None, out_dir=None) -> XDomainReport:
    """Train on one domain's train split, score on the other's test split, both directions."""
    domains = manifest.domains
    if len(domains) < 2:
        raise InvalidInputError(f"cross-domain evaluation needs two domains, manifest has {domains}")
    src_dom, tgt_dom = domains[:2]
    rows = []
    for src, tgt in ((src_dom, tgt_dom), (tgt_dom, src_dom)):
        direction = f"{src}->{tgt}"
        tr = manifest.load_clips(train_config.train_split, src)
        te = manifest.load_clips(train_config.eval_split, tgt)
        if not tr or not te:
            raise InvalidInputError(f"direction {direction} has an empty split")
        variants = {
            "RGB classifier": (plain_classifier(model_config, "rgb"), "rgb"),
            "Flow classifier": (plain_classifier(model_config, "flow"), "flow"),
            "Rev2Net": (model_config, "rgb"),
        }
        for name, (cfg, modality) in variants.items():
            train_data = TrainingData.from_clips(tr, modality, None if (modality == "flow" or _needs_flow(cfg)) else False,
                                                 flow_params, cache_dir)
            test_data = TrainingData.from_clips(te, modality, None if modality == "flow" else False,
                                                flow_params, cache_dir)
            m = M.build(cfg, train_config.seed, dtype=train_config.dtype)
            sub = None if out_dir is None else Path(out_dir) / f"{src}-to-{tgt}" / _slug(name)
            rep = train(m, train_config, train_data, None, sub)
            rows.append({"variant": name, "input": modality.upper() if modality == "rgb" else "Flow",
                         "direction": direction, "accuracy": evaluate(m, test_data),
                         "source_accuracy": rep.final.train_accuracy})
    return XDomainReport(rows)


# -- report files -------------------------------------------------------------------

def write_reports(out_dir, name: str, payload: dict, rows: list) -> tuple[Path, Path]:
    """``<name>.json`` with the full payload and ``<name>.csv`` with one row per cell."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    jpath = out / f"{name}.json"
    jpath.write_text(json.dumps(payload, indent=2, default=_jsonable))
    cpath = out / f"{name}.csv"
    keys = []
    for r in rows:
        keys.extend(k for k in r if k not in keys and not isinstance(r[k], (list, dict)))
    with open(cpath, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys, extrasaction="ignore")
        w.writeheader()
        w.writerows(rows)
    return jpath, cpath


def _jsonable(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, Path):
        return str(obj)
    raise TypeError(f"cannot serialise {type(obj).__name__}")
