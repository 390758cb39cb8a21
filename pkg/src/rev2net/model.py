"""Rev2Net: shared frame encoder, classifier, flow decoder, reversed-frame decoder.

Desk-scale layout (defaults, input ``[N, 3, 8, 32, 32]``)::

    encoder.block1..4   conv3x3x3 -> relu -> maxpool        -> GAP -> classifier
                                         |                          -> gaussian-head-1 (mu, sigma)
                        attach (block 2 output)                     -> gaussian-head-2 (mu, sigma)
                                         |
            [attach ; tile(z1)] -> flow-decoder.tconv1 -> relu -> tconv2           -> flow  [N, T-1, 2, H, W]
            [attach ; tile(z2)] -> frame-decoder.tconv1 -> relu -> tconv2 -> relu
                                   -> tconv3 -> relu -> background conv            -> frames [N, T, 3, H, W]

The first two transposed convs of both decoders share shapes, so their raw
outputs are the feature pairs compared by the low-level discrepancy penalty.
Decoders and Gaussian heads are training-only; inference touches the encoder
and classifier alone.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import nn
from . import tensor as T
from ._strict import from_mapping, to_mapping
from .errors import ConfigError, InvalidShapeError
from .nn import ConvSpec, DenseSpec, ParamSet, TransposedSpec
from .seeding import derive_seed
from .tensor import Tensor

DDP_MODES = ("off", "low", "high", "both")
SIGMA_FLOOR = 1e-4
TRAINING_ONLY_PREFIXES = ("flow-decoder", "frame-decoder", "gaussian-head")


@dataclass(frozen=True)
class Rev2NetConfig:
    encoder_widths: tuple = (8, 16, 32, 32)
    encoder_pools: tuple = ((1, 2, 2), (2, 2, 2), (2, 2, 2), (1, 2, 2))
    attach_block: int = 2
    latent_dim: int = 8
    num_classes: int = 6
    decoder_width: int = 8
    frame_width: int = 8
    alpha: float = 0.01
    beta: float = 0.1
    lambda_flow: float = 0.1
    lambda_im: float = 0.1
    ddp_mode: str = "both"
    use_flow_decoder: bool = True
    use_frame_decoder: bool = True
    inference_only: bool = False
    in_channels: int = 3
    input_scale: float = 2.0
    input_offset: float = -1.0
    frames: int = 8
    height: int = 32
    width: int = 32
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "encoder_widths", tuple(int(w) for w in self.encoder_widths))
        object.__setattr__(self, "encoder_pools", tuple(tuple(int(k) for k in p) for p in self.encoder_pools))
        self.validate()

    @classmethod
    def full_scale(cls, **overrides) -> "Rev2NetConfig":
        """Full-size geometry (32 frames at 224x224); not trainable on a desk CPU."""
        base = dict(frames=32, height=224, width=224, encoder_widths=(64, 192, 480, 832),
                    encoder_pools=((1, 4, 4), (2, 2, 2), (2, 2, 2), (2, 2, 2)), latent_dim=64,
                    decoder_width=64, frame_width=32)
        base.update(overrides)
        return cls(**base)

    def validate(self, prefix: str = "model") -> None:
        for name in ("alpha", "beta", "lambda_flow", "lambda_im"):
            v = getattr(self, name)
            if not (v >= 0 and np.isfinite(v)):
                raise ConfigError(f"{prefix}.{name}", f"must be a finite number >= 0, got {v}")
        if self.ddp_mode not in DDP_MODES:
            raise ConfigError(f"{prefix}.ddp_mode", f"must be one of {DDP_MODES}, got {self.ddp_mode!r}")
        if not self.encoder_widths or min(self.encoder_widths) < 1:
            raise ConfigError(f"{prefix}.encoder_widths", "need at least one block, widths >= 1")
        if len(self.encoder_pools) != len(self.encoder_widths) or any(len(p) != 3 or min(p) < 1 for p in self.encoder_pools):
            raise ConfigError(f"{prefix}.encoder_pools", "need one positive (t, h, w) pool per encoder block")
        if not 1 <= self.attach_block <= len(self.encoder_widths):
            raise ConfigError(f"{prefix}.attach_block", f"must be in 1..{len(self.encoder_widths)}")
        for name in ("latent_dim", "num_classes", "decoder_width", "frame_width", "in_channels"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{prefix}.{name}", "must be >= 1")
        if self.frames < 2 or self.height < 1 or self.width < 1:
            raise ConfigError(f"{prefix}.frames", "input geometry needs frames >= 2 and positive extents")

    @property
    def decoders(self) -> tuple[bool, bool]:
        if self.inference_only:
            return False, False
        return self.use_flow_decoder, self.use_frame_decoder

    @property
    def ddp_active(self) -> tuple[bool, bool]:
        """Whether the (low, high) penalty terms are in play; both need two decoders."""
        both = all(self.decoders)
        return (both and self.ddp_mode in ("low", "both"), both and self.ddp_mode in ("high", "both"))

    def to_dict(self) -> dict:
        return to_mapping(self)

    @classmethod
    def from_dict(cls, data, prefix: str = "model") -> "Rev2NetConfig":
        return from_mapping(cls, data, prefix)


def encoder_geometry(config: Rev2NetConfig) -> list[tuple[int, int, int]]:
    """Feature-volume extents after each encoder block."""
    size = (config.frames, config.height, config.width)
    out = []
    for i, pool in enumerate(config.encoder_pools):
        if any(s < k for s, k in zip(size, pool)):
            raise ConfigError("model.encoder_pools", f"block {i + 1} pool {pool} does not fit volume {size}")
        size = tuple(s // k for s, k in zip(size, pool))
        out.append(size)
    return out


def _split_factor(f: int) -> tuple[int, int]:
    first = f // 2 if f % 2 == 0 else f
    return first, f // first


def layer_specs(config: Rev2NetConfig) -> dict:
    """Ordered ``layer name -> spec`` for every parameterised layer the config asks for."""
    specs: dict = {}
    prev = config.in_channels
    for i, width in enumerate(config.encoder_widths):
        specs[f"encoder.block{i + 1}"] = ConvSpec(prev, width, kernel=3, padding=1)
        prev = width
    specs["classifier"] = DenseSpec(prev, config.num_classes)
    use_flow, use_frame = config.decoders
    d = config.latent_dim
    if use_flow:
        specs["gaussian-head-1.mu"] = DenseSpec(prev, d)
        specs["gaussian-head-1.sigma"] = DenseSpec(prev, d)
    if use_frame:
        specs["gaussian-head-2.mu"] = DenseSpec(prev, d)
        specs["gaussian-head-2.sigma"] = DenseSpec(prev, d)
    if not (use_flow or use_frame):
        return specs

    geo = encoder_geometry(config)
    ta, ha, wa = geo[config.attach_block - 1]
    target = (config.frames, config.height, config.width)
    if config.frames % ta or config.height % ha or config.width % wa:
        raise ConfigError("model.attach_block", f"attach volume {(ta, ha, wa)} does not divide input {target}")
    ft = config.frames // ta
    h1, h2 = _split_factor(config.height // ha)
    w1, w2 = _split_factor(config.width // wa)
    c_in = config.encoder_widths[config.attach_block - 1] + d
    up1 = dict(kernel=(ft, h1, w1), stride=(ft, h1, w1))
    up2 = dict(kernel=(2, h2, w2), stride=(1, h2, w2), padding=(1, 0, 0))
    for prefix, used in (("flow-decoder", use_flow), ("frame-decoder", use_frame)):
        if used:
            specs[f"{prefix}.tconv1"] = TransposedSpec(c_in, config.decoder_width, **up1)
            specs[f"{prefix}.tconv2"] = TransposedSpec(config.decoder_width, 2, **up2)
    if use_frame:
        specs["frame-decoder.tconv3"] = TransposedSpec(2, config.frame_width, kernel=(2, 3, 3), padding=(0, 1, 1))
        specs["frame-decoder.background"] = ConvSpec(config.frame_width, 3, kernel=3, padding=1)

    # shape contract: decoder outputs must equal their targets
    size = specs[f"{'flow' if use_flow else 'frame'}-decoder.tconv1"].transposed_out((ta, ha, wa))
    flow_size = TransposedSpec(config.decoder_width, 2, **up2).transposed_out(size)
    if flow_size != (config.frames - 1, config.height, config.width):
        raise ConfigError("model", f"flow decoder emits {flow_size}, target is {(config.frames - 1,) + target[1:]}")
    if use_frame:
        frame_size = specs["frame-decoder.background"].conv_out(specs["frame-decoder.tconv3"].transposed_out(flow_size))
        if frame_size != target:
            raise ConfigError("model", f"frame decoder emits {frame_size}, target is {target}")
    return specs


@dataclass
class Rev2NetModel:
    config: Rev2NetConfig
    params: ParamSet
    specs: dict = field(repr=False)

    def component(self, prefix: str) -> ParamSet:
        return self.params.subset(lambda name: name.split(".")[0] == prefix)

    def num_params(self) -> int:
        return self.params.num_params()

    def layer(self, name: str):
        p = self.params[name]
        return self.specs[name], p["weights"], p["bias"]


@dataclass
class TrainForwardOutput:
    logits: Tensor
    flow_features: list = field(default_factory=list)
    frame_features: list = field(default_factory=list)
    mu1: Tensor | None = None
    sigma1: Tensor | None = None
    mu2: Tensor | None = None
    sigma2: Tensor | None = None
    flows: Tensor | None = None
    recon: Tensor | None = None


def build(config: Rev2NetConfig, seed: int | None = None, dtype=None) -> Rev2NetModel:
    """Initialise a model; geometry errors surface here rather than at loss time."""
    specs = layer_specs(config)
    params = nn.init_params(specs, config.seed if seed is None else seed, dtype=dtype)
    _decoder_init(config, params)
    return Rev2NetModel(config, params, specs)


PAIRED_LAYERS = ("tconv1", "tconv2")


def _decoder_init(config: Rev2NetConfig, params: ParamSet) -> None:
    """Start both decoders' compared layers from the same weights, latent inputs switched off.

    With independent random decoders and live latent channels, the discrepancy
    penalty begins dominated by initialisation noise and its gradient swamps the
    classifier's in the shared encoder. Zero latent weights still receive gradient,
    so ``z`` is used as soon as the decoding tasks reward it.
    """
    use_flow, use_frame = config.decoders
    if use_flow and use_frame:
        for layer in PAIRED_LAYERS:
            src, dst = params[f"flow-decoder.{layer}"], params[f"frame-decoder.{layer}"]
            for kind in ("weights", "bias"):
                dst[kind].data = src[kind].data.copy()
    c_attach = config.encoder_widths[config.attach_block - 1]
    for prefix, used in (("flow-decoder", use_flow), ("frame-decoder", use_frame)):
        if used:
            params[f"{prefix}.tconv1"]["weights"].data[c_attach:] = 0


def as_batch(model: Rev2NetModel, clips) -> Tensor:
    """Clips (VideoClip list or ``[N, T, C, H, W]`` array) -> ``[N, C, T, H, W]`` tensor.

    Inputs are affinely rescaled (``[0, 1]`` RGB -> ``[-1, 1]`` by default).
    """
    if isinstance(clips, Tensor):
        arr = clips.data
    elif isinstance(clips, np.ndarray):
        arr = clips
    else:
        arr = np.stack([c.frames for c in clips])
    cfg = model.config
    expected = (cfg.frames, cfg.in_channels, cfg.height, cfg.width)
    if arr.ndim != 5 or arr.shape[1:] != expected:
        raise InvalidShapeError(f"batch must be [N, {', '.join(map(str, expected))}], got {arr.shape}")
    dtype = model.params["classifier"]["weights"].dtype
    x = arr.transpose(0, 2, 1, 3, 4).astype(dtype) * dtype.type(cfg.input_scale) + dtype.type(cfg.input_offset)
    return Tensor(x, dtype=dtype)


def _encode(model: Rev2NetModel, x: Tensor):
    h, attach = x, None
    for i, pool in enumerate(model.config.encoder_pools):
        spec, w, b = model.layer(f"encoder.block{i + 1}")
        h = nn.pool3d(T.relu(nn.conv3d(h, spec, w, b)), "max", pool)
        if i + 1 == model.config.attach_block:
            attach = h
    return attach, nn.global_avg_pool(h)


def _dense(model, name, x):
    _, w, b = model.layer(name)
    return nn.dense(x, w, b)


def _gaussian_head(model, idx: int, feat: Tensor):
    mu = _dense(model, f"gaussian-head-{idx}.mu", feat)
    sigma = T.shift(T.softplus(_dense(model, f"gaussian-head-{idx}.sigma", feat)), SIGMA_FLOOR)
    return mu, sigma


def _inject(attach: Tensor, z: Tensor) -> Tensor:
    n, d = z.shape
    tiled = T.broadcast_to(T.reshape(z, (n, d, 1, 1, 1)), (n, d) + attach.shape[2:])
    return T.concat([attach, tiled], axis=1)


def _upsample_pair(model, prefix: str, inp: Tensor):
    spec1, w1, b1 = model.layer(f"{prefix}.tconv1")
    f1 = nn.conv_transpose3d(inp, spec1, w1, b1)
    spec2, w2, b2 = model.layer(f"{prefix}.tconv2")
    f2 = nn.conv_transpose3d(T.relu(f1), spec2, w2, b2)
    return f1, f2


def forward_train(model: Rev2NetModel, clips, noise_seed: int = 0, zero_sigma: bool = False) -> TrainForwardOutput:
    """Training pass: logits, both decoders, both Gaussian heads.

    ``zero_sigma`` is a test hook that samples ``z = mu`` exactly.
    """
    if model.config.inference_only:
        raise InvalidShapeError("model was exported for inference; it has no decoders")
    x = as_batch(model, clips)
    attach, feat = _encode(model, x)
    out = TrainForwardOutput(logits=_dense(model, "classifier", feat))
    use_flow, use_frame = model.config.decoders
    n = x.shape[0]
    d = model.config.latent_dim

    def sample(idx, mu, sigma):
        if zero_sigma:
            return mu
        eps = np.random.default_rng(derive_seed(noise_seed, "eps", idx)).standard_normal((n, d))
        return T.add(mu, T.mul(sigma, Tensor(eps, dtype=mu.dtype)))

    if use_flow:
        out.mu1, out.sigma1 = _gaussian_head(model, 1, feat)
        f1, f2 = _upsample_pair(model, "flow-decoder", _inject(attach, sample(1, out.mu1, out.sigma1)))
        out.flow_features = [f1, f2]
        out.flows = T.transpose(f2, (0, 2, 1, 3, 4))
    if use_frame:
        out.mu2, out.sigma2 = _gaussian_head(model, 2, feat)
        g1, g2 = _upsample_pair(model, "frame-decoder", _inject(attach, sample(2, out.mu2, out.sigma2)))
        out.frame_features = [g1, g2]
        spec3, w3, b3 = model.layer("frame-decoder.tconv3")
        g3 = T.relu(nn.conv_transpose3d(T.relu(g2), spec3, w3, b3))
        spec4, w4, b4 = model.layer("frame-decoder.background")
        out.recon = T.transpose(nn.conv3d(g3, spec4, w4, b4), (0, 2, 1, 3, 4))
    return out


def forward_infer(model: Rev2NetModel, clips) -> Tensor:
    """Logits from encoder + classifier only; no sampling, no decoder parameters."""
    x = as_batch(model, clips)
    _, feat = _encode(model, x)
    return _dense(model, "classifier", feat)


# -- checkpoints -------------------------------------------------------------------

def _sidecar(path: Path) -> Path:
    return path.with_name(path.name + ".json")


def save_checkpoint(model: Rev2NetModel, path, extra: dict | None = None) -> Path:
    """ParamSet container at ``path`` plus the JSON config sidecar ``<path>.json``."""
    path = Path(path)
    model.params.save(path, {"config": model.config.to_dict(), **(extra or {})})
    _sidecar(path).write_text(json.dumps({"config": model.config.to_dict(), **(extra or {})}, indent=2, sort_keys=True))
    return path


def load_checkpoint(path) -> Rev2NetModel:
    path = Path(path)
    params, meta = ParamSet.load(path)
    side = _sidecar(path)
    cfg_data = json.loads(side.read_text())["config"] if side.exists() else meta.get("config")
    config = Rev2NetConfig.from_dict(cfg_data)
    specs = layer_specs(config)
    if set(specs) != set(params):
        raise ConfigError("checkpoint", f"layers {sorted(set(params) ^ set(specs))} do not match the config")
    params.set_requires_grad(True)
    return Rev2NetModel(config, params, specs)


def export_inference(model: Rev2NetModel, path) -> Path:
    """Write encoder + classifier only; decoders and Gaussian heads are dropped."""
    config = replace(model.config, inference_only=True)
    keep = model.params.subset(lambda name: not name.startswith(TRAINING_ONLY_PREFIXES))
    return save_checkpoint(Rev2NetModel(config, keep, layer_specs(config)), path)
