"""The three stager architectures, assembled from neural layers.

* raw-PPG stager: residual conv encoder over the night signal (1024
  samples/epoch down to a handful of positions), per-epoch dense embedding,
  dilated temporal convolutions over the epoch axis, 1x1 head.
* its domain-generalizing variant: a statistics-perturbation (DSU) layer
  inserted after the dilated loop, followed by fresh BatchNorm and Dropout.
* pulse-rate stager: time-distributed residual conv blocks over each
  epoch's 60 IPR samples plus a shared dense head.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import neural
from .neural import RunContext, Tensor, no_grad
from .neural import ops as _ops
from .neural.tensor import relu as _relu
from .dsp import EpochTensor
from .staging import Hypnogram


class ConfigError(ValueError):
    pass


class ModeError(RuntimeError):
    pass


@dataclass
class RawPpgConfig:
    encoder_channels: tuple[int, ...] = (16, 32, 64, 128)
    encoder_kernel: int = 3
    pool_stride: int = 4
    embed_dim: int = 128
    context_kernel: int = 7
    context_dilations: tuple[int, ...] = (1, 2, 4, 8, 16, 32)
    dropout_p: float = 0.2
    dsu_p: float | None = None
    n_classes: int = 4
    samples_per_epoch: int = 1024

    @property
    def positions_per_epoch(self) -> int:
        reduction = self.pool_stride ** len(self.encoder_channels)
        if self.samples_per_epoch % reduction:
            raise ConfigError(
                f"{self.samples_per_epoch} samples/epoch not divisible by the "
                f"encoder reduction {reduction}"
            )
        positions = self.samples_per_epoch // reduction
        if positions < 1:
            raise ConfigError("encoder reduces an epoch to nothing")
        return positions


@dataclass
class IprConfig:
    channels: tuple[int, ...] = (8, 16, 32)
    kernel: int = 3
    pool_stride: int = 2
    hidden: int = 64
    n_classes: int = 4
    samples_per_epoch: int = 60

    @property
    def positions_per_epoch(self) -> int:
        n = self.samples_per_epoch
        for _ in self.channels:
            n //= self.pool_stride
        if n < 1:
            raise ConfigError("pooling eats the whole epoch")
        return n


class _ResidualConvBlock:
    """Conv-BN-ReLU-Conv-BN plus a (projected) skip, then max pooling."""

    def __init__(self, in_ch, out_ch, kernel, pool, *, rng):
        self.conv1 = neural.Conv1D(in_ch, out_ch, kernel, rng=rng)
        self.bn1 = neural.BatchNorm(out_ch)
        self.conv2 = neural.Conv1D(out_ch, out_ch, kernel, rng=rng)
        self.bn2 = neural.BatchNorm(out_ch)
        self.skip = neural.Conv1D(in_ch, out_ch, 1, rng=rng) if in_ch != out_ch else None
        self.pool = neural.MaxPool(pool)

    def layer_items(self):
        items = [("conv1", self.conv1), ("bn1", self.bn1), ("conv2", self.conv2), ("bn2", self.bn2)]
        if self.skip is not None:
            items.append(("skip", self.skip))
        return items

    def forward(self, x, ctx):
        h = self.bn1(self.conv1(x, ctx), ctx)
        h = _relu(h)
        h = self.bn2(self.conv2(h, ctx), ctx)
        s = self.skip(x, ctx) if self.skip is not None else x
        return self.pool(h + s, ctx)


class SleepStager:
    """Common chassis: named layers, mode flag, per-model RNG, weight IO."""

    def __init__(self, config, seed: int):
        self.config = config
        self.training = False
        self.rng = np.random.default_rng(np.random.SeedSequence(seed))
        self._layers: dict[str, neural.Layer] = {}

    def _register(self, name: str, layer):
        if hasattr(layer, "layer_items"):
            for sub, l in layer.layer_items():
                self._layers[f"{name}.{sub}"] = l
        else:
            self._layers[name] = layer
        return layer

    def train(self):
        self.training = True
        return self

    def eval(self):
        self.training = False
        return self

    def context(self) -> RunContext:
        return RunContext(self.training, self.rng)

    def named_params(self) -> dict[str, Tensor]:
        out = {}
        for lname, layer in self._layers.items():
            for pname, p in layer.param_items():
                out[f"{lname}.{pname}"] = p
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_params().values())

    def named_buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for lname, layer in self._layers.items():
            for bname, b in layer.buffer_items():
                out[f"{lname}.{bname}"] = b
        return out

    @property
    def n_params(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def describe(self) -> dict:
        return {
            "kind": self.kind,
            "n_params": self.n_params,
            "layers": list(self._layers),
        }

    def load_state(self, params: dict[str, np.ndarray], buffers: dict[str, np.ndarray]):
        own = self.named_params()
        if set(own) != set(params):
            missing = set(own) ^ set(params)
            raise ConfigError(f"checkpoint does not match model, differing keys: {sorted(missing)}")
        for name, tensor in own.items():
            if tensor.data.shape != params[name].shape:
                raise ConfigError(f"{name}: shape {params[name].shape} != {tensor.data.shape}")
            tensor.data = np.array(params[name], dtype=np.float64)
        for lname, layer in self._layers.items():
            for bname, _ in layer.buffer_items():
                key = f"{lname}.{bname}"
                if key in buffers:
                    layer.load_buffer(bname, buffers[key])

    def save(self, path, moments=None) -> Path:
        params = {k: v.data for k, v in self.named_params().items()}
        return neural.save_checkpoint(path, params, self.named_buffers(), moments)

    def forward(self, x) -> Tensor:
        raise NotImplementedError


class RawPpgStager(SleepStager):
    kind = "raw"

    def __init__(self, config: RawPpgConfig, seed: int = 0):
        super().__init__(config, seed)
        cfg = config
        positions = cfg.positions_per_epoch
        self.blocks = []
        in_ch = 1
        for i, out_ch in enumerate(cfg.encoder_channels):
            block = _ResidualConvBlock(in_ch, out_ch, cfg.encoder_kernel, cfg.pool_stride, rng=self.rng)
            self._register(f"enc{i}", block)
            self.blocks.append(block)
            in_ch = out_ch
        self.embed = self._register(
            "embed", neural.Dense(positions * in_ch, cfg.embed_dim, rng=self.rng)
        )
        self.context = []
        for i, d in enumerate(cfg.context_dilations):
            conv = neural.Conv1D(cfg.embed_dim, cfg.embed_dim, cfg.context_kernel, dilation=d, rng=self.rng)
            self._register(f"ctx{i}", conv)
            self.context.append(conv)
        if cfg.dsu_p is not None:
            self.dsu = self._register("dsu", neural.Dsu(cfg.dsu_p))
            self.ctx_bn = self._register("ctx_bn", neural.BatchNorm(cfg.embed_dim))
            self.ctx_dropout = self._register("ctx_dropout", neural.Dropout(cfg.dropout_p))
        else:
            self.dsu = None
        self.head = self._register("head", neural.Conv1D(cfg.embed_dim, cfg.n_classes, 1, rng=self.rng))

    def forward(self, x) -> Tensor:
        cfg = self.config
        if not isinstance(x, Tensor):
            x = Tensor(x)
        if x.ndim != 3 or x.shape[1] != 1 or x.shape[2] % cfg.samples_per_epoch:
            raise neural.ShapeMismatch(
                f"expected [B,1,{cfg.samples_per_epoch}*T], got {x.shape}"
            )
        ctx = RunContext(self.training, self.rng)
        B = x.shape[0]
        n_epochs = x.shape[2] // cfg.samples_per_epoch
        h = x
        for block in self.blocks:
            h = block.forward(h, ctx)
        positions = cfg.positions_per_epoch
        ch = cfg.encoder_channels[-1]
        # [B, C, P*T] -> per-epoch feature rows [B*T, P*C]
        h = h.transpose(0, 2, 1).reshape(B, n_epochs, positions * ch).reshape(B * n_epochs, positions * ch)
        e = self.embed(h, ctx)
        e = e.reshape(B, n_epochs, cfg.embed_dim).transpose(0, 2, 1)
        for conv in self.context:
            e = e + _relu(conv(e, ctx))
        if self.dsu is not None:
            e = self.dsu(e, ctx)
            e = self.ctx_bn(e, ctx)
            e = self.ctx_dropout(e, ctx)
        return self.head(e, ctx)


class IprStager(SleepStager):
    kind = "ipr"

    def __init__(self, config: IprConfig, seed: int = 0):
        super().__init__(config, seed)
        cfg = config
        cfg.positions_per_epoch  # validate
        self.blocks = []
        in_ch = 1
        for i, out_ch in enumerate(cfg.channels):
            block = _ResidualConvBlock(in_ch, out_ch, cfg.kernel, cfg.pool_stride, rng=self.rng)
            self._register(f"enc{i}", block)
            self.blocks.append(block)
            in_ch = out_ch
        feat = cfg.positions_per_epoch * in_ch
        self.fc1 = self._register("fc1", neural.Dense(feat, cfg.hidden, rng=self.rng))
        self.fc2 = self._register("fc2", neural.Dense(cfg.hidden, cfg.n_classes, rng=self.rng))

    def forward(self, x) -> Tensor:
        cfg = self.config
        if not isinstance(x, Tensor):
            x = Tensor(x)
        if x.ndim != 3 or x.shape[1] != 1 or x.shape[2] % cfg.samples_per_epoch:
            raise neural.ShapeMismatch(
                f"expected [B,1,{cfg.samples_per_epoch}*T], got {x.shape}"
            )
        ctx = RunContext(self.training, self.rng)
        B = x.shape[0]
        n_epochs = x.shape[2] // cfg.samples_per_epoch
        # time-distributed: fold epochs into the batch so weights are shared
        h = x.reshape(B * n_epochs, 1, cfg.samples_per_epoch)
        for block in self.blocks:
            h = block.forward(h, ctx)
        h = h.reshape(B * n_epochs, cfg.positions_per_epoch * cfg.channels[-1])
        h = _relu(self.fc1(h, ctx))
        h = self.fc2(h, ctx)
        return h.reshape(B, n_epochs, cfg.n_classes).transpose(0, 2, 1)


PRESETS = {
    "raw-mini": lambda: RawPpgConfig(),
    "raw-mini-dsu": lambda: RawPpgConfig(dsu_p=0.5),
    "raw-full": lambda: RawPpgConfig(encoder_channels=(16, 32, 64, 128, 256)),
    "raw-full-dsu": lambda: RawPpgConfig(encoder_channels=(16, 32, 64, 128, 256), dsu_p=0.5),
    "ipr-mini": lambda: IprConfig(),
}


def preset_config(name: str):
    try:
        return PRESETS[name]()
    except KeyError:
        raise ConfigError(f"unknown model preset {name!r}, have {sorted(PRESETS)}") from None


def build(config, seed: int = 0) -> SleepStager:
    """Instantiate a stager from its config (or a preset name)."""
    if isinstance(config, str):
        config = preset_config(config)
    if isinstance(config, RawPpgConfig):
        return RawPpgStager(config, seed)
    if isinstance(config, IprConfig):
        return IprStager(config, seed)
    raise ConfigError(f"unknown config type {type(config).__name__}")


def config_to_dict(config) -> dict:
    kind = "raw" if isinstance(config, RawPpgConfig) else "ipr"
    return {"kind": kind, **asdict(config)}


def config_from_dict(d: dict):
    d = dict(d)
    kind = d.pop("kind")
    cls = {"raw": RawPpgConfig, "ipr": IprConfig}[kind]
    for key in ("encoder_channels", "context_dilations", "channels"):
        if key in d and d[key] is not None:
            d[key] = tuple(d[key])
    return cls(**d)


def save_model(path, model: SleepStager, moments=None) -> Path:
    path = Path(path)
    model.save(path, moments)
    path.with_suffix(path.suffix + ".json").write_text(
        json.dumps(config_to_dict(model.config), indent=2, sort_keys=True) + "\n"
    )
    return path


def load_model(path) -> SleepStager:
    path = Path(path)
    config = config_from_dict(json.loads(path.with_suffix(path.suffix + ".json").read_text()))
    model = build(config, seed=0)
    params, buffers, _ = neural.load_checkpoint(path)
    model.load_state(params, buffers)
    return model


def predict_stages(model: SleepStager, tensor: EpochTensor) -> tuple[Hypnogram, np.ndarray]:
    """Per-epoch class probabilities and the argmax hypnogram (eval only).

    Ties break to the lowest class index. Invalid (padded/unscored) epochs
    still get a prediction but stay masked out in the returned hypnogram.
    """
    if model.training:
        raise ModeError("predict_stages requires eval mode")
    if tensor.samples_per_epoch != model.config.samples_per_epoch:
        raise ConfigError(
            f"tensor rows hold {tensor.samples_per_epoch} samples, model wants "
            f"{model.config.samples_per_epoch}"
        )
    with no_grad():
        logits = model.forward(tensor.data.reshape(1, 1, -1))
        probs = _ops.softmax(logits, axis=1).data[0].T  # [T, K]
    stages = np.argmax(probs, axis=1)
    hyp = Hypnogram(stages, tensor.valid_mask.copy(), space="four")
    return hyp, probs
