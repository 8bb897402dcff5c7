"""Layers and the Y-shaped two-encoder network.

Both encoders are built from one :class:`EncoderConfig`, so they share every
parameter shape. Each conv stage is ``conv -> norm -> relu``; the encoder ends
with global average pooling and a dense map to the embedding.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Literal, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor

NormKind = Literal["batch", "instance", "none"]
Branch = Literal["source", "target"]
Mode = Literal["train", "eval"]

DEFAULT_STAGES = ((3, 16, 2), (3, 32, 2), (3, 64, 1))


@dataclass(frozen=True)
class EncoderConfig:
    in_channels: int = 1
    image_size: int = 16
    stages: tuple = DEFAULT_STAGES  # (kernel, out_channels, stride) per stage
    norm: NormKind = "instance"
    embed_dim: int = 64

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(tuple(int(v) for v in s) for s in self.stages))
        if self.norm not in ("batch", "instance", "none"):
            raise ValueError(f"unknown normalization kind {self.norm!r}")
        if self.embed_dim < 2:
            raise ValueError("embedding dimension must be >= 2")
        if self.in_channels < 1 or not self.stages:
            raise ValueError("need at least one input channel and one stage")
        for i, size in enumerate(self.spatial_sizes()):
            if size < 1:
                raise ValueError(f"stage {i} reduces the spatial size below 1")
            if self.norm == "instance" and size * size < 2:
                raise ValueError(f"stage {i} output is 1x1; instance norm needs >= 2 spatial positions")

    def spatial_sizes(self) -> list[int]:
        sizes, h = [], self.image_size
        for k, _, s in self.stages:
            h = (h + 2 * (k // 2) - k) // s + 1
            sizes.append(h)
        return sizes

    @property
    def input_shape(self) -> tuple:
        return (self.in_channels, self.image_size, self.image_size)

    def stages_text(self) -> str:
        return ",".join(f"{k}x{c}s{s}" for k, c, s in self.stages)

    @staticmethod
    def parse_stages(text: str) -> tuple:
        out = []
        for part in text.split(","):
            k, rest = part.strip().split("x")
            c, s = rest.split("s")
            out.append((int(k), int(c), int(s)))
        return tuple(out)


# ---------------------------------------------------------------------------
# normalization


@dataclass
class BatchNormState:
    scale: Parameter
    shift: Parameter
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5
    mode: Mode = "train"

    def __post_init__(self):
        if self.eps <= 0:
            raise ValueError("batch norm epsilon must be positive")


@dataclass
class InstanceNormParams:
    scale: Parameter
    shift: Parameter
    eps: float = 1e-5

    def __post_init__(self):
        if self.eps <= 0:
            raise ValueError("instance norm epsilon must be positive")


def _affine(xhat: Tensor, scale: Tensor, shift: Tensor) -> Tensor:
    c = scale.shape[0]
    return xhat * scale.reshape(1, c, 1, 1) + shift.reshape(1, c, 1, 1)


def batch_norm_forward(x: Tensor, state: BatchNormState) -> Tensor:
    if x.ndim != 4:
        raise ValueError(f"batch norm expects [N,C,H,W], got {x.shape}")
    c = x.shape[1]
    if state.mode == "train":
        if x.shape[0] < 2:
            raise ValueError("batch norm in train mode needs N >= 2")
        mu = x.mean(axis=(0, 2, 3), keepdims=True)
        xc = x - mu
        var = ad.square(xc).mean(axis=(0, 2, 3), keepdims=True)
        xhat = xc / ad.sqrt(var + state.eps)
        m = state.momentum
        state.running_mean = (1 - m) * state.running_mean + m * mu.data.reshape(c)
        state.running_var = (1 - m) * state.running_var + m * var.data.reshape(c)
    else:
        rm = Tensor(state.running_mean.reshape(1, c, 1, 1), dtype=x.dtype)
        rv = Tensor(state.running_var.reshape(1, c, 1, 1) + state.eps, dtype=x.dtype)
        xhat = (x - rm) / ad.sqrt(rv)
    return ad.no_nonfinite(_affine(xhat, state.scale, state.shift), "batch norm")


def instance_norm_forward(x: Tensor, params: InstanceNormParams) -> Tensor:
    if x.ndim != 4:
        raise ValueError(f"instance norm expects [N,C,H,W], got {x.shape}")
    if x.shape[2] * x.shape[3] < 2:
        raise ValueError("instance norm needs H*W >= 2 for spatial statistics")
    mu = x.mean(axis=(2, 3), keepdims=True)
    xc = x - mu
    var = ad.square(xc).mean(axis=(2, 3), keepdims=True)
    xhat = xc / ad.sqrt(var + params.eps)
    return ad.no_nonfinite(_affine(xhat, params.scale, params.shift), "instance norm")


# ---------------------------------------------------------------------------
# layers


class Conv2d:
    def __init__(self, weight: Parameter, bias: Optional[Parameter], stride: int, padding: int):
        self.weight = weight
        self.bias = bias
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        out = ad.conv2d(x, self.weight, stride=self.stride, padding=self.padding)
        if self.bias is not None:
            out = out + self.bias.reshape(1, -1, 1, 1)
        return out


class Dense:
    def __init__(self, weight: Parameter, bias: Parameter):
        self.weight = weight  # [in, out]
        self.bias = bias

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 2 or x.shape[1] != self.weight.shape[0]:
            raise ValueError(f"dense layer expects [N,{self.weight.shape[0]}], got {x.shape}")
        return x @ self.weight + self.bias


class Encoder:
    """conv/norm/relu stages, global average pool, dense projection."""

    def __init__(self, config: EncoderConfig, convs: list[Conv2d], norms: list, fc: Dense):
        self.config = config
        self.convs = convs
        self.norms = norms
        self.fc = fc

    def __call__(self, x: Tensor, mode: Mode = "train") -> Tensor:
        h = x
        for conv, norm in zip(self.convs, self.norms):
            h = conv(h)
            if isinstance(norm, BatchNormState):
                norm.mode = mode
                h = batch_norm_forward(h, norm)
            elif isinstance(norm, InstanceNormParams):
                h = instance_norm_forward(h, norm)
            h = ad.relu(h)
        return self.fc(h.mean(axis=(2, 3)))

    def named_parameters(self, prefix: str) -> Iterator[tuple[str, Parameter]]:
        for i, (conv, norm) in enumerate(zip(self.convs, self.norms)):
            yield f"{prefix}.conv{i}.weight", conv.weight
            if conv.bias is not None:
                yield f"{prefix}.conv{i}.bias", conv.bias
            if norm is not None:
                yield f"{prefix}.norm{i}.scale", norm.scale
                yield f"{prefix}.norm{i}.shift", norm.shift
        yield f"{prefix}.fc.weight", self.fc.weight
        yield f"{prefix}.fc.bias", self.fc.bias

    def named_buffers(self, prefix: str) -> Iterator[tuple[str, np.ndarray]]:
        for i, norm in enumerate(self.norms):
            if isinstance(norm, BatchNormState):
                yield f"{prefix}.norm{i}.running_mean", norm.running_mean
                yield f"{prefix}.norm{i}.running_var", norm.running_var

    def set_buffer(self, local_name: str, value: np.ndarray) -> None:
        stage, field_name = local_name.split(".")
        norm = self.norms[int(stage[len("norm"):])]
        setattr(norm, field_name, np.array(value, dtype=norm.scale.dtype))


@dataclass
class YNetwork:
    """Source encoder (v), target encoder (u) and shared classifier head (w)."""

    config: EncoderConfig
    num_classes: int
    source: Encoder
    target: Encoder
    classifier: Dense
    dtype: np.dtype = field(default=np.dtype(np.float32))

    def encoder(self, which: Branch) -> Encoder:
        if which == "source":
            return self.source
        if which == "target":
            return self.target
        raise ValueError(f"unknown branch {which!r}; expected 'source' or 'target'")

    def named_parameters(self) -> dict[str, Parameter]:
        out = dict(self.source.named_parameters("src"))
        out.update(self.target.named_parameters("tgt"))
        out["cls.weight"] = self.classifier.weight
        out["cls.bias"] = self.classifier.bias
        return out

    def parameters(self, *groups: str) -> list[Parameter]:
        """Parameters of the requested groups among 'src', 'tgt', 'cls' (all if none given)."""
        groups = groups or ("src", "tgt", "cls")
        return [p for n, p in self.named_parameters().items() if n.split(".")[0] in groups]

    def named_buffers(self) -> dict[str, np.ndarray]:
        out = dict(self.source.named_buffers("src"))
        out.update(self.target.named_buffers("tgt"))
        return out

    def zero_grad(self) -> None:
        for p in self.named_parameters().values():
            p.zero_grad()

    def copy_source_to_target(self) -> None:
        """psi <- phi: parameters and normalization running statistics."""
        src = dict(self.source.named_parameters("x"))
        for name, p in self.target.named_parameters("x"):
            p.assign(src[name].data)
        for name, buf in self.source.named_buffers("x"):
            self.target.set_buffer(name[2:], buf.copy())

    def clone(self) -> "YNetwork":
        return copy.deepcopy(self)


def encoder_forward(net: YNetwork, x: Tensor, which: Branch, mode: Mode = "train") -> Tensor:
    if not isinstance(x, Tensor):
        x = Tensor(x, dtype=net.dtype)
    expected = net.config.input_shape
    if x.ndim != 4 or tuple(x.shape[1:]) != expected:
        raise ValueError(f"{which} encoder expects input [N,{','.join(map(str, expected))}], got {x.shape}")
    return net.encoder(which)(x, mode=mode)


def classifier_forward(net: YNetwork, z: Tensor) -> Tensor:
    if z.ndim != 2 or z.shape[1] != net.config.embed_dim:
        raise ValueError(f"classifier expects [N,{net.config.embed_dim}] embeddings, got {z.shape}")
    return net.classifier(z)


# ---------------------------------------------------------------------------
# initialization


def _uniform(rng: np.random.Generator, shape: tuple, bound: float, dtype) -> np.ndarray:
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def _build_encoder(config: EncoderConfig, rng: np.random.Generator, dtype, prefix: str) -> Encoder:
    convs, norms = [], []
    cin = config.in_channels
    for i, (k, cout, stride) in enumerate(config.stages):
        fan_in = cin * k * k
        w = Parameter(_uniform(rng, (cout, cin, k, k), math.sqrt(6.0 / fan_in), dtype), f"{prefix}.conv{i}.weight")
        # a bias ahead of a normalization layer is cancelled by the mean subtraction
        b = Parameter(np.zeros(cout, dtype), f"{prefix}.conv{i}.bias") if config.norm == "none" else None
        convs.append(Conv2d(w, b, stride=stride, padding=k // 2))
        scale = Parameter(np.ones(cout, dtype), f"{prefix}.norm{i}.scale")
        shift = Parameter(np.zeros(cout, dtype), f"{prefix}.norm{i}.shift")
        if config.norm == "batch":
            norms.append(BatchNormState(scale, shift, np.zeros(cout, dtype), np.ones(cout, dtype)))
        elif config.norm == "instance":
            norms.append(InstanceNormParams(scale, shift))
        else:
            norms.append(None)
        cin = cout
    fc_w = Parameter(_uniform(rng, (cin, config.embed_dim), 1.0 / math.sqrt(cin), dtype), f"{prefix}.fc.weight")
    fc_b = Parameter(np.zeros(config.embed_dim, dtype), f"{prefix}.fc.bias")
    return Encoder(config, convs, norms, Dense(fc_w, fc_b))


def init_parameters(
    config: EncoderConfig, num_classes: int, seed: int, tied: bool = False, dtype=np.float32
) -> YNetwork:
    """Seeded fan-in-scaled uniform init; norm scales 1, shifts 0.

    The target encoder gets an independent draw unless ``tied`` is set, in
    which case it starts as an exact copy of the source encoder.
    """
    if num_classes < 2:
        raise ValueError("need at least two classes")
    dtype = np.dtype(dtype)
    rng = np.random.default_rng(seed)
    source = _build_encoder(config, rng, dtype, "src")
    target = _build_encoder(config, rng, dtype, "tgt")
    d = config.embed_dim
    cls = Dense(
        Parameter(_uniform(rng, (d, num_classes), 1.0 / math.sqrt(d), dtype), "cls.weight"),
        Parameter(np.zeros(num_classes, dtype), "cls.bias"),
    )
    net = YNetwork(config, num_classes, source, target, cls, dtype)
    if tied:
        net.copy_source_to_target()
    return net


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(net: YNetwork, path) -> Path:
    """Write ``<path>`` (tensor container) and ``<path>.manifest.txt``."""
    from .data import write_container

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries = {n: p.data for n, p in net.named_parameters().items()}
    entries.update({n: np.asarray(b, dtype=net.dtype) for n, b in net.named_buffers().items()})
    write_container(path, entries)
    cfg = net.config
    lines = [
        "format = wassalign-checkpoint 1",
        f"num_classes = {net.num_classes}",
        f"dtype = {net.dtype.name}",
        f"config.in_channels = {cfg.in_channels}",
        f"config.image_size = {cfg.image_size}",
        f"config.stages = {cfg.stages_text()}",
        f"config.norm = {cfg.norm}",
        f"config.embed_dim = {cfg.embed_dim}",
    ]
    for name, arr in entries.items():
        kind = "param" if name in net.named_parameters() else "buffer"
        lines.append(f"{kind} {name} = {'x'.join(map(str, arr.shape))}")
    manifest_path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def manifest_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".manifest.txt")


def load_checkpoint(path) -> YNetwork:
    from .data import read_container

    path = Path(path)
    meta = {}
    for line in manifest_path(path).read_text(encoding="utf-8").splitlines():
        if "=" in line:
            key, value = (s.strip() for s in line.split("=", 1))
            meta[key] = value
    config = EncoderConfig(
        in_channels=int(meta["config.in_channels"]),
        image_size=int(meta["config.image_size"]),
        stages=EncoderConfig.parse_stages(meta["config.stages"]),
        norm=meta["config.norm"],
        embed_dim=int(meta["config.embed_dim"]),
    )
    net = init_parameters(config, int(meta["num_classes"]), seed=0, dtype=np.dtype(meta["dtype"]))
    entries = read_container(path)
    params = net.named_parameters()
    for name, p in params.items():
        if name not in entries:
            raise ValueError(f"checkpoint {path} lacks parameter {name}")
        p.assign(entries[name])
    for name in net.named_buffers():
        branch, local = name.split(".", 1)
        enc = net.source if branch == "src" else net.target
        enc.set_buffer(local, entries[name])
    return net
