"""MRRN and U-Net segmentation graphs built from the autodiff kernels.

The MRRN keeps one persistent feature stream per resolution level.  Stream
``R0`` starts as the output of the stem CNN block; each pooling stage opens the
next stream.  At every deeper level an RCU block runs one residual connection
unit per higher-resolution stream: the stream is max-pooled down to the current
level, concatenated with the running feature map, passed through CNN blocks,
and a 1x1-convolved, nearest-upsampled copy of the result is added back onto
the stream.  A decoder climbs back to full resolution, merging each level's
stream and running RCU blocks against the streams above it; logits come from a
1x1 convolution of ``R0``.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field, fields
from typing import Optional

import numpy as np

from .autodiff import (
    BatchNormStats,
    ShapeError,
    Tensor,
    add,
    batch_norm,
    concat_channels,
    conv2d,
    maxpool2x2,
    relu,
    resolve_dtype,
    upsample_nearest,
)

PUBLISHED_PARAM_COUNT = 28_941_717


class ConfigError(ValueError):
    pass


@dataclass
class ArchConfig:
    num_streams: int = 4
    base_channels: int = 32
    channels: Optional[tuple] = None  # defaults to base_channels * 2**k
    rcus_per_block: int = 2
    cnn_blocks_per_rcu: int = 2
    input_size: int = 256
    num_classes: int = 6
    in_channels: int = 1
    reference_param_target: Optional[int] = PUBLISHED_PARAM_COUNT

    def __post_init__(self):
        if self.channels is None:
            self.channels = tuple(self.base_channels * 2 ** k for k in range(max(self.num_streams, 0)))
        else:
            self.channels = tuple(int(c) for c in self.channels)

    def violations(self) -> list[str]:
        out = []
        if self.num_streams < 1:
            out.append(f"num_streams must be >= 1 (got {self.num_streams})")
        if len(self.channels) != self.num_streams:
            out.append(f"channel schedule length {len(self.channels)} != num_streams {self.num_streams}")
        if any(c < 1 for c in self.channels):
            out.append(f"channel counts must be positive (got {list(self.channels)})")
        if self.num_classes < 2:
            out.append(f"num_classes must be >= 2 (got {self.num_classes})")
        if self.rcus_per_block < 1:
            out.append(f"rcus_per_block must be >= 1 (got {self.rcus_per_block})")
        if self.cnn_blocks_per_rcu < 1:
            out.append(f"cnn_blocks_per_rcu must be >= 1 (got {self.cnn_blocks_per_rcu})")
        if self.in_channels < 1:
            out.append(f"in_channels must be >= 1 (got {self.in_channels})")
        s = self.input_size
        if s < 1 or s & (s - 1):
            out.append(f"input_size must be a power of two (got {s})")
        elif self.num_streams >= 1 and s % 2 ** (self.num_streams - 1):
            out.append(f"input_size {s} not divisible by 2^(num_streams-1) = {2 ** (self.num_streams - 1)}")
        return out

    def validate(self) -> "ArchConfig":
        bad = self.violations()
        if bad:
            raise ConfigError("invalid architecture config: " + "; ".join(bad))
        return self

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["channels"] = list(d["channels"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown architecture keys: {sorted(unknown)}")
        return cls(**d)


def tiny_config(**overrides) -> ArchConfig:
    """Two streams, base width 4, 16x16 input, two classes."""
    kw = dict(num_streams=2, base_channels=4, input_size=16, num_classes=2, rcus_per_block=1,
              cnn_blocks_per_rcu=1)
    kw.update(overrides)
    return ArchConfig(**kw)


# --------------------------------------------------------------------------- building blocks

def cnn_block(x: Tensor, weight: Tensor, gamma: Tensor, beta: Tensor,
              mode: str = "train", running: Optional[BatchNormStats] = None) -> Tensor:
    """3x3 conv -> batch norm -> ReLU."""
    if weight.shape[1] != x.shape[1]:
        raise ShapeError(f"cnn_block: input has {x.shape[1]} channels, weight expects {weight.shape[1]}")
    return relu(batch_norm(conv2d(x, weight), gamma, beta, mode=mode, running=running))


def stream_update(stream: Tensor, residual: Tensor) -> Tensor:
    if stream.shape != residual.shape:
        raise ShapeError(f"stream_update: stream {stream.shape} vs residual {residual.shape}")
    return add(stream, residual)


def downsample(x: Tensor, times: int) -> Tensor:
    for _ in range(times):
        x = maxpool2x2(x)
    return x


@dataclass
class RCUParams:
    blocks: list  # [(weight, gamma, beta, running)]
    res_weight: Tensor
    res_bias: Tensor


def rcu_forward(stream_input: Tensor, prev_features: Tensor, params: RCUParams,
                upsample_factor: int, mode: str = "train") -> tuple[Tensor, Tensor]:
    """Residual connection unit.

    ``stream_input`` must already be pooled to the resolution of
    ``prev_features``.  Returns ``(regular_output, residual_output)`` where the
    residual output is at ``upsample_factor`` times the working resolution with
    the stream's channel count.
    """
    if stream_input.shape[2:] != prev_features.shape[2:]:
        raise ShapeError(
            f"rcu: stream input {stream_input.shape[2:]} and features {prev_features.shape[2:]} differ spatially"
        )
    x = concat_channels(stream_input, prev_features)
    for weight, gamma, beta, running in params.blocks:
        x = cnn_block(x, weight, gamma, beta, mode=mode, running=running)
    residual = conv2d(x, params.res_weight, params.res_bias)
    return x, upsample_nearest(residual, upsample_factor)


# --------------------------------------------------------------------------- models

class Model:
    """Ordered parameter store plus a forward graph over it."""

    kind = "base"

    def __init__(self, config: ArchConfig, seed: int = 0, precision: str = "f32"):
        self.config = config.validate()
        self.precision = precision
        self.dtype = resolve_dtype(precision)
        self.seed = seed
        self.training = True
        self.params: dict[str, Tensor] = {}
        self.bn_stats: dict[str, BatchNormStats] = {}
        self._rng = np.random.default_rng(seed)
        self._build()
        del self._rng

    # -- registration
    def _conv(self, name: str, c_in: int, c_out: int, k: int, bias: bool = True) -> None:
        std = np.sqrt(2.0 / (c_in * k * k))
        w = self._rng.standard_normal((c_out, c_in, k, k)) * std
        self.params[f"{name}.weight"] = Tensor(w.astype(self.dtype), requires_grad=True, name=f"{name}.weight")
        if bias:
            self.params[f"{name}.bias"] = Tensor(np.zeros(c_out, self.dtype), requires_grad=True, name=f"{name}.bias")

    def _bn(self, name: str, c: int) -> None:
        self.params[f"{name}.gamma"] = Tensor(np.ones(c, self.dtype), requires_grad=True, name=f"{name}.gamma")
        self.params[f"{name}.beta"] = Tensor(np.zeros(c, self.dtype), requires_grad=True, name=f"{name}.beta")
        self.bn_stats[name] = BatchNormStats.empty(c, self.dtype)

    def _cnn(self, name: str, c_in: int, c_out: int) -> None:
        self._conv(f"{name}.conv", c_in, c_out, 3, bias=False)
        self._bn(f"{name}.bn", c_out)

    def _rcu(self, name: str, c_stream: int, c_feat: int) -> None:
        c_in = c_stream + c_feat
        for i in range(self.config.cnn_blocks_per_rcu):
            self._cnn(f"{name}.cnn{i}", c_in, c_feat)
            c_in = c_feat
        self._conv(f"{name}.res", c_feat, c_stream, 1)

    # -- application
    @property
    def mode(self) -> str:
        return "train" if self.training else "eval"

    def _apply_cnn(self, name: str, x: Tensor) -> Tensor:
        p = self.params
        return cnn_block(x, p[f"{name}.conv.weight"], p[f"{name}.bn.gamma"], p[f"{name}.bn.beta"],
                         mode=self.mode, running=self.bn_stats[f"{name}.bn"])

    def _rcu_params(self, name: str) -> RCUParams:
        p = self.params
        blocks = [(p[f"{name}.cnn{i}.conv.weight"], p[f"{name}.cnn{i}.bn.gamma"], p[f"{name}.cnn{i}.bn.beta"],
                   self.bn_stats[f"{name}.cnn{i}.bn"]) for i in range(self.config.cnn_blocks_per_rcu)]
        return RCUParams(blocks, p[f"{name}.res.weight"], p[f"{name}.res.bias"])

    # -- public surface
    def train(self) -> "Model":
        self.training = True
        return self

    def eval(self) -> "Model":
        self.training = False
        return self

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return list(self.params.items())

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def __call__(self, x) -> Tensor:
        return self.forward(x)

    def _check_input(self, x) -> Tensor:
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.dtype))
        cfg = self.config
        want = (cfg.in_channels, cfg.input_size, cfg.input_size)
        if x.data.ndim != 4 or x.shape[1:] != want:
            raise ShapeError(f"forward: expected input (n, {want[0]}, {want[1]}, {want[2]}), got {x.shape}")
        if x.dtype != self.dtype:
            x = Tensor(x.data.astype(self.dtype), requires_grad=x.requires_grad)
        return x

    def forward(self, x) -> Tensor:
        raise NotImplementedError

    def state_dict(self) -> dict[str, np.ndarray]:
        """Trainable tensors, then running statistics, in build order."""
        out = {name: t.data for name, t in self.params.items()}
        for name, st in self.bn_stats.items():
            out[f"{name}.running_mean"] = st.mean
            out[f"{name}.running_var"] = st.var
            out[f"{name}.num_batches"] = np.array([st.count], dtype=self.dtype)
        return out

    def load_state_dict(self, state: dict) -> None:
        expected = self.state_dict()
        if list(state) != list(expected):
            missing = [k for k in expected if k not in state]
            extra = [k for k in state if k not in expected]
            raise ValueError(f"state dict mismatch: missing={missing[:5]} unexpected={extra[:5]}")
        for name, arr in state.items():
            arr = np.asarray(arr)
            if arr.size != expected[name].size:
                raise ValueError(f"state entry {name}: {arr.size} values, expected {expected[name].size}")
            arr = arr.reshape(expected[name].shape).astype(self.dtype, copy=True)
            if name in self.params:
                self.params[name].data = arr
            elif name.endswith(".running_mean"):
                self.bn_stats[name[: -len(".running_mean")]].mean = arr
            elif name.endswith(".running_var"):
                self.bn_stats[name[: -len(".running_var")]].var = arr
            else:
                self.bn_stats[name[: -len(".num_batches")]].count = int(arr[0])

    def copy(self) -> "Model":
        """Detached deep copy of parameters and running statistics."""
        other = copy.copy(self)
        other.params = {name: Tensor(t.data.copy(), requires_grad=t.requires_grad, name=t.name)
                        for name, t in self.params.items()}
        other.bn_stats = {name: st.copy() for name, st in self.bn_stats.items()}
        return other


class MRRN(Model):
    kind = "mrrn"

    def _build(self) -> None:
        cfg = self.config
        ch = cfg.channels
        L = cfg.num_streams
        self._cnn("stem", cfg.in_channels, ch[0])
        for k in range(1, L):
            self._cnn(f"enc{k}.entry", ch[k - 1], ch[k])
            for b in range(cfg.rcus_per_block):
                for j in range(k):
                    self._rcu(f"enc{k}.block{b}.rcu{j}", ch[j], ch[k])
        for k in range(L - 2, -1, -1):
            self._cnn(f"dec{k}.entry", ch[k + 1] + ch[k], ch[k])
            for b in range(cfg.rcus_per_block if k >= 1 else 0):
                for j in range(k):
                    self._rcu(f"dec{k}.block{b}.rcu{j}", ch[j], ch[k])
        self._conv("head", ch[0], cfg.num_classes, 1)
        self.stream_trace: list[dict] = []

    def _rcu_block(self, prefix: str, k: int, feat: Tensor, streams: list, phase: str) -> Tensor:
        read = []
        for j in range(k):
            stream_in = downsample(streams[j], k - j)
            feat, residual = rcu_forward(stream_in, feat, self._rcu_params(f"{prefix}.rcu{j}"),
                                         upsample_factor=2 ** (k - j), mode=self.mode)
            streams[j] = stream_update(streams[j], residual)
            read.append(j)
        self.stream_trace.append({"phase": phase, "level": k, "block": prefix, "streams_read": read})
        self._check_streams(streams)
        return feat

    def _check_streams(self, streams: list) -> None:
        s = self.config.input_size
        for k, r in enumerate(streams):
            want = (self.config.channels[k], s >> k, s >> k)
            if r.shape[1:] != want:
                raise AssertionError(f"stream R{k} has shape {r.shape[1:]}, expected {want}")

    def forward(self, x) -> Tensor:
        x = self._check_input(x)
        cfg = self.config
        L = cfg.num_streams
        self.stream_trace = []
        feat = self._apply_cnn("stem", x)
        streams = [feat]
        for k in range(1, L):
            feat = self._apply_cnn(f"enc{k}.entry", maxpool2x2(feat))
            streams.append(feat)
            for b in range(cfg.rcus_per_block):
                feat = self._rcu_block(f"enc{k}.block{b}", k, feat, streams, "encoder")
        self._check_streams(streams)
        for k in range(L - 2, -1, -1):
            feat = self._apply_cnn(f"dec{k}.entry", concat_channels(upsample_nearest(feat, 2), streams[k]))
            for b in range(cfg.rcus_per_block if k >= 1 else 0):
                feat = self._rcu_block(f"dec{k}.block{b}", k, feat, streams, "decoder")
        if L > 1:
            streams[0] = stream_update(streams[0], feat)
        self._check_streams(streams)
        p = self.params
        return conv2d(streams[0], p["head.weight"], p["head.bias"])


class UNet(Model):
    """Encoder-decoder with one concatenation skip per resolution level."""

    kind = "unet"

    def _build(self) -> None:
        cfg = self.config
        ch = cfg.channels
        L = cfg.num_streams
        self._cnn("stem", cfg.in_channels, ch[0])
        for k in range(1, L):
            self._cnn(f"enc{k}.entry", ch[k - 1], ch[k])
            for b in range(cfg.rcus_per_block * cfg.cnn_blocks_per_rcu):
                self._cnn(f"enc{k}.conv{b}", ch[k], ch[k])
        for k in range(L - 2, -1, -1):
            self._cnn(f"dec{k}.entry", ch[k + 1] + ch[k], ch[k])
            for b in range(cfg.rcus_per_block * cfg.cnn_blocks_per_rcu if k >= 1 else 0):
                self._cnn(f"dec{k}.conv{b}", ch[k], ch[k])
        self._conv("head", ch[0], cfg.num_classes, 1)

    def forward(self, x) -> Tensor:
        x = self._check_input(x)
        cfg = self.config
        L = cfg.num_streams
        feat = self._apply_cnn("stem", x)
        skips = [feat]
        for k in range(1, L):
            feat = self._apply_cnn(f"enc{k}.entry", maxpool2x2(feat))
            for b in range(cfg.rcus_per_block * cfg.cnn_blocks_per_rcu):
                feat = self._apply_cnn(f"enc{k}.conv{b}", feat)
            skips.append(feat)
        for k in range(L - 2, -1, -1):
            feat = self._apply_cnn(f"dec{k}.entry", concat_channels(upsample_nearest(feat, 2), skips[k]))
            for b in range(cfg.rcus_per_block * cfg.cnn_blocks_per_rcu if k >= 1 else 0):
                feat = self._apply_cnn(f"dec{k}.conv{b}", feat)
        p = self.params
        return conv2d(feat, p["head.weight"], p["head.bias"])


MODEL_KINDS = {"mrrn": MRRN, "unet": UNet}


def build_mrrn(config: ArchConfig, seed: int = 0, precision: str = "f32") -> MRRN:
    return MRRN(config, seed=seed, precision=precision)


def build_unet_baseline(config: ArchConfig, seed: int = 0, precision: str = "f32") -> UNet:
    return UNet(config, seed=seed, precision=precision)


def build_model(kind: str, config: ArchConfig, seed: int = 0, precision: str = "f32") -> Model:
    try:
        cls = MODEL_KINDS[kind]
    except KeyError:
        raise ConfigError(f"unknown model kind {kind!r}; expected one of {sorted(MODEL_KINDS)}") from None
    return cls(config, seed=seed, precision=precision)


def count_params(model: Model) -> int:
    """Element count of all trainable tensors (running statistics excluded)."""
    return int(sum(t.data.size for t in model.params.values()))
