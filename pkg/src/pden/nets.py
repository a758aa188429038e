"""Task model and domain synthesizers.

Three networks share a small conv vocabulary:

* ``TaskModel`` -- feature extractor F (strided conv stack + global average
  pool), classifier head C (two dense layers + softmax), and projection head
  P (dense to a low-dim embedding, L2-normalized onto the unit sphere).
* ``Generator`` -- conv encoder to a quarter-resolution feature map, adaptive
  instance normalization driven by a Gaussian noise vector (two dense heads
  map noise to per-channel scale and shift), then an upsampling conv decoder
  with a sigmoid output so synthesized images stay in [0, 1].
* ``CycleGenerator`` -- same encoder/decoder shape but plain instance norm at
  the bottleneck and no noise input; it learns to map synthesized images back
  to their sources.

All shapes are resolution-agnostic: the only hard requirement is that input
height and width are divisible by 4 (two stride-2 encodes, two 2x decodes).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .rng import Rng


@dataclass(frozen=True)
class ArchConfig:
    """Layer widths for the desk-scale architecture.

    ``in_channels`` and ``num_classes`` tie the networks to a dataset; the
    rest are capacity knobs.  ``feat_channels`` are the three stride-2 conv
    widths of F (the last one is the feature dimension after pooling),
    ``gen_channels`` the two encoder widths of the synthesizers (the last one
    is the bottleneck width that AdaIN modulates).
    """

    in_channels: int = 1
    num_classes: int = 10
    feat_channels: tuple = (16, 32, 64)
    clf_hidden: int = 64
    embed_dim: int = 32
    noise_dim: int = 16
    gen_channels: tuple = (16, 32)

    def __post_init__(self):
        if self.in_channels < 1 or self.num_classes < 2:
            raise ValueError(
                f"need in_channels >= 1 and num_classes >= 2, got "
                f"{self.in_channels}, {self.num_classes}")
        if len(self.feat_channels) != 3 or len(self.gen_channels) != 2:
            raise ValueError("feat_channels must have 3 entries and gen_channels 2")
        if min(self.feat_channels) < 1 or min(self.gen_channels) < 1:
            raise ValueError("channel widths must be positive")
        if self.clf_hidden < 1 or self.embed_dim < 1 or self.noise_dim < 1:
            raise ValueError("head dims must be positive")
        object.__setattr__(self, "feat_channels", tuple(int(c) for c in self.feat_channels))
        object.__setattr__(self, "gen_channels", tuple(int(c) for c in self.gen_channels))

    def to_dict(self) -> dict:
        return {
            "in_channels": self.in_channels,
            "num_classes": self.num_classes,
            "feat_channels": list(self.feat_channels),
            "clf_hidden": self.clf_hidden,
            "embed_dim": self.embed_dim,
            "noise_dim": self.noise_dim,
            "gen_channels": list(self.gen_channels),
        }

    @staticmethod
    def from_dict(d: dict) -> "ArchConfig":
        return ArchConfig(
            in_channels=int(d["in_channels"]),
            num_classes=int(d["num_classes"]),
            feat_channels=tuple(d["feat_channels"]),
            clf_hidden=int(d["clf_hidden"]),
            embed_dim=int(d["embed_dim"]),
            noise_dim=int(d["noise_dim"]),
            gen_channels=tuple(d["gen_channels"]),
        )


@dataclass
class Dense:
    w: Tensor  # (fan_in, fan_out)
    b: Tensor  # (fan_out,)


@dataclass
class Conv:
    w: Tensor  # (out_ch, in_ch, kh, kw)
    b: Tensor  # (out_ch,)
    stride: int = 1
    padding: int = 1


def dense(x: Tensor, layer: Dense) -> Tensor:
    return ad.add_row_bias(ad.matmul(x, layer.w), layer.b)


def conv(x: Tensor, layer: Conv) -> Tensor:
    return ad.add_channel_bias(
        ad.conv2d(x, layer.w, stride=layer.stride, padding=layer.padding), layer.b)


# -- initialization --------------------------------------------------------------


def kaiming_dense(rng: Rng, fan_in: int, fan_out: int) -> Dense:
    """He-normal weights (std = sqrt(2 / fan_in)), zero bias."""
    w = rng.normal((fan_in, fan_out), std=np.sqrt(2.0 / fan_in))
    return Dense(ad.parameter(w), ad.parameter(np.zeros(fan_out)))


def kaiming_conv(rng: Rng, out_ch: int, in_ch: int, kh: int, kw: int,
                 stride: int = 1, padding: int = 1) -> Conv:
    fan_in = in_ch * kh * kw
    w = rng.normal((out_ch, in_ch, kh, kw), std=np.sqrt(2.0 / fan_in))
    return Conv(ad.parameter(w), ad.parameter(np.zeros(out_ch)), stride, padding)


# -- task model -------------------------------------------------------------------


class TaskOutput(NamedTuple):
    h: Tensor      # pooled features (N, d_h)
    yhat: Tensor   # class distribution rows (N, m)
    z: Tensor      # unit-norm projection (N, d_e)


@dataclass
class TaskModel:
    arch: ArchConfig
    convs: list          # three stride-2 Conv layers (F)
    clf_hidden: Dense    # C, first layer (relu)
    clf_out: Dense       # C, logits layer (softmax)
    proj: Dense          # P, projection to the embedding sphere

    def named_parameters(self) -> list:
        out = []
        for i, c in enumerate(self.convs):
            out += [(f"feat.{i}.w", c.w), (f"feat.{i}.b", c.b)]
        out += [("clf_hidden.w", self.clf_hidden.w), ("clf_hidden.b", self.clf_hidden.b)]
        out += [("clf_out.w", self.clf_out.w), ("clf_out.b", self.clf_out.b)]
        out += [("proj.w", self.proj.w), ("proj.b", self.proj.b)]
        return out

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def frozen(self) -> "TaskModel":
        """View with the same arrays but requires_grad=False everywhere.

        Forwards through the view build no graph into the task parameters;
        gradients still flow to any grad-requiring *input*.
        """
        return _map_params(self, lambda p: Tensor(p.data))

    def clone(self) -> "TaskModel":
        """Deep copy with independent trainable parameters."""
        return _map_params(self, lambda p: ad.parameter(p.data.copy()))


def init_task_model(arch: ArchConfig, rng: Rng) -> TaskModel:
    c1, c2, c3 = arch.feat_channels
    r = rng.derive("task_model")
    convs = [
        kaiming_conv(r.derive("f1"), c1, arch.in_channels, 3, 3, stride=2, padding=1),
        kaiming_conv(r.derive("f2"), c2, c1, 3, 3, stride=2, padding=1),
        kaiming_conv(r.derive("f3"), c3, c2, 3, 3, stride=2, padding=1),
    ]
    return TaskModel(
        arch=arch,
        convs=convs,
        clf_hidden=kaiming_dense(r.derive("c1"), c3, arch.clf_hidden),
        clf_out=kaiming_dense(r.derive("c2"), arch.clf_hidden, arch.num_classes),
        proj=kaiming_dense(r.derive("p"), c3, arch.embed_dim),
    )


def features(model: TaskModel, x: Tensor) -> Tensor:
    """F(x): conv-relu stack then global average pool, (N, d_h)."""
    _check_images(x, model.arch.in_channels)
    h = x
    for layer in model.convs:
        h = ad.relu(conv(h, layer))
    return ad.global_avg_pool(h)


def forward_task(model: TaskModel, x: Tensor) -> TaskOutput:
    """Full task forward: features, class distribution, unit embedding."""
    h = features(model, x)
    logits = dense(ad.relu(dense(h, model.clf_hidden)), model.clf_out)
    yhat = ad.softmax(logits)
    z = ad.l2_normalize(dense(h, model.proj))
    return TaskOutput(h=h, yhat=yhat, z=z)


def predict(model: TaskModel, x: Tensor) -> np.ndarray:
    """Argmax class labels, graph-free (uses a frozen view)."""
    return np.argmax(forward_task(model.frozen(), x).yhat.data, axis=1)


# -- synthesizers -----------------------------------------------------------------


@dataclass
class Generator:
    """Noise-conditioned domain synthesizer G(x, n)."""

    arch: ArchConfig
    enc: list            # two stride-2 Conv layers
    fc_scale: Dense      # noise -> per-channel scale at the bottleneck
    fc_shift: Dense      # noise -> per-channel shift at the bottleneck
    dec: list            # two Conv layers, each preceded by 2x upsampling

    def named_parameters(self) -> list:
        out = []
        for i, c in enumerate(self.enc):
            out += [(f"enc.{i}.w", c.w), (f"enc.{i}.b", c.b)]
        out += [("fc_scale.w", self.fc_scale.w), ("fc_scale.b", self.fc_scale.b)]
        out += [("fc_shift.w", self.fc_shift.w), ("fc_shift.b", self.fc_shift.b)]
        for i, c in enumerate(self.dec):
            out += [(f"dec.{i}.w", c.w), (f"dec.{i}.b", c.b)]
        return out

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def frozen(self) -> "Generator":
        return _map_params(self, lambda p: Tensor(p.data))

    def clone(self) -> "Generator":
        return _map_params(self, lambda p: ad.parameter(p.data.copy()))


@dataclass
class CycleGenerator:
    """Reconstruction network: same body as Generator, plain instance norm."""

    arch: ArchConfig
    enc: list
    dec: list

    def named_parameters(self) -> list:
        out = []
        for i, c in enumerate(self.enc):
            out += [(f"enc.{i}.w", c.w), (f"enc.{i}.b", c.b)]
        for i, c in enumerate(self.dec):
            out += [(f"dec.{i}.w", c.w), (f"dec.{i}.b", c.b)]
        return out

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def frozen(self) -> "CycleGenerator":
        return _map_params(self, lambda p: Tensor(p.data))

    def clone(self) -> "CycleGenerator":
        return _map_params(self, lambda p: ad.parameter(p.data.copy()))


def _autoenc_layers(arch: ArchConfig, rng: Rng):
    g1, g2 = arch.gen_channels
    enc = [
        kaiming_conv(rng.derive("e1"), g1, arch.in_channels, 3, 3, stride=2, padding=1),
        kaiming_conv(rng.derive("e2"), g2, g1, 3, 3, stride=2, padding=1),
    ]
    dec = [
        kaiming_conv(rng.derive("d1"), g1, g2, 3, 3, stride=1, padding=1),
        kaiming_conv(rng.derive("d2"), arch.in_channels, g1, 3, 3, stride=1, padding=1),
    ]
    return enc, dec


def init_generator(arch: ArchConfig, rng: Rng) -> Generator:
    """Fresh synthesizer; the AdaIN heads start near (scale 1, shift 0).

    Small head weights plus biases (1, 0) make the initial output close to a
    decoded plain instance normalization, so reconstruction pressure is
    informative from the first step instead of fighting a random affine.
    """
    r = rng.derive("generator")
    enc, dec = _autoenc_layers(arch, r)
    g2 = arch.gen_channels[1]
    fc_scale = kaiming_dense(r.derive("fc_scale"), arch.noise_dim, g2)
    fc_shift = kaiming_dense(r.derive("fc_shift"), arch.noise_dim, g2)
    fc_scale.w.data *= 0.05
    fc_shift.w.data *= 0.05
    fc_scale.b.data[:] = 1.0
    return Generator(arch=arch, enc=enc, fc_scale=fc_scale, fc_shift=fc_shift, dec=dec)


def init_cycle_generator(arch: ArchConfig, rng: Rng) -> CycleGenerator:
    enc, dec = _autoenc_layers(arch, rng.derive("cycle_generator"))
    return CycleGenerator(arch=arch, enc=enc, dec=dec)


def adain(feat: Tensor, noise: Tensor, fc_scale: Dense, fc_shift: Dense) -> Tensor:
    """Adaptive instance normalization of a feature map by a noise vector.

    Normalizes each (sample, channel) plane to zero mean / unit (floored)
    std, then applies the per-channel affine predicted from ``noise``:
    ``scale * (feat - mu) / sigma + shift``.
    """
    if feat.ndim != 4:
        raise ad.ShapeError(f"adain needs a 4-d feature map, got {feat.shape}")
    if noise.ndim != 2 or noise.shape[0] != feat.shape[0]:
        raise ad.ShapeError(
            f"adain: noise {noise.shape} does not pair with features {feat.shape}")
    if noise.shape[1] != fc_scale.w.shape[0]:
        raise ad.ShapeError(
            f"adain: noise dim {noise.shape[1]} != head fan-in {fc_scale.w.shape[0]}")
    n, c, h, w = feat.shape
    mu, sigma = ad.instance_stats(feat)
    scale = dense(noise, fc_scale)
    shift = dense(noise, fc_shift)
    normalized = ad.div(ad.sub(feat, ad.expand_spatial(mu, h, w)),
                        ad.expand_spatial(sigma, h, w))
    return ad.add(ad.mul(ad.expand_spatial(scale, h, w), normalized),
                  ad.expand_spatial(shift, h, w))


def _encode(layers, x: Tensor) -> Tensor:
    h = x
    for layer in layers:
        h = ad.relu(conv(h, layer))
    return h


def _decode(layers, h: Tensor) -> Tensor:
    h = ad.relu(conv(ad.upsample2x(h), layers[0]))
    return ad.sigmoid(conv(ad.upsample2x(h), layers[1]))


def generate(gen: Generator, x: Tensor, noise: Tensor) -> Tensor:
    """G(x, n): encode, modulate by noise at the bottleneck, decode to [0, 1]."""
    _check_images(x, gen.arch.in_channels)
    if x.shape[2] % 4 or x.shape[3] % 4:
        raise ad.ShapeError(f"generate: spatial dims must be divisible by 4, got {x.shape}")
    if noise.shape != (x.shape[0], gen.arch.noise_dim):
        raise ad.ShapeError(
            f"generate: noise must be ({x.shape[0]}, {gen.arch.noise_dim}), got {noise.shape}")
    feat = _encode(gen.enc, x)
    modulated = adain(feat, noise, gen.fc_scale, gen.fc_shift)
    return _decode(gen.dec, modulated)


def cycle(cyc: CycleGenerator, x: Tensor) -> Tensor:
    """Reconstruction pass: encode, plain instance norm, decode to [0, 1]."""
    _check_images(x, cyc.arch.in_channels)
    if x.shape[2] % 4 or x.shape[3] % 4:
        raise ad.ShapeError(f"cycle: spatial dims must be divisible by 4, got {x.shape}")
    feat = _encode(cyc.enc, x)
    return _decode(cyc.dec, ad.instance_norm(feat))


# -- shared helpers ----------------------------------------------------------------


def _check_images(x: Tensor, channels: int) -> None:
    if x.ndim != 4:
        raise ad.ShapeError(f"expected image batch (N, C, H, W), got shape {x.shape}")
    if x.shape[1] != channels:
        raise ad.ShapeError(f"expected {channels} channels, got {x.shape[1]}")


def _map_params(model, fn):
    """Rebuild a model dataclass with fn applied to every parameter tensor."""
    def map_dense(d: Dense) -> Dense:
        return Dense(fn(d.w), fn(d.b))

    def map_conv(c: Conv) -> Conv:
        return Conv(fn(c.w), fn(c.b), c.stride, c.padding)

    if isinstance(model, TaskModel):
        return TaskModel(model.arch, [map_conv(c) for c in model.convs],
                         map_dense(model.clf_hidden), map_dense(model.clf_out),
                         map_dense(model.proj))
    if isinstance(model, Generator):
        return Generator(model.arch, [map_conv(c) for c in model.enc],
                         map_dense(model.fc_scale), map_dense(model.fc_shift),
                         [map_conv(c) for c in model.dec])
    if isinstance(model, CycleGenerator):
        return CycleGenerator(model.arch, [map_conv(c) for c in model.enc],
                              [map_conv(c) for c in model.dec])
    raise TypeError(f"unknown model type {type(model).__name__}")


def load_state(model, named_arrays: dict) -> None:
    """Copy arrays into the model's parameters by name; shapes must match."""
    params = dict(model.named_parameters())
    missing = set(params) - set(named_arrays)
    extra = set(named_arrays) - set(params)
    if missing or extra:
        raise KeyError(f"parameter name mismatch: missing {sorted(missing)}, extra {sorted(extra)}")
    for name, p in params.items():
        arr = np.asarray(named_arrays[name], dtype=np.float64)
        if arr.shape != p.data.shape:
            raise ValueError(f"parameter {name}: shape {arr.shape} != {p.data.shape}")
        p.data = arr.copy()


def param_digest(model) -> str:
    """Hex digest of all parameters, for run identity checks."""
    import hashlib

    h = hashlib.sha256()
    for name, p in model.named_parameters():
        h.update(name.encode())
        h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()
