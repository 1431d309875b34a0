"""Content/attribute encoders, the dot-product generator and the classifier backbone.

All networks are NHWC conv stacks built from :mod:`contrimix.tensor` ops.
Parameters live in a flat ``name -> Tensor`` mapping so the optimizer and the
checkpoint writer can walk them in a fixed order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ctmx
from . import tensor as T
from .config import TrainConfig
from .errors import ConfigError, ShapeError
from .imaging import od_inverse_tensor, od_transform_tensor


@dataclass
class ModelParams:
    tensors: dict[str, T.Tensor]
    arch: dict = field(default_factory=dict)

    def __getitem__(self, name: str) -> T.Tensor:
        return self.tensors[name]

    def names(self, prefix: str = "") -> list[str]:
        return [k for k in self.tensors if k.startswith(prefix)]

    def groups(self) -> dict[str, list[str]]:
        out: dict[str, list[str]] = {}
        for name in self.tensors:
            out.setdefault(name.split(".")[0], []).append(name)
        return out

    def numpy(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.tensors.items()}

    def copy(self) -> "ModelParams":
        return ModelParams({k: T.Tensor(v.data.copy(), requires_grad=True) for k, v in self.tensors.items()}, dict(self.arch))

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None


def arch_descriptor(cfg: TrainConfig, in_channels: int = 3) -> dict:
    return {
        "in_channels": in_channels,
        "num_attributes": cfg.num_attributes,
        "content_width": cfg.content_width,
        "content_blocks": cfg.content_blocks,
        "attr_width": cfg.attr_width,
        "attr_stages": cfg.attr_stages,
        "backbone_widths": list(cfg.backbone_widths),
        "backbone_groups": cfg.backbone_groups,
        "num_classes": cfg.num_classes,
        "leaky_slope": cfg.leaky_slope,
        "norm_eps": cfg.norm_eps,
        "pre_transform": cfg.pre_transform,
        "generator_background": cfg.generator_background,
    }


def init_params(rng: np.random.Generator, arch: dict) -> ModelParams:
    """Kaiming fan-in normal weights, zero biases, unit norm gains."""
    tensors: dict[str, T.Tensor] = {}
    dims = [arch["in_channels"], arch["num_attributes"], arch["content_width"], arch["attr_width"], arch["num_classes"]]
    dims += list(arch["backbone_widths"])
    if min(dims) < 1 or arch["content_blocks"] < 0 or arch["attr_stages"] < 1:
        raise ConfigError(f"architecture has a zero-sized layer: {arch}")

    def conv(name, k, cin, cout, bias=True):
        std = np.sqrt(2.0 / (k * k * cin))
        tensors[name + ".w"] = T.Tensor(rng.normal(0.0, std, (k, k, cin, cout)), requires_grad=True)
        if bias:
            tensors[name + ".b"] = T.Tensor(np.zeros(cout), requires_grad=True)

    def norm(name, c):
        tensors[name + ".g"] = T.Tensor(np.ones(c), requires_grad=True)
        tensors[name + ".b"] = T.Tensor(np.zeros(c), requires_grad=True)

    def dense(name, din, dout):
        std = np.sqrt(2.0 / din)
        tensors[name + ".w"] = T.Tensor(rng.normal(0.0, std, (din, dout)), requires_grad=True)
        tensors[name + ".b"] = T.Tensor(np.zeros(dout), requires_grad=True)

    c_in, L = arch["in_channels"], arch["num_attributes"]
    wc = arch["content_width"]
    conv("content.stem", 3, c_in, wc, bias=False)
    norm("content.stem.gn", wc)
    for r in range(arch["content_blocks"]):
        conv(f"content.block{r}.conv1", 3, wc, wc, bias=False)
        norm(f"content.block{r}.gn1", wc)
        conv(f"content.block{r}.conv2", 3, wc, wc, bias=False)
        norm(f"content.block{r}.gn2", wc)
    conv("content.head", 1, wc, L)

    wa = arch["attr_width"]
    cin = c_in
    for s in range(arch["attr_stages"]):
        conv(f"attr.stage{s}", 3, cin, wa)
        cin = wa
    dense("attr.head", wa, L * c_in)

    cin = c_in
    for i, wb in enumerate(arch["backbone_widths"]):
        conv(f"backbone.conv{i}", 3, cin, wb, bias=False)
        norm(f"backbone.gn{i}", wb)
        cin = wb
    dense("backbone.head", cin, arch["num_classes"])
    return ModelParams(tensors, dict(arch))


def _check_input(x: T.Tensor, arch: dict) -> None:
    if x.ndim != 4:
        raise ShapeError(f"expected an N x H x W x C image batch, got {x.shape}")
    if x.shape[3] != arch["in_channels"]:
        raise ShapeError(f"model expects {arch['in_channels']} channels, got input {x.shape}")


def encoder_input(x: T.Tensor, arch: dict) -> T.Tensor:
    """Images as the encoders see them: optical density when the OD transform is on."""
    if arch.get("pre_transform", "identity") == "od":
        return od_transform_tensor(x, np.full(arch["in_channels"], arch["generator_background"]))
    return x


def encode_content(x: T.Tensor, params: ModelParams) -> T.Tensor:
    """N×H×W×C -> N×H×W×L. Resolution preserving; instance-style group norm."""
    arch = params.arch
    _check_input(x, arch)
    a, eps = arch["leaky_slope"], arch["norm_eps"]
    wc = arch["content_width"]
    p = params.tensors
    h = encoder_input(x, arch)
    h = T.conv2d(h, p["content.stem.w"])
    h = T.leaky_relu(T.group_norm(h, wc, eps, p["content.stem.gn.g"], p["content.stem.gn.b"]), a)
    for r in range(arch["content_blocks"]):
        pre = f"content.block{r}"
        y = T.conv2d(h, p[pre + ".conv1.w"])
        y = T.leaky_relu(T.group_norm(y, wc, eps, p[pre + ".gn1.g"], p[pre + ".gn1.b"]), a)
        y = T.conv2d(y, p[pre + ".conv2.w"])
        y = T.group_norm(y, wc, eps, p[pre + ".gn2.g"], p[pre + ".gn2.b"])
        h = T.leaky_relu(h + y, a)
    return T.conv2d(h, p["content.head.w"], p["content.head.b"])


def encode_attribute(x: T.Tensor, params: ModelParams) -> T.Tensor:
    """N×H×W×C -> N×L×C via strided convs, global average pool and an affine map.

    No normalization here: per-image colour statistics are exactly what the
    attribute has to keep.
    """
    arch = params.arch
    _check_input(x, arch)
    a = arch["leaky_slope"]
    p = params.tensors
    h = encoder_input(x, arch)
    for s in range(arch["attr_stages"]):
        h = T.leaky_relu(T.conv2d(h, p[f"attr.stage{s}.w"], p[f"attr.stage{s}.b"], stride=2), a)
    pooled = T.reduce(h, "mean", (1, 2))
    flat = T.matmul(pooled, p["attr.head.w"]) + p["attr.head.b"]
    return T.reshape(flat, (x.shape[0], arch["num_attributes"], arch["in_channels"]))


def generate(zc: T.Tensor, za: T.Tensor, pre_transform: str = "identity", background=1.0) -> T.Tensor:
    """Dot-product generator; with ``pre_transform="od"`` the product is read as optical density."""
    if zc.shape[-1] != za.shape[-2]:
        raise ShapeError(f"content has L={zc.shape[-1]} but attribute has L={za.shape[-2]}")
    y = T.tensordot_lc(zc, za)
    if pre_transform == "identity":
        return y
    if pre_transform == "od":
        c = za.shape[-1]
        return od_inverse_tensor(y, np.broadcast_to(np.asarray(background, dtype=np.float64), (c,)))
    raise ConfigError(f"unknown pre_transform {pre_transform!r}")


def backbone_forward(x: T.Tensor, params: ModelParams) -> T.Tensor:
    """Four conv-norm-leaky stages (stride 1 then 2), global pool, linear head."""
    arch = params.arch
    _check_input(x, arch)
    a, eps, g = arch["leaky_slope"], arch["norm_eps"], arch["backbone_groups"]
    p = params.tensors
    h = x
    for i in range(len(arch["backbone_widths"])):
        h = T.conv2d(h, p[f"backbone.conv{i}.w"], stride=1 if i == 0 else 2)
        h = T.leaky_relu(T.group_norm(h, g, eps, p[f"backbone.gn{i}.g"], p[f"backbone.gn{i}.b"]), a)
    pooled = T.reduce(h, "mean", (1, 2))
    return T.matmul(pooled, p["backbone.head.w"]) + p["backbone.head.b"]


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


class Model:
    """Binds parameters to the encoder/generator interface used by the mixing code."""

    def __init__(self, params: ModelParams):
        self.params = params

    @property
    def arch(self) -> dict:
        return self.params.arch

    def encode_content(self, x: T.Tensor) -> T.Tensor:
        return encode_content(x, self.params)

    def encode_attribute(self, x: T.Tensor) -> T.Tensor:
        return encode_attribute(x, self.params)

    def generate(self, zc: T.Tensor, za: T.Tensor) -> T.Tensor:
        return generate(zc, za, self.arch["pre_transform"], self.arch["generator_background"])

    def logits(self, x: T.Tensor) -> T.Tensor:
        return backbone_forward(x, self.params)

    def predict(self, images: np.ndarray, batch_size: int = 250) -> np.ndarray:
        out = []
        with T.no_grad():
            for s in range(0, len(images), batch_size):
                out.append(self.logits(T.Tensor(images[s:s + batch_size])).data)
        return np.concatenate(out) if out else np.zeros((0, self.arch["num_classes"]), dtype=np.float32)

    def encodings(self, images: np.ndarray, batch_size: int = 250) -> tuple[np.ndarray, np.ndarray]:
        zcs, zas = [], []
        with T.no_grad():
            for s in range(0, len(images), batch_size):
                x = T.Tensor(images[s:s + batch_size])
                zcs.append(self.encode_content(x).data)
                zas.append(self.encode_attribute(x).data)
        return np.concatenate(zcs), np.concatenate(zas)


def save_model(path, params: ModelParams, manifest: dict | None = None) -> None:
    meta = {"arch": params.arch, **(manifest or {})}
    ctmx.save_checkpoint(path, params.numpy(), meta)


def load_model(path) -> tuple[Model, dict]:
    tensors, manifest = ctmx.load_checkpoint(path)
    arch = manifest["arch"]
    params = ModelParams({k: T.Tensor(v, requires_grad=True) for k, v in tensors.items()}, arch)
    return Model(params), manifest
