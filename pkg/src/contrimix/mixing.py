"""Attribute mixing and the ContriMix objective.

Every sample's content is rendered with the attributes of ``M`` donors from
the same batch. The synthetic images go through both encoders again, and
three l1 terms tie the second-pass encodings back to what produced them:

* content consistency: ``E^c(G(z^c_i, z^a_im))`` should match ``z^c_i``
* attribute consistency: ``E^a(G(z^c_i, z^a_im))`` should match the donor's ``z^a_im``
* self reconstruction: ``G(z^c_i, z^a_i)`` should match ``x_i``

All l1 norms are averaged over tensor elements.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, StrategyError, UsageError

log = logging.getLogger(__name__)


class EncoderPair(Protocol):
    def encode_content(self, x: T.Tensor) -> T.Tensor: ...

    def encode_attribute(self, x: T.Tensor) -> T.Tensor: ...

    def generate(self, zc: T.Tensor, za: T.Tensor) -> T.Tensor: ...


@dataclass
class MixPlan:
    """``donors[i]`` lists the M batch indices whose attributes sample i borrows."""

    donors: np.ndarray  # N×M int
    strategy: str = "random"

    @property
    def num_mixes(self) -> int:
        return self.donors.shape[1]

    def __len__(self) -> int:
        return self.donors.shape[0]


@dataclass
class LossWeights:
    lambda_s: float = 0.4
    lambda_a: float = 0.3
    lambda_c: float = 0.3
    lam: float = 0.5

    def validate(self) -> None:
        if min(self.lambda_s, self.lambda_a, self.lambda_c) < 0:
            raise ConfigError("loss weights must be non-negative")
        total = self.lambda_s + self.lambda_a + self.lambda_c
        if abs(total - 1.0) > 1e-9:
            raise ConfigError(f"lambda_s + lambda_a + lambda_c must be 1, got {total!r}")
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"lambda must lie in [0, 1], got {self.lam!r}")


def build_mix_plan(domains: Sequence[int], num_mixes: int, strategy: str, rng: np.random.Generator) -> MixPlan:
    """Draw donors uniformly without replacement from each sample's eligible pool.

    ``random`` allows any other sample; ``targeted`` only samples from other
    domains. A pool smaller than ``num_mixes`` is sampled with replacement.
    """
    domains = np.asarray(domains)
    n = len(domains)
    if n < 2:
        raise UsageError(f"mixing needs a batch of at least 2 samples, got {n}")
    if num_mixes < 0:
        raise UsageError("num_mixes must be >= 0")
    if strategy == "targeted":
        if len(np.unique(domains)) < 2:
            raise StrategyError("targeted mixing needs at least two domains in the batch; use strategy='random'")
    elif strategy != "random":
        raise StrategyError(f"unknown mix strategy {strategy!r}")

    donors = np.empty((n, num_mixes), dtype=np.int64)
    idx = np.arange(n)
    short = []
    for i in range(n):
        if strategy == "random":
            pool = idx[idx != i]
        else:
            pool = idx[domains != domains[i]]
        if len(pool) >= num_mixes:
            donors[i] = rng.choice(pool, size=num_mixes, replace=False)
        else:
            short.append(i)
            donors[i] = rng.choice(pool, size=num_mixes, replace=True)
    if short:
        log.warning(
            "%d of %d samples have fewer than %d eligible donors; their donors are drawn with replacement",
            len(short), n, num_mixes,
        )
    return MixPlan(donors, strategy)


@dataclass
class ContriMixBatchOutput:
    images: T.Tensor  # x_i, N×H×W×C
    content: T.Tensor  # z^c_i
    attribute: T.Tensor  # z^a_i
    self_recon: T.Tensor  # G(z^c_i, z^a_i)
    plan: MixPlan
    synthetic: T.Tensor | None = None  # x^s_im, row i*M + m
    content_target: T.Tensor | None = None  # z^c_i repeated per mix
    attribute_target: T.Tensor | None = None  # z^a_im (donor attributes)
    content_second: T.Tensor | None = None  # E^c(x^s_im)
    attribute_second: T.Tensor | None = None  # E^a(x^s_im)

    @property
    def n(self) -> int:
        return self.images.shape[0]

    @property
    def m(self) -> int:
        return self.plan.num_mixes

    def content_source(self) -> np.ndarray:
        """For each synthetic row, the index of the sample that supplied its content."""
        return np.repeat(np.arange(self.n), self.m)


def contrimix_forward(images: T.Tensor, plan: MixPlan, model: EncoderPair) -> ContriMixBatchOutput:
    """Encode, mix, regenerate and re-encode one batch, all on the tape."""
    n = images.shape[0]
    if len(plan) != n:
        raise UsageError(f"plan covers {len(plan)} samples but the batch has {n}")
    zc = model.encode_content(images)
    za = model.encode_attribute(images)
    recon = model.generate(zc, za)
    out = ContriMixBatchOutput(images, zc, za, recon, plan)
    m = plan.num_mixes
    if m == 0:
        return out
    source = np.repeat(np.arange(n), m)
    donor = plan.donors.reshape(-1)
    zc_rep = T.take(zc, source)
    za_don = T.take(za, donor)
    synth = model.generate(zc_rep, za_don)
    out.synthetic = synth
    out.content_target = zc_rep
    out.attribute_target = za_don
    out.content_second = model.encode_content(synth)
    out.attribute_second = model.encode_attribute(synth)
    return out


def _l1_mean(a: T.Tensor, b: T.Tensor) -> T.Tensor:
    return T.reduce(T.abs(a - b), "mean")


def loss_content_consistency(out: ContriMixBatchOutput) -> T.Tensor:
    if out.m == 0:
        return T.Tensor(0.0)
    return _l1_mean(out.content_target, out.content_second)


def loss_attribute_consistency(out: ContriMixBatchOutput) -> T.Tensor:
    if out.m == 0:
        return T.Tensor(0.0)
    return _l1_mean(out.attribute_target, out.attribute_second)


def loss_self_reconstruction(out: ContriMixBatchOutput) -> T.Tensor:
    return _l1_mean(out.images, out.self_recon)


def loss_contrimix(weights: LossWeights, l_self, l_attr, l_cont) -> T.Tensor:
    weights.validate()
    return weights.lambda_s * T._as_tensor(l_self) + weights.lambda_a * T._as_tensor(l_attr) + weights.lambda_c * T._as_tensor(l_cont)


def loss_total(weights: LossWeights, contrimix_loss, backbone_original, backbone_synthetic=None) -> T.Tensor:
    """``(1 - lam) * L_cm + lam * mean of per-sample backbone losses over originals and synthetics``.

    ``backbone_original`` holds N per-sample losses and ``backbone_synthetic``
    N*M, so the mean is the sum divided by N(M+1).
    """
    weights.validate()
    orig = T._as_tensor(backbone_original)
    parts = [orig] if backbone_synthetic is None else [orig, T._as_tensor(backbone_synthetic)]
    bb = T.reduce(T.concat(parts), "mean") if len(parts) > 1 else T.reduce(orig, "mean")
    lam = weights.lam
    if lam == 0.0:
        return T._as_tensor(contrimix_loss) * 1.0
    if lam == 1.0:
        return bb * 1.0
    return (1.0 - lam) * T._as_tensor(contrimix_loss) + lam * bb


# -- content-preserving pre-augmentation -----------------------------------------

def hflip(image: np.ndarray) -> np.ndarray:
    return image[:, ::-1]


def vflip(image: np.ndarray) -> np.ndarray:
    return image[::-1]


def rot90(image: np.ndarray) -> np.ndarray:
    return np.rot90(image, 1, axes=(0, 1))


_AUGMENTS = {"hflip": hflip, "vflip": vflip, "rot90": rot90}


def pre_augment(images: np.ndarray, rng: np.random.Generator, flags: Sequence[str] = ("hflip", "vflip", "rot90")) -> np.ndarray:
    """Apply each enabled geometric transform to each image with probability 0.5.

    Only geometry changes, so content (and the label it carries) is preserved.
    Draws one uniform per (image, flag) in a fixed order regardless of outcome.
    """
    unknown = set(flags) - set(_AUGMENTS)
    if unknown:
        raise UsageError(f"unknown augmentations {sorted(unknown)}")
    ordered = [f for f in _AUGMENTS if f in flags]
    if not ordered:
        return images
    if "rot90" in ordered and images.shape[1] != images.shape[2]:
        raise UsageError("rot90 needs square images")
    draws = rng.random((len(images), len(ordered)))
    out = np.empty_like(images)
    for i, img in enumerate(images):
        for j, name in enumerate(ordered):
            if draws[i, j] < 0.5:
                img = _AUGMENTS[name](img)
        out[i] = img
    return out
