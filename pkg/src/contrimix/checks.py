"""Finite-difference gradient checks over every differentiable op and the full training graph."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .config import TrainConfig
from .encoders import Model, arch_descriptor, init_params
from .mixing import (
    LossWeights,
    build_mix_plan,
    contrimix_forward,
    loss_attribute_consistency,
    loss_content_consistency,
    loss_contrimix,
    loss_self_reconstruction,
    loss_total,
)


@dataclass
class CheckResult:
    name: str
    seed: int
    max_rel_err: float
    n_checked: int
    rtol: float
    n_skipped: int = 0

    @property
    def passed(self) -> bool:
        return self.n_checked > 0 and self.max_rel_err <= self.rtol


def _away_from_zero(rng, shape, margin=1e-2):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * (margin + np.abs(x)), x)


class _Projector:
    """Fixed random projection to a scalar, drawn once per output shape so repeated calls agree."""

    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self.cache: dict[tuple, np.ndarray] = {}

    def __call__(self, out: T.Tensor) -> T.Tensor:
        key = tuple(out.shape)
        if key not in self.cache:
            self.cache[key] = self.rng.normal(size=key)
        return T.reduce(out * T.Tensor(self.cache[key]), "sum")


def op_cases(rng: np.random.Generator) -> dict[str, tuple[Callable, list[np.ndarray]]]:
    r = rng
    proj = _Projector(np.random.default_rng(r.integers(2**32)))
    a, b = r.normal(size=(2, 3)), r.normal(size=(2, 3))
    pos = r.uniform(0.5, 2.0, size=(2, 3))
    w_bin = r.normal(size=(2, 3))
    p23 = T.Tensor(r.normal(size=(2, 3)))
    p2, p3 = T.Tensor(r.normal(size=(2,))), T.Tensor(r.normal(size=(3,)))
    cases = {
        "add": (lambda x, y: T.reduce((x + y) * p23, "sum"), [a, b]),
        "sub": (lambda x, y: T.reduce((x - y) * p23, "sum"), [a, b]),
        "mul": (lambda x, y: T.reduce(x * y * p23, "sum"), [a, b]),
        "div": (lambda x, y: T.reduce(x / y * p23, "sum"), [a, pos]),
        "add_broadcast": (lambda x, y: T.reduce((x + y) * p23, "sum"), [a, r.normal(size=(3,))]),
        "exp": (lambda x: T.reduce(T.exp(x) * p23, "sum"), [a]),
        "log": (lambda x: T.reduce(T.log(x) * p23, "sum"), [pos]),
        "abs": (lambda x: T.reduce(T.abs(x) * p23, "sum"), [_away_from_zero(r, (2, 3))]),
        "leaky_relu": (lambda x: T.reduce(T.leaky_relu(x) * p23, "sum"), [_away_from_zero(r, (2, 3))]),
        "neg": (lambda x: T.reduce(T.neg(x) * p23, "sum"), [w_bin]),
        "clip_min": (lambda x: T.reduce(T.clip_min(x, 0.0) * p23, "sum"), [_away_from_zero(r, (2, 3))]),
        "reduce_mean": (lambda x: T.reduce(T.reduce(x, "mean", [1]) * p2, "sum"), [a]),
        "reduce_sum": (lambda x: T.reduce(T.reduce(x, "sum", [0]) * p3, "sum"), [a]),
        "matmul": (lambda x, y: proj(T.matmul(x, y)), [r.normal(size=(2, 3)), r.normal(size=(3, 4))]),
        "tensordot_lc": (lambda x, y: proj(T.tensordot_lc(x, y)), [r.normal(size=(2, 2, 3)), r.normal(size=(3, 2))]),
        "tensordot_lc_batched": (
            lambda x, y: proj(T.tensordot_lc(x, y)),
            [r.normal(size=(2, 3, 3, 4)), r.normal(size=(2, 4, 3))],
        ),
        "conv2d_same": (
            lambda x, w, bb: proj(T.conv2d(x, w, bb)),
            [r.normal(size=(1, 6, 6, 2)), r.normal(size=(3, 3, 2, 3)), r.normal(size=(3,))],
        ),
        "conv2d_valid_stride2": (
            lambda x, w: proj(T.conv2d(x, w, stride=2, padding="valid")),
            [r.normal(size=(1, 7, 7, 2)), r.normal(size=(3, 3, 2, 3))],
        ),
        "group_norm": (
            lambda x, g, bb: proj(T.group_norm(x, 2, 1e-5, g, bb)),
            [r.normal(size=(2, 4, 4, 4)), r.normal(size=(4,)), r.normal(size=(4,))],
        ),
        "cross_entropy": (lambda z: T.cross_entropy(z, [0, 1, 2, 1]), [r.normal(size=(4, 3))]),
        "reshape_take_concat": (
            lambda x: proj(T.concat([T.take(T.reshape(x, (3, 2)), [2, 0, 2]), x.reshape(3, 2)])),
            [a],
        ),
        "conv_norm_leaky_composite": (
            lambda x, w, g, bb: proj(T.leaky_relu(T.group_norm(T.conv2d(x, w), 3, 1e-5, g, bb))),
            [r.normal(size=(2, 5, 5, 2)), r.normal(size=(3, 3, 2, 3)), r.normal(size=(3,)), r.normal(size=(3,))],
        ),
    }
    return cases


def tiny_config() -> TrainConfig:
    return TrainConfig(
        num_attributes=2,
        content_width=3,
        content_blocks=1,
        attr_width=3,
        attr_stages=2,
        backbone_widths=(2, 2),
        backbone_groups=1,
        num_mixes=2,
        pre_transform="od",
    )


def composite_case(seed: int, config: TrainConfig | None = None):
    """Total training loss of a tiny model as a function of all its parameters."""
    cfg = config or tiny_config()
    rng = np.random.default_rng(seed)
    arch = arch_descriptor(cfg, 3)
    params = init_params(rng, arch)
    names = list(params.tensors)
    images = rng.uniform(0.2, 0.95, size=(3, 8, 8, 3))
    labels = np.array([0, 1, 1])
    plan = build_mix_plan([0, 1, 2], cfg.num_mixes, "random", rng)
    weights = LossWeights(cfg.lambda_s, cfg.lambda_a, cfg.lambda_c, cfg.lam)

    def f(*tensors):
        from .encoders import ModelParams

        model = Model(ModelParams(dict(zip(names, tensors)), arch))
        x = T.Tensor(images)
        out = contrimix_forward(x, plan, model)
        l_cm = loss_contrimix(
            weights, loss_self_reconstruction(out), loss_attribute_consistency(out), loss_content_consistency(out)
        )
        bb = T.cross_entropy(model.logits(x), labels, "none")
        bb_syn = T.cross_entropy(model.logits(out.synthetic), labels[out.content_source()], "none")
        return loss_total(weights, l_cm, bb, bb_syn)

    return f, [params.tensors[n].data for n in names]


def run_suite(seeds=range(10), h: float = 1e-3, rtol: float = 1e-3, composite_elements: int = 6) -> list[CheckResult]:
    results = []
    for seed in seeds:
        rng = np.random.default_rng(seed)
        for name, (f, arrays) in op_cases(rng).items():
            rep = T.gradient_check(f, [T.Tensor(a) for a in arrays], h=h, rtol=rtol)
            results.append(CheckResult(name, seed, rep.max_rel_err, rep.n_checked, rtol))
        f, arrays = composite_case(seed)
        rep = T.gradient_check(
            f, [T.Tensor(a) for a in arrays], h=h, rtol=rtol, max_elements=composite_elements, seed=seed, skip_kinks=True
        )
        results.append(CheckResult("contrimix_training_graph", seed, rep.max_rel_err, rep.n_checked, rtol, rep.n_skipped))
    return results
