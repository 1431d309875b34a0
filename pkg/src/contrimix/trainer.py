"""Optimization: AdamW, the joint ContriMix/backbone training loop, ERM and ablations."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from . import tensor as T
from .config import TrainConfig
from .encoders import Model, ModelParams, arch_descriptor, init_params, save_model
from .errors import NonFiniteError, UsageError
from .evaluation import evaluate_classifier
from .imaging import Dataset
from .mixing import (
    LossWeights,
    build_mix_plan,
    contrimix_forward,
    loss_attribute_consistency,
    loss_content_consistency,
    loss_contrimix,
    loss_self_reconstruction,
    loss_total,
    pre_augment,
)

log = logging.getLogger(__name__)

METRIC_FIELDS = ("step", "l_self", "l_attr", "l_cont", "l_backbone", "l_total")


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def create(cls, params: ModelParams) -> "OptimizerState":
        return cls(
            {k: np.zeros_like(t.data) for k, t in params.tensors.items()},
            {k: np.zeros_like(t.data) for k, t in params.tensors.items()},
        )


def adamw_step(params: ModelParams, state: OptimizerState, config: TrainConfig) -> None:
    """One bias-corrected Adam update with decoupled weight decay, in place.

    ``p <- p - lr * m_hat / (sqrt(v_hat) + eps) - lr * wd * p``. Parameters
    without a gradient this step are left untouched.
    """
    for name, p in params.tensors.items():
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise NonFiniteError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    t = state.step
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    lr, wd, eps = config.lr, config.weight_decay, config.eps
    for name, p in params.tensors.items():
        g = p.grad
        if g is None:
            continue
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = (m / c1) / (np.sqrt(v / c2) + eps)
        p.data = (p.data - lr * update - lr * wd * p.data).astype(p.data.dtype)


@dataclass
class TrainResult:
    best_params: ModelParams
    last_params: ModelParams
    metrics: list[dict] = field(default_factory=list)
    evals: list[dict] = field(default_factory=list)
    best_val_accuracy: float = -1.0
    best_epoch: int = -1
    seconds: float = 0.0

    @property
    def best_model(self) -> Model:
        return Model(self.best_params)

    def metrics_csv(self) -> str:
        return rows_to_csv(self.metrics, METRIC_FIELDS)


def _fmt(v) -> str:
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return str(v)


def rows_to_csv(rows: Sequence[dict], fields: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(fields)
    for r in rows:
        w.writerow([_fmt(r[f]) for f in fields])
    return buf.getvalue()


def _weights(config: TrainConfig) -> LossWeights:
    return LossWeights(config.lambda_s, config.lambda_a, config.lambda_c, config.lam)


def _train_step(model: Model, x: np.ndarray, labels: np.ndarray, domains: np.ndarray, config: TrainConfig, plan_rng) -> dict:
    weights = _weights(config)
    xt = T.Tensor(x)
    m = config.num_mixes if len(x) >= 2 else 0
    if config.lam == 1.0 and m == 0:
        # ERM: the ContriMix branch has zero weight and no synthetic images
        bb = T.cross_entropy(model.logits(xt), labels, "none")
        total = loss_total(weights, 0.0, bb)
        nan = float("nan")
        terms = {"l_self": nan, "l_attr": nan, "l_cont": nan}
    else:
        plan = build_mix_plan(domains, m, config.mix_strategy, plan_rng)
        out = contrimix_forward(xt, plan, model)
        l_self = loss_self_reconstruction(out)
        l_attr = loss_attribute_consistency(out)
        l_cont = loss_content_consistency(out)
        l_cm = loss_contrimix(weights, l_self, l_attr, l_cont)
        bb = T.cross_entropy(model.logits(xt), labels, "none")
        bb_syn = None
        if m > 0:
            syn = T.Tensor(out.synthetic.data) if config.detach_synthetic else out.synthetic
            bb_syn = T.cross_entropy(model.logits(syn), labels[out.content_source()], "none")
        total = loss_total(weights, l_cm, bb, bb_syn)
        terms = {"l_self": l_self.item(), "l_attr": l_attr.item(), "l_cont": l_cont.item()}
        if bb_syn is not None:
            bb = T.concat([bb, bb_syn])
    value = total.item()
    if not math.isfinite(value):
        raise NonFiniteError(f"non-finite loss {value!r}")
    model.params.zero_grad()
    total.backward()
    return {**terms, "l_backbone": float(bb.data.astype(np.float64).mean()), "l_total": value}


def train_contrimix(dataset: Dataset, config: TrainConfig, out_dir=None, dataset_id: str | None = None) -> TrainResult:
    """Jointly train encoders and backbone on ``dataset.train``.

    Minibatches are reshuffled every epoch; after each epoch the backbone is
    scored on ``val_ood`` and the best-scoring parameters are kept. All
    randomness derives from ``config.seed``: the seed sequence is spawned into
    init, shuffle, mix-plan and augmentation streams, in that order.
    """
    config.validate()
    start = time.perf_counter()
    train = dataset.train
    if len(train) < 2:
        raise UsageError("training split needs at least 2 samples")
    init_ss, shuffle_ss, plan_ss, aug_ss = np.random.SeedSequence(config.seed).spawn(4)
    shuffle_rng = np.random.default_rng(shuffle_ss)
    plan_rng = np.random.default_rng(plan_ss)
    aug_rng = np.random.default_rng(aug_ss)

    arch = arch_descriptor(config, train.images.shape[-1])
    params = init_params(np.random.default_rng(init_ss), arch)
    model = Model(params)
    state = OptimizerState.create(params)
    result = TrainResult(best_params=params.copy(), last_params=params)

    run = Path(out_dir) if out_dir is not None else None
    if run is not None:
        (run / "checkpoints").mkdir(parents=True, exist_ok=True)
        _write_manifest(run, config, dataset, dataset_id)

    n = len(train)
    bs = config.batch_size
    step = 0
    for epoch in range(config.epochs):
        order = shuffle_rng.permutation(n)
        for s in range(0, n, bs):
            idx = order[s:s + bs]
            x = pre_augment(train.images[idx], aug_rng, config.augment)
            try:
                terms = _train_step(model, x, train.labels[idx], train.domains[idx], config, plan_rng)
            except NonFiniteError:
                if run is not None:
                    save_model(run / "checkpoints" / "last.ctmx", params, _ckpt_meta(config, step))
                    _write_outputs(run, result)
                raise
            adamw_step(params, state, config)
            step += 1
            result.metrics.append({"step": step, **terms})
        report = evaluate_classifier(model, dataset.val_ood, batch_size=config.eval_batch_size)
        result.evals.append(
            {"epoch": epoch + 1, "step": step, "val_ood_accuracy": report.accuracy, "val_ood_macro_f1": report.macro_f1}
        )
        log.info("epoch %d step %d val_ood acc %.4f", epoch + 1, step, report.accuracy)
        if report.accuracy > result.best_val_accuracy:
            result.best_val_accuracy = report.accuracy
            result.best_epoch = epoch + 1
            result.best_params = params.copy()
            if run is not None:
                save_model(run / "checkpoints" / "best.ctmx", result.best_params, _ckpt_meta(config, step))
    result.seconds = time.perf_counter() - start
    if run is not None:
        save_model(run / "checkpoints" / "last.ctmx", params, _ckpt_meta(config, step))
        _write_outputs(run, result)
    return result


def train_erm(dataset: Dataset, config: TrainConfig, out_dir=None, dataset_id: str | None = None) -> TrainResult:
    """Plain cross-entropy baseline: the ContriMix loop with lam = 1 and M = 0."""
    return train_contrimix(dataset, erm_config(config), out_dir, dataset_id)


def erm_config(config: TrainConfig) -> TrainConfig:
    return config.replace(lam=1.0, num_mixes=0)


def _ckpt_meta(config: TrainConfig, step: int) -> dict:
    return {"config_hash": config.hash(), "step": step, "tool_version": __version__}


def _write_manifest(run: Path, config: TrainConfig, dataset: Dataset, dataset_id: str | None) -> None:
    manifest = {
        "config": config.to_json(),
        "config_hash": config.hash(),
        "dataset_config_hash": dataset.config_hash,
        "dataset_hash": dataset_id,
        "tool_version": __version__,
        "created_unix": time.time(),
    }
    with open(run / "config.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_outputs(run: Path, result: TrainResult) -> None:
    (run / "metrics.csv").write_text(result.metrics_csv(), encoding="utf-8")
    (run / "eval.csv").write_text(
        rows_to_csv(result.evals, ("epoch", "step", "val_ood_accuracy", "val_ood_macro_f1")), encoding="utf-8"
    )


# -- ablations -------------------------------------------------------------------

AXES = {
    "mixes": "num_mixes",
    "num_mixes": "num_mixes",
    "attributes": "num_attributes",
    "num_attributes": "num_attributes",
    "centers": "train_domains",
    "train_domains": "train_domains",
    "strategy": "mix_strategy",
    "mix_strategy": "mix_strategy",
}

DEFAULT_GRIDS = {
    "num_mixes": [1, 2, 3, 4, 5],
    "num_attributes": [3, 5, 7, 9, 11, 13],
    "train_domains": [3, 2, 1],
    "mix_strategy": ["random", "targeted"],
}

ABLATION_FIELDS = ("axis", "setting", "seed", "val_ood_accuracy", "test_ood_accuracy")


def resolve_axis(axis: str) -> str:
    try:
        return AXES[axis.replace("-", "_").lower()]
    except KeyError:
        raise UsageError(f"unknown ablation axis {axis!r}; choose from {sorted(set(AXES))}") from None


def parse_grid(axis: str, values: Sequence | None) -> list:
    key = resolve_axis(axis)
    if values is None:
        return list(DEFAULT_GRIDS[key])
    vals = [v.strip() if isinstance(v, str) else v for v in values]
    vals = [v for v in vals if v != ""]
    if not vals:
        raise UsageError("ablation grid is empty")
    if key == "mix_strategy":
        return [str(v) for v in vals]
    return [int(v) for v in vals]


def format_mean_std(values: Sequence[float]) -> str:
    """Percent with one decimal and the sample standard deviation in parentheses."""
    arr = np.asarray(values, dtype=np.float64) * 100.0
    std = float(arr.std(ddof=1)) if len(arr) > 1 else 0.0
    return f"{arr.mean():.1f} ({std:.1f})"


@dataclass
class AblationResult:
    axis: str
    rows: list[dict]
    aggregates: list[dict]

    def to_csv(self) -> str:
        return rows_to_csv(self.rows + self.aggregates, ABLATION_FIELDS)

    def table(self) -> str:
        lines = [f"{self.axis:<16} {'OOD Val Accuracy (%)':<22} Test Accuracy (%)"]
        for a in self.aggregates:
            lines.append(f"{a['setting']:<16} {a['val_ood_accuracy']:<22} {a['test_ood_accuracy']}")
        return "\n".join(lines)


def run_ablation(
    axis: str,
    values: Sequence | None,
    dataset: Dataset,
    base_config: TrainConfig,
    seeds: Sequence[int] = (0,),
    out_dir=None,
) -> AblationResult:
    """Train one ContriMix model per (setting, seed) and score the best checkpoint OOD."""
    key = resolve_axis(axis)
    grid = parse_grid(axis, values)
    if not seeds:
        raise UsageError("need at least one seed")
    rows = []
    aggregates = []
    for setting in grid:
        ds = dataset
        changes = {}
        if key == "train_domains":
            doms = dataset.train_domains
            if not 1 <= setting <= len(doms):
                raise UsageError(f"dataset has {len(doms)} training domains; cannot keep {setting}")
            ds = dataset.restrict_train_domains(doms[:setting])
        else:
            changes[key] = setting
        per = []
        for seed in seeds:
            cfg = base_config.replace(seed=int(seed), **changes)
            res = train_contrimix(ds, cfg)
            best = res.best_model
            val = evaluate_classifier(best, ds.val_ood, batch_size=cfg.eval_batch_size).accuracy
            test = evaluate_classifier(best, ds.test_ood, batch_size=cfg.eval_batch_size).accuracy
            row = {"axis": key, "setting": setting, "seed": int(seed), "val_ood_accuracy": val, "test_ood_accuracy": test}
            log.info("ablation %s=%s seed %d: val %.4f test %.4f", key, setting, seed, val, test)
            rows.append(row)
            per.append(row)
        aggregates.append(
            {
                "axis": key,
                "setting": setting,
                "seed": "mean (std)",
                "val_ood_accuracy": format_mean_std([r["val_ood_accuracy"] for r in per]),
                "test_ood_accuracy": format_mean_std([r["test_ood_accuracy"] for r in per]),
            }
        )
    result = AblationResult(key, rows, aggregates)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "ablation.csv").write_text(result.to_csv(), encoding="utf-8")
    return result
