"""Classifier metrics, disentanglement probes, PCA embeddings and image grids."""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import DomainError, UsageError


@dataclass
class EvalReport:
    split: str
    accuracy: float
    macro_f1: float
    per_domain_accuracy: dict[int, float] = field(default_factory=dict)
    n: int = 0
    attribute_probe: float | None = None
    content_probe: float | None = None

    def to_json(self) -> dict:
        d = asdict(self)
        d["per_domain_accuracy"] = {str(k): v for k, v in self.per_domain_accuracy.items()}
        return d

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def per_class_f1(pred: np.ndarray, labels: np.ndarray, num_classes: int) -> np.ndarray:
    f1 = np.zeros(num_classes)
    for k in range(num_classes):
        tp = int(np.sum((pred == k) & (labels == k)))
        fp = int(np.sum((pred == k) & (labels != k)))
        fn = int(np.sum((pred != k) & (labels == k)))
        denom = 2 * tp + fp + fn
        if denom == 0:
            warnings.warn(f"class {k} absent from predictions and labels; its F1 is set to 0", stacklevel=2)
            continue
        f1[k] = 2 * tp / denom
    return f1


def macro_f1(pred, labels, num_classes: int) -> float:
    return float(per_class_f1(np.asarray(pred), np.asarray(labels), num_classes).mean())


def evaluate_classifier(model, split, batch_size: int = 250) -> EvalReport:
    """Argmax accuracy, macro F1 and per-domain accuracy of ``model``'s backbone on ``split``."""
    if isinstance(model, (str, Path)):
        from .encoders import load_model

        model, _ = load_model(model)
    if len(split) == 0:
        raise UsageError(f"split {split.name!r} is empty")
    logits = model.predict(split.images, batch_size)
    pred = logits.argmax(axis=1)
    labels = np.asarray(split.labels)
    correct = pred == labels
    per_domain = {int(d): float(correct[split.domains == d].mean()) for d in np.unique(split.domains)}
    return EvalReport(
        split=split.name,
        accuracy=float(correct.mean()),
        macro_f1=macro_f1(pred, labels, model.arch["num_classes"]),
        per_domain_accuracy=per_domain,
        n=len(labels),
    )


# -- probes -----------------------------------------------------------------------

PROBE_ITERATIONS = 200
PROBE_LR = 0.1


def probe_features(encodings: np.ndarray, probe_kind: str) -> np.ndarray:
    enc = np.asarray(encodings, dtype=np.float64)
    if probe_kind == "attribute":
        return enc.reshape(len(enc), -1)
    if probe_kind == "content-pooled":
        return enc.mean(axis=(1, 2)) if enc.ndim == 4 else enc.reshape(len(enc), -1)
    raise UsageError(f"probe_kind must be 'attribute' or 'content-pooled', got {probe_kind!r}")


def domain_probe(encodings, domain_ids, probe_kind: str = "attribute", seed: int = 0) -> float:
    """Held-out accuracy of a softmax-regression probe predicting domain from encodings.

    Protocol: seeded 50/50 split, features standardized with the fitting
    half's statistics, zero-initialized weights, 200 full-batch gradient
    descent steps at lr 0.1 on the mean cross-entropy.
    """
    x = probe_features(encodings, probe_kind)
    domains = np.asarray(domain_ids)
    classes, y = np.unique(domains, return_inverse=True)
    if len(classes) < 2:
        raise UsageError("domain probe needs at least two domains")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(x))
    half = len(x) // 2
    fit, held = perm[:half], perm[half:]
    if half == 0 or len(held) == 0:
        raise UsageError("domain probe needs at least two samples")
    mu = x[fit].mean(axis=0)
    sd = x[fit].std(axis=0)
    sd[sd < 1e-8] = 1.0
    xf = (x[fit] - mu) / sd
    xh = (x[held] - mu) / sd
    k = len(classes)
    w = np.zeros((x.shape[1], k))
    b = np.zeros(k)
    onehot = np.eye(k)[y[fit]]
    for _ in range(PROBE_ITERATIONS):
        z = xf @ w + b
        z -= z.max(axis=1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        g = (p - onehot) / len(xf)
        w -= PROBE_LR * (xf.T @ g)
        b -= PROBE_LR * g.sum(axis=0)
    return float(np.mean((xh @ w + b).argmax(axis=1) == y[held]))


def balanced_probe_indices(domains, labels, per_cell: int, rng: np.random.Generator) -> np.ndarray:
    """Equal numbers of samples for every (domain, label) cell, so class prevalence cannot leak domain."""
    domains = np.asarray(domains)
    labels = np.asarray(labels)
    cells = [(d, l) for d in np.unique(domains) for l in np.unique(labels)]
    sizes = [int(np.sum((domains == d) & (labels == l))) for d, l in cells]
    take = min([per_cell] + [s for s in sizes if s > 0])
    out = []
    for (d, l), s in zip(cells, sizes):
        if s == 0:
            continue
        pool = np.flatnonzero((domains == d) & (labels == l))
        out.append(np.sort(rng.choice(pool, size=take, replace=False)))
    return np.concatenate(out)


def probe_encoders(model, split, per_cell: int = 100, seed: int = 0) -> tuple[float, float]:
    """(attribute probe accuracy, pooled-content probe accuracy) on a class-balanced subset of ``split``."""
    rng = np.random.default_rng(seed)
    idx = balanced_probe_indices(split.domains, split.labels, per_cell, rng)
    zc, za = model.encodings(split.images[idx])
    doms = split.domains[idx]
    return domain_probe(za, doms, "attribute", seed), domain_probe(zc, doms, "content-pooled", seed)


# -- PCA ----------------------------------------------------------------------------

@dataclass
class PCAResult:
    coords: np.ndarray
    components: np.ndarray  # out_dims × D
    explained_variance: np.ndarray
    mean: np.ndarray

    def reconstruct(self, k: int | None = None) -> np.ndarray:
        k = len(self.components) if k is None else k
        return self.coords[:, :k] @ self.components[:k] + self.mean


def pca_embed(encodings, out_dims: int = 2, tol: float = 1e-8, max_iter: int = 1000) -> PCAResult:
    """Top principal components by power iteration with deflation on the covariance."""
    x = np.asarray(encodings, dtype=np.float64).reshape(len(encodings), -1)
    if len(x) < out_dims:
        raise UsageError(f"need at least {out_dims} samples, got {len(x)}")
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / max(len(x) - 1, 1)
    total = np.trace(cov)
    if total <= 1e-12:
        raise DomainError("degenerate input: encodings have zero variance")
    d = cov.shape[0]
    rng = np.random.default_rng(0)
    comps, variances = [], []
    work = cov.copy()
    for _ in range(min(out_dims, d)):
        v = rng.standard_normal(d)
        v /= np.linalg.norm(v)
        lam = 0.0
        for _ in range(max_iter):
            wv = work @ v
            norm = np.linalg.norm(wv)
            if norm <= 1e-300:
                break
            v_new = wv / norm
            lam_new = float(v_new @ work @ v_new)
            converged = abs(lam_new - lam) <= tol * max(abs(lam_new), 1e-300) and np.linalg.norm(v_new - v) < 1e-6
            v, lam = v_new, lam_new
            if converged:
                break
        # deterministic sign: largest-magnitude loading positive
        if v[np.argmax(np.abs(v))] < 0:
            v = -v
        comps.append(v)
        variances.append(max(lam, 0.0))
        work = work - lam * np.outer(v, v)
    components = np.array(comps)
    return PCAResult(xc @ components.T, components, np.array(variances), mean)


def export_embedding_csv(path, coords: np.ndarray, domain_ids, splits) -> None:
    if isinstance(splits, str):
        splits = [splits] * len(coords)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "y", "domain_id", "split"])
        for (cx, cy), d, s in zip(coords[:, :2], domain_ids, splits):
            w.writerow([repr(float(cx)), repr(float(cy)), int(d), s])


# -- image grids -------------------------------------------------------------------

def _as_model(checkpoint):
    if isinstance(checkpoint, (str, Path)):
        from .encoders import load_model

        return load_model(checkpoint)[0]
    return checkpoint


def render_mix_grid(checkpoint, content_sources: np.ndarray, attribute_donors: np.ndarray, path=None) -> np.ndarray:
    """Grid of (1 + n_content) × (1 + n_donor) cells.

    Row 0 shows the donors, column 0 the content sources, and cell (i, j) is
    ``G(z^c_i, z^a_j)``; with the same images on both axes the diagonal holds
    self-reconstructions. The top-left cell is left white.
    """
    model = _as_model(checkpoint)
    src = np.asarray(content_sources, dtype=np.float32)
    don = np.asarray(attribute_donors, dtype=np.float32)
    n, h, w, c = src.shape
    k = len(don)
    with T.no_grad():
        zc = model.encode_content(T.Tensor(src))
        za = model.encode_attribute(T.Tensor(don))
        mixed = model.generate(T.take(zc, np.repeat(np.arange(n), k)), T.take(za, np.tile(np.arange(k), n))).data
    grid = np.ones(((n + 1) * h, (k + 1) * w, c), dtype=np.float32)
    for j in range(k):
        grid[:h, (j + 1) * w:(j + 2) * w] = don[j]
    for i in range(n):
        grid[(i + 1) * h:(i + 2) * h, :w] = src[i]
        for j in range(k):
            grid[(i + 1) * h:(i + 2) * h, (j + 1) * w:(j + 2) * w] = mixed[i * k + j]
    grid = np.clip(grid, 0.0, 1.0)
    if path is not None:
        from .imaging import write_ppm

        try:
            write_ppm(path, grid)
        except OSError as exc:
            raise OSError(f"could not write mix grid to {path}: {exc}") from exc
    return grid


def normalize_panel(panel: np.ndarray) -> np.ndarray:
    lo, hi = float(panel.min()), float(panel.max())
    if hi - lo <= 1e-12:
        return np.full(panel.shape, 0.5, dtype=np.float32)
    return ((panel - lo) / (hi - lo)).astype(np.float32)


def render_content_channels(checkpoint, images: np.ndarray, path=None) -> np.ndarray:
    """One row per image: the original, then each content channel as a min-max normalized gray panel."""
    model = _as_model(checkpoint)
    imgs = np.asarray(images, dtype=np.float32)
    n, h, w, c = imgs.shape
    with T.no_grad():
        zc = model.encode_content(T.Tensor(imgs)).data
    L = zc.shape[-1]
    grid = np.zeros((n * h, (L + 1) * w, 3), dtype=np.float32)
    for i in range(n):
        grid[i * h:(i + 1) * h, :w] = np.clip(imgs[i][..., :3], 0, 1)
        for l in range(L):
            grid[i * h:(i + 1) * h, (l + 1) * w:(l + 2) * w] = normalize_panel(zc[i, ..., l])[..., None]
    if path is not None:
        from .imaging import write_ppm

        try:
            write_ppm(path, grid)
        except OSError as exc:
            raise OSError(f"could not write content panels to {path}: {exc}") from exc
    return grid


def split_names(split_list: Sequence[str], counts: Sequence[int]) -> list[str]:
    out: list[str] = []
    for name, k in zip(split_list, counts):
        out.extend([name] * k)
    return out
