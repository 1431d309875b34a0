"""Synthetic microscopy with known ground truth.

Content is a non-negative stain concentration field ``c`` (H×W×L0) and each
domain owns a stain matrix ``M`` (L0×C, unit-norm non-negative rows), a
background intensity ``I0`` and a sensor noise level. Brightfield images
follow Beer-Lambert, ``I = I0 * exp(-c @ M)``, so optical density
``-log(I / I0)`` is linear in ``c``; fluorescence images are ``I = c @ M``.

The class label is a function of the number of "nuclei" blobs only, so it is
invariant to the domain an image was rendered in.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

from . import ctmx
from . import tensor as T
from .errors import ConfigError, ShapeError, SingularMatrixError, UsageError

log = logging.getLogger(__name__)

OD_FLOOR = 1e-4

# Canonical hematoxylin, eosin and DAB-like colour vectors.
CANONICAL_STAINS = np.array(
    [
        [0.65, 0.70, 0.29],
        [0.07, 0.99, 0.11],
        [0.27, 0.57, 0.78],
    ]
)
CANONICAL_STAINS = CANONICAL_STAINS / np.linalg.norm(CANONICAL_STAINS, axis=1, keepdims=True)

SPLITS = ("train", "val_ood", "test_ood")


@dataclass
class DomainSpec:
    domain_id: int
    stain_matrix: np.ndarray
    background_intensity: np.ndarray
    noise_sigma: float = 0.0
    modality: str = "brightfield"

    def __post_init__(self):
        self.stain_matrix = np.asarray(self.stain_matrix, dtype=np.float64)
        self.background_intensity = np.asarray(self.background_intensity, dtype=np.float64)
        m = self.stain_matrix
        if m.ndim != 2:
            raise ConfigError(f"stain matrix must be L0 x C, got shape {m.shape}")
        if np.any(m < 0):
            raise ConfigError("stain matrix entries must be non-negative")
        if not np.allclose(np.linalg.norm(m, axis=1), 1.0, atol=1e-6):
            raise ConfigError("stain matrix rows must have unit l2 norm")
        if self.background_intensity.shape != (m.shape[1],):
            raise ConfigError(f"background intensity needs {m.shape[1]} channels, got {self.background_intensity.shape}")
        if self.modality not in ("brightfield", "fluorescence"):
            raise ConfigError(f"unknown modality {self.modality!r}")
        i0 = self.background_intensity
        if np.any(i0 > 1) or np.any(i0 < 0):
            raise ConfigError("background intensity must lie in (0, 1]")
        if self.modality == "brightfield" and np.any(i0 <= 0):
            raise ConfigError("brightfield needs a strictly positive background in every channel")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")

    @property
    def num_stains(self) -> int:
        return self.stain_matrix.shape[0]

    @property
    def channels(self) -> int:
        return self.stain_matrix.shape[1]

    def to_json(self) -> dict:
        return {
            "domain_id": int(self.domain_id),
            "stain_matrix": self.stain_matrix.tolist(),
            "background_intensity": self.background_intensity.tolist(),
            "noise_sigma": float(self.noise_sigma),
            "modality": self.modality,
        }

    @classmethod
    def from_json(cls, d: dict) -> "DomainSpec":
        return cls(
            domain_id=int(d["domain_id"]),
            stain_matrix=np.array(d["stain_matrix"]),
            background_intensity=np.array(d["background_intensity"]),
            noise_sigma=float(d["noise_sigma"]),
            modality=d["modality"],
        )


@dataclass
class ConcentrationField:
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 3:
            raise ShapeError(f"concentration field must be H x W x L0, got {v.shape}")
        if not np.all(np.isfinite(v)) or np.any(v < 0):
            raise ConfigError("concentration must be finite and non-negative")
        self.values = v


@dataclass
class BlobParams:
    """Content generator settings.

    ``negative_counts`` and ``positive_counts`` are the blob counts for label
    0 and 1; a sample is positive with probability ``positive_fraction``.
    Labels are ``count >= threshold``.
    """

    negative_counts: tuple[int, ...] = (2, 3, 4)
    positive_counts: tuple[int, ...] = (5, 6, 7)
    threshold: int = 5
    positive_fraction: float = 0.5
    sigma_range: tuple[float, float] = (1.3, 2.0)
    nuclei_amplitude: float = 1.0
    cytoplasm_amplitude: float = 0.4
    texture_amplitude: float = 0.05
    count: int | None = None  # fixed count override

    def validate(self, h: int, w: int) -> None:
        if 6 * self.sigma_range[1] > min(h, w):
            raise ConfigError(f"blob sigma {self.sigma_range[1]} too large for a {h}x{w} image")
        if self.sigma_range[0] <= 0 or self.sigma_range[0] > self.sigma_range[1]:
            raise ConfigError(f"invalid sigma range {self.sigma_range}")
        if any(c >= self.threshold for c in self.negative_counts) or any(c < self.threshold for c in self.positive_counts):
            raise ConfigError("negative counts must be below and positive counts at or above the threshold")
        if not 0 <= self.positive_fraction <= 1:
            raise ConfigError("positive_fraction must lie in [0, 1]")


@dataclass
class SyntheticSample:
    image: np.ndarray
    label: int
    domain_id: int
    truth_concentration: ConcentrationField
    truth_stain: np.ndarray


def _smooth_field(rng: np.random.Generator, h: int, w: int, sigma: float) -> np.ndarray:
    f = gaussian_filter(rng.standard_normal((h, w)), sigma=sigma, mode="wrap")
    lo, hi = f.min(), f.max()
    return (f - lo) / (hi - lo) if hi > lo else np.zeros_like(f)


def label_from_count(count: int, threshold: int) -> int:
    return int(count >= threshold)


def sample_concentration(
    rng: np.random.Generator, h: int, w: int, l0: int, blob_params: BlobParams | None = None
) -> tuple[ConcentrationField, int]:
    """Draw a concentration field and its label.

    Channel 0 holds Gaussian nuclei blobs, channel 1 a smooth cytoplasm
    background and further channels faint texture.
    """
    bp = blob_params or BlobParams()
    if h < 16 or w < 16:
        raise ConfigError(f"images must be at least 16x16, got {h}x{w}")
    if l0 < 2:
        raise ConfigError(f"need at least 2 stains, got {l0}")
    bp.validate(h, w)

    if bp.count is not None:
        count = int(bp.count)
    elif rng.random() < bp.positive_fraction:
        count = int(rng.choice(bp.positive_counts))
    else:
        count = int(rng.choice(bp.negative_counts))

    values = np.zeros((h, w, l0))
    yy, xx = np.mgrid[0:h, 0:w]
    density = np.zeros((h, w))
    margin = 2 * bp.sigma_range[1]
    for _ in range(count):
        cy = rng.uniform(margin, h - 1 - margin)
        cx = rng.uniform(margin, w - 1 - margin)
        s = rng.uniform(*bp.sigma_range)
        density += np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * s * s))
    # saturating sum keeps overlapping nuclei bounded by the amplitude
    values[..., 0] = bp.nuclei_amplitude * (1.0 - np.exp(-2.0 * density))
    values[..., 1] = bp.cytoplasm_amplitude * _smooth_field(rng, h, w, sigma=4.0)
    for ch in range(2, l0):
        values[..., ch] = bp.texture_amplitude * _smooth_field(rng, h, w, sigma=1.0)
    return ConcentrationField(values), label_from_count(count, bp.threshold)


def _mix(c: np.ndarray, m: np.ndarray) -> np.ndarray:
    return np.einsum("hwl,lc->hwc", c, m)


def render_brightfield(
    c: ConcentrationField, d: DomainSpec, rng: np.random.Generator | None = None, clamp: bool = True
) -> np.ndarray:
    if d.modality != "brightfield":
        raise UsageError(f"domain {d.domain_id} is {d.modality}, not brightfield")
    img = d.background_intensity * np.exp(-_mix(c.values, d.stain_matrix))
    if d.noise_sigma > 0:
        if rng is None:
            raise UsageError("noisy rendering needs an rng")
        img = img + rng.normal(0.0, d.noise_sigma, img.shape)
    return np.clip(img, 0.0, 1.0) if clamp else img


def render_fluorescence(
    c: ConcentrationField, d: DomainSpec, rng: np.random.Generator | None = None, clamp: bool = True
) -> np.ndarray:
    if d.modality != "fluorescence":
        raise UsageError(f"domain {d.domain_id} is {d.modality}, not fluorescence")
    img = _mix(c.values, d.stain_matrix)
    if d.noise_sigma > 0:
        if rng is None:
            raise UsageError("noisy rendering needs an rng")
        img = img + rng.normal(0.0, d.noise_sigma, img.shape)
    return np.clip(img, 0.0, 1.0) if clamp else img


def render(c: ConcentrationField, d: DomainSpec, rng: np.random.Generator | None = None, clamp: bool = True) -> np.ndarray:
    if d.modality == "brightfield":
        return render_brightfield(c, d, rng, clamp)
    return render_fluorescence(c, d, rng, clamp)


def _check_background(i0) -> np.ndarray:
    i0 = np.asarray(i0, dtype=np.float64)
    if np.any(i0 <= 0):
        raise ConfigError(f"background intensity {i0.tolist()} has a non-positive channel")
    return i0


def od_transform(image, i0, floor: float = OD_FLOOR) -> np.ndarray:
    """Optical density ``-log(max(I, floor) / I0)``."""
    i0 = _check_background(i0)
    return -np.log(np.maximum(np.asarray(image, dtype=np.float64), floor) / i0)


def od_inverse(od, i0) -> np.ndarray:
    i0 = _check_background(i0)
    return i0 * np.exp(-np.asarray(od, dtype=np.float64))


def od_transform_tensor(x: T.Tensor, i0, floor: float = OD_FLOOR) -> T.Tensor:
    i0 = _check_background(i0)
    return T.neg(T.log(T.clip_min(x, floor) / T.Tensor(i0)))


def od_inverse_tensor(od: T.Tensor, i0) -> T.Tensor:
    i0 = _check_background(i0)
    return T.Tensor(i0) * T.exp(T.neg(od))


def deconvolve_oracle(image, d: DomainSpec, cond_limit: float = 1e10) -> np.ndarray:
    """Per-pixel least-squares estimate of the concentration that produced ``image``.

    Solves ``c @ M = y`` through the normal equations, with ``y`` the optical
    density for brightfield and the raw intensity for fluorescence. Works on
    a single H×W×C image or an N×H×W×C batch. The estimate is not clipped, so
    noise can make it slightly negative.
    """
    m = d.stain_matrix
    l0, c = m.shape
    if l0 > c:
        raise SingularMatrixError(f"{l0} stains cannot be separated from {c} channels")
    gram = m @ m.T
    cond = np.linalg.cond(gram)
    if not np.isfinite(cond) or cond > cond_limit:
        raise SingularMatrixError(f"stain matrix is rank deficient (condition number {cond:.3e})")
    img = np.asarray(image, dtype=np.float64)
    y = od_transform(img, d.background_intensity) if d.modality == "brightfield" else img
    return np.linalg.solve(gram, (y @ m.T).reshape(-1, l0).T).T.reshape(y.shape[:-1] + (l0,))


# -- domain and dataset generation ---------------------------------------------

def _rotate_towards(v: np.ndarray, angle: float, rng: np.random.Generator) -> np.ndarray:
    axis = rng.standard_normal(v.shape)
    axis -= axis.dot(v) * v
    axis /= np.linalg.norm(axis)
    return np.cos(angle) * v + np.sin(angle) * axis


def sample_stain_matrix(
    rng: np.random.Generator, l0: int, c: int = 3, max_angle_deg: float = 25.0, min_angle_deg: float = 0.0
) -> np.ndarray:
    """Unit-norm non-negative perturbations of the canonical stain vectors."""
    if c != CANONICAL_STAINS.shape[1] or l0 > CANONICAL_STAINS.shape[0]:
        raise ConfigError(f"canonical stains cover up to {CANONICAL_STAINS.shape[0]} stains over 3 channels")
    rows = []
    for base in CANONICAL_STAINS[:l0]:
        for _ in range(1000):
            angle = np.deg2rad(rng.uniform(min_angle_deg, max_angle_deg))
            v = _rotate_towards(base, angle, rng)
            if np.all(v >= 0):
                break
        else:
            v = base
        rows.append(v / np.linalg.norm(v))
    return np.array(rows)


@dataclass
class GenConfig:
    height: int = 32
    width: int = 32
    channels: int = 3
    num_stains: int = 3
    modality: str = "brightfield"
    train_domains: tuple[int, ...] = (0, 1, 2)
    val_domains: tuple[int, ...] = (3,)
    test_domains: tuple[int, ...] = (4,)
    n_train: int = 2000
    n_val: int = 400
    n_test: int = 400
    max_angle_deg: float = 25.0
    min_angle_deg: float = 8.0
    background_range: tuple[float, float] = (0.85, 1.0)
    noise_range: tuple[float, float] = (0.005, 0.02)
    # prevalence of the positive class per training domain, aligned with
    # train_domains; OOD domains always use blob.positive_fraction
    train_positive_fractions: tuple[float, ...] | None = (0.95, 0.5, 0.05)
    blob: BlobParams = field(default_factory=BlobParams)

    def validate(self) -> None:
        splits = [set(self.train_domains), set(self.val_domains), set(self.test_domains)]
        if not self.train_domains:
            raise ConfigError("need at least one training domain")
        if splits[0] & (splits[1] | splits[2]):
            raise ConfigError(
                f"training domains {sorted(splits[0])} overlap OOD domains {sorted(splits[1] | splits[2])}"
            )
        if splits[1] & splits[2]:
            raise ConfigError("validation and test OOD domains overlap")
        if self.train_positive_fractions is not None and len(self.train_positive_fractions) < len(self.train_domains):
            raise ConfigError("train_positive_fractions needs one entry per training domain")
        self.blob.validate(self.height, self.width)

    def to_json(self) -> dict:
        return json.loads(json.dumps(dataclasses.asdict(self)))

    @classmethod
    def from_json(cls, d: dict) -> "GenConfig":
        d = dict(d)
        blob = BlobParams(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.pop("blob", {}).items()})
        kwargs = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(blob=blob, **kwargs)


def config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode("utf-8")).hexdigest()[:16]


def make_domain(seed: int, domain_id: int, cfg: GenConfig) -> DomainSpec:
    # stream (seed, domain_id, 0): the same id yields the same domain in every config
    rng = np.random.default_rng(np.random.SeedSequence([seed, domain_id, 0]))
    stains = sample_stain_matrix(rng, cfg.num_stains, cfg.channels, cfg.max_angle_deg, cfg.min_angle_deg)
    if cfg.modality == "brightfield":
        i0 = rng.uniform(*cfg.background_range, size=cfg.channels)
    else:
        i0 = np.ones(cfg.channels)
    sigma = float(rng.uniform(*cfg.noise_range))
    return DomainSpec(domain_id, stains, i0, sigma, cfg.modality)


@dataclass
class Split:
    name: str
    images: np.ndarray  # N×H×W×C float32
    labels: np.ndarray
    domains: np.ndarray
    concentrations: np.ndarray  # N×H×W×L0 float32

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, index) -> "Split":
        index = np.asarray(index)
        return Split(self.name, self.images[index], self.labels[index], self.domains[index], self.concentrations[index])

    def samples(self, roster: dict[int, DomainSpec]) -> Iterator[SyntheticSample]:
        for i in range(len(self)):
            d = int(self.domains[i])
            yield SyntheticSample(
                self.images[i], int(self.labels[i]), d, ConcentrationField(self.concentrations[i]), roster[d].stain_matrix
            )


@dataclass
class Dataset:
    train: Split
    val_ood: Split
    test_ood: Split
    roster: dict[int, DomainSpec]
    config: GenConfig
    seed: int
    config_hash: str

    def split(self, name: str) -> Split:
        if name not in SPLITS:
            raise UsageError(f"unknown split {name!r}; expected one of {SPLITS}")
        return getattr(self, name)

    @property
    def train_domains(self) -> tuple[int, ...]:
        return tuple(sorted(set(int(d) for d in self.train.domains)))

    def restrict_train_domains(self, keep: Sequence[int]) -> "Dataset":
        """Drop training samples whose domain is not in ``keep``."""
        keep = set(int(k) for k in keep)
        mask = np.isin(self.train.domains, sorted(keep))
        if not mask.any():
            raise ConfigError(f"no training samples in domains {sorted(keep)}")
        return dataclasses.replace(self, train=self.train.subset(np.flatnonzero(mask)))


def _generate_split(name, split_idx, count, domains, cfg, seed, roster) -> Split:
    h, w, c, l0 = cfg.height, cfg.width, cfg.channels, cfg.num_stains
    images = np.empty((count, h, w, c), dtype=np.float32)
    conc = np.empty((count, h, w, l0), dtype=np.float32)
    labels = np.empty(count, dtype=np.int64)
    doms = np.empty(count, dtype=np.int64)
    fractions = {}
    if name == "train" and cfg.train_positive_fractions is not None:
        fractions = dict(zip(cfg.train_domains, cfg.train_positive_fractions))
    for i in range(count):
        d = domains[i % len(domains)]
        # per-sample stream (seed, 1000 + split, i): shardable and order independent
        rng = np.random.default_rng(np.random.SeedSequence([seed, 1000 + split_idx, i]))
        bp = dataclasses.replace(cfg.blob, positive_fraction=fractions.get(d, cfg.blob.positive_fraction))
        field_, label = sample_concentration(rng, h, w, l0, bp)
        images[i] = render(field_, roster[d], rng)
        conc[i] = field_.values
        labels[i] = label
        doms[i] = d
    return Split(name, images, labels, doms, conc)


def make_dataset(gen_config: GenConfig | None = None, rng_seed: int = 0) -> Dataset:
    cfg = gen_config or GenConfig()
    cfg.validate()
    all_ids = list(cfg.train_domains) + list(cfg.val_domains) + list(cfg.test_domains)
    roster = {d: make_domain(rng_seed, d, cfg) for d in all_ids}
    train = _generate_split("train", 0, cfg.n_train, list(cfg.train_domains), cfg, rng_seed, roster)
    val = _generate_split("val_ood", 1, cfg.n_val, list(cfg.val_domains), cfg, rng_seed, roster)
    test = _generate_split("test_ood", 2, cfg.n_test, list(cfg.test_domains), cfg, rng_seed, roster)
    h = config_hash({"config": cfg.to_json(), "seed": rng_seed})
    return Dataset(train, val, test, roster, cfg, rng_seed, h)


# -- on-disk format --------------------------------------------------------------

FORMAT_NAME = "contrimix-dataset"


def save_dataset(ds: Dataset, out_dir) -> Path:
    """Write ``manifest.json`` plus one CTMX image and concentration file per sample."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    splits = {}
    for name in SPLITS:
        sp = ds.split(name)
        (out / "samples" / name).mkdir(parents=True, exist_ok=True)
        entries = []
        for i in range(len(sp)):
            stem = f"samples/{name}/{i:05d}"
            ctmx.save_tensor(out / f"{stem}.image.ctmx", sp.images[i])
            ctmx.save_tensor(out / f"{stem}.conc.ctmx", sp.concentrations[i])
            entries.append({"index": i, "stem": stem, "label": int(sp.labels[i]), "domain_id": int(sp.domains[i])})
        splits[name] = entries
    manifest = {
        "format": FORMAT_NAME,
        "version": 1,
        "seed": ds.seed,
        "config_hash": ds.config_hash,
        "geometry": {
            "height": ds.config.height,
            "width": ds.config.width,
            "channels": ds.config.channels,
            "num_stains": ds.config.num_stains,
        },
        "gen_config": ds.config.to_json(),
        "domains": [ds.roster[d].to_json() for d in sorted(ds.roster)],
        "splits": splits,
    }
    with open(out / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return out


def load_dataset(path) -> Dataset:
    root = Path(path)
    mf = root / "manifest.json"
    if not mf.is_file():
        raise FileNotFoundError(f"no dataset manifest at {mf}")
    with open(mf, encoding="utf-8") as fh:
        manifest = json.load(fh)
    if manifest.get("format") != FORMAT_NAME:
        raise UsageError(f"{mf} is not a {FORMAT_NAME} manifest")
    cfg = GenConfig.from_json(manifest["gen_config"])
    roster = {d["domain_id"]: DomainSpec.from_json(d) for d in manifest["domains"]}
    splits = {}
    for name in SPLITS:
        entries = manifest["splits"][name]
        geo = manifest["geometry"]
        n = len(entries)
        images = np.empty((n, geo["height"], geo["width"], geo["channels"]), dtype=np.float32)
        conc = np.empty((n, geo["height"], geo["width"], geo["num_stains"]), dtype=np.float32)
        for i, e in enumerate(entries):
            images[i] = ctmx.load_tensor(root / f"{e['stem']}.image.ctmx")
            conc[i] = ctmx.load_tensor(root / f"{e['stem']}.conc.ctmx")
        labels = np.array([e["label"] for e in entries], dtype=np.int64)
        doms = np.array([e["domain_id"] for e in entries], dtype=np.int64)
        splits[name] = Split(name, images, labels, doms, conc)
    return Dataset(splits["train"], splits["val_ood"], splits["test_ood"], roster, cfg, manifest["seed"], manifest["config_hash"])


def dataset_hash(path) -> str:
    """Digest of a dataset directory's manifest (which pins every generated value)."""
    with open(Path(path) / "manifest.json", "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()[:16]


def write_ppm(path, image) -> None:
    """Binary P6 PPM, maxval 255; float input is clamped to [0, 1]."""
    arr = np.asarray(image)
    if arr.ndim == 2:
        arr = np.repeat(arr[..., None], 3, axis=2)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ShapeError(f"PPM export needs H x W x 3 pixels, got {arr.shape}")
    if arr.dtype != np.uint8:
        arr = np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{arr.shape[1]} {arr.shape[0]}\n255\n".encode("ascii"))
        fh.write(arr.tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P6":
        raise UsageError(f"{path} is not a binary PPM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise UsageError(f"unsupported PPM maxval {maxval}")
    return np.frombuffer(parts[4][: w * h * 3], dtype=np.uint8).reshape(h, w, 3)


class AnalyticOracle:
    """Stands in for the learned encoders with the true physics.

    The attribute of an image is the stain matrix that rendered it (looked up
    from images registered up front or produced by :meth:`generate`); the
    content is the least-squares deconvolution under that stain. Supports the
    fluorescence model, where generation is the bare dot product.
    """

    def __init__(self, roster: dict[int, DomainSpec]):
        if any(d.modality != "fluorescence" for d in roster.values()):
            raise UsageError("the analytic oracle covers the fluorescence model only")
        self.roster = roster
        self._stains: dict[bytes, np.ndarray] = {}

    @staticmethod
    def _key(img: np.ndarray) -> bytes:
        return hashlib.sha1(np.ascontiguousarray(img, dtype=np.float32).tobytes()).digest()

    def register(self, images, stains) -> None:
        for img, m in zip(np.asarray(images), stains):
            self._stains[self._key(img)] = np.asarray(m, dtype=np.float64)

    def _lookup(self, img: np.ndarray) -> np.ndarray:
        try:
            return self._stains[self._key(img)]
        except KeyError:
            raise UsageError("oracle asked about an image it did not render or register") from None

    def encode_attribute(self, x: T.Tensor) -> T.Tensor:
        return T.Tensor(np.stack([self._lookup(img) for img in x.data]))

    def encode_content(self, x: T.Tensor) -> T.Tensor:
        out = []
        for img in x.data:
            d = DomainSpec(-1, self._lookup(img), np.ones(img.shape[-1]), 0.0, "fluorescence")
            out.append(deconvolve_oracle(img, d))
        return T.Tensor(np.stack(out))

    def generate(self, zc: T.Tensor, za: T.Tensor) -> T.Tensor:
        out = T.tensordot_lc(zc, za)
        self.register(out.data, za.data)
        return out
