"""Model evaluation: Frechet distance, per-label precision, sample sheets, feature export."""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import torch

from .errors import NumericalError, ValidationError
from .nets import to_uint8_hwc
from .tagspace import (
    LabelPrior,
    TagTaxonomy,
    TagVector,
    default_taxonomy,
    estimate_tags_batch,
    interpolate,
    sample_conditions,
)

log = logging.getLogger(__name__)

CLIP_REL_TOL = 1e-3

# Sampler: (tags (n, dim), rng) -> uint8 images (n, H, W, 3)
Sampler = Callable[[np.ndarray, np.random.Generator], np.ndarray]
# Extractor / judge: uint8 images (n, H, W, 3) -> (n, d) array
Extractor = Callable[[np.ndarray], np.ndarray]


@dataclass
class FeatureSet:
    vectors: np.ndarray
    extractor_id: str

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2:
            raise ValidationError("feature vectors must form an (N, d) array")
        if not np.all(np.isfinite(self.vectors)):
            raise ValidationError("feature vectors contain non-finite entries")

    def __len__(self):
        return self.vectors.shape[0]

    def save(self, path, coords: np.ndarray | None = None) -> None:
        extra = {} if coords is None else {"coords": coords}
        np.savez(path, vectors=self.vectors, extractor_id=self.extractor_id, **extra)


@dataclass
class GaussianMoments:
    mean: np.ndarray
    covariance: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        self.covariance = np.atleast_2d(np.asarray(self.covariance, dtype=np.float64))
        d = self.mean.shape[0]
        if self.covariance.shape != (d, d):
            raise ValidationError(f"covariance shape {self.covariance.shape} does not match mean ({d},)")
        if np.abs(self.covariance - self.covariance.T).max(initial=0.0) > 1e-8:
            raise ValidationError("covariance is not symmetric")


def fit_moments(features: FeatureSet | np.ndarray) -> GaussianMoments:
    """Sample mean and unbiased (N-1) sample covariance."""
    x = features.vectors if isinstance(features, FeatureSet) else np.asarray(features, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[0] < 2:
        raise ValidationError("need at least two feature vectors to fit moments")
    mu = x.mean(axis=0)
    centered = x - mu
    cov = centered.T @ centered / (x.shape[0] - 1)
    return GaussianMoments(mu, (cov + cov.T) / 2.0)


def _psd_sqrt(sym: np.ndarray) -> tuple[np.ndarray, float]:
    w, v = np.linalg.eigh(sym)
    clipped = float(-w.min()) if w.min() < 0 else 0.0
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T, clipped


@dataclass(frozen=True)
class FrechetResult:
    distance: float
    mean_term: float
    trace_term: float
    clipped: float
    scale: float


def frechet_details(a: GaussianMoments, b: GaussianMoments) -> FrechetResult:
    """||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2)).

    The trace of the product square root is taken from the eigenvalues of the
    symmetric matrix S_a^(1/2) S_b S_a^(1/2), which has the same spectrum as
    S_a S_b. Negative eigenvalues from round-off are clipped to zero; if the
    most negative one exceeds 1e-3 of the spectral scale the inputs are
    rejected as numerically invalid.
    """
    if a.mean.shape != b.mean.shape:
        raise ValidationError("moments have different dimensions")
    diff = a.mean - b.mean
    mean_term = float(diff @ diff)
    root_a, clip_a = _psd_sqrt(a.covariance)
    m = root_a @ b.covariance @ root_a
    w = np.linalg.eigvalsh((m + m.T) / 2.0)
    scale = float(np.abs(w).max(initial=0.0))
    clipped = max(clip_a, float(-w.min()) if w.size and w.min() < 0 else 0.0)
    if clipped > CLIP_REL_TOL * max(scale, np.finfo(float).tiny) and clipped > 1e-12:
        cond = np.linalg.cond(a.covariance) if a.covariance.size else float("nan")
        raise NumericalError(
            f"covariance product has eigenvalue -{clipped:.3g} against scale {scale:.3g} "
            f"(cond(S_a) = {cond:.3g})"
        )
    trace_term = float(np.trace(a.covariance) + np.trace(b.covariance) - 2.0 * np.sqrt(np.clip(w, 0.0, None)).sum())
    return FrechetResult(max(0.0, mean_term + trace_term), mean_term, trace_term, clipped, scale)


def frechet_distance(a: GaussianMoments, b: GaussianMoments) -> float:
    return frechet_details(a, b).distance


@dataclass
class FidReport:
    trials: list[float]
    extractor_id: str
    n: int
    average: float = field(init=False)
    spread: float = field(init=False)

    def __post_init__(self):
        if not self.trials:
            raise ValidationError("FID report needs at least one trial")
        self.average = float(np.mean(self.trials))
        self.spread = float(max(self.trials) - min(self.trials))

    def to_dict(self) -> dict:
        return {
            "trials": list(self.trials),
            "average": self.average,
            "spread": self.spread,
            "extractor_id": self.extractor_id,
            "n": self.n,
        }

    def table(self, model_name: str = "model") -> str:
        rows = [("Model", "Average FID", "MaxFID-MinFID"), (model_name, f"{self.average:.2f}", f"{self.spread:.2f}")]
        width = [max(len(r[i]) for r in rows) for i in range(3)]
        lines = ["  ".join(c.ljust(w) for c, w in zip(r, width)) for r in rows]
        return "\n".join(lines + [f"(extractor: {self.extractor_id}, n = {self.n})"])


class GeneratorSampler:
    """Sampler adapter around a conditional generator network (eval mode)."""

    def __init__(self, generator: torch.nn.Module, batch_size: int = 64):
        self.generator = generator
        self.batch_size = batch_size

    @property
    def noise_dim(self) -> int:
        return self.generator.spec.noise_dim

    def images(self, z: np.ndarray, tags: np.ndarray) -> np.ndarray:
        self.generator.eval()
        out = []
        with torch.no_grad():
            for i in range(0, len(z), self.batch_size):
                zb = torch.tensor(np.asarray(z[i:i + self.batch_size]), dtype=torch.float32)
                cb = torch.tensor(np.asarray(tags[i:i + self.batch_size]), dtype=torch.float32)
                out.append(to_uint8_hwc(self.generator(zb, cb)))
        return np.concatenate(out) if out else np.zeros((0, 0, 0, 3), np.uint8)

    def __call__(self, tags: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        z = rng.standard_normal((len(tags), self.noise_dim)).astype(np.float32)
        return self.images(z, tags)


class ReplaySampler:
    """Returns real images whose tags match the requested ones (random if none match)."""

    def __init__(self, images: np.ndarray, tags: np.ndarray):
        self.images = np.asarray(images)
        self.tags = np.asarray(tags)
        self._by_key: dict[bytes, np.ndarray] = {}
        keys = [t.astype(np.int8).tobytes() for t in self.tags]
        for k in set(keys):
            self._by_key[k] = np.array([i for i, kk in enumerate(keys) if kk == k])

    def __call__(self, tags: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        idx = []
        for t in np.asarray(tags):
            pool = self._by_key.get(np.rint(t).astype(np.int8).tobytes())
            idx.append(rng.choice(pool) if pool is not None else rng.integers(len(self.images)))
        return self.images[np.asarray(idx, dtype=np.int64)]


def _extract(extractor: Extractor, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    return np.concatenate([np.asarray(extractor(images[i:i + batch_size])) for i in range(0, len(images), batch_size)])


def _real_arrays(real) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(real, tuple):
        return np.asarray(real[0]), np.asarray(real[1])
    kept = real.retained
    return np.stack([real.load_image(r) for r in kept]), np.array([r.tags for r in kept], dtype=np.float64)


def fid_protocol(
    real,
    sampler: Sampler,
    extractor: Extractor,
    n: int = 12_800,
    trials: int = 5,
    seed: int = 0,
    extractor_id: str | None = None,
) -> FidReport:
    """Repeated FID between ``n`` real images and ``n`` fakes drawn under the same tags.

    ``real`` is a dataset manifest or an ``(images, tags)`` pair. A failing
    extractor aborts that trial only; the error is logged.
    """
    images, tags = _real_arrays(real)
    if len(images) < n:
        log.warning("only %d real images available, lowering n from %d", len(images), n)
        n = len(images)
    extractor_id = extractor_id or getattr(extractor, "extractor_id", type(extractor).__name__)
    values = []
    for trial in range(trials):
        rng = np.random.default_rng([seed, trial])
        pick = rng.choice(len(images), size=n, replace=False)
        try:
            fakes = sampler(tags[pick], rng)
            real_f = fit_moments(FeatureSet(_extract(extractor, images[pick]), extractor_id))
            fake_f = fit_moments(FeatureSet(_extract(extractor, fakes), extractor_id))
        except Exception as exc:  # adapter failures are isolated per trial
            log.error("FID trial %d aborted: %s", trial, exc)
            continue
        values.append(frechet_distance(real_f, fake_f))
    return FidReport(values, extractor_id, n)


def self_distance_trials(features: np.ndarray, half: int, n_trials: int, seed: int = 0) -> np.ndarray:
    """FID between two disjoint random halves of one feature set, repeated."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n_trials):
        perm = rng.permutation(len(features))
        a, b = features[perm[:half]], features[perm[half:2 * half]]
        out.append(frechet_distance(fit_moments(a), fit_moments(b)))
    return np.asarray(out)


def force_label(tags: np.ndarray, name: str, taxonomy: TagTaxonomy | None = None) -> np.ndarray:
    """Set attribute ``name`` on every row, clearing the rest of its exclusive group."""
    taxonomy = taxonomy or default_taxonomy()
    out = np.array(tags, dtype=np.float64, copy=True)
    group = taxonomy.group_of(name)
    if group == "hair_color":
        out[:, taxonomy.hair_index] = 0.0
    elif group == "eye_color":
        out[:, taxonomy.eye_index] = 0.0
    out[:, taxonomy.index(name)] = 1.0
    return out


@dataclass
class PrecisionReport:
    precision: dict[str, float]
    samples: int

    def to_dict(self) -> dict:
        return {"precision": self.precision, "per_label_samples": self.samples}

    def table(self, per_row: int = 7) -> str:
        names = list(self.precision)
        lines = []
        for i in range(0, len(names), per_row):
            chunk = names[i:i + per_row]
            w = [max(len(n), 4) for n in chunk]
            lines.append("  ".join(n.center(x) for n, x in zip(chunk, w)))
            lines.append("  ".join(f"{self.precision[n]:.2f}".center(x) for n, x in zip(chunk, w)))
        return "\n".join(lines)


def label_precision(
    sampler: Sampler,
    judge: Extractor,
    per_label_samples: int = 20,
    seed: int = 0,
    labels: Sequence[str] | None = None,
    prior: LabelPrior | None = None,
    threshold: float = 0.25,
) -> PrecisionReport:
    """For each label: force it on, draw the rest from ``prior``, generate, and judge.

    Precision is the fraction of generated images in which the judge detects
    the forced label (via the same argmax/threshold rule used for tagging).
    """
    prior = prior or LabelPrior.training()
    taxonomy = prior.taxonomy
    labels = list(labels) if labels is not None else list(taxonomy.names)
    out = {}
    for k, name in enumerate(labels):
        rng = np.random.default_rng([seed, k])
        tags = force_label(sample_conditions(prior, per_label_samples, rng), name, taxonomy)
        images = sampler(tags, rng)
        judged = estimate_tags_batch(judge(images), threshold, taxonomy)
        out[name] = float(judged[:, taxonomy.index(name)].mean())
    return PrecisionReport(out, per_label_samples)


# -- sample sheets ----------------------------------------------------------

GRID_MODES = ("fixed_noise_random_cond", "fixed_cond_random_noise", "interpolation")


@dataclass
class Grid:
    images: np.ndarray  # (k, H, W, 3) uint8
    z: np.ndarray
    conditions: np.ndarray
    ncols: int

    def sheet(self, pad: int = 2) -> np.ndarray:
        return tile(self.images, self.ncols, pad)


def tile(images: np.ndarray, ncols: int, pad: int = 2) -> np.ndarray:
    k, h, w, c = images.shape
    nrows = -(-k // ncols)
    sheet = np.full((nrows * (h + pad) + pad, ncols * (w + pad) + pad, c), 255, dtype=np.uint8)
    for i, img in enumerate(images):
        r, col = divmod(i, ncols)
        y, x = pad + r * (h + pad), pad + col * (w + pad)
        sheet[y:y + h, x:x + w] = img
    return sheet


def parse_condition(names: str | Iterable[str], taxonomy: TagTaxonomy | None = None) -> TagVector:
    taxonomy = taxonomy or default_taxonomy()
    if isinstance(names, str):
        names = [n for n in names.split(",") if n.strip()]
    return taxonomy.encode(names)


def sample_grid(
    generator: torch.nn.Module,
    mode: str,
    *,
    n: int = 8,
    condition: str | Iterable[str] | None = None,
    endpoints: tuple | None = None,
    t_values: Sequence[float] | None = None,
    interpolate_noise: bool = True,
    interpolate_condition: bool = True,
    prior: LabelPrior | None = None,
    seed: int = 0,
) -> Grid:
    """Deterministic sample sheet.

    ``fixed_noise_random_cond``: one noise vector, ``n`` conditions from the prior.
    ``fixed_cond_random_noise``: the named condition, ``n`` noise vectors.
    ``interpolation``: linear path between two endpoints ``((z0, c0), (z1, c1))``
    (random if not given) at weights ``t_values``.

    Images are generated one at a time so every cell is bit-identical to
    generating its (z, c) alone.
    """
    if mode not in GRID_MODES:
        raise ValidationError(f"unknown grid mode {mode!r}; choose from {GRID_MODES}")
    prior = prior or LabelPrior.training()
    rng = np.random.default_rng(seed)
    sampler = GeneratorSampler(generator, batch_size=1)
    dim = sampler.noise_dim
    if mode == "fixed_noise_random_cond":
        z = np.repeat(rng.standard_normal((1, dim)), n, axis=0)
        c = sample_conditions(prior, n, rng)
        ncols = n
    elif mode == "fixed_cond_random_noise":
        if condition is None:
            raise ValidationError("fixed_cond_random_noise needs a condition")
        vec = parse_condition(condition, prior.taxonomy)
        z = rng.standard_normal((n, dim))
        c = np.repeat(vec.values[None], n, axis=0)
        ncols = n
    else:
        if endpoints is None:
            endpoints = tuple(
                (rng.standard_normal(dim), TagVector(sample_conditions(prior, 1, rng)[0], prior.taxonomy))
                for _ in range(2)
            )
        (z0, c0), (z1, c1) = endpoints
        z0, z1 = np.asarray(z0, dtype=np.float64), np.asarray(z1, dtype=np.float64)
        c0 = c0 if isinstance(c0, TagVector) else TagVector(c0, prior.taxonomy)
        c1 = c1 if isinstance(c1, TagVector) else TagVector(c1, prior.taxonomy)
        ts = list(t_values) if t_values is not None else list(np.linspace(0.0, 1.0, n))
        z = np.stack([(1.0 - t) * z0 + t * z1 if interpolate_noise else z0 for t in ts])
        c = np.stack([interpolate(c0, c1, t).values if interpolate_condition else c0.values for t in ts])
        ncols = len(ts)
    z = z.astype(np.float32)
    return Grid(sampler.images(z, c), z, c, ncols)


# -- feature export ---------------------------------------------------------


def export_features(
    real,
    extractor: Extractor,
    sample_n: int,
    seed: int = 0,
    projector: Callable[[np.ndarray], np.ndarray] | None = None,
    out_path: str | os.PathLike | None = None,
    extractor_id: str | None = None,
) -> tuple[FeatureSet, np.ndarray | None]:
    """Features for ``sample_n`` random real images, plus optional 2-D coordinates."""
    extractor_id = extractor_id or getattr(extractor, "extractor_id", type(extractor).__name__)
    if sample_n <= 0:
        return FeatureSet(np.zeros((0, 0)), extractor_id), None
    images, _ = _real_arrays(real)
    rng = np.random.default_rng(seed)
    pick = np.sort(rng.choice(len(images), size=min(sample_n, len(images)), replace=False))
    feats = FeatureSet(_extract(extractor, images[pick]), extractor_id)
    coords = None
    if projector is not None:
        coords = np.asarray(projector(feats.vectors), dtype=np.float64)
        if coords.shape != (len(feats), 2):
            raise ValidationError(f"projector returned shape {coords.shape}, expected ({len(feats)}, 2)")
    if out_path is not None:
        feats.save(Path(out_path), coords)
    return feats, coords
