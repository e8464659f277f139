"""Procedural stand-in data with exact oracles, for desk-scale checks.

* an 8-component 2-D Gaussian ring, for mode-coverage measurements;
* colored discs on a light background, where the disc color plays the role
  of the hair-color attribute and can be judged exactly;
* adapters (face detector, tag estimator, feature extractor) that are exact
  on the disc images.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from PIL import Image

from .tagspace import TagTaxonomy, default_taxonomy

# -- 8-gaussian ring -------------------------------------------------------


@dataclass(frozen=True)
class GaussianRing:
    n_modes: int = 8
    radius: float = 2.0
    std: float = 0.02

    @property
    def centers(self) -> np.ndarray:
        angles = 2 * np.pi * np.arange(self.n_modes) / self.n_modes
        return self.radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        k = rng.integers(self.n_modes, size=n)
        return self.centers[k] + self.std * rng.standard_normal((n, 2))

    def mode_fractions(self, samples: np.ndarray, n_std: float = 3.0) -> np.ndarray:
        """Fraction of samples within ``n_std`` standard deviations of each center."""
        samples = np.asarray(samples, dtype=np.float64)
        d = np.linalg.norm(samples[:, None, :] - self.centers[None], axis=2)
        return (d <= n_std * self.std).mean(axis=0)

    def modes_covered(self, samples: np.ndarray, min_fraction: float = 0.01, n_std: float = 3.0) -> int:
        return int((self.mode_fractions(samples, n_std) >= min_fraction).sum())


# -- colored discs ----------------------------------------------------------

BACKGROUND = np.array([235, 235, 235], dtype=np.float64)
PALETTE = {
    "blonde hair": (250, 215, 40),
    "brown hair": (130, 75, 25),
    "black hair": (20, 20, 20),
    "blue hair": (40, 80, 230),
    "pink hair": (250, 130, 200),
    "purple hair": (135, 40, 185),
    "green hair": (35, 165, 55),
    "red hair": (220, 30, 30),
}
DISC_EYE = "blue eyes"


def disc_colors() -> list[str]:
    return list(PALETTE)


def draw_disc(size: int, color, cx: float, cy: float, radius: float, noise: np.ndarray | None = None) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    inside = (xx - cx) ** 2 + (yy - cy) ** 2 <= radius**2
    img = np.where(inside[..., None], np.asarray(color, dtype=np.float64), BACKGROUND)
    if noise is not None:
        img = img + noise
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def disc_tags(color_names, taxonomy: TagTaxonomy | None = None) -> np.ndarray:
    taxonomy = taxonomy or default_taxonomy()
    tags = np.zeros((len(color_names), taxonomy.total_dim))
    for i, name in enumerate(color_names):
        tags[i, taxonomy.index(name)] = 1.0
        tags[i, taxonomy.index(DISC_EYE)] = 1.0
    return tags


def make_disc_dataset(n: int, size: int = 32, seed: int = 0, noise_std: float = 4.0):
    """``n`` disc images (uint8, NHWC) with hard tags; colors are balanced."""
    rng = np.random.default_rng(seed)
    names = disc_colors()
    colors = [names[i % len(names)] for i in rng.permutation(n)]
    images = np.empty((n, size, size, 3), dtype=np.uint8)
    for i, name in enumerate(colors):
        r = rng.uniform(0.2, 0.35) * size
        cx, cy = rng.uniform(r, size - r, size=2)
        images[i] = draw_disc(size, PALETTE[name], cx, cy, r, noise_std * rng.standard_normal((size, size, 3)))
    return images, disc_tags(colors), colors


class DiscColorJudge:
    """Exact tag estimator for disc images: nearest palette color of the foreground."""

    extractor_id = "disc-color-oracle-v1"

    def __init__(self, taxonomy: TagTaxonomy | None = None, fg_threshold: float = 60.0):
        self.taxonomy = taxonomy or default_taxonomy()
        self.fg_threshold = fg_threshold
        self._names = disc_colors()
        self._palette = np.array([PALETTE[n] for n in self._names], dtype=np.float64)

    def classify(self, images: np.ndarray) -> list[str]:
        out = []
        for img in np.asarray(images, dtype=np.float64):
            pixels = img.reshape(-1, 3)
            fg = np.abs(pixels - BACKGROUND).sum(axis=1) > self.fg_threshold
            mean = pixels[fg].mean(axis=0) if fg.sum() >= 4 else pixels.mean(axis=0)
            out.append(self._names[int(np.argmin(((self._palette - mean) ** 2).sum(axis=1)))])
        return out

    def __call__(self, images: np.ndarray) -> np.ndarray:
        """(N, H, W, 3) uint8 -> (N, dim) attribute probabilities."""
        return disc_tags(self.classify(images), self.taxonomy)

    def estimate(self, image: Image.Image) -> np.ndarray:
        """Single-image tag-estimator adapter for dataset ingestion."""
        return self(np.asarray(image.convert("RGB"))[None])[0]


class DiscFeatureExtractor:
    """Deterministic features: 4x4 average-pooled pixels plus palette occupancy."""

    extractor_id = "disc-pool4-palette-v1"

    def __init__(self):
        self._palette = np.vstack([np.array(list(PALETTE.values()), dtype=np.float64), BACKGROUND])

    def __call__(self, images: np.ndarray) -> np.ndarray:
        x = np.asarray(images, dtype=np.float64)
        n, h, w, _ = x.shape
        pooled = x.reshape(n, 4, h // 4, 4, w // 4, 3).mean(axis=(2, 4)).reshape(n, -1) / 255.0
        d = ((x.reshape(n, -1, 1, 3) - self._palette[None, None]) ** 2).sum(axis=3)
        occupancy = np.stack([(d.argmin(axis=2) == k).mean(axis=1) for k in range(len(self._palette))], axis=1)
        return np.concatenate([pooled, occupancy], axis=1)


class ForegroundBoxDetector:
    """Face-detector stand-in: one box around the non-background region."""

    def __init__(self, fg_threshold: float = 60.0):
        self.fg_threshold = fg_threshold

    def __call__(self, image: Image.Image):
        arr = np.asarray(image.convert("RGB"), dtype=np.float64)
        fg = np.abs(arr - BACKGROUND).sum(axis=2) > self.fg_threshold
        ys, xs = np.nonzero(fg)
        if len(xs) == 0:
            return []
        return [(float(xs.min()), float(ys.min()), float(xs.max() - xs.min() + 1), float(ys.max() - ys.min() + 1))]


def write_disc_fixture(directory, n: int = 20, seed: int = 0, width: int = 200, height: int = 160):
    """Write ``n`` larger disc pictures plus a CSV source listing; returns the listing path."""
    import csv
    from pathlib import Path

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    names = disc_colors()
    rows = []
    for i in range(n):
        name = names[i % len(names)]
        r = rng.uniform(25, 45)
        cx, cy = rng.uniform(r + 1, width - r - 1), rng.uniform(r + 1, height - r - 1)
        big = max(width, height)
        img = draw_disc(big, PALETTE[name], cx, cy, r)[:height, :width]
        path = directory / f"img_{i:03d}.png"
        Image.fromarray(img).save(path)
        year = 2003 + (i % 12)
        rows.append({"id": str(1000 + i), "name": f"game {i}", "sell_day": f"{year}-04-01",
                     "url": f"www.getchu.com/soft.phtml?id={1000 + i}", "path": path.name})
    listing = directory / "listing.csv"
    with listing.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["id", "name", "sell_day", "url", "path"])
        writer.writeheader()
        writer.writerows(rows)
    return listing


def ring_data(n: int, seed: int = 0, ring: GaussianRing | None = None):
    """8-gaussian samples packaged for :func:`anigan.training.train`."""
    from .training import TrainingData

    ring = ring or GaussianRing()
    x = torch.as_tensor(ring.sample(n, np.random.default_rng(seed)), dtype=torch.float32)
    return TrainingData(x, torch.zeros(n, 0))


def discs_as_training_data(images: np.ndarray, tags: np.ndarray):
    from .nets import from_uint8_hwc
    from .training import TrainingData

    return TrainingData(from_uint8_hwc(images), torch.as_tensor(tags, dtype=torch.float32))


@dataclass
class DiscSurrogateResult:
    precision: dict
    fid_curve: list  # (step, fid) pairs
    generator: torch.nn.Module


def run_disc_surrogate(
    steps: int = 10_000,
    eval_every: int = 500,
    fid_n: int = 2000,
    seed: int = 0,
    lambda_adv: float = 1.0,
    lambda_gp: float = 0.5,
    lr: float = 1e-3,
    lr_decay_start: int = 5_000,
    lr_decay_interval: int = 100,
    cls_reduction: str = "sum",
    cls_fake_weight: float = 1.0,
    per_label_samples: int = 100,
    log=None,
) -> DiscSurrogateResult:
    """Train a small conditional GAN on 32x32 discs and measure it.

    Conditions come from the dataset's empirical prior, so only the eight disc
    colors (and the constant eye tag) are ever active. FID against the real
    discs is recorded every ``eval_every`` steps with fixed sampling seeds;
    per-color label precision is judged by :class:`DiscColorJudge` at the end.

    The defaults compress the full-scale learning-rate schedule (decay after
    half the run) to a 10,000-step budget.
    """
    from .evaluation import GeneratorSampler, fid_protocol, label_precision
    from .nets import DiscriminatorSpec, GeneratorSpec, build_discriminator, build_generator
    from .tagspace import LabelPrior
    from .training import LossWeights, TrainConfig, train

    torch.manual_seed(seed)
    images, tags, _ = make_disc_dataset(4000, size=32, seed=seed)
    G = build_generator(GeneratorSpec(noise_dim=32, base_channels=16, base_spatial=8, n_resblocks=1,
                                      n_upscales=2, output_size=32, final_kernel=3), seed)
    D = build_discriminator(DiscriminatorSpec(input_size=32, base_channels=16, max_channels=64, n_resblocks=2),
                            seed + 1)
    config = TrainConfig(batch_size=32, lr_init=lr, lr_decay_start=lr_decay_start, lr_decay_interval=lr_decay_interval,
                         prior="empirical", steps=steps, seed=seed, checkpoint_every=0,
                         cls_reduction=cls_reduction, cls_fake_weight=cls_fake_weight)
    extractor = DiscFeatureExtractor()
    curve = []

    def record(step, bundle, state):
        if step % eval_every == 0:
            fid = fid_protocol((images, tags), GeneratorSampler(G), extractor, n=fid_n, trials=1, seed=seed).average
            curve.append((step, fid))
            if log:
                log(f"step {step}: FID {fid:.4f}")

    train(discs_as_training_data(images, tags), config, LossWeights(lambda_adv, lambda_gp),
          generator=G, discriminator=D, callbacks=[record])
    G.eval()
    report = label_precision(GeneratorSampler(G), DiscColorJudge(), per_label_samples=per_label_samples,
                             seed=seed, labels=disc_colors(), prior=LabelPrior.from_tags(tags))
    return DiscSurrogateResult(report.precision, curve, G)
