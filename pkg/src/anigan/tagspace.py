"""The 34-attribute condition space: taxonomy, tag vectors and label priors."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from fractions import Fraction
from functools import lru_cache
from importlib import resources
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ConfigurationError, ValidationError

GROUP_TOL = 1e-9


@dataclass(frozen=True)
class TagTaxonomy:
    version: str
    names: tuple[str, ...]
    hair_colors: tuple[str, ...]
    eye_colors: tuple[str, ...]
    binary_attrs: tuple[str, ...]
    reference_counts: Mapping | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        groups = self.hair_colors + self.eye_colors + self.binary_attrs
        if len(set(self.names)) != len(self.names):
            raise ConfigurationError("taxonomy names must be unique")
        if sorted(groups) != sorted(self.names):
            raise ConfigurationError("every name must belong to exactly one group")

    @property
    def total_dim(self) -> int:
        return len(self.names)

    def index(self, name: str) -> int:
        try:
            return self._positions[name]
        except KeyError:
            raise ValidationError(
                f"unknown attribute {name!r}; valid names: {', '.join(self.names)}"
            ) from None

    @property
    def _positions(self) -> dict[str, int]:
        cached = self.__dict__.get("_pos_cache")
        if cached is None:
            cached = {n: i for i, n in enumerate(self.names)}
            object.__setattr__(self, "_pos_cache", cached)
        return cached

    @property
    def hair_index(self) -> np.ndarray:
        return np.array([self.index(n) for n in self.hair_colors])

    @property
    def eye_index(self) -> np.ndarray:
        return np.array([self.index(n) for n in self.eye_colors])

    @property
    def binary_index(self) -> np.ndarray:
        return np.array([self.index(n) for n in self.binary_attrs])

    def group_of(self, name: str) -> str:
        if name in self.hair_colors:
            return "hair_color"
        if name in self.eye_colors:
            return "eye_color"
        self.index(name)
        return "binary"

    def encode(self, names: Iterable[str]) -> "TagVector":
        """Hard vector with the given attributes set; must name one hair and one eye color."""
        values = np.zeros(self.total_dim)
        for name in names:
            values[self.index(name.strip())] = 1.0
        vec = TagVector(values, self)
        vec.check_hard()
        return vec

    def to_manifest(self) -> dict:
        doc = {
            "version": self.version,
            "names": list(self.names),
            "groups": {
                "hair_color": list(self.hair_colors),
                "eye_color": list(self.eye_colors),
                "binary": list(self.binary_attrs),
            },
        }
        if self.reference_counts is not None:
            doc["reference_counts"] = self.reference_counts
        return doc

    @classmethod
    def from_manifest(cls, doc: Mapping) -> "TagTaxonomy":
        groups = doc["groups"]
        return cls(
            version=doc["version"],
            names=tuple(doc["names"]),
            hair_colors=tuple(groups["hair_color"]),
            eye_colors=tuple(groups["eye_color"]),
            binary_attrs=tuple(groups["binary"]),
            reference_counts=doc.get("reference_counts"),
        )


@lru_cache(maxsize=None)
def default_taxonomy() -> TagTaxonomy:
    text = resources.files("anigan.data").joinpath("taxonomy_v1.json").read_text()
    return TagTaxonomy.from_manifest(json.loads(text))


class TagVector:
    """An immutable 34-vector of attribute values in taxonomy order."""

    __slots__ = ("_values", "taxonomy")

    def __init__(self, values, taxonomy: TagTaxonomy | None = None):
        taxonomy = taxonomy or default_taxonomy()
        arr = np.array(values, dtype=np.float64).reshape(-1)
        if arr.shape != (taxonomy.total_dim,):
            raise ValidationError(
                f"tag vector needs {taxonomy.total_dim} entries, got {arr.shape[0]}"
            )
        if not np.all(np.isfinite(arr)) or arr.min() < 0.0 or arr.max() > 1.0:
            raise ValidationError("tag vector entries must lie in [0, 1]")
        arr.setflags(write=False)
        self._values = arr
        self.taxonomy = taxonomy

    @property
    def values(self) -> np.ndarray:
        return self._values

    def __array__(self, dtype=None, copy=None):
        return self._values.astype(dtype) if dtype is not None else self._values.copy()

    def __eq__(self, other):
        return isinstance(other, TagVector) and np.array_equal(self._values, other._values)

    def __hash__(self):
        return hash(self._values.tobytes())

    def __repr__(self):
        if self.is_hard():
            return f"TagVector({self.active_names()})"
        return f"TagVector(soft, {np.round(self._values, 3).tolist()})"

    def __getitem__(self, name: str) -> float:
        return float(self._values[self.taxonomy.index(name)])

    def active_names(self) -> list[str]:
        return [n for n, v in zip(self.taxonomy.names, self._values) if v == 1.0]

    def is_hard(self) -> bool:
        return hard_violations(self._values[None], self.taxonomy)[0] is None

    def check_hard(self) -> None:
        problem = hard_violations(self._values[None], self.taxonomy)[0]
        if problem:
            raise ValidationError(problem)

    def check_soft(self) -> None:
        v = self._values
        for label, idx in (("hair", self.taxonomy.hair_index), ("eye", self.taxonomy.eye_index)):
            if v[idx].sum() > 1.0 + GROUP_TOL:
                raise ValidationError(f"{label}-color group sums above 1")


def hard_violations(batch: np.ndarray, taxonomy: TagTaxonomy | None = None) -> list[str | None]:
    """Per-row description of why a row is not a hard tag vector (None if it is)."""
    taxonomy = taxonomy or default_taxonomy()
    batch = np.asarray(batch, dtype=np.float64)
    binary_ok = np.all((batch == 0.0) | (batch == 1.0), axis=1)
    hair = batch[:, taxonomy.hair_index].sum(axis=1)
    eye = batch[:, taxonomy.eye_index].sum(axis=1)
    out = []
    for ok, h, e in zip(binary_ok, hair, eye):
        if not ok:
            out.append("hard tag vector entries must be 0 or 1")
        elif h != 1.0:
            out.append(f"exactly one hair color must be set, found {int(h)}")
        elif e != 1.0:
            out.append(f"exactly one eye color must be set, found {int(e)}")
        else:
            out.append(None)
    return out


@dataclass(frozen=True)
class LabelPrior:
    """Distribution over hard tag vectors.

    ``training_uniform`` draws hair and eye color uniformly and each binary
    attribute with probability ``binary_prob``. ``empirical`` uses
    per-attribute frequencies measured on a dataset; ``counts``/``n_images``
    are kept when available so ratios can be recovered exactly.
    """

    kind: str = "training_uniform"
    empirical_frequencies: tuple[float, ...] | None = None
    binary_prob: float = 0.25
    counts: tuple[int, ...] | None = None
    n_images: int | None = None
    taxonomy: TagTaxonomy = field(default_factory=default_taxonomy, compare=False, repr=False)

    def __post_init__(self):
        if self.kind not in ("training_uniform", "empirical"):
            raise ConfigurationError(f"unknown prior kind {self.kind!r}")
        if not 0.0 <= self.binary_prob <= 1.0:
            raise ConfigurationError("binary_prob must lie in [0, 1]")
        if self.kind == "empirical":
            if self.empirical_frequencies is None:
                raise ConfigurationError("empirical prior requires empirical_frequencies")
            freqs = np.asarray(self.empirical_frequencies, dtype=np.float64)
            if freqs.shape != (self.taxonomy.total_dim,):
                raise ConfigurationError("empirical_frequencies must have one entry per attribute")
            if freqs.min() < 0.0 or freqs.max() > 1.0:
                raise ConfigurationError("empirical frequencies must lie in [0, 1]")
            for label, idx in (("hair", self.taxonomy.hair_index), ("eye", self.taxonomy.eye_index)):
                if abs(freqs[idx].sum() - 1.0) > 1e-6:
                    raise ConfigurationError(f"empirical {label}-color frequencies must sum to 1")

    @classmethod
    def training(cls, binary_prob: float = 0.25, taxonomy: TagTaxonomy | None = None) -> "LabelPrior":
        return cls("training_uniform", binary_prob=binary_prob, taxonomy=taxonomy or default_taxonomy())

    @classmethod
    def from_counts(
        cls,
        counts: Mapping[str, int] | Sequence[int],
        n_images: int | None = None,
        taxonomy: TagTaxonomy | None = None,
    ) -> "LabelPrior":
        """Empirical prior from per-attribute image counts.

        ``n_images`` defaults to the sum of the hair-color counts, which equals
        the number of images when every image carries exactly one hair color.
        """
        taxonomy = taxonomy or default_taxonomy()
        if isinstance(counts, Mapping):
            counts = [int(counts.get(n, 0)) for n in taxonomy.names]
        counts = tuple(int(c) for c in counts)
        if len(counts) != taxonomy.total_dim:
            raise ConfigurationError("need one count per attribute")
        if n_images is None:
            n_images = sum(counts[i] for i in taxonomy.hair_index)
        if n_images <= 0:
            raise ConfigurationError("cannot build an empirical prior from zero images")
        freqs = tuple(float(Fraction(c, n_images)) for c in counts)
        return cls("empirical", freqs, counts=counts, n_images=n_images, taxonomy=taxonomy)

    @classmethod
    def from_tags(cls, tags: np.ndarray, taxonomy: TagTaxonomy | None = None) -> "LabelPrior":
        tags = np.asarray(tags)
        if tags.ndim != 2 or tags.shape[0] == 0:
            raise ConfigurationError("need a non-empty (n, dim) array of hard tags")
        counts = np.rint(tags).astype(np.int64).sum(axis=0)
        return cls.from_counts(counts.tolist(), n_images=tags.shape[0], taxonomy=taxonomy)

    @classmethod
    def reference(cls) -> "LabelPrior":
        """Empirical prior from the bundled published tag counts."""
        tax = default_taxonomy()
        ref = tax.reference_counts
        return cls.from_counts(ref["counts"], n_images=ref["n_images"], taxonomy=tax)

    def exact_frequency(self, name: str) -> Fraction:
        if self.counts is None:
            raise ConfigurationError("prior was not built from counts")
        return Fraction(self.counts[self.taxonomy.index(name)], self.n_images)

    def frequencies(self) -> np.ndarray:
        """Marginal probability of every attribute under this prior."""
        tax = self.taxonomy
        if self.kind == "empirical":
            return np.asarray(self.empirical_frequencies, dtype=np.float64)
        out = np.empty(tax.total_dim)
        out[tax.hair_index] = 1.0 / len(tax.hair_colors)
        out[tax.eye_index] = 1.0 / len(tax.eye_colors)
        out[tax.binary_index] = self.binary_prob
        return out

    def to_dict(self) -> dict:
        doc = {"kind": self.kind, "binary_prob": self.binary_prob, "taxonomy_version": self.taxonomy.version}
        if self.empirical_frequencies is not None:
            doc["empirical_frequencies"] = list(self.empirical_frequencies)
        if self.counts is not None:
            doc["counts"] = list(self.counts)
            doc["n_images"] = self.n_images
        return doc

    @classmethod
    def from_dict(cls, doc: Mapping, taxonomy: TagTaxonomy | None = None) -> "LabelPrior":
        taxonomy = taxonomy or default_taxonomy()
        if doc.get("taxonomy_version", taxonomy.version) != taxonomy.version:
            raise ConfigurationError(
                f"prior built for taxonomy {doc['taxonomy_version']}, have {taxonomy.version}"
            )
        freqs = doc.get("empirical_frequencies")
        counts = doc.get("counts")
        return cls(
            doc.get("kind", "training_uniform"),
            tuple(freqs) if freqs is not None else None,
            doc.get("binary_prob", 0.25),
            tuple(counts) if counts is not None else None,
            doc.get("n_images"),
            taxonomy,
        )


def sample_conditions(prior: LabelPrior, n: int, rng: np.random.Generator) -> np.ndarray:
    """Draw ``n`` hard tag vectors as an (n, dim) float array."""
    tax = prior.taxonomy
    freqs = prior.frequencies()
    out = np.zeros((n, tax.total_dim))
    rows = np.arange(n)
    for idx in (tax.hair_index, tax.eye_index):
        p = freqs[idx] / freqs[idx].sum()
        picks = rng.choice(len(idx), size=n, p=p)
        out[rows, idx[picks]] = 1.0
    bidx = tax.binary_index
    out[:, bidx] = (rng.random((n, len(bidx))) < freqs[bidx]).astype(np.float64)
    return out


def sample_condition(prior: LabelPrior, rng_seed: int) -> TagVector:
    rng = np.random.default_rng(rng_seed)
    return TagVector(sample_conditions(prior, 1, rng)[0], prior.taxonomy)


def estimate_tags_batch(
    probabilities: np.ndarray, threshold: float = 0.25, taxonomy: TagTaxonomy | None = None
) -> np.ndarray:
    taxonomy = taxonomy or default_taxonomy()
    probs = np.asarray(probabilities, dtype=np.float64)
    if probs.ndim != 2 or probs.shape[1] != taxonomy.total_dim:
        raise ValidationError(f"expected (n, {taxonomy.total_dim}) probabilities, got {probs.shape}")
    out = np.zeros_like(probs)
    rows = np.arange(probs.shape[0])
    for idx in (taxonomy.hair_index, taxonomy.eye_index):
        # np.argmax returns the first maximum, i.e. the lower taxonomy index on ties
        out[rows, idx[np.argmax(probs[:, idx], axis=1)]] = 1.0
    bidx = taxonomy.binary_index
    out[:, bidx] = (probs[:, bidx] >= threshold).astype(np.float64)
    return out


def estimate_tags(probabilities, threshold: float = 0.25, taxonomy: TagTaxonomy | None = None) -> TagVector:
    """Hard tags from tagger probabilities: argmax within color groups, threshold elsewhere."""
    taxonomy = taxonomy or default_taxonomy()
    row = np.asarray(probabilities, dtype=np.float64).reshape(1, -1)
    return TagVector(estimate_tags_batch(row, threshold, taxonomy)[0], taxonomy)


def interpolate(a: TagVector, b: TagVector, t: float) -> TagVector:
    if not 0.0 <= t <= 1.0:
        raise ValidationError(f"interpolation weight must lie in [0, 1], got {t}")
    if a.taxonomy.version != b.taxonomy.version:
        raise ValidationError("cannot interpolate vectors from different taxonomies")
    values = (1.0 - t) * a.values + t * b.values
    return TagVector(np.clip(values, 0.0, 1.0), a.taxonomy)
