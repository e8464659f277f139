"""HTTP generation service.

    POST /v1/generate   {"assigned": {"blonde hair": true, ...}, "count": 4, "seed": 7}
    GET  /v1/taxonomy
    GET  /v1/health

Unassigned attributes are completed from the bundle's empirical prior. With a
seed the response is reproducible; without one the server derives
``base_seed XOR request_counter``.
"""

from __future__ import annotations

import base64
import itertools
import logging
import os
import threading
import time
from typing import Mapping, Optional

import numpy as np
from fastapi import FastAPI, HTTPException
from pydantic import BaseModel, Field

from .bundle import ExportBundle, load_bundle
from .dataset import encode_png
from .errors import ValidationError
from .evaluation import GeneratorSampler
from .tagspace import LabelPrior, TagTaxonomy, default_taxonomy

log = logging.getLogger(__name__)

MAX_COUNT = 16


class GenerationRequest(BaseModel):
    assigned: dict[str, bool] = Field(default_factory=dict)
    count: int = Field(1, ge=1, le=MAX_COUNT)
    seed: Optional[int] = Field(None, ge=0, le=2**63 - 1)


class GenerationResponse(BaseModel):
    images: list[str]
    resolved_conditions: list[list[float]]
    model_version: str
    latency_ms: float
    seed: int


def resolve_conditions(
    assigned: Mapping[str, bool], count: int, prior: LabelPrior, rng: np.random.Generator
) -> np.ndarray:
    """Hard tag vectors honoring ``assigned``; the rest drawn from ``prior``.

    An unassigned color group is drawn from the prior renormalized over the
    colors not forced off (uniformly if those all have zero frequency).
    """
    tax = prior.taxonomy
    for name in assigned:
        tax.index(name)
    freqs = prior.frequencies()
    out = np.zeros((count, tax.total_dim))
    for label, group in (("hair", tax.hair_colors), ("eye", tax.eye_colors)):
        on = [n for n in group if assigned.get(n) is True]
        if len(on) > 1:
            raise ValidationError(f"at most one {label} color may be assigned true, got {on}")
        if on:
            out[:, tax.index(on[0])] = 1.0
            continue
        candidates = np.array([tax.index(n) for n in group if assigned.get(n) is not False])
        if len(candidates) == 0:
            raise ValidationError(f"every {label} color is assigned false")
        p = freqs[candidates]
        p = p / p.sum() if p.sum() > 0 else np.full(len(candidates), 1.0 / len(candidates))
        out[np.arange(count), candidates[rng.choice(len(candidates), size=count, p=p)]] = 1.0
    bidx = tax.binary_index
    draws = (rng.random((count, len(bidx))) < freqs[bidx]).astype(np.float64)
    for j, i in enumerate(bidx):
        name = tax.names[i]
        if name in assigned:
            draws[:, j] = 1.0 if assigned[name] else 0.0
    out[:, bidx] = draws
    return out


class GenerationService:
    """Shared read-only model plus per-request seed derivation."""

    def __init__(self, bundle: ExportBundle | None, base_seed: int = 0, max_concurrency: int = 4):
        self.bundle = bundle
        self.base_seed = base_seed
        self._counter = itertools.count()
        self._counter_lock = threading.Lock()
        self._slots = threading.BoundedSemaphore(max_concurrency)
        self._sampler = GeneratorSampler(bundle.generator, batch_size=MAX_COUNT) if bundle else None
        # BatchNorm in eval mode is read-only, but keep forward passes serialized
        # so concurrent requests never interleave inside one module call.
        self._model_lock = threading.Lock()

    @property
    def taxonomy(self) -> TagTaxonomy:
        return self.bundle.taxonomy if self.bundle else default_taxonomy()

    def derive_seed(self, seed: int | None) -> int:
        if seed is not None:
            return seed
        with self._counter_lock:
            n = next(self._counter)
        return self.base_seed ^ n

    def generate(self, request: GenerationRequest) -> GenerationResponse:
        if self.bundle is None:
            raise RuntimeError("no model loaded")
        t0 = time.perf_counter()
        seed = self.derive_seed(request.seed)
        rng = np.random.default_rng(seed)
        tags = resolve_conditions(request.assigned, request.count, self.bundle.prior, rng)
        z = rng.standard_normal((request.count, self._sampler.noise_dim)).astype(np.float32)
        if not self._slots.acquire(timeout=60):
            raise TimeoutError("server busy")
        try:
            with self._model_lock:
                images = self._sampler.images(z, tags)
        finally:
            self._slots.release()
        encoded = [base64.b64encode(encode_png(img)).decode("ascii") for img in images]
        return GenerationResponse(
            images=encoded,
            resolved_conditions=tags.tolist(),
            model_version=self.bundle.model_version,
            latency_ms=(time.perf_counter() - t0) * 1000.0,
            seed=seed,
        )


def create_app(bundle: ExportBundle | str | os.PathLike | None = None, **service_kwargs) -> FastAPI:
    if bundle is not None and not isinstance(bundle, ExportBundle):
        bundle = load_bundle(bundle)
    service = GenerationService(bundle, **service_kwargs)
    app = FastAPI(title="anigan", version="1")
    app.state.service = service

    @app.post("/v1/generate", response_model=GenerationResponse)
    def generate(request: GenerationRequest):
        if service.bundle is None:
            raise HTTPException(503, "no model loaded")
        try:
            return service.generate(request)
        except ValidationError as exc:
            raise HTTPException(422, str(exc)) from exc
        except TimeoutError as exc:
            raise HTTPException(503, str(exc)) from exc

    @app.get("/v1/taxonomy")
    def taxonomy():
        return service.taxonomy.to_manifest()

    @app.get("/v1/health")
    def health():
        if service.bundle is None:
            return {"status": "no-model", "model_version": None}
        return {
            "status": "ok",
            "model_version": service.bundle.model_version,
            "taxonomy_version": service.bundle.taxonomy.version,
            "image_size": service.bundle.generator.spec.output_size,
        }

    return app


def serve(bundle_dir, port: int = 8000, host: str | None = None, seed: int = 0) -> None:
    import uvicorn

    host = host or os.environ.get("ANIGAN_HOST", "127.0.0.1")
    uvicorn.run(create_app(bundle_dir, base_seed=seed), host=host, port=port)
