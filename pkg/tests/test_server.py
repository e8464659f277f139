import base64
import io
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest
from fastapi.testclient import TestClient
from hypothesis import given, settings, strategies as st
from PIL import Image

from anigan.bundle import load_bundle
from anigan.errors import ValidationError
from anigan.server import GenerationRequest, GenerationService, create_app, resolve_conditions
from anigan.tagspace import LabelPrior, default_taxonomy, hard_violations

TAX = default_taxonomy()
REF = LabelPrior.reference()


@pytest.fixture(scope="module")
def client(bundle_dir):
    return TestClient(create_app(bundle_dir, base_seed=11))


def decode(b64):
    return Image.open(io.BytesIO(base64.b64decode(b64)))


def body_without_latency(resp):
    doc = resp.json()
    doc.pop("latency_ms")
    return doc


class TestResolveConditions:
    def test_forced_color(self):
        out = resolve_conditions({"blonde hair": True}, 200, REF, np.random.default_rng(0))
        assert np.all(out[:, TAX.index("blonde hair")] == 1)
        assert np.all(out[:, TAX.hair_index].sum(1) == 1)

    def test_all_assigned_is_deterministic(self):
        assigned = {n: False for n in TAX.names}
        assigned["red hair"] = assigned["green eyes"] = assigned["smile"] = True
        a = resolve_conditions(assigned, 3, REF, np.random.default_rng(0))
        b = resolve_conditions(assigned, 3, REF, np.random.default_rng(99))
        assert np.array_equal(a, b)
        assert set(TAX.names[i] for i in np.nonzero(a[0])[0]) == {"red hair", "green eyes", "smile"}

    def test_renormalized_frequencies(self):
        out = resolve_conditions({"blonde hair": False}, 10_000, REF, np.random.default_rng(1))
        counts = TAX.reference_counts["counts"]
        others = [n for n in TAX.hair_colors if n != "blonde hair"]
        total = sum(counts[n] for n in others)
        assert out[:, TAX.index("blonde hair")].sum() == 0
        for n in others:
            assert out[:, TAX.index(n)].mean() == pytest.approx(counts[n] / total, abs=0.01)

    def test_binary_frequencies(self):
        out = resolve_conditions({}, 100_000, REF, np.random.default_rng(2))
        for n in TAX.binary_attrs:
            assert out[:, TAX.index(n)].mean() == pytest.approx(float(REF.exact_frequency(n)), abs=0.01)

    @pytest.mark.parametrize("assigned", [
        {"blonde hair": True, "red hair": True},
        {"blue eyes": True, "red eyes": True},
        {n: False for n in TAX.hair_colors},
        {"wings": True},
    ])
    def test_conflicts(self, assigned):
        with pytest.raises(ValidationError):
            resolve_conditions(assigned, 1, REF, np.random.default_rng(0))

    @settings(max_examples=40, deadline=None)
    @given(st.dictionaries(st.sampled_from(TAX.names), st.booleans()), st.integers(0, 2**32 - 1))
    def test_output_is_hard_and_honors_assignment(self, assigned, seed):
        try:
            out = resolve_conditions(assigned, 5, REF, np.random.default_rng(seed))
        except ValidationError:
            hair_on = sum(assigned.get(n) is True for n in TAX.hair_colors)
            eye_on = sum(assigned.get(n) is True for n in TAX.eye_colors)
            hair_off = all(assigned.get(n) is False for n in TAX.hair_colors)
            eye_off = all(assigned.get(n) is False for n in TAX.eye_colors)
            assert hair_on > 1 or eye_on > 1 or hair_off or eye_off
            return
        assert all(v is None for v in hard_violations(out))
        for name, value in assigned.items():
            assert np.all(out[:, TAX.index(name)] == float(value))


class TestHttp:
    def test_generate_is_deterministic(self, client):
        req = {"assigned": {"blonde hair": True, "smile": False}, "count": 2, "seed": 5}
        a, b = client.post("/v1/generate", json=req), client.post("/v1/generate", json=req)
        assert a.status_code == 200
        assert body_without_latency(a) == body_without_latency(b)
        doc = a.json()
        assert doc["latency_ms"] >= 0 and doc["seed"] == 5
        for img_b64, cond in zip(doc["images"], doc["resolved_conditions"]):
            img = decode(img_b64)
            assert img.format == "PNG" and img.size == (128, 128) and img.mode == "RGB"
            assert cond[TAX.index("blonde hair")] == 1 and cond[TAX.index("smile")] == 0

    def test_count_sixteen(self, client):
        doc = client.post("/v1/generate", json={"count": 16, "seed": 1}).json()
        assert len(doc["images"]) == 16 and len(doc["resolved_conditions"]) == 16

    @pytest.mark.parametrize("req", [
        {"count": 0}, {"count": 17}, {"assigned": {"blonde hair": True, "red hair": True}},
        {"assigned": {"wings": True}}, {"seed": -1},
    ])
    def test_invalid_requests(self, client, req):
        r = client.post("/v1/generate", json=req)
        assert r.status_code == 422

    def test_unknown_name_lists_taxonomy(self, client):
        r = client.post("/v1/generate", json={"assigned": {"wings": True}})
        assert "blonde hair" in r.json()["detail"]

    def test_unseeded_requests_derive_seeds(self, bundle_dir):
        client = TestClient(create_app(bundle_dir, base_seed=11))
        seeds = [client.post("/v1/generate", json={}).json()["seed"] for _ in range(3)]
        assert seeds == [11 ^ 0, 11 ^ 1, 11 ^ 2]

    def test_taxonomy_and_health(self, client, bundle_dir):
        assert client.get("/v1/taxonomy").json()["names"] == list(TAX.names)
        health = client.get("/v1/health").json()
        assert health["status"] == "ok"
        assert health["model_version"] == load_bundle(bundle_dir).model_version

    def test_no_model(self):
        client = TestClient(create_app(None))
        assert client.post("/v1/generate", json={}).status_code == 503
        assert client.get("/v1/health").json()["status"] == "no-model"
        assert len(client.get("/v1/taxonomy").json()["names"]) == 34

    def test_concurrent_requests_match_serial(self, bundle_dir):
        service = GenerationService(load_bundle(bundle_dir))
        reqs = [GenerationRequest(count=2, seed=s) for s in range(6)]
        serial = [service.generate(r).images for r in reqs]
        with ThreadPoolExecutor(4) as pool:
            parallel = [r.images for r in pool.map(service.generate, reqs)]
        assert serial == parallel
