import json

import numpy as np
import pytest
from hypothesis import given, strategies as st
from PIL import Image

from anigan.dataset import (
    BoundingBox,
    DatasetManifest,
    FaceRecord,
    encode_png,
    filter_manifest,
    ingest,
    parse_release_year,
    read_listing,
    read_rejection_list,
    render_stats,
    scale_box,
    stats,
)
from anigan.errors import ValidationError
from anigan.synthetic import DiscColorJudge, ForegroundBoxDetector, PALETTE, write_disc_fixture
from anigan.tagspace import default_taxonomy

TAX = default_taxonomy()


@st.composite
def box_in_image(draw):
    W = draw(st.integers(8, 400))
    H = draw(st.integers(8, 400))
    w = draw(st.floats(1, W))
    h = draw(st.floats(1, H))
    x = draw(st.floats(0, W - w))
    y = draw(st.floats(0, H - h))
    return BoundingBox(x, y, w, h), W, H


class TestScaleBox:
    def test_interior_box_grows_about_center(self):
        out = scale_box(BoundingBox(40, 40, 20, 20), 1.5, 100, 100)
        assert out == BoundingBox(35, 35, 30, 30)

    def test_shifted_inward_at_border(self):
        out = scale_box(BoundingBox(0, 0, 20, 20), 1.5, 100, 100)
        assert out == BoundingBox(0, 0, 30, 30)
        out = scale_box(BoundingBox(80, 80, 20, 20), 1.5, 100, 100)
        assert out == BoundingBox(70, 70, 30, 30)

    def test_saturates_to_image(self):
        out = scale_box(BoundingBox(10, 0, 80, 50), 1.5, 100, 60)
        assert out == BoundingBox(0, 0, 100, 60)

    @pytest.mark.parametrize("box,factor", [
        (BoundingBox(0, 0, 0, 5), 1.5),
        (BoundingBox(0, 0, 5, -1), 1.5),
        (BoundingBox(0, 0, 5, 5), 0.9),
        (BoundingBox(-1, 0, 5, 5), 1.5),
        (BoundingBox(98, 0, 5, 5), 1.5),
    ])
    def test_rejects(self, box, factor):
        with pytest.raises(ValidationError):
            scale_box(box, factor, 100, 100)

    @given(box_in_image(), st.floats(1.0, 4.0))
    def test_properties(self, case, factor):
        box, W, H = case
        out = scale_box(box, factor, W, H)
        tol = 1e-9 * max(W, H)
        assert out.x >= -tol and out.y >= -tol
        assert out.x + out.w <= W + tol and out.y + out.h <= H + tol
        assert out.w == pytest.approx(min(factor * box.w, W))
        assert out.h == pytest.approx(min(factor * box.h, H))
        # the grown box still contains the detection
        assert out.x <= box.x + tol and out.y <= box.y + tol
        assert out.x + out.w >= box.x + box.w - tol and out.y + out.h >= box.y + box.h - tol


class TestReleaseYear:
    @pytest.mark.parametrize("raw,year", [
        ("2011-04-01", 2011), ("2004/12/24", 2004), ("2030-01-01", None), ("", None), (None, None), ("n/a", None),
    ])
    def test_parse(self, raw, year):
        assert parse_release_year(raw) == year


def _record(i, year, tags=None, rejected=False, reason=None):
    tags = tags or tuple(int(v) for v in TAX.encode(["blonde hair", "blue eyes"]).values)
    return FaceRecord(str(i), f"u{i}", f"p{i}", 0, f"sha256:{i:064x}", BoundingBox(0, 0, 10, 10),
                      BoundingBox(0, 0, 15, 40), year, tags, rejected, reason)


class TestFilterAndStats:
    def manifest(self):
        return DatasetManifest([_record(0, 2004), _record(1, 2005), _record(2, None), _record(3, 2012)],
                               TAX.version)

    def test_filter_reasons(self):
        out = filter_manifest(self.manifest(), 2005, {f"sha256:{3:064x}"})
        reasons = [r.rejection_reason for r in out.records]
        assert reasons == ["year<2005", None, "unknown-year", "manual"]
        assert [r.source_id for r in out.retained] == ["1"]

    def test_filter_idempotent(self):
        once = filter_manifest(self.manifest(), 2005, {f"sha256:{3:064x}"})
        twice = filter_manifest(once, 2005, {f"sha256:{3:064x}"})
        assert once.records == twice.records
        # a later, stricter pass does not rewrite existing reasons
        assert filter_manifest(once, 2010).records[0].rejection_reason == "year<2005"

    def test_stats(self):
        report = stats(filter_manifest(self.manifest(), 2005))
        assert report["n_records"] == 4 and report["n_retained"] == 2
        assert report["by_year"] == {"2004": 1, "2005": 1, "2012": 1, "unknown": 1}
        assert report["by_short_edge"] == {"0": 4}
        assert report["tag_counts"]["blonde hair"] == 2
        assert report["rejections"] == {"unknown-year": 1, "year<2005": 1}

    def test_render(self, tmp_path):
        paths = render_stats(stats(self.manifest()), tmp_path)
        assert [p.name for p in paths] == ["by_year.png", "by_short_edge.png", "tag_counts.png"]
        assert all(p.stat().st_size > 0 for p in paths)

    def test_rejection_list(self, tmp_path):
        f = tmp_path / "rej.txt"
        f.write_text("# comment\nabc\nsha256:def  # trailing\n\n")
        assert read_rejection_list(f) == {"sha256:abc", "sha256:def"}

    def test_validate_rejects_soft_tags(self):
        bad = _record(0, 2010, tags=tuple([0] * 34))
        with pytest.raises(ValidationError):
            DatasetManifest([bad], TAX.version).validate()


class TestIngest:
    def test_fixture_round_trip(self, tmp_path):
        listing = write_disc_fixture(tmp_path / "src", n=8)
        judge = DiscColorJudge()
        manifest = ingest(read_listing(listing), ForegroundBoxDetector(), judge.estimate, tmp_path / "ds")
        assert len(manifest) == 8
        manifest.validate()
        assert manifest.verify_images() == []
        again = DatasetManifest.load(tmp_path / "ds")
        assert again.records == manifest.records
        for rec in again.records:
            img = again.load_image(rec)
            assert img.shape == (128, 128, 3) and img.dtype == np.uint8
            hair = [n for n in TAX.hair_colors if rec.tags[TAX.index(n)]]
            assert hair == judge.classify(img[None])
        years = sorted(r.release_year for r in again.records)
        assert years == list(range(2003, 2011))

    def test_bad_image_is_skipped(self, tmp_path, caplog):
        listing = write_disc_fixture(tmp_path / "src", n=3)
        (tmp_path / "src" / "img_001.png").write_bytes(b"not a png")
        manifest = ingest(read_listing(listing), ForegroundBoxDetector(), DiscColorJudge().estimate, tmp_path / "ds")
        assert len(manifest) == 2
        assert "skipping" in caplog.text

    def test_parallel_matches_serial(self, tmp_path):
        listing = read_listing(write_disc_fixture(tmp_path / "src", n=6))
        est = DiscColorJudge().estimate
        a = ingest(listing, ForegroundBoxDetector(), est, tmp_path / "a")
        b = ingest(listing, ForegroundBoxDetector(), est, tmp_path / "b", workers=3)
        assert a.to_jsonl() == b.to_jsonl()

    def test_crop_then_resize(self, tmp_path):
        # a half-red, half-blue picture; the detector returns the red half only
        img = np.zeros((50, 100, 3), np.uint8)
        img[:, :50] = PALETTE["red hair"]
        img[:, 50:] = PALETTE["blue hair"]
        path = tmp_path / "two.png"
        Image.fromarray(img).save(path)
        rows = [{"id": "1", "name": "x", "sell_day": "2010-01-01", "url": "u", "path": str(path)}]
        m = ingest(rows, lambda im: [(10, 10, 20, 20)], DiscColorJudge().estimate, tmp_path / "ds", image_size=16)
        face = m.load_image(m.records[0])
        assert m.records[0].scaled_box == BoundingBox(5, 5, 30, 30)
        assert face.shape == (16, 16, 3)
        assert np.all(face == PALETTE["red hair"])

    def test_listing_missing_column(self, tmp_path):
        f = tmp_path / "l.json"
        f.write_text(json.dumps([{"id": 1, "name": "x", "url": "u", "path": "p"}]))
        with pytest.raises(ValidationError, match="sell_day"):
            read_listing(f)


def test_png_encoding_is_deterministic():
    img = np.random.default_rng(0).integers(0, 256, (8, 8, 3), dtype=np.uint8)
    assert encode_png(img) == encode_png(img.copy())


@given(box_in_image(), st.floats(1.0, 4.0))
def test_scale_box_keeps_center_without_clamping(case, factor):
    box, W, H = case
    out = scale_box(box, factor, W, H)
    cx, cy = box.center
    if cx - factor * box.w / 2 >= 0 and cx + factor * box.w / 2 <= W:
        assert out.center[0] == pytest.approx(cx, abs=1e-9)
    if cy - factor * box.h / 2 >= 0 and cy + factor * box.h / 2 <= H:
        assert out.center[1] == pytest.approx(cy, abs=1e-9)


@given(st.lists(st.tuples(st.integers(0, 12), st.one_of(st.none(), st.integers(1995, 2020)), st.booleans()),
                min_size=1, max_size=30))
def test_stats_hair_counts_equal_retained(rows):
    records = []
    for i, (hair, year, manual) in enumerate(rows):
        tags = tuple(int(v) for v in TAX.encode([TAX.hair_colors[hair], "blue eyes"]).values)
        records.append(_record(i, year, tags=tags))
    rejects = {r.image_ref for r, (_, _, manual) in zip(records, rows) if manual}
    m = filter_manifest(DatasetManifest(records, TAX.version), 2005, rejects)
    report = stats(m)
    assert sum(report["tag_counts"][n] for n in TAX.hair_colors) == report["n_retained"] == len(m.retained)
    assert sum(report["by_year"].values()) == len(records)
    assert filter_manifest(m, 2005, rejects).records == m.records


def test_manifest_reserialization_is_byte_identical(tmp_path):
    listing = write_disc_fixture(tmp_path / "src", n=4)
    m = ingest(read_listing(listing), ForegroundBoxDetector(), DiscColorJudge().estimate, tmp_path / "ds")
    again = DatasetManifest.load(tmp_path / "ds")
    assert again.to_jsonl() == m.to_jsonl() == (tmp_path / "ds" / "manifest.jsonl").read_text()
