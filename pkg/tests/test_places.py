import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vprkit.errors import ManifestError, SamplerError
from vprkit.places import (
    BatchSampler,
    BatchSpec,
    ImageRecord,
    PlacesDB,
    SynthConfig,
    grid_cell,
    grid_group,
    haversine,
    ingest_manifest,
    query_reference_split,
    synth_places,
    training_view,
    write_manifest,
)

HEADER = "place_id,image_ref,lat,lon,bearing,year,month\n"


def write_csv(tmp_path, body, name="manifest.csv"):
    path = tmp_path / name
    path.write_text(HEADER + body, encoding="utf-8")
    return path


def rows_for_place(pid, count, lat, lon):
    return "".join(
        f"{pid},img_{pid}_{i},{lat},{lon},90.0,2015,{1 + i % 12}\n" for i in range(count)
    )


class TestIngestManifest:
    def test_empty_manifest_gives_empty_db(self, tmp_path):
        db = ingest_manifest(write_csv(tmp_path, ""))
        assert len(db) == 0

    def test_small_place_rejected_by_name(self, tmp_path):
        path = write_csv(tmp_path, rows_for_place(7, 3, 48.1, 2.2))
        with pytest.raises(ManifestError, match="place 7"):
            ingest_manifest(path)

    def test_small_place_allowed_with_flag(self, tmp_path):
        path = write_csv(tmp_path, rows_for_place(7, 3, 48.1, 2.2))
        db = ingest_manifest(path, allow_small_places=True)
        assert len(db) == 1 and len(db.places[0]) == 3

    def test_two_places_four_images(self, tmp_path):
        body = rows_for_place(0, 4, 48.1, 2.2) + rows_for_place(1, 4, 48.2, 2.3)
        db = ingest_manifest(write_csv(tmp_path, body))
        assert len(db) == 2
        assert all(len(p) == 4 for p in db.places)

    def test_parse_error_carries_line_number(self, tmp_path):
        body = rows_for_place(0, 4, 48.1, 2.2) + "1,img,not_a_number,2.0,,2015,1\n"
        with pytest.raises(ManifestError, match="line 6"):
            ingest_manifest(write_csv(tmp_path, body))

    def test_duplicate_ref_rejected(self, tmp_path):
        body = rows_for_place(0, 4, 48.1, 2.2)
        body += "0,img_0_0,48.1,2.2,,2016,1\n"
        with pytest.raises(ManifestError, match="duplicate"):
            ingest_manifest(write_csv(tmp_path, body))

    def test_out_of_range_coordinates_rejected(self, tmp_path):
        body = "0,img,91.0,2.0,,2015,1\n"
        with pytest.raises(ManifestError, match="lat"):
            ingest_manifest(write_csv(tmp_path, body), allow_small_places=True)

    def test_bad_header_rejected(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("a,b,c\n", encoding="utf-8")
        with pytest.raises(ManifestError, match="header"):
            ingest_manifest(path)

    def test_shared_cell_places_rejected(self, tmp_path):
        body = rows_for_place(0, 4, 48.1001, 2.2001) + rows_for_place(1, 4, 48.10012, 2.20012)
        with pytest.raises(ManifestError, match="share grid cell"):
            ingest_manifest(write_csv(tmp_path, body))

    def test_roundtrip_through_write_manifest(self, tmp_path):
        body = rows_for_place(0, 4, 48.1, 2.2) + rows_for_place(1, 5, 48.2, 2.3)
        db = ingest_manifest(write_csv(tmp_path, body))
        out = tmp_path / "again.csv"
        write_manifest(db, out)
        db2 = ingest_manifest(out)
        assert [p.place_id for p in db2.places] == [p.place_id for p in db.places]
        assert [len(p) for p in db2.places] == [len(p) for p in db.places]


class TestGridGroup:
    def test_cell_quantization_by_hand(self):
        assert grid_cell(48.85812, 2.29450, 0.001) == (48858, 2294)

    def test_sparse_dates_cell_dropped(self):
        recs = [
            ImageRecord(f"i{k}", 10.0005, 20.0005, year=2015, month=1 + k)
            for k in range(3)
        ]
        assert len(grid_group(recs, min_dates=4)) == 0

    def test_empty_records_empty_db(self):
        assert len(grid_group([], min_dates=4)) == 0

    def test_grouping_by_cell(self):
        recs = []
        for cell in range(3):
            for k in range(4):
                recs.append(
                    ImageRecord(
                        f"c{cell}_{k}", 10.0 + cell * 0.001 + 0.0004, 20.0,
                        year=2015, month=1 + k,
                    )
                )
        db = grid_group(recs, min_dates=4)
        assert len(db) == 3
        assert [p.place_id for p in db.places] == [0, 1, 2]
        db.check_disjoint()

    def test_regrouping_is_identity(self, rng):
        recs = []
        for _ in range(120):
            lat = float(rng.uniform(-5, 5))
            lon = float(rng.uniform(-5, 5))
            recs.append(
                ImageRecord(
                    f"r{len(recs)}", lat, lon,
                    year=2010 + int(rng.integers(0, 8)),
                    month=1 + int(rng.integers(0, 12)),
                )
            )
        db = grid_group(recs, min_dates=1)
        flattened = [img for p in db.places for img in p.images]
        db2 = grid_group(flattened, min_dates=1)
        groups1 = sorted(tuple(sorted(i.image_ref for i in p.images)) for p in db.places)
        groups2 = sorted(tuple(sorted(i.image_ref for i in p.images)) for p in db2.places)
        assert groups1 == groups2

    def test_independent_of_input_order(self, rng):
        recs = [
            ImageRecord(f"r{i}", float(rng.uniform(0, 1)), float(rng.uniform(0, 1)),
                        year=2015, month=1 + i % 12)
            for i in range(50)
        ]
        shuffled = [recs[i] for i in rng.permutation(len(recs))]
        a = grid_group(recs, min_dates=1)
        b = grid_group(shuffled, min_dates=1)
        ga = [(p.place_id, sorted(i.image_ref for i in p.images)) for p in a.places]
        gb = [(p.place_id, sorted(i.image_ref for i in p.images)) for p in b.places]
        assert ga == gb


class TestHaversine:
    def test_coincident_points(self):
        assert haversine((12.5, -7.25), (12.5, -7.25)) == 0.0

    def test_one_millidegree_of_latitude(self):
        assert haversine((0.0, 0.0), (0.001, 0.0)) == pytest.approx(111.195, abs=0.01)

    def test_symmetry_and_nonnegativity_random(self, rng):
        for _ in range(300):
            a = (float(rng.uniform(-89, 89)), float(rng.uniform(-179, 179)))
            b = (float(rng.uniform(-89, 89)), float(rng.uniform(-179, 179)))
            d_ab = haversine(a, b)
            d_ba = haversine(b, a)
            assert d_ab >= 0.0
            assert abs(d_ab - d_ba) < 1e-9
            if a != b:
                assert d_ab > 0.0

    @settings(max_examples=200, deadline=None)
    @given(
        lat=st.floats(-89.0, 89.0, allow_nan=False),
        lon=st.floats(-179.0, 179.0, allow_nan=False),
        dlat=st.floats(-0.5, 0.5, allow_nan=False),
        dlon=st.floats(-0.5, 0.5, allow_nan=False),
    )
    def test_symmetry_hypothesis(self, lat, lon, dlat, dlon):
        a = (lat, lon)
        b = (lat + dlat, lon + dlon)
        assert haversine(a, b) == pytest.approx(haversine(b, a), abs=1e-9)


class TestSynthPlaces:
    def test_zero_perturbation_identical_payloads(self):
        cfg = SynthConfig(max_shift=0, gain=0.0, noise_sigma=0.0)
        db = synth_places(3, 5, shape=(4, 4, 3), perturbation=cfg, rng_seed=11)
        for place in db.places:
            first = place.images[0].payload
            for img in place.images[1:]:
                np.testing.assert_array_equal(img.payload, first)

    def test_same_seed_bit_identical(self):
        a = synth_places(4, 4, shape=(5, 5, 6), rng_seed=123)
        b = synth_places(4, 4, shape=(5, 5, 6), rng_seed=123)
        for pa, pb in zip(a.places, b.places):
            for ia, ib in zip(pa.images, pb.images):
                np.testing.assert_array_equal(ia.payload, ib.payload)
                assert (ia.lat, ia.lon) == (ib.lat, ib.lon)

    def test_counts(self):
        db = synth_places(64, 8, shape=(3, 3, 2), rng_seed=0)
        assert len(db) == 64
        assert db.num_images() == 512
        assert len({p.place_id for p in db.places}) == 64

    def test_places_geographically_disjoint(self):
        synth_places(30, 4, shape=(3, 3, 2), rng_seed=5).check_disjoint()

    def test_distinct_dates(self):
        db = synth_places(2, 6, shape=(3, 3, 2), rng_seed=5)
        assert all(p.distinct_dates() >= 4 for p in db.places)


def tiny_db(num_places=12, images=5, seed=0):
    return synth_places(num_places, images, shape=(3, 3, 2), rng_seed=seed)


class TestBatchSampler:
    def test_paper_scale_batch_size(self):
        db = tiny_db(num_places=110, images=4)
        sampler = BatchSampler(db, BatchSpec(100, 4, rng_seed=0))
        batch = next(sampler.epoch())
        assert len(batch) == 400

    def test_not_enough_places(self):
        db = tiny_db(num_places=5)
        with pytest.raises(SamplerError):
            BatchSampler(db, BatchSpec(6, 2, rng_seed=0))

    def test_not_enough_images_filters_places(self):
        db = tiny_db(num_places=6, images=3)
        with pytest.raises(SamplerError):
            BatchSampler(db, BatchSpec(4, 4, rng_seed=0))

    def test_same_seed_identical_sequences(self):
        db = tiny_db()
        spec = BatchSpec(4, 3, rng_seed=9)
        sampler_a = BatchSampler(db, spec)
        sampler_b = BatchSampler(db, spec)
        seq_a = [b for _ in range(3) for b in sampler_a.epoch()]
        seq_b = [b for _ in range(3) for b in sampler_b.epoch()]
        assert len(seq_a) == len(seq_b)
        for ba, bb in zip(seq_a, seq_b):
            assert ba.image_refs == bb.image_refs
            np.testing.assert_array_equal(ba.labels, bb.labels)

    def test_batch_structure_invariant(self):
        db = tiny_db()
        spec = BatchSpec(4, 3, rng_seed=2)
        sampler = BatchSampler(db, spec)
        for _ in range(5):
            for batch in sampler.epoch():
                uniq, counts = np.unique(batch.labels, return_counts=True)
                assert len(uniq) == 4
                assert np.all(counts == 3)

    def test_epoch_visits_every_eligible_place_once(self):
        db = tiny_db(num_places=12)
        sampler = BatchSampler(db, BatchSpec(4, 3, rng_seed=1))
        for _ in range(4):
            seen = []
            for batch in sampler.epoch():
                seen.extend(np.unique(batch.labels).tolist())
            assert sorted(seen) == sorted(p.place_id for p in db.places)

    def test_images_within_batch_unique(self):
        db = tiny_db()
        sampler = BatchSampler(db, BatchSpec(6, 4, rng_seed=3))
        for batch in sampler.epoch():
            assert len(set(batch.image_refs)) == len(batch.image_refs)


class TestSplits:
    def test_query_reference_split_sizes(self):
        db = tiny_db(num_places=6, images=5)
        queries, refs = query_reference_split(db, 2)
        assert len(queries) == 12
        assert len(refs) == 18
        qrefs = {img.image_ref for _, img in queries}
        rrefs = {img.image_ref for _, img in refs}
        assert not qrefs & rrefs

    def test_training_view_removes_held_out(self):
        db = tiny_db(num_places=6, images=5)
        view = training_view(db, 2)
        assert all(len(p) == 3 for p in view.places)
        queries, _ = query_reference_split(db, 2)
        held_out = {img.image_ref for _, img in queries}
        remaining = {img.image_ref for p in view.places for img in p.images}
        assert not held_out & remaining

    def test_split_too_deep_rejected(self):
        db = tiny_db(num_places=3, images=4)
        with pytest.raises(ValueError):
            query_reference_split(db, 4)


class TestDbValidation:
    def test_duplicate_place_ids_rejected(self):
        img = [ImageRecord(f"i{k}", 1.0, 1.0, year=2015, month=1 + k) for k in range(4)]
        img2 = [ImageRecord(f"j{k}", 2.0, 2.0, year=2015, month=1 + k) for k in range(4)]
        from vprkit.places import Place

        with pytest.raises(ValueError, match="unique"):
            PlacesDB([Place(1, img), Place(1, img2)])

    def test_shift_bound_rejected(self):
        with pytest.raises(ValueError):
            synth_places(2, 4, shape=(2, 2, 2), perturbation=SynthConfig(max_shift=2))

    def test_invalid_month_rejected(self):
        with pytest.raises(ValueError, match="month"):
            ImageRecord("x", 0.0, 0.0, year=2015, month=13)

    def test_bearing_range(self):
        with pytest.raises(ValueError, match="bearing"):
            ImageRecord("x", 0.0, 0.0, bearing=360.0, year=2015, month=1)
