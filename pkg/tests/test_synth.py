import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import ndimage

from simplexpde.field import AdtfError, DomainError, argmax_labels, class_mass, simplex_violation
from simplexpde.synth import (VesselConfig, VoronoiConfig, config_hash, dataset_hash, fnv1a64, fold_of, fold_split,
                              generate_dataset, generate_vessel_pair, generate_voronoi_pair, read_dataset,
                              write_dataset)


class TestHashing:
    def test_fnv_reference_vectors(self):
        # published FNV-1a 64-bit test vectors
        assert fnv1a64(b"") == 0xCBF29CE484222325
        assert fnv1a64(b"a") == 0xAF63DC4C8601EC8C
        assert fnv1a64(b"foobar") == 0x85944171F73967E8

    def test_config_hash_key_order_independent(self):
        assert config_hash({"a": 1, "b": 2.5}) == config_hash({"b": 2.5, "a": 1})
        assert config_hash(VoronoiConfig()) != config_hash(VoronoiConfig(tau=2.0))


class TestVoronoi:
    def test_deterministic(self):
        assert generate_voronoi_pair(VoronoiConfig(), 3, 1) == generate_voronoi_pair(VoronoiConfig(), 3, 1)

    def test_streams_differ(self):
        a = generate_voronoi_pair(VoronoiConfig(), 0, 0)
        assert not np.array_equal(a.baseline.values, generate_voronoi_pair(VoronoiConfig(), 0, 1).baseline.values)
        assert not np.array_equal(a.baseline.values, generate_voronoi_pair(VoronoiConfig(), 1, 0).baseline.values)

    def test_simplex(self):
        pair = generate_voronoi_pair(VoronoiConfig(size=32), 0, 0)
        for f in (pair.baseline, pair.target):
            assert simplex_violation(f.values) <= 1e-6
            assert f.values.shape == (5, 32, 32)

    def test_tumor_grows_across_seeds(self):
        for s in range(50):
            pair = generate_voronoi_pair(VoronoiConfig(), s, 0)
            assert class_mass(pair.target, 4) > class_mass(pair.baseline, 4)

    def test_provenance(self):
        pair = generate_voronoi_pair(VoronoiConfig(), 5, 2)
        assert pair.provenance == {"generator": "voronoi", "config_hash": config_hash(VoronoiConfig()),
                                   "seed": 5, "index": 2}

    @pytest.mark.parametrize("kw", [dict(sigma0=7.0, sigma1=4.0), dict(tau=0.0), dict(sites_per_class=0),
                                    dict(num_classes=2), dict(amplitude=1.5)])
    def test_rejects_invalid(self, kw):
        with pytest.raises(DomainError):
            VoronoiConfig(**kw)


class TestVessel:
    def test_deterministic(self):
        assert generate_vessel_pair(VesselConfig(), 2, 0) == generate_vessel_pair(VesselConfig(), 2, 0)

    @pytest.mark.parametrize("seed", range(10))
    def test_structure(self, seed):
        cfg = VesselConfig()
        pair, s = generate_vessel_pair(cfg, seed, 0, return_structure=True)
        vessel = cfg.num_lobes
        mask = argmax_labels(pair.baseline.values, 0) == vessel
        lab, n = ndimage.label(mask, structure=np.ones((3, 3)))
        assert n == 1 and lab[s["root"]] == 1
        assert s["seed_distance"] <= cfg.seed_distance
        assert not np.any(s["skeleton"] & ~s["vessel_t1"])
        assert not np.any(s["vessel_t0"] & ~s["vessel_t1"])
        for f in (pair.baseline, pair.target):
            assert simplex_violation(f.values) <= 1e-6

    @pytest.mark.parametrize("kw", [dict(steps=0), dict(vessel_radius=2.0, vessel_radius_t1=2.0),
                                    dict(vessel_radius=0.5), dict(seed_distance=-1.0)])
    def test_rejects_invalid(self, kw):
        with pytest.raises(DomainError):
            VesselConfig(**kw)

    @given(st.integers(0, 2**31 - 1))
    @settings(max_examples=10, deadline=None)
    def test_thickening_monotone(self, seed):
        _, s = generate_vessel_pair(VesselConfig(size=32, steps=30), seed, 0, return_structure=True)
        assert not np.any(s["vessel_t0"] & ~s["vessel_t1"])


class TestFolds:
    def test_split_by_index_mod(self):
        train, test = fold_split(12, 2)
        assert test == [2, 7] and len(train) == 10
        assert fold_of(7) == 2

    def test_folds_partition(self):
        held = sorted(i for f in range(5) for i in fold_split(23, f)[1])
        assert held == list(range(23))

    def test_rejects_bad_fold(self):
        with pytest.raises(DomainError):
            fold_split(10, 5)


class TestDataset:
    def test_round_trip(self, tmp_path):
        pairs = generate_dataset("voronoi", 2, 0, VoronoiConfig(size=16))
        back = read_dataset(write_dataset(pairs, tmp_path / "ds"))
        assert back == pairs
        assert dataset_hash(back) == dataset_hash(pairs)

    def test_manifest_layout(self, tmp_path):
        write_dataset(generate_dataset("vessel", 1, 0, VesselConfig(size=16, steps=10)), tmp_path)
        m = json.loads((tmp_path / "manifest.json").read_text())
        assert m["count"] == 1
        entry = m["pairs"][0]
        assert entry["fields"] == ["t0.adtf", "t1.adtf"] and entry["treatment"] == "treatment.json"
        assert (tmp_path / "pair_0000" / "treatment.json").exists()

    def test_truncated_payload(self, tmp_path):
        write_dataset(generate_dataset("voronoi", 1, 0, VoronoiConfig(size=8)), tmp_path)
        f = tmp_path / "pair_0000" / "t1.adtf"
        f.write_bytes(f.read_bytes()[:-8])
        with pytest.raises(AdtfError, match="t1.adtf.*payload length"):
            read_dataset(tmp_path)

    def test_version_mismatch(self, tmp_path):
        write_dataset(generate_dataset("voronoi", 1, 0, VoronoiConfig(size=8)), tmp_path)
        m = json.loads((tmp_path / "manifest.json").read_text())
        m["version"] = 99
        (tmp_path / "manifest.json").write_text(json.dumps(m))
        with pytest.raises(AdtfError, match="version"):
            read_dataset(tmp_path)

    def test_unknown_benchmark(self):
        with pytest.raises(DomainError):
            generate_dataset("nope", 1)
