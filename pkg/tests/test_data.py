"""Bag container codec laws, manifest parsing, synthetic-cohort properties,
and K-fold split structure."""

import numpy as np
import pytest

from crossfusion.data import (
    FeatureBag,
    SynthConfig,
    _grid_coords,
    kfold_split,
    load_dataset,
    read_bag,
    read_manifest,
    synth_generate,
    write_bag,
    write_manifest,
)
from crossfusion.errors import ConfigError, FormatError, ManifestError
from oracles import spearman


def random_bag(rng, d_in=8):
    counts = {s: int(rng.integers(1, 12)) for s in ("coarse", "source", "fine")}
    feats = {
        s: rng.standard_normal((n, d_in)).astype(np.float32).astype(np.float64)
        for s, n in counts.items()
    }
    return FeatureBag(
        slide_id="r0",
        coarse=feats["coarse"],
        source=feats["source"],
        fine=feats["fine"],
        coarse_coords=_grid_coords(counts["coarse"]),
        source_coords=_grid_coords(counts["source"]),
        fine_coords=_grid_coords(counts["fine"]),
    )


class TestBagCodec:
    def test_round_trip_bitwise(self, tmp_path):
        rng = np.random.default_rng(0)
        for i in range(10):
            bag = random_bag(rng)
            p1 = tmp_path / f"a{i}.xfb"
            p2 = tmp_path / f"b{i}.xfb"
            write_bag(bag, p1)
            write_bag(read_bag(p1), p2)
            assert p1.read_bytes() == p2.read_bytes()

    def test_values_survive_round_trip(self, tmp_path):
        rng = np.random.default_rng(1)
        bag = random_bag(rng)
        path = tmp_path / "bag.xfb"
        write_bag(bag, path)
        loaded = read_bag(path)
        for scale in ("coarse", "source", "fine"):
            np.testing.assert_array_equal(loaded.features(scale), bag.features(scale))
            np.testing.assert_array_equal(loaded.coords(scale), bag.coords(scale))

    def test_bad_magic_offset_zero(self, tmp_path):
        path = tmp_path / "bad.xfb"
        path.write_bytes(b"XXXXXX" + bytes(20))
        with pytest.raises(FormatError, match="offset 0"):
            read_bag(path)

    def test_truncated_feature_block_names_scale(self, tmp_path):
        rng = np.random.default_rng(2)
        bag = random_bag(rng)
        path = tmp_path / "t.xfb"
        write_bag(bag, path)
        blob = path.read_bytes()
        # cut inside the coarse feature payload (header is 12 bytes + 4 count)
        path.write_bytes(blob[:20])
        with pytest.raises(FormatError, match="coarse"):
            read_bag(path)

    def test_trailing_garbage_rejected(self, tmp_path):
        rng = np.random.default_rng(3)
        bag = random_bag(rng)
        path = tmp_path / "t.xfb"
        write_bag(bag, path)
        path.write_bytes(path.read_bytes() + b"\x00")
        with pytest.raises(FormatError, match="trailing"):
            read_bag(path)

    def test_unsupported_version(self, tmp_path):
        rng = np.random.default_rng(4)
        bag = random_bag(rng)
        path = tmp_path / "t.xfb"
        write_bag(bag, path)
        blob = bytearray(path.read_bytes())
        blob[6] = 9
        path.write_bytes(bytes(blob))
        with pytest.raises(FormatError, match="version"):
            read_bag(path)


class TestManifest:
    def test_single_record(self, tmp_path):
        path = tmp_path / "m.tsv"
        path.write_text("s1\t120.5\t1\tbags/s1.xfb\n")
        recs = read_manifest(path)
        assert len(recs) == 1
        assert recs[0].slide_id == "s1"
        assert recs[0].event_time == 120.5
        assert recs[0].event == 1
        assert recs[0].bag_path == "bags/s1.xfb"

    def test_comments_and_blanks_skipped(self, tmp_path):
        path = tmp_path / "m.tsv"
        path.write_text("# header\n\ns1\t1.0\t0\ta.xfb\n")
        assert len(read_manifest(path)) == 1

    def test_bad_event_value(self, tmp_path):
        path = tmp_path / "m.tsv"
        path.write_text("s1\t1.0\t2\ta.xfb\n")
        with pytest.raises(ManifestError, match="line 1"):
            read_manifest(path)

    def test_bad_time(self, tmp_path):
        path = tmp_path / "m.tsv"
        path.write_text("# c\ns1\tzzz\t1\ta.xfb\n")
        with pytest.raises(ManifestError, match="line 2"):
            read_manifest(path)

    def test_wrong_field_count(self, tmp_path):
        path = tmp_path / "m.tsv"
        path.write_text("s1\t1.0\t1\n")
        with pytest.raises(ManifestError, match="line 1"):
            read_manifest(path)

    def test_empty_file(self, tmp_path):
        path = tmp_path / "m.tsv"
        path.write_text("")
        assert read_manifest(path) == []

    def test_write_read_round_trip(self, tmp_path):
        bags, recs = synth_generate(SynthConfig(n_slides=4, d_in=8, seed=5))
        path = tmp_path / "m.tsv"
        write_manifest(recs, path)
        back = read_manifest(path)
        assert [r.slide_id for r in back] == [r.slide_id for r in recs]
        assert [r.event_time for r in back] == [r.event_time for r in recs]


class TestSynthGenerate:
    def test_deterministic_given_seed(self):
        cfg = SynthConfig(n_slides=6, d_in=8, seed=11)
        bags1, recs1 = synth_generate(cfg)
        bags2, recs2 = synth_generate(SynthConfig(n_slides=6, d_in=8, seed=11))
        for b1, b2 in zip(bags1, bags2):
            for scale in ("coarse", "source", "fine"):
                assert b1.features(scale).tobytes() == b2.features(scale).tobytes()
        assert [r.event_time for r in recs1] == [r.event_time for r in recs2]

    def test_different_seed_differs(self):
        b1, _ = synth_generate(SynthConfig(n_slides=2, d_in=8, seed=1))
        b2, _ = synth_generate(SynthConfig(n_slides=2, d_in=8, seed=2))
        assert b1[0].coarse.tobytes() != b2[0].coarse.tobytes()

    def test_poisson_patch_count_means(self):
        bags, _ = synth_generate(SynthConfig(n_slides=200, d_in=4, seed=3, signal_mode="none"))
        for scale, mean in (("coarse", 9.0), ("source", 35.0), ("fine", 135.0)):
            counts = [b.features(scale).shape[0] for b in bags]
            assert abs(np.mean(counts) - mean) / mean < 0.10

    def test_times_positive_and_censoring_consistent(self):
        bags, recs = synth_generate(SynthConfig(n_slides=100, d_in=4, seed=4, censor_rate=0.4))
        assert all(r.event_time > 0 for r in recs)
        assert all(r.event in (0, 1) for r in recs)
        frac_censored = np.mean([1 - r.event for r in recs])
        assert 0.2 < frac_censored < 0.6

    def test_coords_unique_and_row_major(self):
        bags, _ = synth_generate(SynthConfig(n_slides=3, d_in=4, seed=5))
        for bag in bags:
            for scale in ("coarse", "source", "fine"):
                coords = bag.coords(scale)
                assert len({(int(x), int(y)) for x, y in coords}) == len(coords)
        np.testing.assert_array_equal(_grid_coords(5), [[0, 0], [1, 0], [2, 0], [0, 1], [1, 1]])

    def test_latent_risk_drives_event_time(self):
        """Spearman(z, time) across uncensored slides is strongly negative.

        z is not exported, so regenerate the draw sequence: higher planted
        signal shortens survival by construction, so event time ordering must
        anti-correlate with the coarse block offset (a noisy proxy of z).
        """
        bags, recs = synth_generate(
            SynthConfig(n_slides=500, d_in=8, seed=6, censor_rate=0.0)
        )
        proxies = [float(b.coarse[:, 0].mean()) for b in bags]
        times = [r.event_time for r in recs]
        rho = spearman(proxies, times)
        assert rho <= -0.8

    def test_signal_none_plants_nothing(self):
        bags, _ = synth_generate(SynthConfig(n_slides=50, d_in=8, seed=7, signal_mode="none"))
        means = np.concatenate([b.coarse[:, 0] for b in bags])
        assert abs(means.mean()) < 0.1  # pure standard normal background

    def test_single_scale_mode_leaves_coarse_clean(self):
        bags, _ = synth_generate(
            SynthConfig(n_slides=50, d_in=12, seed=8, signal_mode="single_scale")
        )
        coarse = np.concatenate([b.coarse[:, 0] for b in bags])
        assert abs(coarse.mean()) < 0.1

    def test_invalid_config(self):
        with pytest.raises(ConfigError):
            SynthConfig(n_slides=5, censor_rate=1.0)
        with pytest.raises(ConfigError):
            SynthConfig(n_slides=5, signal_mode="bogus")
        with pytest.raises(ConfigError):
            SynthConfig(n_slides=0)


class TestLoadDataset:
    def test_bags_carry_labels(self, tmp_path):
        bags, recs = synth_generate(SynthConfig(n_slides=5, d_in=8, seed=9))
        (tmp_path / "bags").mkdir()
        for bag, rec in zip(bags, recs):
            write_bag(bag, tmp_path / rec.bag_path)
        write_manifest(recs, tmp_path / "manifest.tsv")
        loaded = load_dataset(tmp_path / "manifest.tsv")
        assert len(loaded) == 5
        for bag, rec in zip(loaded, recs):
            assert bag.slide_id == rec.slide_id
            assert bag.label.event_time == rec.event_time
            assert bag.label.event == rec.event


class TestKFold:
    def test_five_folds_of_ten(self):
        splits = kfold_split(10, 5, seed=0)
        assert len(splits) == 5
        for train, val in splits:
            assert len(val) == 2
            assert len(train) == 8
            assert set(train) | set(val) == set(range(10))
            assert not set(train) & set(val)

    def test_union_of_validation_sets_is_everything(self):
        splits = kfold_split(23, 5, seed=1)
        all_val = np.concatenate([v for _, v in splits])
        assert sorted(all_val) == list(range(23))
        sizes = [len(v) for _, v in splits]
        assert max(sizes) - min(sizes) <= 1

    def test_seed_determinism(self):
        a = kfold_split(17, 4, seed=3)
        b = kfold_split(17, 4, seed=3)
        for (ta, va), (tb, vb) in zip(a, b):
            np.testing.assert_array_equal(va, vb)
            np.testing.assert_array_equal(ta, tb)
        c = kfold_split(17, 4, seed=4)
        assert any(not np.array_equal(va, vc) for (_, va), (_, vc) in zip(a, c))

    def test_invalid_params(self):
        with pytest.raises(ConfigError):
            kfold_split(5, 1, seed=0)
        with pytest.raises(ConfigError):
            kfold_split(3, 4, seed=0)
