import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from wavenilm import pipeline as pl
from wavenilm.pipeline import (ApplianceSpec, IngestError, NormalizationStats, ReadingSeries, WindowedDataset,
                               compute_norm_stats, fill_gaps, ingest_csv, resample, slice_windows, window_count)
from wavenilm.synth import SyntheticScenario, PRESET_TEMPLATES, generate, make_fixture_csv

from oracles import enumerate_offsets, welford


def gap_series(gap_seconds, before=11, after=5, value_before=7.0, value_after=3.0):
    """Readings every 10 s with one ``gap_seconds`` outage between them."""
    t0 = 1000
    ts_before = t0 + 10 * np.arange(before)
    first_after = ts_before[-1] + 10 + gap_seconds
    ts_after = first_after + 10 * np.arange(after)
    ts = np.concatenate([ts_before, ts_after])
    w = np.concatenate([np.full(before, value_before), np.full(after, value_after)])
    return ReadingSeries(ts, w)


class TestReadingSeries:
    def test_rejects_non_increasing(self):
        with pytest.raises(ValueError, match="index 2"):
            ReadingSeries([0, 10, 10], [1, 2, 3])

    def test_rejects_negative(self):
        with pytest.raises(ValueError):
            ReadingSeries([0, 10], [1, -2])


class TestResample:
    def test_uniform_input_unchanged(self):
        s = ReadingSeries(np.arange(0, 100, 10), np.arange(10.0))
        r = resample(s)
        np.testing.assert_array_equal(r.timestamps, s.timestamps)
        np.testing.assert_array_equal(r.watts, s.watts)

    def test_faster_input_takes_latest(self):
        s = ReadingSeries(np.arange(0, 31, 2), np.arange(16.0))
        r = resample(s)
        np.testing.assert_array_equal(r.timestamps, [0, 10, 20, 30])
        np.testing.assert_array_equal(r.watts, [0, 5, 10, 15])

    def test_stale_reading_marked_missing(self):
        r = resample(ReadingSeries([0, 8, 40], [1.0, 2.0, 3.0]))
        np.testing.assert_array_equal(r.timestamps, [0, 10, 20, 30, 40])
        assert r.watts[1] == 2.0
        assert np.isnan(r.watts[2:4]).all()

    def test_empty(self):
        assert len(resample(ReadingSeries([], []))) == 0

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.integers(1, 40), min_size=1, max_size=60), st.integers(0, 10_000))
    def test_grid_properties(self, steps, t0):
        ts = t0 + np.cumsum([0] + steps)
        r = resample(ReadingSeries(ts, np.ones(len(ts))))
        assert r.timestamps[0] == ts[0]
        assert np.all(np.diff(r.timestamps) == 10)
        assert r.timestamps[-1] <= ts[-1] < r.timestamps[-1] + 10


class TestGapFill:
    def test_170_seconds_forward_filled(self):
        out = fill_gaps(resample(gap_series(170)))
        want = np.concatenate([np.full(11, 7.0), np.full(17, 7.0), np.full(5, 3.0)])
        assert out.watts.tobytes() == want.tobytes()

    def test_190_seconds_zero_filled(self):
        out = fill_gaps(resample(gap_series(190)))
        want = np.concatenate([np.full(11, 7.0), np.zeros(19), np.full(5, 3.0)])
        assert out.watts.tobytes() == want.tobytes()

    def test_boundary_180_is_zero(self):
        out = fill_gaps(resample(gap_series(180)))
        assert not out.watts[11:29].any()

    def test_leading_gap_is_zero(self):
        s = ReadingSeries(np.arange(0, 50, 10), [np.nan, np.nan, 4.0, 5.0, 6.0])
        np.testing.assert_array_equal(fill_gaps(s).watts, [0, 0, 4, 5, 6])

    def test_requires_uniform_grid(self):
        with pytest.raises(ValueError, match="resample"):
            fill_gaps(ReadingSeries([0, 10, 25], [1.0, np.nan, 2.0]))

    def test_csv_dropouts_end_to_end(self, tmp_path):
        sc = SyntheticScenario(200, [PRESET_TEMPLATES["kettle"]], seed=1)
        hh = generate(sc)
        for dur, forward in ((170, True), (190, False)):
            path = tmp_path / f"gap{dur}.csv"
            make_fixture_csv(hh, path, dropouts=[(500, dur)])
            prepared = pl.prepare_household(ingest_csv(path).series)
            agg = prepared.aggregate
            k = 50
            n = dur // 10
            expect = np.full(n, hh.aggregate[k - 1]) if forward else np.zeros(n)
            assert agg[k:k + n].tobytes() == expect.tobytes()
            assert agg[:k].tobytes() == hh.aggregate[:k].tobytes()
            assert agg[k + n:].tobytes() == hh.aggregate[k + n:].tobytes()


class TestNormalization:
    def test_matches_welford(self):
        rng = np.random.default_rng(0)
        chunks = [rng.uniform(0, 3000, size=n) for n in (100, 257, 31)]
        stats = compute_norm_stats(chunks)
        mean, std = welford(chunks)
        assert stats.mean == pytest.approx(mean, rel=1e-12)
        assert stats.std == pytest.approx(std, rel=1e-10)

    def test_round_trip(self):
        rng = np.random.default_rng(1)
        w = rng.uniform(0, 4000, size=1000)
        stats = compute_norm_stats([w])
        # relative to the channel scale
        assert np.max(np.abs(stats.denormalize(stats.normalize(w)) - w)) / w.max() < 1e-12

    def test_constant_channel_rejected(self):
        with pytest.raises(ValueError, match="constant"):
            compute_norm_stats([np.full(10, 5.0)])

    def test_missing_rejected(self):
        with pytest.raises(ValueError, match="missing"):
            compute_norm_stats([np.array([1.0, np.nan])])

    def test_dict_round_trip(self):
        s = NormalizationStats(0.1 + 0.2, 1 / 3, "kettle")
        assert NormalizationStats.from_dict(s.to_dict("x."), "x.") == s


class TestWindows:
    def test_count_matches_enumeration(self):
        for T in range(0, 201):
            for L in (15, 31):
                for r in (1, 10):
                    assert window_count(T, L, r) == len(enumerate_offsets(T, L, r))

    def test_alignment(self):
        T, L, r = 60, 15, 10
        agg = np.arange(T, dtype=float)
        app = np.arange(T, dtype=float) + 1000
        ds = slice_windows(agg, app, L, r)
        assert len(ds) == window_count(T, L, r)
        for k in range(len(ds)):
            s = ds.starts[k]
            np.testing.assert_array_equal(ds.inputs[k], agg[s:s + L + r - 1])
            np.testing.assert_array_equal(ds.targets[k], app[s + L // 2:s + L // 2 + r])

    def test_short_series_warns(self):
        with pytest.warns(UserWarning, match="shorter"):
            ds = slice_windows(np.zeros(10), np.zeros(10), 15, 1)
        assert len(ds) == 0

    def test_targets_tile_without_overlap(self):
        ds = slice_windows(np.arange(100.0), np.arange(100.0), 15, 10)
        covered = np.concatenate(ds.targets)
        assert np.all(np.diff(covered) == 1)

    def test_filter_invalid(self):
        agg = np.full(40, 100.0)
        app = np.zeros(40)
        app[20] = 150.0  # above the aggregate
        ds = slice_windows(agg, app, 15, 5)
        kept = pl.filter_invalid(ds, agg, app)
        assert len(kept) == len(ds) - 1
        for s in kept.starts:
            assert not (s + 7 <= 20 < s + 12)

    def test_filter_invalid_per_household(self):
        a = slice_windows(np.full(30, 10.0), np.zeros(30), 15, 1, household=1)
        b = slice_windows(np.full(30, 10.0), np.zeros(30), 15, 1, household=2)
        both = WindowedDataset.concatenate([b, a])
        bad = np.zeros(30)
        bad[10] = 99.0
        kept = pl.filter_invalid(both, {1: np.full(30, 10.0), 2: np.full(30, 10.0)}, {1: bad, 2: np.zeros(30)})
        assert len(kept) == len(both) - 1
        assert list(both.households[:len(a)]) == [1] * len(a)

    def test_evaluation_mask(self):
        np.testing.assert_array_equal(pl.evaluation_mask([0, 5, 5, 10], [0, 6, 5, 1]), [False, False, True, True])

    def test_binarize_threshold_inclusive(self):
        np.testing.assert_array_equal(pl.binarize([1999.0, 2000.0, 2500.0], 2000), [0, 1, 1])

    def test_dataset_file_round_trip(self, tmp_path):
        ds = slice_windows(np.random.default_rng(0).uniform(size=50), np.arange(50.0), 15, 3, household=4)
        ds.save(tmp_path / "d.wnds")
        back = WindowedDataset.load(tmp_path / "d.wnds")
        for name in ("inputs", "targets", "starts", "households"):
            assert getattr(back, name).tobytes() == getattr(ds, name).tobytes()
        assert (back.receptive_field, back.target_field) == (15, 3)


class TestApplianceSpecs:
    def test_defaults(self):
        d = pl.DEFAULT_APPLIANCES
        assert {k: v.on_power_threshold for k, v in d.items()} == {
            "kettle": 2000, "microwave": 200, "dishwasher": 10, "washing_machine": 20}
        for spec in d.values():
            assert not set(spec.train_households) & set(spec.test_households)
            assert spec.train_households and spec.test_households

    def test_overlap_rejected(self):
        with pytest.raises(ValueError, match="both"):
            ApplianceSpec("x", 10, (1, 2), (2, 3))

    def test_file_round_trip(self, tmp_path):
        pl.write_appliance_specs(pl.DEFAULT_APPLIANCES, tmp_path / "a.ini")
        assert pl.load_appliance_specs(tmp_path / "a.ini") == pl.DEFAULT_APPLIANCES


class TestCsv:
    def write(self, tmp_path, text):
        p = tmp_path / "m.csv"
        p.write_text(text)
        return p

    def test_malformed_rows_skipped(self, tmp_path):
        p = self.write(tmp_path, "timestamp,aggregate,kettle\n0,1,0\n10,abc,0\n20,5\n30,-1,0\n40,3,1\n")
        res = ingest_csv(p)
        assert res.malformed_rows == [3, 4, 5]
        np.testing.assert_array_equal(res["aggregate"].timestamps, [0, 40])

    def test_non_increasing_is_fatal(self, tmp_path):
        p = self.write(tmp_path, "timestamp,aggregate\n0,1\n10,1\n10,2\n")
        with pytest.raises(IngestError, match="row 4"):
            ingest_csv(p)

    def test_header_checks(self, tmp_path):
        for text, msg in (("time,aggregate\n", "timestamp"), ("timestamp,kettle\n", "aggregate"),
                          ("timestamp,aggregate,aggregate\n", "duplicate"), ("", "empty")):
            with pytest.raises(IngestError, match=msg):
                ingest_csv(self.write(tmp_path, text))

    def test_unknown_column(self, tmp_path):
        with pytest.raises(IngestError, match="unknown"):
            ingest_csv(self.write(tmp_path, "timestamp,aggregate,toaster\n"), appliances=["kettle"])

    def test_column_map(self, tmp_path):
        res = ingest_csv(self.write(tmp_path, "timestamp,aggregate,Appliance1\n0,5,2\n"),
                         column_map={"Appliance1": "kettle"})
        assert set(res.series) == {"aggregate", "kettle"}

    def test_round_trip_and_checksum(self, tmp_path):
        hh = generate(SyntheticScenario(500, [PRESET_TEMPLATES["kettle"]], seed=3))
        digest = make_fixture_csv(hh, tmp_path / "h.csv")
        res = ingest_csv(tmp_path / "h.csv")
        assert pl.series_checksum(res.series) == digest
        assert res["aggregate"].watts.tobytes() == hh.aggregate.tobytes()
        pl.write_csv(tmp_path / "h2.csv", res["aggregate"].timestamps,
                     {k: v.watts for k, v in res.series.items()})
        assert (tmp_path / "h2.csv").read_bytes() == (tmp_path / "h.csv").read_bytes()

    def test_fractional_watts_round_trip(self, tmp_path):
        w = np.array([0.1, 1 / 3, 2.5e-7, 1234.5])
        pl.write_csv(tmp_path / "f.csv", np.arange(4) * 10, {"aggregate": w})
        assert ingest_csv(tmp_path / "f.csv")["aggregate"].watts.tobytes() == w.tobytes()


class TestMakeDataset:
    def test_regression_and_classification_targets(self):
        hh = generate(SyntheticScenario(3000, [PRESET_TEMPLATES["kettle"]], seed=2,
                                        schedule={"kettle": [(1000, 120)]})).to_household()
        a = compute_norm_stats([hh.aggregate])
        k = compute_norm_stats([hh.channels["kettle"]], "kettle")
        reg = pl.make_dataset([hh], "kettle", 15, 10, a, k)
        cls = pl.make_dataset([hh], "kettle", 15, 10, a, threshold=2000)
        np.testing.assert_allclose(reg.inputs, a.normalize(cls.inputs * a.std + a.mean))
        assert set(np.unique(cls.targets)) == {0, 1}
        assert int(cls.targets.sum()) == 12

    def test_needs_stats_or_threshold(self):
        hh = pl.Household(1, np.arange(30) * 10, {"aggregate": np.ones(30), "kettle": np.zeros(30)})
        with pytest.raises(ValueError):
            pl.make_dataset([hh], "kettle", 15, 1, NormalizationStats(0, 1))
