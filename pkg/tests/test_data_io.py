import csv
import json

import numpy as np
import pytest

from privmod.continuous_sim import Metrics, PassengerRecord, SimConfig
from privmod.data_io import (
    TRIP_HEADER,
    DataFormatError,
    EmpiricalLocationSampler,
    build_sampler,
    dumps_stable,
    parse_trips,
    read_graph,
    synthetic_grid_city,
    synthetic_trips,
    write_graph,
    write_results,
    write_trips,
)
from privmod.road_graph import TripRecord


def write_csv(path, rows, header=TRIP_HEADER):
    with open(path, "w", newline="") as fh:
        if header is not None:
            fh.write(",".join(header) + "\n")
        for r in rows:
            fh.write(r + "\n")


class TestParseTrips:
    def test_header_only(self, tmp_path):
        p = tmp_path / "t.csv"
        write_csv(p, [])
        out = parse_trips(p)
        assert out == [] and out.skipped == 0

    def test_single_row_exact(self, tmp_path):
        p = tmp_path / "t.csv"
        write_csv(p, ["1400000000,1400000600,12.5,-3.25,800.125,90.0"])
        (rec,) = parse_trips(p)
        assert rec == TripRecord(1400000000, 1400000600, (12.5, -3.25), (800.125, 90.0))
        assert rec.duration == 600

    def test_skips_malformed(self, tmp_path):
        rows = [f"{1000 + 10 * k},{1300 + 10 * k},{k}.0,0.0,{k + 5}.0,1.0" for k in range(8)]
        rows.insert(3, "1000,abc,1,2,3,4")
        rows.insert(7, "1000,2000,1,2,3")
        p = tmp_path / "t.csv"
        write_csv(p, rows)
        out = parse_trips(p)
        assert len(out) == 8 and out.skipped == 2
        assert [r for r, _ in out.skipped_rows] == [5, 9]

    def test_sorted_by_pickup(self, tmp_path):
        p = tmp_path / "t.csv"
        write_csv(p, ["500,900,0,0,1,1", "100,400,0,0,1,1", "300,350,0,0,1,1"])
        assert [r.pickup_time for r in parse_trips(p)] == [100, 300, 500]

    def test_rejects_nonpositive_duration_and_fractional_time(self, tmp_path):
        p = tmp_path / "t.csv"
        write_csv(p, ["500,500,0,0,1,1", "100.5,400,0,0,1,1", "100,400,nan,0,1,1", "100,400,0,0,1,1"])
        out = parse_trips(p)
        assert len(out) == 1 and out.skipped == 3

    def test_missing_header(self, tmp_path):
        p = tmp_path / "t.csv"
        write_csv(p, ["1,2,3,4,5,6"], header=("a", "b", "c", "d", "e", "f"))
        with pytest.raises(DataFormatError, match="missing column"):
            parse_trips(p)

    def test_empty_and_unreadable(self, tmp_path):
        p = tmp_path / "empty.csv"
        p.write_text("")
        with pytest.raises(DataFormatError, match="empty"):
            parse_trips(p)
        with pytest.raises(DataFormatError, match="cannot read"):
            parse_trips(tmp_path / "nope.csv")

    def test_total_on_garbage(self, tmp_path):
        rng = np.random.default_rng(0)
        p = tmp_path / "t.csv"
        junk = bytes(rng.integers(0, 256, 4000, dtype=np.uint8))
        p.write_bytes((",".join(TRIP_HEADER) + "\n").encode() + junk)
        out = parse_trips(p)
        assert len(out) + out.skipped >= 0

    def test_write_roundtrip(self, tmp_path):
        recs = [TripRecord(10, 70, (0.1, 0.2), (3.0, 4.0)), TripRecord(20, 95, (1e-7, 5.0), (6.5, 7.25))]
        write_trips(recs, tmp_path / "t.csv")
        assert list(parse_trips(tmp_path / "t.csv")) == recs


class TestGrid:
    def test_two_by_two(self):
        g = synthetic_grid_city(2, 2, 100.0, 10.0)
        assert g.n_vertices == 4 and g.n_edges == 8
        np.testing.assert_array_equal(g.weight, np.full(8, 10.0))

    def test_city_scale(self):
        g = synthetic_grid_city(66, 66, 70.0, 5.0)
        assert g.n_vertices == 4356
        assert g.n_edges == 4 * 66 * 65

    def test_rejects_degenerate(self):
        with pytest.raises(ValueError):
            synthetic_grid_city(1, 5, 100.0, 10.0)

    def test_graph_file_roundtrip(self, tmp_path, grid5):
        write_graph(grid5, tmp_path)
        g, has_w = read_graph(tmp_path / "nodes.csv", tmp_path / "edges.csv")
        assert has_w
        np.testing.assert_allclose(g.xy, grid5.xy)
        np.testing.assert_allclose(g.weight, grid5.weight)


class TestSampler:
    def test_single_vertex(self, grid5):
        trips = [TripRecord(0, 60, (101.0, 2.0), (0.0, 0.0))] * 3
        s = build_sampler(trips, grid5, "pickup")
        assert list(s.vertices) == [1] and s.weights[0] == 1.0

    def test_three_to_one(self, grid5):
        trips = [TripRecord(0, 60, (0, 0), (0.0, 0.0))] * 3 + [TripRecord(0, 60, (0, 0), (400.0, 400.0))]
        s = build_sampler(trips, grid5, "dropoff")
        np.testing.assert_allclose(s.weights, [0.75, 0.25])
        draws = s.sample(np.random.default_rng(3), size=100_000)
        ratio = np.mean(draws == 0) / np.mean(draws == 24)
        assert abs(ratio - 3) / 3 < 0.02

    def test_empty_trips(self, grid5):
        with pytest.raises(ValueError):
            build_sampler([], grid5, "pickup")

    def test_weights_normalized_and_deterministic(self):
        s = EmpiricalLocationSampler(np.arange(7), np.arange(1.0, 8.0))
        assert s.weights.sum() == pytest.approx(1.0, abs=1e-12)
        a = s.sample(np.random.default_rng(1), size=20)
        b = s.sample(np.random.default_rng(1), size=20)
        np.testing.assert_array_equal(a, b)

    def test_synthetic_trips_are_valid(self, grid5, rng):
        trips = synthetic_trips(grid5, 200, 2, rng)
        assert len(trips) > 100
        assert all(t.duration >= 60 for t in trips)
        assert [t.pickup_time for t in trips] == sorted(t.pickup_time for t in trips)


def metrics_with(waits):
    recs = []
    for k, w in enumerate(waits):
        if w is None:
            recs.append(PassengerRecord(k, 100.0 * k, None, None, "non-private", "dropped"))
        else:
            recs.append(PassengerRecord(k, 100.0 * k, 100.0 * k + w, w, "non-private", "served"))
    return Metrics(recs, mode="non-private")


class TestWriteResults:
    def test_byte_identical(self, tmp_path):
        m = metrics_with([12.5, 30.0, None, 7.125])
        a = write_results(m, SimConfig(), tmp_path / "a" / "run")
        b = write_results(m, SimConfig(), tmp_path / "b" / "run")
        for pa, pb in zip(a, b):
            assert pa.read_bytes() == pb.read_bytes()

    def test_empty_metrics_give_nulls(self, tmp_path):
        (js, _) = write_results(Metrics([], mode="redundant"), SimConfig(), tmp_path / "run")
        doc = json.loads(js.read_text())
        assert doc["metrics"]["waiting_mean_s"] is None
        assert doc["metrics"]["drop_rate"] == 0

    def test_csv_roundtrip_mean(self, tmp_path):
        rng = np.random.default_rng(11)
        waits = list(rng.uniform(0, 600, 500)) + [None] * 3
        js, cs = write_results(metrics_with(waits), SimConfig(), tmp_path / "run")
        with open(cs) as fh:
            vals = [float(r["waiting_s"]) for r in csv.DictReader(fh) if r["waiting_s"]]
        assert np.mean(vals) == pytest.approx(json.loads(js.read_text())["metrics"]["waiting_mean_s"], abs=1e-6)

    def test_float_format(self):
        assert dumps_stable({"b": 1.0, "a": [float("inf"), 2]}) == '{\n  "a": [null, 2],\n  "b": 1.000000\n}\n'

    def test_unwritable(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        with pytest.raises(OSError):
            write_results(metrics_with([1.0]), SimConfig(), blocker / "sub" / "run")
