import io
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from wfkit.trace import (
    IN,
    OUT,
    DatasetError,
    DatasetManifest,
    Trace,
    TraceFormatError,
    TraceOrderError,
    filter_short,
    format_trace,
    inter_arrival_times,
    load_trace,
    parse_trace,
    save_trace,
    scan_dataset,
)

from conftest import traces


def touch(root, *names, body="0.0\t1\n"):
    for n in names:
        (root / n).write_text(body)


class TestParse:
    def test_minimal(self):
        t = parse_trace("0.0\t1\n0.1\t-1")
        assert len(t) == 2
        assert t.directions.tolist() == [OUT, IN]
        assert t.times.tolist() == [0.0, 0.1]

    def test_empty(self):
        assert len(parse_trace("")) == 0

    def test_shift_to_zero(self):
        t = parse_trace("5.0\t1\n5.2\t1")
        assert t.times[0] == 0.0
        assert t.times[1] == pytest.approx(0.2, abs=1e-12)

    def test_stream_input_and_label(self):
        t = parse_trace(io.StringIO("1.5\t-1\n"), label=3)
        assert t.label == 3 and t.times.tolist() == [0.0]

    @pytest.mark.parametrize("line", ["abc\t1", "0.1\t2", "0.1\t0", "0.1", "0.1\t1\tr\tx", "-1\t1", "nan\t1"])
    def test_malformed_line_reports_line_number(self, line):
        with pytest.raises(TraceFormatError) as e:
            parse_trace("0.0\t1\n" + line + "\n")
        assert e.value.lineno == 2
        assert "line 2" in str(e.value)

    def test_decreasing_timestamps(self):
        with pytest.raises(TraceOrderError) as e:
            parse_trace("0.0\t1\n0.5\t1\n0.4\t-1\n")
        assert e.value.lineno == 3

    def test_jitter_within_tolerance_is_clamped(self):
        t = parse_trace("0.0\t1\n0.5\t1\n0.4999995\t-1\n")
        assert t.times.tolist() == [0.0, 0.5, 0.5]

    def test_ties_keep_file_order(self):
        t = parse_trace("0.0\t1\n0.1\t-1\n0.1\t1\n0.1\t-1\n")
        assert t.directions.tolist() == [1, -1, 1, -1]

    def test_provenance_column_accepted(self):
        t = parse_trace("0.0\t1\tr\n0.1\t-1\td\n")
        assert len(t) == 2

    def test_load_error_names_path(self, tmp_path):
        p = tmp_path / "bad.cell"
        p.write_text("0.0\tx\n")
        with pytest.raises(TraceFormatError, match="bad.cell"):
            load_trace(p)


class TestTrace:
    def test_validation(self):
        with pytest.raises(ValueError):
            Trace([0.0, 1.0], [1, 2])
        with pytest.raises(ValueError):
            Trace([1.0, 0.0], [1, 1])
        with pytest.raises(ValueError):
            Trace([0.0], [1, 1])

    def test_immutable(self):
        t = Trace([0.0, 1.0], [1, -1])
        with pytest.raises(ValueError):
            t.times[0] = 3.0


class TestInterArrival:
    def test_example(self):
        d = inter_arrival_times(Trace([0.0, 0.010, 0.020, 0.050], [1, 1, -1, -1]))
        np.testing.assert_allclose(d, [0, 0.010, 0.010, 0.030], rtol=0, atol=1e-15)

    def test_single_and_empty(self):
        assert inter_arrival_times(Trace([0.0], [1])).tolist() == [0.0]
        assert inter_arrival_times(Trace([], [])).tolist() == []

    @given(traces())
    def test_non_negative_and_length(self, t):
        d = inter_arrival_times(t)
        assert d.shape == (len(t),)
        assert np.all(d >= 0)

    @given(traces())
    def test_telescoping(self, t):
        d = inter_arrival_times(t)
        expected = t.times[-1] - t.times[0] if len(t) else 0.0
        assert math.fsum(d.tolist()) == pytest.approx(expected, rel=1e-12, abs=1e-12)


class TestRoundTrip:
    @given(traces())
    def test_serialize_parse(self, t):
        text = format_trace(t)
        back = parse_trace(text)
        assert format_trace(back) == format_trace(parse_trace(format_trace(back)))
        np.testing.assert_array_equal(back.directions, t.directions)
        np.testing.assert_allclose(back.times, t.times - (t.times[0] if len(t) else 0), atol=1.5e-6)

    def test_text_round_trip_exact(self):
        text = "0.000000\t1\n0.012345\t-1\n1.500000\t-1\n"
        assert format_trace(parse_trace(text)) == text

    def test_save_load(self, tmp_path):
        t = Trace([0.0, 0.25, 0.5], [1, -1, 1])
        save_trace(t, tmp_path / "a.cell", dummy=[False, True, False])
        assert (tmp_path / "a.cell").read_text().splitlines()[1] == "0.250000\t-1\td"
        assert load_trace(tmp_path / "a.cell") == t


class TestScan:
    def test_monitored_only(self, tmp_path):
        touch(tmp_path, "0-0.cell", "0-1.cell", "1-0.cell")
        m = scan_dataset(tmp_path)
        assert m.class_count == 2 and len(m) == 3
        assert all(e.monitored for e in m.entries)
        assert not m.has_nonmonitored

    def test_nonmonitored(self, tmp_path):
        touch(tmp_path, "0-0.cell", "7.cell")
        m = scan_dataset(tmp_path)
        assert m.class_count == 1
        assert sorted(m.labels.tolist()) == [0, 1]
        assert sum(e.monitored for e in m.entries) == 1 and m.has_nonmonitored

    def test_empty_dir(self, tmp_path):
        with pytest.raises(DatasetError):
            scan_dataset(tmp_path)

    def test_duplicates(self, tmp_path):
        touch(tmp_path, "0-1.cell", "0-01.cell")
        with pytest.raises(DatasetError, match="duplicate"):
            scan_dataset(tmp_path)

    def test_sorted_and_ignores_other_files(self, tmp_path):
        touch(tmp_path, "1-0.cell", "0-0.cell", "notes.txt", "0-0.cell.bak")
        m = scan_dataset(tmp_path)
        assert [p.name for p in m.paths] == ["0-0.cell", "1-0.cell"]

    def test_manifest_csv_round_trip(self, tmp_path):
        touch(tmp_path, "0-0.cell", "1-0.cell", "3.cell")
        m = scan_dataset(tmp_path)
        m.to_csv(tmp_path / "manifest.csv")
        assert (tmp_path / "manifest.csv").read_text().splitlines()[0] == "path,label"
        back = DatasetManifest.from_csv(tmp_path / "manifest.csv")
        assert back.class_count == m.class_count
        assert back.labels.tolist() == m.labels.tolist()
        assert [p.resolve() for p in back.paths] == [p.resolve() for p in m.paths]
        assert back.has_nonmonitored

    def test_filter_short(self, tmp_path):
        touch(tmp_path, "0-0.cell")
        (tmp_path / "0-1.cell").write_text("".join(f"{i * 0.01:.6f}\t1\n" for i in range(60)))
        kept = filter_short(scan_dataset(tmp_path), 50)
        assert [p.name for p in kept.paths] == ["0-1.cell"]
