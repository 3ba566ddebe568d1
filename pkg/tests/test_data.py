import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import benchmark_labels
from ctgmae.data import (BENCHMARK_SIZES, ClinicalMetadata, Label, ParseError, Recording,
                         SplitAssignment, acidemia_label, filter_subgroup, load_metadata,
                         load_recording, proportional_sizes, save_metadata, stratified_split,
                         write_recording)


def write_csv(path, rows, header="t_sec,fhr_bpm,uc_mmhg"):
    path.write_text(header + "\n" + "\n".join(rows) + "\n")
    return path


class TestLoadRecording:
    def test_zero_fhr_is_missing(self, tmp_path):
        rec = load_recording(write_csv(tmp_path / "a.csv", ["0,140,20", "0.25,0,21", "0.5,150,22"]))
        assert rec.fhr_valid.tolist() == [True, False, True]
        assert rec.uc_valid.all()

    def test_length_and_rate(self, tmp_path):
        rows = [f"{i / 4:.2f},140,20" for i in range(1800)]
        rec = load_recording(write_csv(tmp_path / "b.csv", rows))
        assert len(rec) == 1800 and rec.sample_rate_hz == 4

    def test_nan_and_blank_uc(self, tmp_path):
        rec = load_recording(write_csv(tmp_path / "c.csv", ["0,140,nan", "0.25,141,", "0.5,142,3"]))
        assert rec.uc_valid.tolist() == [False, False, True]

    def test_zero_uc_is_valid(self, tmp_path):
        rec = load_recording(write_csv(tmp_path / "d.csv", ["0,140,0"]))
        assert rec.uc_valid.tolist() == [True]

    def test_id_from_stem(self, tmp_path):
        assert load_recording(write_csv(tmp_path / "rec_7.csv", ["0,140,1"])).id == "rec_7"

    @pytest.mark.parametrize("rows, line", [
        (["0,140,20", "0.25,abc,20"], 3),
        (["0,140,20", "0.25,140"], 3),
        (["0,140,20", "0.25,140,20", "0.25,140,20"], 4),
        (["0.5,140,20", "0.25,140,20"], 3),
    ])
    def test_malformed_rows_name_the_line(self, tmp_path, rows, line):
        with pytest.raises(ParseError, match=f"line {line}"):
            load_recording(write_csv(tmp_path / "bad.csv", rows))

    def test_bad_header(self, tmp_path):
        with pytest.raises(ParseError, match="header"):
            load_recording(write_csv(tmp_path / "h.csv", ["0,1,2"], header="a,b,c"))

    def test_write_then_load(self, tmp_path):
        fhr = np.array([140.0, np.nan, 150.5, 0.0])
        uc = np.array([10.0, 11.0, np.nan, 12.25])
        rec = Recording.from_arrays("x", fhr, uc)
        write_recording(rec, tmp_path / "x.csv")
        back = load_recording(tmp_path / "x.csv")
        np.testing.assert_array_equal(back.fhr_valid, rec.fhr_valid)
        np.testing.assert_array_equal(back.uc_valid, rec.uc_valid)
        np.testing.assert_array_equal(back.fhr[back.fhr_valid], fhr[rec.fhr_valid])


class TestRecordingInvariants:
    def test_lengths_must_agree(self):
        with pytest.raises(ValueError):
            Recording("x", np.zeros(3), np.zeros(2), np.ones(3, bool), np.ones(3, bool))

    def test_stage2_index_in_range(self):
        with pytest.raises(ValueError):
            Recording.from_arrays("x", [140, 141], [1, 2], stage2_start_index=2)
        assert Recording.from_arrays("x", [140, 141], [1, 2], stage2_start_index=1).stage2_start_index == 1


class TestMetadata:
    @pytest.mark.parametrize("ph, positive", [(7.02, True), (7.15, False), (7.32, False), (7.149, True)])
    def test_acidemia_threshold(self, ph, positive):
        assert acidemia_label(ClinicalMetadata("a", ph)).positive is positive

    def test_missing_ph(self):
        with pytest.raises(ValueError):
            acidemia_label(ClinicalMetadata("a", None))

    @pytest.mark.parametrize("kwargs", [dict(ph=6.4), dict(ph=7.7), dict(ph=7.2, apgar1=11),
                                        dict(ph=7.2, delivery_type="forceps")])
    def test_invalid_values(self, kwargs):
        with pytest.raises(ValueError):
            ClinicalMetadata("a", **kwargs)

    def test_round_trip_and_duplicates(self, tmp_path, table3_metas):
        path = tmp_path / "meta.json"
        save_metadata(table3_metas, path)
        assert load_metadata(path) == table3_metas
        rows = json.loads(path.read_text())
        path.write_text(json.dumps(rows + rows[:1]))
        with pytest.raises(ParseError, match="duplicate"):
            load_metadata(path)

    def test_unknown_field(self, tmp_path):
        path = tmp_path / "meta.json"
        path.write_text(json.dumps([{"id": "a", "ph": 7.2, "colour": "blue"}]))
        with pytest.raises(ParseError, match="colour"):
            load_metadata(path)

    @given(st.floats(6.5, 7.6))
    def test_label_rule_brute(self, ph):
        assert acidemia_label(ClinicalMetadata("a", ph)).positive == (ph < 7.15)


class TestStratifiedSplit:
    def test_benchmark_counts(self):
        labels = benchmark_labels()
        split = stratified_split(labels, BENCHMARK_SIZES, seed=3)
        pos = {lab.id for lab in labels if lab.positive}
        for name, (n, p) in BENCHMARK_SIZES.items():
            ids = split.ids(name)
            assert (len(ids), len(pos & set(ids))) == (n, p)

    def test_forced_assignment(self):
        labels = [Label("p", True), Label("n", False)]
        split = stratified_split(labels, {"train": (1, 1), "validation": (1, 0), "test": (0, 0)}, 0)
        assert split.assignment == {"p": "train", "n": "validation"}

    def test_deterministic(self):
        labels = benchmark_labels()
        a = stratified_split(labels, BENCHMARK_SIZES, 11).to_json()
        b = stratified_split(labels, BENCHMARK_SIZES, 11).to_json()
        assert a == b
        assert a != stratified_split(labels, BENCHMARK_SIZES, 12).to_json()

    def test_too_many_positives_requested(self):
        labels = [Label("a", True), Label("b", False)]
        with pytest.raises(ValueError):
            stratified_split(labels, {"train": (2, 2)}, 0)

    def test_sizes_must_cover_labels(self):
        with pytest.raises(ValueError):
            stratified_split(benchmark_labels(), {"train": (10, 2)}, 0)

    @settings(max_examples=40, deadline=None)
    @given(n=st.integers(10, 300), frac=st.floats(0.05, 0.5), seed=st.integers(0, 2**32 - 1))
    def test_partition_and_prevalence(self, n, frac, seed):
        labels = [Label(f"r{i}", i < max(1, int(n * frac))) for i in range(n)]
        sizes = proportional_sizes(labels, (0.7, 0.15, 0.15))
        split = stratified_split(labels, sizes, seed)
        assert sorted(split.assignment) == sorted(lab.id for lab in labels)
        prevalence = sum(lab.positive for lab in labels) / n
        for name, (size, p) in sizes.items():
            ids = split.ids(name)
            assert len(ids) == size
            assert abs(p - prevalence * size) <= 1.0

    def test_json_round_trip(self):
        split = stratified_split(benchmark_labels(), BENCHMARK_SIZES, 5)
        back = SplitAssignment.from_json(split.to_json())
        assert back == split

    def test_json_needs_seed(self):
        with pytest.raises(ParseError):
            SplitAssignment.from_json('{"a": "train"}')


class TestSubgroups:
    @pytest.mark.parametrize("criteria, n", [
        ((), 55), (("vaginal",), 50), (("cephalic",), 50), (("vaginal", "cephalic"), 46),
        (("no_arrest",), 47), (("vaginal", "cephalic", "no_arrest"), 43)])
    def test_table_counts(self, table3_metas, criteria, n):
        assert len(filter_subgroup(table3_metas, criteria)) == n

    def test_order_preserved(self, table3_metas):
        ids = filter_subgroup(table3_metas, ("vaginal",))
        order = [m.id for m in table3_metas]
        assert ids == sorted(ids, key=order.index)

    def test_unknown_criterion(self, table3_metas):
        with pytest.raises(ValueError):
            filter_subgroup(table3_metas, ("breech",))
