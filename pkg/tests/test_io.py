import numpy as np
import pytest

from cpnlmm.hierarchy import DatasetError
from cpnlmm.io import ParseError, export_csv, ingest_csv
from cpnlmm.simlab import ScenarioConfig, gen_dataset


def write(tmp_path, text, name="d.csv"):
    path = tmp_path / name
    path.write_text(text, encoding="utf-8")
    return path


def test_minimal_file(tmp_path):
    data = ingest_csv(write(tmp_path, "id,time,y\na,1,11.2\na,3,10.9\n"))
    assert data.n_subjects == 1 and data.n_obs == 2
    np.testing.assert_array_equal(data.subjects[0].outcomes, [11.2, 10.9])


def test_non_numeric_names_line(tmp_path):
    with pytest.raises(ParseError, match="line 2") as info:
        ingest_csv(write(tmp_path, "id,time,y\na,x,10\n"))
    assert info.value.line == 2


@pytest.mark.parametrize("body, line", [
    ("id,time,y\na,1,10\na,2\n", 3),
    ("id,time,y\na,1,10\nb,2,nan\n", 3),
    ("id,t,y\na,1,10\n", 1),
    ("id,time,y\na,1,10\nb,1,3\na,1,9\n", 4),
])
def test_parse_errors(tmp_path, body, line):
    with pytest.raises(ParseError) as info:
        ingest_csv(write(tmp_path, body))
    assert info.value.line == line


def test_duplicate_message_points_to_first_row(tmp_path):
    with pytest.raises(ParseError, match="first seen on line 2"):
        ingest_csv(write(tmp_path, "id,time,y\na,1,10\na,1.0,9\n"))


def test_empty_inputs(tmp_path):
    with pytest.raises(ParseError):
        ingest_csv(write(tmp_path, ""))
    with pytest.raises(DatasetError):
        ingest_csv(write(tmp_path, "id,time,y\n\n"))


def test_grouping_sorting_and_bom(tmp_path):
    text = "﻿id,time,y\r\nb,5,1\r\na,2,2\r\n\r\nb,1,3\r\na,9,4\r\n"
    data = ingest_csv(write(tmp_path, text))
    assert data.ids == ["b", "a"]
    np.testing.assert_array_equal(data.subjects[0].times, [1.0, 5.0])
    np.testing.assert_array_equal(data.subjects[0].outcomes, [3.0, 1.0])


def test_round_trip_is_exact(tmp_path):
    data, _ = gen_dataset(ScenarioConfig.scenario(1), 0)
    export_csv(data, tmp_path / "s1.csv")
    back = ingest_csv(tmp_path / "s1.csv")
    assert back == data
    for a, b in zip(data.subjects, back.subjects):
        assert a.id == b.id
        assert np.array_equal(a.times, b.times) and np.array_equal(a.outcomes, b.outcomes)
    raw = (tmp_path / "s1.csv").read_bytes()
    assert b"\r\n" not in raw and raw.startswith(b"id,time,y\n")


def test_ids_with_commas_survive(tmp_path):
    path = write(tmp_path, 'id,time,y\n"x,1",1,2\n"x,1",2,3\n')
    data = ingest_csv(path)
    assert data.ids == ["x,1"]
    export_csv(data, tmp_path / "o.csv")
    assert ingest_csv(tmp_path / "o.csv") == data
