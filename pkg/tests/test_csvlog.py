import numpy as np
import pytest

from legnav import __version__
from legnav.csvlog import CsvLog, file_sha256, format_value, metadata_line, read_csv, write_csv


@pytest.mark.parametrize(
    "value, expected",
    [
        (True, "1"),
        (np.bool_(False), "0"),
        (np.int64(7), "7"),
        (0.1, "0.1"),
        (np.float64(1 / 3), repr(1 / 3)),
        ("gap", "gap"),
    ],
)
def test_format_value(value, expected):
    assert format_value(value) == expected


def test_metadata_line():
    assert metadata_line(3, None) == f"# legnav {__version__} seed=3 checkpoint=none"


def test_write_read(tmp_path):
    path = write_csv(tmp_path / "out.csv", ["a", "b"], [{"a": 1, "b": 0.25}, [2, 1e-17]], seed=4, checkpoint="ff")
    meta, rows = read_csv(path)
    assert meta == {"seed": "4", "checkpoint": "ff"}
    assert rows == [{"a": "1", "b": "0.25"}, {"a": "2", "b": "1e-17"}]


def test_floats_round_trip(tmp_path, rng):
    values = rng.standard_normal(20)
    write_csv(tmp_path / "f.csv", ["x"], [[v] for v in values])
    _, rows = read_csv(tmp_path / "f.csv")
    assert [float(r["x"]) for r in rows] == values.tolist()


def test_wrong_row_length(tmp_path):
    with CsvLog(tmp_path / "w.csv", ["a", "b"]) as out:
        with pytest.raises(ValueError):
            out.write([1])


def test_append_keeps_header(tmp_path):
    path = tmp_path / "m.csv"
    with CsvLog(path, ["a"], seed=1) as out:
        out.write([1])
    with CsvLog(path, ["a"], seed=1, append=True) as out:
        out.write([2])
    text = path.read_text()
    assert text.count("# legnav") == 1
    assert read_csv(path)[1] == [{"a": "1"}, {"a": "2"}]


def test_identical_writes_identical_bytes(tmp_path):
    rows = [[0.1, 2], [1e-9, 3]]
    a = write_csv(tmp_path / "a.csv", ["x", "y"], rows, seed=0)
    b = write_csv(tmp_path / "b.csv", ["x", "y"], rows, seed=0)
    assert file_sha256(a) == file_sha256(b)
