import numpy as np
import pytest

from fofquad.errors import EmptyDatasetError, InputError
from fofquad.io import read_long_csv, read_rows, write_long_csv, write_rows


def test_roundtrip(tmp_path):
    times = [np.array([0.0, 0.5, 1.0]), np.array([0.1, 0.9])]
    values = [np.array([1.0, 2.0, 3.0]), np.array([-1.0, 0.1 + 0.2])]
    write_long_csv(tmp_path / "x.csv", ["a", "b"], times, values, ["note: test"])
    ds = read_long_csv(tmp_path / "x.csv")
    assert ds.ids == ["a", "b"]
    for t, v, t2, v2 in zip(times, values, ds.times, ds.values):
        assert np.array_equal(t, t2) and np.array_equal(v, v2)
    assert ds.domain == (0.0, 1.0)


def test_unsorted_rows_and_months(tmp_path):
    p = tmp_path / "m.csv"
    p.write_text("subject_id,time,value\ns1,12,5\ns1,1,3\ns1,6,4\n")
    ds = read_long_csv(p, months_to_unit=True, domain=(0, 1))
    np.testing.assert_allclose(ds.times[0], [0.0, 5 / 11, 1.0])
    np.testing.assert_array_equal(ds.values[0], [3, 4, 5])


@pytest.mark.parametrize("text,exc", [
    ("", EmptyDatasetError),
    ("# only a comment\n", EmptyDatasetError),
    ("subject_id,time,value\n", EmptyDatasetError),
    ("subject_id,t,value\na,1,2\n", InputError),
    ("subject_id,time,value\na,1,oops\n", InputError),
])
def test_bad_inputs(tmp_path, text, exc):
    p = tmp_path / "bad.csv"
    p.write_text(text)
    with pytest.raises(exc) as e:
        read_long_csv(p)
    assert e.value.kind in ("empty_dataset", "input_error")


def test_write_rows_exact_floats(tmp_path):
    write_rows(tmp_path / "r.csv", ["a", "b"], [[0.1, "x"], [np.float64(1 / 3), True]], ["seed: 1"])
    assert (tmp_path / "r.csv").read_text().startswith("# seed: 1\n")
    rows = read_rows(tmp_path / "r.csv")
    assert float(rows[1]["a"]) == 1 / 3 and rows[0]["b"] == "x"
