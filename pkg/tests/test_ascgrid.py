import numpy as np
import pytest

from bottomup.ascgrid import GridFormatError, GridHeader, read_asc, write_asc


def test_roundtrip_with_nodata(tmp_path):
    h = GridHeader(3, 2, 10.0, 20.0, 100.0)
    a = np.array([[1.5, np.nan, 3.0], [0.1, 2.0, np.nan]])
    write_asc(tmp_path / "a.asc", a, h)
    h2, b = read_asc(tmp_path / "a.asc")
    assert h2.matches(h)
    np.testing.assert_array_equal(np.isnan(a), np.isnan(b))
    np.testing.assert_array_equal(a[~np.isnan(a)], b[~np.isnan(b)])


def test_float_values_survive_exactly(tmp_path):
    h = GridHeader(2, 2)
    a = np.array([[0.1 + 0.2, 1 / 3], [np.pi, -1e-300]])
    write_asc(tmp_path / "a.asc", a, h)
    _, b = read_asc(tmp_path / "a.asc")
    np.testing.assert_array_equal(a, b)


def test_wrong_row_count_is_rejected(tmp_path):
    (tmp_path / "bad.asc").write_text(
        "ncols 2\nnrows 3\nxllcorner 0\nyllcorner 0\ncellsize 1\nNODATA_value -9999\n1 2\n3 4\n"
    )
    with pytest.raises(GridFormatError):
        read_asc(tmp_path / "bad.asc")


def test_headers_compare_lattices():
    assert GridHeader(2, 2, 0, 0, 1).matches(GridHeader(2, 2, 0, 0, 1, nodata=-1))
    assert not GridHeader(2, 2, 0, 0, 1).matches(GridHeader(2, 2, 0, 0, 2))
    assert not GridHeader(2, 2).matches(GridHeader(3, 2))


def test_cell_centres_run_north_to_south():
    x, y = GridHeader(2, 2, 0, 0, 10).cell_centers()
    np.testing.assert_array_equal(x[0], [5, 15])
    np.testing.assert_array_equal(y[:, 0], [15, 5])
