import json

import numpy as np
import pytest

from compdown.grid import CompositionField, GridError, GridSpec, ScalarField
from compdown.io import (FormatError, RunManifest, read_ascii_grid, read_composition, read_composition_csv,
                         read_config, sha256_file, write_ascii_grid, write_composition, write_composition_csv,
                         write_csv, write_pgm)
from compdown.simplex import CompositionError


def _grid(tmp_path, text, name="g.asc"):
    p = tmp_path / name
    p.write_text(text)
    return p


HEAD = "NCOLS 3\nNROWS 2\nXLLCORNER 0\nYLLCORNER 0\nCELLSIZE 10\nNODATA_VALUE -9999\n"


def test_ascii_roundtrip_exact(tmp_path, rng):
    spec = GridSpec(7, 5, 12.5, 1000.25, -3.0)
    v = rng.normal(size=spec.shape) * 1e3
    v[2, 3] = np.nan
    write_ascii_grid(ScalarField(spec, v), tmp_path / "a.asc")
    back = read_ascii_grid(tmp_path / "a.asc")
    assert back.spec == spec
    assert np.array_equal(np.isnan(back.values), np.isnan(v))
    ok = ~np.isnan(v)
    assert np.array_equal(back.values[ok], v[ok])


def test_one_cell_grid(tmp_path):
    p = _grid(tmp_path, "ncols 1\nnrows 1\nxllcorner 0\nyllcorner 0\ncellsize 1\n42\n")
    g = read_ascii_grid(p)
    assert g.values.shape == (1, 1) and g.values[0, 0] == 42.0


def test_lowercase_and_center_header(tmp_path):
    p = _grid(tmp_path, "ncols 2\nnrows 1\nxllcenter 5\nyllcenter 5\ncellsize 10\nnodata_value -1\n1 -1\n")
    g = read_ascii_grid(p)
    assert g.spec.xll == 0.0 and g.spec.yll == 0.0
    assert g.values[0, 0] == 1.0 and np.isnan(g.values[0, 1])


def test_malformed_header_line_number(tmp_path):
    p = _grid(tmp_path, "NCOLS 3\nNROWS two\n")
    with pytest.raises(FormatError, match=":2:"):
        read_ascii_grid(p)


def test_missing_header_key(tmp_path):
    p = _grid(tmp_path, "NCOLS 1\nNROWS 1\nCELLSIZE 1\n5\n")
    with pytest.raises(FormatError, match="missing"):
        read_ascii_grid(p)


def test_wrong_value_count_line_number(tmp_path):
    p = _grid(tmp_path, HEAD + "1 2 3\n4 5\n")
    with pytest.raises(FormatError, match=":8:.*expected 3 values, found 2"):
        read_ascii_grid(p)


def test_bad_number_line_number(tmp_path):
    p = _grid(tmp_path, HEAD + "1 2 3\n4 x 6\n")
    with pytest.raises(FormatError, match=r":8:.*'x'"):
        read_ascii_grid(p)


def test_row_count_checked(tmp_path):
    with pytest.raises(FormatError, match="data rows"):
        read_ascii_grid(_grid(tmp_path, HEAD + "1 2 3\n"))
    with pytest.raises(FormatError, match=":9:"):
        read_ascii_grid(_grid(tmp_path, HEAD + "1 2 3\n4 5 6\n7 8 9\n", "b.asc"))


def _layers(tmp_path, parts, spec=GridSpec(2, 2, 10.0)):
    paths = []
    for i, v in enumerate(parts):
        p = tmp_path / f"p{i}.asc"
        write_ascii_grid(ScalarField(spec, np.asarray(v, float)), p)
        paths.append(p)
    return paths


def test_percent_layers_are_reclosed(tmp_path):
    a = [[20, 30], [10, 50]]
    b = [[30, 30], [40, 25]]
    c = [[50, 40.00005], [50, 25]]
    fld, info = read_composition(_layers(tmp_path, [a, b, c]), part_names=["clay", "silt", "sand"])
    assert info.total == 100.0
    assert fld.part_names == ("clay", "silt", "sand")
    assert np.allclose(fld.values.sum(axis=-1), 1.0, atol=1e-15, rtol=0)
    assert fld.values[0, 0, 0] == pytest.approx(0.2)


def test_far_from_total_names_pixel(tmp_path):
    a = [[0.2, 0.3], [0.1, 0.5]]
    b = [[0.3, 0.3], [0.4, 0.25]]
    c = [[0.5, 0.4], [0.3, 0.25]]
    with pytest.raises(CompositionError, match=r"\(1, 0\)"):
        read_composition(_layers(tmp_path, [a, b, c]))


def test_zero_part_needs_replacement(tmp_path):
    a = [[0.0, 0.3], [0.1, 0.5]]
    b = [[0.5, 0.3], [0.4, 0.25]]
    c = [[0.5, 0.4], [0.5, 0.25]]
    paths = _layers(tmp_path, [a, b, c])
    with pytest.raises(CompositionError, match=r"\(0, 0\)"):
        read_composition(paths)
    fld, info = read_composition(paths, zero_delta=1e-3)
    assert info.zero_pixels == 1
    assert fld.values[0, 0, 0] == pytest.approx(1e-3)
    assert fld.values[0, 0, 1] / fld.values[0, 0, 2] == pytest.approx(1.0)
    assert np.allclose(fld.values.sum(axis=-1), 1.0)
    # untouched pixels keep their values
    assert fld.values[1, 1, 0] == pytest.approx(0.5)


def test_negative_part_rejected(tmp_path):
    a = [[-0.1, 0.3], [0.1, 0.5]]
    b = [[0.6, 0.3], [0.4, 0.25]]
    c = [[0.5, 0.4], [0.5, 0.25]]
    with pytest.raises(CompositionError, match="negative"):
        read_composition(_layers(tmp_path, [a, b, c]))


def test_misaligned_layers(tmp_path):
    p0 = _layers(tmp_path, [[[0.5, 0.5], [0.5, 0.5]]])[0]
    p1 = tmp_path / "other.asc"
    write_ascii_grid(ScalarField(GridSpec(2, 2, 20.0), np.full((2, 2), 0.5)), p1)
    with pytest.raises(GridError):
        read_composition([p0, p1])


def test_sidecar_roundtrip(tmp_path, rng):
    spec = GridSpec(4, 3, 30.0, 500.0, 600.0)
    v = rng.dirichlet(np.ones(3), size=spec.shape)
    v[1, 2] = np.nan
    fld = CompositionField(spec, v, ("clay", "silt", "sand"))
    side = write_composition(fld, tmp_path / "out")
    back, info = read_composition(side)
    assert back.part_names == fld.part_names
    assert info.total == 1.0
    ok = fld.valid
    assert np.array_equal(back.valid, ok)
    assert np.allclose(back.values[ok], v[ok], rtol=1e-15, atol=0)


def test_csv_roundtrip(tmp_path, rng):
    spec = GridSpec(5, 4, 25.0, 100.0, 200.0)
    v = rng.dirichlet(np.ones(3), size=spec.shape)
    v[0, 0] = np.nan
    fld = CompositionField(spec, v, ("a", "b", "c"))
    write_composition_csv(fld, tmp_path / "c.csv")
    back, _ = read_composition_csv(tmp_path / "c.csv", spec=spec)
    assert np.array_equal(back.valid, fld.valid)
    assert np.allclose(back.values[fld.valid], v[fld.valid], rtol=1e-15, atol=0)
    # inferred grid covers the bounding lattice of the points
    inferred, _ = read_composition(tmp_path / "c.csv")
    assert inferred.spec.cellsize == 25.0
    assert inferred.spec.shape == (4, 5)


def test_csv_errors(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("x,y,a,b\n0,0,0.5,0.5\n1,0,0.5\n")
    with pytest.raises(FormatError, match=":3:"):
        read_composition_csv(p)
    p.write_text("lon,lat,a,b\n")
    with pytest.raises(FormatError, match=":1:"):
        read_composition_csv(p)


def test_write_csv_full_precision(tmp_path):
    write_csv([{"a": 1 / 3, "b": "x"}, {"a": 2.0, "b": "y"}], tmp_path / "t.csv")
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == "a,b"
    assert float(lines[1].split(",")[0]) == 1 / 3


def test_pgm(tmp_path):
    v = np.array([[0.0, 0.5], [1.0, np.nan]])
    write_pgm(v, tmp_path / "q.pgm")
    tok = (tmp_path / "q.pgm").read_text().split()
    assert tok[:4] == ["P2", "2", "2", "255"]
    assert [int(t) for t in tok[4:]] == [0, 128, 255, 0]


def test_config(tmp_path):
    p = tmp_path / "c.ini"
    p.write_text("[downscale]\nfactor = 4\n")
    assert read_config(p).getint("downscale", "factor") == 4
    p.write_text("factor = 4\n")
    with pytest.raises(FormatError):
        read_config(p)


def test_manifest(tmp_path):
    out = tmp_path / "o.txt"
    out.write_text("hello")
    m = RunManifest("downscale", {"factor": 4}, 7)
    m.add_outputs([out], tmp_path)
    m.write(tmp_path / "manifest.json")
    d = json.loads((tmp_path / "manifest.json").read_text())
    assert d["checksums"] == {"o.txt": sha256_file(out)}
    assert d["seed"] == 7 and d["config"] == {"factor": 4}
    assert sha256_file(out) == "2cf24dba5fb0a30e26e83b2ac5b9e29e1b161e5c1fa7425e73043362938b9824"
