import itertools
import xml.etree.ElementTree as ET

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dfldrop.engine import RoundLog
from dfldrop.exceptions import PreconditionError
from dfldrop.recon import SyntheticSilo
from dfldrop.report import (AggregateSeries, FinalTableRow, aggregate, dump_reconstruction, emit_svg,
                            read_final_table_csv, read_metrics_csv, read_pgm, similarity, to_pixels,
                            write_final_table_csv, write_metrics_csv, write_pgm)


def _logs(accs, sims=None):
    sims = sims if sims is not None else [0.0] * len(accs)
    return [RoundLog(r + 1, {0: a, 1: a}, {0: 0, 1: 0}, {(0, 1): s}, [], [], {})
            for r, (a, s) in enumerate(zip(accs, sims))]


def test_similarity_examples():
    a = np.zeros(4)
    assert similarity([a, a, a]) == 0.0
    assert similarity([a, a + np.array([2.0, 0, 0, 0])]) == pytest.approx(2.0)
    with pytest.raises(PreconditionError):
        similarity([a])


def test_similarity_naive_oracle():
    rng = np.random.default_rng(0)
    vs = [rng.normal(size=6) for _ in range(3)]
    total, n = 0.0, 0
    for i in range(3):
        for j in range(i + 1, 3):
            total += sum((vs[i][k] - vs[j][k]) ** 2 for k in range(6)) ** 0.5
            n += 1
    assert similarity(vs) == pytest.approx(total / n, abs=1e-12)
    for perm in itertools.permutations(vs):
        assert similarity(list(perm)) == pytest.approx(similarity(vs), abs=1e-12)


def test_aggregate_single_and_pair():
    one = aggregate([_logs([0.5, 0.6])])
    assert np.all(one.acc_std == 0)
    two = aggregate([_logs([0.2] * 3), _logs([0.6] * 3)])
    np.testing.assert_allclose(two.acc_mean, 0.4)
    np.testing.assert_allclose(two.acc_std, 0.4 / np.sqrt(2))


def test_aggregate_padding():
    short = _logs(list(np.linspace(0.1, 0.7, 120)))
    full = _logs([0.5] * 200)
    agg = aggregate([short, full], horizon=200)
    assert len(agg) == 200
    np.testing.assert_allclose(agg.acc_mean[120:], (0.7 + 0.5) / 2)
    agg2 = aggregate([short])
    assert len(agg2) == 120


@settings(max_examples=30, deadline=None)
@given(st.lists(st.lists(st.floats(0, 1), min_size=1, max_size=8), min_size=1, max_size=5))
def test_aggregate_mean_within_range(folds):
    agg = aggregate([_logs(f) for f in folds])
    h = len(agg)
    padded = np.array([f + [f[-1]] * (h - len(f)) for f in folds])
    assert np.all(agg.acc_mean >= padded.min(axis=0) - 1e-12)
    assert np.all(agg.acc_mean <= padded.max(axis=0) + 1e-12)
    assert np.all(agg.acc_std >= 0)


def _series(name="reference", n=200, seed=0):
    rng = np.random.default_rng(seed)
    return AggregateSeries(name, rng.uniform(size=n), rng.uniform(0, 0.1, n), rng.uniform(0.1, 2, n),
                           rng.uniform(0, 0.1, n))


def test_metrics_csv_roundtrip(tmp_path):
    s = _series()
    p = write_metrics_csv(s, tmp_path / "m.csv")
    raw = p.read_bytes()
    assert raw.count(b"\n") == 201 and b"\r" not in raw
    assert raw.startswith(b"round,acc_mean,acc_std,sim_mean,sim_std\n1,")
    back = read_metrics_csv(p)
    for f in ("acc_mean", "acc_std", "sim_mean", "sim_std"):
        np.testing.assert_allclose(getattr(back, f), getattr(s, f), atol=5e-7, rtol=0)
    write_metrics_csv(s, tmp_path / "m2.csv")
    assert (tmp_path / "m2.csv").read_bytes() == raw


def test_final_table_roundtrip(tmp_path):
    rows = [FinalTableRow("wine", "dfedavgm", "iid", "drop", 0.91234567, 0.0123),
            FinalTableRow("wine", "dfedavgm", "iid", "reference", 0.95, 0.0)]
    p = write_final_table_csv(rows, tmp_path / "t.csv")
    assert p.read_text().splitlines()[0] == "dataset,algo,partition,strategy,acc_mean,acc_std"
    back = read_final_table_csv(p)
    assert [r.strategy for r in back] == ["drop", "reference"]
    assert back[0].acc_mean == pytest.approx(0.912346, abs=5e-7)


@pytest.mark.parametrize("kind", ["convergence", "similarity"])
def test_svg_structure_and_stability(tmp_path, kind):
    series = [_series(n, seed=i) for i, n in enumerate(["reference", "drop", "model-inversion"])]
    a = emit_svg(series, kind, tmp_path / "a.svg", title="t")
    b = emit_svg(series, kind, tmp_path / "b.svg", title="t")
    assert a.read_bytes() == b.read_bytes()
    root = ET.parse(a).getroot()
    ns = {"s": "http://www.w3.org/2000/svg"}
    assert len(root.findall("s:polyline", ns)) == 3
    assert len(root.findall("s:polygon", ns)) == 3
    strokes = {p.get("data-strategy"): p.get("stroke") for p in root.findall("s:polyline", ns)}
    assert strokes["reference"] == "#2ca02c" and strokes["model-inversion"] == "#1f77b4"


def test_svg_linear_range_covers_data(tmp_path):
    s = AggregateSeries("reference", np.linspace(0.2, 0.9, 10), np.full(10, 0.05), np.ones(10), np.zeros(10))
    root = ET.parse(emit_svg([s], "convergence", tmp_path / "c.svg")).getroot()
    ys = [float(pt.split(",")[1]) for pt in root.find("{http://www.w3.org/2000/svg}polyline").get("points").split()]
    rect = [r for r in root.findall("{http://www.w3.org/2000/svg}rect") if r.get("fill") == "none"][0]
    top, h = float(rect.get("y")), float(rect.get("height"))
    assert all(top <= y <= top + h for y in ys)


def test_svg_log_floor(tmp_path):
    s = AggregateSeries("no-action", np.ones(5), np.zeros(5), np.zeros(5), np.zeros(5))
    text = emit_svg([s], "similarity", tmp_path / "z.svg").read_text()
    assert "clamped" in text
    ET.fromstring(text)
    with pytest.raises(ValueError):
        emit_svg([s], "histogram", tmp_path / "x.svg")
    with pytest.raises(PreconditionError):
        emit_svg([], "similarity", tmp_path / "x.svg")


def test_pixels_and_pgm(tmp_path):
    assert list(to_pixels([0.0, 1.0, 0.5, 0.002])) == [0, 255, 128, 1]
    img = np.arange(64, dtype=np.uint8).reshape(8, 8) * 4  # includes whitespace byte values
    img[0, 0] = 10
    write_pgm(tmp_path / "x.pgm", img)
    np.testing.assert_array_equal(read_pgm(tmp_path / "x.pgm"), img)


def test_dump_reconstruction(tmp_path):
    rng = np.random.default_rng(0)
    syn = SyntheticSilo(rng.uniform(size=(50, 64)), np.arange(50) % 10, "model-inversion")
    files = dump_reconstruction(syn, tmp_path / "r", (8, 8))
    pgms = sorted((tmp_path / "r").glob("*.pgm"))
    assert len(pgms) == 50 and len(files) == 51
    assert (tmp_path / "r" / "sample_13_class_3.pgm").exists()
    img = read_pgm(tmp_path / "r" / "sample_0_class_0.pgm")
    assert img.shape == (8, 8) and img.dtype == np.uint8
    np.testing.assert_allclose(img.ravel() / 255.0, syn.X[0], atol=0.5 / 255 + 1e-12)
    rows = (tmp_path / "r" / "reconstruction.csv").read_text().splitlines()
    assert len(rows) == 51 and rows[0].endswith(",label")
    back = np.array([[float(v) for v in r.split(",")] for r in rows[1:]])
    np.testing.assert_allclose(back[:, :-1], syn.X, atol=5e-7)
    np.testing.assert_array_equal(back[:, -1], syn.y)


def test_dump_without_grid(tmp_path):
    syn = SyntheticSilo(np.zeros((5, 3)), np.zeros(5, dtype=int), "random")
    files = dump_reconstruction(syn, tmp_path, None)
    assert len(files) == 1 and not list(tmp_path.glob("*.pgm"))
