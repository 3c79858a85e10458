import inspect
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cosda.domains import LabeledDataset
from cosda.errors import DataError, DimensionError, ProtocolError
from cosda.evaluation import (AccuracyMatrix, EvalReport, accuracy, accuracy_matrix, build_report, bwt,
                              ramp_color, render_csv, render_markdown, render_report, render_svg,
                              source_drop)
from cosda.model import MlpConfig, init_classifier


def oracle_model(c=3, flip=False):
    """Eval-mode model whose logits are a large multiple of the one-hot of the first feature."""
    model = init_classifier(MlpConfig([c, c, c], [False]))
    model.params["layer0.weight"] = np.eye(c) * 10.0
    model.params["layer1.weight"] = np.eye(c)[::-1] * 10.0 if flip else np.eye(c) * 10.0
    return model.eval()


def onehot_ds(labels, c=3, name="d"):
    labels = np.asarray(labels)
    return LabeledDataset(np.eye(c)[labels], labels, name, n_classes=c)


def test_accuracy_examples():
    ds = onehot_ds([0, 1, 2, 2, 1])
    assert accuracy(oracle_model(), ds) == 100.0
    const = init_classifier(MlpConfig([3, 3, 3], [False])).eval()
    for k in const.params:
        const.params[k][:] = 0.0
    const.params["layer1.bias"][1] = 1.0
    assert accuracy(const, onehot_ds([0, 1, 2] * 4)) == 100.0 / 3
    with pytest.raises(DimensionError):
        accuracy(oracle_model(4), ds)


def test_accuracy_empty_dataset():
    ds = onehot_ds([0, 1])
    ds.features = ds.features[:0]
    ds.labels = ds.labels[:0]
    with pytest.raises(DataError):
        accuracy(oracle_model(), ds)


def test_accuracy_row_permutation_invariant(rng):
    ds = onehot_ds(rng.integers(0, 3, 50))
    model = oracle_model(flip=True)
    perm = rng.permutation(50)
    assert accuracy(model, ds) == accuracy(model, ds.subset(perm, "all"))


def test_no_domain_id_anywhere():
    for fn in (accuracy, accuracy_matrix):
        names = set(inspect.signature(fn).parameters)
        assert not any("domain" in n and "id" in n for n in names)
    assert list(inspect.signature(accuracy).parameters) == ["model", "ds"]


def test_matrix_shape_and_cells():
    doms = [onehot_ds([0, 1, 2], name=f"d{k}") for k in range(3)]
    m = accuracy_matrix([oracle_model()] * 3, doms)
    assert m.values.shape == (3, 3)
    assert np.array_equal(~np.isnan(m.values), m.defined())
    assert np.all(m.values[m.defined()] == 100.0)
    one = accuracy_matrix([oracle_model()], doms[:1])
    assert one.values.shape == (1, 1)
    with pytest.raises(ProtocolError):
        accuracy_matrix([oracle_model()], doms)


def test_identical_checkpoints_give_constant_rows():
    doms = [onehot_ds([0, 1, 2], name="a"), onehot_ds([0, 0, 2], name="b")]
    m = accuracy_matrix([oracle_model(flip=True)] * 2, doms)
    for i in range(2):
        row = m.values[i, i:]
        assert np.all(row == row[0])


def mat(values):
    v = np.array(values, dtype=float)
    return AccuracyMatrix(v, [f"d{k}" for k in range(v.shape[0])])


def test_bwt_examples():
    assert bwt(mat([[80, 70], [np.nan, 90]])) == -10.0
    assert bwt(mat([[50, 50, 50], [np.nan, 60, 60], [np.nan, np.nan, 10]])) == 0.0
    with pytest.raises(ProtocolError):
        bwt(mat([[50]]))


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 6), st.integers(0, 10_000))
def test_bwt_properties(k, seed):
    r = np.random.default_rng(seed)
    v = np.triu(r.uniform(0, 100, (k, k)))
    v[np.tril_indices(k, -1)] = np.nan
    m = mat(v)
    same = v.copy()
    same[:, -1] = np.diag(v)
    assert abs(bwt(mat(same))) <= 1e-12
    renamed = AccuracyMatrix(v, [f"x{k - i}" for i in range(k)])
    assert bwt(renamed) == bwt(m)
    assert -100 <= bwt(m) <= 100


def test_source_drop_examples():
    assert source_drop(80, 80) == 0
    assert source_drop(80, 75) == 5
    assert source_drop(75, 80) == -5


def sample_report():
    m = mat([[80, 70.125], [np.nan, 90]])
    m.source_row = [99.0, 97.5]
    return build_report(m, {"adapt": {"epochs": 3}}, seed=4, source_before=100.0)


def test_report_fields_and_json_roundtrip():
    rep = sample_report()
    assert rep.bwt == pytest.approx(-9.875)
    assert rep.source_drop == [1.0, 2.5]
    text = rep.to_json()
    assert EvalReport.from_json(text).to_json() == text
    d = rep.to_dict()
    for key in ("domains", "matrix", "bwt", "source_drop", "seed", "config"):
        assert key in d
    assert d["matrix"][1][0] is None


def test_renderers():
    rep = sample_report()
    csv_lines = render_csv(rep).splitlines()
    assert len(csv_lines) == 3 and csv_lines[2] == "d1,,90.00"
    assert all(len(line.split(",")) == 3 for line in csv_lines)
    md = render_markdown(rep)
    assert "| d0 |" in md and "BWT: -9.88" in md
    svg = render_svg(rep)
    assert svg.count("<rect") == 4 and svg.count('fill="#bdbdbd"') == 1
    assert ramp_color(0) == "#f7fbff" and ramp_color(100) == "#08306b"


def test_render_report_writes_files(tmp_path):
    written = render_report(sample_report(), tmp_path)
    assert {p.name for p in written.values()} == {"report.json", "report.md", "matrix.csv", "heatmap.svg"}
    with pytest.raises(ValueError):
        render_report(sample_report(), tmp_path, ["pdf"])


def test_render_report_unwritable(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        render_report(sample_report(), blocker / "sub")
