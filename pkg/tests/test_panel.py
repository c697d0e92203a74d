import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import random_panel
from oracles import nearest_rank
from quantpipe.errors import (
    ConfigError,
    DuplicateRecordError,
    EmptyInputError,
    FieldNotFoundError,
    PanelParseError,
)
from quantpipe.panel import (
    PreprocessSpec,
    forward_fill,
    from_arrays,
    load_panel,
    panel_to_csv,
    parse_panel_csv,
    preprocess,
    save_panel,
    winsorize_cross_section,
    zscore_cross_section,
)

HEAD = "date,instrument,field,value\n"


def one_column(values):
    v = np.array([[np.nan if x is None else x] for x in values], dtype=float)
    dates = np.arange(np.datetime64("2021-01-04"), np.datetime64("2021-01-04") + len(values))
    return from_arrays(dates, ["A"], {"x": v})


def cross_section(values):
    v = np.array([values], dtype=float)
    return from_arrays(np.array(["2021-01-04"], dtype="datetime64[D]"),
                       [f"I{i:02d}" for i in range(len(values))], {"x": v})


def column(panel):
    v, m = panel.field("x")
    return [float(a) if ok else None for a, ok in zip(v[:, 0], m[:, 0])]


# -- loading -------------------------------------------------------------------

def test_three_rows_one_cell():
    p = parse_panel_csv(HEAD + "2021-01-04,A,close,1\n2021-01-04,A,open,2\n2021-01-04,A,volume,3\n")
    assert p.shape == (1, 1, 3)
    assert p.mask.all()
    assert p.fields == ("close", "open", "volume")


def test_duplicate_record():
    with pytest.raises(DuplicateRecordError):
        parse_panel_csv(HEAD + "2021-01-04,A,close,1\n2021-01-04,A,close,2\n")


def test_one_missing_cell():
    p = parse_panel_csv(HEAD + "2021-01-04,A,x,1\n2021-01-04,B,x,2\n2021-01-05,A,x,3\n")
    assert p.shape == (2, 2, 1)
    assert (~p.mask).sum() == 1
    assert not p.mask[1, 1, 0]


def test_na_literal_is_missing():
    p = parse_panel_csv(HEAD + "2021-01-04,A,x,NA\n2021-01-04,B,x,2\n")
    assert p.mask[0, :, 0].tolist() == [False, True]


@pytest.mark.parametrize("row, line", [
    ("2021-13-01,A,x,1\n", 2),
    ("2021-01-04,A,x\n", 2),
    ("2021-01-04,A,x,abc\n", 2),
])
def test_malformed_row_names_line(row, line):
    with pytest.raises(PanelParseError) as e:
        parse_panel_csv(HEAD + row)
    assert e.value.line == line


def test_empty_input():
    with pytest.raises(EmptyInputError):
        parse_panel_csv("")
    with pytest.raises(EmptyInputError):
        parse_panel_csv(HEAD)


def test_csv_roundtrip(tmp_path):
    p = random_panel(3, 10, 5)
    path = tmp_path / "p.csv"
    save_panel(p, path)
    q = load_panel(path)
    c = p.canonical()
    assert np.array_equal(q.mask, c.mask)
    assert np.array_equal(q.values[q.mask], c.values[c.mask])
    assert panel_to_csv(q) == path.read_text()


def test_emit_missing_flag():
    p = one_column([1.0, None])
    assert "NA" in panel_to_csv(p, emit_missing=True)
    assert "NA" not in panel_to_csv(p)


# -- forward fill --------------------------------------------------------------

def test_forward_fill_gap():
    assert column(forward_fill(one_column([1.0, None, None]), 1)) == [1.0, 1.0, None]


@pytest.mark.parametrize("gap", [0, 1, 5])
def test_forward_fill_never_backward(gap):
    assert column(forward_fill(one_column([None, 2.0]), gap)) == [None, 2.0]


def test_forward_fill_uses_latest_observation():
    assert column(forward_fill(one_column([1.0, None, 3.0, None]), 2)) == [1.0, 1.0, 3.0, 3.0]


@given(st.integers(0, 10_000), st.integers(1, 29), st.integers(0, 4))
def test_forward_fill_no_lookahead(seed, t, gap):
    p = random_panel(seed, 30, 6, missing=0.4)
    full = forward_fill(p, gap)
    cut = forward_fill(p.truncate(t), gap)
    assert np.array_equal(cut.mask, full.mask[:t])
    assert np.array_equal(cut.values[cut.mask], full.values[:t][full.mask[:t]])


# -- winsorize / zscore ----------------------------------------------------------

def test_winsorize_eleven_values():
    p = winsorize_cross_section(cross_section(list(range(11))), "x", 0.1)
    assert p.field("x")[0][0].tolist() == [1, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9]


def test_winsorize_identity_cases(panel):
    q = winsorize_cross_section(panel, "close", 0.0)
    assert np.array_equal(q.values[q.mask], panel.values[panel.mask])
    single = cross_section([7.5])
    assert winsorize_cross_section(single, "x", 0.3).field("x")[0][0, 0] == 7.5


def test_winsorize_unknown_field(panel):
    with pytest.raises(FieldNotFoundError):
        winsorize_cross_section(panel, "nope", 0.1)


@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=40), st.floats(0, 0.49))
def test_winsorize_matches_nearest_rank_oracle(xs, p):
    out = winsorize_cross_section(cross_section(xs), "x", p).field("x")[0][0]
    lo, hi = nearest_rank(xs, p), nearest_rank(xs, 1 - p)
    assert out.tolist() == [min(max(x, lo), hi) for x in xs]


@given(st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=40), st.floats(0.01, 0.49))
def test_winsorize_second_pass_keeps_cells_inside(xs, p):
    once = winsorize_cross_section(cross_section(xs), "x", p)
    twice = winsorize_cross_section(once, "x", p)
    a, b = once.field("x")[0][0], twice.field("x")[0][0]
    lo, hi = nearest_rank(list(a), p), nearest_rank(list(a), 1 - p)
    assert np.sum((b >= lo) & (b <= hi)) >= np.sum((a >= lo) & (a <= hi))


def test_zscore_small():
    z = zscore_cross_section(cross_section([1.0, 2.0, 3.0]), "x").field("x")[0][0]
    assert np.allclose(z, [-1, 0, 1])


def test_zscore_constant_masked():
    v, m = zscore_cross_section(cross_section([5.0, 5.0]), "x").field("x")
    assert not m.any()


@given(st.lists(st.floats(-1e4, 1e4), min_size=2, max_size=50))
def test_zscore_moments(xs):
    v, m = zscore_cross_section(cross_section(xs), "x").field("x")
    if np.std(xs) == 0 or not m.any():
        return
    z = v[0]
    assert abs(z.mean()) <= 1e-12 * max(1.0, len(xs))
    assert abs(z.std(ddof=1) - 1) <= 1e-9


def test_preprocess_masks_and_axes(panel):
    spec = PreprocessSpec("forward_fill", 2, 0.05, ("close",), "zscore_cross_section", ("volume",))
    out = preprocess(panel, spec)
    assert out.dates.tolist() == panel.dates.tolist()
    assert out.instruments == panel.instruments and out.fields == panel.fields
    # forward fill only adds observations; winsorize never does
    assert np.all(out.mask[..., 0] >= panel.mask[..., 0])


@given(st.integers(0, 1000), st.integers(2, 29))
def test_preprocess_no_lookahead(seed, t):
    p = random_panel(seed, 30, 8, missing=0.3)
    spec = PreprocessSpec("forward_fill", 3, 0.1, ("close", "volume"), "zscore_cross_section", ("close",))
    full = preprocess(p, spec)
    cut = preprocess(p.truncate(t), spec)
    assert np.array_equal(cut.mask, full.mask[:t])
    assert np.array_equal(cut.values[cut.mask], full.values[:t][full.mask[:t]])


def test_preprocess_spec_validation():
    with pytest.raises(ConfigError):
        PreprocessSpec(winsorize_p=0.5)
    with pytest.raises(ConfigError):
        PreprocessSpec(max_gap=-1)
