import math

import matplotlib.pyplot as plt
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dropgen_lab import plotting
from dropgen_lab.errors import ContractViolation

SWEEP = """point_id,seed,p,input_mode,in_domain_dice,ood_dice,status
pt00,0,0.0,full,0.8,0.3,ok
pt00,1,0.0,full,0.9,0.4,ok
pt00,summary,0.0,full,0.85,0.35,ok
pt01,0,0.5,full,0.7,0.6,ok
pt02,0,0.0,reps-only,0.6,0.6,ok
pt03,0,0.5,reps-only,0.6,0.6,ok
pt04,0,0.5,image-only,0.2,0.1,failed: boom
"""
ALIGN = "step,cosine,norm_joint,norm_stable\n" + "".join(
    f"{s},{c},1.0,1.0\n" for s, c in enumerate([0.9, 0.5, -0.2, 0.99, 1.0, -1.0]))
SENS = "label,delta_drop_image,delta_drop_reps\np=0.0,0.01,0.3\np=0.5,0.1,0.05\n"
ROBUST = "kind,level,dice\ngamma,0,0.8\ngamma,0.5,0.7\nbias,0,0.8\nbias,1.0,0.6\n"
CASES = [("sweep-curve", SWEEP), ("alignment-histogram", ALIGN),
         ("sensitivity-bars", SENS), ("robustness-curve", ROBUST)]


@pytest.mark.parametrize("kind,text", CASES)
def test_same_csv_gives_identical_bytes(kind, text):
    a = plotting.render(text, kind)
    b = plotting.render(text, kind)
    assert a.encode() == b.encode()
    assert a.lstrip().startswith("<?xml") and "<svg" in a


def test_different_data_gives_different_svg():
    assert plotting.render(ALIGN, "alignment-histogram") != plotting.render(
        ALIGN.replace("0.9,", "-0.9,"), "alignment-histogram")


@pytest.mark.parametrize("kind", plotting.PLOT_KINDS)
def test_missing_columns_named(kind):
    with pytest.raises(ContractViolation) as err:
        plotting.render("unrelated,columns\n1,2\n", kind)
    for col in plotting.REQUIRED[kind]:
        assert col in str(err.value)


def test_partial_mismatch_names_only_missing():
    with pytest.raises(ContractViolation) as err:
        plotting.check_columns("alignment-histogram", ["step", "cosine"])
    msg = str(err.value)
    assert "norm_joint" in msg and "norm_stable" in msg and "'cosine'" not in msg


def test_unknown_kind_rejected():
    with pytest.raises(ContractViolation):
        plotting.check_columns("pie", ["a"])


def test_unknown_metric_rejected():
    with pytest.raises(ContractViolation):
        plotting.render(SWEEP, "sweep-curve", metric="R_99")


def test_histogram_counts_hand_example():
    counts, edges = plotting.histogram_counts([-1.0, -0.95, 0.0, 0.05, 1.0], bins=4)
    assert list(edges) == [-1.0, -0.5, 0.0, 0.5, 1.0]
    assert list(counts) == [2, 0, 2, 1]


def test_histogram_skips_nan():
    counts, _ = plotting.histogram_counts([0.1, math.nan, 0.2])
    assert counts.sum() == 2


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1.0, 1.0), max_size=200), st.integers(1, 40))
def test_property_histogram_conserves_count(values, bins):
    counts, edges = plotting.histogram_counts(values, bins)
    assert counts.sum() == len(values)
    assert len(edges) == bins + 1


def test_sweep_curve_one_line_per_input_mode():
    _, rows = plotting.read_rows(SWEEP)
    fig, ax = plt.subplots()
    try:
        plotting._sweep(ax, rows, "in_domain_dice")
        lines = ax.get_lines()
        # image-only only has a failed row, so it is not drawn
        assert sorted(line.get_label() for line in lines) == ["full", "reps-only"]
        full = next(line for line in lines if line.get_label() == "full")
        # per-p medians over seeds, summary row ignored
        assert list(full.get_xdata()) == [0.0, 0.5]
        np.testing.assert_allclose(full.get_ydata(), [0.85, 0.7])
    finally:
        plt.close(fig)
