import csv
import io

import numpy as np
import pytest

from unilion import linrnn
from unilion.bench import CSV_FIELDS, attention_macs, attention_reference, doubling_ratios, run_bench, to_csv


def test_attention_matches_row_loop(rng):
    T, C = 7, 3
    x = rng.standard_normal((T, C))
    Wq, Wk, Wv = (rng.standard_normal((C, C)) for _ in range(3))
    q, k, v = x @ Wq.T, x @ Wk.T, x @ Wv.T
    ref = np.zeros((T, C))
    for i in range(T):
        s = np.array([q[i] @ k[j] for j in range(T)]) / np.sqrt(C)
        w = np.exp(s - s.max())
        ref[i] = (w / w.sum()) @ v
    np.testing.assert_allclose(attention_reference(x, Wq, Wk, Wv), ref, rtol=1e-12)


def test_attention_macs_is_quadratic():
    assert attention_macs(10, 4) == 3 * 10 * 16 + 2 * 100 * 4
    assert attention_macs(2048, 16) - 2 * attention_macs(1024, 16) == 2 * 2 * 1024 ** 2 * 16


@pytest.mark.parametrize("operator", ["selective", "wkv"])
def test_rows_and_linear_counts(operator):
    rows = run_bench([64, 128, 256], operator, channels=4, repeats=1, seed=1)
    assert [(r["kind"], r["T"]) for r in rows] == [(k, T) for T in (64, 128, 256) for k in ("scan", "attention")]
    assert doubling_ratios(rows, "scan", "macs") == [2.0, 2.0]
    assert all(r["seconds"] > 0 for r in rows)
    assert linrnn.MACS.count == 0


def test_scan_macs_by_hand():
    # 3 C^2 for the projections, 2 C for gating and output, 3 C per chunked step
    rows = run_bench([64], "selective", channels=4, repeats=1)
    assert rows[0]["macs"] == 64 * (3 * 16 + 2 * 4) + 3 * 64 * 4


def test_csv_schema():
    rows = [{"kind": "scan", "operator": "wkv", "T": 8, "C": 2, "seconds": 0.125, "macs": 96}]
    text = to_csv(rows)
    assert text.splitlines()[0] == ",".join(CSV_FIELDS)
    (back,) = csv.DictReader(io.StringIO(text))
    assert float(back["seconds"]) == 0.125 and int(back["macs"]) == 96 and back["operator"] == "wkv"


def test_doubling_ratios_sort_by_length():
    rows = [{"kind": "scan", "T": 4, "seconds": 3.0}, {"kind": "scan", "T": 2, "seconds": 1.0},
            {"kind": "attention", "T": 2, "seconds": 9.0}]
    assert doubling_ratios(rows, "scan") == [3.0]
