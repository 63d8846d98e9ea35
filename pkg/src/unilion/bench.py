"""Scan versus quadratic attention timing and multiply-add counts."""

from __future__ import annotations

import csv
import io
import timeit

import numpy as np

from . import linrnn

CSV_FIELDS = ("kind", "operator", "T", "C", "seconds", "macs")


def attention_reference(x: np.ndarray, Wq: np.ndarray, Wk: np.ndarray, Wv: np.ndarray) -> np.ndarray:
    """Single-head softmax self-attention over a (T, C) sequence."""
    q, k, v = x @ Wq.T, x @ Wk.T, x @ Wv.T
    # in-place row softmax keeps the reference dominated by its T x T work
    s = (q @ k.T) / np.sqrt(x.shape[1])
    s -= s.max(axis=1, keepdims=True)
    np.exp(s, out=s)
    s /= s.sum(axis=1, keepdims=True)
    return s @ v


def attention_macs(T: int, C: int) -> int:
    return 3 * T * C * C + 2 * T * T * C


def _best_time(fn, repeats: int) -> float:
    """Best per-call time over ``repeats`` batches sized by ``timeit`` autorange."""
    timer = timeit.Timer(fn)
    number, _ = timer.autorange()
    return min(timer.repeat(repeat=repeats, number=number)) / number


def run_bench(lengths, operator: str = "selective", channels: int = 16, repeats: int = 5,
              seed: int = 0, chunk: int | None = 64) -> list[dict]:
    """One scan row and one attention row per sequence length."""
    rng = np.random.default_rng(seed)
    C = channels
    scan_p = (linrnn.SelectiveScanParams.random(C, rng) if operator == "selective"
              else linrnn.WKVScanParams.random(C, rng))
    Wq, Wk, Wv = (rng.standard_normal((C, C)) / np.sqrt(C) for _ in range(3))
    rows = []
    for T in lengths:
        x = rng.standard_normal((1, int(T), C))
        linrnn.MACS.reset()
        scan_p.scan(x, None, chunk)
        macs = linrnn.MACS.reset()
        t_scan = _best_time(lambda: scan_p.scan(x, None, chunk), repeats)
        linrnn.MACS.reset()
        rows.append({"kind": "scan", "operator": operator, "T": int(T), "C": C,
                     "seconds": t_scan, "macs": macs})
        t_att = _best_time(lambda: attention_reference(x[0], Wq, Wk, Wv), repeats)
        rows.append({"kind": "attention", "operator": "softmax", "T": int(T), "C": C,
                     "seconds": t_att, "macs": attention_macs(int(T), C)})
    return rows


def doubling_ratios(rows: list[dict], kind: str, column: str = "seconds") -> list[float]:
    sel = sorted((r for r in rows if r["kind"] == kind), key=lambda r: r["T"])
    return [b[column] / a[column] for a, b in zip(sel, sel[1:])]


def to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (f"{r[k]:.6e}" if k == "seconds" else r[k]) for k in CSV_FIELDS})
    return buf.getvalue()
