"""Rank-correlation and top-k metrics, and the evaluation report."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np


class UndefinedCorrelation(ValueError):
    pass


# -- Kendall tau-b ------------------------------------------------------------------

def _dense_ranks(a: np.ndarray) -> np.ndarray:
    """Row-wise dense ranks 0..(distinct-1); equal values share a rank."""
    order = np.argsort(a, axis=1, kind="stable")
    s = np.take_along_axis(a, order, axis=1)
    new = np.concatenate([np.zeros((a.shape[0], 1), dtype=np.int64),
                          (s[:, 1:] != s[:, :-1]).astype(np.int64)], axis=1)
    ranks = np.empty_like(order)
    np.put_along_axis(ranks, order, np.cumsum(new, axis=1), axis=1)
    return ranks


def _tied_pairs(keys: np.ndarray) -> np.ndarray:
    """Per row, the number of pairs with equal keys: sum over runs of t(t-1)/2."""
    s = np.sort(keys, axis=1)
    n = s.shape[1]
    pos = np.arange(n)
    starts = np.ones_like(s, dtype=bool)
    starts[:, 1:] = s[:, 1:] != s[:, :-1]
    run_start = np.maximum.accumulate(np.where(starts, pos, 0), axis=1)
    return (pos - run_start).sum(axis=1)


def _count_inversions(seq: np.ndarray) -> np.ndarray:
    """Per row, #{i < j : seq_i > seq_j}, by bottom-up merging of sorted blocks."""
    rows, n = seq.shape
    width = 1 << max(0, (n - 1).bit_length())
    cur = np.full((rows, width), seq.max(initial=0) + 1, dtype=np.int64)
    cur[:, :n] = seq
    inv = np.zeros(rows, dtype=np.int64)
    w = 1
    while w < width:
        blocks = cur.reshape(rows, width // (2 * w), 2 * w)
        # stable sort of two sorted runs is a linear merge; left entries win ties
        order = np.argsort(blocks, axis=-1, kind="stable")
        where = np.empty_like(order)
        np.put_along_axis(where, order, np.broadcast_to(np.arange(2 * w), order.shape), axis=-1)
        left_before = where[..., w:] - np.arange(w)
        inv += (w - left_before).sum(axis=(1, 2))
        cur = np.take_along_axis(blocks, order, axis=-1).reshape(rows, width)
        w *= 2
    return inv


def kendall_tau_rows(a, b, undefined: str = "raise") -> np.ndarray:
    """Tau-b between matching rows of ``a`` and ``b`` (shape (R, n)), O(n log n) per row.

    ``undefined`` decides what happens when a row is constant: ``"raise"`` or
    ``"nan"``.
    """
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    n = a.shape[1]
    if n < 2:
        raise ValueError("kendall tau needs at least 2 entries")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise ValueError("kendall tau needs finite scores")
    ra, rb = _dense_ranks(a), _dense_ranks(b)
    n0 = n * (n - 1) // 2
    n1 = _tied_pairs(ra)
    n2 = _tied_pairs(rb)
    joint = ra * (n + 1) + rb
    n3 = _tied_pairs(joint)
    order = np.argsort(joint, axis=1, kind="stable")
    discordant = _count_inversions(np.take_along_axis(rb, order, axis=1))
    concordant = n0 - n1 - n2 + n3 - discordant
    denom = (n0 - n1).astype(np.float64) * (n0 - n2).astype(np.float64)
    bad = denom == 0
    if bad.any() and undefined == "raise":
        raise UndefinedCorrelation("kendall tau is undefined for a constant vector")
    with np.errstate(invalid="ignore", divide="ignore"):
        tau = (concordant - discordant) / np.sqrt(denom)
    return np.where(bad, np.nan, np.clip(tau, -1.0, 1.0))


def kendall_tau(a, b) -> float:
    a = np.ravel(np.asarray(a, dtype=np.float64))
    b = np.ravel(np.asarray(b, dtype=np.float64))
    if a.shape != b.shape:
        raise ValueError(f"length mismatch {a.size} vs {b.size}")
    return float(kendall_tau_rows(a[None], b[None])[0])


def kendall_tau_bruteforce(a, b) -> float:
    """O(n^2) pair count, kept as the reference for :func:`kendall_tau`."""
    a = np.ravel(np.asarray(a, dtype=np.float64))
    b = np.ravel(np.asarray(b, dtype=np.float64))
    n = a.size
    if n < 2 or b.size != n:
        raise ValueError("need equal lengths n >= 2")
    i, j = np.triu_indices(n, k=1)
    sa, sb = np.sign(a[i] - a[j]), np.sign(b[i] - b[j])
    conc = int(np.sum(sa * sb > 0))
    disc = int(np.sum(sa * sb < 0))
    ties_a = int(np.sum((sa == 0) & (sb != 0)))
    ties_b = int(np.sum((sb == 0) & (sa != 0)))
    denom = (conc + disc + ties_a) * (conc + disc + ties_b)
    if denom == 0:
        raise UndefinedCorrelation("kendall tau is undefined for a constant vector")
    return (conc - disc) / math.sqrt(denom)


# -- top-k ----------------------------------------------------------------------------

def topk_indices(a, k: int) -> np.ndarray:
    """Indices of the ``k`` largest entries per row; ties go to the lower index."""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    if not 1 <= k <= a.shape[1]:
        raise ValueError(f"k must be in [1, {a.shape[1]}], got {k}")
    return np.argsort(-a, axis=1, kind="stable")[:, :k]


def topk_intersection_rows(a, b, k: int) -> np.ndarray:
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    ia, ib = topk_indices(a, k), topk_indices(b, k)
    rows = np.arange(a.shape[0])[:, None]
    in_a = np.zeros(a.shape, dtype=bool)
    in_a[rows, ia] = True
    return in_a[rows, ib].sum(axis=1) / k


def topk_intersection(a, b, k: int) -> float:
    return float(topk_intersection_rows(np.ravel(a)[None], np.ravel(b)[None], k)[0])


# -- report ---------------------------------------------------------------------------

SAMPLE_FIELDS = ("index", "label", "clean_pred", "clean_correct", "adv_correct",
                 "kendall", "topk_inter")


@dataclass
class EvalReport:
    nat_acc: float
    adv_acc: float
    topk_inter: float | None
    kendall: float | None
    per_sample: list[dict] = field(default_factory=list)
    kendall_median: float | None = None
    settings: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("nat_acc", "adv_acc"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")
        if self.kendall is not None and not -1.0 <= self.kendall <= 1.0:
            raise ValueError(f"kendall={self.kendall} outside [-1, 1]")
        if self.topk_inter is not None and not 0.0 <= self.topk_inter <= 1.0:
            raise ValueError(f"topk_inter={self.topk_inter} outside [0, 1]")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls(**json.loads(text))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=SAMPLE_FIELDS, lineterminator="\n")
        w.writeheader()
        for row in self.per_sample:
            w.writerow({k: ("" if row.get(k) is None else repr(row[k]) if isinstance(row[k], float)
                            else row[k]) for k in SAMPLE_FIELDS})
        return buf.getvalue()

    @staticmethod
    def rows_from_csv(text: str) -> list[dict]:
        out = []
        for row in csv.DictReader(io.StringIO(text)):
            out.append({
                "index": int(row["index"]), "label": int(row["label"]),
                "clean_pred": int(row["clean_pred"]),
                "clean_correct": row["clean_correct"] == "True",
                "adv_correct": row["adv_correct"] == "True",
                "kendall": float(row["kendall"]) if row["kendall"] else None,
                "topk_inter": float(row["topk_inter"]) if row["topk_inter"] else None,
            })
        return out


def evaluate(net, x, y, pgd_cfg, ifia_cfg, seed: int = 0, chunk: int = 100,
             ids=None) -> EvalReport:
    """Natural accuracy, PGD accuracy, and IFIA metrics on correctly classified samples."""
    from .adversary import ifia_topk, pgd_prediction_attack

    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    n = len(y)
    if n == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    ids = np.arange(n) if ids is None else np.asarray(ids)
    pred = np.concatenate([net.predict(x[s:s + chunk]) for s in range(0, n, chunk)])
    correct = pred == y
    adv_correct = np.zeros(n, dtype=bool)
    kendall = np.full(n, np.nan)
    topk = np.full(n, np.nan)
    for s in range(0, n, chunk):
        sl = slice(s, s + chunk)
        _, success = pgd_prediction_attack(net, x[sl], y[sl], pgd_cfg, key=(seed, 1), ids=ids[sl])
        adv_correct[sl] = correct[sl] & ~success
    good = np.flatnonzero(correct)
    for s in range(0, good.size, chunk):
        idx = good[s:s + chunk]
        res = ifia_topk(net, x[idx], y[idx], ifia_cfg, key=(seed, 2), ids=ids[idx])
        kendall[idx] = res.kendall
        topk[idx] = res.topk_inter
    per_sample = []
    for i in range(n):
        per_sample.append({
            "index": int(ids[i]), "label": int(y[i]), "clean_pred": int(pred[i]),
            "clean_correct": bool(correct[i]), "adv_correct": bool(adv_correct[i]),
            "kendall": float(kendall[i]) if correct[i] else None,
            "topk_inter": float(topk[i]) if correct[i] else None,
        })
    has = good.size > 0
    return EvalReport(
        nat_acc=float(correct.mean()), adv_acc=float(adv_correct.mean()),
        topk_inter=float(topk[good].mean()) if has else None,
        kendall=float(kendall[good].mean()) if has else None,
        kendall_median=float(np.median(kendall[good])) if has else None,
        per_sample=per_sample,
        settings={"pgd": asdict(pgd_cfg), "ifia": asdict(ifia_cfg), "seed": seed},
    )
