"""Registration quality metrics and report tables."""

from __future__ import annotations

import io
import time
from dataclasses import dataclass
from statistics import median

import numpy as np
import torch

from .fields import njd_percent, warp


@dataclass(frozen=True)
class EvalRecord:
    pair_id: str
    dsc_before: float
    dsc_after: float
    njd_percent: float
    runtime_seconds: float


def dsc(a, b):
    """Mean Dice overlap over the non-background labels present in `a`.

    A label missing from `b` contributes 0 (vanished structures are
    penalized, not skipped).
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    labels = [v for v in np.unique(a) if v != 0]
    if not labels:
        raise ValueError("no non-background labels in the reference map")
    scores = []
    for label in labels:
        in_a = a == label
        in_b = b == label
        denom = in_a.sum() + in_b.sum()
        scores.append(2.0 * np.logical_and(in_a, in_b).sum() / denom)
    return float(np.mean(scores))


def difference_map(warped, fixed):
    """Voxelwise absolute intensity difference."""
    warped = np.asarray(warped, dtype=np.float32)
    fixed = np.asarray(fixed, dtype=np.float32)
    if warped.shape != fixed.shape:
        raise ValueError(f"shape mismatch: {warped.shape} vs {fixed.shape}")
    return np.abs(warped - fixed)


def register_volumes(model, fixed, moving):
    """Run one registration forward pass on numpy volumes."""
    ft = torch.as_tensor(np.asarray(fixed, dtype=np.float32))[None, None]
    mt = torch.as_tensor(np.asarray(moving, dtype=np.float32))[None, None]
    with torch.no_grad():
        return model(ft, mt)


def evaluate_pair(model, fixed, moving, labels_fixed, labels_moving,
                  pair_id="pair", repeats=3):
    """DSC before/after, folding rate of the predicted field, and the
    median forward-pass wall-clock over `repeats` runs."""
    times = []
    result = None
    for _ in range(max(1, repeats)):
        start = time.perf_counter()
        result = register_volumes(model, fixed, moving)
        times.append(time.perf_counter() - start)

    field = result.final_field[0]
    warped_labels = np.asarray(warp(np.asarray(labels_moving), field.numpy(),
                                    mode="nearest"))
    return EvalRecord(
        pair_id=str(pair_id),
        dsc_before=dsc(labels_fixed, labels_moving),
        dsc_after=dsc(labels_fixed, warped_labels),
        njd_percent=njd_percent(field),
        runtime_seconds=float(median(times)),
    )


def _group_means(records):
    return (
        float(np.mean([r.dsc_before for r in records])),
        float(np.mean([r.dsc_after for r in records])),
        float(np.mean([r.njd_percent for r in records])),
        float(np.mean([r.runtime_seconds for r in records])),
    )


def report(records, grouping=None):
    """Aggregate records into an aligned text table and a CSV string.

    `grouping` maps group name -> list of records; by default all records
    form one group. The best mean DSC (highest), NJD and runtime (lowest)
    are flagged with '*'.
    """
    if grouping is None:
        if not records:
            raise ValueError("no records to report")
        grouping = {"all": list(records)}
    if not grouping or any(not recs for recs in grouping.values()):
        raise ValueError("empty group in report input")

    rows = []
    for name, recs in grouping.items():
        before, after, njd, runtime = _group_means(recs)
        rows.append((name, len(recs), before, after, njd, runtime))

    best_after = max(r[3] for r in rows)
    best_njd = min(r[4] for r in rows)
    best_rt = min(r[5] for r in rows)

    header = f"{'group':<20} {'n':>3} {'dsc_before':>11} {'dsc_after':>11} {'njd_%':>9} {'runtime_s':>10}"
    lines = [header, "-" * len(header)]
    for name, n, before, after, njd, runtime in rows:
        lines.append(
            f"{name:<20} {n:>3} {before:>11.4f} "
            f"{after:>10.4f}{'*' if after == best_after else ' '} "
            f"{njd:>8.3f}{'*' if njd == best_njd else ' '} "
            f"{runtime:>9.3f}{'*' if runtime == best_rt else ' '}")
    text = "\n".join(lines)

    buf = io.StringIO()
    buf.write("group,n,dsc_before,dsc_after,njd_percent,runtime_s\n")
    for name, n, before, after, njd, runtime in rows:
        buf.write(f"{name},{n},{before:.6f},{after:.6f},{njd:.6f},{runtime:.6f}\n")
    return text, buf.getvalue()


def records_csv(records):
    """Per-pair CSV: pair_id, dsc_before, dsc_after, njd_percent, runtime_s."""
    buf = io.StringIO()
    buf.write("pair_id,dsc_before,dsc_after,njd_percent,runtime_s\n")
    for r in records:
        buf.write(f"{r.pair_id},{r.dsc_before:.6f},{r.dsc_after:.6f},"
                  f"{r.njd_percent:.6f},{r.runtime_seconds:.6f}\n")
    return buf.getvalue()
