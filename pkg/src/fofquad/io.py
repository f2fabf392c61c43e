"""Long-format CSV input and output.

Input files have a header row with columns ``subject_id,time,value``; lines
starting with ``#`` are ignored.  Output CSVs start with ``# key: value``
metadata lines followed by a header row.
"""

import csv
from collections import OrderedDict
from pathlib import Path

import numpy as np

from .errors import EmptyDatasetError, InputError
from .smoothing import LongitudinalDataset

REQUIRED_COLUMNS = ("subject_id", "time", "value")


def _data_lines(fh):
    for line in fh:
        if line.lstrip().startswith("#") or not line.strip():
            continue
        yield line


def read_long_csv(path, name=None, domain=None, months_to_unit=False) -> LongitudinalDataset:
    """Read ``subject_id,time,value`` rows into a dataset, subjects in first-seen order.

    With ``months_to_unit`` times 1..12 are mapped to ``(t - 1) / 11`` on ``[0, 1]``.
    """
    path = Path(path)
    rows = OrderedDict()
    with open(path, newline="") as fh:
        reader = csv.DictReader(_data_lines(fh))
        if reader.fieldnames is None:
            raise EmptyDatasetError(f"{path} is empty")
        missing = [c for c in REQUIRED_COLUMNS if c not in reader.fieldnames]
        if missing:
            raise InputError(f"{path}: missing columns {missing}")
        for lineno, rec in enumerate(reader, start=2):
            try:
                t = float(rec["time"])
                v = float(rec["value"])
            except (TypeError, ValueError):
                raise InputError(f"{path}:{lineno}: non-numeric time or value") from None
            rows.setdefault(rec["subject_id"], []).append((t, v))
    if not rows:
        raise EmptyDatasetError(f"{path} has no observations")
    times, values = [], []
    for sid, obs in rows.items():
        obs.sort()
        t = np.array([o[0] for o in obs])
        if months_to_unit:
            t = (t - 1.0) / 11.0
        times.append(t)
        values.append(np.array([o[1] for o in obs]))
    if domain is None:
        domain = (min(t[0] for t in times), max(t[-1] for t in times))
    return LongitudinalDataset(times, values, tuple(float(d) for d in domain),
                               name or path.stem, list(rows.keys()))


def write_long_csv(path, ids, times, values, header_lines=(), columns=REQUIRED_COLUMNS):
    path = Path(path)
    with open(path, "w", newline="") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        wr = csv.writer(fh)
        wr.writerow(columns)
        for sid, t, v in zip(ids, times, values):
            for tj, vj in zip(t, v):
                wr.writerow([sid, repr(float(tj)), repr(float(vj))])


def write_rows(path, columns, rows, header_lines=()):
    """Write a CSV with metadata comments, a header and the given rows."""
    with open(path, "w", newline="") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        wr = csv.writer(fh)
        wr.writerow(columns)
        for row in rows:
            wr.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in row])


def read_rows(path):
    """Read a CSV written by :func:`write_rows` as a list of dicts (strings)."""
    with open(path, newline="") as fh:
        return list(csv.DictReader(_data_lines(fh)))
