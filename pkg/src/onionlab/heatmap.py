"""Gate-trace export (CSV + binary PPM) and the gate-monotonicity statistic."""
from __future__ import annotations

import io
from pathlib import Path

import numpy as np

from .container import write_atomic

# Viridis-like ramp: 256 entries linearly interpolated between these anchors
# (dark blue = closed, yellow = open). Built once from literals, so every image
# is bit-stable across platforms.
_ANCHORS = np.array([
    [68, 1, 84], [72, 35, 116], [64, 67, 135], [52, 94, 141], [41, 120, 142],
    [32, 144, 140], [34, 167, 132], [68, 190, 112], [121, 209, 81], [189, 222, 38],
    [253, 231, 37],
], dtype=np.float64)


def _build_colormap() -> np.ndarray:
    pos = np.linspace(0.0, len(_ANCHORS) - 1, 256)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, len(_ANCHORS) - 1)
    frac = (pos - lo)[:, None]
    return np.rint(_ANCHORS[lo] * (1 - frac) + _ANCHORS[hi] * frac).astype(np.uint8)


COLORMAP = _build_colormap()  # (256, 3) uint8


def gates_csv(gates: np.ndarray) -> str:
    """Channels as rows, timesteps as columns; header ``channel,t1..tT``."""
    buf = io.StringIO()
    buf.write("channel," + ",".join(f"t{t + 1}" for t in range(gates.shape[1])) + "\n")
    for c, row in enumerate(gates):
        buf.write(f"{c}," + ",".join(f"{float(v):.6f}" for v in row) + "\n")
    return buf.getvalue()


def gates_ppm(gates: np.ndarray, cell: int = 8) -> bytes:
    """Binary P6 image; each gate value becomes a ``cell`` x ``cell`` block."""
    idx = np.clip(np.rint(np.asarray(gates, dtype=np.float64) * 255), 0, 255).astype(np.uint8)
    rgb = COLORMAP[idx]
    rgb = np.repeat(np.repeat(rgb, cell, axis=0), cell, axis=1)
    h, w = rgb.shape[:2]
    return f"P6\n{w} {h}\n255\n".encode() + rgb.tobytes()


def export_gate_heatmap(gates: np.ndarray, path: str | Path, cell: int = 8) -> tuple[Path, Path]:
    """Write ``<path>.csv`` and ``<path>.ppm`` for an (N, T) gate trace."""
    base = Path(path)
    csv_path, ppm_path = base.with_suffix(".csv"), base.with_suffix(".ppm")
    write_atomic(csv_path, gates_csv(gates).encode())
    write_atomic(ppm_path, gates_ppm(gates, cell))
    return csv_path, ppm_path


def read_ppm(raw: bytes) -> np.ndarray:
    """Decode a P6 image written by :func:`gates_ppm` into (H, W, 3)."""
    header, rest = raw.split(b"\n", 1)
    if header != b"P6":
        raise ValueError("not a binary PPM")
    dims, rest = rest.split(b"\n", 1)
    _, data = rest.split(b"\n", 1)
    w, h = map(int, dims.split())
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w, 3)


def monotone_fraction(traces: np.ndarray, lengths: np.ndarray) -> float:
    """Mean over sequences of the share of adjacent input-phase steps where the channel-mean gate does not rise.

    ``traces`` is (n, T, N) with step ``t`` valid for ``t <= length`` (the last
    valid step consumes S); the input phase is the ``length`` token steps.
    Sequences of length 1 have no adjacent pair and are skipped.
    """
    means = traces.mean(axis=2)
    fracs = []
    for row, L in zip(means, np.asarray(lengths, dtype=np.int64)):
        if L < 2:
            continue
        steps = row[:L]
        fracs.append(float(np.mean(np.diff(steps) <= 0)))
    if not fracs:
        raise ValueError("no sequence with at least two input steps")
    return float(np.mean(fracs))
