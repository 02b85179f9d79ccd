"""Scan-log persistence: per-frame header plus x,y,z triples.

Two on-disk flavors share one schema: delimited text (debuggable) and a
little-endian binary with float32 points (compact, preferred).
"""

from __future__ import annotations

import struct

import numpy as np

from .grid_fusion import ScanFrame

_BIN_MAGIC = b"RVSCAN1\n"


def save_scan_log(frames: list[ScanFrame], path, binary: bool = True) -> None:
    if binary:
        with open(path, "wb") as f:
            f.write(_BIN_MAGIC)
            f.write(struct.pack("<I", len(frames)))
            for fr in frames:
                f.write(struct.pack("<dI", fr.timestamp, len(fr.points)))
                f.write(np.ascontiguousarray(fr.points, dtype="<f4").tobytes())
    else:
        with open(path, "w") as f:
            f.write("# scan log v1\n")
            for fr in frames:
                f.write(f"frame {fr.timestamp:.6f} {len(fr.points)}\n")
                for x, y, z in fr.points:
                    f.write(f"{x:.4f} {y:.4f} {z:.4f}\n")


def load_scan_log(path) -> list[ScanFrame]:
    with open(path, "rb") as f:
        head = f.read(len(_BIN_MAGIC))
        if head == _BIN_MAGIC:
            (n_frames,) = struct.unpack("<I", f.read(4))
            frames = []
            for _ in range(n_frames):
                ts, n = struct.unpack("<dI", f.read(12))
                pts = np.frombuffer(f.read(12 * n), dtype="<f4").reshape(n, 3)
                frames.append(ScanFrame(pts.astype(float), timestamp=ts))
            return frames
    # fall back to the text flavor
    frames = []
    with open(path) as f:
        points: list[list[float]] = []
        ts = 0.0
        expected = -1
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if line.startswith("frame "):
                if expected >= 0:
                    frames.append(ScanFrame(np.array(points).reshape(-1, 3), timestamp=ts))
                _, ts_s, n_s = line.split()
                ts, expected = float(ts_s), int(n_s)
                points = []
            else:
                points.append([float(v) for v in line.split()])
        if expected >= 0:
            frames.append(ScanFrame(np.array(points).reshape(-1, 3), timestamp=ts))
    if not frames:
        raise ValueError(f"{path} is not a scan log")
    return frames
