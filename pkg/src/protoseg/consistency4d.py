"""Voxel majority voting over a posed scan sequence.

Scans are moved into the world frame, every labeled point votes for its
label in the voxel ``floor(x_world / voxel_size)``, and the voxel winners
are written back to the points as pseudo-labels.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import tensor_io
from .errors import DimensionError, ManifestError
from .tensor_io import LabelArray, PoseSE3

DEFAULT_VOXEL_SIZE = 0.10


@dataclass(frozen=True)
class LabeledScan:
    positions: np.ndarray  # (N, 3) sensor frame, meters
    labels: LabelArray
    pose: PoseSE3
    scan_id: str
    confidence: np.ndarray | None = None

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        if not np.isfinite(pos).all():
            raise ValueError(f"scan {self.scan_id}: non-finite positions")
        if len(pos) != len(self.labels):
            raise DimensionError(f"scan {self.scan_id}: {len(pos)} positions but {len(self.labels)} labels")
        if self.confidence is not None and len(self.confidence) != len(pos):
            raise DimensionError(f"scan {self.scan_id}: confidence length mismatch")
        object.__setattr__(self, "positions", pos)


def transform_to_world(scan: LabeledScan) -> np.ndarray:
    return scan.pose.apply(scan.positions)


def voxel_keys(world: np.ndarray, voxel_size: float) -> np.ndarray:
    """``floor(world / voxel_size)``, except that quotients within a few ulps
    of an integer snap to it, so a coordinate written as ``k * voxel_size``
    lands in voxel ``k`` on both sides of the origin."""
    q = np.asarray(world, dtype=np.float64) / voxel_size
    r = np.round(q)
    snap = np.abs(q - r) <= 4 * np.spacing(np.abs(r))
    return np.where(snap, r, np.floor(q)).astype(np.int64)


@dataclass(frozen=True)
class VoxelVoteTable:
    """Sparse per-voxel label counts, sorted by (voxel key, label)."""

    voxel_size: float
    keys: np.ndarray  # (M, 3) int64 lattice coordinates, one row per (voxel, label) entry
    labels: np.ndarray  # (M,) uint32
    counts: np.ndarray  # (M,) int64, or float64 for weighted votes
    ignore_id: int = tensor_io.DEFAULT_IGNORE_ID

    @property
    def total_votes(self):
        return self.counts.sum()

    def as_dict(self) -> dict:
        out: dict = {}
        for k, lab, c in zip(map(tuple, self.keys.tolist()), self.labels.tolist(), self.counts.tolist()):
            out.setdefault(k, {})[lab] = c
        return out

    def winners(self) -> tuple[np.ndarray, np.ndarray]:
        """Unique voxel keys and their majority label (ties: lowest label)."""
        if len(self.keys) == 0:
            return np.zeros((0, 3), np.int64), np.zeros(0, np.uint32)
        # entries are grouped by key; order each group by count desc, then label asc
        new_group = np.ones(len(self.keys), bool)
        new_group[1:] = (self.keys[1:] != self.keys[:-1]).any(axis=1)
        group = np.cumsum(new_group) - 1
        order = np.lexsort((self.labels, -self.counts, group))
        first = np.ones(len(order), bool)
        first[1:] = group[order][1:] != group[order][:-1]
        pick = order[first]
        return self.keys[pick], self.labels[pick]


def _scan_votes(scan: LabeledScan, voxel_size: float, ignore_id: int, weighted: bool):
    valid = scan.labels.labels != ignore_id
    keys = voxel_keys(transform_to_world(scan)[valid], voxel_size)
    labels = scan.labels.labels[valid]
    if weighted:
        w = np.ones(len(labels)) if scan.confidence is None else np.asarray(scan.confidence, np.float64)[valid]
    else:
        w = np.ones(len(labels), np.int64)
    return keys, labels, w


def vote(
    scans,
    voxel_size: float = DEFAULT_VOXEL_SIZE,
    ignore_id: int = tensor_io.DEFAULT_IGNORE_ID,
    *,
    weighted: bool = False,
    threads: int = 1,
) -> VoxelVoteTable:
    """Count one vote per non-ignore point in its world-frame voxel.

    With ``weighted=True`` each point votes with its confidence (1 when a
    scan has none).
    """
    if not voxel_size > 0:
        raise ValueError(f"voxel_size must be positive, got {voxel_size}")
    scans = list(scans)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(lambda s: _scan_votes(s, voxel_size, ignore_id, weighted), scans))
    else:
        parts = [_scan_votes(s, voxel_size, ignore_id, weighted) for s in scans]
    wdtype = np.float64 if weighted else np.int64
    if not parts or sum(len(p[1]) for p in parts) == 0:
        return VoxelVoteTable(voxel_size, np.zeros((0, 3), np.int64), np.zeros(0, np.uint32), np.zeros(0, wdtype), ignore_id)
    keys = np.concatenate([p[0] for p in parts])
    labels = np.concatenate([p[1] for p in parts])
    w = np.concatenate([p[2] for p in parts]).astype(wdtype)
    # sorting on the weight too fixes the summation order for float votes
    order = np.lexsort((w, labels, keys[:, 2], keys[:, 1], keys[:, 0]))
    keys, labels, w = keys[order], labels[order], w[order]
    start = np.ones(len(labels), bool)
    start[1:] = (keys[1:] != keys[:-1]).any(axis=1) | (labels[1:] != labels[:-1])
    idx = np.flatnonzero(start)
    counts = np.add.reduceat(w, idx)
    return VoxelVoteTable(voxel_size, keys[idx], labels[idx].astype(np.uint32), counts, ignore_id)


def _lookup(table_keys: np.ndarray, table_vals: np.ndarray, query: np.ndarray, missing: int) -> np.ndarray:
    if len(query) == 0:
        return np.zeros(0, np.uint32)
    if len(table_keys) == 0:
        return np.full(len(query), missing, np.uint32)
    allk = np.concatenate([table_keys, query])
    _, inv = np.unique(allk, axis=0, return_inverse=True)
    inv = inv.ravel()
    slot = np.full(inv.max() + 1, -1, np.int64)
    slot[inv[: len(table_keys)]] = np.arange(len(table_keys))
    hit = slot[inv[len(table_keys) :]]
    out = np.full(len(query), missing, np.uint32)
    out[hit >= 0] = table_vals[hit[hit >= 0]]
    return out


def propagate(scans, table: VoxelVoteTable, voxel_size: float | None = None, threads: int = 1) -> list[LabeledScan]:
    """Relabel every point with its voxel's majority label.

    Points in voxels that received no vote get the scan's ignore id.
    """
    if voxel_size is not None and voxel_size != table.voxel_size:
        raise ValueError(f"voxel_size {voxel_size} does not match the vote table's {table.voxel_size}")
    win_keys, win_labels = table.winners()

    def one(scan: LabeledScan) -> LabeledScan:
        keys = voxel_keys(transform_to_world(scan), table.voxel_size)
        new = _lookup(win_keys, win_labels, keys, scan.labels.ignore_id)
        return replace(scan, labels=LabelArray(new, scan.labels.ignore_id))

    scans = list(scans)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(one, scans))
    return [one(s) for s in scans]


def export_pseudolabels(scans, out_dir) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for scan in scans:
        p = out_dir / f"{scan.scan_id}.igl"
        tensor_io.write_labels(scan.labels, p)
        paths.append(p)
    return paths


# ---------------------------------------------------------------------------
# scan manifests
# ---------------------------------------------------------------------------


def load_scan_manifest(path) -> list[LabeledScan]:
    """Read a scan-sequence manifest.

    Schema::

        {"poses": "seq.poses", "ignore_id": 4294967295,
         "scans": [{"id": "000", "points": "000.igft", "labels": "000.igl",
                    "pose": 0, "confidence": "000_conf.igft"?}]}

    ``points`` is an N x 3 ``.igft`` tensor of sensor-frame positions.
    """
    path = Path(path)
    base = path.parent
    try:
        doc = json.loads(path.read_text())
        poses = tensor_io.read_poses(base / doc["poses"])
        ignore_id = doc.get("ignore_id")
        scans = []
        for entry in doc["scans"]:
            pos = tensor_io.read_feature_matrix(base / entry["points"])
            if pos.shape[1] != 3:
                raise DimensionError(f"positions must be N x 3, got {pos.shape}", base / entry["points"])
            labels = tensor_io.read_labels(base / entry["labels"], ignore_id)
            idx = int(entry["pose"])
            if not 0 <= idx < len(poses):
                raise ManifestError(f"scan {entry['id']}: pose index {idx} out of range", path)
            conf = None
            if entry.get("confidence"):
                conf = tensor_io.read_feature_matrix(base / entry["confidence"]).ravel()
            scans.append(LabeledScan(pos, labels, poses[idx], str(entry["id"]), conf))
    except json.JSONDecodeError as exc:
        raise ManifestError(f"invalid scan manifest JSON: {exc.msg}", path, exc.pos) from None
    except (KeyError, TypeError) as exc:
        raise ManifestError(f"malformed scan manifest: {exc!r}", path) from None
    return scans
