"""Deterministic synthetic feature spaces and scan sequences.

Randomness comes from xorshift64* streams so scenes can be reproduced
bit-exactly in any language:

* ``splitmix64(x)``: ``z = x + 0x9E3779B97F4A7C15``;
  ``z = (z ^ z >> 30) * 0xBF58476D1CE4E5B9``;
  ``z = (z ^ z >> 27) * 0x94D049BB133111EB``; return ``z ^ z >> 31``
  (all arithmetic mod 2**64).
* stream ``(seed, domain, index)`` starts from
  ``splitmix64(splitmix64(seed ^ domain) + index)``.
* xorshift64* step: ``x ^= x >> 12; x ^= x << 25; x ^= x >> 27``; output
  ``x * 0x2545F4914F6CDD1D``.
* uniform double: ``(output >> 11) * 2**-53``.
* normals (polar method): draw ``u = 2U - 1`` then ``v = 2U - 1``;
  ``s = u*u + v*v``; reject unless ``0 < s < 1``; emit ``u*f`` then
  ``v*f`` with ``f = sqrt(-2 ln(s) / s)``. A trailing unused value is
  dropped.

For seed 0, domain 0, index 0 the first three outputs are
``0x25CF8BB51744A6A1``, ``0x15FDD1FB8BD5BA2A``, ``0x91B47737D28902BE``
(see the tests for the independent scalar reference).
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor_io
from .consistency4d import LabeledScan
from .errors import InfeasibleConfigError
from .prototype_bank import PrototypeBank, prototype_from_patches
from .tensor_io import LabelArray, PoseSE3

M64 = (1 << 64) - 1

DOMAIN_CENTROID = 1
DOMAIN_ANISOTROPY = 2
DOMAIN_PROTOTYPE = 3
DOMAIN_POINT = 4
DOMAIN_VOXEL_LABEL = 5
DOMAIN_POSE = 6
DOMAIN_SCAN = 7

MAX_CENTROID_ATTEMPTS = 1000


def splitmix64(x: int) -> int:
    z = (x + 0x9E3779B97F4A7C15) & M64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & M64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & M64
    return z ^ (z >> 31)


def stream_seed(seed: int, domain: int, index: int) -> int:
    s = splitmix64((splitmix64((seed ^ domain) & M64) + index) & M64)
    return s or 0x9E3779B97F4A7C15


class Xorshift64Star:
    """A batch of independent xorshift64* streams advanced in lockstep."""

    _MUL = np.uint64(0x2545F4914F6CDD1D)

    def __init__(self, seed: int, domain: int, indices):
        idx = np.atleast_1d(np.asarray(indices, dtype=np.int64))
        self.state = np.array([stream_seed(seed, domain, int(i)) for i in idx], dtype=np.uint64)

    def __len__(self) -> int:
        return len(self.state)

    def next_u64(self, active=None) -> np.ndarray:
        x = self.state if active is None else self.state[active]
        x = x ^ (x >> np.uint64(12))
        x = x ^ (x << np.uint64(25))
        x = x ^ (x >> np.uint64(27))
        if active is None:
            self.state = x
        else:
            self.state[active] = x
        return x * self._MUL

    def uniform(self, active=None) -> np.ndarray:
        return (self.next_u64(active) >> np.uint64(11)).astype(np.float64) * 2.0**-53

    def uniforms(self, k: int) -> np.ndarray:
        """``(streams, k)`` uniforms, column j being each stream's j-th draw."""
        out = np.empty((len(self), k))
        for j in range(k):
            out[:, j] = self.uniform()
        return out

    def normals(self, k: int) -> np.ndarray:
        """``(streams, k)`` standard normals by the polar method."""
        n = len(self)
        out = np.empty((n, k + 1))
        filled = np.zeros(n, dtype=np.int64)
        while True:
            active = np.flatnonzero(filled < k)
            if active.size == 0:
                return out[:, :k]
            u = 2.0 * self.uniform(active) - 1.0
            v = 2.0 * self.uniform(active) - 1.0
            s = u * u + v * v
            ok = (s > 0) & (s < 1)
            rows = active[ok]
            f = np.sqrt(-2.0 * np.log(s[ok]) / s[ok])
            col = filled[rows]
            out[rows, col] = u[ok] * f
            out[rows, col + 1] = v[ok] * f
            filled[rows] += 2


def _unit_fixed_point(v: np.ndarray) -> np.ndarray:
    # repeat until normalizing changes nothing, so renormalizing a clean centroid is exact
    for _ in range(16):
        nv = v / np.linalg.norm(v)
        if np.array_equal(nv, v):
            break
        v = nv
    return v


def _unit_rows(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=1, keepdims=True)


@dataclass
class SynthConfig:
    seed: int = 0
    classes: int = 4
    subclasses_per_class: int = 2
    dims: int = 32
    prototypes_per_subclass: int = 2
    points_per_class: int = 100
    sigma: float = 0.1
    anisotropy_range: tuple[float, float] = (1.0, 1.0)
    min_angle_deg: float = 30.0
    # scan sequence
    scans: int = 5
    points_per_scan: int = 200
    voxel_size: float = 0.10
    scene_extent: float = 20.0
    flip_rate: float = 0.0
    max_rotation_deg: float = 180.0

    def __post_init__(self):
        self.anisotropy_range = tuple(float(a) for a in self.anisotropy_range)
        self.validate()

    def validate(self) -> None:
        counts = ("classes", "subclasses_per_class", "dims", "prototypes_per_subclass", "points_per_class", "scans", "points_per_scan")
        for name in counts:
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        lo, hi = self.anisotropy_range
        if not 0 < lo <= hi:
            raise ValueError("anisotropy_range must satisfy 0 < lo <= hi")
        if not 0 <= self.flip_rate <= 1:
            raise ValueError("flip_rate must be in [0, 1]")
        if self.flip_rate > 0 and self.classes < 2:
            raise ValueError("label flips need at least two classes")
        if not self.voxel_size > 0 or not self.scene_extent > 0:
            raise ValueError("voxel_size and scene_extent must be positive")
        if not 0 <= self.seed <= M64:
            raise ValueError("seed must be an unsigned 64-bit integer")

    @property
    def num_subclasses(self) -> int:
        return self.classes * self.subclasses_per_class

    @classmethod
    def from_dict(cls, doc: dict) -> SynthConfig:
        known = set(cls.__dataclass_fields__)
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**doc)

    @classmethod
    def load(cls, path) -> SynthConfig:
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["anisotropy_range"] = list(self.anisotropy_range)
        return d


@dataclass
class SynthScene:
    bank: PrototypeBank
    points: np.ndarray  # (N, D) float32 unit rows
    gt: LabelArray  # class ids
    gt_subclass: np.ndarray
    centroids: np.ndarray  # (S, D)
    anisotropy: np.ndarray  # (K, D)
    prototype_rows: np.ndarray  # (P, D) float32, before bank construction


@dataclass
class SynthSequence:
    scans: list[LabeledScan]
    clean: list[np.ndarray] = field(default_factory=list)  # clean label per point
    voxel_index: list[np.ndarray] = field(default_factory=list)  # generator voxel id per point
    voxel_size: float = 0.10


def sample_centroids(cfg: SynthConfig) -> np.ndarray:
    min_cos = math.cos(math.radians(cfg.min_angle_deg))
    out = []
    for s in range(cfg.num_subclasses):
        rng = Xorshift64Star(cfg.seed, DOMAIN_CENTROID, s)
        for _ in range(MAX_CENTROID_ATTEMPTS):
            c = _unit_fixed_point(rng.normals(cfg.dims)[0])
            if all(float(c @ o) <= min_cos for o in out):
                out.append(c)
                break
        else:
            raise InfeasibleConfigError(
                f"could not place subclass {s} at >= {cfg.min_angle_deg} deg from the others "
                f"after {MAX_CENTROID_ATTEMPTS} attempts"
            )
    return np.array(out)


def generate(cfg: SynthConfig) -> SynthScene:
    """Sample a labeled point-feature scene and its prototype bank.

    Point features are ``normalize((centroid + sigma * n) * a_k)`` with a
    per-class, per-dimension anisotropy ``a_k``; prototypes use independent
    noise and no anisotropy.
    """
    K, spc, D = cfg.classes, cfg.subclasses_per_class, cfg.dims
    centroids = sample_centroids(cfg)
    lo, hi = cfg.anisotropy_range
    aniso = lo + (hi - lo) * Xorshift64Star(cfg.seed, DOMAIN_ANISOTROPY, range(K)).uniforms(D)

    S, pps = cfg.num_subclasses, cfg.prototypes_per_subclass
    proto_sub = np.repeat(np.arange(S), pps)
    noise = Xorshift64Star(cfg.seed, DOMAIN_PROTOTYPE, range(S * pps)).normals(D)
    protos = _unit_rows(centroids[proto_sub] + cfg.sigma * noise).astype(np.float32)

    n = cfg.points_per_class
    point_class = np.repeat(np.arange(K), n)
    point_sub = point_class * spc + np.tile(np.arange(n) % spc, K)
    noise = Xorshift64Star(cfg.seed, DOMAIN_POINT, range(K * n)).normals(D)
    points = _unit_rows((centroids[point_sub] + cfg.sigma * noise) * aniso[point_class]).astype(np.float32)

    bank = PrototypeBank(
        prototypes=np.array([prototype_from_patches(r[None, :]) for r in protos], dtype=np.float32),
        subclass_of=proto_sub,
        class_of_subclass=np.arange(S) // spc,
        subclass_names=[f"class{s // spc}_sub{s % spc}" for s in range(S)],
        classes=[f"class{k}" for k in range(K)],
        sources=["synth"] * len(protos),
    )
    return SynthScene(bank, points, LabelArray(point_class), point_sub, centroids, aniso, protos)


def _rotation_z(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def generate_sequence(cfg: SynthConfig) -> SynthSequence:
    """Posed scans that all revisit the same voxels.

    Every scan holds one point per voxel, jittered within the central half
    of the voxel; each label is flipped to a uniformly chosen other class
    with probability ``flip_rate``.
    """
    V, K, vs = cfg.points_per_scan, cfg.classes, cfg.voxel_size
    side = math.ceil(V ** (1 / 3) - 1e-9)
    step = max(1, int(cfg.scene_extent / vs) // side)
    v = np.arange(V)
    cells = np.stack([v % side, (v // side) % side, v // (side * side)], axis=1) * step
    clean = np.floor(Xorshift64Star(cfg.seed, DOMAIN_VOXEL_LABEL, v).uniforms(1)[:, 0] * K).astype(np.uint32)

    scans, cleans, vidx = [], [], []
    pose_rng = Xorshift64Star(cfg.seed, DOMAIN_POSE, range(cfg.scans)).uniforms(4)
    for s in range(cfg.scans):
        theta = math.radians(cfg.max_rotation_deg) * (2 * pose_rng[s, 0] - 1)
        t = cfg.scene_extent * (2 * pose_rng[s, 1:] - 1)
        pose = PoseSE3(_rotation_z(theta), t)
        # per voxel: 3 jitter draws, 2 flip draws
        u = Xorshift64Star(cfg.seed, DOMAIN_SCAN, s * V + v).uniforms(5)
        world = (cells + 0.5 + 0.5 * (u[:, :3] - 0.5)) * vs
        local = (world - pose.translation) @ pose.rotation
        flip = u[:, 3] < cfg.flip_rate
        if K > 1:
            other = (clean + 1 + np.floor(u[:, 4] * (K - 1)).astype(np.uint32)) % K
        else:
            other = clean
        labels = np.where(flip, other, clean).astype(np.uint32)
        scans.append(LabeledScan(local, LabelArray(labels), pose, f"{s:06d}"))
        cleans.append(clean.copy())
        vidx.append(v.copy())
    return SynthSequence(scans, cleans, vidx, vs)


def write_outputs(cfg: SynthConfig, out_dir) -> dict:
    """Write a scene and a scan sequence into ``out_dir``.

    Layout: ``manifest.json`` (prompt manifest over one-patch feature grids
    in ``prototypes/``), ``points.igft``, ``gt.igl``, ``gt_subclass.igl``,
    ``scans.json`` with ``scans/*.igft|*.igl`` and ``seq.poses``, plus
    ``scans/*_clean.igl`` and ``config.json``.
    """
    out = Path(out_dir)
    (out / "prototypes").mkdir(parents=True, exist_ok=True)
    (out / "scans").mkdir(exist_ok=True)
    scene = generate(cfg)
    seq = generate_sequence(cfg)
    bank = scene.bank

    subclasses = []
    pps = cfg.prototypes_per_subclass
    for s, name in enumerate(bank.subclass_names):
        feats = []
        for j in range(pps):
            rel = f"prototypes/sub{s:04d}_{j:02d}.igft"
            tensor_io.write_feature_matrix(scene.prototype_rows[s * pps + j][None, :], out / rel)
            feats.append(rel)
        subclasses.append(
            {"name": name, "class": int(bank.class_of_subclass[s]), "kind": "thing",
             "prompt": f"generate an image of {name} with white background", "template": "obj",
             "source": "synth", "features": feats}
        )  # fmt: skip
    manifest = {"classes": list(bank.classes), "ignore_id": bank.ignore_id, "subclasses": subclasses}
    tensor_io._atomic_write(out / "manifest.json", (json.dumps(manifest, indent=1) + "\n").encode())
    tensor_io.write_feature_matrix(scene.points, out / "points.igft")
    tensor_io.write_labels(scene.gt, out / "gt.igl")
    tensor_io.write_labels(LabelArray(scene.gt_subclass), out / "gt_subclass.igl")

    entries = []
    for i, (scan, clean) in enumerate(zip(seq.scans, seq.clean)):
        sid = scan.scan_id
        tensor_io.write_feature_matrix(scan.positions.astype(np.float32), out / f"scans/{sid}.igft")
        tensor_io.write_labels(scan.labels, out / f"scans/{sid}.igl")
        tensor_io.write_labels(LabelArray(clean), out / f"scans/{sid}_clean.igl")
        entries.append({"id": sid, "points": f"scans/{sid}.igft", "labels": f"scans/{sid}.igl", "pose": i})
    tensor_io.write_poses([s.pose for s in seq.scans], out / "seq.poses")
    scan_doc = {"poses": "seq.poses", "ignore_id": tensor_io.DEFAULT_IGNORE_ID, "voxel_size": cfg.voxel_size, "scans": entries}
    tensor_io._atomic_write(out / "scans.json", (json.dumps(scan_doc, indent=1) + "\n").encode())
    tensor_io._atomic_write(out / "config.json", (json.dumps(cfg.to_dict(), indent=1) + "\n").encode())
    return {"scene": scene, "sequence": seq}
