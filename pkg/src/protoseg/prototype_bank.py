"""Prototype manifests, image cropping and prototype-bank construction."""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor_io
from .errors import (
    DimensionError,
    EmptySelectionError,
    ManifestError,
    NumericError,
    ZeroNormAverageError,
    ZeroNormPatchError,
)

DEFAULT_WHITE_THRESHOLD = 250
BANK_VERSION = 1

TEMPLATES = {
    "obj": "generate an image of {c} with white background",
    "stuff": "generate an image of {c} covering the whole image",
    "drive": "{p}, similar to what you see along roadsides and in cities",
}


def render_prompt(template: str, name: str) -> str:
    """Expand a template id into prompt text.

    ``obj_drive`` and ``stuff_drive`` wrap the object/stuff prompt in the
    driving-context suffix.
    """
    if template in ("obj", "stuff"):
        return TEMPLATES[template].format(c=name)
    if template in ("obj_drive", "stuff_drive"):
        inner = TEMPLATES[template.split("_")[0]].format(c=name)
        return TEMPLATES["drive"].format(p=inner)
    raise KeyError(f"unknown prompt template {template!r}")


NUSCENES_CLASSES = (
    "barrier", "bicycle", "bus", "car", "construction_vehicle", "motorcycle",
    "pedestrian", "traffic_cone", "trailer", "truck", "driveable_surface",
    "other_flat", "sidewalk", "terrain", "manmade", "vegetation",
)  # fmt: skip

# (subclass name, class, template) for the 16 nuScenes classes.
NUSCENES_SUBCLASSES = (
    ("pedestrian", "pedestrian", "obj"),
    ("bicycle", "bicycle", "obj"),
    ("bus", "bus", "obj"),
    ("car", "car", "obj"),
    ("van", "car", "obj"),
    ("construction vehicle", "construction_vehicle", "obj"),
    ("motorcycle", "motorcycle", "obj"),
    ("trailer", "trailer", "obj"),
    ("truck", "truck", "obj"),
    ("lorry with open cargo cab", "truck", "obj"),
    ("lorry with closed cargo cab", "truck", "obj"),
    ("lorry with open high cargo cab", "truck", "obj"),
    ("concrete barrier", "barrier", "obj"),
    ("traffic cone", "traffic_cone", "obj"),
    ("road", "driveable_surface", "stuff"),
    ("traffic island", "other_flat", "obj"),
    ("sidewalk without objects on it", "sidewalk", "stuff"),
    ("green terrain", "terrain", "stuff_drive"),
    ("less green and soil terrain", "terrain", "stuff_drive"),
    ("soil terrain", "terrain", "stuff_drive"),
    ("wall", "manmade", "stuff"),
    ("concrete stairs", "manmade", "obj_drive"),
    ("traffic light", "manmade", "obj_drive"),
    ("traffic sign", "manmade", "obj_drive"),
    ("pole", "manmade", "obj_drive"),
    ("fire hydrant", "manmade", "obj_drive"),
    ("2-3 skyscrapers close to each other", "manmade", "obj_drive"),
    ("house", "manmade", "obj_drive"),
    ("apartments", "manmade", "obj_drive"),
    ("bush", "vegetation", "obj_drive"),
    ("shrub", "vegetation", "obj_drive"),
    ("horizontal vegetation that includes shrub and bushes", "vegetation", "obj_drive"),
    ("woods", "vegetation", "obj_drive"),
    ("tree trunk", "vegetation", "obj"),
)


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------


@dataclass
class SubclassSpec:
    name: str
    parent: int
    kind: str = "thing"
    prompt: str = ""
    template: str | None = None
    features: list[Path] = field(default_factory=list)
    images: list[Path] = field(default_factory=list)
    sources: list[str] = field(default_factory=list)


@dataclass
class PromptManifest:
    classes: list[str]
    subclasses: list[SubclassSpec]
    ignore_id: int = tensor_io.DEFAULT_IGNORE_ID

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        n = len(self.classes)
        if n == 0:
            raise ManifestError("manifest declares no classes")
        if len(set(self.classes)) != n:
            raise ManifestError("class names are not unique")
        names = [s.name for s in self.subclasses]
        if len(set(names)) != len(names):
            dup = next(x for x in names if names.count(x) > 1)
            raise ManifestError(f"duplicate subclass name {dup!r}")
        for s in self.subclasses:
            if not 0 <= s.parent < n:
                raise ManifestError(f"subclass {s.name!r} has invalid parent class {s.parent}")
            if s.kind not in ("thing", "stuff"):
                raise ManifestError(f"subclass {s.name!r} has kind {s.kind!r}, expected thing|stuff")
        covered = {s.parent for s in self.subclasses}
        missing = [self.classes[i] for i in range(n) if i not in covered]
        if missing:
            raise ManifestError(f"classes without any subclass: {missing}")
        if 0 <= self.ignore_id < n:
            raise ManifestError(f"ignore_id {self.ignore_id} collides with a class id")

    @property
    def class_of_subclass(self) -> np.ndarray:
        return np.array([s.parent for s in self.subclasses], dtype=np.int64)

    @classmethod
    def from_dict(cls, doc: dict, base_dir=".") -> PromptManifest:
        base = Path(base_dir)
        try:
            classes = [str(c) for c in doc["classes"]]
            subs = []
            for entry in doc["subclasses"]:
                parent = entry["class"]
                if isinstance(parent, str):
                    if parent not in classes:
                        raise ManifestError(f"subclass {entry.get('name')!r}: unknown class {parent!r}")
                    parent = classes.index(parent)
                features, sources = [], []
                for f in entry.get("features", []):
                    if isinstance(f, dict):
                        features.append(base / f["path"])
                        sources.append(str(f.get("source", "")))
                    else:
                        features.append(base / f)
                        sources.append(str(entry.get("source", "")))
                subs.append(
                    SubclassSpec(
                        name=str(entry["name"]),
                        parent=int(parent),
                        kind=entry.get("kind", "thing"),
                        prompt=entry.get("prompt", ""),
                        template=entry.get("template"),
                        features=features,
                        images=[base / p for p in entry.get("images", [])],
                        sources=sources,
                    )
                )
            ignore_id = int(doc.get("ignore_id", tensor_io.DEFAULT_IGNORE_ID))
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, ManifestError):
                raise
            raise ManifestError(f"malformed manifest: {exc!r}") from None
        return cls(classes, subs, ignore_id)

    @classmethod
    def load(cls, path) -> PromptManifest:
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ManifestError(f"invalid JSON: {exc.msg}", path, exc.pos) from None
        try:
            return cls.from_dict(doc, path.parent)
        except ManifestError as exc:
            exc.path = str(path)
            raise


def load_class_names(path) -> tuple[list[str], int]:
    """Read ``classes`` and ``ignore_id`` from any manifest or bank JSON."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
        return [str(c) for c in doc["classes"]], int(doc.get("ignore_id", tensor_io.DEFAULT_IGNORE_ID))
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise ManifestError(f"cannot read class list: {exc!r}", path) from None


# ---------------------------------------------------------------------------
# prototypes
# ---------------------------------------------------------------------------


def tight_crop(image: np.ndarray, white_threshold: int = DEFAULT_WHITE_THRESHOLD) -> np.ndarray:
    """Crop away the white border around the foreground.

    A pixel is foreground when its smallest channel is below
    ``white_threshold``. Images without foreground come back unchanged.
    """
    fg = image.min(axis=2) < white_threshold
    rows = np.flatnonzero(fg.any(axis=1))
    if rows.size == 0:
        return image
    cols = np.flatnonzero(fg.any(axis=0))
    return image[rows[0] : rows[-1] + 1, cols[0] : cols[-1] + 1]


def prototype_from_patches(patch_grid, mask=None) -> np.ndarray:
    """Average the L2-normalized patch features and renormalize the mean.

    Args:
        patch_grid: ``(num_patches, D)`` patch features of one image.
        mask: optional boolean per patch; defaults to every patch.

    Returns:
        Unit-norm float64 vector of length ``D``.
    """
    grid = np.asarray(patch_grid, dtype=np.float64)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (grid.shape[0],):
            raise DimensionError(f"mask length {mask.shape} does not match {grid.shape[0]} patches")
        grid = grid[mask]
    if grid.shape[0] == 0:
        raise EmptySelectionError("no patch selected")
    norms = np.linalg.norm(grid, axis=1)
    if (norms == 0).any():
        raise ZeroNormPatchError(f"patch {int(np.flatnonzero(norms == 0)[0])} has zero norm")
    mean = (grid / norms[:, None]).mean(axis=0)
    n = np.linalg.norm(mean)
    # averaging unit vectors loses ~eps per row; anything near that is cancellation
    if n <= 1e-12:
        raise ZeroNormAverageError("normalized patches cancel out (zero-norm average)")
    return mean / n


@dataclass(frozen=True)
class PrototypeBank:
    prototypes: np.ndarray  # (P, D) float32, unit rows
    subclass_of: np.ndarray  # (P,) subclass index per row
    class_of_subclass: np.ndarray  # (S,) class index per subclass
    subclass_names: tuple[str, ...]
    classes: tuple[str, ...]
    sources: tuple[str, ...]  # per row
    ignore_id: int = tensor_io.DEFAULT_IGNORE_ID

    def __post_init__(self):
        protos = np.ascontiguousarray(self.prototypes, dtype=np.float32)
        sub = np.asarray(self.subclass_of, dtype=np.int64)
        cos = np.asarray(self.class_of_subclass, dtype=np.int64)
        for a in (protos, sub, cos):
            a.setflags(write=False)
        object.__setattr__(self, "prototypes", protos)
        object.__setattr__(self, "subclass_of", sub)
        object.__setattr__(self, "class_of_subclass", cos)
        object.__setattr__(self, "subclass_names", tuple(self.subclass_names))
        object.__setattr__(self, "classes", tuple(self.classes))
        object.__setattr__(self, "sources", tuple(self.sources))
        if protos.ndim != 2 or len(sub) != len(protos) or len(self.sources) != len(protos):
            raise DimensionError("bank rows, subclass_of and sources disagree in length")
        if len(self.subclass_names) != len(cos):
            raise DimensionError("subclass names and class map disagree in length")
        if len(sub) and (sub.min() < 0 or sub.max() >= len(cos)):
            raise DimensionError("subclass_of refers to an unknown subclass")
        if len(cos) and (cos.min() < 0 or cos.max() >= len(self.classes)):
            raise DimensionError("class map refers to an unknown class")

    @property
    def dims(self) -> int:
        return self.prototypes.shape[1]

    @property
    def num_subclasses(self) -> int:
        return len(self.class_of_subclass)

    def __len__(self) -> int:
        return len(self.prototypes)

    def save(self, path) -> None:
        """Write ``<path>`` (JSON metadata) and ``<stem>.igft`` (rows)."""
        path = Path(path)
        feats = path.with_suffix(".igft")
        tensor_io.write_feature_matrix(self.prototypes, feats)
        doc = {
            "version": BANK_VERSION,
            "classes": list(self.classes),
            "ignore_id": self.ignore_id,
            "subclasses": [
                {"name": n, "class": int(c)} for n, c in zip(self.subclass_names, self.class_of_subclass)
            ],
            "features": feats.name,
            "rows": [{"subclass": int(s), "source": src} for s, src in zip(self.subclass_of, self.sources)],
        }
        tensor_io._atomic_write(path, (json.dumps(doc, indent=1) + "\n").encode())

    @classmethod
    def load(cls, path) -> PrototypeBank:
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
            protos = tensor_io.read_feature_matrix(path.parent / doc["features"])
            rows = doc["rows"]
            return cls(
                prototypes=protos,
                subclass_of=[r["subclass"] for r in rows],
                class_of_subclass=[s["class"] for s in doc["subclasses"]],
                subclass_names=[s["name"] for s in doc["subclasses"]],
                classes=doc["classes"],
                sources=[r.get("source", "") for r in rows],
                ignore_id=int(doc.get("ignore_id", tensor_io.DEFAULT_IGNORE_ID)),
            )
        except json.JSONDecodeError as exc:
            raise ManifestError(f"invalid bank JSON: {exc.msg}", path, exc.pos) from None
        except (KeyError, TypeError) as exc:
            raise ManifestError(f"malformed bank file: {exc!r}", path) from None


def _subclass_rows(spec: SubclassSpec):
    if not spec.features:
        if spec.images:
            raise ManifestError(
                f"subclass {spec.name!r} only lists images; patch features must be extracted first"
            )
        raise ManifestError(f"subclass {spec.name!r} has no feature files")
    rows = []
    for i, fpath in enumerate(spec.features):
        grid = tensor_io.read_feature_matrix(fpath)
        try:
            rows.append(prototype_from_patches(grid))
        except NumericError as exc:
            raise type(exc)(f"subclass {spec.name!r}, file {fpath}: {exc}") from None
    return rows


def build_bank(manifest: PromptManifest, threads: int = 1) -> PrototypeBank:
    """One prototype row per (subclass, feature file) pair, in manifest order."""
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        per_sub = list(pool.map(_subclass_rows, manifest.subclasses))
    dims = {len(r) for rows in per_sub for r in rows}
    if len(dims) > 1:
        raise DimensionError(f"patch grids disagree in feature dimension: {sorted(dims)}")
    protos, subclass_of, sources = [], [], []
    for s, (spec, rows) in enumerate(zip(manifest.subclasses, per_sub)):
        protos.extend(rows)
        subclass_of.extend([s] * len(rows))
        sources.extend(spec.sources or [""] * len(rows))
    return PrototypeBank(
        prototypes=np.array(protos, dtype=np.float32),
        subclass_of=subclass_of,
        class_of_subclass=manifest.class_of_subclass,
        subclass_names=[s.name for s in manifest.subclasses],
        classes=manifest.classes,
        sources=sources,
        ignore_id=manifest.ignore_id,
    )


def merge_banks(a: PrototypeBank, b: PrototypeBank) -> PrototypeBank:
    """Row-wise union of two banks over the same subclass/class layout."""
    if a.dims != b.dims:
        raise DimensionError(f"cannot merge banks of dimension {a.dims} and {b.dims}")
    if (
        a.classes != b.classes
        or a.subclass_names != b.subclass_names
        or not np.array_equal(a.class_of_subclass, b.class_of_subclass)
    ):
        raise DimensionError("cannot merge banks with different subclass-to-class maps")
    return PrototypeBank(
        prototypes=np.vstack([a.prototypes, b.prototypes]),
        subclass_of=np.concatenate([a.subclass_of, b.subclass_of]),
        class_of_subclass=a.class_of_subclass,
        subclass_names=a.subclass_names,
        classes=a.classes,
        sources=a.sources + b.sources,
        ignore_id=a.ignore_id,
    )
