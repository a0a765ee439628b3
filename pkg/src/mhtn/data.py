"""Datasets, feature-file I/O, synthetic benchmarks and stratified splits.

Feature file layout (tab separated, one header line)::

    #mhtn-features v1 modality=<tag> count=<n> dim=<d> classes=<c>
    <id>\t<label or -1>\t<v_1>\t...\t<v_d>

Floats are written with ``repr`` so a write/load round trip is lossless.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from .errors import ConfigurationError, DataError

HEADER_TAG = "#mhtn-features"
FORMAT_VERSION = "v1"
UNLABELED = -1


@dataclass
class FeatureFragment:
    """Rows of one feature file."""

    modality: str
    ids: np.ndarray
    labels: np.ndarray
    features: np.ndarray
    num_classes: Optional[int] = None

    def __len__(self):
        return self.ids.shape[0]


@dataclass
class Dataset:
    """Instances grouped by modality.

    ``pair_table`` optionally holds explicit co-existence groups: row ``j``
    lists, per modality (in ``modalities`` order), the position of the member
    instance.
    """

    features: dict[str, np.ndarray]
    labels: dict[str, np.ndarray]
    ids: dict[str, np.ndarray]
    num_classes: int
    pair_table: Optional[np.ndarray] = None
    split: str = "train"

    def __post_init__(self):
        for mod, x in self.features.items():
            n = x.shape[0]
            if self.labels[mod].shape[0] != n or self.ids[mod].shape[0] != n:
                raise DataError(f"modality {mod!r}: features, labels and ids differ in length")
            lab = self.labels[mod]
            if lab.size and (lab.min() < UNLABELED or lab.max() >= self.num_classes):
                raise DataError(f"modality {mod!r}: labels outside [0, {self.num_classes})")
            if np.unique(self.ids[mod]).size != n:
                raise DataError(f"modality {mod!r}: duplicate instance ids")
        if self.pair_table is not None:
            pt = self.pair_table
            if pt.ndim != 2 or pt.shape[1] != len(self.features):
                raise DataError("pair table must have one column per modality")
            for k, mod in enumerate(self.modalities):
                if pt.size and (pt[:, k].min() < 0 or pt[:, k].max() >= self.count(mod)):
                    raise DataError(f"pair table references a missing {mod!r} instance")

    @property
    def modalities(self) -> list[str]:
        return list(self.features)

    def count(self, modality: str) -> int:
        return self.features[modality].shape[0]

    def digest(self) -> str:
        h = hashlib.sha256()
        for mod in self.modalities:
            h.update(mod.encode())
            for arr in (self.features[mod], self.labels[mod], self.ids[mod]):
                h.update(np.ascontiguousarray(arr).tobytes())
        if self.pair_table is not None:
            h.update(np.ascontiguousarray(self.pair_table).tobytes())
        return h.hexdigest()

    @classmethod
    def from_fragments(cls, fragments: Sequence[FeatureFragment], num_classes: int, pair_table=None, split="train"):
        return cls(
            features={f.modality: f.features for f in fragments},
            labels={f.modality: f.labels for f in fragments},
            ids={f.modality: f.ids for f in fragments},
            num_classes=num_classes,
            pair_table=pair_table,
            split=split,
        )

    def fragment(self, modality: str) -> FeatureFragment:
        return FeatureFragment(modality, self.ids[modality], self.labels[modality], self.features[modality], self.num_classes)

    def subset(self, positions: Mapping[str, np.ndarray], pair_table=None, split=None) -> "Dataset":
        return Dataset(
            features={m: self.features[m][positions[m]] for m in self.modalities},
            labels={m: self.labels[m][positions[m]] for m in self.modalities},
            ids={m: self.ids[m][positions[m]] for m in self.modalities},
            num_classes=self.num_classes,
            pair_table=pair_table,
            split=split or self.split,
        )


# ---------------------------------------------------------------------------
# feature files


def _atomic_write_text(path, text: str) -> None:
    path = Path(path)
    tmp = path.with_name(f"{path.name}.tmp{os.getpid()}")
    tmp.write_text(text)
    os.replace(tmp, path)


def format_features(frag: FeatureFragment) -> str:
    n, d = frag.features.shape
    head = f"{HEADER_TAG} {FORMAT_VERSION} modality={frag.modality} count={n} dim={d}"
    if frag.num_classes is not None:
        head += f" classes={frag.num_classes}"
    lines = [head]
    for i in range(n):
        vals = "\t".join(repr(float(v)) for v in frag.features[i])
        lines.append(f"{int(frag.ids[i])}\t{int(frag.labels[i])}\t{vals}")
    return "\n".join(lines) + "\n"


def write_features(path, frag: FeatureFragment) -> None:
    _atomic_write_text(path, format_features(frag))


def _parse_header(line: str, path) -> dict:
    parts = line.split()
    if len(parts) < 2 or parts[0] != HEADER_TAG or parts[1] != FORMAT_VERSION:
        raise DataError(f"{path}:1: malformed header")
    fields_ = {}
    for token in parts[2:]:
        key, sep, val = token.partition("=")
        if not sep:
            raise DataError(f"{path}:1: malformed header field {token!r}")
        fields_[key] = val
    try:
        out = {
            "modality": fields_["modality"],
            "count": int(fields_["count"]),
            "dim": int(fields_["dim"]),
            "classes": int(fields_["classes"]) if "classes" in fields_ else None,
        }
    except (KeyError, ValueError) as exc:
        raise DataError(f"{path}:1: malformed header ({exc})") from None
    if out["count"] < 0 or out["dim"] < 1:
        raise DataError(f"{path}:1: count must be >= 0 and dim >= 1")
    return out


def load_features(path) -> FeatureFragment:
    """Read and validate one feature file; errors carry the 1-based line number."""
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise DataError(f"{path}:1: missing header")
    hdr = _parse_header(lines[0], path)
    d, classes = hdr["dim"], hdr["classes"]
    ids, labels, rows = [], [], []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        cells = line.split("\t")
        if len(cells) != d + 2:
            raise DataError(f"{path}:{lineno}: expected {d} feature values, got {len(cells) - 2}")
        try:
            ident, lab = int(cells[0]), int(cells[1])
            vals = [float(c) for c in cells[2:]]
        except ValueError as exc:
            raise DataError(f"{path}:{lineno}: {exc}") from None
        if not all(np.isfinite(vals)):
            raise DataError(f"{path}:{lineno}: non-finite feature value")
        if lab != UNLABELED and (lab < 0 or (classes is not None and lab >= classes)):
            raise DataError(f"{path}:{lineno}: label {lab} out of range")
        ids.append(ident)
        labels.append(lab)
        rows.append(vals)
    if len(rows) != hdr["count"]:
        raise DataError(f"{path}: header declares {hdr['count']} rows, found {len(rows)}")
    ids_arr = np.array(ids, dtype=np.int64)
    if np.unique(ids_arr).size != ids_arr.size:
        raise DataError(f"{path}: duplicate instance ids")
    feats = np.array(rows, dtype=np.float64).reshape(len(rows), d)
    return FeatureFragment(hdr["modality"], ids_arr, np.array(labels, dtype=np.int64), feats, classes)


def write_pair_table(path, modalities: Sequence[str], dataset: Dataset) -> None:
    lines = ["#mhtn-pairs " + " ".join(modalities)]
    for row in dataset.pair_table:
        lines.append("\t".join(str(int(dataset.ids[m][p])) for m, p in zip(modalities, row)))
    _atomic_write_text(path, "\n".join(lines) + "\n")


def load_pair_table(path, dataset: Dataset) -> np.ndarray:
    """Read a pair table of instance ids and map it to positions in ``dataset``."""
    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].startswith("#mhtn-pairs"):
        raise DataError(f"{path}:1: malformed pair table header")
    mods = lines[0].split()[1:]
    if mods != dataset.modalities:
        raise DataError(f"{path}:1: pair table modalities {mods} != dataset {dataset.modalities}")
    pos = {m: {int(i): k for k, i in enumerate(dataset.ids[m])} for m in mods}
    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        cells = line.split("\t")
        if len(cells) != len(mods):
            raise DataError(f"{path}:{lineno}: incomplete group")
        try:
            rows.append([pos[m][int(c)] for m, c in zip(mods, cells)])
        except (KeyError, ValueError):
            raise DataError(f"{path}:{lineno}: unknown instance id") from None
    return np.array(rows, dtype=np.int64).reshape(len(rows), len(mods))


# ---------------------------------------------------------------------------
# manifest


@dataclass
class Manifest:
    """Pointer file tying feature files into source / target datasets."""

    root: Path
    modalities: list[str]
    num_classes: int
    splits: dict[str, dict[str, str]]
    source: Optional[dict] = None
    pair_tables: dict[str, str] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    @classmethod
    def load(cls, path) -> "Manifest":
        path = Path(path)
        try:
            raw = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"cannot read manifest {path}: {exc}") from None
        if raw.get("format") != "mhtn-manifest":
            raise DataError(f"{path}: not an mhtn manifest")
        try:
            return cls(
                root=path.parent,
                modalities=list(raw["modalities"]),
                num_classes=int(raw["num_classes"]),
                splits=raw["splits"],
                source=raw.get("source"),
                pair_tables=raw.get("pair_tables") or {},
                meta=raw.get("meta") or {},
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"{path}: incomplete manifest ({exc})") from None

    def save(self, path) -> None:
        body = {
            "format": "mhtn-manifest",
            "version": 1,
            "modalities": self.modalities,
            "num_classes": self.num_classes,
            "splits": self.splits,
            "source": self.source,
            "pair_tables": self.pair_tables,
            "meta": self.meta,
        }
        _atomic_write_text(path, json.dumps(body, indent=2, sort_keys=True) + "\n")

    def target(self, split: str = "train") -> Dataset:
        if split not in self.splits:
            raise DataError(f"manifest has no {split!r} split")
        frags = []
        for mod in self.modalities:
            if mod not in self.splits[split]:
                raise DataError(f"manifest split {split!r} has no file for modality {mod!r}")
            frag = load_features(self.root / self.splits[split][mod])
            if frag.modality != mod:
                raise DataError(f"{self.splits[split][mod]}: holds modality {frag.modality!r}, expected {mod!r}")
            frags.append(frag)
        ds = Dataset.from_fragments(frags, self.num_classes, split=split)
        if split in self.pair_tables:
            ds.pair_table = load_pair_table(self.root / self.pair_tables[split], ds)
        return ds

    def source_dataset(self) -> Optional[Dataset]:
        if not self.source:
            return None
        frag = load_features(self.root / self.source["file"])
        return Dataset.from_fragments([frag], int(self.source["num_classes"]), split="train")


# ---------------------------------------------------------------------------
# synthetic benchmark


@dataclass
class SyntheticSpec:
    """Latent class prototypes observed through per-modality linear distortions."""

    num_classes: int = 4
    per_class: int = 50
    modalities: tuple[str, ...] = ("image", "text", "audio")
    dims: dict[str, int] = field(default_factory=lambda: {"image": 64, "text": 48, "audio": 32})
    latent_dim: int = 16
    prototype_scale: float = 1.0
    latent_noise: float = 1.0
    noise: float = 0.5
    source_classes: int = 6
    source_per_class: int = 50
    paired: bool = False
    identity_distortion: bool = False
    seed: int = 0

    def __post_init__(self):
        self.modalities = tuple(self.modalities)
        self.dims = {str(k): int(v) for k, v in self.dims.items()}
        self.validate()

    def validate(self) -> None:
        for name in ("num_classes", "per_class", "latent_dim", "source_classes", "source_per_class"):
            if int(getattr(self, name)) < 1:
                raise ConfigurationError(f"{name} must be >= 1")
        for name in ("prototype_scale", "latent_noise", "noise"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be >= 0")
        if len(self.modalities) < 2:
            raise ConfigurationError("need at least two modalities")
        missing = [m for m in self.modalities if m not in self.dims]
        if missing:
            raise ConfigurationError(f"no feature dimension for {missing}")
        if any(d < 1 for d in self.dims.values()):
            raise ConfigurationError("feature dimensions must be >= 1")
        if self.identity_distortion and any(self.dims[m] != self.latent_dim for m in self.modalities):
            raise ConfigurationError("identity distortion needs every dimension equal to latent_dim")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["modalities"] = list(self.modalities)
        return d


def orthonormal_map(rng: np.random.Generator, out_dim: int, in_dim: int) -> np.ndarray:
    """``out_dim x in_dim`` matrix with orthonormal columns (or rows if out_dim < in_dim)."""
    if out_dim >= in_dim:
        q, r = np.linalg.qr(rng.normal(size=(out_dim, in_dim)))
        return q * np.sign(np.diag(r))
    q, r = np.linalg.qr(rng.normal(size=(in_dim, out_dim)))
    return (q * np.sign(np.diag(r))).T


def generate_synthetic(spec: SyntheticSpec) -> tuple[Dataset, Dataset]:
    """Build ``(source, target)`` datasets; a pure function of ``spec``.

    Target classes and source classes use disjoint prototypes in one latent
    space. The source domain is observed through the target image
    distortion, so images are the shared bridge between the domains.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    L = spec.latent_dim
    protos = rng.normal(scale=spec.prototype_scale, size=(spec.num_classes, L))
    src_protos = rng.normal(scale=spec.prototype_scale, size=(spec.source_classes, L))
    maps = {
        m: np.eye(L) if spec.identity_distortion else orthonormal_map(rng, spec.dims[m], L)
        for m in spec.modalities
    }

    labels = np.repeat(np.arange(spec.num_classes), spec.per_class)
    n = labels.size
    shared = protos[labels] + spec.latent_noise * rng.normal(size=(n, L)) if spec.paired else None
    features, lab, ids, order = {}, {}, {}, {}
    for mod in spec.modalities:
        latent = shared if spec.paired else protos[labels] + spec.latent_noise * rng.normal(size=(n, L))
        x = latent @ maps[mod].T + spec.noise * rng.normal(size=(n, spec.dims[mod]))
        perm = rng.permutation(n)
        order[mod] = np.argsort(perm)  # original row -> new position
        features[mod], lab[mod] = x[perm], labels[perm]
        ids[mod] = np.arange(n, dtype=np.int64)
    pair_table = None
    if spec.paired:
        pair_table = np.stack([order[m] for m in spec.modalities], axis=1)
    target = Dataset(features, lab, ids, spec.num_classes, pair_table)

    img = spec.modalities[0]
    src_labels = np.repeat(np.arange(spec.source_classes), spec.source_per_class)
    m = src_labels.size
    latent = src_protos[src_labels] + spec.latent_noise * rng.normal(size=(m, L))
    xs = latent @ maps[img].T + spec.noise * rng.normal(size=(m, spec.dims[img]))
    perm = rng.permutation(m)
    source = Dataset({img: xs[perm]}, {img: src_labels[perm]}, {img: np.arange(m, dtype=np.int64)}, spec.source_classes)
    return source, target


# ---------------------------------------------------------------------------
# splitting


def _stratum_counts(n: int, fractions: Sequence[float], what: str) -> list[int]:
    test = int(round(fractions[1] * n))
    val = int(round(fractions[2] * n))
    counts = [n - test - val, test, val]
    for frac, c in zip(fractions, counts):
        if frac > 0 and c < 1:
            raise DataError(f"{what} has {n} instances, too few for every split of {tuple(fractions)}")
    if counts[0] < 0:
        raise DataError(f"{what}: rounding left no training instances")
    return counts


def split(dataset: Dataset, fractions=(0.7, 0.2, 0.1), seed: int = 0) -> tuple[Dataset, Dataset, Dataset]:
    """Stratified ``(train, test, validation)`` split.

    Strata are (modality, class), or (class) of the image member when the
    dataset carries a pair table, so co-existence groups stay together.
    """
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigurationError(f"split fractions must be three non-negative numbers summing to 1, got {fractions}")
    rng = np.random.default_rng(seed)
    names = ("train", "test", "validation")
    mods = dataset.modalities

    if dataset.pair_table is not None:
        pt = dataset.pair_table
        group_labels = dataset.labels[mods[0]][pt[:, 0]]
        chosen = [[], [], []]
        for c in np.unique(group_labels):
            members = np.flatnonzero(group_labels == c)
            members = members[rng.permutation(members.size)]
            counts = _stratum_counts(members.size, fractions, f"class {c}")
            start = 0
            for k, cnt in enumerate(counts):
                chosen[k].extend(members[start : start + cnt])
                start += cnt
        out = []
        for k in range(3):
            rows = pt[np.sort(np.array(chosen[k], dtype=np.int64))]
            positions = {m: rows[:, j] for j, m in enumerate(mods)}
            new_pt = np.tile(np.arange(rows.shape[0])[:, None], (1, len(mods)))
            out.append(dataset.subset(positions, pair_table=new_pt, split=names[k]))
        return tuple(out)

    chosen = [{m: [] for m in mods} for _ in range(3)]
    for mod in mods:
        lab = dataset.labels[mod]
        for c in np.unique(lab):
            members = np.flatnonzero(lab == c)
            members = members[rng.permutation(members.size)]
            counts = _stratum_counts(members.size, fractions, f"class {c} of modality {mod!r}")
            start = 0
            for k, cnt in enumerate(counts):
                chosen[k][mod].extend(members[start : start + cnt])
                start += cnt
    return tuple(
        dataset.subset({m: np.sort(np.array(chosen[k][m], dtype=np.int64)) for m in mods}, split=names[k])
        for k in range(3)
    )
