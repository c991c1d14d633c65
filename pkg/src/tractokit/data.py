"""Datasets: the STRM container, subject-wise splitting and the synthetic tract generator."""

from __future__ import annotations

import hashlib
import json
import math
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from tractokit.errors import FormatError, InvalidInputError

N_CLASSES = 43
OTHER_LABEL = 42

MAGIC = b"STRM"
VERSION = 1
_HEADER = struct.Struct("<4sHHIQQ")


@dataclass(frozen=True)
class LabeledStreamline:
    streamline: np.ndarray
    label: int
    subject_id: str


@dataclass
class Dataset:
    streamlines: list  # float32 (n_i, 3) arrays, RAS mm
    labels: np.ndarray
    subject_of: np.ndarray  # subject id per streamline
    subjects: list
    label_names: list = field(default_factory=lambda: default_label_names())
    provenance: str = ""

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.subject_of = np.asarray(self.subject_of, dtype="U")
        self.subjects = [str(s) for s in self.subjects]
        if len(self.labels) != len(self.streamlines) or len(self.subject_of) != len(self.streamlines):
            raise InvalidInputError("streamlines, labels and subject_of must have equal length")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= N_CLASSES):
            raise InvalidInputError(f"labels must lie in [0, {N_CLASSES - 1}]")
        if any(not s for s in self.subjects):
            raise InvalidInputError("subject ids must be non-empty")
        if len(set(self.subjects)) != len(self.subjects):
            raise InvalidInputError("subject ids must be distinct")
        unknown = set(self.subject_of.tolist()) - set(self.subjects)
        if unknown:
            raise InvalidInputError(f"streamlines reference unknown subjects: {sorted(unknown)[:5]}")
        if len(self.label_names) != N_CLASSES:
            raise InvalidInputError(f"label_names must have {N_CLASSES} entries")

    def __len__(self):
        return len(self.streamlines)

    def __getitem__(self, i) -> LabeledStreamline:
        return LabeledStreamline(self.streamlines[i], int(self.labels[i]), str(self.subject_of[i]))

    def equals(self, other: "Dataset") -> bool:
        return (
            len(self) == len(other)
            and all(a.shape == b.shape and np.array_equal(a, b) for a, b in zip(self.streamlines, other.streamlines))
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.subject_of, other.subject_of)
            and self.subjects == other.subjects
            and list(self.label_names) == list(other.label_names)
            and self.provenance == other.provenance
        )


def default_label_names(n_classes: int = 0) -> list:
    names = [f"tract_{i:02d}" for i in range(N_CLASSES)]
    names[OTHER_LABEL] = "other"
    return names


# ---------------------------------------------------------------------------
# STRM container


def _encode(ds: Dataset) -> bytes:
    subj_index = {s: i for i, s in enumerate(ds.subjects)}
    counts = np.array([len(s) for s in ds.streamlines], dtype="<u4")
    parts = [_HEADER.pack(MAGIC, VERSION, 0, len(ds.subjects), len(ds), int(counts.sum()))]
    for s in ds.subjects:
        raw = s.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise InvalidInputError("subject id too long")
        parts.append(struct.pack("<H", len(raw)) + raw)
    parts.append(counts.tobytes())
    parts.append(ds.labels.astype("u1").tobytes())
    parts.append(np.array([subj_index[s] for s in ds.subject_of], dtype="<u4").tobytes())
    if len(ds):
        parts.append(np.concatenate([np.asarray(s, dtype="<f4") for s in ds.streamlines]).tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def _take(buf: bytes, offset: int, n: int, what: str) -> bytes:
    if offset + n > len(buf):
        raise FormatError(f"truncated {what}: need {n} bytes, {len(buf) - offset} available", offset)
    return buf[offset:offset + n]


def _decode(buf: bytes) -> tuple:
    head = _take(buf, 0, _HEADER.size, "header")
    magic, version, _flags, n_subj, n_sl, n_pts = _HEADER.unpack(head)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    off = _HEADER.size
    subjects = []
    for _ in range(n_subj):
        (ln,) = struct.unpack("<H", _take(buf, off, 2, "subject length"))
        off += 2
        subjects.append(_take(buf, off, ln, "subject id").decode("utf-8"))
        off += ln
    counts = np.frombuffer(_take(buf, off, 4 * n_sl, "point counts"), dtype="<u4")
    off += 4 * n_sl
    if int(counts.sum()) != n_pts:
        raise FormatError("point counts do not sum to header total", off - 4 * n_sl)
    labels = np.frombuffer(_take(buf, off, n_sl, "labels"), dtype="u1").astype(np.int64)
    off += n_sl
    subj_idx = np.frombuffer(_take(buf, off, 4 * n_sl, "subject index"), dtype="<u4")
    if n_sl and subj_idx.max() >= max(n_subj, 1):
        raise FormatError("subject index out of range", off)
    off += 4 * n_sl
    coords = np.frombuffer(_take(buf, off, 12 * n_pts, "coordinates"), dtype="<f4").reshape(-1, 3)
    off += 12 * n_pts
    (crc,) = struct.unpack("<I", _take(buf, off, 4, "checksum"))
    if crc != zlib.crc32(buf[:off]):
        raise FormatError("checksum mismatch", off)
    if off + 4 != len(buf):
        raise FormatError("trailing bytes after checksum", off + 4)
    bounds = np.concatenate([[0], np.cumsum(counts.astype(np.int64))])
    streamlines = [coords[bounds[i]:bounds[i + 1]].astype(np.float32) for i in range(n_sl)]
    subject_of = np.array([subjects[i] for i in subj_idx], dtype="U") if n_sl else np.array([], dtype="U")
    return streamlines, labels, subject_of, subjects


def manifest_path(path) -> Path:
    path = Path(path)
    return path.with_suffix(".json")


def save_dataset(ds: Dataset, path) -> None:
    """Write ``path`` (STRM binary) and the JSON manifest beside it."""
    path = Path(path)
    blob = _encode(ds)
    path.write_bytes(blob)
    manifest = {
        "format": "STRM",
        "version": VERSION,
        "n_streamlines": len(ds),
        "n_subjects": len(ds.subjects),
        "label_names": list(ds.label_names),
        "provenance": ds.provenance,
        "sha256": hashlib.sha256(blob).hexdigest(),
    }
    manifest_path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_dataset(path) -> Dataset:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc
    streamlines, labels, subject_of, subjects = _decode(buf)
    label_names, provenance = default_label_names(), ""
    mpath = manifest_path(path)
    if mpath.exists():
        try:
            manifest = json.loads(mpath.read_text())
        except json.JSONDecodeError as exc:
            raise FormatError(f"bad manifest {mpath}: {exc}") from exc
        label_names = manifest.get("label_names", label_names)
        provenance = manifest.get("provenance", provenance)
    return Dataset(streamlines, labels, subject_of, subjects, label_names, provenance)


# ---------------------------------------------------------------------------
# splitting


@dataclass(frozen=True)
class SplitSpec:
    train: tuple
    val: tuple
    test: tuple

    def __post_init__(self):
        a, b, c = set(self.train), set(self.val), set(self.test)
        if a & b or a & c or b & c:
            raise InvalidInputError("split subject sets must be pairwise disjoint")

    def to_json(self) -> str:
        return json.dumps({"train": list(self.train), "val": list(self.val), "test": list(self.test)}, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "SplitSpec":
        d = json.loads(text)
        return cls(tuple(d["train"]), tuple(d["val"]), tuple(d["test"]))


def largest_remainder(n: int, ratios) -> list:
    total = float(sum(ratios))
    quotas = [n * r / total for r in ratios]
    counts = [math.floor(q) for q in quotas]
    left = n - sum(counts)
    # ties in remainder go to the earlier split
    order = sorted(range(len(ratios)), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in order[:left]:
        counts[i] += 1
    return counts


def split_subjectwise(ds: Dataset, ratios=(0.7, 0.1, 0.2), seed=0) -> SplitSpec:
    """Shuffle subjects and partition them by ``ratios`` with largest-remainder rounding."""
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r < 0 for r in ratios) or not math.isclose(sum(ratios), 1.0, abs_tol=1e-6):
        raise InvalidInputError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    nonzero = sum(r > 0 for r in ratios)
    n = len(ds.subjects)
    if n < nonzero:
        raise InvalidInputError(f"{n} subjects cannot fill {nonzero} non-empty splits")
    counts = largest_remainder(n, ratios)
    for i, r in enumerate(ratios):
        # every requested split gets at least one subject, taken from the largest
        if r > 0 and counts[i] == 0:
            donor = max(range(3), key=lambda j: counts[j])
            counts[donor] -= 1
            counts[i] += 1
    rng = np.random.default_rng(seed)
    shuffled = [ds.subjects[i] for i in rng.permutation(n)]
    a, b = counts[0], counts[0] + counts[1]
    return SplitSpec(tuple(shuffled[:a]), tuple(shuffled[a:b]), tuple(shuffled[b:]))


# ---------------------------------------------------------------------------
# synthetic tracts


@dataclass
class SyntheticConfig:
    n_classes: int = 8
    n_subjects: int = 20
    streamlines_per_subject: int = 500
    jitter: float = 2.5  # control-point noise, mm
    bundle_radius: float = 2.0  # per-streamline rigid offset, mm
    mirrored_pairs: int = 2
    linear_classes: int = 2
    other_fraction: float = 0.1
    min_points: int = 15
    max_points: int = 60
    subject_rotation_deg: float = 3.0
    subject_translation: float = 2.0
    template_separation: float = 12.0  # minimum MDF between class templates, mm
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.n_classes <= N_CLASSES - 1:
            raise InvalidInputError(f"n_classes must be in [1, {N_CLASSES - 1}]")
        if self.jitter < 0 or self.bundle_radius < 0:
            raise InvalidInputError("jitter and bundle_radius must be non-negative")
        if not 0 <= self.other_fraction < 1:
            raise InvalidInputError("other_fraction must be in [0, 1)")
        if 2 * self.mirrored_pairs + self.linear_classes > self.n_classes:
            raise InvalidInputError("mirrored pairs and linear classes exceed n_classes")
        if self.n_subjects < 1 or self.streamlines_per_subject < 1:
            raise InvalidInputError("need at least one subject and one streamline per subject")
        if not 2 <= self.min_points <= self.max_points:
            raise InvalidInputError("point range must satisfy 2 <= min_points <= max_points")


# brain-sized box in RAS mm
_BOX_LO = np.array([-65.0, -90.0, -45.0])
_BOX_HI = np.array([65.0, 65.0, 70.0])
_T_DENSE = np.linspace(0.0, 1.0, 40)


def bezier(ctrl: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Cubic Bézier through 4 control points evaluated at ``t``."""
    t = np.asarray(t)[:, None]
    u = 1.0 - t
    return u**3 * ctrl[0] + 3 * u**2 * t * ctrl[1] + 3 * u * t**2 * ctrl[2] + t**3 * ctrl[3]


def _random_curve(rng, hemisphere=None, linear=False) -> np.ndarray:
    lo, hi = _BOX_LO.copy(), _BOX_HI.copy()
    if hemisphere == "left":
        lo[0], hi[0] = -62.0, -12.0
    elif hemisphere == "right":
        lo[0], hi[0] = 12.0, 62.0
    if linear:
        # projection-like: mostly superior-inferior, nearly straight
        top = rng.uniform([lo[0], -40, 35], [hi[0], 30, 65])
        bottom = top + np.array([rng.normal(0, 6), rng.normal(0, 10), -rng.uniform(55, 85)])
        return np.stack([top, top + (bottom - top) / 3, top + 2 * (bottom - top) / 3, bottom])
    while True:
        p0 = rng.uniform(lo, hi)
        p3 = rng.uniform(lo, hi)
        length = np.linalg.norm(p3 - p0)
        if 40.0 <= length <= 110.0:
            break
    bend = rng.normal(0, 0.35 * length, size=(2, 3))
    p1 = p0 + (p3 - p0) / 3 + bend[0]
    p2 = p0 + 2 * (p3 - p0) / 3 + bend[1]
    return np.stack([p0, p1, p2, p3])


def _template_mdf(a, b) -> float:
    from tractokit.streamline import mdf_distance

    return mdf_distance(bezier(a, _T_DENSE), bezier(b, _T_DENSE))


def class_templates(cfg: SyntheticConfig, rng) -> list:
    """Control points per class: mirrored pairs first, then linear classes, then free curves."""
    templates: list = []

    def far_enough(cands):
        return all(_template_mdf(c, t) >= cfg.template_separation for c in cands for t in templates)

    for _ in range(cfg.mirrored_pairs):
        while True:
            left = _random_curve(rng, hemisphere="left")
            right = left * np.array([-1.0, 1.0, 1.0])
            if far_enough([left, right]):
                templates += [left, right]
                break
    for _ in range(cfg.linear_classes):
        while True:
            c = _random_curve(rng, linear=True)
            if far_enough([c]):
                templates.append(c)
                break
    while len(templates) < cfg.n_classes:
        c = _random_curve(rng)
        if far_enough([c]):
            templates.append(c)
    return templates


def synthetic_label_names(cfg: SyntheticConfig) -> list:
    names = default_label_names()
    k = 0
    for p in range(cfg.mirrored_pairs):
        names[k], names[k + 1] = f"assoc{p:02d}_left", f"assoc{p:02d}_right"
        k += 2
    for p in range(cfg.linear_classes):
        names[k] = f"proj{p:02d}"
        k += 1
    while k < cfg.n_classes:
        names[k] = f"tract{k:02d}"
        k += 1
    return names


def _rotation(rng, max_deg) -> np.ndarray:
    from scipy.spatial.transform import Rotation

    if max_deg <= 0:
        return np.eye(3)
    angles = rng.normal(0.0, max_deg, size=3)
    return Rotation.from_euler("xyz", angles, degrees=True).as_matrix()


def _sample_streamline(ctrl, rng, cfg: SyntheticConfig) -> np.ndarray:
    noisy = ctrl + rng.normal(0.0, cfg.jitter, size=ctrl.shape) if cfg.jitter > 0 else ctrl
    if cfg.bundle_radius > 0:
        noisy = noisy + rng.normal(0.0, cfg.bundle_radius, size=3)
    n = int(rng.integers(cfg.min_points, cfg.max_points + 1))
    if cfg.jitter > 0:
        t0, t1 = rng.uniform(0.0, 0.06), rng.uniform(0.94, 1.0)
    else:
        t0, t1 = 0.0, 1.0
    pts = bezier(noisy, np.linspace(t0, t1, n))
    if rng.random() < 0.5:
        pts = pts[::-1]
    return pts


def generate_synthetic(cfg: SyntheticConfig) -> Dataset:
    """Deterministic labelled tractograms with per-subject rigid variation."""
    rng = np.random.default_rng(cfg.seed)
    templates = class_templates(cfg, rng)
    center = (_BOX_LO + _BOX_HI) / 2
    streamlines, labels, subject_of, subjects = [], [], [], []
    for s in range(cfg.n_subjects):
        sid = f"sub-{s + 1:03d}"
        subjects.append(sid)
        srng = np.random.default_rng([cfg.seed, s + 1])
        rot = _rotation(srng, cfg.subject_rotation_deg)
        shift = srng.normal(0.0, cfg.subject_translation, size=3) if cfg.subject_translation > 0 else np.zeros(3)
        n_other = int(round(cfg.other_fraction * cfg.streamlines_per_subject))
        n_tract = cfg.streamlines_per_subject - n_other
        lab = np.concatenate([np.arange(n_tract) % cfg.n_classes, np.full(n_other, OTHER_LABEL)])
        lab = lab[srng.permutation(len(lab))]
        for y in lab:
            if y == OTHER_LABEL:
                ctrl = _random_curve(srng)
            else:
                ctrl = (templates[y] - center) @ rot.T + center + shift
            streamlines.append(_sample_streamline(ctrl, srng, cfg).astype(np.float32))
            labels.append(int(y))
            subject_of.append(sid)
    provenance = "synthetic " + json.dumps(asdict(cfg), sort_keys=True)
    return Dataset(streamlines, np.array(labels, dtype=np.int64), np.array(subject_of, dtype="U"),
                   subjects, synthetic_label_names(cfg), provenance)
