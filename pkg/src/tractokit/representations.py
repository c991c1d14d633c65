"""Hierarchical streamline representations.

Four inputs are derived per streamline: the undersampled ``(n_s, 3)`` streamline,
a local or hyperlocal point cloud built from its MDF neighbourhood, a patch set
carved from that cloud with FPS + kNN, and the fiber descriptor image.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from tractokit.errors import FormatError, InvalidInputError
from tractokit.search import (
    StreamlineIndex,
    build_index,
    farthest_point_sampling,
    knn_mdf,
    radius_search_fss,
)
from tractokit.streamline import as_point_cloud, as_streamline, resample, to_point_cloud

VARIANTS = ("hyperlocal", "local")


@dataclass
class RepresentationConfig:
    n_s: int = 15
    m_interp: int = 40
    k_local: int = 20
    k_hyper: int = 5
    radius: float = 6.0
    n_c: int = 220
    p_f: int = 64
    p_local: int = 16
    variant: str = "hyperlocal"
    center_patches: bool = True
    seed: int = 0
    # global context sampling is not implemented; kept so configs can name it
    k_global: int = 0

    def __post_init__(self):
        for name in ("n_s", "m_interp", "k_local", "k_hyper", "n_c", "p_f", "p_local"):
            if getattr(self, name) < 1:
                raise InvalidInputError(f"{name} must be >= 1")
        if self.n_s < 2 or self.m_interp < 2:
            raise InvalidInputError("n_s and m_interp must be >= 2")
        if self.radius <= 0:
            raise InvalidInputError("radius must be positive")
        if self.variant not in VARIANTS:
            raise InvalidInputError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.p_local > self.n_c or self.p_f > self.n_c:
            raise InvalidInputError("p_f and p_local must not exceed n_c")
        if self.k_global:
            raise InvalidInputError("global context sampling (k_global > 0) is not supported")


@dataclass
class PatchSet:
    patches: np.ndarray  # (p_f, p_local, 3)
    centers: np.ndarray  # (p_f, 3)
    members: np.ndarray  # (p_f, p_local) indices into the source cloud


def query_seeds(seed: int, query_id: int) -> tuple[int, int]:
    """Independent (cloud, patch) seeds for one query, stable across runs and workers."""
    cloud_ss, patch_ss = np.random.SeedSequence([int(seed), int(query_id)]).spawn(2)
    return int(cloud_ss.generate_state(1)[0]), int(patch_ss.generate_state(1)[0])


def build_streamline_data(s, n_s: int = 15) -> np.ndarray:
    return resample(s, n_s)


def _members(query_id, index: StreamlineIndex, ids, total: int):
    q = index.streamline(query_id)
    members = [q] + [index.streamline(i) for i in ids]
    # sparse neighbourhoods are padded with the query itself
    members += [q] * (total - len(members))
    return members


def local_member_ids(query_id, index: StreamlineIndex, cfg: RepresentationConfig) -> np.ndarray:
    """Neighbour ids of the local cloud (query excluded), nearest first."""
    if len(index) == 0:
        raise InvalidInputError("cannot build a point cloud from an empty index")
    q = index.streamline(query_id)
    return knn_mdf(index, q, cfg.k_local, exclude_id=query_id).ids


def hyperlocal_member_ids(query_id, index: StreamlineIndex, cfg: RepresentationConfig):
    """(ids, fallback) of the hyperlocal neighbours, drawn from the local candidates."""
    if len(index) == 0:
        raise InvalidInputError("cannot build a point cloud from an empty index")
    q = index.streamline(query_id)
    cand = knn_mdf(index, q, cfg.k_local, exclude_id=query_id)
    hyper = radius_search_fss(index, cand, q, cfg.radius, cfg.k_hyper)
    return hyper.ids, hyper.fallback or len(hyper) < cfg.k_hyper


def build_local_pcd(query_id, index: StreamlineIndex, cfg: RepresentationConfig, seed=None) -> np.ndarray:
    """Merge the query with its ``k_local`` MDF neighbours and sample ``n_c`` points."""
    ids = local_member_ids(query_id, index, cfg)
    members = _members(query_id, index, ids, cfg.k_local + 1)
    return to_point_cloud(members, cfg.n_c, seed=query_seeds(cfg.seed, query_id)[0] if seed is None else seed)


def build_hyperlocal_pcd(query_id, index: StreamlineIndex, cfg: RepresentationConfig, seed=None) -> np.ndarray:
    """Merge the query with its ``k_hyper`` radius-confirmed neighbours and sample ``n_c`` points."""
    ids, _ = hyperlocal_member_ids(query_id, index, cfg)
    members = _members(query_id, index, ids, cfg.k_hyper + 1)
    return to_point_cloud(members, cfg.n_c, seed=query_seeds(cfg.seed, query_id)[0] if seed is None else seed)


def build_patches(pcd, cfg: RepresentationConfig, seed=None) -> PatchSet:
    """FPS centers, kNN groups of ``p_local`` points, optionally centred on their FPS point."""
    pts = as_point_cloud(pcd)
    if pts.shape[0] < cfg.p_f:
        raise InvalidInputError(f"cloud has {pts.shape[0]} points, fewer than p_f={cfg.p_f}")
    if pts.shape[0] < cfg.p_local:
        raise InvalidInputError(f"cloud has {pts.shape[0]} points, fewer than p_local={cfg.p_local}")
    centers_idx = farthest_point_sampling(pts, cfg.p_f, seed=seed)
    centers = pts[centers_idx]
    d = np.linalg.norm(pts[None, :, :] - centers[:, None, :], axis=2)
    members = np.argsort(d, axis=1, kind="stable")[:, : cfg.p_local]
    patches = pts[members]
    if cfg.center_patches:
        patches = patches - centers[:, None, :]
    return PatchSet(patches, centers, members)


def fiber_descriptor(s, n_s: int = 15) -> np.ndarray:
    """``(2 n_s, 2 n_s, 3)`` image alternating rows ``[s | rev s]`` and ``[rev s | s]``."""
    s = as_streamline(s)
    if s.shape[0] != n_s:
        raise InvalidInputError(f"fiber descriptor needs exactly {n_s} points, got {s.shape[0]}")
    return fiber_descriptors(s[None])[0]


def fiber_descriptors(batch: np.ndarray) -> np.ndarray:
    """Vectorised descriptor for a ``(B, n_s, 3)`` batch."""
    batch = np.asarray(batch)
    rev = batch[:, ::-1]
    even = np.concatenate([batch, rev], axis=1)
    odd = np.concatenate([rev, batch], axis=1)
    n = batch.shape[1]
    out = np.empty((batch.shape[0], 2 * n, 2 * n, 3), dtype=batch.dtype)
    out[:, 0::2] = even[:, None]
    out[:, 1::2] = odd[:, None]
    return out


@dataclass
class RepresentationSet:
    """Precomputed representations for a group of streamlines, aligned row by row."""

    ids: np.ndarray
    labels: np.ndarray
    subjects: np.ndarray
    streamlines: np.ndarray  # (N, n_s, 3)
    interpolated: np.ndarray  # (N, m_interp, 3)
    clouds: np.ndarray  # (N, n_c, 3)
    patches: np.ndarray  # (N, p_f, p_local, 3)
    fallback: np.ndarray  # (N,) neighbourhood had to be padded
    config: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.ids)

    def subset(self, mask) -> "RepresentationSet":
        mask = np.asarray(mask)
        return RepresentationSet(
            self.ids[mask], self.labels[mask], self.subjects[mask], self.streamlines[mask],
            self.interpolated[mask], self.clouds[mask], self.patches[mask], self.fallback[mask],
            dict(self.config),
        )

    def for_subjects(self, subjects) -> "RepresentationSet":
        return self.subset(np.isin(self.subjects, list(subjects)))

    def descriptors(self, rows=slice(None)) -> np.ndarray:
        return fiber_descriptors(self.streamlines[rows])

    def save(self, path):
        import json

        with open(path, "wb") as fh:
            np.savez(
                fh, ids=self.ids, labels=self.labels, subjects=self.subjects.astype("U"),
                streamlines=self.streamlines, interpolated=self.interpolated, clouds=self.clouds,
                patches=self.patches, fallback=self.fallback, config=np.array(json.dumps(self.config)),
            )

    @classmethod
    def load(cls, path) -> "RepresentationSet":
        import json
        import zipfile

        try:
            with np.load(path, allow_pickle=False) as z:
                return cls(
                    z["ids"], z["labels"], z["subjects"], z["streamlines"], z["interpolated"],
                    z["clouds"], z["patches"], z["fallback"], json.loads(str(z["config"])),
                )
        except (zipfile.BadZipFile, KeyError, ValueError, EOFError) as exc:
            raise FormatError(f"cannot read representation file {path}: {exc}") from exc


def _subject_job(args):
    ids, raw, cfg = args
    interp = np.stack([resample(s, cfg.m_interp) for s in raw]) if raw else np.empty((0, cfg.m_interp, 3))
    short = np.stack([resample(s, cfg.n_s) for s in raw]) if raw else np.empty((0, cfg.n_s, 3))
    index = build_index(interp, cell_size=cfg.radius, ids=ids)
    clouds = np.empty((len(ids), cfg.n_c, 3))
    patches = np.empty((len(ids), cfg.p_f, cfg.p_local, 3))
    fallback = np.zeros(len(ids), dtype=bool)
    for row, qid in enumerate(ids):
        cloud_seed, patch_seed = query_seeds(cfg.seed, qid)
        if cfg.variant == "hyperlocal":
            nb, fb = hyperlocal_member_ids(qid, index, cfg)
            members = _members(qid, index, nb, cfg.k_hyper + 1)
        else:
            nb = local_member_ids(qid, index, cfg)
            fb = len(nb) < cfg.k_local
            members = _members(qid, index, nb, cfg.k_local + 1)
        clouds[row] = to_point_cloud(members, cfg.n_c, seed=cloud_seed)
        patches[row] = build_patches(clouds[row], cfg, seed=patch_seed).patches
        fallback[row] = fb
    return short, interp, clouds, patches, fallback


def build_representations(dataset, cfg: RepresentationConfig, workers: int = 1) -> RepresentationSet:
    """Representations for every streamline of ``dataset``.

    Neighbourhoods are searched within each subject's own tractogram. Output is
    identical for any ``workers`` value because every query carries its own seed.
    """
    subj_of = np.asarray(dataset.subject_of)
    jobs = []
    order = []
    for subj in dataset.subjects:
        ids = np.flatnonzero(subj_of == subj)
        if len(ids) == 0:
            continue
        jobs.append((ids, [dataset.streamlines[i] for i in ids], cfg))
        order.append(ids)
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_subject_job, jobs))
    else:
        results = [_subject_job(j) for j in jobs]
    n = len(dataset)
    short = np.zeros((n, cfg.n_s, 3), np.float32)
    interp = np.zeros((n, cfg.m_interp, 3), np.float32)
    clouds = np.zeros((n, cfg.n_c, 3), np.float32)
    patches = np.zeros((n, cfg.p_f, cfg.p_local, 3), np.float32)
    fallback = np.zeros(n, bool)
    for ids, (s, i, c, p, f) in zip(order, results):
        short[ids], interp[ids], clouds[ids], patches[ids], fallback[ids] = s, i, c, p, f
    return RepresentationSet(
        np.arange(n, dtype=np.int64), np.asarray(dataset.labels, dtype=np.int64), subj_of.astype("U"),
        short, interp, clouds, patches, fallback, asdict(cfg),
    )
