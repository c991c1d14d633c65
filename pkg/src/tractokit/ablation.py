"""Embedding-subset x representation ablation grid and the single-encoder panel.

The grid is the cross product of embedding subsets and (variant, n_c) columns.
Each cell trains the cluster encoder and classifier on top of the frozen
pretrained encoders and is scored on the test subjects. The streamline encoder
does not depend on the point-cloud column and is pretrained once; the patch
dVAE is pretrained once on the reference column and reused by every cell.
"""

from __future__ import annotations

import csv
import io
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from tractokit.config import PipelineConfig
from tractokit.encoders import ENCODERS
from tractokit.representations import RepresentationSet, build_representations
from tractokit.training import evaluate, pretrain_patch_dvae, pretrain_streamline_encoder, train_tractoembed

log = logging.getLogger(__name__)

PANEL_ROWS = (("streamline", "CNN"), ("cluster", "PointNet"), ("patch", "dVAE"))
PANEL_DATA = ("streamline", "cluster", "patch")
# which data forms each encoder can consume
ADMISSIBLE = {"streamline": ("streamline",), "cluster": ("streamline", "cluster"), "patch": ("patch",)}


def subset_name(subset) -> str:
    """Row label: cluster first, then patch, then streamline (the published table's ordering)."""
    order = ("cluster", "patch", "streamline")
    return " + ".join(e for e in order if e in subset)


def column_name(variant: str, n_c: int, k: int) -> str:
    return f"{variant}_k{k}_nc{n_c}"


@dataclass
class Cell:
    subset: tuple
    variant: str
    n_c: int
    accuracy: float = float("nan")
    macro_f1: float = float("nan")
    seconds: float = 0.0
    error: str = ""

    @property
    def ok(self) -> bool:
        return not self.error


@dataclass
class AblationReport:
    subsets: tuple
    columns: tuple  # (variant, n_c, k)
    cells: list = field(default_factory=list)
    panel: dict = field(default_factory=dict)  # (encoder, data) -> Cell

    def cell(self, subset, variant, n_c) -> Cell:
        for c in self.cells:
            if set(c.subset) == set(subset) and (c.variant, c.n_c) == (variant, n_c):
                return c
        raise KeyError((subset, variant, n_c))

    @property
    def errors(self) -> list:
        cells = self.cells + list(self.panel.values())
        return [c for c in cells if not c.ok]

    def table6_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["embeddings", "metric"] + [column_name(v, n, k) for v, n, k in self.columns])
        for subset in self.subsets:
            for metric, attr in (("Acc", "accuracy"), ("F1", "macro_f1")):
                row = [subset_name(subset), metric]
                for v, n, _ in self.columns:
                    c = self.cell(subset, v, n)
                    row.append(f"{getattr(c, attr):.3f}" if c.ok else "error")
                w.writerow(row)
        return buf.getvalue()

    def table7_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["encoder", "model", "metric"] + list(PANEL_DATA))
        for enc, model in PANEL_ROWS:
            for metric, attr in (("Acc", "accuracy"), ("F1", "macro_f1")):
                row = [enc, model, metric]
                for data in PANEL_DATA:
                    c = self.panel.get((enc, data))
                    if data not in ADMISSIBLE[enc] or c is None:
                        row.append("-")
                    else:
                        row.append(f"{getattr(c, attr):.3f}" if c.ok else "error")
                w.writerow(row)
        return buf.getvalue()

    def errors_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["kind", "embeddings", "column", "error"])
        for c in self.cells:
            if not c.ok:
                w.writerow(["grid", subset_name(c.subset), f"{c.variant}_nc{c.n_c}", c.error])
        for (enc, data), c in self.panel.items():
            if not c.ok:
                w.writerow(["panel", enc, data, c.error])
        return buf.getvalue()

    def to_text(self) -> str:
        names = [column_name(v, n, k) for v, n, k in self.columns]
        width = max(len(subset_name(s)) for s in self.subsets)
        lines = [f"{'embeddings':<{width}} {'':3} " + " ".join(f"{n:>20}" for n in names)]
        for subset in self.subsets:
            for metric, attr in (("Acc", "accuracy"), ("F1", "macro_f1")):
                vals = []
                for v, n, _ in self.columns:
                    c = self.cell(subset, v, n)
                    vals.append(f"{getattr(c, attr):>20.3f}" if c.ok else f"{'error':>20}")
                label = subset_name(subset) if metric == "Acc" else ""
                lines.append(f"{label:<{width}} {metric:3} " + " ".join(vals))
        if self.panel:
            lines += ["", f"{'encoder':<12} {'':3} " + " ".join(f"{d:>10}" for d in PANEL_DATA)]
            for enc, _ in PANEL_ROWS:
                for metric, attr in (("Acc", "accuracy"), ("F1", "macro_f1")):
                    vals = []
                    for data in PANEL_DATA:
                        c = self.panel.get((enc, data))
                        if data not in ADMISSIBLE[enc] or c is None:
                            vals.append(f"{'-':>10}")
                        else:
                            vals.append(f"{getattr(c, attr):>10.3f}" if c.ok else f"{'error':>10}")
                    lines.append(f"{enc if metric == 'Acc' else '':<12} {metric:3} " + " ".join(vals))
        if self.errors:
            lines += ["", f"{len(self.errors)} cell(s) failed; see ablation_errors.csv"]
        return "\n".join(lines) + "\n"


def _scored(cell: Cell, fn) -> Cell:
    t0 = time.perf_counter()
    try:
        m = fn()
        cell.accuracy, cell.macro_f1 = m.accuracy, m.macro_f1
    except Exception as exc:  # a failed cell must not stop the grid
        cell.error = f"{type(exc).__name__}: {exc}"
        log.warning("ablation cell %s failed: %s", cell, cell.error)
    cell.seconds = time.perf_counter() - t0
    return cell


def _grid_cell(job) -> Cell:
    cell, (train, val, test, model_cfg, cfg, streamline, patch) = job

    def fit():
        model, _ = train_tractoembed(train, val, model_cfg, cfg, streamline, patch, encoders=cell.subset)
        return evaluate(model, test)

    return _scored(cell, fit)


def run_ablation(dataset, split, cfg: PipelineConfig, streamline=None, patch=None, reps_cache=None,
                 progress=None, workers: int = 1) -> AblationReport:
    """Train and score every grid cell, then the single-encoder panel.

    ``streamline`` / ``patch`` may pass pretrained encoders; otherwise they are
    pretrained here. ``reps_cache`` maps (variant, n_c) to prebuilt representations.
    ``workers > 1`` trains grid cells in separate processes.
    """
    abl = cfg.ablation
    k_of = {"hyperlocal": cfg.representation.k_hyper, "local": abl.k_local}
    columns = tuple((v, n, k_of[v]) for v, n in abl.columns)
    report = AblationReport(abl.subsets, columns)
    reps_cache = {} if reps_cache is None else reps_cache

    def reps_for(variant, n_c) -> RepresentationSet:
        key = (variant, n_c)
        if key not in reps_cache:
            rc = replace(cfg.representation, variant=variant, n_c=n_c)
            if variant == "local":
                rc = replace(rc, k_local=abl.k_local)
            reps_cache[key] = build_representations(dataset, rc)
        return reps_cache[key]

    def splits(reps):
        return reps.for_subjects(split.train), reps.for_subjects(split.val), reps.for_subjects(split.test)

    ref_key = (cfg.representation.variant, cfg.representation.n_c)
    tr, va, te = splits(reps_for(*ref_key))
    if streamline is None:
        streamline, _ = pretrain_streamline_encoder(tr, va, cfg.model, cfg.stage("streamline_pretrain"))
    if patch is None:
        patch, _ = pretrain_patch_dvae(tr, cfg.model, cfg.stage("dvae_pretrain"), val=va)

    joint = cfg.stage("tractoembed")
    jobs = []
    for v, n, _ in columns:
        ctr, cva, cte = splits(reps_for(v, n))
        for subset in abl.subsets:
            cell = Cell(tuple(e for e in ENCODERS if e in subset), v, n)
            jobs.append((cell, (ctr, cva, cte, cfg.model, joint, streamline, patch)))
    if workers > 1:
        # every cell reseeds itself, so results do not depend on scheduling
        with ProcessPoolExecutor(workers) as pool:
            done = list(pool.map(_grid_cell, jobs))
    else:
        done = map(_grid_cell, jobs)
    for i, cell in enumerate(done, 1):
        report.cells.append(cell)
        if progress:
            progress(f"cell {i}/{len(jobs)} {subset_name(cell.subset)} {cell.variant} n_c={cell.n_c}: "
                     f"{'error' if cell.error else f'acc {cell.accuracy:.2f} f1 {cell.macro_f1:.2f}'}")

    if abl.single_encoders:
        panel = {
            ("streamline", "streamline"): lambda: evaluate(streamline, te),
            ("cluster", "streamline"): lambda: evaluate(
                train_tractoembed(tr, va, cfg.model, joint, encoders=("cluster",), cluster_input="streamline")[0], te),
            ("cluster", "cluster"): lambda: evaluate(
                train_tractoembed(tr, va, cfg.model, joint, encoders=("cluster",))[0], te),
            ("patch", "patch"): lambda: evaluate(
                train_tractoembed(tr, va, cfg.model, joint, patch=patch, encoders=("patch",))[0], te),
        }
        for (enc, data), fn in panel.items():
            report.panel[(enc, data)] = _scored(Cell((enc,), ref_key[0], ref_key[1]), fn)
            if progress:
                c = report.panel[(enc, data)]
                progress(f"panel {enc} on {data} data: "
                         f"{'error' if c.error else f'acc {c.accuracy:.2f} f1 {c.macro_f1:.2f}'}")
    return report


def load_table_csv(text: str) -> list:
    """Rows of a table CSV as lists of strings (header first)."""
    return [row for row in csv.reader(io.StringIO(text))]


def numeric_cells(rows: list) -> np.ndarray:
    """Float matrix of a parsed table, NaN where a cell is '-' or 'error'."""
    start = 2 if rows[0][0] == "embeddings" else 3
    out = np.full((len(rows) - 1, len(rows[0]) - start), np.nan)
    for i, row in enumerate(rows[1:]):
        for j, v in enumerate(row[start:]):
            try:
                out[i, j] = float(v)
            except ValueError:
                pass
    return out
