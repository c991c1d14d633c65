"""Command-line entry point: ``tractokit <command> [options]``.

Every command reads the same config file. Artifacts go to ``--out`` (default
``runs/``) unless the config's ``[paths]`` section names them::

    synthetic.strm / .json   generate
    split.json               prepare
    representations.npz      prepare
    streamline.tkck          pretrain-streamline
    dvae.tkck                pretrain-dvae
    model.tkck               train
    *_report.csv / .png      every training and evaluation command

Exit status: 0 success, 2 usage, 3 invalid input, 4 malformed file,
5 checkpoint problem, 6 numerical failure, 1 anything else.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from tractokit.errors import CheckpointError, FormatError, InvalidInputError, TractoError

log = logging.getLogger("tractokit")

DEFAULT_NAMES = {
    "dataset": "synthetic.strm",
    "split": "split.json",
    "representations": "representations.npz",
    "streamline_ckpt": "streamline.tkck",
    "dvae_ckpt": "dvae.tkck",
    "model_ckpt": "model.tkck",
}


class Run:
    """Config plus path resolution for one invocation."""

    def __init__(self, args):
        from tractokit.config import load_config

        self.args = args
        self.cfg = load_config(args.config, profile=args.profile, seed=args.seed,
                               deterministic=True if args.deterministic else None)
        out = args.out or self.cfg.paths.get("out") or "runs"
        self.out = Path(out)
        self.out.mkdir(parents=True, exist_ok=True)

    def path(self, key: str) -> Path:
        if key in self.cfg.paths:
            return Path(self.cfg.paths[key])
        return self.out / DEFAULT_NAMES[key]

    def write(self, name: str, text: str) -> Path:
        p = self.out / name
        p.write_text(text)
        print(f"wrote {p}")
        return p

    def dataset(self):
        from tractokit.data import load_dataset

        p = self.path("dataset")
        if not p.exists():
            raise InvalidInputError(f"dataset not found: {p} (run `tractokit generate` first)")
        return load_dataset(p)

    def split(self):
        from tractokit.data import SplitSpec

        p = self.path("split")
        if not p.exists():
            raise InvalidInputError(f"split not found: {p} (run `tractokit prepare` first)")
        try:
            return SplitSpec.from_json(p.read_text())
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise FormatError(f"cannot read split file {p}: {exc}") from exc

    def reps(self):
        from tractokit.representations import RepresentationSet

        p = self.path("representations")
        if not p.exists():
            raise InvalidInputError(f"representations not found: {p} (run `tractokit prepare` first)")
        reps = RepresentationSet.load(p)
        want = {"variant": self.cfg.representation.variant, "n_c": self.cfg.representation.n_c,
                "p_f": self.cfg.representation.p_f}
        have = {k: reps.config.get(k) for k in want}
        if have != want:
            raise InvalidInputError(f"{p} was built with {have}, config asks for {want}; rerun `tractokit prepare`")
        return reps

    def splits(self):
        reps, sp = self.reps(), self.split()
        return reps.for_subjects(sp.train), reps.for_subjects(sp.val), reps.for_subjects(sp.test)

    def save_train_report(self, report, name: str):
        from tractokit.plotting import plot_training

        self.write(f"{name}_report.csv", report.to_csv())
        print(report.to_text(), end="")
        print(f"wrote {plot_training([report], self.out / f'{name}_training.png')}")


# ---------------------------------------------------------------------------
# checkpoints


def _model_meta(cfg, stage: str, **extra) -> dict:
    return {"stage": stage, "model": cfg.model.to_dict(), "seed": cfg.seed, **extra}


def _check_meta(meta: dict, cfg, path, stage: str):
    if meta.get("stage") != stage:
        raise CheckpointError(f"{path} holds a {meta.get('stage')!r} checkpoint, expected {stage!r}")
    if meta.get("model") != json.loads(json.dumps(cfg.model.to_dict())):
        raise CheckpointError(f"{path} was trained with a different model config (profile mismatch?)")


def load_streamline(run: Run, required=True):
    from tractokit.encoders import StreamlineEncoder
    from tractokit.nn.checkpoint import load_module

    p = run.path("streamline_ckpt")
    if not p.exists():
        if required:
            raise CheckpointError(f"missing streamline encoder checkpoint {p}; run `tractokit pretrain-streamline`")
        return None
    enc = StreamlineEncoder(run.cfg.model)
    _check_meta(load_module(p, enc), run.cfg, p, "streamline_pretrain")
    return enc.eval()


def load_dvae(run: Run, required=True):
    from tractokit.encoders import PatchEncoder
    from tractokit.nn.checkpoint import load_module

    p = run.path("dvae_ckpt")
    if not p.exists():
        if required:
            raise CheckpointError(f"missing patch dVAE checkpoint {p}; run `tractokit pretrain-dvae`")
        return None
    enc = PatchEncoder(run.cfg.model)
    _check_meta(load_module(p, enc), run.cfg, p, "dvae_pretrain")
    return enc.eval()


def load_model(run: Run):
    from tractokit.encoders import TractoEmbedModel
    from tractokit.nn.checkpoint import load_checkpoint, load_module

    p = run.path("model_ckpt")
    if not p.exists():
        raise CheckpointError(f"missing model checkpoint {p}; run `tractokit train`")
    _, meta = load_checkpoint(p)
    _check_meta(meta, run.cfg, p, "tractoembed")
    model = TractoEmbedModel(run.cfg.model, tuple(meta["encoders"]), tuple(meta["frozen"]),
                             cluster_input=meta.get("cluster_input", "cluster"))
    load_module(p, model)
    return model.eval()


# ---------------------------------------------------------------------------
# commands


def cmd_generate(run: Run):
    from tractokit.data import generate_synthetic, save_dataset

    ds = generate_synthetic(run.cfg.synthetic)
    p = run.path("dataset")
    p.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(ds, p)
    print(f"wrote {p} ({len(ds)} streamlines, {len(ds.subjects)} subjects)")


def cmd_prepare(run: Run):
    from tractokit.data import split_subjectwise
    from tractokit.representations import build_representations

    ds = run.dataset()
    sp = split_subjectwise(ds, run.cfg.ratios, seed=run.cfg.seed)
    run.path("split").write_text(sp.to_json())
    print(f"wrote {run.path('split')} ({len(sp.train)}/{len(sp.val)}/{len(sp.test)} subjects)")
    t0 = time.perf_counter()
    reps = build_representations(ds, run.cfg.representation, workers=run.args.workers)
    reps.save(run.path("representations"))
    print(f"wrote {run.path('representations')} ({len(reps)} rows, {int(reps.fallback.sum())} padded "
          f"neighbourhoods, {time.perf_counter() - t0:.1f}s)")


def cmd_pretrain_streamline(run: Run):
    from tractokit.nn.checkpoint import save_module
    from tractokit.training import pretrain_streamline_encoder

    tr, va, _ = run.splits()
    cfg = run.cfg.stage("streamline_pretrain")
    enc, report = pretrain_streamline_encoder(tr, va, run.cfg.model, cfg)
    # features.* is the encoder, head.* the pretraining classifier
    save_module(run.path("streamline_ckpt"), enc, _model_meta(run.cfg, cfg.stage, best_epoch=report.best_epoch))
    report.checkpoint = str(run.path("streamline_ckpt"))
    run.save_train_report(report, "streamline")


def cmd_pretrain_dvae(run: Run):
    from tractokit.nn.checkpoint import save_module
    from tractokit.training import pretrain_patch_dvae

    tr, va, _ = run.splits()
    cfg = run.cfg.stage("dvae_pretrain")
    enc, report = pretrain_patch_dvae(tr, run.cfg.model, cfg, val=va, max_iters=run.args.max_iters)
    save_module(run.path("dvae_ckpt"), enc, _model_meta(run.cfg, cfg.stage, notes=report.notes))
    report.checkpoint = str(run.path("dvae_ckpt"))
    run.save_train_report(report, "dvae")


def cmd_train(run: Run):
    from tractokit.encoders import ENCODERS
    from tractokit.nn.checkpoint import save_module
    from tractokit.training import train_tractoembed

    encoders = tuple(run.args.encoders or ENCODERS)
    cfg = run.cfg.stage("tractoembed")
    # checkpoints first: a missing encoder should fail before any data is touched
    streamline = load_streamline(run) if "streamline" in encoders and "streamline" in cfg.freeze else None
    patch = load_dvae(run) if "patch" in encoders and "patch" in cfg.freeze else None
    tr, va, _ = run.splits()
    model, report = train_tractoembed(tr, va, run.cfg.model, cfg, streamline, patch, encoders=encoders,
                                      cluster_input=run.args.cluster_input)
    meta = _model_meta(run.cfg, cfg.stage, encoders=list(model.encoders), frozen=list(model.frozen),
                       cluster_input=model.cluster_input, best_epoch=report.best_epoch)
    save_module(run.path("model_ckpt"), model, meta)
    report.checkpoint = str(run.path("model_ckpt"))
    run.save_train_report(report, "tractoembed")


def cmd_eval(run: Run):
    from tractokit.metrics import classification_report
    from tractokit.plotting import plot_confusion
    from tractokit.training import evaluate

    model = load_model(run)
    tr, va, te = run.splits()
    part = {"train": tr, "val": va, "test": te}[run.args.split]
    m = evaluate(model, part)
    names = run.dataset().label_names if run.path("dataset").exists() else None
    text, table = classification_report(m, names)
    print(text, end="")
    stem = f"eval_{run.args.split}"
    run.write(f"{stem}_report.csv", table)
    run.write(f"{stem}_report.txt", text)
    run.write(f"{stem}_metrics.csv", f"split,n,accuracy,macro_f1\n{run.args.split},{m.total},{m.accuracy!r},{m.macro_f1!r}\n")
    print(f"wrote {plot_confusion(m.confusion, names, run.out / f'{stem}_confusion.png')}")


def cmd_ablate(run: Run):
    from tractokit.ablation import load_table_csv, run_ablation
    from tractokit.plotting import plot_table

    ds, sp = run.dataset(), run.split()
    reps_cache = {}
    rp = run.path("representations")
    if rp.exists():
        from tractokit.representations import RepresentationSet

        reps = RepresentationSet.load(rp)
        reps_cache[(reps.config.get("variant"), reps.config.get("n_c"))] = reps
    report = run_ablation(ds, sp, run.cfg, streamline=load_streamline(run, required=False),
                          patch=load_dvae(run, required=False), reps_cache=reps_cache,
                          progress=print, workers=run.args.workers)
    print(report.to_text(), end="")
    t6 = run.write("ablation_grid.csv", report.table6_csv())
    print(f"wrote {plot_table(load_table_csv(t6.read_text()), run.out / 'ablation_grid.png')}")
    if report.panel:
        t7 = run.write("ablation_single.csv", report.table7_csv())
        print(f"wrote {plot_table(load_table_csv(t7.read_text()), run.out / 'ablation_single.png')}")
    if report.errors:
        run.write("ablation_errors.csv", report.errors_csv())
        return 1
    return 0


def cmd_bench(run: Run):
    from tractokit.search import brute_force_knn, build_index, knn_mdf
    from tractokit.streamline import resample

    ds = run.dataset() if run.path("dataset").exists() else None
    if ds is None:
        from tractokit.data import generate_synthetic

        ds = generate_synthetic(replace(run.cfg.synthetic, n_subjects=1, streamlines_per_subject=run.args.n))
    subj = ds.subjects[0]
    ids = np.flatnonzero(ds.subject_of == subj)[: run.args.n]
    lines = np.stack([resample(ds.streamlines[i], run.cfg.representation.m_interp) for i in ids])
    index = build_index(lines, cell_size=run.cfg.representation.radius)
    rng = np.random.default_rng(run.cfg.seed)
    queries = rng.choice(len(lines), min(run.args.queries, len(lines)), replace=False)
    rows = []
    for name, fn in (("brute_force", brute_force_knn), ("indexed", knn_mdf)):
        t0 = time.perf_counter()
        for q in queries:
            fn(index, lines[q], run.cfg.representation.k_local, exclude_id=int(q))
        dt = time.perf_counter() - t0
        rows.append((name, len(lines), len(queries), dt, len(queries) / dt))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "n_streamlines", "n_queries", "seconds", "queries_per_second"])
    w.writerows(rows)
    for r in rows:
        print(f"{r[0]:<12} {r[4]:10.1f} queries/s")
    print(f"speedup {rows[1][4] / rows[0][4]:.2f}x")
    run.write("bench.csv", buf.getvalue())


def _render_csv(path: Path) -> str:
    from tractokit.ablation import load_table_csv

    rows = load_table_csv(path.read_text())
    if not rows:
        raise FormatError(f"{path} is empty")
    widths = [max(len(r[j]) if j < len(r) else 0 for r in rows) for j in range(len(rows[0]))]
    out = []
    for i, r in enumerate(rows):
        out.append("  ".join(v.ljust(w) if j < 3 else v.rjust(w) for j, (v, w) in enumerate(zip(r, widths))))
        if i == 0:
            out.append("  ".join("-" * w for w in widths))
    return "\n".join(out) + "\n"


def cmd_report(run: Run):
    from tractokit.ablation import load_table_csv
    from tractokit.plotting import plot_table, plot_training
    from tractokit.training import TrainReport

    paths = [Path(p) for p in run.args.csv] or sorted(run.out.glob("*.csv"))
    if not paths:
        raise InvalidInputError(f"no CSV files given and none found in {run.out}")
    for p in paths:
        if not p.exists():
            raise InvalidInputError(f"no such file: {p}")
        print(f"== {p}")
        print(_render_csv(p))
        head = p.read_text().split("\n", 1)[0]
        try:
            if head.startswith("epoch,"):
                rep = TrainReport.from_csv(p.read_text(), p.stem.replace("_report", ""))
                print(f"wrote {plot_training([rep], p.with_suffix('.png'))}")
            elif head.startswith(("embeddings,", "encoder,")):
                print(f"wrote {plot_table(load_table_csv(p.read_text()), p.with_suffix('.png'))}")
        except (ValueError, KeyError, IndexError) as exc:
            raise FormatError(f"cannot parse {p}: {exc}") from exc


COMMANDS = {
    "generate": (cmd_generate, "write a synthetic labelled tractogram"),
    "prepare": (cmd_prepare, "split subjects and precompute representations"),
    "pretrain-streamline": (cmd_pretrain_streamline, "pretrain the streamline encoder"),
    "pretrain-dvae": (cmd_pretrain_dvae, "pretrain the patch dVAE"),
    "train": (cmd_train, "train the cluster encoder and classifier on frozen encoders"),
    "eval": (cmd_eval, "evaluate a trained model"),
    "ablate": (cmd_ablate, "embedding-subset x representation ablation"),
    "bench": (cmd_bench, "indexed vs brute-force neighbour search throughput"),
    "report": (cmd_report, "render CSV reports as text tables and figures"),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI config file")
    common.add_argument("--seed", type=int, help="override every seed in the config")
    common.add_argument("--deterministic", action="store_true", help="force deterministic kernels")
    common.add_argument("--profile", choices=("desk", "paper"))
    common.add_argument("--out", help="output directory (default: runs/)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="tractokit", description="Multi-level streamline embedding toolkit")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    cmds = {}
    for name, (_, helptext) in COMMANDS.items():
        cmds[name] = sub.add_parser(name, parents=[common], help=helptext, description=helptext)
    cmds["prepare"].add_argument("--workers", type=int, default=1)
    cmds["pretrain-dvae"].add_argument("--max-iters", type=int, default=None)
    cmds["train"].add_argument("--encoders", nargs="+", choices=("streamline", "cluster", "patch"))
    cmds["train"].add_argument("--cluster-input", choices=("cluster", "streamline"), default="cluster")
    cmds["eval"].add_argument("--split", choices=("train", "val", "test"), default="test")
    cmds["ablate"].add_argument("--workers", type=int, default=1, help="train grid cells in parallel")
    cmds["bench"].add_argument("-n", type=int, default=500, help="streamlines in the index")
    cmds["bench"].add_argument("--queries", type=int, default=100)
    cmds["report"].add_argument("csv", nargs="*", help="CSV files (default: every CSV in --out)")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        run = Run(args)
        status = COMMANDS[args.command][0](run)
    except TractoError as exc:
        print(f"tractokit {args.command}: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"tractokit {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return int(status or 0)


if __name__ == "__main__":
    sys.exit(main())
