"""Training stages: streamline-encoder pretraining, dVAE pretraining and joint training.

Frozen encoders run in eval mode, so their embeddings are pure functions of the
inputs; joint training computes them once per split and reuses them every epoch.
"""

from __future__ import annotations

import copy
import csv
import io
import logging
import math
import random
import time
from dataclasses import dataclass, field, fields

import numpy as np
import torch

from tractokit.encoders import (
    ENCODERS,
    ModelConfig,
    PatchEncoder,
    StreamlineEncoder,
    TractoEmbedModel,
)
from tractokit.errors import InvalidInputError, NumericError
from tractokit.metrics import compute_metrics
from tractokit.nn.losses import chamfer_l1, cross_entropy_loss, focal_loss, kl_to_uniform
from tractokit.nn.optim import WarmRestartSchedule, WarmupCosineSchedule, lr_at, make_optimizer, set_lr
from tractokit.representations import RepresentationSet

log = logging.getLogger(__name__)

STAGES = ("streamline_pretrain", "dvae_pretrain", "tractoembed")


@dataclass
class TrainConfig:
    stage: str = "tractoembed"
    epochs: int = 40
    batch_size: int = 256
    lr: float = 1e-4
    optimizer: str = "adam"
    weight_decay: float = 0.0
    schedule: str = "warm_restarts"  # warm_restarts | warmup_cosine | constant
    t_0: int = 10
    t_mult: int = 2
    eta_min: float = 1e-7
    t_initial: int = 300
    warmup_t: int = 10
    lr_min: float = 1e-6
    warmup_lr_init: float = 1e-6
    decay_rate: float = 0.1
    cycle_limit: int = 1
    loss: str = "focal"  # focal | ce
    gamma: float = 2.0
    freeze: tuple = ("streamline", "patch")
    kld_start: int = 10_000
    kld_ramp: int = 100_000
    kld_max: float = 0.1
    tau_start: float = 1.0
    tau_end: float = 0.0625
    n_itr: int = 0  # iteration counter to resume the dVAE kld/tau schedules from
    select_by: str = "val_f1"
    seed: int = 0
    deterministic: bool = True

    def __post_init__(self):
        if self.stage not in STAGES:
            raise InvalidInputError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if self.epochs < 1 or self.batch_size < 2:
            raise InvalidInputError("epochs must be >= 1 and batch_size >= 2")
        if self.schedule not in ("warm_restarts", "warmup_cosine", "constant"):
            raise InvalidInputError(f"unknown schedule {self.schedule!r}")
        if self.loss not in ("focal", "ce"):
            raise InvalidInputError(f"unknown loss {self.loss!r}")
        self.freeze = tuple(self.freeze)

    @classmethod
    def for_stage(cls, stage: str, profile: str = "paper", **overrides) -> "TrainConfig":
        base = {
            "streamline_pretrain": dict(epochs=20, lr=1e-3, optimizer="adam", schedule="warm_restarts",
                                        t_0=20, t_mult=1, loss="ce", batch_size=256),
            "dvae_pretrain": dict(epochs=300, lr=5e-4, optimizer="adamw", weight_decay=5e-4,
                                  schedule="warmup_cosine", batch_size=64),
            "tractoembed": dict(epochs=40, lr=1e-4, optimizer="adam", schedule="warm_restarts",
                                t_0=10, t_mult=2, loss="focal", gamma=2.0, batch_size=256),
        }[stage]
        if profile == "desk":
            base.update({
                "streamline_pretrain": dict(epochs=8, t_0=8, batch_size=32),
                "dvae_pretrain": dict(epochs=3, t_initial=3, warmup_t=1, batch_size=32,
                                      kld_start=200, kld_ramp=2000),
                "tractoembed": dict(epochs=12, lr=1e-3, t_0=4, t_mult=2, batch_size=32),
            }[stage])
        elif profile != "paper":
            raise InvalidInputError(f"unknown profile {profile!r}")
        base.update(overrides)
        return cls(stage=stage, **base)

    def lr_schedule(self):
        if self.schedule == "warm_restarts":
            return WarmRestartSchedule(self.lr, self.t_0, self.t_mult, self.eta_min)
        if self.schedule == "warmup_cosine":
            return WarmupCosineSchedule(self.lr, self.t_initial, self.warmup_t, self.lr_min, self.warmup_lr_init,
                                        self.decay_rate, self.cycle_limit)
        return None

    def lr_for_epoch(self, epoch: int) -> float:
        sched = self.lr_schedule()
        return self.lr if sched is None else lr_at(sched, epoch)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise InvalidInputError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


REPORT_COLUMNS = ("epoch", "lr", "train_loss", "train_acc", "val_loss", "val_acc", "val_f1", "extra")


@dataclass
class TrainReport:
    stage: str
    rows: list = field(default_factory=list)
    seconds: float = 0.0
    checkpoint: str = ""
    best_epoch: int = -1
    notes: dict = field(default_factory=dict)

    def add(self, **row):
        row = {k: float(v) if isinstance(v, (float, np.floating)) else v for k, v in row.items()}
        for k, v in row.items():
            if isinstance(v, float) and not math.isfinite(v):
                raise NumericError(f"non-finite {k} in epoch {row.get('epoch')}")
        self.rows.append({c: row.get(c, float("nan") if c != "extra" else "") for c in REPORT_COLUMNS})

    def same_as(self, other: "TrainReport") -> bool:
        """Equality ignoring wall-clock time."""
        return (self.stage, self.best_epoch, self.notes) == (other.stage, other.best_epoch, other.notes) and all(
            a == b or (isinstance(a, float) and math.isnan(a) and math.isnan(b))
            for r1, r2 in zip(self.rows, other.rows) for a, b in zip(r1.values(), r2.values())
        ) and len(self.rows) == len(other.rows)

    def lr_trace(self) -> list:
        return [r["lr"] for r in self.rows]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=REPORT_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in self.rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
        return buf.getvalue()

    def to_text(self) -> str:
        head = f"{'epoch':>5} {'lr':>10} {'train_loss':>11} {'train_acc':>9} {'val_loss':>9} {'val_acc':>8} {'val_f1':>8}"
        lines = [f"stage {self.stage}", head]
        for r in self.rows:
            lines.append(
                f"{r['epoch']:>5} {r['lr']:10.3g} {r['train_loss']:11.5f} {r['train_acc']:9.2f} "
                f"{r['val_loss']:9.5f} {r['val_acc']:8.2f} {r['val_f1']:8.2f}"
            )
        lines.append(f"best epoch {self.best_epoch}  wall-clock {self.seconds:.1f}s  checkpoint {self.checkpoint or '-'}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_csv(cls, text: str, stage: str = "") -> "TrainReport":
        rep = cls(stage)
        for r in csv.DictReader(io.StringIO(text)):
            rep.rows.append({k: (int(v) if k == "epoch" else v if k == "extra" else float(v)) for k, v in r.items()})
        return rep


def seed_everything(seed: int, deterministic: bool = True) -> None:
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)
    if deterministic:
        torch.use_deterministic_algorithms(True)


def kld_weight(n_itr: int, start: int = 10_000, ramp: int = 100_000, max_weight: float = 0.1) -> float:
    """Zero for the first ``start`` iterations, then a half-cosine ramp up to ``max_weight``."""
    if n_itr < 0:
        raise InvalidInputError("n_itr must be >= 0")
    if n_itr <= start:
        return 0.0
    frac = min(1.0, (n_itr - start) / ramp)
    return min(max_weight, max(0.0, 0.5 * max_weight * (1.0 - math.cos(math.pi * frac))))


def gumbel_tau(n_itr: int, total: int, start: float = 1.0, end: float = 0.0625) -> float:
    if total <= 1:
        return start
    return start + (end - start) * min(1.0, n_itr / (total - 1))


def batches(n: int, batch_size: int, rng=None) -> list:
    """Index batches; a lone trailing sample joins the previous batch (BatchNorm needs two)."""
    order = rng.permutation(n) if rng is not None else np.arange(n)
    out = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    if len(out) > 1 and len(out[-1]) == 1:
        last = out.pop()
        out[-1] = np.concatenate([out[-1], last])
    return out


def _require(reps, what):
    if reps is None or len(reps) == 0:
        raise InvalidInputError(f"{what} split is empty")


def _tensor(a) -> torch.Tensor:
    return torch.as_tensor(np.ascontiguousarray(a), dtype=torch.float32)


def _check_loss(loss, epoch, b, ids):
    if not torch.isfinite(loss):
        raise NumericError(f"non-finite loss in epoch {epoch}, batch {b}; streamline ids {ids[:16].tolist()}")


def _class_loss(cfg: TrainConfig, logits, labels):
    if cfg.loss == "focal":
        return focal_loss(logits, labels, cfg.gamma)
    return cross_entropy_loss(logits, labels)


# ---------------------------------------------------------------------------
# stage 1: streamline encoder


@torch.no_grad()
def predict_streamline(enc: StreamlineEncoder, reps: RepresentationSet, batch_size=256) -> np.ndarray:
    enc.eval()
    out = [enc(_tensor(reps.descriptors(idx))) for idx in batches(len(reps), batch_size)]
    return torch.cat(out).numpy()


def _eval_logits(logits: np.ndarray, labels: np.ndarray, cfg: TrainConfig):
    lt = torch.as_tensor(logits)
    loss = float(_class_loss(cfg, lt, torch.as_tensor(labels)))
    m = compute_metrics(labels, logits.argmax(1), logits.shape[1])
    return loss, m.accuracy, m.macro_f1


def pretrain_streamline_encoder(train: RepresentationSet, val: RepresentationSet | None,
                                model_cfg: ModelConfig, cfg: TrainConfig):
    """Train the conv stack and its head on fiber descriptors with cross-entropy."""
    _require(train, "train")
    seed_everything(cfg.seed, cfg.deterministic)
    enc = StreamlineEncoder(model_cfg)
    opt = make_optimizer(enc.parameters(), cfg.optimizer, cfg.lr, cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    report = TrainReport(cfg.stage)
    t_start = time.perf_counter()
    best, best_score = None, -1.0
    labels = torch.as_tensor(train.labels)
    for epoch in range(cfg.epochs):
        lr = cfg.lr_for_epoch(epoch)
        set_lr(opt, lr)
        enc.train()
        tot, correct, n = 0.0, 0, 0
        for b, idx in enumerate(batches(len(train), cfg.batch_size, rng)):
            logits = enc(_tensor(train.descriptors(idx)))
            loss = _class_loss(cfg, logits, labels[idx])
            _check_loss(loss, epoch, b, train.ids[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            tot += loss.item() * len(idx)
            correct += int((logits.argmax(1) == labels[idx]).sum())
            n += len(idx)
        row = dict(epoch=epoch, lr=lr, train_loss=tot / n, train_acc=100.0 * correct / n)
        score = row["train_acc"]
        if val is not None and len(val):
            vl, va, vf = _eval_logits(predict_streamline(enc, val), val.labels, cfg)
            row.update(val_loss=vl, val_acc=va, val_f1=vf)
            score = vf if cfg.select_by == "val_f1" else va
        report.add(**row)
        if score > best_score:
            best_score, best = score, copy.deepcopy(enc.state_dict())
            report.best_epoch = epoch
        log.info("streamline epoch %d loss %.4f", epoch, row["train_loss"])
    enc.load_state_dict(best)
    enc.eval()
    report.seconds = time.perf_counter() - t_start
    return enc, report


# ---------------------------------------------------------------------------
# stage 2: patch dVAE


def dvae_loss(enc: PatchEncoder, patches: torch.Tensor, n_itr: int, tau: float, cfg: TrainConfig, generator=None):
    """(total, chamfer, kl) for one batch."""
    logits = enc.encode(enc.tokenize(patches))
    codes = enc.quantize(logits, tau=tau, generator=generator, sample=True)
    recon, _ = enc.decode(codes)
    p = enc.cfg.p_local
    loss1 = chamfer_l1(recon.reshape(-1, p, 3), patches.reshape(-1, p, 3))
    loss2 = kl_to_uniform(logits)
    w = kld_weight(n_itr, cfg.kld_start, cfg.kld_ramp, cfg.kld_max)
    return loss1 + w * loss2, loss1, loss2


@torch.no_grad()
def reconstruction_error(enc: PatchEncoder, patches: np.ndarray, batch_size=64) -> float:
    """Mean chamfer between patches and their argmax-code reconstruction."""
    enc.eval()
    tot, n = 0.0, 0
    for idx in batches(len(patches), batch_size):
        x = _tensor(patches[idx])
        codes = enc.quantize(enc.encode(enc.tokenize(x)), sample=False)
        recon, _ = enc.decode(codes)
        p = enc.cfg.p_local
        tot += float(chamfer_l1(recon.reshape(-1, p, 3), x.reshape(-1, p, 3))) * len(idx)
        n += len(idx)
    return tot / n


def pretrain_patch_dvae(train: RepresentationSet, model_cfg: ModelConfig, cfg: TrainConfig,
                        val: RepresentationSet | None = None, max_iters: int | None = None):
    """Reconstruct patch sets through the Gumbel-softmax codebook bottleneck."""
    _require(train, "train")
    seed_everything(cfg.seed, cfg.deterministic)
    enc = PatchEncoder(model_cfg)
    params = [p for n, p in enc.named_parameters() if not n.startswith("head.")]
    opt = make_optimizer(params, cfg.optimizer, cfg.lr, cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    probe = (val if val is not None and len(val) else train).patches[:256]
    report = TrainReport(cfg.stage, notes={"initial_chamfer": reconstruction_error(enc, probe)})
    per_epoch = len(batches(len(train), cfg.batch_size))
    total = cfg.epochs * per_epoch if max_iters is None else min(max_iters, cfg.epochs * per_epoch)
    n_itr = cfg.n_itr
    t_start = time.perf_counter()
    done = 0
    for epoch in range(cfg.epochs):
        if done >= total:
            break
        lr = cfg.lr_for_epoch(epoch)
        set_lr(opt, lr)
        enc.train()
        tot, tot_cd, tot_kl, n = 0.0, 0.0, 0.0, 0
        for b, idx in enumerate(batches(len(train), cfg.batch_size, rng)):
            if done >= total:
                break
            tau = gumbel_tau(done, total, cfg.tau_start, cfg.tau_end)
            loss, cd, kl = dvae_loss(enc, _tensor(train.patches[idx]), n_itr, tau, cfg, gen)
            _check_loss(loss, epoch, b, train.ids[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            tot += loss.item() * len(idx)
            tot_cd += cd.item() * len(idx)
            tot_kl += kl.item() * len(idx)
            n += len(idx)
            n_itr += 1
            done += 1
        recon = reconstruction_error(enc, probe)
        report.add(epoch=epoch, lr=lr, train_loss=tot / n, val_loss=recon,
                   extra=f"chamfer={tot_cd / n!r};kl={tot_kl / n!r};kld_weight={kld_weight(n_itr, cfg.kld_start, cfg.kld_ramp, cfg.kld_max)!r}")
        log.info("dvae epoch %d loss %.4f recon %.4f", epoch, tot / n, recon)
    enc.eval()
    report.notes["final_chamfer"] = reconstruction_error(enc, probe)
    report.notes["iterations"] = n_itr
    report.best_epoch = len(report.rows) - 1
    report.seconds = time.perf_counter() - t_start
    return enc, report


# ---------------------------------------------------------------------------
# stage 3: joint training


def model_inputs(model: TractoEmbedModel, reps: RepresentationSet, idx, name: str) -> torch.Tensor:
    if name == "streamline":
        return _tensor(reps.descriptors(idx))
    if name == "cluster":
        return _tensor(reps.clouds[idx] if model.cluster_input == "cluster" else reps.interpolated[idx])
    return _tensor(reps.patches[idx])


def _embed_one(model, name, x):
    return getattr(model, name).embed(x)


@torch.no_grad()
def frozen_embeddings(model: TractoEmbedModel, reps: RepresentationSet, batch_size=256) -> dict:
    out = {}
    for name in model.frozen:
        enc = getattr(model, name)
        enc.eval()
        out[name] = torch.cat([
            _embed_one(model, name, model_inputs(model, reps, idx, name)) for idx in batches(len(reps), batch_size)
        ])
    return out


@torch.no_grad()
def predict(model: TractoEmbedModel, reps: RepresentationSet, batch_size=256, cache=None) -> np.ndarray:
    """Eval-mode logits ``(N, n_classes)``."""
    model.eval()
    cache = frozen_embeddings(model, reps, batch_size) if cache is None else cache
    out = []
    for idx in batches(len(reps), batch_size):
        emb = {k: v[idx] for k, v in cache.items()}
        for name in model.encoders:
            if name not in emb:
                emb[name] = _embed_one(model, name, model_inputs(model, reps, idx, name))
        out.append(model.classify_embeddings(emb))
    return torch.cat(out).numpy()


def train_tractoembed(train: RepresentationSet, val: RepresentationSet | None, model_cfg: ModelConfig,
                      cfg: TrainConfig, streamline: StreamlineEncoder | None = None,
                      patch: PatchEncoder | None = None, encoders=ENCODERS, cluster_input="cluster"):
    """Train the cluster encoder and classifier on top of frozen pretrained encoders."""
    _require(train, "train")
    for name, enc in (("streamline", streamline), ("patch", patch)):
        if name in encoders and name in cfg.freeze and enc is None:
            raise InvalidInputError(f"a pretrained {name} encoder is required when it is frozen")
    seed_everything(cfg.seed, cfg.deterministic)
    model = TractoEmbedModel(model_cfg, encoders, cfg.freeze, streamline=streamline, patch=patch,
                             cluster_input=cluster_input)
    params = model.trainable_parameters()
    if not params:
        raise InvalidInputError("nothing to train: every selected encoder is frozen and no classifier")
    opt = make_optimizer(params, cfg.optimizer, cfg.lr, cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    cache_train = frozen_embeddings(model, train)
    cache_val = frozen_embeddings(model, val) if val is not None and len(val) else None
    labels = torch.as_tensor(train.labels)
    live = [e for e in model.encoders if e not in model.frozen]
    report = TrainReport(cfg.stage)
    best, best_score = None, -1.0
    t_start = time.perf_counter()
    for epoch in range(cfg.epochs):
        lr = cfg.lr_for_epoch(epoch)
        set_lr(opt, lr)
        model.train()
        tot, correct, n = 0.0, 0, 0
        for b, idx in enumerate(batches(len(train), cfg.batch_size, rng)):
            emb = {k: v[idx] for k, v in cache_train.items()}
            for name in live:
                emb[name] = _embed_one(model, name, model_inputs(model, train, idx, name))
            logits = model.classify_embeddings(emb)
            loss = _class_loss(cfg, logits, labels[idx])
            _check_loss(loss, epoch, b, train.ids[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            tot += loss.item() * len(idx)
            correct += int((logits.argmax(1) == labels[idx]).sum())
            n += len(idx)
        row = dict(epoch=epoch, lr=lr, train_loss=tot / n, train_acc=100.0 * correct / n)
        score = row["train_acc"]
        if cache_val is not None:
            vl, va, vf = _eval_logits(predict(model, val, cache=cache_val), val.labels, cfg)
            row.update(val_loss=vl, val_acc=va, val_f1=vf)
            score = vf if cfg.select_by == "val_f1" else va
        report.add(**row)
        if score > best_score:
            best_score = score
            best = {k: v.clone() for k, v in model.state_dict().items()}
            report.best_epoch = epoch
        log.info("tractoembed epoch %d loss %.4f", epoch, row["train_loss"])
    model.load_state_dict(best)
    model.eval()
    report.seconds = time.perf_counter() - t_start
    return model, report


# ---------------------------------------------------------------------------
# evaluation


def evaluate(model, reps: RepresentationSet, n_classes: int | None = None, batch_size=256):
    """Eval-mode metrics of a StreamlineEncoder or TractoEmbedModel on ``reps``."""
    if reps is None or len(reps) == 0:
        raise InvalidInputError("cannot evaluate on an empty split")
    if isinstance(model, StreamlineEncoder):
        logits = predict_streamline(model, reps, batch_size)
    else:
        logits = predict(model, reps, batch_size)
    return compute_metrics(reps.labels, logits.argmax(1), n_classes or logits.shape[1])
