"""Pipeline configuration files.

A config is an INI-style key-value file. Sections map onto the dataclasses that
drive each stage; every key is optional and falls back to the profile default::

    [pipeline]
    profile = desk            ; desk | paper
    seed = 0
    deterministic = True

    [synthetic]               ; SyntheticConfig fields
    n_subjects = 20
    jitter = 2.5

    [split]
    ratios = (0.7, 0.1, 0.2)

    [representation]          ; RepresentationConfig fields
    variant = hyperlocal
    n_c = 220

    [model]                   ; ModelConfig fields
    codebook_size = 512

    [streamline_pretrain]     ; TrainConfig fields, one section per stage
    epochs = 8
    [dvae_pretrain]
    [tractoembed]

    [ablation]
    subsets = [("cluster", "streamline"), ("cluster", "patch"), ("streamline", "patch"), ("streamline", "cluster", "patch")]
    columns = [("hyperlocal", 190), ("hyperlocal", 220), ("hyperlocal", 240), ("local", 190), ("local", 240)]
    single_encoders = True

    [paths]                   ; relative paths resolve against the config file
    dataset = data/synthetic.strm

Values are Python literals (numbers, strings, tuples, lists, booleans); bare
words are read as strings. Unknown sections or keys are rejected.
"""

from __future__ import annotations

import ast
import configparser
import io
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from tractokit.data import SyntheticConfig
from tractokit.encoders import ENCODERS, ModelConfig
from tractokit.errors import InvalidInputError
from tractokit.representations import VARIANTS, RepresentationConfig
from tractokit.training import STAGES, TrainConfig

PROFILES = ("desk", "paper")

DEFAULT_SUBSETS = (
    ("cluster", "streamline"),
    ("cluster", "patch"),
    ("streamline", "patch"),
    ("streamline", "cluster", "patch"),
)
DEFAULT_COLUMNS = (("hyperlocal", 190), ("hyperlocal", 220), ("hyperlocal", 240), ("local", 190), ("local", 240))

PATH_KEYS = ("dataset", "split", "representations", "streamline_ckpt", "dvae_ckpt", "model_ckpt", "out")


@dataclass
class AblationConfig:
    subsets: tuple = DEFAULT_SUBSETS
    columns: tuple = DEFAULT_COLUMNS
    single_encoders: bool = True
    k_local: int = 20  # neighbour count of the local columns

    def __post_init__(self):
        self.subsets = tuple(tuple(s) for s in self.subsets)
        self.columns = tuple((str(v), int(n)) for v, n in self.columns)
        for s in self.subsets:
            if not s or set(s) - set(ENCODERS):
                raise InvalidInputError(f"ablation subset {s} must name encoders from {ENCODERS}")
        for v, n in self.columns:
            if v not in VARIANTS or n < 1:
                raise InvalidInputError(f"ablation column {(v, n)} is invalid")


@dataclass
class PipelineConfig:
    profile: str = "desk"
    seed: int = 0
    deterministic: bool = True
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)
    ratios: tuple = (0.7, 0.1, 0.2)
    representation: RepresentationConfig = field(default_factory=RepresentationConfig)
    model: ModelConfig = field(default_factory=ModelConfig.desk)
    train: dict = field(default_factory=dict)
    ablation: AblationConfig = field(default_factory=AblationConfig)
    paths: dict = field(default_factory=dict)

    def stage(self, name: str) -> TrainConfig:
        return self.train[name]

    def to_dict(self) -> dict:
        return {
            "profile": self.profile, "seed": self.seed, "deterministic": self.deterministic,
            "synthetic": asdict(self.synthetic), "ratios": list(self.ratios),
            "representation": asdict(self.representation), "model": self.model.to_dict(),
            "train": {k: asdict(v) for k, v in self.train.items()},
            "ablation": asdict(self.ablation), "paths": dict(self.paths),
        }


def parse_value(text: str):
    text = text.strip()
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        if text.lower() in ("true", "yes", "on"):
            return True
        if text.lower() in ("false", "no", "off"):
            return False
        return text


def _checked(section: str, values: dict, cls) -> dict:
    names = {f.name for f in fields(cls)}
    unknown = set(values) - names
    if unknown:
        raise InvalidInputError(f"[{section}] has unknown keys: {sorted(unknown)}")
    return values


def default_config(profile: str = "desk", seed: int = 0, deterministic: bool = True) -> PipelineConfig:
    if profile not in PROFILES:
        raise InvalidInputError(f"profile must be one of {PROFILES}, got {profile!r}")
    model = ModelConfig.for_profile(profile)
    return PipelineConfig(
        profile=profile,
        seed=seed,
        deterministic=deterministic,
        synthetic=SyntheticConfig(seed=seed),
        representation=RepresentationConfig(p_f=model.p_f, p_local=model.p_local, seed=seed),
        model=model,
        train={s: TrainConfig.for_stage(s, profile, seed=seed, deterministic=deterministic) for s in STAGES},
    )


def load_config(path=None, profile: str | None = None, seed: int | None = None,
                deterministic: bool | None = None) -> PipelineConfig:
    """Read ``path`` (optional) on top of profile defaults; keyword arguments win over the file."""
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"), interpolation=None)
    parser.optionxform = str
    base = Path(".")
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise InvalidInputError(f"config file not found: {path}")
        try:
            parser.read(path)
        except configparser.Error as exc:
            raise InvalidInputError(f"cannot parse config {path}: {exc}") from exc
        base = path.parent
    sections = {s: {k: parse_value(v) for k, v in parser[s].items()} for s in parser.sections()}
    allowed = {"pipeline", "synthetic", "split", "representation", "model", "ablation", "paths", *STAGES}
    unknown = set(sections) - allowed
    if unknown:
        raise InvalidInputError(f"unknown config sections: {sorted(unknown)}")

    top = sections.get("pipeline", {})
    extra = set(top) - {"profile", "seed", "deterministic"}
    if extra:
        raise InvalidInputError(f"[pipeline] has unknown keys: {sorted(extra)}")
    explicit_seed, deterministic_kw = seed, deterministic
    profile = profile or top.get("profile", "desk")
    seed = int(seed if seed is not None else top.get("seed", 0))
    deterministic = bool(deterministic if deterministic is not None else top.get("deterministic", True))
    cfg = default_config(profile, seed, deterministic)

    cfg.synthetic = replace(cfg.synthetic, **_checked("synthetic", sections.get("synthetic", {}), SyntheticConfig))
    split = sections.get("split", {})
    if set(split) - {"ratios"}:
        raise InvalidInputError(f"[split] has unknown keys: {sorted(set(split) - {'ratios'})}")
    cfg.ratios = tuple(float(r) for r in split.get("ratios", cfg.ratios))
    cfg.model = replace(cfg.model, **_checked("model", sections.get("model", {}), ModelConfig))
    rep = _checked("representation", sections.get("representation", {}), RepresentationConfig)
    rep.setdefault("p_f", cfg.model.p_f)
    rep.setdefault("p_local", cfg.model.p_local)
    cfg.representation = replace(cfg.representation, **rep)
    if (cfg.representation.p_f, cfg.representation.p_local) != (cfg.model.p_f, cfg.model.p_local):
        raise InvalidInputError("representation and model disagree on p_f / p_local")
    for stage in STAGES:
        cfg.train[stage] = replace(cfg.train[stage], **_checked(stage, sections.get(stage, {}), TrainConfig))
    cfg.ablation = AblationConfig(**_checked("ablation", sections.get("ablation", {}), AblationConfig))
    paths = sections.get("paths", {})
    if set(paths) - set(PATH_KEYS):
        raise InvalidInputError(f"[paths] has unknown keys: {sorted(set(paths) - set(PATH_KEYS))}")
    cfg.paths = {k: str(base / str(v)) for k, v in paths.items()}
    if explicit_seed is not None:
        # an explicit seed reseeds every stage, whatever the file says
        cfg.synthetic = replace(cfg.synthetic, seed=explicit_seed)
        cfg.representation = replace(cfg.representation, seed=explicit_seed)
        cfg.train = {k: replace(v, seed=explicit_seed) for k, v in cfg.train.items()}
    if deterministic_kw is not None:
        cfg.train = {k: replace(v, deterministic=bool(deterministic_kw)) for k, v in cfg.train.items()}
    return cfg


def _literal(v) -> str:
    if isinstance(v, str):
        return v
    return repr(v)


def dump_config(cfg: PipelineConfig) -> str:
    """Render ``cfg`` in the file format; ``load_config`` of the result reproduces it."""
    out = configparser.ConfigParser(interpolation=None)
    out.optionxform = str
    out["pipeline"] = {"profile": cfg.profile, "seed": str(cfg.seed), "deterministic": str(cfg.deterministic)}
    out["synthetic"] = {k: _literal(v) for k, v in asdict(cfg.synthetic).items()}
    out["split"] = {"ratios": repr(tuple(cfg.ratios))}
    out["representation"] = {k: _literal(v) for k, v in asdict(cfg.representation).items()}
    out["model"] = {k: _literal(v) for k, v in cfg.model.to_dict().items()}
    for stage, tc in cfg.train.items():
        out[stage] = {k: _literal(v) for k, v in asdict(tc).items() if k != "stage"}
    out["ablation"] = {k: _literal(v) for k, v in asdict(cfg.ablation).items()}
    if cfg.paths:
        out["paths"] = dict(cfg.paths)
    buf = io.StringIO()
    out.write(buf)
    return buf.getvalue()
