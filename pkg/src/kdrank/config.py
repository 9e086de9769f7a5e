"""INI-style run configuration: parsing, validation and canonical printing.

Sections and keys (all optional, defaults shown by ``kdrank print-config``):

    [dataset]   num_classes input_dim samples_per_class cluster_spread
                inter_class_correlation group_size seed
    [teacher]   hidden seed learning_rate momentum weight_decay epochs batch_size
    [student]   hidden seed
    [optimizer] learning_rate momentum weight_decay epochs batch_size eval_every
    [weights]   alpha beta gamma temperature scale_t2
    [ranking]   k form subset normalize norm_eps

``[optimizer]`` drives student distillation; the teacher carries its own
optimizer keys. ``hidden`` is a comma-separated list of layer widths.
"""
from __future__ import annotations

import configparser
import dataclasses
from pathlib import Path

from .data import DatasetSpec
from .distill import RunConfig
from .errors import ConfigError
from .losses import LossWeights, RankingConfig, RankingForm, Subset
from .nn import SgdConfig

_SGD_KEYS = ("learning_rate", "momentum", "weight_decay", "epochs", "batch_size")

KEYS = {
    "dataset": (
        "num_classes",
        "input_dim",
        "samples_per_class",
        "cluster_spread",
        "inter_class_correlation",
        "group_size",
        "seed",
    ),
    "teacher": ("hidden", "seed", *_SGD_KEYS),
    "student": ("hidden", "seed"),
    "optimizer": (*_SGD_KEYS, "eval_every"),
    "weights": ("alpha", "beta", "gamma", "temperature", "scale_t2"),
    "ranking": ("k", "form", "subset", "normalize", "norm_eps"),
}

_INT_KEYS = {"num_classes", "input_dim", "samples_per_class", "group_size", "seed", "epochs", "batch_size", "eval_every"}
_BOOL_KEYS = {"scale_t2", "normalize"}
_BOOLS = {"true": True, "yes": True, "on": True, "1": True, "false": False, "no": False, "off": False, "0": False}


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


def _convert(section: str, key: str, raw: str):
    raw = raw.strip()
    try:
        if key == "hidden":
            return tuple(int(v) for v in raw.split(",") if v.strip()) if raw else ()
        if key in _BOOL_KEYS:
            return _BOOLS[raw.lower()]
        if key in _INT_KEYS:
            return int(raw)
        if key == "form":
            return RankingForm(raw.lower())
        if key == "subset":
            return Subset.parse(raw)
        return float(raw)
    except (ValueError, KeyError):
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r}") from None


def to_sections(cfg: RunConfig) -> dict[str, dict[str, object]]:
    ds, t, s, w, rk = cfg.dataset, cfg.teacher_sgd, cfg.student_sgd, cfg.weights, cfg.ranking
    return {
        "dataset": {k: getattr(ds, k) for k in KEYS["dataset"]},
        "teacher": {"hidden": cfg.teacher_hidden, "seed": t.seed, **{k: getattr(t, k) for k in _SGD_KEYS}},
        "student": {"hidden": cfg.student_hidden, "seed": s.seed},
        "optimizer": {**{k: getattr(s, k) for k in _SGD_KEYS}, "eval_every": cfg.eval_every},
        "weights": {k: getattr(w, k) for k in KEYS["weights"]},
        "ranking": {
            "k": rk.steepness,
            "form": rk.form.value,
            "subset": str(rk.subset),
            "normalize": rk.normalize_inputs,
            "norm_eps": rk.norm_eps,
        },
    }


def from_sections(sections: dict[str, dict[str, object]], base: RunConfig | None = None) -> RunConfig:
    """Overlay already-typed section values on ``base`` (defaults if None)."""
    merged = to_sections(base or RunConfig())
    for section, values in sections.items():
        if section not in KEYS:
            raise ConfigError(f"unknown section [{section}]")
        for key, value in values.items():
            if key not in KEYS[section]:
                raise ConfigError(f"unknown key [{section}] {key}")
            merged[section][key] = value
    d, t, s, o, w, r = (merged[k] for k in ("dataset", "teacher", "student", "optimizer", "weights", "ranking"))
    return RunConfig(
        dataset=DatasetSpec(**d),
        teacher_hidden=t["hidden"],
        student_hidden=s["hidden"],
        teacher_sgd=SgdConfig(seed=t["seed"], **{k: t[k] for k in _SGD_KEYS}),
        student_sgd=SgdConfig(seed=s["seed"], **{k: o[k] for k in _SGD_KEYS}),
        weights=LossWeights(**w),
        ranking=RankingConfig(
            steepness=r["k"],
            form=r["form"],
            subset=r["subset"] if isinstance(r["subset"], Subset) else Subset.parse(str(r["subset"])),
            normalize_inputs=r["normalize"],
            norm_eps=r["norm_eps"],
        ),
        eval_every=o["eval_every"],
    )


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, default_section="__defaults__")
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    sections = {}
    for section in parser.sections():
        if section not in KEYS:
            raise ConfigError(f"unknown section [{section}]")
        values = {}
        for key, raw in parser.items(section):
            if key not in KEYS[section]:
                raise ConfigError(f"unknown key [{section}] {key}")
            values[key] = _convert(section, key, raw)
        sections[section] = values
    return from_sections(sections, base)


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text)


def format_config(cfg: RunConfig) -> str:
    out = []
    for section, values in to_sections(cfg).items():
        out.append(f"[{section}]")
        out += [f"{k} = {_fmt(v)}" for k, v in values.items()]
        out.append("")
    return "\n".join(out)


def with_seed(cfg: RunConfig, role: str, seed: int) -> RunConfig:
    """Override the seed used by ``role`` (dataset, teacher or student)."""
    if role == "dataset":
        return dataclasses.replace(cfg, dataset=dataclasses.replace(cfg.dataset, seed=seed))
    if role == "teacher":
        return dataclasses.replace(cfg, teacher_sgd=dataclasses.replace(cfg.teacher_sgd, seed=seed))
    if role == "student":
        return dataclasses.replace(cfg, student_sgd=dataclasses.replace(cfg.student_sgd, seed=seed))
    raise ValueError(role)
