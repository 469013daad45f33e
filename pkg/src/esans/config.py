"""Run configuration: TOML parsing, validation, defaulting, digests.

One TOML file configures every pipeline stage. Unknown keys are rejected;
every violation is reported with its dotted key path. The global ``seed``
seeds every stage.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import tomli

from .behavior import SkipGramConfig
from .data import SyntheticSpec
from .edis import InterpolationConfig
from .errors import ConfigError, EsansError, InvalidSpec
from .model import EbrConfig
from .msac import MsacConfig
from .sampler import SamplerConfig

_SECTION_FIELDS = {
    "synthetic": {
        "num_users": int,
        "num_items": int,
        "num_groups": int,
        "modal_dims": list,
        "intra_group_noise": float,
        "interactions_per_user": int,
    },
    "behavior": {
        "dim": int,
        "window": int,
        "max_gap_seconds": int,
        "negatives_per_pair": int,
        "epochs": int,
        "learning_rate": float,
    },
    "msac": {
        "d_m": int,
        "k_primary": int,
        "k_secondary": int,
        "beta_it": float,
        "beta_ig": float,
        "beta_gt": float,
        "align_temperature": float,
        "learning_rate": float,
        "batch_size": int,
        "epochs": int,
        "kmeans_restarts": int,
    },
    "sampler": {
        "clusters_per_positive": int,
        "samples_per_cluster": int,
        "hard_per_positive": int,
        "gamma": float,
        "epsilon_d": float,
    },
    "edis": {"eta": float, "lam": float},
    "ebr": {
        "tau": float,
        "learning_rate": float,
        "epochs": int,
        "batch_size": int,
        "embed_dim": int,
        "hidden_dim": int,
        "output_dim": int,
        "max_seq_len": int,
        "profile_buckets": int,
        "negative_mode": str,
        "uniform_negatives": int,
        "use_simple_virtuals": bool,
        "use_hard_virtuals": bool,
        "use_hard_negatives": bool,
    },
    "eval": {"k_values": list, "holdout_per_user": int},
}


@dataclass(frozen=True)
class EvalConfig:
    k_values: tuple[int, ...] = (50, 200)
    holdout_per_user: int = 1

    def validate(self) -> None:
        if not self.k_values or min(self.k_values) < 1:
            raise InvalidSpec("k_values must be positive")
        if self.holdout_per_user < 1:
            raise InvalidSpec("holdout_per_user must be >= 1")


@dataclass
class RunConfig:
    seed: int = 0
    synthetic: SyntheticSpec = field(
        default_factory=lambda: SyntheticSpec(num_users=200, num_items=500, num_groups=10)
    )
    behavior: SkipGramConfig = field(default_factory=SkipGramConfig)
    msac: MsacConfig = field(default_factory=MsacConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    edis: InterpolationConfig = field(default_factory=InterpolationConfig)
    ebr: EbrConfig = field(default_factory=EbrConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def resolved(self) -> dict:
        blob = asdict(self)
        blob["synthetic"]["modal_dims"] = list(self.synthetic.modal_dims)
        blob["eval"]["k_values"] = list(self.eval.k_values)
        return blob

    def digest(self) -> str:
        canonical = json.dumps(self.resolved(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def _coerce(value, want, path: str, problems: list[str]):
    if want is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if want is int and isinstance(value, bool):
        problems.append(f"{path}: expected int, got bool")
        return None
    if not isinstance(value, want):
        problems.append(f"{path}: expected {want.__name__}, got {type(value).__name__}")
        return None
    return value


def parse_config(raw: dict) -> RunConfig:
    """Validate a parsed TOML mapping into a RunConfig, or raise ConfigError
    listing every problem by key path."""
    problems: list[str] = []
    seed = raw.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool):
        problems.append("seed: expected int")
        seed = 0
    for key in raw:
        if key != "seed" and key not in _SECTION_FIELDS:
            problems.append(f"{key}: unknown section")

    sections: dict[str, dict] = {}
    for section, fields in _SECTION_FIELDS.items():
        given = raw.get(section, {})
        if not isinstance(given, dict):
            problems.append(f"{section}: expected a table")
            given = {}
        out = {}
        for key, value in given.items():
            if key not in fields:
                problems.append(f"{section}.{key}: unknown key")
                continue
            coerced = _coerce(value, fields[key], f"{section}.{key}", problems)
            if coerced is not None:
                out[key] = coerced
        sections[section] = out

    if "modal_dims" in sections["synthetic"]:
        dims = sections["synthetic"]["modal_dims"]
        if len(dims) != 3 or not all(isinstance(d, int) for d in dims):
            problems.append("synthetic.modal_dims: expected 3 integers")
            sections["synthetic"].pop("modal_dims")
        else:
            sections["synthetic"]["modal_dims"] = tuple(dims)
    if "k_values" in sections["eval"]:
        ks = sections["eval"]["k_values"]
        if not ks or not all(isinstance(k, int) and k > 0 for k in ks):
            problems.append("eval.k_values: expected positive integers")
            sections["eval"].pop("k_values")
        else:
            sections["eval"]["k_values"] = tuple(ks)

    cfg = RunConfig(
        seed=seed,
        synthetic=SyntheticSpec(**{"num_users": 200, "num_items": 500, "num_groups": 10,
                                   **sections["synthetic"], "seed": seed}),
        behavior=SkipGramConfig(**sections["behavior"], seed=seed),
        msac=MsacConfig(**sections["msac"], seed=seed),
        sampler=SamplerConfig(**sections["sampler"], seed=seed),
        edis=InterpolationConfig(**sections["edis"], seed=seed),
        ebr=EbrConfig(**sections["ebr"], seed=seed),
        eval=EvalConfig(**sections["eval"]),
    )
    cfg = replace(
        cfg,
        ebr=replace(cfg.ebr, sampler=cfg.sampler, interpolation=cfg.edis, seed=seed),
    )

    for name, sub in (
        ("synthetic", cfg.synthetic),
        ("behavior", cfg.behavior),
        ("msac", cfg.msac),
        ("sampler", cfg.sampler),
        ("edis", cfg.edis),
        ("ebr", cfg.ebr),
        ("eval", cfg.eval),
    ):
        try:
            sub.validate()
        except EsansError as exc:
            problems.append(f"{name}: {exc}")

    if problems:
        raise ConfigError(problems)
    return cfg


def validate_config(path: str | Path) -> RunConfig:
    """Load, validate and normalize a TOML run config."""
    try:
        raw = tomli.loads(Path(path).read_text(encoding="utf-8"))
    except tomli.TOMLDecodeError as exc:
        raise ConfigError([f"toml: {exc}"]) from exc
    return parse_config(raw)
