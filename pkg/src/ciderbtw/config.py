"""Run configuration: built-in defaults < key=value config file < command-line flags."""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from pathlib import Path

from .corpus import ValidationError
from .ngram import DEFAULT_SIGMA
from .simset import STRATEGIES
from .weights import (
    ALPHA_NS,
    ALPHA_R,
    ALPHA_W,
    LAMBDA_W,
    LTW_AMPLITUDE,
    LTW_BEGIN,
    LTW_END,
    SET_SIZE,
    Hyperparameters,
)

PATH_FIELDS = ("annotations", "split_file", "embeddings", "captions", "cache", "simsets")


@dataclass(frozen=True)
class RunConfig:
    annotations: str | None = None
    split_file: str | None = None
    embeddings: str | None = None
    captions: str | None = None
    cache: str | None = None
    simsets: str | None = None
    out: str = "."
    strategy: str = "cider"
    splits: str = "train,val,test"
    k: int = SET_SIZE
    lambda_w: float = LAMBDA_W
    alpha_w: float = ALPHA_W
    alpha_r: float = ALPHA_R
    alpha_ns: float = ALPHA_NS
    ltw_amplitude: float = LTW_AMPLITUDE
    ltw_begin: int = LTW_BEGIN
    ltw_end: int = LTW_END
    sigma: float = DEFAULT_SIGMA
    min_count: int = 1
    neg_source: str = "own"
    seed: int = 0
    threads: int = 1
    bench_sizes: str = ""

    @property
    def hyperparameters(self) -> Hyperparameters:
        return Hyperparameters(
            self.lambda_w, self.alpha_w, self.alpha_r, self.alpha_ns,
            self.ltw_amplitude, self.ltw_begin, self.ltw_end, self.k,
        )

    def split_list(self) -> list[str]:
        return [s for s in self.splits.split(",") if s]

    def validate(self, required: tuple[str, ...] = ()) -> "RunConfig":
        for name in required:
            if getattr(self, name) is None:
                raise ValidationError(f"missing required setting {name!r}")
        for name in PATH_FIELDS:
            value = getattr(self, name)
            if value is not None and not Path(value).exists():
                raise ValidationError(f"{name}: no such file {value}")
        if self.k < 1:
            raise ValidationError(f"k must be >= 1, got {self.k}")
        if self.threads < 1:
            raise ValidationError(f"threads must be >= 1, got {self.threads}")
        if self.strategy not in STRATEGIES:
            raise ValidationError(f"unknown strategy {self.strategy!r}; expected one of {STRATEGIES}")
        self.hyperparameters.ltw  # validates the LTW range
        return self


def _coerce(name: str, raw: str):
    types = {f.name: f.type for f in fields(RunConfig)}
    kind = types[name]
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise ValidationError(f"config {name}: expected {kind}, got {raw!r}") from None
    return raw


def read_config_file(path) -> dict:
    known = {f.name for f in fields(RunConfig)}
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValidationError(f"{path}:{lineno}: expected key=value")
            key, value = (x.strip() for x in line.split("=", 1))
            key = key.replace("-", "_")
            if key not in known:
                raise ValidationError(f"{path}:{lineno}: unknown setting {key!r}")
            out[key] = _coerce(key, value)
    return out


def resolve(config_file=None, **flags) -> RunConfig:
    """Merge defaults, an optional config file and flags (``None`` flags are unset)."""
    cfg = RunConfig()
    if config_file is not None:
        cfg = replace(cfg, **read_config_file(config_file))
    return replace(cfg, **{k: v for k, v in flags.items() if v is not None})
