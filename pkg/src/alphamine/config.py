"""Plain-text ``key = value`` job configuration."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .engine import SearchConfig


class ConfigError(ValueError):
    def __init__(self, errors: list[str]):
        self.errors = errors
        super().__init__("; ".join(errors))


@dataclass
class JobConfig:
    # data source: a CSV path, or synth_days > 0 for a generated market
    data_csv: str = ""
    synth_days: int = 0
    synth_stocks: int = 30
    synth_seed: int = 0
    synth_plant: str = ""
    synth_strength: float = 0.0
    # search
    population_size: int = 200
    warm_start_k: int = 5
    generations_per_run: int = 30
    runs_per_depth: int = 5
    max_depth: int = 3
    ic_min_gene: float = 0.02
    ic_min_report: float = 0.05
    sim_max: float = 0.7
    pca_threshold: float = 0.9
    mutation_prob: float = 0.0
    horizon: int = 1
    seed: int = 0
    workers: int = 1
    # backtest
    horizons: tuple[int, ...] = (1, 5)
    top_k: int = 10
    cost_rate: float = 0.003
    folds: int = 10
    top_alphas: int = 150
    output_dir: str = "out"

    def search_config(self) -> SearchConfig:
        names = set(SearchConfig.field_names())
        return SearchConfig(**{k: v for k, v in dataclasses.asdict(self).items() if k in names})

    def validate(self) -> list[str]:
        errs = []
        if bool(self.data_csv) == (self.synth_days > 0):
            errs.append("set exactly one data source: data_csv or synth_days")
        if self.synth_days and (self.synth_days < 80 or self.synth_stocks < 10):
            errs.append("synthetic data needs synth_days >= 80 and synth_stocks >= 10")
        if not 0 <= self.synth_strength <= 1:
            errs.append("synth_strength must lie in [0, 1]")
        errs.extend(self.search_config().validate())
        if not self.horizons or min(self.horizons) < 1:
            errs.append("horizons must be positive integers")
        if self.top_k < 1 or self.folds < 2 or self.top_alphas < 1:
            errs.append("top_k >= 1, folds >= 2 and top_alphas >= 1 are required")
        if self.cost_rate < 0:
            errs.append("cost_rate must be >= 0")
        return errs

    # -- text form ---------------------------------------------------------

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, float):
                v = repr(float(v))
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, overrides: dict[str, str] | None = None) -> "JobConfig":
        raw: dict[str, str] = {}
        errs: list[str] = []
        for n, line in enumerate(text.splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                errs.append(f"line {n}: expected key = value")
                continue
            k, v = (s.strip() for s in line.split("=", 1))
            raw[k] = v
        raw.update(overrides or {})
        return cls.from_mapping(raw, errs)

    @classmethod
    def from_mapping(cls, raw: dict[str, str], errs: list[str] | None = None) -> "JobConfig":
        errs = list(errs or [])
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for k, v in raw.items():
            if k not in known:
                errs.append(f"unknown key {k!r}")
                continue
            default = known[k].default
            try:
                if isinstance(default, tuple):
                    kwargs[k] = tuple(int(x) for x in v.split(",") if x.strip())
                elif isinstance(default, bool):
                    kwargs[k] = v.lower() in ("1", "true", "yes")
                elif isinstance(default, int):
                    kwargs[k] = int(v)
                elif isinstance(default, float):
                    kwargs[k] = float(v)
                else:
                    kwargs[k] = v
            except ValueError:
                errs.append(f"{k}: cannot parse {v!r}")
        cfg = cls(**kwargs)
        errs.extend(cfg.validate())
        if errs:
            raise ConfigError(errs)
        return cfg

    @classmethod
    def load(cls, path: str | Path, overrides: dict[str, str] | None = None) -> "JobConfig":
        return cls.from_text(Path(path).read_text(), overrides)
