"""Flat ``key=value`` run configuration.

Blank lines and ``#`` comments are ignored; unknown keys, malformed values and
violated constraints raise :class:`ConfigError` naming the key and line.
"""
from __future__ import annotations

from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Optional

from .analytic_oracle import DATASETS, GaussianMixture, get_dataset, load_point_cloud
from .diffusion_sde import FAMILIES, ScheduleSpec
from .samplers import GRIDS, SOLVERS, SamplerConfig
from .tiny_nets import WEIGHTINGS, TrainConfig

DEFAULT_SEED = 42


class ConfigError(ValueError):
    def __init__(self, key: str, line: Optional[int], message: str):
        where = f"line {line}" if line is not None else "default value"
        super().__init__(f"{key} ({where}): {message}")
        self.key, self.line = key, line


def _ints(text: str) -> tuple[int, ...]:
    parts = [p.strip() for p in text.split(",") if p.strip()]
    return tuple(int(p) for p in parts)


@dataclass(frozen=True)
class RunConfig:
    dataset: str = "bimodal-1d"
    # schedule
    family: str = "LVP"
    beta_min: float = 0.1
    beta_max: float = 20.0
    sigma_min: float = 0.01
    sigma_max: float = 50.0
    rho: float = 7.0
    t_max: float = 1.0
    cosine_s: float = 0.008
    t_eps: float = 1e-3
    # networks and training
    hidden: tuple[int, ...] = (128, 128, 128)
    emb_dim: int = 32
    truncation: float = 1e-5
    adam_b1: float = 0.9
    adam_b2: float = 0.999
    adam_eps: float = 1e-8
    score_steps: int = 20000
    score_batch: int = 512
    score_lr: float = 1e-3
    score_weighting: str = "likelihood"
    score_lr_decay: str = "cosine"
    disc_steps: int = 5000
    disc_batch: int = 512
    disc_lr: float = 1e-3
    disc_weighting: str = "uniform"
    disc_lr_decay: str = "cosine"
    n_fake: int = 20000
    # sampling
    solver: str = "churn_alg1"
    nfe: int = 35
    grid: str = "rho"
    grid_rho: float = 7.0
    churn: float = 0.0
    s_tmin: float = 0.05
    s_tmax: float = 50.0
    s_noise: float = 1.0
    guidance_weight: float = 1.0
    score_bias: float = 0.0
    n_samples: int = 10000
    threshold: float = 0.5
    nfe_list: tuple[int, ...] = (16, 32, 64, 128)
    n_eval: int = 4000
    # run
    out_dir: str = ""
    seed: int = DEFAULT_SEED

    # -- derived views --------------------------------------------------------
    def schedule(self) -> ScheduleSpec:
        return ScheduleSpec(self.family, self.beta_min, self.beta_max, self.sigma_min, self.sigma_max,
                            self.rho, self.t_max, self.cosine_s)

    def _train(self, prefix: str, seed: int) -> TrainConfig:
        g = lambda k: getattr(self, f"{prefix}_{k}")  # noqa: E731
        return TrainConfig(g("batch"), g("steps"), g("lr"), self.adam_b1, self.adam_b2, self.adam_eps,
                           self.t_eps, g("weighting"), seed, self.truncation, self.hidden, self.emb_dim,
                           g("lr_decay"))

    def score_train(self) -> TrainConfig:
        return self._train("score", self.seed)

    def disc_train(self) -> TrainConfig:
        return self._train("disc", self.seed + 1)

    def sampler(self, guidance: str = "off", seed_offset: int = 3) -> SamplerConfig:
        return SamplerConfig(self.solver, self.nfe, self.grid, self.grid_rho, self.t_eps, self.churn,
                             self.s_tmin, self.s_tmax, self.s_noise, guidance, self.guidance_weight,
                             self.seed + seed_offset)

    def analytic_data(self) -> Optional[GaussianMixture]:
        return get_dataset(self.dataset) if self.dataset in DATASETS else None

    def data_source(self):
        """Mixture for named datasets, point cloud otherwise."""
        if self.dataset in DATASETS:
            return get_dataset(self.dataset)
        return load_point_cloud(self.dataset)

    def data_dim(self) -> int:
        src = self.data_source()
        return src.dim if isinstance(src, GaussianMixture) else src.shape[1]


_FIELDS = {f.name: f for f in fields(RunConfig)}
_INT_TUPLES = {"hidden", "nfe_list"}


def _convert(key: str, raw: str, line: Optional[int]):
    kind = _FIELDS[key].type
    try:
        if key in _INT_TUPLES:
            return _ints(raw)
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(key, line, f"cannot parse {raw!r} as {'integer list' if key in _INT_TUPLES else kind}") from None


# (keys, predicate, message); the first key names the error
_RULES = [
    (("family",), lambda c: c.family in FAMILIES, f"must be one of {FAMILIES}"),
    (("beta_min", "beta_max"), lambda c: 0 <= c.beta_min < c.beta_max, "need 0 <= beta_min < beta_max"),
    (("sigma_min", "sigma_max"), lambda c: 0 < c.sigma_min < c.sigma_max, "need 0 < sigma_min < sigma_max"),
    (("rho",), lambda c: c.rho > 0, "must be > 0"),
    (("t_max",), lambda c: c.t_max > 0, "must be > 0"),
    (("cosine_s",), lambda c: c.cosine_s > 0, "must be > 0"),
    (("t_eps",), lambda c: 0 < c.t_eps < c.t_max, "need 0 < t_eps < t_max"),
    (("hidden",), lambda c: len(c.hidden) >= 1 and all(h > 0 for h in c.hidden), "need positive layer widths"),
    (("emb_dim",), lambda c: c.emb_dim > 0 and c.emb_dim % 2 == 0, "must be a positive even integer"),
    (("truncation",), lambda c: 0 < c.truncation < 0.5, "must lie in (0, 0.5)"),
    (("adam_b1",), lambda c: 0 <= c.adam_b1 < 1, "must lie in [0, 1)"),
    (("adam_b2",), lambda c: 0 <= c.adam_b2 < 1, "must lie in [0, 1)"),
    (("adam_eps",), lambda c: c.adam_eps > 0, "must be > 0"),
    (("score_steps",), lambda c: c.score_steps >= 0, "must be >= 0"),
    (("disc_steps",), lambda c: c.disc_steps >= 0, "must be >= 0"),
    (("score_batch",), lambda c: c.score_batch >= 1, "must be >= 1"),
    (("disc_batch",), lambda c: c.disc_batch >= 1, "must be >= 1"),
    (("score_lr",), lambda c: c.score_lr >= 0, "must be >= 0"),
    (("disc_lr",), lambda c: c.disc_lr >= 0, "must be >= 0"),
    (("score_weighting",), lambda c: c.score_weighting in WEIGHTINGS, f"must be one of {WEIGHTINGS}"),
    (("disc_weighting",), lambda c: c.disc_weighting in WEIGHTINGS, f"must be one of {WEIGHTINGS}"),
    (("score_lr_decay",), lambda c: c.score_lr_decay in ("none", "cosine"), "must be 'none' or 'cosine'"),
    (("disc_lr_decay",), lambda c: c.disc_lr_decay in ("none", "cosine"), "must be 'none' or 'cosine'"),
    (("n_fake",), lambda c: c.n_fake >= 1, "must be >= 1"),
    (("solver",), lambda c: c.solver in SOLVERS, f"must be one of {SOLVERS}"),
    (("nfe",), lambda c: c.nfe >= 1, "must be >= 1"),
    (("grid",), lambda c: c.grid in GRIDS, f"must be one of {GRIDS}"),
    (("grid_rho",), lambda c: c.grid_rho > 0, "must be > 0"),
    (("churn",), lambda c: c.churn >= 0, "must be >= 0"),
    (("s_tmin", "s_tmax"), lambda c: 0 <= c.s_tmin <= c.s_tmax, "need 0 <= s_tmin <= s_tmax"),
    (("s_noise",), lambda c: c.s_noise > 0, "must be > 0"),
    (("n_samples",), lambda c: c.n_samples >= 1, "must be >= 1"),
    (("threshold",), lambda c: 0 < c.threshold < 1, "must lie in (0, 1)"),
    (("nfe_list",), lambda c: all(v >= 1 for v in c.nfe_list), "entries must be >= 1"),
    (("n_eval",), lambda c: c.n_eval >= 2, "must be >= 2"),
    (("seed",), lambda c: 0 <= c.seed < 2**64, "must be an unsigned 64-bit integer"),
    (("dataset",), lambda c: c.dataset in DATASETS or Path(c.dataset).is_file(),
     f"must name a built-in dataset {sorted(DATASETS)} or an existing CSV file"),
]


def validate(cfg: RunConfig, lines: Optional[dict[str, int]] = None) -> RunConfig:
    lines = lines or {}
    for keys, ok, message in _RULES:
        if not ok(cfg):
            # report the explicitly set key when there is one
            key = next((k for k in keys[::-1] if k in lines), keys[0])
            raise ConfigError(key, lines.get(key), message)
    return cfg


def parse_config(text: str) -> RunConfig:
    values, lines = {}, {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(line, lineno, "expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(key, lineno, "unknown key")
        if key in values:
            raise ConfigError(key, lineno, f"duplicate key (first set on line {lines[key]})")
        values[key] = _convert(key, value, lineno)
        lines[key] = lineno
    return validate(RunConfig(**values), lines)


def load_config(path: Optional[str | Path]) -> RunConfig:
    return parse_config(Path(path).read_text()) if path else validate(RunConfig())


def _format(value) -> str:
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return format(value, ".17g")
    return str(value)


def serialize_config(cfg: RunConfig) -> str:
    return "".join(f"{f.name}={_format(getattr(cfg, f.name))}\n" for f in fields(cfg))


def override(cfg: RunConfig, **changes) -> RunConfig:
    changes = {k: v for k, v in changes.items() if v is not None}
    return validate(replace(cfg, **changes))
