"""Experiment configuration: INI files, ``section.key=value`` overrides, validation."""
from __future__ import annotations

import configparser
import dataclasses
import io
from dataclasses import dataclass, field, fields, replace

from capolab.consensus import CapoConfig, allocate_budget
from capolab.envs import get_env
from capolab.optim import PpoConfig, TrpoConfig

METHODS = ("ppo", "ppo_kx", "trpo", "ppo_swa", "best_of_k", "capo_avg", "capo_logop")
CAPO_METHODS = ("capo_avg", "capo_logop")

# Fields the runner derives per batch; they are never read from a file.
_RUNTIME_FIELDS = {"ppo": {"shuffle_seed", "anneal_total_steps"}}


class ConfigError(ValueError):
    pass


@dataclass
class ValueConfig:
    hidden_dims: tuple = (64, 64)
    epochs: int = 0  # 0: same as ppo.epochs
    minibatches: int = 32
    lr: float = 3e-4
    lr_anneal: bool = True
    vf_coef: float = 0.5
    max_grad_norm: float = 0.5


@dataclass
class ExperimentConfig:
    method: str = "ppo"
    env_id: str = "pointmass"
    total_frames: int = 100_000
    seeds: tuple = (0,)
    num_envs: int = 8
    horizon: int = 512
    gamma: float = 0.99
    gae_lambda: float = 0.95
    hidden_dims: tuple = (64, 64)
    hidden_gain: float = 1.0
    eval_episodes: int = 20
    eval_stochastic: bool = False
    diagnostics: bool = True
    ppo: PpoConfig = field(default_factory=PpoConfig)
    trpo: TrpoConfig = field(default_factory=TrpoConfig)
    capo: CapoConfig = field(default_factory=CapoConfig)
    value: ValueConfig = field(default_factory=ValueConfig)

    @property
    def frames_per_batch(self):
        return self.num_envs * self.horizon

    @property
    def capo_warmup_frac(self):
        return self.capo.warmup_frac if self.method in CAPO_METHODS else 0.0

    def effective_capo(self):
        """CAPO settings with the aggregation implied by the method name."""
        if self.method == "capo_avg":
            return replace(self.capo, aggregation="param_avg")
        if self.method == "capo_logop":
            return replace(self.capo, aggregation="logop")
        return self.capo

    @property
    def value_epochs(self):
        return self.value.epochs if self.value.epochs > 0 else self.ppo.epochs

    def effective_ppo(self):
        """PPO settings as every update of this method will see them."""
        if self.method == "ppo_kx":
            return replace(self.ppo, epochs=self.capo.K * self.ppo.epochs)
        return self.ppo

    def validate(self):
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        try:
            get_env(self.env_id)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if self.num_envs < 1 or self.horizon < 1:
            raise ConfigError("num_envs and horizon must be >= 1")
        if self.total_frames < self.frames_per_batch:
            raise ConfigError(
                f"total_frames {self.total_frames} is less than one batch ({self.frames_per_batch})"
            )
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if self.eval_episodes < 1:
            raise ConfigError("eval_episodes must be >= 1")
        if self.method in ("best_of_k", *CAPO_METHODS) and self.capo.K < 2:
            raise ConfigError(f"{self.method} needs capo.K >= 2, got {self.capo.K}")
        if self.method in ("ppo", "ppo_kx", "ppo_swa", "best_of_k", *CAPO_METHODS) \
                and self.ppo.epochs < 1:
            raise ConfigError("ppo.epochs must be >= 1")
        if self.value.epochs < 0:
            raise ConfigError("value.epochs must be >= 0 (0 follows ppo.epochs)")
        if self.method in CAPO_METHODS:
            try:
                allocate_budget(self.total_frames, self.capo.warmup_frac, self.frames_per_batch)
            except ValueError as exc:
                raise ConfigError(str(exc)) from None
        return self


_SECTIONS = ("ppo", "trpo", "capo", "value")


def _parse_bool(text):
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def _coerce(default, text, key):
    try:
        if isinstance(default, bool):
            return _parse_bool(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            parts = [p for p in text.replace(" ", "").strip("()[]").split(",") if p]
            return tuple(int(p) for p in parts)
        return text.strip()
    except ValueError:
        raise ConfigError(f"bad value {text!r} for {key}") from None


def _set_field(obj, key, text, where):
    names = {f.name for f in fields(obj)}
    if key not in names or key in _RUNTIME_FIELDS.get(where, ()):
        raise ConfigError(f"unknown key {where}.{key}")
    current = getattr(obj, key)
    if dataclasses.is_dataclass(current):
        raise ConfigError(f"{where}.{key} is a section, not a key")
    return replace(obj, **{key: _coerce(current, text, f"{where}.{key}")})


def apply_override(cfg, assignment):
    """Apply one ``section.key=value`` (``experiment`` may be omitted)."""
    if "=" not in assignment:
        raise ConfigError(f"override must look like section.key=value, got {assignment!r}")
    lhs, value = assignment.split("=", 1)
    lhs = lhs.strip()
    section, key = lhs.split(".", 1) if "." in lhs else ("experiment", lhs)
    if section == "experiment":
        return _set_field(cfg, key, value, "experiment")
    if section not in _SECTIONS:
        raise ConfigError(f"unknown section {section!r}")
    sub = _set_field(getattr(cfg, section), key, value, section)
    return replace(cfg, **{section: sub})


def load_config(path=None, overrides=()):
    cfg = ExperimentConfig()
    if path is not None:
        parser = configparser.ConfigParser()
        parser.optionxform = str
        with open(path) as fh:
            parser.read_file(fh)
        for section in parser.sections():
            for key, value in parser.items(section):
                cfg = apply_override(cfg, f"{section}.{key}={value}")
    for item in overrides:
        cfg = apply_override(cfg, item)
    return cfg


def _fmt(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def dump_config(cfg, derived=None):
    """INI text of every setting (plus an optional ``[derived]`` section)."""
    parser = configparser.ConfigParser()
    parser.optionxform = str
    parser["experiment"] = {
        f.name: _fmt(getattr(cfg, f.name)) for f in fields(cfg) if f.name not in _SECTIONS
    }
    for section in _SECTIONS:
        sub = getattr(cfg, section)
        skip = _RUNTIME_FIELDS.get(section, ())
        parser[section] = {f.name: _fmt(getattr(sub, f.name)) for f in fields(sub) if f.name not in skip}
    if derived:
        parser["derived"] = {k: _fmt(v) for k, v in derived.items()}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()
