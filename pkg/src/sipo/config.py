"""Run configuration: flat ``section.key = value`` text files.

Unset keys take environment-dependent defaults; unknown keys, bad types and
out-of-range values are rejected with the offending key named. The resolved
configuration is written back out in the same format, and reading that
echo reproduces the identical configuration.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, fields, replace

from . import intrinsic as it
from .trainer import EnvSetup, TrainerConfig

ALGOS = ("sipo-rbf", "sipo-wd", "pbt", "ppo")
ENVS = ("gridworld", "nav")
# length unit of the navigation arena; see the decisions ledger
NAV_SCALE = math.sqrt(10.0)
AUTO = "auto"


class ConfigError(ValueError):
    def __init__(self, key, message):
        super().__init__(f"{key}: {message}")
        self.key = key


def env_defaults(env):
    """Hyperparameters that differ between the two environments."""
    if env == "gridworld":
        return {"train.gamma": 0.99, "train.entropy": 0.01, "train.n_envs": 8, "train.steps": 80_000,
                "train.delta": AUTO, "intrinsic.alpha": AUTO}
    return {"train.gamma": 0.997, "train.entropy": 0.0, "train.n_envs": 4, "train.steps": 400_000,
            "train.delta": AUTO, "intrinsic.alpha": AUTO}


def _schema():
    keys = {"algo": str, "seed": int, "out": str}
    for f in fields(EnvSetup):
        keys[f"env.{f.name}"] = {"name": str, "grid_size": int, "n_landmarks": int, "seed": int,
                                 "scale": float, "separation": float}[f.name]
    for f in fields(TrainerConfig):
        if f.name == "intrinsic":
            continue
        keys[f"train.{f.name}"] = int if isinstance(f.default, int) and not isinstance(f.default, bool) else float
    keys["train.c1"] = float
    keys["train.c2"] = float
    for f in fields(it.IntrinsicConfig):
        keys[f"intrinsic.{f.name}"] = {str: str, bool: bool}.get(type(f.default), float)
        if isinstance(f.default, int) and not isinstance(f.default, bool):
            keys[f"intrinsic.{f.name}"] = int
    return keys


SCHEMA = _schema()
_OPTIONAL = {"env.seed", "train.freeze_lambda"}
_AUTO_OK = {"train.delta", "intrinsic.alpha", "env.scale", "train.population", "intrinsic.variant"}


def _coerce(key, raw):
    typ = SCHEMA[key]
    text = raw.strip()
    if key in _OPTIONAL and text.lower() in ("", "none"):
        return None
    if key in _AUTO_OK and text.lower() == AUTO:
        return AUTO
    try:
        if typ is bool:
            if text.lower() in ("true", "1", "yes"):
                return True
            if text.lower() in ("false", "0", "no"):
                return False
            raise ValueError
        if typ is int:
            return int(text)
        if typ is float:
            return float(text)
        return text
    except ValueError:
        raise ConfigError(key, f"expected {typ.__name__}, got {raw.strip()!r}") from None


def _resolve_key(key):
    if key in SCHEMA:
        return key
    hits = [k for k in SCHEMA if k.split(".", 1)[-1] == key and "." in k]
    if len(hits) == 1:
        return hits[0]
    raise ConfigError(key, "unknown configuration key")


def parse_text(text):
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}", "expected 'key = value'")
        k, v = line.split("=", 1)
        key = _resolve_key(k.strip())
        values[key] = _coerce(key, v)
    return values


@dataclass
class RunConfig:
    algo: str
    env: EnvSetup
    trainer: TrainerConfig
    seed: int = 0
    out: str = "runs/default"
    c1: float = 1.2
    c2: float = 1.0
    delta_auto: bool = False
    alpha_auto: bool = False

    def to_values(self):
        v = {"algo": self.algo, "seed": self.seed, "out": self.out}
        for f in fields(EnvSetup):
            v[f"env.{f.name}"] = getattr(self.env, f.name)
        for f in fields(TrainerConfig):
            if f.name != "intrinsic":
                v[f"train.{f.name}"] = getattr(self.trainer, f.name)
        v["train.c1"], v["train.c2"] = self.c1, self.c2
        for f in fields(it.IntrinsicConfig):
            v[f"intrinsic.{f.name}"] = getattr(self.trainer.intrinsic, f.name)
        if self.delta_auto:
            v["train.delta"] = AUTO
        if self.alpha_auto:
            v["intrinsic.alpha"] = AUTO
        return v

    def to_text(self):
        lines = []
        for k, val in sorted(self.to_values().items()):
            if val is None:
                val = "none"
            elif isinstance(val, bool):
                val = "true" if val else "false"
            elif isinstance(val, float):
                val = repr(val)
            lines.append(f"{k} = {val}")
        return "\n".join(lines) + "\n"


def default_variant(algo, env):
    if algo == "sipo-wd":
        return "wd"
    return "final-l2" if env == "nav" else "rbf"


def resolve(values):
    """Turn parsed ``values`` into a validated :class:`RunConfig`."""
    values = dict(values)
    algo = values.get("algo", "sipo-rbf")
    if algo not in ALGOS:
        raise ConfigError("algo", f"must be one of {', '.join(ALGOS)}")
    env_name = values.get("env.name", "gridworld")
    if env_name not in ENVS:
        raise ConfigError("env.name", f"must be one of {', '.join(ENVS)}")
    merged = {**env_defaults(env_name), **values}

    n_landmarks = merged.get("env.n_landmarks", 4)
    scale = merged.get("env.scale", AUTO)
    if scale == AUTO:
        scale = NAV_SCALE if env_name == "nav" else 1.0
    env = EnvSetup(env_name, merged.get("env.grid_size", 5), n_landmarks, merged.get("env.seed"), scale,
                   merged.get("env.separation", EnvSetup.separation))
    if env.grid_size < 2:
        raise ConfigError("env.grid_size", "must be >= 2")
    if env.n_landmarks < 1:
        raise ConfigError("env.n_landmarks", "must be >= 1")
    if not env.scale > 0:
        raise ConfigError("env.scale", "must be positive")
    if not env.separation > 0:
        raise ConfigError("env.separation", "must be positive")

    variant = merged.get("intrinsic.variant", AUTO)
    if variant == AUTO:
        variant = default_variant(algo, env_name)
    if variant not in it.VARIANTS:
        raise ConfigError("intrinsic.variant", f"must be one of {', '.join(it.VARIANTS)}")
    if algo == "sipo-wd" and variant != "wd" or algo == "sipo-rbf" and variant == "wd":
        raise ConfigError("intrinsic.variant", f"{variant!r} conflicts with algo {algo!r}")

    delta = merged.get("train.delta")
    alpha = merged.get("intrinsic.alpha")
    delta_auto = delta == AUTO
    alpha_auto = alpha == AUTO
    if algo == "ppo":
        delta, alpha, delta_auto, alpha_auto = 0.0, 0.0, False, False
    elif env_name == "nav" and variant == "final-l2":
        # final states that touch different landmarks are at least c apart
        c = env.separation * env.scale
        delta = c * c if delta_auto else delta
        alpha = 1.0 / (merged.get("train.lambda_max", 10.0) * delta) if alpha_auto else alpha
        delta_auto = alpha_auto = False
    delta = 0.0 if delta_auto else delta
    alpha = 0.0 if alpha_auto else alpha

    population = merged.get("train.population", AUTO)
    if population == AUTO:
        population = n_landmarks if env_name == "nav" else 4

    ikw = {}
    for f in fields(it.IntrinsicConfig):
        key = f"intrinsic.{f.name}"
        if key in merged:
            ikw[f.name] = merged[key]
    ikw.update(variant=variant, alpha=alpha)
    try:
        icfg = it.IntrinsicConfig(**ikw)
    except ValueError as exc:
        raise ConfigError("intrinsic", str(exc)) from None

    tkw = {}
    for f in fields(TrainerConfig):
        key = f"train.{f.name}"
        if key in merged and f.name not in ("delta", "population"):
            tkw[f.name] = merged[key]
    tkw.update(delta=delta, population=population, intrinsic=icfg)
    for name, val in tkw.items():
        if name in ("lambda_max", "actor_lr", "critic_lr", "lagrange_lr") and not val > 0:
            raise ConfigError(f"train.{name}", "must be positive")
    try:
        tcfg = TrainerConfig(**tkw)
    except ValueError as exc:
        msg = str(exc)
        key = next((f"train.{f.name}" for f in fields(TrainerConfig) if msg.startswith(f.name)), "train")
        raise ConfigError(key, msg) from None
    if algo == "ppo" and tcfg.freeze_lambda not in (None, 0.0):
        raise ConfigError("train.freeze_lambda", "plain PPO has no multipliers")

    c1 = merged.get("train.c1", 1.2)
    c2 = merged.get("train.c2", 1.0)
    if not c1 > 0 or not c2 > 0:
        raise ConfigError("train.c1" if not c1 > 0 else "train.c2", "must be positive")
    return RunConfig(algo, env, tcfg, int(merged.get("seed", 0)), merged.get("out", "runs/default"),
                     c1, c2, delta_auto, alpha_auto)


def load_config(path=None, overrides=None):
    """Read ``path`` (may be None for all defaults) and apply ``overrides``."""
    values = {}
    if path is not None:
        with open(path) as fh:
            values = parse_text(fh.read())
    for k, v in (overrides or {}).items():
        if v is None:
            continue
        key = _resolve_key(k)
        values[key] = _coerce(key, str(v)) if isinstance(v, str) else v
    return resolve(values)


def with_calibration(cfg, delta, alpha):
    """Replace automatic threshold / scale with calibrated numbers."""
    t = replace(cfg.trainer, delta=float(delta) if cfg.delta_auto else cfg.trainer.delta,
                intrinsic=replace(cfg.trainer.intrinsic,
                                  alpha=float(alpha) if cfg.alpha_auto else cfg.trainer.intrinsic.alpha))
    return replace(cfg, trainer=t, delta_auto=False, alpha_auto=False)
