"""Flat ``key = value`` run configuration.

Keys are ``engine.<field>`` and ``train.<field>`` for the fields of
:class:`EngineConfig` and :class:`TrainConfig`, plus ``noise`` (a
``kind:value`` spec), ``seed`` and ``suite.noises`` (comma-separated specs
for ``bench``). ``#`` starts a comment. Unknown keys are rejected.
"""

import dataclasses
from dataclasses import dataclass, field

from .engine import EngineConfig
from .noise import NoiseSpec
from .trainer import TrainConfig

DEFAULT_SUITE = (
    "gaussian:15", "gaussian:25", "gaussian:50",
    "spatial_gaussian:45", "spatial_gaussian:50", "spatial_gaussian:55",
    "poisson:2.5", "poisson:3", "poisson:3.5",
    "speckle:0.02", "speckle:0.03", "speckle:0.04",
    "salt_pepper:0.012", "salt_pepper:0.016", "salt_pepper:0.02",
    "mixture:1", "mixture:2", "mixture:3", "mixture:4",
)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    engine: EngineConfig = EngineConfig()
    train: TrainConfig = TrainConfig()
    suite: tuple = DEFAULT_SUITE
    seed: int = 0
    extra: dict = field(default_factory=dict, compare=False)

    @property
    def noise(self):
        return self.train.noise


def _fields(cls):
    return {f.name: f.type for f in dataclasses.fields(cls)}


_ENGINE = _fields(EngineConfig)
_TRAIN = {k: v for k, v in _fields(TrainConfig).items() if k != "noise"}


def _convert(key, typ, text):
    try:
        if typ is int:
            return int(text)
        if typ is float:
            return float(text)
        return str(text)
    except ValueError as e:
        raise ConfigError(f"{key}: cannot parse {text!r} as {typ.__name__}") from e


def _fmt(v):
    return repr(v) if isinstance(v, float) else str(v)


def known_keys():
    return (sorted(f"engine.{k}" for k in _ENGINE) + sorted(f"train.{k}" for k in _TRAIN)
            + ["noise", "seed", "suite.noises"])


def apply_overrides(cfg, pairs):
    """Return ``cfg`` with ``(key, text)`` pairs applied, validating every key."""
    engine, train = {}, {}
    noise = None
    seed, suite = cfg.seed, cfg.suite
    for key, text in pairs:
        key, text = key.strip(), text.strip()
        if key.startswith("engine.") and key[7:] in _ENGINE:
            engine[key[7:]] = _convert(key, _ENGINE[key[7:]], text)
        elif key.startswith("train.") and key[6:] in _TRAIN:
            train[key[6:]] = _convert(key, _TRAIN[key[6:]], text)
        elif key == "noise":
            noise = text
        elif key == "seed":
            seed = _convert(key, int, text)
        elif key == "suite.noises":
            suite = tuple(s.strip() for s in text.split(",") if s.strip())
        else:
            raise ConfigError(f"unknown config key {key!r}")
    try:
        noise_spec = NoiseSpec.parse(noise, seed) if noise is not None else \
            dataclasses.replace(cfg.train.noise, seed=seed)
        for s in suite:
            NoiseSpec.parse(s)
        eng = dataclasses.replace(cfg.engine, **engine)
        tr = dataclasses.replace(cfg.train, noise=noise_spec, **train)
    except ValueError as e:
        raise ConfigError(str(e)) from e
    return RunConfig(eng, tr, suite, seed)


def parse(text, base=None):
    pairs = []
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"line {n}: expected key = value, got {line!r}")
        pairs.append((key, value))
    return apply_overrides(base or RunConfig(), pairs)


def load(path, base=None):
    with open(path) as fh:
        return parse(fh.read(), base)


def render(cfg):
    lines = [f"engine.{k} = {_fmt(getattr(cfg.engine, k))}" for k in sorted(_ENGINE)]
    lines += [f"train.{k} = {_fmt(getattr(cfg.train, k))}" for k in sorted(_TRAIN)]
    lines.append(f"noise = {cfg.train.noise}")
    lines.append(f"seed = {cfg.seed}")
    lines.append(f"suite.noises = {','.join(cfg.suite)}")
    return "\n".join(lines) + "\n"
