"""Run configuration stored as an INI file.

Schema (all keys optional, defaults shown)::

    [model]
    family = tensor2            ; tensor2, tensor4 or sh<n>
    b_max = 5000.0              ; initializer b-value cut-off

    [chain]
    cycles = 1000
    burn_in = auto              ; integer or auto
    thin = 10
    block_radius = 2
    seed = 0
    workers = 1
    positivity = counting       ; counting or constrained
    scoring = double            ; double or single
    theta0_update = joint       ; joint or separate
    inflation = 1.0

    [prior]
    theta0 = flat               ; flat or intrinsic
    rho = 0.0                   ; pairwise precision of theta0 when intrinsic
    hyper = estimated           ; estimated or fixed
    hyper_values =              ; space-separated, order of the reported names

    [simulate]
    sigma = 50.0
    s0 = 1000.0
    quantize = false

    [paths]
    data = data/phantom         ; dataset stem
    output = out/fit            ; prefix of fit outputs
"""

import configparser
import io
from dataclasses import asdict, dataclass, fields

from .design import ModelSpec
from .priors import IsoPrecision2, IsoPrecision4, PowerSpectrum, hyper_names
from .sampler import ChainConfig

__all__ = ["RunConfig", "ConfigError"]


class ConfigError(ValueError):
    """Invalid configuration value or file."""


_SECTIONS = {
    "model": ("family", "b_max"),
    "chain": ("cycles", "burn_in", "thin", "block_radius", "seed", "workers", "positivity",
              "scoring", "theta0_update", "inflation"),
    "prior": ("theta0", "rho", "hyper", "hyper_values"),
    "simulate": ("sigma", "s0", "quantize"),
    "paths": ("data", "output"),
}


@dataclass
class RunConfig:
    """Settings shared by all commands; see the module docstring for the file schema."""

    family: str = "tensor2"
    b_max: float = 5000.0
    cycles: int = 1000
    burn_in: object = "auto"
    thin: int = 10
    block_radius: int = 2
    seed: int = 0
    workers: int = 1
    positivity: str = "counting"
    scoring: str = "double"
    theta0_update: str = "joint"
    inflation: float = 1.0
    theta0: str = "flat"
    rho: float = 0.0
    hyper: str = "estimated"
    hyper_values: tuple = ()
    sigma: float = 50.0
    s0: float = 1000.0
    quantize: bool = False
    data: str = "data/phantom"
    output: str = "out/fit"

    def validate(self):
        """Raise :class:`ConfigError` for inconsistent settings."""
        try:
            spec = self.spec
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if self.theta0 not in ("flat", "intrinsic"):
            raise ConfigError("theta0 must be 'flat' or 'intrinsic'")
        if self.theta0 == "flat" and self.rho != 0.0:
            raise ConfigError("rho must be 0 with a flat theta0 prior")
        if self.theta0 == "intrinsic" and not self.rho > 0:
            raise ConfigError("an intrinsic theta0 prior needs rho > 0")
        if self.hyper not in ("estimated", "fixed"):
            raise ConfigError("hyper must be 'estimated' or 'fixed'")
        if self.hyper == "fixed" and len(self.hyper_values) != len(hyper_names(spec)):
            raise ConfigError(f"fixed hyperparameters need values for {', '.join(hyper_names(spec))}")
        if self.sigma < 0 or self.s0 <= 0:
            raise ConfigError("sigma must be >= 0 and s0 > 0")
        if self.b_max <= 0:
            raise ConfigError("b_max must be positive")
        if self.data == self.output:
            raise ConfigError("data and output paths must differ")
        try:
            self.chain_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        return self

    @property
    def spec(self):
        return ModelSpec.parse(self.family)

    def hyper_object(self):
        """Hyperparameter object for fixed values (None when estimated)."""
        if self.hyper != "fixed":
            return None
        spec = self.spec
        vals = [float(v) for v in self.hyper_values]
        try:
            if spec.family == "tensor2":
                return IsoPrecision2(*vals)
            if spec.family == "tensor4":
                return IsoPrecision4(*vals)
            return PowerSpectrum(tuple(vals), self.rho)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid hyperparameters: {exc}") from None

    def chain_config(self):
        """Sampler settings."""
        return ChainConfig(
            cycles=self.cycles, burn_in=self.burn_in, thin=self.thin,
            block_radius=self.block_radius, seed=self.seed, positivity=self.positivity,
            rho=self.rho, hyper_mode=self.hyper, hyper=self.hyper_object(),
            scoring=self.scoring, theta0_update=self.theta0_update,
            inflation=self.inflation, workers=self.workers)

    # -- serialization --------------------------------------------------

    def to_string(self):
        cp = configparser.ConfigParser(interpolation=None)
        vals = asdict(self)
        for sec, keys in _SECTIONS.items():
            cp[sec] = {k: _format(vals[k]) for k in keys}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    def write(self, path):
        with open(path, "w", encoding="ascii") as fh:
            fh.write(self.to_string())

    @classmethod
    def from_string(cls, text, source="<string>"):
        cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";", "#"))
        try:
            cp.read_string(text, source=source)
        except configparser.Error as exc:
            raise ConfigError(str(exc)) from None
        kwargs = {}
        for sec in cp.sections():
            if sec not in _SECTIONS:
                raise ConfigError(f"{source}: unknown section [{sec}]")
            for key, raw in cp[sec].items():
                if key not in _SECTIONS[sec]:
                    raise ConfigError(f"{source}: unknown key '{key}' in [{sec}]")
                kwargs[key] = _parse(key, raw, source)
        return cls(**kwargs)

    @classmethod
    def read(cls, path):
        try:
            with open(path, encoding="utf-8") as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from None
        return cls.from_string(text, source=str(path))

    def updated(self, **overrides):
        """Copy with the non-None ``overrides`` applied."""
        vals = asdict(self)
        for k, v in overrides.items():
            if v is not None:
                if k not in vals:
                    raise ConfigError(f"unknown setting '{k}'")
                vals[k] = v
        return RunConfig(**vals)


_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _format(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        return " ".join(repr(float(x)) for x in v)
    return str(v)


def _parse(key, raw, source):
    raw = raw.strip()
    kind = _TYPES[key]
    try:
        if key == "burn_in":
            return "auto" if raw.lower() == "auto" else int(raw)
        if key == "hyper_values":
            return tuple(float(x) for x in raw.split())
        if kind is bool:
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(f"not a boolean: {raw!r}")
            return low in ("true", "1", "yes")
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"{source}: bad value for '{key}': {exc}") from None


def hyper_from_values(spec, values, rho=0.0):
    """Hyperparameter object from the reported values (see ``hyper_names``)."""
    return RunConfig(family=str(spec), hyper="fixed", hyper_values=tuple(values),
                     rho=rho).hyper_object()

