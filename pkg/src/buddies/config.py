"""INI experiment configuration."""

from __future__ import annotations

import configparser
import hashlib
import io
import os
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

from .policy import PolicySpec
from .trace import SyntheticParams

DEFAULT_PS = (0.0, 0.1, 0.5, 0.9, 1.0)
# 1 s .. ~1 month, roughly log-spaced
DEFAULT_LIFETIMES = (0, 1, 10, 60, 300, 600, 1800, 3600, 7200, 21600, 43200, 86400,
                     259200, 604800, 1209600, 2592000)
DEFAULT_TOLERANCES = (0, 1, 10, 30, 60, 300, 600, 1800, 3600, 7200, 21600, 43200, 86400,
                      259200, 604800, 2592000)

_SYNTH_KEYS = {"core", "periodic", "period", "ephemeral", "horizon", "message_rate", "seed", "ephemeral_max"}


class ConfigError(ValueError):
    pass


def _ints(text: str) -> Tuple[int, ...]:
    return tuple(int(x) for x in text.replace(" ", "").split(",") if x)


def _floats(text: str) -> Tuple[float, ...]:
    return tuple(float(x) for x in text.replace(" ", "").split(",") if x)


@dataclass
class ExperimentConfig:
    """Everything needed to reproduce one experiment's output files."""

    trace_path: Optional[str] = None
    intervals_path: Optional[str] = None
    messages_path: Optional[str] = None
    synthetic: Optional[SyntheticParams] = None
    max_gap: int = 0
    nyms: str = "all"
    interval: int = 1
    policies: List[Tuple[str, PolicySpec]] = field(default_factory=lambda: [("default", PolicySpec())])
    attack_ps: Tuple[float, ...] = DEFAULT_PS
    weight_tolerance: float = 1e-9
    output_dir: str = "out"
    master_seed: int = 0
    workers: int = 1
    lifetimes: Tuple[int, ...] = DEFAULT_LIFETIMES
    tolerances: Tuple[int, ...] = DEFAULT_TOLERANCES

    @classmethod
    def from_ini(cls, path: str) -> "ExperimentConfig":
        if not os.path.exists(path):
            raise ConfigError(f"config file not found: {path}")
        with open(path, encoding="utf-8") as fh:
            return cls.from_string(fh.read(), base_dir=os.path.dirname(os.path.abspath(path)))

    @classmethod
    def from_string(cls, text: str, base_dir: str = ".") -> "ExperimentConfig":
        cp = configparser.ConfigParser(interpolation=None)
        try:
            cp.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(str(exc)) from None

        def resolve(p: str) -> str:
            return p if os.path.isabs(p) else os.path.normpath(os.path.join(base_dir, p))

        cfg = cls()
        try:
            if cp.has_section("trace"):
                t = dict(cp["trace"])
                if "path" in t:
                    cfg.trace_path = resolve(t.pop("path"))
                if "intervals" in t:
                    cfg.intervals_path = resolve(t.pop("intervals"))
                    cfg.messages_path = resolve(t.pop("messages"))
                cfg.max_gap = int(t.pop("max_gap", 0))
                cfg.nyms = t.pop("nyms", "all").strip()
                synth = {k: t.pop(k) for k in list(t) if k in _SYNTH_KEYS}
                if t:
                    raise ConfigError(f"unknown [trace] key(s): {', '.join(sorted(t))}")
                if synth:
                    if cfg.trace_path or cfg.intervals_path:
                        raise ConfigError("[trace] gives both a file and synthetic parameters")
                    kw = {k: (float(v) if k == "message_rate" else int(v)) for k, v in synth.items()}
                    cfg.synthetic = SyntheticParams(**kw)
            if cp.has_section("rounds"):
                r = dict(cp["rounds"])
                cfg.interval = int(r.pop("interval", 1))
                if r:
                    raise ConfigError(f"unknown [rounds] key(s): {', '.join(sorted(r))}")
            base = dict(cp["policy"]) if cp.has_section("policy") else {}
            named = [s for s in cp.sections() if s.startswith("policy.")]
            policies = []
            if cp.has_section("policy") or not named:
                policies.append(("default", PolicySpec.from_config(base)))
            for s in named:
                merged = dict(base)
                merged.update(cp[s])
                policies.append((s[len("policy."):], PolicySpec.from_config(merged)))
            cfg.policies = policies
            if cp.has_section("attack"):
                a = dict(cp["attack"])
                if "p" in a:
                    cfg.attack_ps = _floats(a.pop("p"))
                cfg.weight_tolerance = float(a.pop("weight_tolerance", cfg.weight_tolerance))
                if a:
                    raise ConfigError(f"unknown [attack] key(s): {', '.join(sorted(a))}")
            if cp.has_section("output"):
                o = dict(cp["output"])
                cfg.output_dir = resolve(o.pop("dir", cfg.output_dir))
                cfg.master_seed = int(o.pop("master_seed", 0))
                cfg.workers = int(o.pop("workers", 1))
                if o:
                    raise ConfigError(f"unknown [output] key(s): {', '.join(sorted(o))}")
            else:
                cfg.output_dir = resolve(cfg.output_dir)
            if cp.has_section("ideal"):
                i = dict(cp["ideal"])
                if "lifetimes" in i:
                    cfg.lifetimes = _ints(i.pop("lifetimes"))
                if "tolerances" in i:
                    cfg.tolerances = _ints(i.pop("tolerances"))
                if i:
                    raise ConfigError(f"unknown [ideal] key(s): {', '.join(sorted(i))}")
        except (KeyError, ValueError, TypeError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from None
        if cfg.interval < 1:
            raise ConfigError("[rounds] interval must be >= 1")
        if not (cfg.trace_path or cfg.intervals_path or cfg.synthetic):
            raise ConfigError("[trace] needs path, intervals/messages, or synthetic parameters")
        for p in cfg.attack_ps:
            if not 0 <= p <= 1:
                raise ConfigError(f"attack p out of range: {p}")
        names = [n for n, _ in cfg.policies]
        if len(set(names)) != len(names):
            raise ConfigError("duplicate policy names")
        return cfg

    def to_ini(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        cp["trace"] = {}
        if self.trace_path:
            cp["trace"]["path"] = self.trace_path
        if self.intervals_path:
            cp["trace"]["intervals"] = self.intervals_path
            cp["trace"]["messages"] = self.messages_path or ""
        if self.synthetic:
            for k, v in vars(self.synthetic).items():
                if v is not None:
                    cp["trace"][k] = repr(v) if isinstance(v, float) else str(v)
        cp["trace"]["max_gap"] = str(self.max_gap)
        cp["trace"]["nyms"] = self.nyms
        cp["rounds"] = {"interval": str(self.interval)}
        for name, spec in self.policies:
            cp["policy" if name == "default" else f"policy.{name}"] = spec.to_config()
        cp["attack"] = {"p": ",".join(repr(p) for p in self.attack_ps),
                        "weight_tolerance": repr(self.weight_tolerance)}
        cp["output"] = {"dir": self.output_dir, "master_seed": str(self.master_seed),
                        "workers": str(self.workers)}
        cp["ideal"] = {"lifetimes": ",".join(map(str, self.lifetimes)),
                       "tolerances": ",".join(map(str, self.tolerances))}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from arbitrary parts, independent of run order."""
    h = hashlib.sha256("\x1f".join(str(p) for p in parts).encode("utf-8")).digest()
    return int.from_bytes(h[:8], "big") >> 1


def nym_id(master_seed: int, owner: str) -> str:
    return "n" + hashlib.sha256(f"nym\x1f{master_seed}\x1f{owner}".encode("utf-8")).hexdigest()[:12]


def run_spec(spec: PolicySpec, master_seed: int, owner: str, policy_index: int) -> PolicySpec:
    return replace(spec, seed=derive_seed(master_seed, owner, policy_index, spec.seed))
