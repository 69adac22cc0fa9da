"""Experiment configuration: flat INI sections, validation, and derived setup."""

from __future__ import annotations

import configparser
import hashlib
import json
import math
import re
from dataclasses import asdict, dataclass, fields
from typing import Optional

import numpy as np

from .clf import PDController, QuadraticCLF, pendulum_clf
from .dynamics import (PendulumParams, Reference, pendulum_system, sample_true_system,
                       sinusoid_reference, zero_reference)


class ConfigError(ValueError):
    pass


# field name -> INI section
SECTIONS = {
    "pendulum": ("mass_hat", "length_hat", "gravity", "u_max", "perturbation"),
    "simulation": ("dt", "horizon", "reference", "ref_amplitude", "ref_frequency"),
    "clf": ("q_theta", "q_omega", "r_weight", "alpha_split"),
    "controller": ("kp", "kd"),
    "learning": ("episodes", "trust_steepness", "hidden", "epochs", "lr", "momentum",
                 "batch_size", "explore_scale", "explore_floor", "x0_radius", "holdout",
                 "spectral_budget", "warm_start", "label_anchor"),
    "uncertainty": ("lipschitz_safety", "polyhedron_cap", "vdot_slack", "slack_safety",
                    "L_A", "L_b", "A_sup", "b_sup"),
    "certify": ("level", "boundary_samples"),
    "heatmap": ("heatmap_sigma", "heatmap_per_point", "heatmap_points", "heatmap_bins_theta",
                "heatmap_bins_omega", "theta_range", "omega_range"),
    "run": ("seed", "true_seed", "output_dir"),
}


@dataclass
class ExperimentConfig:
    # pendulum
    mass_hat: float = 0.25
    length_hat: float = 0.5
    gravity: float = 9.81
    u_max: float = 5.0
    perturbation: float = 0.3
    # simulation
    dt: float = 0.01
    horizon: float = 10.0
    reference: str = "sinusoid"
    ref_amplitude: float = math.pi / 3
    ref_frequency: float = 1.0
    # clf
    q_theta: float = 10.0
    q_omega: float = 1.0
    r_weight: float = 1.0
    alpha_split: float = 0.5
    # baseline PD
    kp: float = 5.0
    kd: float = 1.0
    # learning
    episodes: int = 10
    trust_steepness: float = 1.0
    hidden: int = 200
    epochs: int = 200
    lr: float = 1e-3
    momentum: float = 0.9
    batch_size: int = 64
    explore_scale: float = 0.25
    explore_floor: Optional[float] = None
    x0_radius: float = 0.2
    holdout: float = 0.1
    spectral_budget: float = 0.0
    warm_start: bool = True
    label_anchor: str = "midpoint"
    # uncertainty
    lipschitz_safety: float = 1.1
    polyhedron_cap: int = 500
    vdot_slack: Optional[float] = None
    slack_safety: float = 2.0
    L_A: Optional[float] = None
    L_b: Optional[float] = None
    A_sup: Optional[float] = None
    b_sup: Optional[float] = None
    # certification
    level: Optional[float] = None
    boundary_samples: int = 720
    # heatmap
    heatmap_sigma: float = 0.1
    heatmap_per_point: int = 20
    heatmap_points: int = 100
    heatmap_bins_theta: int = 50
    heatmap_bins_omega: int = 50
    theta_range: tuple = (-math.pi, math.pi)
    omega_range: tuple = (-2 * math.pi, 2 * math.pi)
    # run
    seed: int = 0
    true_seed: Optional[int] = None
    output_dir: str = "runs/default"

    def validate(self, lines: Optional[dict] = None):
        def fail(name, msg):
            where = f"line {lines[name]}: " if lines and name in lines else ""
            raise ConfigError(f"{where}{name}: {msg}")

        for name in ("mass_hat", "length_hat", "gravity", "u_max", "dt", "horizon", "lr",
                     "lipschitz_safety", "heatmap_sigma", "x0_radius"):
            if not getattr(self, name) > 0:
                fail(name, "must be strictly positive")
        if not 0 <= self.perturbation <= 0.3:
            fail("perturbation", "must lie in [0, 0.3]")
        if self.horizon < self.dt:
            fail("horizon", "must be at least one time step")
        if self.reference not in ("sinusoid", "zero"):
            fail("reference", "must be 'sinusoid' or 'zero'")
        if self.label_anchor not in ("midpoint", "start"):
            fail("label_anchor", "must be 'midpoint' or 'start'")
        if not 0 < self.alpha_split < 1:
            fail("alpha_split", "must lie in (0, 1)")
        if self.episodes < 0:
            fail("episodes", "must be nonnegative")
        for name in ("hidden", "epochs", "batch_size", "polyhedron_cap", "boundary_samples",
                     "heatmap_per_point", "heatmap_points", "heatmap_bins_theta",
                     "heatmap_bins_omega"):
            if getattr(self, name) < 1:
                fail(name, "must be at least 1")
        if not 0 <= self.momentum < 1:
            fail("momentum", "must lie in [0, 1)")
        if not 0 <= self.holdout < 1:
            fail("holdout", "must lie in [0, 1)")
        if self.spectral_budget < 0:
            fail("spectral_budget", "must be nonnegative (0 disables)")
        if self.q_theta <= 0 or self.q_omega <= 0 or self.r_weight <= 0:
            fail("q_theta", "CLF weights must be positive")
        for name in ("vdot_slack", "L_A", "L_b", "A_sup", "b_sup", "explore_floor", "level"):
            v = getattr(self, name)
            if v is not None and v < 0:
                fail(name, "must be nonnegative")
        for name in ("theta_range", "omega_range"):
            lo, hi = getattr(self, name)
            if not lo < hi:
                fail(name, "lower bound must be below upper bound")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["theta_range"] = list(self.theta_range)
        d["omega_range"] = list(self.omega_range)
        return d

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    def with_updates(self, **kw) -> "ExperimentConfig":
        d = self.to_dict()
        d.update(kw)
        return from_mapping(d)

    @property
    def effective_explore_floor(self) -> float:
        return 0.05 * self.u_max if self.explore_floor is None else self.explore_floor


_FIELD_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}


def _coerce(name, raw, default):
    kind = _FIELD_TYPES[name]
    if isinstance(raw, str):
        raw = raw.strip()
        if raw.lower() in ("none", "auto", ""):
            raw = None
    if raw is None:
        if "Optional" not in str(kind):
            raise ValueError("a value is required")
        return None
    if "tuple" in str(kind):
        if isinstance(raw, str):
            parts = [p for p in re.split(r"[,\s]+", raw) if p]
        else:
            parts = list(raw)
        if len(parts) != 2:
            raise ValueError("expected two numbers")
        return (float(parts[0]), float(parts[1]))
    if "bool" in str(kind):
        if isinstance(raw, bool):
            return raw
        if str(raw).lower() in ("1", "true", "yes", "on"):
            return True
        if str(raw).lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if "int" in str(kind) and "float" not in str(kind):
        f = float(raw)
        if f != int(f):
            raise ValueError(f"expected an integer, got {raw!r}")
        return int(f)
    if "str" in str(kind):
        return str(raw)
    return float(raw)


def from_mapping(d: dict, lines: Optional[dict] = None) -> ExperimentConfig:
    cfg = ExperimentConfig()
    for name, raw in d.items():
        if name not in _FIELD_TYPES:
            where = f"line {lines[name]}: " if lines and name in lines else ""
            raise ConfigError(f"{where}unknown configuration key {name!r}")
        try:
            setattr(cfg, name, _coerce(name, raw, getattr(cfg, name)))
        except (TypeError, ValueError) as exc:
            where = f"line {lines[name]}: " if lines and name in lines else ""
            raise ConfigError(f"{where}{name}: {exc}") from None
    return cfg


def load_config(path) -> tuple[ExperimentConfig, dict]:
    """Parse an INI file; returns the config and a key -> line-number map."""
    text = open(path).read()
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text, source=str(path))
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    lines, section = {}, None
    for i, line in enumerate(text.splitlines(), start=1):
        s = line.strip()
        if s.startswith("["):
            section = s.strip("[]").strip()
        elif "=" in s and not s.startswith(("#", ";")):
            lines[s.split("=", 1)[0].strip()] = i
    values = {}
    for sec in parser.sections():
        if sec not in SECTIONS:
            raise ConfigError(f"{path}: unknown section [{sec}]")
        for key, raw in parser.items(sec):
            if key not in SECTIONS[sec]:
                where = f"line {lines.get(key, '?')}: "
                raise ConfigError(f"{where}key {key!r} does not belong in section [{sec}]")
            values[key] = raw
    cfg = from_mapping(values, lines)
    cfg.validate(lines)
    return cfg, lines


def save_config(cfg: ExperimentConfig, path):
    parser = configparser.ConfigParser()
    parser.optionxform = str
    d = cfg.to_dict()
    for sec, keys in SECTIONS.items():
        parser[sec] = {}
        for k in keys:
            v = d[k]
            if v is None:
                v = "auto"
            elif isinstance(v, (list, tuple)):
                v = ", ".join(repr(float(x)) for x in v)
            elif isinstance(v, float):
                v = repr(v)
            parser[sec][k] = str(v)
    with open(path, "w") as fh:
        parser.write(fh)


@dataclass
class Setup:
    """Everything derived from a config: systems, CLF, reference, baseline."""

    config: ExperimentConfig
    est: PendulumParams
    true: PendulumParams
    clf: QuadraticCLF
    reference: Reference

    @property
    def est_sys(self):
        return pendulum_system(self.est)

    @property
    def true_sys(self):
        return pendulum_system(self.true)

    @property
    def baseline(self) -> PDController:
        return PDController(self.config.kp, self.config.kd, self.reference, self.config.u_max)

    def value_fn(self, x, t):
        return self.clf.value(x - self.reference.x_d(t))


def build_setup(cfg: ExperimentConfig) -> Setup:
    est = PendulumParams(cfg.mass_hat, cfg.length_hat, cfg.gravity, cfg.u_max)
    true_seed = cfg.seed if cfg.true_seed is None else cfg.true_seed
    true = sample_true_system(est, cfg.perturbation, np.random.default_rng([true_seed, 7]))
    Q = np.diag([cfg.q_theta, cfg.q_omega])
    clf = pendulum_clf(est, Q, cfg.r_weight)
    if cfg.reference == "sinusoid":
        ref = sinusoid_reference(cfg.ref_amplitude, cfg.ref_frequency)
    else:
        ref = zero_reference(2)
    return Setup(cfg, est, true, clf, ref)
