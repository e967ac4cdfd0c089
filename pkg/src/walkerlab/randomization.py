"""Extended domain randomization over dynamics parameters.

Every randomized quantity gets a symmetric half-width at 1x that a single
multiplier widens (2x doubles it, 4x quadruples it); ground friction widens
about the midpoint of its base range.  Positive quantities are floored at 1%
of nominal so no sample crosses zero.  Geometry and structure (link lengths,
topology, roles, signs, offsets, limits) are never randomized.  One variant
is drawn per episode and held fixed until the next reset.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .robot_model import RobotModel, topology_hash

POSITIVITY_FLOOR = 0.01  # fraction of nominal


@dataclass(frozen=True)
class DRConfig:
    enabled: bool = True
    multiplier: float = 2.0        # 1, 2, 4 are the supported presets; 0 = identity
    mass_hw: float = 0.10          # relative half-widths at 1x
    inertia_hw: float = 0.10
    kp_hw: float = 0.10
    kd_hw: float = 0.10
    tau_max_hw: float = 0.10
    com_hw: float = 0.05           # +- fraction of link length, additive
    friction_mid: float = 0.8      # base range [0.6, 1.0] = mid 0.8, hw 0.2
    friction_hw: float = 0.2
    push_cap: float = 30.0         # N; push magnitude does not grow with multiplier
    push_interval: tuple[float, float] = (4.0, 8.0)   # s between pushes
    push_duration: float = 0.2     # s

    def __post_init__(self):
        if self.multiplier < 0:
            raise ValueError(f"multiplier must be >= 0, got {self.multiplier}")


@dataclass(frozen=True)
class EmbodimentVariant:
    """Perturbed copies of every randomized quantity for one episode."""
    model_name: str
    topology: str                 # hash of the unrandomized structure
    masses: np.ndarray            # (n_links,)
    inertias: np.ndarray
    com_offsets: np.ndarray
    kp: np.ndarray                # (n_joints,)
    kd: np.ndarray
    tau_max: np.ndarray
    friction: float


def _factor_range(hw: float, mult: float) -> tuple[float, float]:
    return (max(1.0 - hw * mult, POSITIVITY_FLOOR), 1.0 + hw * mult)


def effective_ranges(cfg: DRConfig) -> dict[str, tuple[float, float]]:
    """Per-quantity sampling bounds after the multiplier.

    mass/inertia/kp/kd/tau_max: multiplicative factor on nominal.
    com_offset: additive shift as a fraction of link length.
    friction: absolute coefficient.
    """
    m = cfg.multiplier
    fr_lo = max(cfg.friction_mid - cfg.friction_hw * m,
                POSITIVITY_FLOOR * cfg.friction_mid)
    return {
        "mass": _factor_range(cfg.mass_hw, m),
        "inertia": _factor_range(cfg.inertia_hw, m),
        "kp": _factor_range(cfg.kp_hw, m),
        "kd": _factor_range(cfg.kd_hw, m),
        "tau_max": _factor_range(cfg.tau_max_hw, m),
        "com_offset": (-cfg.com_hw * m, cfg.com_hw * m),
        "friction": (fr_lo, cfg.friction_mid + cfg.friction_hw * m),
    }


def identity_variant(m: RobotModel, cfg: DRConfig | None = None) -> EmbodimentVariant:
    """Bit-identical copy of the nominal parameters (DR disabled path)."""
    mid = cfg.friction_mid if cfg is not None else 0.8
    return EmbodimentVariant(
        model_name=m.name,
        topology=topology_hash(m),
        masses=np.array([l.mass for l in m.links]),
        inertias=np.array([l.inertia_com for l in m.links]),
        com_offsets=np.array([l.com_offset for l in m.links]),
        kp=np.array([j.kp for j in m.joints]),
        kd=np.array([j.kd for j in m.joints]),
        tau_max=np.array([j.tau_max for j in m.joints]),
        friction=mid,
    )


def sample_variant(m: RobotModel, cfg: DRConfig,
                   rng: int | np.random.Generator) -> EmbodimentVariant:
    """Uniform draw inside effective_ranges(cfg); deterministic per seed."""
    if not isinstance(rng, np.random.Generator):
        rng = np.random.Generator(np.random.Philox(key=abs(int(rng))))
    if not cfg.enabled:
        return identity_variant(m, cfg)
    r = effective_ranges(cfg)
    L, J = m.n_links, m.n_joints

    def fac(name: str, n: int) -> np.ndarray:
        lo, hi = r[name]
        return rng.uniform(lo, hi, size=n)

    lengths = m.lengths
    com0 = np.array([l.com_offset for l in m.links])
    com_lo, com_hi = r["com_offset"]
    com = com0 + rng.uniform(com_lo, com_hi, size=L) * lengths
    np.clip(com, 0.0, lengths, out=com)

    return EmbodimentVariant(
        model_name=m.name,
        topology=topology_hash(m),
        masses=np.array([l.mass for l in m.links]) * fac("mass", L),
        inertias=np.array([l.inertia_com for l in m.links]) * fac("inertia", L),
        com_offsets=com,
        kp=np.array([j.kp for j in m.joints]) * fac("kp", J),
        kd=np.array([j.kd for j in m.joints]) * fac("kd", J),
        tau_max=np.array([j.tau_max for j in m.joints]) * fac("tau_max", J),
        friction=float(rng.uniform(r["friction"][0], r["friction"][1])),
    )


def materialize(m: RobotModel, v: EmbodimentVariant) -> RobotModel:
    """Robot model carrying the variant's perturbed dynamics (same structure)."""
    if v.topology != topology_hash(m):
        raise ValueError(f"variant was sampled from a different structure than {m.name!r}")
    links = tuple(
        replace(l, mass=float(v.masses[i]), inertia_com=float(v.inertias[i]),
                com_offset=float(v.com_offsets[i]))
        for i, l in enumerate(m.links)
    )
    joints = tuple(
        replace(j, kp=float(v.kp[i]), kd=float(v.kd[i]), tau_max=float(v.tau_max[i]))
        for i, j in enumerate(m.joints)
    )
    return replace(m, links=links, joints=joints)
