"""Fixed-size embodiment descriptors.

Four blocks laid out over the 32 roster slots (unmapped slots stay zero):

  z_jd   (32, 3)  joint dynamics: kp, kd, tau_max
  z_rd   (33, 3)  rigid bodies: mass, COM height at the nominal pose, inertia;
                  one row per slot's child link plus a final row for the base
  z_kine (32, 3)  sign, lower limit, upper limit
  z_geom (32, 1)  child link length

Flattened in that order the descriptor has 96 + 99 + 96 + 32 = 323 entries.
Heights come from forward kinematics with the base origin at its nominal
standing height, so they are in world meters above the ground.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .robot_model import RobotModel, fk_frames, link_coms
from .unified_space import N_SLOTS, JointMapping

DESCRIPTOR_DIM = N_SLOTS * 3 + (N_SLOTS + 1) * 3 + N_SLOTS * 3 + N_SLOTS
assert DESCRIPTOR_DIM == 323


@dataclass(frozen=True)
class EmbodimentDescriptor:
    z_jd: np.ndarray
    z_rd: np.ndarray
    z_kine: np.ndarray
    z_geom: np.ndarray

    @property
    def flat(self) -> np.ndarray:
        return np.concatenate([
            self.z_jd.ravel(), self.z_rd.ravel(),
            self.z_kine.ravel(), self.z_geom.ravel(),
        ])


def compute_descriptor(m: RobotModel, mapping: JointMapping) -> EmbodimentDescriptor:
    z_jd = np.zeros((N_SLOTS, 3))
    z_rd = np.zeros((N_SLOTS + 1, 3))
    z_kine = np.zeros((N_SLOTS, 3))
    z_geom = np.zeros((N_SLOTS, 1))

    prox, phi = fk_frames(m, m.nominal_pose, base_xy=(0.0, m.nominal_base_height))
    coms = link_coms(m, prox, phi)

    for j, joint in enumerate(m.joints):
        k = int(mapping.slot_of[j])
        child = m.links[joint.child]
        z_jd[k] = (joint.kp, joint.kd, joint.tau_max)
        z_rd[k] = (child.mass, coms[joint.child, 1], child.inertia_com)
        z_kine[k] = (joint.sign, joint.lo, joint.hi)
        z_geom[k, 0] = child.length
    base = m.links[m.base_link]
    z_rd[N_SLOTS] = (base.mass, coms[m.base_link, 1], base.inertia_com)
    return EmbodimentDescriptor(z_jd=z_jd, z_rd=z_rd, z_kine=z_kine, z_geom=z_geom)


def descriptor_distance(a: EmbodimentDescriptor | np.ndarray,
                        b: EmbodimentDescriptor | np.ndarray) -> float:
    fa = a.flat if isinstance(a, EmbodimentDescriptor) else np.asarray(a)
    fb = b.flat if isinstance(b, EmbodimentDescriptor) else np.asarray(b)
    return float(np.linalg.norm(fa - fb))


def fit_standardizer(flats) -> tuple[np.ndarray, np.ndarray]:
    """Per-column mean/std over a stack of flat descriptors; std 0 -> 1."""
    x = np.asarray(flats, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != DESCRIPTOR_DIM:
        raise ValueError(f"expected (n, {DESCRIPTOR_DIM}) descriptor stack, got {x.shape}")
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    std[std < 1e-12] = 1.0
    return mean, std


def standardize(flat: np.ndarray, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    return (np.asarray(flat) - mean) / std
