"""Shared 32-slot joint space.

Every robot's joints are tagged with a role from a fixed roster; vectors move
between the robot's own joint ordering ("phys") and the shared slot ordering
("env") through an index map plus per-joint sign and offset:

    q_env  = M @ (s * (q_phys - b))        # positions
    q_phys = s * (M.T @ q_env) + b
    v_env  = M @ (s * v_phys)              # rates and torques: sign only
    v_phys = s * (M.T @ v_env)

M is never materialized; slot indices are gathered directly.  Unmapped slots
stay zero everywhere.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ROSTER_VERSION = 1

# Fixed roster order.  Index in this tuple == slot index in every 32-vector.
ROSTER: tuple[str, ...] = (
    "left_hip_yaw",
    "left_hip_roll",
    "left_hip_pitch",
    "left_knee_pitch",
    "left_ankle_pitch",
    "left_ankle_roll",
    "right_hip_yaw",
    "right_hip_roll",
    "right_hip_pitch",
    "right_knee_pitch",
    "right_ankle_pitch",
    "right_ankle_roll",
    "waist_yaw",
    "waist_roll",
    "waist_pitch",
    "left_shoulder_pitch",
    "left_shoulder_roll",
    "left_shoulder_yaw",
    "left_elbow_pitch",
    "left_wrist_yaw",
    "left_wrist_roll",
    "left_wrist_pitch",
    "right_shoulder_pitch",
    "right_shoulder_roll",
    "right_shoulder_yaw",
    "right_elbow_pitch",
    "right_wrist_yaw",
    "right_wrist_roll",
    "right_wrist_pitch",
    "neck_yaw",
    "neck_pitch",
    "neck_roll",
)

N_SLOTS = len(ROSTER)
assert N_SLOTS == 32

_ROSTER_INDEX = {name: i for i, name in enumerate(ROSTER)}


def roster_index(role: str) -> int:
    """Slot index for a role name; raises UnknownRole for anything else."""
    try:
        return _ROSTER_INDEX[role]
    except KeyError:
        raise UnknownRole(f"not a roster role: {role!r}") from None


def _mask_from_slots(n: int) -> np.ndarray:
    m = np.zeros(N_SLOTS, dtype=bool)
    m[:n] = True
    return m


# legs12: both legs.  legs_waist15: legs plus waist.  whole32: everything.
MASK_PRESETS: dict[str, np.ndarray] = {
    "legs12": _mask_from_slots(12),
    "legs_waist15": _mask_from_slots(15),
    "whole32": np.ones(N_SLOTS, dtype=bool),
}


class UnknownRole(ValueError):
    pass


class DuplicateRole(ValueError):
    pass


class DimensionMismatch(ValueError):
    pass


@dataclass(frozen=True)
class JointMapping:
    """Index map between one robot's joint vector and the 32-slot space.

    slot_of[j]  -- roster slot of phys joint j
    joint_of[k] -- phys joint index holding slot k, or -1 when unmapped
    sign, offset -- per phys joint (s in {-1,+1}, b in rad)
    """

    n_phys: int
    slot_of: np.ndarray
    joint_of: np.ndarray
    sign: np.ndarray
    offset: np.ndarray
    mapped: np.ndarray = field(init=False)  # bool (32,)

    def __post_init__(self):
        m = np.zeros(N_SLOTS, dtype=bool)
        m[self.slot_of] = True
        object.__setattr__(self, "mapped", m)


def build_mapping(roles: list[str], signs, offsets) -> JointMapping:
    """Mapping from per-joint role tags.  Duplicate tags are an error."""
    n = len(roles)
    if not (len(signs) == len(offsets) == n):
        raise DimensionMismatch(
            f"roles/signs/offsets lengths differ: {n}/{len(signs)}/{len(offsets)}"
        )
    slot_of = np.array([roster_index(r) for r in roles], dtype=np.int64)
    seen: dict[int, int] = {}
    for j, s in enumerate(slot_of):
        if int(s) in seen:
            raise DuplicateRole(
                f"role {roles[j]!r} tagged on joints {seen[int(s)]} and {j}"
            )
        seen[int(s)] = j
    joint_of = np.full(N_SLOTS, -1, dtype=np.int64)
    joint_of[slot_of] = np.arange(n)
    sign = np.asarray(signs, dtype=np.float64)
    if not np.all(np.abs(sign) == 1.0):
        raise ValueError("joint signs must be +1 or -1")
    return JointMapping(
        n_phys=n,
        slot_of=slot_of,
        joint_of=joint_of,
        sign=sign,
        offset=np.asarray(offsets, dtype=np.float64),
    )


def _check_phys(m: JointMapping, q) -> np.ndarray:
    q = np.asarray(q)
    if q.shape[-1] != m.n_phys:
        raise DimensionMismatch(f"expected trailing dim {m.n_phys}, got {q.shape}")
    return q


def _check_env(q) -> np.ndarray:
    q = np.asarray(q)
    if q.shape[-1] != N_SLOTS:
        raise DimensionMismatch(f"expected trailing dim {N_SLOTS}, got {q.shape}")
    return q


def phys_to_env(m: JointMapping, q_phys) -> np.ndarray:
    """Positions robot -> slots.  Unmapped slots are exactly 0."""
    q = _check_phys(m, q_phys)
    out = np.zeros(q.shape[:-1] + (N_SLOTS,), dtype=np.float64)
    out[..., m.slot_of] = m.sign * (q - m.offset)
    return out

def env_to_phys(m: JointMapping, q_env) -> np.ndarray:
    """Positions slots -> robot (full inverse: sign then offset)."""
    q = _check_env(q_env)
    return m.sign * q[..., m.slot_of] + m.offset


def phys_to_env_rate(m: JointMapping, v_phys) -> np.ndarray:
    """Rates/torques robot -> slots: sign only, no offset."""
    v = _check_phys(m, v_phys)
    out = np.zeros(v.shape[:-1] + (N_SLOTS,), dtype=np.float64)
    out[..., m.slot_of] = m.sign * v
    return out

def env_to_phys_rate(m: JointMapping, v_env) -> np.ndarray:
    v = _check_env(v_env)
    return m.sign * v[..., m.slot_of]


def apply_mask(q_env, mask) -> np.ndarray:
    """Zero all slots outside the action mask."""
    q = _check_env(q_env)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (N_SLOTS,):
        raise DimensionMismatch(f"mask must be ({N_SLOTS},), got {mask.shape}")
    return np.where(mask, q, 0.0)
