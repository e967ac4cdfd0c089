"""Planar walker descriptions: JSON schema, validation, kinematics, generator.

A robot is a tree of line-segment links joined by revolute (pitch) joints.
Kinematic conventions used everywhere in this package:

  * world axes: x right, z up; gravity acts along -z
  * each link runs proximal -> distal; its world direction angle is phi
  * the base link's proximal end is the base frame origin and its direction
    is phi = pi/2 + pitch (torso points straight up at zero pitch)
  * a joint whose parent is the base anchors at the base origin; every other
    joint anchors at its parent's distal end
  * joint angle q is the child's direction relative to the parent's:
    phi_child = phi_parent + q

Angles are radians, lengths meters, masses kg, torques N*m.
"""
from __future__ import annotations

import hashlib
import json
import math
import warnings
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path

import numpy as np

from .unified_space import DuplicateRole, UnknownRole, roster_index


class ModelError(Exception):
    pass


class ModelSyntaxError(ModelError):
    """Malformed document: bad JSON, wrong types, unknown or missing keys."""

    def __init__(self, message: str, line: int | None = None, col: int | None = None):
        if line is not None:
            message = f"{message} (line {line}, column {col})"
        super().__init__(message)
        self.line = line
        self.col = col


class MissingLink(ModelError):
    pass


class CycleDetected(ModelError):
    pass


class OutOfRange(ModelError):
    pass


class InvalidFamilyParams(ValueError):
    pass


@dataclass(frozen=True)
class Link:
    name: str
    length: float
    mass: float
    com_offset: float     # COM distance from the proximal end, along the link
    inertia_com: float    # planar inertia about the COM


@dataclass(frozen=True)
class Joint:
    name: str
    parent: int           # link index
    child: int
    lo: float
    hi: float
    velocity_limit: float
    kp: float
    kd: float
    tau_max: float
    unified_role: str
    sign: float           # +1/-1 into the shared joint space
    offset: float         # neutral-pose offset b into the shared joint space
    nominal: float        # standing-pose angle


@dataclass(frozen=True)
class RobotModel:
    name: str
    nominal_base_height: float
    base_link: int
    links: tuple[Link, ...]
    joints: tuple[Joint, ...]
    metadata: dict = field(default_factory=dict)

    @property
    def n_links(self) -> int:
        return len(self.links)

    @property
    def n_joints(self) -> int:
        return len(self.joints)

    @cached_property
    def total_mass(self) -> float:
        return float(sum(l.mass for l in self.links))

    @cached_property
    def nominal_pose(self) -> np.ndarray:
        return np.array([j.nominal for j in self.joints])

    @cached_property
    def lengths(self) -> np.ndarray:
        return np.array([l.length for l in self.links])

    @cached_property
    def joint_parent(self) -> np.ndarray:
        return np.array([j.parent for j in self.joints], dtype=np.int64)

    @cached_property
    def joint_child(self) -> np.ndarray:
        return np.array([j.child for j in self.joints], dtype=np.int64)

    @cached_property
    def topo_joints(self) -> tuple[int, ...]:
        """Joint indices ordered so a parent link is placed before its children."""
        placed = {self.base_link}
        order: list[int] = []
        pending = set(range(self.n_joints))
        while pending:
            ready = sorted(j for j in pending if self.joints[j].parent in placed)
            if not ready:
                raise CycleDetected(f"model {self.name!r}: unresolvable topology")
            for j in ready:
                order.append(j)
                placed.add(self.joints[j].child)
                pending.discard(j)
        return tuple(order)

    @cached_property
    def roles(self) -> tuple[str, ...]:
        return tuple(j.unified_role for j in self.joints)


_LINK_KEYS = ("name", "length", "mass", "com_offset", "inertia_com")
_JOINT_KEYS = (
    "name", "parent", "child", "limits", "velocity_limit",
    "kp", "kd", "tau_max", "unified_role", "sign", "offset", "nominal",
)
_TOP_KEYS = ("name", "nominal_base_height", "base_link", "links", "joints")


def _num(v, where: str) -> float:
    # bool is an int subclass; reject it explicitly
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ModelSyntaxError(f"{where}: expected a number, got {type(v).__name__}")
    return float(v)


def _str(v, where: str) -> str:
    if not isinstance(v, str):
        raise ModelSyntaxError(f"{where}: expected a string, got {type(v).__name__}")
    return v


def _check_keys(d: dict, required, optional, where: str, strict: bool):
    for k in required:
        if k not in d:
            raise ModelSyntaxError(f"{where}: missing required key {k!r}")
    unknown = sorted(set(d) - set(required) - set(optional))
    if unknown:
        if strict:
            raise ModelSyntaxError(f"{where}: unknown keys {unknown}")
        warnings.warn(f"{where}: ignoring unknown keys {unknown}", stacklevel=3)


def parse_model_text(text: str, strict: bool = True, source: str = "<string>") -> RobotModel:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ModelSyntaxError(f"{source}: {e.msg}", line=e.lineno, col=e.colno) from None
    if not isinstance(doc, dict):
        raise ModelSyntaxError(f"{source}: top level must be an object")
    _check_keys(doc, _TOP_KEYS, ("metadata",), source, strict)

    name = _str(doc["name"], f"{source}: name")
    if not isinstance(doc["links"], list) or not doc["links"]:
        raise ModelSyntaxError(f"{source}: links must be a non-empty list")
    if not isinstance(doc["joints"], list):
        raise ModelSyntaxError(f"{source}: joints must be a list")

    link_index: dict[str, int] = {}
    links: list[Link] = []
    for i, ld in enumerate(doc["links"]):
        where = f"link[{i}]"
        if not isinstance(ld, dict):
            raise ModelSyntaxError(f"{where}: expected an object")
        _check_keys(ld, _LINK_KEYS, (), where, strict)
        lname = _str(ld["name"], f"{where}: name")
        if lname in link_index:
            raise ModelSyntaxError(f"duplicate link name {lname!r}")
        link_index[lname] = i
        links.append(Link(
            name=lname,
            length=_num(ld["length"], f"{where}: length"),
            mass=_num(ld["mass"], f"{where}: mass"),
            com_offset=_num(ld["com_offset"], f"{where}: com_offset"),
            inertia_com=_num(ld["inertia_com"], f"{where}: inertia_com"),
        ))

    base_name = _str(doc["base_link"], "base_link")
    if base_name not in link_index:
        raise MissingLink(base_name)
    base = link_index[base_name]

    joints: list[Joint] = []
    joint_names: set[str] = set()
    child_seen: dict[int, str] = {}
    role_seen: dict[str, str] = {}
    for i, jd in enumerate(doc["joints"]):
        where = f"joint[{i}]"
        if not isinstance(jd, dict):
            raise ModelSyntaxError(f"{where}: expected an object")
        _check_keys(jd, _JOINT_KEYS, (), where, strict)
        jname = _str(jd["name"], f"{where}: name")
        if jname in joint_names:
            raise ModelSyntaxError(f"duplicate joint name {jname!r}")
        joint_names.add(jname)
        pname = _str(jd["parent"], f"{where}: parent")
        cname = _str(jd["child"], f"{where}: child")
        for n in (pname, cname):
            if n not in link_index:
                raise MissingLink(n)
        parent, child = link_index[pname], link_index[cname]
        if child == base:
            raise CycleDetected(f"joint {jname!r}: base link cannot be a child")
        if parent == child:
            raise CycleDetected(f"joint {jname!r}: parent and child are the same link")
        if child in child_seen:
            raise CycleDetected(
                f"link {cname!r} is the child of both {child_seen[child]!r} and {jname!r}"
            )
        child_seen[child] = jname
        limits = jd["limits"]
        if not isinstance(limits, list) or len(limits) != 2:
            raise ModelSyntaxError(f"{where}: limits must be [lo, hi]")
        role = _str(jd["unified_role"], f"{where}: unified_role")
        roster_index(role)  # raises UnknownRole
        if role in role_seen:
            raise DuplicateRole(
                f"role {role!r} tagged on joints {role_seen[role]!r} and {jname!r}"
            )
        role_seen[role] = jname
        joints.append(Joint(
            name=jname, parent=parent, child=child,
            lo=_num(limits[0], f"{where}: limits[0]"),
            hi=_num(limits[1], f"{where}: limits[1]"),
            velocity_limit=_num(jd["velocity_limit"], f"{where}: velocity_limit"),
            kp=_num(jd["kp"], f"{where}: kp"),
            kd=_num(jd["kd"], f"{where}: kd"),
            tau_max=_num(jd["tau_max"], f"{where}: tau_max"),
            unified_role=role,
            sign=_num(jd["sign"], f"{where}: sign"),
            offset=_num(jd["offset"], f"{where}: offset"),
            nominal=_num(jd["nominal"], f"{where}: nominal"),
        ))

    # Reachability: every link must hang off the base through the joint tree.
    reachable = {base}
    frontier = [base]
    children: dict[int, list[int]] = {}
    for j in joints:
        children.setdefault(j.parent, []).append(j.child)
    while frontier:
        nxt = []
        for p in frontier:
            for c in children.get(p, ()):
                if c not in reachable:
                    reachable.add(c)
                    nxt.append(c)
        frontier = nxt
    unreachable = sorted(set(range(len(links))) - reachable)
    if unreachable:
        names = [links[i].name for i in unreachable]
        raise CycleDetected(f"links not reachable from the base: {names}")

    metadata = doc.get("metadata", {})
    if not isinstance(metadata, dict):
        raise ModelSyntaxError("metadata must be an object")

    m = RobotModel(
        name=name,
        nominal_base_height=_num(doc["nominal_base_height"], "nominal_base_height"),
        base_link=base,
        links=tuple(links),
        joints=tuple(joints),
        metadata=metadata,
    )
    bad = validate_model(m)
    if bad:
        raise OutOfRange("; ".join(bad))
    return m


def parse_model(path: str | Path, strict: bool = True) -> RobotModel:
    """Load and validate a robot description file."""
    p = Path(path)
    return parse_model_text(p.read_text(), strict=strict, source=str(p))


def validate_model(m: RobotModel) -> list[str]:
    """Numeric sanity checks; returns one message per violation (empty = good)."""
    bad: list[str] = []
    if not math.isfinite(m.nominal_base_height) or m.nominal_base_height <= 0:
        bad.append(f"model {m.name!r}: nominal_base_height must be > 0")
    for l in m.links:
        w = f"link {l.name!r}"
        for fname in ("length", "mass", "com_offset", "inertia_com"):
            if not math.isfinite(getattr(l, fname)):
                bad.append(f"{w}: {fname} is not finite")
        if l.length <= 0:
            bad.append(f"{w}: length must be > 0")
        if l.mass <= 0:
            bad.append(f"{w}: mass must be > 0")
        if l.inertia_com <= 0:
            bad.append(f"{w}: inertia_com must be > 0")
        if not (0.0 <= l.com_offset <= l.length):
            bad.append(f"{w}: com_offset must lie within [0, length]")
    for j in m.joints:
        w = f"joint {j.name!r}"
        for fname in ("lo", "hi", "velocity_limit", "kp", "kd", "tau_max",
                      "sign", "offset", "nominal"):
            if not math.isfinite(getattr(j, fname)):
                bad.append(f"{w}: {fname} is not finite")
        if not j.lo < j.hi:
            bad.append(f"{w}: limits lo must be < hi, got [{j.lo}, {j.hi}]")
        if j.velocity_limit <= 0:
            bad.append(f"{w}: velocity_limit must be > 0")
        if j.kp < 0 or j.kd < 0:
            bad.append(f"{w}: kp and kd must be >= 0")
        if j.tau_max <= 0:
            bad.append(f"{w}: tau_max must be > 0")
        if j.sign not in (-1.0, 1.0):
            bad.append(f"{w}: sign must be +1 or -1")
        if not (j.lo <= j.nominal <= j.hi):
            bad.append(f"{w}: nominal {j.nominal} outside limits [{j.lo}, {j.hi}]")
    return bad


def model_to_dict(m: RobotModel) -> dict:
    return {
        "name": m.name,
        "nominal_base_height": m.nominal_base_height,
        "base_link": m.links[m.base_link].name,
        "links": [
            {"name": l.name, "length": l.length, "mass": l.mass,
             "com_offset": l.com_offset, "inertia_com": l.inertia_com}
            for l in m.links
        ],
        "joints": [
            {"name": j.name, "parent": m.links[j.parent].name,
             "child": m.links[j.child].name, "limits": [j.lo, j.hi],
             "velocity_limit": j.velocity_limit, "kp": j.kp, "kd": j.kd,
             "tau_max": j.tau_max, "unified_role": j.unified_role,
             "sign": j.sign, "offset": j.offset, "nominal": j.nominal}
            for j in m.joints
        ],
        "metadata": m.metadata,
    }


def serialize_model(m: RobotModel) -> str:
    return json.dumps(model_to_dict(m), indent=2) + "\n"


def save_model(m: RobotModel, path: str | Path):
    Path(path).write_text(serialize_model(m))


def topology_hash(m: RobotModel) -> str:
    """Digest of everything domain randomization must never touch."""
    parts = [m.name]
    for l in m.links:
        parts.append(f"L:{l.name}:{l.length!r}")
    for j in m.joints:
        parts.append(
            f"J:{j.name}:{j.parent}:{j.child}:{j.unified_role}:{j.sign!r}"
            f":{j.offset!r}:{j.nominal!r}:{j.lo!r}:{j.hi!r}"
        )
    return hashlib.md5("|".join(parts).encode()).hexdigest()


def fk_frames(m: RobotModel, q_phys, base_xy=(0.0, 0.0), base_pitch: float = 0.0):
    """Place every link: returns (prox (L,2), phi (L,)) world frames."""
    q = np.asarray(q_phys, dtype=np.float64)
    prox = np.zeros((m.n_links, 2))
    phi = np.zeros(m.n_links)
    prox[m.base_link] = base_xy
    phi[m.base_link] = math.pi / 2 + base_pitch
    for ji in m.topo_joints:
        j = m.joints[ji]
        if j.parent == m.base_link:
            anchor = prox[j.parent]
        else:
            p = m.links[j.parent]
            anchor = prox[j.parent] + p.length * np.array(
                [math.cos(phi[j.parent]), math.sin(phi[j.parent])]
            )
        phi[j.child] = phi[j.parent] + q[ji]
        prox[j.child] = anchor
    return prox, phi


def link_endpoints(m: RobotModel, prox: np.ndarray, phi: np.ndarray) -> np.ndarray:
    """(L, 2, 2): proximal and distal world points per link."""
    u = np.stack([np.cos(phi), np.sin(phi)], axis=-1)
    return np.stack([prox, prox + m.lengths[:, None] * u], axis=1)


def link_coms(m: RobotModel, prox: np.ndarray, phi: np.ndarray) -> np.ndarray:
    u = np.stack([np.cos(phi), np.sin(phi)], axis=-1)
    off = np.array([l.com_offset for l in m.links])
    return prox + off[:, None] * u


def standing_height(m: RobotModel, q_phys=None) -> float:
    """Base-origin height when the lowest link endpoint touches the ground."""
    if q_phys is None:
        q_phys = m.nominal_pose
    prox, phi = fk_frames(m, q_phys)
    pts = link_endpoints(m, prox, phi)
    return float(-pts[:, :, 1].min())


# ---------------------------------------------------------------------------
# Walker family generator
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class WalkerFamilyParams:
    family: str = "biped"          # "biped" or "quadruped"
    segments_per_leg: int = 3      # 2 = thigh+shin, 3 = adds a flat foot
    leg_scale: float = 1.0
    mass_scale: float = 1.0
    gain_scale: float = 1.0
    jitter: float = 0.08           # relative, applied per seed


_FAMILY_BOUNDS = {
    "leg_scale": (0.5, 2.0),
    "mass_scale": (0.5, 2.0),
    "gain_scale": (0.5, 2.0),
    "jitter": (0.0, 0.15),
}

# Per-family base dimensions at scale 1: (length m, mass kg).
_BIPED_SEGMENTS = {"torso": (0.42, 6.5), "thigh": (0.26, 1.9),
                   "shin": (0.26, 1.3), "foot": (0.18, 0.6)}
_QUAD_SEGMENTS = {"torso": (0.38, 5.5), "thigh": (0.24, 1.3),
                  "shin": (0.24, 0.9), "foot": (0.10, 0.25)}
# tau_max (N*m) at scale 1.
_BIPED_TAU = {"hip": 70.0, "knee": 70.0, "ankle": 45.0}
_QUAD_TAU = {"hip": 60.0, "knee": 60.0, "ankle": 40.0}

_VEL_LIMIT = 25.0

# PD gains are sized from the effective joint-space inertia (diagonal of the
# inverse mass matrix under the hinge constraints).  The servo runs at the
# 200 Hz physics rate on a held target, so the discrete loop needs
# omega_n*dt_sub well below 2; omega_n=70 rad/s gives ~0.35 with room for
# the +-40% gain randomization at the widest multiplier.
_SERVO_DT = 0.005
_PD_OMEGA = 70.0
_PD_ZETA = 0.4
# A standing robot topples unless the leg joints' total stiffness exceeds
# m*g*(COM height above the joint); the floor keeps soft distal joints
# (tiny I_eff, full toppling load) above that threshold.  The factor covers
# the serial compliance of the joints above and the -40% gain randomization
# corner at the widest multiplier.
_BALANCE_KP_FACTOR = 2.5


def joint_space_inertia(m: RobotModel):
    """Effective inertia 1/(H^-1)_jj per joint for the floating structure.

    Assembles the maximal-coordinate mass matrix and hinge Jacobian at the
    nominal pose and solves the KKT system for a unit torque at each joint;
    this matches what the velocity-level engine actually feels, unlike a
    pinned-subtree estimate which can be off by 5-10x.
    """
    L, J = m.n_links, m.n_joints
    prox, phi = fk_frames(m, m.nominal_pose)
    coms = link_coms(m, prox, phi)
    Mdiag = np.empty(3 * L)
    for i, lk in enumerate(m.links):
        Mdiag[3 * i: 3 * i + 2] = lk.mass
        Mdiag[3 * i + 2] = lk.inertia_com
    Jc = np.zeros((2 * J, 3 * L))
    B = np.zeros((3 * L, J))
    for ji, j in enumerate(m.joints):
        p, c = j.parent, j.child
        anchor = prox[c]
        rp, rc = anchor - coms[p], anchor - coms[c]
        Jc[2 * ji, 3 * c] = 1.0
        Jc[2 * ji, 3 * c + 2] = -rc[1]
        Jc[2 * ji, 3 * p] = -1.0
        Jc[2 * ji, 3 * p + 2] = rp[1]
        Jc[2 * ji + 1, 3 * c + 1] = 1.0
        Jc[2 * ji + 1, 3 * c + 2] = rc[0]
        Jc[2 * ji + 1, 3 * p + 1] = -1.0
        Jc[2 * ji + 1, 3 * p + 2] = -rp[0]
        B[3 * c + 2, ji] = 1.0
        B[3 * p + 2, ji] = -1.0
    n = 3 * L + 2 * J
    A = np.zeros((n, n))
    A[: 3 * L, : 3 * L] = np.diag(Mdiag)
    A[: 3 * L, 3 * L:] = Jc.T
    A[3 * L:, : 3 * L] = Jc
    rhs = np.zeros((n, J))
    rhs[: 3 * L] = B
    acc = np.linalg.solve(A, rhs)[: 3 * L]
    h_inv_diag = np.einsum("ij,ij->j", B, acc)
    return 1.0 / h_inv_diag


def stable_pd_gains(m: RobotModel, omega: float = _PD_OMEGA,
                    zeta: float = _PD_ZETA):
    """Per-joint (kp, kd): servo at omega rad/s on I_eff, balance-floored.

    kp gets a floor so legs resist toppling (shared across the leg chains)
    and a cap at 2*tau_max so full torque authority is reached by 0.5 rad
    of error instead of saturating in the noise.  kd tracks the final kp at
    damping ratio zeta.
    """
    ieff = joint_space_inertia(m)
    tau = np.array([j.tau_max for j in m.joints])
    prox, phi = fk_frames(m, m.nominal_pose, base_xy=(0.0, m.nominal_base_height))
    coms = link_coms(m, prox, phi)
    masses = np.array([lk.mass for lk in m.links])
    h_com = float((masses * coms[:, 1]).sum() / masses.sum())
    n_legs = max(1, sum(1 for j in m.joints if j.parent == m.base_link))
    g = 9.81
    kp = omega * omega * ieff
    for ji, j in enumerate(m.joints):
        lever = max(h_com - prox[j.child][1], 0.0)
        kp[ji] = max(kp[ji], _BALANCE_KP_FACTOR * masses.sum() * g * lever / n_legs)
    kp = np.minimum(kp, 2.0 * tau)
    kd = 2.0 * zeta * np.sqrt(kp * ieff)
    return kp, kd


def _validate_family(p: WalkerFamilyParams):
    if p.family not in ("biped", "quadruped"):
        raise InvalidFamilyParams(f"unknown family {p.family!r}")
    if p.segments_per_leg not in (2, 3):
        raise InvalidFamilyParams(f"segments_per_leg must be 2 or 3, got {p.segments_per_leg}")
    for fname, (lo, hi) in _FAMILY_BOUNDS.items():
        v = getattr(p, fname)
        if not (lo <= v <= hi):
            raise InvalidFamilyParams(f"{fname}={v} outside [{lo}, {hi}]")


def _rod_inertia(mass: float, length: float) -> float:
    return mass * length * length / 12.0


def generate_walker(params: WalkerFamilyParams, seed: int) -> RobotModel:
    """Deterministic walker for (params, seed); same inputs, same model bits.

    Biped: torso with two legs hinged at the base origin.  Quadruped: two leg
    pairs splayed fore/aft from the same hip point; the front pair is tagged
    with arm roles (shoulder/elbow/wrist) and the rear pair with leg roles.
    Leg segment lengths scale with leg_scale, masses with mass_scale; gains
    scale with mass_scale*leg_scale*gain_scale so torque headroom follows the
    gravity load.  Per-seed jitter multiplies lengths, masses, and gains.
    """
    _validate_family(params)
    segs = _BIPED_SEGMENTS if params.family == "biped" else _QUAD_SEGMENTS
    tau0 = _BIPED_TAU if params.family == "biped" else _QUAD_TAU

    rng = np.random.Generator(np.random.Philox(key=abs(int(seed))))
    j = params.jitter

    def jit() -> float:
        return float(rng.uniform(1.0 - j, 1.0 + j))

    # Fixed draw order regardless of segment count so a scale sweep at one
    # seed sees identical jitters.
    dims = {k: (L * jit(), M * jit()) for k, (L, M) in segs.items()}
    gjit = {k: (jit(), jit(), jit()) for k in ("hip", "knee", "ankle")}

    gscale = params.gain_scale * params.mass_scale * params.leg_scale
    torso_len, torso_mass = dims["torso"][0], dims["torso"][1] * params.mass_scale

    links = [Link("torso", torso_len, torso_mass, 0.45 * torso_len,
                  _rod_inertia(torso_mass, torso_len))]
    joints: list[Joint] = []

    def leg_links(prefix: str) -> list[int]:
        idx = []
        kinds = ("thigh", "shin", "foot")[: params.segments_per_leg]
        for kind in kinds:
            L = dims[kind][0] * params.leg_scale
            M = dims[kind][1] * params.mass_scale
            com = 0.5 * L
            links.append(Link(f"{prefix}_{kind}", L, M, com, _rod_inertia(M, L)))
            idx.append(len(links) - 1)
        return idx

    def add_leg(prefix: str, role_prefixes: tuple[str, str, str],
                side: str, t1: float, t2: float, knee_sign: float):
        idx = leg_links(prefix)
        q_hip = -math.pi + t1
        q_knee = t2 - t1
        q_ankle = math.pi / 2 - t2
        # kp/kd placeholders; the subtree-inertia pass below fills them.
        joints.append(Joint(f"{prefix}_hip", 0, idx[0], q_hip - 1.3, q_hip + 1.3,
                            _VEL_LIMIT, 0.0, 0.0, tau0["hip"] * gjit["hip"][2] * gscale,
                            f"{side}_{role_prefixes[0]}", 1.0, q_hip, q_hip))
        if knee_sign < 0:
            klo, khi = q_knee - 1.5, -0.05   # human-style knee: flexes backward
        else:
            klo, khi = 0.05, q_knee + 1.5    # bird-style knee: flexes forward
        joints.append(Joint(f"{prefix}_knee", idx[0], idx[1], klo, khi,
                            _VEL_LIMIT, 0.0, 0.0, tau0["knee"] * gjit["knee"][2] * gscale,
                            f"{side}_{role_prefixes[1]}", knee_sign, q_knee, q_knee))
        if params.segments_per_leg == 3:
            joints.append(Joint(f"{prefix}_ankle", idx[1], idx[2],
                                q_ankle - 0.9, q_ankle + 0.9,
                                _VEL_LIMIT, 0.0, 0.0,
                                tau0["ankle"] * gjit["ankle"][2] * gscale,
                                f"{side}_{role_prefixes[2]}", 1.0, q_ankle, q_ankle))

    leg_roles = ("hip_pitch", "knee_pitch", "ankle_pitch")
    arm_roles = ("shoulder_pitch", "elbow_pitch", "wrist_pitch")
    if params.family == "biped":
        # Slightly asymmetric stance keeps the total COM over the foot span.
        add_leg("l", leg_roles, "left", 0.16, -0.42, -1.0)
        add_leg("r", leg_roles, "right", 0.16, -0.42, -1.0)
    else:
        add_leg("rl", leg_roles, "left", -0.50, -0.12, 1.0)
        add_leg("rr", leg_roles, "right", -0.50, -0.12, 1.0)
        add_leg("fl", arm_roles, "left", 0.50, 0.12, -1.0)
        add_leg("fr", arm_roles, "right", 0.50, 0.12, -1.0)

    nseg = params.segments_per_leg
    name = (f"{params.family}{len(joints)}_s{seed}"
            f"_L{params.leg_scale:g}_M{params.mass_scale:g}")
    m = RobotModel(
        name=name,
        nominal_base_height=1.0,  # placeholder until FK below
        base_link=0,
        links=tuple(links),
        joints=tuple(joints),
        metadata={
            "family": params.family, "segments_per_leg": nseg,
            "leg_scale": params.leg_scale, "mass_scale": params.mass_scale,
            "gain_scale": params.gain_scale, "jitter": params.jitter,
            "seed": int(seed),
        },
    )
    kp, kd = stable_pd_gains(m)
    group = {"hip": "hip", "knee": "knee", "ankle": "ankle"}
    final = []
    for ji, jnt in enumerate(m.joints):
        g = group[jnt.name.rsplit("_", 1)[1]]
        final.append(replace(jnt,
                             kp=kp[ji] * gjit[g][0] * params.gain_scale,
                             kd=kd[ji] * gjit[g][1] * params.gain_scale))
    m = replace(m, joints=tuple(final))
    m = replace(m, nominal_base_height=standing_height(m))
    bad = validate_model(m)
    if bad:  # generator bug if this ever fires
        raise OutOfRange("; ".join(bad))
    return m
