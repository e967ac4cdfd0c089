"""Planar walker simulation.

Maximal coordinates: every link is a free 2-D rigid body (x, z, pitch) and
revolute joints are equality constraints solved exactly at the velocity level
each substep (joint rows assembled into K = J M^-1 J^T, solved with a
Baumgarte bias on the anchor gap, which is the implicit form of a stiff
spring-damper).  Integration is semi-implicit Euler, 4 substeps at 200 Hz per
50 Hz control step.  Raw torques (step) are held for the full control step;
PD control (step_pd) holds the *target* and evaluates the torque law at the
physics rate, like a hardware servo loop, because damping sampled at 50 Hz
is divergent on light distal links.

Ground contact acts at the foot endpoints (heel and toe of every leaf link,
plus the base segment ends so a fallen robot rests instead of dangling):
a normal spring-damper plus a Coulomb-capped tangential damper.  The contact
law is integrated implicitly by adding contact rows to the same velocity
solve (compliance 1/(dt*(kn*dt+cn)), bias kn*pen/(kn*dt+cn) is the exact
implicit-Euler form of the spring-damper), because an explicit penalty at
these gains is unstable for light links at 200 Hz.  Normal impulses are
clamped non-negative and tangential ones to the friction cone, then a second
joint-only solve re-establishes the joint rows exactly under the clamped
contact impulses.

Everything is vectorized over an env batch; the single-env `WalkerSim` is a
batch of one.  All state is float64 and every operation order is fixed, so
runs are bit-reproducible for a given seed.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .descriptors import compute_descriptor
from .randomization import (DRConfig, EmbodimentVariant, identity_variant,
                            materialize, sample_variant)
from .robot_model import RobotModel, fk_frames, link_coms
from .unified_space import (
    MASK_PRESETS,
    N_SLOTS,
    JointMapping,
    apply_mask,
    build_mapping,
    env_to_phys,
    phys_to_env,
    phys_to_env_rate,
)

# Termination reasons (ints in batch arrays, names in reports).
ALIVE, TIMEOUT, FALL_HEIGHT, FALL_PITCH, FAULT = 0, 1, 2, 3, 4
REASON_NAMES = {TIMEOUT: "timeout", FALL_HEIGHT: "fall_height",
                FALL_PITCH: "fall_pitch", FAULT: "fault"}

FRAME_DIM = 104
# Frame layout: q32 | qd32 | pitch_rate | gravity(2) | command(3) | prev_action(32) | est_v(2)
FRAME_SLICES = {
    "q": slice(0, 32), "qd": slice(32, 64), "pitch_rate": slice(64, 65),
    "gravity": slice(65, 67), "command": slice(67, 70),
    "prev_action": slice(70, 102), "est_v": slice(102, 104),
}


@dataclass(frozen=True)
class SimConfig:
    dt_ctrl: float = 0.02          # 50 Hz control
    substeps: int = 4              # -> 200 Hz physics
    gravity: float = 9.81
    gravity_on: bool = True
    contact_on: bool = True
    contact_kn: float = 2.0e4      # N/m
    contact_cn: float = 200.0      # N*s/m
    # Tangential damping high enough to act as stiction inside the friction
    # cone (a viscous foot slides steadily under constant shear and the robot
    # skates); the Coulomb clamp on the impulse supplies the sliding branch.
    contact_ct: float = 4.0e4      # N*s/m tangential
    baumgarte: float = 0.3         # fraction of anchor gap removed per substep
    cfm: float = 1e-9
    episode_limit: int = 1000      # control steps (20 s)
    reset_noise: float = 0.05      # rad on each joint
    fall_height_frac: float = 0.5  # of nominal base height
    fall_pitch: float = 1.0        # rad

    @property
    def dt_sub(self) -> float:
        return self.dt_ctrl / self.substeps


@dataclass(frozen=True)
class CommandConfig:
    # Planar world: only vx is live; vy/vpsi ranges kept for interface parity
    # and always commanded as 0.
    vx: tuple[float, float] = (-0.6, 1.2)
    vy: tuple[float, float] = (-0.4, 0.4)
    vpsi: tuple[float, float] = (-1.0, 1.0)


@dataclass(frozen=True)
class RewardConfig:
    w_track_lin: float = 2.0       # exp(-e^2/0.25)
    w_track_ang: float = 0.5       # pitch-rate regularization, exp(-w^2/0.25)
    w_height: float = 1.0          # exp(-(z-h)^2/0.01)
    w_stance: float = 0.3          # exp(-(spread-nominal)^2/0.04)
    w_orient: float = 1.0          # -pitch^2
    w_torque: float = 2.0e-5       # -sum tau^2
    w_action_rate: float = 0.05    # -sum (a-a_prev)^2
    alive_bonus: float = 1.0
    # Per-embodiment coefficients, filled from the model at env construction.
    h_nom: float = 0.0
    stance_nom: float = 0.0


@dataclass
class SimState:
    """Single-env snapshot (copy, safe to hold across steps)."""
    com: np.ndarray      # (L, 2)
    phi: np.ndarray      # (L,)
    vel: np.ndarray      # (L, 2)
    omg: np.ndarray      # (L,)
    q: np.ndarray        # (J,)
    qd: np.ndarray       # (J,)
    t: float
    steps: int
    command: np.ndarray  # (3,)
    base_pos: np.ndarray
    base_pitch: float
    base_vel: np.ndarray
    pitch_rate: float


@dataclass
class StepResult:
    state: SimState
    base_vel: np.ndarray   # ground truth, supervised target for the estimator
    done: bool
    reason: str | None
    tau: np.ndarray        # applied (clamped) torques


def pd_torques(kp, kd, tau_max, q_target, q, qd) -> np.ndarray:
    """tau = clamp(Kp (q* - q) - Kd qdot, +-tau_max); broadcasts over batches."""
    raw = np.asarray(kp) * (np.asarray(q_target) - np.asarray(q)) - np.asarray(kd) * np.asarray(qd)
    lim = np.asarray(tau_max)
    return np.clip(raw, -lim, lim)


class _Engine:
    """Vectorized maximal-coordinate physics for B copies of one model."""

    def __init__(self, model: RobotModel, n_envs: int, cfg: SimConfig):
        self.m = model
        self.B = n_envs
        self.cfg = cfg
        L, J = model.n_links, model.n_joints
        self.L, self.J = L, J
        self.base = model.base_link
        self.jp = model.joint_parent
        self.jc = model.joint_child
        self.lengths = model.lengths
        # Parent-side anchor distance from the parent's proximal end: the base
        # anchors its children at the origin, everything else at the distal end.
        self.anchor_par = np.where(self.jp == self.base, 0.0, self.lengths[self.jp])

        B = n_envs
        self.pos = np.zeros((B, L, 2))
        self.phi = np.zeros((B, L))
        # One backing array for (vx, vz, w): flattens for the solve for free.
        self.v3 = np.zeros((B, L, 3))
        self.vel = self.v3[..., :2]
        self.omg = self.v3[..., 2]

        # Variant-dependent arrays, filled by set_variants.
        self.mass = np.ones((B, L))
        self.inertia = np.ones((B, L))
        self.com_off = np.zeros((B, L))
        self.kp = np.zeros((B, J))
        self.kd = np.zeros((B, J))
        self.tau_max = np.ones((B, J))
        self.mu = np.full(B, 0.8)
        self.minv = np.ones((B, 3 * L))

        # Contact layout must precede the Jacobian buffer: its row count
        # includes the contact rows.  Contact points are the two endpoints
        # (heel and toe) of every leaf link plus both ends of the base: feet
        # are segments that rest flat, so both ends carry load, and the base
        # points let a fallen robot come to rest instead of hanging from its
        # feet.  The set is static, which keeps the contact columns of the
        # Jacobian fixed.
        non_leaf = set(int(p) for p in self.jp) | {self.base}
        self.feet = np.array([l for l in range(L) if l not in non_leaf],
                             dtype=np.int64)
        support = np.append(self.feet, self.base)
        self._ft_link = np.concatenate([support, support])
        self.kc = len(self._ft_link)
        self._nr = 2 * J + 2 * self.kc
        self._be = np.arange(B)[:, None]
        self._rows_n = 2 * J + np.arange(self.kc)
        self._rows_t = 2 * J + self.kc + np.arange(self.kc)

        # Persistent Jacobian buffer.  Rows [0, 2J): joint anchors, with the
        # constant +-1 linear entries baked in here; the angular entries are
        # rewritten each substep through a flat index.  Rows [2J, nr):
        # contact rows, zeroed and re-scattered each substep.
        self.Jall = np.zeros((B, self._nr, 3 * L))
        rows, cols, vals = [], [], []
        for j in range(J):
            p, c = self.jp[j], self.jc[j]
            rows += [2 * j, 2 * j, 2 * j + 1, 2 * j + 1]
            cols += [3 * c + 0, 3 * p + 0, 3 * c + 1, 3 * p + 1]
            vals += [1.0, -1.0, 1.0, -1.0]
        self.Jall[:, rows, cols] = vals
        wr = np.repeat(np.arange(2 * J), 2)
        wc = np.empty(4 * J, dtype=np.int64)
        for j in range(J):
            wc[4 * j: 4 * j + 4] = (3 * self.jc[j] + 2, 3 * self.jp[j] + 2,
                                    3 * self.jc[j] + 2, 3 * self.jp[j] + 2)
        # Flat offsets into one env's (nr, 3L) block for the angular entries.
        self._w_flat = wr * (3 * L) + wc
        self._rhs = np.zeros((B, self._nr))
        self._JM = np.zeros((B, self._nr, 3 * L))
        self._K = np.zeros((B, self._nr, self._nr))
        self._wvals = np.zeros((B, 4 * J))
        self._u = np.zeros((B, L, 2))
        # Variant-derived substep constants (refreshed in set_variants):
        # parent/child lever arms along the link axis and scaled inverses.
        self._rp_coef = np.zeros((B, J))
        self._rc_coef = np.zeros((B, J))
        self._push_scale = np.ones((B, 1))
        self._dt_over_I = np.ones((B, L))
        # Static contact columns (feet never change identity).
        self._lk_x = 3 * self._ft_link
        self._lk_z = 3 * self._ft_link + 1
        self._lk_w = 3 * self._ft_link + 2
        # Heel/toe offsets from each foot's COM, refreshed in set_variants.
        self._ft_coef = np.zeros((B, self.kc))
        # kn * pen / (kn*dt + cn) reduces to a constant times pen.
        self._pen_gain = cfg.contact_kn / (cfg.contact_kn * cfg.dt_sub
                                           + cfg.contact_cn)
        # Torque incidence: child +1, parent -1; tq_links = tau @ S.T
        S = np.zeros((L, J))
        S[self.jc, np.arange(J)] += 1.0
        S[self.jp, np.arange(J)] -= 1.0
        self.S = S

        # Contact candidates: the k lowest link endpoints per env enter the
        # solve each substep (leaf endpoints plus slack for scraping links).
        nr = self._nr
        cfm_n = 1.0 / (cfg.dt_sub * (cfg.contact_kn * cfg.dt_sub + cfg.contact_cn))
        cfm_t = 1.0 / (cfg.dt_sub * cfg.contact_ct)
        cfm = np.full(nr, cfg.cfm)
        cfm[2 * J: 2 * J + self.kc] = cfm_n
        cfm[2 * J + self.kc:] = cfm_t
        self._cfm_diag = np.diag(cfm)

        # External push force on the base, managed by the env wrapper.
        self.push = np.zeros((B, 2))

    # -- variants ----------------------------------------------------------
    def set_variants(self, idx: np.ndarray, variants: list[EmbodimentVariant]):
        for k, v in zip(idx, variants):
            self.mass[k] = v.masses
            self.inertia[k] = v.inertias
            self.com_off[k] = v.com_offsets
            self.kp[k] = v.kp
            self.kd[k] = v.kd
            self.tau_max[k] = v.tau_max
            self.mu[k] = v.friction
        minv = self.minv.reshape(self.B, self.L, 3)
        minv[idx, :, 0] = 1.0 / self.mass[idx]
        minv[idx, :, 1] = 1.0 / self.mass[idx]
        minv[idx, :, 2] = 1.0 / self.inertia[idx]
        sup = self._ft_link[: self.kc // 2]
        self._ft_coef[idx, : len(sup)] = -self.com_off[idx][:, sup]
        self._ft_coef[idx, len(sup):] = (self.lengths - self.com_off[idx])[:, sup]
        self._rp_coef[idx] = self.anchor_par - self.com_off[idx][:, self.jp]
        self._rc_coef[idx] = -self.com_off[idx][:, self.jc]
        self._push_scale[idx, 0] = self.cfg.dt_sub / self.mass[idx, self.base]
        self._dt_over_I[idx] = self.cfg.dt_sub / self.inertia[idx]

    # -- kinematics --------------------------------------------------------
    def place(self, idx: np.ndarray, q: np.ndarray):
        """FK-place envs idx at pose q (n, J); feet shifted to touch ground."""
        n = len(idx)
        prox = np.zeros((n, self.L, 2))
        phi = np.zeros((n, self.L))
        phi[:, self.base] = math.pi / 2
        order = self.m.topo_joints
        for ji in order:
            p, c = self.jp[ji], self.jc[ji]
            u = np.stack([np.cos(phi[:, p]), np.sin(phi[:, p])], axis=-1)
            anchor = prox[:, p] + self.anchor_par[ji] * u
            phi[:, c] = phi[:, p] + q[:, ji]
            prox[:, c] = anchor
        u = np.stack([np.cos(phi), np.sin(phi)], axis=-1)
        ends_z = np.stack([prox[..., 1], prox[..., 1] + self.lengths * u[..., 1]], axis=-1)
        shift = ends_z.min(axis=(1, 2))
        prox[..., 1] -= shift[:, None]
        com = prox + self.com_off[idx][..., None] * u
        self.pos[idx] = com
        self.phi[idx] = phi
        self.vel[idx] = 0.0
        self.omg[idx] = 0.0
        self.push[idx] = 0.0

    def q_qd(self):
        q = self.phi[:, self.jc] - self.phi[:, self.jp]
        qd = self.omg[:, self.jc] - self.omg[:, self.jp]
        return q, qd

    def base_origin_z(self) -> np.ndarray:
        return self.pos[:, self.base, 1] - self.com_off[:, self.base] * np.sin(self.phi[:, self.base])

    def base_pitch(self) -> np.ndarray:
        return self.phi[:, self.base] - math.pi / 2

    def foot_heights(self) -> np.ndarray:
        """Ground clearance of each heel/toe point, (B, kc); negative = penetrating."""
        u_z = np.sin(self.phi[:, self._ft_link])
        return self.pos[:, self._ft_link, 1] + self._ft_coef * u_z

    def substep(self, tau: np.ndarray):
        cfg = self.cfg
        dt = cfg.dt_sub
        B, J, L, kc = self.B, self.J, self.L, self.kc
        jp, jc, be = self.jp, self.jc, self._be
        tq = tau @ self.S.T
        if cfg.gravity_on:
            self.vel[..., 1] -= dt * cfg.gravity
        self.vel[:, self.base] += self._push_scale * self.push
        tq *= self._dt_over_I
        self.omg += tq

        # Joint rows: update the angular Jacobian entries and the anchor gap.
        u = self._u
        np.cos(self.phi, out=u[..., 0])
        np.sin(self.phi, out=u[..., 1])
        rp = self._rp_coef[..., None] * u[:, jp]
        rc = self._rc_coef[..., None] * u[:, jc]
        gap = (self.pos[:, jc] + rc) - (self.pos[:, jp] + rp)             # (B,J,2)
        wv = self._wvals
        np.negative(rc[..., 1], out=wv[:, 0::4])
        wv[:, 1::4] = rp[..., 1]
        wv[:, 2::4] = rc[..., 0]
        np.negative(rp[..., 0], out=wv[:, 3::4])
        Jall = self.Jall
        Jall.reshape(B, -1)[:, self._w_flat] = wv

        rhs = self._rhs
        vflat = self.v3.reshape(B, 3 * L)
        rhs[:, : 2 * J] = (-(Jall[:, : 2 * J] @ vflat[..., None])[..., 0]
                           - (cfg.baumgarte / dt) * gap.reshape(B, -1))

        # Contact rows at the heel/toe points (implicit spring-damper).
        mu = None
        if cfg.contact_on:
            lk = self._ft_link
            coef = self._ft_coef
            u_sel = u[:, lk]                                              # (B,kc,2)
            rx = coef * u_sel[..., 0]
            rz = coef * u_sel[..., 1]
            pen = self.pos[:, lk, 1]
            pen += rz
            np.negative(pen, out=pen)
            act = (pen > 0.0).astype(np.float64)
            # Normal row: v_z + w * r_x ; tangential row: v_x - w * r_z.
            Jall[be, self._rows_n, self._lk_z] = act
            Jall[be, self._rows_n, self._lk_w] = act * rx
            Jall[be, self._rows_t, self._lk_x] = act
            Jall[be, self._rows_t, self._lk_w] = -act * rz
            v_sel = self.v3[:, lk]                                        # (B,kc,3)
            v_n = v_sel[..., 1] + v_sel[..., 2] * rx
            v_t = v_sel[..., 0] - v_sel[..., 2] * rz
            pen *= self._pen_gain
            pen -= v_n
            pen *= act
            rhs[:, 2 * J: 2 * J + kc] = pen
            v_t *= act
            np.negative(v_t, out=rhs[:, 2 * J + kc:])
            mu = self.mu[:, None]

        JM = np.multiply(Jall, self.minv[:, None, :], out=self._JM)
        K = np.matmul(JM, Jall.transpose(0, 2, 1), out=self._K)
        K += self._cfm_diag
        # A non-finite rhs is implied by every way the state can blow up
        # (positions and velocities both feed it), so checking K separately
        # buys nothing; K itself stays finite whenever phi is, and a NaN phi
        # poisons the gap term.
        bad = ~np.isfinite(rhs).all(axis=1)
        if bad.any():
            K[bad] = np.eye(self._nr)
            rhs[bad] = 0.0
        P = np.linalg.solve(K, rhs[..., None])[..., 0]

        if cfg.contact_on:
            Pc = P[:, 2 * J:]
            Pn = Pc[:, :kc]
            np.maximum(Pn, 0.0, out=Pn)
            cap = mu * Pn
            np.clip(Pc[:, kc:], -cap, cap, out=Pc[:, kc:])
            # Re-solve the joint rows so clamping never degrades the anchors.
            rhs_j = rhs[:, : 2 * J] - (K[:, : 2 * J, 2 * J:] @ Pc[..., None])[..., 0]
            K_jj = K[:, : 2 * J, : 2 * J]
            P[:, : 2 * J] = np.linalg.solve(K_jj, rhs_j[..., None])[..., 0]

        self.v3 += (self.minv * (P[:, None, :] @ Jall)[:, 0]).reshape(B, L, 3)
        self.pos += dt * self.vel
        self.phi += dt * self.omg

    def control_step(self, tau: np.ndarray) -> np.ndarray:
        tau = np.clip(tau, -self.tau_max, self.tau_max)
        for _ in range(self.cfg.substeps):
            self.substep(tau)
        return tau

    def control_step_pd(self, q_target: np.ndarray) -> np.ndarray:
        """Hold the target for one control step, run the servo per substep.

        Sampling the damping term at 50 Hz diverges on light distal links,
        so the PD law is evaluated at the physics rate like a hardware servo
        loop.  Returns the mean applied torque (for effort penalties).
        """
        acc = np.zeros_like(self.kp)
        for _ in range(self.cfg.substeps):
            q = self.phi[:, self.jc] - self.phi[:, self.jp]
            qd = self.omg[:, self.jc] - self.omg[:, self.jp]
            tau = pd_torques(self.kp, self.kd, self.tau_max, q_target, q, qd)
            self.substep(tau)
            acc += tau
        return acc / self.cfg.substeps

    # -- diagnostics -------------------------------------------------------
    def joint_residual(self) -> np.ndarray:
        """Max anchor gap per env (m)."""
        u = np.stack([np.cos(self.phi), np.sin(self.phi)], axis=-1)
        rp = (self.anchor_par - self.com_off[:, self.jp])[..., None] * u[:, self.jp]
        rc = (-self.com_off[:, self.jc])[..., None] * u[:, self.jc]
        gap = (self.pos[:, self.jc] + rc) - (self.pos[:, self.jp] + rp)
        return np.linalg.norm(gap, axis=-1).max(axis=-1)

    def mechanical_energy(self) -> np.ndarray:
        ke = 0.5 * (self.mass * (self.vel ** 2).sum(-1) + self.inertia * self.omg ** 2).sum(-1)
        pe = (self.cfg.gravity * self.mass * self.pos[..., 1]).sum(-1) if self.cfg.gravity_on else 0.0
        ce = np.zeros(self.B)
        if self.cfg.contact_on:
            pen = np.maximum(-self.foot_heights(), 0.0)
            # Energy bookkeeping uses the uncapped spring constant.
            ce = 0.5 * self.cfg.contact_kn * (pen ** 2).sum(axis=1)
        return ke + pe + ce

    def momentum(self) -> np.ndarray:
        return (self.mass[..., None] * self.vel).sum(axis=1)


class BatchedWalkerEnv:
    """Vectorized locomotion task for one embodiment.

    Episode flow: every reset draws a fresh dynamics variant (when DR is on),
    a command, and a noisy nominal pose; pushes arrive every 4-8 s while DR is
    on.  step() takes shared-space actions plus the caller's current base
    velocity estimate (embedded in the next frame) and auto-resets finished
    envs, reporting completed episodes.
    """

    def __init__(self, model: RobotModel, n_envs: int, *, seed: int,
                 sim_cfg: SimConfig = SimConfig(), dr_cfg: DRConfig = DRConfig(),
                 reward_cfg: RewardConfig | None = None,
                 cmd_cfg: CommandConfig = CommandConfig(),
                 mask: np.ndarray | str = "legs12",
                 action_scale: float = 0.5, env_uid_offset: int = 0):
        self.model = model
        self.B = n_envs
        self.sim_cfg = sim_cfg
        self.dr_cfg = dr_cfg
        self.cmd_cfg = cmd_cfg
        self.action_scale = action_scale
        self.mapping: JointMapping = build_mapping(
            [j.unified_role for j in model.joints],
            [j.sign for j in model.joints],
            [j.offset for j in model.joints],
        )
        self.mask = MASK_PRESETS[mask] if isinstance(mask, str) else np.asarray(mask, bool)
        self.eng = _Engine(model, n_envs, sim_cfg)
        if reward_cfg is None:
            reward_cfg = RewardConfig()
        self.reward_cfg = self._fill_reward_coeffs(reward_cfg)
        self.h_nom = model.nominal_base_height

        self.rngs = [np.random.Generator(np.random.Philox(key=[abs(int(seed)), env_uid_offset + i]))
                     for i in range(n_envs)]
        self.curriculum = 1.0
        self.lo = np.array([j.lo for j in model.joints])
        self.hi = np.array([j.hi for j in model.joints])
        self._leaves = self._leaf_links()

        self.command = np.zeros((n_envs, 3))
        self.prev_action = np.zeros((n_envs, N_SLOTS))
        self.steps = np.zeros(n_envs, dtype=np.int64)
        self.t = np.zeros(n_envs)
        self.ep_return = np.zeros(n_envs)
        self.next_push = np.zeros(n_envs)
        self.push_until = np.full(n_envs, -1.0)
        self.ze = np.zeros((n_envs, 323))
        self.variants: list[EmbodimentVariant | None] = [None] * n_envs
        self.reset_indices(np.arange(n_envs))

    def _leaf_links(self) -> np.ndarray:
        parents = set(int(p) for p in self.model.joint_parent)
        return np.array([i for i in range(self.model.n_links)
                         if i not in parents and i != self.model.base_link], dtype=np.int64)

    def _fill_reward_coeffs(self, rc: RewardConfig) -> RewardConfig:
        from dataclasses import replace as dreplace
        prox, phi = fk_frames(self.model, self.model.nominal_pose)
        coms = link_coms(self.model, prox, phi)
        leaves = self._leaf_links()
        xs = coms[leaves, 0]
        stance = float(xs.max() - xs.min()) if len(leaves) > 1 else 0.0
        return dreplace(rc, h_nom=self.model.nominal_base_height, stance_nom=stance)

    def set_curriculum(self, scale: float):
        self.curriculum = float(scale)

    # -- resets ------------------------------------------------------------
    def reset_indices(self, idx: np.ndarray):
        if len(idx) == 0:
            return
        idx = np.asarray(idx)
        variants = []
        qs = np.empty((len(idx), self.model.n_joints))
        for k, i in enumerate(idx):
            rng = self.rngs[i]
            if self.dr_cfg.enabled:
                v = sample_variant(self.model, self.dr_cfg, rng)
            else:
                v = identity_variant(self.model, self.dr_cfg)
            variants.append(v)
            self.variants[i] = v
            qs[k] = self.model.nominal_pose + rng.uniform(
                -self.sim_cfg.reset_noise, self.sim_cfg.reset_noise, self.model.n_joints)
            lo, hi = self.cmd_cfg.vx
            self.command[i] = (rng.uniform(lo * self.curriculum, hi * self.curriculum), 0.0, 0.0)
            self.next_push[i] = rng.uniform(*self.dr_cfg.push_interval)
            self.ze[i] = compute_descriptor(materialize(self.model, v), self.mapping).flat
        self.eng.set_variants(idx, variants)
        self.eng.place(idx, qs)
        self.steps[idx] = 0
        self.t[idx] = 0.0
        self.ep_return[idx] = 0.0
        self.prev_action[idx] = 0.0
        self.push_until[idx] = -1.0
        self.eng.push[idx] = 0.0

    # -- frames -------------------------------------------------------------
    def frames(self, est_v: np.ndarray) -> np.ndarray:
        q, qd = self.eng.q_qd()
        q32 = phys_to_env(self.mapping, q)
        qd32 = phys_to_env_rate(self.mapping, qd)
        pitch = self.eng.base_pitch()
        pr = self.eng.omg[:, self.eng.base]
        out = np.empty((self.B, FRAME_DIM))
        out[:, FRAME_SLICES["q"]] = q32
        out[:, FRAME_SLICES["qd"]] = qd32
        out[:, FRAME_SLICES["pitch_rate"]] = pr[:, None]
        out[:, FRAME_SLICES["gravity"]] = np.stack([np.sin(pitch), np.cos(pitch)], axis=-1)
        out[:, FRAME_SLICES["command"]] = self.command
        out[:, FRAME_SLICES["prev_action"]] = self.prev_action
        out[:, FRAME_SLICES["est_v"]] = est_v
        return out

    # -- stepping ------------------------------------------------------------
    def step(self, action_env: np.ndarray, est_v: np.ndarray):
        """Advance one control step.  Returns a dict batch.

        action_env: (B, 32) shared-space action; masked slots are zeroed.
        est_v: (B, 2) velocity estimate to embed in the *next* frame.
        """
        cfg = self.sim_cfg
        a = apply_mask(action_env, self.mask)
        q_target = env_to_phys(self.mapping, self.action_scale * a)
        np.clip(q_target, self.lo, self.hi, out=q_target)

        self._update_pushes()
        tau = self.eng.control_step_pd(q_target)
        self.steps += 1
        self.t += cfg.dt_ctrl

        reward, breakdown = self._reward(a, tau)
        self.ep_return += reward

        reasons = self._termination()
        done = reasons != ALIVE
        completions = [
            (int(i), float(self.ep_return[i]), int(self.steps[i]), REASON_NAMES[int(reasons[i])])
            for i in np.nonzero(done)[0]
        ]
        gt_v = self.eng.vel[:, self.eng.base].copy()
        gt_pr = self.eng.omg[:, self.eng.base].copy()
        self.prev_action = a

        if done.any():
            self.reset_indices(np.nonzero(done)[0])
            est_v = np.where(done[:, None], 0.0, est_v)
        frame = self.frames(est_v)
        return {
            "frame": frame, "reward": reward, "done": done, "reasons": reasons,
            "gt_v": gt_v, "gt_pr": gt_pr, "completions": completions,
            "breakdown": breakdown, "tau": tau,
        }

    def _update_pushes(self):
        if not self.dr_cfg.enabled or self.dr_cfg.push_cap <= 0:
            return
        starting = (self.t >= self.next_push) & (self.push_until < self.t)
        for i in np.nonzero(starting)[0]:
            rng = self.rngs[i]
            ang = rng.uniform(0.0, 2.0 * math.pi)
            mag = rng.uniform(0.0, self.dr_cfg.push_cap)
            self.eng.push[i] = (mag * math.cos(ang), mag * math.sin(ang))
            self.push_until[i] = self.t[i] + self.dr_cfg.push_duration
            self.next_push[i] = self.t[i] + rng.uniform(*self.dr_cfg.push_interval)
        ended = (self.push_until >= 0) & (self.t >= self.push_until)
        self.eng.push[ended] = 0.0
        self.push_until[ended] = -1.0

    def _stance_spread(self) -> np.ndarray:
        if len(self._leaves) < 2:
            return np.zeros(self.B)
        com_x = self.eng.pos[:, self._leaves, 0]
        return com_x.max(axis=1) - com_x.min(axis=1)

    def _reward(self, action: np.ndarray, tau: np.ndarray):
        rc = self.reward_cfg
        vx = self.eng.vel[:, self.eng.base, 0]
        pitch = self.eng.base_pitch()
        pr = self.eng.omg[:, self.eng.base]
        z = self.eng.base_origin_z()
        e_vx = vx - self.command[:, 0]
        spread = self._stance_spread()
        terms = {
            "track_lin": rc.w_track_lin * np.exp(-e_vx ** 2 / 0.25),
            "track_ang": rc.w_track_ang * np.exp(-pr ** 2 / 0.25),
            "height": rc.w_height * np.exp(-(z - rc.h_nom) ** 2 / 0.01),
            "stance": rc.w_stance * np.exp(-(spread - rc.stance_nom) ** 2 / 0.04),
            "orient": -rc.w_orient * pitch ** 2,
            "torque": -rc.w_torque * (tau ** 2).sum(axis=1),
            "action_rate": -rc.w_action_rate * ((action - self.prev_action) ** 2).sum(axis=1),
            "alive": np.full(self.B, rc.alive_bonus),
        }
        total = sum(terms.values())
        return total, terms

    def _termination(self) -> np.ndarray:
        cfg = self.sim_cfg
        finite = (np.isfinite(self.eng.pos).all(axis=(1, 2))
                  & np.isfinite(self.eng.vel).all(axis=(1, 2))
                  & np.isfinite(self.eng.phi).all(axis=1)
                  & np.isfinite(self.eng.omg).all(axis=1))
        reasons = np.zeros(self.B, dtype=np.int64)
        z = self.eng.base_origin_z()
        pitch = np.abs(self.eng.base_pitch())
        # later assignments win: fault > timeout > fall_height > fall_pitch
        reasons[pitch > cfg.fall_pitch] = FALL_PITCH
        reasons[z < cfg.fall_height_frac * self.h_nom] = FALL_HEIGHT
        reasons[self.steps >= cfg.episode_limit] = TIMEOUT
        reasons[~finite] = FAULT
        return reasons


class WalkerSim:
    """Single-env view with the raw simulation contract (no reward/actions)."""

    def __init__(self, model: RobotModel, cfg: SimConfig = SimConfig(),
                 variant: EmbodimentVariant | None = None):
        self.model = model
        self.cfg = cfg
        self.eng = _Engine(model, 1, cfg)
        self.variant = variant if variant is not None else identity_variant(model)
        self.eng.set_variants(np.array([0]), [self.variant])
        self.steps = 0
        self.t = 0.0
        self.command = np.zeros(3)

    def reset(self, q: np.ndarray | None = None, *, seed: int | None = None,
              noise: float | None = None, command=None) -> SimState:
        if q is None:
            q = self.model.nominal_pose.copy()
            if noise:
                rng = np.random.Generator(np.random.Philox(key=abs(int(seed or 0))))
                q = q + rng.uniform(-noise, noise, self.model.n_joints)
        self.eng.place(np.array([0]), q[None, :])
        self.steps = 0
        self.t = 0.0
        if command is not None:
            self.command = np.asarray(command, dtype=np.float64)
        return self.state()

    def state(self) -> SimState:
        e = self.eng
        q, qd = e.q_qd()
        return SimState(
            com=e.pos[0].copy(), phi=e.phi[0].copy(), vel=e.vel[0].copy(),
            omg=e.omg[0].copy(), q=q[0], qd=qd[0], t=self.t, steps=self.steps,
            command=self.command.copy(),
            base_pos=np.array([e.pos[0, e.base, 0] - e.com_off[0, e.base] * math.cos(e.phi[0, e.base]),
                               e.base_origin_z()[0]]),
            base_pitch=float(e.base_pitch()[0]),
            base_vel=e.vel[0, e.base].copy(),
            pitch_rate=float(e.omg[0, e.base]),
        )

    def pd_torques(self, q_target: np.ndarray) -> np.ndarray:
        q, qd = self.eng.q_qd()
        return pd_torques(self.eng.kp[0], self.eng.kd[0], self.eng.tau_max[0],
                          q_target, q[0], qd[0])

    def step(self, tau_phys: np.ndarray) -> StepResult:
        tau = np.asarray(tau_phys, dtype=np.float64)[None, :]
        applied = self.eng.control_step(tau)
        return self._finish_step(applied)

    def step_pd(self, q_target: np.ndarray) -> StepResult:
        """Hold q_target for one control step with the servo at substep rate."""
        applied = self.eng.control_step_pd(np.asarray(q_target, dtype=np.float64)[None, :])
        return self._finish_step(applied)

    def _finish_step(self, applied: np.ndarray) -> StepResult:
        self.steps += 1
        self.t += self.cfg.dt_ctrl
        s = self.state()
        finite = all(np.isfinite(x).all() for x in (s.com, s.phi, s.vel, s.omg))
        reason = None
        if not finite:
            reason = "fault"
        elif self.steps >= self.cfg.episode_limit:
            reason = "timeout"
        elif s.base_pos[1] < self.cfg.fall_height_frac * self.model.nominal_base_height:
            reason = "fall_height"
        elif abs(s.base_pitch) > self.cfg.fall_pitch:
            reason = "fall_pitch"
        return StepResult(state=s, base_vel=s.base_vel.copy(), done=reason is not None,
                          reason=reason, tau=applied[0])

    # Test helpers.
    def joint_residual(self) -> float:
        return float(self.eng.joint_residual()[0])

    def mechanical_energy(self) -> float:
        return float(self.eng.mechanical_energy()[0])

    def momentum(self) -> np.ndarray:
        return self.eng.momentum()[0]


def compute_reward(env: BatchedWalkerEnv, action: np.ndarray, tau: np.ndarray):
    """Reward for the env's current state; returns (total (B,), breakdown)."""
    return env._reward(np.asarray(action), np.asarray(tau))
