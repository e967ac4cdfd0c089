"""Cross-embodiment locomotion lab for planar walkers."""
from __future__ import annotations

__version__ = "0.1.0"

from .unified_space import (  # noqa: F401
    N_SLOTS, ROSTER, ROSTER_VERSION, MASK_PRESETS, JointMapping,
    build_mapping, phys_to_env, env_to_phys, phys_to_env_rate,
    env_to_phys_rate, apply_mask, roster_index,
)
from .robot_model import (  # noqa: F401
    RobotModel, Link, Joint, WalkerFamilyParams, parse_model, parse_model_text,
    validate_model, serialize_model, save_model, generate_walker,
    topology_hash, fk_frames, link_endpoints, standing_height,
)
from .descriptors import (  # noqa: F401
    DESCRIPTOR_DIM, EmbodimentDescriptor, compute_descriptor,
    descriptor_distance, fit_standardizer, standardize,
)
from .randomization import (  # noqa: F401
    DRConfig, EmbodimentVariant, effective_ranges, sample_variant,
    identity_variant, materialize,
)
from .walker_sim import (  # noqa: F401
    SimConfig, CommandConfig, RewardConfig, SimState, StepResult,
    WalkerSim, BatchedWalkerEnv, pd_torques, compute_reward, FRAME_DIM,
)
