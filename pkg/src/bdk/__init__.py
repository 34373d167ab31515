"""Desk-scale diffusion latent-space toolkit with boundary-guided editing."""

__version__ = "0.1.0"

from bdk.boundary import Boundary, LatentDataset, SVMConfig, assemble_latent_dataset, fit_boundary, signed_distance
from bdk.editor import EditSpec, boundary_diffusion_conditional, boundary_diffusion_unconditional, strength_sweep
from bdk.geometry import estimate_radius, radius_scan
from bdk.markov_tv import DiscreteChain, chain_mixing_time, tv_distance
from bdk.mixing import cross_validate_mixing, find_mixing_step
from bdk.noise_model import NoisePredictor, load_checkpoint, save_checkpoint
from bdk.schedule import NoiseSchedule, StepPlan, make_desk_schedule, make_linear_schedule, make_step_plan, q_sample
from bdk.synth_data import SpriteConfig, attribute_oracle, generate_sprite_dataset
from bdk.trajectory import ddim_invert, reconstruct, run_trajectory

__all__ = [
    "Boundary",
    "DiscreteChain",
    "EditSpec",
    "LatentDataset",
    "NoisePredictor",
    "NoiseSchedule",
    "SVMConfig",
    "SpriteConfig",
    "StepPlan",
    "assemble_latent_dataset",
    "attribute_oracle",
    "boundary_diffusion_conditional",
    "boundary_diffusion_unconditional",
    "chain_mixing_time",
    "cross_validate_mixing",
    "ddim_invert",
    "estimate_radius",
    "find_mixing_step",
    "fit_boundary",
    "generate_sprite_dataset",
    "load_checkpoint",
    "make_desk_schedule",
    "make_linear_schedule",
    "make_step_plan",
    "q_sample",
    "radius_scan",
    "reconstruct",
    "run_trajectory",
    "save_checkpoint",
    "signed_distance",
    "strength_sweep",
    "tv_distance",
]
