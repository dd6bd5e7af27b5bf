"""Koopman-model predictive control of a simulated soft knee exoskeleton."""
from .control import KoopmanMpc, MpcConfig, PidController, condense, mpc_step, pid_step
from .emg import EmgPipeline, align_delay, design_bandpass, filter_stream, rms_downsample
from .koopman import KoopmanModel, init_model, lift, load_model, loss, save_model
from .plant import (ActuatorGeometry, PatientPolicy, PlantParams, PlantState, Reference,
                    simulate_episode, step_dynamics, torque_coefficient)
from .qp import QpProblem, solve_box_qp
from .training import TrainConfig, build_dataset, train

__version__ = "0.1.0"

__all__ = [
    "ActuatorGeometry", "EmgPipeline", "KoopmanModel", "KoopmanMpc", "MpcConfig", "PatientPolicy",
    "PidController", "PlantParams", "PlantState", "QpProblem", "Reference", "TrainConfig",
    "align_delay", "build_dataset", "condense", "design_bandpass", "filter_stream", "init_model",
    "lift", "load_model", "loss", "mpc_step", "pid_step", "rms_downsample", "save_model",
    "simulate_episode", "solve_box_qp", "step_dynamics", "torque_coefficient", "train",
]
