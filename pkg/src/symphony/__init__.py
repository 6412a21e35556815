"""Reference-coupled multi-agent traffic simulation with learned policies."""

from .agents import (Discriminator, EncoderConfig, GoalConditionalPolicy,
                     GoalGenerator, Observation, build_models, encode_observation)
from .beam import BeamConfig, BeamResult, rollout_segments, write_trace
from .dynamics import AgentState, ContinuousAction, DiscreteAction
from .metrics import EvalReport, evaluate
from .roadgraph import LaneSegment, Roadgraph, Route, RoutePath
from .scenario import Dataset, RunSegment, generate_dataset, generate_world
from .training import TrainConfig, Trainer, train

__version__ = "0.1.0"

__all__ = [
    "AgentState", "BeamConfig", "BeamResult", "ContinuousAction", "Dataset",
    "DiscreteAction", "Discriminator", "EncoderConfig", "EvalReport",
    "GoalConditionalPolicy", "GoalGenerator", "LaneSegment", "Observation",
    "Roadgraph", "Route", "RoutePath", "RunSegment", "TrainConfig", "Trainer",
    "build_models", "encode_observation", "evaluate", "generate_dataset",
    "generate_world", "rollout_segments", "train", "write_trace",
]
