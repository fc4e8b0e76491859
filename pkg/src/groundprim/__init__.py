"""Spatially grounded motion primitives for point-cloud manipulation RL."""

from .agent import AgentConfig, HybridAgent, ReplayBuffer, select_eval, select_explore
from .baselines import HacmanLogitAgent, PdqnAgent, RapsAgent, make_agent
from .env import DoubleBinEnv, EnvConfig, compute_reward, is_success
from .geometry import PointCloud, RigidTransform
from .harness import RunConfig, evaluate, export_heatmap, train
from .primitives import PrimitiveAction, PrimitiveConstants, PrimitiveType, execute
from .registration import estimate_goal_flow, register

__version__ = "0.1.0"
