"""
Welcome to the legnav package!
"""
__version__ = "0.1.0"

from legnav.config import RunConfig, TaskMode, load_config
from legnav.env import LeggedNavEnv
from legnav.net import ActorCritic
from legnav.ppo import train
from legnav.store import RunStore
