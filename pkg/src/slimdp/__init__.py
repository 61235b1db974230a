"""Desk-scale simulator of synchronous data-parallel training.

Three synchronisation protocols are modelled on top of a small numpy MLP:
``plump`` (full push/pull), ``quant`` (stochastically quantised pushes) and
``slim`` (significance core plus random explorer, with a key-cached core).
"""

from slimdp.model import ModelSpec, evaluate, init_params, local_train, loss_and_grad
from slimdp.sim import CostModel, ProtocolConfig, Simulation, comm_time, run_simulation

__all__ = [
    "CostModel",
    "ModelSpec",
    "ProtocolConfig",
    "Simulation",
    "comm_time",
    "evaluate",
    "init_params",
    "local_train",
    "loss_and_grad",
    "run_simulation",
]

__version__ = "0.1.0"
