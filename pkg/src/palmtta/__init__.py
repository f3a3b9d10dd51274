"""Continual test-time adaptation with uncertainty-selected layers and
sensitivity-scaled per-parameter learning rates, on a desk-scale synthetic
distribution-shift benchmark."""
from .autodiff import Tensor, backward
from .network import Network, ParamSlot, build_mlp, per_layer_grad_view, train_source
from .palm import PalmConfig, PalmState, StepReport, palm_step
from .runner import RunConfig, RunReport, run, sweep, report
from .shiftbench import (
    Corruption, StreamScenario, build_ctta, build_gtta, build_mdtta, corrupt, make_clean,
)

__version__ = "0.1.0"
