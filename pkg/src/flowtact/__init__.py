"""Visuotactile imitation learning on a deterministic planar toy environment.

A one-step shortcut (flow-matching) policy conditioned on fused
visual-tactile features, plus a module that infers dense binary contact
from point-cloud motion flow, trained and evaluated end to end on a
scripted planar manipulation task.
"""

__version__ = "0.1.0"
