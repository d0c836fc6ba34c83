"""Frame-strict semantic-to-geometry fusion with importance gating, built on a small numpy autodiff."""

from .autodiff import Tensor, backward, parameter
from .grid import Provenance, TokenGrid, resample_geometry, spatial_merge
from .planner import LayerPlan, plan_layers
from .sgf import SgfParams, sgf_forward, sgf_init

__all__ = [
    "LayerPlan", "Provenance", "SgfParams", "Tensor", "TokenGrid", "backward", "parameter",
    "plan_layers", "resample_geometry", "sgf_forward", "sgf_init", "spatial_merge",
]
