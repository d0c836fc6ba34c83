"""Choosing which backbone layers receive a fusion layer."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum


class PlanError(ValueError):
    pass


class Mode(str, Enum):
    CENTERED = "centered"
    FRONT_ANCHORED = "front-anchored"


def round_half_away(x: float) -> int:
    # guard against 0.5 landing a hair below due to binary fractions
    return int(math.floor(abs(x) + 0.5 + 1e-9)) * (1 if x >= 0 else -1)


@dataclass(frozen=True)
class LayerPlan:
    n_layers: int
    selected: tuple[int, ...]
    rho: float
    mode: Mode = Mode.CENTERED
    start_offset: float = 0.0
    end_buffer: float = 0.0
    warnings: tuple[str, ...] = field(default=())

    def to_json(self) -> dict:
        return {"N": self.n_layers, "rho": self.rho, "mode": self.mode.value,
                "start_offset": self.start_offset, "end_buffer": self.end_buffer,
                "selected": list(self.selected), "warnings": list(self.warnings)}


@dataclass
class Diagnostics:
    errors: list[str] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.errors


def plan_layers(n_layers: int, rho: float, mode: Mode | str = Mode.CENTERED,
                end_buffer: float = 0.0, start_offset: float = 0.0) -> LayerPlan:
    """Select ``round(rho * N)`` consecutive layers.

    ``centered`` leaves ``floor((N - k) / 2)`` layers below the window of
    ``k = round(rho * N)`` layers, so growing ``rho`` only ever adds layers.
    ``front-anchored`` starts at ``round(start_offset * N)`` and clips the
    window so the last ``round(end_buffer * N)`` layers stay untouched.
    """
    mode = Mode(mode)
    if n_layers < 1:
        raise ValueError(f"need at least one layer, got {n_layers}")
    if not 0.0 < rho <= 1.0:
        raise ValueError(f"fusion ratio must lie in (0, 1], got {rho}")
    if not (0.0 <= end_buffer < 1.0 and 0.0 <= start_offset < 1.0 and start_offset + end_buffer < 1.0):
        raise ValueError("start offset and end buffer must be in [0, 1) with a sum below 1")

    count = round_half_away(rho * n_layers)
    if mode is Mode.CENTERED:
        start = (n_layers - count) // 2
        stop = n_layers
    else:
        start = round_half_away(start_offset * n_layers)
        stop = n_layers - round_half_away(end_buffer * n_layers)
    selected = tuple(range(start, min(start + count, stop)))
    if not selected:
        raise PlanError(f"no layer selected for N={n_layers}, rho={rho}, mode={mode.value}")

    warnings = []
    if rho == 1.0:
        warnings.append("rho=1.0 fuses into every layer; expect degraded generation")
    if selected[-1] == n_layers - 1:
        warnings.append("final layer receives fusion")
    return LayerPlan(n_layers, selected, rho, mode, start_offset, end_buffer, tuple(warnings))


def validate_plan(plan: LayerPlan) -> Diagnostics:
    diag = Diagnostics()
    sel = list(plan.selected)
    if plan.n_layers < 1:
        diag.errors.append(f"N={plan.n_layers} is not positive")
    if not sel:
        diag.errors.append("plan selects no layers")
    if any(b <= a for a, b in zip(sel, sel[1:])):
        diag.errors.append("selected indices are not strictly increasing")
    bad = [i for i in sel if not 0 <= i < plan.n_layers]
    if bad:
        diag.errors.append(f"indices out of range [0, {plan.n_layers}): {bad}")
    if not 0.0 < plan.rho <= 1.0:
        diag.errors.append(f"rho={plan.rho} outside (0, 1]")
    if plan.rho == 1.0:
        diag.warnings.append("rho=1.0 fuses into every layer; expect degraded generation")
    if sel and sel[-1] == plan.n_layers - 1:
        diag.warnings.append("final layer receives fusion")
    return diag


def explicit_plan(n_layers: int, selected) -> LayerPlan:
    """A hand-picked plan, e.g. for tests; ``rho`` is derived from its size."""
    selected = tuple(sorted(set(int(i) for i in selected)))
    rho = len(selected) / n_layers if n_layers else 0.0
    return LayerPlan(n_layers, selected, rho if selected else 0.0)
