"""History of per-step batch-mean entropies and its running reference mean."""

from __future__ import annotations

import math
from dataclasses import dataclass


class EmptyWindowError(ValueError):
    pass


@dataclass(frozen=True)
class EntropyWindow:
    history: tuple[float, ...] = ()
    capacity: int | None = None

    def __post_init__(self):
        if self.capacity is not None and self.capacity < 1:
            raise ValueError("window capacity must be positive")

    def __len__(self) -> int:
        return len(self.history)

    def to_dict(self) -> dict:
        return {"history": list(self.history), "capacity": self.capacity}

    @classmethod
    def from_dict(cls, d: dict) -> "EntropyWindow":
        return cls(tuple(float(x) for x in d["history"]), d.get("capacity"))


def push(window: EntropyWindow, value: float) -> EntropyWindow:
    if not value >= 0.0:
        raise ValueError(f"batch entropy must be non-negative, got {value!r}")
    hist = window.history + (float(value),)
    if window.capacity is not None and len(hist) > window.capacity:
        hist = hist[-window.capacity :]
    return EntropyWindow(hist, window.capacity)


def historical_mean(window: EntropyWindow) -> float:
    """Arithmetic mean of the stored entries (all of them when unbounded)."""
    if not window.history:
        raise EmptyWindowError("historical mean of an empty window")
    m = math.fsum(window.history) / len(window.history)
    # keep the rounding of the division inside the data range
    return min(max(m, min(window.history)), max(window.history))
