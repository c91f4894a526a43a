"""Per-layer start/stop schedule for interleaved layer training, and the plateau test."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError


@dataclass
class ILTSchedule:
    """Epoch window ``[start_ep[i], plateau_ep[i]]`` in which layer ``i`` is trained.

    Epochs are numbered from 1, so a layer whose plateau epoch is 0 is never
    trained.  In fast mode each layer starts ``overlap`` epochs before the
    plateau of its predecessor.
    """

    start_ep: list[int]
    plateau_ep: list[int]
    max_epoch: int = 0
    overlap: int = 3
    fast_mode: bool = False
    window: int = 3
    min_delta: float = 1e-3

    def __post_init__(self):
        self.start_ep = [int(s) for s in self.start_ep]
        self.plateau_ep = [int(p) for p in self.plateau_ep]
        if not self.max_epoch:
            self.max_epoch = max(self.plateau_ep, default=0)
        self.validate()

    def validate(self):
        if len(self.start_ep) != len(self.plateau_ep):
            raise ConfigError(f"start_ep has {len(self.start_ep)} entries, plateau_ep {len(self.plateau_ep)}")
        for i, (s, p) in enumerate(zip(self.start_ep, self.plateau_ep)):
            if not 0 <= s <= p <= self.max_epoch:
                raise ConfigError(
                    f"layer {i}: need 0 <= start_ep ({s}) <= plateau_ep ({p}) <= max_epoch ({self.max_epoch})"
                )
        if self.overlap < 0:
            raise ConfigError(f"overlap must be >= 0, got {self.overlap}")
        if self.window < 1 or self.min_delta < 0:
            raise ConfigError(f"plateau window {self.window} / min_delta {self.min_delta} out of range")
        if self.fast_mode:
            for i in range(len(self.start_ep) - 1):
                expected = fast_start(self.plateau_ep[i], self.overlap)
                if self.start_ep[i + 1] != expected:
                    raise ConfigError(
                        f"fast mode: start_ep[{i + 1}]={self.start_ep[i + 1]} but plateau_ep[{i}] - overlap "
                        f"gives {expected}"
                    )

    @property
    def layer_count(self) -> int:
        return len(self.start_ep)

    def is_active(self, layer: int, epoch: int) -> bool:
        return self.start_ep[layer] <= epoch <= self.plateau_ep[layer]

    def active_layers(self, epoch: int) -> list[int]:
        return [i for i in range(self.layer_count) if self.is_active(i, epoch)]

    @classmethod
    def uniform(cls, plateau_ep, **kwargs):
        """All layers start together (the configuration found to give the best accuracy)."""
        return cls(start_ep=[0] * len(plateau_ep), plateau_ep=list(plateau_ep), **kwargs)


def fast_start(predecessor_plateau: int, overlap: int) -> int:
    return max(0, predecessor_plateau - overlap)


def default_schedule() -> ILTSchedule:
    return ILTSchedule.uniform([10, 15, 19, 25])


@dataclass
class PlateauDetector:
    window: int = 3
    min_delta: float = 1e-3
    history: dict = field(default_factory=dict)

    def update(self, layer: int, loss: float) -> bool:
        series = self.history.setdefault(layer, [])
        series.append(float(loss))
        return detect_plateau(series, self.window, self.min_delta)


def detect_plateau(history, window: int = 3, min_delta: float = 1e-3) -> bool:
    """True when the last ``window`` epochs stopped improving the loss.

    The best loss inside the window is compared with the best loss before it;
    the improvement is expressed as a geometric per-epoch relative rate, and a
    rate below ``min_delta`` counts as a plateau.  Needs more than ``window``
    entries.
    """
    if len(history) == 0:
        raise ValueError("history must be non-empty")
    if len(history) <= window:
        return False
    h = np.asarray(history, dtype=np.float64)
    before = h[:-window].min()
    recent = h[-window:].min()
    if recent >= before:
        return True
    if before > 0 and recent > 0:
        rate = 1.0 - (recent / before) ** (1.0 / window)
    else:
        rate = (before - recent) / window
    return bool(rate < min_delta)
