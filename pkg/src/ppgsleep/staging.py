"""Sleep-stage taxonomies: raw scoring tokens, the 4-class working set,
and the 3/2-class collapses used for reporting.

Class indices are frozen here and used as confusion-matrix axes everywhere:
4-class Wake=0 Light=1 Deep=2 REM=3; 3-class Wake=0 NREM=1 REM=2;
2-class Wake=0 Sleep=1.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np


class UnscoredStage(ValueError):
    """A stage that must be handled by masking reached the harmonizer."""


class RawStage(enum.Enum):
    """Scoring tokens as they appear in label files (modern + legacy)."""

    W = "W"
    N1 = "N1"
    N2 = "N2"
    N3 = "N3"
    S1 = "S1"
    S2 = "S2"
    S3 = "S3"
    S4 = "S4"
    REM = "R"
    UNSCORED = "UNSCORED"


class Stage4(enum.IntEnum):
    WAKE = 0
    LIGHT = 1
    DEEP = 2
    REM = 3


class StageTask(enum.Enum):
    FOUR = "four"
    THREE = "three"
    TWO = "two"

    @property
    def n_classes(self) -> int:
        return {StageTask.FOUR: 4, StageTask.THREE: 3, StageTask.TWO: 2}[self]

    @property
    def class_names(self) -> tuple[str, ...]:
        return {
            StageTask.FOUR: ("Wake", "Light", "Deep", "REM"),
            StageTask.THREE: ("Wake", "NREM", "REM"),
            StageTask.TWO: ("Wake", "Sleep"),
        }[self]


_HARMONIZE = {
    RawStage.W: Stage4.WAKE,
    RawStage.N1: Stage4.LIGHT,
    RawStage.N2: Stage4.LIGHT,
    RawStage.S1: Stage4.LIGHT,
    RawStage.S2: Stage4.LIGHT,
    RawStage.N3: Stage4.DEEP,
    RawStage.S3: Stage4.DEEP,
    RawStage.S4: Stage4.DEEP,
    RawStage.REM: Stage4.REM,
}

# 4-class index -> collapsed index, per task.
_COLLAPSE = {
    StageTask.FOUR: (0, 1, 2, 3),
    StageTask.THREE: (0, 1, 1, 2),  # Light and Deep merge into NREM
    StageTask.TWO: (0, 1, 1, 1),  # everything but Wake is Sleep
}


def harmonize(raw: RawStage) -> Stage4:
    """Map a raw scoring token onto the 4-class set (legacy S4 is Deep)."""
    if raw is RawStage.UNSCORED:
        raise UnscoredStage("UNSCORED epochs are masked, not harmonized")
    return _HARMONIZE[raw]


def collapse(stage: Stage4, task: StageTask) -> int:
    """Collapse a 4-class stage to the task's class index."""
    return _COLLAPSE[task][int(stage)]


def collapse_array(stages: np.ndarray, task: StageTask) -> np.ndarray:
    """Vectorized :func:`collapse` for integer stage arrays."""
    lut = np.asarray(_COLLAPSE[task], dtype=np.int64)
    return lut[np.asarray(stages, dtype=np.int64)]


@dataclass
class Hypnogram:
    """Per-epoch stage labels with a validity mask.

    ``stages`` holds integer codes: indices into ``RawStage`` order when
    ``space == "raw"`` (the parser's output), or ``Stage4`` values when
    ``space == "four"``. Invalid (unscored / padded) epochs keep a
    placeholder code and ``valid_mask`` False.
    """

    stages: np.ndarray
    valid_mask: np.ndarray
    space: str = "four"
    epoch_seconds: float = 30.0

    def __post_init__(self):
        self.stages = np.asarray(self.stages, dtype=np.int64)
        self.valid_mask = np.asarray(self.valid_mask, dtype=bool)
        if self.stages.shape != self.valid_mask.shape:
            raise ValueError("stages and valid_mask must have the same length")
        if self.space not in ("raw", "four"):
            raise ValueError(f"unknown stage space {self.space!r}")

    def __len__(self) -> int:
        return len(self.stages)


_RAW_ORDER = list(RawStage)


def harmonize_hypnogram(hyp: Hypnogram) -> Hypnogram:
    """Harmonize a raw-space hypnogram into the 4-class space.

    UNSCORED epochs come out masked with stage code 0; already-masked
    epochs stay masked.
    """
    if hyp.space == "four":
        return hyp
    stages = np.zeros(len(hyp), dtype=np.int64)
    mask = hyp.valid_mask.copy()
    for i, code in enumerate(hyp.stages):
        raw = _RAW_ORDER[code]
        if raw is RawStage.UNSCORED:
            mask[i] = False
        elif mask[i]:
            stages[i] = int(harmonize(raw))
    return Hypnogram(stages, mask, space="four", epoch_seconds=hyp.epoch_seconds)
