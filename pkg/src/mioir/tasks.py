"""The seven restoration tasks and their categories."""

from __future__ import annotations

import enum


class TaskId(str, enum.Enum):
    S = "S"  # super-resolution
    B = "B"  # blur
    N = "N"  # noise
    J = "J"  # JPEG
    R = "R"  # rain
    H = "H"  # haze
    L = "L"  # low-light

    @property
    def index(self) -> int:
        return _ORDER.index(self)

    @property
    def category(self) -> str:
        return "luminance" if self in (TaskId.H, TaskId.L) else "detail"

    @property
    def long_name(self) -> str:
        return _NAMES[self]

    @classmethod
    def from_index(cls, i: int) -> "TaskId":
        return _ORDER[i]


_ORDER = [TaskId.S, TaskId.B, TaskId.N, TaskId.J, TaskId.R, TaskId.H, TaskId.L]
_NAMES = {
    TaskId.S: "super-resolution",
    TaskId.B: "deblurring",
    TaskId.N: "denoising",
    TaskId.J: "deJPEG",
    TaskId.R: "deraining",
    TaskId.H: "dehazing",
    TaskId.L: "low-light enhancement",
}

TASKS: tuple[TaskId, ...] = tuple(_ORDER)
NUM_TASKS = len(TASKS)


def parse_tasks(spec) -> list[TaskId]:
    """Parse ``"SBN"``, ``"S,B,N"`` or an iterable of letters into task ids.

    Order is preserved and duplicates are rejected.
    """
    if isinstance(spec, str):
        letters = [c for c in spec.replace(",", "").replace(" ", "")]
    else:
        letters = [t.value if isinstance(t, TaskId) else str(t) for t in spec]
    out = []
    for c in letters:
        try:
            t = TaskId(c.upper())
        except ValueError:
            valid = "".join(t.value for t in TASKS)
            raise ValueError(f"unknown task letter {c!r}; valid letters are {valid}") from None
        if t in out:
            raise ValueError(f"task {c!r} listed twice")
        out.append(t)
    if not out:
        raise ValueError("no tasks given")
    return out
