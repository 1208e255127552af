"""Embodiment action layouts.

All three share the leading channels so that the planar motion and the
gripper live at the same padded index for every robot.
"""

from __future__ import annotations

from dataclasses import dataclass

from ..codec import ControlMode


@dataclass(frozen=True)
class Embodiment:
    name: str
    channels: tuple[str, ...]
    control_mode: ControlMode
    horizon: int = 8

    @property
    def dim(self) -> int:
        return len(self.channels)

    def index(self, channel: str) -> int | None:
        try:
            return self.channels.index(channel)
        except ValueError:
            return None


MOBILE = Embodiment("mobile", ("v_row", "v_col", "grip", "lift", "arm", "yaw", "torso"), ControlMode.JOINT)
FIXED_A = Embodiment("fixed_a", ("v_row", "v_col", "grip", "lift", "arm"), ControlMode.END_EFFECTOR)
FIXED_B = Embodiment("fixed_b", ("v_row", "v_col", "grip", "lift"), ControlMode.END_EFFECTOR)

EMBODIMENTS = {e.name: e for e in (MOBILE, FIXED_A, FIXED_B)}
D_MAX = max(e.dim for e in EMBODIMENTS.values())
PROPRIO_DIM = 7
