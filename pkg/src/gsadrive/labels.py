"""Action and explanation label schema (BDD-OIA ordering)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

ACTIONS = ("move_forward", "stop_slow", "turn_left", "turn_right")

# Row order of the BDD-OIA table; the two "Traffic light allows" rows are
# distinct classes (turn-left and turn-right context).
EXPLANATIONS = (
    "Traffic light is green",
    "Follow traffic",
    "Road is clear",
    "Traffic light is red",
    "Traffic sign",
    "Obstacle: car",
    "Obstacle: person",
    "Obstacle: rider",
    "Obstacle: others",
    "No lane on the left",
    "Obstacles on the left lane",
    "Solid line on the left",
    "On the left-turn lane",
    "Traffic light allows",
    "Front car turning left",
    "No lane on the right",
    "Obstacles on the right lane",
    "Solid line on the right",
    "On the right-turn lane",
    "Traffic light allows",
    "Front car turning right",
)

N_ACTIONS = len(ACTIONS)
N_EXPLANATIONS = len(EXPLANATIONS)

MOVE_FORWARD, STOP_SLOW, TURN_LEFT, TURN_RIGHT = range(N_ACTIONS)

LIGHT_GREEN = 0
FOLLOW_TRAFFIC = 1
ROAD_CLEAR = 2
LIGHT_RED = 3
OBSTACLE_CAR = 5
OBSTACLE_PERSON = 6
OBSTACLES_LEFT = 10
OBSTACLES_RIGHT = 16


@dataclass(frozen=True)
class LabelPair:
    actions: tuple[int, ...]
    explanations: tuple[int, ...]

    def __post_init__(self) -> None:
        if len(self.actions) != N_ACTIONS or len(self.explanations) != N_EXPLANATIONS:
            raise ValueError(
                f"label lengths must be {N_ACTIONS} and {N_EXPLANATIONS}, "
                f"got {len(self.actions)} and {len(self.explanations)}"
            )
        for bit in self.actions + self.explanations:
            if bit not in (0, 1):
                raise ValueError(f"label bits must be 0 or 1, got {bit!r}")

    @classmethod
    def from_sets(cls, actions: set[int], explanations: set[int]) -> LabelPair:
        return cls(
            tuple(int(i in actions) for i in range(N_ACTIONS)),
            tuple(int(i in explanations) for i in range(N_EXPLANATIONS)),
        )

    def action_array(self) -> np.ndarray:
        return np.array(self.actions, dtype=np.int64)

    def explanation_array(self) -> np.ndarray:
        return np.array(self.explanations, dtype=np.int64)
