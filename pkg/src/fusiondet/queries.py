"""Query state: per-candidate feature vector plus a differentiable 3D box.

The decoder keeps all queries batched. Box parameters are stored as a
(N, 10) tensor with columns [x, y, z, log l, log w, log h, sin yaw, cos yaw,
vx, vy]; sizes live in log space so multiplicative refinement is additive,
and yaw lives as a (sin, cos) pair to avoid wrap discontinuities.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .geometry import Box3D

STATE_DIM = 10


@dataclass
class Query:
    """One decoder candidate: feature vector plus box state."""

    feature: np.ndarray
    box: Box3D


def box_to_state_row(box: Box3D) -> np.ndarray:
    return np.array(
        [
            box.center[0],
            box.center[1],
            box.center[2],
            math.log(box.size[0]),
            math.log(box.size[1]),
            math.log(box.size[2]),
            math.sin(box.yaw),
            math.cos(box.yaw),
            box.velocity[0],
            box.velocity[1],
        ]
    )


def boxes_to_state(boxes: list, dtype=np.float64) -> np.ndarray:
    if not boxes:
        return np.zeros((0, STATE_DIM), dtype=dtype)
    return np.stack([box_to_state_row(b) for b in boxes]).astype(dtype)


def state_to_boxes(state: np.ndarray, scores=None, class_ids=None) -> list:
    """Decode state rows back to Box3D (scores/classes optional)."""
    out = []
    for i, row in enumerate(np.asarray(state, dtype=float)):
        yaw = math.atan2(row[6], row[7])
        out.append(
            Box3D(
                center=row[0:3],
                size=np.exp(row[3:6]),
                yaw=yaw,
                velocity=row[8:10],
                class_id=0 if class_ids is None else int(class_ids[i]),
                score=1.0 if scores is None else float(scores[i]),
            )
        )
    return out


class QueryBatch:
    """All queries of one decode pass, batched."""

    def __init__(self, features: T.Tensor, box_state: T.Tensor):
        if features.data.shape[0] != box_state.data.shape[0]:
            raise ValueError("feature/box count mismatch")
        if box_state.data.shape[1] != STATE_DIM:
            raise ValueError(f"box state must have {STATE_DIM} columns")
        self.features = features
        self.box_state = box_state

    @property
    def count(self) -> int:
        return self.features.data.shape[0]

    @classmethod
    def from_queries(cls, queries: list, dtype) -> "QueryBatch":
        feats = np.stack([q.feature for q in queries]).astype(dtype)
        state = boxes_to_state([q.box for q in queries], dtype=dtype)
        return cls(T.Tensor(feats), T.Tensor(state))

    def centers(self) -> T.Tensor:
        return T.narrow(self.box_state, 1, 0, 3)

    def centers_xy(self) -> T.Tensor:
        return T.narrow(self.box_state, 1, 0, 2)

    def half_extents(self) -> T.Tensor:
        return T.mul(T.exp(T.narrow(self.box_state, 1, 3, 3)), 0.5)

    def yaw_sincos(self) -> T.Tensor:
        return T.narrow(self.box_state, 1, 6, 2)
