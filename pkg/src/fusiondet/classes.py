"""Object class catalogue shared by the simulator and query generation."""

from __future__ import annotations

import numpy as np

CLASS_NAMES = ("car", "pedestrian", "barrier")

# mean (l, w, h) in meters per class
SIZE_PRIORS = np.array(
    [
        [4.5, 1.9, 1.7],
        [0.7, 0.7, 1.7],
        [2.0, 0.6, 1.0],
    ]
)

# log-normal jitter applied around the size prior when sampling
SIZE_JITTER = 0.08

# mixture used when placing objects and drawing random-query sizes
CLASS_MIX = np.array([0.5, 0.3, 0.2])

# constant LiDAR return intensity per class (ground clutter uses 0.1)
CLASS_INTENSITY = np.array([0.9, 0.6, 0.35])
CLUTTER_INTENSITY = 0.1

# speed scale (m/s) per class for sampled velocities
SPEED_SCALE = np.array([2.5, 0.8, 0.0])

NUM_CLASSES = len(CLASS_NAMES)
