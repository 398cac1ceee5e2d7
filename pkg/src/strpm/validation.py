"""Input validation for video arrays passed to the estimator API."""

from __future__ import annotations

import numpy as np


def check_video_array(X, *, min_frames: int = 1, name: str = "X") -> np.ndarray:
    """Return ``X`` as a float64 ``(n_videos, time, channels, H, W)`` array.

    A 4-D input is read as single-channel ``(n_videos, time, H, W)``. Values
    must be finite and inside [0, 1].
    """
    arr = np.asarray(X, dtype=np.float64)
    if arr.ndim == 4:
        arr = arr[:, :, None]
    if arr.ndim != 5:
        raise ValueError(f"{name} must be 4-D or 5-D video data, got shape {np.shape(X)}")
    if arr.shape[0] < 1:
        raise ValueError(f"{name} contains no videos")
    if arr.shape[1] < min_frames:
        raise ValueError(f"{name} has {arr.shape[1]} frames per video, need at least {min_frames}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains NaN or infinite values")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError(f"{name} values must lie in [0, 1]")
    return arr


def check_frame_geometry(arr: np.ndarray, channels: int, height: int, width: int, name: str = "X") -> None:
    if arr.shape[2:] != (channels, height, width):
        raise ValueError(
            f"{name} frames have shape {arr.shape[2:]}, estimator was fitted on {(channels, height, width)}"
        )
