"""scikit-learn style wrapper: ``fit`` trains, ``predict`` rolls out, ``score`` is PSNR."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .checkpoint import Checkpoint
from .data import VideoSequence
from .model import ModelConfig, count_params, rollout
from .tensor import Tensor
from .training import EvalReport, TrainSettings, build_models, evaluate, train
from .validation import check_frame_geometry, check_video_array


class STRPMPredictor(BaseEstimator):
    """Next-frame video predictor.

    Parameters mirror :class:`~strpm.model.ModelConfig` and
    :class:`~strpm.training.TrainSettings`. ``X`` is always video data of
    shape ``(n_videos, time, channels, H, W)`` (or 4-D single-channel).

    Attributes
    ----------
    checkpoint_ : Checkpoint
        Trained weights and optimiser state.
    loss_log_ : list of dict
        Per-step loss terms.
    n_params_ : int
    """

    def __init__(self, layers=4, hidden=16, kernel=5, tau=2, theta=2, downsample=4,
                 residual_enabled=True, residual_gates=True, shared_encoder=False,
                 lambda1=0.01, lambda2=0.001, disc_layers=4, k_tap=-1,
                 loss_mode="mse", steps=500, batch_size=8, context=4, lr=1e-3,
                 random_state=0):
        self.layers = layers
        self.hidden = hidden
        self.kernel = kernel
        self.tau = tau
        self.theta = theta
        self.downsample = downsample
        self.residual_enabled = residual_enabled
        self.residual_gates = residual_gates
        self.shared_encoder = shared_encoder
        self.lambda1 = lambda1
        self.lambda2 = lambda2
        self.disc_layers = disc_layers
        self.k_tap = k_tap
        self.loss_mode = loss_mode
        self.steps = steps
        self.batch_size = batch_size
        self.context = context
        self.lr = lr
        self.random_state = random_state

    def _model_config(self, channels: int) -> ModelConfig:
        return ModelConfig(
            layers=self.layers, hidden=self.hidden, kernel=self.kernel, tau=self.tau,
            theta=self.theta, downsample=self.downsample, in_channels=channels,
            residual_enabled=self.residual_enabled, residual_gates=self.residual_gates,
            shared_encoder=self.shared_encoder, lambda1=self.lambda1, lambda2=self.lambda2,
            disc_layers=self.disc_layers, k_tap=self.k_tap,
        )

    def fit(self, X, y=None):
        X = check_video_array(X, min_frames=self.context + 1)
        cfg = self._model_config(X.shape[2])
        settings = TrainSettings(steps=self.steps, loss_mode=self.loss_mode, batch=self.batch_size,
                                 context=self.context, seed=self.random_state, lr=self.lr)
        sequences = [VideoSequence(v) for v in X]
        self.checkpoint_, self.loss_log_ = train(cfg, sequences, settings)
        self.frame_shape_ = X.shape[2:]
        self.n_params_ = count_params(cfg)
        self._net = None
        return self

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "STRPMPredictor":
        cfg = ckpt.config
        est = cls(**{k: v for k, v in cfg.to_dict().items() if k != "in_channels"},
                  context=ckpt.meta.get("context", 4))
        est.checkpoint_ = ckpt
        est.loss_log_ = []
        est.n_params_ = count_params(cfg)
        est.frame_shape_ = None
        est._net = None
        return est

    def _network(self):
        if getattr(self, "_net", None) is None:
            self._net, _ = build_models(self.checkpoint_)
        return self._net

    def _validate_frames(self, X, min_frames: int) -> np.ndarray:
        X = check_video_array(X, min_frames=min_frames)
        if self.frame_shape_ is not None:
            check_frame_geometry(X, *self.frame_shape_)
        return X

    def predict(self, X, horizon: int = 1) -> np.ndarray:
        """Roll out ``horizon`` frames after the context videos ``X``; clamped to [0, 1]."""
        check_is_fitted(self, "checkpoint_")
        X = self._validate_frames(X, 1)
        preds = rollout(self._network(), [Tensor(X[:, t]) for t in range(X.shape[1])], horizon)
        return np.stack([np.clip(p.data, 0.0, 1.0) for p in preds], axis=1)

    def evaluate(self, X, horizon: int = 1) -> EvalReport:
        check_is_fitted(self, "checkpoint_")
        X = self._validate_frames(X, self.context + horizon)
        return evaluate(self.checkpoint_, [VideoSequence(v) for v in X], self.context, horizon)

    def score(self, X, y=None) -> float:
        """Mean next-frame PSNR (dB) over every window of ``X``."""
        return float(np.mean(self.evaluate(X, 1).psnr))
