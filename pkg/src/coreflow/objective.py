"""Scalar losses over the reconstructed tensor, and evaluation metrics."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateVariance
from .tensor import as_tensor, ensure_finite, require_same_shape


@dataclass
class MaskedMse:
    """Mean squared error over observed entries (mask entry 1 = observed)."""

    target: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        require_same_shape(self.target, self.mask, "target and mask")
        values = np.unique(self.mask)
        if not np.isin(values, (0.0, 1.0)).all():
            raise ValueError("mask entries must be 0 or 1")
        self.normalizer = int(self.mask.sum())
        if self.normalizer < 1:
            raise ValueError("mask selects no entries")

    def begin_step(self, t: int) -> None:
        pass

    def loss_and_grad(self, t_hat: np.ndarray) -> tuple[float, np.ndarray]:
        require_same_shape(t_hat, self.target, "prediction and target")
        resid = self.mask * (t_hat - self.target)
        loss = float(np.sum(resid * resid)) / self.normalizer
        grad = (2.0 / self.normalizer) * resid
        ensure_finite(grad, "masked mse gradient")
        return loss, as_tensor(grad)


@dataclass
class NoisyTargetMse:
    """Squared error against a noisy target: ||T - (T* + alpha*N)||_F^2.

    N has unit-variance Gaussian entries.  With resample_each_step the draw is
    refreshed once per optimizer step (begin_step), so the two gradient passes
    of a perturbation-based step see the same noise; otherwise the draw made at
    construction is frozen.
    """

    clean_target: np.ndarray
    alpha: float
    seed: int = 0
    resample_each_step: bool = False
    noise: np.ndarray = field(init=False)

    def __post_init__(self):
        self._rng = np.random.Generator(np.random.PCG64(self.seed))
        self.noise = as_tensor(self._rng.standard_normal(self.clean_target.shape))

    def begin_step(self, t: int) -> None:
        if self.resample_each_step:
            self.noise = as_tensor(self._rng.standard_normal(self.clean_target.shape))

    def noisy_target(self) -> np.ndarray:
        return as_tensor(self.clean_target + self.alpha * self.noise)

    def loss_and_grad(self, t_hat: np.ndarray) -> tuple[float, np.ndarray]:
        require_same_shape(t_hat, self.clean_target, "prediction and target")
        resid = t_hat - self.clean_target - self.alpha * self.noise
        loss = float(np.sum(resid * resid))
        grad = 2.0 * resid
        ensure_finite(grad, "noisy mse gradient")
        return loss, as_tensor(grad)


def r2_score(pred: np.ndarray, truth: np.ndarray, mask: np.ndarray) -> float:
    """1 - SSE/SST over the masked entries; SST uses the masked mean of truth."""
    require_same_shape(pred, truth, "pred and truth")
    require_same_shape(truth, mask, "truth and mask")
    selected = mask != 0
    n = int(np.count_nonzero(selected))
    if n < 2:
        raise DegenerateVariance("mask must select at least 2 entries")
    y = truth[selected]
    y_hat = pred[selected]
    sse = float(np.sum((y - y_hat) ** 2))
    sst = float(np.sum((y - y.mean()) ** 2))
    if sst == 0.0:
        raise DegenerateVariance("masked target variance is zero")
    return 1.0 - sse / sst
