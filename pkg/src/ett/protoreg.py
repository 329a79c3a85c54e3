"""Prototypical regularisation: projector, centred teacher, distillation loss."""
from __future__ import annotations

import numpy as np

from .numerics import Tensor, as_tensor, log, log_softmax, matmul, softmax, tsum

TEACHER_TAU = 0.04
STUDENT_TAU = 0.1


class Projector:
    """Bias-free d -> d_proj projection shared by prototypes and prefix."""

    def __init__(self, width, d_proj=192, rng=None, std=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        std = 1.0 / np.sqrt(width) if std is None else std
        self.W = Tensor(std * rng.standard_normal((width, d_proj)), requires_grad=True)

    def num_params(self):
        return self.W.size

    def __call__(self, x):
        return matmul(as_tensor(x), self.W)


class EmaCenter:
    """Exponential moving average of the teacher projection's batch mean."""

    def __init__(self, momentum=0.9):
        if not 0.0 < momentum < 1.0:
            raise ValueError("momentum must lie in (0, 1)")
        self.momentum = momentum
        self.value = None

    def update(self, projected):
        batch_mean = np.asarray(projected).mean(axis=0)
        if self.value is None:
            self.value = batch_mean.copy()
        else:
            self.value = self.momentum * self.value + (1.0 - self.momentum) * batch_mean
        return self.value


def _project_const(x, W):
    x = np.asarray(getattr(x, "data", x))
    return x @ np.asarray(getattr(W, "data", W))


def teacher_distribution(protos, W, center=None, tau=TEACHER_TAU, standardize=True,
                         tau_s=STUDENT_TAU):
    """Row-wise softmax((x'-c)/tau) of projected prototypes; carries no gradient.

    With ``standardize=False`` the teacher is softmax(x'/tau_s), no centring.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    proj = _project_const(protos, W)
    if standardize:
        c = proj.mean(axis=0) if center is None else np.asarray(center)
        z = (proj - c) / tau
    else:
        z = proj / tau_s
    return Tensor(softmax(Tensor(z), axis=-1).data)


def student_log_distribution(theta, W, tau_s=STUDENT_TAU):
    if tau_s <= 0:
        raise ValueError("tau_s must be positive")
    return log_softmax(matmul(as_tensor(theta), as_tensor(W)) / tau_s, axis=-1)


def student_distribution(theta, W, tau_s=STUDENT_TAU):
    """softmax(theta W / tau_s) row-wise; differentiable in ``theta`` and ``W``."""
    if tau_s <= 0:
        raise ValueError("tau_s must be positive")
    return softmax(matmul(as_tensor(theta), as_tensor(W)) / tau_s, axis=-1)


def distill_loss(teacher, student, log_student=False):
    """(1/N) sum_n sum_k -a_nk log b_nk for row-stochastic ``teacher``/``student``.

    Pass ``log_student=True`` when ``student`` already holds log-probabilities.
    """
    a = np.asarray(getattr(teacher, "data", teacher))
    logb = as_tensor(student) if log_student else log(as_tensor(student))
    if logb.shape != a.shape:
        raise ValueError(f"teacher {a.shape} and student {logb.shape} differ in shape")
    return -tsum(logb * Tensor(a)) / float(a.shape[0])


def total_loss(ce, dist, lam=0.1):
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    return ce + lam * dist
