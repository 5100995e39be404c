"""
objective.py
Registration loss and its analytic gradient.

    total = mse(R, W(W(S, G_N), G_A)) + alpha * |A - A_I|_1 + beta * mean|Phi - 1|

with Phi = 2 * sigmoid(theta). The similarity term lives in ``mse_similarity``
so another metric can be dropped in without touching the gradient assembly.
"""

from typing import Tuple

import numpy as np
from pydantic import BaseModel, Field, model_validator

import config
import deform
import warp
from errors import InvalidInputError
from volume import IDENTITY_AFFINE, AffineParams, ChannelField, GradientField, Volume3, require_same_dims


class PhiLogits(ChannelField):
    """Unconstrained parameters behind Phi; theta == 0 is the identity."""

    @model_validator(mode="after")
    def validate_logits(self):
        self._check_finite("logits")
        return self

    @classmethod
    def zeros(cls, dims) -> "PhiLogits":
        return cls(data=np.zeros((3,) + tuple(dims)))


class LossBreakdown(BaseModel):
    mse: float = Field(..., ge=0, description="Mean squared intensity error")
    affine_reg: float = Field(..., ge=0, description="Sum of |A - A_I| over the 12 entries, before weighting")
    phi_reg: float = Field(..., ge=0, description="Mean of |Phi - 1| over all voxels and channels, before weighting")
    total: float = Field(..., ge=0)
    alpha: float = Field(..., ge=0)
    beta: float = Field(..., ge=0)


# - - - Parameterization - - -

def sigmoid(theta: np.ndarray) -> np.ndarray:
    # tanh form never overflows and gives exactly 0.5 at 0
    return 0.5 * (1.0 + np.tanh(0.5 * theta))


def phi_array(theta: np.ndarray) -> np.ndarray:
    return np.clip(2.0 * sigmoid(theta), config.PHI_EPS, config.PHI_MAX)


def phi_from_logits(theta: PhiLogits) -> GradientField:
    """Phi = 2 * sigmoid(theta), strictly inside (0, 2)."""
    return GradientField(data=phi_array(theta.data))


def mse_similarity(r: np.ndarray, d: np.ndarray) -> Tuple[float, np.ndarray]:
    """Mean squared error and its derivative with respect to ``d``."""
    resid = d - r
    return float(np.mean(resid * resid)), (2.0 / resid.size) * resid


# - - - Loss - - -

def _check_weights(alpha: float, beta: float) -> None:
    if not (np.isfinite(alpha) and np.isfinite(beta)) or alpha < 0 or beta < 0:
        raise InvalidInputError(f"regularization weights must be finite and >= 0, got alpha={alpha}, beta={beta}")


def _forward(r: np.ndarray, s: np.ndarray, theta: np.ndarray, matrix: np.ndarray, with_grad: bool, one_sided: bool = False):
    dims = r.shape
    phi = phi_array(theta)
    grid_n = deform.integrate_array(phi)
    grid_a = deform.affine_array(matrix, dims)
    intermediate, d_inter = warp.sample(s, grid_n, with_grad=with_grad, one_sided=one_sided)
    out, d_out = warp.sample(intermediate, grid_a, with_grad=with_grad, one_sided=one_sided)
    return phi, grid_n, grid_a, d_inter, out, d_out


def _breakdown(mse: float, phi: np.ndarray, matrix: np.ndarray, alpha: float, beta: float) -> LossBreakdown:
    affine_reg = float(np.sum(np.abs(matrix - IDENTITY_AFFINE)))
    phi_reg = float(np.mean(np.abs(phi - 1.0)))
    return LossBreakdown(
        mse=mse,
        affine_reg=affine_reg,
        phi_reg=phi_reg,
        total=mse + alpha * affine_reg + beta * phi_reg,
        alpha=alpha,
        beta=beta,
    )


def loss_arrays(r, s, theta, matrix, alpha, beta) -> LossBreakdown:
    phi, _, _, _, out, _ = _forward(r, s, theta, matrix, with_grad=False)
    mse, _ = mse_similarity(r, out)
    return _breakdown(mse, phi, matrix, alpha, beta)


def loss_grad_arrays(r, s, theta, matrix, alpha, beta, one_sided: bool = False):
    """
    Array-level gradient of the total loss. With ``one_sided`` the warp
    derivatives at integer sampling coordinates are forward differences
    (the optimizer starts at the identity, where every coordinate is an integer).

    :returns: (d/dtheta (3, nz, ny, nx), d/dA (3, 4), LossBreakdown)
    """
    dims = r.shape
    phi, grid_n, grid_a, d_inter, out, d_out = _forward(r, s, theta, matrix, with_grad=True, one_sided=one_sided)
    mse, upstream = mse_similarity(r, out)

    # second pass: D = W(I, G_A)
    grad_grid_a = upstream * d_out
    grad_inter = warp.sample_adjoint(grid_a, upstream, dims)

    # first pass: I = W(S, G_N), then G_N = cumsum(Phi) - 1
    grad_grid_n = grad_inter * d_inter
    grad_phi = deform.integrate_adjoint(grad_grid_n)
    grad_phi += (beta / phi.size) * np.sign(phi - 1.0)

    sig = 0.5 * phi
    grad_theta = grad_phi * (2.0 * sig * (1.0 - sig))

    grad_a = deform.affine_adjoint(grad_grid_a, dims)
    grad_a += alpha * np.sign(matrix - IDENTITY_AFFINE)

    return grad_theta, grad_a, _breakdown(mse, phi, matrix, alpha, beta)


def loss(r: Volume3, s: Volume3, theta: PhiLogits, a: AffineParams, alpha: float, beta: float) -> LossBreakdown:
    require_same_dims(r, s, theta, what="reference, source and logits")
    _check_weights(alpha, beta)
    return loss_arrays(r.data, s.data, theta.data, a.matrix, alpha, beta)


def loss_grad(r: Volume3, s: Volume3, theta: PhiLogits, a: AffineParams, alpha: float, beta: float):
    """
    Exact gradient of ``loss`` (subgradient sign(0) = 0 for the L1 terms and
    0 at integer sampling coordinates).

    :returns: (dLoss/dtheta array shaped like theta, dLoss/dA (3, 4) array, LossBreakdown)
    """
    require_same_dims(r, s, theta, what="reference, source and logits")
    _check_weights(alpha, beta)
    return loss_grad_arrays(r.data, s.data, theta.data, a.matrix, alpha, beta)
