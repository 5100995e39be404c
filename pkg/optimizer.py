"""
optimizer.py
Direct minimization of the registration loss over (theta, A) with Adam.

The learning-rate schedule counts evaluation rounds of ``eval_every``
iterations: the rate is divided by ``lr_drop_factor`` after ``patience_drop``
rounds without a new best loss, and optimization stops after
``patience_stop`` such rounds (or ``max_iters``). The best-loss parameters
are returned, not the last iterate.
"""

import logging
from typing import Dict, List, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, PositiveInt, model_validator

import config
import deform
import objective
import warp
from errors import DivergenceError
from objective import LossBreakdown, PhiLogits
from volume import IDENTITY_AFFINE, AffineParams, DeformationGrid, Volume3, require_same_dims

logger = logging.getLogger(__name__)


class OptimConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    lr0: float = Field(config.DEFAULT_LR, gt=0, description="Initial learning rate")
    lr_drop_factor: float = Field(config.DEFAULT_LR_DROP_FACTOR, ge=1, description="Divisor applied on a plateau")
    patience_drop: PositiveInt = Field(config.DEFAULT_PATIENCE_DROP, description="Stale rounds before a learning-rate drop")
    patience_stop: PositiveInt = Field(config.DEFAULT_PATIENCE_STOP, description="Stale rounds before stopping")
    eval_every: PositiveInt = Field(config.DEFAULT_EVAL_EVERY, description="Iterations per evaluation round")
    alpha: float = Field(config.DEFAULT_ALPHA, ge=0, description="Weight of |A - A_I|_1")
    beta: float = Field(config.DEFAULT_BETA, ge=0, description="Weight of |Phi - 1|_1")
    max_iters: PositiveInt = Field(config.DEFAULT_MAX_ITERS, description="Iteration cap per pyramid level")
    adam_beta1: float = Field(config.ADAM_BETA1, ge=0, lt=1)
    adam_beta2: float = Field(config.ADAM_BETA2, ge=0, lt=1)
    adam_eps: float = Field(config.ADAM_EPS, gt=0)
    seed: int = Field(0, description="Recorded for reproducibility; initialization is the identity")
    pyramid_levels: List[PositiveInt] = Field(default_factory=lambda: [1], description="Downsample factors, coarse to fine")
    use_affine: bool = Field(True, description="Optimize the affine part (held at A_I otherwise)")
    use_deformable: bool = Field(True, description="Optimize the gradient field (held at Phi_I otherwise)")
    min_delta: float = Field(0.0, ge=0, description="Minimum best-loss decrease that counts as improvement")

    @model_validator(mode="after")
    def validate_schedule(self):
        if self.patience_stop <= self.patience_drop:
            raise ValueError("patience_stop must be greater than patience_drop")
        if not self.pyramid_levels:
            raise ValueError("pyramid_levels must not be empty")
        return self


class AdamState(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    params: Dict[str, np.ndarray]
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    t: int = 0
    beta1: float = config.ADAM_BETA1
    beta2: float = config.ADAM_BETA2
    eps: float = config.ADAM_EPS

    @classmethod
    def start(cls, params: Dict[str, np.ndarray], **hyper) -> "AdamState":
        params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
        return cls(
            params=params,
            m={k: np.zeros_like(v) for k, v in params.items()},
            v={k: np.zeros_like(v) for k, v in params.items()},
            **hyper,
        )


class RegistrationResult(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    a: AffineParams
    theta: PhiLogits
    grid: DeformationGrid = Field(..., description="Effective composed grid G_eff")
    grid_deformable: DeformationGrid = Field(..., description="Deformable part G_N alone")
    warped: Volume3 = Field(..., description="Two-pass warped source")
    loss_trace: List[LossBreakdown] = Field(..., min_length=1)
    best_loss: LossBreakdown
    iterations_run: int
    converged: bool
    final_lr: float


# - - - Adam - - -

def adam_step(state: AdamState, grads: Dict[str, np.ndarray], lr: float) -> AdamState:
    """One bias-corrected Adam update; returns a new state, the input is untouched."""
    for k, g in grads.items():
        if not np.isfinite(g).all():
            raise DivergenceError(f"non-finite gradient for '{k}'")

    t = state.t + 1
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    params, m, v = {}, {}, {}
    for k, p in state.params.items():
        g = grads[k]
        m[k] = state.beta1 * state.m[k] + (1.0 - state.beta1) * g
        v[k] = state.beta2 * state.v[k] + (1.0 - state.beta2) * (g * g)
        denom = np.sqrt(v[k] / bc2) + state.eps
        params[k] = p - (lr / bc1) * m[k] / denom

    return state.model_copy(update={"params": params, "m": m, "v": v, "t": t})


# - - - Registration - - -

def level_dims(dims, factor: int):
    return tuple(max(2, int(round((n - 1) / factor)) + 1) for n in dims)


def _run_level(r: np.ndarray, s: np.ndarray, theta: np.ndarray, matrix: np.ndarray, cfg: OptimConfig, trace: list):
    state = AdamState.start(
        {"theta": theta, "affine": matrix},
        beta1=cfg.adam_beta1,
        beta2=cfg.adam_beta2,
        eps=cfg.adam_eps,
    )
    lr = cfg.lr0
    best = np.inf
    best_params = {k: v.copy() for k, v in state.params.items()}
    round_best = np.inf
    stale_drop = stale_stop = 0
    converged = False
    iterations = 0

    for it in range(cfg.max_iters):
        p = state.params
        g_theta, g_affine, breakdown = objective.loss_grad_arrays(
            r, s, p["theta"], p["affine"], cfg.alpha, cfg.beta, one_sided=True
        )
        iterations += 1
        if not np.isfinite(breakdown.total):
            raise DivergenceError(f"non-finite loss at iteration {it}", trace)
        trace.append(breakdown)
        phi = objective.phi_array(p["theta"])
        if not ((phi > 0.0) & (phi < 2.0)).all():
            raise DivergenceError(f"gradient field left (0, 2) at iteration {it}", trace)

        if breakdown.total < best:
            best = breakdown.total
            best_params = {k: v.copy() for k, v in p.items()}

        if (it + 1) % cfg.eval_every == 0:
            if best < round_best - cfg.min_delta:
                round_best = best
                stale_drop = stale_stop = 0
            else:
                stale_drop += 1
                stale_stop += 1
            logger.debug(f"iter {it + 1}: loss {breakdown.total:.6e} best {best:.6e} lr {lr:.1e} stale {stale_stop}")

            if stale_stop >= cfg.patience_stop:
                converged = True
                logger.info(f"no improvement for {stale_stop} rounds, stopping at iteration {it + 1}")
                break
            if stale_drop >= cfg.patience_drop:
                lr /= cfg.lr_drop_factor
                stale_drop = 0
                logger.info(f"plateau at iteration {it + 1}, learning rate -> {lr:.1e}")

        if not cfg.use_deformable:
            g_theta = np.zeros_like(g_theta)
        if not cfg.use_affine:
            g_affine = np.zeros_like(g_affine)
        try:
            state = adam_step(state, {"theta": g_theta, "affine": g_affine}, lr)
        except DivergenceError as e:
            raise DivergenceError(f"{e} at iteration {it}", trace) from e

    return best_params["theta"], best_params["affine"], iterations, converged, lr


def register(r: Volume3, s: Volume3, cfg: Optional[OptimConfig] = None) -> RegistrationResult:
    """
    Register source ``s`` onto reference ``r`` (intensities expected in [0, 1]).

    Starts from the identity (theta = 0, A = A_I). With several pyramid levels,
    theta is trilinearly upsampled between levels and A carries over unchanged
    since it acts on normalized coordinates.
    """
    cfg = cfg or OptimConfig()
    dims = require_same_dims(r, s, what="reference and source")

    theta = None
    matrix = IDENTITY_AFFINE.copy()
    trace: List[LossBreakdown] = []
    iterations = 0
    converged = False
    lr = cfg.lr0

    for factor in cfg.pyramid_levels:
        dims_l = level_dims(dims, factor)
        logger.info(f"pyramid level x{factor}: dims {dims_l}")
        r_l = warp.resample_array(r.data, dims_l)
        s_l = warp.resample_array(s.data, dims_l)
        if theta is None:
            theta = np.zeros((3,) + dims_l)
        else:
            theta = np.stack([warp.resample_array(theta[d], dims_l) for d in range(3)])

        theta, matrix, n_iter, converged, lr = _run_level(r_l, s_l, theta, matrix, cfg, trace)
        iterations += n_iter

    if tuple(theta.shape[1:]) != dims:
        theta = np.stack([warp.resample_array(theta[d], dims) for d in range(3)])

    theta_model = PhiLogits(data=theta)
    a = AffineParams(matrix=matrix)
    phi = objective.phi_from_logits(theta_model)
    warped, grid = deform.compose_and_warp(s, phi, a)
    best = objective.loss(r, s, theta_model, a, cfg.alpha, cfg.beta)

    return RegistrationResult(
        a=a,
        theta=theta_model,
        grid=grid,
        grid_deformable=deform.integrate_gradients(phi),
        warped=warped,
        loss_trace=trace,
        best_loss=best,
        iterations_run=iterations,
        converged=converged,
        final_lr=lr,
    )
