"""
Config module for storing numerical defaults, preprocessing constants and
runtime settings (thread count, log level).
"""
import os

from dotenv import dotenv_values

# Load overrides straight from .env (system variables are not consulted)
_env_vars = dotenv_values(".env")

# Optimizer
DEFAULT_LR = 1e-3
DEFAULT_LR_DROP_FACTOR = 10.0
DEFAULT_PATIENCE_DROP = 50
DEFAULT_PATIENCE_STOP = 100
DEFAULT_EVAL_EVERY = 10
DEFAULT_MAX_ITERS = 2000
DEFAULT_ALPHA = 1e-6 # weight of the affine identity prior
DEFAULT_BETA = 1e-6 # weight of the gradient-field identity prior
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

# Gradient field range. Saturated logits are clipped so Phi stays strictly in (0, 2)
PHI_EPS = 1e-12
PHI_MAX = 2.0 - 2.0 ** -51

# Preprocessing (intensity window, isotropic downscale)
WINDOW_LO = 0.0
WINDOW_HI = 1300.0
SCALE_FACTOR = 2.0 / 3.0

# Synthetic problems
PHANTOM_MIN_DIM = 8
LANDMARK_COUNT = 11

# Runtime
THREADS = int(_env_vars.get("REGISTRATION_THREADS") or os.cpu_count() or 1)
LOG_LEVEL = _env_vars.get("REGISTRATION_LOG_LEVEL") or "INFO"
