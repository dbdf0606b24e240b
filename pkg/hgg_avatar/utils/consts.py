# Gaussian parameter layout
N_RAW_CHANNELS = 11          # center(3) + opacity-logit(1) + log-scale(3) + quaternion(4)
N_FEATURE_CHANNELS = 11      # opacity-logit(1) + log-scale(3) + quaternion(4) + color-logit(3)
N_TRAINABLE_CHANNELS = 14    # center(3) + features(11)
N_SHAPE_COEFFS = 10
MAX_INFLUENCES = 4

# Tolerances
UNIT_QUAT_TOL = 1e-6
WEIGHT_SUM_TOL = 1e-6

# Rasterizer
COV2D_FLOOR = 0.3            # px^2, added to the projected covariance
SIGMA_CUTOFF = 3.0           # footprint truncated to the 3-sigma ellipse
TRANSMITTANCE_EPS = 1e-4     # early-out threshold
PSNR_CAP_DB = 100.0

# Graph / model defaults
DEFAULT_D0 = 2
DEFAULT_TOKEN_DIM = 64
DEFAULT_LAYERS = 6
QUERY_INIT_STD = 0.02

# Training defaults
DEFAULT_LR = 4e-4
TOY_LEARNING_RATE = 5e-3    # standard synthetic scene, 300 steps
DEFAULT_GRAD_CLIP = 1.0
DEFAULT_FRAMES_PER_STEP = 8

# HGGF container
HGGF_MAGIC = b"HGGF"
HGGF_VERSION = 1

# CLI exit codes
EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_DIVERGED = 3
