import os
from pathlib import Path

# Get the project root directory
PROJECT_ROOT = Path(__file__).parent.absolute()

# Data directories
DATA_DIR = PROJECT_ROOT / 'data'
CALIB_DIR = DATA_DIR / 'calib'
SCENES_DIR = DATA_DIR / 'scenes'
OUTPUT_DIR = PROJECT_ROOT / 'output'

DEFAULT_CALIB_PATH = str(CALIB_DIR / 'mvsec_346x260.cfg')
DEFAULT_SCENE_PATH = str(SCENES_DIR / 'room.scene')

# Time-surface settings
TS_DECAY = 0.030              # decay constant, seconds
TS_POLARITY = 'both'          # both | positive | negative
EVENTS_SORT = False           # stably sort out-of-order records instead of rejecting them

# Mapping settings
MAPPING_PATCH_HALF_WIDTH = 2          # 5x5 patch
MAPPING_WINDOW = 0.010                # event slice per estimate, seconds
MAPPING_RHO_MIN = 0.1                 # 1/m (10 m)
MAPPING_RHO_MAX = 2.0                 # 1/m (0.5 m)
MAPPING_GRID_SIZE = 24
MAPPING_GN_ITERATIONS = 20
MAPPING_GN_TOLERANCE = 1e-6
MAPPING_MIN_CURVATURE = 1.0           # lower bound on J^T J for an accepted estimate
MAPPING_MIN_ACTIVITY = 1.0            # minimum spread of TS values in the left patch
MAPPING_FUSION_GATE = 2.0
MAPPING_VARIANCE_INFLATION = 1.1
MAPPING_MAX_AGE = 0.5                 # seconds an estimate survives without being refreshed
MAPPING_MAX_EVENTS_PER_CYCLE = 150
MAPPING_INIT_METHOD = 'block'         # block | sgbm
MAPPING_INIT_THRESHOLD = 30           # TS value above which a pixel counts as active
MAPPING_INIT_MIN_PIXELS = 200
MAPPING_INIT_BLOCK_HALF_WIDTH = 3
MAPPING_INIT_DISPARITY_SIGMA = 0.5    # pixels
MAPPING_INIT_MAX_DISPARITY_DIFF = 1
MAPPING_MIN_CORRELATION_SPREAD = 1e-3 # relative gap between best and mean block cost

# Tracking settings
TRACKING_MAX_ITERATIONS = 30
TRACKING_STEP_TOLERANCE = 1e-7
TRACKING_INITIAL_DAMPING = 1e-3
TRACKING_MAX_DAMPING = 1e6
TRACKING_MIN_MAP_POINTS = 50
TRACKING_MAX_MAP_POINTS = 4000
TRACKING_MIN_INLIER_FRACTION = 0.3
TRACKING_MAX_RMS_RESIDUAL = 180.0       # per-point, in TS units
TRACKING_BLUR_SIGMA = 1.0             # 0 disables smoothing of the TS negative
TRACKING_IMAGE_GRADIENT = 'bilinear'  # bilinear | central

# IMU settings
IMU_INIT_DURATION = 1.5               # seconds
IMU_INIT_MIN_SAMPLES = 50
IMU_INIT_MAX_ACC_STD = 0.5            # m/s^2
IMU_INIT_MAX_GYRO_STD = 0.1           # rad/s
IMU_MAX_GAP = 0.1                     # seconds
IMU_MAX_ACC_BIAS = 2.0                # m/s^2
IMU_MAX_GYRO_BIAS = 0.5               # rad/s
GRAVITY_MAGNITUDE = 9.81

# Noise settings (densities)
NOISE_ACC_DENSITY = 0.02              # m/s^2/sqrt(Hz)
NOISE_GYRO_DENSITY = 0.002            # rad/s/sqrt(Hz)
NOISE_ACC_BIAS_WALK = 1e-4
NOISE_GYRO_BIAS_WALK = 1e-4
NOISE_POSITION_STD = 0.01             # m
NOISE_ROTATION_STD_DEG = 0.5
NOISE_INIT_POSITION_STD = 1e-3
NOISE_INIT_VELOCITY_STD = 1e-2
NOISE_INIT_ROTATION_STD = 1e-2
NOISE_INIT_ACC_BIAS_STD = 5e-2
NOISE_INIT_GYRO_BIAS_STD = 5e-3
ESKF_PERIOD = 0.005                   # seconds, nominal IMU period
ESKF_MAX_INJECTION_ANGLE = 0.5        # rad
ESKF_OBSERVATION_GATE = 1e-3          # seconds between prior and vision timestamps

# Pipeline settings
PIPELINE_CYCLE = 0.020                # mapping/tracking cadence, seconds
PIPELINE_VISION_INIT_TIMEOUT = 2.0
PIPELINE_DETERMINISTIC = False
PIPELINE_VISION_UPDATES = True
PIPELINE_DEBUG_EVERY = 0              # 0 disables debug dumps

# Simulator settings
SIM_DURATION = 20.0
SIM_STATIC_PREFIX = 2.0
SIM_IMU_RATE = 200.0
SIM_EVENT_RATE = 1000.0               # fine steps per second
SIM_REFRACTORY = 1e-3
SIM_NEAR_PLANE = 0.1
SIM_EDGE_THRESHOLD = 0.5             # pixels; an edge closer than this lights a pixel
SIM_GT_RATE = 100.0
SIM_NOISE = True                      # IMU white noise and bias random walk
SIM_SEED = 7
SIM_ACC_BIAS = (0.02, -0.01, 0.015)
SIM_GYRO_BIAS = (0.001, -0.002, 0.0015)

# Evaluation settings
EVAL_MAX_DT = 0.01
EVAL_RPE_DELTA = 1

# Debug settings
DEBUG = False


def setup_directories():
    """Ensure all required directories exist."""
    os.makedirs(DATA_DIR, exist_ok=True)
    os.makedirs(CALIB_DIR, exist_ok=True)
    os.makedirs(SCENES_DIR, exist_ok=True)


# Run setup on import
setup_directories()
