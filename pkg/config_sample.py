# Copy to config.py (importable from the working directory) to override defaults.
# Precedence: defaults < config.py < --config json < environment < command-line flags.

# PATHS AND PROCESS
DATASET_DIR = "dataset"  # Directory of scene_XXXXX folders read by train
CHECKPOINT = ""  # Checkpoint written by train, read by reconstruct; empty = OUTPUT_DIR/model.nsdf
OUTPUT_DIR = "output"  # Every command writes its artifacts and config.json here
SEED = 0  # Root seed; scenes and batches derive their streams from it
THREADS = 0  # Worker threads, 0 = cpu count
LOG_FILE = ""  # Optional log file; keep it outside OUTPUT_DIR
LOG_TIMEZONE = "UTC"  # Timezone of log timestamps

# DATASET GENERATION
SCENE_COUNT = 20
SCENE_KINDS = "sphere box capsule"  # Any of: sphere box capsule cylinder
SAMPLES_PER_SCENE = 4096
SURFACE_BAND = 10.0  # mm; near-surface offsets and labels stay inside this band
NEAR_SURFACE_RATIO = 0.95
UNIFORM_BOUND = 150.0  # mm; half extent of the wrist-frame scene box
GRASP_JITTER = 0.05  # rad; articulation noise on library grasps
IMAGE_SIZE = 224  # px, square render
FOCAL = 480.0  # px

# TRAINING
LEARNING_RATE = 1e-4
EIKONAL_COEFFICIENT = 0.1
BATCH_SIZE = 64
EIKONAL_STEP = 1.0  # mm; central-difference step of the eikonal stencil
ITERATIONS = 5000
CHECKPOINT_EVERY = 500
TRUNCATION = 0.0  # mm; 0 disables the clamped data term
HIDDEN_WIDTH = 64
ACTIVATION = "softplus"  # softplus | relu
SOFTPLUS_BETA = 100.0
OUTPUT_SCALE = 100.0  # mm per unit of network output
PARAM_DTYPE = "float32"  # float32 | float64
CONDITIONING = "articulation"  # articulation | pose_param | none

# ENCODING
NUM_FREQUENCIES = 6
INCLUDE_INPUT = True
INPUT_SCALE = 0.01  # mm -> network units before encoding
PYRAMID_LEVELS = 3
GLOBAL_FEATURE_WIDTH = 16

# REFINEMENT
CONTACT_THRESHOLD = 10.0  # mm
CONTACT_MARGIN = 2.0  # mm
CONTACT_FORM = "as_written"  # as_written | attraction
REFINE_STEPS = 200
REFINE_LR = 1e-5
HAND_SAMPLES_PER_BONE = 32
FREEZE_FIELD = True  # Bake a grid snapshot of the decoder before the loop
BAKE_RESOLUTION = 96
GRADIENT_STEP = 0.5  # mm; central-difference step of the field gradient

# EXTRACTION AND EVALUATION
EXTRACTION_RESOLUTION = 64
METRIC_SAMPLES = 10000
VOXEL_SIZE = 1.0  # mm
TEST_JITTER = 0.0  # rad; articulation noise applied at reconstruct/refine time
