"""Configuration management for MaskDNA."""
import os
from pathlib import Path
from dotenv import load_dotenv

# Load environment variables from .env file
load_dotenv()

# Base directory
BASE_DIR = Path(__file__).parent.parent

# Output locations
OUTPUT_DIR = Path(os.getenv("MASKDNA_OUTPUT_DIR", str(BASE_DIR / "runs")))
LOG_LEVEL = os.getenv("LOG_LEVEL", "INFO")

# Reproducibility: omitted seeds fall back to this constant, never the clock
DEFAULT_SEED = int(os.getenv("MASKDNA_SEED", "0"))

# Tokenization
DEFAULT_K = 6
SUPPORTED_K = (1, 3, 6, 9)

# Sampling defaults
DEFAULT_TEMPERATURE = 1.1
DEFAULT_SAMPLING_STEPS = 50
DEFAULT_STRATEGY = "random"

# Optimizer recipe
PEAK_LR = 8e-5
BETAS = (0.9, 0.95)
WEIGHT_DECAY = 0.01
CLIP_NORM = 1.0
WARMUP_FRACTION = 0.05

# Desk-scale training defaults
DEFAULT_BATCH_SIZE = 8
DEFAULT_TRAIN_STEPS = 2000
CORPUS_SIZE = 4096
CORPUS_TOKENS = 96

# Evaluation
DEFAULT_EMBEDDER_K = 4
