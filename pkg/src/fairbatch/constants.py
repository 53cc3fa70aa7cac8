"""Defaults, presets, file names and other constants."""

from pathlib import Path

MB = 1024**2
GB = 1024**3

# GPU cost model defaults (calibration values, not measurements)
# keep-sorted start
DEFAULT_DECODE_BASE_MS = 5.0
DEFAULT_DECODE_PER_CTX_TOKEN_MS = 0.002
DEFAULT_MAX_BATCH = 64
DEFAULT_MEM_CAPACITY_BYTES = 60 * GB
DEFAULT_MEM_PER_TOKEN_BYTES = MB // 2
DEFAULT_PREFILL_LINEAR_MS = 0.05
DEFAULT_PREFILL_QUAD_MS = 1e-6
DEFAULT_REFRESH_OVERHEAD_MS = 15.0
# keep-sorted end

# Profile buckets: the first bucket holds exactly one output token
DEFAULT_BUCKET_BOUNDS = (1, 32, 64, 128, 256, 512, 1024, 2048, 4096)
# A bare decode stream: the profile isolates the output-length effect
DEFAULT_REFERENCE_INPUT_TOKENS = 1

# Scheduling defaults
# keep-sorted start
DEFAULT_ALPHA = 0.7
DEFAULT_DELTA = 0.1
DEFAULT_INPUT_WEIGHT = 1.0
DEFAULT_OUTPUT_WEIGHT = 4.0
# keep-sorted end

# Prediction defaults
# keep-sorted start
DEFAULT_EMA_ALPHA = 0.2
DEFAULT_INPUT_BINS = 8
DEFAULT_NOISY_L1 = 33.0
DEFAULT_TAG_NOISE = 0.2
DEFAULT_TRAINING_SIZE = 10_000
MIN_TRAINING_CORPUS = 100
# keep-sorted end
BUCKET_LABELS = {
    1: ("all",),
    3: ("short", "medium", "long"),
    5: ("xshort", "short", "medium", "long", "xlong"),
}
DEFAULT_BUCKET_PERCENTILES = {
    1: (),
    3: (33.0, 66.0),
    5: (20.0, 40.0, 60.0, 80.0),
}
# Output lengths that separate the synthetic category tags (short / medium / long)
TAG_BOUNDARIES = (53, 210)
MIX_WEIGHT_GRID = tuple(round(step / 10, 1) for step in range(11))
THRESHOLD_CANDIDATE_PERCENTILES = tuple(range(5, 100, 5))

# Length corpus: log-normal output lengths with 33rd/66th percentiles at 53/210 tokens
CORPUS_OUTPUT_LOG_MEAN = 4.681
CORPUS_OUTPUT_LOG_SIGMA = 1.616
CORPUS_INPUT_LOG_MEAN = 4.5
CORPUS_INPUT_LOG_SIGMA = 1.0
CORPUS_MAX_TOKENS = 4096

# Simulation and reporting defaults
# keep-sorted start
DEFAULT_DURATION_S = 60.0
DEFAULT_MAX_SIM_TIME_S = 120.0
DEFAULT_REPORT_WINDOW_S = 1.0
# keep-sorted end

# Filenames
# keep-sorted start
ABLATION_CSV = "ablation.csv"
COUNTERS_CSV = "counters.csv"
EVENTS_JSONL = "events.jsonl"
MOPE_JSON = "mope.json"
PROFILE_CSV = "profile.csv"
REPORT_JSON = "report.json"
SUMMARY_JSON = "summary.json"
SWEEP_ALPHA_CSV = "sweep_alpha.csv"
UTILIZATION_CSV = "utilization.csv"
# keep-sorted end
DEFAULT_OUTPUT_DIR = Path("results")
