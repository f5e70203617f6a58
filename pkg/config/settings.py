import os
from dotenv import load_dotenv

# Load environment variables from .env file
load_dotenv()

# Output and config locations
BENCHKIT_OUT = os.getenv('BENCHKIT_OUT', 'results')
BENCHKIT_CONFIG = os.getenv('BENCHKIT_CONFIG', './benchkit.yml')
BENCHKIT_LOG_LEVEL = os.getenv('BENCHKIT_LOG_LEVEL', 'INFO')
BENCHKIT_LOG_DIR = os.getenv('BENCHKIT_LOG_DIR')  # None -> the run's output dir

# Client defaults; the ack/retransmit policy is a harness choice and is flagged in reports
DEFAULT_KEEP_ALIVE_S = 60
DEFAULT_CONNECT_TIMEOUT_S = 5.0
DEFAULT_ACK_TIMEOUT_S = 5.0
DEFAULT_MAX_RETRANSMITS = 3

# Runner defaults
DEFAULT_DRAIN_BASE_S = 10.0
DEFAULT_DRAIN_PER_MB_S = 1.0
DEFAULT_REPETITIONS = 10
DEFAULT_WARMUP_RUNS = 1

# Proxy read size per chunk
CHUNK_READ_SIZE = 16384

# Default plan targets (used by `scenarios` and `stub` when no config is given)
DEFAULT_PROXY_HOST = '127.0.0.1'
DEFAULT_STUB_PORT = 1883
