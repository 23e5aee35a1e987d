"""
Configuration management for the DenseSteer toolkit.

Values come from the process environment, optionally seeded from a dotenv
file; CLI flags override both (see ``densesteer.py``).
"""
import os
from typing import Any, Dict, Optional
from dotenv import load_dotenv

from errors import ConfigError

# Load environment variables
load_dotenv()


def _env_bool(name: str, default: str) -> bool:
    return os.getenv(name, default).strip().lower() in ('1', 'true', 'yes', 'on')


class Config:
    """Application configuration class."""

    # Logging
    LOG_LEVEL = 'INFO'
    LOG_FILE: Optional[str] = None
    USE_TIMESTAMPED_LOGS = False

    # Backend
    BACKEND = 'micro'
    WORKERS = 1

    # Generation / evaluation defaults
    MAX_NEW_TOKENS = 2048
    POSITION_POLICY = 'generated-only'
    PROMPT_STYLE = 'cot'

    # Pair construction
    N_PAIRS = 50
    MAX_MERGES = 3
    SHORT_STEP_TOKENS = 12

    # Sweep grid
    LAMBDA_MIN = -20.0
    LAMBDA_MAX = 20.0
    LAMBDA_STEP = 2.0

    # Scoring
    NLL_BIN_WIDTH = 0.25

    # Dataset split
    VALIDATION_SIZE = 100
    SPLIT_SEED = 0

    # External rewriter (OpenAI-compatible chat completions)
    REWRITER_BASE_URL = 'https://api.openai.com/v1'
    REWRITER_MODEL: Optional[str] = None
    REWRITER_API_KEY_ENV = 'OPENAI_API_KEY'
    REWRITER_CACHE_DIR = 'rewriter_cache'
    REWRITER_MAX_RETRIES = 5
    REWRITER_BACKOFF_FACTOR = 1.0
    REWRITER_TIMEOUT = 60.0
    REWRITER_MAX_CONCURRENCY = 4
    OFFLINE = False

    @classmethod
    def load(cls, env_file: Optional[str] = None) -> None:
        """
        (Re)read configuration from the environment.

        Args:
            env_file: Optional dotenv file. Variables already present in the
                process environment take precedence over the file.
        """
        if env_file:
            if not os.path.exists(env_file):
                raise ConfigError(f"Config file not found: {env_file}")
            load_dotenv(env_file, override=False)

        cls.LOG_LEVEL = os.getenv('LOG_LEVEL', 'INFO')
        cls.LOG_FILE = os.getenv('LOG_FILE') or None
        cls.USE_TIMESTAMPED_LOGS = _env_bool('USE_TIMESTAMPED_LOGS', 'false')

        try:
            cls.BACKEND = os.getenv('DENSESTEER_BACKEND', 'micro')
            cls.WORKERS = int(os.getenv('DENSESTEER_WORKERS', 1))
            cls.MAX_NEW_TOKENS = int(os.getenv('DENSESTEER_MAX_NEW_TOKENS', 2048))
            cls.POSITION_POLICY = os.getenv('DENSESTEER_POSITION_POLICY', 'generated-only')
            cls.PROMPT_STYLE = os.getenv('DENSESTEER_PROMPT_STYLE', 'cot')

            cls.N_PAIRS = int(os.getenv('DENSESTEER_N_PAIRS', 50))
            cls.MAX_MERGES = int(os.getenv('DENSESTEER_MAX_MERGES', 3))
            cls.SHORT_STEP_TOKENS = int(os.getenv('DENSESTEER_SHORT_STEP_TOKENS', 12))

            cls.LAMBDA_MIN = float(os.getenv('DENSESTEER_LAMBDA_MIN', -20.0))
            cls.LAMBDA_MAX = float(os.getenv('DENSESTEER_LAMBDA_MAX', 20.0))
            cls.LAMBDA_STEP = float(os.getenv('DENSESTEER_LAMBDA_STEP', 2.0))

            cls.NLL_BIN_WIDTH = float(os.getenv('DENSESTEER_NLL_BIN_WIDTH', 0.25))

            cls.VALIDATION_SIZE = int(os.getenv('DENSESTEER_VALIDATION_SIZE', 100))
            cls.SPLIT_SEED = int(os.getenv('DENSESTEER_SPLIT_SEED', 0))

            cls.REWRITER_BASE_URL = os.getenv('DENSESTEER_REWRITER_BASE_URL', 'https://api.openai.com/v1')
            cls.REWRITER_MODEL = os.getenv('DENSESTEER_REWRITER_MODEL') or None
            cls.REWRITER_API_KEY_ENV = os.getenv('DENSESTEER_REWRITER_API_KEY_ENV', 'OPENAI_API_KEY')
            cls.REWRITER_CACHE_DIR = os.getenv('DENSESTEER_REWRITER_CACHE_DIR', 'rewriter_cache')
            cls.REWRITER_MAX_RETRIES = int(os.getenv('DENSESTEER_REWRITER_MAX_RETRIES', 5))
            cls.REWRITER_BACKOFF_FACTOR = float(os.getenv('DENSESTEER_REWRITER_BACKOFF_FACTOR', 1.0))
            cls.REWRITER_TIMEOUT = float(os.getenv('DENSESTEER_REWRITER_TIMEOUT', 60.0))
            cls.REWRITER_MAX_CONCURRENCY = int(os.getenv('DENSESTEER_REWRITER_MAX_CONCURRENCY', 4))
            cls.OFFLINE = _env_bool('DENSESTEER_OFFLINE', 'false')
        except ValueError as e:
            raise ConfigError(f"Invalid environment value: {e}") from e

    @classmethod
    def validate(cls) -> None:
        """Validate configuration values."""
        problems = []
        if cls.WORKERS < 1:
            problems.append('DENSESTEER_WORKERS must be >= 1')
        if cls.LAMBDA_STEP <= 0:
            problems.append('DENSESTEER_LAMBDA_STEP must be > 0')
        if cls.LAMBDA_MIN > cls.LAMBDA_MAX:
            problems.append('DENSESTEER_LAMBDA_MIN must not exceed DENSESTEER_LAMBDA_MAX')
        if cls.NLL_BIN_WIDTH <= 0:
            problems.append('DENSESTEER_NLL_BIN_WIDTH must be > 0')
        if cls.REWRITER_MAX_RETRIES < 1:
            problems.append('DENSESTEER_REWRITER_MAX_RETRIES must be >= 1')
        if cls.REWRITER_MAX_CONCURRENCY < 1:
            problems.append('DENSESTEER_REWRITER_MAX_CONCURRENCY must be >= 1')
        if cls.POSITION_POLICY not in ('generated-only', 'all-positions'):
            problems.append('DENSESTEER_POSITION_POLICY must be generated-only or all-positions')

        if problems:
            raise ConfigError(f"Invalid configuration: {'; '.join(problems)}")

    @classmethod
    def snapshot(cls) -> Dict[str, Any]:
        """Resolved configuration values, for run manifests."""
        return {
            name: getattr(cls, name)
            for name in sorted(vars(cls))
            if name.isupper()
        }


Config.load()
