"""
Configuration management for the Rivulet drop simulator.
Centralizes pipeline settings and environment variables.
"""

import os
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from dotenv import load_dotenv


VALID_LOG_LEVELS = ['DEBUG', 'INFO', 'WARNING', 'ERROR', 'CRITICAL']
VALID_SOLVERS = ['cg', 'direct']


@dataclass
class Config:
    """Central configuration for the Rivulet pipeline."""

    # Logging settings
    log_level: str
    log_dir: str

    # Output settings
    output_dir: str
    seed: int

    # Sequence settings
    history_length: int

    # Data preparation settings
    morph_radius: int
    min_component_area: int
    overlap_threshold: int
    max_step_displacement: float

    # Network settings
    dropout_rate: float

    # Splitting settings
    split_delta: float
    min_separation: int

    # Reconstruction settings
    smoothing_iters: int
    solver: str
    solver_tol: float

    # Parallelism
    workers: int

    @classmethod
    def from_env(cls, env_file: Optional[str] = None) -> 'Config':
        """
        Load configuration from environment variables.

        A local .env file (or ``env_file``) is merged first; variables already
        present in the process environment take precedence.
        """
        load_dotenv(env_file)
        return cls(
            log_level=os.getenv('RIVULET_LOG_LEVEL', 'INFO'),
            log_dir=os.getenv('RIVULET_LOG_DIR', './logs'),
            output_dir=os.getenv('RIVULET_OUTPUT_DIR', './output'),
            seed=int(os.getenv('RIVULET_SEED', '0')),
            history_length=int(os.getenv('RIVULET_HISTORY_LENGTH', '5')),
            morph_radius=int(os.getenv('RIVULET_MORPH_RADIUS', '1')),
            min_component_area=int(os.getenv('RIVULET_MIN_COMPONENT_AREA', '16')),
            overlap_threshold=int(os.getenv('RIVULET_OVERLAP_THRESHOLD', '8')),
            max_step_displacement=float(os.getenv('RIVULET_MAX_STEP_DISPLACEMENT', '0.05')),
            dropout_rate=float(os.getenv('RIVULET_DROPOUT_RATE', '0.2')),
            split_delta=float(os.getenv('RIVULET_SPLIT_DELTA', '-0.5')),
            min_separation=int(os.getenv('RIVULET_MIN_SEPARATION', '6')),
            smoothing_iters=int(os.getenv('RIVULET_SMOOTHING_ITERS', '3')),
            solver=os.getenv('RIVULET_SOLVER', 'cg'),
            solver_tol=float(os.getenv('RIVULET_SOLVER_TOL', '1e-8')),
            workers=cls._get_int_env('RIVULET_WORKERS') or 1
        )

    @staticmethod
    def _get_int_env(key: str) -> Optional[int]:
        """Get integer environment variable, return None if not set."""
        value = os.getenv(key)
        return int(value) if value else None

    def validate(self) -> list[str]:
        """Validate configuration and return list of errors."""
        errors = []

        if self.log_level.upper() not in VALID_LOG_LEVELS:
            errors.append(f"Invalid log level: {self.log_level}")

        if self.history_length < 1:
            errors.append(f"History length K must be >= 1, got {self.history_length}")

        if self.morph_radius < 0:
            errors.append(f"Morphology radius must be >= 0, got {self.morph_radius}")

        if self.min_component_area < 0:
            errors.append(f"Minimum component area must be >= 0, got {self.min_component_area}")

        if self.overlap_threshold < 1:
            errors.append(f"Overlap threshold must be >= 1, got {self.overlap_threshold}")

        if self.max_step_displacement <= 0:
            errors.append(f"Max step displacement must be > 0, got {self.max_step_displacement}")

        if not 0.0 <= self.dropout_rate < 1.0:
            errors.append(f"Dropout rate must be in [0, 1), got {self.dropout_rate}")

        if not -1.0 <= self.split_delta < 1.0:
            errors.append(f"Split delta must be in [-1, 1), got {self.split_delta}")

        if not 2 <= self.min_separation <= 25:
            errors.append(f"Min separation must be in [2, 25], got {self.min_separation}")

        if self.smoothing_iters < 0:
            errors.append(f"Smoothing iterations must be >= 0, got {self.smoothing_iters}")

        if self.solver not in VALID_SOLVERS:
            errors.append(f"Invalid solver: {self.solver}")

        if self.solver_tol <= 0:
            errors.append(f"Solver tolerance must be > 0, got {self.solver_tol}")

        if self.workers < 1:
            errors.append(f"Workers must be >= 1, got {self.workers}")

        return errors


def setup_logging(config: Config):
    """Configure logging for the application."""
    log_format = '[%(asctime)s] [%(levelname)s] [%(module)s] [%(funcName)s] - %(message)s'
    date_format = '%Y-%m-%d %H:%M:%S'

    # Ensure log directory exists
    Path(config.log_dir).mkdir(parents=True, exist_ok=True)

    root_logger = logging.getLogger()
    root_logger.setLevel(getattr(logging, config.log_level.upper()))

    # Clear existing handlers to avoid duplicates
    root_logger.handlers.clear()

    formatter = logging.Formatter(log_format, datefmt=date_format)

    # Console handler (INFO and above)
    console_handler = logging.StreamHandler()
    console_handler.setLevel(logging.INFO)
    console_handler.setFormatter(formatter)
    root_logger.addHandler(console_handler)

    # File handler (DEBUG and above)
    file_handler = logging.FileHandler(
        Path(config.log_dir) / 'rivulet.log',
        mode='a',
        encoding='utf-8'
    )
    file_handler.setLevel(logging.DEBUG)
    file_handler.setFormatter(formatter)
    root_logger.addHandler(file_handler)

    # Error file handler (ERROR and above)
    error_handler = logging.FileHandler(
        Path(config.log_dir) / 'rivulet_errors.log',
        mode='a',
        encoding='utf-8'
    )
    error_handler.setLevel(logging.ERROR)
    error_handler.setFormatter(formatter)
    root_logger.addHandler(error_handler)

    logging.info("Logging configured successfully")
