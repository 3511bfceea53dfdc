"""
Unified configuration for safe RL-MPC experiments.
Supports environment variables, JSON config files and command-line overrides.
"""

import copy
import json
import logging
import os
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np
from dotenv import load_dotenv

from safe_rl.errors import DimensionMismatch


class ExperimentConfig:
    """Sectioned experiment configuration with environment variable support."""

    # Nominal model and safety bounds (double integrator)
    DEFAULT_SYSTEM_CONFIG = {
        "A": [[1.0, 0.1], [0.0, 1.0]],
        "B": [[0.05], [0.1]],
        "b": [0.0, 0.0],
        "state_lower": [-1.0, -1.0],
        "state_upper": [1.0, 1.0],
        "action_lower": [-10.0],
        "action_upper": [10.0],
        "initial_state": [0.0, 0.0],
    }

    # Stage cost diag(state weights, action weights); terminal ingredients from LQR
    DEFAULT_COST_CONFIG = {
        "stage_weights": [1.0, 0.01, 0.01],
    }

    DEFAULT_MPC_CONFIG = {
        "horizon": 20,
        "gamma": 0.99,
        "rho": None,  # 1e3 * largest stage-cost eigenvalue
        "terminal_cap": 200,
    }

    DEFAULT_NOISE_CONFIG = {
        "circumradius": 0.02,
        "warmup": 20,
        "inflation": 2.0,
        "initial_set": "samples",  # or "bounding_box" (box around the true octagon)
        "max_vertices": None,
        "debug_buffer": 10000,
    }

    DEFAULT_LEARNING_CONFIG = {
        "alpha": 0.1,
        "theta_selection": ["M", "m"],
        "positivity_floor": 1e-6,
        "max_iterations": 200,
        "tolerance": 1e-6,
        "guard_halvings": 5,
    }

    DEFAULT_EXPLORATION_CONFIG = {
        "enabled": False,
        "every": 5,
        "mode": "linear",
        "magnitude": 1.0,
        "proximity_weight": 100.0,
    }

    DEFAULT_RUN_CONFIG = {
        "steps": 200,
        "seed": 0,
        "reference_start": 25,
        "reference_end": 120,
        "reference_low": -1.0,
        "reference_high": 1.0,
    }

    DEFAULT_OUTPUT_CONFIG = {
        "output_dir": "runs",
        "snapshot_steps": [0, 24, 34, 110],
        "write_svg": True,
        "float_format": "%.17g",
        "rpi_points": 500,
    }

    DEFAULT_PROGRESS_CONFIG = {
        "show_progress": True,
        "progress_every": 10,
        "colored_output": True,
        "log_level": "INFO",
    }

    SECTIONS = ("system", "cost", "mpc", "noise", "learning", "exploration", "run", "output", "progress")

    # Environment variable mappings
    ENV_MAPPINGS = {
        "SAFERL_HORIZON": ("mpc", "horizon", int),
        "SAFERL_GAMMA": ("mpc", "gamma", float),
        "SAFERL_RHO": ("mpc", "rho", float),
        "SAFERL_CIRCUMRADIUS": ("noise", "circumradius", float),
        "SAFERL_WARMUP": ("noise", "warmup", int),
        "SAFERL_ALPHA": ("learning", "alpha", float),
        "SAFERL_THETA": ("learning", "theta_selection", list),
        "SAFERL_EXPLORATION": ("exploration", "enabled", bool),
        "SAFERL_STEPS": ("run", "steps", int),
        "SAFERL_SEED": ("run", "seed", int),
        "SAFERL_OUTPUT_DIR": ("output", "output_dir"),
        "SAFERL_WRITE_SVG": ("output", "write_svg", bool),
        "SAFERL_LOG_LEVEL": ("progress", "log_level"),
        "SAFERL_COLORED_OUTPUT": ("progress", "colored_output", bool),
    }

    def __init__(self, config_file: Optional[str] = None, project_root: Optional[str] = None,
                 use_environment: bool = True):
        """Initialize the configuration.

        Args:
            config_file: Path to JSON config file
            project_root: Root directory of the project (for relative paths)
            use_environment: Read .env and SAFERL_* variables
        """
        self.project_root = project_root or self._find_project_root()

        for section in self.SECTIONS:
            default = getattr(self, f"DEFAULT_{section.upper()}_CONFIG")
            setattr(self, section, copy.deepcopy(default))

        if use_environment:
            load_dotenv()
            self._load_from_environment()

        if config_file:
            self.load_from_file(config_file)

    def _find_project_root(self) -> str:
        """Find the project root directory."""
        current = Path.cwd()
        indicators = ['requirements.txt', '.git']

        while current != current.parent:
            if any((current / indicator).exists() for indicator in indicators):
                return str(current)
            current = current.parent

        return str(Path.cwd())

    def _load_from_environment(self):
        """Load configuration from environment variables."""
        for env_var, mapping in self.ENV_MAPPINGS.items():
            value = os.environ.get(env_var)
            if value is None:
                continue
            section, key = mapping[0], mapping[1]
            type_converter = mapping[2] if len(mapping) > 2 else str

            if type_converter == bool:
                converted_value = value.lower() in ('true', '1', 'yes', 'on')
            elif type_converter == list:
                converted_value = [item.strip() for item in value.split(",") if item.strip()]
            elif type_converter in (int, float):
                try:
                    converted_value = type_converter(value)
                except ValueError:
                    logging.warning(f"Invalid {type_converter.__name__} value for {env_var}: {value}")
                    continue
            else:
                converted_value = value

            getattr(self, section)[key] = converted_value

    def load_from_file(self, config_file: str):
        """Load configuration from a JSON file.

        Raises:
            FileNotFoundError: if the file does not exist
            ValueError: on malformed JSON or unknown sections
        """
        config_path = Path(config_file)
        if not config_path.is_absolute() and not config_path.exists():
            config_path = Path(self.project_root) / config_path

        if not config_path.exists():
            raise FileNotFoundError(f"Config file not found: {config_path}")

        with open(config_path, 'r') as f:
            try:
                file_config = json.load(f)
            except json.JSONDecodeError as e:
                raise ValueError(f"Malformed config file {config_path}: {e}") from e

        self.update_from_dict(file_config)
        logging.getLogger(__name__).info(f"Loaded configuration from {config_path}")

    def update_from_dict(self, values: Dict[str, Any]):
        """Merge a nested {section: {key: value}} dictionary."""
        unknown = [name for name in values if name not in self.SECTIONS]
        if unknown:
            raise ValueError(f"Unknown config sections: {unknown}")
        for section_name, section_values in values.items():
            getattr(self, section_name).update(copy.deepcopy(section_values))

    def set_value(self, dotted_key: str, raw_value: str):
        """Apply one `section.key=value` override; the value is parsed as JSON when possible."""
        if "." not in dotted_key:
            raise ValueError(f"Override key must look like section.key, got '{dotted_key}'")
        section_name, key = dotted_key.split(".", 1)
        if section_name not in self.SECTIONS:
            raise ValueError(f"Unknown config section '{section_name}'")
        section = getattr(self, section_name)
        if key not in section:
            raise ValueError(f"Unknown config key '{dotted_key}'")
        try:
            value = json.loads(raw_value)
        except json.JSONDecodeError:
            value = raw_value
        section[key] = value

    def apply_overrides(self, overrides: Optional[List[str]]):
        """Apply a list of `section.key=value` strings."""
        for item in overrides or []:
            if "=" not in item:
                raise ValueError(f"Override must look like section.key=value, got '{item}'")
            key, raw = item.split("=", 1)
            self.set_value(key.strip(), raw.strip())

    def update_from_args(self, args):
        """Update configuration from command line arguments."""
        self.apply_overrides(getattr(args, 'set', None))

        for attr, section in (('steps', 'run'), ('seed', 'run'), ('alpha', 'learning'),
                              ('output_dir', 'output'), ('circumradius', 'noise')):
            if getattr(args, attr, None) is not None:
                getattr(self, section)[attr] = getattr(args, attr)

        if getattr(args, 'theta', None):
            self.learning['theta_selection'] = [b.strip() for b in args.theta.split(",") if b.strip()]
        if getattr(args, 'explore', False):
            self.exploration['enabled'] = True
        if getattr(args, 'no_svg', False):
            self.output['write_svg'] = False

    def validate(self):
        """Check sizes and ranges.

        Raises:
            DimensionMismatch: on inconsistent matrix sizes
            ValueError: on out-of-range scalars
        """
        A = np.atleast_2d(np.asarray(self.system["A"], dtype=float))
        B = np.atleast_2d(np.asarray(self.system["B"], dtype=float))
        n_s = A.shape[0]
        if A.shape != (n_s, n_s) or B.shape[0] != n_s:
            raise DimensionMismatch(f"A is {A.shape} and B is {B.shape}")
        n_a = B.shape[1]
        for key, size in (("b", n_s), ("state_lower", n_s), ("state_upper", n_s),
                          ("initial_state", n_s), ("action_lower", n_a), ("action_upper", n_a)):
            if len(self.system[key]) != size:
                raise DimensionMismatch(f"system.{key} has {len(self.system[key])} entries, expected {size}")
        if len(self.cost["stage_weights"]) != n_s + n_a:
            raise DimensionMismatch(f"cost.stage_weights needs {n_s + n_a} entries")
        if any(w <= 0 for w in self.cost["stage_weights"]):
            raise ValueError("stage weights must be positive")
        if not 0.0 <= self.learning["alpha"] <= 1.0:
            raise ValueError(f"learning.alpha must lie in [0, 1], got {self.learning['alpha']}")
        if not 0.0 <= self.mpc["gamma"] <= 1.0:
            raise ValueError(f"mpc.gamma must lie in [0, 1], got {self.mpc['gamma']}")
        if self.mpc["horizon"] < 1:
            raise ValueError(f"mpc.horizon must be >= 1, got {self.mpc['horizon']}")
        if self.mpc["terminal_cap"] < 1:
            raise ValueError(f"mpc.terminal_cap must be >= 1, got {self.mpc['terminal_cap']}")
        if str(self.progress["log_level"]).upper() not in ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"):
            raise ValueError(f"unknown progress.log_level '{self.progress['log_level']}'")
        if self.noise["circumradius"] < 0:
            raise ValueError(f"noise.circumradius must be nonnegative, got {self.noise['circumradius']}")
        if self.noise["initial_set"] not in ("samples", "bounding_box"):
            raise ValueError(f"unknown noise.initial_set '{self.noise['initial_set']}'")
        if self.exploration["mode"] not in ("linear", "proximity"):
            raise ValueError(f"unknown exploration.mode '{self.exploration['mode']}'")
        if self.run["steps"] < 1:
            raise ValueError(f"run.steps must be >= 1, got {self.run['steps']}")
        if n_s != 2 and self.noise["circumradius"] > 0:
            raise DimensionMismatch("the octagon noise model needs a 2-dimensional state")

    def as_dict(self) -> Dict[str, Dict[str, Any]]:
        return {section: copy.deepcopy(getattr(self, section)) for section in self.SECTIONS}

    @classmethod
    def from_dict(cls, values: Dict[str, Any]) -> "ExperimentConfig":
        config = cls(use_environment=False)
        config.update_from_dict(values)
        return config

    def save_to_file(self, config_file: str):
        """Save current configuration to a JSON file."""
        config_path = Path(config_file)
        config_path.parent.mkdir(parents=True, exist_ok=True)
        with open(config_path, 'w') as f:
            json.dump(self.as_dict(), f, indent=2)

        logging.getLogger(__name__).info(f"Configuration saved to {config_path}")

    def create_default_config_file(self, config_file: str) -> str:
        """Create a default configuration file for user customization."""
        self.save_to_file(config_file)
        return str(config_file)


def get_config(config_file: Optional[str] = None, **kwargs) -> ExperimentConfig:
    """Get a configuration instance.

    This is the main entry point for getting configuration.
    """
    return ExperimentConfig(config_file=config_file, **kwargs)
