"""Validation utility functions for CLI and configuration values."""
import os
from typing import List, Optional, Sequence


def validate_positive_int(name: str, value: Optional[int], allow_zero: bool = False) -> tuple[bool, Optional[str]]:
    """
    Validate a count-like flag.

    Args:
        name: Flag name, used in the error message
        value: Value to check (None passes; defaults are applied elsewhere)
        allow_zero: Whether 0 is acceptable

    Returns:
        Tuple of (is_valid, error_message)
    """
    if value is None:
        return True, None
    lower = 0 if allow_zero else 1
    if value < lower:
        return False, f"{name} must be >= {lower}, got {value}"
    return True, None


def validate_lambda_grid(lambda_min: float, lambda_max: float, step: float) -> tuple[bool, Optional[str]]:
    """
    Validate a lambda sweep range.

    Args:
        lambda_min: Lowest lambda
        lambda_max: Highest lambda
        step: Grid step

    Returns:
        Tuple of (is_valid, error_message)
    """
    if step <= 0:
        return False, f"--lambda-step must be > 0, got {step}"
    if lambda_min > lambda_max:
        return False, f"--lambda-min ({lambda_min}) exceeds --lambda-max ({lambda_max})"
    return True, None


def parse_layers(raw: str) -> List[int]:
    """
    Parse a comma-separated layer list ("0,2,3").

    Raises:
        ValueError: On non-integer entries
    """
    return [int(part) for part in raw.split(',') if part.strip()]


def validate_layers(layers: Sequence[int], n_layers: int) -> tuple[bool, Optional[str]]:
    """
    Validate layer indices against a model depth.

    Args:
        layers: Candidate layer indices
        n_layers: Model depth

    Returns:
        Tuple of (is_valid, error_message)
    """
    if not layers:
        return False, "at least one layer is required"
    bad = [layer for layer in layers if not 0 <= layer < n_layers]
    if bad:
        return False, f"layer index out of range 0..{n_layers - 1}: {bad}"
    if len(set(layers)) != len(layers):
        return False, "duplicate layer indices"
    return True, None


def validate_input_file(name: str, path: Optional[str]) -> tuple[bool, Optional[str]]:
    """
    Validate that an input flag names a readable file.

    Args:
        name: Flag name
        path: File path

    Returns:
        Tuple of (is_valid, error_message)
    """
    if not path:
        return False, f"{name} is required"
    if not os.path.isfile(path):
        return False, f"{name}: file not found: {path}"
    return True, None
