"""Utility functions and helpers."""
from .file_utils import atomic_open, atomic_write, ensure_directory_exists, sha256_bytes, sha256_file
from .json_utils import load_json_file, save_json_file, load_jsonl_file, save_jsonl_file
from .container import encode_container, decode_container
from .logging_config import setup_logging

__all__ = [
    'atomic_open',
    'atomic_write',
    'ensure_directory_exists',
    'sha256_bytes',
    'sha256_file',
    'load_json_file',
    'save_json_file',
    'load_jsonl_file',
    'save_jsonl_file',
    'encode_container',
    'decode_container',
    'setup_logging',
]
