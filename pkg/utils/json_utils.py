"""JSON and JSON Lines file utility functions."""
import json
import logging
from typing import IO, Any, Dict, Iterable, List, Optional

from errors import ParseError
from utils.file_utils import atomic_open

logger = logging.getLogger(__name__)


def dumps_canonical(data: Any, indent: Optional[int] = None) -> str:
    """Serialize with sorted keys so equal data yields equal bytes."""
    return json.dumps(data, indent=indent, sort_keys=True, ensure_ascii=False)


def load_json_file(file_path: str) -> Any:
    """
    Load data from a JSON file.

    Args:
        file_path: Path to the JSON file

    Returns:
        Loaded data

    Raises:
        ParseError: If the file is not valid JSON
    """
    try:
        with open(file_path, 'r', encoding='utf-8') as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        logger.error(f"Invalid JSON in file {file_path}: {e}")
        raise ParseError(f"invalid JSON in {file_path}: {e.msg}", e.lineno) from e
    logger.debug(f"Successfully loaded JSON file: {file_path}")
    return data


def save_json_file(file_path: str, data: Any, indent: int = 2) -> None:
    """
    Atomically save data to a JSON file with sorted keys.

    Args:
        file_path: Path to the JSON file
        data: Data to save
        indent: JSON indentation level
    """
    with atomic_open(file_path, 'w') as f:
        f.write(dumps_canonical(data, indent=indent))
        f.write('\n')
    logger.debug(f"Successfully saved JSON file: {file_path}")


def load_jsonl_file(file_path: str) -> List[Dict[str, Any]]:
    """
    Load a JSON Lines file, one object per non-blank line.

    Args:
        file_path: Path to the JSONL file

    Returns:
        List of records in file order

    Raises:
        ParseError: Naming the 1-based line number of the first bad line
    """
    records = []
    with open(file_path, 'r', encoding='utf-8') as f:
        for line_number, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as e:
                raise ParseError(f"invalid JSON in {file_path}: {e.msg}", line_number) from e
            if not isinstance(record, dict):
                raise ParseError(f"expected a JSON object in {file_path}", line_number)
            records.append(record)
    logger.debug(f"Loaded {len(records)} records from {file_path}")
    return records


def save_jsonl_file(file_path: str, records: Iterable[Dict[str, Any]]) -> int:
    """
    Atomically write records as JSON Lines (UTF-8, LF newlines, sorted keys).

    Args:
        file_path: Path to the JSONL file
        records: Records to write

    Returns:
        Number of records written
    """
    with atomic_open(file_path, 'w') as f:
        count = write_jsonl(f, records)
    logger.debug(f"Saved {count} records to {file_path}")
    return count


def write_jsonl(handle: IO, records: Iterable[Dict[str, Any]]) -> int:
    """Write records to an open text handle as canonical JSON Lines; returns the count."""
    count = 0
    for record in records:
        handle.write(dumps_canonical(record))
        handle.write('\n')
        count += 1
    return count
