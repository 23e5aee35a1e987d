"""File utility functions."""
import hashlib
import os
import tempfile
from contextlib import contextmanager
from typing import IO, Callable, Iterator, List, Tuple, Union


def ensure_directory_exists(directory_path: str) -> None:
    """
    Ensure a directory exists, creating it if necessary.

    Args:
        directory_path: Path to the directory
    """
    if directory_path:
        os.makedirs(directory_path, exist_ok=True)


def _open_temp_sibling(path: str, mode: str) -> Tuple[IO, str]:
    directory = os.path.dirname(os.path.abspath(path))
    ensure_directory_exists(directory)
    fd, temp_path = tempfile.mkstemp(
        prefix=f".{os.path.basename(path)}.", suffix='.tmp', dir=directory
    )
    if 'b' in mode:
        return os.fdopen(fd, mode), temp_path
    return os.fdopen(fd, mode, encoding='utf-8', newline='\n'), temp_path


@contextmanager
def atomic_open(path: str, mode: str = 'w') -> Iterator[IO]:
    """
    Open a temporary sibling of ``path`` and rename it into place on success.

    An exception inside the block removes the temporary file, so the
    declared path either holds the complete output or is left untouched.

    Args:
        path: Final destination path
        mode: 'w' for text (UTF-8, LF newlines) or 'wb' for binary
    """
    handle, temp_path = _open_temp_sibling(path, mode)
    try:
        with handle:
            yield handle
            handle.flush()
            os.fsync(handle.fileno())
        os.replace(temp_path, path)
    except BaseException:
        if os.path.exists(temp_path):
            os.remove(temp_path)
        raise


@contextmanager
def atomic_group() -> Iterator[Callable[..., IO]]:
    """
    Stage several outputs and rename them into place together.

    Yields a function ``stage(path, mode='w')`` that opens a temporary
    sibling of ``path``. Nothing is renamed until the block finishes; an
    exception inside it removes every staged file and no destination is
    touched.

    Example:
        with atomic_group() as stage:
            stage('a.txt').write('a')
            stage('b.bin', 'wb').write(b'b')
    """
    staged: List[Tuple[IO, str, str]] = []

    def stage(path: str, mode: str = 'w') -> IO:
        handle, temp_path = _open_temp_sibling(path, mode)
        staged.append((handle, temp_path, path))
        return handle

    try:
        yield stage
        for handle, _, _ in staged:
            handle.flush()
            os.fsync(handle.fileno())
            handle.close()
        for _, temp_path, path in staged:
            os.replace(temp_path, path)
    except BaseException:
        for handle, temp_path, _ in staged:
            handle.close()
            if os.path.exists(temp_path):
                os.remove(temp_path)
        raise


def atomic_write(path: str, data: Union[str, bytes]) -> None:
    """
    Write text or bytes to ``path`` atomically.

    Args:
        path: Destination path
        data: Complete file contents
    """
    mode = 'wb' if isinstance(data, bytes) else 'w'
    with atomic_open(path, mode) as handle:
        handle.write(data)


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path: str, chunk_size: int = 1 << 20) -> str:
    """
    Hex SHA-256 digest of a file's contents.

    Args:
        path: File to hash
        chunk_size: Read size in bytes

    Returns:
        Lowercase hex digest
    """
    digest = hashlib.sha256()
    with open(path, 'rb') as f:
        for chunk in iter(lambda: f.read(chunk_size), b''):
            digest.update(chunk)
    return digest.hexdigest()
