"""
Storage - artifact writes
Atomic replace through a sibling temp file, retrying transient OS errors
"""
import os
from pathlib import Path
from typing import BinaryIO, Callable

from tenacity import retry, retry_if_exception_type, stop_after_attempt, wait_exponential


@retry(
    stop=stop_after_attempt(3),
    wait=wait_exponential(multiplier=0.1, max=1),
    retry=retry_if_exception_type(OSError),
    reraise=True,
)
def write_atomic(path: Path, write: Callable[[BinaryIO], None]) -> Path:
    """
    Create parent directories, stream into `<name>.tmp`, then rename over `path`.

    Raises:
        OSError: After the last retry; callers wrap it in their own error
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    try:
        with open(tmp, "wb") as fh:
            write(fh)
        os.replace(tmp, path)
    finally:
        if tmp.exists():
            tmp.unlink()
    return path


def write_text(path: Path, text: str) -> Path:
    """UTF-8 text with "\\n" line endings."""
    return write_atomic(path, lambda fh: fh.write(text.encode("utf-8")))
