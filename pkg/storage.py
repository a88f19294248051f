import json
import logging
import os
import shutil
import tempfile
import uuid
from contextlib import contextmanager
from pathlib import Path
from typing import Any, Iterator, Union

from errors import MissingInputError

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

class LocalStorage:
    """Filesystem artifact store. Every write lands atomically (temp file + rename)."""

    def __init__(self):
        logger.debug("Local storage initialized")

    def write_bytes(self, path: PathLike, payload: bytes) -> Path:
        """Write bytes to path atomically and return the resolved path"""
        target = Path(path)
        target.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp_name = tempfile.mkstemp(prefix=f".{target.name}.", suffix=".tmp", dir=target.parent)
        try:
            with os.fdopen(fd, "wb") as handle:
                handle.write(payload)
            os.replace(tmp_name, target)
            logger.debug(f"Wrote {len(payload)} bytes to {target}")
            return target
        except Exception as e:
            logger.error(f"Failed to write {target}: {e}")
            if os.path.exists(tmp_name):
                os.unlink(tmp_name)
            raise

    def read_bytes(self, path: PathLike) -> bytes:
        source = Path(path)
        if not source.is_file():
            raise MissingInputError(f"No such file: {source}")
        return source.read_bytes()

    def write_json(self, path: PathLike, payload: Any) -> Path:
        text = json.dumps(payload, indent=2, sort_keys=False)
        return self.write_bytes(path, (text + "\n").encode("utf-8"))

    def read_json(self, path: PathLike) -> Any:
        return json.loads(self.read_bytes(path).decode("utf-8"))

    def write_text(self, path: PathLike, text: str) -> Path:
        return self.write_bytes(path, text.encode("utf-8"))

    def exists(self, path: PathLike) -> bool:
        return Path(path).exists()

    def delete(self, path: PathLike):
        """Delete a file or a directory tree"""
        target = Path(path)
        try:
            if target.is_dir():
                shutil.rmtree(target)
            elif target.exists():
                target.unlink()
            logger.info(f"Deleted {target}")
        except Exception as e:
            logger.error(f"Error deleting {target}: {e}")
            raise

    @contextmanager
    def scene_transaction(self, final_dir: PathLike) -> Iterator[Path]:
        """Stage a directory and move it into place only if the block succeeds.

        On failure the staging directory is removed, so a half-written
        scene never appears under ``final_dir``.
        """
        final = Path(final_dir)
        final.parent.mkdir(parents=True, exist_ok=True)
        staging = final.parent / f".{final.name}.{uuid.uuid4().hex[:8]}.staging"
        staging.mkdir()
        try:
            yield staging
            if final.exists():
                shutil.rmtree(final)
            os.replace(staging, final)
        except Exception as e:
            logger.error(f"Rolling back {final}: {e}")
            shutil.rmtree(staging, ignore_errors=True)
            raise

# Singleton instance
local_storage = LocalStorage()

def get_storage() -> LocalStorage:
    return local_storage
