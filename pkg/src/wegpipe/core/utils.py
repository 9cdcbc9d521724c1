import os
from pathlib import Path
from typing import Optional, Union


def ensure_directory(path: Union[str, Path], mode: int = 0o775) -> Path:
    """Create ``path`` (and parents) if missing and return it as a Path."""
    directory = Path(path)
    directory.mkdir(mode=mode, parents=True, exist_ok=True)
    return directory


def get_env_var(key: str, default: Optional[str] = None) -> Optional[str]:
    """Get an environment variable, stripping whitespace and quotes."""
    value = os.getenv(key)
    if value is None:
        return default
    value = value.strip().strip("'\"")
    return value or default
