"""Artifact Persistence

Helpers for writing and reading the pipeline's artifacts: JSON manifests,
CSV matrices with a one-line header and flat little-endian float64 tensors.
CSV floats are written with 17 significant digits so that a save/load cycle
reproduces values bitwise.
"""

import json
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, Iterable, Optional, Sequence, Union

import numpy as np
import pandas as pd

from utils.errors import ArtifactExistsError


FLOAT_FORMAT = '%.17g'
TENSOR_DTYPE = '<f8'

PathLike = Union[str, Path]


class NumpyEncoder(json.JSONEncoder):
    """JSON encoder for numpy scalars/arrays, paths and datetimes"""

    def default(self, obj):
        if isinstance(obj, (datetime, pd.Timestamp)):
            return obj.isoformat()
        if isinstance(obj, np.integer):
            return int(obj)
        if isinstance(obj, np.floating):
            return float(obj)
        if isinstance(obj, np.bool_):
            return bool(obj)
        if isinstance(obj, np.ndarray):
            return obj.tolist()
        if isinstance(obj, Path):
            return obj.as_posix()
        return super().default(obj)


def write_json(path: PathLike, payload: Dict) -> Path:
    """Write a JSON document with sorted keys

    Args:
        path: Destination file
        payload: JSON-serializable dictionary (numpy values allowed)

    Returns:
        The written path
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(payload, f, cls=NumpyEncoder, indent=2, sort_keys=True, allow_nan=True)
        f.write('\n')
    return path


def read_json(path: PathLike) -> Dict:
    """Load a JSON document"""
    with open(path, 'r', encoding='utf-8') as f:
        return json.load(f)


def write_frame(path: PathLike, frame: pd.DataFrame) -> Path:
    """Write a DataFrame as CSV with a one-line header and round-trip floats"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator='\n')
    return path


def read_frame(path: PathLike) -> pd.DataFrame:
    """Read a CSV written by `write_frame`"""
    return pd.read_csv(path, float_precision='round_trip')


def write_matrix(path: PathLike, matrix: np.ndarray, header: Sequence[float]) -> Path:
    """Write a 2-D matrix as CSV whose header row holds the column coordinates

    Args:
        path: Destination file
        matrix: Rows x columns array
        header: One coordinate per column (e.g. grid times)

    Returns:
        The written path
    """
    matrix = np.asarray(matrix, dtype=float)
    columns = [FLOAT_FORMAT % float(h) for h in header]
    return write_frame(path, pd.DataFrame(matrix, columns=columns))


def read_matrix(path: PathLike):
    """Read a matrix written by `write_matrix`

    Returns:
        Tuple of (matrix, header coordinates)
    """
    frame = read_frame(path)
    header = np.array([float(c) for c in frame.columns])
    return frame.to_numpy(dtype=float), header


def write_tensor(path: PathLike, array: np.ndarray) -> Path:
    """Write an array as flat little-endian float64 bytes"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.ascontiguousarray(array, dtype=TENSOR_DTYPE).tofile(path)
    return path


def read_tensor(path: PathLike, shape: Iterable[int]) -> np.ndarray:
    """Read a flat float64 tensor and restore its shape"""
    data = np.fromfile(path, dtype=TENSOR_DTYPE)
    return data.astype(float).reshape(tuple(shape))


def ensure_writable(paths: Iterable[PathLike], force: bool = False) -> None:
    """Refuse to overwrite existing artifacts unless forced

    Args:
        paths: Candidate output files
        force: Allow overwriting

    Raises:
        ArtifactExistsError: if any file exists and force is False
    """
    if force:
        return
    existing = [str(p) for p in paths if Path(p).exists()]
    if existing:
        raise ArtifactExistsError(
            f"Refusing to overwrite {len(existing)} artifact(s) without --force: {existing[:3]}"
        )


def stem_paths(stem: PathLike, suffixes: Sequence[str]) -> Dict[str, Path]:
    """Expand an artifact stem into sibling files, e.g. stem + '.json'"""
    stem = Path(stem)
    return {s: stem.parent / f"{stem.name}{s}" for s in suffixes}


def relative_to(path: PathLike, root: Optional[PathLike]) -> str:
    """Path as a posix string relative to root when possible"""
    path = Path(path)
    if root is None:
        return path.as_posix()
    try:
        return path.relative_to(root).as_posix()
    except ValueError:
        return path.as_posix()
