"""
Home to the checkpoint container.

A checkpoint is one JSON document. Numeric arrays are stored as
{"dtype", "shape", "data"} with data a space separated decimal string (17
significant digits for floats) so that save -> load -> save is byte-identical.
Files are written to a temporary sibling and renamed into place, so an
interrupted write never replaces a good checkpoint.
"""
import json
import logging
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Union

import numpy as np

from legnav.errors import (
    CheckpointError,
    CheckpointShapeError,
    CheckpointTruncatedError,
    CheckpointVersionError,
)

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
ARRAY_KEYS = ("dtype", "shape", "data")


@dataclass
class Checkpoint:
    """
    Everything needed to resume a run or evaluate its policy.
    """

    config: Dict[str, Any]
    params: Dict[str, np.ndarray]
    curriculum: Dict[str, np.ndarray]
    iteration: int
    rng: Dict[str, Any] = field(default_factory=dict)
    train: Dict[str, Any] = field(default_factory=dict)
    format_version: int = FORMAT_VERSION

    @property
    def obs_dim(self) -> int:
        return int(self.params["actor.w0"].shape[0])


def encode_array(array: np.ndarray) -> Dict[str, Any]:
    array = np.asarray(array)
    flat = array.reshape(-1)
    if array.dtype.kind == "f":
        data = " ".join("%.17g" % v for v in flat.tolist())
    elif array.dtype.kind in "iub":
        data = " ".join(str(int(v)) for v in flat.tolist())
    else:
        raise TypeError(f"cannot encode array of dtype {array.dtype}")
    return {"dtype": array.dtype.str.lstrip("<>="), "shape": list(array.shape), "data": data}


def decode_array(obj: Dict[str, Any], name: str = "array") -> np.ndarray:
    try:
        dtype = np.dtype(obj["dtype"])
        shape = tuple(int(s) for s in obj["shape"])
        tokens = obj["data"].split()
    except (KeyError, TypeError, AttributeError) as ex:
        raise CheckpointTruncatedError(name, f"malformed array: {ex}") from ex

    expected = int(np.prod(shape, dtype=np.int64))
    if len(tokens) != expected:
        raise CheckpointTruncatedError(name, f"expected {expected} values, found {len(tokens)}")
    if dtype.kind == "f":
        values = [float(t) for t in tokens]
    elif dtype.kind == "b":
        values = [bool(int(t)) for t in tokens]
    else:
        values = [int(t) for t in tokens]
    return np.array(values, dtype=dtype).reshape(shape)


def _is_array(obj: Any) -> bool:
    return isinstance(obj, dict) and set(obj) == set(ARRAY_KEYS)


def _encode(obj: Any) -> Any:
    if isinstance(obj, np.ndarray):
        return encode_array(obj)
    if isinstance(obj, dict):
        return {str(k): _encode(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_encode(v) for v in obj]
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def _decode(obj: Any, name: str) -> Any:
    if _is_array(obj):
        return decode_array(obj, name)
    if isinstance(obj, dict):
        return {k: _decode(v, f"{name}.{k}") for k, v in obj.items()}
    if isinstance(obj, list):
        return [_decode(v, f"{name}[{i}]") for i, v in enumerate(obj)]
    return obj


def dumps(checkpoint: Checkpoint) -> str:
    document = {
        "format_version": checkpoint.format_version,
        "iteration": int(checkpoint.iteration),
        "config": _encode(checkpoint.config),
        "params": _encode(checkpoint.params),
        "curriculum": _encode(checkpoint.curriculum),
        "rng": _encode(checkpoint.rng),
        "train": _encode(checkpoint.train),
    }
    return json.dumps(document, sort_keys=True, indent=1) + "\n"


def save_checkpoint(path: Union[str, Path], checkpoint: Checkpoint) -> Path:
    """
    Atomically writes the checkpoint to path.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    text = dumps(checkpoint)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as f:
            f.write(text)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)
    except OSError as ex:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise CheckpointError(str(path), f"write failed: {ex}") from ex
    log.info(f"saved checkpoint {path} (iteration {checkpoint.iteration})")
    return path


def load_checkpoint(path: Union[str, Path], expected_obs_dim: Optional[int] = None) -> Checkpoint:
    """
    Reads a checkpoint.

    Raises CheckpointVersionError for an unknown format version,
    CheckpointTruncatedError for unreadable or incomplete files and
    CheckpointShapeError when the stored networks do not fit
    expected_obs_dim or each other.
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as ex:
        raise CheckpointError(str(path), f"cannot read: {ex}") from ex

    try:
        document = json.loads(text)
    except json.JSONDecodeError as ex:
        raise CheckpointTruncatedError(str(path), f"not a complete document: {ex.msg}") from ex

    if not isinstance(document, dict) or "format_version" not in document:
        raise CheckpointTruncatedError(str(path), "missing format_version header")
    if document["format_version"] != FORMAT_VERSION:
        raise CheckpointVersionError(
            str(path), f"format version {document['format_version']!r}, expected {FORMAT_VERSION}"
        )

    missing = [k for k in ("iteration", "config", "params", "curriculum", "rng", "train") if k not in document]
    if missing:
        raise CheckpointTruncatedError(str(path), f"missing section {missing[0]!r}")

    checkpoint = Checkpoint(
        config=document["config"],
        params=_decode(document["params"], "params"),
        curriculum=_decode(document["curriculum"], "curriculum"),
        iteration=int(document["iteration"]),
        rng=_decode(document["rng"], "rng"),
        train=_decode(document["train"], "train"),
        format_version=document["format_version"],
    )
    _check_shapes(path, checkpoint, expected_obs_dim)
    log.debug(f"loaded checkpoint {path} (iteration {checkpoint.iteration})")
    return checkpoint


def _check_shapes(path: Path, checkpoint: Checkpoint, expected_obs_dim: Optional[int]) -> None:
    params = checkpoint.params
    for name in ("actor.w0", "critic.w0", "log_std"):
        if name not in params:
            raise CheckpointTruncatedError(str(path), f"missing parameter {name!r}")

    for prefix in ("actor", "critic"):
        k = 0
        while f"{prefix}.w{k}" in params:
            w = params[f"{prefix}.w{k}"]
            b = params.get(f"{prefix}.b{k}")
            if w.ndim != 2 or b is None or b.shape != (w.shape[1],):
                raise CheckpointShapeError(str(path), f"{prefix} layer {k} is inconsistent")
            if k and params[f"{prefix}.w{k - 1}"].shape[1] != w.shape[0]:
                raise CheckpointShapeError(str(path), f"{prefix} layer {k} input mismatch")
            k += 1

    obs_dim = params["actor.w0"].shape[0]
    if params["critic.w0"].shape[0] != obs_dim:
        raise CheckpointShapeError(str(path), "actor and critic observation dimensions differ")
    if expected_obs_dim is not None and obs_dim != expected_obs_dim:
        raise CheckpointShapeError(
            str(path), f"observation dimension {obs_dim}, config expects {expected_obs_dim}"
        )
