"""
Home to CSV output helpers.

Every CSV starts with a metadata comment line naming the package version, the
seed and the checkpoint digest, then a header row. Floats are written with
repr so that identical runs produce identical files.
"""
import csv
import hashlib
import logging
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

log = logging.getLogger(__name__)

COMMENT = "#"


def file_sha256(path: Union[str, Path]) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def format_value(value: Any) -> str:
    """
    Formats one cell. Floats round-trip exactly through float().
    """
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def metadata_line(seed: Optional[int], checkpoint: Optional[str]) -> str:
    from legnav import __version__

    return f"{COMMENT} legnav {__version__} seed={seed} checkpoint={checkpoint or 'none'}"


class CsvLog:
    """
    Incremental CSV writer, usable as a context manager.
    """

    def __init__(
        self,
        path: Union[str, Path],
        columns: Sequence[str],
        seed: Optional[int] = None,
        checkpoint: Optional[str] = None,
        append: bool = False,
    ) -> None:
        self.path = Path(path)
        self.columns = list(columns)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        resume = append and self.path.exists() and self.path.stat().st_size > 0
        self._file = open(self.path, "a" if resume else "w", newline="")
        self._writer = csv.writer(self._file, lineterminator="\n")
        if not resume:
            self._file.write(metadata_line(seed, checkpoint) + "\n")
            self._writer.writerow(self.columns)

    def write(self, row: Union[Mapping[str, Any], Sequence[Any]]) -> None:
        if isinstance(row, Mapping):
            row = [row[name] for name in self.columns]
        if len(row) != len(self.columns):
            raise ValueError(f"{self.path.name}: expected {len(self.columns)} values, got {len(row)}")
        self._writer.writerow([format_value(v) for v in row])

    def write_many(self, rows: Iterable[Union[Mapping[str, Any], Sequence[Any]]]) -> None:
        for row in rows:
            self.write(row)

    def flush(self) -> None:
        self._file.flush()

    def close(self) -> None:
        if not self._file.closed:
            self._file.close()

    def __enter__(self) -> "CsvLog":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def write_csv(
    path: Union[str, Path],
    columns: Sequence[str],
    rows: Iterable[Union[Mapping[str, Any], Sequence[Any]]],
    seed: Optional[int] = None,
    checkpoint: Optional[str] = None,
) -> Path:
    with CsvLog(path, columns, seed=seed, checkpoint=checkpoint) as out:
        out.write_many(rows)
    log.debug(f"wrote {path}")
    return Path(path)


def read_csv(path: Union[str, Path]) -> Tuple[Dict[str, str], List[Dict[str, str]]]:
    """
    Returns (metadata, rows) of a CSV written by CsvLog. Values stay strings.
    """
    meta: Dict[str, str] = {}
    with open(path, newline="") as f:
        lines = [line for line in f]
    body = []
    for line in lines:
        if line.startswith(COMMENT):
            for token in line[1:].split():
                if "=" in token:
                    name, _, value = token.partition("=")
                    meta[name] = value
        else:
            body.append(line)
    reader = csv.DictReader(body)
    return meta, list(reader)
