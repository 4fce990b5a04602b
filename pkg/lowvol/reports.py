# lowvol/reports.py
"""
Report writers. Every file is written to a temporary name in the target
directory and renamed into place, so a crashed run never leaves half a file.
"""
from __future__ import annotations

import logging
import os
import tempfile
from pathlib import Path
from typing import Any

import numpy as np
import orjson
import pandas as pd
import yaml

logger = logging.getLogger(__name__)

JSON_OPTIONS = orjson.OPT_INDENT_2 | orjson.OPT_SERIALIZE_NUMPY | orjson.OPT_NON_STR_KEYS | orjson.OPT_SORT_KEYS


def _atomic_write(path: Path, payload: bytes) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    logger.debug(f"[reports] wrote {path}")
    return path


def write_csv(df: pd.DataFrame, path, index: bool = False) -> Path:
    """CSV with full float precision; NaN / None become empty cells."""
    text = df.to_csv(index=index, float_format="%.17g", lineterminator="\n")
    return _atomic_write(Path(path), text.encode("utf-8"))


def _plain(obj: Any) -> Any:
    """Turn pandas / numpy containers into JSON-friendly values (NaN -> None)."""
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, pd.Series):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, pd.DataFrame):
        return {str(k): _plain(row) for k, row in obj.to_dict(orient="index").items()}
    if isinstance(obj, (pd.Timestamp, pd.Period)):
        return str(obj)
    if isinstance(obj, (np.floating, float)):
        return None if not np.isfinite(obj) else float(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def write_json(obj: Any, path) -> Path:
    return _atomic_write(Path(path), orjson.dumps(_plain(obj), option=JSON_OPTIONS) + b"\n")


def write_yaml(obj: Any, path) -> Path:
    text = yaml.safe_dump(_plain(obj), sort_keys=False, default_flow_style=False)
    return _atomic_write(Path(path), text.encode("utf-8"))
