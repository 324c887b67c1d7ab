"""Tensor container used for checkpoints, motion bases and sample files.

An archive is a zip file holding ``header.json`` plus one ``.npy`` member per
named tensor. Float tensors are stored little-endian float32. Member
timestamps are pinned so identical content gives identical bytes.
"""

import io
import json
import zipfile
from pathlib import Path
from typing import Dict, Tuple

import numpy as np

from .errors import FormatError

_FIXED_DATE = (1980, 1, 1, 0, 0, 0)
HEADER = "header.json"


def _member(name: str) -> zipfile.ZipInfo:
    info = zipfile.ZipInfo(name, date_time=_FIXED_DATE)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    return info


def write_archive(path, header: dict, tensors: Dict[str, np.ndarray]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with zipfile.ZipFile(tmp, "w") as zf:
        zf.writestr(_member(HEADER), json.dumps(header, sort_keys=True, indent=1))
        for name in sorted(tensors):
            arr = np.asarray(tensors[name])
            if arr.dtype.kind == "f":
                arr = arr.astype("<f4")
            elif arr.dtype.kind in "iu":
                arr = arr.astype("<i8")
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.array(arr, order="C"), allow_pickle=False)
            zf.writestr(_member(f"tensors/{name}.npy"), buf.getvalue())
    tmp.replace(path)
    return path


def read_archive(path) -> Tuple[dict, Dict[str, np.ndarray]]:
    path = Path(path)
    if not path.is_file():
        raise FormatError(f"archive not found: {path}")
    try:
        with zipfile.ZipFile(path) as zf:
            header = json.loads(zf.read(HEADER))
            tensors = {}
            for name in zf.namelist():
                if not (name.startswith("tensors/") and name.endswith(".npy")):
                    continue
                with zf.open(name) as fh:
                    arr = np.lib.format.read_array(io.BytesIO(fh.read()), allow_pickle=False)
                tensors[name[len("tensors/"):-len(".npy")]] = arr
    except (zipfile.BadZipFile, KeyError, ValueError, EOFError) as exc:
        raise FormatError(f"corrupt archive {path}: {exc}") from exc
    return header, tensors
