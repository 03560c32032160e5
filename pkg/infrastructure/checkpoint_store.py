import json
import os
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np
from dotenv import load_dotenv

from errors import CheckpointError

load_dotenv()

FORMAT = "bdatp-checkpoint"
VERSION = 1
DTYPES = {"float32", "float64", "int64", "bool"}


class CheckpointStore:
    """
    Small wrapper around the checkpoint directory so the rest of the lab never
    touches the file layout directly.

    A checkpoint is two files: a `.manifest` of key=value lines (metadata plus
    one line per tensor) and a `.bin` blob holding the little-endian tensor
    bytes back to back. No timestamps go in, so identical state gives
    identical files.
    """

    def __init__(self, root: Optional[Union[str, Path]] = None):
        # Either the given directory or <BDATP_OUT>/checkpoints
        self.root = Path(root) if root is not None else Path(os.getenv("BDATP_OUT", "runs")) / "checkpoints"

    def path_for(self, update: int) -> Path:
        return self.root / f"ckpt-{update:06d}.manifest"

    # Writing
    def save(self, path: Union[str, Path], tensors: Dict[str, np.ndarray], meta: Dict[str, Any]) -> Path:
        path = Path(path)
        if path.suffix != ".manifest":
            path = path.with_suffix(".manifest")
        blob_path = path.with_suffix(".bin")
        lines = [f"format={FORMAT}", f"version={VERSION}", f"blob={blob_path.name}"]
        for key in sorted(meta):
            lines.append(f"meta.{key}={json.dumps(meta[key], sort_keys=True)}")

        offset = 0
        chunks = []
        for name in sorted(tensors):
            arr = np.asarray(tensors[name])
            dtype = arr.dtype.name
            if dtype not in DTYPES:
                raise CheckpointError(f"tensor {name} has unsupported dtype {dtype}")
            if " " in name or "=" in name:
                raise CheckpointError(f"tensor name '{name}' may not contain spaces or '='")
            data = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes()
            shape = "x".join(str(d) for d in arr.shape)
            lines.append(f"tensor={name} precision={dtype} shape={shape} offset={offset} nbytes={len(data)}")
            chunks.append(data)
            offset += len(data)

        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            blob_path.write_bytes(b"".join(chunks))
            path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        except OSError as e:
            raise CheckpointError(f"could not write checkpoint {path}: {e}") from e
        return path

    # Reading
    def load(self, path: Union[str, Path]) -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
        path = Path(path)
        if path.suffix != ".manifest":
            path = path.with_suffix(".manifest")
        if not path.is_file():
            raise CheckpointError(f"checkpoint not found: {path}")

        header: Dict[str, str] = {}
        meta: Dict[str, Any] = {}
        entries: List[Dict[str, str]] = []
        for line in path.read_text(encoding="utf-8").splitlines():
            if not line:
                continue
            if line.startswith("tensor="):
                entries.append(dict(part.split("=", 1) for part in line.split(" ")))
            elif line.startswith("meta."):
                key, value = line[len("meta."):].split("=", 1)
                meta[key] = json.loads(value)
            else:
                key, value = line.split("=", 1)
                header[key] = value

        if header.get("format") != FORMAT or header.get("version") != str(VERSION):
            raise CheckpointError(f"{path} is not a version {VERSION} checkpoint")
        blob_path = path.parent / header["blob"]
        if not blob_path.is_file():
            raise CheckpointError(f"checkpoint blob missing: {blob_path}")
        blob = blob_path.read_bytes()

        tensors: Dict[str, np.ndarray] = {}
        for entry in entries:
            start, size = int(entry["offset"]), int(entry["nbytes"])
            if start + size > len(blob) or entry["precision"] not in DTYPES:
                raise CheckpointError(f"corrupt tensor entry {entry['tensor']} in {path}")
            shape = tuple(int(d) for d in entry["shape"].split("x") if d)
            dtype = np.dtype(entry["precision"]).newbyteorder("<")
            arr = np.frombuffer(blob[start:start + size], dtype=dtype).reshape(shape)
            tensors[entry["tensor"]] = arr.astype(arr.dtype.newbyteorder("="))
        return tensors, meta

    def list(self) -> List[Path]:
        """Checkpoints in this store, oldest first."""
        if not self.root.is_dir():
            return []
        return sorted(self.root.glob("ckpt-*.manifest"))

    def latest(self) -> Optional[Path]:
        found = self.list()
        return found[-1] if found else None
