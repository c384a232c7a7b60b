"""Checkpoint codec and on-disk checkpoint management.

Layout of a checkpoint file:

    b"ECGNAT1\\0"                      8-byte magic
    <Q                                 header length in bytes
    header                             UTF-8 JSON, sorted keys:
                                       {config, meta, rng_state,
                                        tensors: {name: {dtype, shape, offset, nbytes}}}
    payloads                           little-endian raw arrays in sorted-name order

Offsets are relative to the first payload byte. Encoding is deterministic, so
save -> load -> save reproduces identical bytes.
"""

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union
import json
import logging
import os
import shutil
import struct

import numpy as np

from utils.error_handling import CheckpointError

logger = logging.getLogger(__name__)

MAGIC = b"ECGNAT1\x00"
_LEN = struct.Struct("<Q")
LATEST = "latest.ckpt"


@dataclass
class Checkpoint:
    """Named tensors plus the config, counters and RNG state needed to resume."""
    config: Dict[str, Any] = field(default_factory=dict)
    tensors: Dict[str, np.ndarray] = field(default_factory=dict)
    meta: Dict[str, Any] = field(default_factory=dict)
    rng_state: Dict[str, Any] = field(default_factory=dict)

    def subset(self, prefix: str) -> Dict[str, np.ndarray]:
        """Tensors under `prefix`, with the prefix stripped."""
        return {name[len(prefix):]: arr for name, arr in self.tensors.items() if name.startswith(prefix)}


def _le_dtype(arr: np.ndarray) -> np.dtype:
    return arr.dtype.newbyteorder("<") if arr.dtype.byteorder not in ("|",) else arr.dtype


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    table: Dict[str, Dict[str, Any]] = {}
    payloads: List[bytes] = []
    offset = 0
    for name in sorted(ckpt.tensors):
        arr = np.asarray(ckpt.tensors[name])
        dtype = _le_dtype(arr)
        raw = np.ascontiguousarray(arr, dtype=dtype).tobytes()
        table[name] = {"dtype": dtype.str, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)}
        payloads.append(raw)
        offset += len(raw)
    header = {"config": ckpt.config, "meta": ckpt.meta, "rng_state": ckpt.rng_state, "tensors": table}
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + _LEN.pack(len(blob)) + blob + b"".join(payloads)


def _parse_header(blob: bytes, file_path: Optional[str]) -> Tuple[Dict[str, Any], int]:
    if blob[:len(MAGIC)] != MAGIC:
        raise CheckpointError("Not an ECG-NAT checkpoint (bad magic)", file_path=file_path)
    start = len(MAGIC) + _LEN.size
    if len(blob) < start:
        raise CheckpointError("Checkpoint truncated inside the header length", file_path=file_path)
    (length,) = _LEN.unpack(blob[len(MAGIC):start])
    if len(blob) < start + length:
        raise CheckpointError("Checkpoint truncated inside the header",
                              f"expected {length} header bytes", file_path=file_path)
    try:
        header = json.loads(blob[start:start + length].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError("Checkpoint header is not valid JSON", str(e), file_path=file_path) from e
    return header, start + length


def decode_checkpoint(blob: bytes, file_path: Optional[str] = None) -> Checkpoint:
    header, base = _parse_header(blob, file_path)
    tensors: Dict[str, np.ndarray] = {}
    for name in sorted(header.get("tensors", {})):
        entry = header["tensors"][name]
        lo = base + entry["offset"]
        hi = lo + entry["nbytes"]
        if hi > len(blob):
            raise CheckpointError(f"Checkpoint truncated in tensor '{name}'",
                                  f"needs byte {hi}, file has {len(blob)}", file_path=file_path)
        arr = np.frombuffer(blob[lo:hi], dtype=np.dtype(entry["dtype"]))
        tensors[name] = arr.reshape(entry["shape"]).copy()
    return Checkpoint(config=header.get("config", {}), tensors=tensors,
                      meta=header.get("meta", {}), rng_state=header.get("rng_state", {}))


def save_checkpoint(ckpt: Checkpoint, path: Union[str, Path]) -> Path:
    """Write atomically through a temporary sibling file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    try:
        with open(tmp, "wb") as f:
            f.write(encode_checkpoint(ckpt))
        os.replace(tmp, path)
    except OSError as e:
        raise CheckpointError("Could not write checkpoint", str(e), file_path=str(path)) from e
    return path


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as e:
        raise CheckpointError("Could not read checkpoint", str(e), file_path=str(path)) from e
    return decode_checkpoint(blob, file_path=str(path))


def read_checkpoint_header(path: Union[str, Path]) -> Dict[str, Any]:
    """Header only; tensor payloads are not read."""
    path = Path(path)
    try:
        with open(path, "rb") as f:
            head = f.read(len(MAGIC) + _LEN.size)
            if head[:len(MAGIC)] != MAGIC or len(head) < len(MAGIC) + _LEN.size:
                raise CheckpointError("Not an ECG-NAT checkpoint (bad magic)", file_path=str(path))
            (length,) = _LEN.unpack(head[len(MAGIC):])
            blob = head + f.read(length)
    except OSError as e:
        raise CheckpointError("Could not read checkpoint", str(e), file_path=str(path)) from e
    return _parse_header(blob, str(path))[0]


def rng_state(rng: np.random.Generator) -> Dict[str, Any]:
    return rng.bit_generator.state


def restore_rng(state: Dict[str, Any]) -> np.random.Generator:
    rng = np.random.default_rng()
    if state:
        try:
            rng.bit_generator.state = state
        except (TypeError, ValueError, KeyError) as e:
            raise CheckpointError("Checkpoint RNG state is unusable", str(e)) from e
    return rng


class CheckpointManager:
    """
    Manages checkpoint files of one run directory.

    Files are named `<kind>_epoch{NNNN}.ckpt`; the most recent save is also
    copied to `latest.ckpt`.
    """

    def __init__(self, base_save_dir: Union[str, Path]):
        self.base_save_dir = Path(base_save_dir)
        self.base_save_dir.mkdir(parents=True, exist_ok=True)

    def checkpoint_path(self, kind: str, epoch: int) -> Path:
        return self.base_save_dir / f"{kind}_epoch{epoch:04d}.ckpt"

    def save(self, ckpt: Checkpoint, kind: str, epoch: int) -> Path:
        """
        Saves a checkpoint and refreshes `latest.ckpt`.

        Args:
            ckpt: The checkpoint to write.
            kind: "pretrain" or "finetune".
            epoch: Number of completed epochs.

        Returns:
            Path of the epoch-numbered file.
        """
        path = save_checkpoint(ckpt, self.checkpoint_path(kind, epoch))
        shutil.copyfile(path, self.base_save_dir / LATEST)
        logger.info(f"Saved {kind} checkpoint for epoch {epoch} to {path}")
        return path

    def load(self, name: Union[str, Path]) -> Checkpoint:
        path = Path(name)
        if not path.exists():
            path = self.base_save_dir / str(name)
        if not path.exists():
            raise CheckpointError("Checkpoint not found", file_path=str(path))
        return load_checkpoint(path)

    def latest(self) -> Optional[Path]:
        path = self.base_save_dir / LATEST
        return path if path.exists() else None

    def get_checkpoint_metadata(self, name: str) -> Optional[Dict[str, Any]]:
        path = self.base_save_dir / name
        if not path.exists():
            return None
        try:
            return read_checkpoint_header(path).get("meta", {})
        except CheckpointError as e:
            logger.warning(f"Skipping unreadable checkpoint {path}: {e.message}")
            return None

    def list_checkpoints(self) -> Dict[str, Dict[str, Any]]:
        """Epoch-numbered checkpoints (latest.ckpt excluded) mapped to their meta."""
        found = {}
        for path in sorted(self.base_save_dir.glob("*_epoch*.ckpt")):
            meta = self.get_checkpoint_metadata(path.name)
            if meta is not None:
                found[path.name] = meta
        return found
