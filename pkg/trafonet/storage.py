from __future__ import annotations
import csv
import hashlib
import json
import logging
import zlib
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .catalog import NetworkSpec
from .errors import IntegrityError, ValidationError, VersionError
from .nn import Network

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"TRAFONET-CKPT\n"
CHECKPOINT_VERSION = 1
HEADER_LEN_BYTES = 8
PAYLOAD_DTYPE = np.dtype("<f8")


def _json_default(obj: Any) -> Any:
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, (tuple, set)):
        return list(obj)
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


class Storage:
    """
    File-based persistence confined to one run directory:
      - <out_dir>/config.json for the resolved config
      - <out_dir>/<name>.json for records, <name>.csv for metric tables
    """
    def __init__(self, out_dir: Union[str, Path] = "runs") -> None:
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)

    def path(self, name: str) -> Path:
        """Path of `name` inside out_dir; anything resolving outside it is rejected."""
        root = self.out_dir.resolve()
        target = (root / name).resolve()
        if target != root and root not in target.parents:
            raise ValidationError(f"refusing to write outside {root}: {name}")
        target.parent.mkdir(parents=True, exist_ok=True)
        return target

    # ----- JSON -----

    def save_json(self, name: str, data: Any) -> Path:
        path = self.path(name)
        path.write_text(json.dumps(data, indent=2, default=_json_default), encoding="utf-8")
        return path

    def load_json(self, name: str) -> Any:
        return json.loads(self.path(name).read_text(encoding="utf-8"))

    def save_config(self, cfg) -> Path:
        return self.save_json("config.json", cfg.to_dict())

    def save_record(self, record, name: Optional[str] = None) -> Path:
        return self.save_json(f"{name or record.name}.json", record.to_dict())

    # ----- Tables -----

    def write_csv(self, name: str, rows: Iterable[Dict[str, Any]], fieldnames: Sequence[str]) -> Path:
        path = self.path(name)
        with path.open("w", encoding="utf-8", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=list(fieldnames))
            writer.writeheader()
            for r in rows:
                writer.writerow(r)
        return path

    def read_csv(self, name: str) -> List[Dict[str, str]]:
        with self.path(name).open("r", encoding="utf-8", newline="") as f:
            return list(csv.DictReader(f))


# ----- Checkpoints -----
#
# Layout:
#   magic line | 8-byte little-endian header length | JSON header | float64 payload
# The header lists every parameter block (layer, name, shape, payload offset, crc32)
# and the sha256 of the whole payload.

def save_checkpoint(path: Union[str, Path], net: Network, metadata: Optional[Dict[str, Any]] = None) -> Path:
    path = Path(path)
    blocks: List[Dict[str, Any]] = []
    chunks: List[bytes] = []
    offset = 0
    for k, params in enumerate(net.params()):
        for name, arr in params.items():
            raw = np.ascontiguousarray(arr, dtype=PAYLOAD_DTYPE).tobytes()
            blocks.append({
                "layer": k,
                "name": name,
                "shape": list(arr.shape),
                "offset": offset,
                "nbytes": len(raw),
                "crc32": zlib.crc32(raw),
            })
            chunks.append(raw)
            offset += len(raw)
    payload = b"".join(chunks)
    header = {
        "version": CHECKPOINT_VERSION,
        "spec": net.spec.to_dict(),
        "metadata": metadata or {},
        "blocks": blocks,
        "payload_bytes": len(payload),
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    head = json.dumps(header, default=_json_default).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(CHECKPOINT_MAGIC + len(head).to_bytes(HEADER_LEN_BYTES, "little") + head + payload)
    log.debug("saved checkpoint %s (%d parameters)", path, net.n_params())
    return path


def _read_header(data: bytes, path: Path) -> Tuple[Dict[str, Any], int]:
    if not data.startswith(CHECKPOINT_MAGIC):
        raise IntegrityError(f"{path}: bad magic at offset 0")
    pos = len(CHECKPOINT_MAGIC)
    if len(data) < pos + HEADER_LEN_BYTES:
        raise IntegrityError(f"{path}: truncated at offset {len(data)} (header length expected at {pos})")
    head_len = int.from_bytes(data[pos:pos + HEADER_LEN_BYTES], "little")
    pos += HEADER_LEN_BYTES
    if len(data) < pos + head_len:
        raise IntegrityError(f"{path}: truncated at offset {len(data)} (header ends at {pos + head_len})")
    try:
        header = json.loads(data[pos:pos + head_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise IntegrityError(f"{path}: unreadable header at offset {pos}") from None
    return header, pos + head_len


def load_checkpoint(path: Union[str, Path]) -> Tuple[Network, Dict[str, Any]]:
    """
    Rebuild the network bit-exactly. Any corruption raises IntegrityError naming the
    byte offset; nothing is returned on failure.
    """
    path = Path(path)
    data = path.read_bytes()
    header, start = _read_header(data, path)

    version = header.get("version")
    if version != CHECKPOINT_VERSION:
        raise VersionError(f"{path}: checkpoint version {version}, this build reads {CHECKPOINT_VERSION}")

    payload = data[start:]
    expected = int(header["payload_bytes"])
    if len(payload) != expected:
        raise IntegrityError(
            f"{path}: payload is {len(payload)} bytes, header says {expected} (file ends at offset {len(data)})"
        )

    arrays: Dict[Tuple[int, str], np.ndarray] = {}
    for b in header["blocks"]:
        lo, hi = int(b["offset"]), int(b["offset"]) + int(b["nbytes"])
        raw = payload[lo:hi]
        if zlib.crc32(raw) != int(b["crc32"]):
            raise IntegrityError(f"{path}: checksum mismatch in layer {b['layer']} {b['name']} at offset {start + lo}")
        arrays[(int(b["layer"]), b["name"])] = np.frombuffer(raw, dtype=PAYLOAD_DTYPE).reshape(b["shape"])
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise IntegrityError(f"{path}: payload digest mismatch at offset {start}")

    net = Network.from_spec(NetworkSpec.from_dict(header["spec"]))
    for k, params in enumerate(net.params()):
        for name, arr in params.items():
            saved = arrays.get((k, name))
            if saved is None or saved.shape != arr.shape:
                raise IntegrityError(f"{path}: block layer {k} {name} missing or misshapen")
            arr[...] = saved
    return net, header.get("metadata", {})
