"""Binary weight archives: a JSON manifest plus one contiguous float32 blob.

Layout: magic 'SDWB', u32 format version, u32 manifest length, UTF-8 JSON
manifest, little-endian float32 blob, SHA-256 of manifest+blob. The manifest
maps tensor names to shapes and element offsets. Loading verifies the
checksum; tensor reads are instrumented so callers can assert which weights
an inference actually touched.
"""

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .errors import InputError

MAGIC = b"SDWB"
FORMAT_VERSION = 1


class WeightFormatError(InputError):
    """File is not a readable weight archive."""


class WeightChecksumError(InputError):
    """Archive bytes do not match the stored digest."""


class MissingTensorError(InputError):
    def __init__(self, name: str):
        super().__init__(f"weight archive is missing tensor {name!r}")
        self.name = name


class TensorShapeError(InputError):
    def __init__(self, name: str, expected, got):
        super().__init__(
            f"tensor {name!r} has shape {tuple(got)}, expected {tuple(expected)}"
        )
        self.name = name


class WeightArchive:
    """Immutable named-tensor store with access instrumentation."""

    def __init__(self, tensors: dict[str, np.ndarray]):
        self._tensors = {}
        for name, arr in tensors.items():
            arr = np.ascontiguousarray(arr, dtype=np.float32)
            arr.setflags(write=False)
            self._tensors[name] = arr
        self.accessed: set[str] = set()

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __len__(self) -> int:
        return len(self._tensors)

    def names(self):
        return sorted(self._tensors)

    def shape(self, name: str):
        if name not in self._tensors:
            raise MissingTensorError(name)
        return self._tensors[name].shape

    def get(self, name: str) -> np.ndarray:
        """Fetch a tensor, recording the access."""
        if name not in self._tensors:
            raise MissingTensorError(name)
        self.accessed.add(name)
        return self._tensors[name]

    def reset_access_log(self) -> None:
        self.accessed = set()

    def validate_plan(self, plan) -> None:
        """Check that every (name, shape) the model requires is present."""
        for name, shape in plan:
            if name not in self._tensors:
                raise MissingTensorError(name)
            if self._tensors[name].shape != tuple(shape):
                raise TensorShapeError(name, shape, self._tensors[name].shape)


def save_weights(archive: WeightArchive, path) -> None:
    """Serialize an archive; save -> load roundtrips bit-identically."""
    entries = []
    blobs = []
    offset = 0
    for name in archive.names():
        arr = archive._tensors[name]
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(arr.astype("<f4").tobytes())
        offset += arr.size
    manifest = json.dumps(
        {"format": FORMAT_VERSION, "dtype": "<f4", "tensors": entries}
    ).encode("utf-8")
    blob = b"".join(blobs)
    digest = hashlib.sha256(manifest + blob).digest()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(manifest)))
        fh.write(manifest)
        fh.write(blob)
        fh.write(digest)


def load_weights(path) -> WeightArchive:
    """Read and verify an archive written by save_weights."""
    data = Path(path).read_bytes()
    if len(data) < 12 or data[:4] != MAGIC:
        raise WeightFormatError(f"{path}: not a weight archive")
    version, manifest_len = struct.unpack("<II", data[4:12])
    if version != FORMAT_VERSION:
        raise WeightFormatError(f"{path}: unsupported format version {version}")
    body_start = 12 + manifest_len
    if len(data) < body_start + 32:
        raise WeightFormatError(f"{path}: truncated archive")
    manifest_raw = data[12:body_start]
    blob = data[body_start:-32]
    digest = data[-32:]
    if hashlib.sha256(manifest_raw + blob).digest() != digest:
        raise WeightChecksumError(f"{path}: checksum mismatch, archive corrupted")
    try:
        manifest = json.loads(manifest_raw)
    except json.JSONDecodeError as exc:
        raise WeightFormatError(f"{path}: bad manifest: {exc}") from exc
    flat = np.frombuffer(blob, dtype="<f4")
    tensors = {}
    for entry in manifest["tensors"]:
        name, shape, offset = entry["name"], entry["shape"], entry["offset"]
        size = int(np.prod(shape)) if shape else 1
        if offset + size > flat.size:
            raise WeightFormatError(f"{path}: tensor {name!r} overruns the blob")
        tensors[name] = flat[offset : offset + size].reshape(shape)
    return WeightArchive(tensors)
