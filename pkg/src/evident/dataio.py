"""Dense-array container (DARR) and dataset manifest handling.

DARR layout: magic "DARR1", version u8, u32 H/W/C (little-endian), row-major
little-endian float32 payload, CRC-64/XZ trailer over all preceding bytes.
Deliberately trivial to parse in any language.
"""

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .exceptions import FormatError, InvalidInputError, ManifestError
from .kernels import crc64

DARR_MAGIC = b"DARR1"
DARR_VERSION = 1
_HEADER_LEN = len(DARR_MAGIC) + 1 + 12  # magic + version + 3 x u32

MANIFEST_SCHEMA = "evident-data-v1"
MANIFEST_NAME = "manifest.json"
SAMPLE_KEYS = ("features", "gt", "base_pred", "mask", "sigma", "hard_mask")


def write_array(path, grid):
    """Write an H x W or H x W x C float grid; values are stored as
    little-endian float32."""
    grid = np.asarray(grid)
    if grid.ndim == 2:
        grid = grid[:, :, None]
    if grid.ndim != 3:
        raise FormatError(f"grid must be 2-D or 3-D, got shape {grid.shape}")
    h, w, c = grid.shape
    if h < 1 or w < 1 or c < 1:
        raise FormatError(f"all dims must be >= 1, got {grid.shape}")
    if max(h, w, c) > 0xFFFFFFFF:
        raise FormatError(f"dims exceed 32-bit range: {grid.shape}")
    if not np.all(np.isfinite(grid)):
        raise InvalidInputError("grid contains non-finite values")
    payload = np.ascontiguousarray(grid, dtype="<f4").tobytes()
    body = (DARR_MAGIC + struct.pack("<B", DARR_VERSION)
            + struct.pack("<III", h, w, c) + payload)
    with open(path, "wb") as fh:
        fh.write(body + struct.pack("<Q", crc64(body)))


def _read_header(blob, path):
    if len(blob) < _HEADER_LEN:
        raise FormatError(f"{path}: truncated header", offset=len(blob))
    if blob[:5] != DARR_MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:5]!r}", offset=0)
    if blob[5] != DARR_VERSION:
        raise FormatError(f"{path}: unsupported version {blob[5]}", offset=5)
    h, w, c = struct.unpack_from("<III", blob, 6)
    if h < 1 or w < 1 or c < 1:
        raise FormatError(f"{path}: invalid dims {(h, w, c)}", offset=6)
    return h, w, c


def read_array_header(path):
    """Dims (H, W, C) from the fixed-size header only."""
    with open(path, "rb") as fh:
        blob = fh.read(_HEADER_LEN)
    return _read_header(blob, path)


def read_array(path):
    """Read and validate a DARR file; returns a float32 (H, W, C) array."""
    with open(path, "rb") as fh:
        blob = fh.read()
    h, w, c = _read_header(blob, path)
    expect = _HEADER_LEN + 4 * h * w * c + 8
    if len(blob) != expect:
        raise FormatError(
            f"{path}: expected {expect} bytes, found {len(blob)}",
            offset=min(len(blob), expect))
    stored = struct.unpack_from("<Q", blob, len(blob) - 8)[0]
    if crc64(blob[:-8]) != stored:
        raise FormatError(f"{path}: checksum mismatch", offset=len(blob) - 8)
    data = np.frombuffer(blob, dtype="<f4", count=h * w * c,
                         offset=_HEADER_LEN)
    return data.reshape(h, w, c).copy()


@dataclass(frozen=True)
class SampleFiles:
    """Resolved per-sample file paths plus the validated grid height/width."""

    id: str
    paths: dict
    height: int
    width: int


@dataclass(frozen=True)
class LoadedSample:
    """Fully loaded dataset sample in float64, mask as bool H x W."""

    id: str
    features: np.ndarray
    gt: np.ndarray
    base_pred: np.ndarray
    mask: np.ndarray
    sigma: np.ndarray
    hard_mask: np.ndarray


def write_manifest(directory, sample_names):
    """Standard manifest for samples stored as <name>_<key>.darr."""
    directory = Path(directory)
    samples = []
    for name in sample_names:
        entry = {"id": name}
        entry.update({key: f"{name}_{key}.darr" for key in SAMPLE_KEYS})
        samples.append(entry)
    doc = {"schema": MANIFEST_SCHEMA, "samples": samples}
    with open(directory / MANIFEST_NAME, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)


def manifest(directory):
    """Resolve and validate a dataset directory.

    Checks that every referenced file exists and that all grids of a sample
    agree on H x W; errors name the offending sample (and files).
    """
    directory = Path(directory)
    mpath = directory / MANIFEST_NAME
    if not mpath.is_file():
        raise ManifestError(f"no {MANIFEST_NAME} in {directory}")
    with open(mpath) as fh:
        doc = json.load(fh)
    if doc.get("schema") != MANIFEST_SCHEMA:
        raise ManifestError(
            f"{mpath}: schema {doc.get('schema')!r}, expected "
            f"{MANIFEST_SCHEMA!r}")
    out = []
    for entry in doc.get("samples", []):
        sid = entry.get("id", "<unnamed>")
        paths = {}
        dims = {}
        for key in SAMPLE_KEYS:
            if key not in entry:
                raise ManifestError(f"sample {sid!r}: missing key {key!r}")
            path = directory / entry[key]
            if not path.is_file():
                raise ManifestError(
                    f"sample {sid!r}: missing file {path}")
            paths[key] = path
            dims[key] = read_array_header(path)
        hw = {k: v[:2] for k, v in dims.items()}
        if len(set(hw.values())) != 1:
            detail = ", ".join(f"{k}={paths[k].name}:{v}"
                               for k, v in hw.items())
            raise ManifestError(
                f"sample {sid!r}: grid dims disagree ({detail})")
        h, w = next(iter(hw.values()))
        out.append(SampleFiles(id=sid, paths=paths, height=h, width=w))
    return out


def load_sample(files):
    """Load one manifest entry into float64 arrays (mask as bool)."""
    arrays = {k: read_array(p).astype(np.float64) for k, p in files.paths.items()}
    return LoadedSample(
        id=files.id,
        features=arrays["features"],
        gt=arrays["gt"],
        base_pred=arrays["base_pred"],
        mask=arrays["mask"][:, :, 0] > 0.5,
        sigma=arrays["sigma"][:, :, 0],
        hard_mask=arrays["hard_mask"][:, :, 0] > 0.5,
    )


def load_dataset(directory):
    return [load_sample(f) for f in manifest(directory)]
