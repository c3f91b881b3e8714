"""Ray data bank: persisted record of every detector-striking ray.

Binary format (little-endian):

    magic "LRDB" | version u16 | seed u64 | record count u64
    meta length u32 | meta JSON (utf-8)
    records: {detector_id u16, kappa u8, wavelength f64 um, t f64 ns, P f64 W}

The JSON block carries the scenario digest and full trace metadata so a bank
can be replayed and validated against its configuration.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"LRDB"
FORMAT_VERSION = 1

RECORD_DTYPE = np.dtype(
    [
        ("detector_id", "<u2"),
        ("kappa", "u1"),
        ("wavelength_um", "<f8"),
        ("t_ns", "<f8"),
        ("power_w", "<f8"),
    ]
)

_HEADER = struct.Struct("<4sHQQ")
_META_LEN = struct.Struct("<I")


class RdbError(IOError):
    """Base class for ray-data-bank persistence failures."""


class RdbFormatError(RdbError):
    pass


class RdbDigestError(RdbError):
    pass


@dataclass
class RayDataBank:
    """Detector hit records plus the metadata needed to reproduce them."""

    records: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        rec = np.asarray(self.records)
        if rec.dtype != RECORD_DTYPE:
            rec = rec.astype(RECORD_DTYPE)
        self.records = rec

    @property
    def seed(self) -> int:
        return int(self.meta.get("seed", 0))

    @property
    def detector_ids(self) -> list[str]:
        return list(self.meta.get("detector_ids", []))

    def i_hit(self, detector: str | int | None = None) -> int:
        if detector is None:
            return int(self.records.size)
        idx = self._det_index(detector)
        return int(np.count_nonzero(self.records["detector_id"] == idx))

    def records_for(self, detector: str | int) -> np.ndarray:
        idx = self._det_index(detector)
        return self.records[self.records["detector_id"] == idx]

    def _det_index(self, detector) -> int:
        if isinstance(detector, str):
            try:
                return self.detector_ids.index(detector)
            except ValueError:
                raise KeyError(f"unknown detector {detector!r}") from None
        return int(detector)

    def finalize(self) -> "RayDataBank":
        """Sort records by arrival time (stable, so ties keep trace order)."""
        order = np.argsort(self.records["t_ns"], kind="stable")
        self.records = self.records[order]
        return self


def save_rdb(bank: RayDataBank, path) -> Path:
    path = Path(path)
    meta = dict(bank.meta)
    meta.setdefault("format_version", FORMAT_VERSION)
    blob = json.dumps(meta, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, bank.seed & (2**64 - 1), bank.records.size))
        fh.write(_META_LEN.pack(len(blob)))
        fh.write(blob)
        fh.write(np.ascontiguousarray(bank.records).tobytes())
    return path


def load_rdb(path, expect_digest: str | None = None) -> RayDataBank:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _HEADER.size + _META_LEN.size:
        raise RdbFormatError(f"{path}: truncated header")
    magic, version, seed, count = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise RdbFormatError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise RdbFormatError(f"{path}: unsupported version {version}")
    (meta_len,) = _META_LEN.unpack_from(raw, _HEADER.size)
    off = _HEADER.size + _META_LEN.size
    if len(raw) < off + meta_len:
        raise RdbFormatError(f"{path}: truncated metadata")
    try:
        meta = json.loads(raw[off : off + meta_len].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise RdbFormatError(f"{path}: corrupt metadata: {exc}") from exc
    off += meta_len
    expected_bytes = count * RECORD_DTYPE.itemsize
    if len(raw) - off != expected_bytes:
        raise RdbFormatError(
            f"{path}: expected {expected_bytes} record bytes, found {len(raw) - off}"
        )
    if expect_digest is not None and meta.get("digest") != expect_digest:
        raise RdbDigestError(
            f"{path}: scenario digest {meta.get('digest')!r} != expected {expect_digest!r}"
        )
    records = np.frombuffer(raw[off:], dtype=RECORD_DTYPE).copy()
    if int(meta.get("seed", seed)) != seed:
        raise RdbFormatError(f"{path}: header/metadata seed mismatch")
    return RayDataBank(records=records, meta=meta)


def export_csv(bank: RayDataBank, path) -> Path:
    """Write the records as CSV with the same columns as the binary format."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        for key in sorted(bank.meta):
            val = bank.meta[key]
            if isinstance(val, (list, dict)):
                val = json.dumps(val, sort_keys=True)
            fh.write(f"# {key}={val}\n")
        fh.write("detector_id,kappa,wavelength_um,t_ns,power_w\n")
        for rec in bank.records:
            fh.write(
                f"{int(rec['detector_id'])},{int(rec['kappa'])},"
                f"{rec['wavelength_um']:.17g},{rec['t_ns']:.17g},{rec['power_w']:.17g}\n"
            )
    return path
