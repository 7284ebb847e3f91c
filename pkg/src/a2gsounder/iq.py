"""Complex baseband sample container and its on-disk format.

Samples are stored as interleaved little-endian float32 (I, Q) pairs. A JSON
sidecar next to the binary file carries the capture metadata.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

DEFAULT_CENTER_FREQ = 2.585e9


@dataclass
class IqTrace:
    """A block of complex baseband samples plus capture metadata."""

    samples: np.ndarray
    sample_rate: float
    center_freq: float = DEFAULT_CENTER_FREQ
    start_time: float = 0.0
    description: str = ""
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.complex128).ravel()
        if not self.sample_rate > 0:
            raise ValueError("sample_rate must be positive")

    def __len__(self) -> int:
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate

    def replace(self, samples=None, **changes) -> "IqTrace":
        """Copy with new samples and/or metadata fields."""
        kw = dict(
            samples=self.samples if samples is None else samples,
            sample_rate=self.sample_rate,
            center_freq=self.center_freq,
            start_time=self.start_time,
            description=self.description,
            metadata=dict(self.metadata),
        )
        kw.update(changes)
        return IqTrace(**kw)


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def write_iq(path, trace: IqTrace) -> None:
    path = Path(path)
    inter = np.empty(2 * len(trace), dtype="<f4")
    inter[0::2] = trace.samples.real
    inter[1::2] = trace.samples.imag
    inter.tofile(path)
    meta = {
        "sample_rate_hz": trace.sample_rate,
        "center_freq_hz": trace.center_freq,
        "start_time_s": trace.start_time,
        "description": trace.description,
    }
    if trace.metadata:
        meta["extra"] = trace.metadata
    sidecar_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True))


def read_iq(path) -> IqTrace:
    path = Path(path)
    side = sidecar_path(path)
    if not side.exists():
        raise FileNotFoundError(f"missing IQ sidecar {side}")
    meta = json.loads(side.read_text())
    raw = np.fromfile(path, dtype="<f4")
    if raw.size % 2:
        raise ValueError(f"{path}: odd number of float32 values")
    samples = raw[0::2].astype(np.float64) + 1j * raw[1::2].astype(np.float64)
    return IqTrace(
        samples=samples,
        sample_rate=float(meta["sample_rate_hz"]),
        center_freq=float(meta.get("center_freq_hz", DEFAULT_CENTER_FREQ)),
        start_time=float(meta.get("start_time_s", 0.0)),
        description=meta.get("description", ""),
        metadata=meta.get("extra", {}),
    )
