"""Synthetic site-specific channels: UPA steering plus Rician cluster fading.

Each environment is an angular sector seen by a half-wavelength uniform
planar array. A channel draw is

    h = sqrt(K/(K+1)) * a(mean angles)
      + sqrt(1/(K+1)) * sum_c alpha_c * a(cluster angles),

with cluster angles scattered around the sector mean, per-cluster log-normal
gains, and alpha_c complex Gaussian weights normalized so the scattered part
has unit mean power. Datasets are rescaled once after generation so the mean
per-antenna gain over the whole dataset is exactly 1.

Binary dataset files ("CSIF"): little-endian; 4-byte magic, u32 version (=1),
u32 n_tx, u32 n_samples, u8 los flag, u16-length-prefixed UTF-8 env_id, then
n_samples records of n_tx interleaved (re, im) float32 pairs.
"""

import struct
from dataclasses import dataclass

import numpy as np

from .core import ChannelMatrix
from .errors import (
    BadMagicError,
    DatasetFormatError,
    TruncatedPayloadError,
    VersionMismatchError,
)

MAGIC = b"CSIF"
VERSION = 1


@dataclass
class EnvironmentSpec:
    """Generative description of one propagation environment."""

    env_id: str
    mean_azimuth: float = 0.0
    mean_elevation: float = np.pi / 3
    los: bool = True
    rician_k: float = 10.0
    n_clusters: int = 3
    angle_spread: float = 0.05
    gain_db_spread: float = 4.0
    n_tx: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.n_clusters < 1:
            raise ValueError("n_clusters must be >= 1")
        if self.rician_k < 0:
            raise ValueError("rician_k must be >= 0")
        if self.n_tx < 1:
            raise ValueError("n_tx must be >= 1")
        if self.angle_spread < 0 or self.gain_db_spread < 0:
            raise ValueError("spreads must be >= 0")


@dataclass
class EnvironmentDataset:
    """A generated (or loaded) set of single-user channel vectors."""

    env_id: str
    los: bool
    channels: np.ndarray

    def __post_init__(self):
        self.channels = np.asarray(self.channels, dtype=np.complex64)
        if self.channels.ndim != 2:
            raise ValueError("channels must be (n_samples, n_tx)")

    @property
    def n_samples(self):
        return self.channels.shape[0]

    @property
    def n_tx(self):
        return self.channels.shape[1]


def upa_grid(n_tx):
    """Split an antenna count into the most square (rows, cols) UPA grid."""
    rows = int(np.sqrt(n_tx))
    while rows > 1 and n_tx % rows != 0:
        rows -= 1
    return rows, n_tx // rows


def steering_vector(azimuth, elevation, n_tx=64):
    """Half-wavelength UPA array response, unit-modulus entries.

    Entry for grid position (m, n) is exp(j*pi*(m*u + n*v)) with
    u = sin(elevation)*cos(azimuth), v = sin(elevation)*sin(azimuth);
    broadside (elevation 0) gives the all-ones vector.
    """
    rows, cols = upa_grid(n_tx)
    u = np.sin(elevation) * np.cos(azimuth)
    v = np.sin(elevation) * np.sin(azimuth)
    m = np.arange(rows).reshape(-1, 1)
    n = np.arange(cols).reshape(1, -1)
    phase = np.pi * (m * u + n * v)
    return np.exp(1j * phase).reshape(-1)


def sample_channel(spec, rng):
    """Draw one channel vector for an environment.

    Draw order (fixed for reproducibility): cluster azimuth offsets, cluster
    elevation offsets, per-cluster gain exponents, then the complex cluster
    weights. The result has unit mean per-antenna gain in expectation;
    datasets apply the exact correction.
    """
    rng = np.random.default_rng(rng)
    k = spec.rician_k if spec.los else 0.0

    az = spec.mean_azimuth + spec.angle_spread * rng.standard_normal(spec.n_clusters)
    el = spec.mean_elevation + spec.angle_spread * rng.standard_normal(spec.n_clusters)
    gains = 10.0 ** (spec.gain_db_spread * rng.standard_normal(spec.n_clusters) / 10.0)
    weights = rng.standard_normal(spec.n_clusters) + 1j * rng.standard_normal(
        spec.n_clusters
    )
    weights *= np.sqrt(gains / gains.sum() / 2.0)

    h = np.zeros(spec.n_tx, dtype=np.complex128)
    for c in range(spec.n_clusters):
        h += weights[c] * steering_vector(az[c], el[c], spec.n_tx)
    h *= np.sqrt(1.0 / (k + 1.0))
    if k > 0:
        los = steering_vector(spec.mean_azimuth, spec.mean_elevation, spec.n_tx)
        h += np.sqrt(k / (k + 1.0)) * los
    return h


def generate_dataset(spec, n_samples):
    """Generate a dataset with per-sample derived RNG streams.

    Sample i uses default_rng([spec.seed, i]), so any slice can be reproduced
    independently and regeneration is byte-identical. After generation the
    whole set is rescaled once so mean_i |h_i|^2 over all samples and
    antennas equals 1.
    """
    raw = np.empty((n_samples, spec.n_tx), dtype=np.complex128)
    for i in range(n_samples):
        raw[i] = sample_channel(spec, np.random.default_rng([spec.seed, i]))
    if n_samples > 0:
        mean_gain = float(np.mean(np.abs(raw) ** 2))
        raw *= np.sqrt(1.0 / mean_gain)
    return EnvironmentDataset(
        env_id=spec.env_id, los=spec.los, channels=raw.astype(np.complex64)
    )


def build_multiuser_csi(dataset, n_users, seed):
    """Assemble one CSI matrix by drawing users uniformly without replacement."""
    n = dataset.n_samples
    if n < n_users:
        raise ValueError(
            f"dataset {dataset.env_id!r} has {n} samples, need >= {n_users}"
        )
    rng = np.random.default_rng(seed)
    idx = rng.choice(n, size=n_users, replace=False)
    return ChannelMatrix(rows=dataset.channels[idx].astype(np.complex128))


def write_dataset(dataset, path):
    """Write a dataset in the binary CSIF layout (see module docstring)."""
    env_bytes = dataset.env_id.encode("utf-8")
    if len(env_bytes) > 0xFFFF:
        raise ValueError("env_id too long to serialize")
    header = MAGIC + struct.pack(
        "<IIIBH",
        VERSION,
        dataset.n_tx,
        dataset.n_samples,
        1 if dataset.los else 0,
        len(env_bytes),
    )
    payload = np.empty((dataset.n_samples, dataset.n_tx, 2), dtype="<f4")
    payload[:, :, 0] = dataset.channels.real
    payload[:, :, 1] = dataset.channels.imag
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(env_bytes)
        fh.write(payload.tobytes())


def read_dataset(path):
    """Read a CSIF file; raises distinct errors for each way it can be bad."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 4 or blob[:4] != MAGIC:
        raise BadMagicError(f"{path}: not a CSIF file (bad magic)")
    head_fmt = "<IIIBH"
    head_size = 4 + struct.calcsize(head_fmt)
    if len(blob) < head_size:
        raise TruncatedPayloadError(f"{path}: header truncated")
    version, n_tx, n_samples, los, env_len = struct.unpack(
        head_fmt, blob[4:head_size]
    )
    if version != VERSION:
        raise VersionMismatchError(
            f"{path}: format version {version}, expected {VERSION}"
        )
    offset = head_size + env_len
    if len(blob) < offset:
        raise TruncatedPayloadError(f"{path}: env_id truncated")
    env_id = blob[head_size:offset].decode("utf-8")
    expected = n_samples * n_tx * 8
    if len(blob) - offset < expected:
        raise TruncatedPayloadError(
            f"{path}: payload has {len(blob) - offset} bytes, expected {expected}"
        )
    if len(blob) - offset > expected:
        raise DatasetFormatError(
            f"{path}: {len(blob) - offset - expected} trailing bytes after payload"
        )
    flat = np.frombuffer(blob, dtype="<f4", offset=offset)
    pairs = flat.reshape(n_samples, n_tx, 2)
    channels = (pairs[:, :, 0] + 1j * pairs[:, :, 1]).astype(np.complex64)
    return EnvironmentDataset(env_id=env_id, los=bool(los), channels=channels)
