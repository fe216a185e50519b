"""Event files, corpus manifests and the toy event generator.

Container layout (all integers little-endian)::

    0   8  magic  b"PMUGEDAT"
    8   4  format version (uint32)
    12  4  reserved, zero
    16  8  metadata length in bytes (uint64)
    24  8  payload length in bytes (uint64)
    32  .  UTF-8 JSON metadata
    .   .  float64 payload, tensors concatenated in the order of
           metadata["tensors"], each in C order

Event files hold one tensor named ``x`` of shape (channel, pmu, time).
"""

from __future__ import annotations

import enum
import json
import logging
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .tensor3 import Tensor3, axis_stats

logger = logging.getLogger(__name__)

MAGIC = b"PMUGEDAT"
FORMAT_VERSION = 1
HEADER = struct.Struct("<8sII QQ")
assert HEADER.size == 32

MANIFEST_VERSION = 1


class DataFormatError(ValueError):
    """Base class for container parse failures."""


class MagicError(DataFormatError):
    pass


class TruncatedError(DataFormatError):
    pass


class VersionError(DataFormatError):
    pass


class ConfigError(ValueError):
    pass


class Label(str, enum.Enum):
    VOLTAGE = "Voltage"
    FREQUENCY = "Frequency"


class SubCause(str, enum.Enum):
    LIGHTNING_STRIKE = "LightningStrike"
    LINE_TRIP = "LineTrip"
    WIND = "Wind"
    EQUIPMENT_FAILURE = "EquipmentFailure"
    GENERATOR_TRIP = "GeneratorTrip"
    GENERATOR_EQUIPMENT_FAILURE = "GeneratorEquipmentFailure"
    UNKNOWN = "Unknown"


# ---------------------------------------------------------------- container


def write_container(path, meta: dict, tensors: dict[str, np.ndarray]) -> Path:
    path = Path(path)
    table = []
    chunks = []
    for name, arr in tensors.items():
        a = np.ascontiguousarray(arr, dtype="<f8")
        table.append({"name": name, "shape": list(a.shape)})
        chunks.append(a.tobytes())
    meta = dict(meta)
    meta["tensors"] = table
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    payload = b"".join(chunks)
    header = HEADER.pack(MAGIC, FORMAT_VERSION, 0, len(meta_bytes), len(payload))
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(meta_bytes)
        fh.write(payload)
    return path


def read_container(path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if len(raw) < HEADER.size:
        raise TruncatedError(f"{path}: header needs {HEADER.size} bytes, file has {len(raw)}")
    magic, version, _, meta_len, payload_len = HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        offset = next(i for i in range(len(MAGIC)) if magic[i] != MAGIC[i])
        raise MagicError(f"{path}: bad magic byte at offset {offset}")
    if version != FORMAT_VERSION:
        raise VersionError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    expected = HEADER.size + meta_len + payload_len
    if len(raw) < expected:
        raise TruncatedError(f"{path}: expected {expected} bytes, file has {len(raw)}")
    try:
        meta = json.loads(raw[HEADER.size:HEADER.size + meta_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataFormatError(f"{path}: unreadable metadata block ({exc})") from None
    payload = raw[HEADER.size + meta_len:expected]
    tensors = {}
    pos = 0
    for entry in meta.get("tensors", []):
        shape = tuple(entry["shape"])
        nbytes = 8 * int(np.prod(shape, dtype=np.int64))
        if pos + nbytes > len(payload):
            raise TruncatedError(f"{path}: payload too short for tensor {entry['name']!r}")
        tensors[entry["name"]] = np.frombuffer(payload, dtype="<f8", count=nbytes // 8,
                                               offset=pos).reshape(shape).astype(np.float64)
        pos += nbytes
    if pos != len(payload):
        raise DataFormatError(f"{path}: {len(payload) - pos} unaccounted payload bytes")
    return meta, tensors


# ------------------------------------------------------------------ records


@dataclass(frozen=True)
class EventRecord:
    event_id: str
    label: Label
    sub_cause: SubCause
    tensor: Tensor3
    pmu_ids: tuple[str, ...]
    sample_rate_hz: float = 30.0
    event_start_sample: int = 300

    def __post_init__(self):
        if not isinstance(self.tensor, Tensor3):
            object.__setattr__(self, "tensor", Tensor3(self.tensor))
        object.__setattr__(self, "label", Label(self.label))
        object.__setattr__(self, "sub_cause", SubCause(self.sub_cause))
        object.__setattr__(self, "pmu_ids", tuple(str(p) for p in self.pmu_ids))
        d0, n, _ = self.tensor.dims
        if d0 != 4:
            raise ValueError(f"event tensor needs 4 channels, got {d0}")
        if len(self.pmu_ids) != n:
            raise ValueError(f"{len(self.pmu_ids)} pmu ids for {n} PMU rows")

    @property
    def n_pmus(self) -> int:
        return self.tensor.dims[1]

    @property
    def n_samples(self) -> int:
        return self.tensor.dims[2]


def write_event(record: EventRecord, path) -> Path:
    meta = {
        "kind": "event",
        "event_id": record.event_id,
        "label": record.label.value,
        "sub_cause": record.sub_cause.value,
        "pmu_ids": list(record.pmu_ids),
        "sample_rate_hz": record.sample_rate_hz,
        "event_start_sample": record.event_start_sample,
    }
    return write_container(path, meta, {"x": record.tensor.data})


def read_event(path) -> EventRecord:
    meta, tensors = read_container(path)
    if meta.get("kind") != "event" or "x" not in tensors:
        raise DataFormatError(f"{path}: not an event file")
    return EventRecord(
        event_id=meta["event_id"],
        label=meta["label"],
        sub_cause=meta["sub_cause"],
        tensor=Tensor3(tensors["x"]),
        pmu_ids=meta["pmu_ids"],
        sample_rate_hz=meta["sample_rate_hz"],
        event_start_sample=meta["event_start_sample"],
    )


def ingest_event(raw, pmu_ids, *, event_id, label, sub_cause, sample_rate_hz=30.0,
                 event_start_sample=300) -> tuple[EventRecord, list[str]]:
    """Build a record from a raw (4, N, T) array that may contain NaN gaps.

    A PMU with any missing sample in any channel is dropped from this event
    only. Returns the record and the dropped PMU ids.
    """
    arr = np.asarray(raw, dtype=np.float64)
    missing = ~np.all(np.isfinite(arr), axis=(0, 2))
    dropped = [str(p) for p, m in zip(pmu_ids, missing) if m]
    keep = [str(p) for p, m in zip(pmu_ids, missing) if not m]
    record = EventRecord(event_id, label, sub_cause, Tensor3(arr[:, ~missing, :]), keep,
                         sample_rate_hz, event_start_sample)
    return record, dropped


def standardize(record: EventRecord, zero_var_tol: float = 1e-12) -> EventRecord:
    """Z-score every (channel, PMU) row over time, within this event only.

    PMUs with a zero-variance row in any channel are dropped and logged.
    """
    x = record.tensor.data
    mean, std = axis_stats(x, axis=2)
    scale = np.maximum(np.abs(mean), 1.0)
    flat = np.any(std <= zero_var_tol * scale, axis=0)
    if flat.any():
        dropped = [p for p, f in zip(record.pmu_ids, flat) if f]
        logger.warning("event %s: dropping zero-variance PMUs %s", record.event_id, dropped)
    keep = ~flat
    z = (x[:, keep, :] - mean[:, keep, None]) / std[:, keep, None]
    # a second pass removes the O(eps) residue of the first
    m2, s2 = axis_stats(z, axis=2)
    z = (z - m2[..., None]) / s2[..., None]
    ids = tuple(p for p, k in zip(record.pmu_ids, keep) if k)
    return replace(record, tensor=Tensor3(z), pmu_ids=ids)


# ----------------------------------------------------------------- manifest


@dataclass(frozen=True)
class ManifestEntry:
    event_id: str
    label: Label
    sub_cause: SubCause
    path: Path
    n_pmus: int
    n_samples: int


@dataclass
class CorpusManifest:
    records: list[ManifestEntry] = field(default_factory=list)
    format_version: int = MANIFEST_VERSION

    def __len__(self):
        return len(self.records)

    def load(self) -> list[EventRecord]:
        return [read_event(e.path) for e in self.records]


def write_manifest(manifest: CorpusManifest, path) -> Path:
    path = Path(path)
    ids = [e.event_id for e in manifest.records]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate event ids in manifest")
    lines = [f"# format_version={manifest.format_version}"]
    for e in manifest.records:
        rel = Path(e.path)
        try:
            rel = rel.relative_to(path.parent)
        except ValueError:
            pass
        lines.append("\t".join([e.event_id, e.label.value, e.sub_cause.value, str(rel),
                                str(e.n_pmus), str(e.n_samples)]))
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def read_manifest(path, check_files: bool = True) -> CorpusManifest:
    path = Path(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines or not lines[0].startswith("# format_version="):
        raise DataFormatError(f"{path}: missing manifest header")
    version = int(lines[0].split("=", 1)[1])
    if version != MANIFEST_VERSION:
        raise VersionError(f"{path}: manifest version {version}, expected {MANIFEST_VERSION}")
    entries = []
    seen = set()
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 6:
            raise DataFormatError(f"{path}:{lineno}: expected 6 fields, got {len(parts)}")
        eid, label, cause, rel, n, t = parts
        if eid in seen:
            raise DataFormatError(f"{path}:{lineno}: duplicate event id {eid!r}")
        seen.add(eid)
        p = Path(rel)
        if not p.is_absolute():
            p = path.parent / p
        entries.append(ManifestEntry(eid, Label(label), SubCause(cause), p, int(n), int(t)))
    manifest = CorpusManifest(entries, version)
    if check_files:
        for e in entries:
            rec = read_event(e.path)
            if rec.event_id != e.event_id or rec.tensor.dims[1:] != (e.n_pmus, e.n_samples):
                raise DataFormatError(f"{e.path}: header disagrees with manifest line")
    return manifest


def save_corpus(records, out_dir, manifest_name: str = "manifest.tsv") -> CorpusManifest:
    out_dir = Path(out_dir)
    entries = []
    for rec in records:
        p = write_event(rec, out_dir / "events" / f"{rec.event_id}.pmue")
        entries.append(ManifestEntry(rec.event_id, rec.label, rec.sub_cause, p,
                                     rec.n_pmus, rec.n_samples))
    manifest = CorpusManifest(entries)
    write_manifest(manifest, out_dir / manifest_name)
    return manifest


# ------------------------------------------------------------ toy generator
#
# Every toy event is  raw = operating point + scale * (shared + extra + noise)
# per channel, where
#   shared : five fixed waveforms common to the whole corpus, mixed with
#            per-PMU participations drawn from a corpus-wide mixture per
#            (label, channel, waveform); the label also changes the gains
#   extra  : three waveforms whose parameters are redrawn for every event
#   noise  : AR(1) colored noise
# All waveforms are zero before the onset sample t0; dt = (t - t0) / fs.

VOLTAGE_CAUSES = (SubCause.LIGHTNING_STRIKE, SubCause.LINE_TRIP, SubCause.WIND,
                  SubCause.EQUIPMENT_FAILURE, SubCause.UNKNOWN)
FREQUENCY_CAUSES = (SubCause.GENERATOR_TRIP, SubCause.GENERATOR_EQUIPMENT_FAILURE,
                    SubCause.UNKNOWN)

_BASE_KV = (115.0, 230.0, 345.0, 500.0)
_NOMINAL_HZ = 60.0
_RAW_SCALE = np.array([50.0, 20.0, 5.0, 0.05])  # MW, MVAr, kV, Hz


@dataclass(frozen=True)
class ToyConfig:
    voltage: int = 7
    frequency: int = 1
    n_pmus: int = 60
    n_samples: int = 600
    noise: float = 0.05
    sample_rate_hz: float = 30.0
    event_start: int = 300
    start_jitter: int = 0
    n_modes: int = 3

    def validate(self):
        if self.voltage < 0 or self.frequency < 0:
            raise ConfigError("event counts must be non-negative")
        if self.voltage + self.frequency == 0:
            raise ConfigError("empty corpus: voltage + frequency event count is zero")
        if self.n_samples <= 0 or self.n_samples % 8:
            raise ConfigError(f"n_samples must be a positive multiple of 8, got {self.n_samples}")
        if self.n_pmus < 1:
            raise ConfigError("n_pmus must be positive")
        if not 0 <= self.event_start < self.n_samples:
            raise ConfigError("event_start outside the window")
        if self.noise < 0:
            raise ConfigError("noise must be non-negative")


def shared_waveforms(n_samples: int, t0: int, fs: float) -> np.ndarray:
    """The five corpus-wide shapes, shape (5, n_samples).

    sag   : -(0.75 exp(-dt/0.2) + 0.25), dip recovering to a residual step
    step  : -1
    spike : exp(-((t - t0 - 1) / 2)^2)
    drop  : -(1 - exp(-dt/1.0)) + 0.5 (1 - exp(-dt/6.0)), frequency nadir
            followed by partial governor recovery
    osc   : -exp(-0.15 w dt) sin(w dt), w = 2 pi 0.25 Hz, inter-area mode
    """
    t = np.arange(n_samples, dtype=np.float64)
    on = (t >= t0).astype(np.float64)
    dt = np.clip((t - t0) / fs, 0.0, None)
    w = 2 * np.pi * 0.25
    return np.stack([
        -(0.75 * np.exp(-dt / 0.2) + 0.25) * on,
        -on,
        np.exp(-(((t - t0 - 1) / 2.0) ** 2)) * on,
        (-(1 - np.exp(-dt / 1.0)) + 0.5 * (1 - np.exp(-dt / 6.0))) * on,
        -np.exp(-0.15 * w * dt) * np.sin(w * dt) * on,
    ])


def _extra_waveforms(rng, n_samples: int, t0: int, fs: float) -> np.ndarray:
    """Three event-specific shapes with freshly drawn parameters, (3, n_samples).

    ring  : exp(-dt/tau) sin(2 pi f dt + phi), f in [0.5, 2] Hz
    pulse : exp(-((t - tp) / w)^2) at a random post-onset sample tp
    ramp  : 1 - exp(-dt/tau), tau in [2, 8] s
    """
    t = np.arange(n_samples, dtype=np.float64)
    on = (t >= t0).astype(np.float64)
    dt = np.clip((t - t0) / fs, 0.0, None)
    f, tau, phi = rng.uniform(0.5, 2.0), rng.uniform(0.5, 3.0), rng.uniform(0, 2 * np.pi)
    tp = rng.uniform(t0 + 5, n_samples - 5)
    width = rng.uniform(1.0, 4.0)
    return np.stack([
        np.exp(-dt / tau) * np.sin(2 * np.pi * f * dt + phi) * on,
        np.exp(-(((t - tp) / width) ** 2)) * on,
        (1 - np.exp(-dt / rng.uniform(2.0, 8.0))) * on,
    ])


# gains per channel (rows P, Q, V, F) and shared shape (sag, step, spike, drop, osc)
_VOLT_GAIN = np.array([
    [1.0, 0.6, 0.5, 0.1, 0.2],
    [0.6, 0.5, 0.5, 0.1, 0.3],
    [1.0, 0.7, 0.6, 0.1, 0.1],
    [0.2, 0.1, 0.3, 0.3, 0.3],
])
_FREQ_GAIN = np.array([
    [0.2, 0.4, 0.1, 0.8, 0.8],
    [0.2, 0.3, 0.2, 0.5, 0.6],
    [0.2, 0.4, 0.1, 0.4, 0.5],
    [0.0, 0.0, 0.0, 1.0, 0.3],
])
# event-specific content: P and V are more globally alike than Q and F
_EXTRA_GAIN = np.array([0.15, 0.4, 0.15, 0.35])


def _mixture_table(rng, n_modes: int) -> tuple[np.ndarray, np.ndarray]:
    """Corpus-wide mixture centers and weights per (label, channel, waveform).

    Fixing the mixture shape across events keeps the sorted participation
    profiles of one waveform alike from event to event, as in field data.
    """
    shape = (2, 4, 8)
    centers = rng.normal(0.0, 1.0, size=shape + (n_modes,))
    weights = rng.dirichlet(np.full(n_modes, 2.0), size=shape)
    return centers, weights


def _mixture(rng, n, centers, weights, spread=0.3):
    """Per-PMU participation drawn from a Gaussian mixture."""
    mode = rng.choice(len(centers), size=n, p=weights)
    return centers[mode] + spread * rng.normal(size=n)


def _colored_noise(rng, shape, rho=0.8):
    """AR(1) noise with unit marginal variance along the last axis."""
    white = rng.normal(size=shape)
    out = np.empty(shape)
    out[..., 0] = white[..., 0]
    c = np.sqrt(1 - rho ** 2)
    for i in range(1, shape[-1]):
        out[..., i] = rho * out[..., i - 1] + c * white[..., i]
    return out


def _toy_event(rng, cfg: ToyConfig, label: Label, index: int, table) -> EventRecord:
    n, T, fs = cfg.n_pmus, cfg.n_samples, cfg.sample_rate_hz
    jitter = int(rng.integers(-cfg.start_jitter, cfg.start_jitter + 1)) if cfg.start_jitter else 0
    t0 = cfg.event_start + jitter
    if label is Label.VOLTAGE:
        gains = _VOLT_GAIN
        cause = VOLTAGE_CAUSES[int(rng.integers(len(VOLTAGE_CAUSES)))]
    else:
        gains = _FREQ_GAIN
        cause = FREQUENCY_CAUSES[int(rng.integers(len(FREQUENCY_CAUSES)))]
    shared = shared_waveforms(T, t0, fs)
    li = 0 if label is Label.VOLTAGE else 1

    signal = np.empty((4, n, T))
    for c in range(4):
        centers, weights = table[0][li, c], table[1][li, c]
        part = np.stack([_mixture(rng, n, centers[j], weights[j]) for j in range(5)])
        if label is Label.FREQUENCY and c == 3:
            # system frequency is common to all buses: positive, tight spread
            part[3] = 1.0 + 0.05 * rng.normal(size=n)
        extra = _extra_waveforms(rng, T, t0, fs)
        extra_part = np.stack([_mixture(rng, n, centers[j], weights[j]) for j in range(5, 8)])
        signal[c] = (gains[c][:, None] * part).T @ shared + _EXTRA_GAIN[c] * extra_part.T @ extra
    noise = cfg.noise * _colored_noise(rng, (4, n, T)) if cfg.noise > 0 else 0.0

    base = np.empty((4, n, 1))
    base[0, :, 0] = rng.uniform(-200, 600, size=n)
    base[1, :, 0] = rng.uniform(-100, 100, size=n)
    base[2, :, 0] = rng.choice(_BASE_KV, size=n)
    base[3, :, 0] = _NOMINAL_HZ
    raw = base + _RAW_SCALE[:, None, None] * (signal + noise)

    prefix = "V" if label is Label.VOLTAGE else "F"
    return EventRecord(
        event_id=f"{prefix}{index:05d}",
        label=label,
        sub_cause=cause,
        tensor=Tensor3(raw),
        pmu_ids=[f"PMU{j:04d}" for j in range(n)],
        sample_rate_hz=fs,
        event_start_sample=t0,
    )


def toy_events(cfg: ToyConfig, seed: int) -> list[EventRecord]:
    """Deterministic list of raw-unit toy events (voltage first, then frequency)."""
    cfg.validate()
    *children, corpus = np.random.SeedSequence(seed).spawn(cfg.voltage + cfg.frequency + 1)
    table = _mixture_table(np.random.default_rng(corpus), cfg.n_modes)
    labels = [Label.VOLTAGE] * cfg.voltage + [Label.FREQUENCY] * cfg.frequency
    return [_toy_event(np.random.default_rng(ss), cfg, lab, i, table)
            for i, (ss, lab) in enumerate(zip(children, labels))]


def generate_toy_corpus(cfg: ToyConfig, seed: int, out_dir) -> CorpusManifest:
    """Write a toy corpus of raw-unit events plus ``manifest.tsv`` under out_dir."""
    return save_corpus(toy_events(cfg, seed), out_dir)
