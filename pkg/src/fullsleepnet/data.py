"""Record I/O, preprocessing, label resampling and a synthetic PSG generator.

A Record is one night of data: a single-channel signal, per-sample binary
arousal labels, and one stage code per 30-second epoch (0..4 = W, N1, N2, N3,
REM; 255 = unscored). Records live on disk in the FSN1 container described at
the bottom of this module.

The synthetic generator substitutes for clinical datasets: stages follow a
Markov chain, each stage gets a characteristic band-limited oscillation, and
arousal events are high-frequency bursts inserted only where the scoring rules
allow them (at least 3 s long, preceded by at least 10 s of arousal-free
sleep). Wake epochs also receive unlabeled high-frequency bursts, so telling
arousals apart genuinely requires sleep/wake context rather than just local
spectral content.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field, replace

import numpy as np

STAGE_NAMES = ("W", "N1", "N2", "N3", "REM")
UNSCORED = 255
EPOCH_SECONDS = 30

RECORD_MAGIC = b"FSN1"
RECORD_VERSION = 1

_STAGE_CODE_MAP = {"0": "W", "1": "N1", "2": "N2", "3": "N3", "4": "REM", "255": "unscored"}


class FormatError(Exception):
    """Raised for malformed record files."""


def samples_per_epoch(fs: float) -> float:
    return EPOCH_SECONDS * fs


def epochs_for(num_samples: int, fs: float) -> int:
    spe = samples_per_epoch(fs)
    if spe == int(spe):
        spe_i = int(spe)
        return -(-num_samples // spe_i)
    return math.ceil(num_samples / spe)


@dataclass(eq=False)
class Record:
    sampling_rate_hz: float
    signal: np.ndarray          # float, length n
    arousal: np.ndarray         # uint8 in {0, 1}, length n
    stages: np.ndarray          # uint8 codes, one per 30 s epoch
    id: str = "record"

    def __post_init__(self):
        self.signal = np.asarray(self.signal)
        self.arousal = np.asarray(self.arousal, dtype=np.uint8)
        self.stages = np.asarray(self.stages, dtype=np.uint8)
        n = self.signal.shape[0]
        if n < 1:
            raise ValueError(f"record {self.id}: empty signal")
        if self.arousal.shape[0] != n:
            raise ValueError(f"record {self.id}: arousal labels ({self.arousal.shape[0]}) != samples ({n})")
        if not np.all((self.arousal == 0) | (self.arousal == 1)):
            raise ValueError(f"record {self.id}: arousal labels must be binary")
        expected_epochs = epochs_for(n, self.sampling_rate_hz)
        if self.stages.shape[0] != expected_epochs:
            raise ValueError(
                f"record {self.id}: {self.stages.shape[0]} stage labels, expected "
                f"ceil({n}/{samples_per_epoch(self.sampling_rate_hz):g}) = {expected_epochs}"
            )
        bad = (self.stages > 4) & (self.stages != UNSCORED)
        if np.any(bad):
            raise ValueError(f"record {self.id}: invalid stage codes {sorted(set(self.stages[bad].tolist()))}")

    @property
    def num_samples(self) -> int:
        return self.signal.shape[0]


def write_record(record: Record, path) -> None:
    header = json.dumps({
        "format_version": RECORD_VERSION,
        "id": record.id,
        "sampling_rate_hz": record.sampling_rate_hz,
        "num_samples": record.num_samples,
        "epoch_seconds": EPOCH_SECONDS,
        "num_epochs": int(record.stages.shape[0]),
        "stage_code_map": _STAGE_CODE_MAP,
    }).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(RECORD_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(record.signal.astype("<f4").tobytes())
        fh.write(record.arousal.astype(np.uint8).tobytes())
        fh.write(record.stages.astype(np.uint8).tobytes())


def read_record(path) -> Record:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != RECORD_MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}, not a record file")
        raw_len = fh.read(4)
        if len(raw_len) != 4:
            raise FormatError(f"{path}: truncated header length")
        (header_len,) = struct.unpack("<I", raw_len)
        raw_header = fh.read(header_len)
        if len(raw_header) != header_len:
            raise FormatError(f"{path}: truncated header")
        try:
            header = json.loads(raw_header.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"{path}: unreadable header: {exc}") from exc
        if header.get("format_version") != RECORD_VERSION:
            raise FormatError(f"{path}: unsupported format version {header.get('format_version')!r}")
        n = int(header["num_samples"])
        num_epochs = int(header["num_epochs"])
        payload = fh.read()
    expected = 4 * n + n + num_epochs
    if len(payload) != expected:
        raise FormatError(f"{path}: payload is {len(payload)} bytes, expected {expected}")
    signal = np.frombuffer(payload[:4 * n], dtype="<f4").copy()
    arousal = np.frombuffer(payload[4 * n:5 * n], dtype=np.uint8).copy()
    stages = np.frombuffer(payload[5 * n:], dtype=np.uint8).copy()
    try:
        return Record(
            sampling_rate_hz=float(header["sampling_rate_hz"]),
            signal=signal,
            arousal=arousal,
            stages=stages,
            id=str(header["id"]),
        )
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc


# preprocessing --------------------------------------------------------------

def downsample_record_by2(record: Record) -> Record:
    """Halve the sampling rate of a whole record, labels included.

    Signal samples are pair-averaged; arousal labels take the pair maximum so
    no event disappears; trailing stage epochs that no longer cover any sample
    are dropped.
    """
    sig = downsample_signal_by2(record.signal)
    m = record.arousal.shape[0] // 2
    arousal = np.maximum(record.arousal[0:2 * m:2], record.arousal[1:2 * m:2])
    fs = record.sampling_rate_hz / 2.0
    n_epochs = epochs_for(sig.shape[0], fs)
    return Record(
        sampling_rate_hz=fs,
        signal=sig.astype(record.signal.dtype),
        arousal=arousal,
        stages=record.stages[:n_epochs].copy(),
        id=record.id,
    )


def standardize(signal: np.ndarray) -> np.ndarray:
    """Subtract the mean and divide by the population standard deviation."""
    x = np.asarray(signal, dtype=np.float64)
    std = x.std()
    if std <= 1e-12:
        raise ValueError("degenerate record: near-constant signal")
    return (x - x.mean()) / std


def downsample_signal_by2(signal: np.ndarray) -> np.ndarray:
    """Average adjacent sample pairs; an odd trailing sample is dropped."""
    x = np.asarray(signal, dtype=np.float64)
    m = x.shape[0] // 2
    return (x[0:2 * m:2] + x[1:2 * m:2]) / 2.0


def next_pow2(n: int) -> int:
    return 1 if n <= 1 else 1 << (n - 1).bit_length()


def pad_signal_pow2(signal: np.ndarray, min_len: int | None = None) -> tuple[np.ndarray, int]:
    """Zero-pad at the end to the next power of two (at least min_len)."""
    x = np.asarray(signal)
    n = x.shape[0]
    if n < 1:
        raise ValueError("cannot pad an empty signal")
    target = max(next_pow2(n), next_pow2(min_len) if min_len else 1)
    padded = np.zeros(target, dtype=x.dtype)
    padded[:n] = x
    return padded, n


# label resampling ------------------------------------------------------------

def downsample_arousal_labels(arousal: np.ndarray, factor: int, rule: str = "majority") -> np.ndarray:
    """Reduce per-sample binary labels to one label per window of `factor` samples.

    majority: 1 iff strictly more than half of the window is labeled;
    any: 1 iff the window contains any labeled sample.
    """
    a = np.asarray(arousal)
    if a.shape[0] % factor != 0:
        raise ValueError(f"label length {a.shape[0]} is not divisible by factor {factor}")
    sums = a.reshape(-1, factor).sum(axis=1)
    if rule == "majority":
        out = sums * 2 > factor
    elif rule == "any":
        out = sums > 0
    else:
        raise ValueError(f"unknown downsampling rule {rule!r}")
    return out.astype(np.uint8)


def upsample_stage_labels(stages: np.ndarray, fs: float, factor: int, length: int) -> np.ndarray:
    """One-hot stage rows at mask resolution, [length // factor, 5].

    Each output step covers `factor` input samples and takes the stage of the
    epoch containing its center sample. Steps past the last scored epoch and
    steps whose epoch is unscored get an all-zero row.
    """
    stages = np.asarray(stages)
    steps = length // factor
    out = np.zeros((steps, 5), dtype=np.float64)
    if steps == 0 or stages.shape[0] == 0:
        return out
    centers = np.arange(steps) * factor + factor // 2
    epoch_idx = (centers / samples_per_epoch(fs)).astype(np.int64)
    in_range = epoch_idx < stages.shape[0]
    codes = np.full(steps, UNSCORED, dtype=np.int64)
    codes[in_range] = stages[epoch_idx[in_range]]
    scored = codes < 5
    out[np.nonzero(scored)[0], codes[scored]] = 1.0
    return out


# dataset splitting ------------------------------------------------------------

def split_dataset(record_ids, seed: int) -> tuple[list, list, list]:
    """Shuffle and split ids 0.5 / 0.2 / 0.3 (train / validation / test).

    Sizes are round(0.5 n) and round(0.2 n) with the remainder as test; if
    rounding would leave a split empty, the largest split donates one record,
    so all three are nonempty for n >= 3.
    """
    ids = list(record_ids)
    n = len(ids)
    if n < 3:
        raise ValueError(f"need at least 3 records to split, got {n}")
    perm = np.random.default_rng(seed).permutation(n)
    shuffled = [ids[i] for i in perm]
    n_train = round(0.5 * n)
    n_val = round(0.2 * n)
    n_test = n - n_train - n_val
    while min(n_train, n_val, n_test) < 1:
        sizes = {"train": n_train, "val": n_val, "test": n_test}
        donor = max(sizes, key=sizes.get)
        taker = min(sizes, key=sizes.get)
        sizes[donor] -= 1
        sizes[taker] += 1
        n_train, n_val, n_test = sizes["train"], sizes["val"], sizes["test"]
    return (
        shuffled[:n_train],
        shuffled[n_train:n_train + n_val],
        shuffled[n_train + n_val:],
    )


# synthetic generator -----------------------------------------------------------

# per-stage oscillation: (low Hz, high Hz, amplitude)
DEFAULT_STAGE_BANDS = (
    (8.0, 12.0, 1.0),    # W: alpha
    (4.0, 7.0, 1.0),     # N1: theta
    (2.0, 4.0, 0.7),     # N2: low background, spindle bursts added separately
    (0.5, 2.0, 3.0),     # N3: high-amplitude slow waves
    (4.0, 8.0, 0.45),    # REM: low-amplitude mixed theta
)

DEFAULT_TRANSITION = (
    (0.30, 0.55, 0.15, 0.00, 0.00),
    (0.04, 0.25, 0.61, 0.05, 0.05),
    (0.02, 0.04, 0.64, 0.18, 0.12),
    (0.01, 0.00, 0.29, 0.65, 0.05),
    (0.04, 0.06, 0.15, 0.00, 0.75),
)


@dataclass
class SynthConfig:
    fs: float = 128.0
    num_epochs: int = 20
    length_samples: int | None = None          # truncate to this length when set
    arousal_rate: float = 0.05                 # target fraction of samples inside events
    arousal_duration_s: tuple[float, float] = (3.0, 15.0)
    min_preceding_sleep_s: float = 10.0
    arousal_band_hz: tuple[float, float] = (16.0, 30.0)
    arousal_amplitude: float = 2.5
    noise_level: float = 0.25
    wake_bursts_per_epoch: int = 2             # unlabeled distractor bursts in W
    stage_bands: tuple = DEFAULT_STAGE_BANDS
    transition: tuple = DEFAULT_TRANSITION
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.arousal_duration_s
        if lo < 3.0 or hi < lo:
            raise ValueError(f"arousal durations must satisfy 3 <= lo <= hi, got ({lo}, {hi})")
        if not (0.0 <= self.arousal_rate < 0.5):
            raise ValueError(f"arousal_rate {self.arousal_rate} out of range [0, 0.5)")
        if self.min_preceding_sleep_s < 0:
            raise ValueError("min_preceding_sleep_s must be nonnegative")
        spe = samples_per_epoch(self.fs)
        if spe != int(spe) or int(spe) % 256 != 0:
            raise ValueError(f"fs {self.fs} gives {spe} samples per epoch, not a multiple of 256")
        rows = np.asarray(self.transition, dtype=np.float64)
        if rows.shape != (5, 5) or not np.allclose(rows.sum(axis=1), 1.0, atol=1e-9):
            raise ValueError("transition matrix must be 5x5 with rows summing to 1")
        if self.length_samples is not None and self.length_samples < 1:
            raise ValueError("length_samples must be positive")


def _burst(rng, n_samples: int, fs: float, f_lo: float, f_hi: float, amplitude: float) -> np.ndarray:
    """Sine burst with quarter-second cosine ramps at both ends."""
    freq = rng.uniform(f_lo, f_hi)
    phase = rng.uniform(0.0, 2.0 * np.pi)
    t = np.arange(n_samples) / fs
    wave = amplitude * np.sin(2.0 * np.pi * freq * t + phase)
    ramp = min(int(round(0.25 * fs)), n_samples // 2)
    if ramp > 0:
        env = np.ones(n_samples)
        up = 0.5 - 0.5 * np.cos(np.pi * np.arange(ramp) / ramp)
        env[:ramp] = up
        env[n_samples - ramp:] = up[::-1]
        wave *= env
    return wave


def generate_synthetic_record(cfg: SynthConfig, rng: np.random.Generator | None = None,
                              record_id: str | None = None) -> Record:
    """Draw one record: Markov stages, per-stage oscillations, scored arousals."""
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    fs = cfg.fs
    spe = int(samples_per_epoch(fs))
    if cfg.length_samples is not None:
        n = cfg.length_samples
        num_epochs = -(-n // spe)
    else:
        num_epochs = cfg.num_epochs
        n = num_epochs * spe

    # hypnogram: always start awake, then follow the transition matrix
    transition = np.asarray(cfg.transition, dtype=np.float64)
    stages = np.empty(num_epochs, dtype=np.uint8)
    state = 0
    for e in range(num_epochs):
        stages[e] = state
        state = int(rng.choice(5, p=transition[state]))

    signal = np.zeros(num_epochs * spe, dtype=np.float64)
    for e in range(num_epochs):
        lo, hi, amp = cfg.stage_bands[stages[e]]
        seg = slice(e * spe, (e + 1) * spe)
        signal[seg] = _burst(rng, spe, fs, lo, hi, amp)
        if stages[e] == 2:       # N2 spindles: brief 12-14 Hz packets
            for _ in range(int(rng.integers(2, 5))):
                dur = int(round(rng.uniform(0.5, 1.5) * fs))
                onset = int(rng.integers(0, spe - dur))
                signal[e * spe + onset:e * spe + onset + dur] += _burst(rng, dur, fs, 12.0, 14.0, 1.8)
        elif stages[e] == 0 and cfg.wake_bursts_per_epoch > 0:
            # unlabeled wake beta bursts in the arousal band: context decides
            for _ in range(int(rng.integers(1, cfg.wake_bursts_per_epoch + 1))):
                dur = int(round(rng.uniform(1.0, 3.0) * fs))
                onset = int(rng.integers(0, spe - dur))
                signal[e * spe + onset:e * spe + onset + dur] += _burst(
                    rng, dur, fs, cfg.arousal_band_hz[0] + 2.0, cfg.arousal_band_hz[1] - 2.0,
                    cfg.arousal_amplitude * 0.75,
                )

    signal = signal[:n]
    stage_per_sample = np.repeat(stages, spe)[:n]
    sleep = stage_per_sample != 0

    arousal = np.zeros(n, dtype=np.uint8)
    target = int(round(cfg.arousal_rate * n))
    min_dur = int(round(cfg.arousal_duration_s[0] * fs))
    pre = int(round(cfg.min_preceding_sleep_s * fs))
    sleep_cum = np.concatenate([[0], np.cumsum(sleep)])
    placed = 0
    failures = 0
    while placed < target and failures < 32:
        remaining = target - placed
        if remaining < min_dur:
            break
        dur = int(round(rng.uniform(*cfg.arousal_duration_s) * fs))
        dur = min(dur, remaining)
        onsets = np.arange(pre, n - dur + 1)
        if onsets.size == 0:
            break
        arousal_cum = np.concatenate([[0], np.cumsum(arousal)])
        window = pre + dur
        clear_sleep = sleep_cum[onsets + dur] - sleep_cum[onsets - pre] == window
        clear_events = arousal_cum[onsets + dur] - arousal_cum[onsets - pre] == 0
        candidates = onsets[clear_sleep & clear_events]
        if candidates.size == 0:
            failures += 1
            continue
        onset = int(rng.choice(candidates))
        arousal[onset:onset + dur] = 1
        signal[onset:onset + dur] += _burst(rng, dur, fs, *cfg.arousal_band_hz, cfg.arousal_amplitude)
        placed += dur
        failures = 0

    signal += rng.normal(0.0, cfg.noise_level, size=n)
    return Record(
        sampling_rate_hz=fs,
        signal=signal.astype(np.float32),
        arousal=arousal,
        stages=stages,
        id=record_id if record_id is not None else f"synth-{cfg.seed:06d}",
    )


# preparation for training/inference ---------------------------------------------

@dataclass
class PreparedExample:
    signal: np.ndarray          # [L, 1] standardized, zero-padded
    valid_len: int              # original sample count
    arousal_target: np.ndarray  # [L / 2^B]
    stage_target: np.ndarray    # [L / 2^B, 5] one-hot or all-zero rows
    valid_steps: int            # floor(valid_len / 2^B)
    record_id: str = "record"
    sampling_rate_hz: float = 128.0


def prepare_example(
    record: Record,
    num_blocks: int,
    min_len: int | None = None,
    dtype=np.float64,
    arousal_rule: str = "majority",
    downsample_by2: bool = False,
) -> PreparedExample:
    """Standardize, pad, and resample labels to the mask resolution."""
    factor = 2 ** num_blocks
    sig = np.asarray(record.signal, dtype=np.float64)
    arousal = record.arousal
    fs = record.sampling_rate_hz
    if downsample_by2:
        sig = downsample_signal_by2(sig)
        m = arousal.shape[0] // 2
        arousal = np.maximum(arousal[0:2 * m:2], arousal[1:2 * m:2])
        fs = fs / 2.0
    sig = standardize(sig)
    padded, valid_len = pad_signal_pow2(sig, min_len=max(min_len or 0, factor))
    L = padded.shape[0]

    arousal_padded = np.zeros(L, dtype=np.uint8)
    arousal_padded[:valid_len] = arousal
    arousal_target = downsample_arousal_labels(arousal_padded, factor, rule=arousal_rule).astype(dtype)
    stage_target = upsample_stage_labels(record.stages, fs, factor, L).astype(dtype)
    valid_steps = valid_len // factor
    stage_target[valid_steps:] = 0.0
    return PreparedExample(
        signal=padded.astype(dtype).reshape(-1, 1),
        valid_len=valid_len,
        arousal_target=arousal_target,
        stage_target=stage_target,
        valid_steps=valid_steps,
        record_id=record.id,
        sampling_rate_hz=fs,
    )
