"""Log-mel feature extraction for 166 ms audio chunks, per-channel RMS
gain calibration, and the frequency-wise normalization statistics.

A chunk is 8000 samples at 48 kHz (5 video frames at 30 fps, centered on
the frame of interest). Each channel becomes a 64x64 image: Hann-512 STFT
at hop 125 (64 frames, centered via reflect padding), magnitudes pooled
onto 64 mel bins, then log. Normalization subtracts a per-mel-bin mean
and divides by one global standard deviation, both estimated over the
training set.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from scipy.signal import get_window

SAMPLE_RATE = 48000
CHUNK_SAMPLES = 8000
STFT_SIZE = 512
STFT_HOP = 125
N_FRAMES = 64
N_MELS = 64
MEL_FMIN_HZ = 50.0
MEL_FMAX_HZ = 8000.0
LOG_EPS = 1e-10

_FEATURE_MAGIC = b"ALFC"


class FeatureError(ValueError):
    """Raised on malformed feature inputs or degenerate statistics."""


class CalibrationError(FeatureError):
    """Raised when a channel cannot be gain-calibrated (zero RMS)."""


def calibrate_gains(signals: np.ndarray, target_rms: float) -> np.ndarray:
    """Per-channel gains equalizing RMS to target_rms over the given segment."""
    signals = np.atleast_2d(np.asarray(signals, dtype=np.float64))
    rms = np.sqrt(np.mean(signals ** 2, axis=1))
    if np.any(rms == 0.0):
        dead = np.flatnonzero(rms == 0.0).tolist()
        raise CalibrationError(f"zero-RMS channel(s) {dead}: cannot calibrate")
    return target_rms / rms


def hz_to_mel(f_hz):
    return 2595.0 * np.log10(1.0 + np.asarray(f_hz, dtype=np.float64) / 700.0)


def mel_to_hz(mel):
    return 700.0 * (10.0 ** (np.asarray(mel, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int = N_MELS, fft_size: int = STFT_SIZE,
                   sample_rate: int = SAMPLE_RATE,
                   fmin_hz: float = MEL_FMIN_HZ,
                   fmax_hz: float = MEL_FMAX_HZ) -> np.ndarray:
    """Area-normalized triangular filters, shape (n_mels, fft_size // 2 + 1).

    Each triangle is normalized by its area on the sampled FFT grid, not
    the continuous one: at this resolution the lowest mel bands span only
    a bin or two, and continuous-area normalization would hand them wildly
    unequal peak gains. Bands too narrow to catch any FFT bin stay zero.
    """
    n_bins = fft_size // 2 + 1
    freqs = np.arange(n_bins) * sample_rate / fft_size
    bin_width = sample_rate / fft_size
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin_hz), hz_to_mel(fmax_hz), n_mels + 2))
    fb = np.zeros((n_mels, n_bins))
    for m in range(n_mels):
        lo, center, hi = edges[m], edges[m + 1], edges[m + 2]
        rising = (freqs - lo) / (center - lo)
        falling = (hi - freqs) / (hi - center)
        tri = np.maximum(0.0, np.minimum(rising, falling))
        area = tri.sum() * bin_width
        if area > 0:
            fb[m] = tri / area
    return fb


def mel_center_freqs_hz(n_mels: int = N_MELS, fmin_hz: float = MEL_FMIN_HZ,
                        fmax_hz: float = MEL_FMAX_HZ) -> np.ndarray:
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin_hz), hz_to_mel(fmax_hz), n_mels + 2))
    return edges[1:-1]


_window = get_window("hann", STFT_SIZE, fftbins=True)
_filterbank = mel_filterbank()


def log_mel(chunk: np.ndarray) -> np.ndarray:
    """64x64 log-mel image of one or more 8000-sample channels.

    Accepts (8000,) or (n_channels, 8000); returns (64, 64) or
    (n_channels, 64, 64) with mel bins on the first image axis and the 64
    time frames on the second. Frame k is centered at sample 125*k.
    """
    chunk = np.asarray(chunk, dtype=np.float64)
    squeeze = chunk.ndim == 1
    chunk = np.atleast_2d(chunk)
    if chunk.shape[-1] != CHUNK_SAMPLES:
        raise FeatureError(f"chunk must have {CHUNK_SAMPLES} samples, got {chunk.shape[-1]}")
    half = STFT_SIZE // 2
    padded = np.pad(chunk, ((0, 0), (half, half)), mode="reflect")
    starts = STFT_HOP * np.arange(N_FRAMES)
    frames = padded[:, starts[:, None] + np.arange(STFT_SIZE)[None, :]] * _window
    mag = np.abs(np.fft.rfft(frames, axis=-1))  # (C, 64, bins)
    mel = np.einsum("mf,ctf->cmt", _filterbank, mag)
    out = np.log(mel + LOG_EPS)
    return out[0] if squeeze else out


@dataclass(frozen=True, eq=False)
class NormalizationStats:
    """Per-mel-bin means plus one global standard deviation.

    per_bin_mean has shape (64,) when statistics are pooled over channels
    (the default) or (n_channels, 64) for the per-channel variant.
    """

    per_bin_mean: np.ndarray
    global_std: float

    def __post_init__(self):
        if self.global_std <= 0 or not np.isfinite(self.global_std):
            raise FeatureError(f"global_std must be positive, got {self.global_std}")
        object.__setattr__(self, "per_bin_mean",
                           np.asarray(self.per_bin_mean, dtype=np.float64))


class NormAccumulator:
    """Streaming/shardable accumulator for NormalizationStats.

    Shards may accumulate independently and be merged; the merge is exact,
    so sharded and single-pass statistics agree to rounding.
    """

    def __init__(self, per_channel: bool = False):
        self.per_channel = per_channel
        self._bin_sum = None
        self._bin_count = None
        self._total = 0.0
        self._total_sq = 0.0
        self._count = 0

    def update(self, stack: np.ndarray) -> None:
        stack = np.asarray(stack, dtype=np.float64)
        if stack.ndim == 2:
            stack = stack[None]
        if stack.ndim == 3:
            stack = stack[None]  # (batch, C, mel, time)
        if stack.ndim != 4:
            raise FeatureError(f"expected (..., C, mel, time) stack, got shape {stack.shape}")
        if self.per_channel:
            bin_sum = stack.sum(axis=(0, 3))   # (C, mel)
            bin_count = stack.shape[0] * stack.shape[3]
        else:
            bin_sum = stack.sum(axis=(0, 1, 3))  # (mel,)
            bin_count = stack.shape[0] * stack.shape[1] * stack.shape[3]
        if self._bin_sum is None:
            self._bin_sum = bin_sum
            self._bin_count = bin_count
        else:
            if bin_sum.shape != self._bin_sum.shape:
                raise FeatureError("inconsistent channel/mel shape across updates")
            self._bin_sum = self._bin_sum + bin_sum
            self._bin_count += bin_count
        self._total += float(stack.sum())
        self._total_sq += float((stack ** 2).sum())
        self._count += stack.size

    def merge(self, other: "NormAccumulator") -> "NormAccumulator":
        if other._count == 0:
            return self
        if self._count == 0:
            self.__dict__.update(other.__dict__)
            return self
        if self.per_channel != other.per_channel:
            raise FeatureError("cannot merge pooled and per-channel accumulators")
        self._bin_sum = self._bin_sum + other._bin_sum
        self._bin_count += other._bin_count
        self._total += other._total
        self._total_sq += other._total_sq
        self._count += other._count
        return self

    def finalize(self) -> NormalizationStats:
        if self._count == 0:
            raise FeatureError("no features accumulated")
        mean = self._total / self._count
        var = self._total_sq / self._count - mean ** 2
        std = float(np.sqrt(max(var, 0.0)))
        if std == 0.0:
            raise FeatureError("degenerate statistics: global std is zero")
        return NormalizationStats(self._bin_sum / self._bin_count, std)


def compute_norm_stats(stacks, per_channel: bool = False) -> NormalizationStats:
    """Statistics over an iterable (or array) of feature stacks."""
    acc = NormAccumulator(per_channel=per_channel)
    if isinstance(stacks, np.ndarray):
        acc.update(stacks)
    else:
        for stack in stacks:
            acc.update(stack)
    return acc.finalize()


def normalize(stack: np.ndarray, stats: NormalizationStats) -> np.ndarray:
    """(x - per_bin_mean) / global_std, broadcasting mean over channels/time."""
    stack = np.asarray(stack)
    mean = stats.per_bin_mean
    if mean.ndim == 1:
        mean = mean[:, None]       # (mel, 1) broadcasts over channels and time
    else:
        mean = mean[..., None]     # (C, mel, 1)
    return (stack - mean) / stats.global_std


def denormalize(stack: np.ndarray, stats: NormalizationStats) -> np.ndarray:
    stack = np.asarray(stack)
    mean = stats.per_bin_mean
    mean = mean[:, None] if mean.ndim == 1 else mean[..., None]
    return stack * stats.global_std + mean


# ---------------------------------------------------------------------------
# Stats file: plain text, 64 per-bin means (one per line) then the global
# std. The per-channel variant writes n_channels * 64 means with a header
# comment recording the channel count.
# ---------------------------------------------------------------------------

def save_norm_stats(path, stats: NormalizationStats, config_hash: str = "") -> None:
    mean = stats.per_bin_mean
    with open(path, "w") as f:
        if config_hash:
            f.write(f"# config={config_hash}\n")
        if mean.ndim == 2:
            f.write(f"# channels={mean.shape[0]}\n")
        for v in mean.ravel():
            f.write(f"{float(v)!r}\n")
        f.write(f"{float(stats.global_std)!r}\n")


def load_norm_stats(path) -> NormalizationStats:
    values, channels = [], None
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                if line.startswith("# channels="):
                    channels = int(line.split("=", 1)[1])
                continue
            values.append(float(line))
    if len(values) < 2:
        raise FeatureError(f"{path}: stats file must hold means plus a std")
    mean = np.array(values[:-1])
    if channels is not None:
        mean = mean.reshape(channels, -1)
    return NormalizationStats(mean, values[-1])


def stats_config_hash(path) -> str:
    with open(path) as f:
        for line in f:
            if line.startswith("# config="):
                return line.strip().split("=", 1)[1]
    return ""


# ---------------------------------------------------------------------------
# Feature cache: little-endian binary tensor with a shape header.
# Layout: magic, u32 version, u32 dtype code (0 = float32, 1 = float16),
# u32 ndim, u64 dims, 64-byte ascii config hash, then raw data.
# ---------------------------------------------------------------------------

_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f2")}


def save_feature_cache(path, array: np.ndarray, config_hash: str = "") -> None:
    array = np.asarray(array)
    code = {np.dtype(np.float32): 0, np.dtype(np.float16): 1}.get(array.dtype)
    if code is None:
        raise FeatureError(f"feature cache stores float32/float16, got {array.dtype}")
    with open(path, "wb") as f:
        f.write(_FEATURE_MAGIC)
        f.write(struct.pack("<3I", 1, code, array.ndim))
        f.write(struct.pack(f"<{array.ndim}Q", *array.shape))
        f.write(config_hash.ljust(64)[:64].encode("ascii"))
        f.write(np.ascontiguousarray(array).tobytes())


class FeatureCacheWriter:
    """Incremental writer for large caches: header first, rows memmapped."""

    def __init__(self, path, shape: tuple, dtype=np.float32, config_hash: str = ""):
        dtype = np.dtype(dtype)
        code = {np.dtype(np.float32): 0, np.dtype(np.float16): 1}.get(dtype)
        if code is None:
            raise FeatureError(f"feature cache stores float32/float16, got {dtype}")
        with open(path, "wb") as f:
            f.write(_FEATURE_MAGIC)
            f.write(struct.pack("<3I", 1, code, len(shape)))
            f.write(struct.pack(f"<{len(shape)}Q", *shape))
            f.write(config_hash.ljust(64)[:64].encode("ascii"))
            offset = f.tell()
            f.truncate(offset + int(np.prod(shape)) * dtype.itemsize)
        self.data = np.memmap(path, dtype=dtype, mode="r+", offset=offset, shape=shape)

    def write(self, index: int, rows: np.ndarray) -> None:
        self.data[index:index + len(rows)] = rows

    def close(self) -> None:
        self.data.flush()
        del self.data


def load_feature_cache(path, mmap: bool = True) -> tuple[np.ndarray, str]:
    """Returns (array, config_hash); the array is memory-mapped by default."""
    with open(path, "rb") as f:
        if f.read(4) != _FEATURE_MAGIC:
            raise FeatureError(f"{path}: not a feature cache file")
        version, code, ndim = struct.unpack("<3I", f.read(12))
        if version != 1:
            raise FeatureError(f"{path}: unsupported cache version {version}")
        shape = struct.unpack(f"<{ndim}Q", f.read(8 * ndim))
        config_hash = f.read(64).decode("ascii").strip()
        offset = f.tell()
    dtype = _DTYPE_CODES[code]
    if mmap:
        data = np.memmap(path, dtype=dtype, mode="r", offset=offset, shape=shape)
    else:
        data = np.fromfile(path, dtype=dtype, offset=offset).reshape(shape)
    return data, config_hash
