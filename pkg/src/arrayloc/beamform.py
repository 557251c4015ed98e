"""Superdirective beamformer design with a white-noise-gain constraint,
and STFT-domain application of the designed weights to array audio.

Weights solve, per frequency bin and look direction,

    w = (Gamma + mu I)^-1 d / (d^H (Gamma + mu I)^-1 d)

with Gamma the diffuse-field coherence of the array and mu >= 0 the
smallest diagonal loading for which the white noise gain
|w^H d|^2 / (w^H w) clears the configured floor. mu -> inf recovers the
delay-and-sum beamformer, whose WNG equals the mic count.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from scipy.signal import get_window

from .geometry import ArrayGeometry, LookDirectionSet, steering_delays

DEFAULT_FFT_SIZE = 512
DEFAULT_SAMPLE_RATE = 48000
DEFAULT_WNG_MIN_DB = -10.0

MU_LO = 1e-9
MU_HI = 1e3
BISECTION_STEPS = 60


class BeamformError(ValueError):
    """Raised on invalid beamformer inputs."""


@dataclass(frozen=True, eq=False)
class BeamformerDesign:
    """Fixed filter-and-sum weights, complex, shape (n_bins, n_dirs, n_mics)."""

    weights: np.ndarray
    fft_size: int
    sample_rate: int
    look_dirs: LookDirectionSet | None
    wng_min_db: float
    flagged: np.ndarray  # (n_bins, n_dirs) bool: WNG floor unreachable, DS fallback

    @property
    def n_bins(self) -> int:
        return self.weights.shape[0]

    @property
    def n_dirs(self) -> int:
        return self.weights.shape[1]

    @property
    def n_mics(self) -> int:
        return self.weights.shape[2]

    @property
    def bin_freqs_hz(self) -> np.ndarray:
        return np.arange(self.n_bins) * self.sample_rate / self.fft_size


def steering_vectors(geom: ArrayGeometry, freqs_hz: np.ndarray,
                     azimuths_deg, elevation_deg: float = 0.0) -> np.ndarray:
    """Plane-wave phasors exp(-2j pi f tau), shape (n_bins, n_dirs, n_mics)."""
    tau = np.stack([steering_delays(geom, az, elevation_deg) for az in np.atleast_1d(azimuths_deg)])
    return np.exp(-2j * np.pi * np.asarray(freqs_hz)[:, None, None] * tau[None, :, :])


def diffuse_coherence(geom: ArrayGeometry, freqs_hz: np.ndarray) -> np.ndarray:
    """Spherically isotropic noise coherence sinc(2 f d_ij / c), (n_bins, M, M).

    Real, symmetric, unit diagonal; positive semidefinite up to rounding,
    which the diagonal loading in the design absorbs.
    """
    pos = geom.mic_positions
    dist = np.linalg.norm(pos[:, None, :] - pos[None, :, :], axis=-1)
    # np.sinc(x) = sin(pi x)/(pi x), so the argument carries 2 f d / c.
    return np.sinc(2.0 * np.asarray(freqs_hz)[:, None, None] * dist[None] / geom.speed_of_sound)


def white_noise_gain(weights: np.ndarray, steer: np.ndarray) -> np.ndarray:
    """WNG = |w^H d|^2 / (w^H w), broadcast over leading axes."""
    num = np.abs(np.einsum("...m,...m->...", weights.conj(), steer)) ** 2
    den = np.real(np.einsum("...m,...m->...", weights.conj(), weights))
    return num / den


def _mvdr_weights(coherence: np.ndarray, steer: np.ndarray, mu: np.ndarray) -> np.ndarray:
    """Distortionless diffuse-noise weights at diagonal loading mu (per bin/dir)."""
    n_mics = steer.shape[-1]
    loaded = coherence[:, None, :, :] + mu[..., None, None] * np.eye(n_mics)
    sol = np.linalg.solve(loaded, steer[..., None])[..., 0]
    denom = np.einsum("...m,...m->...", steer.conj(), sol)
    return sol / denom[..., None]


def design_sdb(geom: ArrayGeometry,
               dirs: LookDirectionSet,
               fft_size: int = DEFAULT_FFT_SIZE,
               sample_rate: int = DEFAULT_SAMPLE_RATE,
               wng_min_db: float = DEFAULT_WNG_MIN_DB) -> BeamformerDesign:
    """Design superdirective weights for every rFFT bin and look direction.

    The loading mu is found independently per (bin, direction) by bisection
    on log mu over [1e-9, 1e3]: the smallest loading whose WNG clears
    10^(wng_min_db/10). Where even the delay-and-sum limit cannot reach the
    floor (wng_min_db above 10 log10 n_mics), the direction/bin is flagged
    and the delay-and-sum weights are returned for it.
    """
    if fft_size <= 0 or fft_size & (fft_size - 1):
        raise BeamformError(f"fft_size must be a power of two, got {fft_size}")
    if not np.isfinite(wng_min_db):
        raise BeamformError("wng_min_db must be finite")
    n_bins = fft_size // 2 + 1
    freqs = np.arange(n_bins) * sample_rate / fft_size
    steer = steering_vectors(geom, freqs, dirs.azimuths_deg)
    coh = diffuse_coherence(geom, freqs)
    wng_floor = 10.0 ** (wng_min_db / 10.0)

    shape = steer.shape[:2]
    mu = np.full(shape, MU_LO)
    w = _mvdr_weights(coh, steer, mu)
    needs = white_noise_gain(w, steer) < wng_floor

    if needs.any():
        lo = np.full(shape, MU_LO)
        hi = np.full(shape, MU_HI)
        for _ in range(BISECTION_STEPS):
            mid = np.sqrt(lo * hi)
            ok = white_noise_gain(_mvdr_weights(coh, steer, mid), steer) >= wng_floor
            hi = np.where(needs & ok, mid, hi)
            lo = np.where(needs & ~ok, mid, lo)
        mu = np.where(needs, hi, MU_LO)
        w = _mvdr_weights(coh, steer, mu)

    wng = white_noise_gain(w, steer)
    flagged = wng < wng_floor * (1.0 - 1e-9)
    if flagged.any():
        # Constraint unreachable even at the mu -> inf (delay-and-sum) limit.
        ds = steer / steer.shape[-1]
        w = np.where(flagged[..., None], ds, w)

    return BeamformerDesign(
        weights=w, fft_size=fft_size, sample_rate=sample_rate,
        look_dirs=dirs, wng_min_db=wng_min_db, flagged=flagged,
    )


def beampattern(design: BeamformerDesign, geom: ArrayGeometry,
                grid_az_deg: np.ndarray, bin_index: int,
                direction_index: int) -> np.ndarray:
    """|w^H d(az)| of one designed beam over an azimuth grid."""
    f = design.bin_freqs_hz[bin_index]
    d = steering_vectors(geom, np.array([f]), grid_az_deg)[0]  # (G, M)
    return np.abs(d @ design.weights[bin_index, direction_index].conj())


def apply_beamformer(design: BeamformerDesign, audio: np.ndarray) -> np.ndarray:
    """Filter (n_mics, n_samples) audio into one signal per look direction.

    Hann-analysis STFT at 50% overlap, per-bin weight-and-sum across mics,
    rectangular-synthesis overlap-add (a perfect-reconstruction pair).
    Output shape (n_dirs, n_samples); linear in the input.
    """
    audio = np.asarray(audio)
    if audio.ndim != 2 or audio.shape[0] != design.n_mics:
        raise BeamformError(
            f"audio must be ({design.n_mics}, n_samples), got {audio.shape}")
    n = design.fft_size
    hop = n // 2
    n_samples = audio.shape[1]
    window = get_window("hann", n, fftbins=True)

    # Pad so every sample is covered by a full analysis frame on both sides.
    pad = n
    x = np.pad(audio, ((0, 0), (pad, pad + n)))
    n_frames = (x.shape[1] - n) // hop + 1
    idx = np.arange(n)[None, :] + hop * np.arange(n_frames)[:, None]
    out = np.zeros((design.n_dirs, x.shape[1]), dtype=np.float64)
    # Frame in batches to bound memory on long signals.
    batch = max(1, int(2e6) // n)
    for start in range(0, n_frames, batch):
        sl = idx[start:start + batch]
        frames = x[:, sl] * window  # (M, B, n)
        spec = np.fft.rfft(frames, axis=-1)  # (M, B, bins)
        steered = np.einsum("fdm,mbf->dbf", design.weights.conj(), spec)
        y = np.fft.irfft(steered, n=n, axis=-1)  # (D, B, n)
        for b in range(sl.shape[0]):
            out[:, sl[b, 0]:sl[b, 0] + n] += y[:, b]
    return out[:, pad:pad + n_samples]


# ---------------------------------------------------------------------------
# Weight file: 16-byte header of four little-endian uint32
# (fft_size, sample_rate, n_dirs, n_mics) followed by complex64 weights in
# bin-major order.
# ---------------------------------------------------------------------------

def save_weights(path, design: BeamformerDesign) -> None:
    header = struct.pack("<4I", design.fft_size, design.sample_rate,
                         design.n_dirs, design.n_mics)
    with open(path, "wb") as f:
        f.write(header)
        f.write(np.ascontiguousarray(design.weights, dtype="<c8").tobytes())


def load_weights(path, look_dirs: LookDirectionSet | None = None,
                 wng_min_db: float = DEFAULT_WNG_MIN_DB) -> BeamformerDesign:
    with open(path, "rb") as f:
        header = f.read(16)
        if len(header) != 16:
            raise BeamformError(f"{path}: truncated weight file header")
        fft_size, sample_rate, n_dirs, n_mics = struct.unpack("<4I", header)
        n_bins = fft_size // 2 + 1
        data = np.frombuffer(f.read(), dtype="<c8")
    if data.size != n_bins * n_dirs * n_mics:
        raise BeamformError(
            f"{path}: expected {n_bins * n_dirs * n_mics} weights, got {data.size}")
    if look_dirs is not None and len(look_dirs) != n_dirs:
        raise BeamformError(
            f"{path}: file has {n_dirs} directions, look_dirs has {len(look_dirs)}")
    weights = data.reshape(n_bins, n_dirs, n_mics).astype(np.complex128)
    return BeamformerDesign(
        weights=weights, fft_size=fft_size, sample_rate=sample_rate,
        look_dirs=look_dirs, wng_min_db=wng_min_db,
        flagged=np.zeros((n_bins, n_dirs), dtype=bool),
    )
