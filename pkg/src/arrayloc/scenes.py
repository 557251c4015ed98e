"""Synthetic free-field acoustic scenes standing in for the studio rig
captures: a seeded speech-like source moving along an azimuth trajectory,
spatialized to the 16 mics with windowed-sinc fractional delays, plus
per-mic noise floor. Also: pseudo-label CSV ingestion, dataset manifests
and balanced active/silent frame sampling.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass

import numpy as np
from scipy.io import wavfile
from scipy.signal import butter, sosfilt

from .geometry import (ArrayGeometry, CameraModel, N_VIEWS, azimuth_to_pixel,
                       direction_unit_vector, in_frame)

SAMPLE_RATE = 48000
FPS = 30
SAMPLES_PER_FRAME = SAMPLE_RATE // FPS  # 1600, exact
MAX_TRAJECTORY_AZ_DEG = 60.0

# Fractional-delay rendering: 32-tap Hann-windowed sinc applied on
# 50%-overlapping Hann blocks (delay held constant per block).
SINC_TAPS = 32
_SINC_CENTER = SINC_TAPS // 2 - 1  # group delay of the tap-0-aligned kernel
RENDER_BLOCK = 1600
RENDER_HOP = RENDER_BLOCK // 2


class SceneError(ValueError):
    """Raised on invalid scene specifications or datasets."""


class LabelFormatError(ValueError):
    """Raised when a pseudo-label file fails validation."""


@dataclass(frozen=True, eq=False)
class SceneSpec:
    """One synthetic capture: a single source on an azimuth trajectory.

    trajectory_knots are (time_s, azimuth_deg) pairs interpolated linearly;
    activity_segments are half-open [t0, t1) spans of speech. When
    source_distance_m is None the source is an ideal far-field plane wave;
    a finite distance renders a spherical wave with the implied per-mic
    gains and delays (referenced to the array origin). source_signal
    replaces the built-in speech-like excitation with a caller-provided
    mono signal of the scene's full length.
    """

    duration_s: float
    trajectory_knots: tuple = ((0.0, 0.0),)
    activity_segments: tuple = ()
    noise_floor_db: float = -30.0
    views: tuple = (CameraModel(),)
    rng_seed: int = 0
    source_distance_m: float | None = None
    source_signal: np.ndarray | None = None

    def __post_init__(self):
        if self.duration_s <= 0:
            raise SceneError("duration must be positive")
        knots = tuple((float(t), float(a)) for t, a in self.trajectory_knots)
        if not knots:
            raise SceneError("trajectory needs at least one knot")
        times = [t for t, _ in knots]
        if times != sorted(times):
            raise SceneError("trajectory knot times must be ascending")
        if any(abs(a) > MAX_TRAJECTORY_AZ_DEG for _, a in knots):
            raise SceneError(f"|azimuth| must be <= {MAX_TRAJECTORY_AZ_DEG} deg")
        segs = tuple((float(a), float(b)) for a, b in self.activity_segments)
        prev_end = 0.0
        for t0, t1 in segs:
            if t0 < prev_end or t1 <= t0 or t1 > self.duration_s + 1e-9:
                raise SceneError(f"activity segments must be disjoint, ordered and "
                                 f"within the scene; bad segment ({t0}, {t1})")
            prev_end = t1
        if self.source_distance_m is not None and self.source_distance_m <= 0:
            raise SceneError("source_distance_m must be positive")
        if self.source_signal is not None and len(self.source_signal) != self.n_samples:
            raise SceneError(f"source_signal must have {self.n_samples} samples")
        object.__setattr__(self, "trajectory_knots", knots)
        object.__setattr__(self, "activity_segments", segs)
        object.__setattr__(self, "views", tuple(self.views))

    @property
    def n_samples(self) -> int:
        return int(round(self.duration_s * SAMPLE_RATE))

    @property
    def n_frames(self) -> int:
        return int(self.duration_s * FPS)

    def azimuth_at(self, t) -> np.ndarray:
        times = np.array([k[0] for k in self.trajectory_knots])
        azs = np.array([k[1] for k in self.trajectory_knots])
        return np.interp(np.asarray(t, dtype=np.float64), times, azs)

    def active_at(self, t: float) -> bool:
        return any(t0 <= t < t1 for t0, t1 in self.activity_segments)


@dataclass(frozen=True)
class LabelRecord:
    """Per-frame, per-view activity and horizontal position label."""

    frame_index: int
    view_id: int
    active: bool
    x_px: float | None = None
    screened: bool = True


@dataclass(frozen=True)
class ManifestEntry:
    split: str                 # train | test
    role: str                  # speech | silent
    audio: str
    labels: str
    geometry: str = ""
    cameras: tuple = ()


@dataclass(frozen=True)
class DatasetManifest:
    entries: tuple = ()
    base_dir: str = "."

    def resolve(self, path: str) -> str:
        return path if os.path.isabs(path) else os.path.join(self.base_dir, path)


@dataclass(frozen=True)
class FrameRef:
    """One training sample reference produced by balanced sampling."""

    entry_index: int
    audio_path: str
    frame_index: int
    view_id: int
    active: bool
    x_px: float | None


# ---------------------------------------------------------------------------
# Source excitation: seeded source-filter synthesis. A jittered pulse train
# with a wandering f0 drives formant-like resonators; band-passed noise
# bursts add frication; syllabic envelopes gate both. Spectrum spans
# roughly 100 Hz - 8 kHz.
# ---------------------------------------------------------------------------

def _control_curve(rng, n: int, n_ctrl: int, scale: float) -> np.ndarray:
    walk = np.cumsum(rng.normal(0.0, 1.0, n_ctrl))
    walk -= walk.mean()
    walk *= scale / max(1e-9, np.abs(walk).max())
    return np.interp(np.arange(n), np.linspace(0, n - 1, n_ctrl), walk)


def _syllable_envelope(rng, n: int, rate_hz: float = 4.0) -> np.ndarray:
    env = np.zeros(n)
    pos = 0
    while pos < n:
        length = int(SAMPLE_RATE / rate_hz * rng.uniform(0.6, 1.6))
        length = max(length, 1600)
        # Occasional silent syllable for rhythm, never the opening one.
        amp = rng.uniform(0.25, 1.0) if pos == 0 or rng.random() > 0.15 else 0.0
        seg = min(length, n - pos)
        ramp = min(seg // 4, 480)
        shape = np.full(seg, amp)
        if ramp > 0:
            fade = 0.5 - 0.5 * np.cos(np.pi * np.arange(ramp) / ramp)
            shape[:ramp] *= fade
            shape[-ramp:] *= fade[::-1]
        env[pos:pos + seg] = shape
        pos += seg
    return env


def speech_like_excitation(n_samples: int, rng: np.random.Generator) -> np.ndarray:
    """Speech-like mono excitation, zero mean, un-normalized."""
    n = int(n_samples)
    if n <= 0:
        return np.zeros(0)
    base_f0 = rng.uniform(105.0, 185.0)
    drift = _control_curve(rng, n, max(4, n // (SAMPLE_RATE // 2)), 0.2)
    t = np.arange(n) / SAMPLE_RATE
    vibrato = 0.03 * np.sin(2 * np.pi * 5.3 * t + rng.uniform(0, 2 * np.pi))
    f0 = base_f0 * np.exp2(drift + vibrato)
    phase = np.cumsum(f0) / SAMPLE_RATE
    pulses = np.zeros(n)
    pulses[np.flatnonzero(np.diff(np.floor(phase)) > 0)] = 1.0

    # Formant-ish resonators over the pulse train.
    voiced = np.zeros(n)
    for fc, bw, amp in ((550, 80, 1.0), (1650, 120, 0.6), (2750, 180, 0.35)):
        sos = butter(2, [fc - bw, fc + bw], btype="bandpass", fs=SAMPLE_RATE, output="sos")
        voiced += amp * sosfilt(sos, pulses)
    frication = sosfilt(
        butter(4, [1500, 7800], btype="bandpass", fs=SAMPLE_RATE, output="sos"),
        rng.normal(0.0, 1.0, n))

    env_v = _syllable_envelope(rng, n, rate_hz=3.8)
    env_f = _syllable_envelope(rng, n, rate_hz=5.5)
    sig = voiced * env_v + 0.15 * frication * env_f
    band = butter(4, [90, 8000], btype="bandpass", fs=SAMPLE_RATE, output="sos")
    return sosfilt(band, sig)


def _place_source_signal(spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    """Excitation in scene time: active segments carry unit-RMS source."""
    out = np.zeros(spec.n_samples)
    for t0, t1 in spec.activity_segments:
        i0, i1 = int(round(t0 * SAMPLE_RATE)), int(round(t1 * SAMPLE_RATE))
        i1 = min(i1, spec.n_samples)
        if spec.source_signal is not None:
            seg = np.array(spec.source_signal[i0:i1], dtype=np.float64)
        else:
            seg = speech_like_excitation(i1 - i0, rng)
        ramp = min(480, len(seg) // 4)  # 10 ms anti-click fades
        if ramp > 0:
            fade = 0.5 - 0.5 * np.cos(np.pi * np.arange(ramp) / ramp)
            seg[:ramp] *= fade
            seg[-ramp:] *= fade[::-1]
        rms = np.sqrt(np.mean(seg ** 2))
        if rms > 0:
            seg /= rms
        out[i0:i1] = seg
    return out


# ---------------------------------------------------------------------------
# Spatialization
# ---------------------------------------------------------------------------

_block_window = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(RENDER_BLOCK) / RENDER_BLOCK)
_sinc_window = np.hanning(SINC_TAPS + 2)[1:-1]


def _fractional_delay_kernels(frac: np.ndarray) -> np.ndarray:
    """(n_mics, SINC_TAPS) Hann-windowed sinc kernels, group delay
    _SINC_CENTER + frac samples."""
    k = np.arange(SINC_TAPS)[None, :]
    return _sinc_window * np.sinc(k - _SINC_CENTER - frac[:, None])


def _mic_delays_and_gains(spec: SceneSpec, geom: ArrayGeometry,
                          azimuth_deg: float) -> tuple[np.ndarray, np.ndarray]:
    """Per-mic delay (samples, origin-referenced) and amplitude gain."""
    pos = geom.mic_positions
    if spec.source_distance_m is None:
        u = direction_unit_vector(azimuth_deg)
        delays_s = -(pos @ u) / geom.speed_of_sound
        gains = np.ones(len(pos))
    else:
        src = spec.source_distance_m * direction_unit_vector(azimuth_deg)
        r = np.linalg.norm(src[None, :] - pos, axis=1)
        delays_s = (r - spec.source_distance_m) / geom.speed_of_sound
        gains = spec.source_distance_m / r
    return delays_s * SAMPLE_RATE, gains


def render_scene(spec: SceneSpec, geom: ArrayGeometry) -> tuple[np.ndarray, list]:
    """Render 16-channel audio plus per-view labels.

    The source is delayed per mic with a 32-tap windowed-sinc kernel on
    50%-overlapping Hann blocks (delay frozen at each block center), then
    independent Gaussian noise at noise_floor_db relative to the unit
    active-segment RMS is added. Labels mark frame activity and the pixel
    position per view; positions outside a view's frame are dropped and
    the record is flagged unscreened (active but unusable for training).
    """
    rng_exc, rng_noise = [np.random.Generator(np.random.PCG64(s))
                          for s in np.random.SeedSequence(spec.rng_seed).spawn(2)]
    n = spec.n_samples
    n_mics = geom.n_mics
    source = _place_source_signal(spec, rng_exc)

    margin = 4 * SINC_TAPS
    padded = np.concatenate([np.zeros(RENDER_HOP), source,
                             np.zeros(RENDER_HOP + RENDER_BLOCK)])
    out = np.zeros((n_mics, padded.size + 2 * margin))
    n_blocks = (padded.size - RENDER_BLOCK) // RENDER_HOP + 1
    for b in range(n_blocks):
        s = b * RENDER_HOP
        block = padded[s:s + RENDER_BLOCK]
        if not block.any():
            continue
        t_center = (s + RENDER_BLOCK / 2 - RENDER_HOP) / SAMPLE_RATE
        az = float(spec.azimuth_at(min(max(t_center, 0.0), spec.duration_s)))
        delays, gains = _mic_delays_and_gains(spec, geom, az)
        m = np.floor(delays).astype(int)
        kernels = _fractional_delay_kernels(delays - m) * gains[:, None]
        xp = np.pad(block * _block_window, (SINC_TAPS - 1, SINC_TAPS - 1))
        windows = np.lib.stride_tricks.sliding_window_view(xp, SINC_TAPS)
        conv = windows @ kernels[:, ::-1].T  # (block + taps - 1, n_mics)
        for i in range(n_mics):
            lo = s + m[i] - _SINC_CENTER + margin
            out[i, lo:lo + conv.shape[0]] += conv[:, i]

    audio = out[:, margin + RENDER_HOP:margin + RENDER_HOP + n]
    noise_rms = 10.0 ** (spec.noise_floor_db / 20.0)
    audio = audio + rng_noise.normal(0.0, noise_rms, size=(n_mics, n))

    labels = []
    for cam in spec.views:
        for i in range(spec.n_frames):
            t = i / FPS
            if not spec.active_at(t):
                labels.append(LabelRecord(i, cam.view_id, False))
                continue
            px = azimuth_to_pixel(cam, float(spec.azimuth_at(t)))
            if in_frame(cam, px):
                labels.append(LabelRecord(i, cam.view_id, True, x_px=px))
            else:
                labels.append(LabelRecord(i, cam.view_id, True, x_px=None, screened=False))
    return audio, labels


# ---------------------------------------------------------------------------
# Label CSV: header "frame,view,active,x_px[,screened]". x_px is empty for
# inactive frames and for active frames that fell outside the camera view
# (those carry screened=0).
# ---------------------------------------------------------------------------

def write_labels(path, records: list) -> None:
    with open(path, "w") as f:
        f.write("frame,view,active,x_px,screened\n")
        for r in records:
            x = "" if r.x_px is None else repr(float(r.x_px))
            f.write(f"{r.frame_index},{r.view_id},{int(r.active)},{x},{int(r.screened)}\n")


def ingest_pseudo_labels(path, image_width: int = 2448) -> list:
    """Parse and validate a pseudo-label CSV; raises LabelFormatError with
    the offending line number on any malformed or out-of-range row."""
    records = []
    seen = set()
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if line.startswith("frame,"):
                continue
            parts = line.split(",")
            if len(parts) not in (4, 5):
                raise LabelFormatError(f"{path}:{lineno}: expected 4 or 5 fields, got {len(parts)}")
            try:
                frame = int(parts[0])
                view = int(parts[1])
                active = int(parts[2])
            except ValueError as e:
                raise LabelFormatError(f"{path}:{lineno}: {e}") from None
            if frame < 0:
                raise LabelFormatError(f"{path}:{lineno}: negative frame index {frame}")
            if not 0 <= view < N_VIEWS:
                raise LabelFormatError(f"{path}:{lineno}: unknown view_id {view} "
                                       f"(valid: 0..{N_VIEWS - 1})")
            if active not in (0, 1):
                raise LabelFormatError(f"{path}:{lineno}: active must be 0 or 1, got {parts[2]}")
            screened = True
            if len(parts) == 5 and parts[4] != "":
                if parts[4] not in ("0", "1"):
                    raise LabelFormatError(f"{path}:{lineno}: screened must be 0 or 1")
                screened = parts[4] == "1"
            x_px = None
            if parts[3] != "":
                try:
                    x_px = float(parts[3])
                except ValueError:
                    raise LabelFormatError(f"{path}:{lineno}: bad x_px {parts[3]!r}") from None
                if not 0.0 <= x_px < image_width:
                    raise LabelFormatError(f"{path}:{lineno}: x_px {x_px} outside "
                                           f"[0, image_width {image_width})")
            if active == 1 and x_px is None and screened:
                raise LabelFormatError(f"{path}:{lineno}: active row without x_px "
                                       "must be marked unscreened")
            key = (frame, view)
            if key in seen:
                raise LabelFormatError(f"{path}:{lineno}: duplicate (frame, view) {key}")
            seen.add(key)
            records.append(LabelRecord(frame, view, bool(active), x_px, screened))
    return records


# ---------------------------------------------------------------------------
# Manifest (JSON) and balanced frame sampling
# ---------------------------------------------------------------------------

def save_manifest(path, manifest: DatasetManifest) -> None:
    doc = {"version": 1, "entries": [
        {"split": e.split, "role": e.role, "audio": e.audio, "labels": e.labels,
         "geometry": e.geometry, "cameras": list(e.cameras)}
        for e in manifest.entries]}
    with open(path, "w") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")


def load_manifest(path, check_files: bool = True) -> DatasetManifest:
    with open(path) as f:
        doc = json.load(f)
    base = os.path.dirname(os.path.abspath(path))
    entries = []
    for i, e in enumerate(doc.get("entries", [])):
        if e.get("split") not in ("train", "test"):
            raise SceneError(f"{path}: entry {i}: split must be train or test")
        if e.get("role") not in ("speech", "silent"):
            raise SceneError(f"{path}: entry {i}: role must be speech or silent")
        entry = ManifestEntry(split=e["split"], role=e["role"], audio=e["audio"],
                              labels=e["labels"], geometry=e.get("geometry", ""),
                              cameras=tuple(e.get("cameras", ())))
        if check_files:
            for p in (entry.audio, entry.labels):
                full = p if os.path.isabs(p) else os.path.join(base, p)
                if not os.path.exists(full):
                    raise SceneError(f"{path}: entry {i}: missing file {p}")
        entries.append(entry)
    return DatasetManifest(entries=tuple(entries), base_dir=base)


def save_audio(path, audio: np.ndarray) -> None:
    wavfile.write(path, SAMPLE_RATE, np.ascontiguousarray(audio.T, dtype=np.float32))


def load_audio(path) -> np.ndarray:
    rate, data = wavfile.read(path, mmap=True)
    if rate != SAMPLE_RATE:
        raise SceneError(f"{path}: expected {SAMPLE_RATE} Hz audio, got {rate}")
    if data.ndim == 1:
        data = data[:, None]
    return np.asarray(data, dtype=np.float64).T


CHUNK_HALF = 4000  # 8000-sample chunks centered on the frame's sample clock


def valid_chunk_frames(n_samples: int) -> tuple[int, int]:
    """Range [lo, hi) of frame indices whose 8000-sample chunk fits the audio."""
    lo = math.ceil(CHUNK_HALF / SAMPLES_PER_FRAME)
    hi = (n_samples - CHUNK_HALF) // SAMPLES_PER_FRAME + 1
    return lo, max(lo, hi)


def extract_chunk(audio: np.ndarray, frame_index: int) -> np.ndarray:
    """Audio chunk for frame i: samples [i*1600 - 4000, i*1600 + 4000)."""
    center = frame_index * SAMPLES_PER_FRAME
    if center - CHUNK_HALF < 0 or center + CHUNK_HALF > audio.shape[-1]:
        raise SceneError(f"frame {frame_index}: chunk extends outside the audio")
    return audio[..., center - CHUNK_HALF:center + CHUNK_HALF]


def sample_training_frames(manifest: DatasetManifest, rng_seed: int,
                           split: str = "train",
                           max_frames: int | None = None) -> list:
    """Balanced FrameRef selection: actives from screened speech labels,
    silents from silent-role entries only, |n_active - n_silent| <= 1,
    drawn without replacement, deterministic under the seed."""
    actives, silents = [], []
    for ei, entry in enumerate(manifest.entries):
        if entry.split != split:
            continue
        audio_path = manifest.resolve(entry.audio)
        labels = ingest_pseudo_labels(manifest.resolve(entry.labels))
        n_samples = _audio_n_samples(audio_path)
        lo, hi = valid_chunk_frames(n_samples)
        for r in labels:
            if not lo <= r.frame_index < hi:
                continue
            ref = FrameRef(ei, audio_path, r.frame_index, r.view_id, r.active, r.x_px)
            if entry.role == "speech" and r.active and r.screened and r.x_px is not None:
                actives.append(ref)
            elif entry.role == "silent" and not r.active:
                silents.append(ref)
    if not silents:
        raise SceneError("no silent material in manifest: cannot balance sampling")
    if not actives:
        raise SceneError("no screened active frames in manifest")
    n = min(len(actives), len(silents))
    n_act = n_sil = n
    if max_frames is not None and 2 * n > max_frames:
        n_act = (max_frames + 1) // 2
        n_sil = max_frames // 2
    rng = np.random.Generator(np.random.PCG64(rng_seed))
    picked_a = [actives[i] for i in rng.choice(len(actives), n_act, replace=False)]
    picked_s = [silents[i] for i in rng.choice(len(silents), n_sil, replace=False)]
    combined = picked_a + picked_s
    order = rng.permutation(len(combined))
    return [combined[i] for i in order]


def _audio_n_samples(path) -> int:
    rate, data = wavfile.read(path, mmap=True)
    if rate != SAMPLE_RATE:
        raise SceneError(f"{path}: expected {SAMPLE_RATE} Hz audio, got {rate}")
    return data.shape[0]
