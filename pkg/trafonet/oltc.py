from __future__ import annotations
import logging
from dataclasses import dataclass, replace
from enum import IntEnum
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
from scipy.signal import butter, chirp, sosfilt

from .dsp import AudioSignal, Spectrogram, StftConfig, _complex_stft, istft_overlap_add, mel_spectrogram, write_audio
from .errors import ConfigError, ValidationError
from .seeding import derive_seed
from .types import NoiseColor

log = logging.getLogger(__name__)

MIN_SEGMENT = 1024
DENOISE_ALPHA = 1.5
DENOISE_BETA = 0.02


class OltcState(IntEnum):
    IDLE = 1
    MOTOR_START = 2
    GENEVA_DRIVE = 3
    SELECTOR_STOP = 4
    DIVERTER_SWITCH = 5
    MOTOR_STOP = 6
    BRAKING = 7

    @property
    def label(self) -> str:
        return _LABELS[self]

    @staticmethod
    def parse(value) -> "OltcState":
        if isinstance(value, str) and not value.strip().isdigit():
            for state, name in _LABELS.items():
                if name == value.strip().lower():
                    return state
            raise ValidationError(f"Unknown OLTC state: {value}")
        try:
            return OltcState(int(value))
        except (TypeError, ValueError):
            raise ValidationError(f"Unknown OLTC state id: {value}") from None


_LABELS = {
    OltcState.IDLE: "idle/motor-hum",
    OltcState.MOTOR_START: "motor-start",
    OltcState.GENEVA_DRIVE: "geneva-drive",
    OltcState.SELECTOR_STOP: "selector-stop",
    OltcState.DIVERTER_SWITCH: "diverter-switch",
    OltcState.MOTOR_STOP: "motor-stop",
    OltcState.BRAKING: "braking",
}

N_STATES = len(OltcState)


@dataclass(frozen=True)
class SynthConfig:
    sample_rate_hz: float = 48000.0
    segment_samples: int = 17408
    seed: int = 0
    jitter: float = 0.0

    def __post_init__(self) -> None:
        if self.segment_samples < MIN_SEGMENT:
            raise ConfigError(f"segment_samples must be >= {MIN_SEGMENT}, got {self.segment_samples}")
        if not 0.0 <= self.jitter <= 0.5:
            raise ConfigError(f"jitter must be in [0, 0.5], got {self.jitter}")
        if not self.sample_rate_hz > 0:
            raise ConfigError(f"sample_rate_hz must be > 0, got {self.sample_rate_hz}")


@dataclass(eq=False)
class LabeledClip:
    """
    One pre-segmented recording:
    - signal: the (possibly noisy) audio
    - label: OLTC state
    - snr_db: set once noise was added
    - reference: clean signal kept for SNR scoring of noisy copies
    - noise_power: background level of the environment the clip was captured in
    """
    signal: AudioSignal
    label: OltcState
    seed: int = 0
    snr_db: Optional[float] = None
    reference: Optional[np.ndarray] = None
    noise_power: Optional[float] = None


# --------- Waveform recipes ---------

def _jit(rng: np.random.Generator, value: float, spread: float) -> float:
    return value * (1.0 + spread * rng.uniform(-1.0, 1.0))


def _decay(t: np.ndarray, t0: float, tau: float) -> np.ndarray:
    dt = t - t0
    return np.where(dt >= 0.0, np.exp(-np.maximum(dt, 0.0) / tau), 0.0)


def _noise(rng: np.random.Generator, n: int, fs: float, band: Optional[Tuple[float, float]] = None) -> np.ndarray:
    """White noise, optionally Butterworth band-limited: (0, hi) low-pass, (lo, hi) band-pass."""
    x = rng.standard_normal(n)
    if band is None:
        return x
    lo, hi = band
    if lo <= 0.0:
        sos = butter(4, hi, btype="lowpass", fs=fs, output="sos")
    else:
        sos = butter(4, (lo, hi), btype="bandpass", fs=fs, output="sos")
    y = sosfilt(sos, x)
    return y / np.sqrt(np.mean(y ** 2))


def _click(t: np.ndarray, t0: float, freq: float, tau: float) -> np.ndarray:
    return _decay(t, t0, tau) * np.sin(2.0 * np.pi * freq * np.maximum(t - t0, 0.0))


def _hum_floor(t: np.ndarray, rng: np.random.Generator, j: float) -> np.ndarray:
    # 100 Hz magnetostriction hum with harmonics plus the 550 Hz drive motor tone
    f0 = _jit(rng, 100.0, 0.1 * j)
    out = np.zeros_like(t)
    for h, amp in enumerate((0.3, 0.15, 0.08, 0.04), start=1):
        out += _jit(rng, amp, j) * np.sin(2.0 * np.pi * h * f0 * t + rng.uniform(0.0, 2.0 * np.pi))
    out += _jit(rng, 0.2, j) * np.sin(2.0 * np.pi * _jit(rng, 550.0, 0.1 * j) * t + rng.uniform(0.0, 2.0 * np.pi))
    return out


def _motor_start(t, rng, j, fs):
    t_end = t[-1]
    sweep = 0.6 * chirp(t, f0=200.0, t1=t_end, f1=_jit(rng, 550.0, 0.1 * j), method="linear")
    t0 = _jit(rng, 0.02, j)
    burst = _jit(rng, 0.8, j) * _noise(rng, t.size, fs) * _decay(t, t0, 0.006)
    return sweep + burst


def _geneva_drive(t, rng, j, fs):
    period = _jit(rng, 0.040, 0.1 * j)
    t0 = _jit(rng, 0.01, j)
    freq = _jit(rng, 2500.0, 0.1 * j)
    out = np.zeros_like(t)
    k = 0
    while t0 + k * period < t[-1]:
        out += 1.5 * 0.85 ** k * _click(t, t0 + k * period, freq, 0.002)
        k += 1
    return out


def _selector_stop(t, rng, j, fs):
    t0 = _jit(rng, 0.12, j)
    impulse = _jit(rng, 4.0, j) * _noise(rng, t.size, fs) * _decay(t, t0, 0.0005)
    ring = _jit(rng, 1.5, j) * _click(t, t0, _jit(rng, 1200.0, 0.05 * j), 0.04)
    return impulse + ring


def _diverter_switch(t, rng, j, fs):
    t1 = _jit(rng, 0.08, j)
    t2 = t1 + _jit(rng, 0.03, j)
    a = _noise(rng, t.size, fs, (0.0, 8000.0)) * _decay(t, t1, 0.015)
    b = _noise(rng, t.size, fs, (0.0, 8000.0)) * _decay(t, t2, 0.015)
    return _jit(rng, 2.5, j) * a + _jit(rng, 2.0, j) * b


def _motor_stop(t, rng, j, fs):
    t_end = min(_jit(rng, 0.25, j), t[-1])
    fade = np.clip(1.0 - t / t_end, 0.0, 1.0)
    sweep = 0.6 * fade * chirp(t, f0=_jit(rng, 550.0, 0.1 * j), t1=t_end, f1=0.0, method="linear")
    click = _jit(rng, 1.2, j) * _noise(rng, t.size, fs) * _decay(t, t_end, 0.001)
    return sweep + click


def _braking(t, rng, j, fs):
    out = np.zeros_like(t)
    for _ in range(int(rng.integers(6, 11))):
        out += rng.uniform(0.5, 1.5) * _click(t, rng.uniform(0.05, 0.30), 1800.0, 0.0015)
    gate = np.clip((t - 0.05) / 0.02, 0.0, 1.0) * np.clip((0.33 - t) / 0.02, 0.0, 1.0)
    friction = _jit(rng, 0.25, j) * _noise(rng, t.size, fs, (2000.0, 4000.0)) * gate
    return out + friction


_RECIPES: Dict[OltcState, Callable] = {
    OltcState.MOTOR_START: _motor_start,
    OltcState.GENEVA_DRIVE: _geneva_drive,
    OltcState.SELECTOR_STOP: _selector_stop,
    OltcState.DIVERTER_SWITCH: _diverter_switch,
    OltcState.MOTOR_STOP: _motor_stop,
    OltcState.BRAKING: _braking,
}


def generate_clip(state, cfg: SynthConfig) -> LabeledClip:
    """
    Deterministic clip for (state, cfg.seed): every state rides on the idle hum floor,
    state 1 is the hum floor alone.
    """
    state = OltcState.parse(state)
    rng = np.random.default_rng(cfg.seed)
    t = np.arange(cfg.segment_samples) / cfg.sample_rate_hz
    x = _hum_floor(t, rng, cfg.jitter)
    recipe = _RECIPES.get(state)
    if recipe is not None:
        x = x + recipe(t, rng, cfg.jitter, cfg.sample_rate_hz)
    return LabeledClip(AudioSignal(x, cfg.sample_rate_hz), state, seed=cfg.seed)


def generate_dataset(n_per_class: int, cfg: SynthConfig) -> List[LabeledClip]:
    """Class-major, balanced; clip seeds derived from (cfg.seed, class, index)."""
    if n_per_class < 1:
        raise ValidationError(f"n_per_class must be >= 1, got {n_per_class}")
    clips = []
    for state in OltcState:
        for i in range(n_per_class):
            clips.append(generate_clip(state, replace(cfg, seed=derive_seed(cfg.seed, "clip", int(state), i))))
    log.info("generated %d clips (%d per class, jitter=%.2f)", len(clips), n_per_class, cfg.jitter)
    return clips


# --------- Noise ---------

def _colored_noise(rng: np.random.Generator, n: int, color: NoiseColor) -> np.ndarray:
    white = rng.standard_normal(n)
    if color == NoiseColor.WHITE:
        return white
    # pink: power falls 3 dB per octave -> amplitude ~ 1/sqrt(f)
    spec = np.fft.rfft(white)
    f = np.fft.rfftfreq(n)
    shape = np.zeros_like(f)
    shape[1:] = 1.0 / np.sqrt(f[1:])
    return np.fft.irfft(spec * shape, n=n)


def background_noise(n: int, sample_rate_hz: float, power: float, color=NoiseColor.WHITE, seed: int = 0) -> AudioSignal:
    """Noise-only capture of n samples with mean power exactly `power`."""
    if n < 1 or not power > 0.0:
        raise ValidationError(f"background noise needs n >= 1 and power > 0, got n={n}, power={power}")
    noise = _colored_noise(np.random.default_rng(seed), n, NoiseColor(color))
    return AudioSignal(noise * np.sqrt(power / np.mean(noise ** 2)), sample_rate_hz)


def add_noise(clip: LabeledClip, snr_db: float, color=NoiseColor.WHITE, seed: int = 0) -> LabeledClip:
    """Add white or pink noise scaled so that clip power / noise power equals snr_db."""
    clean = clip.signal.samples
    p_signal = float(np.mean(clean ** 2))
    if not p_signal > 0.0:
        raise ValidationError("cannot set an SNR on a zero-power clip")
    fs = clip.signal.sample_rate_hz
    noise_power = p_signal / 10.0 ** (snr_db / 10.0)
    noise = background_noise(clean.size, fs, noise_power, color, seed).samples
    reference = clip.reference if clip.reference is not None else clean.copy()
    return LabeledClip(
        AudioSignal(clean + noise, clip.signal.sample_rate_hz),
        clip.label,
        seed=clip.seed,
        snr_db=float(snr_db),
        reference=reference,
        noise_power=noise_power,
    )


def measure_snr_db(reference: np.ndarray, signal: np.ndarray) -> float:
    residual = np.asarray(signal) - np.asarray(reference)
    return float(10.0 * np.log10(np.mean(np.asarray(reference) ** 2) / np.mean(residual ** 2)))


# --------- Spectral subtraction ---------

def denoise_config(cfg: StftConfig) -> StftConfig:
    """The denoiser always analyses with 50 % overlap."""
    return replace(cfg, hop=cfg.window_len // 2)


def estimate_noise_profile(noise: AudioSignal, cfg: StftConfig) -> Spectrogram:
    """Per-bin mean magnitude of a background (noise-only) capture, bins x 1."""
    dcfg = denoise_config(cfg)
    mag = np.abs(_complex_stft(noise, dcfg))
    f = np.arange(dcfg.n_bins) * noise.sample_rate_hz / dcfg.window_len
    return Spectrogram(mag.mean(axis=1, keepdims=True), f, np.zeros(1), config=dcfg)


def spectral_denoise(
    clip: LabeledClip,
    noise_profile: Spectrogram,
    alpha: float = DENOISE_ALPHA,
    beta: float = DENOISE_BETA,
) -> LabeledClip:
    """
    Magnitude spectral subtraction |S| - alpha * |N|, floored at beta * |S|, noisy phase kept,
    resynthesised by weighted overlap-add.
    """
    cfg = noise_profile.config
    if cfg is None or noise_profile.is_db:
        raise ConfigError("noise profile must be a linear spectrogram carrying its STFT config")
    if cfg.hop != cfg.window_len // 2 or noise_profile.values.shape[0] != cfg.n_bins:
        raise ConfigError(f"noise profile config {cfg} does not match the denoiser analysis (hop = L/2)")

    x = clip.signal.samples
    n, half = x.size, cfg.window_len // 2
    tail = half + (-n) % cfg.hop
    padded = AudioSignal(np.pad(x, (half, tail)), clip.signal.sample_rate_hz)

    spec = _complex_stft(padded, cfg)
    mag = np.abs(spec)
    floor = beta * mag
    clean_mag = np.maximum(mag - alpha * noise_profile.values.mean(axis=1, keepdims=True), floor)
    y = istft_overlap_add(clean_mag * np.exp(1j * np.angle(spec)), cfg, padded.samples.size)[half:half + n]
    return LabeledClip(
        AudioSignal(y, clip.signal.sample_rate_hz),
        clip.label,
        seed=clip.seed,
        snr_db=clip.snr_db,
        reference=clip.reference,
        noise_power=clip.noise_power,
    )


# --------- Features / baseline ---------

def clip_features(
    clip: LabeledClip,
    cfg: StftConfig,
    n_mels: int = 64,
    f_min_hz: float = 20.0,
    f_max_hz: float = 16000.0,
) -> np.ndarray:
    return mel_spectrogram(clip.signal, cfg, n_mels, f_min_hz, f_max_hz).values


def class_means(features: np.ndarray, labels: np.ndarray, n_classes: int) -> np.ndarray:
    flat = features.reshape(features.shape[0], -1)
    return np.stack([flat[labels == k].mean(axis=0) for k in range(n_classes)])


def nearest_mean_predict(means: np.ndarray, features: np.ndarray) -> np.ndarray:
    flat = features.reshape(features.shape[0], -1)
    d = ((flat[:, None, :] - means[None, :, :]) ** 2).sum(axis=2)
    return np.argmin(d, axis=1)


def export_dataset(clips: List[LabeledClip], storage) -> None:
    """One WAV per clip plus manifest.csv (filename, label id, label name, seed, snr_db)."""
    rows = []
    for i, clip in enumerate(clips):
        name = f"clip_{i:05d}_s{int(clip.label)}.wav"
        write_audio(storage.path(name), clip.signal)
        rows.append({
            "filename": name,
            "label_id": int(clip.label),
            "label_name": clip.label.label,
            "seed": clip.seed,
            "snr_db": "" if clip.snr_db is None else clip.snr_db,
        })
    storage.write_csv("manifest.csv", rows, ["filename", "label_id", "label_name", "seed", "snr_db"])
    log.info("exported %d clips to %s", len(clips), storage.out_dir)
