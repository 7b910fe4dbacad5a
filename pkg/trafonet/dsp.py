from __future__ import annotations
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.io import wavfile
from scipy.signal import get_window

from .errors import ConfigError, LengthError, StateError, ValidationError
from .types import WindowFn

log = logging.getLogger(__name__)

MAG_FLOOR = 1e-6  # -120 dB


@dataclass(eq=False)
class AudioSignal:
    samples: np.ndarray
    sample_rate_hz: float

    def __post_init__(self) -> None:
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if not self.sample_rate_hz > 0:
            raise ValidationError(f"sample rate must be > 0, got {self.sample_rate_hz}")
        if not np.all(np.isfinite(self.samples)):
            raise ValidationError("audio samples contain NaN or Inf")

    @property
    def duration_s(self) -> float:
        return self.samples.shape[0] / self.sample_rate_hz

    def power(self) -> float:
        return float(np.mean(self.samples ** 2))


@dataclass(frozen=True)
class StftConfig:
    window_len: int = 1024
    hop: int = 1024
    window_fn: WindowFn = WindowFn.HANN

    def __post_init__(self) -> None:
        object.__setattr__(self, "window_fn", WindowFn(self.window_fn))
        if self.window_len < 1:
            raise ConfigError(f"window_len must be >= 1, got {self.window_len}")
        if not 1 <= self.hop <= self.window_len:
            raise ConfigError(f"hop must be in [1, window_len], got {self.hop}")

    @property
    def n_bins(self) -> int:
        return self.window_len // 2 + 1

    def window(self) -> np.ndarray:
        # periodic windows (fftbins=True), the DFT-friendly variant
        name = "boxcar" if self.window_fn == WindowFn.RECT else self.window_fn.value
        return get_window(name, self.window_len, fftbins=True).astype(np.float64)


@dataclass(eq=False)
class Spectrogram:
    """
    Time-frequency matrix n_bins x n_frames.
    `is_db` flags log scaling; `scale` is "linear" for STFT bins or "mel".
    """
    values: np.ndarray
    freq_axis_hz: np.ndarray
    time_axis_s: np.ndarray
    is_db: bool = False
    scale: str = "linear"
    config: Optional[StftConfig] = field(default=None, compare=False)

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        self.freq_axis_hz = np.asarray(self.freq_axis_hz, dtype=np.float64)
        self.time_axis_s = np.asarray(self.time_axis_s, dtype=np.float64)
        if self.values.shape != (self.freq_axis_hz.shape[0], self.time_axis_s.shape[0]):
            raise ValidationError(
                f"spectrogram {self.values.shape} does not match axes "
                f"({self.freq_axis_hz.shape[0]}, {self.time_axis_s.shape[0]})"
            )

    @property
    def shape(self):
        return self.values.shape


# --------- Framing / STFT ---------

def n_frames(n_samples: int, window_len: int, hop: int) -> int:
    return (n_samples - window_len) // hop + 1


def frame_signal(sig: AudioSignal, cfg: StftConfig) -> np.ndarray:
    """
    Frames as rows: frame t = samples[t*hop : t*hop + L]. The tail that does not
    fill a whole window is dropped.
    """
    n = sig.samples.shape[0]
    if n < cfg.window_len:
        raise LengthError(f"signal of {n} samples shorter than one window ({cfg.window_len})")
    return sliding_window_view(sig.samples, cfg.window_len)[::cfg.hop]


def _complex_stft(sig: AudioSignal, cfg: StftConfig) -> np.ndarray:
    frames = frame_signal(sig, cfg) * cfg.window()
    return np.fft.rfft(frames, n=cfg.window_len, axis=1).T  # bins x frames


def stft(sig: AudioSignal, cfg: StftConfig) -> Spectrogram:
    """One-sided linear magnitude STFT, bins f*Fs/L for f = 0..L/2."""
    mag = np.abs(_complex_stft(sig, cfg))
    t = np.arange(mag.shape[1]) * cfg.hop / sig.sample_rate_hz
    f = np.arange(cfg.n_bins) * sig.sample_rate_hz / cfg.window_len
    return Spectrogram(mag, f, t, is_db=False, scale="linear", config=cfg)


def to_db(spec: Spectrogram) -> Spectrogram:
    if spec.is_db:
        raise StateError("spectrogram is already in dB")
    values = 20.0 * np.log10(np.maximum(np.abs(spec.values), MAG_FLOOR))
    return replace(spec, values=values, is_db=True)


def istft_overlap_add(frames_spec: np.ndarray, cfg: StftConfig, length: int) -> np.ndarray:
    """
    Weighted overlap-add of one-sided spectra (bins x frames) that were analysed
    with cfg.window: sum of inverse frames divided by the summed window.
    """
    frames = np.fft.irfft(frames_spec.T, n=cfg.window_len, axis=1)
    w = cfg.window()
    total = (frames.shape[0] - 1) * cfg.hop + cfg.window_len
    out = np.zeros(total)
    norm = np.zeros(total)
    for t in range(frames.shape[0]):
        s = t * cfg.hop
        out[s:s + cfg.window_len] += frames[t]
        norm[s:s + cfg.window_len] += w
    nz = norm > 1e-8
    out[nz] /= norm[nz]
    return out[:length]


# --------- Mel ---------

def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(
    n_mels: int,
    n_fft_bins: int,
    f_min_hz: float,
    f_max_hz: float,
    sample_rate_hz: float,
) -> np.ndarray:
    """
    HTK-style triangular filters, centers equally spaced in mel between f_min and f_max.
    Returns n_mels x n_fft_bins.
    """
    if n_mels < 2:
        raise ConfigError(f"n_mels must be >= 2, got {n_mels}")
    if not 0.0 <= f_min_hz < f_max_hz <= sample_rate_hz / 2.0:
        raise ConfigError(f"need 0 <= f_min < f_max <= Fs/2, got f_min={f_min_hz}, f_max={f_max_hz}, Fs={sample_rate_hz}")
    if n_fft_bins < 2:
        raise ConfigError(f"n_fft_bins must be >= 2, got {n_fft_bins}")

    edges = mel_to_hz(np.linspace(hz_to_mel(f_min_hz), hz_to_mel(f_max_hz), n_mels + 2))
    fft_freqs = np.arange(n_fft_bins) * (sample_rate_hz / 2.0) / (n_fft_bins - 1)

    lower = edges[:-2, None]
    center = edges[1:-1, None]
    upper = edges[2:, None]
    rising = (fft_freqs[None, :] - lower) / (center - lower)
    falling = (upper - fft_freqs[None, :]) / (upper - center)
    bank = np.maximum(0.0, np.minimum(rising, falling))

    empty = np.flatnonzero(bank.max(axis=1) <= 0.0)
    if empty.size:
        raise ConfigError(
            f"mel filter {int(empty[0])} has no FFT bin: {n_mels} mels too many for {n_fft_bins} bins"
        )
    return bank


def mel_spectrogram(
    sig: AudioSignal,
    cfg: StftConfig,
    n_mels: int = 64,
    f_min_hz: float = 20.0,
    f_max_hz: float = 16000.0,
) -> Spectrogram:
    """dB Mel spectrogram n_mels x n_frames (mel bank applied to power, 10*log10)."""
    lin = stft(sig, cfg)
    bank = mel_filterbank(n_mels, cfg.n_bins, f_min_hz, f_max_hz, sig.sample_rate_hz)
    power = bank @ (lin.values ** 2)
    values = 10.0 * np.log10(np.maximum(power, MAG_FLOOR ** 2))
    centers = mel_to_hz(np.linspace(hz_to_mel(f_min_hz), hz_to_mel(f_max_hz), n_mels + 2))[1:-1]
    return Spectrogram(values, centers, lin.time_axis_s, is_db=True, scale="mel", config=cfg)


# ----- Audio / spectrogram files -----

def read_audio(path: Union[str, Path], sample_rate_hz: Optional[float] = None) -> AudioSignal:
    """
    .wav: rate from the header (16-bit PCM scaled to [-1, 1), float kept as is).
    Anything else: one numeric column of text, rate from the argument.
    """
    path = Path(path)
    if path.suffix.lower() == ".wav":
        rate, data = wavfile.read(path)
        if data.ndim > 1:
            raise ValidationError(f"{path}: expected mono audio, got {data.shape[1]} channels")
        if data.dtype == np.int16:
            data = data.astype(np.float64) / 32768.0
        return AudioSignal(data.astype(np.float64), float(sample_rate_hz or rate))
    if sample_rate_hz is None:
        raise ConfigError(f"{path}: text audio needs an explicit sample rate")
    try:
        samples = np.loadtxt(path, dtype=np.float64, ndmin=1)
    except ValueError as e:
        raise ValidationError(f"{path}: {e}") from None
    return AudioSignal(samples, float(sample_rate_hz))


def write_audio(path: Union[str, Path], sig: AudioSignal) -> None:
    path = Path(path)
    if path.suffix.lower() == ".wav":
        wavfile.write(path, int(round(sig.sample_rate_hz)), sig.samples.astype(np.float32))
    else:
        np.savetxt(path, sig.samples, fmt="%.17g")


def export_spectrogram_csv(path: Union[str, Path], spec: Spectrogram) -> None:
    """CSV matrix (rows = bins) with axis metadata in '#' header lines."""
    header = "\n".join([
        f"scale={spec.scale} db={str(spec.is_db).lower()}",
        "freq_axis_hz=" + ",".join(repr(float(f)) for f in spec.freq_axis_hz),
        "time_axis_s=" + ",".join(repr(float(t)) for t in spec.time_axis_s),
    ])
    np.savetxt(path, spec.values, delimiter=",", header=header, fmt="%.17g")


def load_spectrogram_csv(path: Union[str, Path]) -> Spectrogram:
    meta = {}
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            if not line.startswith("#"):
                break
            for part in line[1:].strip().split(" "):
                if "=" in part:
                    k, v = part.split("=", 1)
                    meta[k] = v
    try:
        values = np.loadtxt(path, delimiter=",", ndmin=2)
        freqs = np.array([float(x) for x in meta["freq_axis_hz"].split(",")])
        times = np.array([float(x) for x in meta["time_axis_s"].split(",")])
    except KeyError as e:
        raise ValidationError(f"{path}: missing header field {e}") from None
    except ValueError as e:
        raise ValidationError(f"{path}: {e}") from None
    return Spectrogram(values, freqs, times, is_db=meta.get("db") == "true", scale=meta.get("scale", "linear"))
