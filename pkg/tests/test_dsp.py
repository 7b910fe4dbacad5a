import numpy as np
import pytest

from trafonet.dsp import (
    AudioSignal,
    StftConfig,
    _complex_stft,
    export_spectrogram_csv,
    frame_signal,
    istft_overlap_add,
    load_spectrogram_csv,
    mel_filterbank,
    mel_spectrogram,
    read_audio,
    stft,
    to_db,
    write_audio,
)
from trafonet.errors import ConfigError, LengthError, StateError, ValidationError
from trafonet.types import WindowFn

FS = 48000.0


def _sig(x, fs=FS):
    return AudioSignal(np.asarray(x, dtype=np.float64), fs)


# ----- framing -----

@pytest.mark.parametrize("n,expected", [(17408, 17), (1024, 1), (2047, 1)])
def test_frame_counts(n, expected):
    frames = frame_signal(_sig(np.zeros(n)), StftConfig(1024, 1024))
    assert frames.shape == (expected, 1024)


def test_frame_count_formula_random():
    rng = np.random.default_rng(36)
    for _ in range(200):
        length = int(rng.integers(1, 65))
        hop = int(rng.integers(1, length + 1))
        n = int(rng.integers(length, 400))
        frames = frame_signal(_sig(np.arange(n)), StftConfig(length, hop))
        assert frames.shape[0] == (n - length) // hop + 1
        assert frames[-1][0] == (frames.shape[0] - 1) * hop


def test_short_signal_raises():
    with pytest.raises(LengthError):
        frame_signal(_sig(np.zeros(100)), StftConfig(256, 256))


def test_stft_config_rejects_bad_hop():
    with pytest.raises(ConfigError):
        StftConfig(256, 512)
    with pytest.raises(ConfigError):
        StftConfig(256, 0)


def test_audio_rejects_nan():
    with pytest.raises(ValidationError):
        _sig([0.0, np.nan])


# ----- STFT -----

def test_stft_matches_naive_dft():
    rng = np.random.default_rng(37)
    x = rng.standard_normal(4096)
    cfg = StftConfig(256, 128)
    spec = stft(_sig(x), cfg)
    w = cfg.window()
    n = np.arange(256)
    k = np.arange(129)
    basis = np.exp(-2j * np.pi * ((k[:, None] * n[None, :]) % 256) / 256)
    for t in range(spec.shape[1]):
        frame = x[t * 128:t * 128 + 256] * w
        assert np.max(np.abs(spec.values[:, t] - np.abs(basis @ frame))) < 1e-9
    assert spec.shape == (129, 31)


def test_on_bin_cosine_rect_window():
    n = np.arange(4 * 256)
    x = np.cos(2 * np.pi * 10 * n / 256)
    spec = stft(_sig(x), StftConfig(256, 256, WindowFn.RECT))
    assert np.all(np.argmax(spec.values, axis=0) == 10)
    assert np.max(np.abs(spec.values[10] - 128.0)) < 1e-9


def test_stft_axes():
    spec = stft(_sig(np.zeros(17408)), StftConfig())
    assert spec.shape == (513, 17)
    assert spec.freq_axis_hz[1] == pytest.approx(FS / 1024)
    assert spec.freq_axis_hz[-1] == pytest.approx(FS / 2)
    assert spec.time_axis_s[1] == pytest.approx(1024 / FS)
    assert not spec.values.any()


def test_overlap_add_reconstructs():
    rng = np.random.default_rng(38)
    x = rng.standard_normal(4096)
    cfg = StftConfig(256, 64)
    y = istft_overlap_add(_complex_stft(_sig(x), cfg), cfg, x.size)
    # the periodic Hann window is zero at the very first sample
    assert np.max(np.abs(y[1:] - x[1:])) < 1e-9


# ----- dB -----

def test_to_db_values():
    spec = stft(_sig(np.zeros(1024)), StftConfig())
    spec.values[:3, 0] = [1.0, 10.0, 0.0]
    db = to_db(spec)
    assert db.is_db
    assert db.values[0, 0] == pytest.approx(0.0)
    assert db.values[1, 0] == pytest.approx(20.0)
    assert db.values[2, 0] == pytest.approx(-120.0)


def test_to_db_twice_raises():
    db = to_db(stft(_sig(np.ones(1024)), StftConfig()))
    with pytest.raises(StateError):
        to_db(db)


# ----- Mel -----

def test_filterbank_shape_and_triangles():
    bank = mel_filterbank(64, 513, 20.0, 16000.0, FS)
    assert bank.shape == (64, 513)
    assert np.all(bank >= 0.0)
    for row in bank:
        nz = np.flatnonzero(row > 0.0)
        assert nz.size > 0
        assert nz[-1] - nz[0] + 1 == nz.size
        d = np.diff(row[nz[0]:nz[-1] + 1])
        falling = np.flatnonzero(d < 0)
        if falling.size:
            assert np.all(d[falling[0]:] <= 0.0)


def test_filterbank_bounds():
    assert mel_filterbank(2, 513, 20.0, 16000.0, FS).shape == (2, 513)
    with pytest.raises(ConfigError):
        mel_filterbank(1, 513, 20.0, 16000.0, FS)
    with pytest.raises(ConfigError):
        mel_filterbank(64, 513, 20.0, 30000.0, FS)
    with pytest.raises(ConfigError):
        mel_filterbank(200, 9, 20.0, 16000.0, FS)


def test_mel_spectrogram_shape():
    x = np.random.default_rng(39).standard_normal(17408)
    mel = mel_spectrogram(_sig(x), StftConfig())
    assert mel.shape == (64, 17)
    assert mel.is_db and mel.scale == "mel"


def test_mel_tone_lands_in_nearest_band():
    t = np.arange(17408) / FS
    mel = mel_spectrogram(_sig(np.sin(2 * np.pi * 1000.0 * t)), StftConfig())
    k = int(np.argmax(mel.values.mean(axis=1)))
    centers = mel.freq_axis_hz
    width = max(centers[k] - centers[k - 1], centers[k + 1] - centers[k])
    assert abs(centers[k] - 1000.0) < width


def test_mel_of_silence_hits_floor():
    mel = mel_spectrogram(_sig(np.zeros(4096)), StftConfig())
    assert np.allclose(mel.values, -120.0, atol=1e-9)


# ----- files -----

def test_audio_text_roundtrip(tmp_path):
    x = np.random.default_rng(40).standard_normal(300)
    path = tmp_path / "a.txt"
    write_audio(path, _sig(x, 8000.0))
    back = read_audio(path, 8000.0)
    assert np.array_equal(back.samples, x)
    with pytest.raises(ConfigError):
        read_audio(path)


def test_malformed_text_files_raise_validation_error(tmp_path):
    audio = tmp_path / "a.txt"
    audio.write_text("0.1\nloud\n")
    with pytest.raises(ValidationError, match="a.txt"):
        read_audio(audio, 8000.0)
    table = tmp_path / "s.csv"
    table.write_text("1,2\n3,4\n")
    with pytest.raises(ValidationError, match="freq_axis_hz"):
        load_spectrogram_csv(table)


def test_audio_wav_roundtrip(tmp_path):
    x = 0.5 * np.sin(np.arange(2000) / 10.0)
    path = tmp_path / "a.wav"
    write_audio(path, _sig(x))
    back = read_audio(path)
    assert back.sample_rate_hz == FS
    assert np.max(np.abs(back.samples - x)) < 1e-6


def test_spectrogram_csv_roundtrip(tmp_path):
    x = np.random.default_rng(41).standard_normal(4096)
    spec = to_db(stft(_sig(x), StftConfig(256, 256)))
    path = tmp_path / "s.csv"
    export_spectrogram_csv(path, spec)
    back = load_spectrogram_csv(path)
    assert np.array_equal(back.values, spec.values)
    assert np.array_equal(back.freq_axis_hz, spec.freq_axis_hz)
    assert np.array_equal(back.time_axis_s, spec.time_axis_s)
    assert back.is_db and back.scale == "linear"
