import numpy as np
import pytest

from trafonet.dsp import AudioSignal, Spectrogram, StftConfig, mel_spectrogram, read_audio
from trafonet.errors import ConfigError, ValidationError
from trafonet.oltc import (
    LabeledClip,
    OltcState,
    SynthConfig,
    add_noise,
    background_noise,
    class_means,
    clip_features,
    estimate_noise_profile,
    export_dataset,
    generate_clip,
    generate_dataset,
    measure_snr_db,
    nearest_mean_predict,
    spectral_denoise,
)
from trafonet.storage import Storage
from trafonet.types import NoiseColor

FS = 48000.0


def _band_fraction(x, lo_hz, hi_hz, fs=FS):
    p = np.abs(np.fft.rfft(x)) ** 2
    f = np.fft.rfftfreq(x.size, 1.0 / fs)
    return p[(f >= lo_hz) & (f < hi_hz)].sum() / p.sum()


# ----- states -----

def test_state_parse():
    assert OltcState.parse(5) == OltcState.DIVERTER_SWITCH
    assert OltcState.parse("7") == OltcState.BRAKING
    assert OltcState.parse("geneva-drive") == OltcState.GENEVA_DRIVE
    assert OltcState.IDLE.label == "idle/motor-hum"
    with pytest.raises(ValidationError):
        OltcState.parse(8)
    with pytest.raises(ValidationError):
        OltcState.parse("humming")


# ----- synthesis -----

def test_clip_is_deterministic():
    a = generate_clip(3, SynthConfig(seed=5, jitter=0.2))
    b = generate_clip(3, SynthConfig(seed=5, jitter=0.2))
    c = generate_clip(3, SynthConfig(seed=6, jitter=0.2))
    assert np.array_equal(a.signal.samples, b.signal.samples)
    assert not np.array_equal(a.signal.samples, c.signal.samples)
    assert a.signal.samples.shape == (17408,)


def test_idle_state_is_low_frequency():
    clip = generate_clip(OltcState.IDLE, SynthConfig(seed=1))
    assert _band_fraction(clip.signal.samples, 0.0, 1200.0) > 0.99
    mel = mel_spectrogram(clip.signal, StftConfig()).values.mean(axis=1)
    centers = mel_spectrogram(clip.signal, StftConfig()).freq_axis_hz
    assert np.all(mel[centers > 4000.0] <= mel.max() - 60.0)


@pytest.mark.parametrize("seed", range(5))
def test_diverter_switch_is_broadband(seed):
    idle = generate_clip(OltcState.IDLE, SynthConfig(seed=seed, jitter=0.2)).signal.samples
    switch = generate_clip(OltcState.DIVERTER_SWITCH, SynthConfig(seed=seed, jitter=0.2)).signal.samples
    assert _band_fraction(switch, 4000.0, FS / 2) >= 10 * _band_fraction(idle, 4000.0, FS / 2)


def test_dataset_is_balanced_and_class_major():
    clips = generate_dataset(2, SynthConfig(segment_samples=2048, seed=3))
    assert len(clips) == 14
    assert [int(c.label) for c in clips] == [k for k in range(1, 8) for _ in range(2)]
    assert len({c.seed for c in clips}) == 14
    with pytest.raises(ValidationError):
        generate_dataset(0, SynthConfig())


def _mel_features(clips):
    return np.stack([clip_features(c, StftConfig()) for c in clips])


def _labels(clips):
    return np.array([int(c.label) - 1 for c in clips])


def test_states_are_separable_under_jitter():
    train = generate_dataset(4, SynthConfig(seed=17, jitter=0.2))
    test = generate_dataset(3, SynthConfig(seed=18, jitter=0.2))
    means = class_means(_mel_features(train), _labels(train), len(OltcState))
    predicted = nearest_mean_predict(means, _mel_features(test))
    assert np.mean(predicted == _labels(test)) >= 0.8


def test_between_class_distance_exceeds_within_class():
    clips = generate_dataset(3, SynthConfig(seed=19, jitter=0.2))
    flat = _mel_features(clips).reshape(len(clips), -1)
    labels = _labels(clips)
    d = np.sqrt(((flat[:, None, :] - flat[None, :, :]) ** 2).sum(axis=2))
    same = labels[:, None] == labels[None, :]
    off_diagonal = ~np.eye(len(clips), dtype=bool)
    assert d[~same].mean() > d[same & off_diagonal].mean()


def test_synth_config_bounds():
    with pytest.raises(ConfigError):
        SynthConfig(segment_samples=512)
    with pytest.raises(ConfigError):
        SynthConfig(jitter=0.6)


# ----- noise -----

@pytest.mark.parametrize("snr", [-5.0, 0.0, 5.0, 10.0, 15.0, 20.0, 25.0, 30.0, 35.0, 40.0])
@pytest.mark.parametrize("color", [NoiseColor.WHITE, NoiseColor.PINK])
def test_add_noise_hits_snr(snr, color):
    clip = generate_clip(OltcState.GENEVA_DRIVE, SynthConfig(seed=4))
    noisy = add_noise(clip, snr, color, seed=9)
    assert noisy.snr_db == snr
    assert np.array_equal(noisy.reference, clip.signal.samples)
    assert measure_snr_db(noisy.reference, noisy.signal.samples) == pytest.approx(snr, abs=0.1)
    assert noisy.noise_power == pytest.approx(np.mean((noisy.signal.samples - clip.signal.samples) ** 2), rel=1e-9)


def test_add_noise_rejects_silence():
    silent = LabeledClip(AudioSignal(np.zeros(2048), FS), OltcState.IDLE)
    with pytest.raises(ValidationError):
        add_noise(silent, 10.0)


def test_pink_noise_is_heavier_at_low_frequencies():
    white = background_noise(48000, FS, 1.0, NoiseColor.WHITE, seed=1)
    pink = background_noise(48000, FS, 1.0, NoiseColor.PINK, seed=1)
    assert white.power() == pytest.approx(1.0)
    assert pink.power() == pytest.approx(1.0)
    assert _band_fraction(pink.samples, 0.0, 1000.0) > _band_fraction(white.samples, 0.0, 1000.0)


# ----- spectral subtraction -----

def test_zero_profile_reconstructs():
    clip = generate_clip(OltcState.SELECTOR_STOP, SynthConfig(seed=8))
    profile = estimate_noise_profile(AudioSignal(np.zeros(4096), FS), StftConfig())
    out = spectral_denoise(clip, profile).signal.samples
    x = clip.signal.samples
    assert out.shape == x.shape
    assert np.linalg.norm(out - x) / np.linalg.norm(x) < 1e-3


def test_denoise_improves_snr():
    clip = generate_clip(OltcState.IDLE, SynthConfig(seed=10))
    noisy = add_noise(clip, 10.0, NoiseColor.WHITE, seed=11)
    noise_power = clip.signal.power() / 10.0
    profile = estimate_noise_profile(background_noise(clip.signal.samples.size, FS, noise_power, seed=12), StftConfig())
    denoised = spectral_denoise(noisy, profile)
    assert denoised.reference is noisy.reference
    assert denoised.noise_power == noisy.noise_power
    assert measure_snr_db(clip.signal.samples, denoised.signal.samples) >= 13.0


def test_denoise_removes_most_of_pure_noise():
    noise = background_noise(17408, FS, 0.01, seed=13)
    profile = estimate_noise_profile(background_noise(17408, FS, 0.01, seed=14), StftConfig())
    out = spectral_denoise(LabeledClip(noise, OltcState.IDLE), profile)
    assert out.signal.power() <= 0.1 * noise.power()


def test_denoise_rejects_mismatched_profile():
    clip = generate_clip(OltcState.IDLE, SynthConfig(seed=15))
    cfg = StftConfig()
    wrong = Spectrogram(np.zeros((cfg.n_bins, 1)), np.arange(cfg.n_bins), np.zeros(1), config=cfg)
    with pytest.raises(ConfigError):
        spectral_denoise(clip, wrong)
    bare = Spectrogram(np.zeros((cfg.n_bins, 1)), np.arange(cfg.n_bins), np.zeros(1))
    with pytest.raises(ConfigError):
        spectral_denoise(clip, bare)


# ----- baseline / export -----

def test_nearest_mean():
    features = np.array([[0.0, 0.0], [0.2, 0.0], [5.0, 5.0], [5.2, 5.0]])
    labels = np.array([0, 0, 1, 1])
    means = class_means(features, labels, 2)
    assert np.allclose(means, [[0.1, 0.0], [5.1, 5.0]])
    assert nearest_mean_predict(means, np.array([[1.0, 1.0], [4.0, 4.0]])).tolist() == [0, 1]


def test_export_dataset(tmp_path):
    clips = generate_dataset(1, SynthConfig(segment_samples=1024, seed=16))
    clips[0] = add_noise(clips[0], 5.0, seed=1)
    storage = Storage(tmp_path / "data")
    export_dataset(clips, storage)
    rows = storage.read_csv("manifest.csv")
    assert len(rows) == 7
    assert rows[0]["snr_db"] == "5.0" and rows[1]["snr_db"] == ""
    assert [r["label_id"] for r in rows] == [str(k) for k in range(1, 8)]
    back = read_audio(storage.path(rows[4]["filename"]))
    assert back.samples.size == 1024
    assert rows[4]["label_name"] == "diverter-switch"
