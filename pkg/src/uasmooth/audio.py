"""Log-Mel front-end and spectrogram augmentation."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.signal import get_window

from .errors import ConfigError


@dataclass(frozen=True)
class FrontendConfig:
    sample_rate: int = 16000
    n_fft: int = 2048  # 128 ms
    hop: int = 160  # 10 ms
    n_mels: int = 128
    f_min: float = 0.0
    f_max: float = 8000.0
    log_floor: float = 1e-10
    frames: int = 300
    clip_seconds: float = 3.0
    time_masks: int = 2
    time_mask_width: int = 24
    freq_masks: int = 2
    freq_mask_width: int = 16
    jitter_std: float = 1e-6

    def __post_init__(self) -> None:
        if self.n_fft < 2 or self.hop < 1 or self.n_mels < 1 or self.frames < 1:
            raise ConfigError(f"invalid front-end sizes: {self}")
        if not 0 <= self.f_min < self.f_max <= self.sample_rate / 2:
            raise ConfigError(f"mel range [{self.f_min}, {self.f_max}] outside [0, Nyquist]")

    @property
    def clip_samples(self) -> int:
        return int(round(self.clip_seconds * self.sample_rate))

    def to_dict(self) -> dict:
        return asdict(self)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(cfg: FrontendConfig = FrontendConfig()) -> np.ndarray:
    """(n_mels, n_fft // 2 + 1) triangular filters, equally spaced on the HTK mel scale, peak 1."""
    freqs = np.linspace(0.0, cfg.sample_rate / 2, cfg.n_fft // 2 + 1)
    pts = mel_to_hz(np.linspace(hz_to_mel(cfg.f_min), hz_to_mel(cfg.f_max), cfg.n_mels + 2))
    lo, ctr, hi = pts[:-2, None], pts[1:-1, None], pts[2:, None]
    up = (freqs - lo) / (ctr - lo)
    down = (hi - freqs) / (hi - ctr)
    return np.maximum(0.0, np.minimum(up, down))


def power_spectrogram(wave: np.ndarray, cfg: FrontendConfig = FrontendConfig()) -> np.ndarray:
    """|STFT|^2 with a periodic Hann window and centred zero padding: (frames, n_fft // 2 + 1)."""
    pad = cfg.n_fft // 2
    x = np.pad(np.asarray(wave, dtype=np.float64), (pad, pad))
    frames = sliding_window_view(x, cfg.n_fft)[:: cfg.hop]
    spec = np.fft.rfft(frames * get_window("hann", cfg.n_fft, fftbins=True), axis=-1)
    return spec.real ** 2 + spec.imag ** 2


def log_mel(wave, sample_rate: int = 16000, cfg: FrontendConfig = FrontendConfig()) -> np.ndarray:
    """Log-Mel spectrogram (frames, n_mels) of a clip; short clips are zero-padded."""
    if sample_rate != cfg.sample_rate:
        raise ValueError(f"log_mel requires {cfg.sample_rate} Hz audio, got {sample_rate} Hz")
    wave = np.asarray(wave, dtype=np.float64)
    if wave.ndim != 1:
        raise ValueError(f"log_mel expects mono audio, got shape {wave.shape}")
    n = cfg.clip_samples
    wave = np.pad(wave[:n], (0, max(0, n - wave.size)))
    mel = power_spectrogram(wave, cfg)[: cfg.frames] @ mel_filterbank(cfg).T
    return np.log(np.maximum(mel, cfg.log_floor))


def spec_augment(spec: np.ndarray, seed, cfg: FrontendConfig = FrontendConfig()) -> np.ndarray:
    """Zero random time and frequency stripes, then add small Gaussian jitter."""
    rng = np.random.default_rng(seed)
    out = np.array(spec, dtype=np.float64, copy=True)
    t, f = out.shape
    for _ in range(cfg.time_masks):
        w = min(cfg.time_mask_width, t)
        s = rng.integers(0, t - w + 1)
        out[s: s + w, :] = 0.0
    for _ in range(cfg.freq_masks):
        w = min(cfg.freq_mask_width, f)
        s = rng.integers(0, f - w + 1)
        out[:, s: s + w] = 0.0
    return out + rng.normal(0.0, cfg.jitter_std, size=out.shape)
