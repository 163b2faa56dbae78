import numpy as np
import pytest

from bugsong.audio import AudioClip, write_wav


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_tone(freq_hz: float, duration_s: float, sample_rate: int = 44100,
              amp: float = 0.5) -> np.ndarray:
    t = np.arange(int(round(duration_s * sample_rate))) / sample_rate
    return (amp * np.sin(2 * np.pi * freq_hz * t)).astype(np.float32)


def write_tone_corpus(root, species: dict[str, float], files_per_class: int = 4,
                      duration_s: float = 3.0, sample_rate: int = 44100):
    """Tiny corpus: one pure tone per species, slight per-file detune."""
    for name, freq in species.items():
        for k in range(files_per_class):
            tone = make_tone(freq * (1.0 + 0.01 * k), duration_s, sample_rate)
            write_wav(root / name / f"{name}_{k}.wav",
                      AudioClip(tone, sample_rate))
    return root
