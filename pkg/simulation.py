import logging
from abc import ABC, abstractmethod
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
from scipy.signal import find_peaks

from acquisition import DatasetManifest, ManifestEntry, SignalRecord, write_record
from utils import ProgressTracker
from utils.error_handling import ConfigurationError

logger = logging.getLogger(__name__)

# (heart rate in bpm, relative inter-beat jitter) per synthetic class
CLASS_RHYTHMS: Dict[int, Tuple[float, float]] = {
    0: (60.0, 0.0),    # regular sinus rhythm
    1: (150.0, 0.0),   # rate shift
    2: (60.0, 0.4),    # irregular rhythm
}
CLASS_NAMES = ("sinus_60", "tachy_150", "irregular_60")

# Relative R amplitude of I, II, III, aVR, aVL, aVF, V1-V6.
LEAD_TEMPLATE = np.array([1.0, 1.2, 0.6, -0.9, 0.4, 0.9, 0.5, 0.9, 1.3, 1.4, 1.2, 0.9])


class Simulator(ABC):
    """Base class for biosignal simulation."""

    def __init__(self, sampling_rate: float = 500.0, duration: float = 10.0,
                 rng: Optional[np.random.Generator] = None):
        """
        Initialize simulator with basic parameters.

        Args:
            sampling_rate (float): Sampling frequency in Hz
            duration (float): Signal duration in seconds
            rng (np.random.Generator, optional): Source of all randomness
        """
        if sampling_rate <= 0 or duration <= 0:
            raise ConfigurationError("Sampling rate and duration must be positive",
                                     f"got fs={sampling_rate}, duration={duration}")
        self.sampling_rate = sampling_rate
        self.duration = duration
        self.n_samples = int(round(self.sampling_rate * self.duration))
        self.time = np.arange(self.n_samples) / self.sampling_rate
        self.rng = rng if rng is not None else np.random.default_rng()

    def add_noise(self, signal: np.ndarray, std: float = 0.05) -> np.ndarray:
        """
        Add white Gaussian noise to the signal.

        Args:
            signal (np.ndarray): Input signal
            std (float): Noise standard deviation

        Returns:
            np.ndarray: Signal with added noise
        """
        return signal + self.rng.normal(0.0, std, size=signal.shape)

    @abstractmethod
    def generate(self, **kwargs) -> np.ndarray:
        """Generate a synthetic signal."""


class ECGSimulator(Simulator):
    """Synthetic multi-lead ECG built from Gaussian-bump P, QRS and T waves.

    Example usage:
    ```python
    ecg_sim = ECGSimulator(sampling_rate=500, duration=10.0, rng=np.random.default_rng(0))
    regular = ecg_sim.generate(heart_rate=60.0)
    irregular = ecg_sim.generate(heart_rate=60.0, jitter=0.4)
    record = ecg_sim.simulate_class(2, record_id="rec_00001")
    ```
    """

    def generate_waveform(self, wave_type: str, r_amp: float = 1.0) -> Tuple[np.ndarray, float]:
        """Generate one ECG wave component and its offset (s) relative to the QRS."""
        def gauss(t, center, sigma):
            return np.exp(-0.5 * ((t - center) / sigma) ** 2)

        if wave_type == 'p':
            t = np.linspace(-0.05, 0.05, int(round(0.1 * self.sampling_rate)))
            wave = 0.15 * gauss(t, 0.0, 0.02)
            offset = -0.2
        elif wave_type == 'qrs':
            t = np.linspace(-0.05, 0.05, int(round(0.1 * self.sampling_rate)))
            wave = (-0.15 * gauss(t, -0.02, 0.006) + r_amp * gauss(t, 0.0, 0.008)
                    - 0.25 * gauss(t, 0.02, 0.006))
            offset = 0.0
        elif wave_type == 't':
            t = np.linspace(-0.12, 0.12, int(round(0.24 * self.sampling_rate)))
            wave = 0.25 * gauss(t, 0.0, 0.04)
            offset = 0.2
        else:
            raise ConfigurationError(f"Unsupported wave type: {wave_type}")
        # templates start on the baseline
        return wave - wave[0], offset

    def _add_wave(self, signal: np.ndarray, wave: np.ndarray, start: int) -> None:
        lo, hi = max(start, 0), min(start + len(wave), self.n_samples)
        if lo < hi:
            signal[lo:hi] += wave[lo - start:hi - start]

    def _add_normal_beat(self, signal: np.ndarray, beat_start: int, r_amp: float = 1.0) -> None:
        """Add the P, QRS and T waves of one beat whose QRS starts at `beat_start`."""
        for wave_type in ('p', 'qrs', 't'):
            wave, offset = self.generate_waveform(wave_type, r_amp)
            self._add_wave(signal, wave, beat_start + int(offset * self.sampling_rate))

    def beat_times(self, heart_rate: float, jitter: float = 0.0) -> np.ndarray:
        """Beat onsets in seconds; each interval is scaled by U(1 - jitter, 1 + jitter)."""
        if heart_rate <= 0:
            raise ConfigurationError(f"Heart rate must be positive, got {heart_rate}")
        if not 0 <= jitter < 1:
            raise ConfigurationError(f"Jitter must be in [0, 1), got {jitter}")
        base = 60.0 / heart_rate
        times = []
        t = self.rng.uniform(0.0, base)
        while t < self.duration:
            times.append(t)
            t += base * (1.0 + self.rng.uniform(-jitter, jitter)) if jitter else base
        return np.asarray(times)

    def generate(self, heart_rate: float = 60.0, jitter: float = 0.0, r_amp: float = 1.0,
                 beats: Optional[np.ndarray] = None) -> np.ndarray:
        """Noise-free single-lead rhythm strip."""
        beats = self.beat_times(heart_rate, jitter) if beats is None else beats
        signal = np.zeros(self.n_samples)
        for onset in beats:
            self._add_normal_beat(signal, int(round(onset * self.sampling_rate)), r_amp)
        return signal

    def simulate_leads(self, heart_rate: float, jitter: float = 0.0, n_leads: int = 12,
                       noise_std: float = 0.05) -> np.ndarray:
        """All leads share one beat train; each gets its own gain and noise."""
        base = self.generate(heart_rate, jitter, r_amp=self.rng.uniform(0.8, 1.2))
        gains = np.resize(LEAD_TEMPLATE, n_leads) * self.rng.uniform(0.7, 1.3, size=n_leads)
        return self.add_noise(gains[:, None] * base[None, :], noise_std)

    def simulate_class(self, label: int, record_id: str = "", n_leads: int = 12,
                       noise_std: float = 0.05) -> SignalRecord:
        if label not in CLASS_RHYTHMS:
            raise ConfigurationError(f"Unknown synthetic class {label}", f"known: {sorted(CLASS_RHYTHMS)}")
        rate, jitter = CLASS_RHYTHMS[label]
        leads = self.simulate_leads(rate, jitter, n_leads, noise_std)
        return SignalRecord(signal=leads.astype(np.float32), fs=self.sampling_rate,
                            label=label, record_id=record_id)


def count_beats(lead: np.ndarray, fs: float) -> int:
    """R-peak count of one lead: peaks above half the largest deflection, >= 250 ms apart."""
    lead = np.abs(np.asarray(lead, dtype=np.float64) - np.median(lead))
    peaks, _ = find_peaks(lead, height=0.5 * lead.max(), distance=max(1, int(0.25 * fs)))
    return int(peaks.size)


def synth_records(n_per_class: int, seed: int = 0, sampling_rate: float = 500.0,
                  duration: float = 10.0, n_leads: int = 12, noise_std: float = 0.05,
                  progress: bool = False) -> List[SignalRecord]:
    """Balanced, class-interleaved synthetic records; identical for identical seeds."""
    if n_per_class < 1:
        raise ConfigurationError(f"n_per_class must be >= 1, got {n_per_class}")
    sim = ECGSimulator(sampling_rate, duration, rng=np.random.default_rng(seed))
    records: List[SignalRecord] = []
    with ProgressTracker(n_per_class * len(CLASS_RHYTHMS), desc="synth", disable=not progress) as tracker:
        for _ in range(n_per_class):
            for label in sorted(CLASS_RHYTHMS):
                record_id = f"rec_{len(records):05d}"
                records.append(sim.simulate_class(label, record_id, n_leads, noise_std))
                tracker.update()
    return records


def synth_corpus(out_dir: Union[str, Path], n_per_class: int, seed: int = 0,
                 progress: bool = False, **kwargs) -> DatasetManifest:
    """Write synthetic records plus `manifest.csv` under `out_dir`."""
    out_dir = Path(out_dir)
    record_dir = out_dir / "records"
    entries = []
    for record in synth_records(n_per_class, seed, progress=progress, **kwargs):
        sidecar = write_record(record, record_dir)
        entries.append(ManifestEntry(path=sidecar.relative_to(out_dir).as_posix(), label=record.label))
    manifest = DatasetManifest(entries=entries, root=out_dir)
    manifest.write(out_dir / "manifest.csv")
    logger.info(f"Wrote {len(entries)} synthetic records to {out_dir}")
    return manifest
