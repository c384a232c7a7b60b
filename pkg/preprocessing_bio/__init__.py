"""Signal preprocessing for multi-lead ECG records.

This module provides the fixed preprocessing chain applied before the model:
- Denoising (zero-phase Butterworth band-pass)
- Normalization (per-lead z-score)
- Resampling (2:1 decimation after the band-pass)
- Segmentation (zero-padding or non-overlapping fixed-length windows)

The array-level classes work on (leads, samples) arrays; the record-level
functions and `ECGPipeline` work on `SignalRecord`s.
"""

from dataclasses import asdict, dataclass
from typing import Any, Dict, List, Tuple
import logging

import numpy as np
from scipy import signal, stats

from acquisition import SignalRecord
from utils.error_handling import ConfigurationError

logger = logging.getLogger(__name__)


class SignalDenoising:
    """Class for signal denoising operations."""

    @staticmethod
    def bandpass_filter(data: np.ndarray, lowcut: float, highcut: float, fs: float, order: int = 4) -> np.ndarray:
        """Apply a zero-phase Butterworth band-pass along the last axis.

        Args:
            data: Input signal array, (..., samples)
            lowcut: Lower frequency cutoff in Hz
            highcut: Higher frequency cutoff in Hz
            fs: Sampling frequency in Hz
            order: Filter order

        Returns:
            Filtered signal array of the same shape
        """
        if fs <= 2 * highcut:
            raise ConfigurationError(f"Sampling rate {fs} Hz is too low for a {highcut} Hz band edge",
                                     f"fs must exceed {2 * highcut} Hz")
        if not 0 < lowcut < highcut:
            raise ConfigurationError(f"Invalid band ({lowcut}, {highcut}) Hz")
        sos = signal.butter(order, [lowcut, highcut], btype='band', fs=fs, output='sos')
        padlen = min(3 * (2 * len(sos) + 1), data.shape[-1] - 1)
        return signal.sosfiltfilt(sos, data, axis=-1, padlen=padlen)


class SignalNormalization:
    """Class for signal normalization methods."""

    @staticmethod
    def zscore_normalize(data: np.ndarray, std_floor: float = 1e-8) -> np.ndarray:
        """Per-lead z-score; leads with std below `std_floor` become zeros.

        Args:
            data: Input signal array, (..., samples)
            std_floor: Smallest standard deviation treated as non-constant

        Returns:
            Normalized signal array
        """
        data = np.asarray(data, dtype=np.float64)
        constant = data.std(axis=-1, keepdims=True) < std_floor
        with np.errstate(divide="ignore", invalid="ignore"):
            scores = stats.zscore(data, axis=-1)
        return np.where(constant, 0.0, scores)


class SignalResampling:
    """Class for sample-rate conversion."""

    @staticmethod
    def decimate_half(data: np.ndarray) -> Tuple[np.ndarray, bool]:
        """Keep every second sample; odd lengths lose their last sample first.

        Returns:
            (decimated array, whether a trailing sample was dropped)
        """
        dropped = data.shape[-1] % 2 == 1
        if dropped:
            data = data[..., :-1]
        return data[..., ::2], dropped


class SignalSegmentation:
    """Class for signal segmentation operations."""

    @staticmethod
    def fixed_window(data: np.ndarray, window_size: int) -> np.ndarray:
        """Segment signal into non-overlapping windows; the remainder is dropped.

        Args:
            data: Input signal array, (..., samples)
            window_size: Size of each window

        Returns:
            Array of windows, (n_windows, ..., window_size)
        """
        n_windows = data.shape[-1] // window_size
        return np.stack([data[..., i * window_size:(i + 1) * window_size] for i in range(n_windows)])

    @staticmethod
    def zero_pad(data: np.ndarray, target: int) -> np.ndarray:
        """Right-pad the last axis with zeros up to `target` samples."""
        pad = target - data.shape[-1]
        widths = [(0, 0)] * (data.ndim - 1) + [(0, max(pad, 0))]
        return np.pad(data, widths)


def bandpass(record: SignalRecord, lo: float = 0.5, hi: float = 40.0, order: int = 4) -> SignalRecord:
    filtered = SignalDenoising.bandpass_filter(record.signal.astype(np.float64), lo, hi, record.fs, order)
    return record.with_signal(filtered.astype(np.float32))


def normalize(record: SignalRecord) -> SignalRecord:
    return record.with_signal(SignalNormalization.zscore_normalize(record.signal).astype(np.float32))


def resample_half(record: SignalRecord) -> SignalRecord:
    """Halve the sampling rate by decimation; relies on a prior low-pass below fs/4."""
    decimated, dropped = SignalResampling.decimate_half(record.signal)
    if dropped:
        logger.warning(f"Record {record.record_id or '<unnamed>'} has odd length "
                       f"{record.samples}; dropped the last sample before decimation")
    return record.with_signal(np.ascontiguousarray(decimated), fs=record.fs / 2.0)


def fix_length(record: SignalRecord, target: int = 2500) -> List[SignalRecord]:
    """Pad short records; cut long ones into non-overlapping windows.

    The first window is marked primary. A trailing remainder shorter than
    `target` is discarded.
    """
    if target < 1:
        raise ConfigurationError(f"Target length must be positive, got {target}")
    if record.samples <= target:
        return [record.with_signal(SignalSegmentation.zero_pad(record.signal, target), primary=True, segment=0)]
    windows = SignalSegmentation.fixed_window(record.signal, target)
    remainder = record.samples - windows.shape[0] * target
    if remainder:
        logger.debug(f"Record {record.record_id}: discarded {remainder}-sample remainder")
    return [record.with_signal(np.ascontiguousarray(w), primary=(i == 0), segment=i)
            for i, w in enumerate(windows)]


@dataclass
class ECGPipeline:
    """Band-pass -> z-score -> 2:1 resample -> fixed length, in that order.

    Records already at `target_fs` skip the resampling step.
    """
    band_lo: float = 0.5
    band_hi: float = 40.0
    order: int = 4
    target_fs: float = 250.0
    target_len: int = 2500

    steps = ("bandpass", "normalize", "resample_half", "fix_length")

    def __call__(self, record: SignalRecord) -> List[SignalRecord]:
        record = bandpass(record, self.band_lo, self.band_hi, self.order)
        record = normalize(record)
        if not np.isclose(record.fs, self.target_fs):
            if not np.isclose(record.fs, 2 * self.target_fs):
                raise ConfigurationError(
                    f"Record {record.record_id} is sampled at {record.fs} Hz",
                    f"only {self.target_fs} Hz and {2 * self.target_fs} Hz inputs are supported")
            record = resample_half(record)
        return fix_length(record, self.target_len)

    def process(self, record: SignalRecord) -> SignalRecord:
        """The primary window only."""
        return self(record)[0]

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ECGPipeline":
        return cls(**{k: v for k, v in data.items() if k in cls.__dataclass_fields__})

    @classmethod
    def from_run_config(cls, config) -> "ECGPipeline":
        return cls(band_lo=config.band_lo, band_hi=config.band_hi,
                   target_fs=config.fs / 2.0, target_len=config.input_len)


__all__ = [
    "SignalDenoising", "SignalNormalization", "SignalResampling", "SignalSegmentation",
    "bandpass", "normalize", "resample_half", "fix_length", "ECGPipeline",
]
