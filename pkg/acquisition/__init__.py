"""
ECG record ingestion: the on-disk record format, dataset manifests, splits
and batch loaders.

A record is a raw little-endian float32 binary (leads-major) plus a JSON
sidecar `{record_id, fs, leads, samples, label}`. A manifest is a CSV with
header `path,label,split` whose paths point at sidecars, relative to the
manifest's directory.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, Iterable, Iterator, List, Optional, Sequence, Tuple, Union
import json
import logging
import queue
import threading

import numpy as np
import numpy.typing as npt
import pandas as pd

from utils.error_handling import ConfigurationError, ContractError, DataLoadingError

logger = logging.getLogger(__name__)

RECORD_DTYPE = np.dtype("<f4")
MANIFEST_COLUMNS = ["path", "label", "split"]


@dataclass
class SignalRecord:
    """One multi-lead ECG, leads x samples."""
    signal: npt.NDArray[np.float32]
    fs: float
    label: Optional[int] = None
    record_id: str = ""
    primary: bool = True
    segment: int = 0

    def __post_init__(self):
        self.signal = np.asarray(self.signal)
        if self.signal.ndim != 2:
            raise ContractError("Record signal must be (leads, samples)",
                                f"{self.record_id}: got shape {self.signal.shape}")
        leads, samples = self.signal.shape
        if not 1 <= leads <= 12:
            raise ContractError(f"Record has {leads} leads; expected 1..12", self.record_id)
        if samples < 1:
            raise ContractError("Record has no samples", self.record_id)
        if self.fs <= 0:
            raise ContractError(f"Sampling rate must be positive, got {self.fs}", self.record_id)

    @property
    def leads(self) -> int:
        return self.signal.shape[0]

    @property
    def samples(self) -> int:
        return self.signal.shape[1]

    def with_signal(self, signal: np.ndarray, **changes) -> "SignalRecord":
        return replace(self, signal=signal, **changes)

    def sidecar(self) -> Dict:
        return {"record_id": self.record_id, "fs": self.fs, "leads": self.leads,
                "samples": self.samples, "label": self.label}


def write_record(record: SignalRecord, directory: Union[str, Path]) -> Path:
    """Write `<record_id>.bin` and `<record_id>.json`; returns the sidecar path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    if not record.record_id:
        raise ContractError("Records need a record_id to be written")
    bin_path = directory / f"{record.record_id}.bin"
    json_path = directory / f"{record.record_id}.json"
    try:
        bin_path.write_bytes(np.ascontiguousarray(record.signal, dtype=RECORD_DTYPE).tobytes())
        json_path.write_text(json.dumps(record.sidecar(), sort_keys=True))
    except OSError as e:
        raise DataLoadingError("Could not write record", str(e), file_path=str(bin_path)) from e
    return json_path


def read_record(sidecar_path: Union[str, Path]) -> SignalRecord:
    """Read a record from its JSON sidecar and the adjacent .bin payload."""
    sidecar_path = Path(sidecar_path)
    try:
        meta = json.loads(sidecar_path.read_text())
    except OSError as e:
        raise DataLoadingError("Sidecar not readable", str(e), file_path=str(sidecar_path)) from e
    except json.JSONDecodeError as e:
        raise DataLoadingError("Sidecar is not valid JSON", str(e), file_path=str(sidecar_path)) from e
    missing = [k for k in ("record_id", "fs", "leads", "samples") if k not in meta]
    if missing:
        raise DataLoadingError(f"Sidecar is missing keys {missing}", file_path=str(sidecar_path))
    bin_path = sidecar_path.with_suffix(".bin")
    try:
        raw = np.fromfile(bin_path, dtype=RECORD_DTYPE)
    except OSError as e:
        raise DataLoadingError("Record payload not readable", str(e), file_path=str(bin_path)) from e
    expected = int(meta["leads"]) * int(meta["samples"])
    if raw.size != expected:
        raise DataLoadingError("Record payload size does not match its sidecar",
                               f"expected {expected} float32 values, found {raw.size}",
                               file_path=str(bin_path))
    label = meta.get("label")
    return SignalRecord(signal=raw.reshape(int(meta["leads"]), int(meta["samples"])).astype(np.float32),
                        fs=float(meta["fs"]), label=None if label is None else int(label),
                        record_id=str(meta["record_id"]))


@dataclass
class ManifestEntry:
    path: str
    label: Optional[int] = None
    split: Optional[str] = None


@dataclass
class DatasetManifest:
    """Ordered list of records with optional labels and train/test assignment."""
    entries: List[ManifestEntry] = field(default_factory=list)
    root: Path = field(default_factory=Path)

    def __len__(self) -> int:
        return len(self.entries)

    @classmethod
    def read(cls, path: Union[str, Path]) -> "DatasetManifest":
        path = Path(path)
        if not path.exists():
            raise DataLoadingError("Manifest not found", file_path=str(path))
        try:
            frame = pd.read_csv(path, dtype={"path": str, "split": str}, keep_default_na=True)
        except (pd.errors.ParserError, pd.errors.EmptyDataError) as e:
            raise DataLoadingError("Manifest is not a valid CSV", str(e), file_path=str(path)) from e
        if list(frame.columns) != MANIFEST_COLUMNS:
            raise DataLoadingError(f"Manifest header must be {','.join(MANIFEST_COLUMNS)}",
                                   f"got {','.join(map(str, frame.columns))}", file_path=str(path))
        entries = []
        for row in frame.itertuples(index=False):
            label = None if pd.isna(row.label) else int(row.label)
            split = None if pd.isna(row.split) or not str(row.split).strip() else str(row.split).strip()
            entries.append(ManifestEntry(path=str(row.path), label=label, split=split))
        return cls(entries=entries, root=path.parent)

    def write(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        frame = pd.DataFrame(
            [{"path": e.path, "label": "" if e.label is None else e.label, "split": e.split or ""}
             for e in self.entries], columns=MANIFEST_COLUMNS)
        frame.to_csv(path, index=False)
        return path

    def resolve(self, entry: ManifestEntry) -> Path:
        p = Path(entry.path)
        return p if p.is_absolute() else self.root / p

    def labels(self) -> np.ndarray:
        """Integer labels; -1 for unlabeled rows."""
        return np.array([-1 if e.label is None else e.label for e in self.entries], dtype=np.int64)

    @property
    def has_labels(self) -> bool:
        return bool(self.entries) and all(e.label is not None for e in self.entries)

    @property
    def class_names(self) -> List[str]:
        return [f"class_{c}" for c in sorted({e.label for e in self.entries if e.label is not None})]

    def subset(self, indices: Sequence[int]) -> "DatasetManifest":
        return DatasetManifest(entries=[self.entries[i] for i in indices], root=self.root)

    def assigned_split(self) -> Optional[Tuple[np.ndarray, np.ndarray]]:
        """(train, test) indices from the split column, when every row carries one."""
        splits = [e.split for e in self.entries]
        if not splits or any(s not in ("train", "test") for s in splits):
            return None
        idx = np.arange(len(splits))
        mask = np.array([s == "train" for s in splits])
        return idx[mask], idx[~mask]


def split_indices(n: int, train_frac: float = 0.8, seed: int = 0,
                  repeats: int = 5) -> List[Tuple[np.ndarray, np.ndarray]]:
    """Seeded record-level random splits, one per repeat, sorted within each part."""
    if not 0 < train_frac < 1:
        raise ConfigurationError(f"train_frac must be in (0, 1), got {train_frac}")
    if n < 2:
        raise ConfigurationError(f"Need at least two records to split, got {n}")
    n_train = min(max(int(round(train_frac * n)), 1), n - 1)
    splits = []
    for r in range(repeats):
        perm = np.random.default_rng([seed, r]).permutation(n)
        splits.append((np.sort(perm[:n_train]), np.sort(perm[n_train:])))
    return splits


def split(manifest: DatasetManifest, train_frac: float = 0.8, seed: int = 0,
          repeats: int = 5) -> List[Tuple[DatasetManifest, DatasetManifest]]:
    return [(manifest.subset(tr), manifest.subset(te))
            for tr, te in split_indices(len(manifest), train_frac, seed, repeats)]


def label_fraction_indices(labels: np.ndarray, fraction: float, seed: int = 0) -> np.ndarray:
    """Stratified subsample keeping max(1, round(fraction * n_c)) records of every class."""
    if not 0 < fraction <= 1:
        raise ConfigurationError(f"label_fraction must be in (0, 1], got {fraction}")
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    keep = []
    for c in np.unique(labels):
        members = np.flatnonzero(labels == c)
        take = max(1, int(round(fraction * members.size)))
        keep.append(rng.choice(members, size=min(take, members.size), replace=False))
    return np.sort(np.concatenate(keep)) if keep else np.zeros(0, dtype=np.int64)


@dataclass
class ArrayDataset:
    """Preprocessed model inputs held in memory."""
    signals: npt.NDArray[np.float32]
    labels: Optional[npt.NDArray[np.int64]] = None
    record_ids: List[str] = field(default_factory=list)

    def __len__(self) -> int:
        return self.signals.shape[0]

    def subset(self, indices: Sequence[int]) -> "ArrayDataset":
        indices = np.asarray(indices, dtype=np.int64)
        return ArrayDataset(signals=self.signals[indices],
                            labels=None if self.labels is None else self.labels[indices],
                            record_ids=[self.record_ids[i] for i in indices] if self.record_ids else [])


def load_dataset(manifest: DatasetManifest,
                 transform: Optional[Callable[[SignalRecord], List[SignalRecord]]] = None,
                 all_windows: bool = False, workers: int = 4) -> ArrayDataset:
    """Decode and preprocess every manifest record (in parallel) into one array.

    `transform` maps a raw record to its fixed-length windows; only the primary
    window is kept unless `all_windows` is set.
    """
    if not manifest.entries:
        raise ConfigurationError("Manifest has no records")

    def decode(entry: ManifestEntry) -> List[SignalRecord]:
        record = read_record(manifest.resolve(entry))
        if entry.label is not None:
            record = record.with_signal(record.signal, label=entry.label)
        windows = transform(record) if transform is not None else [record]
        return windows if all_windows else [w for w in windows if w.primary][:1]

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        decoded = list(pool.map(decode, manifest.entries))

    records = [r for group in decoded for r in group]
    shapes = {r.signal.shape for r in records}
    if len(shapes) != 1:
        raise DataLoadingError("Records have inconsistent shapes after preprocessing", str(sorted(shapes)))
    signals = np.stack([r.signal for r in records]).astype(np.float32)
    labels = None
    if all(r.label is not None for r in records):
        labels = np.array([r.label for r in records], dtype=np.int64)
    logger.info(f"Loaded {len(records)} windows from {len(manifest)} records, shape {signals.shape[1:]}")
    return ArrayDataset(signals=signals, labels=labels, record_ids=[r.record_id for r in records])


Batch = Tuple[np.ndarray, Optional[np.ndarray]]
_DONE = object()


class BatchLoader:
    """Mini-batches of an ArrayDataset with per-epoch seeded shuffling.

    With prefetch > 0 a background thread assembles up to `prefetch` batches
    ahead of the consumer through a bounded queue.
    """

    def __init__(self, dataset: ArrayDataset, batch_size: int, shuffle: bool = True,
                 seed: int = 0, stream: int = 0, drop_last: bool = False, prefetch: int = 2):
        if batch_size < 1:
            raise ConfigurationError(f"batch_size must be >= 1, got {batch_size}")
        if not 0 <= prefetch <= 4:
            raise ConfigurationError(f"prefetch must be in 0..4, got {prefetch}")
        if len(dataset) == 0:
            raise ConfigurationError("Cannot batch an empty dataset")
        self.dataset = dataset
        self.batch_size = batch_size
        self.shuffle = shuffle
        self.seed = seed
        self.stream = stream
        self.drop_last = drop_last
        self.prefetch = prefetch

    def order(self, epoch: int) -> np.ndarray:
        n = len(self.dataset)
        if not self.shuffle:
            return np.arange(n)
        return np.random.default_rng([self.seed, epoch, self.stream]).permutation(n)

    def batch_indices(self, epoch: int) -> List[np.ndarray]:
        order = self.order(epoch)
        chunks = [order[i:i + self.batch_size] for i in range(0, len(order), self.batch_size)]
        if self.drop_last and chunks and len(chunks[-1]) < self.batch_size:
            chunks = chunks[:-1]
        return chunks

    def __len__(self) -> int:
        n = len(self.dataset)
        return n // self.batch_size if self.drop_last else -(-n // self.batch_size)

    def _make(self, idx: np.ndarray) -> Batch:
        labels = None if self.dataset.labels is None else self.dataset.labels[idx]
        return self.dataset.signals[idx], labels

    def epoch(self, epoch: int) -> Iterator[Batch]:
        chunks = self.batch_indices(epoch)
        if self.prefetch == 0:
            for idx in chunks:
                yield self._make(idx)
            return

        buffer: queue.Queue = queue.Queue(maxsize=self.prefetch)
        stop_flag = threading.Event()

        def produce():
            for idx in chunks + [None]:
                item = _DONE if idx is None else self._make(idx)
                while not stop_flag.is_set():
                    try:
                        buffer.put(item, timeout=0.1)
                        break
                    except queue.Full:
                        continue
                if stop_flag.is_set():
                    return

        worker = threading.Thread(target=produce, daemon=True)
        worker.start()
        try:
            while True:
                item = buffer.get()
                if item is _DONE:
                    break
                yield item
        finally:
            stop_flag.set()
            worker.join()


def round_robin(iterators: Sequence[Iterable]) -> Iterator[Tuple[int, object]]:
    """Interleave several iterables one item at a time, dropping exhausted ones."""
    active = [(i, iter(it)) for i, it in enumerate(iterators)]
    while active:
        still = []
        for i, it in active:
            try:
                item = next(it)
            except StopIteration:
                continue
            still.append((i, it))
            yield i, item
        active = still


__all__ = [
    "SignalRecord", "write_record", "read_record", "ManifestEntry", "DatasetManifest",
    "split_indices", "split", "label_fraction_indices", "ArrayDataset", "load_dataset",
    "BatchLoader", "round_robin", "RECORD_DTYPE", "MANIFEST_COLUMNS",
]
