"""Wall-clock scaling benchmark: windowed kernel vs masked dense attention."""

from pathlib import Path
from typing import Dict, List, Sequence, Union
import logging
import time

import numpy as np
import pandas as pd

from autograd import no_grad
from utils import ProgressTracker, load_data, save_data
from utils.error_handling import ConfigurationError
from .kernel import (flops_na_forward, flops_na_reference, na_forward, na_reference, score_bytes_na_forward,
                     score_bytes_na_reference)

logger = logging.getLogger(__name__)

CSV_COLUMNS = ["n", "impl", "flops_est", "mean_ms", "std_ms"]
EXTRA_COLUMNS = ["median_ms", "score_bytes"]
FORMULAS = {
    "flops_est": {"na_forward": "heads*n*min(k,n)*(4d+5)", "na_reference": "heads*n*n*(4d+5)"},
    "score_bytes": {"na_forward": "heads*n*min(k,n)*itemsize", "na_reference": "heads*n*n*itemsize"},
}
IMPLS = ("na_forward", "na_reference")


def _time_call(fn, repeats: int) -> np.ndarray:
    fn()  # warm-up
    times = np.empty(repeats)
    for r in range(repeats):
        start = time.perf_counter()
        fn()
        times[r] = (time.perf_counter() - start) * 1000.0
    return times


def bench_scaling(k: int, lengths: Sequence[int], d: int, heads: int, repeats: int = 10,
                  seed: int = 0, impls: Sequence[str] = IMPLS, dtype=np.float32,
                  progress: bool = False) -> pd.DataFrame:
    """Time each implementation at every sequence length.

    Returns a frame with columns n, impl, flops_est, mean_ms, std_ms, median_ms
    and score_bytes. The medians feed `doubling_ratios`; score_bytes is the
    analytic size of the attention score buffer each implementation allocates.
    """
    lengths = [int(n) for n in lengths]
    if not lengths or lengths != sorted(lengths):
        raise ConfigurationError("Benchmark lengths must be non-empty and ascending", f"got {lengths}")
    if repeats < 1:
        raise ConfigurationError(f"repeats must be >= 1, got {repeats}")
    unknown = set(impls) - set(IMPLS)
    if unknown:
        raise ConfigurationError(f"Unknown implementations: {sorted(unknown)}")

    rng = np.random.default_rng(seed)
    itemsize = np.dtype(dtype).itemsize
    rows: List[Dict] = []
    tracker = ProgressTracker(len(lengths) * len(impls), desc="bench", disable=not progress)
    for n in lengths:
        q, kk, v = (rng.standard_normal((heads, n, d)).astype(dtype) for _ in range(3))
        bias = np.zeros((heads, 2 * k - 1), dtype=dtype)
        for impl in impls:
            if impl == "na_forward":
                fn = lambda: na_forward(q, kk, v, bias, k)  # noqa: E731
                flops = flops_na_forward(n, k, d, heads)
                score_bytes = score_bytes_na_forward(n, k, heads, itemsize)
            else:
                def fn():
                    with no_grad():
                        return na_reference(q, kk, v, bias, k)
                flops = flops_na_reference(n, d, heads)
                score_bytes = score_bytes_na_reference(n, heads, itemsize)
            times = _time_call(fn, repeats)
            rows.append({"n": n, "impl": impl, "flops_est": flops,
                         "mean_ms": float(times.mean()), "std_ms": float(times.std()),
                         "median_ms": float(np.median(times)), "score_bytes": score_bytes})
            logger.debug(f"n={n} {impl}: median {np.median(times):.3f} ms")
            tracker.update()
    tracker.close()
    return pd.DataFrame(rows)


def doubling_ratios(results: pd.DataFrame, impl: str) -> List[float]:
    """Median-time ratio between consecutive lengths of one implementation."""
    frame = results[results["impl"] == impl].sort_values("n")
    medians = frame["median_ms"].to_numpy()
    return [float(b / a) for a, b in zip(medians[:-1], medians[1:])]


def _meta_path(path: Path) -> Path:
    return path.with_name(f"{path.stem}.meta.yaml")


def write_bench_csv(results: pd.DataFrame, path: Union[str, Path]) -> Path:
    """Write the timing table and a `<stem>.meta.yaml` sidecar.

    The CSV holds exactly CSV_COLUMNS. The sidecar records the FLOP and
    score-buffer formulas plus the median and memory columns per row.
    """
    path = Path(path)
    save_data(results[CSV_COLUMNS], str(path))
    extras = results[["n", "impl"] + EXTRA_COLUMNS]
    meta = {"formulas": FORMULAS,
            "rows": [{"n": int(r.n), "impl": str(r.impl), "median_ms": float(r.median_ms),
                      "score_bytes": int(r.score_bytes)} for r in extras.itertuples(index=False)]}
    save_data(meta, str(_meta_path(path)))
    return path


def read_bench_csv(path: Union[str, Path]) -> pd.DataFrame:
    return load_data(str(path))


def read_bench_meta(path: Union[str, Path]) -> Dict:
    """The sidecar written next to a benchmark CSV."""
    return load_data(str(_meta_path(Path(path))))
