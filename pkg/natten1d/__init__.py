"""One-dimensional neighborhood attention kernel and its benchmark."""

from .kernel import (NAContext, NeighborMap, NeighborhoodSpec, attention_weights,
                     flops_na_forward, flops_na_reference, na_backward, na_forward,
                     na_reference, neighbor_indices, neighborhood_attention, score_bytes_na_forward,
                     score_bytes_na_reference, window_starts)
from .bench import bench_scaling, doubling_ratios, read_bench_csv, read_bench_meta, write_bench_csv

__all__ = [
    "NAContext", "NeighborMap", "NeighborhoodSpec", "attention_weights", "flops_na_forward",
    "flops_na_reference", "na_backward", "na_forward", "na_reference", "neighbor_indices",
    "neighborhood_attention", "window_starts", "bench_scaling", "doubling_ratios",
    "read_bench_csv", "read_bench_meta", "score_bytes_na_forward", "score_bytes_na_reference",
    "write_bench_csv",
]
