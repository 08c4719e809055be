"""Anchored branched transformer surrogate for steady-state urban wind flow."""

import os

import torch


def configure_threads() -> int:
    """Cap torch's intra-op parallelism via ABSWIFT_THREADS.

    ABSWIFT_THREADS=1 guarantees bitwise-reproducible forward passes.
    """
    raw = os.environ.get("ABSWIFT_THREADS")
    if raw:
        torch.set_num_threads(max(1, int(raw)))
    return torch.get_num_threads()


__all__ = ["configure_threads"]
