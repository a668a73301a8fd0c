"""Unbalanced Schrodinger bridge learning for snapshot data with growth and death."""

__version__ = "0.1.0"

from .data import Snapshot, TimeSeriesDataset, load_snapshots, save_snapshots  # noqa: E402
