"""
Benchmark package for deskinfer.
"""

from .bench_cli import BenchReport, BenchRow, SweepConfig, emit, read_report, run_sweep

__all__ = ['BenchReport', 'BenchRow', 'SweepConfig', 'emit', 'read_report', 'run_sweep']
