"""Benchmark, crash-injection, and oracle-equivalence harness."""
