"""Benchmark the compiled kernel backend against the numpy fallback.

The backend is chosen once at import time from GESTICULATE_KERNELS, so this
script re-executes itself in a worker subprocess per backend, times the two
hot kernels on identical inputs, checks that both backends return identical
results, and prints a comparison table.

Usage:
    python3 benchmarks/bench_kernels.py [--repeats N]
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import statistics
import subprocess
import sys
import time

# (rows, codebook entries, channels): small = one training batch,
# large = a full corpus pass, wide = audio-style feature width.
CASES = [
    ("batch", 512, 64, 16),
    ("corpus", 8192, 64, 16),
    ("wide", 8192, 512, 32),
]


def _inputs(rows: int, k: int, channels: int):
    import numpy as np

    rng = np.random.default_rng(2024)
    latents = rng.normal(size=(rows, channels))
    entries = rng.normal(size=(k, channels))
    return latents, entries


def _time(fn, repeats: int) -> float:
    fn()  # warm-up
    samples = []
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        samples.append(time.perf_counter() - start)
    return statistics.median(samples)


def run_worker(repeats: int) -> None:
    import numpy as np

    from gesticulate import kernels

    report = {"backend": kernels.BACKEND, "cases": {}}
    for name, rows, k, channels in CASES:
        latents, entries = _inputs(rows, k, channels)
        codes = kernels.nearest_codes(latents, entries)
        counts, sums = kernels.code_stats(codes, latents, k)
        digest = hashlib.sha256()
        for arr in (codes, counts, sums):
            digest.update(np.ascontiguousarray(arr).tobytes())
        report["cases"][name] = {
            "nearest_s": _time(lambda: kernels.nearest_codes(latents, entries),
                               repeats),
            "stats_s": _time(lambda: kernels.code_stats(codes, latents, k),
                             repeats),
            "digest": digest.hexdigest(),
        }
    print(json.dumps(report))


def run_backend(backend: str, repeats: int) -> dict:
    env = dict(os.environ, GESTICULATE_KERNELS=backend)
    proc = subprocess.run(
        [sys.executable, os.path.abspath(__file__), "--worker",
         "--repeats", str(repeats)],
        env=env, capture_output=True, text=True)
    if proc.returncode != 0:
        raise SystemExit(f"{backend} worker failed:\n{proc.stderr}")
    return json.loads(proc.stdout.splitlines()[-1])


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=20,
                        help="timing repeats per case (median is reported)")
    parser.add_argument("--worker", action="store_true",
                        help=argparse.SUPPRESS)
    args = parser.parse_args()
    if args.worker:
        run_worker(args.repeats)
        return 0

    try:
        from gesticulate import _kernels  # noqa: F401
    except ImportError:
        print("compiled extension is not built; run "
              "`pip install -e . --no-build-isolation` first", file=sys.stderr)
        return 1

    results = {b: run_backend(b, args.repeats) for b in ("python", "compiled")}
    for backend, report in results.items():
        if report["backend"] != backend:
            raise SystemExit(f"worker reported backend {report['backend']}, "
                             f"expected {backend}")

    header = (f"{'case':<8} {'rows':>6} {'K':>4} {'C':>3} "
              f"{'kernel':<14} {'python':>10} {'compiled':>10} {'speedup':>8}")
    print(header)
    print("-" * len(header))
    agree = True
    for name, rows, k, channels in CASES:
        py = results["python"]["cases"][name]
        cy = results["compiled"]["cases"][name]
        agree = agree and py["digest"] == cy["digest"]
        for kernel, key in (("nearest_codes", "nearest_s"),
                            ("code_stats", "stats_s")):
            ratio = py[key] / cy[key] if cy[key] > 0 else float("inf")
            print(f"{name:<8} {rows:>6} {k:>4} {channels:>3} "
                  f"{kernel:<14} {py[key] * 1e3:>8.3f}ms {cy[key] * 1e3:>8.3f}ms "
                  f"{ratio:>7.2f}x")
    print(f"\nbackends agree on all outputs: {agree}")
    return 0 if agree else 1


if __name__ == "__main__":
    sys.exit(main())
