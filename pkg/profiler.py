"""
Profiler module for the DiG desk implementation.
Wall-clock timing of kernels and model calls with warmup and repeat
control, percentile statistics and text reports.
"""
import logging
import time
from collections import Counter, defaultdict

import numpy as np

logger = logging.getLogger(__name__)


class Profiler:
    """Collects per-label wall-clock samples and event counters."""

    def __init__(self, clock=time.perf_counter):
        """Initialize the profiler with a monotonic clock."""
        self.clock = clock
        self.reset()

    def reset(self):
        """Reset all profiling data."""
        self.start_time = None
        self.end_time = None
        self.timings = defaultdict(list)
        self.counters = Counter()

    def start_profiling(self):
        """Start the profiling session."""
        self.reset()
        self.start_time = self.clock()

    def stop_profiling(self):
        """Stop the profiling session."""
        self.end_time = self.clock()

    def record_timing(self, label, seconds):
        """Record one timed execution of `label`."""
        self.timings[label].append(seconds)

    def record_event(self, name, count=1):
        self.counters[name] += count

    def time_call(self, label, fn, warmup=2, repeats=5):
        """Run fn `warmup` untimed times then `repeats` timed times; return the last result."""
        result = None
        for _ in range(warmup):
            result = fn()
        for _ in range(repeats):
            start = self.clock()
            result = fn()
            self.record_timing(label, self.clock() - start)
        return result

    def get_total_execution_time(self):
        """Get the total session time."""
        if self.start_time is not None and self.end_time is not None:
            return self.end_time - self.start_time
        return 0

    def percentile_ms(self, label, q):
        times = self.timings.get(label)
        if not times:
            return 0.0
        return float(np.percentile(times, q)) * 1000.0

    def median_ms(self, label):
        return self.percentile_ms(label, 50)

    def summary(self, label):
        """Median, p10, p90 (ms) and sample count of one label."""
        return {"median_ms": self.median_ms(label), "p10_ms": self.percentile_ms(label, 10),
                "p90_ms": self.percentile_ms(label, 90), "repeats": len(self.timings[label])}

    def get_hotspots(self, top_n=10):
        """Labels with the largest total time."""
        totals = Counter({label: sum(times) for label, times in self.timings.items()})
        return totals.most_common(top_n)

    def generate_summary_report(self):
        """Generate a summary profiling report."""
        total_time = self.get_total_execution_time()
        report = []
        report.append("=" * 50)
        report.append("PERFORMANCE PROFILING SUMMARY")
        report.append("=" * 50)
        report.append(f"Total session time: {total_time:.6f} seconds")
        report.append(f"Timed labels: {len(self.timings)}")
        report.append(f"Timed calls: {sum(len(t) for t in self.timings.values())}")

        report.append("\n" + "-" * 50)
        report.append("TIMINGS (median / p10 / p90 ms)")
        report.append("-" * 50)
        for label in self.timings:
            s = self.summary(label)
            report.append(f"{label}: {s['median_ms']:.3f} / {s['p10_ms']:.3f} / "
                          f"{s['p90_ms']:.3f} ({s['repeats']} repeats)")

        if self.counters:
            report.append("\n" + "-" * 50)
            report.append("EVENTS")
            report.append("-" * 50)
            for name, count in self.counters.most_common():
                report.append(f"{name}: {count}")

        report.append("\n" + "=" * 50)
        return "\n".join(report)

    def generate_detailed_report(self):
        """Summary report plus an ASCII bar chart of total time per label."""
        detailed = [self.generate_summary_report()]
        detailed.append("\n\n" + "=" * 50)
        detailed.append("TIME HOTSPOTS")
        detailed.append("=" * 50)
        hotspots = self.get_hotspots(20)
        if hotspots:
            longest = hotspots[0][1] or 1.0
            for label, total in hotspots:
                bar = "#" * int((total / longest) * 40)
                detailed.append(f"{label:>24}: {bar} ({total * 1000:.2f} ms)")
        return "\n".join(detailed)


def create_profiler():
    """Factory function to create a profiler instance."""
    return Profiler()
