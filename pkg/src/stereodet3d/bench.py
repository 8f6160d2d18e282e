"""Wall-clock benchmark for cost-volume construction.

Times correlation against concatenation construction on identical random
inputs. Inputs are generated outside the timed region; each repetition times
one full construction including output allocation, since the output write is
the dominant cost of the concatenation form. Can also compare the compiled
and reference backends on the same workload.
"""

import json
import statistics
import time
from dataclasses import dataclass

import numpy as np

from . import backend as _backend
from .errors import InputError
from .stereo import concatenation_volume, correlation_volume


@dataclass
class KindTiming:
    kind: str
    times_s: list[float]

    @property
    def median_s(self) -> float:
        return statistics.median(self.times_s)

    @property
    def min_s(self) -> float:
        return min(self.times_s)


@dataclass
class BenchReport:
    shape: tuple[int, int, int, int]
    max_disp: int
    repetitions: int
    backend: str
    num_threads: int
    correlation: KindTiming
    concatenation: KindTiming

    @property
    def ratio_concat_over_corr(self) -> float:
        return self.concatenation.median_s / self.correlation.median_s

    def to_json_dict(self) -> dict:
        return {
            "shape": list(self.shape),
            "max_disp": self.max_disp,
            "repetitions": self.repetitions,
            "backend": self.backend,
            "num_threads": self.num_threads,
            "correlation": {
                "median_s": self.correlation.median_s,
                "min_s": self.correlation.min_s,
                "times_s": self.correlation.times_s,
            },
            "concatenation": {
                "median_s": self.concatenation.median_s,
                "min_s": self.concatenation.min_s,
                "times_s": self.concatenation.times_s,
            },
            "ratio_concat_over_corr": self.ratio_concat_over_corr,
        }

    def render_text(self) -> str:
        b, c, h, w = self.shape
        lines = [
            f"cost-volume benchmark  shape={b}x{c}x{h}x{w}  max_disp={self.max_disp}  "
            f"reps={self.repetitions}  backend={self.backend}  "
            f"threads={self.num_threads}",
            f"  correlation    median {self.correlation.median_s * 1e3:9.3f} ms   "
            f"min {self.correlation.min_s * 1e3:9.3f} ms",
            f"  concatenation  median {self.concatenation.median_s * 1e3:9.3f} ms   "
            f"min {self.concatenation.min_s * 1e3:9.3f} ms",
            f"  ratio concatenation/correlation = {self.ratio_concat_over_corr:.2f}x",
        ]
        return "\n".join(lines)


def _validate(shape, max_disp, repetitions):
    shape = tuple(int(v) for v in shape)
    if len(shape) != 4 or min(shape) < 1:
        raise InputError(f"shape must be four positive extents, got {shape}")
    if max_disp < 1:
        raise InputError(f"max_disp must be >= 1, got {max_disp}")
    if repetitions < 3:
        raise InputError(f"repetitions must be >= 3, got {repetitions}")
    return shape


def bench_cost_volumes(shape, max_disp: int, repetitions: int, *,
                       backend_name: str | None = None, seed: int = 0) -> BenchReport:
    """Median wall-clock per construction for both cost-volume kinds."""
    shape = _validate(shape, max_disp, repetitions)
    be = _backend.get_backend(backend_name)
    rng = np.random.default_rng(seed)
    left = rng.standard_normal(shape, dtype=np.float32)
    right = rng.standard_normal(shape, dtype=np.float32)

    def run(fn):
        times = []
        result = fn(left, right, max_disp, backend=be)  # warm-up, untimed
        del result
        for _ in range(repetitions):
            t0 = time.perf_counter()
            result = fn(left, right, max_disp, backend=be)
            times.append(time.perf_counter() - t0)
            del result
        return times

    corr = KindTiming("correlation", run(correlation_volume))
    concat = KindTiming("concatenation", run(concatenation_volume))
    return BenchReport(
        shape=shape,
        max_disp=max_disp,
        repetitions=repetitions,
        backend=be.name,
        num_threads=_backend.get_num_threads(),
        correlation=corr,
        concatenation=concat,
    )


def compare_backends(shape, max_disp: int, repetitions: int, *, seed: int = 0):
    """Run the benchmark on every available backend (compiled first)."""
    names = ["compiled"] if _backend.compiled_available() else []
    names.append("reference")
    return [
        bench_cost_volumes(shape, max_disp, repetitions, backend_name=n, seed=seed)
        for n in names
    ]


def reports_to_json(reports) -> str:
    return json.dumps([r.to_json_dict() for r in reports], indent=1)
