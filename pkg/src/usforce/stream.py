"""Replay frames at the acquisition rate through skill -> force inference.

A producer thread emits frame i at ``t0 + i / rate_hz`` into a queue of depth
one; the consumer classifies the skill, then runs the force model for that
skill.  A lagging consumer blocks the producer (frames are never dropped) and
the delay shows up as per-frame lateness in the report.
"""
from __future__ import annotations

import json
import logging
import queue
import threading
import time
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import model as M
from .data import RATE_HZ

log = logging.getLogger(__name__)

_DONE = object()
# Emission later than this past its slot counts as late (sleep jitter is ~0.1 ms).
LATE_TOLERANCE_MS = 5.0


@dataclass(frozen=True)
class StreamRecord:
    frame_index: int
    skill: int
    skill_prob: float
    force_n: float
    true_force_n: float | None
    skill_ms: float
    force_ms: float
    lateness_ms: float


@dataclass
class StreamReport:
    rate_hz: float
    records: list[StreamRecord] = field(default_factory=list)
    wall_time_s: float = 0.0
    warnings: list[str] = field(default_factory=list)

    @property
    def mean_skill_ms(self) -> float:
        return float(np.mean([r.skill_ms for r in self.records]))

    @property
    def mean_force_ms(self) -> float:
        return float(np.mean([r.force_ms for r in self.records]))

    @property
    def sustained_rate_hz(self) -> float:
        return len(self.records) / self.wall_time_s

    @property
    def late_frames(self) -> int:
        return sum(r.lateness_ms > LATE_TOLERANCE_MS for r in self.records)

    def summary(self) -> dict:
        return {
            "frames": len(self.records),
            "rate_hz": self.rate_hz,
            "mean_skill_ms": self.mean_skill_ms,
            "mean_force_ms": self.mean_force_ms,
            "max_skill_ms": max(r.skill_ms for r in self.records),
            "max_force_ms": max(r.force_ms for r in self.records),
            "sustained_rate_hz": self.sustained_rate_hz,
            "wall_time_s": self.wall_time_s,
            "late_frames": self.late_frames,
            "warnings": list(self.warnings),
        }

    def summary_text(self) -> str:
        return (f"average inference time: skill {self.mean_skill_ms:.1f} ms, "
                f"force {self.mean_force_ms:.1f} ms; {len(self.records)} frames in "
                f"{self.wall_time_s:.2f} s ({self.sustained_rate_hz:.2f} Hz)")

    def to_json(self) -> str:
        return json.dumps({"summary": self.summary(),
                           "records": [asdict(r) for r in self.records]}, indent=1)


def _timed(params: M.ModelParameters, frame: np.ndarray):
    t = time.perf_counter()
    out, _ = M.forward_batch(params, frame[None], "infer")
    return out[0], (time.perf_counter() - t) * 1000.0


def run_stream(skill_model: M.ModelParameters,
               force_models: Mapping[int, M.ModelParameters] | M.ModelParameters,
               frames: Sequence[np.ndarray], true_forces: Sequence[float] | None = None,
               rate_hz: float = RATE_HZ) -> StreamReport:
    """Paced replay of ``frames`` (each (H, W, 1)).

    ``force_models`` maps skill index -> force model (routing by predicted
    skill) or is a single model shared by every skill.  Every model runs once
    on the first frame before the clock starts.
    """
    if rate_hz <= 0:
        raise ValueError(f"rate_hz must be positive, got {rate_hz}")
    if skill_model.head != "skill":
        raise ValueError("skill_model must have a skill head")
    single = isinstance(force_models, M.ModelParameters)
    if not single:
        missing = [k for k in range(M.NUM_SKILLS) if k not in force_models]
        if missing:
            raise ValueError(f"no force model for skills {missing}")
    period = 1.0 / rate_hz
    n = len(frames)
    if n:
        # First calls load compiled kernels; keep that out of the per-frame numbers.
        models = [skill_model] + ([force_models] if single else list(force_models.values()))
        for m in {id(m): m for m in models}.values():
            _timed(m, frames[0])
    q: queue.Queue = queue.Queue(maxsize=1)
    report = StreamReport(rate_hz)
    t0 = time.perf_counter()

    def produce():
        for i in range(n):
            delay = t0 + i * period - time.perf_counter()
            if delay > 0:
                time.sleep(delay)
            q.put(i)
        q.put(_DONE)

    producer = threading.Thread(target=produce, name="stream-producer", daemon=True)
    producer.start()
    while True:
        item = q.get()
        if item is _DONE:
            break
        i = item
        # Measured at pickup, so time the producer spent blocked counts too.
        lateness = max(0.0, time.perf_counter() - (t0 + i * period)) * 1000.0
        probs, skill_ms = _timed(skill_model, frames[i])
        skill = int(np.argmax(probs))
        fm = force_models if single else force_models[skill]
        force, force_ms = _timed(fm, frames[i])
        truth = None if true_forces is None else float(true_forces[i])
        report.records.append(StreamRecord(i, skill, float(probs[skill]), float(force), truth,
                                           skill_ms, force_ms, lateness))
        if skill_ms + force_ms > period * 1000.0:
            report.warnings.append(
                f"frame {i}: inference {skill_ms + force_ms:.1f} ms exceeds the {period * 1000:.1f} ms budget")
    producer.join()
    # The run ends when the last frame slot closes (or its inference finishes).
    remaining = t0 + n * period - time.perf_counter()
    if remaining > 0:
        time.sleep(remaining)
    report.wall_time_s = time.perf_counter() - t0
    if report.late_frames:
        report.warnings.append(f"{report.late_frames} of {n} frames emitted late")
    for w in report.warnings:
        log.warning(w)
    return report
