"""Cutting annotated recordings into fixed-length labelled clips.

Calls are visited left to right by start time. A call no longer than the clip
length gets one clip whose start is uniform over every position that fully
contains it; longer calls are tiled from their start. A revisit pass adds
clips for any call stretch of at least ``min_unsupported`` seconds still not
covered, and call-free background is tiled into negative clips.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

CLIP_SECONDS = 3.0
MIN_UNSUPPORTED = 1.0
PARTITIONS = ("train", "devel", "test")
ANNOTATION_COLUMNS = ("recording_id", "start_s", "end_s", "species")


@dataclass(frozen=True)
class Annotation:
    recording_id: str
    start: float
    end: float
    species: str
    partition: str | None = None

    @property
    def duration(self) -> float:
        return self.end - self.start


@dataclass
class Clip:
    recording_id: str
    start: float
    length: float
    labels: tuple[int, ...]
    calls: tuple[int, ...] = ()  # indices of calls it fully contains
    partition: str | None = None
    origin: str = ""  # "call:<i>", "tile:<i>", "revisit:<i>" or "background"

    @property
    def end(self) -> float:
        return self.start + self.length

    def supports(self, a: Annotation) -> bool:
        return self.start <= a.start and a.end <= self.end


@dataclass
class Recording:
    recording_id: str
    duration: float
    calls: list[Annotation] = field(default_factory=list)


def _union(intervals) -> list[tuple[float, float]]:
    out: list[list[float]] = []
    for a, b in sorted(intervals):
        if out and a <= out[-1][1]:
            out[-1][1] = max(out[-1][1], b)
        else:
            out.append([a, b])
    return [(a, b) for a, b in out]


def uncovered(a: float, b: float, covers) -> list[tuple[float, float]]:
    """Parts of [a, b] not inside any interval of ``covers``."""
    gaps, cur = [], a
    for lo, hi in _union(covers):
        if hi <= cur or lo >= b:
            continue
        if lo > cur:
            gaps.append((cur, lo))
        cur = max(cur, hi)
    if cur < b:
        gaps.append((cur, b))
    return gaps


def clip_start_bounds(call: Annotation, duration: float, length: float) -> tuple[float, float]:
    """Interval of starts fully containing ``call``, intersected with the recording."""
    if duration < length:  # recording shorter than a clip
        return 0.0, 0.0
    lo = max(call.end - length, 0.0)
    hi = min(call.start, duration - length)
    if lo > hi:  # a call of exactly one clip length, off by rounding
        return hi, hi
    return lo, hi


def _clamp_start(t: float, duration: float, length: float) -> float:
    return min(max(t, 0.0), max(duration - length, 0.0))


def segment_recording(rec: Recording, vocabulary, seed=None, length: float = CLIP_SECONDS,
                      min_unsupported: float = MIN_UNSUPPORTED) -> list[Clip]:
    """Clips of ``length`` seconds covering every call of ``rec`` plus background negatives.

    Calls whose species is outside ``vocabulary`` yield no clips and no labels
    but still count as occupied time when looking for background. Call indices
    in ``Clip.calls`` and ``Clip.origin`` refer to the in-vocabulary calls sorted
    by (start, end).
    """
    vocab = list(vocabulary)
    rng = np.random.default_rng(seed)
    for a in rec.calls:
        if not a.start < a.end:
            raise ValueError(f"{rec.recording_id}: call must have start < end, got {a.start}..{a.end}")
        if a.start < 0 or a.end > rec.duration:
            raise ValueError(f"{rec.recording_id}: call {a.start}..{a.end} outside recording [0, {rec.duration}]")
    calls = sorted((a for a in rec.calls if a.species in vocab), key=lambda a: (a.start, a.end))
    spans: list[tuple[float, float]] = []
    origins: list[str] = []

    def covered(a, b):
        return b - a - sum(hi - lo for lo, hi in uncovered(a, b, spans))

    def add(t0, origin):
        spans.append((float(t0), float(t0) + length))
        origins.append(origin)

    for i, call in enumerate(calls):
        if call.duration <= length:
            if any(lo <= call.start and call.end <= hi for lo, hi in spans):
                continue
            lo, hi = clip_start_bounds(call, rec.duration, length)
            add(float(rng.uniform(lo, hi)) if hi > lo else lo, f"call:{i}")
            continue
        t0 = call.start
        while t0 < call.end:
            s = _clamp_start(t0, rec.duration, length)
            a, b = max(call.start, s), min(call.end, s + length)
            if (b - a) - covered(a, b) >= min_unsupported:
                add(s, f"tile:{i}")
            t0 += length

    for i, call in enumerate(calls):  # revisit: unsupported stretches of at least min_unsupported
        while True:
            gaps = [g for g in uncovered(call.start, call.end, spans) if g[1] - g[0] >= min_unsupported]
            if not gaps:
                break
            add(_clamp_start(gaps[0][0], rec.duration, length), f"revisit:{i}")

    occupied = [(a.start, a.end) for a in rec.calls]
    for a, b in uncovered(0.0, rec.duration, occupied):
        if b - a >= length:
            n = math.ceil((b - a) / length)
            for t0 in np.linspace(a, b - length, n):
                add(float(t0), "background")

    clips = []
    for (t0, t1), origin in sorted(zip(spans, origins)):
        labels = tuple(int(any(c.species == sp and c.start < t1 and c.end > t0 for c in calls)) for sp in vocab)
        idx = tuple(i for i, c in enumerate(calls) if t0 <= c.start and c.end <= t1)
        clips.append(Clip(rec.recording_id, t0, length, labels, idx, origin=origin))
    return clips


def partition_recordings(recording_ids, fractions=(0.7, 0.15, 0.15), seed=None) -> dict[str, str]:
    """Assign whole recordings to train/devel/test so no recording spans two partitions."""
    ids = sorted(set(recording_ids))
    if len(fractions) != len(PARTITIONS) or any(f < 0 for f in fractions) or sum(fractions) <= 0:
        raise ValueError(f"fractions must be three non-negative numbers, got {fractions}")
    order = np.random.default_rng(seed).permutation(len(ids))
    cuts = np.floor(np.cumsum(fractions) / sum(fractions) * len(ids) + 0.5).astype(int)
    out = {}
    for k, i in enumerate(order):
        out[ids[i]] = PARTITIONS[int(np.searchsorted(cuts, k, side="right"))]
    return out


def segment_corpus(recordings, vocabulary, seed=0, fractions=(0.7, 0.15, 0.15),
                   length: float = CLIP_SECONDS) -> list[Clip]:
    recs = list(recordings)
    parts = partition_recordings([r.recording_id for r in recs], fractions, seed)
    clips = []
    for k, rec in enumerate(sorted(recs, key=lambda r: r.recording_id)):
        for c in segment_recording(rec, vocabulary, seed=(seed, k), length=length):
            c.partition = parts[rec.recording_id]
            clips.append(c)
    return clips


def read_annotations(path) -> list[Annotation]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(ANNOTATION_COLUMNS) - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{path}: missing annotation columns {sorted(missing)}")
        return [Annotation(r["recording_id"], float(r["start_s"]), float(r["end_s"]), r["species"])
                for r in reader]


def write_annotations(annotations, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(ANNOTATION_COLUMNS)
        for a in annotations:
            w.writerow([a.recording_id, repr(a.start), repr(a.end), a.species])


def read_durations(path) -> dict[str, float]:
    with open(path, newline="") as fh:
        return {r["recording_id"]: float(r["duration_s"]) for r in csv.DictReader(fh)}


def group_recordings(annotations, durations: dict | None = None) -> list[Recording]:
    """Recordings from annotations; without a known duration the last call end is used."""
    recs: dict[str, Recording] = {}
    for a in annotations:
        recs.setdefault(a.recording_id, Recording(a.recording_id, 0.0)).calls.append(a)
    for r in recs.values():
        r.duration = (durations or {}).get(r.recording_id, max(a.end for a in r.calls))
    return list(recs.values())


def write_manifest(clips, vocabulary, path) -> None:
    vocab = list(vocabulary)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["recording_id", "start_s", "end_s", "partition", *vocab])
        for c in clips:
            w.writerow([c.recording_id, repr(c.start), repr(c.end), c.partition or "", *c.labels])


def read_manifest(path) -> tuple[list[Clip], list[str]]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        vocab = header[4:]
        clips = [Clip(r[0], float(r[1]), float(r[2]) - float(r[1]), tuple(int(v) for v in r[4:]),
                      partition=r[3] or None) for r in reader]
    return clips, vocab
