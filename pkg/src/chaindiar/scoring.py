"""Diarization scoring: RTTM conversion, DER with collar, speaker counting.

Scoring is frame-based at a fixed resolution (10 ms by default).  A frame
belongs to a segment when its midpoint lies in ``[onset, onset + duration)``.
Collars are placed around reference boundaries only.
"""

from __future__ import annotations

import json
import logging
import math
from collections import Counter, OrderedDict, defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment

from chaindiar.labels import ActivityMatrix

logger = logging.getLogger(__name__)

SCORING_SHIFT_S = 0.01


@dataclass(frozen=True)
class RttmSegment:
    file_id: str
    onset_s: float
    duration_s: float
    speaker: str

    def __post_init__(self):
        if not self.file_id or not self.speaker:
            raise ValueError("file_id and speaker must be non-empty")
        if self.onset_s < 0:
            raise ValueError(f"negative onset {self.onset_s}")
        if not self.duration_s > 0:
            raise ValueError(f"non-positive duration {self.duration_s}")

    @property
    def end_s(self) -> float:
        return self.onset_s + self.duration_s

    def to_line(self) -> str:
        return (
            f"SPEAKER {self.file_id} 1 {self.onset_s:.3f} {self.duration_s:.3f} "
            f"<NA> <NA> {self.speaker} <NA> <NA>\n"
        )


def parse_rttm_line(line: str) -> RttmSegment:
    parts = line.split()
    if len(parts) < 8 or parts[0] != "SPEAKER":
        raise ValueError(f"malformed RTTM line: {line.rstrip()!r}")
    return RttmSegment(parts[1], float(parts[3]), float(parts[4]), parts[7])


def read_rttm(path) -> list[RttmSegment]:
    segs = []
    for line in Path(path).read_text().splitlines():
        if line.strip() and not line.startswith(";;"):
            segs.append(parse_rttm_line(line))
    return segs


def write_rttm(path, segments) -> None:
    Path(path).write_text("".join(s.to_line() for s in segments))


# --- activity <-> segments ----------------------------------------------------


def activity_to_segments(a: ActivityMatrix, speaker_names=None, file_id: str = "file") -> list[RttmSegment]:
    rows = a.rows
    if speaker_names is None:
        speaker_names = [f"spk{s}" for s in range(rows.shape[0])]
    if len(speaker_names) != rows.shape[0]:
        raise ValueError("need one speaker name per activity row")
    shift = a.frame_shift_s
    segs = []
    for name, row in zip(speaker_names, rows):
        padded = np.concatenate([[0], row.astype(np.int8), [0]])
        edges = np.flatnonzero(np.diff(padded))
        for start, stop in zip(edges[::2], edges[1::2]):
            segs.append(RttmSegment(file_id, start * shift, (stop - start) * shift, name))
    return segs


def _frame_range(onset: float, end: float, shift: float) -> tuple[int, int]:
    # frames whose midpoint (t + 0.5) * shift falls in [onset, end)
    return math.ceil(onset / shift - 0.5), math.ceil(end / shift - 0.5)


def segments_to_activity(segments, frame_shift_s: float, n_frames: int, speakers=None):
    """Rasterize segments; returns (ActivityMatrix, speaker names).

    Speakers are ordered by first appearance unless ``speakers`` is given.
    """
    if speakers is None:
        speakers = list(OrderedDict.fromkeys(s.speaker for s in segments))
    index = {name: i for i, name in enumerate(speakers)}
    rows = np.zeros((len(speakers), n_frames), dtype=np.int8)
    truncated = False
    for seg in segments:
        lo, hi = _frame_range(seg.onset_s, seg.end_s, frame_shift_s)
        if hi > n_frames:
            truncated = True
        rows[index[seg.speaker], max(lo, 0) : min(hi, n_frames)] = 1
    if truncated:
        logger.warning("segments extend past %d frames; truncated", n_frames)
    return ActivityMatrix(rows, frame_shift_s), list(speakers)


# --- DER ----------------------------------------------------------------------


@dataclass
class DerReport:
    """Error times in seconds; percentages are derived on access."""

    scored_speaker_time_s: float
    miss_s: float
    falarm_s: float
    confusion_s: float
    scored_speech_s: float = 0.0
    sad_miss_s: float = 0.0
    sad_falarm_s: float = 0.0
    speaker_map: dict = field(default_factory=dict)

    @classmethod
    def from_percentages(cls, miss, falarm, confusion, sad_miss=0.0, sad_falarm=0.0):
        return cls(100.0, miss, falarm, confusion, 100.0, sad_miss, sad_falarm)

    def _pct(self, seconds, denom):
        if denom <= 0:
            return float("nan")
        return 100.0 * seconds / denom

    @property
    def miss(self) -> float:
        return self._pct(self.miss_s, self.scored_speaker_time_s)

    @property
    def falarm(self) -> float:
        return self._pct(self.falarm_s, self.scored_speaker_time_s)

    @property
    def confusion(self) -> float:
        return self._pct(self.confusion_s, self.scored_speaker_time_s)

    @property
    def der(self) -> float:
        return self.miss + self.falarm + self.confusion

    @property
    def sad_miss(self) -> float:
        return self._pct(self.sad_miss_s, self.scored_speech_s)

    @property
    def sad_falarm(self) -> float:
        return self._pct(self.sad_falarm_s, self.scored_speech_s)

    def __add__(self, other: "DerReport") -> "DerReport":
        return DerReport(
            self.scored_speaker_time_s + other.scored_speaker_time_s,
            self.miss_s + other.miss_s,
            self.falarm_s + other.falarm_s,
            self.confusion_s + other.confusion_s,
            self.scored_speech_s + other.scored_speech_s,
            self.sad_miss_s + other.sad_miss_s,
            self.sad_falarm_s + other.sad_falarm_s,
        )

    def to_record(self, **extra) -> dict:
        rec = dict(extra)
        rec.update(
            der=self.der,
            miss=self.miss,
            falarm=self.falarm,
            confusion=self.confusion,
            sad_miss=self.sad_miss,
            sad_falarm=self.sad_falarm,
            scored_speaker_time_s=self.scored_speaker_time_s,
        )
        return rec


REPORT_HEADER = f"{'':<12} {'DER':>6} | {'MI':>6} {'FA':>6} {'CF':>6} | {'SAD MI':>6} {'SAD FA':>6}"


def format_report(report: DerReport, label: str = "overall") -> str:
    return (
        f"{label:<12} {report.der:6.2f} | {report.miss:6.2f} {report.falarm:6.2f} {report.confusion:6.2f}"
        f" | {report.sad_miss:6.1f} {report.sad_falarm:6.1f}"
    )


def _collar_mask(ref_segments, n_frames: int, shift: float, collar_s: float) -> np.ndarray:
    scored = np.ones(n_frames, dtype=bool)
    if collar_s <= 0:
        return scored
    mids = (np.arange(n_frames) + 0.5) * shift
    for seg in ref_segments:
        for b in (seg.onset_s, seg.end_s):
            scored &= np.abs(mids - b) >= collar_s
    return scored


def optimal_mapping(overlap: np.ndarray) -> list[tuple[int, int]]:
    """(ref, hyp) index pairs maximizing the total overlap."""
    if overlap.size == 0:
        return []
    rows, cols = linear_sum_assignment(overlap, maximize=True)
    return list(zip(rows.tolist(), cols.tolist()))


def score_file(ref_segments, hyp_segments, collar_s: float = 0.25, frame_shift_s: float = SCORING_SHIFT_S) -> DerReport:
    ends = [s.end_s for s in list(ref_segments) + list(hyp_segments)]
    n_frames = math.ceil(max(ends, default=0.0) / frame_shift_s + 0.5) + 1
    ref_names = sorted({s.speaker for s in ref_segments})
    hyp_names = sorted({s.speaker for s in hyp_segments})
    ref, _ = segments_to_activity(ref_segments, frame_shift_s, n_frames, ref_names)
    hyp, _ = segments_to_activity(hyp_segments, frame_shift_s, n_frames, hyp_names)
    scored = _collar_mask(ref_segments, n_frames, frame_shift_s, collar_s)
    r = ref.rows[:, scored].astype(np.int64)
    h = hyp.rows[:, scored].astype(np.int64)

    overlap = r @ h.T
    pairs = optimal_mapping(overlap)
    n_ref = r.sum(axis=0)
    n_hyp = h.sum(axis=0)
    n_correct = np.zeros_like(n_ref)
    for i, j in pairs:
        n_correct += r[i] & h[j]

    ref_speech = n_ref > 0
    hyp_speech = n_hyp > 0
    return DerReport(
        scored_speaker_time_s=float(n_ref.sum()) * frame_shift_s,
        miss_s=float(np.maximum(n_ref - n_hyp, 0).sum()) * frame_shift_s,
        falarm_s=float(np.maximum(n_hyp - n_ref, 0).sum()) * frame_shift_s,
        confusion_s=float((np.minimum(n_ref, n_hyp) - n_correct).sum()) * frame_shift_s,
        scored_speech_s=float(ref_speech.sum()) * frame_shift_s,
        sad_miss_s=float((ref_speech & ~hyp_speech).sum()) * frame_shift_s,
        sad_falarm_s=float((hyp_speech & ~ref_speech).sum()) * frame_shift_s,
        speaker_map={ref_names[i]: hyp_names[j] for i, j in pairs if overlap[i, j] > 0},
    )


def _by_file(segments) -> dict:
    out = defaultdict(list)
    for s in segments:
        out[s.file_id].append(s)
    return out


def der_per_file(ref_segments, hyp_segments, collar_s: float = 0.25, frame_shift_s: float = SCORING_SHIFT_S) -> dict:
    refs = _by_file(ref_segments)
    hyps = _by_file(hyp_segments)
    unknown = set(hyps) - set(refs)
    if unknown:
        # RTTM cannot list a file without speech, so these count as pure false alarm
        logger.warning("no reference segments for %s; scoring as silent", ", ".join(sorted(unknown)))
    files = sorted(set(refs) | set(hyps))
    return {fid: score_file(refs.get(fid, []), hyps.get(fid, []), collar_s, frame_shift_s) for fid in files}


def merge_reports(reports) -> DerReport:
    total = DerReport(0.0, 0.0, 0.0, 0.0)
    for rep in reports:
        total = total + rep
    return total


def der(ref_segments, hyp_segments, collar_s: float = 0.25, frame_shift_s: float = SCORING_SHIFT_S) -> DerReport:
    per_file = der_per_file(ref_segments, hyp_segments, collar_s, frame_shift_s)
    # speaker maps are per file, so only a single-file result keeps one
    total = next(iter(per_file.values())) if len(per_file) == 1 else merge_reports(per_file.values())
    if total.scored_speaker_time_s <= 0:
        raise ValueError("nothing to score")
    return total


def der_by_ref_count(reports: dict, ref_counts: dict) -> dict:
    """Time-weighted DER (%) per reference speaker count."""
    groups = defaultdict(list)
    for fid, rep in reports.items():
        groups[ref_counts[fid]].append(rep)
    return {n: merge_reports(groups[n]).der for n in sorted(groups)}


# --- speaker counting -----------------------------------------------------------


@dataclass(frozen=True)
class CountingReport:
    matrix: dict
    accuracy: float

    def format(self) -> str:
        refs = sorted({r for r, _ in self.matrix})
        hyps = sorted({h for _, h in self.matrix} | set(refs))
        lines = ["ref\\hyp " + " ".join(f"{h:>5}" for h in hyps)]
        for r in refs:
            lines.append(f"{r:>7} " + " ".join(f"{self.matrix.get((r, h), 0):>5}" for h in hyps))
        lines.append(f"accuracy {100.0 * self.accuracy:.1f}%")
        return "\n".join(lines)


def counting_report(pairs) -> CountingReport:
    matrix = Counter((int(r), int(h)) for r, h in pairs)
    total = sum(matrix.values())
    if total == 0:
        return CountingReport({}, float("nan"))
    correct = sum(n for (r, h), n in matrix.items() if r == h)
    return CountingReport(dict(matrix), correct / total)


def oracle_sad_filter(hyp: ActivityMatrix, oracle_sad) -> ActivityMatrix:
    sad = np.asarray(oracle_sad).astype(np.int8)
    if sad.shape[-1] != hyp.n_frames:
        raise ValueError("oracle SAD length differs from hypothesis")
    return ActivityMatrix(hyp.rows * sad[None, :], hyp.frame_shift_s)


def write_records(path, records) -> None:
    Path(path).write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in records))
