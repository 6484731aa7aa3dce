"""
Quality control for image-text records.

Three passes: a coarse filter on image size and text length, a combined
alignment score ``lam * embedding_similarity + alignment`` from a pluggable
scorer, and retention of the best-scoring fraction.  Also writes the
seven-dimension expert review sheet as JSON lines.
"""

from __future__ import annotations

import csv
import json
import math
import subprocess
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Protocol

import jsonschema
import numpy as np

from .datagen import Sample, caption, parse_caption, render, write_pnm
from .errors import ContractError, ParameterError, ScoringError, ValidationError

PRODUCTION_MIN_SIDE = 128
PRODUCTION_LEN_MIN = 16
PRODUCTION_LEN_MAX = 1024
DESK_MIN_SIDE = 4   # smallest corpus image is the 4x-downsampled super-resolution input
DEFAULT_LAMBDA = 0.5
DEFAULT_FRACTION = 0.5


def coarse_filter(sample: Sample, min_side: int = PRODUCTION_MIN_SIDE, len_min: int = PRODUCTION_LEN_MIN,
                  len_max: int = PRODUCTION_LEN_MAX) -> tuple[bool, str]:
    """Keep/reject with a reason; both bounds inclusive."""
    if min(min_side, len_min, len_max) <= 0:
        raise ParameterError("filter thresholds must be positive")
    images, text = sample.images(), sample.text()
    if not images and not text:
        raise ContractError(f"{sample.id}: sample has neither image nor text")
    if any(min(im.height, im.width) < min_side for im in images):
        return False, "resolution"
    if text and not len_min <= len(text) <= len_max:
        return False, "length"
    return True, "ok"


class Scorer(Protocol):
    """Anything that rates a record's caption against its image; higher is better."""

    def embed_similarity(self, sample: Sample) -> float: ...

    def align_score(self, sample: Sample) -> float: ...


def pair_of(sample: Sample):
    """(caption text, image) of an image-caption record."""
    img = sample.x_v if sample.x_v is not None else sample.a_v
    return sample.a_t, img


def char_histogram(text: str) -> Counter:
    return Counter(text)


def cosine(a: Counter, b: Counter) -> float:
    dot = sum(a[k] * b[k] for k in a.keys() & b.keys())
    na = math.sqrt(sum(v * v for v in a.values()))
    nb = math.sqrt(sum(v * v for v in b.values()))
    return dot / (na * nb) if na and nb else 0.0


def _quantize(px: np.ndarray) -> np.ndarray:
    return np.round(px * 255.0) / 255.0


class ToyScorer:
    """Deterministic stand-in built from the generator's own templates.

    Similarity compares character histograms of the record's caption and the
    caption its true scene parameters would produce.  Alignment renders the
    scene the caption *describes* and compares it with the stored image
    (both quantised to 8 bits): ``1 - mean |difference|``.
    """

    name = "toy-v1"

    def embed_similarity(self, sample: Sample) -> float:
        text, _ = pair_of(sample)
        if sample.params is None:
            raise ValidationError("toy scorer needs ground-truth scene parameters")
        return cosine(char_histogram(text), char_histogram(caption(sample.params)))

    def align_score(self, sample: Sample) -> float:
        text, img = pair_of(sample)
        described = parse_caption(text)
        if described is None or img is None:
            return 0.0
        try:
            ref = render(described, img.height)
        except ValidationError:
            return 0.0
        if ref.shape != img.shape:
            return 0.0
        return 1.0 - float(np.abs(_quantize(img.pixels) - _quantize(ref.pixels)).mean())


class ProcessScorer:
    """Scorer living in another process, one JSON object per line each way.

    Request ``{"id", "caption", "image_path"}``; response ``{"sim", "align"}``.
    Images are written to ``image_dir`` when the record has no file yet.
    """

    def __init__(self, command: list[str], image_dir):
        self.command = command
        self.image_dir = Path(image_dir)
        self._proc: subprocess.Popen | None = None
        self._cache: dict[str, dict] = {}
        self.name = "process:" + " ".join(command)

    def _ask(self, sample: Sample) -> dict:
        if sample.id in self._cache:
            return self._cache[sample.id]
        if self._proc is None:
            self._proc = subprocess.Popen(self.command, stdin=subprocess.PIPE, stdout=subprocess.PIPE,
                                          text=True, bufsize=1)
        text, img = pair_of(sample)
        self.image_dir.mkdir(parents=True, exist_ok=True)
        path = self.image_dir / f"{sample.id}.pgm"
        write_pnm(path, img)
        self._proc.stdin.write(json.dumps({"id": sample.id, "caption": text, "image_path": str(path)}) + "\n")
        self._proc.stdin.flush()
        line = self._proc.stdout.readline()
        try:
            reply = json.loads(line)
            reply = {"sim": float(reply["sim"]), "align": float(reply["align"])}
        except (ValueError, KeyError, TypeError) as exc:
            raise ScoringError(sample.id, f"bad reply {line!r}: {exc}") from None
        self._cache[sample.id] = reply
        return reply

    def embed_similarity(self, sample: Sample) -> float:
        return self._ask(sample)["sim"]

    def align_score(self, sample: Sample) -> float:
        return self._ask(sample)["align"]

    def close(self) -> None:
        if self._proc is not None:
            self._proc.stdin.close()
            self._proc.wait(timeout=10)
            self._proc = None


@dataclass
class ScoredSample:
    sample: Sample
    sim_embed: float
    score_align: float
    score_final: float

    @property
    def id(self) -> str:
        return self.sample.id


def score(sample: Sample, scorer: Scorer, lam: float = DEFAULT_LAMBDA) -> ScoredSample:
    if lam < 0:
        raise ParameterError(f"lambda must be nonnegative, got {lam}")
    try:
        sim = float(scorer.embed_similarity(sample))
        align = float(scorer.align_score(sample))
    except ScoringError:
        raise
    except Exception as exc:  # scorer plug-ins may fail in arbitrary ways
        raise ScoringError(sample.id, str(exc)) from exc
    return ScoredSample(sample, sim, align, lam * sim + align)


def retain_top(scored: list[ScoredSample], fraction: float = DEFAULT_FRACTION,
               group: Callable[[ScoredSample], str] | None = None) -> list[ScoredSample]:
    """Highest ``score_final`` first, ties by ascending id; keeps ``ceil(n * fraction)``.

    With ``group`` the cut is applied within each group separately.
    """
    if not 0 < fraction <= 1:
        raise ParameterError(f"fraction must lie in (0, 1], got {fraction}")
    if group is not None:
        buckets: dict[str, list[ScoredSample]] = {}
        for s in scored:
            buckets.setdefault(group(s), []).append(s)
        kept = [x for key in sorted(buckets) for x in retain_top(buckets[key], fraction)]
        return sorted(kept, key=lambda s: (-s.score_final, s.id))
    ranked = sorted(scored, key=lambda s: (-s.score_final, s.id))
    return ranked[:math.ceil(len(ranked) * fraction)]


def is_caption_pair(sample: Sample) -> bool:
    return sample.kind == "caption"


@dataclass
class QCResult:
    kept: list[Sample]
    scored: list[ScoredSample]
    kept_ids: set[str]
    rejected: dict[str, str] = field(default_factory=dict)


def run_qc(samples: Iterable[Sample], scorer: Scorer, lam: float = DEFAULT_LAMBDA,
           fraction: float = DEFAULT_FRACTION, min_side: int = PRODUCTION_MIN_SIDE,
           len_min: int = PRODUCTION_LEN_MIN, len_max: int = PRODUCTION_LEN_MAX,
           per_modality: bool = False) -> QCResult:
    """Filter, score image-caption records, keep the top fraction.

    Records that are not image-caption pairs (questions, interleaved tasks,
    text-only) only go through the coarse filter.
    """
    samples = list(samples)
    rejected, survivors = {}, []
    for s in samples:
        keep, reason = coarse_filter(s, min_side, len_min, len_max)
        if keep:
            survivors.append(s)
        else:
            rejected[s.id] = reason
    scored = [score(s, scorer, lam) for s in survivors if is_caption_pair(s)]
    group = (lambda x: x.sample.params.modality if x.sample.params else "") if per_modality else None
    top = {x.id for x in retain_top(scored, fraction, group)}
    for x in scored:
        if x.id not in top:
            rejected[x.id] = "score"
    kept = [s for s in survivors if not is_caption_pair(s) or s.id in top]
    return QCResult(kept, scored, top, rejected)


def write_scores(path, result: QCResult) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "sim_embed", "score_align", "score_final", "kept"])
        for x in result.scored:
            w.writerow([x.id, repr(x.sim_embed), repr(x.score_align), repr(x.score_final),
                        int(x.id in result.kept_ids)])


# -- expert review export ---------------------------------------------------------

SCORE_FIELDS = ("factual_accuracy", "information_completeness", "position_quantity_accuracy",
                "professionalism", "planning_coherence", "clinical_reasoning")


def _nullable_int(lo: int, hi: int) -> dict:
    return {"type": ["integer", "null"], "minimum": lo, "maximum": hi}


REVIEW_SCHEMA = {
    "type": "object",
    "properties": {
        "sample_id": {"type": "string"},
        "modality_match": _nullable_int(0, 1),
        **{f: _nullable_int(0, 5) for f in SCORE_FIELDS},
        "reviewer": {"type": "string"},
        "notes": {"type": "string"},
    },
    "required": ["sample_id", "modality_match", *SCORE_FIELDS, "reviewer", "notes"],
    "additionalProperties": False,
}


@dataclass
class ReviewRecord:
    sample_id: str
    modality_match: int | None = None
    factual_accuracy: int | None = None
    information_completeness: int | None = None
    position_quantity_accuracy: int | None = None
    professionalism: int | None = None
    planning_coherence: int | None = None
    clinical_reasoning: int | None = None
    reviewer: str = ""
    notes: str = ""

    def validate(self) -> "ReviewRecord":
        validate_review(asdict(self))
        return self


def validate_review(record: dict) -> None:
    try:
        jsonschema.validate(record, REVIEW_SCHEMA)
    except jsonschema.ValidationError as exc:
        raise ValidationError(f"review record invalid: {exc.message}") from None


def export_review(samples: Iterable[Sample], path, reviewer: str = "") -> Path:
    """One blank review record per sample, ready for human scoring."""
    path = Path(path)
    with open(path, "w") as fh:
        for s in samples:
            rec = asdict(ReviewRecord(s.id, reviewer=reviewer).validate())
            fh.write(json.dumps(rec, sort_keys=False) + "\n")
    return path


def read_review(path) -> list[ReviewRecord]:
    out = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        validate_review(rec)
        out.append(ReviewRecord(**rec))
    return out
