"""Per-task evaluation of a predictor on a held-out split, reported as JSON."""

from __future__ import annotations

import dataclasses
import json
import math
import zlib
from pathlib import Path
from typing import Callable, Iterable, Protocol

import numpy as np

from .datagen import EOS, I2T, INTERLEAVED, INTERLEAVED_KINDS, T2I, Sample, decode, lesion_bbox, strip_think
from .errors import ContractError, ValidationError
from .metrics import VitFeatures, answer_accuracy, extract_features, frechet_distance, psnr, ssim
from .model import Image, Mode, ModalityTag, UnifiedModel, build_sequence
from .objectives import euler_sample
from .quality import DEFAULT_LAMBDA, Scorer, ToyScorer
from .records import generation_condition, prompt_ids
from .tensor import no_grad

TASKS = (I2T, T2I) + INTERLEAVED_KINDS
IMAGE_TASKS = ("segment", "superres", "stain", "crossmodal")
PREPROCESSING = "none: native 16x16 grey images, pixel range [0,1], no resize"


class Predictor(Protocol):
    name: str

    def answer(self, sample: Sample) -> str: ...

    def image(self, sample: Sample, response: str | None = None) -> Image: ...


class OraclePredictor:
    """Returns the reference outputs verbatim."""

    name = "oracle"

    def answer(self, sample: Sample) -> str:
        return sample.a_t

    def image(self, sample: Sample, response: str | None = None) -> Image:
        return sample.a_v


class ConstantPredictor:
    name = "constant"

    def __init__(self, value: float = 0.5, text: str = ""):
        self.value = value
        self.text = text

    def answer(self, sample: Sample) -> str:
        return self.text

    def image(self, sample: Sample, response: str | None = None) -> Image:
        return Image(np.full(sample.a_v.shape, self.value), "constant")


class ModelPredictor:
    """Greedy text decoding and Euler latent sampling from a trained model."""

    def __init__(self, model: UnifiedModel, steps: int = 20, seed: int = 0, max_new_tokens: int = 128):
        self.model = model
        self.steps = steps
        self.seed = seed
        self.max_new_tokens = max_new_tokens
        self.name = f"model-euler{steps}"

    def _sample_seed(self, sample: Sample) -> int:
        return (self.seed * 1_000_003 + zlib.crc32(sample.id.encode())) % 2**32

    def answer(self, sample: Sample) -> str:
        cfg = self.model.config
        ids = prompt_ids(sample)
        start = len(ids)
        with no_grad():
            zv = self.model.vit_encode(sample.x_v) if sample.x_v is not None else None
            for _ in range(self.max_new_tokens):
                seq = build_sequence(ids, zv, None, Mode.UNDERSTAND, mask_policy=cfg.mask_policy,
                                     position_scheme=cfg.position_scheme)
                hidden = self.model.forward(seq)
                last = seq.positions_of(ModalityTag.TEXT)[-1:]
                nxt = int(np.argmax(self.model.lm_logits(hidden, last).data[0]))
                if nxt == EOS:
                    break
                ids.append(nxt)
        return decode(ids[start:])

    def image(self, sample: Sample, response: str | None = None) -> Image:
        h, w = sample.a_v.height, sample.a_v.width
        cond_image = sample.x_v if sample.task == INTERLEAVED else None
        return euler_sample(self.model, generation_condition(sample, response), (h, w), self.steps,
                            self._sample_seed(sample), cond_image, sample.a_v.modality_label)


def task_of(sample: Sample) -> str:
    return sample.kind if sample.task == INTERLEAVED else sample.task


def _edited_region(sample: Sample) -> tuple[slice, slice]:
    for p in (sample.params, sample.target_params):
        if p is not None and p.lesion:
            return lesion_bbox(p)
    raise ContractError(f"{sample.id}: counterfactual without a lesion on either side")


def _mean(values: list[float]) -> float:
    return float(np.mean(values)) if values else math.nan


def evaluate(predictor: Predictor, samples: Iterable[Sample], split: str, tasks: Iterable[str] | None = None,
             scorer: Scorer | None = None, extractor: Callable[[Image], np.ndarray] | None = None,
             train_ids: Iterable[str] = (), reference: list[Image] | None = None, lam: float = DEFAULT_LAMBDA,
             seed: int = 0) -> dict:
    """Metrics per task on ``split``; never touches training records.

    ``reference`` overrides the Frechet reference set (default: the split's
    own ``a_v`` images).  ``extractor`` defaults to the predictor model's
    semantic encoder.
    """
    if split == "train":
        raise ValidationError("evaluation split must not be the training split")
    samples = list(samples)
    train_ids = set(train_ids)
    foreign = [s.id for s in samples if s.split != split or s.id in train_ids]
    if foreign:
        raise ValidationError(f"{len(foreign)} records are not from split {split!r}, e.g. {foreign[0]}")
    tasks = list(TASKS if tasks is None else tasks)
    unknown = set(tasks) - set(TASKS)
    if unknown:
        raise ValidationError(f"unknown tasks {sorted(unknown)}")
    by_task: dict[str, list[Sample]] = {t: [] for t in tasks}
    for s in samples:
        if task_of(s) in by_task:
            by_task[task_of(s)].append(s)
    missing = [t for t, rows in by_task.items() if not rows]
    if missing:
        raise ValidationError(f"no {split} records for tasks {missing}")
    scorer = scorer or ToyScorer()
    if extractor is None and T2I in tasks:
        model = getattr(predictor, "model", None)
        if model is None:
            raise ValidationError("a feature extractor is needed for text-to-image evaluation")
        extractor = VitFeatures(model)

    report: dict[str, dict] = {}
    for task in tasks:
        rows = by_task[task]
        if task == I2T:
            preds = [strip_think(predictor.answer(s)) for s in rows]
            report[task] = {"accuracy": answer_accuracy(preds, [strip_think(s.a_t) for s in rows]),
                            "n": len(rows)}
        elif task == T2I:
            gen = [predictor.image(s) for s in rows]
            ref = reference if reference is not None else [s.a_v for s in rows]
            fd = frechet_distance(extract_features(gen, extractor), extract_features(ref, extractor))
            aligns = [scorer.align_score(dataclasses.replace(s, a_v=g)) for s, g in zip(rows, gen)]
            report[task] = {"frechet": fd, "align": _mean(aligns), "n": len(rows)}
        elif task == "counterfactual":
            texts, region = [], []
            for s in rows:
                text = predictor.answer(s)
                texts.append(text)
                out = predictor.image(s, text)
                ys, xs = _edited_region(s)
                region.append(psnr(out.pixels[ys, xs], s.a_v.pixels[ys, xs]))
            report[task] = {"psnr_region": _mean(region),
                            "explanation_accuracy": answer_accuracy(texts, [s.a_t for s in rows]),
                            "n": len(rows)}
        else:
            p, q = [], []
            for s in rows:
                out = predictor.image(s, predictor.answer(s))
                p.append(psnr(out, s.a_v))
                q.append(ssim(out, s.a_v))
            report[task] = {"psnr": _mean(p), "ssim": _mean(q), "n": len(rows)}
    return {
        "meta": {
            "split": split, "seed": seed, "predictor": predictor.name,
            "extractor": getattr(extractor, "name", "none") if extractor is not None else "none",
            "scorer": getattr(scorer, "name", type(scorer).__name__), "lambda": lam,
            "preprocessing": PREPROCESSING, "records": len(samples),
        },
        "tasks": report,
    }


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, float) and not math.isfinite(x):
        return "nan" if math.isnan(x) else ("inf" if x > 0 else "-inf")
    if isinstance(x, np.generic):
        return _jsonable(x.item())
    return x


def report_json(report: dict) -> str:
    """Stable text form: sorted keys, infinities as the strings ``"inf"`` / ``"-inf"``."""
    return json.dumps(_jsonable(report), sort_keys=True, indent=2) + "\n"


def write_report(report: dict, path) -> Path:
    path = Path(path)
    path.write_text(report_json(report))
    return path
