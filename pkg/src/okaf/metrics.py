"""Image and answer metrics: PSNR, windowed SSIM, Frechet distance, exact-match accuracy."""

from __future__ import annotations

import json
import math
import subprocess
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from .errors import NumericError, ShapeError, ValidationError
from .model import Image, UnifiedModel
from .tensor import no_grad

SSIM_WINDOW = 8
FRECHET_EPS = 1e-6


def _pixels(x) -> np.ndarray:
    return x.pixels if isinstance(x, Image) else np.asarray(x, dtype=np.float64)


def psnr(a, b, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; identical inputs give ``inf``."""
    pa, pb = _pixels(a), _pixels(b)
    if pa.shape != pb.shape:
        raise ShapeError(f"psnr: shapes differ {pa.shape} vs {pb.shape}")
    mse = float(np.mean((pa - pb) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def ssim(a, b, peak: float = 1.0, window: int = SSIM_WINDOW) -> float:
    """Mean SSIM over non-overlapping ``window`` x ``window`` tiles (population statistics)."""
    pa, pb = _pixels(a), _pixels(b)
    if pa.ndim == 2:
        pa, pb = pa[:, :, None], pb[:, :, None]
    if pa.shape != pb.shape:
        raise ShapeError(f"ssim: shapes differ {pa.shape} vs {pb.shape}")
    h, w, c = pa.shape
    if h < window or w < window:
        raise ShapeError(f"ssim: {h}x{w} image is smaller than the {window}x{window} window")
    c1, c2 = (0.01 * peak) ** 2, (0.03 * peak) ** 2
    gh, gw = h // window, w // window

    def tiles(p):
        p = p[:gh * window, :gw * window]
        return p.reshape(gh, window, gw, window, c).transpose(0, 2, 4, 1, 3).reshape(-1, window * window)

    ta, tb = tiles(pa), tiles(pb)
    mu_a, mu_b = ta.mean(axis=1), tb.mean(axis=1)
    da, db = ta - mu_a[:, None], tb - mu_b[:, None]
    var_a, var_b = (da * da).mean(axis=1), (db * db).mean(axis=1)
    cov = (da * db).mean(axis=1)
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


@dataclass
class FeatureStats:
    mean: np.ndarray
    cov: np.ndarray
    count: int

    def __post_init__(self):
        if self.count < 2:
            raise ValidationError("feature statistics need at least two samples")


class FeatureAccumulator:
    """Streaming mean/covariance (Chan et al. pairwise update); partial results merge."""

    def __init__(self, dim: int):
        self.n = 0
        self.mean = np.zeros(dim)
        self.m2 = np.zeros((dim, dim))

    def add(self, x) -> None:
        x = np.asarray(x, dtype=np.float64).reshape(-1)
        self.n += 1
        delta = x - self.mean
        self.mean = self.mean + delta / self.n
        self.m2 = self.m2 + np.outer(delta, x - self.mean)

    def merge(self, other: "FeatureAccumulator") -> "FeatureAccumulator":
        out = FeatureAccumulator(len(self.mean))
        out.n = self.n + other.n
        if out.n == 0:
            return out
        delta = other.mean - self.mean
        out.mean = self.mean + delta * (other.n / out.n)
        out.m2 = self.m2 + other.m2 + np.outer(delta, delta) * (self.n * other.n / out.n)
        return out

    def stats(self) -> FeatureStats:
        if self.n < 2:
            raise ValidationError("feature statistics need at least two samples")
        cov = self.m2 / (self.n - 1)
        return FeatureStats(self.mean.copy(), (cov + cov.T) / 2.0, self.n)


def _sqrt_psd(m: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh((m + m.T) / 2.0)
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def frechet_distance(s1: FeatureStats, s2: FeatureStats, eps: float = FRECHET_EPS) -> float:
    """``|mu1 - mu2|^2 + Tr(S1 + S2 - 2 (S1 S2)^(1/2))`` with ``S = Sigma + eps I``.

    The trace of the product's square root is taken from the eigenvalues of
    the symmetric matrix ``S1^(1/2) S2 S1^(1/2)``, which shares its spectrum.
    """
    if s1.mean.shape != s2.mean.shape:
        raise ShapeError(f"feature dimensions differ: {s1.mean.shape} vs {s2.mean.shape}")
    d = len(s1.mean)
    a = s1.cov + eps * np.eye(d)
    b = s2.cov + eps * np.eye(d)
    try:
        ra = _sqrt_psd(a)
        inner = ra @ b @ ra
        vals = np.linalg.eigvalsh((inner + inner.T) / 2.0)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"eigendecomposition did not converge: {exc}") from None
    tr_sqrt = float(np.sqrt(np.clip(vals, 0.0, None)).sum())
    diff = s1.mean - s2.mean
    # exact zero can come out as -1e-12 from roundoff; the distance is nonnegative
    return max(0.0, float(diff @ diff + np.trace(a) + np.trace(b) - 2.0 * tr_sqrt))


class VitFeatures:
    """Mean-pooled tokens of the model's (frozen) semantic encoder."""

    def __init__(self, model: UnifiedModel):
        self.model = model
        self.name = f"vit-meanpool-d{model.config.vit_width}"

    def __call__(self, img: Image) -> np.ndarray:
        with no_grad():
            return self.model.vit_encode(img).data.mean(axis=0)


class ProcessFeatures:
    """Feature extractor in another process: ``{"image_path"}`` -> ``{"features": [...]}`` per line."""

    def __init__(self, command: list[str], image_dir):
        from .datagen import write_pnm
        self._write = write_pnm
        self.command = command
        self.image_dir = Path(image_dir)
        self.name = "process:" + " ".join(command)
        self._proc = None
        self._count = 0

    def __call__(self, img: Image) -> np.ndarray:
        if self._proc is None:
            self._proc = subprocess.Popen(self.command, stdin=subprocess.PIPE, stdout=subprocess.PIPE,
                                          text=True, bufsize=1)
        self.image_dir.mkdir(parents=True, exist_ok=True)
        path = self.image_dir / f"feat-{self._count:06d}.pgm"
        self._count += 1
        self._write(path, img)
        self._proc.stdin.write(json.dumps({"image_path": str(path)}) + "\n")
        self._proc.stdin.flush()
        return np.asarray(json.loads(self._proc.stdout.readline())["features"], dtype=np.float64)

    def close(self) -> None:
        if self._proc is not None:
            self._proc.stdin.close()
            self._proc.wait(timeout=10)
            self._proc = None


def extract_features(images: Iterable[Image], extractor: Callable[[Image], np.ndarray]) -> FeatureStats:
    acc = None
    for img in images:
        f = extractor(img)
        if acc is None:
            acc = FeatureAccumulator(len(f))
        acc.add(f)
    if acc is None or acc.n < 2:
        raise ValidationError("need at least two images for feature statistics")
    return acc.stats()


def normalize_answer(text: str) -> str:
    return " ".join(text.lower().split())


def answer_accuracy(preds: list[str], golds: list[str]) -> float:
    if len(preds) != len(golds):
        raise ValidationError(f"{len(preds)} predictions for {len(golds)} references")
    if not golds:
        raise ValidationError("accuracy of an empty list is undefined")
    return sum(normalize_answer(p) == normalize_answer(g) for p, g in zip(preds, golds)) / len(golds)
