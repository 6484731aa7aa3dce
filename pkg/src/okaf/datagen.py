"""
Synthetic multimodal corpus.

Scenes are parametric rasters (a shape, optionally a lesion at its centre,
on a flat background) rendered in one of eight grayscale pseudo-modalities.
Every text field is produced from the scene parameters by a fixed template,
so each record's ground truth is known exactly and can be parsed back.
"""

from __future__ import annotations

import dataclasses
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractError, ValidationError
from .model import Image

# -- tokenizer -----------------------------------------------------------------

PAD, BOS, EOS, SEP = 0, 1, 2, 3
SPECIALS = ("<pad>", "<bos>", "<eos>", "<sep>")
CHARSET = "abcdefghijklmnopqrstuvwxyz0123456789 .,?:;-'()/<>_=+%!\"#&*[]"
VOCAB = SPECIALS + tuple(CHARSET)
assert len(VOCAB) == 64
_CHAR_ID = {c: i + len(SPECIALS) for i, c in enumerate(CHARSET)}


def encode(text: str) -> list[int]:
    try:
        return [_CHAR_ID[c] for c in text]
    except KeyError as exc:
        raise ValidationError(f"character {exc.args[0]!r} is outside the 64-symbol vocabulary") from None


def decode(ids) -> str:
    return "".join(VOCAB[i] for i in ids if i >= len(SPECIALS))


# -- scenes ----------------------------------------------------------------------

MODALITIES = ("cxr", "ct", "mri", "his", "cfp", "oct", "endo", "us")
SHAPES = ("circle", "square", "diamond")
RADII = (3, 4, 5)
CENTERS = (6, 8, 10)
INTENSITIES = (0.6, 0.8, 1.0)
BACKGROUNDS = (0.0, 0.1, 0.2)
LESION_RADII = (1, 2)
DEFAULT_SIZE = 16

# palette: (fg_gain, fg_offset, lesion_value, texture)
PALETTES = {
    "cxr": (1.0, 0.0, 0.3, None),
    "ct": (0.8, 0.0, 1.0, None),
    "mri": (0.6, 0.1, 0.95, None),
    "his": (0.5, 0.3, 0.1, None),
    "cfp": (0.7, 0.1, 0.2, None),
    "oct": (0.9, 0.0, 0.15, "stripes"),
    "endo": (0.6, 0.2, 0.9, None),
    "us": (0.5, 0.0, 0.05, "speckle"),
    "ihc": (-0.5, 1.0, 0.05, None),
}
STAIN_PAIR = ("his", "ihc")


@dataclass(frozen=True)
class SceneParams:
    modality: str
    shape: str
    cx: int
    cy: int
    radius: int
    intensity: float
    background: float
    lesion: bool = False
    lesion_radius: int = 1

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise ValidationError(f"unknown modality {self.modality!r}")
        if self.shape not in SHAPES + ("none",):
            raise ValidationError(f"unknown shape {self.shape!r}")
        if self.lesion and (self.shape == "none" or self.lesion_radius >= self.radius):
            raise ValidationError("a lesion must sit strictly inside a shape")

    def replace(self, **changes) -> "SceneParams":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        return ";".join(f"{f.name}={getattr(self, f.name)}" for f in dataclasses.fields(self))

    @classmethod
    def from_text(cls, text: str) -> "SceneParams":
        raw = dict(item.split("=", 1) for item in text.split(";"))
        return cls(modality=raw["modality"], shape=raw["shape"], cx=int(raw["cx"]), cy=int(raw["cy"]),
                   radius=int(raw["radius"]), intensity=float(raw["intensity"]),
                   background=float(raw["background"]), lesion=raw["lesion"] == "True",
                   lesion_radius=int(raw["lesion_radius"]))


def random_params(rng: np.random.Generator, modality: str | None = None, shape: str | None = None) -> SceneParams:
    lesion = bool(rng.integers(2))
    return SceneParams(
        modality=modality or MODALITIES[rng.integers(len(MODALITIES))],
        shape=shape or SHAPES[rng.integers(len(SHAPES))],
        cx=int(rng.choice(CENTERS)), cy=int(rng.choice(CENTERS)),
        radius=int(rng.choice(RADII)),
        intensity=float(rng.choice(INTENSITIES)),
        background=float(rng.choice(BACKGROUNDS)),
        lesion=lesion, lesion_radius=int(rng.choice(LESION_RADII)),
    )


def param_grid(modalities=MODALITIES, shapes=SHAPES):
    """Every discrete scene on the generator grid (lesion radius only varies with a lesion)."""
    for m in modalities:
        for s in shapes:
            for cx in CENTERS:
                for cy in CENTERS:
                    for r in RADII:
                        for it in INTENSITIES:
                            for bg in BACKGROUNDS:
                                yield SceneParams(m, s, cx, cy, r, it, bg, False, 1)
                                for lr in LESION_RADII:
                                    yield SceneParams(m, s, cx, cy, r, it, bg, True, lr)


def shape_mask(shape: str, cx: float, cy: float, radius: float, size: int) -> np.ndarray:
    """Boolean raster of a shape, testing pixel centres (x + 0.5, y + 0.5)."""
    ys, xs = np.mgrid[0:size, 0:size] + 0.5
    dx, dy = xs - cx, ys - cy
    if shape == "circle":
        return dx * dx + dy * dy <= radius * radius
    if shape == "square":
        return (np.abs(dx) < radius) & (np.abs(dy) < radius)
    if shape == "diamond":
        return np.abs(dx) + np.abs(dy) <= radius
    if shape == "none":
        return np.zeros((size, size), dtype=bool)
    raise ValidationError(f"unknown shape {shape!r}")


def lesion_bbox(params: SceneParams) -> tuple[slice, slice]:
    r = params.lesion_radius
    return slice(params.cy - r, params.cy + r), slice(params.cx - r, params.cx + r)


def render(params: SceneParams, size: int = DEFAULT_SIZE, palette: str | None = None) -> Image:
    """Rasterise a scene; the background pixels equal ``params.background`` exactly."""
    if params.shape != "none":
        r = params.radius
        if params.cx - r < 0 or params.cy - r < 0 or params.cx + r > size or params.cy + r > size:
            raise ValidationError(f"shape at ({params.cx}, {params.cy}) radius {r} leaves a {size}px frame")
    gain, offset, lesion_value, texture = PALETTES[palette or params.modality]
    px = np.full((size, size), params.background, dtype=np.float64)
    inside = shape_mask(params.shape, params.cx, params.cy, params.radius, size)
    fg = np.full((size, size), gain * params.intensity + offset)
    if texture == "stripes":
        fg = fg * np.where(np.arange(size)[:, None] % 2 == 0, 1.0, 0.85)
    elif texture == "speckle":
        ys, xs = np.mgrid[0:size, 0:size]
        fg = fg + 0.1 * ((7 * xs + 3 * ys) % 5) / 4.0
    px[inside] = fg[inside]
    if params.lesion:
        spot = shape_mask("circle", params.cx, params.cy, params.lesion_radius, size)
        px[spot] = lesion_value
    return Image(np.clip(px, 0.0, 1.0), modality_label=palette or params.modality)


def downsample(img: Image, factor: int = 4) -> Image:
    h, w, c = img.shape
    if h % factor or w % factor:
        raise ValidationError(f"{h}x{w} image is not divisible by {factor}")
    px = img.pixels.reshape(h // factor, factor, w // factor, factor, c).mean(axis=(1, 3))
    return Image(px, img.modality_label)


# -- templates -------------------------------------------------------------------

def caption(params: SceneParams) -> str:
    head = f"a {params.modality} image showing "
    if params.shape == "none":
        return head + f"only background {params.background:.1f}, with no lesion"
    lesion = f"a lesion of radius {params.lesion_radius}" if params.lesion else "no lesion"
    return (head + f"a {params.shape} of radius {params.radius} at {params.cx},{params.cy}, "
            f"intensity {params.intensity:.1f}, background {params.background:.1f}, with {lesion}")


_CAPTION_RE = re.compile(
    r"a (?P<modality>[a-z]+) image showing (?:only background (?P<bg0>[\d.]+), with no lesion"
    r"|a (?P<shape>[a-z]+) of radius (?P<r>\d+) at (?P<cx>\d+),(?P<cy>\d+), intensity (?P<it>[\d.]+), "
    r"background (?P<bg>[\d.]+), with (?:(?P<nolesion>no lesion)|a lesion of radius (?P<lr>\d+)))$")


def parse_caption(text: str) -> SceneParams | None:
    """Invert :func:`caption`; returns None for text that does not follow the template."""
    m = _CAPTION_RE.match(text.strip())
    if m is None:
        return None
    try:
        if m["bg0"] is not None:
            return SceneParams(m["modality"], "none", CENTERS[1], CENTERS[1], RADII[0], INTENSITIES[0],
                               float(m["bg0"]))
        lesion = m["lr"] is not None
        return SceneParams(m["modality"], m["shape"], int(m["cx"]), int(m["cy"]), int(m["r"]),
                           float(m["it"]), float(m["bg"]), lesion, int(m["lr"]) if lesion else 1)
    except ValidationError:
        return None


QUESTIONS = (
    ("is a lesion present?", lambda p: "yes" if p.lesion else "no"),
    ("what shape is shown?", lambda p: p.shape),
    ("which modality is this?", lambda p: p.modality),
    ("what is the radius of the shape?", lambda p: str(p.radius)),
)
DESCRIBE = "describe this image."


def _reasoning(params: SceneParams, qid: int) -> str:
    spot = "a distinct spot at its centre" if params.lesion else "a uniform interior"
    facts = (f"the {params.shape} shows {spot}",
             f"the outline is that of a {params.shape}",
             f"the intensity pattern matches {params.modality}",
             f"the {params.shape} spans {params.radius} pixels from its centre")
    return f"<think>{facts[qid]}.</think>"


def knowledge(params: SceneParams) -> str:
    return f"modality: {params.modality}"


# -- samples ---------------------------------------------------------------------

TEXT_ONLY, I2T, T2I, INTERLEAVED = "text", "i2t", "t2i", "interleaved"
CATEGORIES = (TEXT_ONLY, T2I, I2T, INTERLEAVED)
INTERLEAVED_KINDS = ("segment", "superres", "counterfactual", "stain", "crossmodal")


@dataclass
class Sample:
    id: str
    task: str
    kind: str = ""
    q: str = ""
    x_v: Image | None = None
    k: str = ""
    a_t: str = ""
    a_v: Image | None = None
    think: str = ""
    params: SceneParams | None = None
    target_params: SceneParams | None = None
    split: str = "train"

    def validate(self) -> "Sample":
        if self.task == I2T and (self.x_v is None or not self.a_t):
            raise ContractError(f"{self.id}: image-to-text needs x_v and a_t")
        if self.task == T2I and (not self.a_t or self.a_v is None):
            raise ContractError(f"{self.id}: text-to-image needs a caption and a_v")
        if self.task == INTERLEAVED and (self.x_v is None or self.a_v is None
                                          or not (self.q or self.a_t or self.k)):
            raise ContractError(f"{self.id}: interleaved needs x_v, a_v and some text")
        if self.task == TEXT_ONLY and not (self.a_t or self.k):
            raise ContractError(f"{self.id}: text-only needs text")
        if self.think and not (self.think.startswith("<think>") and self.think.endswith("</think>")):
            raise ContractError(f"{self.id}: reasoning must be wrapped in <think> markers")
        return self

    def text(self) -> str:
        """All text fields joined by single spaces (what the length filter sees)."""
        return " ".join(s for s in (self.q, self.k, self.a_t) if s)

    def images(self) -> list[Image]:
        return [im for im in (self.x_v, self.a_v) if im is not None]


def make_caption_pair(params: SceneParams, sid: str, size: int = DEFAULT_SIZE) -> Sample:
    return Sample(sid, I2T, "caption", q=DESCRIBE, x_v=render(params, size), k=knowledge(params),
                  a_t=caption(params), params=params).validate()


def make_t2i(params: SceneParams, sid: str, size: int = DEFAULT_SIZE) -> Sample:
    return Sample(sid, T2I, "caption", a_t=caption(params), a_v=render(params, size),
                  k=knowledge(params), params=params).validate()


def make_text_only(params: SceneParams, sid: str) -> Sample:
    look = "dark" if PALETTES[params.modality][2] < 0.5 else "bright"
    text = f"in {params.modality} images a lesion appears as a {look} spot inside the {params.shape}."
    return Sample(sid, TEXT_ONLY, "text", k=knowledge(params), a_t=text, params=params).validate()


def make_instruction(params: SceneParams, with_think: bool = False, qid: int = 0,
                     sid: str = "instr", size: int = DEFAULT_SIZE) -> Sample:
    """A visual question with a templated answer, optionally preceded by reasoning."""
    question, answer_fn = QUESTIONS[qid % len(QUESTIONS)]
    if params.shape == "none" and qid % len(QUESTIONS) in (1, 3):
        question, answer_fn = QUESTIONS[0]
    answer = answer_fn(params)
    think = _reasoning(params, qid % len(QUESTIONS)) if with_think else ""
    a_t = f"{think} {answer}" if think else answer
    return Sample(sid, I2T, "vqa", q=question, x_v=render(params, size), k=knowledge(params),
                  a_t=a_t, think=think, params=params).validate()


def strip_think(text: str) -> str:
    return re.sub(r"<think>.*?</think>", "", text, flags=re.S).strip()


def make_interleaved(kind: str, params: SceneParams, seed: int = 0, sid: str = "inter",
                     size: int = DEFAULT_SIZE) -> Sample:
    """One of the five image-in/image-out task families built from a scene."""
    rng = np.random.default_rng(seed)
    if kind == "segment":
        mask = shape_mask(params.shape, params.cx, params.cy, params.radius, size).astype(np.float64)
        return Sample(sid, INTERLEAVED, kind, q=f"segment the {params.shape}.", x_v=render(params, size),
                      k=knowledge(params), a_t=f"segment the {params.shape} in this {params.modality} image.",
                      a_v=Image(mask, "mask"), params=params).validate()
    if kind == "superres":
        full = render(params, size)
        return Sample(sid, INTERLEAVED, kind, q="increase the resolution by 4x.", x_v=downsample(full, 4),
                      k=knowledge(params),
                      a_t=f"upsample this {params.modality} image by a factor of 4.",
                      a_v=full, params=params).validate()
    if kind == "counterfactual":
        if params.lesion:
            edited = params.replace(lesion=False)
            a_t = f"without the lesion the {params.shape} would look uniform."
        else:
            lr = int(rng.choice([r for r in LESION_RADII if r < params.radius]))
            edited = params.replace(lesion=True, lesion_radius=lr)
            a_t = f"with a lesion of radius {lr} the {params.shape} would show a spot."
        return Sample(sid, INTERLEAVED, kind, q="show the counterfactual lesion state.",
                      x_v=render(params, size), k=knowledge(params), a_t=a_t,
                      a_v=render(edited, size), params=params, target_params=edited).validate()
    if kind == "stain":
        src, dst = STAIN_PAIR
        base = params.replace(modality="his")
        return Sample(sid, INTERLEAVED, kind, q=f"restain from {src} to {dst}.",
                      x_v=render(base, size, palette=src), k=knowledge(base),
                      a_t=f"virtual {dst} staining of this {base.shape} slide.",
                      a_v=render(base, size, palette=dst), params=base, target_params=base).validate()
    if kind == "crossmodal":
        others = [m for m in MODALITIES if m != params.modality]
        target = params.replace(modality=others[int(rng.integers(len(others)))])
        return Sample(sid, INTERLEAVED, kind, q=f"translate to {target.modality}.",
                      x_v=render(params, size), k=knowledge(params),
                      a_t=f"translate this {params.modality} image into a {target.modality} image.",
                      a_v=render(target, size), params=params, target_params=target).validate()
    raise ValidationError(f"unknown interleaved kind {kind!r}")


# -- corpus ------------------------------------------------------------------------

def generate(counts: dict[str, int], seed: int, split: str = "train", size: int = DEFAULT_SIZE,
             noise_fraction: float = 0.0) -> list[Sample]:
    """Deterministic in-memory corpus.  ``noise_fraction`` of image-caption pairs get a wrong caption."""
    unknown = set(counts) - set(CATEGORIES)
    if unknown:
        raise ValidationError(f"unknown categories {sorted(unknown)}")
    if any(c < 0 for c in counts.values()):
        raise ValidationError("category counts must be nonnegative")
    rng = np.random.default_rng([seed, sum(map(ord, split))])
    out: list[Sample] = []
    for cat in CATEGORIES:
        for i in range(counts.get(cat, 0)):
            sid = f"{split}-{cat}-{i:05d}"
            if cat == INTERLEAVED:
                kind = INTERLEAVED_KINDS[i % len(INTERLEAVED_KINDS)]
                params = random_params(rng)
                out.append(make_interleaved(kind, params, int(rng.integers(2**31)), sid, size))
                continue
            params = random_params(rng)
            if cat == TEXT_ONLY:
                s = make_text_only(params, sid)
            elif cat == T2I:
                s = make_t2i(params, sid, size)
            elif i % 2 == 0:
                s = make_caption_pair(params, sid, size)
            else:
                s = make_instruction(params, with_think=(i % 4 == 3), qid=int(rng.integers(4)),
                                     sid=sid, size=size)
            if s.kind == "caption" and rng.random() < noise_fraction:
                s.a_t = caption(random_params(rng))
            out.append(s)
    for s in out:
        s.split = split
    return out


# -- PGM / PPM ------------------------------------------------------------------

def write_pnm(path, img: Image) -> None:
    data = np.round(img.pixels * 255.0).astype(np.uint8)
    magic = b"P5" if img.channels == 1 else b"P6"
    header = magic + f"\n{img.width} {img.height}\n255\n".encode()
    Path(path).write_bytes(header + data.reshape(img.height, img.width, img.channels).tobytes())


def read_pnm(path, modality_label: str = "") -> Image:
    blob = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":
            pos = blob.index(b"\n", pos) + 1
            continue
        end = pos
        while not blob[end:end + 1].isspace():
            end += 1
        fields.append(blob[pos:end])
        pos = end
    pos += 1
    magic, w, h, maxval = fields[0], int(fields[1]), int(fields[2]), int(fields[3])
    if magic not in (b"P5", b"P6") or maxval != 255:
        raise ValidationError(f"{path}: only 8-bit binary PGM/PPM is supported")
    c = 1 if magic == b"P5" else 3
    arr = np.frombuffer(blob, dtype=np.uint8, count=w * h * c, offset=pos).reshape(h, w, c)
    return Image(arr / 255.0, modality_label)


MANIFEST_COLUMNS = ("id", "task", "kind", "split", "x_v", "a_v", "q", "k", "a_t", "think",
                    "params", "target_params")


def write_manifest(samples: list[Sample], out_dir) -> Path:
    """Write images under ``out_dir/images`` and a tab-separated ``manifest.tsv``."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    lines = ["#" + "\t".join(MANIFEST_COLUMNS)]
    for s in samples:
        paths = {}
        for slot in ("x_v", "a_v"):
            img = getattr(s, slot)
            if img is None:
                paths[slot] = ""
                continue
            rel = f"images/{s.id}_{slot}.{'pgm' if img.channels == 1 else 'ppm'}"
            write_pnm(out_dir / rel, img)
            paths[slot] = rel
        row = (s.id, s.task, s.kind, s.split, paths["x_v"], paths["a_v"], s.q, s.k, s.a_t, s.think,
               s.params.to_text() if s.params else "",
               s.target_params.to_text() if s.target_params else "")
        if any("\t" in f or "\n" in f for f in row):
            raise ValidationError(f"{s.id}: text fields may not contain tabs or newlines")
        lines.append("\t".join(row))
    path = out_dir / "manifest.tsv"
    path.write_text("\n".join(lines) + "\n")
    return path


def read_manifest(path) -> list[Sample]:
    path = Path(path)
    root = path.parent
    out = []
    for line in path.read_text().splitlines():
        if not line or line.startswith("#"):
            continue
        cols = line.split("\t")
        if len(cols) != len(MANIFEST_COLUMNS):
            raise ValidationError(f"{path}: expected {len(MANIFEST_COLUMNS)} columns, got {len(cols)}")
        row = dict(zip(MANIFEST_COLUMNS, cols))
        params = SceneParams.from_text(row["params"]) if row["params"] else None
        target = SceneParams.from_text(row["target_params"]) if row["target_params"] else None
        out.append(Sample(
            id=row["id"], task=row["task"], kind=row["kind"], split=row["split"],
            q=row["q"], k=row["k"], a_t=row["a_t"], think=row["think"],
            x_v=read_pnm(root / row["x_v"]) if row["x_v"] else None,
            a_v=read_pnm(root / row["a_v"]) if row["a_v"] else None,
            params=params, target_params=target,
        ))
    return out


def build_corpus(counts: dict[str, int], seed: int, out_dir, split: str = "train",
                 size: int = DEFAULT_SIZE, noise_fraction: float = 0.0) -> Path:
    """Generate a corpus and write it as a manifest; returns the manifest path."""
    return write_manifest(generate(counts, seed, split, size, noise_fraction), out_dir)
