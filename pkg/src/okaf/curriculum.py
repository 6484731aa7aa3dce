"""
Three-stage progressive training: foundation, instruction tuning, unified multimodal.

Each stage draws a task category per step from its mixing ratios, trains
with AdamW under its freeze flags, and keeps an EMA shadow of the weights.
Before stage 1 the patch autoencoder is fitted on corpus images and frozen
for the rest of the run.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, TextIO

import numpy as np

from . import checkpoint
from .config import coerce, format_kv, parse_kv
from .datagen import CATEGORIES, Sample
from .errors import NumericError, ParameterError, ShapeError, ValidationError
from .model import Mode, UnifiedModel, build_sequence, pack, param_group, patchify
from .objectives import LossWeights, combined_loss, flow_loss, make_flow_pair, ntp_loss
from .records import IGNORE, prepare
from .tensor import Tensor, matmul

log = logging.getLogger(__name__)

# per stage: learning rate, sampling ratios in percent, whether the ViT trains
RECIPE_STAGES = {
    1: (5e-5, {"text": 5, "t2i": 25, "i2t": 75}, True),
    2: (2.5e-5, {"text": 5, "t2i": 45, "i2t": 40, "interleaved": 10}, False),
    3: (1e-5, {"text": 3, "t2i": 35, "i2t": 37, "interleaved": 25}, False),
}
RECIPE_STEPS = {1: 85_000, 2: 120_000, 3: 70_000}
RECIPE_MAX_TOKENS = {1: 18_500, 2: 20_000, 3: 27_000}
DESK_STEPS = {1: 300, 2: 400, 3: 300}
# the recipe rates fine-tune a large pretrained model; a small model trained from scratch needs larger steps
DESK_LR_SCALE = 20.0


@dataclass
class StageConfig:
    stage_id: int
    steps: int
    lr: float
    mixing: dict[str, float]
    freeze: dict[str, bool]
    weights: LossWeights = field(default_factory=LossWeights)
    ema_ratio: float = 0.995
    max_tokens: int = 0
    lr_scale: float = 1.0
    batch_size: int = 8
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.0
    grad_clip: float = 1.0
    dropout_text: float = 0.3      # recorded from the recipe; only applied with use_dropout
    dropout_visual: float = 0.05
    use_dropout: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.stage_id not in (1, 2, 3):
            raise ValidationError(f"stage id must be 1, 2 or 3, got {self.stage_id}")
        if self.steps <= 0 or self.lr <= 0 or self.batch_size <= 0:
            raise ParameterError("steps, lr and batch_size must be positive")
        if not 0 < self.ema_ratio < 1:
            raise ParameterError("ema_ratio must lie in (0, 1)")
        unknown = set(self.mixing) - set(CATEGORIES)
        if unknown:
            raise ValidationError(f"unknown mixing categories {sorted(unknown)}")
        if not self.mixing or any(v <= 0 for v in self.mixing.values()):
            raise ParameterError("mixing fractions must be positive")
        total = sum(self.mixing.values())
        self.mixing = {k: self.mixing[k] / total for k in CATEGORIES if k in self.mixing}
        if not self.freeze.get("vae", False):
            raise ValidationError("the autoencoder stays frozen in every stage")

    @property
    def effective_lr(self) -> float:
        return self.lr * self.lr_scale

    def to_text(self) -> str:
        flat = dataclasses.asdict(self)
        flat.pop("weights")
        flat.pop("freeze")
        flat["w_ce"], flat["w_mse"] = self.weights.w_ce, self.weights.w_mse
        for k, v in self.freeze.items():
            flat[f"freeze_{k}"] = v
        return format_kv(flat, section=f"stage{self.stage_id}")

    @classmethod
    def from_mapping(cls, values: dict[str, str], base: "StageConfig") -> "StageConfig":
        kw = dataclasses.asdict(base)
        kw["weights"] = base.weights
        freeze = dict(base.freeze)
        w_ce, w_mse = base.weights.w_ce, base.weights.w_mse
        for key, raw in values.items():
            if key == "w_ce":
                w_ce = float(raw)
            elif key == "w_mse":
                w_mse = float(raw)
            elif key.startswith("freeze_"):
                freeze[key[7:]] = coerce(True, raw)
            elif key in kw and key not in ("weights", "freeze"):
                kw[key] = coerce(kw[key], raw)
            else:
                raise ValidationError(f"unknown stage config key {key!r}")
        kw["freeze"] = freeze
        kw["weights"] = LossWeights(w_ce, w_mse)
        return cls(**kw)


def default_stage(stage_id: int) -> StageConfig:
    """The recipe for one stage at desk scale (recipe rates, ratios and freezes with short runs)."""
    if stage_id not in RECIPE_STAGES:
        raise ValidationError(f"stage id must be 1, 2 or 3, got {stage_id}")
    lr, mixing, vit_trainable = RECIPE_STAGES[stage_id]
    return StageConfig(
        stage_id=stage_id, steps=DESK_STEPS[stage_id], lr=lr, mixing=dict(mixing),
        freeze={"vit": not vit_trainable, "vae": True, "understanding": False, "backbone": False},
        weights=LossWeights(0.25, 1.0), ema_ratio=0.995, max_tokens=RECIPE_MAX_TOKENS[stage_id],
        lr_scale=DESK_LR_SCALE, seed=stage_id,
    )


def stages_to_text(stages: Iterable[StageConfig]) -> str:
    return "\n".join(s.to_text() for s in stages)


def stages_from_text(text: str) -> list[StageConfig]:
    """Read ``[stageN]`` sections; keys override :func:`default_stage` values."""
    sections = parse_kv(text)
    out = []
    for name, values in sections.items():
        if not name.startswith("stage"):
            continue
        try:
            sid = int(name[5:])
        except ValueError:
            raise ValidationError(f"bad section name [{name}]") from None
        out.append(StageConfig.from_mapping(values, default_stage(sid)))
    return sorted(out, key=lambda s: s.stage_id)


def sample_mixture(cfg: StageConfig, rng: np.random.Generator) -> str:
    cats = list(cfg.mixing)
    cum = np.cumsum([cfg.mixing[c] for c in cats])
    i = int(np.searchsorted(cum, rng.random() * cum[-1], side="right"))
    return cats[min(i, len(cats) - 1)]


# -- optimiser and EMA ----------------------------------------------------------

@dataclass
class OptimState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adamw_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], st: OptimState, lr: float,
               beta1: float = 0.9, beta2: float = 0.95, eps: float = 1e-8, weight_decay: float = 0.0,
               frozen: Iterable[str] = ()) -> dict[str, Tensor]:
    """Decoupled weight decay, then a bias-corrected Adam step; frozen names are skipped."""
    frozen = set(frozen)
    st.step += 1
    c1 = 1.0 - beta1 ** st.step
    c2 = 1.0 - beta2 ** st.step
    for name, g in grads.items():
        if name in frozen:
            continue
        p = params[name]
        if g.shape != p.shape:
            raise ShapeError(f"{name}: gradient {g.shape} vs parameter {p.shape}")
        m = st.m.get(name)
        if m is None:
            m = st.m[name] = np.zeros_like(p.data)
            st.v[name] = np.zeros_like(p.data)
        v = st.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        data = p.data * (1.0 - lr * weight_decay) if weight_decay else p.data
        p.data = data - lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params


def optim_state_dict(st: OptimState) -> dict[str, np.ndarray]:
    out = {"step": np.array([float(st.step)])}
    out.update({f"m.{k}": v for k, v in st.m.items()})
    out.update({f"v.{k}": v for k, v in st.v.items()})
    return out


def optim_from_state(state: dict[str, np.ndarray]) -> OptimState:
    st = OptimState(step=int(state["step"][0]))
    for key, value in state.items():
        if key[:2] == "m.":
            st.m[key[2:]] = value.copy()
        elif key[:2] == "v.":
            st.v[key[2:]] = value.copy()
    return st


@dataclass
class EmaShadow:
    shadow: dict[str, np.ndarray]
    ratio: float = 0.995

    @classmethod
    def of(cls, model: UnifiedModel, ratio: float = 0.995) -> "EmaShadow":
        return cls(model.state_dict(), ratio)


def ema_update(ema: EmaShadow, params: dict, names: Iterable[str] | None = None) -> EmaShadow:
    r = ema.ratio
    for name in (ema.shadow if names is None else names):
        value = params[name]
        value = value.data if isinstance(value, Tensor) else np.asarray(value)
        if value.shape != ema.shadow[name].shape:
            raise ShapeError(f"{name}: shadow {ema.shadow[name].shape} vs parameter {value.shape}")
        ema.shadow[name] = r * ema.shadow[name] + (1.0 - r) * value
    return ema


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for g in grads.values():
            g *= scale
    return norm


# -- training -----------------------------------------------------------------

@dataclass
class StepRecord:
    step: int
    category: str
    l_ntp: float
    l_flow: float
    total: float
    lr: float
    has_ntp: bool = False
    has_flow: bool = False

    def csv(self) -> str:
        return f"{self.step},{self.category},{self.l_ntp!r},{self.l_flow!r},{self.total!r},{self.lr!r}"


TRACE_HEADER = "step,category,l_ntp,l_flow,total,lr"


class CyclicSource:
    """Endless, seeded pass over each category's records (reshuffled every epoch)."""

    def __init__(self, datasets: dict[str, list[Sample]], seed: int):
        self.datasets = datasets
        self.rng = np.random.default_rng([seed, 7])
        self.order: dict[str, np.ndarray] = {}
        self.cursor: dict[str, int] = {}

    def take(self, category: str, n: int) -> list[Sample]:
        data = self.datasets.get(category)
        if not data:
            raise ValidationError(f"no records for category {category!r}")
        out = []
        for _ in range(n):
            pos = self.cursor.get(category, len(data))
            if pos >= len(data):
                self.order[category] = self.rng.permutation(len(data))
                pos = 0
            out.append(data[self.order[category][pos]])
            self.cursor[category] = pos + 1
        return out


def batch_loss(model: UnifiedModel, samples: list[Sample], rng: np.random.Generator,
               training: bool = True):
    """(l_ntp or None, l_flow or None) for a batch packed into one sequence."""
    prepared = [prepare(model, s, rng) for s in samples]
    seq = pack([p.seq for p in prepared])
    hidden = model.forward(seq, rng=rng, training=training)
    l_ntp = l_flow = None
    targets = np.concatenate([p.ntp_targets for p in prepared])
    if (targets != IGNORE).any():
        rows = np.flatnonzero(targets != IGNORE)
        text_pos = seq.positions_of(0)[rows]
        l_ntp = ntp_loss(model.lm_logits(hidden, text_pos), targets[rows])
    flows = [p.flow_target for p in prepared if p.flow_target is not None]
    if flows:
        vae_pos = seq.positions_of(2)
        v = model.predict_velocity(hidden, vae_pos, float(seq.vae_times[0]))
        l_flow = flow_loss(v, np.concatenate(flows))
    return l_ntp, l_flow


def _write(sink, line: str) -> None:
    if sink is None:
        return
    if callable(sink):
        sink(line)
    else:
        sink.write(line + "\n")


def train_stage(model: UnifiedModel, datasets: dict[str, list[Sample]], cfg: StageConfig,
                log_sink: TextIO | None = None, ema: EmaShadow | None = None,
                optim: OptimState | None = None, on_step=None) -> list[StepRecord]:
    """Run one curriculum stage in place on ``model``; returns the per-step trace.

    ``on_step(record, model)`` is called after every optimiser and EMA update.
    """
    missing = [c for c in cfg.mixing if not datasets.get(c)]
    if missing:
        raise ValidationError(f"stage {cfg.stage_id}: no data for {missing}")
    ema = ema or EmaShadow.of(model, cfg.ema_ratio)
    ema.ratio = cfg.ema_ratio
    optim = optim or OptimState()
    rng = np.random.default_rng([cfg.seed, cfg.stage_id])
    source = CyclicSource(datasets, cfg.seed)
    trainable = model.trainable(cfg.freeze)
    frozen = [n for n in model.params if n not in set(trainable)]
    saved_dropout = (model.config.dropout_text, model.config.dropout_visual)
    if cfg.use_dropout:
        model.config.dropout_text, model.config.dropout_visual = cfg.dropout_text, cfg.dropout_visual
    for n in frozen:
        model.params[n].requires_grad = False
    lr = cfg.effective_lr
    trace: list[StepRecord] = []
    _write(log_sink, TRACE_HEADER)
    try:
        for step in range(cfg.steps):
            category = sample_mixture(cfg, rng)
            batch = source.take(category, cfg.batch_size)
            model.zero_grad()
            l_ntp, l_flow = batch_loss(model, batch, rng, training=True)
            ntp_val = 0.0 if l_ntp is None else l_ntp.item()
            flow_val = 0.0 if l_flow is None else l_flow.item()
            if not (math.isfinite(ntp_val) and math.isfinite(flow_val)):
                raise NumericError("non-finite loss", step=step)
            total = combined_loss(l_ntp if l_ntp is not None else 0.0,
                                  l_flow if l_flow is not None else 0.0, cfg.weights)
            if isinstance(total, Tensor) and total.requires_grad:
                total.backward()
            grads = {n: model.params[n].grad for n in trainable if model.params[n].grad is not None}
            clip_global_norm(grads, cfg.grad_clip)
            adamw_step(model.params, grads, optim, lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)
            ema_update(ema, model.params, trainable)
            rec = StepRecord(step, category, ntp_val, flow_val, float(getattr(total, "data", total)),
                             lr, l_ntp is not None, l_flow is not None)
            trace.append(rec)
            _write(log_sink, rec.csv())
            if on_step is not None:
                on_step(rec, model)
            if step % 50 == 0:
                log.info("stage %d step %d %s ntp=%.4f flow=%.4f", cfg.stage_id, step, category,
                         ntp_val, flow_val)
    finally:
        for n in frozen:
            model.params[n].requires_grad = True
        model.config.dropout_text, model.config.dropout_visual = saved_dropout
        model.zero_grad()
    return trace


def decile_means(trace: list[StepRecord], which: str) -> tuple[float, float]:
    """Mean of a loss over active steps in the first and last tenth of a run."""
    n = len(trace)
    k = max(1, n // 10)
    flag = "has_ntp" if which == "ntp" else "has_flow"
    key = "l_ntp" if which == "ntp" else "l_flow"
    first = [getattr(r, key) for r in trace[:k] if getattr(r, flag)]
    last = [getattr(r, key) for r in trace[-k:] if getattr(r, flag)]
    if not first or not last:
        raise ValidationError(f"no {which} steps in the first or last decile")
    return float(np.mean(first)), float(np.mean(last))


# -- autoencoder pre-training ----------------------------------------------------

def corpus_images(datasets: dict[str, list[Sample]]):
    for cat in CATEGORIES:
        for s in datasets.get(cat, []):
            yield from s.images()


def pretrain_vae(model: UnifiedModel, images: Iterable, steps: int = 600, lr: float = 1e-2,
                 seed: int = 0) -> list[float]:
    """Fit the patch autoencoder to reconstruct corpus patches (full-batch AdamW)."""
    lp = model.config.latent_patch
    patches = np.concatenate([patchify(im, lp) for im in images])
    if len(patches) == 0:
        raise ValidationError("no images to pre-train the autoencoder on")
    x = Tensor(patches)
    names = model.names("vae")
    st = OptimState()
    losses = []
    for _ in range(steps):
        for n in names:
            model.params[n].grad = None
        z = matmul(x, model.p("vae.enc_w")) + model.p("vae.enc_b")
        diff = model.vae_decode_patches(z) - x
        loss = (diff * diff).mean()
        loss.backward()
        losses.append(loss.item())
        adamw_step(model.params, {n: model.params[n].grad for n in names}, st, lr, 0.9, 0.999)
    for n in names:
        model.params[n].grad = None
    return losses


# -- whole curriculum ----------------------------------------------------------------

@dataclass
class StageResult:
    stage_id: int
    trace: list[StepRecord]
    checkpoint: Path | None
    ema_checkpoint: Path | None
    final_state: dict[str, np.ndarray]
    ema_state: dict[str, np.ndarray]


def run_curriculum(model: UnifiedModel, datasets: dict[str, list[Sample]], stages: list[StageConfig],
                   out_dir=None, vae_steps: int = 600, vae_lr: float = 1e-2,
                   ema: EmaShadow | None = None, optim: OptimState | None = None,
                   on_step=None) -> list[StageResult]:
    """Stage 0 (fit and freeze the autoencoder) then each stage in order, chained.

    ``vae_steps=0`` skips stage 0, for resuming from a saved checkpoint
    together with its EMA shadow and optimiser state.
    """
    ids = [s.stage_id for s in stages]
    if ids != sorted(ids):
        raise ValidationError(f"stages must be ordered by id, got {ids}")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    if vae_steps > 0:
        pretrain_vae(model, corpus_images(datasets), vae_steps, vae_lr)
        if out is not None:
            checkpoint.save(out / "stage0.okaf", model.state_dict())
    ema = ema or EmaShadow.of(model)
    optim = optim or OptimState()
    results = []
    for cfg in stages:
        trace_lines: list[str] = []
        trace = train_stage(model, datasets, cfg, trace_lines.append, ema, optim, on_step)
        final = model.state_dict()
        ema_state = {n: ema.shadow[n].copy() for n in final}
        ck = ek = None
        if out is not None:
            ck, ek = out / f"stage{cfg.stage_id}.okaf", out / f"stage{cfg.stage_id}_ema.okaf"
            checkpoint.save(ck, final)
            checkpoint.save(ek, ema_state)
            checkpoint.save(out / f"stage{cfg.stage_id}_optim.okaf", optim_state_dict(optim))
            (out / f"stage{cfg.stage_id}_trace.csv").write_text("\n".join(trace_lines) + "\n")
        results.append(StageResult(cfg.stage_id, trace, ck, ek, final, ema_state))
    return results


def split_by_category(samples: list[Sample]) -> dict[str, list[Sample]]:
    out: dict[str, list[Sample]] = {c: [] for c in CATEGORIES}
    for s in samples:
        out[s.task].append(s)
    return out


def train_latent_flow(model: UnifiedModel, latents: np.ndarray, cond_text, steps: int = 300,
                      lr: float = 3e-3, batch_size: int = 16, seed: int = 0) -> list[float]:
    """Flow matching directly on given latents (no images), generation expert only.

    ``latents`` has shape (records, tokens, latent_dim).  Used to check that
    sampling recovers a known latent distribution.
    """
    latents = np.asarray(latents, dtype=np.float64)
    if latents.ndim != 3 or latents.shape[2] != model.config.latent_dim:
        raise ShapeError(f"latents must be (records, tokens, {model.config.latent_dim}), got {latents.shape}")
    rng = np.random.default_rng(seed)
    names = [n for n in model.params if param_group(n) not in ("vit", "vae")]
    st = OptimState()
    losses = []
    for step in range(steps):
        model.zero_grad()
        seqs, targets = [], []
        for i in rng.integers(len(latents), size=batch_size):
            pair = make_flow_pair(latents[i], float(rng.random()), z1=rng.standard_normal(latents[i].shape))
            seqs.append(build_sequence(cond_text, None, Tensor(pair.z_t), Mode.GENERATE,
                                       flow_time=pair.t))
            targets.append(pair.v_target)
        seq = pack(seqs)
        hidden = model.forward(seq)
        loss = flow_loss(model.predict_velocity(hidden, seq.positions_of(2), 0.0), np.concatenate(targets))
        if not loss.is_finite():
            raise NumericError("non-finite latent flow loss", step=step)
        loss.backward()
        losses.append(loss.item())
        grads = {n: model.params[n].grad for n in names if model.params[n].grad is not None}
        clip_global_norm(grads, 1.0)
        adamw_step(model.params, grads, st, lr)
    model.zero_grad()
    return losses
