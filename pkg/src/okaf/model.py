"""
Unified understanding/generation model.

Two visual encoders feed one transformer backbone:

* a semantic patch encoder (``vit``) whose tokens join text tokens and are
  handled by the *understanding* expert, and
* a deterministic patch autoencoder (``vae``) whose latents, noised along the
  flow path, are handled by the *generation* expert.

Every backbone layer keeps two disjoint parameter sets (attention
projections, MLP, norms).  Tokens are routed to a set by their modality tag;
attention itself runs over the whole masked sequence, which is how latent
tokens read the text condition.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path

import numpy as np

from . import checkpoint
from .config import coerce, format_kv, parse_kv
from .errors import ContractError, RoutingError, ShapeError, ValidationError
from .tensor import Tensor, concat, dropout, gelu, layer_norm, matmul, softmax


class ModalityTag(IntEnum):
    TEXT = 0
    VIT = 1
    VAE = 2


UNDERSTANDING_TAGS = (ModalityTag.TEXT, ModalityTag.VIT)
GENERATION_TAGS = (ModalityTag.VAE,)
EXPERTS = ("und", "gen")


class Mode:
    UNDERSTAND = "understand"
    GENERATE = "generate"
    INTERLEAVED = "interleaved"


def expert_of(tag) -> str:
    try:
        tag = ModalityTag(int(tag))
    except ValueError:
        raise RoutingError(f"unknown modality tag {tag!r}") from None
    return "gen" if tag in GENERATION_TAGS else "und"


@dataclass
class Image:
    """Pixel array of shape (height, width, channels) with values in [0, 1]."""

    pixels: np.ndarray
    modality_label: str = ""

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim == 2:
            px = px[:, :, None]
        if px.ndim != 3 or px.shape[2] not in (1, 3):
            raise ShapeError(f"image must be HxW, HxWx1 or HxWx3, got {px.shape}")
        if px.size and (px.min() < 0.0 or px.max() > 1.0):
            raise ValidationError("image pixels must lie in [0, 1]")
        self.pixels = px

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]

    @property
    def shape(self) -> tuple:
        return self.pixels.shape


def patchify(img: Image | np.ndarray, patch: int) -> np.ndarray:
    """Non-overlapping raster-order patches, each flattened row-major (p, p, c)."""
    px = img.pixels if isinstance(img, Image) else np.asarray(img, dtype=np.float64)
    if px.ndim == 2:
        px = px[:, :, None]
    h, w, c = px.shape
    if patch <= 0 or h % patch or w % patch:
        raise ShapeError(f"image {h}x{w} is not divisible by patch size {patch}")
    gh, gw = h // patch, w // patch
    return px.reshape(gh, patch, gw, patch, c).transpose(0, 2, 1, 3, 4).reshape(gh * gw, patch * patch * c)


def unpatchify(tokens: np.ndarray, height: int, width: int, patch: int, channels: int = 1) -> np.ndarray:
    gh, gw = height // patch, width // patch
    if tokens.shape != (gh * gw, patch * patch * channels):
        raise ShapeError(f"cannot unpatchify {tokens.shape} into {height}x{width}x{channels} (patch {patch})")
    return tokens.reshape(gh, gw, patch, patch, channels).transpose(0, 2, 1, 3, 4).reshape(height, width, channels)


def sinusoidal(values: np.ndarray, dim: int, max_period: float = 10000.0) -> np.ndarray:
    """Standard sin/cos features of shape (len(values), dim)."""
    values = np.asarray(values, dtype=np.float64).reshape(-1)
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half) / max(half, 1))
    ang = values[:, None] * freqs[None, :]
    out = np.concatenate([np.sin(ang), np.cos(ang)], axis=1)
    if dim % 2:
        out = np.concatenate([out, np.zeros((len(values), 1))], axis=1)
    return out


def time_features(t: np.ndarray, dim: int) -> np.ndarray:
    # flow time lives in [0, 1]; stretch it so the low frequencies still move
    return sinusoidal(np.asarray(t) * 1000.0, dim)


@dataclass
class ModelConfig:
    width: int = 64
    depth: int = 2
    heads: int = 4
    mlp_ratio: int = 4
    vit_width: int = 32
    vit_depth: int = 2
    vit_heads: int = 4
    patch: int = 4
    latent_patch: int = 4
    latent_dim: int = 12
    channels: int = 1
    vocab: int = 64
    time_dim: int = 32
    ln_eps: float = 1e-5
    dropout_text: float = 0.0
    dropout_visual: float = 0.0
    mask_policy: str = "text_vae"        # or "all": latent tokens also see ViT tokens
    position_scheme: str = "global"      # or "segment": restart indices per modality run
    seed: int = 0

    def __post_init__(self):
        if self.width % self.heads or self.vit_width % self.vit_heads:
            raise ValidationError("widths must be divisible by their head counts")
        if self.mask_policy not in ("text_vae", "all"):
            raise ValidationError(f"unknown mask_policy {self.mask_policy!r}")
        if self.position_scheme not in ("global", "segment"):
            raise ValidationError(f"unknown position_scheme {self.position_scheme!r}")

    def to_text(self) -> str:
        return format_kv(dataclasses.asdict(self))

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        return cls.from_mapping(parse_kv(text)[""])

    @classmethod
    def from_mapping(cls, values: dict) -> "ModelConfig":
        defaults = cls()
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ValidationError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**{k: coerce(getattr(defaults, k), v) if isinstance(v, str) else v
                      for k, v in values.items()})


@dataclass
class TokenSequence:
    """A modality-tagged token stream shared by both experts.

    Token content is stored per modality (``text_ids``, ``vit`` rows, ``vae``
    rows) in sequence order; ``tags`` says which kind each position holds.
    ``vae_times`` carries the flow time of every latent token.
    """

    tags: np.ndarray
    positions: np.ndarray
    attn_mask: np.ndarray
    text_ids: np.ndarray
    vit: Tensor | None = None
    vae: Tensor | None = None
    vae_times: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        n = len(self.tags)
        if self.attn_mask.shape != (n, n):
            raise ShapeError(f"mask must be {n}x{n}, got {self.attn_mask.shape}")
        counts = [int((self.tags == t).sum()) for t in ModalityTag]
        if counts[0] != len(self.text_ids):
            raise ShapeError("text_ids length does not match the number of TEXT tags")
        for tag, rows in ((ModalityTag.VIT, self.vit), (ModalityTag.VAE, self.vae)):
            have = 0 if rows is None else rows.shape[0]
            if have != counts[tag]:
                raise ShapeError(f"{tag.name} rows ({have}) do not match tags ({counts[tag]})")
        if len(self.vae_times) != counts[ModalityTag.VAE]:
            raise ContractError("flow time must be attached to every VAE token and only to them")

    def __len__(self) -> int:
        return len(self.tags)

    def positions_of(self, tag: ModalityTag) -> np.ndarray:
        return np.flatnonzero(self.tags == tag)

    @property
    def flow_time(self) -> float | None:
        if len(self.vae_times) == 0:
            return None
        return float(self.vae_times[0])


def build_sequence(text_ids, z_vit: Tensor | None, z_vae: Tensor | None, mode: str,
                   flow_time: float | None = None, mask_policy: str = "text_vae",
                   position_scheme: str = "global") -> TokenSequence:
    """Lay out one record as a token sequence with its attention mask.

    UNDERSTAND: [ViT, text]; ViT tokens see each other, text is causal and
    sees all ViT tokens.  GENERATE: [text, latent]; text is causal, latents
    see all text and each other.  INTERLEAVED: [ViT, text, latent] combining
    both (latents also see ViT under ``mask_policy="all"``).
    """
    text_ids = np.asarray([] if text_ids is None else text_ids, dtype=np.int64)
    n_txt = len(text_ids)
    n_vit = 0 if z_vit is None else z_vit.shape[0]
    n_vae = 0 if z_vae is None else z_vae.shape[0]
    if mode == Mode.UNDERSTAND:
        if n_vae:
            raise ContractError("UNDERSTAND sequences carry no latent tokens")
        layout = [(ModalityTag.VIT, n_vit), (ModalityTag.TEXT, n_txt)]
    elif mode == Mode.GENERATE:
        if n_vit:
            raise ContractError("GENERATE sequences carry no ViT tokens")
        layout = [(ModalityTag.TEXT, n_txt), (ModalityTag.VAE, n_vae)]
    elif mode == Mode.INTERLEAVED:
        layout = [(ModalityTag.VIT, n_vit), (ModalityTag.TEXT, n_txt), (ModalityTag.VAE, n_vae)]
    else:
        raise ContractError(f"unknown mode {mode!r}")
    tags = np.concatenate([np.full(k, int(t), dtype=np.int64) for t, k in layout])
    if len(tags) == 0:
        raise ContractError("cannot build an empty sequence")
    if n_vae and flow_time is None:
        raise ContractError("latent tokens need a flow time")
    if not n_vae and flow_time is not None:
        raise ContractError("flow time given but no latent tokens present")

    is_txt = tags == ModalityTag.TEXT
    is_vit = tags == ModalityTag.VIT
    is_vae = tags == ModalityTag.VAE
    idx = np.arange(len(tags))
    causal = idx[None, :] <= idx[:, None]
    mask = np.zeros((len(tags), len(tags)), dtype=bool)
    mask |= is_vit[:, None] & is_vit[None, :]
    mask |= is_txt[:, None] & (is_vit[None, :] | (is_txt[None, :] & causal))
    see = is_txt | is_vae | (is_vit if mask_policy == "all" else False)
    mask |= is_vae[:, None] & see[None, :]

    if position_scheme == "global":
        positions = idx.copy()
    else:
        positions = np.concatenate([np.arange(k) for _, k in layout])
    times = np.full(n_vae, float(flow_time)) if n_vae else np.zeros(0)
    return TokenSequence(tags, positions, mask, text_ids, z_vit, z_vae, times)


def pack(seqs: list[TokenSequence]) -> TokenSequence:
    """Concatenate sequences with a block-diagonal mask (a batch as one sequence)."""
    if not seqs:
        raise ContractError("nothing to pack")
    n = sum(len(s) for s in seqs)
    mask = np.zeros((n, n), dtype=bool)
    off = 0
    for s in seqs:
        mask[off:off + len(s), off:off + len(s)] = s.attn_mask
        off += len(s)
    vits = [s.vit for s in seqs if s.vit is not None]
    vaes = [s.vae for s in seqs if s.vae is not None]
    return TokenSequence(
        tags=np.concatenate([s.tags for s in seqs]),
        positions=np.concatenate([s.positions for s in seqs]),
        attn_mask=mask,
        text_ids=np.concatenate([s.text_ids for s in seqs]),
        vit=concat(vits) if vits else None,
        vae=concat(vaes) if vaes else None,
        vae_times=np.concatenate([s.vae_times for s in seqs]),
    )


# parameter-name prefix -> group
_GROUP_PREFIX = (
    ("vit.", "vit"),
    ("vae.", "vae"),
    ("text_embed", "understanding"),
    ("proj_vit.", "understanding"),
    ("lm_head.", "understanding"),
    ("proj_vae.", "generation"),
    ("time_embed.", "generation"),
    ("velocity_head.", "generation"),
)


def param_group(name: str) -> str:
    if name.startswith("backbone."):
        return "understanding" if name.split(".")[2] == "und" else "generation"
    for prefix, group in _GROUP_PREFIX:
        if name.startswith(prefix):
            return group
    raise ValidationError(f"parameter {name!r} belongs to no group")


def is_frozen(name: str, freeze: dict) -> bool:
    """``freeze`` keys: vit, vae, understanding, backbone (both experts + heads)."""
    group = param_group(name)
    if group in ("vit", "vae"):
        return bool(freeze.get(group, False))
    if freeze.get("backbone", False):
        return True
    return group == "understanding" and bool(freeze.get("understanding", False))


_BLOCK_KEYS = ("ln1_g", "ln1_b", "wq", "wk", "wv", "wo", "ln2_g", "ln2_b", "w1", "b1", "w2", "b2")


class UnifiedModel:
    """All parameters of the unified model, keyed by dotted name."""

    def __init__(self, config: ModelConfig | None = None):
        self.config = cfg = config or ModelConfig()
        self.params: dict[str, Tensor] = {}
        self.expert_calls = {"und": 0, "gen": 0}
        rng = np.random.default_rng(cfg.seed)
        d, dv, dz = cfg.width, cfg.vit_width, cfg.latent_dim
        pv = cfg.patch * cfg.patch * cfg.channels
        pz = cfg.latent_patch * cfg.latent_patch * cfg.channels

        def w(name, fan_in, fan_out, scale=1.0):
            self.params[name] = Tensor(rng.normal(0, scale / math.sqrt(fan_in), (fan_in, fan_out)),
                                       requires_grad=True, name=name)

        def const(name, shape, value):
            self.params[name] = Tensor(np.full(shape, float(value)), requires_grad=True, name=name)

        def block(prefix, width, depth):
            hidden = cfg.mlp_ratio * width
            out_scale = 1.0 / math.sqrt(2 * depth)
            const(f"{prefix}.ln1_g", width, 1.0)
            const(f"{prefix}.ln1_b", width, 0.0)
            for k in ("wq", "wk", "wv"):
                w(f"{prefix}.{k}", width, width)
            w(f"{prefix}.wo", width, width, out_scale)
            const(f"{prefix}.ln2_g", width, 1.0)
            const(f"{prefix}.ln2_b", width, 0.0)
            w(f"{prefix}.w1", width, hidden)
            const(f"{prefix}.b1", hidden, 0.0)
            w(f"{prefix}.w2", hidden, width, out_scale)
            const(f"{prefix}.b2", width, 0.0)

        # semantic encoder
        w("vit.patch_w", pv, dv)
        const("vit.patch_b", dv, 0.0)
        for i in range(cfg.vit_depth):
            block(f"vit.block{i}", dv, cfg.vit_depth)
        const("vit.norm_g", dv, 1.0)
        const("vit.norm_b", dv, 0.0)
        # latent autoencoder
        w("vae.enc_w", pz, dz)
        const("vae.enc_b", dz, 0.0)
        w("vae.dec_w", dz, pz)
        const("vae.dec_b", pz, 0.0)
        # projections and embeddings
        self.params["text_embed"] = Tensor(rng.normal(0, 1.0, (cfg.vocab, d)), requires_grad=True,
                                           name="text_embed")
        w("proj_vit.w", dv, d)
        const("proj_vit.b", d, 0.0)
        w("proj_vae.w", dz, d)
        const("proj_vae.b", d, 0.0)
        w("time_embed.w", cfg.time_dim, d)
        const("time_embed.b", d, 0.0)
        # mixture-of-transformer-experts backbone
        for layer in range(cfg.depth):
            for e in EXPERTS:
                block(f"backbone.{layer}.{e}", d, cfg.depth)
        for e in EXPERTS:
            const(f"backbone.final.{e}.g", d, 1.0)
            const(f"backbone.final.{e}.b", d, 0.0)
        # heads
        w("lm_head.w", d, cfg.vocab)
        const("lm_head.b", cfg.vocab, 0.0)
        w("velocity_head.w", d, dz)
        const("velocity_head.b", dz, 0.0)

    # -- parameter bookkeeping ----------------------------------------------
    def p(self, name: str) -> Tensor:
        return self.params[name]

    def names(self, group: str | None = None) -> list[str]:
        return [n for n in self.params if group is None or param_group(n) == group]

    def trainable(self, freeze: dict) -> list[str]:
        return [n for n in self.params if not is_frozen(n, freeze)]

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        extra = set(state) - set(self.params)
        if missing or extra:
            raise ValidationError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for n, arr in state.items():
            if arr.shape != self.params[n].shape:
                raise ShapeError(f"{n}: expected {self.params[n].shape}, got {arr.shape}")
            self.params[n].data = np.array(arr, dtype=np.float64)

    def copy(self) -> "UnifiedModel":
        other = UnifiedModel(self.config)
        other.load_state_dict(self.state_dict())
        return other

    def save(self, path) -> None:
        path = Path(path)
        checkpoint.save(path, self.state_dict())

    @classmethod
    def load(cls, path, config: ModelConfig) -> "UnifiedModel":
        model = cls(config)
        model.load_state_dict(checkpoint.load(path))
        return model

    # -- encoders -----------------------------------------------------------
    def vit_encode(self, img: Image) -> Tensor:
        cfg = self.config
        tokens = patchify(img, cfg.patch)
        x = matmul(Tensor(tokens), self.p("vit.patch_w")) + self.p("vit.patch_b")
        x = x + Tensor(sinusoidal(np.arange(len(tokens)), cfg.vit_width))
        full = np.ones((len(tokens), len(tokens)), dtype=bool)
        for i in range(cfg.vit_depth):
            x = self._block(f"vit.block{i}", x, full, cfg.vit_heads)
        return layer_norm(x, self.p("vit.norm_g"), self.p("vit.norm_b"), cfg.ln_eps)

    def vae_encode(self, img: Image) -> Tensor:
        tokens = patchify(img, self.config.latent_patch)
        return matmul(Tensor(tokens), self.p("vae.enc_w")) + self.p("vae.enc_b")

    def vae_decode_patches(self, z: Tensor) -> Tensor:
        """Unclamped decoder output, one row of pixels per latent token."""
        return matmul(z, self.p("vae.dec_w")) + self.p("vae.dec_b")

    def vae_decode(self, z, height: int | None = None, width: int | None = None,
                   modality_label: str = "") -> Image:
        cfg = self.config
        z = z if isinstance(z, Tensor) else Tensor(z)
        if not z.is_finite():
            raise ValidationError("latent contains non-finite values")
        m = z.shape[0]
        if height is None or width is None:
            side = int(round(math.sqrt(m)))
            if side * side != m:
                raise ShapeError(f"cannot infer a square grid from {m} latent tokens")
            height = width = side * cfg.latent_patch
        rows = self.vae_decode_patches(z).data
        px = unpatchify(rows, height, width, cfg.latent_patch, cfg.channels)
        return Image(np.clip(px, 0.0, 1.0), modality_label)

    # -- backbone -----------------------------------------------------------
    def _attention(self, q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray, heads: int) -> Tensor:
        n, d = q.shape
        dh = d // heads

        def split(x):
            return x.reshape(n, heads, dh).transpose(1, 0, 2)

        scores = matmul(split(q), split(k).transpose(0, 2, 1)) * (1.0 / math.sqrt(dh))
        attn = softmax(scores, axis=-1, mask=mask[None, :, :])
        return matmul(attn, split(v)).transpose(1, 0, 2).reshape(n, d)

    def _mlp(self, prefix: str, x: Tensor) -> Tensor:
        p = self.p
        a = layer_norm(x, p(f"{prefix}.ln2_g"), p(f"{prefix}.ln2_b"), self.config.ln_eps)
        return x + matmul(gelu(matmul(a, p(f"{prefix}.w1")) + p(f"{prefix}.b1")), p(f"{prefix}.w2")) + p(f"{prefix}.b2")

    def _block(self, prefix: str, x: Tensor, mask: np.ndarray, heads: int) -> Tensor:
        p = self.p
        a = layer_norm(x, p(f"{prefix}.ln1_g"), p(f"{prefix}.ln1_b"), self.config.ln_eps)
        o = self._attention(matmul(a, p(f"{prefix}.wq")), matmul(a, p(f"{prefix}.wk")),
                            matmul(a, p(f"{prefix}.wv")), mask, heads)
        return self._mlp(prefix, x + matmul(o, p(f"{prefix}.wo")))

    def backbone(self, h: Tensor, tags: np.ndarray, mask: np.ndarray,
                 layers: int | None = None) -> Tensor:
        """Run the expert layers over embedded tokens ``h`` (n x width).

        Tokens are regrouped so each expert sees a contiguous slice; the
        result is returned in the original token order.
        """
        cfg = self.config
        experts = np.array([expert_of(t) for t in tags])
        perm = np.argsort(experts != "und", kind="stable")
        inv = np.argsort(perm)
        n_und = int((experts == "und").sum())
        spans = [(e, s) for e, s in (("und", slice(0, n_und)), ("gen", slice(n_und, len(tags))))
                 if s.stop > s.start]
        x = h[perm]
        m = mask[np.ix_(perm, perm)]
        p = self.p
        for layer in range(cfg.depth if layers is None else layers):
            qs, ks, vs = [], [], []
            for e, s in spans:
                self.expert_calls[e] += 1
                pre = f"backbone.{layer}.{e}"
                a = layer_norm(x[s], p(f"{pre}.ln1_g"), p(f"{pre}.ln1_b"), cfg.ln_eps)
                qs.append(matmul(a, p(f"{pre}.wq")))
                ks.append(matmul(a, p(f"{pre}.wk")))
                vs.append(matmul(a, p(f"{pre}.wv")))
            o = self._attention(_cat(qs), _cat(ks), _cat(vs), m, cfg.heads)
            x = _cat([self._mlp(f"backbone.{layer}.{e}",
                                x[s] + matmul(o[s], p(f"backbone.{layer}.{e}.wo")))
                      for e, s in spans])
        x = _cat([layer_norm(x[s], p(f"backbone.final.{e}.g"), p(f"backbone.final.{e}.b"), cfg.ln_eps)
                  for e, s in spans])
        return x[inv]

    def embed(self, seq: TokenSequence, rng: np.random.Generator | None = None,
              training: bool = False) -> Tensor:
        """Project every token to the backbone width and add positions (and flow time)."""
        cfg = self.config
        p = self.p
        parts = []
        for tag in ModalityTag:
            if not (seq.tags == tag).any():
                continue
            if tag == ModalityTag.TEXT:
                if seq.text_ids.min() < 0 or seq.text_ids.max() >= cfg.vocab:
                    raise ValidationError("text id outside the vocabulary")
                rows = p("text_embed")[seq.text_ids]
                p_drop = cfg.dropout_text
            elif tag == ModalityTag.VIT:
                rows = matmul(seq.vit, p("proj_vit.w")) + p("proj_vit.b")
                p_drop = cfg.dropout_visual
            else:
                rows = matmul(seq.vae, p("proj_vae.w")) + p("proj_vae.b")
                temb = Tensor(time_features(seq.vae_times, cfg.time_dim))
                rows = rows + matmul(temb, p("time_embed.w")) + p("time_embed.b")
                p_drop = cfg.dropout_visual
            if training and p_drop > 0:
                rows = dropout(rows, p_drop, rng)
            parts.append(rows)
        # index of each token inside the modality-sorted concatenation
        sort = np.argsort(seq.tags, kind="stable")
        gather = np.empty(len(seq), dtype=np.int64)
        gather[sort] = np.arange(len(seq))
        h = _cat(parts)[gather]
        return h + Tensor(sinusoidal(seq.positions, cfg.width))

    def forward(self, seq: TokenSequence, rng: np.random.Generator | None = None,
                training: bool = False) -> Tensor:
        """Hidden states for every token (embedding followed by the MoT backbone)."""
        return self.backbone(self.embed(seq, rng, training), seq.tags, seq.attn_mask)

    mot_forward = forward

    # -- heads --------------------------------------------------------------
    def lm_logits(self, hidden: Tensor, text_positions) -> Tensor:
        text_positions = np.asarray(text_positions, dtype=np.int64)
        if len(text_positions) == 0:
            raise ContractError("lm_logits needs at least one TEXT position")
        return matmul(hidden[text_positions], self.p("lm_head.w")) + self.p("lm_head.b")

    def predict_velocity(self, hidden: Tensor, vae_positions, flow_time) -> Tensor:
        if flow_time is None:
            raise ContractError("predict_velocity needs the sequence flow time")
        vae_positions = np.asarray(vae_positions, dtype=np.int64)
        if len(vae_positions) == 0:
            raise ContractError("predict_velocity needs at least one VAE position")
        return matmul(hidden[vae_positions], self.p("velocity_head.w")) + self.p("velocity_head.b")


def _cat(parts: list[Tensor]) -> Tensor:
    return parts[0] if len(parts) == 1 else concat(parts, axis=0)


def save_config(path, config: ModelConfig) -> None:
    Path(path).write_text(config.to_text())


def load_config(path) -> ModelConfig:
    return ModelConfig.from_text(Path(path).read_text())
