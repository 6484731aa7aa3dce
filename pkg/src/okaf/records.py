"""Turning corpus records into token sequences with loss targets.

Text layout is ``<bos> prefix <sep> response <eos>``; next-token loss covers
the response and the closing ``<eos>``.  Text-only records have no prefix and
are trained on every next token.  Text-to-image records keep the caption as a
condition only (``<bos> caption <sep>``) and carry no text loss.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .datagen import BOS, EOS, I2T, INTERLEAVED, SEP, T2I, TEXT_ONLY, Sample, encode
from .errors import ValidationError
from .model import Mode, ModalityTag, TokenSequence, UnifiedModel, build_sequence
from .objectives import make_flow_pair
from .tensor import Tensor, no_grad

IGNORE = -1


def prefix_text(sample: Sample) -> str:
    if sample.kind == "caption" or not sample.k:
        return sample.q
    return f"{sample.q} {sample.k}"


def prompt_ids(sample: Sample) -> list[int]:
    """Tokens the model is given before it answers."""
    return [BOS] + encode(prefix_text(sample)) + [SEP]


def text_layout(sample: Sample) -> tuple[np.ndarray, np.ndarray]:
    """Token ids and per-position next-token targets (``IGNORE`` where no loss applies)."""
    if sample.task == TEXT_ONLY:
        ids = [BOS] + encode(sample.a_t) + [EOS]
        targets = ids[1:] + [IGNORE]
    elif sample.task == T2I:
        ids = [BOS] + encode(sample.a_t) + [SEP]
        targets = [IGNORE] * len(ids)
    elif sample.task in (I2T, INTERLEAVED):
        head = prompt_ids(sample)
        ids = head + encode(sample.a_t) + [EOS]
        targets = [IGNORE] * (len(head) - 1) + ids[len(head):] + [IGNORE]
    else:
        raise ValidationError(f"unknown task {sample.task!r}")
    return np.asarray(ids, dtype=np.int64), np.asarray(targets, dtype=np.int64)


def generation_condition(sample: Sample, response: str | None = None) -> list[int]:
    """Text the latent tokens attend to when producing ``a_v``."""
    if sample.task == T2I:
        return [BOS] + encode(sample.a_t) + [SEP]
    text = sample.a_t if response is None else response
    return prompt_ids(sample) + encode(text) + [EOS]


@dataclass
class Prepared:
    seq: TokenSequence
    ntp_targets: np.ndarray       # one per TEXT token, IGNORE where unused
    flow_target: np.ndarray | None

    @property
    def has_ntp(self) -> bool:
        return bool((self.ntp_targets != IGNORE).any())


def prepare(model: UnifiedModel, sample: Sample, rng: np.random.Generator) -> Prepared:
    """Encode images, noise the target latent along the flow path and lay out the sequence."""
    cfg = model.config
    ids, targets = text_layout(sample)
    zv = zt = None
    flow_target = None
    t = None
    if sample.task in (I2T, INTERLEAVED):
        zv = model.vit_encode(sample.x_v)
    if sample.task in (T2I, INTERLEAVED):
        with no_grad():
            z0 = model.vae_encode(sample.a_v).data
        t = float(rng.random())
        pair = make_flow_pair(z0, t, z1=rng.standard_normal(z0.shape))
        zt, flow_target = Tensor(pair.z_t), pair.v_target
    mode = {TEXT_ONLY: Mode.UNDERSTAND, I2T: Mode.UNDERSTAND, T2I: Mode.GENERATE,
            INTERLEAVED: Mode.INTERLEAVED}[sample.task]
    seq = build_sequence(ids, zv, zt, mode, flow_time=t, mask_policy=cfg.mask_policy,
                         position_scheme=cfg.position_scheme)
    return Prepared(seq, targets, flow_target)


def text_positions(seq: TokenSequence) -> np.ndarray:
    return seq.positions_of(ModalityTag.TEXT)


def vae_positions(seq: TokenSequence) -> np.ndarray:
    return seq.positions_of(ModalityTag.VAE)
