"""Refinement feature injection: blend attention-output features from anchor
frames into corresponding subject patches. The correspondence map is built
once per denoising step and reused verbatim by the conditional and
unconditional passes, which is what keeps the two passes in sync.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from . import tensor_core as tc
from .errors import ConfigError, IntegrityError

_map_ids = itertools.count(1)


@dataclass
class CorrespondenceMap:
    """Per-patch (frame, patch) match into an anchor's full frame set."""

    target: tuple  # (shot, frame)
    source: tuple  # anchor shot ids the features were concatenated from
    match_frame: np.ndarray  # int (P,)
    match_patch: np.ndarray  # int (P,)
    score: np.ndarray  # float (P,)
    matched: np.ndarray  # bool (P,); False where the target vector was zero
    anchor_shape: tuple = ()
    map_id: int = field(default_factory=lambda: next(_map_ids))


def build_correspondence(
    target_feats: np.ndarray,
    anchor_feats: np.ndarray,
    target: tuple = (0, 0),
    source: tuple = (),
) -> CorrespondenceMap:
    """Argmax-cosine match of each target patch against all (frame, patch)
    anchor features; ties break to the lowest linear index. Zero-norm target
    vectors are left unmatched and flagged.
    """
    target_feats = np.asarray(target_feats)
    anchor_feats = np.asarray(anchor_feats)
    if anchor_feats.ndim != 3 or anchor_feats.shape[0] == 0:
        raise ConfigError(f"anchor features must be nonempty (F,P,d), got {anchor_feats.shape}")
    frames, patches, dim = anchor_feats.shape
    flat = anchor_feats.reshape(frames * patches, dim).astype(np.float64)
    t64 = target_feats.astype(np.float64)

    tn = np.linalg.norm(t64, axis=1, keepdims=True)
    fn = np.linalg.norm(flat, axis=1, keepdims=True)
    th = np.divide(t64, tn, out=np.zeros_like(t64), where=tn > 0)
    fh = np.divide(flat, fn, out=np.zeros_like(flat), where=fn > 0)
    sims = np.clip(th @ fh.T, -1.0, 1.0)

    linear = np.argmax(sims, axis=1)
    matched = tn.ravel() > 0
    score = sims[np.arange(sims.shape[0]), linear]
    return CorrespondenceMap(
        target=target,
        source=tuple(source),
        match_frame=(linear // patches).astype(np.int64),
        match_patch=(linear % patches).astype(np.int64),
        score=score,
        matched=matched,
        anchor_shape=tuple(anchor_feats.shape),
    )


def inject_refinement(
    o_target: np.ndarray,
    o_anchor: np.ndarray,
    corr: CorrespondenceMap,
    mask: np.ndarray,
    blend: float,
) -> np.ndarray:
    """Blend matched anchor features into subject patches.

    Background patches (mask False) and unmatched patches are bit-unchanged.
    """
    if not 0.0 <= blend <= 1.0:
        raise ConfigError(f"blend must be in [0,1], got {blend}")
    o_target = np.asarray(o_target)
    o_anchor = np.asarray(o_anchor)
    if tuple(o_anchor.shape) != corr.anchor_shape:
        raise IntegrityError(
            f"anchor shape {o_anchor.shape} does not match the map's {corr.anchor_shape}"
        )
    mask = np.asarray(mask, dtype=bool)
    active = mask & corr.matched
    out = o_target.copy()
    if blend == 0.0 or not active.any():
        return out
    src = o_anchor[corr.match_frame[active], corr.match_patch[active]]
    mixed = (
        (1.0 - blend) * out[active].astype(np.float64)
        + blend * src.astype(np.float64)
    ).astype(tc.F32)
    out[active] = mixed
    return out
