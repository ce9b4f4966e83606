"""End-to-end orchestration: a toy spatial-attention denoiser with hook
points for query substitution, cross-shot attention, and output injection; a
deterministic sampler; and the three reproducible passes (vanilla caching,
consistency-enabled, refinement-enabled).
"""

from __future__ import annotations

import enum
import hashlib
import math
from dataclasses import dataclass, field, fields

import numpy as np

from . import attention, query_control, refinement, subject_mask
from . import tensor_core as tc
from .errors import ConfigError, ReproducibilityError


class RunMode(enum.Enum):
    VANILLA = "vanilla"
    CONSISTENT = "consistent"
    REFINED = "refined"


@dataclass
class ToyModelSpec:
    layers: int = 4
    patches_per_side: int = 8
    channels: int = 16
    frames: int = 8
    weight_seed: int = 7

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < (0 if f.name == "weight_seed" else 1):
                raise ConfigError(f"{f.name} must be positive")

    @property
    def patches(self) -> int:
        return self.patches_per_side**2

    @property
    def coarse_layer(self) -> int:
        # the last layer stands in for the coarsest-resolution attention
        return self.layers - 1

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class StoryboardConfig:
    total_steps: int = 1000  # T
    sampler_steps: int = 50
    t_pres: int | None = 750
    sdsa_window: tuple | None = (550, 950)
    refine_window: tuple | None = (590, 950)
    q_dropout: float = 0.0
    q_injection: bool = True
    q_weight_mode: str = "sigmoid"
    keyframe_spacing: int = 4
    anchors: tuple | None = None  # None -> first two shots
    seed: int = 0
    sub_batch: int | None = None  # None -> one chunk
    injection_layers: tuple | None = None  # None -> all layers
    refine_layers: tuple | None = None  # None -> the coarse layer
    refine_blend: float = 0.8
    cfg_scale: float = 1.0
    attend_middle_frame: bool = False
    subject_channel: int = 0
    segmenter: str = "channel_energy"
    alpha_min: float = 0.02
    model: ToyModelSpec = field(default_factory=ToyModelSpec)

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = ToyModelSpec(**self.model)
        if self.sampler_steps < 1 or self.sampler_steps > self.total_steps:
            raise ConfigError(
                f"sampler_steps must be in [1, {self.total_steps}], got {self.sampler_steps}"
            )
        for name in ("sdsa_window", "refine_window"):
            win = getattr(self, name)
            if win is not None:
                lo, hi = win
                if not (0 <= lo <= hi <= self.total_steps):
                    raise ConfigError(f"{name} {win} outside [0, {self.total_steps}]")
                setattr(self, name, (int(lo), int(hi)))
        if self.t_pres is not None and not 0 <= self.t_pres <= self.total_steps:
            raise ConfigError(f"t_pres {self.t_pres} outside [0, {self.total_steps}]")
        if not 0.0 <= self.q_dropout <= 1.0:
            raise ConfigError(f"q_dropout must be in [0,1], got {self.q_dropout}")

    def timesteps(self) -> list:
        T, n = self.total_steps, self.sampler_steps
        return [int(round(T * (1.0 - k / n))) for k in range(n)]

    def injection_layer_set(self) -> frozenset:
        if self.injection_layers is None:
            return frozenset(range(self.model.layers))
        return frozenset(self.injection_layers)

    def refine_layer_set(self) -> frozenset:
        if self.refine_layers is None:
            return frozenset({self.model.coarse_layer})
        return frozenset(self.refine_layers)

    def anchor_list(self, shots: int) -> tuple:
        anchors = self.anchors
        if anchors is None:
            anchors = tuple(range(min(2, shots)))
        anchors = tuple(int(a) for a in anchors)
        if not anchors:
            raise ConfigError("anchor set must be nonempty")
        if any(a < 0 or a >= shots for a in anchors):
            raise ConfigError(f"anchors {anchors} outside shot range 0..{shots - 1}")
        return anchors

    def effective_sub_batch(self, shots: int) -> int:
        full = shots * self.model.frames
        if self.sub_batch is None:
            return full
        if self.sub_batch < 1:
            raise ConfigError(f"sub_batch must be >= 1, got {self.sub_batch}")
        return self.sub_batch

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "model":
                v = v.to_dict()
            elif isinstance(v, tuple):
                v = list(v)
            out[f.name] = v
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "StoryboardConfig":
        kwargs = dict(d)
        for key in ("sdsa_window", "refine_window", "anchors", "injection_layers", "refine_layers"):
            if kwargs.get(key) is not None:
                kwargs[key] = tuple(kwargs[key])
        return cls(**kwargs)


@dataclass
class AttentionTopology:
    shots: int
    anchors: tuple

    def key_shots(self, shot: int) -> list:
        if shot in self.anchors:
            return sorted(set(self.anchors))
        return sorted(set(self.anchors) | {shot})

    def refine_sources(self, shot: int) -> list:
        return sorted(a for a in self.anchors if a != shot)


def anchor_topology(shots: int, anchors) -> AttentionTopology:
    anchors = tuple(anchors)
    if not anchors:
        raise ConfigError("anchor set must be nonempty")
    if any(a < 0 or a >= shots for a in anchors):
        raise ConfigError(f"anchors {anchors} outside shot range 0..{shots - 1}")
    return AttentionTopology(shots, anchors)


def _in_window(window, t: int) -> bool:
    return window is not None and window[0] <= t <= window[1]


# --- toy denoiser ---------------------------------------------------------

def _proj(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    return (x.astype(np.float64) @ w.astype(np.float64)).astype(tc.F32)


def _token_vector(token: str, channels: int) -> np.ndarray:
    digest = hashlib.sha256(token.encode("utf-8")).digest()
    seed = int.from_bytes(digest[:8], "little")
    rng = np.random.default_rng(seed)
    return rng.normal(0.0, 1.0 / math.sqrt(channels), channels).astype(tc.F32)


class ToyModel:
    """Attention-only denoiser: a stack of spatial self-attention layers with
    residual connections and an additive prompt-embedding bias."""

    def __init__(self, spec: ToyModelSpec):
        self.spec = spec
        c = spec.channels
        self.layers = []
        for l in range(spec.layers):
            rng = np.random.default_rng(np.random.SeedSequence([spec.weight_seed, l]))
            self.layers.append(
                attention.LayerWeights(
                    *(rng.normal(0.0, 1.0 / math.sqrt(c), (c, c)).astype(tc.F32) for _ in range(4))
                )
            )
        rng = np.random.default_rng(np.random.SeedSequence([spec.weight_seed, spec.layers]))
        self.w_out = rng.normal(0.0, 1.0 / math.sqrt(c), (c, c)).astype(tc.F32)
        self._bias_cache: dict = {}

    def prompt_bias(self, prompt: str) -> np.ndarray:
        if prompt not in self._bias_cache:
            tokens = prompt.split() or [""]
            vecs = np.stack([_token_vector(tok, self.spec.channels) for tok in tokens])
            self._bias_cache[prompt] = vecs.mean(axis=0).astype(tc.F32)
        return self._bias_cache[prompt]

    def forward(self, x: np.ndarray, prompts, cond: bool, hooks=None) -> np.ndarray:
        """One denoiser evaluation: noise estimate for latents x (S,F,P,C).

        Hook points, in order per layer: query substitution before attention,
        extended attention inside, output injection after.
        """
        h = np.array(x, dtype=tc.F32, copy=True)
        if cond:
            for s, prompt in enumerate(prompts):
                h[s] = h[s] + self.prompt_bias(prompt)
        for l, w in enumerate(self.layers):
            q = _proj(h, w.w_q)
            k = _proj(h, w.w_k)
            v = _proj(h, w.w_v)
            if hooks is not None:
                q = hooks.substitute_q(l, q)
            feats = attention.AttnFeatures(q, k, v, layer_id=l)
            if hooks is not None and hooks.wants_extended(l):
                h_attn = hooks.extended_attention(l, feats)
            else:
                h_attn = np.zeros_like(q)
                for s in range(q.shape[0]):
                    for f in range(q.shape[1]):
                        h_attn[s, f], _ = attention.masked_attention(
                            feats.q[s, f], feats.k[s, f], feats.v[s, f]
                        )
            o = _proj(h_attn, w.w_o)
            if hooks is not None:
                o = hooks.inject_o(l, o)
            h = h + o
        return _proj(h, self.w_out)


# --- runs -----------------------------------------------------------------

@dataclass
class PipelineRun:
    config: StoryboardConfig
    subject: str
    prompts: list
    mode: RunMode
    cache: query_control.FeatureCache | None = None
    outputs: np.ndarray | None = None
    audit: list = field(default_factory=list)
    final_masks: subject_mask.SubjectMaskSet | None = None
    fingerprint: str = ""

    @property
    def shots(self) -> int:
        return len(self.prompts)


def run_fingerprint(config: StoryboardConfig, prompts) -> str:
    return query_control.fingerprint(
        {
            "seed": config.seed,
            "T": config.total_steps,
            "sampler_steps": config.sampler_steps,
            "alpha_min": config.alpha_min,
            "model": config.model.to_dict(),
            "prompts": list(prompts),
        }
    )


def _init_latents(config: StoryboardConfig, shots: int) -> np.ndarray:
    spec = config.model
    per_shot = []
    for s in range(shots):
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, 104729, s]))
        per_shot.append(
            rng.standard_normal((spec.frames, spec.patches, spec.channels)).astype(tc.F32)
        )
    return np.stack(per_shot)


def _build_masks(run: PipelineRun, x0: np.ndarray) -> subject_mask.SubjectMaskSet:
    cfg = run.config
    kwargs = {"channel": cfg.subject_channel} if cfg.segmenter == "channel_energy" else {}
    sal = np.zeros(x0.shape[:3], dtype=tc.F32)
    for s in range(x0.shape[0]):
        for f in range(x0.shape[1]):
            sal[s, f] = subject_mask.saliency(x0[s, f], run.subject, cfg.segmenter, **kwargs)
    return subject_mask.SubjectMaskSet.from_saliency(sal)


class _StepHooks:
    """Per-timestep hook state shared by the conditional and unconditional
    passes, so refinement reuses the identical correspondence maps."""

    def __init__(self, run, model, t, masks, topology, kf, sdsa_on, refine_on):
        self.run = run
        self.cfg = run.config
        self.model = model
        self.t = t
        self.masks = masks
        self.topology = topology
        self.kf = kf
        self.sdsa_on = sdsa_on
        self.refine_on = refine_on
        self.pass_tag = "cond"
        self.refine_handles: dict = {}
        self._query_cache: dict = {}

    def for_pass(self, tag: str) -> "_StepHooks":
        self.pass_tag = tag
        return self

    # -- query substitution (conditional pass only) --

    def substitute_q(self, layer: int, q: np.ndarray) -> np.ndarray:
        if self.pass_tag != "cond":
            return q
        run, cfg, t = self.run, self.cfg, self.t
        if run.mode == RunMode.VANILLA:
            run.cache.put(t, layer, q)
            return q
        if not cfg.q_injection:
            return q
        # the same decision must feed both passes identically; cond only here
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 7919, t, layer]))
        q_out, rec = query_control.select_q(t, layer, q, run.cache, self.kf, cfg, rng)
        run.audit.append(
            {
                "event": "query",
                "t": rec.t,
                "layer": rec.layer,
                "role": rec.role,
                "dropout_kept_fraction": rec.dropout_kept_fraction,
            }
        )
        return q_out

    # -- extended attention --

    def wants_extended(self, layer: int) -> bool:
        return self.sdsa_on

    def extended_attention(self, layer: int, feats) -> np.ndarray:
        cfg = self.cfg
        out = attention.sub_batched_attention(
            feats,
            self.masks,
            cfg.effective_sub_batch(feats.shots),
            key_shots_for=self.topology.key_shots,
            attend_middle_frame=cfg.attend_middle_frame,
        )
        if self.pass_tag == "cond":
            self.run.audit.append({"event": "sdsa", "t": self.t, "layer": layer})
        return out

    # -- refinement injection --

    def inject_o(self, layer: int, o: np.ndarray) -> np.ndarray:
        cfg = self.cfg
        if not self.refine_on or layer not in cfg.refine_layer_set():
            return o
        snapshot = o.copy()
        out = o.copy()
        map_ids = []
        for s in range(o.shape[0]):
            sources = self.topology.refine_sources(s)
            if not sources:
                continue
            anchor_feats = np.concatenate([snapshot[a] for a in sources], axis=0)
            for f in range(o.shape[1]):
                key = (layer, s, f)
                if self.pass_tag == "cond":
                    corr = refinement.build_correspondence(
                        snapshot[s, f], anchor_feats, target=(s, f), source=sources
                    )
                    self.refine_handles[key] = corr
                else:
                    corr = self.refine_handles[key]
                out[s, f] = refinement.inject_refinement(
                    out[s, f], anchor_feats, corr, self.masks.masks[s, f], cfg.refine_blend
                )
                map_ids.append(corr.map_id)
        self.run.audit.append(
            {
                "event": "refinement",
                "t": self.t,
                "layer": layer,
                "pass": self.pass_tag,
                "map_ids": map_ids,
            }
        )
        return out


def sample(run: PipelineRun) -> np.ndarray:
    """Deterministic denoising of a full run; fills run.outputs/audit/masks."""
    cfg = run.config
    spec = cfg.model
    shots = run.shots
    if shots < 1:
        raise ConfigError("run needs at least one prompt")
    anchors = cfg.anchor_list(shots)
    topology = anchor_topology(shots, anchors)
    model = ToyModel(spec)
    sched = subject_mask.NoiseSchedule.geometric(cfg.total_steps, cfg.alpha_min)
    fp = run_fingerprint(cfg, run.prompts)
    run.fingerprint = fp

    if run.mode == RunMode.VANILLA:
        if run.cache is not None and len(run.cache):
            raise ConfigError("vanilla run must start with an empty cache")
        run.cache = query_control.FeatureCache(seed_fingerprint=fp)
    elif cfg.q_injection:
        if run.cache is None or not len(run.cache):
            raise ConfigError(f"{run.mode.value} run requires a vanilla feature cache")
        if run.cache.seed_fingerprint != fp:
            raise ReproducibilityError(
                "cache fingerprint does not match this run's generators"
            )

    kf = None
    if run.mode != RunMode.VANILLA and cfg.q_injection:
        kf = query_control.KeyframeIndex.build(spec.frames, cfg.keyframe_spacing)

    x = _init_latents(cfg, shots)
    ts = cfg.timesteps()
    next_ts = ts[1:] + [0]
    masks = None
    for t, t_next in zip(ts, next_ts):
        if run.mode != RunMode.VANILLA:
            e_probe = model.forward(x, run.prompts, cond=True, hooks=None)
            x0_probe = subject_mask.estimate_x0(x, e_probe, t, sched)
            masks = _build_masks(run, x0_probe)
        hooks = _StepHooks(
            run,
            model,
            t,
            masks,
            topology,
            kf,
            sdsa_on=run.mode != RunMode.VANILLA and _in_window(cfg.sdsa_window, t),
            refine_on=run.mode == RunMode.REFINED and _in_window(cfg.refine_window, t),
        )
        e_cond = model.forward(x, run.prompts, cond=True, hooks=hooks.for_pass("cond"))
        e_uncond = model.forward(x, run.prompts, cond=False, hooks=hooks.for_pass("uncond"))
        e = (
            e_uncond.astype(np.float64)
            + cfg.cfg_scale * (e_cond.astype(np.float64) - e_uncond.astype(np.float64))
        ).astype(tc.F32)
        x0 = subject_mask.estimate_x0(x, e, t, sched)
        a_next = sched.alpha(t_next)
        x = (
            math.sqrt(a_next) * x0.astype(np.float64)
            + math.sqrt(1.0 - a_next) * e.astype(np.float64)
        ).astype(tc.F32)
    run.outputs = x
    # masks over the final clean latents, shared by all modes for metrics
    run.final_masks = _build_masks(run, x)
    return x


def run_vanilla(config: StoryboardConfig, subject: str, prompts) -> PipelineRun:
    run = PipelineRun(config, subject, list(prompts), RunMode.VANILLA)
    sample(run)
    return run


def run_consistent(config, subject, prompts, cache=None) -> PipelineRun:
    run = PipelineRun(config, subject, list(prompts), RunMode.CONSISTENT, cache=cache)
    sample(run)
    return run


def run_refined(config, subject, prompts, cache=None) -> PipelineRun:
    run = PipelineRun(config, subject, list(prompts), RunMode.REFINED, cache=cache)
    sample(run)
    return run
