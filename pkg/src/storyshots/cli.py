"""Command-line front end: run the multi-pass pipeline over a prompt file and
write latent dumps, audit logs, metrics, and y-t slice images."""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
import traceback
from pathlib import Path

import numpy as np
import yaml

from . import metrics_viz, pipeline, prompts, tensor_core
from .errors import StoryshotsError

DEFAULT_FLOW_THRESHOLD = 0.5
SLICE_BLOCK_SIZE = 4
SLICE_SEARCH_RADIUS = 2

_MODE_SEQUENCE = {
    "vanilla": [pipeline.RunMode.VANILLA],
    "consistent": [pipeline.RunMode.VANILLA, pipeline.RunMode.CONSISTENT],
    "refined": [
        pipeline.RunMode.VANILLA,
        pipeline.RunMode.CONSISTENT,
        pipeline.RunMode.REFINED,
    ],
}


def _effective_config(config_path, overrides: dict) -> pipeline.StoryboardConfig:
    data = {}
    if config_path is not None:
        with open(config_path, "r", encoding="utf-8") as fh:
            data = yaml.safe_load(fh) or {}
    data.update({k: v for k, v in overrides.items() if v is not None})
    return pipeline.StoryboardConfig.from_dict(data)


def _file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _shot_videos(latents: np.ndarray, channel: int, patches_per_side: int) -> np.ndarray:
    shots, frames = latents.shape[:2]
    side = patches_per_side
    return latents[..., channel].reshape(shots, frames, side, side)


def _write_metrics(out_dir: Path, run: pipeline.PipelineRun) -> None:
    cfg = run.config
    videos = _shot_videos(run.outputs, cfg.subject_channel, cfg.model.patches_per_side)
    rows = []
    if run.shots >= 2:
        report = metrics_viz.set_consistency(run.outputs, run.final_masks)
        rows.append(
            ("set_consistency", report.set_consistency, report.set_consistency_sem, report.pair_count)
        )
        rows.append(("subject_consistency", report.subject_consistency, 0.0, run.shots))
    scores = []
    for s in range(run.shots):
        score, _ = metrics_viz.dynamic_degree(
            videos[s],
            DEFAULT_FLOW_THRESHOLD,
            block_size=SLICE_BLOCK_SIZE,
            search_radius=SLICE_SEARCH_RADIUS,
        )
        scores.append(score)
    sem = float(np.std(scores, ddof=1) / math.sqrt(len(scores))) if len(scores) > 1 else 0.0
    rows.append(("dynamic_degree", float(np.mean(scores)), sem, len(scores)))
    metrics_viz.write_reports(out_dir / "metrics.csv", out_dir / "metrics.json", rows)

    slice_dir = out_dir / "slices"
    slice_dir.mkdir(exist_ok=True)
    for s in range(run.shots):
        image, _ = metrics_viz.yt_slice(videos[s])
        metrics_viz.write_pgm(slice_dir / f"shot_{s}.pgm", image)


def _write_audit(path: Path, audit) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for record in audit:
            fh.write(json.dumps(record, separators=(",", ":")))
            fh.write("\n")


def run_storyboard(config_path, prompts_path, out_dir, mode: str = "refined", overrides=None) -> int:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    try:
        config = _effective_config(config_path, overrides or {})
        prompt_sets = prompts.load_prompts(prompts_path)
        if mode not in _MODE_SEQUENCE:
            raise StoryshotsError(f"unknown mode {mode!r}")
        for prompt_set in prompt_sets:
            set_dir = out_dir / prompt_set.name
            set_dir.mkdir(exist_ok=True)
            _run_prompt_set(config, prompt_set, mode, set_dir, _file_hash(prompts_path))
    except Exception as exc:
        (out_dir / "FAILED").write_text(f"{type(exc).__name__}: {exc}\n")
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        if not isinstance(exc, StoryshotsError):
            traceback.print_exc()
        return 1
    return 0


def _run_prompt_set(config, prompt_set, mode, set_dir: Path, prompt_hash: str) -> None:
    shot_prompts = prompt_set.full_prompts
    pass_fingerprints = {}
    cache = None
    last_run = None
    for run_mode in _MODE_SEQUENCE[mode]:
        run = pipeline.PipelineRun(
            config, prompt_set.subject, shot_prompts, run_mode, cache=cache
        )
        pipeline.sample(run)
        dump_path = set_dir / f"latents_{run_mode.value}.tensor"
        tensor_core.save_tensor(dump_path, run.outputs)
        pass_fingerprints[run_mode.value] = _file_hash(dump_path)
        if run_mode == pipeline.RunMode.VANILLA:
            cache = run.cache
        else:
            _write_audit(set_dir / f"audit_{run_mode.value}.jsonl", run.audit)
        last_run = run
    _write_metrics(set_dir, last_run)
    manifest = {
        "config": config.to_dict(),
        "prompt_file_hash": prompt_hash,
        "seed": config.seed,
        "mode": mode,
        "run_fingerprint": last_run.fingerprint,
        "pass_fingerprints": pass_fingerprints,
    }
    with open(set_dir / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _parse_anchors(value):
    if value is None:
        return None
    return tuple(int(v) for v in value.split(",") if v.strip() != "")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="storyshots",
        description="Run the multi-shot consistency pipeline on a prompt file.",
    )
    parser.add_argument("--config", default=None, help="YAML config file")
    parser.add_argument("--prompts", required=True, help="YAML prompt-set file")
    parser.add_argument(
        "--out",
        default=os.environ.get("STORYBOARD_OUT", "out"),
        help="output directory (default: $STORYBOARD_OUT or ./out)",
    )
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--mode", choices=sorted(_MODE_SEQUENCE), default="refined")
    parser.add_argument("--t-pres", type=int, default=None, dest="t_pres")
    parser.add_argument("--q-dropout", type=float, default=None, dest="q_dropout")
    parser.add_argument("--sub-batch", type=int, default=None, dest="sub_batch")
    parser.add_argument("--anchors", default=None, help="comma-separated shot ids")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    overrides = {
        "seed": args.seed,
        "t_pres": args.t_pres,
        "q_dropout": args.q_dropout,
        "sub_batch": args.sub_batch,
        "anchors": _parse_anchors(args.anchors),
    }
    return run_storyboard(args.config, args.prompts, args.out, args.mode, overrides)


if __name__ == "__main__":
    raise SystemExit(main())
