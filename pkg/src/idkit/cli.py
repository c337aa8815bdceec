"""Command-line surface.

Exit codes are a stable contract: 0 success, 1 validation or invariant
failure, 2 usage or configuration error. Every command is deterministic
given --seed and mock backends, and supports --json for machine-readable
summaries.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click

from .backbone import BackboneSpec
from .captions import caption_corpus, load_endpoints
from .checkpoint import read_archive
from .data.corpus import CorpusSpec, generate_synthetic_corpus, write_corpus
from .data.manifest import build_dataset, read_manifest
from .diffusion import GenerationConfig
from .errors import CheckpointError, IdKitError, ManifestError
from .pipeline import generate_video, save_frames
from .report import render_training_report
from .training import TrainConfig, train_loop

DATASET_PRESETS = {
    "paper": dict(clip_length=16, size=512, pool_target=5, ref_size=224),
    "ci": dict(clip_length=8, size=64, pool_target=3, ref_size=32),
}
BACKBONE_PRESETS = {
    "paper": BackboneSpec(latent_size=64, frames=16),
    "ci": BackboneSpec(latent_size=8, frames=8),
}


def _emit(summary: dict, as_json: bool, lines: list[str]) -> None:
    if as_json:
        click.echo(json.dumps(summary, sort_keys=True))
    else:
        for line in lines:
            click.echo(line)


@click.group()
@click.version_option(package_name="idkit")
def main():
    """Identity-conditioned toy video generation toolkit."""


@main.command("synth-corpus")
@click.argument("spec_file", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.argument("out_dir", type=click.Path(file_okay=False, path_type=Path))
@click.option("--json", "as_json", is_flag=True, help="Machine-readable summary.")
def cmd_synth_corpus(spec_file: Path, out_dir: Path, as_json: bool):
    """Generate a synthetic video corpus with ground truth."""
    try:
        spec = CorpusSpec.from_json_file(spec_file)
    except (ValueError, TypeError, json.JSONDecodeError) as exc:
        raise click.UsageError(f"bad corpus spec {spec_file}: {exc}")
    videos, ground_truth = generate_synthetic_corpus(spec)
    write_corpus(videos, ground_truth, out_dir)
    summary = {"videos": len(videos),
               "multi_face": sum(1 for v in ground_truth["videos"].values() if v["multi_face"]),
               "out_dir": str(out_dir)}
    _emit(summary, as_json,
          [f"wrote {summary['videos']} videos ({summary['multi_face']} multi-face) to {out_dir}"])


@main.command("build-dataset")
@click.argument("in_dir", type=click.Path(exists=True, file_okay=False, path_type=Path))
@click.argument("out_manifest", type=click.Path(dir_okay=False, path_type=Path))
@click.option("--preset", type=click.Choice(sorted(DATASET_PRESETS)), default=None,
              help="Named size profile; flags below override it.")
@click.option("--clip-length", type=int, default=None, help="Frames per training clip.")
@click.option("--size", type=int, default=None, help="Square clip resolution.")
@click.option("--pool-target", type=int, default=None, help="Face crops per video.")
@click.option("--ref-size", type=int, default=None, help="Square face-crop resolution.")
@click.option("--seed", type=int, default=0)
@click.option("--json", "as_json", is_flag=True)
def cmd_build_dataset(in_dir: Path, out_manifest: Path, preset, clip_length, size,
                      pool_target, ref_size, seed, as_json):
    """Clip/crop videos, build face pools, filter, and write the manifest."""
    opts = dict(DATASET_PRESETS[preset or "paper"])
    for key, val in (("clip_length", clip_length), ("size", size),
                     ("pool_target", pool_target), ("ref_size", ref_size)):
        if val is not None:
            opts[key] = val
    records, report = build_dataset(in_dir, out_manifest.parent, seed=seed,
                                    manifest_name=out_manifest.name, **opts)
    if not records and not report.dropped:
        click.echo(f"warning: no videos found under {in_dir}; wrote an empty manifest", err=True)
    summary = {"manifest": str(out_manifest), **report.to_dict()}
    _emit(summary, as_json, [
        f"kept {len(report.kept)}, dropped {len(report.dropped)}",
        *(f"  dropped {vid}: {reason}" for vid, reason in sorted(report.dropped.items())),
        f"manifest: {out_manifest}",
    ])


@main.command("caption")
@click.argument("manifest", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.argument("endpoints_file", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--concurrency", type=int, default=4, show_default=True)
@click.option("--data-root", type=click.Path(file_okay=False, path_type=Path), default=None,
              envvar="ID_KIT_DATA_ROOT")
@click.option("--json", "as_json", is_flag=True)
def cmd_caption(manifest: Path, endpoints_file: Path, concurrency, data_root, as_json):
    """Produce attribute/action/unified captions for every manifest record."""
    try:
        clients = load_endpoints(endpoints_file)
    except (ValueError, KeyError, json.JSONDecodeError) as exc:
        raise click.UsageError(f"bad endpoints file {endpoints_file}: {exc}")
    summary = caption_corpus(manifest, clients, data_root=data_root,
                             concurrency_limit=concurrency)
    _emit(summary, as_json, [
        f"records: {summary['records']}, already captioned: {summary['already_captioned']}, "
        f"new: {summary['new_captions']}, quarantined: {summary['quarantined']}, "
        f"new client calls: {summary['client_calls']}",
    ])


@main.command("train")
@click.argument("manifest", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.argument("out_dir", type=click.Path(file_okay=False, path_type=Path))
@click.option("--config", "config_file", type=click.Path(exists=True, dir_okay=False, path_type=Path),
              default=None, help="TrainConfig JSON; flags override its fields.")
@click.option("--preset", type=click.Choice(sorted(BACKBONE_PRESETS)), default="paper",
              show_default=True, help="Backbone size profile.")
@click.option("--lr", type=float, default=None)
@click.option("--batch-size", type=int, default=None)
@click.option("--null-text-prob", type=float, default=None)
@click.option("--steps", type=int, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--checkpoint-every", type=int, default=None)
@click.option("--lambda-train", type=float, default=None)
@click.option("--resume", "resume_from", type=click.Path(exists=True, dir_okay=False, path_type=Path),
              default=None, help="Adapter checkpoint to continue from.")
@click.option("--data-root", type=click.Path(file_okay=False, path_type=Path), default=None,
              envvar="ID_KIT_DATA_ROOT")
@click.option("--json", "as_json", is_flag=True)
def cmd_train(manifest: Path, out_dir: Path, config_file, preset, lr, batch_size,
              null_text_prob, steps, seed, checkpoint_every, lambda_train,
              resume_from, data_root, as_json):
    """Train the face adapter against a captioned manifest."""
    base = TrainConfig.from_json_file(config_file).to_dict() if config_file else TrainConfig().to_dict()
    for key, val in (("lr", lr), ("batch_size", batch_size), ("null_text_prob", null_text_prob),
                     ("steps", steps), ("seed", seed), ("checkpoint_every", checkpoint_every),
                     ("lambda_train", lambda_train)):
        if val is not None:
            base[key] = val
    try:
        config = TrainConfig.from_dict(base)
    except ValueError as exc:
        raise click.UsageError(str(exc))
    if config.lr == 0:
        click.echo("warning: lr=0; weights will not move (legal degenerate run)", err=True)
    spec = BACKBONE_PRESETS[preset]
    try:
        result = train_loop(manifest, config, out_dir, spec, data_root=data_root,
                            resume_from=resume_from)
    except IdKitError as exc:
        click.echo(f"training failed: {exc}", err=True)
        sys.exit(1)
    report = render_training_report(result.metrics_path, out_dir / "report")
    summary = {
        "final_checkpoint": str(result.final_checkpoint),
        "metrics": str(result.metrics_path),
        "report_figure": report["figure"],
        "report_csv": report["csv"],
        "steps_run": result.steps_run,
    }
    _emit(summary, as_json, [
        f"final checkpoint: {summary['final_checkpoint']}",
        f"metrics: {summary['metrics']}",
        f"report: {summary['report_figure']} / {summary['report_csv']}",
    ])


@main.command("generate")
@click.argument("checkpoint", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--prompt", default="a person", show_default=True)
@click.option("--ref", "refs", multiple=True, type=click.Path(exists=True, dir_okay=False, path_type=Path),
              help="Reference face image; repeat for identity mixing.")
@click.option("--mix", "mix", multiple=True, type=float,
              help="Mixing weight per reference; must match --ref count.")
@click.option("--lambda", "lambda_scale", type=float, default=None,
              help="Image-branch scale; defaults to the checkpoint's value.")
@click.option("--scale", type=float, default=7.5, show_default=True, help="Guidance scale.")
@click.option("--frames", type=int, default=None, help="Frame count; defaults to the backbone spec.")
@click.option("--steps", type=int, default=30, show_default=True, help="Sampling steps.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", "out_dir", type=click.Path(file_okay=False, path_type=Path), default=Path("generated"),
              show_default=True)
@click.option("--json", "as_json", is_flag=True)
def cmd_generate(checkpoint: Path, prompt, refs, mix, lambda_scale, scale, frames,
                 steps, seed, out_dir, as_json):
    """Generate a video from a prompt and reference face(s)."""
    if mix and len(mix) != len(refs):
        raise click.UsageError(f"{len(mix)} mix weights given for {len(refs)} references")
    try:
        header, _ = read_archive(checkpoint)
    except CheckpointError as exc:
        click.echo(f"cannot read checkpoint: {exc}", err=True)
        sys.exit(1)
    if lambda_scale is None:
        lambda_scale = float(header.get("lambda_default", 1.0))
    if frames is None:
        frames = int(header["backbone_spec"]["frames"])
    config = GenerationConfig(
        prompt=prompt, reference_images=[str(p) for p in refs], mix_weights=list(mix),
        lambda_scale=lambda_scale, guidance_scale=scale, frames=frames, steps=steps, seed=seed,
    )
    click.echo(config.to_json())
    frames_arr, _ = generate_video(checkpoint, config)
    paths = save_frames(frames_arr, out_dir)
    summary = {"config": config.to_dict(), "out_dir": str(out_dir), "files": len(paths)}
    if as_json:
        click.echo(json.dumps(summary, sort_keys=True))
    else:
        click.echo(f"wrote {len(paths)} files to {out_dir}")


def _inspect_manifest(path: Path) -> tuple[dict, list[str]]:
    problems: list[str] = []
    try:
        records = read_manifest(path)
    except ManifestError as exc:
        return {"kind": "manifest", "path": str(path)}, [str(exc)]
    root = path.parent
    for rec in records:
        pool_meta = json.loads((root / rec.face_pool_path / "pool.json").read_text())
        seen = set()
        for entry in pool_meta["crops"]:
            if entry.get("n_faces_in_frame", 1) != 1:
                problems.append(
                    f"{rec.video_id}: crop {entry['file']} came from a frame with "
                    f"{entry['n_faces_in_frame']} faces"
                )
            if entry["source_frame"] in seen:
                problems.append(f"{rec.video_id}: duplicate source frame {entry['source_frame']}")
            seen.add(entry["source_frame"])
    return {"kind": "manifest", "path": str(path), "records": len(records)}, problems


def _inspect_pool(path: Path) -> tuple[dict, list[str]]:
    problems: list[str] = []
    meta = json.loads((path / "pool.json").read_text())
    seen = set()
    for entry in meta["crops"]:
        if not (path / entry["file"]).exists():
            problems.append(f"missing crop file {entry['file']}")
        if entry.get("n_faces_in_frame", 1) != 1:
            problems.append(
                f"crop {entry['file']} came from a frame with {entry['n_faces_in_frame']} faces"
            )
        if entry["source_frame"] in seen:
            problems.append(f"duplicate source frame {entry['source_frame']}")
        seen.add(entry["source_frame"])
    return {"kind": "pool", "path": str(path), "video_id": meta.get("video_id"),
            "crops": len(meta["crops"])}, problems


def _inspect_checkpoint(path: Path) -> tuple[dict, list[str]]:
    try:
        header, tensors = read_archive(path)
    except CheckpointError as exc:
        return {"kind": "checkpoint", "path": str(path)}, [str(exc)]
    n_params = int(sum(int(t.size) for t in tensors.values()))
    return {"kind": "checkpoint", "path": str(path), "checkpoint_kind": header.get("kind"),
            "tensors": len(tensors), "parameters": n_params,
            "backbone_spec_hash": header.get("backbone_spec_hash")}, []


@main.command("inspect")
@click.argument("path", type=click.Path(exists=True, path_type=Path))
@click.option("--json", "as_json", is_flag=True)
def cmd_inspect(path: Path, as_json):
    """Summarize a manifest, face pool, or checkpoint and validate its
    invariants; exits 1 on violations."""
    if path.is_dir() and (path / "pool.json").exists():
        summary, problems = _inspect_pool(path)
    elif path.suffix == ".jsonl":
        summary, problems = _inspect_manifest(path)
    elif path.is_file():
        summary, problems = _inspect_checkpoint(path)
    else:
        raise click.UsageError(f"cannot tell what {path} is (expected manifest, pool dir, or checkpoint)")
    summary["problems"] = problems
    if as_json:
        click.echo(json.dumps(summary, sort_keys=True))
    else:
        click.echo(", ".join(f"{k}={v}" for k, v in summary.items() if k != "problems"))
        for p in problems:
            click.echo(f"PROBLEM: {p}")
    if problems:
        sys.exit(1)


@main.command("report")
@click.argument("metrics", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--out-dir", type=click.Path(file_okay=False, path_type=Path), default=None,
              help="Defaults to a 'report' directory next to the metrics file.")
@click.option("--smooth", type=int, default=20, show_default=True)
@click.option("--json", "as_json", is_flag=True)
def cmd_report(metrics: Path, out_dir, smooth, as_json):
    """Render the loss-curve figure and metrics CSV from a metrics stream."""
    out_dir = out_dir or metrics.parent / "report"
    summary = render_training_report(metrics, out_dir, smooth=smooth)
    _emit(summary, as_json, [f"figure: {summary['figure']}", f"csv: {summary['csv']}"])


if __name__ == "__main__":
    main()
