"""Command-line surface: detect, calibrate, evaluate, mask-gen, simulate,
align, pair-build.

Option precedence for shared settings is flags > environment (MD_ prefix) >
JSON config file (--config) > defaults, and the effective values are logged
at startup. Exit codes: 0 success, 1 usage error, 2 partial per-image
failures, 3 endpoint failure.
"""

from __future__ import annotations

import base64
import json
import os
import sys
from pathlib import Path
from typing import Optional

import click
import httpx

from . import backend as backend_mod
from . import theory
from .backend import (
    ConnectivityError,
    ProtocolError,
    image_from_b64,
    image_to_b64,
    parse_backend,
    post_json_with_retries,
)
from .core import (
    MASK_KINDS,
    METRICS,
    REGIONS,
    ManifestEntry,
    RunConfig,
    ValidationError,
    append_score_records,
    image_from_png,
    image_to_png,
    load_manifest,
    load_score_records,
    mask_to_png,
    write_manifest,
)
from .detector import calibrate_tau, classify, run_detection
from .evaluation import emit_distribution_plot, evaluate_scores
from .masks import MaskSpec, generate_mask, masked_fraction


class PartialFailure(click.ClickException):
    exit_code = 2


class EndpointFailure(click.ClickException):
    exit_code = 3


def _load_config_file(path: Optional[str]) -> dict:
    if not path:
        return {}
    p = Path(path)
    if not p.exists():
        raise click.UsageError(f"config file {path} does not exist")
    try:
        cfg = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise click.UsageError(f"config file {path} is not valid JSON: {exc}")
    if not isinstance(cfg, dict):
        raise click.UsageError(f"config file {path} must hold a JSON object")
    return cfg


def _resolve(flag, env_key: str, cfg: dict, cfg_key: str, default):
    """flags > environment > config file > defaults; returns (value, source)."""
    if flag is not None:
        return flag, "flag"
    env = os.environ.get(env_key)
    if env:
        return env, f"env {env_key}"
    if cfg_key in cfg:
        return cfg[cfg_key], "config"
    return default, "default"


def _log(msg: str) -> None:
    click.echo(msg, err=True)


@click.group()
@click.option("--config", "config_path", default=None,
              help="JSON config file (lowest-precedence settings).")
@click.pass_context
def cli(ctx, config_path):
    """Corrupt-and-recover detection toolkit."""
    ctx.ensure_object(dict)
    ctx.obj["config"] = _load_config_file(config_path)


def _common_settings(ctx, endpoint, concurrency, token):
    cfg = ctx.obj["config"]
    endpoint, ep_src = _resolve(endpoint, "MD_ENDPOINT", cfg, "endpoint",
                                "builtin:mean-fill")
    concurrency, cc_src = _resolve(concurrency, "MD_CONCURRENCY", cfg,
                                   "concurrency", 4)
    token, tk_src = _resolve(token, "MD_TOKEN", cfg, "token", None)
    concurrency = int(concurrency)
    _log(f"backend={endpoint} ({ep_src}), concurrency={concurrency} ({cc_src}), "
         f"token={'set' if token else 'unset'} ({tk_src})")
    return endpoint, concurrency, token


@cli.command()
@click.option("--manifest", required=True, type=click.Path(exists=True))
@click.option("--backend", "endpoint", default=None,
              help="Backend endpoint (builtin:* or http URL).")
@click.option("--metric", type=click.Choice(METRICS), default="psnr", show_default=True)
@click.option("--mask", "mask_kind", type=click.Choice(MASK_KINDS),
              default="genhalf", show_default=True)
@click.option("--mask-seed", type=int, default=0, show_default=True)
@click.option("--k", type=int, default=3, show_default=True,
              help="Recovery samples per image.")
@click.option("--region", type=click.Choice(REGIONS), default="masked", show_default=True)
@click.option("--tau", type=float, default=None, help="Decision threshold.")
@click.option("--calibrate-from", "calibrate_from", type=click.Path(exists=True),
              default=None, help="Manifest whose fake entries calibrate tau.")
@click.option("--target-tpr", type=float, default=0.95, show_default=True)
@click.option("--images-root", type=click.Path(exists=True), default=None)
@click.option("--concurrency", type=int, default=None)
@click.option("--token", default=None)
@click.option("--use-prompts", is_flag=True, default=False,
              help="Forward manifest prompts to the backend (off: unconditioned).")
@click.option("--out", required=True, type=click.Path())
@click.pass_context
def detect(ctx, manifest, endpoint, metric, mask_kind, mask_seed, k, region, tau,
           calibrate_from, target_tpr, images_root, concurrency, token,
           use_prompts, out):
    """Score a manifest; emit one score/verdict record per line."""
    if tau is not None and calibrate_from is not None:
        raise click.UsageError("--tau and --calibrate-from are mutually exclusive")
    endpoint, concurrency, token = _common_settings(ctx, endpoint, concurrency, token)
    entries = load_manifest(manifest)
    fake_ids = {e.id for e in entries if e.label == "fake"}
    calib_entries = []
    if calibrate_from is not None:
        calib_entries = [e for e in load_manifest(calibrate_from) if e.label == "fake"]
        if not calib_entries:
            raise click.UsageError(f"{calibrate_from} has no fake entries to calibrate on")
        fake_ids |= {e.id for e in calib_entries}
    try:
        handle = parse_backend(endpoint, fake_ids=sorted(fake_ids), token=token)
    except ValidationError as exc:
        raise click.UsageError(str(exc))
    config = RunConfig(mask_kind=mask_kind, mask_seed=mask_seed, k=k, metric=metric,
                       region=region, backend_endpoint=endpoint, tau=tau,
                       concurrency=concurrency)
    root = Path(images_root) if images_root else None

    if not handle.health():
        raise EndpointFailure(f"backend {endpoint} failed its health probe")

    if calib_entries:
        calib_records, calib_failures = run_detection(
            calib_entries, config, handle, images_root=root, use_prompts=use_prompts)
        if calib_failures:
            for f in calib_failures:
                _log(f"calibration failure: {f.error}")
            raise PartialFailure("calibration run had per-image failures")
        tau = calibrate_tau([r.delta for r in calib_records], target_tpr,
                            metric=metric).tau
        _log(f"calibrated tau={tau} on {len(calib_records)} fakes "
             f"(target tpr {target_tpr})")

    records, failures = run_detection(entries, config, handle, images_root=root,
                                      use_prompts=use_prompts)
    extras = None
    if tau is not None:
        extras = {
            r.id: {"tau": tau, "label_hat": classify(r.delta, tau, r.id).label_hat}
            for r in records
        }
    append_score_records(records, out, extras=extras)
    _log(f"scored {len(records)}/{len(entries)} images -> {out}")
    for f in failures:
        _log(f"failure: {f.error}")
    if failures:
        if not records and all(f.kind == "ConnectivityError" for f in failures):
            raise EndpointFailure("backend unreachable for every image")
        raise PartialFailure(f"{len(failures)} image(s) failed; scores for the rest written")


@cli.command()
@click.option("--scores", required=True, type=click.Path(exists=True))
@click.option("--manifest", type=click.Path(exists=True), default=None,
              help="Restrict calibration to this manifest's fake entries.")
@click.option("--target-tpr", type=float, default=0.95, show_default=True)
@click.option("--out", type=click.Path(), default=None)
def calibrate(scores, manifest, target_tpr, out):
    """Pick the detection threshold from fake scores."""
    records = load_score_records(scores)
    if manifest:
        fakes = {e.id for e in load_manifest(manifest) if e.label == "fake"}
        records = [r for r in records if r.id in fakes]
    if not records:
        raise click.UsageError("no fake score records to calibrate on")
    metrics = {r.metric for r in records}
    if len(metrics) > 1:
        raise click.UsageError(f"score file mixes metrics: {sorted(metrics)}")
    result = calibrate_tau([r.delta for r in records], target_tpr,
                           metric=records[0].metric)
    payload = {
        "metric": result.metric,
        "tau": result.tau,
        "n_calibration": result.n_calibration,
        "target_tpr": result.target_tpr,
    }
    if out:
        Path(out).write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
    click.echo(json.dumps(payload))


@cli.command()
@click.option("--scores", required=True, type=click.Path(exists=True))
@click.option("--manifest", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@click.option("--plot", type=click.Path(), default=None,
              help="Also write a score-distribution plot (svg/pdf/png).")
def evaluate(scores, manifest, out, plot):
    """Compute AUROC / AP / FPR95 for a labeled score file."""
    records = load_score_records(scores)
    labels = {e.id: e.label for e in load_manifest(manifest)}
    unknown = [r.id for r in records if r.id not in labels]
    if unknown:
        raise click.UsageError(f"score ids missing from manifest: {unknown[:5]}")
    metrics = {r.metric for r in records}
    if len(metrics) != 1:
        raise click.UsageError(f"score file must hold exactly one metric, got {sorted(metrics)}")
    fake = [r.delta for r in records if labels[r.id] == "fake"]
    real = [r.delta for r in records if labels[r.id] == "real"]
    if not fake or not real:
        raise click.UsageError("need at least one fake and one real score")
    report = evaluate_scores(fake, real, metric=metrics.pop())
    report.write_json(out)
    if plot:
        emit_distribution_plot(fake, real, plot)
    click.echo(json.dumps(report.to_dict()))


@cli.command("mask-gen")
@click.option("--kind", type=click.Choice(MASK_KINDS), required=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--width", type=int, required=True)
@click.option("--height", type=int, required=True)
@click.option("--target-fraction", type=float, default=0.25, show_default=True)
@click.option("--out", required=True, type=click.Path())
def mask_gen(kind, seed, width, height, target_fraction, out):
    """Emit a 1-channel mask PNG (255 = masked, 0 = known)."""
    try:
        mask = generate_mask(MaskSpec(kind=kind, seed=seed,
                                      target_fraction=target_fraction),
                             width, height)
    except ValidationError as exc:
        raise click.UsageError(str(exc))
    mask_to_png(mask, out)
    click.echo(json.dumps({"out": str(out), "masked_fraction": masked_fraction(mask)}))


@cli.command()
@click.option("--experiment", type=click.Choice(["pinsker", "lecam", "kbound"]),
              required=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--trials", type=int, default=1000, show_default=True,
              help="Trials (pinsker/kbound) or (G,H) pairs (lecam).")
@click.option("--out", type=click.Path(), default=None)
def simulate(experiment, seed, trials, out):
    """Run one of the numerical-lab experiments and report its verdict."""
    if experiment == "pinsker":
        report = theory.run_pinsker_experiment(trials=trials, seed=seed)
    elif experiment == "lecam":
        report = theory.run_lecam_experiment(n_pairs=trials, seed=seed)
    else:
        report = theory.run_kbound_experiment(trials=trials, seed=seed)
    if out:
        Path(out).write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")
    click.echo(json.dumps(report))


@cli.command()
@click.option("--prompts", "prompts_path", required=True, type=click.Path(exists=True),
              help="Text file, one generation prompt per line.")
@click.option("--n-images", type=int, required=True)
@click.option("--generate-endpoint", required=True)
@click.option("--finetune-endpoint", required=True)
@click.option("--out-dir", required=True, type=click.Path())
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--gen-size", type=int, default=32, show_default=True,
              help="Generated image side length (must match the serving model).")
@click.option("--rank", type=int, default=4, show_default=True)
@click.option("--steps", type=int, default=1000, show_default=True)
@click.option("--lr", type=float, default=1e-4, show_default=True)
@click.option("--token", default=None)
@click.option("--timeout", type=float, default=900.0, show_default=True)
@click.pass_context
def align(ctx, prompts_path, n_images, generate_endpoint, finetune_endpoint,
          out_dir, seed, gen_size, rank, steps, lr, token, timeout):
    """Collect target-model images, then fine-tune the surrogate on them.

    Collection is resumable: images already on disk are kept and skipped.
    """
    if n_images < 1:
        raise click.UsageError("--n-images must be >= 1")
    prompts = [p.strip() for p in Path(prompts_path).read_text(encoding="utf-8").splitlines()
               if p.strip()]
    if not prompts:
        raise click.UsageError(f"{prompts_path} holds no prompts")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _, _, token = _common_settings(ctx, generate_endpoint, 1, token)
    headers = {"Authorization": f"Bearer {token}"} if token else {}
    log_path = out / "generation_log.jsonl"
    entries = []
    with httpx.Client(timeout=timeout, headers=headers) as client:
        for i in range(n_images):
            image_id = f"gen-{i:04d}"
            png_path = out / f"{image_id}.png"
            prompt = prompts[i % len(prompts)]
            if not png_path.exists():
                body = {"prompt": prompt, "seed": seed + i,
                        "width": gen_size, "height": gen_size}
                try:
                    payload = post_json_with_retries(
                        client, f"{generate_endpoint.rstrip('/')}/v1/generate", body)
                    image = image_from_b64(payload["image_png_b64"])
                except (ConnectivityError, ProtocolError, KeyError) as exc:
                    raise EndpointFailure(
                        f"generation failed at image {i + 1}/{n_images}: {exc}; "
                        f"{i} image(s) already in {out} are preserved, rerun to resume")
                image_to_png(image, png_path)
                with log_path.open("a", encoding="utf-8") as fh:
                    fh.write(json.dumps({"id": image_id, "seed": seed + i,
                                         "prompt": prompt}) + "\n")
            entries.append(ManifestEntry(id=image_id, path=png_path.name,
                                         label="fake", source_model="target-api",
                                         prompt=prompt))
        manifest_path = out / "manifest.jsonl"
        write_manifest(entries, manifest_path)
        _log(f"collected {len(entries)} images -> {manifest_path}")

        images_b64 = [
            base64.b64encode((out / e.path).read_bytes()).decode("ascii")
            for e in entries
        ]
        try:
            ft = post_json_with_retries(
                client, f"{finetune_endpoint.rstrip('/')}/v1/finetune",
                {"images_png_b64": images_b64, "rank": rank, "steps": steps, "lr": lr})
        except (ConnectivityError, ProtocolError) as exc:
            raise EndpointFailure(f"fine-tune failed: {exc}")
    if "adapter_id" not in ft:
        raise EndpointFailure(f"fine-tune response missing adapter_id: {ft}")
    (out / "adapter.json").write_text(json.dumps(ft, indent=2) + "\n", encoding="utf-8")
    click.echo(json.dumps(ft))


@cli.command("pair-build")
@click.option("--real-manifest", required=True, type=click.Path(exists=True))
@click.option("--caption-endpoint", required=True)
@click.option("--generate-endpoint", required=True)
@click.option("--out-dir", required=True, type=click.Path())
@click.option("--out-manifest", required=True, type=click.Path())
@click.option("--images-root", type=click.Path(exists=True), default=None)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--token", default=None)
@click.option("--timeout", type=float, default=300.0, show_default=True)
@click.option("--max-skip-fraction", type=float, default=0.10, show_default=True)
def pair_build(real_manifest, caption_endpoint, generate_endpoint, out_dir,
               out_manifest, images_root, seed, token, timeout, max_skip_fraction):
    """Caption each real image, regenerate it, and emit a paired manifest.

    Output entries come in pairs sharing the original id: <id>.real and
    <id>.fake. Per-image endpoint failures are skipped and logged; more
    than --max-skip-fraction skips marks the whole run failed.
    """
    entries = load_manifest(real_manifest)
    not_real = [e.id for e in entries if e.label != "real"]
    if not_real:
        raise click.UsageError(f"real manifest has non-real entries: {not_real[:5]}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    root = Path(images_root) if images_root else None
    headers = {"Authorization": f"Bearer {token}"} if token else {}
    paired: list[ManifestEntry] = []
    skipped: list[str] = []
    with httpx.Client(timeout=timeout, headers=headers) as client:
        for i, entry in enumerate(entries):
            src = Path(entry.path)
            if root is not None and not src.is_absolute():
                src = root / src
            try:
                image = image_from_png(src)
                cap = post_json_with_retries(
                    client, f"{caption_endpoint.rstrip('/')}/v1/caption",
                    {"image_png_b64": image_to_b64(image)})
                caption = str(cap["caption"])
                gen = post_json_with_retries(
                    client, f"{generate_endpoint.rstrip('/')}/v1/generate",
                    {"prompt": caption, "seed": seed + i,
                     "width": image.width, "height": image.height})
                fake_image = image_from_b64(gen["image_png_b64"])
            except (ConnectivityError, ProtocolError, ValidationError,
                    KeyError, OSError) as exc:
                skipped.append(entry.id)
                _log(f"skipped {entry.id}: {exc}")
                continue
            fake_path = out / f"{entry.id}.fake.png"
            image_to_png(fake_image, fake_path)
            source_model = str(gen.get("backend_id", "generate-endpoint"))
            paired.append(ManifestEntry(id=f"{entry.id}.real", path=str(src),
                                        label="real", source_model=entry.source_model,
                                        prompt=caption))
            paired.append(ManifestEntry(id=f"{entry.id}.fake", path=str(fake_path),
                                        label="fake", source_model=source_model,
                                        prompt=caption))
    write_manifest(paired, out_manifest)
    _log(f"paired {len(paired) // 2}/{len(entries)} images -> {out_manifest}")
    if entries and len(skipped) / len(entries) > max_skip_fraction:
        raise EndpointFailure(
            f"{len(skipped)}/{len(entries)} entries skipped; run marked failed")
    if skipped:
        raise PartialFailure(f"{len(skipped)} entr(ies) skipped: {skipped[:5]}")


def main(argv=None) -> int:
    """Entry point with the documented exit-code mapping."""
    try:
        cli.main(args=argv, standalone_mode=False)
        return 0
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.UsageError as exc:
        exc.show()
        return 1
    except click.ClickException as exc:
        exc.show()
        return exc.exit_code
    except ConnectivityError as exc:
        click.echo(f"Error: endpoint failure: {exc}", err=True)
        return 3
    except (ValidationError, ProtocolError) as exc:
        click.echo(f"Error: {exc}", err=True)
        return 1


if __name__ == "__main__":
    sys.exit(main())
