"""Command-line entry points for the whole pipeline.

Every command resolves its checkpoint references first, runs fully
deterministically for a given ``--seed``, and finishes by writing a
manifest that hashes each input and output file. Training logs carry
wall-clock times, so they are listed in the manifest's ``excluded``
field rather than hashed.
"""

from __future__ import annotations

import json
from pathlib import Path

import click
import torch

torch.set_num_threads(1)

from .checkpoint import Checkpoint
from .directions import delta_w, estimate_p_stats, reenact_code, rescale
from .errors import ContractViolation, EmptyPool, MissingCheckpoint, TrainingDiverged, TrainingFailure
from .estimator import FrozenEmbedder, train_regressor
from .evaluation import disentanglement_report, linearity_analysis, run_eval
from .inversion import build_paired_pool, build_real_corpus, invert, invert_corpus, train_encoder
from .toygen import ATTRIBUTE_NAMES, POSE_DIM, ToyGenerator
from .training import SamplePools, TrainConfig, finetune_paired, train_directions
from .workspace import Workspace, image_to_png, png_to_image

_FAILURES = (ContractViolation, EmptyPool, MissingCheckpoint, TrainingDiverged, TrainingFailure)


def _guard(fn):
    """Map library errors to clean nonzero exits instead of tracebacks."""

    def wrapped(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except _FAILURES as exc:
            raise click.ClickException(str(exc))

    wrapped.__name__ = fn.__name__
    wrapped.__doc__ = fn.__doc__
    return wrapped


@click.group()
@click.option(
    "--workspace",
    "root",
    type=click.Path(file_okay=False),
    default=None,
    help="Workspace root; defaults to $LATENTPOSE_WORKSPACE or ./workspace.",
)
@click.pass_context
def main(ctx, root):
    """Latent-direction pose editing: training, inversion, editing, serving."""
    ctx.obj = Workspace(root)


pass_ws = click.make_pass_decorator(Workspace)


def _write_report(ws: Workspace, name: str, payload) -> Path:
    path = ws.root / "reports" / name
    path.write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n")
    return path


def _write_log(ws: Workspace, name: str, entries: list[dict]) -> Path:
    path = ws.root / "reports" / name
    with path.open("w") as fh:
        for entry in entries:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")
    return path


@main.command()
@click.option("--seed", default=0, show_default=True)
@pass_ws
@_guard
def init(ws: Workspace, seed: int):
    """Build the toy generator (with its shape model) and the embedder."""
    gen_path = ws.save_generator(ToyGenerator(seed=seed))
    emb_path = ws.save_embedder(FrozenEmbedder(seed=seed))
    ws.write_manifest(
        "init",
        {"seed": seed},
        inputs={},
        outputs={"generator": gen_path, "embedder": emb_path},
    )
    click.echo(f"generator: {gen_path}")
    click.echo(f"embedder: {emb_path}")


@main.command("train-regressor")
@click.option("--seed", default=0, show_default=True)
@pass_ws
@_guard
def cmd_train_regressor(ws: Workspace, seed: int):
    """Train the pose/expression parameter estimator."""
    ws.require("generator")
    generator = ws.load_generator()
    regressor, report = train_regressor(generator, seed=seed)
    reg_path = ws.save_regressor(regressor)
    report_path = _write_report(ws, "regressor-report.json", report)
    ws.write_manifest(
        "train-regressor",
        {"seed": seed},
        inputs={"generator": ws.checkpoint_path("generator")},
        outputs={"regressor": reg_path, "report": report_path},
    )
    click.echo(f"regressor: {reg_path} (worst RMSE fraction {report['worst_fraction']:.5f})")


@main.command()
@click.option("--seed", default=0, show_default=True)
@click.option("--samples", default=10000, show_default=True)
@pass_ws
@_guard
def calibrate(ws: Workspace, seed: int, samples: int):
    """Estimate per-attribute ranges from regressor output quantiles."""
    ws.require("generator", "regressor")
    stats = estimate_p_stats(ws.load_generator(), ws.load_regressor(), n=samples, seed=seed)
    path = ws.save_stats(stats)
    ws.write_manifest(
        "calibrate",
        {"seed": seed, "samples": samples},
        inputs={
            "generator": ws.checkpoint_path("generator"),
            "regressor": ws.checkpoint_path("regressor"),
        },
        outputs={"pose_stats": path},
    )
    click.echo(f"pose stats: {path}")


@main.command("train-directions")
@click.option("--scheme", type=click.Choice(["synthetic", "mixed"]), required=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--iterations", default=2000, show_default=True)
@click.option("--batch-size", default=8, show_default=True)
@click.option("--learning-rate", default=1e-4, show_default=True)
@pass_ws
@_guard
def cmd_train_directions(ws, scheme, seed, iterations, batch_size, learning_rate):
    """Learn the latent direction matrix under the chosen sampling scheme."""
    needed = ["generator", "regressor", "embedder", "pose_stats"]
    if scheme == "mixed":
        needed += ["encoder", "corpus"]
    ws.require(*needed)
    generator = ws.load_generator()
    pools = None
    inputs = {name: ws.checkpoint_path(name) for name in needed}
    if scheme == "mixed":
        pools = SamplePools(inverted=invert_corpus(ws.load_encoder(), ws.load_corpus()))
    config = TrainConfig(
        scheme=scheme.upper(),
        iterations=iterations,
        batch_size=batch_size,
        learning_rate=learning_rate,
        seed=seed,
    )
    model, log = train_directions(
        generator, ws.load_regressor(), ws.load_embedder(), ws.load_stats(), config, pools
    )
    path = ws.save_directions(scheme, model)
    log_name = f"train-directions-{scheme}.log.jsonl"
    _write_log(ws, log_name, log)
    ws.write_manifest(
        f"train-directions-{scheme}",
        {
            "scheme": scheme,
            "seed": seed,
            "iterations": iterations,
            "batch_size": batch_size,
            "learning_rate": learning_rate,
        },
        inputs=inputs,
        outputs={"directions": path},
        excluded=(f"reports/{log_name}",),
    )
    click.echo(f"directions ({scheme}): {path}")


@main.command("finetune-paired")
@click.option("--base", type=click.Choice(["synthetic", "mixed"]), default="mixed", show_default=True)
@click.option("--pairs", default=128, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--iterations", default=400, show_default=True)
@click.option("--batch-size", default=8, show_default=True)
@click.option("--learning-rate", default=1e-4, show_default=True)
@pass_ws
@_guard
def cmd_finetune_paired(ws, base, pairs, seed, iterations, batch_size, learning_rate):
    """Fine-tune a trained direction matrix on same-identity frame pairs."""
    needed = ["generator", "regressor", "embedder", "encoder", f"directions-{base}"]
    ws.require(*needed)
    generator = ws.load_generator()
    source, target = build_paired_pool(generator, ws.load_encoder(), pairs, seed)
    config = TrainConfig(
        iterations=iterations, batch_size=batch_size, learning_rate=learning_rate, seed=seed
    )
    tuned, log = finetune_paired(
        generator,
        ws.load_regressor(),
        ws.load_embedder(),
        ws.load_directions(base),
        SamplePools(paired_source=source, paired_target=target),
        config,
    )
    path = ws.save_directions("paired", tuned)
    log_name = "finetune-paired.log.jsonl"
    _write_log(ws, log_name, log)
    ws.write_manifest(
        "finetune-paired",
        {
            "base": base,
            "pairs": pairs,
            "seed": seed,
            "iterations": iterations,
            "batch_size": batch_size,
            "learning_rate": learning_rate,
        },
        inputs={name: ws.checkpoint_path(name) for name in needed},
        outputs={"directions": path},
        excluded=(f"reports/{log_name}",),
    )
    click.echo(f"directions (paired): {path}")


@main.command("build-corpus")
@click.option("--size", default=256, show_default=True)
@click.option("--seed", default=0, show_default=True)
@pass_ws
@_guard
def cmd_build_corpus(ws: Workspace, size: int, seed: int):
    """Render the perturbed real-analog corpus."""
    ws.require("generator")
    corpus = build_real_corpus(ws.load_generator(), size, seed)
    path = ws.save_corpus(corpus)
    ws.write_manifest(
        "build-corpus",
        {"size": size, "seed": seed},
        inputs={"generator": ws.checkpoint_path("generator")},
        outputs={"corpus": path},
    )
    click.echo(f"corpus: {path} ({size} frames)")


@main.command("train-encoder")
@click.option("--seed", default=0, show_default=True)
@click.option("--warmup-steps", default=4000, show_default=True)
@click.option("--recon-steps", default=800, show_default=True)
@pass_ws
@_guard
def cmd_train_encoder(ws: Workspace, seed: int, warmup_steps: int, recon_steps: int):
    """Train the image-to-latent encoder on the corpus."""
    ws.require("generator", "corpus", "embedder")
    encoder, report = train_encoder(
        ws.load_generator(),
        ws.load_corpus(),
        seed=seed,
        warmup_steps=warmup_steps,
        recon_steps=recon_steps,
        embedder=ws.load_embedder(),
    )
    path = ws.save_encoder(encoder)
    report_path = _write_report(ws, "encoder-report.json", report)
    ws.write_manifest(
        "train-encoder",
        {"seed": seed, "warmup_steps": warmup_steps, "recon_steps": recon_steps},
        inputs={name: ws.checkpoint_path(name) for name in ("generator", "corpus", "embedder")},
        outputs={"encoder": path, "report": report_path},
    )
    click.echo(f"encoder: {path} (held-out pixel L1 {report['pixel_l1']:.5f})")


def _read_image(path: str) -> torch.Tensor:
    return png_to_image(Path(path).read_bytes())


def _save_png(ws: Workspace, name: str, image: torch.Tensor) -> Path:
    path = ws.root / "reports" / name
    path.write_bytes(image_to_png(image))
    return path


@main.command("invert")
@click.option("--image", "image_file", type=click.Path(exists=True, dir_okay=False), required=True)
@pass_ws
@_guard
def cmd_invert(ws: Workspace, image_file: str):
    """Invert one image file to a latent code and a reconstruction."""
    ws.require("generator", "encoder")
    frame = _read_image(image_file)
    code = invert(ws.load_encoder(), frame)
    recon = ws.load_generator().render(code)
    stem = Path(image_file).stem
    code_path = ws.root / "reports" / f"invert-{stem}.ckpt"
    Checkpoint("latent_code", meta={"source": Path(image_file).name}, tensors={"w_plus": code.numpy()}).save(code_path)
    recon_path = _save_png(ws, f"invert-{stem}.png", recon)
    ws.write_manifest(
        f"invert-{stem}",
        {"image": Path(image_file).name},
        inputs={"image": Path(image_file), "generator": ws.checkpoint_path("generator"), "encoder": ws.checkpoint_path("encoder")},
        outputs={"code": code_path, "reconstruction": recon_path},
    )
    click.echo(f"code: {code_path}")
    click.echo(f"reconstruction: {recon_path}")


@main.command("reenact")
@click.option("--source", "source_file", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--target", "target_file", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--self/--cross", "self_mode", default=True, help="Label for the transfer mode; recorded in the manifest.")
@click.option("--directions", "scheme", type=click.Choice(["synthetic", "mixed", "paired"]), default="synthetic", show_default=True)
@pass_ws
@_guard
def cmd_reenact(ws, source_file, target_file, self_mode, scheme):
    """Drive the source image with the target image's pose and expression."""
    ws.require("generator", "regressor", "encoder", f"directions-{scheme}")
    generator = ws.load_generator()
    regressor = ws.load_regressor()
    model = ws.load_directions(scheme)
    source = _read_image(source_file)
    target = _read_image(target_file)
    w_s = invert(ws.load_encoder(), source)
    p_s = regressor.estimate(source).control_vector()
    p_t = regressor.estimate(target).control_vector()
    w_r = reenact_code(model, model.stats, w_s, p_s, p_t)
    out = generator.render(w_r)
    mode = "self" if self_mode else "cross"
    out_path = _save_png(ws, f"reenact-{mode}.png", out)
    ws.write_manifest(
        f"reenact-{mode}",
        {
            "source": Path(source_file).name,
            "target": Path(target_file).name,
            "mode": mode,
            "directions": scheme,
        },
        inputs={
            "source": Path(source_file),
            "target": Path(target_file),
            "directions": ws.checkpoint_path(f"directions-{scheme}"),
        },
        outputs={"image": out_path},
    )
    click.echo(f"reenactment: {out_path}")


def _edit_to_targets(ws, image_file, targets: dict[str, float], scheme: str, command: str):
    """Shared edit path: absolute attribute targets -> rendered image."""
    ws.require("generator", "regressor", "encoder", f"directions-{scheme}")
    generator = ws.load_generator()
    regressor = ws.load_regressor()
    model = ws.load_directions(scheme)
    stats = model.stats
    frame = _read_image(image_file)
    w_inv = invert(ws.load_encoder(), frame)
    p_cur = regressor.estimate(frame).control_vector()
    p_goal = p_cur.clone()
    for name, value in targets.items():
        p_goal[ATTRIBUTE_NAMES.index(name)] = value
    delta = rescale(p_goal, stats) - rescale(p_cur, stats)
    out = generator.render(w_inv + delta_w(model, delta))
    out_path = _save_png(ws, f"{command}.png", out)
    achieved = regressor.estimate(out).control_vector()
    return out_path, achieved, frame


@main.command("edit")
@click.option("--image", "image_file", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--attr", type=click.Choice(list(ATTRIBUTE_NAMES)), required=True)
@click.option("--value", type=float, required=True)
@click.option("--directions", "scheme", type=click.Choice(["synthetic", "mixed", "paired"]), default="synthetic", show_default=True)
@pass_ws
@_guard
def cmd_edit(ws, image_file, attr, value, scheme):
    """Move one attribute of an inverted image to an absolute target."""
    out_path, achieved, _ = _edit_to_targets(ws, image_file, {attr: value}, scheme, f"edit-{attr}")
    ws.write_manifest(
        f"edit-{attr}",
        {"image": Path(image_file).name, "attr": attr, "value": value, "directions": scheme},
        inputs={"image": Path(image_file), "directions": ws.checkpoint_path(f"directions-{scheme}")},
        outputs={"image": out_path},
    )
    idx = ATTRIBUTE_NAMES.index(attr)
    click.echo(f"edited image: {out_path}")
    click.echo(f"achieved {attr}: {float(achieved[idx]):.4f} (requested {value:.4f})")


@main.command("frontalize")
@click.option("--image", "image_file", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--directions", "scheme", type=click.Choice(["synthetic", "mixed", "paired"]), default="synthetic", show_default=True)
@pass_ws
@_guard
def cmd_frontalize(ws, image_file, scheme):
    """Edit all three pose angles to zero."""
    targets = {ATTRIBUTE_NAMES[i]: 0.0 for i in range(POSE_DIM)}
    out_path, achieved, _ = _edit_to_targets(ws, image_file, targets, scheme, "frontalize")
    ws.write_manifest(
        "frontalize",
        {"image": Path(image_file).name, "directions": scheme},
        inputs={"image": Path(image_file), "directions": ws.checkpoint_path(f"directions-{scheme}")},
        outputs={"image": out_path},
    )
    click.echo(f"frontalized image: {out_path}")
    click.echo(
        "achieved pose: "
        + " ".join(f"{ATTRIBUTE_NAMES[i]}={float(achieved[i]):.3f}" for i in range(POSE_DIM))
    )


@main.command("eval")
@click.option("--mode", type=click.Choice(["self", "cross"]), required=True)
@click.option("--pairs", default=20, show_default=True)
@click.option("--directions", "scheme", type=click.Choice(["synthetic", "mixed", "paired"]), default="synthetic", show_default=True)
@pass_ws
@_guard
def cmd_eval(ws, mode, pairs, scheme):
    """Score reenactment over corpus frame pairs; writes JSON and CSV."""
    ws.require("generator", "regressor", "embedder", "encoder", "corpus", f"directions-{scheme}")
    generator = ws.load_generator()
    corpus = ws.load_corpus()
    need = pairs if mode == "self" else 2 * pairs
    if len(corpus) < need:
        raise ContractViolation(f"corpus has {len(corpus)} frames; {mode} eval over {pairs} pairs needs {need}")
    encoder = ws.load_encoder()
    source_frames = corpus.images[:pairs]
    target_frames = corpus.images[:pairs] if mode == "self" else corpus.images[pairs : 2 * pairs]
    model = ws.load_directions(scheme)
    report = run_eval(
        generator,
        ws.load_regressor(),
        ws.load_embedder(),
        model,
        model.stats,
        invert(encoder, source_frames),
        None,
        mode,
        source_frames=source_frames,
        target_frames=target_frames,
    )
    json_path = _write_report(ws, f"eval-{mode}.json", report.to_dict())
    csv_path = ws.root / "reports" / f"eval-{mode}.csv"
    csv_path.write_text(report.records_csv())
    ws.write_manifest(
        f"eval-{mode}",
        {"mode": mode, "pairs": pairs, "directions": scheme},
        inputs={
            name: ws.checkpoint_path(name)
            for name in ("generator", "regressor", "embedder", "encoder", "corpus", f"directions-{scheme}")
        },
        outputs={"report": json_path, "records": csv_path},
    )
    click.echo(report.to_text())


@main.command("analyze")
@click.option("--linearity", "kind", flag_value="linearity")
@click.option("--disentanglement", "kind", flag_value="disentanglement")
@click.option("--attr", type=click.Choice(list(ATTRIBUTE_NAMES)), default="yaw", show_default=True)
@click.option("--edits", default=500, show_default=True)
@click.option("--samples", default=200, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--directions", "scheme", type=click.Choice(["synthetic", "mixed", "paired"]), default="synthetic", show_default=True)
@click.pass_context
@_guard
def cmd_analyze(ctx, kind, attr, edits, samples, seed, scheme):
    """Linearity or disentanglement analysis of a trained direction matrix."""
    if kind is None:
        ctx.fail("pass --linearity or --disentanglement")
    ws = ctx.obj
    ws.require("generator", "regressor", f"directions-{scheme}")
    generator = ws.load_generator()
    regressor = ws.load_regressor()
    model = ws.load_directions(scheme)
    if kind == "linearity":
        payload = linearity_analysis(generator, regressor, model, model.stats, edits, seed)
        args = {"kind": kind, "edits": edits, "seed": seed, "directions": scheme}
    else:
        payload = disentanglement_report(
            generator, regressor, model, model.stats, ATTRIBUTE_NAMES.index(attr), samples, seed
        )
        args = {"kind": kind, "attr": attr, "samples": samples, "seed": seed, "directions": scheme}
    path = _write_report(ws, f"analyze-{kind}.json", payload)
    ws.write_manifest(
        f"analyze-{kind}",
        args,
        inputs={"directions": ws.checkpoint_path(f"directions-{scheme}")},
        outputs={"report": path},
    )
    click.echo(json.dumps(payload, indent=1, sort_keys=True))


@main.command("serve")
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8000, show_default=True)
@click.option("--directions", "scheme", type=click.Choice(["synthetic", "mixed", "paired"]), default="synthetic", show_default=True)
@click.option("--session-ttl", default=1800.0, show_default=True, help="Idle seconds before a session expires.")
@pass_ws
@_guard
def cmd_serve(ws, host, port, scheme, session_ttl):
    """Serve the HTTP editing API for the companion UI."""
    import uvicorn

    from .service import build_app

    ws.session_ttl = session_ttl
    app = build_app(ws, scheme=scheme)
    ws.write_manifest(
        "serve",
        {"host": host, "port": port, "directions": scheme, "session_ttl": session_ttl},
        inputs={
            name: ws.checkpoint_path(name)
            for name in ("generator", "regressor", "embedder", "encoder", f"directions-{scheme}")
        },
        outputs={},
    )
    uvicorn.run(app, host=host, port=port, log_level="warning")


if __name__ == "__main__":
    main()
