"""Command-line entry point: ``depthvid <subcommand> ...``.

Exit status is 0 on success, 1 on usage or input errors and 2 when a numeric
failure (non-finite values, schedule underflow) aborts the run.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import pipeline, scene, train
from .model import Autoencoder, VideoDiffusionModel, load_checkpoint, save_checkpoint
from .tensor import NumericalError, load_tensor, save_tensor

log = logging.getLogger("depthvid")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_help(sys.stderr)
        raise UsageError(message)


def _frame_range(text: str) -> range:
    try:
        lo, hi = (int(v) for v in text.split(".."))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected A..B, got {text!r}") from None
    if lo < 1 or hi < lo:
        raise argparse.ArgumentTypeError(f"bad frame range {text!r}")
    return range(lo, hi + 1)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="depthvid", description="One-shot depth-conditioned video diffusion at desk scale.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser, required=True)

    s = sub.add_parser("synth", help="render a scene spec (or fixture name) to PPM/PGM frames")
    s.add_argument("spec")
    s.add_argument("outdir")
    s.add_argument("--frames", type=int, help="keep this many evenly spaced frames")
    s.add_argument("--contact-sheet", action="store_true")

    s = sub.add_parser("pretrain-ae", help="train the autoencoder and write a fresh model checkpoint")
    s.add_argument("datadir")
    s.add_argument("ckpt")
    s.add_argument("--steps", type=int, default=3000)
    s.add_argument("--lr", type=float, default=2e-3)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--random-scenes", type=int, default=24, help="extra random scenes mixed into training")

    s = sub.add_parser("finetune", help="one-shot tune attention projections on a video")
    s.add_argument("video")
    s.add_argument("prompt")
    s.add_argument("ckpt_in")
    s.add_argument("ckpt_out")
    s.add_argument("--steps", type=int, default=500)
    s.add_argument("--lr", type=float, default=1e-5)
    s.add_argument("--lambda", dest="temporal_weight", type=float, default=0.1)
    s.add_argument("--dropout", type=float, default=0.1)
    s.add_argument("--seed", type=int, default=0)

    s = sub.add_parser("invert", help="null-text DDIM inversion of a video")
    s.add_argument("ckpt")
    s.add_argument("video")
    s.add_argument("out")
    s.add_argument("--ddim-steps", type=int, default=50)

    s = sub.add_parser("generate", help="sample from an inversion with an edited prompt")
    s.add_argument("ckpt")
    s.add_argument("inv")
    s.add_argument("--prompt", required=True)
    s.add_argument("--guidance", type=float, default=7.5)
    s.add_argument("--ddim-steps", type=int, default=50)
    s.add_argument("--out", help="output directory (default: <inv>/generated)")

    s = sub.add_parser("eval", help="surrogate frame-consistency / text-alignment report as CSV")
    s.add_argument("video")
    s.add_argument("--prompt")
    s.add_argument("--ckpt", help="checkpoint whose autoencoder embeds frames (default: untrained, seed 1)")
    s.add_argument("--out", help="write CSV here instead of stdout")

    s = sub.add_parser("bench-attn", help="attention MAC counts and wall time per frame count")
    s.add_argument("--frames", type=_frame_range, required=True, metavar="A..B")
    s.add_argument("--tokens", type=int, required=True)
    s.add_argument("--dim", type=int, required=True)
    s.add_argument("--no-time", action="store_true", help="skip kernel timing (wall_ns = 0)")
    s.add_argument("--out")
    return p


def _load_spec(ref: str) -> scene.SceneSpec:
    path = Path(ref)
    if path.exists():
        return scene.load_scene(path)
    if ref in scene.FIXTURE_NAMES:
        return scene.load_fixture(ref)
    raise UsageError(f"{ref}: no such scene file or fixture")


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def cmd_synth(args) -> None:
    video = scene.render(_load_spec(args.spec))
    if args.frames:
        video = scene.sample_frames(video, args.frames)
    scene.save_video(video, args.outdir, contact_sheet=args.contact_sheet)


def _training_frames(datadir: Path) -> np.ndarray:
    dirs = sorted({p.parent for p in datadir.rglob("frame_*.ppm")})
    if not dirs:
        raise UsageError(f"{datadir}: no frame_*.ppm files found")
    return np.concatenate([scene.load_video(d).rgb.data for d in dirs])


def cmd_pretrain_ae(args) -> None:
    frames = [_training_frames(Path(args.datadir))]
    size = frames[0].shape[-1]
    frames += [scene.render(scene.random_scene(1000 + s, size=size)).rgb.data for s in range(args.random_scenes)]
    model = VideoDiffusionModel(seed=args.seed)
    trace = train.pretrain_autoencoder(model, np.concatenate(frames), steps=args.steps, lr=args.lr, seed=args.seed)
    log.info("autoencoder final loss %.5f", trace[-1])
    save_checkpoint(model, args.ckpt)


def cmd_finetune(args) -> None:
    model = load_checkpoint(args.ckpt_in)
    video = scene.load_video(args.video)
    cfg = train.TrainConfig(
        steps=args.steps, lr=args.lr, temporal_weight=args.temporal_weight, cond_dropout=args.dropout, seed=args.seed
    )
    result = train.finetune(model, video, args.prompt, cfg)
    save_checkpoint(result.model, args.ckpt_out)
    train.write_trace(result.trace, Path(args.ckpt_out) / "loss_trace.csv")


def cmd_invert(args) -> None:
    model = load_checkpoint(args.ckpt)
    video = scene.load_video(args.video)
    latents, depth = train.encode_video(model, video)
    inv = pipeline.invert_video(model, latents, depth, ddim_steps=args.ddim_steps, source_prompt=video.prompt)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_tensor(inv.noise, out / "noise.vdt")
    save_tensor(depth, out / "depth.vdt")
    (out / "inversion.txt").write_text(
        f"timesteps {' '.join(map(str, inv.timesteps))}\n"
        f"prompt_hash {inv.prompt_hash}\n"
        f"model_checksum {inv.model_checksum}\n"
    )


def cmd_generate(args) -> None:
    model = load_checkpoint(args.ckpt)
    inv = Path(args.inv)
    noise, depth = load_tensor(inv / "noise.vdt"), load_tensor(inv / "depth.vdt")
    request = pipeline.GenerationRequest(args.prompt, args.guidance, args.ddim_steps)
    latents = pipeline.sample_latents(model, noise, request, depth)
    frames = model.ae.decode(latents)
    out = Path(args.out) if args.out else inv / "generated"
    scene.save_frames(frames.data, out)
    save_tensor(latents, out / "latents.vdt")
    (out / "prompt.txt").write_text(args.prompt + "\n")


def cmd_eval(args) -> None:
    ae = load_checkpoint(args.ckpt).ae if args.ckpt else Autoencoder()
    video = scene.load_video(args.video)
    report = pipeline.frame_consistency(ae, video.rgb)
    if args.prompt:
        report.alignment = pipeline.textual_alignment(ae, video.rgb, args.prompt)
    _emit(report.to_csv(), args.out)


def cmd_bench_attn(args) -> None:
    rows = pipeline.bench_attention(args.frames, args.tokens, args.dim, timed=not args.no_time)
    _emit(pipeline.bench_csv(rows), args.out)


COMMANDS = {
    "synth": cmd_synth,
    "pretrain-ae": cmd_pretrain_ae,
    "finetune": cmd_finetune,
    "invert": cmd_invert,
    "generate": cmd_generate,
    "eval": cmd_eval,
    "bench-attn": cmd_bench_attn,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"depthvid: error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as exc:
        print(f"depthvid: error: {exc}", file=sys.stderr)
        return 1
    except (NumericalError, ArithmeticError, train.TrainingError) as exc:
        print(f"depthvid: numeric failure: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
