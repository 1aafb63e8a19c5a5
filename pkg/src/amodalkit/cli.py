"""Command-line entry point: one subcommand per pipeline stage.

All randomness flows from --seed through named substreams, so any command
run twice with the same flags produces byte-identical artifacts. Each
command echoes its resolved configuration as JSON before doing work.

Exit codes: 0 ok, 2 usage error, 3 unreadable input, 4 backend connection
failure, 5 check violation (--check).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import diffusion, engine, evalsuite, scenes, seeding
from .backends import (
    HeuristicBackend,
    IdentityBackend,
    OracleBackend,
    ToyDiffusionBackend,
    serialize_if_single_flight,
)
from .cosynth import CosynthStore
from .diffusion import BlockCodec, ToyDenoiser, TrainConfig, train_toy
from .masks import iou, read_mask_png, read_rgba_png, write_mask_png, write_rgba_png
from .remote import RemoteBackend, RemoteBackendError
from .service import CosynthService, serve_forever

EXIT_OK = 0
EXIT_INPUT = 3
EXIT_BACKEND = 4
EXIT_CHECK = 5


class CheckFailed(RuntimeError):
    pass


class UnreadableInput(RuntimeError):
    pass


def _echo_config(command: str, args: argparse.Namespace):
    doc = {"command": command}
    doc.update({k: v for k, v in sorted(vars(args).items()) if k not in ("func", "config")})
    print(json.dumps(doc, sort_keys=True, default=str))


def _data_dir(value: str | None) -> Path:
    if value:
        return Path(value)
    return Path(os.environ.get("AMODALKIT_DATA", "amodalkit-data"))


def _load_manifest(path: str) -> scenes.Manifest:
    try:
        return scenes.load_manifest(path)
    except (FileNotFoundError, json.JSONDecodeError) as exc:
        raise UnreadableInput(f"cannot read dataset at {path}: {exc}") from exc


def _pair_of_ints(text: str) -> tuple[int, int]:
    parts = text.split(",")
    if len(parts) != 2:
        raise argparse.ArgumentTypeError(f"expected LO,HI got {text!r}")
    return int(parts[0]), int(parts[1])


def _int_list(text: str) -> tuple[int, ...]:
    return tuple(int(p) for p in text.split(","))


def _build_backend(spec: str, manifest: scenes.Manifest | None):
    """Backend factory for `--backend oracle|heuristic|identity|toy:CKPT|remote:URL`."""
    if spec == "oracle":
        if manifest is None:
            raise UnreadableInput("the oracle backend needs --dataset ground truth")
        loaded = [scenes.load_record(manifest, r) for r in manifest.occluded]
        return OracleBackend.from_records(loaded)
    if spec == "heuristic":
        return HeuristicBackend()
    if spec == "identity":
        return IdentityBackend()
    if spec.startswith("toy:"):
        path = spec.split(":", 1)[1]
        if not Path(path).exists():
            raise UnreadableInput(f"no checkpoint at {path}")
        return ToyDiffusionBackend(ToyDenoiser.load(path))
    if spec.startswith("remote:"):
        return RemoteBackend(spec.split(":", 1)[1])
    raise UnreadableInput(f"unknown backend spec {spec!r}")


# ---------------------------------------------------------------------------
# synth


def cmd_synth(args) -> int:
    _echo_config("synth", args)
    config = scenes.SceneConfig(
        canvas=args.canvas, layer_range=args.layers, size_range=args.sizes
    )
    rng = seeding.substream(args.seed, "synth/scene-seeds")
    scene_seeds = [int(rng.integers(0, 2**48)) for _ in range(args.scenes)]
    scene_list = [scenes.sample_scene(config, s) for s in scene_seeds]
    manifest = scenes.emit_dataset(scene_list, args.out)
    print(
        json.dumps(
            {
                "scenes": args.scenes,
                "records": len(manifest.records),
                "occluded": len(manifest.occluded),
                "manifest": str(manifest.directory / "manifest.jsonl"),
            }
        )
    )
    return EXIT_OK


# ---------------------------------------------------------------------------
# construct (training samples via the order-grounded rule)


def cmd_construct(args) -> int:
    _echo_config("construct", args)
    manifest = _load_manifest(args.dataset)
    occluded = [r for r in manifest.occluded if not r.fully_occluded]
    if not occluded:
        raise UnreadableInput(f"dataset {args.dataset} has no usable occluded records")
    rng = seeding.substream(args.seed, "construct")
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    index = []
    violations = 0
    for i in range(args.samples):
        rec = occluded[int(rng.integers(len(occluded)))]
        loaded = scenes.load_record(manifest, rec)
        donor = occluded[int(rng.integers(len(occluded)))]
        donor_mask = scenes.load_record(manifest, donor).amodal_mask
        k = int(rng.integers(1, args.multi + 1))
        gen = [
            engine.place_mask(donor_mask, (loaded.image.width, loaded.image.height), rng)
            for _ in range(k)
        ]
        existing = [m for _, m in loaded.occluders]
        sample = engine.construct_sample_multi(
            loaded.image, loaded.modal, existing, gen, rng, k_max=args.multi
        )
        problems = engine.check_sample_invariants(sample, existing)
        violations += len(problems)
        stem = f"sample{i:05d}"
        write_rgba_png(sample.target, outdir / f"{stem}.target.png")
        write_rgba_png(sample.input, outdir / f"{stem}.input.png")
        write_rgba_png(sample.background, outdir / f"{stem}.background.png")
        write_mask_png(sample.occluder, outdir / f"{stem}.occluder.png")
        write_mask_png(sample.deoccluded, outdir / f"{stem}.deoccluded.png")
        write_mask_png(sample.instance, outdir / f"{stem}.instance.png")
        index.append(
            {
                "id": stem,
                "record": rec.id,
                "generated_count": k,
                "fully_occluded": sample.fully_occluded,
                "problems": problems,
            }
        )
    with (outdir / "samples.jsonl").open("w") as fh:
        for entry in index:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")
    print(json.dumps({"samples": args.samples, "violations": violations}))
    if args.check and violations:
        raise CheckFailed(f"{violations} invariant violations across {args.samples} samples")
    return EXIT_OK


# ---------------------------------------------------------------------------
# infer


def _infer_one(loaded, backend, mode, variations, seed, strength2):
    if mode == "stepwise":
        result = engine.infer_stepwise(
            loaded.image, loaded.modal, [m for _, m in loaded.occluders], backend, seed=seed
        )
        return [(result.rgba, result.mask)]
    if mode == "full":
        rng = np.random.Generator(np.random.PCG64(seed))
        results = engine.infer_full(loaded.image, loaded.modal, loaded.caption, backend, variations, rng)
        return [(v.rgba, v.mask) for v in results if v.ok]
    if mode == "g2l":
        result = engine.infer_global_to_local(
            loaded.image, loaded.modal, backend, strength2, seed=seed
        )
        return [(result.rgba, result.rgba.alpha_mask())]
    raise UnreadableInput(f"unknown inference mode {mode!r}")


def cmd_infer(args) -> int:
    _echo_config("infer", args)
    manifest = _load_manifest(args.dataset)
    backend = serialize_if_single_flight(_build_backend(args.backend, manifest))
    records = [r for r in manifest.occluded if not r.fully_occluded]
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)

    def work(rec):
        loaded = scenes.load_record(manifest, rec)
        seed = seeding.child_seed(args.seed, f"infer/{rec.id}")
        outputs = _infer_one(loaded, backend, args.mode, args.variations, seed, args.strength2)
        files = []
        for v, (rgba, mask) in enumerate(outputs):
            rgba_rel = f"{rec.id}.var{v}.rgba.png"
            mask_rel = f"{rec.id}.var{v}.mask.png"
            write_rgba_png(rgba, outdir / rgba_rel)
            write_mask_png(mask, outdir / mask_rel)
            files.append({"rgba": rgba_rel, "mask": mask_rel})
        gt = loaded.amodal_mask
        ious = [iou(read_mask_png(outdir / f["mask"]), gt) for f in files]
        return {
            "id": rec.id,
            "occlusion_pct": rec.occlusion_pct,
            "gt_amodal": rec.files["amodal"],
            "variations": files,
            "iou": ious,
        }

    jobs = args.jobs or os.cpu_count() or 1
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            entries = list(pool.map(work, records))
    else:
        entries = [work(r) for r in records]
    with (outdir / "predictions.jsonl").open("w") as fh:
        fh.write(json.dumps({"dataset": str(manifest.directory), "mode": args.mode}) + "\n")
        for entry in entries:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")
    worst = min((min(e["iou"]) for e in entries if e["iou"]), default=1.0)
    print(json.dumps({"records": len(entries), "worst_iou": worst}))
    if args.check and worst < 1.0:
        raise CheckFailed(f"--check requires IoU 1.0 everywhere, worst was {worst}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train


def cmd_train(args) -> int:
    _echo_config("train", args)
    manifest = _load_manifest(args.dataset)
    config = TrainConfig(
        steps=args.steps,
        batch=args.batch,
        lr=args.lr,
        seed=args.seed,
        resolution=args.resolution,
        latent_factor=args.latent_factor,
        hidden=args.hidden,
        log_csv=args.log,
    )
    codec = BlockCodec(config.latent_factor)
    dcfg = config.denoiser_config()
    examples = []
    for rec in manifest.occluded:
        if rec.fully_occluded:
            continue
        loaded = scenes.load_record(manifest, rec)
        if loaded.image.width != config.resolution or loaded.image.height != config.resolution:
            raise UnreadableInput(
                f"record {rec.id} is {loaded.image.width}x{loaded.image.height}, "
                f"training expects {config.resolution}x{config.resolution}"
            )
        if args.mode == "full":
            examples.append(
                diffusion.build_full_example(
                    loaded.image, loaded.modal, loaded.amodal_rgba, loaded.caption, codec, dcfg
                )
            )
        else:
            rng = seeding.substream(args.seed, f"train/sample/{rec.id}")
            donor = manifest.occluded[int(rng.integers(len(manifest.occluded)))]
            donor_mask = scenes.load_record(manifest, donor).amodal_mask
            gen = engine.place_mask(donor_mask, (loaded.image.width, loaded.image.height), rng)
            sample = engine.construct_sample(
                loaded.image, loaded.modal, [m for _, m in loaded.occluders], gen, rng
            )
            if sample.fully_occluded:
                continue
            examples.append(diffusion.build_partial_example(sample, codec, dcfg))
    if not examples:
        raise UnreadableInput("no trainable examples in the dataset")
    denoiser, history = train_toy(examples, args.mode, config)
    denoiser.save(args.out)
    print(
        json.dumps(
            {
                "examples": len(examples),
                "steps": len(history),
                "first_loss": history[0][1],
                "last_loss": history[-1][1],
                "checkpoint": args.out,
            }
        )
    )
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval


def cmd_eval(args) -> int:
    _echo_config("eval", args)
    pred_dir = Path(args.pred)
    pred_path = pred_dir / "predictions.jsonl"
    if not pred_path.exists():
        raise UnreadableInput(f"no predictions.jsonl under {pred_dir}")
    with pred_path.open() as fh:
        header = json.loads(fh.readline())
        entries = [json.loads(line) for line in fh if line.strip()]
    dataset_dir = Path(header["dataset"])
    records = []
    gt_images = []
    pred_images = []
    for entry in entries:
        gt_rgba = read_rgba_png(dataset_dir / entry["gt_amodal"])
        gt = gt_rgba.alpha_mask()
        variations = tuple(read_mask_png(pred_dir / f["mask"]) for f in entry["variations"])
        if not variations:
            continue
        k_have = len(variations)
        need = max(args.k)
        if k_have < need:
            variations = variations + tuple([variations[-1]] * (need - k_have))
        records.append(
            evalsuite.EvalRecord(
                id=entry["id"],
                predicted_variations=variations,
                gt_amodal=gt,
                occlusion_pct=entry["occlusion_pct"],
            )
        )
        if args.fid:
            gt_images.append(gt_rgba)
            pred_images.append(read_rgba_png(pred_dir / entry["variations"][0]["rgba"]))
    if not records:
        raise UnreadableInput("no evaluable predictions found")
    fid_value = None
    if args.fid:
        inputs = evalsuite.FrechetInputs(
            evalsuite.feature_matrix(gt_images), evalsuite.feature_matrix(pred_images)
        )
        fid_value = evalsuite.frechet(inputs)
    report = evalsuite.build_report(records, ks=args.k, fid_proxy=fid_value)
    json_path, csv_path = evalsuite.write_report(report, args.out)
    print(json.dumps({"report": str(json_path), "csv": str(csv_path), "miou": report["miou"]}))
    curve = [report["best_of_k"][str(k)] for k in args.k]
    if args.check and any(b < a - 1e-12 for a, b in zip(curve, curve[1:])):
        raise CheckFailed(f"best-of-k curve is not non-decreasing: {curve}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# stats / serve / export


def cmd_stats(args) -> int:
    _echo_config("stats", args)
    manifest = _load_manifest(args.dataset)
    stats = scenes.statistics(manifest)
    doc = json.dumps(stats.to_json(), indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(doc)
    print(doc)
    return EXIT_OK


def cmd_serve(args) -> int:
    _echo_config("serve", args)
    store = CosynthStore(_data_dir(args.data), max_retries=args.max_retries)
    manifest = None
    if args.dataset:
        manifest = _load_manifest(args.dataset)
        added = store.enqueue(manifest)
        print(json.dumps({"enqueued": added}))
    backends = {"heuristic": HeuristicBackend(), "identity": IdentityBackend()}
    if manifest is not None:
        loaded = [scenes.load_record(manifest, r) for r in manifest.occluded]
        if loaded:
            backends["oracle"] = OracleBackend.from_records(loaded)
    if args.toy:
        backends["toy"] = ToyDiffusionBackend(ToyDenoiser.load(args.toy))
    if args.remote:
        backends["remote"] = RemoteBackend(args.remote)
    default = "oracle" if "oracle" in backends else "heuristic"
    service = CosynthService(store, backends, default_backend=default)
    serve_forever(service, args.host, args.port)
    return EXIT_OK


def cmd_export(args) -> int:
    _echo_config("export", args)
    store = CosynthStore(_data_dir(args.data))
    try:
        manifest = store.export(args.out)
    except ValueError as exc:
        raise CheckFailed(str(exc)) from exc
    print(json.dumps({"pairs": len(manifest.records), "directory": str(manifest.directory)}))
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser plumbing


def _apply_config_file(argv: list[str]) -> list[str]:
    """Expand `--config FILE` (key=value lines) into leading defaults.

    Flags given on the command line win because they come later.
    """
    if "--config" not in argv:
        return argv
    idx = argv.index("--config")
    path = Path(argv[idx + 1])
    if not path.exists():
        raise UnreadableInput(f"config file {path} does not exist")
    injected = []
    for line in path.read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        injected.extend([f"--{key.strip()}", value.strip()])
    rest = argv[:idx] + argv[idx + 2 :]
    # subcommand stays first, config-derived flags precede explicit ones
    return rest[:1] + injected + rest[1:]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="amodalkit",
        description="Order-grounded deocclusion toolkit.",
        epilog=(
            "exit codes: 0 ok, 2 usage, 3 unreadable input, 4 backend connection failure, "
            "5 check violation. AMODALKIT_DATA overrides the default service data directory. "
            "--config FILE loads key=value defaults for any subcommand."
        ),
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset with exact ground truth")
    p.add_argument("--scenes", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--canvas", type=_pair_of_ints, default=(128, 128))
    p.add_argument("--layers", type=_pair_of_ints, default=(2, 5))
    p.add_argument("--sizes", type=_pair_of_ints, default=(32, 80))
    p.add_argument("--config", help="key=value defaults file")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("construct", help="build order-grounded training samples")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--samples", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--multi", type=int, default=4, help="max synthetic occluders per sample")
    p.add_argument("--check", action="store_true")
    p.add_argument("--config")
    p.set_defaults(func=cmd_construct)

    p = sub.add_parser("infer", help="run deocclusion over a dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--backend", default="oracle")
    p.add_argument("--mode", choices=("stepwise", "full", "g2l"), default="stepwise")
    p.add_argument("--out", required=True)
    p.add_argument("--variations", type=int, default=8)
    p.add_argument("--strength2", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=0, help="0 = all cores")
    p.add_argument("--check", action="store_true", help="fail unless every IoU is 1.0")
    p.add_argument("--config")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("train", help="train the toy completion denoiser")
    p.add_argument("--dataset", required=True)
    p.add_argument("--mode", choices=("full", "partial"), default="full")
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=1200)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--lr", type=float, default=2e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--resolution", type=int, default=32)
    p.add_argument("--latent-factor", dest="latent_factor", type=int, default=4)
    p.add_argument("--hidden", type=int, default=24)
    p.add_argument("--log", help="training-curve CSV path")
    p.add_argument("--config")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score predictions against ground truth")
    p.add_argument("--pred", required=True, help="directory written by infer")
    p.add_argument("--out", required=True)
    p.add_argument("--k", type=_int_list, default=(1, 2, 4, 8))
    p.add_argument("--fid", action="store_true", help="also compute the FID-proxy")
    p.add_argument("--check", action="store_true")
    p.add_argument("--config")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("stats", help="dataset statistics histograms")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out")
    p.add_argument("--config")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("serve", help="run the co-synthesis review service")
    p.add_argument("--data", help="store directory (default AMODALKIT_DATA)")
    p.add_argument("--dataset", help="manifest to enqueue on startup")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8765)
    p.add_argument("--toy", help="toy denoiser checkpoint to expose")
    p.add_argument("--remote", help="remote backend URL to expose")
    p.add_argument("--max-retries", dest="max_retries", type=int, default=3)
    p.add_argument("--config")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("export", help="export annotated pairs from the store")
    p.add_argument("--data")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.set_defaults(func=cmd_export)

    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        argv = _apply_config_file(argv)
        args = parser.parse_args(argv)
        return args.func(args)
    except UnreadableInput as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (RemoteBackendError, engine.StepwiseAborted, engine.BackendContractError) as exc:
        print(f"backend error: {exc}", file=sys.stderr)
        return EXIT_BACKEND
    except CheckFailed as exc:
        print(f"check failed: {exc}", file=sys.stderr)
        return EXIT_CHECK


if __name__ == "__main__":
    sys.exit(main())
