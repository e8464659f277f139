"""``anigan`` command line: dataset, train, eval, export, serve.

Every command accepts ``--config FILE`` (JSON whose keys mirror the long
flags, dashes as underscores), ``--seed`` and ``--out``. Explicit flags win
over config values.

Exit codes: 0 success, 2 validation error, 3 runtime or numerical error.
"""

from __future__ import annotations

import argparse
import importlib
import json
import logging
import sys
from pathlib import Path


from .errors import AniganError, NumericalError, ValidationError

log = logging.getLogger("anigan")

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 2, 3


def load_object(ref: str):
    """Import ``package.module:attr`` and instantiate it if it is a class."""
    if ":" not in ref:
        raise ValidationError(f"adapter reference {ref!r} must look like module:attr")
    mod, attr = ref.split(":", 1)
    obj = getattr(importlib.import_module(mod), attr)
    return obj() if isinstance(obj, type) else obj


def _write_json(path, doc):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


# -- dataset ----------------------------------------------------------------


def cmd_dataset_ingest(args):
    from .dataset import ingest, read_listing

    detector = load_object(args.detector)
    estimator = load_object(args.estimator)
    if hasattr(estimator, "estimate"):
        estimator = estimator.estimate
    manifest = ingest(
        read_listing(args.listing), detector, estimator, args.out,
        image_size=args.image_size, factor=args.box_scale, threshold=args.threshold, workers=args.workers,
    )
    print(f"{len(manifest)} face records written to {args.out}")


def cmd_dataset_filter(args):
    from .dataset import DatasetManifest, filter_manifest, read_rejection_list

    manifest = DatasetManifest.load(args.manifest)
    rejects = read_rejection_list(args.reject) if args.reject else set()
    out = filter_manifest(manifest, args.min_year, rejects)
    out.save(args.out or args.manifest)
    print(f"{len(out.retained)} of {len(out)} records retained")


def cmd_dataset_stats(args):
    from .dataset import DatasetManifest, render_stats, stats

    report = stats(DatasetManifest.load(args.manifest), edge_bin=args.edge_bin)
    out = Path(args.out or "report.json")
    _write_json(out, report)
    if args.plots:
        render_stats(report, out.parent)
    print(json.dumps({k: report[k] for k in ("n_records", "n_retained")}))


# -- train ------------------------------------------------------------------


def _networks(config, nets_doc, data):
    from .nets import build_from_manifest, init_weights

    cond = 0 if config.prior == "none" else data.tags.shape[1]
    gdoc = nets_doc.get("generator") or {"kind": "srresnet", "spec": {}}
    ddoc = nets_doc.get("discriminator") or {"kind": "resnet_d", "spec": {}}
    gdoc = {"kind": gdoc.get("kind", "srresnet"), "spec": {"cond_dim": cond, **gdoc.get("spec", {})}}
    ddoc = {"kind": ddoc.get("kind", "resnet_d"), "spec": {"cond_dim": cond, **ddoc.get("spec", {})}}
    G = init_weights(build_from_manifest(gdoc), config.seed)
    D = init_weights(build_from_manifest(ddoc), config.seed + 1)
    return G, D


def cmd_train(args):
    from dataclasses import replace

    from .dataset import DatasetManifest
    from .training import MetricsWriter, TrainingData, load_checkpoint, parse_config, train

    config, weights, nets_doc = parse_config(getattr(args, "extra_config", {}))
    overrides = {k: v for k, v in (("seed", args.seed), ("steps", args.steps)) if v is not None}
    config = replace(config, **overrides)
    data = TrainingData.from_manifest(DatasetManifest.load(args.manifest))
    out = Path(args.out)
    state = None
    if args.resume:
        state, config, weights = load_checkpoint(args.resume)
        config = replace(config, **overrides)
    G, D = (None, None) if state else _networks(config, nets_doc, data)
    writer = MetricsWriter(out / "metrics.jsonl", config, every=args.log_every)
    try:
        state, written = train(data, config, weights, generator=G, discriminator=D, state=state,
                               callbacks=[writer], out_dir=out)
    finally:
        writer.close()
    print(f"trained to step {state.step}; last checkpoint {written[-1] if written else None}")


# -- eval -------------------------------------------------------------------


def _load_generator(path):
    from .bundle import load_bundle
    from .training import load_checkpoint

    path = Path(path)
    if path.is_dir():
        return load_bundle(path).generator
    state, _, _ = load_checkpoint(path)
    return state.generator


def cmd_eval_fid(args):
    from .dataset import DatasetManifest
    from .evaluation import GeneratorSampler, fid_protocol

    extractor = load_object(args.extractor)
    report = fid_protocol(
        DatasetManifest.load(args.manifest), GeneratorSampler(_load_generator(args.model)), extractor,
        n=args.n, trials=args.trials, seed=args.seed or 0,
    )
    if len(report.trials) < args.trials:
        raise NumericalError(f"only {len(report.trials)} of {args.trials} FID trials succeeded")
    _write_json(args.out or "fid.json", report.to_dict())
    print(report.table(Path(args.model).name))


def cmd_eval_precision(args):
    from .evaluation import GeneratorSampler, label_precision

    judge = load_object(args.judge)
    labels = [s.strip() for s in args.labels.split(",")] if args.labels else None
    report = label_precision(GeneratorSampler(_load_generator(args.model)), judge,
                             per_label_samples=args.samples, seed=args.seed or 0, labels=labels)
    _write_json(args.out or "precision.json", report.to_dict())
    print(report.table())


def cmd_eval_grid(args):
    from PIL import Image

    from .evaluation import sample_grid

    grid = sample_grid(_load_generator(args.model), args.mode, n=args.n, condition=args.cond, seed=args.seed or 0)
    out = Path(args.out or f"grid_{args.mode}.png")
    out.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(grid.sheet()).save(out)
    print(f"wrote {out}")


def cmd_eval_features(args):
    from .dataset import DatasetManifest
    from .evaluation import export_features

    projector = load_object(args.projector) if args.projector else None
    feats, coords = export_features(DatasetManifest.load(args.manifest), load_object(args.extractor),
                                    args.sample_n, seed=args.seed or 0, projector=projector,
                                    out_path=args.out or "features.npz")
    print(f"{len(feats)} feature vectors; coordinates: {'yes' if coords is not None else 'no'}")


# -- export / serve ---------------------------------------------------------


def cmd_export(args):
    from .bundle import export_checkpoint
    from .dataset import DatasetManifest

    manifest = DatasetManifest.load(args.manifest) if args.manifest else None
    bundle = export_checkpoint(args.checkpoint, args.out, manifest=manifest)
    report = {"model_version": bundle.model_version, "total_bytes": bundle.size["total_bytes"],
              "n_parameters": bundle.architecture["n_parameters"]}
    if args.compare_dcgan:
        from .nets import DCGANGenerator, DCGANSpec, Generator, GeneratorSpec

        # default-width presets at the bundle's geometry
        spec = bundle.generator.spec
        shape = dict(noise_dim=spec.noise_dim, cond_dim=spec.cond_dim, output_size=spec.output_size)
        ref = _state_bytes(Generator(GeneratorSpec(**shape, base_spatial=spec.base_spatial, n_upscales=spec.n_upscales)))
        dcgan = _state_bytes(DCGANGenerator(DCGANSpec(**shape)))
        report["preset_bytes"] = {"srresnet": ref, "dcgan": dcgan}
        report["dcgan_to_srresnet_ratio"] = dcgan / ref
    _write_json(Path(args.out) / "size_report.json", report)
    print(json.dumps(report))


def _state_bytes(net) -> int:
    return sum(v.numel() * v.element_size() for v in net.state_dict().values())


def cmd_serve(args):
    from .server import serve

    serve(args.model, port=args.port, host=args.host, seed=args.seed or 0)


# -- parser -----------------------------------------------------------------


def _common(p):
    p.add_argument("--config", help="JSON file whose keys mirror the flags")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="anigan", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    ds = sub.add_parser("dataset").add_subparsers(dest="action", required=True)
    p = ds.add_parser("ingest")
    _common(p)
    p.add_argument("--listing")
    p.add_argument("--detector", help="module:attr face detector adapter")
    p.add_argument("--estimator", help="module:attr tag estimator adapter")
    p.add_argument("--image-size", type=int, default=128)
    p.add_argument("--box-scale", type=float, default=1.5)
    p.add_argument("--threshold", type=float, default=0.25)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_dataset_ingest, required=("listing", "detector", "estimator", "out"))
    p = ds.add_parser("filter")
    _common(p)
    p.add_argument("--manifest")
    p.add_argument("--min-year", type=int, default=2005)
    p.add_argument("--reject", help="file listing rejected image refs, one per line")
    p.set_defaults(func=cmd_dataset_filter, required=("manifest",))
    p = ds.add_parser("stats")
    _common(p)
    p.add_argument("--manifest")
    p.add_argument("--edge-bin", type=int, default=32)
    p.add_argument("--plots", action="store_true")
    p.set_defaults(func=cmd_dataset_stats, required=("manifest",))

    p = sub.add_parser("train")
    _common(p)
    p.add_argument("--manifest")
    p.add_argument("--steps", type=int)
    p.add_argument("--resume")
    p.add_argument("--log-every", type=int, default=1)
    p.set_defaults(func=cmd_train, required=("manifest", "out"))

    ev = sub.add_parser("eval").add_subparsers(dest="action", required=True)
    p = ev.add_parser("fid")
    _common(p)
    p.add_argument("--model", help="bundle directory or checkpoint")
    p.add_argument("--manifest")
    p.add_argument("--extractor")
    p.add_argument("--n", type=int, default=12_800)
    p.add_argument("--trials", type=int, default=5)
    p.set_defaults(func=cmd_eval_fid, required=("model", "manifest", "extractor"))
    p = ev.add_parser("precision")
    _common(p)
    p.add_argument("--model")
    p.add_argument("--judge")
    p.add_argument("--samples", type=int, default=20)
    p.add_argument("--labels")
    p.set_defaults(func=cmd_eval_precision, required=("model", "judge"))
    p = ev.add_parser("grid")
    _common(p)
    p.add_argument("--model")
    p.add_argument("--mode", default="fixed_noise_random_cond")
    p.add_argument("--cond")
    p.add_argument("--n", type=int, default=8)
    p.set_defaults(func=cmd_eval_grid, required=("model",))
    p = ev.add_parser("features")
    _common(p)
    p.add_argument("--manifest")
    p.add_argument("--extractor")
    p.add_argument("--projector")
    p.add_argument("--sample-n", type=int, default=1500)
    p.set_defaults(func=cmd_eval_features, required=("manifest", "extractor"))

    p = sub.add_parser("export")
    _common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--manifest")
    p.add_argument("--compare-dcgan", action="store_true")
    p.set_defaults(func=cmd_export, required=("checkpoint", "out"))

    p = sub.add_parser("serve")
    _common(p)
    p.add_argument("--model")
    p.add_argument("--port", type=int, default=8000)
    p.add_argument("--host")
    p.set_defaults(func=cmd_serve, required=("model",))
    return parser


def _subcommand_defaults(parser: argparse.ArgumentParser, args: argparse.Namespace) -> dict:
    probe = [args.command] + ([args.action] if getattr(args, "action", None) else [])
    return vars(parser.parse_args(probe))


def apply_config_file(parser: argparse.ArgumentParser, args: argparse.Namespace) -> argparse.Namespace:
    """Fill options from ``--config`` wherever the command line left the default.

    For ``train``, keys that are not command-line options (batch_size,
    lambda_gp, generator, ...) are training hyperparameters and are kept
    aside in ``args.extra_config``.
    """
    doc = json.loads(Path(args.config).read_text())
    if not isinstance(doc, dict):
        raise ValidationError(f"{args.config}: config must be a JSON object")
    defaults = _subcommand_defaults(parser, args)
    args.extra_config = {}
    for key, value in doc.items():
        key = key.replace("-", "_")
        if key not in defaults and args.command == "train":
            args.extra_config[key] = value
            continue
        if key not in defaults or key in ("func", "required", "command", "action"):
            raise ValidationError(f"{args.config}: unknown option {key!r}")
        if getattr(args, key) == defaults[key]:
            setattr(args, key, value)
    return args


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.config:
            apply_config_file(parser, args)
        missing = [k for k in args.required if getattr(args, k, None) in (None, "")]
        if missing:
            raise ValidationError("missing required options: " + ", ".join("--" + m.replace("_", "-") for m in missing))
        args.func(args)
    except (ValidationError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (AniganError, RuntimeError, OSError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
