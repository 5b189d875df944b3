"""Command line entry point for dataset synthesis, training, evaluation and inference.

Exit codes: 0 success, 2 bad input (spec, config, task id), 3 registry
fingerprint mismatch between checkpoint and manifest.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

log = logging.getLogger("cdpdnet")


class CLIError(Exception):
    def __init__(self, code, message):
        super().__init__(message)
        self.code = code


def _write_snapshot(out_dir, args, extra=None):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    snap = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items() if k != "func"}
    snap.update(extra or {})
    with open(out_dir / "run_config.json", "w") as fh:
        json.dump(snap, fh, indent=2, sort_keys=True)


def _load_json(path, what):
    path = Path(path)
    if not path.is_file():
        raise CLIError(2, f"{what} not found: {path}")
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as e:
        raise CLIError(2, f"{what} {path} is not valid JSON: {e}")


def _manifest_and_registry(manifest_path, registry_path=None):
    from .partial_labels import load_registry
    from .volume import load_manifest

    if not Path(manifest_path).is_file():
        raise CLIError(2, f"manifest not found: {manifest_path}")
    try:
        manifest = load_manifest(manifest_path)
    except (ValueError, KeyError) as e:
        raise CLIError(2, str(e))
    reg_path = registry_path or (manifest.resolve(manifest.registry) if manifest.registry else None)
    if reg_path is None or not Path(reg_path).is_file():
        raise CLIError(2, f"registry not found: {reg_path}")
    try:
        return manifest, load_registry(reg_path)
    except (ValueError, KeyError) as e:
        raise CLIError(2, f"bad registry {reg_path}: {e}")


def _checkpoint(path, registry=None):
    from .model import load_checkpoint

    if not Path(path).is_file():
        raise CLIError(2, f"checkpoint not found: {path}")
    model, payload = load_checkpoint(path)
    if registry is not None and payload["registry_fingerprint"] != registry.fingerprint():
        raise CLIError(3, f"registry fingerprint mismatch: checkpoint {payload['registry_fingerprint']} "
                          f"vs manifest {registry.fingerprint()}")
    return model, payload


def _check_task(task_id, n):
    if not 1 <= task_id <= n:
        raise CLIError(2, f"invalid task id {task_id}; valid ids are {', '.join(map(str, range(1, n + 1)))}")


def cmd_synth(args):
    from .synth import SynthSpecError, load_synth_spec, synth_generate

    if not Path(args.spec).is_file():
        raise CLIError(2, f"synth spec not found: {args.spec}")
    try:
        spec = load_synth_spec(args.spec)
    except (SynthSpecError, ValueError) as e:
        raise CLIError(2, f"bad synth spec {args.spec}: {e}")
    if args.seed is not None:
        spec.seed = args.seed
    manifest = synth_generate(spec, args.out)
    _write_snapshot(args.out, args)
    n = sum(len(d.cases) for d in manifest.datasets)
    print(f"wrote {n} cases for {len(manifest.datasets)} tasks to {args.out}/manifest.json")


def cmd_build_embeddings(args):
    from .partial_labels import load_registry, reference_registry
    from .text import cache_dir, cache_key, embed_roi_names, embed_task_prompts, make_text_encoder

    registry = reference_registry() if args.registry == "reference" else load_registry(args.registry)
    enc_cfg = json.loads(args.text_encoder) if args.text_encoder else None
    enc = make_text_encoder(enc_cfg)
    roi = embed_roi_names(registry, enc, args.cache_dir)
    bank = embed_task_prompts(registry, enc, args.cache_dir)
    root = cache_dir(args.cache_dir)
    for what, prompts, m in (("roi", registry.roi_prompts(), roi), ("task", registry.task_prompts(), bank)):
        print(f"{what}: {m.shape[0]}x{m.shape[1]} -> {root / cache_key(enc.backend, prompts)}.npy")


def cmd_train(args):
    from .training import ConfigError, apply_overrides, train_loop

    cfg = _load_json(args.config, "training config") if args.config else {}
    try:
        cfg = apply_overrides(cfg, args.override)
    except ConfigError as e:
        raise CLIError(2, str(e))
    data = cfg.setdefault("data", {})
    if args.manifest:
        data["manifest"] = str(args.manifest)
    if args.registry:
        data["registry"] = str(args.registry)
    if args.seed is not None:
        cfg.setdefault("train", {})["seed"] = args.seed
    if "manifest" not in data:
        raise CLIError(2, "no manifest given (--manifest or data.manifest)")
    manifest, registry = _manifest_and_registry(data["manifest"], data.get("registry"))
    _write_snapshot(args.out, args)
    try:
        _, summary = train_loop(manifest, registry, cfg, args.out)
    except ConfigError as e:
        raise CLIError(2, str(e))
    print(f"trained {summary['epochs_run']} epochs ({summary['steps']} steps); best val DSC {summary['best_val_dsc']:.4f}")


def _eval_cases(manifest, registry, cfg, full=False):
    from .training import load_cases

    tc = cfg.get("train", {})
    return load_cases(manifest, registry, tc.get("clip", True), tc.get("target_spacing", [1.5, 1.5, 1.5]), full)


def cmd_eval(args):
    from .evaluation import aggregate
    from .training import validate

    manifest, registry = _manifest_and_registry(args.manifest, args.registry)
    model, payload = _checkpoint(args.checkpoint, registry)
    cases = _eval_cases(manifest, registry, {})
    results = validate(model, cases, registry, model.config.patch_size, args.overlap)
    report = aggregate(results, registry)
    report.write(args.out)
    with open(Path(args.out) / "cases.json", "w") as fh:
        json.dump([r.to_dict(registry) for r in results], fh, indent=2)
    _write_snapshot(args.out, args, {"registry_fingerprint": registry.fingerprint()})
    sys.stdout.write(report.to_text())


def cmd_predict(args):
    from .inference import sliding_window_predict
    from .partial_labels import load_registry
    from .volume import Volume, preprocess_pair, read_volume, write_volume

    model, payload = _checkpoint(args.checkpoint)
    _check_task(args.task_id, model.config.task_count)
    if not Path(args.volume).is_file():
        raise CLIError(2, f"volume not found: {args.volume}")
    names = None
    if args.registry:
        registry = load_registry(args.registry)
        if registry.fingerprint() != payload["registry_fingerprint"]:
            raise CLIError(3, f"registry fingerprint mismatch: checkpoint {payload['registry_fingerprint']} "
                              f"vs registry {registry.fingerprint()}")
        names = registry.global_labels
    img, _ = preprocess_pair(read_volume(args.volume, "image"), None)
    logits = sliding_window_predict(model, img.data, args.task_id, overlap=args.overlap)
    prob = 1.0 / (1.0 + np.exp(-logits.astype(np.float64)))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for c in range(prob.shape[0]):
        tag = (names[c] if names else f"label{c + 1:02d}").replace(" ", "_")
        write_volume(out / f"mask_{c + 1:02d}_{tag}.nii.gz", Volume((prob[c] > 0.5).astype(np.int64), img.spacing, "label"))
        if args.probabilities:
            write_volume(out / f"prob_{c + 1:02d}_{tag}.nii.gz", Volume(prob[c].astype(np.float32), img.spacing))
    _write_snapshot(out, args)
    print(f"wrote {prob.shape[0]} masks under task {args.task_id} to {out}")


def cmd_sweep(args):
    from .evaluation import task_id_sweep, write_sweep_csv
    from .partial_labels import to_multihot

    manifest, registry = _manifest_and_registry(args.manifest, args.registry)
    model, _ = _checkpoint(args.checkpoint, registry)
    cases = _eval_cases(manifest, registry, {}, full=True)
    vols = []
    full_task = _full_annotation(registry)
    for pool in cases.values():
        for c in pool:
            if c.full_label is None:
                continue
            vols.append((c.image, to_multihot(c.full_label, full_task, registry)))
    if not vols:
        raise CLIError(2, "sweep needs cases with full_label_path (fully annotated volumes)")
    matrix = task_id_sweep(model, vols, registry, overlap=args.overlap)
    Path(args.out).mkdir(parents=True, exist_ok=True)
    write_sweep_csv(Path(args.out) / "sweep.csv", matrix, registry)
    _write_snapshot(args.out, args)
    print(f"sweep over {registry.num_tasks} task ids x {registry.num_labels} labels -> {args.out}/sweep.csv")


def _full_annotation(registry):
    # pseudo-task annotating every label; only used to expand full label maps
    from .partial_labels import TaskSpec

    return TaskSpec(0, "all", tuple(registry.global_labels))


def build_parser():
    p = argparse.ArgumentParser(prog="cdpdnet", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic partially labeled dataset")
    s.add_argument("spec")
    s.add_argument("out")
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("build-embeddings", help="encode ROI and task prompts into the cache")
    s.add_argument("--registry", required=True, help="registry JSON, or 'reference' for the bundled 32-label set")
    s.add_argument("--text-encoder", help='JSON backend config, e.g. \'{"standin": {"seed": 0}}\'')
    s.add_argument("--cache-dir", help="defaults to $CDPD_CACHE_DIR")
    s.set_defaults(func=cmd_build_embeddings)

    s = sub.add_parser("train", help="train a model")
    s.add_argument("--config")
    s.add_argument("--manifest")
    s.add_argument("--registry")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")
    s.add_argument("--workers", type=int, default=0)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--registry")
    s.add_argument("--out", required=True)
    s.add_argument("--overlap", type=float, default=0.5)
    s.add_argument("--workers", type=int, default=0)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("predict", help="segment one volume under a task id")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--volume", required=True)
    s.add_argument("--task-id", type=int, required=True)
    s.add_argument("--registry")
    s.add_argument("--out", required=True)
    s.add_argument("--overlap", type=float, default=0.5)
    s.add_argument("--probabilities", action="store_true")
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("sweep", help="DSC per label under every task id")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--registry")
    s.add_argument("--out", required=True)
    s.add_argument("--overlap", type=float, default=0.5)
    s.add_argument("--workers", type=int, default=0)
    s.set_defaults(func=cmd_sweep)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except CLIError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    return 0


if __name__ == "__main__":
    sys.exit(main())
