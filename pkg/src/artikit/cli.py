"""``artikit`` command line.

Exit codes: 0 success, 2 invalid input (parse, schema, validation, bad
parameters), 3 file-system errors, 4 structure-prior provider failures.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .core import pose_object, posed_object, sample_states, validate_object
from .errors import ArtikitError, ParseError, ProviderError, TrainingError
from .graph import parse_structure_response, serialize_graph

log = logging.getLogger("artikit")

EXIT_OK, EXIT_INVALID, EXIT_IO, EXIT_PROVIDER = 0, 2, 3, 4


class UsageError(ArtikitError):
    pass


# ---------------------------------------------------------------------------
# configuration

_CONFIG_SCHEMA = {
    "seed": None,
    "metrics": {"M", "points_per_object", "orientations", "seed", "por_resolution", "cache_dir"},
    "model": {"d_model", "n_heads", "n_layers", "latent_dim", "n_experts", "top_k", "expert_hidden",
              "cond_dim", "seed", "hops", "global_attention", "zero_init", "max_time"},
    "train": {"steps", "lr", "lr_min", "clip_norm", "repeats", "shuffle_parts", "resample_states", "mode", "T",
              "beta_start", "beta_end", "routing_seed", "smoothing_window"},
    "provider": {"kind", "mock_file", "endpoint", "model", "timeout", "max_retries", "token_env"},
    "paths": {"cache_dir", "data"},
}
_PATH_KEYS = {("metrics", "cache_dir"), ("provider", "mock_file"), ("paths", "cache_dir"), ("paths", "data")}


def load_config(path) -> dict:
    """Read a JSON config, rejecting unknown keys; relative paths resolve against the file."""
    if path is None:
        return {}
    path = Path(path)
    try:
        doc = json.loads(path.read_text("utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: malformed JSON at line {exc.lineno}: {exc.msg}") from None
    if not isinstance(doc, dict):
        raise ParseError(f"{path}: config must be a JSON object")
    for key, value in doc.items():
        if key not in _CONFIG_SCHEMA:
            raise ParseError(f"{path}: unknown config key {key!r}", path=key)
        allowed = _CONFIG_SCHEMA[key]
        if allowed is None:
            continue
        if not isinstance(value, dict):
            raise ParseError(f"{path}: section {key!r} must be an object", path=key)
        for sub in value:
            if sub not in allowed:
                raise ParseError(f"{path}: unknown config key {key}.{sub}", path=f"{key}.{sub}")
            if (key, sub) in _PATH_KEYS and isinstance(value[sub], str):
                value[sub] = str((path.parent / value[sub]))
    return doc


def _section(cfg: dict, name: str) -> dict:
    return dict(cfg.get(name, {}))


def _override(base: dict, **flags) -> dict:
    out = dict(base)
    out.update({k: v for k, v in flags.items() if v is not None})
    return out


def _seed(args, cfg) -> int:
    if args.seed is not None:
        return args.seed
    return int(cfg.get("seed", 0))


# ---------------------------------------------------------------------------
# helpers

def _object_files(directory) -> list:
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"{d} is not a directory")
    return sorted(d.glob("*.akj"))


def _load_set(directory) -> list:
    from .io import load_asset

    files = _object_files(directory)
    if not files:
        raise UsageError(f"{directory}: no .akj objects found")
    return [load_asset(f) for f in files]


def _write_json(path, doc) -> None:
    from .io import atomic_write_text

    atomic_write_text(path, json.dumps(doc, indent=1, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# commands

def cmd_ingest(args, cfg) -> int:
    from .io import parse_mobility_urdf, save_asset

    kwargs = {"normalize": not args.no_normalize}
    if args.screw_pitch is not None:
        kwargs["screw_pitch"] = args.screw_pitch
    obj, meshes = parse_mobility_urdf(args.input, **kwargs)
    report = validate_object(obj)
    if not report.ok:
        raise UsageError(f"ingested object is invalid: {report}")
    save_asset(args.out, obj, meshes)
    print(f"wrote {args.out} ({len(obj.parts)} parts)")
    return EXIT_OK


def cmd_validate(args, cfg) -> int:
    from .io import load_object

    obj = load_object(args.obj)
    report = validate_object(obj)
    for w in report.warnings:
        print(f"warning: {w}", file=sys.stderr)
    if not report.ok:
        print(str(report), file=sys.stderr)
        return EXIT_INVALID
    print(f"{args.obj}: valid ({len(obj.parts)} parts)")
    return EXIT_OK


def cmd_sample_states(args, cfg) -> int:
    from .io import load_asset, save_asset

    seed = _seed(args, cfg)
    obj, meshes = load_asset(args.obj)
    report = validate_object(obj)
    if not report.ok:
        raise UsageError(f"{args.obj}: invalid object: {report}")
    Q = sample_states(obj, args.m, seed, args.strategy)
    out = Path(args.out)
    entries = []
    for k, q in enumerate(Q):
        name = f"instance_{k:03d}"
        posed = pose_object(obj, q, meshes)
        inst = posed_object(obj, q)
        inst_meshes, parts = {}, []
        for i, p in enumerate(inst.parts):
            ref = None
            if i in posed.meshes:
                ref = f"{name}/{p.mesh_ref}"
                inst_meshes[ref] = posed.meshes[i]
            parts.append(dataclasses.replace(p, mesh_ref=ref))
        inst = dataclasses.replace(inst, parts=tuple(parts))
        save_asset(out / f"{name}.akj", inst, inst_meshes, frame="posed")
        entries.append({"file": f"{name}.akj", "states": [float(x) for x in q]})
    _write_json(out / "manifest.json", {"source": Path(args.obj).name, "strategy": args.strategy,
                                        "seed": seed, "m": args.m, "instances": entries})
    print(f"wrote {len(entries)} instances to {out}")
    return EXIT_OK


def _id_config(args, cfg, seed):
    from .metrics import IDConfig, yaw_orientations

    m = _override(_section(cfg, "metrics"), M=args.m, points_per_object=args.points)
    orientations = args.orientations or m.pop("orientations", "identity")
    m.pop("orientations", None)
    if orientations not in ("identity", "yaw4"):
        raise UsageError(f"orientations must be 'identity' or 'yaw4', got {orientations!r}")
    kwargs = {k: m[k] for k in ("M", "points_per_object") if k in m}
    if orientations == "yaw4":
        kwargs["orientation_set"] = yaw_orientations()
    return IDConfig(seed=int(m.get("seed", seed)), **kwargs), m


def cmd_evaluate(args, cfg) -> int:
    from .metrics import evaluate_sets

    seed = _seed(args, cfg)
    id_cfg, m = _id_config(args, cfg, seed)
    resolution = args.por_resolution or int(m.get("por_resolution", 64))
    gen, ref = _load_set(args.gen), _load_set(args.ref)
    out = Path(args.out)
    cache = args.cache_dir or m.get("cache_dir") or _section(cfg, "paths").get("cache_dir")
    cache = Path(cache) if cache else out.parent / ".artikit-cache"
    report = evaluate_sets(gen, ref, id_cfg, resolution, cache)
    if report.matrix_ref is not None:
        report.matrix_ref = Path(report.matrix_ref).name
    report.save(out)
    print("POR MMD COV 1-NNA")
    print(f"{report.por_mean:.6g} {report.mmd:.6g} {report.cov:.6g} {report.one_nna:.6g}")
    return EXIT_OK


def _model_and_train_config(args, cfg, seed):
    from .diffusion import DenoiserConfig, TrainConfig

    model = _section(cfg, "model")
    model.setdefault("seed", seed)
    train = _override(_section(cfg, "train"), steps=args.steps, lr=args.lr)
    train["seed"] = seed
    return DenoiserConfig(**model), TrainConfig(**train)


def cmd_train_toy(args, cfg) -> int:
    from .diffusion import train_toy
    from .io import load_features
    from .synthetic import condition_tokens, toy_dataset

    seed = _seed(args, cfg)
    model_cfg, train_cfg = _model_and_train_config(args, cfg, seed)
    data_dir = args.data or _section(cfg, "paths").get("data")
    if data_dir:
        files = _object_files(data_dir)
        if not files:
            raise UsageError(f"{data_dir}: no .akj objects found")
        items = _load_set(data_dir)
        conds = []
        for f in files:
            feat = f.with_suffix(".akft")
            conds.append(load_features(feat) if feat.exists() else None)
        if all(c is None for c in conds):
            conds = None
    else:
        items = toy_dataset()
        conds = [condition_tokens(o.category, dim=model_cfg.cond_dim) for o, _ in items]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = train_toy(items, model_cfg, train_cfg, conds,
                       checkpoint_path=out / "checkpoint.ckpt", trace_path=out / "trace.csv")
    print(f"steps {len(result.trace)} smoothed_loss {result.smoothed_loss:.6g}")
    return EXIT_OK


def cmd_generate(args, cfg) -> int:
    from .diffusion import load_checkpoint, make_noise_schedule, sample
    from .io import load_features, save_object

    seed = _seed(args, cfg)
    train = _section(cfg, "train")
    model = load_checkpoint(args.checkpoint)
    graph = parse_structure_response(Path(args.graph).read_text("utf-8"))
    cond = load_features(args.features) if args.features else None
    sched = make_noise_schedule(int(train.get("T", 1000)), float(train.get("beta_start", 1e-4)),
                                float(train.get("beta_end", 0.02)))
    obj = sample(model, graph, sched, seed, cond, mode=args.mode or train.get("mode", "ddpm"),
                 category=args.category, routing_seed=int(train.get("routing_seed", 0)))
    save_object(args.out, obj)
    print(f"wrote {args.out} ({len(obj.parts)} parts)")
    return EXIT_OK


def cmd_infer_graph(args, cfg) -> int:
    from .providers import HttpChatProvider, MockProvider, infer_structure

    prov = _override(_section(cfg, "provider"), kind=args.provider, mock_file=args.mock_file,
                     endpoint=args.endpoint, timeout=args.timeout, max_retries=args.max_retries)
    kind = prov.get("kind", "mock")
    if kind == "mock":
        if not prov.get("mock_file"):
            raise UsageError("the mock provider needs --mock-file")
        provider = MockProvider(prov["mock_file"])
    elif kind == "http":
        if not prov.get("endpoint"):
            raise UsageError("the http provider needs --endpoint")
        provider = HttpChatProvider(prov["endpoint"], prov.get("model", "default"),
                                    float(prov.get("timeout", 60.0)), int(prov.get("max_retries", 2)),
                                    prov.get("token_env", "ARTIKIT_VLM_TOKEN"))
    else:
        raise UsageError(f"unknown provider kind {kind!r}")
    if (args.text is None) == (args.image is None):
        raise UsageError("give exactly one of --text or --image")
    if args.image is not None:
        image = Path(args.image)
        if not image.exists():
            raise FileNotFoundError(f"{image} does not exist")
        condition, modality = image, "image"
    else:
        condition, modality = args.text, "text"
    try:
        graph = infer_structure(provider, condition, modality)
    except ParseError as exc:
        # the payload came from the provider: report it as a provider failure
        raise ProviderError(f"provider returned an invalid structure: {exc}") from exc
    from .io import atomic_write_text

    atomic_write_text(args.out, serialize_graph(graph, indent=1) + "\n")
    print(f"wrote {args.out} ({len(graph.nodes)} nodes)")
    return EXIT_OK


def cmd_make_toy_set(args, cfg) -> int:
    from .io import save_asset, save_features
    from .synthetic import condition_tokens, toy_dataset

    out = Path(args.out)
    for obj, meshes in toy_dataset():
        save_asset(out / f"{obj.category}.akj", obj, meshes)
        if args.features:
            save_features(out / f"{obj.category}.akft", condition_tokens(obj.category))
    print(f"wrote {len(toy_dataset())} objects to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="artikit", description="Articulated-object toolkit.")
    p.add_argument("--version", action="version", version=f"artikit {__version__}")
    p.add_argument("-q", "--quiet", action="store_true", help="only report errors on stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def command(name, func, help_text):
        c = sub.add_parser(name, help=help_text)
        c.add_argument("--config", help="JSON config file")
        c.add_argument("--seed", type=int)
        c.set_defaults(func=func)
        return c

    c = command("ingest", cmd_ingest, "URDF asset directory -> canonical object file")
    c.add_argument("--in", dest="input", required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--no-normalize", action="store_true")
    c.add_argument("--screw-pitch", type=float)

    c = command("validate", cmd_validate, "check an object file against the invariants")
    c.add_argument("--obj", required=True)

    c = command("sample-states", cmd_sample_states, "write posed instances at sampled joint states")
    c.add_argument("--obj", required=True)
    c.add_argument("--m", type=int, default=10)
    c.add_argument("--strategy", default="uniform", choices=["uniform", "stratified", "endpoints"])
    c.add_argument("--out", required=True)

    c = command("evaluate", cmd_evaluate, "POR / MMD / COV / 1-NNA between two object directories")
    c.add_argument("--gen", required=True)
    c.add_argument("--ref", required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--m", type=int)
    c.add_argument("--points", type=int)
    c.add_argument("--orientations", choices=["identity", "yaw4"])
    c.add_argument("--por-resolution", type=int)
    c.add_argument("--cache-dir")

    c = command("train-toy", cmd_train_toy, "train the toy denoiser")
    c.add_argument("--out", required=True)
    c.add_argument("--data", help="directory of .akj objects (default: bundled synthetic set)")
    c.add_argument("--steps", type=int)
    c.add_argument("--lr", type=float)

    c = command("generate", cmd_generate, "sample an object for a connectivity graph")
    c.add_argument("--checkpoint", required=True)
    c.add_argument("--graph", required=True)
    c.add_argument("--features")
    c.add_argument("--mode", choices=["ddpm", "interp"])
    c.add_argument("--category", default="generated")
    c.add_argument("--out", required=True)

    c = command("infer-graph", cmd_infer_graph, "ask a structure-prior provider for a connectivity graph")
    c.add_argument("--provider", choices=["mock", "http"])
    c.add_argument("--mock-file")
    c.add_argument("--endpoint")
    c.add_argument("--timeout", type=float)
    c.add_argument("--max-retries", type=int)
    g = c.add_mutually_exclusive_group()
    g.add_argument("--text")
    g.add_argument("--image")
    c.add_argument("--out", required=True)

    c = command("make-toy-set", cmd_make_toy_set, "write the bundled synthetic objects")
    c.add_argument("--out", required=True)
    c.add_argument("--features", action="store_true", help="also write condition feature files")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr, force=True)
    try:
        cfg = load_config(args.config)
        return args.func(args, cfg)
    except ProviderError as exc:  # before OSError: transport errors are both
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PROVIDER
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ArtikitError, ValueError, TrainingError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
