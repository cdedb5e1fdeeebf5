"""Experiment command line: synth, build-db, train, eval, reduce, report.

Every run is driven by a declarative JSON config (defaults below, file
via --config, overrides via repeatable --set key=value) and writes its
fully resolved config next to its outputs, so results are reproducible
from the artifacts alone. Exit status is 0 exactly when all requested
artifacts were written.

A database directory holds `manifest.csv` plus an optional rank-4
`payloads.vprk` tensor row-aligned with the manifest.
"""

from __future__ import annotations

import argparse
import copy
import json
import sys
from pathlib import Path

import numpy as np

from . import places, tensorio, trainer
from .errors import VprkitError
from .evaluator import (
    GroundTruthMatcher,
    RecallReport,
    pca_transform_set,
    pca_whiten_fit,
    recall_at_k,
)
from .losses import LossConfig, default_loss_config
from .places import BatchSpec, PlacesDB, SynthConfig
from .tensorio import DescriptorSet
from .trainer import TrainConfig, embed_feature_maps

DEFAULT_CONFIG: dict = {
    "seed": 0,
    "synth": {
        "num_places": 64,
        "images_per_place": 8,
        "height": 7,
        "width": 7,
        "channels": 32,
        "max_shift": 2,
        "gain": 0.3,
        "noise_sigma": 0.1,
        "latent_blur": 2,
        "unstable_fraction": 0.25,
        "noise_contrast": 30.0,
    },
    "train": {
        "num_places": 8,
        "images_per_place": 4,
        "aggregator": "conv_ap",
        "out_channels": 64,
        "grid": [2, 2],
        "use_bias": True,
        "gem_power": 3.0,
        "loss": "multi_similarity",
        "margin": None,
        "ms_alpha": 2.0,
        "ms_beta": 50.0,
        "miner": "ms",
        "miner_epsilon": 0.1,
        "initial_lr": 0.03,
        "lr_decay_factor": 0.3,
        "lr_decay_every": 5,
        "max_epochs": 15,
        "momentum": 0.9,
        "weight_decay": 0.001,
        "decay_bias": True,
    },
    "eval": {
        "queries_per_place": 2,
        "ground_truth": "label",
        "radius_m": 25.0,
        "ks": [1, 5, 10],
    },
    "pca": {
        "out_dim": 64,
        "epsilon": 1e-9,
    },
}


class ConfigError(VprkitError):
    pass


def _check_schema(config: dict, template: dict, path: str = "") -> None:
    for key, value in config.items():
        where = f"{path}.{key}" if path else key
        if key not in template:
            raise ConfigError(f"unknown config key {where!r}")
        ref = template[key]
        if isinstance(ref, dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where!r} must be a section")
            _check_schema(value, ref, where)
        elif isinstance(ref, bool):
            if not isinstance(value, bool):
                raise ConfigError(f"config key {where!r} must be a boolean")
        elif isinstance(ref, (int, float)):
            if value is not None and isinstance(value, bool):
                raise ConfigError(f"config key {where!r} must be a number")
            if value is not None and not isinstance(value, (int, float)):
                raise ConfigError(f"config key {where!r} must be a number")
        elif isinstance(ref, list):
            if not isinstance(value, list):
                raise ConfigError(f"config key {where!r} must be a list")
        elif isinstance(ref, str):
            if not isinstance(value, str):
                raise ConfigError(f"config key {where!r} must be a string")


def _deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def _apply_set(config: dict, assignment: str) -> None:
    key, sep, raw = assignment.partition("=")
    if not sep:
        raise ConfigError(f"--set expects key=value, got {assignment!r}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = config
    parts = key.split(".")
    for part in parts[:-1]:
        if part not in node or not isinstance(node[part], dict):
            raise ConfigError(f"unknown config section {part!r} in --set {key}")
        node = node[part]
    if parts[-1] not in node:
        raise ConfigError(f"unknown config key {key!r} in --set")
    node[parts[-1]] = value


def resolve_config(args) -> dict:
    config = copy.deepcopy(DEFAULT_CONFIG)
    if getattr(args, "config", None):
        loaded = json.loads(Path(args.config).read_text(encoding="utf-8"))
        _check_schema(loaded, DEFAULT_CONFIG)
        config = _deep_merge(config, loaded)
    for assignment in getattr(args, "set", None) or []:
        _apply_set(config, assignment)
    if getattr(args, "seed", None) is not None:
        config["seed"] = args.seed
    _check_schema(config, DEFAULT_CONFIG)
    return config


def _write_resolved(config: dict, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "resolved_config.json").write_text(
        json.dumps(config, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


# ---------------------------------------------------------------------------
# Database directories
# ---------------------------------------------------------------------------

def save_db_dir(db: PlacesDB, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    places.write_manifest(db, out_dir / "manifest.csv")
    payloads = [img.payload for p in db.places for img in p.images]
    if all(p is not None for p in payloads) and payloads:
        tensorio.save_tensor(out_dir / "payloads.vprk", np.stack(payloads))


def load_db_dir(path: Path, allow_small_places: bool = False) -> PlacesDB:
    db = places.ingest_manifest(path / "manifest.csv", allow_small_places=allow_small_places)
    payload_file = path / "payloads.vprk"
    if payload_file.exists():
        stack = tensorio.load_tensor(payload_file).astype(np.float64)
        idx = 0
        for place in db.places:
            for img in place.images:
                img.payload = stack[idx]
                idx += 1
        if idx != stack.shape[0]:
            raise VprkitError(
                f"payload tensor has {stack.shape[0]} maps, manifest lists {idx}"
            )
    return db


def _train_config(config: dict) -> TrainConfig:
    t = config["train"]
    seed = int(config["seed"])
    margin = t["margin"]
    if margin is None:
        loss_config = default_loss_config(t["loss"])
        loss_config.ms_alpha = t["ms_alpha"]
        loss_config.ms_beta = t["ms_beta"]
    else:
        loss_config = LossConfig(margin=margin, ms_alpha=t["ms_alpha"], ms_beta=t["ms_beta"])
    return TrainConfig(
        batch_spec=BatchSpec(t["num_places"], t["images_per_place"], rng_seed=seed),
        aggregator=t["aggregator"],
        out_channels=t["out_channels"],
        grid=tuple(t["grid"]),
        use_bias=t["use_bias"],
        gem_power=t["gem_power"],
        loss=t["loss"],
        loss_config=loss_config,
        miner=t["miner"],
        miner_epsilon=t["miner_epsilon"],
        initial_lr=t["initial_lr"],
        lr_decay_factor=t["lr_decay_factor"],
        lr_decay_every=t["lr_decay_every"],
        max_epochs=t["max_epochs"],
        momentum=t["momentum"],
        weight_decay=t["weight_decay"],
        decay_bias=t["decay_bias"],
        rng_seed=seed + 1,
    )


def _descriptor_set(kind, params, items) -> DescriptorSet:
    fmaps = np.stack([img.payload for _, img in items])
    labels = np.array([pid for pid, _ in items])
    batch = embed_feature_maps(kind, params, fmaps, labels)
    return DescriptorSet(
        vectors=batch.rows,
        ids=[img.image_ref for _, img in items],
        lats=np.array([img.lat for _, img in items]),
        lons=np.array([img.lon for _, img in items]),
        place_ids=labels,
    )


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    config = resolve_config(args)
    s = config["synth"]
    db = places.synth_places(
        num_places=int(s["num_places"]),
        images_per_place=int(s["images_per_place"]),
        shape=(int(s["height"]), int(s["width"]), int(s["channels"])),
        perturbation=SynthConfig(
            max_shift=int(s["max_shift"]),
            gain=float(s["gain"]),
            noise_sigma=float(s["noise_sigma"]),
            latent_blur=int(s["latent_blur"]),
            unstable_fraction=float(s["unstable_fraction"]),
            noise_contrast=float(s["noise_contrast"]),
        ),
        rng_seed=int(config["seed"]),
    )
    out = Path(args.out)
    save_db_dir(db, out)
    _write_resolved(config, out)
    print(f"wrote {len(db)} places / {db.num_images()} images to {out}")
    return 0


def cmd_build_db(args) -> int:
    config = resolve_config(args)
    db = places.ingest_manifest(args.manifest, allow_small_places=args.allow_small_places)
    if args.payloads:
        stack = tensorio.load_tensor(args.payloads).astype(np.float64)
        expected = db.num_images()
        if stack.shape[0] != expected:
            raise VprkitError(
                f"payload tensor has {stack.shape[0]} maps, manifest lists {expected}"
            )
        idx = 0
        for place in db.places:
            for img in place.images:
                img.payload = stack[idx]
                idx += 1
    out = Path(args.out)
    save_db_dir(db, out)
    _write_resolved(config, out)
    print(f"validated {len(db)} places / {db.num_images()} images into {out}")
    return 0


def cmd_train(args) -> int:
    config = resolve_config(args)
    cfg = _train_config(config)
    db = load_db_dir(Path(args.db))
    holdout = int(config["eval"]["queries_per_place"])
    train_db = places.training_view(db, holdout)
    params, log = trainer.train(train_db, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    trainer.save_train_checkpoint(out / "checkpoint.vprc", cfg, params)
    (out / "trainlog.json").write_text(
        json.dumps(log.to_dict(), indent=2) + "\n", encoding="utf-8"
    )
    _write_resolved(config, out)
    final = log.losses[-1] if log.losses else float("nan")
    print(f"trained {cfg.aggregator} for {cfg.max_epochs} epochs, final loss {final:.4f}")
    return 0


def _load_eval_sets(args, config):
    if args.queries and args.refs:
        return tensorio.load_descriptors(args.queries), tensorio.load_descriptors(args.refs)
    if not args.db or not args.checkpoint:
        raise ConfigError("eval needs either --queries/--refs or --db/--checkpoint")
    kind, params, _ = trainer.load_train_checkpoint(args.checkpoint)
    db = load_db_dir(Path(args.db))
    queries, refs = places.query_reference_split(
        db, int(config["eval"]["queries_per_place"])
    )
    return _descriptor_set(kind, params, queries), _descriptor_set(kind, params, refs)


def cmd_eval(args) -> int:
    config = resolve_config(args)
    query_set, ref_set = _load_eval_sets(args, config)
    e = config["eval"]
    gt = GroundTruthMatcher(mode=e["ground_truth"], radius_m=float(e["radius_m"]))
    label = args.label or Path(args.out).name
    report = recall_at_k(query_set, ref_set, gt, [int(k) for k in e["ks"]], label=label)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    tensorio.save_descriptors(out / "queries.vprk", query_set)
    tensorio.save_descriptors(out / "references.vprk", ref_set)
    (out / "report.kv").write_text(report.to_kv_lines(), encoding="utf-8")
    (out / "report.txt").write_text(report.to_text(), encoding="utf-8")
    _write_resolved(config, out)
    print(report.to_text(), end="")
    return 0


def cmd_reduce(args) -> int:
    config = resolve_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    wrote = False
    model = None
    if args.fit:
        training = tensorio.load_descriptors(args.fit)
        model = pca_whiten_fit(
            training.vectors,
            int(config["pca"]["out_dim"]),
            epsilon=float(config["pca"]["epsilon"]),
        )
        tensorio.save_checkpoint(
            out / "pca_model.vprc",
            "pca",
            {
                "mean": model.mean,
                "projection": model.projection,
                "eigenvalues": model.eigenvalues,
            },
            {"epsilon": model.epsilon, "out_dim": model.out_dim},
        )
        wrote = True
    if args.apply:
        if model is None:
            if not args.model:
                raise ConfigError("reduce --apply needs --model (or --fit in the same run)")
            kind, tensors, mconf = tensorio.load_checkpoint(args.model)
            if kind != "pca":
                raise ConfigError(f"{args.model} is not a PCA model")
            from .evaluator import PCAModel

            model = PCAModel(
                tensors["mean"],
                tensors["projection"],
                tensors["eigenvalues"],
                epsilon=float(mconf.get("epsilon", 1e-9)),
            )
        source = tensorio.load_descriptors(args.apply)
        reduced = pca_transform_set(model, source)
        tensorio.save_descriptors(out / "reduced.vprk", reduced)
        wrote = True
    if not wrote:
        raise ConfigError("reduce needs --fit and/or --apply")
    _write_resolved(config, out)
    print(f"pca artifacts written to {out}")
    return 0


def report_table(results: list[RecallReport]) -> tuple[str, str]:
    """Multi-run table: rows sorted by label, one column per recall@k.

    Returns (text table, machine-readable lines). All reports must share
    the same ks.
    """
    if not results:
        raise ValueError("no results to report")
    ks = results[0].ks
    for rep in results:
        if rep.ks != ks:
            raise ValueError(f"inconsistent ks: {rep.ks} vs {ks}")
    rows = sorted(results, key=lambda r: r.label)
    width = max(12, max(len(r.label) for r in rows) + 2)
    header = "run".ljust(width) + " ".join(f"{'R@' + str(k):>9s}" for k in ks)
    lines = [header]
    machine = []
    for rep in rows:
        lines.append(
            rep.label.ljust(width)
            + " ".join(f"{rep.recall_at[k]:>9.4f}" for k in ks)
        )
        for k in ks:
            machine.append(f"run={rep.label} k={k} recall={rep.recall_at[k]!r}")
    return "\n".join(lines) + "\n", "\n".join(machine) + "\n"


def parse_report_lines(text: str) -> dict[tuple[str, int], float]:
    """Parse the machine-readable table back into {(run, k): recall}."""
    out = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        fields = dict(part.partition("=")[::2] for part in line.split())
        out[(fields["run"], int(fields["k"]))] = float(fields["recall"])
    return out


def cmd_report(args) -> int:
    config = resolve_config(args)
    reports = []
    for path in args.results:
        reports.append(RecallReport.from_kv_lines(Path(path).read_text(encoding="utf-8")))
    text, machine = report_table(reports)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "table.txt").write_text(text, encoding="utf-8")
    (out / "table.kv").write_text(machine, encoding="utf-8")
    _write_resolved(config, out)
    print(text, end="")
    return 0


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def _add_common(sub):
    sub.add_argument("--config", help="JSON experiment config file")
    sub.add_argument("--seed", type=int, help="master RNG seed override")
    sub.add_argument("--out", required=True, help="output directory")
    sub.add_argument(
        "--set",
        action="append",
        metavar="KEY=VALUE",
        help="override one config key (dotted path), repeatable",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vprkit", description="desk-scale place recognition experiments"
    )
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("synth", help="generate a synthetic place database")
    _add_common(p)
    p.set_defaults(func=cmd_synth)

    p = subs.add_parser("build-db", help="validate a manifest into a database directory")
    _add_common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--payloads", help="optional rank-4 tensor aligned with the manifest")
    p.add_argument("--allow-small-places", action="store_true")
    p.set_defaults(func=cmd_build_db)

    p = subs.add_parser("train", help="train the aggregation head")
    _add_common(p)
    p.add_argument("--db", required=True, help="database directory")
    p.set_defaults(func=cmd_train)

    p = subs.add_parser("eval", help="recall@k retrieval evaluation")
    _add_common(p)
    p.add_argument("--db", help="database directory (with --checkpoint)")
    p.add_argument("--checkpoint", help="trained head checkpoint")
    p.add_argument("--queries", help="query descriptor set (.vprk)")
    p.add_argument("--refs", help="reference descriptor set (.vprk)")
    p.add_argument("--label", help="run label in the report")
    p.set_defaults(func=cmd_eval)

    p = subs.add_parser("reduce", help="fit and/or apply PCA whitening")
    _add_common(p)
    p.add_argument("--fit", help="descriptor set to learn the projection from")
    p.add_argument("--apply", help="descriptor set to compress")
    p.add_argument("--model", help="existing PCA model (for --apply)")
    p.set_defaults(func=cmd_reduce)

    p = subs.add_parser("report", help="tabulate recall reports from multiple runs")
    _add_common(p)
    p.add_argument("results", nargs="+", help="report.kv files")
    p.set_defaults(func=cmd_report)

    return parser


def run_command(argv: list[str]) -> int:
    """Parse argv and execute; returns the process exit status."""
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (VprkitError, ValueError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run_command(sys.argv[1:]))


if __name__ == "__main__":
    main()
