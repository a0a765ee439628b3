"""Command line entry point: ``mhtn {gen,train,eval,embed}``.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime or numeric
failure. ``MHTN_OUT_DIR`` sets the default output directory.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .config import RunConfig
from .data import (
    FeatureFragment,
    Manifest,
    SyntheticSpec,
    generate_synthetic,
    load_features,
    split,
    write_features,
    write_pair_table,
)
from .errors import ConfigurationError, MHTNError
from .network import StarNetwork, file_digest, read_checkpoint
from .retrieval import TaskMatrix, evaluate_all, write_pr_curves, write_results
from .trainer import train

log = logging.getLogger("mhtn")

CHECKPOINT = "checkpoint.mhtn"
REPORT = "train_report.tsv"
EFFECTIVE_CONFIG = "config.ini"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def default_out() -> Path:
    return Path(os.environ.get("MHTN_OUT_DIR", "mhtn_out"))


def _csv(kind):
    def parse(text):
        try:
            return [kind(t) for t in text.split(",") if t.strip()]
        except ValueError as exc:
            raise argparse.ArgumentTypeError(str(exc)) from None

    return parse


# ---------------------------------------------------------------------------
# gen


def cmd_gen(args) -> int:
    mods = args.modalities
    dims = args.dims or [64, 48, 32, 40, 56][: len(mods)]
    if len(dims) != len(mods):
        raise ConfigurationError(f"{len(dims)} dims given for {len(mods)} modalities")
    spec = SyntheticSpec(
        num_classes=args.classes,
        per_class=args.per_class,
        modalities=tuple(mods),
        dims=dict(zip(mods, dims)),
        latent_dim=args.latent_dim,
        prototype_scale=args.prototype_scale,
        latent_noise=args.latent_noise,
        noise=args.noise,
        source_classes=args.source_classes,
        source_per_class=args.source_per_class,
        paired=args.paired,
        seed=args.seed,
    )
    fractions = tuple(args.split)
    src, tar = generate_synthetic(spec)
    parts = dict(zip(("train", "test", "validation"), split(tar, fractions, args.seed)))
    out = Path(args.out or default_out())
    out.mkdir(parents=True, exist_ok=True)

    splits, pair_tables = {}, {}
    for name, ds in parts.items():
        splits[name] = {}
        for mod in mods:
            fname = f"{name}_{mod}.tsv"
            write_features(out / fname, ds.fragment(mod))
            splits[name][mod] = fname
        if ds.pair_table is not None:
            pair_tables[name] = f"{name}_pairs.tsv"
            write_pair_table(out / pair_tables[name], mods, ds)
    src_file = f"source_{mods[0]}.tsv"
    write_features(out / src_file, src.fragment(mods[0]))
    manifest = Manifest(
        root=out,
        modalities=list(mods),
        num_classes=spec.num_classes,
        splits=splits,
        source={"file": src_file, "num_classes": spec.source_classes},
        pair_tables=pair_tables,
        meta={"seed": args.seed, "dims": spec.dims, "split": list(fractions), "synthetic": spec.to_dict()},
    )
    manifest.save(out / "manifest.json")
    print(out / "manifest.json")
    return 0


# ---------------------------------------------------------------------------
# train / eval / embed


def _run_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    sched = {}
    if getattr(args, "seed", None) is not None:
        sched["seed"] = args.seed
    if getattr(args, "epochs", None) is not None:
        sched["epochs"] = args.epochs
    if sched:
        cfg.schedule = dataclasses.replace(cfg.schedule, **sched)
    if getattr(args, "lam", None) is not None:
        cfg.weights = dataclasses.replace(cfg.weights, lam=args.lam)
    for flag in ("no_source", "no_sl_net", "no_adver", "no_sds"):
        if getattr(args, flag, False):
            setattr(cfg, flag, True)
    if getattr(args, "manifest", None):
        cfg.manifest = str(Path(args.manifest).resolve())
    if not cfg.manifest:
        raise ConfigurationError("no data manifest: pass --manifest or set [data] manifest")
    return cfg


def _out_dir(args, cfg: RunConfig) -> Path:
    out = Path(args.out or cfg.out or default_out())
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_train(args) -> int:
    cfg = _run_config(args)
    manifest = Manifest.load(cfg.manifest)
    net_cfg = cfg.network_config(manifest)
    out = _out_dir(args, cfg)
    tar = manifest.target("train")
    src = manifest.source_dataset() if net_cfg.use_source else None
    net = StarNetwork.build(net_cfg, cfg.seed)

    (out / EFFECTIVE_CONFIG).write_text(cfg.to_string())
    digest = net_cfg.digest()
    with open(out / REPORT, "w") as report:
        report.write(f"# seed={cfg.seed} config_digest={digest}\n")
        train(net, src, tar, cfg.schedule, report=report, checkpoint=out / CHECKPOINT)
    if cfg.schedule.epochs == 0:
        net.save(out / CHECKPOINT)
    print(out / CHECKPOINT)
    return 0


def _load_network(args, cfg: RunConfig, manifest: Manifest) -> StarNetwork:
    net_cfg = cfg.network_config(manifest)
    return StarNetwork.load(args.checkpoint, net_cfg)


def evaluate_network(net: StarNetwork, manifest: Manifest, split_name: str, workers: int = 1) -> TaskMatrix:
    ds = manifest.target(split_name)
    emb = {m: net.embed(m, ds.features[m]) for m in net.config.modalities}
    return evaluate_all(emb, ds.labels, ds.ids, workers=workers)


def cmd_eval(args) -> int:
    if args.embeddings:
        frags = [load_features(p) for p in args.embeddings]
        matrix = evaluate_all(
            {f.modality: f.features for f in frags},
            {f.modality: f.labels for f in frags},
            {f.modality: f.ids for f in frags},
            workers=args.workers,
        )
        meta = {"source": "embeddings"}
        out = Path(args.out or default_out())
        out.mkdir(parents=True, exist_ok=True)
    else:
        if not args.checkpoint:
            raise ConfigurationError("eval needs --checkpoint (or --embeddings)")
        cfg = _run_config(args)
        manifest = Manifest.load(cfg.manifest)
        net = _load_network(args, cfg, manifest)
        out = _out_dir(args, cfg)
        matrix = evaluate_network(net, manifest, args.split, args.workers)
        meta = {
            "seed": cfg.seed,
            "config_digest": net.config.digest(),
            "checkpoint_digest": file_digest(args.checkpoint),
            "split": args.split,
        }
    write_results(out / "results.tsv", matrix, meta)
    write_pr_curves(out / "pr", matrix)
    for t in matrix.tasks.values():
        print(f"{t.query_modality}->{t.gallery_modality}\t{t.map:.4f}")
    print(f"average\t{matrix.average:.4f}")
    return 0


def cmd_embed(args) -> int:
    cfg = _run_config(args)
    manifest = Manifest.load(cfg.manifest)
    net = _load_network(args, cfg, manifest)
    frag = load_features(args.features)
    if frag.modality not in net.config.modalities:
        raise ConfigurationError(f"modality {frag.modality!r} is unknown to this checkpoint")
    k = net.config.num_classes_target
    emb = net.embed(frag.modality, frag.features) if len(frag) else np.zeros((0, k))
    out = Path(args.output) if args.output else _out_dir(args, cfg) / f"embed_{frag.modality}.tsv"
    out.parent.mkdir(parents=True, exist_ok=True)
    write_features(out, FeatureFragment(frag.modality, frag.ids, frag.labels, emb, frag.num_classes))
    print(out)
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mhtn", description="Hybrid transfer network for cross-modal retrieval")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="write a synthetic benchmark (feature files + manifest)")
    g.add_argument("--out")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--classes", type=int, default=4)
    g.add_argument("--per-class", type=int, default=50)
    g.add_argument("--modalities", type=_csv(str), default=["image", "text", "audio"])
    g.add_argument("--dims", type=_csv(int))
    g.add_argument("--latent-dim", type=int, default=16)
    g.add_argument("--prototype-scale", type=float, default=1.0)
    g.add_argument("--latent-noise", type=float, default=1.0)
    g.add_argument("--noise", type=float, default=0.5)
    g.add_argument("--source-classes", type=int, default=6)
    g.add_argument("--source-per-class", type=int, default=50)
    g.add_argument("--paired", action="store_true", help="emit explicit co-existence groups")
    g.add_argument("--split", type=_csv(float), default=[0.7, 0.2, 0.1], help="train,test,validation fractions")
    g.set_defaults(func=cmd_gen)

    def common(sp, seed=True):
        sp.add_argument("--config")
        sp.add_argument("--manifest")
        sp.add_argument("--out")
        if seed:
            sp.add_argument("--seed", type=int)
        sp.add_argument("--lambda", dest="lam", type=float)
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--no-source", action="store_true")
        sp.add_argument("--no-sl-net", action="store_true")
        sp.add_argument("--no-adver", action="store_true")
        sp.add_argument("--no-sds", action="store_true")

    t = sub.add_parser("train", help="train a network and write checkpoint + epoch report")
    common(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="MAP and PR curves for every ordered modality pair")
    common(e)
    e.add_argument("--checkpoint")
    e.add_argument("--split", default="test")
    e.add_argument("--workers", type=int, default=1)
    e.add_argument("--embeddings", nargs="+", help="evaluate precomputed embedding files instead")
    e.set_defaults(func=cmd_eval)

    m = sub.add_parser("embed", help="class-probability embeddings for one feature file")
    common(m)
    m.add_argument("--checkpoint", required=True)
    m.add_argument("--features", required=True)
    m.add_argument("--output")
    m.set_defaults(func=cmd_embed)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except MHTNError as exc:
        print(f"mhtn: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"mhtn: I/O error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
