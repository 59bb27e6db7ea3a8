"""Command-line entry point: ``temporal-ssl <subcommand> [options]``.

Every subcommand reads the same INI config (``--config``), accepts
``--set section.key=value`` overrides, writes a resolved config snapshot and
its JSON-lines metrics into the output directory, and prints a one-line JSON
error on failure.
"""

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import __version__
from . import warp_sampler as ws
from .config import ConfigError, RunConfig
from .dataio import FrameStore, PreprocessConfig, load_frames_clip
from .model import load_checkpoint
from .rng import make_rng
from .synthclips import generate_corpus, load_generator_config, read_manifest, synthesize
from .trainer import TrainingDiverged, pretrain, probe_train

log = logging.getLogger("temporal_ssl")

EXIT_CODES = {ConfigError: 2, FileNotFoundError: 3, TrainingDiverged: 4, ws.InfeasibleVideoError: 5}


class CLIError(Exception):
    pass


class JSONArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        _fail("UsageError", message, 2)


def _fail(kind, message, code):
    print(json.dumps({"error": kind, "message": str(message).replace("\n", " ")}), file=sys.stderr)
    sys.exit(code)


def write_jsonl(path, rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    return path


def _records(cfg: RunConfig, split: str):
    path = cfg.corpus_dir() / f"{split}.jsonl"
    if not path.exists():
        raise FileNotFoundError(f"missing manifest {path}; run gen-data first")
    return read_manifest(path)


def _n_classes(cfg: RunConfig) -> int:
    try:
        return load_generator_config(cfg.corpus_dir())[0].n_classes
    except FileNotFoundError:
        return cfg["data"]["n_classes"]


def _model(cfg: RunConfig):
    path = cfg.checkpoint_path()
    if not path.exists():
        raise FileNotFoundError(f"missing checkpoint {path}; run pretrain first")
    model, doc = load_checkpoint(path)
    pre = PreprocessConfig(**doc["preprocess"]) if doc["preprocess"] else cfg.preprocess()
    return model, pre


def _rel(path, cfg: RunConfig) -> str:
    # logs stay byte-identical when the same run lands in another directory
    return os.path.relpath(path, cfg.output_dir())


def _store(cfg: RunConfig) -> FrameStore:
    return FrameStore(cfg["data"]["cache_videos"])


# -- subcommands ---------------------------------------------------------------


def cmd_gen_data(args, cfg):
    train, test = generate_corpus(cfg.generator(), cfg["data"]["n_train"], cfg["data"]["n_test"],
                                  cfg.seed, cfg.corpus_dir(), workers=cfg["data"]["workers"])
    counts = np.bincount([r.label for r in train + test], minlength=cfg["data"]["n_classes"])
    row = {"task": "gen-data", "corpus_dir": _rel(cfg.corpus_dir(), cfg), "n_train": len(train),
           "n_test": len(test), "class_counts": counts.tolist()}
    write_jsonl(cfg.output_dir() / "gen_data.jsonl", [row])
    return row


def cmd_sample_debug(args, cfg):
    rng = make_rng(cfg.seed, "sampler")
    tau = ws.Tau[args.tau.upper()]
    L = args.length
    if tau is ws.Tau.SPEED:
        seq = ws.sample_speed(L, args.kappa, rng, rho=args.rho)
    elif tau is ws.Tau.RANDOM:
        perm = [int(v) for v in args.permutation.split(",")] if args.permutation else None
        seq = ws.sample_random(L, rng, rho=args.rho, permutation=perm)
    elif tau is ws.Tau.PERIODIC:
        extra = None
        if args.rho is not None:
            if args.s is None:
                raise CLIError("--rho for periodic also needs --s")
            _, rho_min = ws.periodic_offsets(args.kappa, args.s)
            if args.rho < rho_min:
                raise CLIError(f"rho {args.rho} below the minimum start {rho_min} for s={args.s}")
            extra = args.rho - rho_min
        seq = ws.sample_periodic(L, args.kappa, rng, s=args.s, extra_offset=extra)
    else:
        skips = [int(v) for v in args.skips.split(",")] if args.skips else None
        seq = ws.sample_warp(L, rng, skips=skips, rho=args.rho)
    report = ws.validate(seq, L)
    doc = {**seq.to_json(), "tau_name": tau.name.lower(), "valid": report.ok}
    if not report.ok:
        doc["failures"] = [f"{c.name}: {c.reason}" for c in report.failures()]
    print(json.dumps(doc))
    return None


def cmd_pretrain(args, cfg):
    pre = cfg.preprocess()
    res = pretrain(_records(cfg, "train"), cfg.network(pre), cfg.optimizer(), pre, cfg.pretrain(),
                   seed=cfg.seed, out_dir=cfg.output_dir())
    epochs = [h for h in res.history if "epoch" in h]
    last = epochs[-1] if epochs else {}
    return {"task": "pretrain", "checkpoint": str(res.checkpoint), "epochs": len(epochs),
            "acc_motion": last.get("acc_motion"), "acc_speed": last.get("acc_speed")}


def cmd_probe(args, cfg):
    model, pre = _model(cfg)
    freeze = cfg["eval"]["freeze"]
    res = probe_train(model, _records(cfg, "train"), _records(cfg, "test"), _n_classes(cfg), freeze=freeze,
                      pre_cfg=pre, opt_cfg=cfg.optimizer(), cfg=cfg.probe(), seed=cfg.seed, store=_store(cfg))
    row = {"task": "probe", "freeze": freeze, "accuracy": res.accuracy, "train_accuracy": res.train_accuracy,
           "conv_unchanged": res.conv_digest_before == res.conv_digest_after}
    write_jsonl(cfg.output_dir() / "probe.jsonl", [row])
    return row


def cmd_sync(args, cfg):
    from .evaluation import conv5_features, start_index_features, sync_eval

    if args.oracle:
        features, pre = start_index_features, cfg.preprocess()
    else:
        model, pre = _model(cfg)
        features = conv5_features(model, pre)
    res = sync_eval(features, _records(cfg, "train"), _records(cfg, "test"), pre, cfg.probe(), cfg.optimizer(),
                    seed=cfg.seed, per_video=cfg["eval"]["sync_per_video"], store=_store(cfg),
                    n_windows=cfg["eval"]["sync_windows"], test_per_video=cfg["eval"]["sync_test_per_video"])
    row = {**res.to_json(), "features": "oracle" if args.oracle else "conv5"}
    write_jsonl(cfg.output_dir() / ("sync_oracle.jsonl" if args.oracle else "sync.jsonl"), [row])
    return row


def cmd_before_after(args, cfg):
    from .evaluation import before_after_eval, conv5_features

    model, pre = _model(cfg)
    res = before_after_eval(conv5_features(model, pre), _records(cfg, "train"), _records(cfg, "test"), pre,
                            cfg.probe(), cfg.optimizer(), seed=cfg.seed, per_video=cfg["eval"]["order_per_video"],
                            store=_store(cfg), still=args.still)
    row = {**res.to_json(), "still": args.still}
    write_jsonl(cfg.output_dir() / ("before_after_still.jsonl" if args.still else "before_after.jsonl"), [row])
    return row


def cmd_still_probe(args, cfg):
    from .evaluation import still_probe

    model, pre = _model(cfg)
    row = still_probe(model, _records(cfg, "train"), _records(cfg, "test"), _n_classes(cfg), pre,
                      cfg.probe(), cfg.optimizer(), seed=cfg.seed, store=_store(cfg))
    row["gap"] = row["moving_accuracy"] - row["still_accuracy"]
    write_jsonl(cfg.output_dir() / "still_probe.jsonl", [row])
    return row


def cmd_retrieve(args, cfg):
    from .evaluation import build_index, retrieval_json, retrieve, save_index

    kappa = cfg["eval"]["kappa"]
    train, test = _records(cfg, "train"), _records(cfg, "test")
    if args.random_embeddings:
        rng = make_rng(cfg.seed, "eval", 99)
        dim = cfg["model"]["fc_width"]
        index = build_index(None, train, test, cfg.preprocess(), kappa=kappa,
                            embed=lambda rec: rng.standard_normal(dim))
    else:
        model, pre = _model(cfg)
        index = build_index(model, train, test, pre, _store(cfg), kappa=kappa)
    name = "retrieval_random" if args.random_embeddings else "retrieval"
    save_index(index, cfg.output_dir() / f"{name}_index.bin")
    rows = retrieval_json(retrieve(index, cfg["eval"]["k_values"]))
    write_jsonl(cfg.output_dir() / f"{name}.jsonl", rows)
    return {"task": "retrieve", "control": bool(args.random_embeddings), "topk": rows}


def cmd_saliency(args, cfg):
    from .saliency import clip_masks, guided_backprop, object_contrast, render_saliency_grid

    model, pre = _model(cfg)
    ev = cfg["eval"]
    n = args.n_videos if args.n_videos is not None else ev["saliency_videos"]
    records = _records(cfg, "test")[:n]
    try:
        gen_cfg, _ = load_generator_config(cfg.corpus_dir())
    except FileNotFoundError:
        gen_cfg = None
    out_dir = cfg.output_dir() / "saliency"
    store, rows = _store(cfg), []
    for rec in records:
        start = (rec.length - ws.CLIP_LEN) // 2
        clip = load_frames_clip(rec, range(start, start + ws.CLIP_LEN), cfg=pre, store=store)
        sal = guided_backprop(model, clip, ev["saliency_head"], ev["saliency_class"], pre)
        png = render_saliency_grid(sal, clip, out_dir / f"{rec.video_id}.png")
        row = {"video_id": rec.video_id, "grid": _rel(png, cfg), "min": float(sal.values.min()),
               "shape": list(sal.values.shape)}
        if gen_cfg is not None:
            masks = clip_masks(synthesize(rec.label, rec.seed, gen_cfg).masks, clip, pre)
            row["object_mean"], row["background_mean"] = object_contrast(sal, masks)
        rows.append(row)
    summary = {"task": "saliency", "n_videos": len(rows)}
    if rows and "object_mean" in rows[0]:
        obj = float(np.mean([r["object_mean"] for r in rows]))
        bg = float(np.mean([r["background_mean"] for r in rows]))
        summary.update(object_mean=obj, background_mean=bg, object_wins=sum(r["object_mean"] > r["background_mean"]
                                                                            for r in rows))
    write_jsonl(cfg.output_dir() / "saliency.jsonl", rows + [summary])
    return summary


def cmd_report(args, cfg):
    from . import plotting

    out = cfg.output_dir()
    fig_dir = out / "figures"
    rows, figures = [], []
    metrics = out / "metrics.jsonl"
    if metrics.exists():
        m = plotting.read_jsonl(metrics)
        figures.append(plotting.loss_curves(m, fig_dir / "loss_curves.png"))
        figures.append(plotting.pretext_accuracy(m, fig_dir / "pretext_accuracy.png"))
        epochs = [r for r in m if "epoch" in r]
        if epochs:
            rows += [("pretrain", "acc_motion", epochs[-1]["acc_motion"]),
                     ("pretrain", "acc_speed", epochs[-1]["acc_speed"])]
    for name in ("probe", "sync", "sync_oracle", "before_after", "before_after_still", "still_probe"):
        path = out / f"{name}.jsonl"
        if path.exists():
            for r in plotting.read_jsonl(path):
                rows += [(name, k, v) for k, v in sorted(r.items()) if isinstance(v, (int, float))
                         and not isinstance(v, bool)]
    for name in ("retrieval", "retrieval_random"):
        path = out / f"{name}.jsonl"
        if path.exists():
            r = plotting.read_jsonl(path)
            rows += [(name, f"top{x['k']}", x["accuracy"]) for x in r]
            figures.append(plotting.retrieval_bars(r, fig_dir / f"{name}.png"))
    sal = out / "saliency.jsonl"
    if sal.exists():
        summary = plotting.read_jsonl(sal)[-1]
        rows += [("saliency", k, v) for k, v in sorted(summary.items()) if isinstance(v, (int, float))]
    if not rows and not figures:
        raise FileNotFoundError(f"no results found in {out}")
    table = plotting.write_summary(rows, out / "summary.tsv")
    sys.stdout.write(table.read_text())
    return None if args.quiet else {"task": "report", "summary": str(table), "figures": [str(f) for f in figures]}


COMMANDS = {
    "gen-data": (cmd_gen_data, "render the synthetic moving-shapes corpus"),
    "sample-debug": (cmd_sample_debug, "print one frame-index sequence as JSON"),
    "pretrain": (cmd_pretrain, "train the network on the transformation pretext task"),
    "probe": (cmd_probe, "train a classifier on conv5 features (frozen or fine-tuned)"),
    "sync": (cmd_sync, "13-way clip synchronisation on fused features"),
    "before-after": (cmd_before_after, "2-way temporal order classification"),
    "still-probe": (cmd_still_probe, "compare probes on still and moving clips"),
    "retrieve": (cmd_retrieve, "nearest-neighbour retrieval over averaged embeddings"),
    "saliency": (cmd_saliency, "guided-backprop saliency grids for test clips"),
    "report": (cmd_report, "summary table and figures from an output directory"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = JSONArgumentParser(prog="temporal-ssl", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI config file")
    common.add_argument("--seed", type=int, help="overrides run.seed")
    common.add_argument("--output-dir", help="overrides run.output_dir")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="config override, may be repeated; wins over the file")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=JSONArgumentParser)
    p = {name: sub.add_parser(name, parents=[common], help=text) for name, (_, text) in COMMANDS.items()}

    sd = p["sample-debug"]
    sd.add_argument("--tau", required=True, choices=[t.name.lower() for t in ws.Tau])
    sd.add_argument("--kappa", type=int, default=0)
    sd.add_argument("--length", type=int, default=128, help="video length in frames")
    sd.add_argument("--rho", type=int)
    sd.add_argument("--s", type=int, help="periodic switch point")
    sd.add_argument("--skips", help="warp skips, 15 comma-separated values in 0..7")
    sd.add_argument("--permutation", help="random: 16 comma-separated values")

    p["pretrain"].add_argument("--epochs", type=int, help="overrides pretrain.epochs")
    p["probe"].add_argument("--freeze", choices=["conv", "none"], help="overrides eval.freeze")
    for name in ("probe", "sync", "before-after", "still-probe", "retrieve", "saliency"):
        p[name].add_argument("--checkpoint", help="overrides eval.checkpoint")
    p["sync"].add_argument("--oracle", action="store_true", help="use start-index features (sanity run)")
    p["before-after"].add_argument("--still", action="store_true", help="no-signal control with still frames")
    p["retrieve"].add_argument("--random-embeddings", action="store_true", help="random-vector control")
    p["saliency"].add_argument("--n-videos", type=int)
    p["report"].add_argument("--quiet", action="store_true", help="only print the table")
    return parser


def resolve_config(args) -> RunConfig:
    overrides = list(args.set)
    if args.seed is not None:
        overrides.append(f"run.seed={args.seed}")
    if args.output_dir is not None:
        overrides.append(f"run.output_dir={args.output_dir}")
    if getattr(args, "epochs", None) is not None:
        overrides.append(f"pretrain.epochs={args.epochs}")
    if getattr(args, "freeze", None) is not None:
        overrides.append(f"eval.freeze={args.freeze}")
    if getattr(args, "checkpoint", None) is not None:
        overrides.append(f"eval.checkpoint={args.checkpoint}")
    return RunConfig.load(args.config, overrides)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.use_deterministic_algorithms(True, warn_only=True)
    try:
        cfg = resolve_config(args)
        if args.command != "sample-debug":
            cfg.output_dir().mkdir(parents=True, exist_ok=True)
            cfg.write(cfg.output_dir() / f"config.{args.command}.ini")
        result = COMMANDS[args.command][0](args, cfg)
    except CLIError as err:
        _fail("UsageError", err, 2)
    except tuple(EXIT_CODES) as err:
        code = next(c for t, c in EXIT_CODES.items() if isinstance(err, t))
        _fail(type(err).__name__, err, code)
    except (ValueError, KeyError, RuntimeError, OSError) as err:
        _fail(type(err).__name__, err, 1)
    if result is not None:
        print(json.dumps(result))
    return 0


if __name__ == "__main__":
    sys.exit(main())
