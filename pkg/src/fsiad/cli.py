"""Command-line entry point: ``fsiad <subcommand> --config PATH --seed INT --out DIR``."""
from __future__ import annotations

import argparse
import datetime as _dt
import json
import logging
import subprocess
import sys
from pathlib import Path

from . import __version__
from .core import TrainConfig, load_config, seeded_rng, set_threads

log = logging.getLogger("fsiad")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2

SMOKE_CONFIG = dict(n_subjects=8, attrs_per_subject=6, resolution=32, iterations=50, n_aug=50,
                    batch_size=8, width=0.125, pretrain_epochs=10, hfr_steps=40, hfr_batch_size=8)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def version_string() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], capture_output=True,
                             text=True, cwd=Path(__file__).parent, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def write_run_record(out: Path, command: str, cfg: TrainConfig, argv, started: str, outputs):
    record = {
        "subcommand": command,
        "argv": list(argv),
        "config": cfg.to_dict(),
        "seed": cfg.seed,
        "version": version_string(),
        "started": started,
        "finished": _now(),
        "outputs": sorted(str(p) for p in outputs),
    }
    (out / "run.json").write_text(json.dumps(record, indent=2, sort_keys=True))


def _resolve_config(args) -> TrainConfig:
    cfg = load_config(args.config) if args.config else TrainConfig()
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


def _manifest(data_dir):
    from .dataio import Manifest

    path = Path(data_dir) / "manifest.tsv"
    if not path.is_file():
        raise FileNotFoundError(f"no manifest.tsv in {data_dir}")
    return Manifest.read(path)


# --------------------------------------------------------------------------
# subcommands; each returns the list of files it produced


def cmd_gen_data(args, cfg, out):
    from .dataio import generate_dataset

    m = generate_dataset(cfg.seed, cfg.n_subjects, cfg.attrs_per_subject, cfg.resolution, out)
    print(f"wrote {len(m)} images to {out}")
    return [out / "manifest.tsv"]


def cmd_pretrain(args, cfg, out):
    from .hfr import pretrain_recognizer

    _, info = pretrain_recognizer(_manifest(args.data), cfg, out / "recognizer.fsiad")
    (out / "pretrain.json").write_text(json.dumps(info, indent=2))
    print(f"pretrain train accuracy {info['train_accuracy']:.4f}")
    return [out / "recognizer.fsiad", out / "pretrain.json"]


def cmd_train_fsiad(args, cfg, out):
    from .hfr import load_recognizer
    from .trainer import train_fsiad

    e_id, _ = load_recognizer(args.recognizer)
    final = train_fsiad(_manifest(args.data), cfg, e_id, out)
    return [final, out / "losses.csv", out / "diagnostics.csv"]


def cmd_synthesize(args, cfg, out):
    from .trainer import synthesize_pairs

    n = args.n if args.n is not None else cfg.n_aug
    synth = synthesize_pairs(args.fsiad, _manifest(args.data), n, seeded_rng(cfg.seed), out)
    print(f"wrote {len(synth)} synthetic images ({n} pairs) to {out}")
    return [out / "manifest.tsv"]


def cmd_train_hfr(args, cfg, out):
    from .hfr import finetune_hfr

    synth = _manifest(args.synth) if args.synth else None
    res = finetune_hfr(args.recognizer, _manifest(args.data), synth, cfg, out)
    o = res.optimizer
    print(f"optimizer SGD momentum={o['momentum']} lr={o['lr']} weight_decay={o['weight_decay']}")
    return [out / "hfr.fsiad", out / "hfr_log.csv", out / "hfr_run.json"]


def _parse_ckpt_arg(spec: str, i: int):
    if "=" in spec:
        label, path = spec.split("=", 1)
        return label, path
    return (f"model{i}" if i else "model"), spec


def cmd_eval(args, cfg, out):
    from .pipeline import recognition_metrics, synthesis_metrics

    manifest = _manifest(args.data)
    produced, table = [], []
    labels = set()
    for i, spec in enumerate(args.ckpt):
        label, path = _parse_ckpt_arg(spec, i)
        if label in labels:
            raise UsageError(f"duplicate checkpoint label {label!r}")
        labels.add(label)
        metrics, roc = recognition_metrics(path, manifest)
        if args.fsiad:
            metrics.update(synthesis_metrics(args.fsiad, path, manifest, seeded_rng(cfg.seed)))
        roc.write_csv(out / f"roc_{label}.csv")
        (out / f"metrics_{label}.json").write_text(json.dumps(metrics, indent=2, sort_keys=True))
        produced += [out / f"roc_{label}.csv", out / f"metrics_{label}.json"]
        table.append((label, metrics))
    keys = ["rank1", "vr@far=0.01", "vr@far=0.001", "vr@far=0.0001"]
    print(f"{'model':<14}" + "".join(f"{k:>15}" for k in keys))
    for label, m in table:
        print(f"{label:<14}" + "".join(f"{m[k]:>15.4f}" for k in keys))
    return produced


def cmd_eval_synthesis(args, cfg, out):
    from .pipeline import synthesis_metrics

    metrics = synthesis_metrics(args.fsiad, args.recognizer, _manifest(args.data), seeded_rng(cfg.seed),
                                n_pairs=args.n)
    (out / "synthesis_metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True))
    for k in sorted(metrics):
        print(f"{k:<20}{metrics[k]:.5f}")
    return [out / "synthesis_metrics.json"]


def cmd_smoke(args, cfg, out):
    code = pipeline_smoke(out, cfg.seed)
    if code != EXIT_OK:
        raise _SmokeFailed(code)
    return [out / "metrics.json"]


class _SmokeFailed(RuntimeError):
    def __init__(self, code):
        super().__init__(f"smoke pipeline exited with {code}")
        self.code = code


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "train-fsiad": cmd_train_fsiad,
    "synthesize": cmd_synthesize,
    "train-hfr": cmd_train_hfr,
    "eval": cmd_eval,
    "eval-synthesis": cmd_eval_synthesis,
    "smoke": cmd_smoke,
}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="fsiad", description="Identity-attribute disentangled face synthesis pipeline.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    def add(name, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", type=str, default=None, help="key=value config file")
        sp.add_argument("--seed", type=int, default=None, help="overrides the config seed")
        sp.add_argument("--out", type=str, required=True, help="output directory")
        return sp

    add("gen-data", "render the procedural paired dataset")
    add("pretrain", "pretrain the recognizer / identity encoder").add_argument("--data", required=True)
    sp = add("train-fsiad", "train encoders, generator and discriminator")
    sp.add_argument("--data", required=True)
    sp.add_argument("--recognizer", required=True, help="pretrained recognizer checkpoint")
    sp = add("synthesize", "generate augmented synthetic pairs")
    sp.add_argument("--data", required=True)
    sp.add_argument("--fsiad", required=True, help="trained FSIAD checkpoint")
    sp.add_argument("--n", type=int, default=None, help="number of pairs (default: config n_aug)")
    sp = add("train-hfr", "fine-tune the recognizer on real (+ synthetic) pairs")
    sp.add_argument("--data", required=True)
    sp.add_argument("--recognizer", required=True, help="initial recognizer checkpoint")
    sp.add_argument("--synth", default=None, help="synthetic dataset directory; omit for the baseline")
    sp = add("eval", "rank-1 / VR@FAR for one or more recognizers")
    sp.add_argument("--data", required=True)
    sp.add_argument("--ckpt", action="append", required=True, help="[LABEL=]recognizer checkpoint, repeatable")
    sp.add_argument("--fsiad", default=None, help="also report synthesis metrics for this generator")
    sp = add("eval-synthesis", "FID and attribute SSIM of synthesized faces")
    sp.add_argument("--data", required=True)
    sp.add_argument("--fsiad", required=True)
    sp.add_argument("--recognizer", required=True, help="recognizer supplying FID features")
    sp.add_argument("--n", type=int, default=256, help="synthetic pairs to score")
    add("smoke", "run the whole chain at miniature scale")
    return p


def dispatch(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        cfg = _resolve_config(args)
    except (ValueError, OSError) as exc:
        print(f"fsiad {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    set_threads()
    started = _now()
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        produced = COMMANDS[args.command](args, cfg, out)
        write_run_record(out, args.command, cfg, argv, started, produced)
    except UsageError as exc:
        print(f"fsiad {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except _SmokeFailed as exc:
        return exc.code
    except Exception as exc:  # noqa: BLE001 - every runtime failure maps to exit 2
        print(f"fsiad {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def pipeline_smoke(out_dir, seed: int = 0) -> int:
    """Run every subcommand at miniature scale; exit 2 naming the failing stage."""
    out = Path(out_dir)
    cfg_path = out / "smoke.cfg"
    try:
        out.mkdir(parents=True, exist_ok=True)
        cfg_path.write_text(TrainConfig(seed=seed, **SMOKE_CONFIG).dumps())
    except OSError as exc:
        print(f"smoke: stage gen-data failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    common = ["--config", str(cfg_path), "--seed", str(seed)]
    d = {k: str(out / k) for k in ("data", "pretrain", "fsiad", "synth", "hfr_base", "hfr_aug",
                                   "eval", "eval_synth")}
    stages = [
        ("gen-data", ["gen-data", "--out", d["data"]]),
        ("pretrain", ["pretrain", "--data", d["data"], "--out", d["pretrain"]]),
        ("train-fsiad", ["train-fsiad", "--data", d["data"], "--recognizer",
                         f"{d['pretrain']}/recognizer.fsiad", "--out", d["fsiad"]]),
        ("synthesize", ["synthesize", "--data", d["data"], "--fsiad", f"{d['fsiad']}/fsiad.fsiad",
                        "--out", d["synth"]]),
        ("train-hfr", ["train-hfr", "--data", d["data"], "--recognizer", f"{d['pretrain']}/recognizer.fsiad",
                       "--out", d["hfr_base"]]),
        ("train-hfr", ["train-hfr", "--data", d["data"], "--recognizer", f"{d['pretrain']}/recognizer.fsiad",
                       "--synth", d["synth"], "--out", d["hfr_aug"]]),
        ("eval", ["eval", "--data", d["data"], "--ckpt", f"baseline={d['hfr_base']}/hfr.fsiad",
                  "--ckpt", f"augmented={d['hfr_aug']}/hfr.fsiad", "--out", d["eval"]]),
        ("eval-synthesis", ["eval-synthesis", "--data", d["data"], "--fsiad", f"{d['fsiad']}/fsiad.fsiad",
                            "--recognizer", f"{d['hfr_aug']}/hfr.fsiad", "--n", "64", "--out", d["eval_synth"]]),
    ]
    for name, argv in stages:
        code = dispatch(argv + common)
        if code != EXIT_OK:
            print(f"smoke: stage {name} failed (exit {code})", file=sys.stderr)
            return EXIT_RUNTIME
    expected = {
        "gen-data": [Path(d["data"]) / "manifest.tsv"],
        "pretrain": [Path(d["pretrain"]) / "recognizer.fsiad"],
        "train-fsiad": [Path(d["fsiad"]) / "fsiad.fsiad", Path(d["fsiad"]) / "losses.csv"],
        "synthesize": [Path(d["synth"]) / "manifest.tsv"],
        "train-hfr": [Path(d["hfr_base"]) / "hfr.fsiad", Path(d["hfr_aug"]) / "hfr.fsiad"],
        "eval": [Path(d["eval"]) / "metrics_baseline.json", Path(d["eval"]) / "metrics_augmented.json"],
        "eval-synthesis": [Path(d["eval_synth"]) / "synthesis_metrics.json"],
    }
    try:
        _verify_outputs(expected)
    except Exception as exc:  # noqa: BLE001
        print(f"smoke: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    metrics = {
        "baseline": json.loads((Path(d["eval"]) / "metrics_baseline.json").read_text()),
        "augmented": json.loads((Path(d["eval"]) / "metrics_augmented.json").read_text()),
        "synthesis": json.loads((Path(d["eval_synth"]) / "synthesis_metrics.json").read_text()),
    }
    (out / "metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True))
    return EXIT_OK


def _verify_outputs(expected: dict):
    from .core import load_checkpoint
    from .dataio import Manifest

    for stage, paths in expected.items():
        for p in paths:
            if not p.is_file():
                raise FileNotFoundError(f"stage {stage}: missing output {p}")
            if p.suffix == ".fsiad":
                load_checkpoint(p)
            elif p.suffix == ".tsv":
                if len(Manifest.read(p)) == 0:
                    raise ValueError(f"stage {stage}: empty manifest {p}")
            elif p.suffix == ".json":
                json.loads(p.read_text())
            elif p.suffix == ".csv":
                if len(p.read_text().splitlines()) < 2:
                    raise ValueError(f"stage {stage}: empty log {p}")


def main():
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
