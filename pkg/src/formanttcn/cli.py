"""Command-line entry point: ``formanttcn <subcommand> ...``.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numerical failure.
Failures print a single ``formanttcn: error: code=N kind=K: message`` line
on stderr.
"""
from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 2, 3, 4
_KINDS = {EXIT_USAGE: "usage", EXIT_DATA: "data", EXIT_NUMERICAL: "numerical"}
RUN_KEYS = ("train_manifest", "val_manifest", "out", "log", "norm_out", "checkpoint", "seed")


class UsageError(Exception):
    pass


def _fail(code, message):
    text = " ".join(str(message).split())
    print(f"formanttcn: error: code={code} kind={_KINDS[code]}: {text}", file=sys.stderr)
    return code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        sys.exit(_fail(EXIT_USAGE, f"{self.prog}: {message}"))


def _existing(path, what):
    if not Path(path).is_file():
        raise FileNotFoundError(f"{what} not found: {path}")
    return path


def _writable(path):
    parent = Path(path).resolve().parent
    if not parent.is_dir():
        raise FileNotFoundError(f"output directory does not exist: {parent}")
    return path


# -- subcommands ---------------------------------------------------------------------

def cmd_synth(args):
    from .synth import make_corpus
    manifests = make_corpus(args.train, args.val, args.test, args.seed, args.out)
    for split, path in manifests.items():
        print(f"{split}\t{path}")


def cmd_features(args):
    from .dsp import apply_norm, extract_features, fit_norm
    from .io import read_manifest, read_norm, read_wav, write_features, write_norm
    entries = read_manifest(_existing(args.manifest, "manifest"))
    stats = read_norm(_existing(args.norm, "norm stats")) if args.norm else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    feats = []
    for audio, _ in entries:
        fm = extract_features(read_wav(audio, allow_any_rate=args.allow_any_rate))
        feats.append(fm)
        write_features(out / (Path(audio).stem + ".feat"), apply_norm(fm, stats) if stats else fm)
    if args.fit_norm:
        write_norm(_writable(args.fit_norm), fit_norm(feats))
    print(f"wrote {len(feats)} feature files to {out}")


def _train_settings(args):
    """Merge config file, --set overrides and explicit flags (flags win)."""
    from .model import ModelConfig, parse_config_values, parse_key_values
    from .trainer import TrainConfig
    values = {}
    if args.config:
        try:
            values.update(parse_key_values(Path(_existing(args.config, "config")).read_text()))
        except ValueError as exc:
            raise UsageError(f"{args.config}: {exc}") from None
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        values[k.strip()] = v.strip()
    for key in RUN_KEYS:
        flag = getattr(args, key, None)
        if flag is not None:
            values[key] = str(flag)
    if args.epochs is not None:
        values["max_epochs"] = str(args.epochs)
    model_keys = parse_config_values(ModelConfig, values, strict=False)
    train_keys = parse_config_values(TrainConfig, values, strict=False)
    unknown = set(values) - set(model_keys) - set(train_keys) - set(RUN_KEYS)
    if unknown:
        raise UsageError(f"unknown configuration keys: {sorted(unknown)}")
    for key in ("train_manifest", "val_manifest", "out"):
        if key not in values:
            raise UsageError(f"missing required setting {key.replace('_', '-')}")
    try:
        model_cfg = ModelConfig(**model_keys)
        train_cfg = TrainConfig(**train_keys)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    return model_cfg, train_cfg, values


def cmd_train(args):
    from . import model as M
    from .dataset import load_manifest, normalize_sets
    from .io import write_norm
    from .trainer import train, write_record_csv
    model_cfg, train_cfg, run = _train_settings(args)
    out = _writable(run["out"])
    norm_out = _writable(run.get("norm_out", f"{out}.norm"))
    log_path = _writable(run["log"]) if "log" in run else None
    train_set = load_manifest(_existing(run["train_manifest"], "train manifest"),
                              allow_any_rate=args.allow_any_rate)
    val_set = load_manifest(_existing(run["val_manifest"], "validation manifest"),
                            allow_any_rate=args.allow_any_rate)
    stats, train_set, val_set = normalize_sets(train_set, val_set)
    write_norm(norm_out, stats)

    records = []

    def on_epoch(rec):
        records.append(rec)
        print(f"epoch {rec.epoch} train_loss {rec.train_loss:.6f} val_loss {rec.val_loss:.6f} "
              f"lr {rec.lr:g}", flush=True)
        if log_path:
            write_record_csv(log_path, records)

    best, _ = train(model_cfg, train_cfg, train_set, val_set, on_epoch=on_epoch,
                    checkpoint=run.get("checkpoint"))
    M.save(best, out)
    print(f"saved {out} and {norm_out}")


def cmd_track(args):
    import numpy as np

    from . import model as M
    from .dataset import predict_track
    from .io import read_norm, read_wav
    from .tracks import write_track_csv
    weights = M.load(_existing(args.model, "model"))
    stats = read_norm(_existing(args.norm, "norm stats"))
    clip = read_wav(_existing(args.input, "audio"), allow_any_rate=args.allow_any_rate)
    track = predict_track(weights, stats, clip, dtype=np.float32 if args.float32 else np.float64)
    write_track_csv(_writable(args.out), track)


def cmd_baseline(args):
    from .classical import BaselineConfig, track_baseline
    from .io import read_wav
    from .tracks import write_track_csv
    clip = read_wav(_existing(args.input, "audio"), allow_any_rate=args.allow_any_rate)
    cfg = BaselineConfig(order=args.order, max_bandwidth=args.max_bandwidth, median=args.median)
    write_track_csv(_writable(args.out), track_baseline(clip, cfg))


def cmd_eval(args):
    from .evaluation import align_labels_30ms, evaluate, load_class_map
    from .tracks import is_label_csv, read_label_csv, read_track_csv
    if len(args.pred) != len(args.ref):
        raise UsageError("give one --ref per --pred")
    class_map = load_class_map(args.classmap and _existing(args.classmap, "class map"))
    pairs = []
    for p, r in zip(args.pred, args.ref):
        pred = read_track_csv(_existing(p, "prediction"))
        # a 10 ms label file used as a prediction gets the same 30 ms averaging as the reference
        if is_label_csv(p):
            pred = align_labels_30ms(pred)
        pairs.append((pred, read_label_csv(_existing(r, "labels"))))
    report = evaluate(pairs, class_map, args.transition_window)
    if args.out:
        report.write_csv(_writable(args.out))
    print(report.to_table())


def cmd_gradcheck(args):
    from importlib import resources

    from .model import ModelConfig
    from .verify import check_network, run_all, tolerance
    if args.config:
        text = Path(_existing(args.config, "config")).read_text()
    else:
        text = resources.files("formanttcn.data").joinpath("tiny_gradcheck.cfg").read_text()
    try:
        cfg = ModelConfig.from_text(text)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"gradcheck config: {exc}") from None
    results = run_all(cfg, args.seed)
    failed = False
    for layer, err in results.items():
        ok = err < tolerance(layer)
        failed |= not ok
        print(f"{layer:<14}{err:.3e}  tol {tolerance(layer):.0e}  {'PASS' if ok else 'FAIL'}")
    if args.verbose:
        for name, err in check_network(cfg, seed=args.seed).items():
            print(f"  network/{name:<22}{err:.3e}")
    if failed:
        raise ArithmeticError("gradient check exceeded tolerance")


# -- parser ----------------------------------------------------------------------------

def build_parser():
    parser = _Parser(prog="formanttcn", description="Formant tracking with a dense gated TCN.")
    parser.add_argument("--threads", type=int, default=None,
                        help="cap BLAS/OpenMP worker threads")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, func, help_text, reads_audio=False):
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.set_defaults(func=func)
        p.add_argument("--seed", type=int, default=0 if name != "train" else None,
                       help="experiment seed (all random streams derive from it)")
        if reads_audio:
            p.add_argument("--allow-any-rate", action="store_true",
                           help="accept WAV files that are not 16 kHz")
        return p

    p = add("synth", cmd_synth, "generate a synthetic corpus with known formant tracks")
    p.add_argument("--train", type=int, required=True)
    p.add_argument("--val", type=int, required=True)
    p.add_argument("--test", type=int, required=True)
    p.add_argument("--out", required=True, help="output directory")

    p = add("features", cmd_features, "extract LPCC + cepstrum features for a manifest", True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="directory for .feat files")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--fit-norm", metavar="STATS", help="fit normalization stats and write them")
    g.add_argument("--norm", metavar="STATS", help="normalize with existing stats")

    p = add("train", cmd_train, "train the network", True)
    p.add_argument("--config", help="key = value file of model/train settings")
    p.add_argument("--train-manifest", dest="train_manifest")
    p.add_argument("--val-manifest", dest="val_manifest")
    p.add_argument("--out", help="model file to write")
    p.add_argument("--log", help="per-epoch record CSV")
    p.add_argument("--norm-out", dest="norm_out", help="norm stats file (default: OUT.norm)")
    p.add_argument("--checkpoint", help="rewrite this model file whenever validation improves")
    p.add_argument("--epochs", type=int, help="override max_epochs")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override one config setting (repeatable)")

    p = add("track", cmd_track, "track formants in a WAV file with a trained model", True)
    p.add_argument("--model", required=True)
    p.add_argument("--norm", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--float32", action="store_true", help="single-precision inference")

    p = add("baseline", cmd_baseline, "track formants by LPC root picking", True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--order", type=int, default=12)
    p.add_argument("--max-bandwidth", type=float, default=400.0)
    p.add_argument("--median", action="store_true", help="3-frame median smoothing")

    p = add("eval", cmd_eval, "score predicted tracks against labels")
    p.add_argument("--pred", action="append", required=True, help="track CSV (repeatable)")
    p.add_argument("--ref", action="append", required=True, help="label CSV (repeatable)")
    p.add_argument("--classmap", help="phone-to-class map (default: built-in TIMIT map)")
    p.add_argument("--out", help="report CSV")
    p.add_argument("--transition-window", type=int, default=3)

    p = add("gradcheck", cmd_gradcheck, "finite-difference check of every backward pass")
    p.add_argument("--config", help="model config (default: shipped tiny config)")
    p.add_argument("--verbose", action="store_true", help="per-tensor errors for the network")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.threads is not None:
        if args.threads < 1:
            return _fail(EXIT_USAGE, "--threads must be >= 1")
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(args.threads)

    from .model import ModelFileError

    try:
        args.func(args)
    except UsageError as exc:
        return _fail(EXIT_USAGE, exc)
    except ArithmeticError as exc:
        return _fail(EXIT_NUMERICAL, exc)
    except (OSError, ValueError, KeyError, ModelFileError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        return _fail(EXIT_DATA, msg)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
