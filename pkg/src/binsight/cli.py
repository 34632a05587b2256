"""``binsight`` command line."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import encoder
from .errors import BinsightError


def _csv_list(cast):
    def parse(text):
        try:
            return [cast(t) for t in text.split(",") if t.strip()]
        except ValueError:
            raise argparse.ArgumentTypeError(f"bad list {text!r}")
    return parse


def _threshold(text):
    v = float(text)
    if not 0.0 < v < 1.0:
        raise argparse.ArgumentTypeError("threshold must lie strictly between 0 and 1")
    return v


def _positive(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def cmd_encode(args):
    raw = encoder.RawBinary.from_path(args.file)
    image = encoder.encode(raw, args.mode, args.side, args.window)
    encoder.save_png(image, args.output)
    print(f"{args.output}: {image.shape[1]}x{image.shape[0]} {args.mode}")


def cmd_synth(args):
    from .data import MANIFEST_NAME, synth_corpus
    manifest = synth_corpus(args.n_per_class, args.seed, args.output)
    print(f"wrote {len(manifest)} files and {Path(args.output) / MANIFEST_NAME}")


def cmd_obfuscate(args):
    from .data import MANIFEST_NAME, load_manifest, obfuscate_corpus
    entries = load_manifest(args.manifest)
    out = obfuscate_corpus(entries, args.output, args.seed, args.modes, args.key)
    print(f"wrote {len(out)} files and {Path(args.output) / MANIFEST_NAME} (key {out.meta['key']})")


def cmd_train(args):
    from .data import SplitSpec, TrainConfig, encode_corpus, load_manifest, split_dataset
    from .model import ModelConfig, build_model, save_model
    from .train import fit

    entries = load_manifest(args.manifest)
    ds = encode_corpus(entries, args.mode, args.side, args.window, workers=args.workers)
    train, val = split_dataset(ds, SplitSpec(args.train_fraction, args.seed))
    config = ModelConfig(args.side, args.side, encoder.channels_for_mode(args.mode), len(ds.classes),
                         args.kernel_size, seed=args.seed)
    model = build_model(config, class_names=ds.classes)
    history = fit(model, train, TrainConfig(args.batch_size, args.epochs, args.seed, args.mode), val,
                  on_epoch=lambda r: print(f"epoch {r.epoch}: loss {r.train_loss:.4f} "
                                           f"train_acc {r.train_accuracy:.4f} val_acc {r.val_accuracy:.4f}",
                                           flush=True))
    save_model(model, args.output)
    print(f"saved {args.output} ({len(train)} train / {len(val)} val, "
          f"final val_acc {history[-1].val_accuracy:.4f})")


def cmd_eval(args):
    from .data import encode_corpus, load_manifest
    from .metrics import class_scores, confusion, report_csv, report_table
    from .model import load_model

    model = load_model(args.model)
    mode = encoder.mode_for_channels(model.config.channels)
    entries = load_manifest(args.manifest, model.class_names)
    ds = encode_corpus(entries, mode, model.config.input_height, args.window, workers=args.workers)
    matrix = confusion(model, ds)
    scores = class_scores(matrix)
    print(report_csv(scores, matrix) if args.csv else report_table(scores, matrix), end="\n" if not args.csv else "")


def cmd_summary(args):
    from .model import ModelConfig, build_model, load_model, model_summary
    if args.model:
        model = load_model(args.model)
    else:
        model = build_model(ModelConfig(channels=encoder.channels_for_mode(args.mode), kernel_size=args.kernel_size))
    print(model_summary(model))


def cmd_classify(args):
    from .gateway import Classifier
    from .model import load_model

    model = load_model(args.model)
    clf = Classifier(model, args.mode, args.window, args.threshold)
    failed = 0
    for i, name in enumerate(args.files, 1):
        try:
            data = Path(name).read_bytes()
            v = clf.classify(data, name, str(i))
        except OSError as exc:
            from .gateway import Verdict
            v = Verdict(str(i), name, None, [], False, 0.0, f"error: {exc.strerror or exc}")
        failed += not v.ok
        print(v.to_json(), flush=True)
    return 1 if failed else 0


def cmd_serve(args):
    from .gateway import Gateway, GatewayConfig, parse_listen
    config = GatewayConfig(args.model, args.mode, args.watch, parse_listen(args.listen) if args.listen else None,
                           args.log, args.threshold, args.workers, args.max_bytes, args.window)
    config.validate()
    Gateway(config).serve_forever()


def cmd_sweep(args):
    from .data import load_manifest
    from .metrics import accuracy_vs_trainsize, sweep_csv

    entries = load_manifest(args.manifest)
    rows = accuracy_vs_trainsize(entries, args.fractions, args.seeds, args.modes, args.epochs, args.batch_size,
                                 holdout_seed=args.seed, kernel_size=args.kernel_size, workers=args.workers)
    text = sweep_csv(rows)
    if args.output:
        Path(args.output).write_text(text)
    print(text, end="")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="binsight", description="Byte-image malware classification toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", required=True)

    def add(name, func, help):
        sp = sub.add_parser(name, help=help, description=help)
        sp.set_defaults(func=func)
        return sp

    def mode_arg(sp, default="gray"):
        sp.add_argument("--mode", choices=encoder.MODES, default=default)

    def window_arg(sp):
        sp.add_argument("--window", type=_positive, default=encoder.DEFAULT_WINDOW, help="entropy window in bytes")

    def workers_arg(sp, default=1):
        sp.add_argument("--workers", type=_positive, default=default)

    sp = add("encode", cmd_encode, "encode one file as a PNG")
    mode_arg(sp)
    sp.add_argument("--side", type=_positive, default=encoder.DEFAULT_SIDE)
    window_arg(sp)
    sp.add_argument("file")
    sp.add_argument("-o", "--output", required=True)

    sp = add("synth", cmd_synth, "write a seeded synthetic corpus")
    sp.add_argument("--n-per-class", type=_positive, default=140)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("-o", "--output", required=True, help="output directory")

    sp = add("obfuscate", cmd_obfuscate, "XOR and block-permute every file of a corpus")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--modes", type=_csv_list(str), default=["xor", "permute"])
    sp.add_argument("--key", type=int, default=None, help="XOR key (default: drawn from --seed)")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("-o", "--output", required=True, help="output directory")

    sp = add("train", cmd_train, "train a model on a manifest")
    sp.add_argument("--manifest", required=True)
    mode_arg(sp)
    sp.add_argument("--side", type=_positive, default=encoder.DEFAULT_SIDE)
    window_arg(sp)
    sp.add_argument("--epochs", type=_positive, default=5)
    sp.add_argument("--batch-size", type=_positive, default=32)
    sp.add_argument("--train-fraction", type=float, default=0.7)
    sp.add_argument("--kernel-size", type=_positive, default=1)
    sp.add_argument("--seed", type=int, default=0)
    workers_arg(sp)
    sp.add_argument("-o", "--output", "--model", dest="output", required=True, help="model file to write")

    sp = add("eval", cmd_eval, "score a model on a manifest")
    sp.add_argument("--model", required=True)
    sp.add_argument("--manifest", required=True)
    window_arg(sp)
    workers_arg(sp)
    sp.add_argument("--csv", action="store_true")

    sp = add("summary", cmd_summary, "print the layer table")
    sp.add_argument("--model")
    mode_arg(sp)
    sp.add_argument("--kernel-size", type=_positive, default=1)

    sp = add("classify", cmd_classify, "classify files, one verdict line each")
    sp.add_argument("--model", required=True)
    sp.add_argument("--mode", choices=encoder.MODES)
    window_arg(sp)
    sp.add_argument("--threshold", type=_threshold, default=0.5)
    sp.add_argument("files", nargs="+")

    sp = add("serve", cmd_serve, "run the classification gateway")
    sp.add_argument("--model", required=True)
    sp.add_argument("--mode", choices=encoder.MODES)
    window_arg(sp)
    sp.add_argument("--watch", metavar="DIR")
    sp.add_argument("--listen", metavar="ADDR:PORT")
    sp.add_argument("--log", default="verdicts.jsonl", metavar="PATH")
    sp.add_argument("--threshold", type=_threshold, default=0.5)
    workers_arg(sp, 4)
    sp.add_argument("--max-bytes", type=_positive, default=16 * 1024 * 1024)

    sp = add("sweep", cmd_sweep, "accuracy versus training-set size")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--fractions", type=_csv_list(float), default=[0.1, 0.3, 0.5, 0.7])
    sp.add_argument("--seeds", type=_csv_list(int), default=[0, 1, 2])
    sp.add_argument("--modes", type=_csv_list(str), default=["gray", "entropy"])
    sp.add_argument("--epochs", type=_positive, default=5)
    sp.add_argument("--batch-size", type=_positive, default=32)
    sp.add_argument("--kernel-size", type=_positive, default=1)
    sp.add_argument("--seed", type=int, default=0, help="seed of the held-out split")
    workers_arg(sp)
    sp.add_argument("-o", "--output", help="also write the CSV here")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.func(args) or 0
    except (BinsightError, OSError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"binsight: error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
