"""Command-line entry point: ``skelres {encode,train,predict,bench,describe,synth}``.

Exit status is 0 when every item succeeded, 1 when some item failed and 2
for usage or I/O errors that stop the command before any work is done.
Diagnostics go to stderr; data goes to stdout or files.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import encoding, network, synthetic, training
from .errors import CheckpointError, SkelresError, TopologyMismatch
from .skeleton_io import (
    SEQUENCE_SUFFIX,
    Protocol,
    Topology,
    build_split,
    load_manifest,
    parse_sequence,
    read_sequence,
    scan_directory,
)
from .network import SUPPORTED_DEPTHS

log = logging.getLogger("skelres")

EXIT_OK, EXIT_ITEM_FAILED, EXIT_USAGE = 0, 1, 2


def _setup_logging() -> None:
    level = os.environ.get("SKELRES_LOG", "WARNING").upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.WARNING),
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )


def _fail(msg: str, code: int = EXIT_USAGE) -> int:
    print(f"skelres: error: {msg}", file=sys.stderr)
    return code


def _sequence_files(path: Path) -> list[Path]:
    if path.is_file():
        return [path]
    return sorted(path.glob(f"*{SEQUENCE_SUFFIX}"))


# --------------------------------------------------------------------------
# encode
# --------------------------------------------------------------------------


def _encode_one(src: Path, out_dir: Path, topology: Topology, size: int, sidecar: bool):
    seq = read_sequence(src, topology)
    img = encoding.resize(encoding.encode_image(seq), size, size)
    stem = src.name[: -len(SEQUENCE_SUFFIX)] if src.name.endswith(SEQUENCE_SUFFIX) else src.stem
    dst = out_dir / f"{stem}.png"
    tmp = out_dir / f".{stem}.png.partial"
    encoding.save_png(tmp, img)
    os.replace(tmp, dst)
    if sidecar:
        _, stats = encoding.normalize(seq)
        encoding.write_norm_stats(out_dir / f"{stem}.norm.txt", stats)
    return dst.name, seq


def cmd_encode(args) -> int:
    src = Path(args.input)
    if not src.is_dir() or not os.access(src, os.R_OK | os.X_OK):
        return _fail(f"cannot read input directory {src}")
    files = _sequence_files(src)
    out_dir = Path(args.output)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        return _fail(f"cannot create output directory {out_dir}: {exc}")
    topology = Topology(args.topology)
    size = encoding.TRAIN_SIZE if args.augment_size else encoding.INPUT_SIZE

    def work(path):
        try:
            return path, _encode_one(path, out_dir, topology, size, args.norm_sidecar), None
        except (SkelresError, OSError, UnicodeDecodeError) as exc:
            return path, None, exc

    with ThreadPoolExecutor(max_workers=max(1, args.threads)) as pool:
        results = list(pool.map(work, files))

    failures = [(p, e) for p, _, e in results if e is not None]
    with open(out_dir / "index.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["file", "label", "subject", "camera"])
        for _, res, _ in results:
            if res is not None:
                name, seq = res
                w.writerow([name, seq.label, seq.subject_id, "" if seq.camera_id is None else seq.camera_id])
    for path, exc in failures:
        print(f"{path}: {type(exc).__name__}: {exc}", file=sys.stderr)
    print(f"encoded {len(files) - len(failures)} of {len(files)} sequences into {out_dir}", file=sys.stderr)
    return EXIT_ITEM_FAILED if failures else EXIT_OK


# --------------------------------------------------------------------------
# train
# --------------------------------------------------------------------------


def cmd_train(args) -> int:
    protocol = Protocol(args.protocol)
    topology = Topology(args.topology) if args.topology else (
        Topology.KINECT_V1 if protocol.is_msr else Topology.KINECT_V2
    )
    src = Path(args.input)
    if not src.is_dir():
        return _fail(f"cannot read input directory {src}")
    manifest_path = Path(args.manifest) if args.manifest else src / "manifest.tsv"
    if not manifest_path.is_file():
        return _fail(f"manifest not found: {manifest_path}")
    try:
        cfg = training.TrainConfig.for_depth(
            args.depth,
            epochs=args.epochs,
            seed=args.seed,
            augment=args.augment,
            protocol=protocol,
            **({"batch_size": args.batch} if args.batch else {}),
        )
        manifest = load_manifest(manifest_path)
    except SkelresError as exc:
        return _fail(str(exc))

    entries, failures = scan_directory(src, topology)
    for path, reason in failures:
        print(f"skipped {path}: {reason}", file=sys.stderr)
    try:
        index = build_split(entries, protocol, manifest)
    except SkelresError as exc:
        return _fail(str(exc))
    log.info("%d train / %d test sequences, %d classes",
             len(index.train), len(index.test), index.num_classes)

    def progress(rec):
        print(f"epoch {rec.epoch:>3}  lr {rec.lr:<7g} loss {rec.train_loss:.4f}  "
              f"train_err {rec.train_err:.4f}  test_err {rec.test_err:.4f}", file=sys.stderr)

    try:
        net, report = training.train(index, cfg, topology, on_epoch=progress)
    except SkelresError as exc:
        return _fail(str(exc), EXIT_ITEM_FAILED)

    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    network.save(net, out / "checkpoint.skrn")
    (out / "report.csv").write_text(report.to_csv())
    (out / "summary.json").write_text(report.to_json() + "\n")
    print(report.to_json())
    return EXIT_OK


# --------------------------------------------------------------------------
# predict
# --------------------------------------------------------------------------


def _predict_one(path: Path, net, topology: Topology, class_names):
    data = path.read_bytes()
    header = data.split(b"\n", 1)[0].split()
    if header and header[0].isdigit() and int(header[0]) != topology.num_joints:
        raise TopologyMismatch(
            f"sequence has {int(header[0])} joints, checkpoint was trained on {topology.value}"
        )
    seq = parse_sequence(data, topology)
    img = encoding.encode_for_network(seq)
    probs = training.softmax(net.forward(encoding.to_network_input(img)).astype(np.float64))[0]
    k = int(np.argmax(probs))
    name = class_names[k] if k < len(class_names) else str(k)
    stem = path.name[: -len(SEQUENCE_SUFFIX)] if path.name.endswith(SEQUENCE_SUFFIX) else path.stem
    return stem, name, probs


def cmd_predict(args) -> int:
    try:
        net = network.load(args.checkpoint)
    except (CheckpointError, OSError) as exc:
        return _fail(f"cannot load checkpoint: {exc}")
    meta = net.metadata
    topology = Topology(meta.get("topology", Topology.KINECT_V2.value))
    if args.manifest:
        m = load_manifest(args.manifest)
        class_names = [m.get(i, str(i)) for i in range(net.spec.num_classes)]
    else:
        class_names = meta.get("class_names") or [str(i) for i in range(net.spec.num_classes)]
    if len(class_names) != net.spec.num_classes:
        return _fail(f"checkpoint has {net.spec.num_classes} classes but {len(class_names)} names")

    src = Path(args.input)
    if not src.exists():
        return _fail(f"input not found: {src}")
    files = _sequence_files(src)

    def work(path):
        try:
            return path, _predict_one(path, net, topology, class_names), None
        except (SkelresError, OSError, UnicodeDecodeError) as exc:
            return path, None, exc

    if args.threads > 1:
        with ThreadPoolExecutor(max_workers=args.threads) as pool:
            results = list(pool.map(work, files))
    else:
        results = [work(p) for p in files]

    w = csv.writer(sys.stdout, lineterminator="\n")
    if args.probs:
        w.writerow(["sequence", "class", "probability", *class_names])
    failed = 0
    for path, res, exc in results:
        if exc is not None:
            failed += 1
            print(f"{path}: {type(exc).__name__}: {exc}", file=sys.stderr)
            continue
        stem, name, probs = res
        row = [stem, name, f"{probs.max():.6f}"]
        if args.probs:
            row += [f"{p:.6f}" for p in probs]
        w.writerow(row)
    return EXIT_ITEM_FAILED if failed else EXIT_OK


# --------------------------------------------------------------------------
# bench / describe / synth
# --------------------------------------------------------------------------


def cmd_bench(args) -> int:
    topology = Topology(args.topology)
    if args.input:
        src = Path(args.input)
        if not src.is_dir():
            return _fail(f"cannot read input directory {src}")
        seqs = []
        for p in _sequence_files(src):
            try:
                seqs.append(read_sequence(p, topology))
            except SkelresError as exc:
                print(f"skipped {p}: {exc}", file=sys.stderr)
        if not seqs:
            return _fail("no readable sequences to benchmark")
    else:
        rng = np.random.default_rng(args.seed)
        seqs = [
            synthetic.make_sequence(i % 4, rng, topology, frames=args.frames)
            for i in range(args.sequences)
        ]
    cfg = training.TrainConfig.for_depth(args.depth, seed=args.seed)
    stages = training.timeit_stages(seqs, cfg, repeats=args.repeats)
    if args.json:
        print(training.stages_to_json(stages))
    else:
        print(f"ResNet-{args.depth}, {len(seqs)} sequences, {args.repeats} repeats")
        print(training.format_stage_table(stages))
    return EXIT_OK


def cmd_describe(args) -> int:
    net = network.build(network.NetworkSpec(args.depth, args.classes))
    print(net.describe())
    return EXIT_OK


def cmd_synth(args) -> int:
    paths = synthetic.write_dataset(
        args.output, Protocol(args.protocol), args.classes,
        args.train_per_class, args.test_per_class, args.seed,
    )
    print(f"wrote {len(paths)} sequences to {args.output}", file=sys.stderr)
    return EXIT_OK


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="skelres", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    topologies = [t.value for t in Topology]
    protocols = [pr.value for pr in Protocol]

    e = sub.add_parser("encode", help="encode sequence files as PNG images")
    e.add_argument("--input", required=True)
    e.add_argument("--output", required=True)
    e.add_argument("--topology", choices=topologies, default=Topology.KINECT_V2.value)
    e.add_argument("--augment-size", action="store_true",
                   help="write 40x40 images (augmentation source) instead of 32x32")
    e.add_argument("--norm-sidecar", action="store_true",
                   help="also write <id>.norm.txt with the normalization extrema")
    e.add_argument("--threads", type=int, default=1)
    e.add_argument("--seed", type=int, default=0, help="accepted for symmetry; encoding is deterministic")
    e.set_defaults(func=cmd_encode)

    t = sub.add_parser("train", help="train a residual network on a protocol split")
    t.add_argument("--input", required=True, help="directory of sequence files and manifest.tsv")
    t.add_argument("--output", required=True)
    t.add_argument("--manifest")
    t.add_argument("--protocol", choices=protocols, required=True)
    t.add_argument("--topology", choices=topologies)
    t.add_argument("--depth", type=int, choices=SUPPORTED_DEPTHS, default=20)
    t.add_argument("--epochs", type=int, default=120)
    t.add_argument("--batch", type=int, help="mini-batch size (default 128, or 64 for depth 110)")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--augment", action=argparse.BooleanOptionalAction, default=None,
                   help="24x crop/flip augmentation (default: on for MSR protocols)")
    t.add_argument("--threads", type=int, default=1)
    t.set_defaults(func=cmd_train)

    pr = sub.add_parser("predict", help="classify sequence files with a checkpoint")
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--input", required=True, help="a sequence file or a directory of them")
    pr.add_argument("--manifest")
    pr.add_argument("--probs", action="store_true", help="print the full class distribution")
    pr.add_argument("--threads", type=int, default=1)
    pr.set_defaults(func=cmd_predict)

    b = sub.add_parser("bench", help="time encoding, training and prediction per sequence")
    b.add_argument("--input")
    b.add_argument("--topology", choices=topologies, default=Topology.KINECT_V2.value)
    b.add_argument("--depth", type=int, choices=SUPPORTED_DEPTHS, default=32)
    b.add_argument("--sequences", type=int, default=16)
    b.add_argument("--frames", type=int, default=100)
    b.add_argument("--repeats", type=int, default=3)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--json", action="store_true")
    b.add_argument("--threads", type=int, default=1)
    b.set_defaults(func=cmd_bench)

    d = sub.add_parser("describe", help="print the layer inventory of a network")
    d.add_argument("--depth", type=int, choices=SUPPORTED_DEPTHS, default=20)
    d.add_argument("--classes", type=int, default=8)
    d.set_defaults(func=cmd_describe)

    s = sub.add_parser("synth", help="write a synthetic sequence dataset")
    s.add_argument("--output", required=True)
    s.add_argument("--protocol", choices=protocols, default=Protocol.NTU_CROSS_SUBJECT.value)
    s.add_argument("--classes", type=int, default=4)
    s.add_argument("--train-per-class", type=int, default=16)
    s.add_argument("--test-per-class", type=int, default=8)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)
    return p


def _validate(args, parser) -> None:
    for name in ("threads", "epochs", "batch", "sequences", "repeats", "frames", "classes"):
        val = getattr(args, name, None)
        if val is not None and val < 1:
            parser.error(f"--{name} must be positive")
    if getattr(args, "batch", None) == 1:
        parser.error("--batch must be at least 2 (batch norm needs two samples)")
    if getattr(args, "frames", None) == 1:
        parser.error("--frames must be at least 2")


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    _validate(args, parser)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
