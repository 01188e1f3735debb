"""Command line front end for training, encoding, and retrieval.

One executable with a subcommand per pipeline stage:

* ``synth``   render the synthetic part-based dataset to disk
* ``train``   run the alternating optimizer and write model plus database files
* ``encode``  hash manifest images with a trained checkpoint
* ``index``   inspect a packed code file, optionally build a quantizer on top
* ``query``   rank database items for each query image, CSV on stdout
* ``eval``    mean average precision report for one or more checkpoints
* ``bench``   timing and memory table for the packed distance scan

Logs go to stderr and data goes to stdout, so any command can sit in a
pipeline.  Exit codes: 0 on success, 2 for configuration, usage, and data
errors, 3 when a numeric guard trips.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import RunConfig, default_run_config, load_config
from .data import Dataset, generate_synthetic, load_manifest, write_dataset
from .errors import ConfigError, ContractError, FineHashError, NumericError
from .pq import encode_pq, save_pq, train_pq
from .retrieval import (
    RetrievalIndex,
    bench_scan,
    code_memory_bytes,
    evaluate_queries,
    format_bytes,
    load_features,
    load_labels,
    load_packed,
    pack_codes,
    save_features,
    save_labels,
    save_packed,
    unpack_codes,
)
from .trainer import AlternatingTrainer, TrainState, encode_images, load_checkpoint

LOG = logging.getLogger(__name__)

CHECKPOINT_NAME = "model.fht1"
CODES_NAME = "db.fhc1"
FEATURES_NAME = "db.fhf1"
LABELS_NAME = "db_labels.csv"


# ---------------------------------------------------------------------------
# shared helpers


def _load_run_config(args: argparse.Namespace) -> RunConfig:
    """Config file plus command line overrides, defaults when no file given."""
    config = load_config(args.config) if args.config else default_run_config()
    model, train, synth = config.model, config.train, config.synth
    if getattr(args, "bits", None) is not None:
        model = replace(model, bits=args.bits)
    if getattr(args, "parts", None) is not None:
        model = replace(model, parts=args.parts)
        synth = replace(synth, parts_per_image=args.parts)
    if getattr(args, "seed", None) is not None:
        if args.command == "synth":
            synth = replace(synth, seed=args.seed)
        else:
            train = replace(train, seed=args.seed)
    if getattr(args, "no_exchange", False):
        train = replace(train, exchange=False)
    return RunConfig(model=model, train=train, synth=synth, data_dir=config.data_dir)


def _manifest_path(path: str | Path) -> Path:
    """Accept either a manifest.csv or the directory that contains one."""
    path = Path(path)
    return path / "manifest.csv" if path.is_dir() else path


def _resolve_dataset(config: RunConfig) -> Dataset:
    """Load the configured dataset, generating the synthetic set if absent."""
    if config.data_dir is not None:
        manifest = config.data_dir / "manifest.csv"
        if manifest.exists():
            LOG.info("loading dataset from %s", manifest)
            return load_manifest(manifest)
        LOG.info("no manifest under %s, rendering the synthetic set there", config.data_dir)
        dataset = generate_synthetic(config.synth)
        write_dataset(dataset, config.data_dir)
        return dataset
    LOG.info("no data_dir configured, generating the synthetic set in memory")
    return generate_synthetic(config.synth)


def _encode_set(state: TrainState, images: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Codes and descriptors for a possibly empty image stack."""
    config = state.params.config
    if images.shape[0] == 0:
        return (np.zeros((0, config.bits)), np.zeros((0, config.descriptor_dim)))
    return encode_images(state.params, images)


def _select_images(dataset: Dataset, split: str) -> np.ndarray:
    """Manifest images, optionally narrowed to one split tag."""
    if split == "all":
        return dataset.images
    return dataset.images[dataset.splits == split]


def _positive(kind: type, name: str):
    """argparse type factory for strictly positive numbers."""

    def parse(text: str):
        value = kind(text)
        if value <= 0:
            raise argparse.ArgumentTypeError(f"{name} must be positive, got {text}")
        return value

    return parse


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args: argparse.Namespace) -> int:
    config = _load_run_config(args)
    out = Path(args.out) if args.out else config.data_dir
    if out is None:
        raise ConfigError("synth: give --out or set data_dir in the config file")
    dataset = generate_synthetic(config.synth)
    manifest = write_dataset(dataset, out)
    LOG.info(
        "wrote %d images (%d database, %d queries) across %d classes",
        len(dataset.labels), len(dataset.train_indices), len(dataset.query_indices),
        dataset.num_classes,
    )
    print(manifest)
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    config = _load_run_config(args)
    dataset = _resolve_dataset(config)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    checkpoint = out_dir / CHECKPOINT_NAME
    if args.resume and checkpoint.exists():
        LOG.info("resuming from %s", checkpoint)
        trainer = AlternatingTrainer.from_checkpoint(checkpoint, dataset)
    else:
        trainer = AlternatingTrainer(dataset, config.model, config.train)
    trainer.train(checkpoint_path=checkpoint)

    # The database ships the optimizer's discrete codes; queries get encoded
    # by the network, so retrieval stays asymmetric end to end.
    save_packed(out_dir / CODES_NAME, pack_codes(trainer.codes))
    save_features(out_dir / FEATURES_NAME, trainer.encode_descriptors(dataset.train_images))
    save_labels(out_dir / LABELS_NAME, dataset.train_labels)
    for name in (CHECKPOINT_NAME, CODES_NAME, FEATURES_NAME, LABELS_NAME):
        print(out_dir / name)
    return 0


def cmd_encode(args: argparse.Namespace) -> int:
    state = load_checkpoint(args.checkpoint)
    stored_bits = state.params.config.bits
    if args.bits is not None and args.bits != stored_bits:
        raise ContractError(
            f"encode: checkpoint stores {stored_bits}-bit codes, --bits asked for {args.bits}"
        )
    dataset = load_manifest(_manifest_path(args.manifest))
    codes, descriptors = _encode_set(state, _select_images(dataset, args.split))
    save_packed(args.out, pack_codes(codes))
    if args.features:
        save_features(args.features, descriptors)
    LOG.info("encoded %d images at %d bits", len(codes), stored_bits)
    print(args.out)
    return 0


def cmd_index(args: argparse.Namespace) -> int:
    packed = load_packed(args.codes)
    labels = load_labels(args.labels) if args.labels else None
    features = load_features(args.features) if args.features else None
    RetrievalIndex(packed, labels, features)  # cross-checks the row counts
    print(f"items    {len(packed)}")
    print(f"bits     {packed.bits}")
    print(f"words    {packed.words.shape[1]}")
    print(f"memory   {format_bytes(code_memory_bytes(len(packed), packed.bits))}")
    if labels is not None:
        print(f"classes  {len(np.unique(labels))}")
    if features is not None:
        print(f"features {features.shape[1]}")

    if args.pq_out:
        if features is None:
            raise ContractError("index: building a quantizer needs --features")
        codebook = train_pq(
            features, subspaces=args.subspaces, centroids=args.centroids,
            iters=args.pq_iters, seed=args.seed,
        )
        pq_codes = encode_pq(codebook, features)
        save_pq(args.pq_out, codebook, pq_codes)
        LOG.info(
            "trained %d x %d codebook on %d features", args.subspaces,
            args.centroids, features.shape[0],
        )
        print(f"pq       {args.pq_out}")
    return 0


def cmd_query(args: argparse.Namespace) -> int:
    state = load_checkpoint(args.checkpoint)
    packed = load_packed(args.codes)
    if packed.bits != state.params.config.bits:
        raise ContractError(
            f"query: database codes are {packed.bits}-bit but the checkpoint "
            f"produces {state.params.config.bits}-bit codes"
        )
    features = load_features(args.features) if args.features else None
    if features is not None and features.shape[1] != state.params.config.descriptor_dim:
        raise ContractError(
            f"query: feature file has dimension {features.shape[1]}, checkpoint "
            f"descriptors have {state.params.config.descriptor_dim}"
        )
    index = RetrievalIndex(packed, features=features)
    dataset = load_manifest(_manifest_path(args.queries))
    codes, descriptors = _encode_set(state, _select_images(dataset, args.split))

    topk = args.topk
    if not 1 <= topk <= len(index):
        raise ContractError(f"query: --topk {topk} outside [1, {len(index)}]")
    if features is None:
        # Hamming ranking only: without stored features there is nothing to
        # re-rank with, so any --topn shortlist is moot.
        if args.topn is not None:
            LOG.info("no --features given, skipping the re-rank stage")
        topn = None
    else:
        topn = args.topn if args.topn is not None else topk

    def rank_one(i: int) -> np.ndarray:
        feature = descriptors[i] if topn is not None else None
        return index.search(codes[i], feature, topn)[:topk]

    if args.workers < 1:
        raise ContractError(f"query: --workers must be >= 1, got {args.workers}")
    if args.workers == 1 or len(codes) == 0:
        results = [rank_one(i) for i in range(len(codes))]
    else:
        # The index is read-only, so query scans can run concurrently.
        with ThreadPoolExecutor(max_workers=args.workers) as pool:
            results = list(pool.map(rank_one, range(len(codes))))

    writer = csv.writer(sys.stdout)
    writer.writerow(["query", "rank", "item"])
    for query_id, order in enumerate(results):
        for rank, item in enumerate(order):
            writer.writerow([query_id, rank, int(item)])
    LOG.info("ranked %d queries against %d items", len(codes), len(index))
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    ks = tuple(int(token) for token in args.ks.split(","))
    if args.config:
        config = _load_run_config(args)
        dataset = _resolve_dataset(config)
    elif args.data:
        dataset = load_manifest(_manifest_path(args.data))
    else:
        raise ConfigError("eval: give --data or --config to locate the dataset")

    writer = csv.writer(sys.stdout)
    writer.writerow(["bits", "exchange", "map"] + [f"p@{k}" for k in ks] + ["queries"])

    def emit(state_params, codes: np.ndarray, train_config) -> None:
        metrics = _evaluate_checkpoint(state_params, codes, dataset, ks, args.topn)
        writer.writerow(
            [state_params.config.bits, "on" if train_config.exchange else "off",
             f"{metrics['map']:.4f}"]
            + [f"{metrics['precision_at'][k]:.4f}" for k in ks]
            + [metrics["queries"]]
        )

    for path in args.checkpoints:
        state = load_checkpoint(path)
        emit(state.params, state.codes, state.train_config)
        if args.no_exchange:
            # Ablation: retrain the same schedule with exchanging disabled so
            # the two rows differ only in that switch.
            ablation = replace(state.train_config, exchange=False)
            if args.seed is not None:
                ablation = replace(ablation, seed=args.seed)
            LOG.info("retraining %s with exchanging disabled", path)
            trainer = AlternatingTrainer(dataset, state.params.config, ablation)
            trainer.train()
            emit(trainer.params, trainer.codes, ablation)
    return 0


def _evaluate_checkpoint(params, codes: np.ndarray, dataset: Dataset,
                         ks: tuple[int, ...], topn: int | None) -> dict:
    """MAP and precision@k of one model over the dataset's query split."""
    train_labels = dataset.train_labels
    if len(codes) != len(train_labels):
        raise ContractError(
            f"eval: checkpoint stores {len(codes)} database codes but the "
            f"dataset's train-db split has {len(train_labels)} items"
        )
    features = None
    query_features = None
    query_codes, query_descriptors = encode_images(params, dataset.query_images)
    if topn is not None:
        features = encode_images(params, dataset.train_images)[1]
        query_features = query_descriptors
    index = RetrievalIndex(pack_codes(codes), labels=train_labels, features=features)
    return evaluate_queries(index, query_codes, dataset.query_labels,
                            query_features, topn, ks)


def cmd_bench(args: argparse.Namespace) -> int:
    if args.workers != 1:
        raise ContractError(
            f"bench: timings pin to one worker for stability, got --workers {args.workers}"
        )
    rng = np.random.default_rng(args.seed)
    if args.codes:
        codes = unpack_codes(load_packed(args.codes))
        if len(codes) == 0:
            raise ContractError(f"bench: {args.codes} holds no codes")
    else:
        codes = rng.choice([-1.0, 1.0], size=(args.items, args.bits))
    queries = rng.choice([-1.0, 1.0], size=(args.queries, codes.shape[1]))

    result = bench_scan(codes, queries, reps=args.reps)
    packed_memory = format_bytes(code_memory_bytes(result["database"], result["bits"]))
    float_memory = format_bytes(result["database"] * result["bits"] * 4.0)

    print(f"database {result['database']}  bits {result['bits']}  "
          f"queries {result['queries']}  reps {result['reps']}")
    print(f"{'mode':<8} {'median_s':>12} {'spread_s':>12} {'memory':>10}")
    print(f"{'packed':<8} {result['packed_seconds']:>12.6f} "
          f"{result['packed_spread']:>12.6f} {packed_memory:>10}")
    print(f"{'float32':<8} {result['float_seconds']:>12.6f} "
          f"{result['float_spread']:>12.6f} {float_memory:>10}")
    print(f"speedup  {result['speedup']:.2f}x")

    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            writer = csv.writer(fh)
            header = ["database", "bits", "queries", "reps", "packed_seconds",
                      "packed_spread", "float_seconds", "float_spread", "speedup",
                      "packed_memory"]
            writer.writerow(header)
            writer.writerow([result["database"], result["bits"], result["queries"],
                             result["reps"], f"{result['packed_seconds']:.9f}",
                             f"{result['packed_spread']:.9f}",
                             f"{result['float_seconds']:.9f}",
                             f"{result['float_spread']:.9f}",
                             f"{result['speedup']:.4f}", packed_memory])
        LOG.info("wrote %s", args.csv)
    return 0


# ---------------------------------------------------------------------------
# parser wiring


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="finehash",
        description="Train part-attentive hash codes and search them.",
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    synth = sub.add_parser("synth", help="render the synthetic dataset to disk")
    synth.add_argument("--config", help="run configuration file")
    synth.add_argument("--out", help="output directory (default: the config's data_dir)")
    synth.add_argument("--seed", type=int, help="override the generator seed")
    synth.add_argument("--parts", type=_positive(int, "--parts"),
                       help="override parts per image")
    synth.set_defaults(func=cmd_synth)

    train = sub.add_parser("train", help="run the alternating optimizer")
    train.add_argument("--config", help="run configuration file")
    train.add_argument("--out-dir", default=".",
                       help="where the checkpoint and database files go")
    train.add_argument("--seed", type=int, help="override the training seed")
    train.add_argument("--bits", type=_positive(int, "--bits"), help="override the code length")
    train.add_argument("--parts", type=_positive(int, "--parts"),
                       help="override the attended part count")
    train.add_argument("--no-exchange", action="store_true",
                       help="disable training-time feature exchanging")
    train.add_argument("--resume", action="store_true",
                       help="continue from an existing checkpoint in --out-dir")
    train.set_defaults(func=cmd_train)

    encode = sub.add_parser("encode", help="hash manifest images with a checkpoint")
    encode.add_argument("--checkpoint", required=True, help="trained model file")
    encode.add_argument("--manifest", required=True,
                        help="manifest.csv or a directory containing one")
    encode.add_argument("--out", required=True, help="packed code file to write")
    encode.add_argument("--features", help="also write descriptors to this file")
    encode.add_argument("--bits", type=int,
                        help="expected code length; a mismatch with the checkpoint fails")
    encode.add_argument("--split", choices=("train-db", "query", "all"), default="all",
                        help="encode only this manifest split")
    encode.set_defaults(func=cmd_encode)

    index = sub.add_parser("index", help="inspect packed codes, optionally quantize")
    index.add_argument("--codes", required=True, help="packed code file")
    index.add_argument("--labels", help="database label CSV")
    index.add_argument("--features", help="database descriptor file")
    index.add_argument("--pq-out", help="write a product quantizer file here")
    index.add_argument("--subspaces", type=_positive(int, "--subspaces"), default=8)
    index.add_argument("--centroids", type=_positive(int, "--centroids"), default=256)
    index.add_argument("--pq-iters", type=_positive(int, "--pq-iters"), default=25)
    index.add_argument("--seed", type=int, default=0, help="quantizer training seed")
    index.set_defaults(func=cmd_index)

    query = sub.add_parser("query", help="rank database items for query images")
    query.add_argument("--checkpoint", required=True, help="trained model file")
    query.add_argument("--codes", required=True, help="packed database code file")
    query.add_argument("--queries", required=True,
                       help="query manifest.csv or a directory containing one")
    query.add_argument("--features", help="database descriptors for re-ranking")
    query.add_argument("--topk", type=_positive(int, "--topk"), default=10,
                       help="results per query")
    query.add_argument("--topn", type=_positive(int, "--topn"),
                       help="re-rank shortlist size (default: same as --topk)")
    query.add_argument("--split", choices=("train-db", "query", "all"), default="all",
                       help="rank only this manifest split")
    query.add_argument("--workers", type=int, default=1,
                       help="concurrent query scans over the read-only index")
    query.set_defaults(func=cmd_query)

    evaluate = sub.add_parser("eval", help="retrieval quality of trained checkpoints")
    evaluate.add_argument("--checkpoints", required=True, nargs="+",
                          help="one report row per checkpoint")
    evaluate.add_argument("--data", help="dataset directory or manifest.csv")
    evaluate.add_argument("--config", help="run configuration locating the dataset")
    evaluate.add_argument("--ks", default="1,5,10", help="precision cutoffs, comma separated")
    evaluate.add_argument("--topn", type=_positive(int, "--topn"),
                          help="re-rank shortlist size; omit for Hamming-only")
    evaluate.add_argument("--no-exchange", action="store_true",
                          help="also retrain each checkpoint without exchanging")
    evaluate.add_argument("--seed", type=int, help="seed for the ablation retraining")
    evaluate.set_defaults(func=cmd_eval)

    bench = sub.add_parser("bench", help="time the packed scan against float32")
    bench.add_argument("--codes", help="packed code file (default: random codes)")
    bench.add_argument("--items", type=_positive(int, "--items"), default=101000,
                       help="database size for random codes")
    bench.add_argument("--bits", type=_positive(int, "--bits"), default=32,
                       help="code length for random codes")
    bench.add_argument("--queries", type=_positive(int, "--queries"), default=50)
    bench.add_argument("--reps", type=_positive(int, "--reps"), default=5)
    bench.add_argument("--seed", type=int, default=0)
    bench.add_argument("--workers", type=int, default=1,
                       help="must stay 1; timings pin to a single worker")
    bench.add_argument("--csv", help="also write the table to this CSV file")
    bench.set_defaults(func=cmd_bench)

    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.INFO, format="%(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except NumericError as exc:
        LOG.error("numeric failure: %s", exc)
        return 3
    except FineHashError as exc:
        LOG.error("%s", exc)
        return 2
    except OSError as exc:
        LOG.error("%s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
