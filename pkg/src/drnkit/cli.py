"""Command-line entry point: training, evaluation, cost reports, and the
verification suites, wired through the shared RunConfig schema."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .blocks import DenseBlockSpec, DrnNet
from .config import MNIST_FILES, RunConfig, build_model_config, mnist_paths
from .cost import compare_blocks, format_report, report_rows
from .ctc import AlphabetSpec, ctc_greedy_decode, oracle_suite
from .data import (DatasetSplit, read_idx, read_string_corpus, read_tensor,
                   synth_string_dataset)
from .gradcheck import standard_suite
from .tensor import Tensor
from .train import Sgd, SgdConfig, evaluate, fit, load_checkpoint


class CliError(ValueError):
    pass


def _config_from_args(args) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
    cfg.apply_overrides(args.set)
    return cfg


def _add_config_flags(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", help="key = value config file with [model]/[optimizer]/[data]/[run] sections")
    sub.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", default=[],
                     help="override one config value (repeatable)")
    sub.add_argument("--print-defaults", action="store_true",
                     help="print every config key with its default and exit")


def _maybe_print_defaults(args) -> bool:
    if getattr(args, "print_defaults", False):
        print(RunConfig.describe_defaults())
        return True
    return False


def _limit(split: DatasetSplit, count: int) -> DatasetSplit:
    if count and count < len(split):
        return split.subset(np.arange(count))
    return split


def _load_mnist(cfg: RunConfig) -> tuple[DatasetSplit, DatasetSplit]:
    paths = mnist_paths(cfg)
    missing = [str(p) for p in paths.values() if not p.is_file()]
    if missing:
        raise CliError(
            "MNIST IDX files not found: " + ", ".join(missing)
            + f" (expected {', '.join(MNIST_FILES)} under {cfg['data.mnist_dir']}; "
            "see scripts/fetch_mnist.py)"
        )
    train = read_idx(paths["train_images"], paths["train_labels"])
    test = read_idx(paths["test_images"], paths["test_labels"])
    return _limit(train, cfg["data.train_limit"]), _limit(test, cfg["data.test_limit"])


def _load_splits(cfg: RunConfig) -> tuple[DatasetSplit, DatasetSplit | None]:
    dataset = cfg["data.dataset"]
    if dataset == "mnist":
        return _load_mnist(cfg)
    if dataset == "synth-strings":
        glyphs, _ = _load_mnist(cfg)
        canvas = (32, cfg["data.canvas_width"])
        len_range = (cfg["data.len_min"], cfg["data.len_max"])
        seed = cfg["run.seed"]
        train = synth_string_dataset(seed, glyphs, cfg["data.synth_train_size"],
                                     len_range, canvas)
        test = synth_string_dataset(seed + 1, glyphs, cfg["data.synth_test_size"],
                                    len_range, canvas)
        return train, test
    corpus_dir = cfg["data.corpus_dir"]
    if not corpus_dir:
        raise CliError("dataset=corpus needs data.corpus_dir")
    return read_string_corpus(corpus_dir), None


def _build_model(cfg: RunConfig) -> DrnNet:
    return DrnNet(build_model_config(cfg), seed=cfg["run.seed"])


def _optimizer(cfg: RunConfig, model: DrnNet) -> Sgd:
    return Sgd(model, SgdConfig(
        base_lr=cfg["optimizer.base_lr"],
        momentum=cfg["optimizer.momentum"],
        weight_decay=cfg["optimizer.weight_decay"],
        schedule=cfg["optimizer.schedule"],
    ))


def cmd_train(args) -> int:
    if _maybe_print_defaults(args):
        return 0
    cfg = _config_from_args(args)
    train_split, test_split = _load_splits(cfg)
    model = _build_model(cfg)
    optimizer = _optimizer(cfg, model)
    out_dir = Path(cfg["run.out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    result = fit(
        model, train_split, optimizer,
        epochs=cfg["optimizer.epochs"], batch_size=cfg["optimizer.batch_size"],
        seed=cfg["run.seed"], test_split=test_split,
        metrics_path=out_dir / "metrics.tsv",
        checkpoint_path=out_dir / "model.ckpt",
        early_stop_patience=cfg["run.early_stop_patience"],
        log=print,
    )
    final = result.test[-1] if result.test else result.train[-1]
    print(f"done: {result.epochs_run} epochs, final loss {final.loss:.4f} "
          f"accuracy {final.accuracy:.4f}")
    print(f"metrics: {out_dir / 'metrics.tsv'}")
    print(f"checkpoint: {out_dir / 'model.ckpt'}")
    return 0


def _eval_split(cfg: RunConfig, name: str) -> DatasetSplit:
    aliases = {"mnist-train": "train", "mnist-test": "test",
               "synth-train": "train", "synth-test": "test"}
    name = aliases.get(name, name)
    if name not in ("train", "test"):
        raise CliError(f"unknown split {name!r}; use train or test")
    train_split, test_split = _load_splits(cfg)
    if name == "train":
        return train_split
    if test_split is None:
        raise CliError("this data source has no test split")
    return test_split


def cmd_eval(args) -> int:
    if _maybe_print_defaults(args):
        return 0
    cfg = _config_from_args(args)
    split = _eval_split(cfg, args.split)
    model = _build_model(cfg)
    load_checkpoint(args.checkpoint, model)
    metrics = evaluate(model, split, cfg["optimizer.batch_size"])
    print(f"split\t{args.split}")
    print(f"samples\t{metrics.samples}")
    print(f"loss\t{metrics.loss:.6f}")
    print(f"accuracy\t{metrics.accuracy:.6f}")
    return 0


def cmd_cost_report(args) -> int:
    spec = DenseBlockSpec(num_layers=args.L, growth_rate=args.k, in_channels=args.c0,
                          kernel=(args.kernel, args.kernel), combine_rule="sum")
    report = compare_blocks(spec, args.flavor, (args.height, args.width))
    print(format_report(report))
    print()
    for row in report_rows(report):
        print(row)
    return 0


def cmd_gradcheck(args) -> int:
    import drnkit.tensor as tensor_mod

    tensor_mod.FINITE_CHECKS = True
    failures = 0
    for name, report in standard_suite(seed=args.seed):
        status = "PASS" if report.passed else "FAIL"
        print(f"{status}  {name:<28} max rel err {report.max_error:.3e} (tol {report.tol:g})")
        failures += 0 if report.passed else 1
    if failures:
        print(f"{failures} check(s) failed")
        return 1
    print("all gradient checks passed")
    return 0


def cmd_ctc_oracle(args) -> int:
    worst, run = oracle_suite(cases=args.cases, seed=args.seed)
    print(f"{run} randomized instances, worst |exp(-loss) - brute| = {worst:.3e}")
    print("ctc oracle equivalence holds")
    return 0


def cmd_decode(args) -> int:
    if _maybe_print_defaults(args):
        return 0
    cfg = _config_from_args(args)
    if cfg["model.head"] != "sequence":
        raise CliError("decode needs a sequence-head model config")
    model = _build_model(cfg)
    load_checkpoint(args.checkpoint, model)
    model.eval()
    alphabet = AlphabetSpec(cfg["model.alphabet"])
    image = read_tensor(args.image)
    if image.ndim == 3:
        image = image[None]
    logits = model(Tensor(image)).data
    for row in logits:
        print(alphabet.decode(ctc_greedy_decode(row)))
    return 0


def cmd_export_features(args) -> int:
    if _maybe_print_defaults(args):
        return 0
    cfg = _config_from_args(args)
    model = _build_model(cfg)
    load_checkpoint(args.checkpoint, model)
    split = _eval_split(cfg, args.split)
    rows = []
    for start in range(0, len(split), 256):
        batch = split.images[start : start + 256]
        feats = model.forward_features(Tensor(batch), args.layer)
        rows.extend("\t".join(f"{v:.9g}" for v in row) for row in feats)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text("\n".join(rows) + "\n")
    print(f"wrote {len(rows)} rows of length {len(rows[0].split(chr(9)))} to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="drnkit",
        description="dense residual network kit: train, evaluate, and audit",
    )
    subs = parser.add_subparsers(dest="command", required=True)
    epilog = "config keys and defaults:\n" + RunConfig.describe_defaults()
    fmt = argparse.RawDescriptionHelpFormatter

    p = subs.add_parser("train", help="train per config (MNIST or synthetic strings)",
                        epilog=epilog, formatter_class=fmt)
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = subs.add_parser("eval", help="evaluate a checkpoint on a split",
                        epilog=epilog, formatter_class=fmt)
    _add_config_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test", help="train, test, or mnist-/synth- aliases")
    p.set_defaults(func=cmd_eval)

    p = subs.add_parser("cost-report", help="parameter/MAC comparison of dense vs refined blocks",
                        epilog=epilog, formatter_class=fmt)
    p.add_argument("--L", type=int, default=4, help="inner layers per block")
    p.add_argument("--k", type=int, default=12, help="growth rate")
    p.add_argument("--c0", type=int, default=24, help="block input channels")
    p.add_argument("--kernel", type=int, default=3, help="inner kernel size")
    p.add_argument("--flavor", default="standard",
                   choices=("standard", "depthwise_separable"))
    p.add_argument("--height", type=int, default=1, help="output height for MAC counts")
    p.add_argument("--width", type=int, default=1, help="output width for MAC counts")
    p.set_defaults(func=cmd_cost_report)

    p = subs.add_parser("gradcheck", help="finite-difference suite over primitives and blocks",
                        epilog=epilog, formatter_class=fmt)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = subs.add_parser("ctc-oracle", help="CTC recursion vs brute-force path enumeration",
                        epilog=epilog, formatter_class=fmt)
    p.add_argument("--cases", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_ctc_oracle)

    p = subs.add_parser("decode", help="greedy-decode a string image with a checkpoint",
                        epilog=epilog, formatter_class=fmt)
    _add_config_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True, help="tensor container file (.ten)")
    p.set_defaults(func=cmd_decode)

    p = subs.add_parser("export-features", help="dump per-sample feature rows as TSV",
                        epilog=epilog, formatter_class=fmt)
    _add_config_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--layer", default="penultimate",
                   help="shallow, gdb, downsample, penultimate, or logits")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_features)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # one-line, machine-parsable failure
        print(f"drnkit: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
