"""Command-line pipeline: synth | train | transform | eval | tsm.

Every command writes a ``run_manifest.json`` next to its outputs holding the
fully resolved configuration, seed, paths, and tool version; re-running with
``--manifest`` reproduces the outputs bit-exactly.  The SOLA_THREADS
environment variable caps worker parallelism (0 = auto).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np

from . import __version__
from .errors import ConfigError, FormatError, IoError, SolaError
from .feature_store import (
    SyntheticSpec,
    generate_synthetic,
    load_corpus,
    read_labels_csv,
    sample_window,
    save_array_file,
    write_labels_csv,
    write_manifest,
)
from .ioutil import atomic_write_text, worker_count
from .model import ModelConfig, sola_forward
from .similarity import MatchConfig, build_target_tsm, gather, predicted_tsm
from .trainer import (
    TrainConfig,
    load_checkpoint,
    run_small_gradient_check,
    save_checkpoint,
    train,
    write_history_csv,
)
from .evaluation import (
    average_tsm,
    corpus_sensitivity,
    export_decay_csv,
    export_heatmap,
    export_probe_csv,
    linear_probe,
    similarity_decay,
    stack_labeled_rows,
    transform,
)

MANIFEST_FILENAME = "run_manifest.json"
GRAD_CHECK_TOLERANCE = 1e-4


@dataclass
class RunManifest:
    command: str
    tool_version: str
    seed: int | None
    config: dict
    inputs: dict
    outputs: dict

    def dump(self, path: str) -> None:
        atomic_write_text(path, json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str) -> "RunManifest":
        try:
            with open(path, encoding="utf-8") as fh:
                raw = json.load(fh)
        except OSError as exc:
            raise IoError(f"cannot read manifest {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: not valid JSON ({exc})") from exc
        try:
            return cls(command=raw["command"], tool_version=raw["tool_version"],
                       seed=raw["seed"], config=raw["config"], inputs=raw["inputs"],
                       outputs=raw["outputs"])
        except KeyError as exc:
            raise FormatError(f"{path}: manifest missing key {exc}") from exc


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be a positive integer, got {value}")
    return value


def _nonnegative_float(text: str) -> float:
    value = float(text)
    if value < 0:
        raise argparse.ArgumentTypeError(f"must be nonnegative, got {value}")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sola",
        description="Train and evaluate a temporal feature-refinement module "
                    "with the similarity-matching objective.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    fmt = argparse.ArgumentDefaultsHelpFormatter

    def common(p):
        p.add_argument("--out", help="output directory")
        p.add_argument("--manifest", help="re-run from a previously written run manifest")
        p.add_argument("--seed", type=int, default=0, help="root random seed")
        p.set_defaults(_parser=p)

    p = sub.add_parser("synth", formatter_class=fmt, help="generate a synthetic labeled corpus")
    p.add_argument("--videos", type=_positive_int, default=10)
    p.add_argument("--length", type=_positive_int, default=128, help="snippets per video")
    p.add_argument("--dim", type=_positive_int, default=32, help="feature dimension")
    p.add_argument("--segments", type=_positive_int, default=4)
    p.add_argument("--min-seg-len", type=_positive_int, default=8)
    p.add_argument("--video-weight", type=_nonnegative_float, default=1.0)
    p.add_argument("--segment-weight", type=_nonnegative_float, default=0.5)
    p.add_argument("--noise-weight", type=_nonnegative_float, default=0.2)
    p.add_argument("--background-fraction", type=_nonnegative_float, default=0.5)
    p.add_argument("--alpha", type=_positive_int, default=1, help="frames per snippet (metadata)")
    common(p)

    p = sub.add_parser("train", formatter_class=fmt, help="train the refinement module")
    p.add_argument("--data", help="corpus directory of .npy files")
    p.add_argument("--kernel", type=int, choices=(1, 3, 5, 7), default=5)
    p.add_argument("--hidden", type=_positive_int, default=None,
                   help="conv hidden width (default: feature dim)")
    p.add_argument("--residual", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--K", type=float, default=16.0, help="target-similarity constant")
    p.add_argument("--step", type=_positive_int, default=2, help="gather step size")
    p.add_argument("--gather", choices=("mean", "stride"), default="mean")
    p.add_argument("--window", type=_positive_int, default=64, help="training window length")
    p.add_argument("--batch", type=_positive_int, default=256)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--beta1", type=float, default=0.9)
    p.add_argument("--beta2", type=float, default=0.999)
    p.add_argument("--adam-eps", type=float, default=1e-8)
    p.add_argument("--stop-gradient", action=argparse.BooleanOptionalAction, default=True,
                   help="treat the un-projected branch as constant in the backward pass")
    p.add_argument("--grad-check", action="store_true",
                   help="verify gradients against finite differences before training")
    common(p)

    p = sub.add_parser("transform", formatter_class=fmt,
                       help="refine a corpus with a trained checkpoint")
    p.add_argument("--data", help="corpus directory")
    p.add_argument("--checkpoint", help="checkpoint path")
    common(p)

    p = sub.add_parser("eval", formatter_class=fmt,
                       help="sensitivity, decay, and probe metrics before/after refinement")
    p.add_argument("--data", help="corpus directory")
    p.add_argument("--checkpoint", help="checkpoint path")
    p.add_argument("--labels", help="labels CSV (default: <data>/labels.csv)")
    p.add_argument("--probe-epochs", type=_positive_int, default=100)
    p.add_argument("--probe-lr", type=float, default=0.1)
    p.add_argument("--probe-test-fraction", type=float, default=0.3)
    p.add_argument("--d-max", type=_positive_int, default=16)
    p.add_argument("--decay-window", type=_positive_int, default=64)
    p.add_argument("--samples-per-video", type=_positive_int, default=4)
    common(p)

    p = sub.add_parser("tsm", formatter_class=fmt, help="render TSM heatmaps (CSV + PGM)")
    p.add_argument("--target", action="store_true", help="render the analytic target TSM")
    p.add_argument("--average", action="store_true", help="render a corpus-average TSM")
    p.add_argument("--predicted", action="store_true",
                   help="render one window's asymmetric predicted TSM")
    p.add_argument("--n", type=_positive_int, default=32, help="target TSM side length")
    p.add_argument("--step", type=_positive_int, default=2)
    p.add_argument("--K", type=float, default=16.0)
    p.add_argument("--data", help="corpus directory (average/predicted)")
    p.add_argument("--checkpoint", help="checkpoint (average: optional, predicted: required)")
    p.add_argument("--window", type=_positive_int, default=64)
    p.add_argument("--samples", type=_positive_int, default=4, help="windows per video")
    common(p)

    return parser


def _prepare(args, required_inputs: tuple[str, ...] = ()):
    """Resolve config source (flags or manifest) and the output directory."""
    if args.manifest:
        manifest = RunManifest.load(args.manifest)
        if manifest.command != args.command:
            raise ConfigError(
                f"manifest was written by {manifest.command!r}, not {args.command!r}"
            )
        out = args.out or manifest.outputs.get("out")
        config, inputs, seed = dict(manifest.config), dict(manifest.inputs), manifest.seed
    else:
        config, inputs, seed, out = None, None, args.seed, args.out
    if not out:
        args._parser.error("--out is required")
    for name in required_inputs:
        value = inputs.get(name) if inputs is not None else getattr(args, name)
        if not value:
            args._parser.error(f"--{name} is required")
    os.makedirs(out, exist_ok=True)
    return config, inputs, seed, out


def _finish(command: str, out: str, seed, config: dict, inputs: dict) -> int:
    RunManifest(command=command, tool_version=__version__, seed=seed, config=config,
                inputs=inputs, outputs={"out": out}).dump(os.path.join(out, MANIFEST_FILENAME))
    return 0


def _map_ordered(fn, items):
    """Apply fn over items, optionally on a thread pool; results keep order."""
    workers = worker_count()
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _cmd_synth(args) -> int:
    config, _, seed, out = _prepare(args)
    if config is None:
        config = {
            "videos": args.videos, "length": args.length, "dim": args.dim,
            "segments": args.segments, "min_seg_len": args.min_seg_len,
            "video_weight": args.video_weight, "segment_weight": args.segment_weight,
            "noise_weight": args.noise_weight,
            "background_fraction": args.background_fraction, "alpha": args.alpha,
        }
    spec = SyntheticSpec(
        length_L=config["length"], dim_m=config["dim"], n_segments=config["segments"],
        min_seg_len=config["min_seg_len"], video_weight_c=config["video_weight"],
        segment_weight_a=config["segment_weight"], noise_weight_b=config["noise_weight"],
        background_fraction=config["background_fraction"],
    )
    labels = {}
    entries = []
    for i in range(config["videos"]):
        video_id = f"video_{i:04d}"
        seq, lab = generate_synthetic(spec, seed=[seed, i], video_id=video_id)
        seq.snippet_stride_alpha = config["alpha"]
        save_array_file(seq, os.path.join(out, video_id + ".npy"))
        labels[video_id] = lab
        entries.append((video_id + ".npy", config["alpha"]))
    write_manifest(out, entries)
    write_labels_csv(os.path.join(out, "labels.csv"), labels)
    return _finish("synth", out, seed, config, {})


def _cmd_train(args) -> int:
    config, inputs, seed, out = _prepare(args, required_inputs=("data",))
    if config is None:
        config = {
            "kernel": args.kernel, "hidden": args.hidden, "residual": args.residual,
            "K": args.K, "step": args.step, "gather": args.gather, "window": args.window,
            "batch": args.batch, "epochs": args.epochs, "lr": args.lr,
            "beta1": args.beta1, "beta2": args.beta2, "adam_eps": args.adam_eps,
            "stop_gradient": args.stop_gradient, "grad_check": args.grad_check,
        }
        inputs = {"data": args.data}
    corpus = load_corpus(inputs["data"])
    dims = {seq.dim for seq in corpus}
    if len(dims) > 1:
        raise ConfigError(f"corpus mixes feature dims {sorted(dims)}")
    model_cfg = ModelConfig(dim_m=corpus[0].dim, hidden_h=config["hidden"],
                            kernel_k=config["kernel"], residual_enabled=config["residual"])
    match_cfg = MatchConfig(K=config["K"], step_s=config["step"], gather_mode=config["gather"])
    train_cfg = TrainConfig(
        model=model_cfg, match=match_cfg, window_len=config["window"],
        batch_size=config["batch"], epochs=config["epochs"], learning_rate=config["lr"],
        adam_beta1=config["beta1"], adam_beta2=config["beta2"], adam_eps=config["adam_eps"],
        stop_gradient_plain_branch=config["stop_gradient"], seed=seed,
    )
    if config["grad_check"]:
        for stop in (config["stop_gradient"],):
            err = run_small_gradient_check(config["kernel"], stop, config["gather"], seed=seed)
            if not err < GRAD_CHECK_TOLERANCE:
                print(f"sola train: gradient check FAILED: max relative error {err:.3e} "
                      f">= {GRAD_CHECK_TOLERANCE}", file=sys.stderr)
                return 1
            print(f"gradient check passed: max relative error {err:.3e}")
    params, history = train(corpus, train_cfg)
    save_checkpoint(params, model_cfg, os.path.join(out, "sola.ckpt"))
    write_history_csv(history, os.path.join(out, "history.csv"))
    return _finish("train", out, seed, config, inputs)


def _cmd_transform(args) -> int:
    config, inputs, seed, out = _prepare(args, required_inputs=("data", "checkpoint"))
    if config is None:
        config = {}
        inputs = {"data": args.data, "checkpoint": args.checkpoint}
    corpus = load_corpus(inputs["data"])
    params, _ = load_checkpoint(inputs["checkpoint"])
    refined = _map_ordered(lambda seq: transform(params, seq), corpus)
    entries = []
    for seq in refined:
        save_array_file(seq, os.path.join(out, seq.video_id + ".npy"))
        entries.append((seq.video_id + ".npy", seq.snippet_stride_alpha))
    write_manifest(out, entries)
    return _finish("transform", out, seed, config, inputs)


def _cmd_eval(args) -> int:
    config, inputs, seed, out = _prepare(args, required_inputs=("data", "checkpoint"))
    if config is None:
        config = {
            "probe_epochs": args.probe_epochs, "probe_lr": args.probe_lr,
            "probe_test_fraction": args.probe_test_fraction, "d_max": args.d_max,
            "decay_window": args.decay_window, "samples_per_video": args.samples_per_video,
        }
        inputs = {"data": args.data, "checkpoint": args.checkpoint,
                  "labels": args.labels or os.path.join(args.data, "labels.csv")}
    corpus = load_corpus(inputs["data"])
    params, _ = load_checkpoint(inputs["checkpoint"])
    labels = read_labels_csv(inputs["labels"])
    refined = _map_ordered(lambda seq: transform(params, seq), corpus)

    sens_before = corpus_sensitivity(corpus)
    sens_after = corpus_sensitivity(refined)

    decay_before = similarity_decay(corpus, config["d_max"], config["decay_window"],
                                    config["samples_per_video"], [seed, 3])
    decay_after = similarity_decay(refined, config["d_max"], config["decay_window"],
                                   config["samples_per_video"], [seed, 3])
    export_decay_csv(decay_before, os.path.join(out, "decay_original.csv"))
    export_decay_csv(decay_after, os.path.join(out, "decay_transformed.csv"))

    feats_before, y = stack_labeled_rows(corpus, labels)
    feats_after, _ = stack_labeled_rows(refined, labels)
    rng = np.random.default_rng([seed, 4])
    perm = rng.permutation(y.size)
    n_test = min(y.size - 1, max(1, int(round(config["probe_test_fraction"] * y.size))))
    test_idx, train_idx = perm[:n_test], perm[n_test:]
    probe_before = linear_probe(feats_before[train_idx], y[train_idx],
                                feats_before[test_idx], y[test_idx],
                                epochs=config["probe_epochs"], lr=config["probe_lr"], seed=seed)
    probe_after = linear_probe(feats_after[train_idx], y[train_idx],
                               feats_after[test_idx], y[test_idx],
                               epochs=config["probe_epochs"], lr=config["probe_lr"], seed=seed)
    export_probe_csv(probe_before, os.path.join(out, "probe_original.csv"))
    export_probe_csv(probe_after, os.path.join(out, "probe_transformed.csv"))

    lines = [
        "metric,original,transformed",
        f"corpus_sensitivity,{sens_before:.9g},{sens_after:.9g}",
        f"probe_train_accuracy,{probe_before.train_accuracy:.9g},{probe_after.train_accuracy:.9g}",
        f"probe_test_accuracy,{probe_before.test_accuracy:.9g},{probe_after.test_accuracy:.9g}",
    ]
    atomic_write_text(os.path.join(out, "metrics.csv"), "\n".join(lines) + "\n")
    return _finish("eval", out, seed, config, inputs)


def _cmd_tsm(args) -> int:
    if args.manifest is None:
        modes = [name for name in ("target", "average", "predicted") if getattr(args, name)]
        if len(modes) != 1:
            args._parser.error("choose exactly one of --target, --average, --predicted")
        if modes[0] == "target" and (args.checkpoint or args.data):
            args._parser.error("--target conflicts with --checkpoint/--data")
        if modes[0] == "predicted" and not args.checkpoint:
            args._parser.error("--predicted requires --checkpoint")
    config, inputs, seed, out = _prepare(args)
    if config is None:
        config = {"mode": modes[0], "n": args.n, "step": args.step, "K": args.K,
                  "window": args.window, "samples": args.samples}
        inputs = {k: v for k, v in (("data", args.data), ("checkpoint", args.checkpoint)) if v}
    mode = config["mode"]

    if mode == "target":
        tsm = build_target_tsm(config["n"], MatchConfig(K=config["K"], step_s=config["step"]))
    else:
        if "data" not in inputs:
            args._parser.error(f"--{mode} requires --data")
        corpus = load_corpus(inputs["data"])
        params = None
        if "checkpoint" in inputs:
            params, _ = load_checkpoint(inputs["checkpoint"])
        if mode == "average":
            if params is not None:
                corpus = _map_ordered(lambda seq: transform(params, seq), corpus)
            tsm = average_tsm(corpus, config["window"], config["samples"], [seed, 5])
        else:
            rng = np.random.default_rng([seed, 6])
            eligible = [seq for seq in corpus if seq.length >= config["window"]]
            if not eligible:
                raise ConfigError(f"no video is at least {config['window']} snippets long")
            seq = eligible[int(rng.integers(0, len(eligible)))]
            window = sample_window(seq, config["window"], rng)
            gathered = gather(sola_forward(params, window.data), config["step"])
            tsm = predicted_tsm(gathered, params)
    export_heatmap(tsm, os.path.join(out, mode + ".csv"), "csv")
    export_heatmap(tsm, os.path.join(out, mode + ".pgm"), "pgm")
    return _finish("tsm", out, seed, config, inputs)


_HANDLERS = {
    "synth": _cmd_synth,
    "train": _cmd_train,
    "transform": _cmd_transform,
    "eval": _cmd_eval,
    "tsm": _cmd_tsm,
}


def _check_manifest_argv(argv: list[str], parser: argparse.ArgumentParser) -> None:
    allowed = {"--manifest", "--out"}
    flags = {tok.split("=", 1)[0] for tok in argv if tok.startswith("--")}
    extra = flags - allowed
    if extra:
        parser.error(f"--manifest cannot be combined with {sorted(extra)}; "
                     "the manifest already fixes the configuration")


def main(argv=None) -> int:
    argv = list(sys.argv[1:]) if argv is None else list(argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "manifest", None):
        _check_manifest_argv(argv[1:], parser)
    try:
        return _HANDLERS[args.command](args)
    except SolaError as exc:
        print(f"sola {args.command}: error: {exc}", file=sys.stderr)
        return 1


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
