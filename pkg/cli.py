#!/usr/bin/env python3
"""
Command-line entry point for the tensegrity contact estimation toolkit.

Every subcommand writes a JSON run manifest next to its outputs; passing that
manifest back with --manifest replays the run with the same arguments.
"""

import os
import sys
import json
import time
import logging
import argparse
from itertools import product
from typing import Any, Dict, List, Optional

import numpy as np
import pandas as pd

from config import (TOOLKIT_VERSION, apply_overrides, config_to_dict, get_log_level, get_out_dir,
                    load_override_file, split_overrides)
from errors import ConfigInvalid, ClosureViolation, FormatError, TensegrityError, TensegrityIOError
from geometry import build_canonical_topology, build_d3_group, canonical_group
from graphdata import (GROUP_MODES, IMU_CHANNELS, N_ENDCAPS, N_RODS, N_TENDONS, WindowBatch, WindowDataset,
                       assemble_graph, read_contact_predictions, read_dataset, write_trajectory)
from autodiff import finite_difference_check
from hgnn import bce_with_logits, init_params, model_forward
from training import (TrainConfig, ablate, augment_with_group, evaluate, evaluate_by_source, load_checkpoint,
                      predict_sequence, save_checkpoint, split_dataset, subsample, train)
from simkit import PRIMITIVES, SimConfig, ground_truth_path, generate_suite, primitive_suite, turning_suite
from inekf import FilterNoise, load_ground_truth, run_estimator
from visualization import TensegrityVisualization

logger = logging.getLogger(__name__)

MANIFEST_SUFFIX = "_manifest.json"
GRAD_CHECK_TOLERANCE = 1e-4
# Argument names that never go into a manifest
UNRECORDED = ("func", "manifest")


class RunManifest:
    """What was run, with which resolved configuration, producing which files"""

    def __init__(self, subcommand: str, arguments: Dict[str, Any]):
        self.subcommand = subcommand
        self.arguments = arguments
        self.config: Dict[str, Any] = {}
        self.inputs: List[str] = []
        self.outputs: List[str] = []
        self.timings: Dict[str, float] = {}
        self._started = time.perf_counter()

    def to_dict(self) -> Dict[str, Any]:
        return {
            "subcommand": self.subcommand,
            "toolkit_version": TOOLKIT_VERSION,
            "seed": self.arguments.get("seed"),
            "arguments": self.arguments,
            "config": self.config,
            "inputs": self.inputs,
            "outputs": self.outputs,
            "timings": self.timings,
        }

    def write(self, out_dir: str) -> str:
        self.timings["total_seconds"] = round(time.perf_counter() - self._started, 3)
        path = os.path.join(out_dir, f"{self.subcommand}{MANIFEST_SUFFIX}")
        try:
            with open(path, "w") as fh:
                json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
                fh.write("\n")
        except OSError as e:
            raise TensegrityIOError(f"cannot write manifest {path}: {e}")
        logger.info(f"Wrote run manifest {path}")
        return path

    @staticmethod
    def load(path: str) -> Dict[str, Any]:
        try:
            with open(path) as fh:
                data = json.load(fh)
        except OSError as e:
            raise TensegrityIOError(f"cannot read manifest {path}: {e}")
        except json.JSONDecodeError as e:
            raise FormatError(f"{path}: not a JSON manifest ({e})")
        if "subcommand" not in data or "arguments" not in data:
            raise FormatError(f"{path}: manifest lacks subcommand or arguments")
        return data


def _out_path(args, name: str) -> str:
    return os.path.join(args.out_dir, name)


def _file_overrides(args, *config_types: type) -> List[Dict[str, Any]]:
    """Split a --config file between the given dataclasses; unknown keys are an error"""
    if not args.config:
        return [{} for _ in config_types]
    overrides = load_override_file(args.config)
    parts = [split_overrides(overrides, config_type) for config_type in config_types]
    known = set().union(*parts)
    unknown = sorted(set(overrides) - known)
    if unknown:
        raise ConfigInvalid(f"unknown key(s) in {args.config}: {', '.join(unknown)}")
    return parts


def _resolve(config_type: type, file_overrides: Dict[str, Any], flags: Dict[str, Any]):
    """Defaults, then the config file, then explicit flags"""
    resolved = apply_overrides(config_type(), file_overrides)
    return apply_overrides(resolved, {key: value for key, value in flags.items() if value is not None})


def _read_sequences(paths: List[str], manifest: RunManifest):
    manifest.inputs.extend(paths)
    return [read_dataset(path) for path in paths]


def _train_flags(args) -> Dict[str, Any]:
    return {
        "learning_rate": args.lr, "batch_size": args.batch_size, "epochs": args.epochs,
        "layers": args.layers, "hidden": args.hidden, "history_length": args.history,
        "seed": args.seed, "symmetry_enabled": args.symmetry_enabled, "group_mode": args.group_mode,
        "stride": args.stride, "augment_group": args.augment_group, "val_fraction": args.val_fraction,
        "max_samples": args.max_samples, "precision": args.precision, "threshold": args.threshold,
    }


def cmd_gen_data(args, manifest: RunManifest) -> Dict[str, Any]:
    [sim_overrides] = _file_overrides(args, SimConfig)
    base = _resolve(SimConfig, sim_overrides, {
        "primitive": args.primitive, "turning_ratio": args.ratio, "duration": args.duration,
        "sample_rate": args.rate, "noise_accel": args.noise_accel, "noise_gyro": args.noise_gyro,
        "noise_tendon": args.noise_tendon, "seed": args.seed, "history_length": args.history,
    })
    if args.suite == "primitives":
        configs = primitive_suite(base)
    elif args.suite == "turning":
        configs = turning_suite(base)
    else:
        configs = [base]
    manifest.config = config_to_dict(base)

    written = generate_suite(configs, args.out_dir)
    for path in written.values():
        manifest.outputs.extend([path, ground_truth_path(path)])
    return {"datasets": written}


def cmd_train(args, manifest: RunManifest) -> Dict[str, Any]:
    [train_overrides] = _file_overrides(args, TrainConfig)
    config = _resolve(TrainConfig, train_overrides, _train_flags(args))
    manifest.config = config_to_dict(config)

    windows = WindowDataset(_read_sequences(args.data, manifest), config.history_length, config.stride,
                            group_mode=config.group_mode)
    windows = subsample(windows, config.max_samples, config.seed)
    if args.val_data:
        train_set = windows
        val_set = WindowDataset(_read_sequences(args.val_data, manifest), config.history_length,
                                config.stride, group_mode=config.group_mode)
    else:
        train_set, val_set = split_dataset(windows, 1.0 - config.val_fraction, config.seed)
    if config.augment_group:
        train_set = augment_with_group(train_set, canonical_group(), config.group_mode)
    logger.info(f"Training on {len(train_set)} windows, validating on {len(val_set)}")

    history_path = _out_path(args, "history.csv")
    checkpoint_path = args.checkpoint or _out_path(args, "model.npz")
    started = time.perf_counter()
    params, history = train(train_set, val_set, config, history_path=history_path)
    manifest.timings["train_seconds"] = round(time.perf_counter() - started, 3)
    save_checkpoint(params, config, checkpoint_path)

    plots = TensegrityVisualization()
    figure = plots.plot_training_history(history, _out_path(args, "training_history.png"))
    manifest.outputs.extend([history_path, checkpoint_path, figure])

    summary = {"checkpoint": checkpoint_path, "epochs": len(history),
               "train_windows": len(train_set), "val_windows": len(val_set)}
    if len(val_set) > 0:
        metrics = evaluate(params, val_set, config.symmetry_enabled, batch_size=config.batch_size,
                           threshold=config.threshold)
        metrics_path = _out_path(args, "val_metrics.csv")
        metrics.to_frame().to_csv(metrics_path, index=False)
        manifest.outputs.extend([metrics_path, plots.plot_confusion(metrics, _out_path(args, "val_confusion.png"))])
        summary.update({"val_accuracy": metrics.exact_match_accuracy, "val_macro_f1": metrics.macro_f1})
    return summary


def _symmetry_for(args, config: TrainConfig) -> bool:
    return config.symmetry_enabled if args.symmetry_enabled is None else args.symmetry_enabled


def cmd_eval(args, manifest: RunManifest) -> Dict[str, Any]:
    params, config = load_checkpoint(args.checkpoint)
    manifest.inputs.append(args.checkpoint)
    symmetry = _symmetry_for(args, config)
    threshold = config.threshold if args.threshold is None else args.threshold
    manifest.config = dict(config_to_dict(config), symmetry_enabled=symmetry, threshold=threshold)

    dataset = WindowDataset(_read_sequences(args.data, manifest), params.L, 1, group_mode=params.group_mode)
    metrics = evaluate(params, dataset, symmetry, batch_size=config.batch_size, threshold=threshold)
    metrics_path = _out_path(args, "metrics.csv")
    metrics.to_frame().to_csv(metrics_path, index=False)
    figure = TensegrityVisualization().plot_confusion(metrics, _out_path(args, "confusion.png"))
    manifest.outputs.extend([metrics_path, figure])

    summary = {"accuracy": metrics.exact_match_accuracy, "macro_f1": metrics.macro_f1,
               "n_windows": metrics.n_windows}
    if args.by_source:
        breakdown = evaluate_by_source(params, dataset, symmetry, batch_size=config.batch_size,
                                       threshold=threshold)
        rows = [{"source": name, "accuracy": m.exact_match_accuracy, "macro_f1": m.macro_f1,
                 "n_windows": m.n_windows} for name, m in breakdown.items()]
        by_source_path = _out_path(args, "metrics_by_source.csv")
        pd.DataFrame(rows).to_csv(by_source_path, index=False)
        manifest.outputs.append(by_source_path)
        summary["by_source"] = {row["source"]: row["macro_f1"] for row in rows}
    return summary


def cmd_predict(args, manifest: RunManifest) -> Dict[str, Any]:
    params, config = load_checkpoint(args.checkpoint)
    manifest.inputs.append(args.checkpoint)
    symmetry = _symmetry_for(args, config)
    threshold = config.threshold if args.threshold is None else args.threshold
    manifest.config = dict(config_to_dict(config), symmetry_enabled=symmetry, threshold=threshold)

    [seq] = _read_sequences([args.data], manifest)
    frame = predict_sequence(params, seq, symmetry, threshold, batch_size=config.batch_size)
    out = args.out or _out_path(args, f"{seq.name}_contacts.csv")
    try:
        frame.to_csv(out, index=False)
    except OSError as e:
        raise TensegrityIOError(f"cannot write {out}: {e}")
    manifest.outputs.append(out)
    return {"predictions": out, "rows": len(frame), "warmup_rows": int(frame["warmup"].sum())}


def _contact_stream(spec: str, seq, manifest: RunManifest) -> np.ndarray:
    if spec == "truth":
        if seq.contacts is None:
            raise FormatError(f"'{seq.name}' has no contact columns to use as ground truth")
        return seq.contacts
    if spec == "none":
        return np.zeros((len(seq), N_ENDCAPS), dtype=np.int8)
    manifest.inputs.append(spec)
    return read_contact_predictions(spec)


def cmd_estimate(args, manifest: RunManifest) -> Dict[str, Any]:
    [noise_overrides] = _file_overrides(args, FilterNoise)
    noise = _resolve(FilterNoise, noise_overrides, {})
    manifest.config = config_to_dict(noise)

    [seq] = _read_sequences([args.data], manifest)
    contacts = _contact_stream(args.contacts, seq, manifest)

    truth_path = args.ground_truth
    if truth_path is None and os.path.exists(ground_truth_path(args.data)):
        truth_path = ground_truth_path(args.data)
    truth = None
    if truth_path:
        manifest.inputs.append(truth_path)
        truth = load_ground_truth(truth_path)

    run = run_estimator(seq, contacts, noise, ground_truth=truth)
    out = args.out or _out_path(args, f"{seq.name}_estimate.csv")
    write_trajectory(out, run.time, run.positions, run.quaternions_wxyz, run.velocities)
    figure = TensegrityVisualization().plot_trajectory(
        run.positions, None if truth is None else truth.positions,
        os.path.splitext(out)[0] + ".png", title=f"{seq.name} (contacts: {os.path.basename(args.contacts)})")
    manifest.outputs.extend([out, figure])

    return {"trajectory": out, "final_position": run.positions[-1].tolist(),
            "final_quaternion_wxyz": run.quaternions_wxyz[-1].tolist(),
            "drift_percent": run.drift_percent,
            "max_orthonormality_error": run.max_orthonormality_error}


def cmd_group_check(args, manifest: RunManifest) -> Dict[str, Any]:
    topology = build_canonical_topology()
    group = build_d3_group(topology)
    failures = group.check_axioms()
    if failures:
        raise ClosureViolation("; ".join(failures))

    labels = [g.label for g in group]
    table = pd.DataFrame(group.composition_table(), index=labels, columns=labels)
    print(table.to_string(), file=sys.stderr)
    if args.plot:
        figure = TensegrityVisualization().plot_graph(assemble_graph(topology).nx_graph,
                                                      _out_path(args, "graph.png"))
        manifest.outputs.append(figure)
    return {
        "axioms": "ok",
        "composition_table": group.composition_table(),
        "elements": {g.label: {"endcap_perm": list(g.endcap_perm), "rod_perm": list(g.rod_perm),
                               "tendon_perm": list(g.tendon_perm)} for g in group},
    }


def _grad_check_batch(args, manifest: RunManifest, rng: np.random.Generator) -> WindowBatch:
    if args.data:
        dataset = WindowDataset(_read_sequences(args.data, manifest), args.history, 1, group_mode=args.group_mode)
        if not dataset.labeled or len(dataset) == 0:
            raise FormatError("grad-check needs labeled sequences at least one window long")
        chosen = rng.choice(len(dataset), size=min(args.batch, len(dataset)), replace=False)
        return dataset.materialize(np.sort(chosen))

    n = args.batch
    return WindowBatch(
        rod_features=rng.normal(size=(n, N_RODS, args.history, IMU_CHANNELS)),
        tendon_features=rng.normal(size=(n, N_TENDONS, args.history, 1)),
        labels=rng.integers(0, 2, size=(n, N_ENDCAPS)).astype(np.int8),
        window_end_index=np.arange(n),
        sequence_index=np.zeros(n, dtype=np.int64),
    )


def cmd_grad_check(args, manifest: RunManifest) -> Dict[str, Any]:
    init_rng, batch_rng, entry_rng = [np.random.default_rng(s)
                                      for s in np.random.SeedSequence(args.seed or 0).spawn(3)]
    params = init_params(args.layers, args.hidden, args.history, seed=init_rng, group_mode=args.group_mode)
    batch = _grad_check_batch(args, manifest, batch_rng)
    graph = assemble_graph(build_canonical_topology())
    group = None if args.symmetry_enabled is False else canonical_group()
    labels = batch.labels.astype(np.float64)

    def loss(_):
        return bce_with_logits(model_forward(batch, graph, params, group), labels)

    worst = finite_difference_check(loss, params.parameters(), max_entries=args.entries, rng=entry_rng)
    manifest.config = {"layers": args.layers, "hidden": args.hidden, "history_length": args.history,
                       "batch": len(batch), "symmetry_enabled": group is not None,
                       "group_mode": args.group_mode, "tolerance": args.tolerance}
    return {"max_relative_error": worst, "tolerance": args.tolerance, "passed": bool(worst < args.tolerance)}


def cmd_ablate(args, manifest: RunManifest) -> Dict[str, Any]:
    [train_overrides] = _file_overrides(args, TrainConfig)
    config = _resolve(TrainConfig, train_overrides, _train_flags(args))
    manifest.config = config_to_dict(config)
    grid = list(product(_int_list(args.layers_grid), _int_list(args.history_grid)))

    table = ablate(_read_sequences(args.train_data, manifest), _read_sequences(args.test_data, manifest),
                   grid, config)
    out = _out_path(args, "ablation.csv")
    table.to_csv(out, index=False)
    manifest.outputs.append(out)
    return {"ablation": out, "settings": len(table)}


def _int_list(text: str) -> List[int]:
    try:
        return [int(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise ConfigInvalid(f"expected a comma-separated list of integers, got '{text}'")


def _add_train_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--lr", type=float, help="Adam learning rate")
    parser.add_argument("--batch-size", type=int)
    parser.add_argument("--epochs", type=int)
    parser.add_argument("--layers", type=int, help="message-passing layers K")
    parser.add_argument("--hidden", type=int, help="hidden width H")
    parser.add_argument("--history", type=int, help="window length L")
    parser.add_argument("--no-symmetry", dest="symmetry_enabled", action="store_const", const=False,
                        help="plain HGNN without group averaging")
    parser.add_argument("--group-mode", choices=GROUP_MODES)
    parser.add_argument("--stride", type=int)
    parser.add_argument("--augment-group", action="store_const", const=True,
                        help="expand the training windows by all six group actions")
    parser.add_argument("--val-fraction", type=float)
    parser.add_argument("--max-samples", type=int, help="data budget in windows")
    parser.add_argument("--precision", choices=("float64", "float32"))
    parser.add_argument("--threshold", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tensegrity",
                                     description="Symmetry-aware contact estimation for a 3-bar tensegrity")
    parser.add_argument("--seed", type=int, help="root seed for every random draw")
    parser.add_argument("--out-dir", help="output directory (default: $TENSEGRITY_OUT_DIR or ./out)")
    parser.add_argument("--config", help="key=value override file")
    parser.add_argument("--log-level", help="DEBUG, INFO, WARNING or ERROR")
    parser.add_argument("--manifest", help="replay the run recorded in a manifest")
    sub = parser.add_subparsers(dest="subcommand")

    gen = sub.add_parser("gen-data", help="simulate labeled sensor sequences")
    gen.add_argument("--primitive", choices=PRIMITIVES)
    gen.add_argument("--ratio", type=float, help="turning ratio in (0, 1]")
    gen.add_argument("--duration", type=float, help="seconds")
    gen.add_argument("--rate", type=float, help="sample rate in Hz")
    gen.add_argument("--noise-accel", type=float)
    gen.add_argument("--noise-gyro", type=float)
    gen.add_argument("--noise-tendon", type=float)
    gen.add_argument("--history", type=int, help="window length to warn against")
    gen.add_argument("--suite", choices=("primitives", "turning"))
    gen.set_defaults(func=cmd_gen_data)

    tr = sub.add_parser("train", help="train a contact model")
    tr.add_argument("--data", nargs="+", required=True)
    tr.add_argument("--val-data", nargs="+")
    tr.add_argument("--checkpoint", help="checkpoint output path")
    _add_train_flags(tr)
    tr.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", help="score a checkpoint on labeled sequences")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--data", nargs="+", required=True)
    ev.add_argument("--by-source", action="store_true")
    ev.add_argument("--no-symmetry", dest="symmetry_enabled", action="store_const", const=False)
    ev.add_argument("--threshold", type=float)
    ev.set_defaults(func=cmd_eval)

    pr = sub.add_parser("predict", help="per-row contact predictions")
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--data", required=True)
    pr.add_argument("--out")
    pr.add_argument("--no-symmetry", dest="symmetry_enabled", action="store_const", const=False)
    pr.add_argument("--threshold", type=float)
    pr.set_defaults(func=cmd_predict)

    es = sub.add_parser("estimate", help="contact-aided InEKF body state estimation")
    es.add_argument("--data", required=True)
    es.add_argument("--contacts", default="truth", help="'truth', 'none' or a predictions CSV")
    es.add_argument("--ground-truth", help="trajectory CSV (default: <data>_gt.csv when present)")
    es.add_argument("--out")
    es.set_defaults(func=cmd_estimate)

    gc = sub.add_parser("group-check", help="build the D3 group and verify its axioms")
    gc.add_argument("--plot", action="store_true", help="also draw the robot graph")
    gc.set_defaults(func=cmd_group_check)

    gr = sub.add_parser("grad-check", help="finite-difference check of the model gradients")
    gr.add_argument("--data", nargs="+")
    gr.add_argument("--layers", type=int, default=1)
    gr.add_argument("--hidden", type=int, default=4)
    gr.add_argument("--history", type=int, default=12)
    gr.add_argument("--batch", type=int, default=4)
    gr.add_argument("--entries", type=int, default=5, help="sampled entries per parameter")
    gr.add_argument("--tolerance", type=float, default=GRAD_CHECK_TOLERANCE)
    gr.add_argument("--group-mode", choices=GROUP_MODES, default="index-only")
    gr.add_argument("--no-symmetry", dest="symmetry_enabled", action="store_const", const=False)
    gr.set_defaults(func=cmd_grad_check)

    ab = sub.add_parser("ablate", help="depth and history-length ablation")
    ab.add_argument("--train-data", nargs="+", required=True)
    ab.add_argument("--test-data", nargs="+", required=True)
    ab.add_argument("--layers-grid", default="4,8")
    ab.add_argument("--history-grid", default="25,100")
    _add_train_flags(ab)
    ab.set_defaults(func=cmd_ablate)

    return parser


COMMANDS = {
    "gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "predict": cmd_predict,
    "estimate": cmd_estimate, "group-check": cmd_group_check, "grad-check": cmd_grad_check,
    "ablate": cmd_ablate,
}


def _replay(args: argparse.Namespace) -> argparse.Namespace:
    recorded = RunManifest.load(args.manifest)
    if recorded["subcommand"] not in COMMANDS:
        raise FormatError(f"{args.manifest}: unknown subcommand '{recorded['subcommand']}'")
    replayed = argparse.Namespace(**recorded["arguments"])
    replayed.subcommand = recorded["subcommand"]
    replayed.manifest = args.manifest
    if args.out_dir:
        replayed.out_dir = args.out_dir
    if args.log_level:
        replayed.log_level = args.log_level
    logger.info(f"Replaying '{replayed.subcommand}' from {args.manifest}")
    return replayed


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=(args.log_level or get_log_level()).upper(),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")

    try:
        if args.manifest:
            args = _replay(args)
        elif not args.subcommand:
            parser.print_usage(sys.stderr)
            raise ConfigInvalid("a subcommand or --manifest is required")

        args.out_dir = args.out_dir or get_out_dir()
        os.makedirs(args.out_dir, exist_ok=True)
        manifest = RunManifest(args.subcommand,
                               {key: value for key, value in vars(args).items() if key not in UNRECORDED})
        result = COMMANDS[args.subcommand](args, manifest)
        manifest.write(args.out_dir)
        print(json.dumps(result, indent=2, default=str))

        if args.subcommand == "grad-check" and not result["passed"]:
            print(json.dumps({"error": "gradient",
                              "message": f"max relative error {result['max_relative_error']:.3e} "
                                         f"exceeds {result['tolerance']:.0e}"}))
            return 1
        return 0

    except TensegrityError as e:
        logger.error(f"{args.subcommand or 'tensegrity'} failed: {e}")
        print(json.dumps(e.to_dict()))
        return e.exit_code
    except Exception as e:
        logger.exception(f"Unexpected error: {str(e)}")
        print(json.dumps({"error": "internal", "message": str(e)}))
        return 1


if __name__ == "__main__":
    sys.exit(main())
