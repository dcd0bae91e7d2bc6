"""Operator surface: subcommands wiring configuration to pipeline stages.

Precedence is flag > config file > default, and the effective settings
are printed at startup. Every run with an output path writes a manifest
(config snapshot, seeds, version, input digests) next to it.

Exit codes: 0 success, 1 validation error, 2 backend exhaustion,
64 usage error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys

import yaml

from . import __version__
from .audit import run_noise_audit
from .backends import (CueWorld, MockBackend, RemoteBackend,
                       SyntheticR1Backend, SyntheticReasonBackend,
                       SyntheticReconBackend)
from .domain import (Box, BoxSet, Classification, Detection, Distribution,
                     Sample, mask_to_box)
from .errors import BackendError, CotloopError
from .grpo import export_curve, train_toy_policy
from .pipeline import (evaluate_predictions, export_sft_corpus, load_dataset,
                       load_predictions, load_records, run_closed_loop_stage,
                       run_rft_reward_eval, save_dataset)
from .reward import DEFAULT_TAU, filter_high_subset, reward_histogram

USAGE_EXIT = 64


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: {message}\n")
        raise SystemExit(USAGE_EXIT)


def _sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def _load_config(path):
    if not path:
        return {}
    with open(path, encoding="utf-8") as f:
        return yaml.safe_load(f) or {}


def _resolve(flag_value, config, key, default):
    """Flag > config > default; returns (value, source)."""
    if flag_value is not None:
        return flag_value, "flag"
    if key in config:
        return config[key], "config"
    return default, "default"


def _print_settings(settings: dict) -> None:
    for k, (v, source) in settings.items():
        print(f"setting {k}={v} ({source})", file=sys.stderr)


def _write_manifest(output_path: str, args: argparse.Namespace, config: dict,
                    inputs: list[str]) -> None:
    manifest = {
        "version": __version__,
        "command": getattr(args, "command", None),
        "args": {k: v for k, v in vars(args).items() if k != "func"},
        "config": config,
        "input_digests": {p: _sha256(p) for p in inputs if p and os.path.exists(p)},
    }
    with open(output_path + ".manifest.json", "w", encoding="utf-8") as f:
        json.dump(manifest, f, sort_keys=True, indent=2)
        f.write("\n")


def _build_world(config: dict) -> CueWorld:
    w = config.get("world", {})
    return CueWorld(kind=w.get("kind", "classification"),
                    num_samples=w.get("num_samples", 50),
                    cues_per_sample=w.get("cues_per_sample", 4),
                    vocab_size=w.get("vocab_size", 24),
                    seed=w.get("seed", 0))


def _build_backend(spec: dict, stage: str, world):
    kind = spec.get("kind", "synthetic")
    if kind == "synthetic":
        if world is None:
            raise CotloopError("synthetic backend requires a world block in config")
        if stage == "reason":
            return SyntheticReasonBackend(world, fidelity=spec.get("fidelity", 1.0))
        if stage == "recon":
            return SyntheticReconBackend(world)
        return SyntheticR1Backend(world, fidelity=spec.get("fidelity", 1.0))
    if kind == "mock":
        with open(spec["responses"], encoding="utf-8") as f:
            return MockBackend(json.load(f))
    if kind == "remote":
        return RemoteBackend(endpoint=spec["endpoint"], model=spec["model"],
                             auth_env=spec.get("auth_env", "COTLOOP_API_KEY"),
                             timeout=spec.get("timeout", 120.0),
                             max_attempts=spec.get("max_attempts", 3),
                             max_in_flight=spec.get("max_in_flight", 4),
                             ledger_path=spec.get("ledger_path"))
    raise CotloopError(f"unknown backend kind: {kind!r}")


def _dataset_or_world(args, config, world):
    if getattr(args, "dataset", None):
        samples, _ = load_dataset(args.dataset, skip_invalid=args.skip_invalid)
        return samples
    if world is not None:
        return [s.as_sample() for s in world.samples]
    raise CotloopError("either --dataset or a world block in config is required")


# --- subcommand handlers -----------------------------------------------------

def _cmd_ingest(args):
    config = _load_config(args.config)
    if args.task == "classification":
        task = Classification(categories=tuple(args.categories.split(",")))
    else:
        task = Detection(image_width=args.width, image_height=args.height)
    samples = []
    with open(args.input, encoding="utf-8") as f:
        for raw in f:
            if not raw.strip():
                continue
            obj = json.loads(raw)
            if args.task == "classification":
                annotation = Distribution({str(k): float(v)
                                           for k, v in obj["probs"].items()})
            elif "mask" in obj:
                annotation = BoxSet((mask_to_box(obj["mask"]),))
            else:
                annotation = BoxSet(tuple(Box(*map(float, b)) for b in obj["boxes"]))
            samples.append(Sample(id=str(obj["id"]), image_ref=str(obj["image_ref"]),
                                  task=task, annotation=annotation,
                                  target_desc=obj.get("target_desc")))
    save_dataset(samples, task, args.output)
    _write_manifest(args.output, args, config, [args.input])
    print(f"ingested {len(samples)} samples -> {args.output}")
    return 0


def _cmd_gen_cot(args):
    config = _load_config(args.config)
    group_size, gs_src = _resolve(args.group_size, config, "group_size", 8)
    seed, seed_src = _resolve(args.seed, config, "seed", 0)
    _print_settings({"group_size": (group_size, gs_src), "seed": (seed, seed_src)})
    world = _build_world(config) if "world" in config else None
    backends = config.get("backends", {})
    reason = _build_backend(backends.get("reason", {}), "reason", world)
    recon = _build_backend(backends.get("recon", {}), "recon", world)
    samples = _dataset_or_world(args, config, world)
    result = run_closed_loop_stage(samples, reason, recon, group_size=group_size,
                                   seed=seed, records_path=args.records)
    _write_manifest(args.records, args, config,
                    [args.config or "", args.dataset or ""])
    print(f"scored {len(result.records)} samples -> {args.records}")
    if result.failures:
        print(f"{len(result.failures)} sample(s) failed after retries",
              file=sys.stderr)
        return 2
    return 0


def _cmd_filter(args):
    records = load_records(args.records)
    kept, n_kept, n_total = filter_high_subset(records, args.tau)
    pct = 100.0 * n_kept / n_total if n_total else 0.0
    print(f"kept {n_kept} / {n_total} ({pct:.1f}%)")
    counts, pcts = reward_histogram([r.reward for r in records])
    labels = ["[0.00-0.25)", "[0.25-0.50)", "[0.50-0.75)", "[0.75-1.00]"]
    for label, c, p in zip(labels, counts, pcts):
        print(f"{label}  {c:>8}  {p:5.1f}%")
    return 0


def _cmd_export_sft(args):
    config = _load_config(args.config)
    records = load_records(args.records)
    samples, _ = load_dataset(args.dataset, skip_invalid=args.skip_invalid)
    kept = export_sft_corpus(records, samples, tau=args.tau, path=args.output)
    _write_manifest(args.output, args, config, [args.records, args.dataset])
    print(f"exported {kept} SFT lines -> {args.output}")
    return 0


def _cmd_rft_eval(args):
    config = _load_config(args.config)
    group_size, gs_src = _resolve(args.group_size, config, "group_size", 8)
    seed, seed_src = _resolve(args.seed, config, "seed", 0)
    _print_settings({"group_size": (group_size, gs_src), "seed": (seed, seed_src)})
    world = _build_world(config) if "world" in config else None
    r1 = _build_backend(config.get("backends", {}).get("r1", {}), "r1", world)
    samples = _dataset_or_world(args, config, world)
    result = run_rft_reward_eval(samples, r1, group_size=group_size, seed=seed,
                                 bookkeeping_path=args.output)
    if args.output:
        _write_manifest(args.output, args, config,
                        [args.config or "", args.dataset or ""])
    print(f"mean reward {result.mean_reward:.6f} over {len(result.per_sample_mean)} samples")
    if result.failures:
        print(f"{len(result.failures)} sample(s) failed after retries",
              file=sys.stderr)
        return 2
    return 0


def _cmd_train_toy(args):
    config = _load_config(args.config)
    world = _build_world(config) if "world" in config else CueWorld(
        num_samples=args.world_samples, cues_per_sample=args.world_cues,
        vocab_size=args.world_vocab, seed=args.world_seed)
    result = train_toy_policy(world, steps=args.steps, group_size=args.group_size,
                              seed=args.seed, learning_rate=args.lr,
                              minibatch_size=args.minibatch)
    export_curve(result.curve, args.output)
    _write_manifest(args.output, args, config, [args.config or ""])
    print(f"wrote reward curve ({len(result.curve)} steps) -> {args.output}")
    print(f"first {result.curve[0]:.4f}  last {result.curve[-1]:.4f}")
    return 0


def _cmd_eval(args):
    samples, _ = load_dataset(args.gt, skip_invalid=args.skip_invalid)
    predictions = load_predictions(args.pred)
    reference = load_predictions(args.reference) if args.reference else None
    report = evaluate_predictions(predictions, samples, reference)
    if report.mean_jsd is not None:
        print(f"mean JSD {report.mean_jsd:.6f}")
        print(f"accuracy {report.accuracy:.4f}")
        if report.win_rate is not None:
            print(f"win-rate (reference beats this run) {report.win_rate:.4f}")
    if report.detection_score is not None:
        print(f"detection score (IoU@0.5 hit rate) {report.detection_score:.4f}")
    print(f"parse failures {report.parse_failures}")
    return 0


def _cmd_audit(args):
    config = _load_config(args.config)
    tau, tau_src = _resolve(args.tau, config, "tau", DEFAULT_TAU)
    seed, seed_src = _resolve(args.seed, config, "seed", 0)
    _print_settings({"tau": (tau, tau_src), "seed": (seed, seed_src)})
    world = _build_world(config) if "world" in config else CueWorld(
        num_samples=args.world_samples, cues_per_sample=args.world_cues,
        vocab_size=args.world_vocab, seed=seed)
    backends = config.get("backends", {})
    reason = _build_backend(backends.get("reason", {"fidelity": 0.9}), "reason", world)
    recon = _build_backend(backends.get("recon", {}), "recon", world)
    samples = [s.as_sample() for s in world.samples]
    report, _ = run_noise_audit(samples, fraction=args.fraction,
                                reason_backend=reason, recon_backend=recon,
                                group_size=args.group_size, tau=tau, seed=seed)
    text = report.render()
    print(text)
    if args.output:
        with open(args.output, "w", encoding="utf-8") as f:
            f.write(text + "\n")
        _write_manifest(args.output, args, config, [args.config or ""])
    return 0


def _cmd_report(args):
    records = load_records(args.records)
    rewards = [r.reward for r in records]
    counts, pcts = reward_histogram(rewards)
    labels = ["[0.00-0.25)", "[0.25-0.50)", "[0.50-0.75)", "[0.75-1.00]"]
    print(f"{'bin':<14}{'count':>8}{'percent':>9}")
    for label, c, p in zip(labels, counts, pcts):
        print(f"{label:<14}{c:>8}{p:>8.1f}%")
    reasons: dict[str, int] = {}
    for r in records:
        reasons[r.breakdown.reason] = reasons.get(r.breakdown.reason, 0) + 1
    print("reasons: " + ", ".join(f"{k}={v}" for k, v in sorted(reasons.items())))
    if args.output:
        with open(args.output, "w", encoding="utf-8") as f:
            f.write("bin_low\tbin_high\tcount\tpercent\n")
            edges = [0.0, 0.25, 0.5, 0.75, 1.0]
            for i, (c, p) in enumerate(zip(counts, pcts)):
                f.write(f"{edges[i]}\t{edges[i+1]}\t{c}\t{p:.4f}\n")
        print(f"wrote plot data -> {args.output}")
    return 0


# --- parser ------------------------------------------------------------------

def build_parser() -> _Parser:
    parser = _Parser(prog="cotloop",
                     description="Closed-loop chain-of-thought curation toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="convert raw label files into a dataset file")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--task", choices=["classification", "detection"], required=True)
    p.add_argument("--categories", help="comma-separated category names")
    p.add_argument("--width", type=float, help="image width for detection")
    p.add_argument("--height", type=float, help="image height for detection")
    p.add_argument("--config")
    p.set_defaults(func=_cmd_ingest)

    p = sub.add_parser("gen-cot", help="run the closed-loop generation stage")
    p.add_argument("--config")
    p.add_argument("--dataset")
    p.add_argument("--records", required=True)
    p.add_argument("--group-size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--skip-invalid", action="store_true")
    p.set_defaults(func=_cmd_gen_cot)

    p = sub.add_parser("filter", help="threshold filter plus reward histogram")
    p.add_argument("--records", required=True)
    p.add_argument("--tau", type=float, default=DEFAULT_TAU)
    p.set_defaults(func=_cmd_filter)

    p = sub.add_parser("export-sft", help="export the high-reward SFT corpus")
    p.add_argument("--records", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--tau", type=float, default=DEFAULT_TAU)
    p.add_argument("--skip-invalid", action="store_true")
    p.add_argument("--config")
    p.set_defaults(func=_cmd_export_sft)

    p = sub.add_parser("rft-eval", help="score think-answer outputs per sample")
    p.add_argument("--config")
    p.add_argument("--dataset")
    p.add_argument("--output", help="bookkeeping file for an external trainer")
    p.add_argument("--group-size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--skip-invalid", action="store_true")
    p.set_defaults(func=_cmd_rft_eval)

    p = sub.add_parser("train-toy", help="train the toy policy; write the reward curve")
    p.add_argument("--steps", type=int, default=300)
    p.add_argument("--group-size", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lr", type=float, default=0.5)
    p.add_argument("--minibatch", type=int, default=None,
                   help="samples per step (default: full dataset)")
    p.add_argument("--world-samples", type=int, default=50)
    p.add_argument("--world-cues", type=int, default=4)
    p.add_argument("--world-vocab", type=int, default=24)
    p.add_argument("--world-seed", type=int, default=0)
    p.add_argument("--output", required=True)
    p.add_argument("--config")
    p.set_defaults(func=_cmd_train_toy)

    p = sub.add_parser("eval", help="evaluate a predictions file against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--reference")
    p.add_argument("--skip-invalid", action="store_true")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("audit", help="label-noise audit on a synthetic world")
    p.add_argument("--config")
    p.add_argument("--fraction", type=float, default=0.3)
    p.add_argument("--tau", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--group-size", type=int, default=8)
    p.add_argument("--world-samples", type=int, default=50)
    p.add_argument("--world-cues", type=int, default=4)
    p.add_argument("--world-vocab", type=int, default=24)
    p.add_argument("--output")
    p.set_defaults(func=_cmd_audit)

    p = sub.add_parser("report", help="render histograms as text tables and plot data")
    p.add_argument("--records", required=True)
    p.add_argument("--output")
    p.set_defaults(func=_cmd_report)

    return parser


def cli_dispatch(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if e.code is not None else 0
    try:
        return args.func(args)
    except BackendError as e:
        print(f"backend error: {e}", file=sys.stderr)
        return 2
    except CotloopError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


def main() -> None:
    raise SystemExit(cli_dispatch())
