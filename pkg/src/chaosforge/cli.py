"""Command-line pipeline from system discovery to zero-shot evaluation.

Subcommands cover the full workflow: evolve chaotic systems, integrate
trajectories, assemble training datasets, train the forecaster, and evaluate
on held-out systems.

Configs are strict JSON documents (unknown keys are errors), every output is
written atomically, and each subcommand echoes its fully materialized
effective configuration next to the output. Timestamps live only in a
sidecar metadata file so reruns with the same inputs are bitwise identical.
"""

import argparse
import dataclasses
import difflib
import io
import json
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import augment, discovery, features, harness, integrator, metrics, scaleformer, systems
from .util import (
    DataError,
    NumericalError,
    atomic_write_bytes,
    atomic_write_json,
    load_json,
    make_rng,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on bad usage; route through our own exit-code scheme
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


# ---------------------------------------------------------------------------
# strict config handling


def _load_strict(path, allowed, required=(), label="config"):
    doc = load_json(path)
    if not isinstance(doc, dict):
        raise DataError(f"{path}: {label} must be a JSON object")
    for key in sorted(doc):
        if key not in allowed:
            near = difflib.get_close_matches(key, sorted(allowed), n=1)
            hint = f" (nearest valid key: {near[0]!r})" if near else ""
            raise DataError(f"{path}: unknown {label} key {key!r}{hint}")
    for key in required:
        if key not in doc:
            raise DataError(f"{path}: missing required {label} key {key!r}")
    return doc


def _write_echo(out_path, command, effective):
    out_path = Path(out_path)
    atomic_write_json(
        out_path.with_name(out_path.name + ".config.json"),
        {"command": command, "effective": effective},
    )
    atomic_write_json(
        out_path.with_name(out_path.name + ".meta.json"),
        {"created_at": datetime.now(timezone.utc).isoformat()},
    )


def _save_figure(path, draw):
    import matplotlib

    matplotlib.use("Agg", force=True)
    import matplotlib.pyplot as plt

    fig = draw(plt)
    buf = io.BytesIO()
    fig.savefig(buf, format="png", dpi=110, metadata={"Software": "chaosforge"})
    plt.close(fig)
    atomic_write_bytes(path, buf.getvalue())


# ---------------------------------------------------------------------------
# subcommands


def _cmd_systems_gen(args):
    doc = load_json(args.founders)
    if isinstance(doc, list) and doc and all(isinstance(x, str) for x in doc):
        founders = [systems.founder(name) for name in doc]
    else:
        founders = discovery.load_population_specs(args.founders)
    if args.target < 1:
        raise DataError("--target must be >= 1")
    config = discovery.EvolutionConfig(population_target=args.target, rng_seed=args.seed)
    population = discovery.run_evolution(founders, config)
    atomic_write_json(args.out, discovery.population_to_json(population))
    _write_echo(
        args.out,
        "systems-gen",
        {
            "founders": str(args.founders),
            "target": args.target,
            "seed": args.seed,
            "evolution": dataclasses.asdict(config),
        },
    )


def _cmd_simulate(args):
    doc = load_json(args.system)
    try:
        spec = systems.from_json(doc)
    except (DataError, KeyError, TypeError) as exc:
        raise DataError(f"{args.system}: not a valid system document ({exc})") from None
    if args.samples < 1:
        raise DataError("--samples must be >= 1")
    sid = systems.system_id(spec)
    x0 = integrator.sample_initial_condition(spec, make_rng(args.seed, "cli-simulate", sid))
    result = integrator.integrate(spec, x0, args.samples, systems.default_dt(spec))
    if isinstance(result, integrator.RejectionVerdict):
        raise DataError(
            f"{args.system}: system rejected during integration: "
            f"{result.kind} ({result.detail})"
        )
    integrator.write_chx1(args.out, result)
    _write_echo(
        args.out,
        "simulate",
        {
            "system": str(args.system),
            "system_id": sid,
            "samples": args.samples,
            "seed": args.seed,
            "dt_sample": systems.default_dt(spec),
        },
    )


def _cmd_augment(args):
    traj = integrator.read_chx1(args.traj)
    doc = _load_strict(args.spec, {"descriptors"}, required=("descriptors",), label="augment spec")
    if not isinstance(doc["descriptors"], list):
        raise DataError(f"{args.spec}: 'descriptors' must be a JSON array")
    out = augment.apply_descriptors(traj, doc["descriptors"])
    integrator.write_chx1(args.out, out)
    _write_echo(
        args.out,
        "augment",
        {"traj": str(args.traj), "spec": str(args.spec), "descriptors": doc["descriptors"]},
    )


def _cmd_fingerprint(args):
    traj = integrator.read_chx1(args.traj)
    fp = features.scattering_fingerprint(traj.samples)
    payload = {
        "rows": int(fp.values.shape[0]),
        "variables": int(fp.values.shape[1]),
        "descriptors": [list(d) for d in fp.descriptors],
        "values": fp.values.tolist(),
    }
    atomic_write_json(args.out, payload)
    if not args.no_figures:
        def draw(plt):
            fig, ax = plt.subplots(figsize=(6, 8))
            im = ax.imshow(fp.values, aspect="auto", cmap="viridis")
            ax.set_xlabel("variable")
            ax.set_ylabel("scattering row")
            ax.set_title("scattering fingerprint")
            fig.colorbar(im, ax=ax)
            fig.tight_layout()
            return fig

        _save_figure(Path(args.out).with_suffix(".png"), draw)
    _write_echo(args.out, "fingerprint", {"traj": str(args.traj), "figures": not args.no_figures})


_DATASET_DEFAULTS = {
    "windows_per_system": None,
    "context": 512,
    "horizon": 128,
    "seed": 0,
    "trajectory_samples": harness.TRAJECTORY_SAMPLES,
}


def _cmd_dataset_build(args):
    doc = _load_strict(
        args.config,
        set(_DATASET_DEFAULTS),
        required=("windows_per_system",),
        label="dataset config",
    )
    effective = dict(_DATASET_DEFAULTS)
    effective.update(doc)
    specs = discovery.load_population_specs(args.population)
    if not specs:
        raise DataError(f"{args.population}: no systems in population file")
    dataset = harness.build_dataset(
        specs,
        int(effective["windows_per_system"]),
        window=harness.WindowSpec(int(effective["context"]), int(effective["horizon"])),
        seed=int(effective["seed"]),
        n_samples=int(effective["trajectory_samples"]),
    )
    atomic_write_json(args.out, harness.manifest_to_json(dataset.manifest))
    _write_echo(
        args.out,
        "dataset-build",
        {"population": str(args.population), "config": effective},
    )


def _cmd_train(args):
    model_defaults = scaleformer.config_to_json(scaleformer.ModelConfig())
    model_doc = _load_strict(
        args.model_config,
        set(model_defaults) | {"init_seed"},
        label="model config",
    )
    model_effective = dict(model_defaults)
    model_effective["init_seed"] = 0
    model_effective.update(model_doc)
    init_seed = int(model_effective["init_seed"])
    model_cfg = scaleformer.config_from_json(
        {k: v for k, v in model_effective.items() if k != "init_seed"}
    )
    train_defaults = harness.train_config_to_json(harness.TrainConfig())
    train_doc = _load_strict(args.train_config, set(train_defaults), label="training config")
    train_effective = dict(train_defaults)
    train_effective.update(train_doc)
    train_cfg = harness.train_config_from_json(train_effective)
    manifest = harness.manifest_from_json(load_json(args.manifest))
    dataset = harness.materialize_dataset(manifest)
    model = scaleformer.build_model(model_cfg, seed=init_seed)
    out = Path(args.out)
    harness.train(
        dataset,
        model,
        train_cfg,
        log_path=out.with_name(out.stem + ".losses.jsonl"),
        checkpoint_path=out,
    )
    _write_echo(
        args.out,
        "train",
        {
            "manifest": str(args.manifest),
            "model": model_effective,
            "train": train_effective,
        },
    )


def _cmd_forecast(args):
    model, _ = scaleformer.load_checkpoint(args.ckpt)
    traj = integrator.read_chx1(args.traj)
    if args.steps < 1:
        raise DataError("--steps must be >= 1")
    if traj.samples.shape[0] < args.context:
        raise DataError(
            f"{args.traj}: trajectory has {traj.samples.shape[0]} samples, "
            f"need {args.context} for the context"
        )
    context = traj.samples[-args.context :]
    mean = context.mean(axis=0)
    std = context.std(axis=0)
    if np.any(std < 1e-12):
        raise DataError(f"{args.traj}: constant channel in the forecast context")
    pred_std = scaleformer.autoregressive_rollout(model, (context - mean) / std, args.steps)
    pred = pred_std * std + mean
    header = "step," + ",".join(f"var{i}" for i in range(pred.shape[1]))
    lines = [header]
    for i, row in enumerate(pred):
        lines.append(",".join([str(i)] + [repr(float(v)) for v in row]))
    atomic_write_bytes(args.out, ("\n".join(lines) + "\n").encode())
    if not args.no_figures:
        tail = context[-256:]

        def draw(plt):
            fig, ax = plt.subplots(figsize=(9, 4))
            t_hist = np.arange(-tail.shape[0], 0)
            t_pred = np.arange(pred.shape[0])
            for v in range(pred.shape[1]):
                (line,) = ax.plot(t_hist, tail[:, v], lw=0.8)
                ax.plot(t_pred, pred[:, v], lw=0.8, ls="--", color=line.get_color())
            ax.axvline(0.0, color="k", lw=0.5)
            ax.set_xlabel("steps from forecast start")
            ax.set_title("context (solid) and forecast (dashed)")
            fig.tight_layout()
            return fig

        _save_figure(Path(args.out).with_suffix(".png"), draw)
    _write_echo(
        args.out,
        "forecast",
        {
            "ckpt": str(args.ckpt),
            "traj": str(args.traj),
            "steps": args.steps,
            "context": args.context,
            "figures": not args.no_figures,
        },
    )


def _cmd_eval(args):
    model, extra = scaleformer.load_checkpoint(args.ckpt)
    held = discovery.load_population_specs(args.population)
    if not held:
        raise DataError(f"{args.population}: no systems in population file")
    report = harness.evaluate_zero_shot(
        model,
        held,
        train_systems=extra.get("train_systems"),
        rollout_steps=args.steps,
        seed=args.seed,
    )
    out = Path(args.out)
    atomic_write_json(out, metrics.report_to_json(report))
    atomic_write_bytes(out.with_name(out.stem + ".csv"), metrics.report_to_csv(report).encode())
    if not args.no_figures:
        recs = report.per_system

        def draw(plt):
            fig, axes = plt.subplots(2, 2, figsize=(10, 7))
            x = np.arange(len(recs))
            labels = [r["system"][:10] for r in recs]
            for ax, name in zip(axes.flat, metrics.METRIC_NAMES):
                ax.bar(x, [r[name] for r in recs], color="tab:blue")
                ax.set_title(f"{name} (mean {report.aggregates[name]['mean']:.3g})")
                ax.set_xticks(x)
                ax.set_xticklabels(labels, rotation=45, ha="right", fontsize=7)
            fig.tight_layout()
            return fig

        _save_figure(out.with_suffix(".png"), draw)
    _write_echo(
        args.out,
        "eval",
        {
            "ckpt": str(args.ckpt),
            "population": str(args.population),
            "steps": args.steps,
            "seed": args.seed,
            "figures": not args.no_figures,
            "estimator": {
                k: (list(v) if isinstance(v, tuple) else v)
                for k, v in report.estimator.items()
            },
        },
    )


# ---------------------------------------------------------------------------
# parser and dispatch


def _build_parser():
    parser = _Parser(prog="chaosforge", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, metavar="subcommand")

    p = sub.add_parser("systems-gen", parents=[], help="evolve a validated chaotic population")
    p.add_argument("--founders", required=True, help="JSON file: founder names or system docs")
    p.add_argument("--target", required=True, type=int, help="accepted systems to produce")
    p.add_argument("--seed", required=True, type=int)
    p.add_argument("--out", required=True, help="population JSON output")
    p.set_defaults(func=_cmd_systems_gen)

    p = sub.add_parser("simulate", help="integrate a system to a CHX1 trajectory")
    p.add_argument("--system", required=True, help="system JSON document")
    p.add_argument("--samples", required=True, type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="CHX1 output path")
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("augment", help="replay augmentation descriptors on a trajectory")
    p.add_argument("--traj", required=True, help="CHX1 input")
    p.add_argument("--spec", required=True, help="JSON file with a 'descriptors' array")
    p.add_argument("--out", required=True, help="CHX1 output path")
    p.set_defaults(func=_cmd_augment)

    p = sub.add_parser("fingerprint", help="scattering fingerprint of a trajectory")
    p.add_argument("--traj", required=True, help="CHX1 input")
    p.add_argument("--out", required=True, help="fingerprint JSON output")
    p.add_argument("--no-figures", action="store_true", help="skip the rendered heatmap")
    p.set_defaults(func=_cmd_fingerprint)

    p = sub.add_parser("dataset-build", help="slice training windows from a population")
    p.add_argument("--population", required=True, help="population JSON")
    p.add_argument("--config", required=True, help="dataset config JSON")
    p.add_argument("--out", required=True, help="manifest JSON output")
    p.set_defaults(func=_cmd_dataset_build)

    p = sub.add_parser("train", help="train the forecaster on a dataset manifest")
    p.add_argument("--manifest", required=True, help="dataset manifest JSON")
    p.add_argument("--model-config", required=True, help="model config JSON")
    p.add_argument("--train-config", required=True, help="training config JSON")
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("forecast", help="autoregressive forecast from a trajectory tail")
    p.add_argument("--ckpt", required=True, help="model checkpoint")
    p.add_argument("--traj", required=True, help="CHX1 input")
    p.add_argument("--steps", type=int, default=512)
    p.add_argument("--context", type=int, default=512)
    p.add_argument("--out", required=True, help="CSV output path")
    p.add_argument("--no-figures", action="store_true", help="skip the rendered plot")
    p.set_defaults(func=_cmd_forecast)

    p = sub.add_parser("eval", help="zero-shot evaluation over held-out systems")
    p.add_argument("--ckpt", required=True, help="model checkpoint")
    p.add_argument("--population", required=True, help="held-out population JSON")
    p.add_argument("--steps", type=int, default=512)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="report JSON output")
    p.add_argument("--no-figures", action="store_true", help="skip the rendered charts")
    p.set_defaults(func=_cmd_eval)

    return parser


def dispatch(argv):
    """Run one invocation; returns the process exit code."""
    try:
        args = _build_parser().parse_args(argv)
        args.func(args)
        return EXIT_OK
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


def main():
    sys.exit(dispatch(sys.argv[1:]))
