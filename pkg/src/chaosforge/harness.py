"""Dataset assembly, the training loop, and zero-shot evaluation.

Windows are standardized per window from the context alone so targets never
leak statistics; the same mean/std pair is inverted before any metric is
computed, keeping every reported number in the original data scale.
"""

import json
import math
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import augment, integrator, metrics, objective, scaleformer, systems, tensor
from .util import (
    DataError,
    NumericalError,
    atomic_write_text,
    derive_seed,
    make_rng,
    parallel_map,
)

TRAJECTORY_SAMPLES = 4096
_DELAY_TAU_MAX = 4  # largest delay the augment policy can draw
_STD_FLOOR = 1e-12


@dataclass(frozen=True)
class WindowSpec:
    context: int = 512
    horizon: int = 128

    def __post_init__(self):
        if self.context < 1 or self.horizon < 1:
            raise DataError("window context and horizon must be >= 1")

    @property
    def total(self):
        return self.context + self.horizon


@dataclass(frozen=True, eq=False)
class DatasetManifest:
    system_ids: tuple
    specs: tuple  # system spec per id, same order
    window: WindowSpec
    windows_per_system: int
    trajectory_samples: int
    seed: int
    windows: tuple  # dicts: system, start, length, augment, mean, std

    def __post_init__(self):
        ids = set(self.system_ids)
        if len(ids) != len(self.system_ids):
            raise DataError("duplicate system identities in manifest")
        for rec in self.windows:
            if rec["system"] not in ids:
                raise DataError(f"window references unknown system {rec['system']!r}")
            if rec["start"] < 0 or rec["start"] + rec["length"] > self.trajectory_samples:
                raise DataError("window references a slice outside its trajectory")
            if rec["length"] < self.window.total:
                raise DataError("window slice shorter than context + horizon")
            stats = np.concatenate([rec["mean"], rec["std"]])
            if not np.all(np.isfinite(stats)) or np.any(np.asarray(rec["std"]) <= 0):
                raise DataError("non-finite or degenerate window statistics")


@dataclass(frozen=True, eq=False)
class Dataset:
    """Materialized windows: standardized context/target plus their stats."""

    manifest: DatasetManifest
    contexts: tuple  # (T, V) arrays, standardized
    targets: tuple  # (H, V) arrays, standardized with the context stats
    means: tuple
    stds: tuple


def manifest_to_json(manifest):
    return {
        "systems": [
            {"id": sid, "system": systems.to_json(spec)}
            for sid, spec in zip(manifest.system_ids, manifest.specs)
        ],
        "window": {"context": manifest.window.context, "horizon": manifest.window.horizon},
        "windows_per_system": manifest.windows_per_system,
        "trajectory_samples": manifest.trajectory_samples,
        "seed": manifest.seed,
        "windows": list(manifest.windows),
    }


def manifest_from_json(doc):
    try:
        window = WindowSpec(int(doc["window"]["context"]), int(doc["window"]["horizon"]))
        return DatasetManifest(
            system_ids=tuple(entry["id"] for entry in doc["systems"]),
            specs=tuple(systems.from_json(entry["system"]) for entry in doc["systems"]),
            window=window,
            windows_per_system=int(doc["windows_per_system"]),
            trajectory_samples=int(doc["trajectory_samples"]),
            seed=int(doc["seed"]),
            windows=tuple(dict(rec) for rec in doc["windows"]),
        )
    except (KeyError, TypeError) as exc:
        raise DataError(f"malformed dataset manifest: {exc!r}") from None


def _system_trajectory(spec, sid, seed, n_samples, purpose):
    dt = systems.default_dt(spec)
    x0 = integrator.sample_initial_condition(spec, make_rng(seed, purpose, "ic", sid))
    result = integrator.integrate(spec, x0, n_samples, dt)
    if isinstance(result, integrator.RejectionVerdict):
        raise DataError(
            f"system {sid} rejected during trajectory generation: "
            f"{result.kind} ({result.detail})"
        )
    return result


def _standardize_window(rows, window):
    context = rows[: window.context]
    target = rows[window.context : window.total]
    mean = context.mean(axis=0)
    std = context.std(axis=0)
    if np.any(std < _STD_FLOOR):
        raise DataError("degenerate window: a channel is constant over the context")
    return (context - mean) / std, (target - mean) / std, mean, std


def build_dataset(specs, windows_per_system, window=None, seed=0, n_samples=TRAJECTORY_SAMPLES):
    """Integrate each system, slice random windows, augment, standardize."""
    window = window or WindowSpec()
    if windows_per_system < 1:
        raise DataError("windows_per_system must be >= 1")
    specs = tuple(specs)
    ids = tuple(systems.system_id(s) for s in specs)

    def one_system(pair):
        sid, spec = pair
        traj = _system_trajectory(spec, sid, seed, n_samples, "dataset")
        v = traj.samples.shape[1]
        margin = _DELAY_TAU_MAX * (v - 1)
        need = window.total + margin
        if n_samples < need:
            raise DataError(f"system {sid}: trajectory too short for the window spec")
        rng = make_rng(seed, "dataset", "windows", sid)
        records, ctxs, tgts, means, stds = [], [], [], [], []
        for _ in range(windows_per_system):
            start = int(rng.integers(0, n_samples - need + 1))
            segment = integrator.Trajectory(
                samples=traj.samples[start : start + need],
                dt_sample=traj.dt_sample,
                system_id=sid,
                initial_condition=traj.samples[start],
            )
            augmented, descriptors = augment.draw_augment(segment, rng)
            rows = augmented.samples[: window.total]
            ctx, tgt, mean, std = _standardize_window(rows, window)
            records.append(
                {
                    "system": sid,
                    "start": start,
                    "length": need,
                    "augment": descriptors,
                    "mean": mean.tolist(),
                    "std": std.tolist(),
                }
            )
            ctxs.append(ctx)
            tgts.append(tgt)
            means.append(mean)
            stds.append(std)
        return records, ctxs, tgts, means, stds

    per_system = parallel_map(one_system, list(zip(ids, specs)))
    windows, contexts, targets, means, stds = [], [], [], [], []
    for records, ctxs, tgts, ms, ss in per_system:
        windows.extend(records)
        contexts.extend(ctxs)
        targets.extend(tgts)
        means.extend(ms)
        stds.extend(ss)
    manifest = DatasetManifest(
        system_ids=ids,
        specs=specs,
        window=window,
        windows_per_system=windows_per_system,
        trajectory_samples=n_samples,
        seed=seed,
        windows=tuple(windows),
    )
    return Dataset(manifest, tuple(contexts), tuple(targets), tuple(means), tuple(stds))


def materialize_dataset(manifest):
    """Rebuild window arrays from a manifest by replaying its records."""
    trajectories = dict(
        zip(
            manifest.system_ids,
            parallel_map(
                lambda pair: _system_trajectory(
                    pair[1], pair[0], manifest.seed, manifest.trajectory_samples, "dataset"
                ),
                list(zip(manifest.system_ids, manifest.specs)),
            ),
        )
    )
    contexts, targets, means, stds = [], [], [], []
    for rec in manifest.windows:
        traj = trajectories[rec["system"]]
        segment = integrator.Trajectory(
            samples=traj.samples[rec["start"] : rec["start"] + rec["length"]],
            dt_sample=traj.dt_sample,
            system_id=rec["system"],
            initial_condition=traj.samples[rec["start"]],
        )
        replayed = augment.apply_descriptors(segment, rec["augment"])
        rows = replayed.samples[: manifest.window.total]
        mean = np.asarray(rec["mean"], dtype=np.float64)
        std = np.asarray(rec["std"], dtype=np.float64)
        context = (rows[: manifest.window.context] - mean) / std
        target = (rows[manifest.window.context :] - mean) / std
        contexts.append(context)
        targets.append(target)
        means.append(mean)
        stds.append(std)
    return Dataset(manifest, tuple(contexts), tuple(targets), tuple(means), tuple(stds))


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 500
    batch_size: int = 32
    learning_rate: float = 1e-3
    final_lr: float = 1e-5
    warmup_fraction: float = 0.05
    clip_norm: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    seed: int = 0
    loss_weights: objective.LossWeights = field(default_factory=objective.LossWeights)

    def __post_init__(self):
        if self.steps < 1:
            raise DataError("steps must be >= 1")
        if self.batch_size < 1:
            raise DataError("batch size must be >= 1")
        if not self.learning_rate > 0 or not 0 < self.final_lr <= self.learning_rate:
            raise DataError("need 0 < final_lr <= learning_rate")
        if not 0 <= self.warmup_fraction < 1:
            raise DataError("warmup fraction must lie in [0, 1)")
        if not self.clip_norm > 0:
            raise DataError("clip norm must be positive")
        for name in ("beta1", "beta2"):
            if not 0 <= getattr(self, name) < 1:
                raise DataError(f"{name} must lie in [0, 1)")
        if not self.epsilon > 0:
            raise DataError("epsilon must be positive")


def train_config_to_json(cfg):
    return {
        "steps": cfg.steps,
        "batch_size": cfg.batch_size,
        "learning_rate": cfg.learning_rate,
        "final_lr": cfg.final_lr,
        "warmup_fraction": cfg.warmup_fraction,
        "clip_norm": cfg.clip_norm,
        "beta1": cfg.beta1,
        "beta2": cfg.beta2,
        "epsilon": cfg.epsilon,
        "seed": cfg.seed,
        "lambda1": cfg.loss_weights.lambda1,
        "lambda2": cfg.loss_weights.lambda2,
    }


def train_config_from_json(doc):
    known = set(train_config_to_json(TrainConfig()))
    unknown = sorted(set(doc) - known)
    if unknown:
        raise DataError(f"unknown training config keys: {unknown}")
    merged = dict(train_config_to_json(TrainConfig()))
    merged.update(doc)
    weights = objective.LossWeights(float(merged["lambda1"]), float(merged["lambda2"]))
    return TrainConfig(
        steps=int(merged["steps"]),
        batch_size=int(merged["batch_size"]),
        learning_rate=float(merged["learning_rate"]),
        final_lr=float(merged["final_lr"]),
        warmup_fraction=float(merged["warmup_fraction"]),
        clip_norm=float(merged["clip_norm"]),
        beta1=float(merged["beta1"]),
        beta2=float(merged["beta2"]),
        epsilon=float(merged["epsilon"]),
        seed=int(merged["seed"]),
        loss_weights=weights,
    )


def learning_rate_at(cfg, step):
    """Linear warmup to the peak, then cosine decay toward final_lr."""
    warmup = int(round(cfg.warmup_fraction * cfg.steps))
    if step < warmup:
        return cfg.learning_rate * (step + 1) / warmup
    span = max(1, cfg.steps - warmup)
    t = (step - warmup) / span
    return cfg.final_lr + 0.5 * (cfg.learning_rate - cfg.final_lr) * (1 + math.cos(math.pi * t))


def _epoch_batches(v_of, cfg, epoch):
    # deterministic shuffle, then bucket by channel count so batches stack
    order = make_rng(cfg.seed, "batch-order", epoch).permutation(len(v_of))
    buckets = {}
    for idx in order:
        buckets.setdefault(v_of[idx], []).append(int(idx))
    batches = []
    for v in sorted(buckets):
        bucket = buckets[v]
        for i in range(0, len(bucket), cfg.batch_size):
            batches.append(tuple(bucket[i : i + cfg.batch_size]))
    return batches


@dataclass(frozen=True, eq=False)
class TrainResult:
    model: scaleformer.Model
    log: tuple  # one dict per step: step, mse, balance, mmd2, total, lr


def train(dataset, model, config, log_path=None, checkpoint_path=None):
    """Optimize the model in place over the dataset's windows.

    Adaptive-moment updates with bias correction, global-norm gradient
    clipping, warmup + cosine learning-rate schedule, deterministic batch
    order under the config seed. Emits a JSON-lines loss log and optionally
    a checkpoint whose extra block records the training system identities.
    """
    cfg = config
    manifest = dataset.manifest
    if manifest.window.horizon != model.config.horizon:
        raise DataError(
            f"window horizon {manifest.window.horizon} does not match "
            f"model horizon {model.config.horizon}"
        )
    if manifest.window.context < model.config.patch_len:
        raise DataError("window context shorter than one patch")
    if not dataset.contexts:
        raise DataError("dataset has no windows")

    embedded = [scaleformer.embed_inputs(model, ctx) for ctx in dataset.contexts]
    rows = embedded[0][1].shape[0]
    if rows != model.config.fingerprint_rows:
        raise DataError(
            f"model expects {model.config.fingerprint_rows} fingerprint rows, inputs give {rows}"
        )
    v_of = [ctx.shape[1] for ctx in dataset.contexts]
    names = sorted(model.params)
    moment1 = {n: np.zeros_like(model.params[n].data) for n in names}
    moment2 = {n: np.zeros_like(model.params[n].data) for n in names}
    log = []
    epoch = 0
    batches = _epoch_batches(v_of, cfg, epoch)
    cursor = 0
    for step in range(cfg.steps):
        if cursor >= len(batches):
            epoch += 1
            batches = _epoch_batches(v_of, cfg, epoch)
            cursor = 0
        batch = batches[cursor]
        cursor += 1
        lifted = np.stack([embedded[i][0] for i in batch])
        fps = np.stack([embedded[i][1] for i in batch])
        target = np.stack([dataset.targets[i] for i in batch])
        sd_rng = make_rng(cfg.seed, "stochastic-depth", step)
        try:
            stats = []
            with tensor.GradTape() as tape:
                pred = scaleformer.forward_embedded(
                    model, lifted, fps, training=True, rng=sd_rng, collect=stats
                )
                mse = objective.mse_loss(pred, target)
                balance = objective.balance_from_stats(stats)
                mmd2 = objective.mmd2_loss(pred, target)
                total = objective.composite_loss(mse, balance, mmd2, cfg.loss_weights)
            tensor.backward(tape, total)
        except NumericalError as exc:
            raise NumericalError(
                f"non-finite loss at step {step}, window batch {list(batch)}: {exc}"
            ) from None
        grads = []
        for n in names:
            g = model.params[n].grad
            grads.append(np.zeros_like(model.params[n].data) if g is None else g)
            model.params[n].grad = None
        sq = sum(float(np.sum(g * g)) for g in grads)
        if not np.isfinite(sq):
            raise NumericalError(
                f"non-finite gradient at step {step}, window batch {list(batch)}"
            )
        norm = math.sqrt(sq)
        if norm > cfg.clip_norm:
            grads = [g * (cfg.clip_norm / norm) for g in grads]
        lr = learning_rate_at(cfg, step)
        t = step + 1
        for n, g in zip(names, grads):
            m = moment1[n] = cfg.beta1 * moment1[n] + (1 - cfg.beta1) * g
            v = moment2[n] = cfg.beta2 * moment2[n] + (1 - cfg.beta2) * g * g
            m_hat = m / (1 - cfg.beta1**t)
            v_hat = v / (1 - cfg.beta2**t)
            model.params[n].data -= lr * m_hat / (np.sqrt(v_hat) + cfg.epsilon)
        log.append(
            {
                "step": step,
                "mse": float(mse.data),
                "balance": float(balance.data),
                "mmd2": float(mmd2.data),
                "total": float(total.data),
                "lr": lr,
            }
        )
    if log_path is not None:
        atomic_write_text(
            log_path, "".join(json.dumps(entry, sort_keys=True) + "\n" for entry in log)
        )
    if checkpoint_path is not None:
        scaleformer.save_checkpoint(
            checkpoint_path,
            model,
            extra={
                "train_systems": list(manifest.system_ids),
                "train_config": train_config_to_json(cfg),
            },
        )
    return TrainResult(model=model, log=tuple(log))


# ---------------------------------------------------------------------------
# evaluation


def persistence_forecast(context, n_steps):
    """Repeat the last context row; the no-skill reference forecaster."""
    context = np.asarray(context, dtype=np.float64)
    if context.ndim != 2 or context.shape[0] < 1 or n_steps < 1:
        raise DataError("persistence needs a (T, V) context and n_steps >= 1")
    return np.repeat(context[-1:], n_steps, axis=0)


def _forecast_dimension(points, seed):
    # an exactly constant forecast collapses to a point: dimension zero by
    # definition, though the pairwise estimator cannot see it
    if float(np.max(np.ptp(points, axis=0))) == 0.0:
        return 0.0
    return metrics.correlation_dimension(points, seed=seed)


def evaluate_zero_shot(
    model,
    held_out,
    train_systems=None,
    rollout_steps=512,
    seed=0,
    context_len=512,
    forecaster=None,
):
    """Roll the model out on unseen systems and score the forecasts.

    For each held-out system: integrate a fresh trajectory, sample a context,
    autoregressively forecast, invert the per-window standardization, then
    score sMAPE at 128 and at `rollout_steps` plus the two attractor metrics.
    The attractor metrics compare extended rollouts of at least 1024 samples
    because the dimension estimator requires 1000+ points. `forecaster`
    substitutes the rollout for baselines/oracles in tests: it receives
    (standardized context, n_steps, standardized true continuation) and real
    forecasters must ignore the third argument.
    """
    held_out = tuple(held_out)
    if not held_out:
        raise DataError("no systems to evaluate")
    if rollout_steps < 128:
        raise DataError("rollout must cover at least the 128-step horizon")
    ids = tuple(systems.system_id(s) for s in held_out)
    if len(set(ids)) != len(ids):
        raise DataError("duplicate system identities in the evaluation set")
    if train_systems is not None:
        overlap = sorted(set(ids) & set(train_systems))
        if overlap:
            raise DataError(f"held-out systems overlap the training set: {overlap}")
    n_extended = max(rollout_steps, 1024)
    n_samples = TRAJECTORY_SAMPLES
    if context_len + n_extended > n_samples:
        raise DataError("context plus extended rollout exceeds the trajectory length")

    def eval_one(pair):
        sid, spec = pair
        traj = _system_trajectory(spec, sid, seed, n_samples, "eval")
        rng = make_rng(seed, "eval", "window", sid)
        start = int(rng.integers(0, n_samples - context_len - n_extended + 1))
        context = traj.samples[start : start + context_len]
        true_ext = traj.samples[start + context_len : start + context_len + n_extended]
        mean = context.mean(axis=0)
        std = context.std(axis=0)
        if np.any(std < _STD_FLOOR):
            raise DataError(f"system {sid}: constant channel in the evaluation context")
        ctx_std = (context - mean) / std
        if forecaster is None:
            pred_std = scaleformer.autoregressive_rollout(model, ctx_std, n_extended)
        else:
            pred_std = forecaster(ctx_std, n_extended, (true_ext - mean) / std)
        pred = pred_std * std + mean
        metric_seed = derive_seed(seed, "eval", "metrics", sid)
        dim_gap = abs(
            _forecast_dimension(pred, metric_seed)
            - metrics.correlation_dimension(true_ext, seed=metric_seed)
        )
        return {
            "system": sid,
            "smape_128": metrics.smape(pred[:128], true_ext[:128]),
            "smape_512": metrics.smape(pred[:rollout_steps], true_ext[:rollout_steps]),
            "d_frac": dim_gap,
            "d_stsp": metrics.d_stsp(pred, true_ext, seed=metric_seed),
        }

    records = parallel_map(eval_one, list(zip(ids, held_out)))
    return metrics.build_report(records, seed=derive_seed(seed, "eval", "bootstrap"))


def checkpoint_roundtrip(model, path=None, extra=None):
    """Save then load; the result's forward is bitwise identical."""
    if path is None:
        with tempfile.TemporaryDirectory() as tmp:
            p = Path(tmp) / "model.chxm"
            scaleformer.save_checkpoint(p, model, extra=extra)
            loaded, _ = scaleformer.load_checkpoint(p)
            return loaded
    scaleformer.save_checkpoint(path, model, extra=extra)
    loaded, _ = scaleformer.load_checkpoint(path)
    return loaded
