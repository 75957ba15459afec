"""Offline phase: behavioral cloning of the centralized controller.

Trajectories recorded under the closed-form controller provide
(observation history, target acceleration) pairs; the model is trained
jointly (both branches) with Adam on the mean squared acceleration
error, and checkpoints are selected by rolled-out control quality on the
validation split.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import flocking
from .flocking import FlockingConfig, Trajectory
from .graphs import ShiftRegister
from .model import (
    WideDeepParams,
    grad_all,
    init_params,
    wdgnn_forward_delayed,
)

ARCH_WIDE_DEEP = "widedeep"
ARCH_DEEP_ONLY = "deep_only"
ARCH_WIDE_ONLY = "wide_only"


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class AdamState:
    """Bias-corrected Adam accumulators, keyed like the parameter dict."""

    m: dict
    v: dict
    step: int
    lr: float
    beta1: float
    beta2: float
    eps: float
    lr_overrides: dict = None   # per-key step sizes, falls back to lr

    @classmethod
    def init(cls, params, lr=5e-4, beta1=0.9, beta2=0.999, eps=1e-8,
             lr_overrides=None):
        zeros = {k: np.zeros_like(np.asarray(t, dtype=np.float64))
                 for k, t in params.items()}
        return cls({k: z.copy() for k, z in zeros.items()}, zeros, 0,
                   lr, beta1, beta2, eps, lr_overrides)

    def lr_for(self, key):
        if self.lr_overrides and key in self.lr_overrides:
            return self.lr_overrides[key]
        return self.lr


def adam_step(state: AdamState, params, grads):
    """One Adam update; returns a fresh (state, params) pair."""
    if set(params) != set(grads):
        raise ValueError("parameter and gradient keys differ")
    t = state.step + 1
    new_m, new_v, new_p = {}, {}, {}
    for k in params:
        p = np.asarray(params[k], dtype=np.float64)
        g = np.asarray(grads[k], dtype=np.float64)
        if p.shape != g.shape:
            raise ValueError(f"shape mismatch for {k}: {p.shape} vs {g.shape}")
        m = state.beta1 * state.m[k] + (1 - state.beta1) * g
        v = state.beta2 * state.v[k] + (1 - state.beta2) * g * g
        m_hat = m / (1 - state.beta1 ** t)
        v_hat = v / (1 - state.beta2 ** t)
        new_m[k] = m
        new_v[k] = v
        new_p[k] = p - state.lr_for(k) * m_hat / (np.sqrt(v_hat) + state.eps)
    new_state = AdamState(new_m, new_v, t, state.lr, state.beta1,
                          state.beta2, state.eps, state.lr_overrides)
    return new_state, new_p


def clip_global_norm(grads, max_norm):
    """Scale all gradients down so their joint 2-norm is at most max_norm."""
    total = math.sqrt(sum(float(np.sum(np.square(g)))
                          for g in grads.values()))
    if total <= max_norm or total == 0.0:
        return grads, total
    scale = max_norm / total
    return {k: g * scale for k, g in grads.items()}, total


def erm_loss(params: WideDeepParams, batch):
    """Mean imitation loss over (register, target) samples with gradients.

    Per-sample loss is the squared Frobenius error of the predicted
    accelerations, averaged over agents.
    """
    if not batch:
        raise ValueError("empty batch")
    grads = {k: np.zeros_like(np.asarray(t, dtype=np.float64))
             for k, t in params.to_dict().items()}
    total = 0.0
    scale = 1.0 / len(batch)
    for reg, target in batch:
        out, tape = wdgnn_forward_delayed(reg, params)
        n = out.shape[0]
        resid = out - target
        total += float(np.sum(resid * resid)) / n
        upstream = (2.0 / n) * scale * resid
        for k, g in grad_all(tape, upstream).items():
            grads[k] += g
    return total * scale, grads


@dataclass
class Dataset:
    train: list
    validation: list
    test: list
    config: FlockingConfig
    seed: int = 0

    def splits(self):
        return {"train": self.train, "validation": self.validation,
                "test": self.test}


def generate_dataset(cfg: FlockingConfig, n_train, n_val, n_test, seed):
    """Rollouts under the centralized controller, split without overlap.

    Per-trajectory seeds are spawned from the master seed, so any
    trajectory can be regenerated independently and reruns are
    bit-identical.
    """
    children = np.random.SeedSequence(seed).spawn(n_train + n_val + n_test)
    trajs = [flocking.generate_trajectory(c, cfg) for c in children]
    return Dataset(trajs[:n_train],
                   trajs[n_train:n_train + n_val],
                   trajs[n_train + n_val:],
                   cfg, seed)


def save_dataset(path, dataset: Dataset):
    """Directory of per-trajectory CSVs plus a manifest.

    Written deterministically: rerunning generation with the same seed
    reproduces every byte.
    """
    root = Path(path)
    cfg = dataset.config
    manifest = {
        "seed": dataset.seed,
        "config": asdict(cfg),
        "splits": {},
        "metrics": {},
    }
    for split, trajs in dataset.splits().items():
        sub = root / split
        sub.mkdir(parents=True, exist_ok=True)
        names = []
        for i, traj in enumerate(trajs):
            name = f"traj_{i:03d}.csv"
            flocking.save_trajectory(sub / name, traj)
            names.append(name)
        manifest["splits"][split] = names
        if trajs:
            totals = [flocking.velocity_variation_total(t) for t in trajs]
            finals = [flocking.velocity_variation_final(t) for t in trajs]
            manifest["metrics"][split] = {
                "variation_total_mean": float(np.mean(totals)),
                "variation_final_mean": float(np.mean(finals)),
            }
    with open(root / "manifest.json", "w") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=1)
        fh.write("\n")


def load_dataset(path):
    root = Path(path)
    with open(root / "manifest.json") as fh:
        manifest = json.load(fh)
    cfg = FlockingConfig(**manifest["config"])
    splits = {}
    for split, names in manifest["splits"].items():
        splits[split] = [
            flocking.load_trajectory(root / split / name, cfg.dt,
                                     cfg.comm_radius)
            for name in names
        ]
    return Dataset(splits.get("train", []), splits.get("validation", []),
                   splits.get("test", []), cfg, manifest["seed"])


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 2
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 10.0  # 0 disables clipping
    wide_lr: float = None    # step size for the filter-bank taps; the
                             # linear branch sits in a much stiffer
                             # landscape than the saturating branch
    wide_order: int = 3
    deep_order: int = 3
    widths: list = field(default_factory=lambda: [32])
    nonlinearity: str = "tanh"
    arch: str = ARCH_WIDE_DEEP
    val_every: int = 2
    seed: int = 0


def _frozen_keys(params: WideDeepParams, arch):
    if arch == ARCH_WIDE_DEEP:
        return set()
    if arch == ARCH_DEEP_ONLY:
        return {"alpha_wide"} | {f"wide.B.{k}"
                                 for k in range(params.wide.order + 1)}
    if arch == ARCH_WIDE_ONLY:
        frozen = {"alpha_deep"}
        for l, taps in enumerate(params.deep.layers):
            frozen |= {f"deep.A.{l}.{k}" for k in range(taps.order + 1)}
        return frozen
    raise ValueError(f"unknown arch {arch!r}")


class ModelController:
    """Closed-loop policy: accumulates the observation history of one
    rollout and evaluates the model on it each step."""

    def __init__(self, params: WideDeepParams, comm_radius):
        depth = max(params.wide.order,
                    sum(t.order for t in params.deep.layers))
        self.params = params
        self.comm_radius = comm_radius
        self.register = ShiftRegister(depth)

    def __call__(self, t, state):
        s = flocking.build_comm_graph(state, self.comm_radius)
        x = flocking.local_features(state, s)
        self.register.push(s, x)
        out, _ = wdgnn_forward_delayed(self.register, self.params)
        return out


def rollout_model(params: WideDeepParams, state0, cfg: FlockingConfig):
    return flocking.rollout(ModelController(params, cfg.comm_radius),
                            state0, cfg)


def validation_metric(params: WideDeepParams, dataset: Dataset):
    """Mean rolled-out total velocity variation on the validation split."""
    vals = []
    for traj in dataset.validation:
        run = rollout_model(params, traj.states[0], dataset.config)
        vals.append(flocking.velocity_variation_total(run))
    return float(np.mean(vals))


def batch_samples(trajs, wide_order):
    """All (history register, target) pairs of a trajectory batch, in a
    fixed order so reductions are deterministic."""
    out = []
    for traj in trajs:
        for t in range(traj.n_steps):
            out.append((traj.register_at(t, wide_order),
                        traj.targets_at(t)))
    return out


def _checked_validation(params, dataset):
    # runaway parameters surface here as non-finite states in the rollout
    try:
        return validation_metric(params, dataset)
    except (ValueError, FloatingPointError) as exc:
        raise TrainingDiverged(f"validation rollout failed: {exc}") from exc


def train(dataset: Dataset, tcfg: TrainConfig, progress=None):
    """Offline training loop; returns (best params, history rows).

    Model selection uses the rolled-out validation metric, not the
    imitation loss, so the checkpoint reflects control quality.
    """
    if not dataset.train:
        raise ValueError("empty training set")
    rng = np.random.default_rng(tcfg.seed)
    params = init_params(rng, flocking.N_FEATURES, list(tcfg.widths),
                         tcfg.wide_order, tcfg.deep_order, 2,
                         tcfg.nonlinearity)
    if tcfg.arch == ARCH_DEEP_ONLY:
        params.alpha_wide = 0.0
    elif tcfg.arch == ARCH_WIDE_ONLY:
        params.alpha_deep = 0.0
    frozen = _frozen_keys(params, tcfg.arch)

    pdict = params.to_dict()
    base_lr = tcfg.lr
    overrides = None
    if tcfg.wide_lr is not None:
        if tcfg.arch == ARCH_WIDE_ONLY:
            # with no saturating branch in front of the readout, every
            # trainable parameter sits in the stiff linear path
            base_lr = tcfg.wide_lr
        else:
            overrides = {f"wide.B.{k}": tcfg.wide_lr
                         for k in range(params.wide.order + 1)}
    opt = AdamState.init(pdict, base_lr, tcfg.beta1, tcfg.beta2, tcfg.eps,
                         overrides)

    best_metric = _checked_validation(params, dataset)
    best_params = params.copy()
    history = [{"epoch": 0, "train_loss": float("nan"),
                "val_metric": best_metric}]

    n_train = len(dataset.train)
    for epoch in range(1, tcfg.epochs + 1):
        order = rng.permutation(n_train)
        epoch_loss = 0.0
        n_batches = 0
        for start in range(0, n_train, tcfg.batch_size):
            idx = sorted(order[start:start + tcfg.batch_size])
            batch = batch_samples([dataset.train[i] for i in idx],
                                  tcfg.wide_order)
            params = params.replace_from_dict(pdict)
            loss, grads = erm_loss(params, batch)
            if not np.isfinite(loss):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}, batch {n_batches}"
                )
            for k in frozen:
                grads[k] = np.zeros_like(grads[k])
            if tcfg.clip_norm > 0:
                grads, _ = clip_global_norm(grads, tcfg.clip_norm)
            opt, pdict = adam_step(opt, pdict, grads)
            epoch_loss += loss
            n_batches += 1
        params = params.replace_from_dict(pdict)
        row = {"epoch": epoch, "train_loss": epoch_loss / n_batches,
               "val_metric": float("nan")}
        if epoch % tcfg.val_every == 0 or epoch == tcfg.epochs:
            metric = _checked_validation(params, dataset)
            row["val_metric"] = metric
            if metric < best_metric:
                best_metric = metric
                best_params = params.copy()
        history.append(row)
        if progress is not None:
            progress(row)
    return best_params, history
