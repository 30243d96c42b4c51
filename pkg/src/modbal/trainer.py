"""Balanced multi-modal training loop, Adam, evaluation and overhead profiling."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .autodiff import Tape, backward, no_tape
from .balance import (
    FimDiagonal,
    ModalityPartition,
    ParamSnapshot,
    awc_loss,
    compute_fim,
    in_window,
    partition_modalities,
    snapshot,
)
from .config import ExperimentConfig, OptimConfig
from .data import Dataset, batches, generate
from .errors import NonFiniteLossError
from .metrics import mpjpe, mpjpe_loss, pa_mpjpe
from .models import MODALITIES, MultiModalModel, forward, mask_of, modality_parameters
from .shapley import shapley_scores

log = logging.getLogger(__name__)


# -- optimiser -------------------------------------------------------------------


@dataclass
class OptimState:
    hyper: OptimConfig = field(default_factory=OptimConfig)
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def lr_at(epoch: int, hyper: OptimConfig) -> float:
    """Step schedule: ``lr * gamma ** (epoch // lr_step_epochs)``."""
    return hyper.lr * hyper.lr_gamma ** (epoch // hyper.lr_step_epochs)


def adam_step(params, grads: Mapping[str, np.ndarray], state: OptimState, epoch: int = 0) -> None:
    """One in-place Adam update with L2 weight decay folded into the gradient."""
    if isinstance(params, MultiModalModel):
        params = params.params
    h = state.hyper
    state.step += 1
    t = state.step
    lr = lr_at(epoch, h)
    bc1 = 1.0 - h.beta1 ** t
    bc2 = 1.0 - h.beta2 ** t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"adam_step: gradient for {name} has shape {g.shape}, parameter {p.shape}")
        if h.weight_decay:
            g = g + h.weight_decay * p.data
        if name not in state.m:
            state.m[name] = np.zeros(p.shape)
            state.v[name] = np.zeros(p.shape)
        m = state.m[name]
        v = state.v[name]
        m *= h.beta1
        m += (1.0 - h.beta1) * g
        v *= h.beta2
        v += (1.0 - h.beta2) * (g * g)
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + h.eps)


# -- evaluation --------------------------------------------------------------------


def predict(model: MultiModalModel, ds: Dataset, mask: int | None = None, batch_size: int = 512) -> np.ndarray:
    mask = (1 << len(MODALITIES)) - 1 if mask is None else mask
    out = []
    with no_tape():
        for start in range(0, len(ds), batch_size):
            rows = np.arange(start, min(start + batch_size, len(ds)))
            b = ds.take(rows)
            out.append(forward(model, b.inputs, mask).data)
    return np.concatenate(out)


def evaluate(model: MultiModalModel, ds: Dataset, mask: int | None = None, batch_size: int = 512) -> dict[str, float]:
    """MPJPE and PA-MPJPE (mm) over the whole dataset."""
    pred = predict(model, ds, mask, batch_size)
    pa, flags = pa_mpjpe(pred, ds.targets, return_flags=True)
    return {"mpjpe": mpjpe(pred, ds.targets), "pa_mpjpe": pa, "pa_degenerate": int(flags.sum())}


# -- training ---------------------------------------------------------------------


@dataclass
class TrainReport:
    config: ExperimentConfig
    seed: int
    epochs: list[dict] = field(default_factory=list)
    scores: list[dict] = field(default_factory=list)
    balance: list[dict] = field(default_factory=list)
    timing: list[dict] = field(default_factory=list)
    final: dict = field(default_factory=dict)
    model: MultiModalModel | None = field(default=None, repr=False)

    def final_shapley(self) -> dict[str, float]:
        """Mean per-modality scores over the last epoch."""
        if not self.epochs:
            return {m: float("nan") for m in MODALITIES}
        last = self.epochs[-1]
        return {m: last[f"phi_{m}"] for m in MODALITIES}


def _epoch_seed(seed: int, epoch: int) -> int:
    return seed * 100_003 + epoch


def _fim_rows(n: int, size: int, seed: int, epoch: int) -> np.ndarray:
    if size >= n:
        return np.arange(n)
    rng = np.random.default_rng([seed, epoch, 7919])
    return np.sort(rng.choice(n, size=size, replace=False))


def _nan_abort(tape: Tape, epoch: int, b: int) -> NonFiniteLossError:
    op = tape.first_nonfinite[1] if tape.first_nonfinite else None
    where = f"primitive '{op}' (node {tape.first_nonfinite[0]})" if op else "an unknown op"
    return NonFiniteLossError(
        f"non-finite loss at epoch {epoch}, batch {b}; first non-finite value produced by {where}",
        op=op, epoch=epoch, batch=b,
    )


def train(
    config: ExperimentConfig,
    datasets: tuple[Dataset, Dataset] | None = None,
    on_epoch: Callable[[dict], None] | None = None,
) -> TrainReport:
    """Run the full schedule; deterministic given the config (seeds included).

    Within the learning window each epoch starts by snapshotting the weights,
    estimating the diagonal Fisher on a seeded subsample and re-partitioning
    modalities from the previous epoch's mean Shapley scores. Every batch is
    scored before its update.
    """
    config.validate()
    run, bal = config.run, config.balance
    train_ds, test_ds = datasets if datasets is not None else generate(config.data)
    model = MultiModalModel(config.model_config(), seed=run.seed)
    state = OptimState(hyper=config.optim)
    players = config.players()
    active = mask_of(players)
    params = model.params
    scoring = run.score_shapley or bal.window_epochs > 0
    report = TrainReport(config=config, seed=run.seed, model=model)

    def task(m, sample):
        return mpjpe_loss(forward(m, sample.inputs, active), sample.targets)

    prev_scores: dict[str, float] | None = None
    if bal.window_epochs > 0 and run.epochs > 0:
        first = next(batches(train_ds, run.batch_size, _epoch_seed(run.seed, 0)))
        prev_scores = shapley_scores(model, first, players).per_modality

    for epoch in range(run.epochs):
        t_epoch = time.perf_counter()
        timing = {"epoch": epoch, "fim": 0.0, "pose_est": 0.0, "correlation": 0.0, "score_calc": 0.0,
                  "forward": 0.0, "backward": 0.0, "optim": 0.0, "eval": 0.0}
        window = in_window(epoch, bal)
        snap: ParamSnapshot | None = None
        fim: FimDiagonal | None = None
        partition: ModalityPartition | None = None
        if window:
            t0 = time.perf_counter()
            enc_names = [n for m in players for n in modality_parameters(model, m)]
            snap = snapshot(model, epoch, enc_names)
            rows = _fim_rows(len(train_ds), bal.fim_sample_size, run.seed, epoch)
            fim = compute_fim(model, (train_ds.take([r]) for r in rows), task, enc_names, epoch)
            partition = partition_modalities({m: prev_scores[m] for m in players})
            timing["fim"] = time.perf_counter() - t0

        losses, awc_values, l2_values = [], [], []
        epoch_scores: list[dict[str, float]] = []
        for b, batch in enumerate(batches(train_ds, run.batch_size, _epoch_seed(run.seed, epoch))):
            if scoring:
                rep = shapley_scores(model, batch, players, epoch=epoch, batch_index=b, timings=timing)
                epoch_scores.append(rep.per_modality)
                report.scores.append(rep.row())

            t0 = time.perf_counter()
            with Tape() as tape:
                loss = mpjpe_loss(forward(model, batch.inputs, active), batch.targets)
                task_value = float(loss.data)
                if window:
                    reg = awc_loss(model, snap, fim, partition, bal)
                    awc_values.append(float(reg.data))
                    loss = loss + reg
            t1 = time.perf_counter()
            if not np.isfinite(loss.data):
                raise _nan_abort(tape, epoch, b)
            grads = backward(loss, tape, params)
            t2 = time.perf_counter()
            adam_step(params, grads, state, epoch)
            t3 = time.perf_counter()
            timing["forward"] += t1 - t0
            timing["backward"] += t2 - t1
            timing["optim"] += t3 - t2
            losses.append(task_value)
            if config.optim.weight_decay:
                l2_values.append(0.5 * config.optim.weight_decay * sum(float((p.data * p.data).sum()) for p in params.values()))

        if epoch_scores:
            prev_scores = {m: float(np.mean([s[m] for s in epoch_scores])) for m in MODALITIES}
        t0 = time.perf_counter()
        metrics = evaluate(model, test_ds, active, run.eval_batch_size)
        timing["eval"] = time.perf_counter() - t0
        timing["total"] = time.perf_counter() - t_epoch

        row = {
            "epoch": epoch,
            "lr": lr_at(epoch, config.optim),
            "train_loss": float(np.mean(losses)) if losses else float("nan"),
            "test_mpjpe": metrics["mpjpe"],
            "test_pa_mpjpe": metrics["pa_mpjpe"],
        }
        for m in MODALITIES:
            row[f"phi_{m}"] = prev_scores[m] if (epoch_scores and prev_scores) else float("nan")
        row["partition"] = partition.mask if partition is not None else -1
        row["awc_loss_mean"] = float(np.mean(awc_values)) if awc_values else 0.0
        row["l2_term_mean"] = float(np.mean(l2_values)) if l2_values else 0.0
        report.epochs.append(row)
        report.timing.append(timing)
        if window:
            group_fim = fim.group_means(model)
            brow = {
                "epoch": epoch,
                "partition": partition.mask,
                "alpha_S": bal.alpha_superior,
                "alpha_I": bal.alpha_inferior,
                "awc_loss_value": row["awc_loss_mean"],
                "fim_sample_size": fim.sample_count,
            }
            brow.update({f"fim_mean_{m}": group_fim[m] for m in MODALITIES})
            report.balance.append(brow)
        if on_epoch is not None:
            on_epoch(row)
        if run.log_every and epoch % run.log_every == 0:
            log.info("epoch %d loss %.3f test mpjpe %.3f pa %.3f", epoch, row["train_loss"],
                     row["test_mpjpe"], row["test_pa_mpjpe"])

    final = evaluate(model, test_ds, active, run.eval_batch_size)
    report.final = {
        "test_mpjpe": final["mpjpe"],
        "test_pa_mpjpe": final["pa_mpjpe"],
        "pa_degenerate": final["pa_degenerate"],
        "weight_decay_mode": "l2-in-gradient",
        "epochs": run.epochs,
        "modalities": "".join(players),
    }
    report.final.update({f"final_phi_{m}": v for m, v in report.final_shapley().items()})
    return report


# -- overhead profiling -----------------------------------------------------------


OVERHEAD_COLUMNS = ("Fusion", "#Modalities", "#Params", "Forward", "Backward", "Pose Est.", "Correlation",
                  "Score Calc.", "Overhead (%)")
_FUSION_LABELS = {"concat": "Concat.", "concat_mlp": "MLP", "attention": "Attention"}


def profile_overhead(config: ExperimentConfig, n_batches: int = 60, datasets=None) -> dict:
    """Median per-batch timings (ms) of training vs contribution scoring.

    Overhead (%) = (pose est. + correlation + score calc.) / (forward + backward).
    Runs real optimisation steps so the timings reflect a training batch.
    """
    config.validate()
    run = config.run
    train_ds, _ = datasets if datasets is not None else generate(config.data)
    model = MultiModalModel(config.model_config(), seed=run.seed)
    state = OptimState(hyper=config.optim)
    players = config.players()
    active = mask_of(players)
    samples = {k: [] for k in ("forward", "backward", "pose_est", "correlation", "score_calc")}
    epoch = 0
    done = 0
    while done < n_batches:
        for batch in batches(train_ds, run.batch_size, _epoch_seed(run.seed, epoch)):
            timings: dict[str, float] = {}
            shapley_scores(model, batch, players, timings=timings)
            t0 = time.perf_counter()
            with Tape() as tape:
                loss = mpjpe_loss(forward(model, batch.inputs, active), batch.targets)
            t1 = time.perf_counter()
            grads = backward(loss, tape, model.params)
            t2 = time.perf_counter()
            adam_step(model, grads, state, 0)
            samples["forward"].append(t1 - t0)
            samples["backward"].append(t2 - t1)
            for k in ("pose_est", "correlation", "score_calc"):
                samples[k].append(timings[k])
            done += 1
            if done >= n_batches:
                break
        epoch += 1
    med = {k: 1e3 * float(np.median(v)) for k, v in samples.items()}
    overhead = 100.0 * (med["pose_est"] + med["correlation"] + med["score_calc"]) / (med["forward"] + med["backward"])
    return {
        "Fusion": _FUSION_LABELS[config.model.fusion],
        "#Modalities": len(players),
        "#Params": model.num_scalars(),
        "Forward": med["forward"],
        "Backward": med["backward"],
        "Pose Est.": med["pose_est"],
        "Correlation": med["correlation"],
        "Score Calc.": med["score_calc"],
        "Overhead (%)": overhead,
        "batch_size": run.batch_size,
        "n_batches": n_batches,
    }
