"""Acceptance gate: one test per criterion, each reporting a PASS/FAIL line.

The lines are collected in ``helpers.ACCEPTANCE`` and printed in the
terminal summary (see conftest.py), so they show up without ``-s``.
Training experiments run at the default configuration and are cached for
the session, so the imbalance and balancing criteria share baseline runs.
"""

import csv
import time
from fractions import Fraction

import numpy as np
import pytest
from scipy.optimize import least_squares
from scipy.spatial.transform import Rotation

from modbal.autodiff import PRIMITIVES, Tape, backward
from modbal.balance import AwcConfig, alpha_for, awc_loss, compute_fim, partition_modalities, snapshot, task_loss
from modbal.cli import main as cli_main
from modbal.config import ExperimentConfig
from modbal.data import batches, generate
from modbal.metrics import mpjpe_loss, pa_mpjpe, procrustes_align
from modbal.models import EMPTY_MASK, FUSIONS, MODALITIES, MultiModalModel, forward, mask_of, modality_parameters
from modbal.shapley import combine, efficiency_gap, profit, shapley_oracle, shapley_scores, weight_table
from modbal.trainer import OVERHEAD_COLUMNS, OptimState, adam_step, profile_overhead, train

import helpers
from helpers import random_batch, small_model

SEEDS = (0, 1, 2)


def record(number, title, checks, detail=""):
    """Log one PASS/FAIL line for a criterion and assert on it."""
    failed = [name for name, ok in checks.items() if not ok]
    status = "PASS" if not failed else "FAIL"
    line = f"criterion {number:>2} {status}: {title}"
    if detail:
        line += f" ({detail})"
    if failed:
        line += f" [failed: {', '.join(failed)}]"
    helpers.ACCEPTANCE.append(line)
    print(line)
    assert not failed, line


# -- cached default-scale runs -----------------------------------------------------


class Runs:
    """Default-config training runs keyed by (modalities, window, seed)."""

    def __init__(self):
        self.reports, self.seconds = {}, {}

    def get(self, modalities, window, seed):
        key = (modalities, window, seed)
        if key not in self.reports:
            cfg = ExperimentConfig()
            cfg.run.modalities, cfg.run.seed, cfg.data.seed, cfg.run.log_every = modalities, seed, seed, 0
            cfg.balance.window_epochs = window
            start = time.perf_counter()
            self.reports[key] = train(cfg)
            self.seconds[key] = time.perf_counter() - start
        return self.reports[key]

    def cost(self, keys):
        return sum(self.seconds[k] for k in keys)


@pytest.fixture(scope="session")
def runs():
    return Runs()


# -- 1. Shapley correctness ----------------------------------------------------------


def test_criterion_1_shapley_correctness():
    start = time.perf_counter()
    worst_oracle = worst_efficiency = 0.0
    for seed in range(50):
        rng = np.random.default_rng(seed)
        model = small_model(FUSIONS[seed % 3], seed=seed)
        for p in model.params.values():
            p.data += rng.normal(scale=0.3, size=p.shape)
        batch = random_batch(rng, batch=int(rng.integers(2, 12)))
        fast, slow = shapley_scores(model, batch), shapley_oracle(model, batch)
        worst_oracle = max(worst_oracle, *(abs(fast.per_modality[m] - slow.per_modality[m]) for m in MODALITIES))
        worst_efficiency = max(worst_efficiency, efficiency_gap(fast))

    # symmetry: L and M share encoder weights and inputs, and the concat head treats them alike
    rng = np.random.default_rng(99)
    dims = {"R": 6, "L": 5, "M": 5, "W": 3}
    model = small_model("concat", dims=dims)
    for name in modality_parameters(model, "L"):
        model.params[name.replace("enc.L", "enc.M")].data[...] = model.params[name].data
    w = model.params["head.weight"].data
    w[16:24] = w[8:16]
    batch = random_batch(rng, dims=dims)
    batch.inputs["M"] = batch.inputs["L"].copy()
    sym = shapley_scores(model, batch)
    symmetry = abs(sym.per_modality["L"] - sym.per_modality["M"])

    # dummy: W's encoder output is forced to zero, so W never changes any prediction
    model = small_model("attention")
    last = max(n for n in modality_parameters(model, "W") if n.endswith(".weight"))
    model.params[last].data[...] = 0.0
    model.params[last.replace("weight", "bias")].data[...] = 0.0
    dummy = abs(shapley_scores(model, random_batch(rng)).per_modality["W"])
    elapsed = time.perf_counter() - start

    record(1, "Shapley scores vs permutation oracle", {
        "oracle<=1e-10": worst_oracle <= 1e-10,
        "efficiency<=1e-9": worst_efficiency <= 1e-9,
        "symmetry<=1e-9": symmetry <= 1e-9,
        "dummy<=1e-9": dummy <= 1e-9,
        "runtime<10s": elapsed < 10,
    }, f"max oracle gap {worst_oracle:.1e}, efficiency {worst_efficiency:.1e}, symmetry {symmetry:.1e}, "
       f"dummy {dummy:.1e}, {elapsed:.1f}s")


# -- 2. weight table --------------------------------------------------------------------


def test_criterion_2_weight_table():
    table = weight_table(4)
    exact = {s: Fraction(table[s]).limit_denominator(100) for s in table}
    weights_ok = exact == {0: Fraction(1, 4), 1: Fraction(1, 12), 2: Fraction(1, 12), 3: Fraction(1, 4)}

    # symbolic expansion of phi^R over the 16 coalition profits
    def coalition(label):
        return mask_of([c for c in label if c != "0"])

    q, t = Fraction(1, 4), Fraction(1, 12)
    expected = {m: Fraction(0) for m in range(16)}
    for label, c in [("RLMW", q), ("0LMW", -q), ("R000", q),
                     ("RL00", t), ("0L00", -t), ("R0M0", t), ("00M0", -t), ("R00W", t), ("000W", -t),
                     ("RLM0", t), ("0LM0", -t), ("RL0W", t), ("0L0W", -t), ("R0MW", t), ("00MW", -t)]:
        expected[coalition(label)] += c
    got = {}
    for mask in range(16):
        unit = {m: 0.0 for m in range(16)}
        unit[mask] = 1.0
        got[mask] = Fraction(combine(unit)["R"]).limit_denominator(100)
    # the closed form also carries -s(empty)/4, which vanishes because s(empty) = 0
    expansion_ok = all(got[m] == expected[m] for m in range(1, 16)) and got[EMPTY_MASK] == -q
    record(2, "factorial weights and phi^R expansion", {"weights": weights_ok, "expansion": expansion_ok},
           "weights by |S|: " + ", ".join(f"{s}:{exact[s]}" for s in sorted(exact)))


# -- 3. Pearson profit ----------------------------------------------------------------------


def test_criterion_3_pearson_profit():
    rng = np.random.default_rng(3)
    y = rng.normal(size=(64, 17, 3)) * 100
    self_profit = profit(y, y)
    const_profit = profit(y, np.full_like(y, 12.5))
    pred = y + rng.normal(size=y.shape) * 40
    base = profit(y, pred)
    affine = max(abs(profit(y, a * pred + b) - base) for a, b in [(2.0, 5.0), (0.01, -300.0), (1e3, 1e4)])
    record(3, "Pearson profit", {
        "self==3j": self_profit == 51.0,
        "constant==0": const_profit == 0.0,
        "affine<=1e-12": affine <= 1e-12,
    }, f"self {self_profit!r}, constant {const_profit!r}, affine drift {affine:.1e}")


# -- 4. autodiff and FIM ----------------------------------------------------------------------


def test_criterion_4_autodiff_and_fim():
    import test_autodiff as ta

    worst = 0.0
    for kind in PRIMITIVES:
        rng = np.random.default_rng(len(kind) * 7919 + sum(map(ord, kind)))
        worst = max(worst, *(ta._fd_check(kind, *ta._case(kind, rng), rng) for _ in range(ta.CASES)))

    import test_balance as tb

    hand = float(compute_fim(tb.LinearModel(1.0), [(2.0, 0.0)], tb.squared_error).entries["w"])

    rng = np.random.default_rng(4)
    model = small_model("attention")
    before = {n: p.data.copy() for n, p in model.params.items()}
    batch = random_batch(rng, batch=5)
    fim = compute_fim(model, [_row(batch, i) for i in range(5)], task_loss)
    nonneg = all(np.all(v >= 0) for v in fim.entries.values())
    restored = all(np.array_equal(model.params[n].data, v) for n, v in before.items())
    record(4, "finite differences and Fisher diagonal", {
        "fd<=1e-4": worst <= 1e-4,
        "hand==64": hand == 64.0,
        "nonnegative": nonneg,
        "params restored": restored,
    }, f"{len(PRIMITIVES)} primitives x {ta.CASES} cases, worst rel err {worst:.1e}, hand FIM {hand!r}")


def _row(batch, i):
    from modbal.data import Batch

    return Batch({m: x[i:i + 1] for m, x in batch.inputs.items()}, batch.targets[i:i + 1], batch.indices[i:i + 1])


# -- 5. AWC gradient identity -------------------------------------------------------------------


def test_criterion_5_awc_gradient_identity():
    worst, shared_max, at_snapshot = 0.0, 0.0, 0.0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        model = small_model(FUSIONS[seed % 3], seed=seed)
        batch = random_batch(rng, batch=4)
        fim = compute_fim(model, [_row(batch, i) for i in range(4)], task_loss)
        snap = snapshot(model)
        part = partition_modalities(dict(zip(MODALITIES, rng.normal(size=4))))
        cfg = AwcConfig(alpha_superior=float(rng.uniform(1, 3e4)), alpha_inferior=float(rng.uniform(0, 3e4)))
        at_snapshot = max(at_snapshot, abs(float(awc_loss(model, snap, fim, part, cfg).data)))
        for p in model.params.values():
            p.data += rng.normal(scale=0.1, size=p.shape)
        with Tape() as tape:
            loss = awc_loss(model, snap, fim, part, cfg)
        grads = backward(loss, tape, model.params)
        for m in MODALITIES:
            alpha = alpha_for(m, part, cfg)
            for name in modality_parameters(model, m):
                expected = alpha * fim.entries[name] * (model.params[name].data - snap.entries[name])
                scale = np.maximum(np.abs(expected), 1e-300)
                nz = expected != 0
                err = np.abs(grads[name] - expected)
                worst = max(worst, float((err[nz] / scale[nz]).max()) if nz.any() else float(err.max()))
        shared_max = max(shared_max, *(float(np.abs(grads[n]).max()) for n in modality_parameters(model, "shared")))
    record(5, "AWC gradient identity", {
        "rtol<=1e-6": worst <= 1e-6,
        "shared grad==0": shared_max == 0.0,
        "zero at snapshot": at_snapshot == 0.0,
    }, f"20 cases, worst rel err {worst:.1e}")


# -- 6. Procrustes ---------------------------------------------------------------------------------


def _oracle_pa(pred, gt):
    def residual(x):
        rot = Rotation.from_rotvec(x[:3]).as_matrix()
        return (np.exp(x[3]) * pred @ rot.T + x[4:] - gt).ravel()

    best = None
    for start in Rotation.random(6, random_state=0).as_rotvec():
        x0 = np.concatenate([start, [0.0], gt.mean(0) - pred.mean(0)])
        fit = least_squares(residual, x0, xtol=1e-15, ftol=1e-15, gtol=1e-15)
        if best is None or fit.cost < best.cost:
            best = fit
    return float(np.linalg.norm(residual(best.x).reshape(gt.shape), axis=-1).mean())


def test_criterion_6_procrustes():
    rng = np.random.default_rng(6)
    gt = rng.normal(size=(1000, 17, 3)) * 100
    pred = gt + rng.normal(size=gt.shape) * rng.uniform(1, 150, size=(1000, 1, 1))
    per_pa = np.array([pa_mpjpe(pred[i:i + 1], gt[i:i + 1]) for i in range(1000)])
    per_mp = np.linalg.norm(pred - gt, axis=-1).mean(axis=1)
    bounded = bool(np.all(per_pa <= per_mp + 1e-9))
    # the alignment minimises the squared error, which therefore never increases
    aligned, _ = procrustes_align(pred, gt)
    sq_ok = bool(np.all(((aligned - gt) ** 2).sum(axis=(1, 2)) <= ((pred - gt) ** 2).sum(axis=(1, 2)) * (1 + 1e-12)))
    worst = int(np.argmax(per_pa - per_mp))

    rots = Rotation.random(50, random_state=7).as_matrix()
    exact_gt = gt[:50]
    exact_pred = np.stack([1.7 * g @ r.T + rng.normal(size=3) * 50 for g, r in zip(exact_gt, rots)])
    exact = pa_mpjpe(exact_pred, exact_gt)

    oracle_gap = max(abs(pa_mpjpe(pred[i:i + 1], gt[i:i + 1]) - _oracle_pa(pred[i], gt[i])) for i in range(10))
    record(6, "Procrustes alignment", {
        "PA<=MPJPE": bounded,
        "exact<=1e-8": exact <= 1e-8,
        "oracle<=1e-6": oracle_gap <= 1e-6,
    }, f"1000 pairs, {int((per_pa > per_mp + 1e-9).sum())} with PA > MPJPE (worst #{worst}: "
       f"{per_pa[worst]:.3f} vs {per_mp[worst]:.3f} mm), squared error never increased: {sq_ok}, "
       f"exact-case error {exact:.1e} mm, oracle gap {oracle_gap:.1e} mm")


# -- 7. imbalance phenomenon --------------------------------------------------------------------------


def test_criterion_7_imbalance(runs):
    keys = [(m, 0, s) for s in SEEDS for m in ("R", "L", "M", "W", "RL", "RLMW")]
    err = {k: runs.get(*k).final["test_mpjpe"] for k in keys}
    order_ok = [err[("R", 0, s)] < err[("L", 0, s)] < err[("M", 0, s)] < err[("W", 0, s)] for s in SEEDS]
    # paired gain of the 4-modality fusion over R+L; "noise" is the spread of that paired gain
    gain = np.array([err[("RL", 0, s)] - err[("RLMW", 0, s)] for s in SEEDS])
    noise = float(gain.std(ddof=1))
    elapsed = runs.cost(keys)
    table = "; ".join(
        f"seed {s}: " + " ".join(f"{m}={err[(m, 0, s)]:.2f}" for m in ("R", "L", "M", "W", "RL", "RLMW")) for s in SEEDS)
    record(7, "uni-modal ordering and no gain from naive 4-modality fusion", {
        "R<L<M<W on 3/3 seeds": all(order_ok),
        "full not better than RL beyond noise": float(gain.mean()) <= noise,
        "runtime<10min": elapsed < 600,
    }, f"{table}; mean gain of full over RL {gain.mean():+.3f} mm vs noise {noise:.3f} mm; {elapsed:.0f}s")


# -- 8. balancing benefit -------------------------------------------------------------------------------


def test_criterion_8_balancing_benefit(runs):
    base_keys = [("RLMW", 0, s) for s in SEEDS]
    awc_keys = [("RLMW", 20, s) for s in SEEDS]
    base = [runs.get(*k) for k in base_keys]
    awc = [runs.get(*k) for k in awc_keys]
    base_err = np.array([r.final["test_mpjpe"] for r in base])
    awc_err = np.array([r.final["test_mpjpe"] for r in awc])
    rel = (awc_err - base_err) / base_err
    inferior = ("M", "W")
    base_phi = {m: float(np.mean([r.final[f"final_phi_{m}"] for r in base])) for m in inferior}
    awc_phi = {m: float(np.mean([r.final[f"final_phi_{m}"] for r in awc])) for m in inferior}
    elapsed = runs.cost(awc_keys)  # the baseline runs are shared with criterion 7
    record(8, "AWC (20k/10k, K=20) vs naive joint training", {
        "mean MPJPE <= baseline": awc_err.mean() <= base_err.mean(),
        "each seed within 2%": bool(np.all(rel <= 0.02)),
        "inferior phi >= baseline": all(awc_phi[m] >= base_phi[m] for m in inferior),
        "runtime<15min": elapsed < 900,
    }, f"MPJPE baseline {base_err.mean():.2f} vs AWC {awc_err.mean():.2f} mm, per-seed rel change "
       + ", ".join(f"{v:+.1%}" for v in rel)
       + "; final phi " + ", ".join(f"{m} {base_phi[m]:.2f}->{awc_phi[m]:.2f}" for m in inferior)
       + f"; {elapsed:.0f}s")


# -- 9. window gate ------------------------------------------------------------------------------------------


def _plain_joint_training(cfg):
    train_ds, test_ds = generate(cfg.data)
    model = MultiModalModel(cfg.model_config(), seed=cfg.run.seed)
    state = OptimState(hyper=cfg.optim)
    for epoch in range(cfg.run.epochs):
        for batch in batches(train_ds, cfg.run.batch_size, cfg.run.seed * 100_003 + epoch):
            with Tape() as tape:
                loss = mpjpe_loss(forward(model, batch.inputs), batch.targets)
            adam_step(model, backward(loss, tape, model.params), state, epoch)
    return model


def test_criterion_9_window_gate(runs, tmp_path):
    k0 = runs.get("RLMW", 0, 0)
    cfg = ExperimentConfig()
    plain = _plain_joint_training(cfg)
    bitwise = all(np.array_equal(plain.params[n].data, k0.model.params[n].data) for n in plain.params)

    cfg = ExperimentConfig()
    cfg.balance.window_epochs = 0
    cfg.balance.alpha_superior, cfg.balance.alpha_inferior, cfg.run.epochs = 7.0, 3e5, 2
    short = ExperimentConfig()
    short.balance.window_epochs, short.run.epochs = 0, 2
    alpha_free = train(cfg).epochs == train(short).epochs

    out = tmp_path / "ksweep"
    code = cli_main(["ablate", "--grid", "window", "--seeds", "0", "--out", str(out)])
    sweep = list(csv.DictReader(open(out / "k_sweep.csv"))) if code == 0 else []
    ks = [r["K"] for r in sweep]
    record(9, "window gate and K sweep", {
        "K=0 bitwise == plain loop": bitwise,
        "K=0 invariant to alpha": alpha_free,
        "sweep exit 0": code == 0,
        "4 rows K=10,15,20,25": ks == ["10", "15", "20", "25"],
    }, "sweep MPJPE by K: " + ", ".join(f"{r['K']}={float(r['test_mpjpe']):.2f}" for r in sweep))


# -- 10. overhead accounting ----------------------------------------------------------------------------------


OVERHEAD_BOUND = 200.0  # percent, concat fusion at the default scale; see the README


def test_criterion_10_overhead():
    cfg = ExperimentConfig()
    row = profile_overhead(cfg)
    breakdown = all(k in row and row[k] > 0 for k in ("Pose Est.", "Correlation", "Score Calc.", "Overhead (%)"))
    small, large = ExperimentConfig(), ExperimentConfig()
    small.run.batch_size, large.run.batch_size = 16, 512
    calc_small = profile_overhead(small)["Score Calc."]
    calc_large = profile_overhead(large)["Score Calc."]
    pose_small = profile_overhead(small)["Pose Est."]
    pose_large = profile_overhead(large)["Pose Est."]
    ratio = max(calc_small, calc_large) / min(calc_small, calc_large)
    record(10, "overhead breakdown", {
        "breakdown present": breakdown,
        "score calc batch-size independent": ratio < 2.0,
        "overhead table schema": list(OVERHEAD_COLUMNS) == ["Fusion", "#Modalities", "#Params", "Forward",
                                                             "Backward", "Pose Est.", "Correlation", "Score Calc.",
                                                             "Overhead (%)"] and set(OVERHEAD_COLUMNS) <= set(row),
        f"concat overhead<{OVERHEAD_BOUND:.0f}%": row["Overhead (%)"] < OVERHEAD_BOUND,
    }, f"overhead {row['Overhead (%)']:.1f}%; score calc {calc_small * 1e3:.0f}us at batch 16 vs "
       f"{calc_large * 1e3:.0f}us at 512 while pose est. grows {pose_small:.2f}->{pose_large:.2f} ms")
