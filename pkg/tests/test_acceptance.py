"""End-to-end acceptance checks, one test per criterion.

Each test prints a ``PASS``/``FAIL criterion N`` line; the lines are
repeated in the terminal summary (see ``conftest.py``).
"""
import math
import os
import time

import numpy as np
import pytest

from conftest import expected_weight_masks, numeric_grad, rel_err
from tfm.cli import RunConfig, arch_for, execute, load_bundle, sequence_for
from tfm.errors import MaskCorruptionError
from tfm.growth import GrowthPolicy
from tfm.harness import run_scenario, write_run
from tfm.masks import OwnershipLedger, ownership_mask, pack, unpack, visibility_delta_mask
from tfm.network import ArchSpec, LayerSpec, MaskedNetwork
from tfm.overhead import count_params, overhead_curve
from tfm.snapshot import from_bytes, to_bytes
from tfm.trainer import Split, Trainer, TrainerConfig, cross_entropy_batch

HERE = os.path.dirname(__file__)
SCENARIO = os.path.join(HERE, "..", "configs", "synthetic-5task.json")
SEEDS = range(5)

RESULTS = []


def report(n, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}"
    RESULTS.append(line)
    print(line)
    assert ok, line


def scenario_config(method="tfm", seed=0, out=None):
    cfg = RunConfig.load(SCENARIO)
    cfg.method, cfg.seed = method, seed
    if out is not None:
        cfg.out = str(out)
    return cfg.resolve()


def run(cfg, probe=None):
    bundle = load_bundle(cfg)
    arch = arch_for(cfg, bundle)
    seq = sequence_for(cfg, bundle)
    res = run_scenario(cfg.method, seq, bundle, arch, GrowthPolicy(**cfg.growth),
                       TrainerConfig(**cfg.trainer), cfg.seed,
                       probe=None if probe is None else bundle.X[:probe])
    return res, arch


def test_zero_forgetting_bit_exact(tmp_path):
    start = time.perf_counter()
    cfg = scenario_config("tfm", 0, tmp_path)
    res, arch = run(cfg, probe=100)
    write_run(cfg.out, res, cfg.to_dict(), arch)
    K = 5
    identical = all(res.probe_logits[k, s].tobytes() == res.probe_logits[s, s].tobytes()
                    for s in range(1, K + 1) for k in range(s, K + 1))
    lines = (tmp_path / "forgetting.csv").read_text().strip().splitlines()[1:]
    values = [line.split(",")[1] for line in lines]
    elapsed = time.perf_counter() - start
    ok = identical and all(v == "0.0" for v in values) and elapsed <= 300
    report(1, ok, f"probe logits byte-identical={identical}, forgetting.csv={values}, "
                  f"{elapsed:.1f}s")


def test_gradient_masks_match_finite_differences():
    start = time.perf_counter()
    arch = ArchSpec((4,), [LayerSpec("dense", 3, 8), LayerSpec("dense", 3, 8),
                           LayerSpec("dense", 2, 8)])
    net = MaskedNetwork(arch, "tfm", use_fn=True, dropout_p=0.0, seed=7)
    rng = np.random.default_rng(7)
    net.grow(1, None, 3)
    X = rng.normal(size=(6, 4)).astype(np.float32)
    for _ in range(5):
        net.train_step(X, rng.integers(0, 3, 6), 1, 0.1)
    net.grow(2, [2, 1, 2], 3)
    net.astype(np.float64)
    for mod in net.feature_modules:
        # move FN parameters off the identity so their gradients are exercised
        for gamma, beta in mod.fn.values():
            gamma += rng.uniform(-0.3, 0.3, gamma.shape)
            beta += rng.uniform(-0.3, 0.3, beta.shape)
    X = rng.normal(size=(5, 4))
    y = rng.integers(0, 3, 5)
    task = 2

    def loss():
        return cross_entropy_batch(net.heads[task].forward(net.forward(X, task)), y)[0]

    _, layer_grads, head_grads = net.gradients(X, y, task)
    worst, exact_zero, checked = 0.0, True, 0
    for l, (mod, (wmask, bmask)) in enumerate(zip(net.feature_modules,
                                                 expected_weight_masks(net, task))):
        g = layer_grads[l]
        params = [("W", mod.W, wmask), ("b", mod.b, bmask),
                  ("gamma", mod.fn[task][0], None), ("beta", mod.fn[task][1], None)]
        for name, p, mask in params:
            num = numeric_grad(loss, p)
            mask = np.ones(p.shape, bool) if mask is None else mask
            worst = max(worst, rel_err(g[name][mask], num[mask]))
            exact_zero &= bool(np.all(g[name][~mask] == 0.0))
            checked += p.size
        gamma1, beta1 = mod.fn[1]
        # other tasks' normalization has no effect on task 2 and gets no update
        worst = max(worst, np.abs(numeric_grad(loss, gamma1)).max(),
                    np.abs(numeric_grad(loss, beta1)).max())
    for name in ("W", "b"):
        p = getattr(net.heads[task], name)
        worst = max(worst, rel_err(head_grads[task][name], numeric_grad(loss, p)))
    elapsed = time.perf_counter() - start
    ok = worst < 1e-3 and exact_zero and elapsed <= 60
    report(2, ok, f"{checked} feature-layer parameters, worst relative error {worst:.2e}, "
                  f"masked gradients exactly 0.0={exact_zero}, {elapsed:.2f}s")


def random_ledger(rng):
    layers = int(rng.integers(1, 4))
    tasks = int(rng.integers(1, 5))
    ledger = OwnershipLedger(layers)
    widths = np.zeros(layers, int)
    for t in range(tasks):
        room = 16 - widths
        low = 1 if t == 0 else 0
        added = [int(rng.integers(low, r + 1)) if r >= low else 0 for r in room]
        ledger.register_task(added)
        widths += added
    return ledger


def test_delta_and_ownership_masks_agree_on_random_ledgers():
    rng = np.random.default_rng(2024)
    compared = mismatches = 0
    for _ in range(100):
        ledger = random_ledger(rng)
        d = int(rng.integers(1, 6))
        for t in range(1, ledger.num_tasks + 1):
            for l in range(ledger.num_layers):
                if l == 0:
                    n_in, n_in_prev = np.ones(d, bool), np.full(d, t > 1)
                    m_in = np.full(d, t == 1)
                else:
                    n_in = ledger.derive_n(l - 1, t)
                    n_in_prev = ledger.derive_n(l - 1, t - 1) if t > 1 else np.zeros(0, bool)
                    m_in = ledger.derive_m(l - 1, t)
                n_out = ledger.derive_n(l, t)
                n_out_prev = ledger.derive_n(l, t - 1) if t > 1 else np.zeros(0, bool)
                a = visibility_delta_mask(n_in, n_out, n_in_prev, n_out_prev)
                b = ownership_mask(m_in, ledger.derive_m(l, t))
                compared += 1
                mismatches += not (a.shape == b.shape and np.array_equal(a, b))
    report(3, mismatches == 0, f"{compared} (ledger, task, layer) masks compared, "
                               f"{mismatches} mismatches")


def test_mask_encoding_budget():
    rng = np.random.default_rng(5)
    arch = ArchSpec((6,), [LayerSpec("dense", 5, 40), LayerSpec("dense", 7, 40),
                           LayerSpec("dense", 3, 40)])
    net = MaskedNetwork(arch, "tfm", dropout_p=0.0, seed=1)
    net.grow(1, None, 2)
    for t in range(2, 7):
        net.grow(t, [int(a) for a in rng.integers(0, 6, 3)], 2)
    T = net.num_tasks
    expected = sum(math.ceil(2 * net.widths_at(t)[l] / 8)
                   for t in range(1, T + 1) for l in range(3))
    budget_ok = net.masks.nbytes() == expected
    round_trip = all(
        np.array_equal(unpack(pack(mk.states), len(mk.states)), mk.states) for mk in net.masks)
    back = from_bytes(to_bytes(net))
    round_trip &= [mk.to_bytes() for mk in back.masks] == [mk.to_bytes() for mk in net.masks]
    rejected = 0
    for data in (bytes([0b11]), bytes([0b00_11_10_01])):
        try:
            unpack(data, 4)
        except MaskCorruptionError:
            rejected += 1
    ok = budget_ok and round_trip and rejected == 2
    report(4, ok, f"{net.masks.nbytes()} bytes for {T} tasks (expected {expected}), "
                  f"round trip={round_trip}, state 3 rejected {rejected}/2")


def test_overhead_ordering_alexnet_like():
    arch = ArchSpec.load(os.path.join(HERE, "..", "src", "tfm", "archs", "alexnet-like.json"))
    weights, features = count_params(arch)
    curves = {m: overhead_curve(m, arch, 10) for m in ("tfm", "tfm_fn", "packnet", "pnn")}
    ordered = all(curves["tfm"][t] < curves["tfm_fn"][t] < curves["packnet"][t] < curves["pnn"][t]
                  for t in range(1, 11))
    scale = 5e7 <= weights <= 7e7 and features < 1e4
    gap = curves["tfm"][10] * 1000 < curves["packnet"][10]
    report(5, ordered and scale and gap,
           f"{weights} weights, {features} features; T=10 bytes tfm={curves['tfm'][10]} "
           f"tfm_fn={curves['tfm_fn'][10]} packnet={curves['packnet'][10]} "
           f"pnn={curves['pnn'][10]}; ratio {curves['packnet'][10] / curves['tfm'][10]:.0f}")


def test_worked_growth_example():
    arch = ArchSpec((3,), [LayerSpec("dense", 2, 10), LayerSpec("dense", 6, 20)])
    net = MaskedNetwork(arch, "tfm", seed=0)
    inner = net.feature_modules[1]
    seen = []
    net.grow(1, None, 2)
    seen.append((sum(net.widths), inner.W.size))
    for t in (2, 3):
        f0, c0 = sum(net.widths), inner.W.size
        net.grow(t, [2, 3], 2)
        seen.append((sum(net.widths) - f0, inner.W.size - c0))
    report(6, seen == [(8, 12), (5, 24), (5, 36)], f"(features, connections) per task: {seen}")


@pytest.mark.slow
def test_baseline_ordering_over_seeds():
    start = time.perf_counter()
    acc = {m: [] for m in ("tfm", "finetune", "joint")}
    forget = []
    for seed in SEEDS:
        for method in acc:
            res, _ = run(scenario_config(method, seed))
            acc[method].append(res.avg_accuracy())
            if method == "finetune":
                forget.append(res.forgetting()[1])
    wins = sum(a >= b for a, b in zip(acc["tfm"], acc["finetune"]))
    means = {m: float(np.mean(v)) for m, v in acc.items()}
    elapsed = time.perf_counter() - start
    ok = (np.mean(forget) > 0 and wins >= 4 and means["joint"] >= means["tfm"]
          and elapsed <= 1800)
    report(7, ok, f"finetune mean forgetting {np.mean(forget):.4f}; tfm >= finetune on "
                  f"{wins}/5 seeds; mean acc tfm {means['tfm']:.4f} finetune "
                  f"{means['finetune']:.4f} joint {means['joint']:.4f}; {elapsed:.0f}s")


def test_fn_ablation():
    rng = np.random.default_rng(3)
    X = rng.normal(size=(40, 5)).astype(np.float32)
    y = rng.integers(0, 3, 40)
    arch = ArchSpec((5,), [LayerSpec("dense", 4, 8), LayerSpec("dense", 3, 6)])

    off = MaskedNetwork(arch, "tfm", use_fn=False, dropout_p=0.0, seed=0)
    off.grow(1, None, 3)
    for _ in range(10):
        off.train_step(X, y, 1, 0.1)
    off.grow(2, [2, 2], 3)
    for _ in range(10):
        off.train_step(X, y, 2, 0.1)
    no_params = all(m.fn == {} and [n for n, _ in m.param_arrays()] == ["W", "b"]
                    for m in off.feature_modules)
    # identical weights with identity normalization switched on
    ident = MaskedNetwork(arch, "tfm", use_fn=True, dropout_p=0.0, seed=0)
    ident.grow(1, None, 3)
    ident.grow(2, [2, 2], 3)
    ident.set_state((off.get_state()[0], off.get_state()[1]))
    same = all(off.predict(X, t).tobytes() == ident.predict(X, t).tobytes() for t in (1, 2))

    on = MaskedNetwork(arch, "tfm", use_fn=True, dropout_p=0.0, seed=0)
    on.grow(1, None, 3)
    for _ in range(10):
        on.train_step(X, y, 1, 0.1)
    on.grow(2, [2, 2], 3)
    before = [{t: (g.tobytes(), b.tobytes()) for t, (g, b) in m.fn.items()}
              for m in on.feature_modules]
    Trainer(TrainerConfig(max_epochs=5, dropout_p=0.0)).fit_task(
        on, 2, Split(X[:30], y[:30]), Split(X[30:], y[30:]))
    task1_fixed = all(m.fn[1][0].tobytes() == b[1][0] and m.fn[1][1].tobytes() == b[1][1]
                      for m, b in zip(on.feature_modules, before))
    task2_moved = all(m.fn[2][0].tobytes() != b[2][0] for m, b in zip(on.feature_modules, before))
    ok = no_params and same and task1_fixed and task2_moved
    report(8, ok, f"FN off: no parameters={no_params}, equals identity FN bit-exactly={same}; "
                  f"FN on: task-1 FN unchanged={task1_fixed}, task-2 FN trained={task2_moved}")


class StalledTrainer(Trainer):
    def validate(self, net, val, task):
        return 1.0, 0.5


def test_stalled_lr_schedule():
    arch = ArchSpec((5,), [LayerSpec("dense", 4, 4)])
    net = MaskedNetwork(arch, "tfm", dropout_p=0.0, seed=0)
    net.grow(1, None, 2)
    rng = np.random.default_rng(0)
    X = rng.normal(size=(64, 5)).astype(np.float32)
    split = Split(X, (X[:, 0] > 0).astype(int))
    rec = StalledTrainer(TrainerConfig()).fit_task(net, 1, split, split)
    trace = []
    for lr in rec.lr:
        if not trace or trace[-1] != lr:
            trace.append(lr)
    expected = [0.05 / 3 ** k for k in range(6)]
    ok = trace == expected and rec.stop_reason == "lr-floor" and 0.05 / 3 ** 6 < 1e-4
    report(9, ok, f"lr trace {[f'{v:.3g}' for v in trace]}, stopped by {rec.stop_reason} "
                  f"after {rec.epochs} epochs")


def test_determinism(tmp_path):
    blobs = []
    for name in ("a", "b"):
        cfg = scenario_config("tfm", 3, tmp_path / name)
        execute(cfg)
        out = tmp_path / name
        snaps = sorted(os.listdir(out / "snapshots"))
        blobs.append(((out / "matrix.csv").read_bytes(),
                      [(s, (out / "snapshots" / s).read_bytes()) for s in snaps]))
    same_matrix = blobs[0][0] == blobs[1][0]
    same_snaps = blobs[0][1] == blobs[1][1] and len(blobs[0][1]) == 5
    report(10, same_matrix and same_snaps,
           f"matrix.csv identical={same_matrix}, {len(blobs[0][1])} snapshots identical="
           f"{same_snaps}")
