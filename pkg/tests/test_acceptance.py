"""Acceptance suite: one test per release criterion, each printing a
PASS/FAIL line (run with -s to see them as they complete).

The criteria pin exact numerical properties, independent-oracle agreement,
and the comparative orderings the framework is supposed to reproduce, at
fixed tolerances. Expensive attack arms are computed once in a shared
fixture and reused.
"""

import math
import time
from dataclasses import replace

import numpy as np
import pytest

from oracles import (
    fedavg_reference,
    gram_singular_values,
    max_relative_grad_error,
    numeric_gradients,
    spearman,
)
from svdlab import attack, cli, data, defense, flsim, linalg, metrics, tinynn


def report(num, name, ok, detail=""):
    print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {num:02d} {name}: {detail}")
    assert ok, f"criterion {num:02d} {name}: {detail}"


# ---------------------------------------------------------------------------
# shared attack study (criteria 7 and 8)

ATTACK_TARGETS = 20
ATTACK_BATCH = 3
ATTACK_RESTARTS = 3
ATTACK_ITERS = 2000


def _best_of(model, observed, shape, cfg, labels, restarts=ATTACK_RESTARTS):
    best = None
    for j in range(restarts):
        result = attack.run_attack(
            model, observed, shape, replace(cfg, seed=cfg.seed + 1000 * j), labels=labels
        )
        if best is None or result.final_distance < best.final_distance:
            best = result
    return best


@pytest.fixture(scope="session")
def attack_study():
    """MSE per target for every attack/defense arm used by the orderings."""
    ds = data.make_synthetic(4, 30, 8, seed=11)
    model = tinynn.init_model(64, [32], 4, seed=5)
    svd_cfg = defense.DefenseConfig(method="svdefense", beta=0.3)
    prune_cfg = defense.DefenseConfig(method="prune", prune_rate=0.9)
    base = attack.AttackConfig(
        distance="neg_cosine_layerwise", iterations=ATTACK_ITERS, lr=0.1,
        label_mode="known", seed=0,
    )
    arms = {k: [] for k in ("none", "svdef", "replay", "prune_plain", "prune_adapt")}
    for i in range(ATTACK_TARGETS):
        batch = [ds.examples[i]]
        used = {ds.examples[i].label}
        for ex in ds.examples:
            if len(batch) == ATTACK_BATCH:
                break
            if ex.label not in used:
                batch.append(ex)
                used.add(ex.label)
        labels = [ex.label for ex in batch]
        truth = batch[0].input
        shape = (ATTACK_BATCH, 64)
        _, grads = tinynn.loss_and_grad(model, batch)
        cfg = replace(base, seed=100 + i)

        def run(observed, c):
            best = _best_of(model, observed, shape, c, labels)
            return metrics.mse(truth, best.reconstructed)

        arms["none"].append(run(grads, cfg))
        packets, _ = defense.defend_update(grads, svd_cfg)
        arms["svdef"].append(run(packets, cfg))
        arms["replay"].append(
            run(packets, replace(cfg, adaptive="defense_replay", defense=svd_cfg))
        )
        pruned, _ = defense.defend_baseline(grads, prune_cfg)
        arms["prune_plain"].append(run(pruned, cfg))
        arms["prune_adapt"].append(run(pruned, replace(cfg, adaptive="prune_mask")))
    return {k: np.array(v) for k, v in arms.items()}


# ---------------------------------------------------------------------------


def test_c01_svd_matches_gram_oracle():
    start = time.monotonic()
    rng = np.random.default_rng(2024)
    worst_recon = 0.0
    worst_sigma = 0.0
    for _ in range(200):
        p = int(rng.integers(2, 65))
        q = int(rng.integers(2, 49))
        w = rng.normal(size=(p, q))
        f = linalg.svd(w)
        worst_recon = max(
            worst_recon, np.linalg.norm(f.assemble() - w) / np.linalg.norm(w)
        )
        ref = gram_singular_values(w)
        worst_sigma = max(worst_sigma, float(np.max(np.abs(f.sigma - ref[: len(f.sigma)]))))
    elapsed = time.monotonic() - start
    ok = worst_recon <= 1e-8 and worst_sigma <= 1e-8 and elapsed < 10.0
    report(
        1, "svd vs gram-eigenvalue oracle", ok,
        f"recon {worst_recon:.2e}, sigma err {worst_sigma:.2e}, {elapsed:.1f}s",
    )


def test_c02_truncation_residual_bounds():
    start = time.monotonic()
    rng = np.random.default_rng(77)
    violations = 0
    for _ in range(100):
        p, q = int(rng.integers(2, 40)), int(rng.integers(2, 30))
        w = rng.normal(size=(p, q))
        t = float(rng.uniform(0.0, 0.999))
        plain = linalg.truncate_by_energy(linalg.svd(w), t)
        if np.linalg.norm(w - plain.assemble()) > math.sqrt(1 - t) * np.linalg.norm(w) * (
            1 + 1e-9
        ) + 1e-12:
            violations += 1
    for _ in range(100):
        p, q = int(rng.integers(2, 40)), int(rng.integers(2, 30))
        w = rng.normal(size=(p, q))
        t = float(rng.uniform(0.0, 0.999))
        cw = defense.channel_weights(w)
        trunc = linalg.truncate_by_energy(linalg.svd(cw[:, None] * w), t)
        recon = trunc.assemble() / cw[:, None]
        bound = (cw.max() / cw.min()) * math.sqrt(1 - t) * np.linalg.norm(w)
        if np.linalg.norm(w - recon) > bound * (1 + 1e-9) + 1e-12:
            violations += 1
    elapsed = time.monotonic() - start
    ok = violations == 0 and elapsed < 5.0
    report(2, "truncation residual bounds", ok, f"{violations} violations, {elapsed:.1f}s")


def test_c03_gradients_match_finite_differences():
    start = time.monotonic()
    rng = np.random.default_rng(404)
    model = tinynn.init_model(64, [32], 4, seed=9)
    worst = 0.0
    for _ in range(10):
        batch = [
            tinynn.Example(rng.uniform(0, 1, 64), int(rng.integers(4))) for _ in range(4)
        ]
        _, grads = tinynn.loss_and_grad(model, batch)
        numeric = numeric_gradients(model, batch, h=1e-5)
        worst = max(worst, max_relative_grad_error(grads, numeric))
    elapsed = time.monotonic() - start
    ok = worst < 1e-4 and elapsed < 30.0
    report(3, "analytic vs finite-difference gradients", ok, f"max rel err {worst:.2e}, {elapsed:.1f}s")


def test_c04_threshold_law_exactness():
    zero_ok = all(defense.adaptive_threshold(0.0, b) == 0.0 for b in (0.05, 0.3, 2.0))
    ref = defense.adaptive_threshold(0.6534, 0.3)
    ref_ok = abs(ref - 0.1780) <= 1e-4
    grid = [defense.adaptive_threshold(e, 0.3) for e in np.linspace(0.0, 10.0, 100)]
    mono_ok = all(a < b for a, b in zip(grid, grid[1:]))
    ok = zero_ok and ref_ok and mono_ok
    report(4, "adaptive threshold law", ok, f"T(0.6534, 0.3) = {ref:.6f}")


def test_c05_fedavg_degeneracy():
    fl = flsim.FlConfig(
        num_clients=4, clients_per_round=2, rounds=5, local_batch_size=8,
        local_lr=0.5, defense=defense.DefenseConfig(method="none"), seed=21,
    )
    dc = flsim.DataConfig(num_classes=4, per_class=20, per_class_test=5, side=8)
    train, _, part, model = flsim.build_experiment(fl, dc)
    reports, final = flsim.run_experiment(fl, dc)
    ref = fedavg_reference(
        model, train, part.client_shards, [r.selected_clients for r in reports],
        fl.local_lr, fl.local_batch_size, fl.local_epochs, fl.seed,
    )
    worst = 0.0
    for a, b in zip(final.layers, ref.layers):
        worst = max(worst, float(np.max(np.abs(a.weight - b.weight))))
        worst = max(worst, float(np.max(np.abs(a.bias - b.bias))))
    ok = worst <= 1e-12
    report(5, "plain federated averaging equivalence", ok, f"max param diff {worst:.2e}")


def test_c06_entropy_tracks_class_balance():
    start = time.monotonic()
    rhos, entropies = [], []
    for seed in range(5):
        ds = data.make_synthetic(4, 40, 8, seed=50 + seed)
        model = tinynn.init_model(64, [32], 4, seed=200 + seed)
        for rho in np.arange(0.1, 1.05, 0.1):
            part = data.partition_rho(ds, float(rho), seed=300 + seed)
            batch = [ds.examples[i] for i in part.client_shards[0]]
            _, grads = tinynn.loss_and_grad(model, batch)
            per_layer = [
                linalg.singular_entropy(linalg.svd(l.weight_grad).sigma)
                for l in grads.layers
            ]
            rhos.append(float(rho))
            entropies.append(float(np.mean(per_layer)))
    corr = spearman(rhos, entropies)
    elapsed = time.monotonic() - start
    ok = corr > 0.7 and elapsed < 120.0
    report(6, "entropy vs class-balance correlation", ok, f"spearman {corr:.3f}, {elapsed:.1f}s")


def test_c07_defense_ordering(attack_study):
    none_mse = attack_study["none"]
    svdef_mse = attack_study["svdef"]
    ratios_ok = np.sum(svdef_mse >= 5.0 * none_mse)
    frac = ratios_ok / len(none_mse)
    mean_ok = float(svdef_mse.mean()) > 5.0 * float(none_mse.mean())
    ok = len(none_mse) >= 20 and frac >= 0.8 and mean_ok
    report(
        7, "low-rank defense degrades reconstruction 5x", ok,
        f"{ratios_ok}/{len(none_mse)} pairs >= 5x, means {none_mse.mean():.2e} -> {svdef_mse.mean():.2e}",
    )


def test_c08_adaptive_attack_ordering(attack_study):
    plain = attack_study["prune_plain"]
    adapt = attack_study["prune_adapt"]
    replay = attack_study["replay"]
    none_mse = attack_study["none"]
    prune_ok = float(adapt.mean()) < float(plain.mean())
    replay_ok = float(replay.mean()) >= 5.0 * float(none_mse.mean())
    ok = len(plain) >= 20 and prune_ok and replay_ok
    report(
        8, "adaptive attack ordering", ok,
        f"prune {plain.mean():.3f} -> masked {adapt.mean():.3f}; replay {replay.mean():.3f} "
        f"vs none {none_mse.mean():.2e}",
    )


def test_c09_averaged_noise_variance():
    rng = np.random.default_rng(1234)
    draws = 10_000
    worst_rel = 0.0
    for dist in ("dp_gauss", "dp_lap"):
        scale = 0.5
        base_var = scale**2 if dist == "dp_gauss" else 2.0 * scale**2
        for n in (4, 16):
            cfg = attack.AttackConfig(
                adaptive="eot", eot_samples=n, label_mode="known",
                defense=defense.DefenseConfig(method=dist, noise_scale=scale),
            )
            shape = (draws,)
            if dist == "dp_gauss":
                eta = rng.normal(0.0, scale, size=shape)
            else:
                eta = rng.laplace(0.0, scale, size=shape)
            dummy = tinynn.GradSet([tinynn.LayerGrads(np.zeros((draws, 1)), np.zeros(draws))])
            transform = attack._AdaptiveTransform(cfg, dummy, rng)
            eta_bar = transform._mean_noise(cfg.defense, n, shape)
            combined = float(np.var(eta - eta_bar))
            expected = base_var * (n + 1) / n
            worst_rel = max(worst_rel, abs(combined - expected) / expected)
    ok = worst_rel <= 0.05
    report(9, "averaged-noise variance growth", ok, f"worst rel dev {worst_rel:.3f}")


def test_c10_communication_accounting():
    rng = np.random.default_rng(55)
    w = rng.normal(size=(64, 64))
    factors = linalg.svd(w)
    energy = np.cumsum(np.square(factors.sigma)) / np.sum(np.square(factors.sigma))
    threshold = float((energy[6] + energy[7]) / 2.0)  # lands exactly on k = 8
    trunc = linalg.truncate_by_energy(factors, threshold)
    assert trunc.retained_rank == 8
    pkt = defense.DefensePacket(
        layer_id=0, kind="svd", orig_shape=(64, 64),
        channel_weights=np.ones(64), u_star=trunc.u_star,
        sigma_star=trunc.sigma_star, vt_star=trunc.vt_star, entropy=1.0,
    )
    count = defense.parameter_count(pkt)
    reduction = metrics.comm_reduction(count, 64 * 64)
    count_ok = count == 1097
    red_ok = abs(reduction - 73.2) <= 0.1

    fl = flsim.FlConfig(
        num_clients=4, clients_per_round=2, rounds=3, local_batch_size=8,
        local_lr=0.5, defense=defense.DefenseConfig(method="none"), seed=31,
    )
    dc = flsim.DataConfig(num_classes=4, per_class=20, per_class_test=5, side=8)
    bytes_none = sum(r.bytes_up for r in flsim.run_experiment(fl, dc)[0])
    fl_svd = replace(fl, defense=defense.DefenseConfig(method="svdefense", beta=0.3))
    bytes_svd = sum(r.bytes_up for r in flsim.run_experiment(fl_svd, dc)[0])
    run_ok = bytes_svd < bytes_none
    ok = count_ok and red_ok and run_ok
    report(
        10, "communication accounting", ok,
        f"params {count}, reduction {reduction:.1f}%, run bytes {bytes_svd} < {bytes_none}",
    )


def test_c11_utility_preserved():
    start = time.monotonic()
    diffs = []
    none_accs = []
    for seed in (101, 202, 303):
        fl = flsim.FlConfig(
            num_clients=8, clients_per_round=4, rounds=30, local_batch_size=8,
            local_lr=0.5, dirichlet_alpha=0.5,
            defense=defense.DefenseConfig(method="none"), seed=seed,
        )
        dc = flsim.DataConfig(num_classes=4, per_class=40, per_class_test=10, side=8)
        acc_none = flsim.run_experiment(fl, dc)[0][-1].accuracy
        fl_svd = replace(fl, defense=defense.DefenseConfig(method="svdefense", beta=0.3))
        acc_svd = flsim.run_experiment(fl_svd, dc)[0][-1].accuracy
        none_accs.append(acc_none)
        diffs.append(abs(acc_svd - acc_none))
    elapsed = time.monotonic() - start
    ok = all(d <= 0.05 for d in diffs) and min(none_accs) > 0.85 and elapsed < 900.0
    report(
        11, "model utility preserved under defense", ok,
        f"acc diffs {['%.3f' % d for d in diffs]}, baseline accs "
        f"{['%.3f' % a for a in none_accs]}, {elapsed:.0f}s",
    )


def test_c12_byte_identical_reruns(tmp_path):
    cfg = {
        "seed": 5,
        "data": {"num_classes": 4, "per_class": 20, "per_class_test": 5, "side": 8},
        "fl": {
            "num_clients": 4, "clients_per_round": 2, "rounds": 3,
            "local_batch_size": 8, "local_lr": 0.5,
            "defense": {"method": "svdefense", "beta": 0.3},
        },
        "attack": {
            "distance": "neg_cosine_layerwise", "iterations": 60, "lr": 0.1,
            "label_mode": "known", "batch_size": 3, "n_examples": 2, "restarts": 1,
        },
    }
    import json

    config_path = tmp_path / "cfg.json"
    config_path.write_text(json.dumps(cfg))
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert cli.main(["train", "--config", str(config_path), "--out", str(out)]) == 0
        assert cli.main(["attack", "--config", str(config_path), "--out", str(out / "atk")]) == 0
        outs.append(out)
    same_rounds = (outs[0] / "rounds.csv").read_bytes() == (outs[1] / "rounds.csv").read_bytes()
    same_model = (outs[0] / "model.bin").read_bytes() == (outs[1] / "model.bin").read_bytes()
    same_attack = (outs[0] / "atk" / "attack.csv").read_bytes() == (
        outs[1] / "atk" / "attack.csv"
    ).read_bytes()
    ok = same_rounds and same_model and same_attack
    report(12, "byte-identical reruns", ok, f"rounds {same_rounds}, model {same_model}, attack {same_attack}")
