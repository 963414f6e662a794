"""Acceptance gate: nine end-to-end checks, one verdict line each.

Each test prints ``acceptance N PASS/FAIL: detail`` before asserting, so a
plain ``pytest -s tests/test_acceptance.py`` reads as a checklist. The three
training-based checks (5, 6, 7) train small models from scratch and run for
a few minutes each; everything else is seconds.
"""

import hashlib

import numpy as np
import pytest
import yaml

from mimofm import (
    EnvironmentSpec,
    SystemConfig,
    TrainConfig,
    deploy,
    generate_dataset,
    init_train_state,
    max_sum_rate_eval,
    multiobjective_epoch,
    pretrain_epoch,
    sample_rate_requirements,
    site_weight_update,
    sum_rate,
    train_head,
    wmmse_rate_bound,
    zf_precoder,
)
from mimofm.adaptation import DEFAULT_HEAD
from mimofm.baselines import wmmse_precoder
from mimofm.channelgen import build_multiuser_csi
from mimofm.cli import main as cli_main
from mimofm.core import sinr, user_rate
from mimofm.evalbench import cross_site_matrix, flop_count, tradeoff_sweep
from mimofm.nn import (
    FeatureExtractorParams,
    ModelHyper,
    OutputHead,
    forward,
    forward_batch,
)
from mimofm.training import total_loss_graph


def _verdict(num, ok, detail):
    line = f"acceptance {num} {'PASS' if ok else 'FAIL'}: {detail}"
    print(line)
    assert ok, line


def _spearman(x, y):
    def ranks(v):
        vals = np.asarray(v, dtype=np.float64)
        order = np.argsort(vals)
        r = np.empty(len(vals))
        r[order] = np.arange(len(vals), dtype=np.float64)
        for val in np.unique(vals):
            tie = vals == val
            r[tie] = r[tie].mean()
        return r

    rx, ry = ranks(x), ranks(y)
    rx -= rx.mean()
    ry -= ry.mean()
    return float((rx * ry).sum() / np.sqrt((rx**2).sum() * (ry**2).sum()))


def test_criterion_1_flop_table():
    zf = flop_count("zf", 4, 64) / 1e6
    wmmse = flop_count("wmmse", 4, 64, wmmse_iters=16) / 1e6
    model = flop_count("model", 4, 64) / 1e6
    ratio = wmmse / model
    ok = (
        abs(zf - 0.014) <= 0.05
        and abs(wmmse - 93.5) <= 0.05
        and abs(model - 10.8) <= 0.05
        and 8.0 <= ratio <= 9.0
    )
    _verdict(
        1,
        ok,
        f"flops ZF {zf:.3f}M WMMSE {wmmse:.2f}M model {model:.2f}M "
        f"ratio {ratio:.2f}",
    )


def test_criterion_2_zero_forcing():
    cfg = SystemConfig(n_tx=64, n_users=4, p_tx=2.0, noise_power=1e-2)
    rng = np.random.default_rng(2)
    worst_leak = 0.0
    worst_power = 0.0
    for _ in range(1000):
        H = (
            rng.standard_normal((4, 64)) + 1j * rng.standard_normal((4, 64))
        ) / np.sqrt(2.0)
        sol = zf_precoder(H, cfg)
        S = np.abs(H.conj() @ sol.precoder)
        off = S + np.diag(np.full(4, -np.inf))
        worst_leak = max(worst_leak, float((off.max(axis=1) / np.diag(S)).max()))
        worst_power = max(
            worst_power, abs(sol.transmit_power() - cfg.p_tx) / cfg.p_tx
        )
    ok = worst_leak <= 1e-9 and worst_power <= 1e-9
    _verdict(
        2,
        ok,
        f"1000 instances, max relative leakage {worst_leak:.2e}, "
        f"max power error {worst_power:.2e}",
    )


def _grid_two_orthogonal(gain_a, gain_b, p_tx, noise, n_grid=20_000):
    x = np.linspace(0.0, p_tx, n_grid)
    rates = np.log2(1 + gain_a * x / noise) + np.log2(
        1 + gain_b * (p_tx - x) / noise
    )
    return float(rates.max())


def test_criterion_3_wmmse_properties():
    cfg = SystemConfig(n_tx=64, n_users=4, p_tx=2.0, noise_power=1e-2)
    rng = np.random.default_rng(3)
    worst_drop = 0.0
    worst_gap = np.inf
    for _ in range(1000):
        H = (
            rng.standard_normal((4, 64)) + 1j * rng.standard_normal((4, 64))
        ) / np.sqrt(2.0)
        sol, report = wmmse_precoder(H, cfg)
        worst_drop = max(worst_drop, float(-np.diff(report.rate_trace).min()))
        gap = sum_rate(H, sol, cfg) - sum_rate(H, zf_precoder(H, cfg), cfg)
        worst_gap = min(worst_gap, gap)

    single = SystemConfig(n_tx=8, n_users=1, p_tx=3.0, noise_power=1e-2)
    worst_dir = 0.0
    for seed in range(20):
        rng1 = np.random.default_rng([31, seed])
        h = rng1.standard_normal(8) + 1j * rng1.standard_normal(8)
        sol, _ = wmmse_precoder(h[None, :], single)
        w = sol.precoder[:, 0]
        mrt = np.sqrt(single.p_tx) * h / np.linalg.norm(h)
        align = abs(np.vdot(mrt, w)) / (np.linalg.norm(mrt) * np.linalg.norm(w))
        worst_dir = max(worst_dir, 1.0 - align)

    ortho = SystemConfig(n_tx=4, n_users=2, p_tx=2.0, noise_power=0.5)
    H2 = np.zeros((2, 4), dtype=complex)
    H2[0, 0] = 1.0
    H2[1, 1] = 0.6
    sol2, _ = wmmse_precoder(H2, ortho, max_iter=500, tol=0.0)
    achieved = sum_rate(H2, sol2, ortho)
    best = _grid_two_orthogonal(1.0, 0.36, ortho.p_tx, ortho.noise_power)
    grid_err = abs(achieved - best)

    ok = (
        worst_drop <= 1e-9
        and worst_gap >= -1e-9
        and worst_dir <= 1e-6
        and grid_err <= 1e-3
    )
    _verdict(
        3,
        ok,
        f"trace drop {worst_drop:.1e}, min gain over ZF {worst_gap:.3f}, "
        f"MRT direction error {worst_dir:.1e}, grid gap {grid_err:.1e}",
    )


def test_criterion_4_gradient_fidelity():
    hyper = ModelHyper(
        embed_dim=8, ffn_dim=16, n_heads=2, n_layers=1, dropout=0.0,
        n_tx=4, n_users=2,
    )
    cfg = SystemConfig(n_tx=4, n_users=2, p_tx=2.0, noise_power=0.1)
    params = FeatureExtractorParams(hyper, rng=0)
    head = OutputHead(hyper, rng=1)
    rng = np.random.default_rng(4)
    Hr = rng.standard_normal((3, 2, 4))
    Hi = rng.standard_normal((3, 2, 4))
    R = rng.uniform(0.5, 3.0, (3, 2))
    targets = rng.uniform(0.5, 3.0, (3, 2))
    mu = 0.7

    base = forward_batch(params, head, Hr, Hi, R, cfg, mode="eval")
    binary0 = base["mask"].data.copy()
    s0 = base["pre_threshold"].data[:, :4].copy()
    raw_loss, _ = total_loss_graph(base, Hr, Hi, targets, cfg, mu)

    def loss_value(backward=False):
        # linearized straight-through surrogate: same value and gradient as
        # the hard forward at the base point, smooth for central differences
        out = forward_batch(
            params, head, Hr, Hi, R, cfg, mode="eval", st_override=(binary0, s0)
        )
        loss, _ = total_loss_graph(out, Hr, Hi, targets, cfg, mu)
        if backward:
            loss.backward()
        return float(loss.data)

    assert loss_value(backward=True) == pytest.approx(float(raw_loss.data), abs=1e-12)

    n_total = 0
    n_pass = 0
    worst = 0.0
    tensors = list(params.named()) + list(head.named())
    for _, tensor in tensors:
        assert tensor.grad is not None
        flat = tensor.data.reshape(-1)
        gflat = np.asarray(tensor.grad).reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            h = 1e-5 * max(1.0, abs(orig))
            flat[i] = orig + h
            lp = loss_value()
            flat[i] = orig - h
            lm = loss_value()
            flat[i] = orig
            numeric = (lp - lm) / (2 * h)
            err = abs(numeric - gflat[i])
            # 1e-9 floor absorbs central-difference cancellation noise on
            # near-zero gradients (loss is O(1), so noise is ~1e-10 at this h)
            tol = 1e-4 * max(abs(numeric), abs(gflat[i])) + 1e-9
            n_total += 1
            n_pass += err <= tol
            worst = max(worst, err / max(abs(numeric), abs(gflat[i]), 1e-9))
    ok = n_pass == n_total
    _verdict(
        4,
        ok,
        f"{n_pass}/{n_total} parameters within 1e-4 relative "
        f"(worst {worst:.2e})",
    )


def test_criterion_5_adaptation_orderings():
    cfg = SystemConfig(n_tx=64, n_users=4, p_tx=2e-10, noise_power=1e-13)
    specs = [
        EnvironmentSpec(
            env_id=f"s{i}", mean_azimuth=float(az), angle_spread=0.02,
            rician_k=10.0, n_tx=64, seed=100 + i,
        )
        for i, az in enumerate(np.linspace(-0.84, 0.84, 8))
    ]
    deploy_spec = EnvironmentSpec(
        env_id="deploy", mean_azimuth=0.1, angle_spread=0.02, rician_k=10.0,
        n_tx=64, seed=555,
    )
    datasets = [generate_dataset(s, 600) for s in specs]
    deploy_ds = generate_dataset(deploy_spec, 600)
    bounds = [wmmse_rate_bound(d, cfg, n_eval=20, seed=0) for d in datasets]
    hyper = ModelHyper(
        embed_dim=48, ffn_dim=96, n_heads=2, n_layers=2, dropout=0.0,
        n_tx=64, n_users=4,
    )

    rows = []
    ok = True
    for seed in (0, 1, 2):
        tc = TrainConfig(batch_size=64, learning_rate=1e-3, epochs=2, seed=seed)
        # the pooled default head serves saturating requests, so its fit is
        # ascent-dominant; one head cannot track eight sites' random targets
        tc_dh = TrainConfig(
            batch_size=64, learning_rate=1e-3, epochs=2, seed=seed,
            anchor_fraction=0.9,
        )
        state = init_train_state(
            hyper, [s.env_id for s in specs], bounds, tc, init_seed=seed
        )
        for _ in range(36):
            pretrain_epoch(state, datasets, cfg, tc)
        for _ in range(2):
            multiobjective_epoch(state, datasets, cfg, tc)
        default = state.heads["s0"].copy()
        train_head(
            state.params, default, datasets, bounds, cfg, tc_dh, epochs=3,
            seed_tag=0,
        )
        state.heads[DEFAULT_HEAD] = default

        zs = max_sum_rate_eval(
            state.params, default, deploy_ds, cfg, n_eval=30, seed=seed + 777
        )
        res = deploy(state.params, state.heads, "full", deploy_ds, cfg, tc)
        full = max_sum_rate_eval(
            state.params, res.head, deploy_ds, cfg, n_eval=30, seed=seed + 777
        )
        rows.append(
            f"seed {seed}: zero-shot {zs['model']:.2f} >= ZF {zs['zf']:.2f}, "
            f"full {full['model']:.2f} >= zero-shot"
        )
        ok = ok and zs["model"] >= zs["zf"] and full["model"] >= zs["model"]
    _verdict(5, ok, "; ".join(rows))


def test_criterion_6_rate_tracking_and_energy():
    cfg = SystemConfig(n_tx=8, n_users=2, p_tx=8.0, p_rf=1.0, noise_power=0.05)
    spec = EnvironmentSpec(
        env_id="site", mean_azimuth=0.0, angle_spread=1.2, rician_k=10.0,
        n_tx=8, seed=42,
    )
    ds = generate_dataset(spec, 600)
    rmax = wmmse_rate_bound(ds, cfg, n_eval=40, seed=0)
    hyper = ModelHyper(
        embed_dim=40, ffn_dim=80, n_heads=2, n_layers=2, dropout=0.0,
        n_tx=8, n_users=2,
    )

    rows = []
    ok = True
    for seed in (0, 1, 2):
        # low anchor share: tracking wants most rows on random targets, but
        # some saturating-request exposure keeps the energy policy modulating
        tc = TrainConfig(
            mu=0.9, batch_size=32, learning_rate=1e-3, epochs=2, seed=seed,
            anchor_fraction=0.1,
        )
        state = init_train_state(hyper, ["site"], [rmax], tc, init_seed=seed)
        for _ in range(30):
            pretrain_epoch(state, [ds], cfg, tc)
        for epoch in range(700):
            if epoch == 380:
                state.optimizer.lr = 3e-4
            if epoch == 550:
                state.optimizer.lr = 1e-4
            multiobjective_epoch(state, [ds], cfg, tc)

        # held-out random requests: load 20-90% of the bound, per-user
        # shares bounded away from extremes (at most a 3:1 split)
        rng = np.random.default_rng([seed, 99])
        errs = []
        for i in range(200):
            H = build_multiuser_csi(ds, 2, seed=[seed + 50, i])
            beta = 0.2 + 0.7 * rng.random()
            share = 0.25 + 0.5 * rng.random(2)
            targets = share * (beta * rmax / share.sum())
            out = forward(state.params, state.heads["site"], H, targets, cfg)
            rates = np.array(
                [user_rate(sinr(H.rows[u], out.solution, u, cfg)) for u in range(2)]
            )
            errs.append(np.mean(np.abs(rates - targets) / targets))
        err = float(np.mean(errs))

        points = tradeoff_sweep(
            state.params, state.heads["site"], ds, cfg, rmax,
            n_points=21, n_eval=40, seed=seed + 777,
        )
        requested = np.array([p.requested_sum for p in points])
        energy = np.array([p.mean_energy for p in points])
        rho = _spearman(requested, energy)
        rows.append(f"seed {seed}: error {err:.3f}, spearman {rho:.2f}")
        ok = ok and err < 0.15 and rho > 0.8
    _verdict(6, ok, "; ".join(rows))


def test_criterion_7_site_specialization():
    cfg = SystemConfig(n_tx=64, n_users=4, p_tx=2e-10, noise_power=1e-13)
    specs = [
        EnvironmentSpec(
            env_id=f"site{k}", mean_azimuth=az, angle_spread=0.02,
            n_tx=64, seed=200 + k,
        )
        for k, az in enumerate((-0.8, -0.27, 0.27, 0.8))
    ]
    datasets = [generate_dataset(s, 400) for s in specs]
    env_datasets = {d.env_id: d for d in datasets}
    bounds = [wmmse_rate_bound(d, cfg, n_eval=15, seed=0) for d in datasets]
    hyper = ModelHyper(
        embed_dim=48, ffn_dim=96, n_heads=2, n_layers=2, dropout=0.0,
        n_tx=64, n_users=4,
    )

    rows = []
    ok = True
    for seed in (0, 1, 2):
        tc = TrainConfig(
            mu=0.9, batch_size=64, learning_rate=1e-3, epochs=2, seed=seed
        )
        state = init_train_state(
            hyper, [s.env_id for s in specs], bounds, tc, init_seed=seed
        )
        for _ in range(36):
            pretrain_epoch(state, datasets, cfg, tc)
        for _ in range(2):
            multiobjective_epoch(state, datasets, cfg, tc)
        _, M = cross_site_matrix(
            state.params, state.heads, env_datasets, cfg, n_eval=20,
            seed=seed + 900,
        )
        diag = float(np.mean(np.diag(M)))
        off = float((M.sum() - np.trace(M)) / (M.size - len(M)))
        rows.append(f"seed {seed}: diagonal {diag:.2f} > off-diagonal {off:.2f}")
        ok = ok and diag > off
    _verdict(7, ok, "; ".join(rows))


def test_criterion_8_training_mechanics():
    rng = np.random.default_rng(8)
    T = 50.0
    ema = rng.uniform(0.0, 30.0, 6)
    rmax = rng.uniform(5.0, 25.0, 6)
    raw, clamped, alpha = site_weight_update(ema, rmax, T)
    formula_ok = (
        np.array_equal(raw, (ema - rmax) ** 2)
        and np.array_equal(clamped, np.clip(raw, 1.0, T))
        and np.all(clamped >= 1.0)
        and np.all(clamped <= T)
        and abs(alpha.sum() - 1.0) <= 1e-12
        and np.array_equal(alpha, clamped / clamped.sum())
    )

    worst_sum = 0.0
    for i in range(200):
        probe = np.random.default_rng([81, i])
        u = probe.random(3)
        beta = probe.random()
        request = sample_rate_requirements(
            14.0, 3, np.random.default_rng([81, i])
        )
        worst_sum = max(
            worst_sum, abs(request.targets.sum() - beta * 14.0) / (beta * 14.0)
        )
    sums_ok = worst_sum <= 1e-12

    hyper = ModelHyper(
        embed_dim=8, ffn_dim=16, n_heads=2, n_layers=1, dropout=0.0,
        n_tx=4, n_users=2,
    )
    cfg = SystemConfig(n_tx=4, n_users=2, p_tx=2.0, noise_power=0.1)
    data_rng = np.random.default_rng(89)
    k = 3
    batches = [
        (
            data_rng.standard_normal((4, 2, 4)),
            data_rng.standard_normal((4, 2, 4)),
            data_rng.uniform(0.5, 3.0, (4, 2)),
            data_rng.uniform(0.5, 3.0, (4, 2)),
        )
        for _ in range(k)
    ]

    heads_seeds = [7, 11, 13]

    def build(env):
        params = FeatureExtractorParams(hyper, rng=0)
        head = OutputHead(hyper, rng=heads_seeds[env])
        Hr, Hi, R, tgt = batches[env]
        out = forward_batch(params, head, Hr, Hi, R, cfg, mode="eval")
        loss, _ = total_loss_graph(out, Hr, Hi, tgt, cfg, 0.8)
        return params, loss

    combined_params = FeatureExtractorParams(hyper, rng=0)
    total = None
    for env in range(k):
        head = OutputHead(hyper, rng=heads_seeds[env])
        Hr, Hi, R, tgt = batches[env]
        out = forward_batch(combined_params, head, Hr, Hi, R, cfg, mode="eval")
        loss, _ = total_loss_graph(out, Hr, Hi, tgt, cfg, 0.8)
        scaled = loss * (1.0 / k)
        total = scaled if total is None else total + scaled
    total.backward()
    combined = {
        name: np.asarray(t.grad).copy() for name, t in combined_params.named()
    }

    per_env = []
    for env in range(k):
        params_e, loss_e = build(env)
        loss_e.backward()
        per_env.append(
            {name: np.asarray(t.grad).copy() for name, t in params_e.named()}
        )
    worst_grad = 0.0
    for name in combined:
        mean_grad = np.mean([g[name] for g in per_env], axis=0)
        worst_grad = max(worst_grad, float(np.abs(mean_grad - combined[name]).max()))
    grad_ok = worst_grad <= 1e-10

    ok = formula_ok and sums_ok and grad_ok
    _verdict(
        8,
        ok,
        f"weight formula {'ok' if formula_ok else 'BAD'}, request sums rel "
        f"{worst_sum:.1e}, phase-2 gradient averaging gap {worst_grad:.1e}",
    )


_PIPELINE_CFG = {
    "system": {
        "n_tx": 8, "n_users": 2, "p_tx": 2e-10, "p_rf": 1.0,
        "noise_power": 1e-13,
    },
    "model": {
        "embed_dim": 16, "ffn_dim": 32, "n_heads": 2, "n_layers": 1,
        "dropout": 0.0,
    },
    "train": {
        "batch_size": 8, "pretrain_epochs": 1, "epochs": 1,
        "learning_rate": 1e-3, "seed": 0,
    },
    "eval": {"n_eval": 2, "n_points": 3, "rate_bound_evals": 2},
    "envs": [
        {"env_id": "t0", "mean_azimuth": 0.0, "seed": 11, "n_samples": 24},
        {"env_id": "t1", "mean_azimuth": 0.9, "seed": 12, "n_samples": 24},
    ],
    "deploy_env": {
        "env_id": "t9", "mean_azimuth": 0.1, "seed": 19, "n_samples": 24,
    },
}


def _run_pipeline(root):
    cfg_path = root / "cfg.yaml"
    cfg_path.write_text(yaml.safe_dump(_PIPELINE_CFG))
    stages = [
        ["gen-data"],
        ["pretrain"],
        ["train"],
        ["adapt", "--mode", "zero_shot"],
        ["eval"],
        ["sweep"],
    ]
    for stage in stages:
        assert cli_main(stage + ["--config", str(cfg_path)]) == 0
    digests = {}
    for path in sorted(root.rglob("*")):
        if path.is_file() and path != cfg_path:
            digests[str(path.relative_to(root))] = hashlib.sha256(
                path.read_bytes()
            ).hexdigest()
    return digests


def test_criterion_9_determinism(tmp_path, monkeypatch):
    runs = []
    for name in ("a", "b"):
        root = tmp_path / name
        root.mkdir()
        monkeypatch.chdir(root)
        runs.append(_run_pipeline(root))
    same = runs[0] == runs[1]
    ok = same and len(runs[0]) > 0
    _verdict(
        9,
        ok,
        f"{len(runs[0])} artifacts byte-identical across rerun"
        if ok
        else "artifact mismatch between reruns",
    )
