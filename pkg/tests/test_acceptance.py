"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the per-criterion
lines as they complete.
"""

import time
import warnings
from contextlib import contextmanager

import numpy as np
import pytest

from sdm_dsgd import (
    AlgorithmConfig,
    ClipConfig,
    DatasetSpec,
    Engine,
    ObjectiveSpec,
    PrivacySpec,
    RunConfig,
    SparsifierConfig,
    TopologySpec,
    build_consensus_matrix,
    calibrate_sigma,
    complete_topology,
    count_transmission,
    generate_erdos_renyi,
    load_trace,
    lyapunov_value_and_grad,
    make_objective,
    max_iterations,
    mixed_matrix,
    record_at_budget,
    replay_residuals,
    run,
    save_trace,
    sdm_dsgd_epsilon,
    alternative_design_epsilon,
    sparsify,
    synth_classification,
    synth_quadratic,
)
from sdm_dsgd.privacy import PrivacyParams, per_iteration_rho


@contextmanager
def criterion(number, label):
    started = time.perf_counter()
    try:
        yield
    except BaseException:
        print(f"\nACCEPTANCE {number:02d} {label}: FAIL")
        raise
    print(f"\nACCEPTANCE {number:02d} {label}: PASS ({time.perf_counter() - started:.1f}s)")


def central_difference(func, x, h=1e-5):
    grad = np.zeros_like(x)
    for k in range(x.size):
        plus, minus = x.copy(), x.copy()
        plus[k] += h
        minus[k] -= h
        grad[k] = (func(plus) - func(minus)) / (2 * h)
    return grad


def test_criterion_01_sparsifier_moments():
    with criterion(1, "sparsifier moments"):
        started = time.perf_counter()
        gen = np.random.default_rng(100)
        x = gen.normal(size=8)
        x_sq = float(x @ x)
        n_draws = 100_000
        for p in (0.2, 0.5, 0.8):
            cfg = SparsifierConfig(p, seed=31)
            sums = np.zeros_like(x)
            sq_dev = 0.0
            for t in range(n_draws):
                sv = sparsify(x, cfg, step=t)
                vals, idx = sv.values, sv.active_indices
                sums[idx] += vals
                # ||S - x||^2 = ||x||^2 + sum_active (v^2 - 2 v x).
                sq_dev += x_sq + float(vals @ vals - 2.0 * (vals @ x[idx]))
            se = np.sqrt(x**2 * (1 / p - 1) / n_draws)
            assert np.all(np.abs(sums / n_draws - x) <= 4 * se)
            analytic = (1 / p - 1) * x_sq
            assert sq_dev / n_draws == pytest.approx(analytic, rel=0.05)
        assert time.perf_counter() - started < 10.0


def test_criterion_02_privacy_closed_forms():
    with criterion(2, "privacy closed forms"):
        started = time.perf_counter()
        params = PrivacyParams(
            sigma2=1.0, tau=0.1, sensitivity_g=1.0, local_samples_m=10,
            transmit_prob_p=0.5, delta=1e-5, epsilon_target=1.0,
        )
        eps_sdm, _ = sdm_dsgd_epsilon(params, 10)
        assert eps_sdm == pytest.approx(0.548051701859881, rel=1e-9)
        eps_alt, _ = alternative_design_epsilon(params, 10)
        assert eps_alt == pytest.approx(0.6922068074395237, rel=1e-9)
        cal = calibrate_sigma(
            PrivacyParams(
                sigma2=1.0, tau=0.1, sensitivity_g=5.0, local_samples_m=10,
                transmit_prob_p=0.5, delta=1e-5, epsilon_target=0.1,
            ),
            100,
        )
        assert cal.sigma2 == pytest.approx(2312.5850929940457, rel=1e-9)
        t_max = max_iterations(
            PrivacyParams(
                sigma2=1.0, tau=0.1, sensitivity_g=1.0, local_samples_m=10,
                transmit_prob_p=0.5, delta=1e-5, epsilon_target=1.0,
            )
        )
        assert t_max == 86
        gen = np.random.default_rng(11)
        for _ in range(100):
            draw = PrivacyParams(
                sigma2=float(gen.uniform(0.8, 50.0)),
                tau=float(gen.uniform(0.01, 1.0)),
                sensitivity_g=float(gen.uniform(0.1, 20.0)),
                local_samples_m=int(gen.integers(1, 500)),
                transmit_prob_p=float(gen.uniform(0.05, 1.0)),
                delta=float(10.0 ** gen.uniform(-8, -2)),
                epsilon_target=float(gen.uniform(0.05, 3.0)),
            )
            alpha = draw.renyi_order()
            ratio = per_iteration_rho(draw, alpha, reversed_order=True) / per_iteration_rho(
                draw, alpha
            )
            assert ratio == pytest.approx(1.0 / draw.transmit_prob_p**2, rel=1e-12)
        assert time.perf_counter() - started < 1.0


def test_criterion_03_calibration_round_trip():
    with criterion(3, "calibration round trip"):
        gen = np.random.default_rng(5)
        accepted = 0
        while accepted < 50:
            m = int(gen.integers(2, 20))
            params = PrivacyParams(
                sigma2=1.0,
                tau=1.0 / m,
                sensitivity_g=float(gen.uniform(0.5, 10.0)),
                local_samples_m=m,
                transmit_prob_p=float(gen.uniform(0.1, 1.0)),
                delta=float(10.0 ** gen.uniform(-6, -3)),
                epsilon_target=float(gen.uniform(0.05, 2.0)),
            )
            iterations = int(gen.integers(50, 5000))
            result = calibrate_sigma(params, iterations)
            if not result.valid:
                continue
            eps_total, _ = sdm_dsgd_epsilon(params.with_sigma2(result.sigma2), iterations)
            assert eps_total <= params.epsilon_target + 1e-9
            accepted += 1


def test_criterion_04_consensus_matrices():
    with criterion(4, "consensus matrix spectra"):
        gen = np.random.default_rng(40)
        for k in range(100):
            n = int(gen.integers(5, 51))
            topo = generate_erdos_renyi(n, 0.35, seed=1000 + k)
            w = build_consensus_matrix(topo)
            assert np.array_equal(w.entries, w.entries.T)
            assert np.abs(w.entries.sum(axis=0) - 1).max() <= 1e-10
            assert np.abs(w.entries.sum(axis=1) - 1).max() <= 1e-10
            assert w.spectral.eigenvalues[-1] >= 1 / 3 - 1e-10
            assert w.spectral.eigenvalues[0] <= 1 + 1e-10
            beta = w.spectral.beta
            for theta in gen.uniform(0.05, 0.999, size=10):
                m = mixed_matrix(w, float(theta))
                assert 1.0 / (1.0 - m.spectral.beta) <= (1 + 1e-9) / (theta * (1.0 - beta))


def test_criterion_05_reduction_identities():
    with criterion(5, "reduction identities"):
        topo = generate_erdos_renyi(5, 0.8, seed=3)
        w = build_consensus_matrix(topo)
        ds = synth_quadratic(5, 4, seed=11, samples_per_node=2)
        obj = make_objective("quadratic", ds)

        shared = dict(gamma=0.04, transmit_prob=0.7, sigma2=0.6)
        e_sdm = Engine(w, obj, ds, AlgorithmConfig("sdm_dsgd", theta=1.0, **shared), seed=6)
        e_dc = Engine(w, obj, ds, AlgorithmConfig("dc_dsgd", theta=1.0, **shared), seed=6)
        for _ in range(100):
            r1, r2 = e_sdm.step(), e_dc.step()
            assert np.abs(r1.x_at_grad - r2.x_at_grad).max() <= 1e-12

        plain = dict(gamma=0.05, transmit_prob=1.0, sigma2=0.0)
        e_sdm1 = Engine(w, obj, ds, AlgorithmConfig("sdm_dsgd", theta=1.0, **plain), seed=6)
        e_dsgd = Engine(w, obj, ds, AlgorithmConfig("dsgd", theta=1.0, **plain), seed=6)
        for _ in range(100):
            r1, r2 = e_sdm1.step(), e_dsgd.step()
            assert np.abs(r1.x_at_grad - r2.x_at_grad).max() <= 1e-12


def test_criterion_06_lyapunov_replay(tmp_path):
    with criterion(6, "differential replay identity"):
        theta, gamma = 0.4, 0.05
        topo = complete_topology(3)
        w = build_consensus_matrix(topo)
        ds = synth_quadratic(3, 4, seed=2, samples_per_node=4)
        obj = make_objective("quadratic", ds)
        cfg = AlgorithmConfig(
            "sdm_dsgd", theta=theta, gamma=gamma, transmit_prob=0.6, sigma2=0.8, tau=1.0
        )
        engine = Engine(w, obj, ds, cfg, seed=9, record_trace=True)
        for _ in range(50):
            engine.step()
        path = tmp_path / "replay.trace"
        save_trace(engine.trace, path, header_extra={"theta": theta, "gamma": gamma})
        _, records = load_trace(path)
        assert len(records) == 50
        residuals = replay_residuals(records, w, obj, ds, theta=theta, gamma=gamma)
        assert residuals.max() <= 1e-10


def test_criterion_07_convergence_sanity():
    with criterion(7, "ring convergence sanity"):
        started = time.perf_counter()
        config = RunConfig(
            topology=TopologySpec(kind="ring", nodes=10),
            dataset=DatasetSpec(kind="quadratic", features=3),
            objective=ObjectiveSpec(id="quadratic"),
            algorithm=AlgorithmConfig(
                "sdm_dsgd", theta=0.25, gamma=0.01, transmit_prob=0.5, sigma2=0.8,
                schedule="recommended", schedule_c=0.015,
            ),
            iterations=20_000,
            seed=7,
            metric_stride=10,
        )
        result = run(config)
        assert result.status == "ok"
        assert result.min_grad_norm_sq < 1e-3
        assert result.records[-1].consensus_err < 1e-2
        assert time.perf_counter() - started < 120.0


def test_criterion_08_divergence_reproduction():
    with criterion(8, "low-p divergence reproduction"):
        started = time.perf_counter()

        def config(theta, gamma):
            return RunConfig(
                topology=TopologySpec(kind="erdos_renyi", nodes=50, edge_prob=0.35),
                dataset=DatasetSpec(kind="classification", classes=3, features=10, samples=3200),
                objective=ObjectiveSpec(id="mlr"),
                algorithm=AlgorithmConfig(
                    "sdm_dsgd", theta=theta, gamma=gamma, transmit_prob=0.2, sigma2=0.0
                ),
                iterations=600,
                seed=21,
                metric_stride=5,
            )

        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            for gamma in (0.1, 0.01):
                result = run(config(1.0, gamma))
                assert result.status == "diverged", f"gamma={gamma} did not diverge"
            stable = run(config(0.6, 0.01))
        assert stable.status == "ok"
        losses = [r.loss for r in stable.records]
        assert losses[-1] < 0.75 * losses[0]
        assert time.perf_counter() - started < 300.0


def test_criterion_09_communication_accounting():
    with criterion(9, "communication accounting"):
        topo = generate_erdos_renyi(10, 0.5, seed=5)
        degrees = topo.degrees()
        p, d, rounds = 0.5, 100, 1000
        cfg = SparsifierConfig(p, seed=7)
        gen = np.random.default_rng(3)
        total = 0
        for t in range(rounds):
            vectors = [sparsify(gen.normal(size=d), cfg, node=i, step=t) for i in range(10)]
            broadcast = count_transmission(vectors, topo, "per_broadcast")
            per_edge = count_transmission(vectors, topo, "per_edge")
            assert per_edge == sum(int(degrees[i]) * sv.nnz for i, sv in enumerate(vectors))
            total += broadcast
        assert total / rounds == pytest.approx(p * 10 * d, rel=0.05)


def test_criterion_10_qualitative_ordering():
    with criterion(10, "variant ordering at matched budgets"):
        started = time.perf_counter()

        def config(variant, theta, p, iterations, seed):
            return RunConfig(
                topology=TopologySpec(kind="erdos_renyi", nodes=50, edge_prob=0.35),
                dataset=DatasetSpec(kind="classification", classes=3, features=10, samples=3200),
                objective=ObjectiveSpec(id="mlr"),
                algorithm=AlgorithmConfig(
                    variant, theta=theta, gamma=0.02, transmit_prob=p,
                    sigma2=1.0, clip=ClipConfig(5.0),
                ),
                privacy=PrivacySpec(delta=1e-5, epsilon_target=1.0),
                iterations=iterations,
                seed=seed,
                metric_stride=5,
                comm_counting_mode="per_broadcast",
            )

        ordered = 0
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            for seed in (1, 2, 3, 4, 5):
                r_dsgd = run(config("dsgd", 1.0, 1.0, 70, seed))
                anchor = [r for r in r_dsgd.records if r.iteration == 60][0]
                budgets = dict(nnz_budget=anchor.cum_nnz, epsilon_budget=anchor.cum_epsilon)
                r_dc = run(config("dc_dsgd", 1.0, 0.5, 160, seed))
                r_sdm = run(config("sdm_dsgd", 0.6, 0.2, 400, seed))
                at_budget = {
                    name: record_at_budget(result.records, **budgets)
                    for name, result in (("dsgd", r_dsgd), ("dc", r_dc), ("sdm", r_sdm))
                }
                if (
                    at_budget["sdm"].loss
                    <= at_budget["dc"].loss
                    <= at_budget["dsgd"].loss
                ):
                    ordered += 1
        assert ordered >= 4, f"ordering held in only {ordered}/5 seeds"
        assert time.perf_counter() - started < 600.0


def test_criterion_11_gradient_correctness():
    with criterion(11, "gradient correctness"):
        gen = np.random.default_rng(77)
        classification = synth_classification(3, 5, 30, seed=0, n_nodes=3)
        quadratic = synth_quadratic(3, 5, seed=1, samples_per_node=4)
        cases = [
            (make_objective("quadratic", quadratic), quadratic),
            (make_objective("mlr", classification), classification),
            (make_objective("mlp", classification, hidden=6), classification),
        ]
        for objective, ds in cases:
            for _ in range(20):
                x = gen.normal(size=objective.dim) * 0.8
                _, grad = objective.loss_and_grad(x, ds.features, ds.labels)
                fd = central_difference(
                    lambda v: objective.loss_and_grad(v, ds.features, ds.labels)[0], x
                )
                assert np.abs(grad - fd).max() < 1e-5

        w = build_consensus_matrix(complete_topology(3))
        obj = make_objective("quadratic", quadratic)
        for _ in range(20):
            x = gen.normal(size=(3, obj.dim))
            _, grad = lyapunov_value_and_grad(x, w, 0.2, obj, quadratic)
            fd = central_difference(
                lambda v: lyapunov_value_and_grad(
                    v.reshape(3, obj.dim), w, 0.2, obj, quadratic
                )[0],
                x.ravel(),
            ).reshape(3, obj.dim)
            assert np.abs(grad - fd).max() < 1e-5
