"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v``.
"""
import json
import math
import time
from fractions import Fraction

import numpy as np
import pytest

from m2vae.cli import main as cli_main
from m2vae.compiler import (Likelihood, Modality, ModalitySet, TermKind, coefficient, expand_jmvae,
                            expand_jmvae3_style, expand_m2vae, expand_m2vae_bruteforce, popcount)
from m2vae.data import SyntheticSpec, generate
from m2vae.distributions import DiagGaussian, RngStream, kl_gaussian, mc_kl
from m2vae.nets import InventoryError, build_bundle, grad_check
from m2vae.oracles import (DiscreteJoint, LinearGaussianModel, conditional_entropy, elbo_gap, entropy,
                           exact_log_likelihood, mutual_information, true_posterior_diag,
                           variation_of_information)
from m2vae.training import TrainConfig, build_for, evaluate_cross_modal, smoothed, train

R, P, X = TermKind.RECON, TermKind.PRIOR_KL, TermKind.CROSS_KL


@pytest.fixture
def verdict(capsys):
    def report(n, ok, detail):
        with capsys.disabled():
            print(f"\ncriterion {n}: {'PASS' if ok else 'FAIL'} - {detail}")
        assert ok, detail
    return report


def named_terms(expr):
    ms = expr.modality_set
    return {(t.kind, "".join(ms.member_names(t.subset)),
             None if t.index is None else ms.modalities[t.index].name): t.coefficient for t in expr.terms}


def test_criterion_1_compiler_goldens(verdict):
    start = time.perf_counter()
    half = Fraction(1, 2)
    bi = named_terms(expand_m2vae(ModalitySet.from_names("ab")))
    want_bi = {(P, "ab", None): half, (R, "ab", "a"): half, (R, "ab", "b"): half,
               (X, "ab", "a"): half, (X, "ab", "b"): half,
               (P, "a", None): half, (R, "a", "a"): half, (P, "b", None): half, (R, "b", "b"): half}
    tri = expand_m2vae(ModalitySet.from_names("abc"))
    level = {3: Fraction(1, 3), 2: Fraction(1, 6), 1: Fraction(1, 3)}
    tri_ok = all(t.coefficient == level[popcount(t.subset)] for t in tri.terms)
    # per level: full triple 1 prior + 3 recon + 3 cross, three pairs of 1 + 2 + 2, three singletons of 1 + 1
    counts = {k: sum(popcount(t.subset) == k for t in tri.terms) for k in (1, 2, 3)}
    elapsed = time.perf_counter() - start
    ok = bi == want_bi and tri_ok and counts == {3: 7, 2: 15, 1: 6} and elapsed < 1.0
    verdict(1, ok, f"bimodal 9 terms at 1/2: {bi == want_bi}; trimodal levels {counts} at 1/3,1/6,1/3: "
                   f"{tri_ok}; {elapsed:.3f}s")


def test_criterion_2_recursion_oracle(verdict):
    start = time.perf_counter()
    equal = all(expand_m2vae(ms).terms == expand_m2vae_bruteforce(ms).terms
                for ms in (ModalitySet.from_names([f"m{i}" for i in range(n)]) for n in range(1, 7)))
    formula = all(coefficient(k, n) == Fraction(math.factorial(n - k) * math.factorial(k - 1), math.factorial(n))
                  for n in range(1, 7) for k in range(1, n + 1))
    elapsed = time.perf_counter() - start
    verdict(2, equal and formula and elapsed < 10.0,
            f"closed form == recursion for N=1..6: {equal}; factorial formula: {formula}; {elapsed:.2f}s")


def test_criterion_3_jmvae_structure(verdict):
    one = Fraction(1)
    got = named_terms(expand_jmvae(ModalitySet.from_names("ab")))
    want = {(P, "ab", None): one, (R, "ab", "a"): one, (R, "ab", "b"): one, (X, "ab", "a"): one, (X, "ab", "b"): one}
    ms3 = ModalitySet.from_names("abc", data_dim=2)
    e3 = expand_jmvae3_style(ms3)
    singletons = [m for m in e3.encoder_inventory() if popcount(m) == 1]
    ds = generate(SyntheticSpec(dims={"a": 2, "b": 2, "c": 2}, n_samples=50))
    bundle = build_bundle(e3, hidden=(8,))
    refused = []
    for src in ("a", "b", "c"):
        try:
            evaluate_cross_modal(bundle, ds, [src], "a")
        except InventoryError as exc:
            refused.append("encoder not in inventory" in str(exc))
    ok = got == want and not singletons and refused == [True] * 3
    verdict(3, ok, f"bimodal terms match: {got == want}; trimodal singleton encoders: {singletons}; "
                   f"singleton sources refused: {sum(refused)}/3")


def test_criterion_4_gaussian_kl(verdict):
    start = time.perf_counter()
    exact = float(kl_gaussian(DiagGaussian([1.0], [0.0]), DiagGaussian([0.0], [0.0])))
    rng = RngStream(2024)
    worst = 0.0
    for _ in range(200):
        d = int(rng.integers(4)) + 1
        q = DiagGaussian(rng.normal(d), rng.uniform(-1.5, 1.5, d))
        p = DiagGaussian(rng.normal(d), rng.uniform(-1.5, 1.5, d))
        est, se = mc_kl(q, p, 100_000, rng)
        worst = max(worst, abs(est - float(kl_gaussian(q, p))) / se)
    elapsed = time.perf_counter() - start
    ok = abs(exact - 0.5) <= 1e-12 and worst < 4.0 and elapsed < 30.0
    verdict(4, ok, f"KL(N(1,1)||N(0,1)) - 0.5 = {exact - 0.5:.1e}; worst |closed - MC| = {worst:.2f} SE "
                   f"over 200 pairs; {elapsed:.1f}s")


def test_criterion_5_gradient_fidelity(verdict):
    start = time.perf_counter()
    rng = np.random.default_rng(0)
    mixed = ModalitySet((Modality("a", 4, Likelihood.GAUSSIAN), Modality("b", 6, Likelihood.BERNOULLI)), 2)
    batch = {"a": rng.normal(size=(16, 4)), "b": (rng.random((16, 6)) < 0.5).astype(float)}
    tanh = grad_check(build_bundle(expand_m2vae(mixed), hidden=(64, 64), seed=1), batch, coords=1000, seed=2)
    smooth_ms = ModalitySet((Modality("a", 20), Modality("b", 20)), 4)
    smooth_batch = {"a": rng.normal(size=(16, 20)), "b": rng.normal(size=(16, 20))}
    linear = grad_check(build_bundle(expand_m2vae(smooth_ms), hidden=(), seed=1), smooth_batch, coords=1000,
                        seed=3)
    elapsed = time.perf_counter() - start
    ok = (tanh.checked >= 1000 and tanh.max_rel_err < 1e-4 and linear.checked >= 1000
          and linear.max_rel_err < 1e-6 and elapsed < 60.0)
    verdict(5, ok, f"tanh: {tanh.checked} coords max rel err {tanh.max_rel_err:.1e}; "
                   f"linear: {linear.checked} coords max rel err {linear.max_rel_err:.1e}; {elapsed:.1f}s")


def test_criterion_6_bound_witness(verdict):
    start = time.perf_counter()
    model = LinearGaussianModel({"a": [[1.2]], "b": [[-0.7]]}, {"a": [0.3], "b": [-0.1]}, {"a": 0.5, "b": 0.8})
    ms = ModalitySet((Modality("a", 1), Modality("b", 1)), 1)
    from m2vae.compiler import expand_joint
    expr = expand_joint(ms)
    rng = RngStream(6)
    worst = -np.inf
    for seed in range(100):
        z = rng.normal(1)
        obs = {k: model.weights[k] @ z + model.biases[k] + math.sqrt(model.noise_var[k]) * rng.normal(1)
               for k in ("a", "b")}
        g = elbo_gap(model, build_bundle(expr, hidden=(8,), seed=seed), obs, 10_000, rng.split(1)[0])
        worst = max(worst, (g.elbo - g.exact) / g.std_error)
    obs = {"a": np.array([0.9]), "b": np.array([-0.4])}
    truth = elbo_gap(model, build_bundle(expr, hidden=(8,)), obs, 10_000, 7,
                     posteriors={ms.full_mask: true_posterior_diag(model, obs)})
    elapsed = time.perf_counter() - start
    ok = worst <= 3.0 and abs(truth.gap) <= 3 * truth.std_error and elapsed < 60.0
    verdict(6, ok, f"max (ELBO - log p)/SE over 100 encoders = {worst:.2f}; true-posterior gap "
                   f"{truth.gap:.1e} with SE {truth.std_error:.1e}; {elapsed:.1f}s")


@pytest.mark.slow
def test_criterion_7_training_sanity(verdict):
    start = time.perf_counter()
    ds = generate(SyntheticSpec(generator="shared_latent_linear", dims={"a": 4, "b": 4}, latent_dim=2,
                                noise=0.1, n_samples=2000, seed=0))
    cfg = TrainConfig(variant="m2vae", latent_dim=2, steps=2000, seed=0, metrics=None, checkpoint=None)
    _, held_out = ds.split(cfg.holdout_fraction)
    baseline = evaluate_cross_modal(build_for(cfg, ds), held_out, ["a"], "b")
    result = train(cfg, ds)
    trained = evaluate_cross_modal(result.bundle, held_out, ["a"], "b")
    curve = smoothed([r["objective"] for r in result.history], 50)
    elapsed = time.perf_counter() - start
    ok = curve[-1] > curve[0] and baseline / trained >= 2.0 and elapsed < 300.0
    verdict(7, ok, f"smoothed ELBO {curve[0]:.3f} -> {curve[-1]:.3f}; {{a}}->b error {baseline:.4f} -> "
                   f"{trained:.4f} ({baseline / trained:.1f}x); {elapsed:.1f}s")


def test_criterion_8_vi_identities(verdict):
    rng = np.random.default_rng(8)
    worst = 0.0
    for _ in range(100):
        shape = tuple(rng.integers(2, 6, size=2))
        t = rng.random(shape)
        j = DiscreteJoint(t / t.sum())
        h_form = entropy(j, 0) + entropy(j, 1) - 2 * mutual_information(j, 0, 1)
        c_form = conditional_entropy(j, 0, 1) + conditional_entropy(j, 1, 0)
        worst = max(worst, abs(h_form - c_form))
        variation_of_information(j)
    bits = variation_of_information(DiscreteJoint(np.full((2, 2, 2), 0.125)))
    ok = worst <= 1e-12 and abs(bits - 3 * math.log(2)) <= 1e-12
    verdict(8, ok, f"max |H-form - conditional form| = {worst:.1e}; VI(3 bits) - 3 ln2 = {bits - 3 * math.log(2):.1e}")


def test_criterion_9_determinism(verdict, tmp_path, capsys):
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps({"variant": "m2vae", "hidden": [32, 32], "steps": 200, "lr": 0.003,
                               "eval_every": 50, "synthetic": {"dims": {"a": 4, "b": 4}, "n_samples": 500}}))
    codes = [cli_main(["train", "--config", str(cfg), "--seed", "5", "--out-dir", str(tmp_path / d)])
             for d in ("first", "second")]
    capsys.readouterr()
    same = {f: (tmp_path / "first" / f).read_bytes() == (tmp_path / "second" / f).read_bytes()
            for f in ("metrics.csv", "checkpoint.json")}
    verdict(9, codes == [0, 0] and all(same.values()), f"exit codes {codes}; byte-identical {same}")
