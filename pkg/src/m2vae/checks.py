"""Self-test suites behind ``m2vae check``.

Each check returns ``(passed, detail)``. Sizes are trimmed relative to the
pytest acceptance module so the whole suite stays interactive.
"""
from __future__ import annotations

import math
from fractions import Fraction
from typing import Callable

import numpy as np

from . import compiler as C
from .distributions import DiagGaussian, RngStream, kl_gaussian, log_prob_gaussian, mc_kl
from .nets import build_bundle, grad_check
from .oracles import (DiscreteJoint, LinearGaussianModel, elbo_gap, true_posterior_diag,
                      variation_of_information)

Check = Callable[[], tuple[bool, str]]


def _ms(names: str) -> C.ModalitySet:
    return C.ModalitySet.from_names(names)


def check_golden_bimodal():
    e = C.expand_m2vae(_ms("ab"))
    ok = len(e.terms) == 9 and all(t.coefficient == Fraction(1, 2) for t in e.terms)
    return ok, f"{len(e.terms)} terms, coefficients {sorted({str(t.coefficient) for t in e.terms})}"


def check_golden_trimodal():
    e = C.expand_m2vae(_ms("abc"))
    expected = {1: Fraction(1, 3), 2: Fraction(1, 6), 3: Fraction(1, 3)}
    bad = [t for t in e.terms if t.coefficient != expected[C.popcount(t.subset)]]
    return not bad and len(e.terms) == 28, f"{len(e.terms)} terms, {len(bad)} mismatched"


def check_jmvae():
    e = C.expand_jmvae(_ms("ab"))
    kinds = {(t.kind, t.subset, t.index) for t in e.terms}
    K = C.TermKind
    want = {(K.PRIOR_KL, 3, None), (K.RECON, 3, 0), (K.RECON, 3, 1), (K.CROSS_KL, 3, 0), (K.CROSS_KL, 3, 1)}
    e3 = C.expand_jmvae3_style(_ms("abc"))
    singletons = [m for m in e3.encoder_inventory() if C.popcount(m) == 1]
    ok = kinds == want and all(t.coefficient == 1 for t in e.terms) and not singletons
    return ok, f"bimodal terms {len(kinds)}, trimodal inventory {e3.encoder_inventory()}"


def check_recursion_oracle():
    for n in range(1, 7):
        ms = C.ModalitySet.from_names([f"m{i}" for i in range(n)])
        if C.expand_m2vae(ms).terms != C.expand_m2vae_bruteforce(ms).terms:
            return False, f"closed form differs from recursion at N={n}"
    return True, "closed form == recursion for N=1..6"


def check_coefficient_mass():
    for n in range(1, C.MAX_MODALITIES + 1):
        for k in range(1, n + 1):
            if math.comb(n, k) * C.coefficient(k, n) != Fraction(1, k):
                return False, f"mass at k={k}, N={n}"
    return True, "sum over size-k subsets is 1/k for N<=12"


def check_json_round_trip():
    for variant, names in [("vanilla", "a"), ("joint", "abc"), ("jmvae", "ab"), ("m2vae", "abcd"), ("jmvae3", "abc")]:
        text = C.render(C.expand(variant, _ms(names)), "json")
        if C.render(C.parse_expression(text), "json") != text:
            return False, f"{variant} not byte-stable"
    return True, "render -> parse -> render stable for all variants"


def check_kl_closed_form():
    v = float(kl_gaussian(DiagGaussian([1.0], [0.0]), DiagGaussian.standard(1)))
    return abs(v - 0.5) <= 1e-12, f"KL(N(1,1)||N(0,1)) = {v!r}"


def check_kl_monte_carlo(pairs: int = 20, n: int = 100_000):
    rng = RngStream(11)
    worst = 0.0
    for _ in range(pairs):
        q = DiagGaussian(rng.normal(3), rng.uniform(-1, 1, 3))
        p = DiagGaussian(rng.normal(3), rng.uniform(-1, 1, 3))
        est, se = mc_kl(q, p, n, rng)
        worst = max(worst, abs(est - float(kl_gaussian(q, p))) / se)
    return worst < 4.0, f"max |closed - MC| = {worst:.2f} SE over {pairs} pairs"


def check_density_normalised():
    p = DiagGaussian([0.3], [math.log(0.5)])
    x = np.linspace(-12, 12, 200_001)
    vals = np.exp(log_prob_gaussian(x[:, None], p))
    mass = float(np.sum((vals[1:] + vals[:-1]) * np.diff(x)) / 2)
    return abs(mass - 1.0) < 1e-6, f"integral = {mass:.12f}"


def _grad_batch(ms, n=8, seed=0):
    rng = np.random.default_rng(seed)
    return {m.name: rng.normal(size=(n, m.data_dim)) for m in ms.modalities}


def check_grad_tanh():
    ms = C.ModalitySet((C.Modality("a", 3), C.Modality("b", 2)), 2)
    b = build_bundle(C.expand_m2vae(ms), seed=1)
    r = grad_check(b, _grad_batch(ms), coords=1000)
    return r.max_rel_err < 1e-4, f"{r.checked} coords, max rel err {r.max_rel_err:.2e}"


def check_grad_linear():
    ms = C.ModalitySet((C.Modality("a", 3), C.Modality("b", 2)), 2)
    b = build_bundle(C.expand_m2vae(ms), hidden=(), seed=1)
    r = grad_check(b, _grad_batch(ms), coords=1000)
    return r.max_rel_err < 1e-6, f"{r.checked} coords, max rel err {r.max_rel_err:.2e}"


def _bimodal_model():
    return LinearGaussianModel({"a": [[1.2]], "b": [[-0.7]]}, {"a": [0.3], "b": [-0.1]},
                               {"a": 0.5, "b": 0.8})


def check_elbo_bound(encoders: int = 20):
    model = _bimodal_model()
    obs = {"a": np.array([0.9]), "b": np.array([-0.4])}
    ms = C.ModalitySet((C.Modality("a", 1), C.Modality("b", 1)), 1)
    expr = C.expand_joint(ms)
    worst = -np.inf
    for seed in range(encoders):
        g = elbo_gap(model, build_bundle(expr, hidden=(8,), seed=seed), obs, 20_000, seed)
        worst = max(worst, (g.elbo - g.exact) / g.std_error)
    post = true_posterior_diag(model, obs)
    g = elbo_gap(model, build_bundle(expr, hidden=(8,)), obs, 20_000, 99, posteriors={ms.full_mask: post})
    ok = worst <= 3.0 and abs(g.gap) <= 3 * g.std_error
    return ok, f"max (ELBO-logp)/SE = {worst:.2f}; true posterior gap = {g.gap:.2e} (SE {g.std_error:.1e})"


def check_vi(tables: int = 100):
    rng = np.random.default_rng(5)
    for _ in range(tables):
        t = rng.random((3, 4))
        variation_of_information(DiscreteJoint(t / t.sum()))  # raises if the two forms disagree
    bits = DiscreteJoint(np.full((2, 2, 2), 0.125))
    v3 = variation_of_information(bits)
    return abs(v3 - 3 * math.log(2)) <= 1e-12, f"{tables} tables consistent; VI(3 bits) = {v3!r}"


SUITES: dict[str, list[tuple[str, Check]]] = {
    "compiler": [("golden bimodal", check_golden_bimodal), ("golden trimodal", check_golden_trimodal),
                 ("jmvae structure", check_jmvae), ("recursion oracle", check_recursion_oracle),
                 ("coefficient mass", check_coefficient_mass), ("json round trip", check_json_round_trip)],
    "kl": [("closed form", check_kl_closed_form), ("monte carlo", check_kl_monte_carlo),
           ("density normalised", check_density_normalised)],
    "grad": [("tanh bundle", check_grad_tanh), ("linear bundle", check_grad_linear)],
    "elbo": [("bound witness", check_elbo_bound)],
    "vi": [("identities", check_vi)],
}


def run_checks(suites, out=print) -> bool:
    names = list(SUITES) if "all" in suites else list(suites)
    all_ok = True
    for suite in names:
        for label, fn in SUITES[suite]:
            try:
                ok, detail = fn()
            except Exception as exc:  # a crashing check is a failing check
                ok, detail = False, f"{type(exc).__name__}: {exc}"
            all_ok &= ok
            out(f"{'PASS' if ok else 'FAIL'}  {suite}/{label}: {detail}")
    return all_ok
