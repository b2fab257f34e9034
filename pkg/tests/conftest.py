import numpy as np
import pytest

from carmm.diagnostics import summarize
from carmm.compare import fit_report
from carmm.graph import build_graph
from carmm.hmc import FitConfig, hmc_fit
from carmm.membership import build_membership
from carmm.model import Dataset, ModelSpec, ParameterState, preprocess_covariates
from carmm.simulate import make_lattice, make_membership, simulate_scenario, study_truth

TRIANGLE = [(0, 1), (1, 2), (0, 2)]


def random_connected_edges(n, rng, extra=None):
    """Random spanning tree plus a few extra edges; no isolated areas."""
    perm = rng.permutation(n)
    edges = {tuple(sorted((int(perm[k]), int(perm[rng.integers(k)])))) for k in range(1, n)}
    extra = n // 2 if extra is None else extra
    for _ in range(extra):
        i, j = rng.choice(n, 2, replace=False)
        edges.add(tuple(sorted((int(i), int(j)))))
    return sorted(edges)


def random_membership(m, n, rng, support=4):
    triplets = []
    for j in range(m):
        k = min(n, support)
        for i in rng.choice(n, k, replace=False):
            triplets.append((j, int(i), float(rng.uniform(0.1, 1.0))))
    return build_membership(triplets, m, n, renormalize=True)


def random_state(spec, graph, rng, p=0):
    lo, hi = spec.alpha_interval(graph)
    a1 = rng.uniform(lo + 0.05 * (hi - lo), hi - 0.05 * (hi - lo))
    a2 = a1 if spec.prior_kind == "mcar" else rng.uniform(lo + 0.05 * (hi - lo), hi - 0.05 * (hi - lo))
    return ParameterState(
        phi1=rng.normal(0, 0.5, graph.n), phi2=rng.normal(0, 0.5, graph.n),
        alpha1=float(a1), alpha2=float(a2),
        tau1=float(rng.uniform(0.5, 5)), tau2=float(rng.uniform(0.5, 5)),
        eta0=float(rng.normal(0, 0.5)), eta1=0.0 if spec.prior_kind == "mcar" else float(rng.normal(0, 0.3)),
        gamma1=float(rng.normal(0, 0.5)), gamma2=float(rng.normal(0, 0.5)),
        beta1=rng.normal(0, 0.5, p), beta2=rng.normal(0, 0.5, p),
        psi1=float(rng.uniform(2, 30)), psi2=float(rng.uniform(2, 30)),
    )


@pytest.fixture
def triangle():
    return build_graph(TRIANGLE, 3)


@pytest.fixture
def small_problem():
    """5x5 lattice, 40 memberships, two covariates."""
    rng = np.random.default_rng(11)
    graph = make_lattice(5, 5)
    H = random_membership(40, graph.n, rng, support=5)
    X = rng.uniform(0, 1, (graph.n, 2))
    data = Dataset(
        y1=rng.poisson(10, graph.n), y2=rng.poisson(20, 40),
        E1=rng.uniform(5, 20, graph.n), E2=rng.uniform(5, 20, 40), X=X,
    )
    return graph, H, data, preprocess_covariates(X)


@pytest.fixture(scope="session")
def tiny_fit():
    """A short but complete fit on a 4x4 lattice, shared by post-processing tests."""
    truth = study_truth("gmcar", False)
    sc = simulate_scenario(truth, 4, 4, 20, np.random.default_rng(5), sparsity=4)
    config = FitConfig(chains=2, iterations=300, seed=3, trajectory_length=3.0)
    samples = hmc_fit(sc.data, truth.model_spec(), sc.graph, sc.H, config)
    return sc, samples


RECOVERY_REPLICATES = 10


@pytest.fixture(scope="session")
def recovery_study():
    """Ten simulate-and-fit replicates at the GMCAR no-covariate study truths.

    10x10 lattice, 130 memberships, 4 chains x 1500 iterations (half warm-up).
    Only summaries are kept.
    """
    truth = study_truth("gmcar", False)
    spec = truth.model_spec()
    graph = make_lattice(10, 10)
    out = []
    for r in range(RECOVERY_REPLICATES):
        rng = np.random.default_rng([7, r])
        sc = simulate_scenario(truth, 10, 10, 130, rng, graph=graph)
        samples = hmc_fit(sc.data, spec, sc.graph, sc.H, FitConfig(chains=4, iterations=1500, seed=r))
        report = summarize(samples, include_fields=False)
        out.append({
            "summary": {row.name: row for row in report.rows},
            "fit": {k: v.as_dict() for k, v in fit_report(samples, sc.data).items()},
            "n": sc.graph.n,
            "m": sc.H.m,
        })
    return truth, out
