"""Quick end-to-end check of the Python bindings."""

import math

import pyiicperc as ip


def main():
    m = ip.ModelSpec.nearest_neighbour(2, 0.3)
    assert m.coordination == 4

    c = ip.grow_cluster(m, seed=1, stream=0, size_cap=100)
    assert len(c.sites()) == c.size
    assert abs(c.fourier_sum([0.0, 0.0]) - c.size) < 1e-12
    again = ip.grow_cluster(m, seed=1, stream=0, size_cap=100)
    assert again.fingerprint() == c.fingerprint()

    batch = ip.sample_batch(m, seed=3, count=200, size_cap=64, workers=2)
    assert len(batch) == 200

    acc = ip.EstimatorAccumulator(2, [[0.0, 0.0], [math.pi, 0.0]], [(0, 0), (1, 0)])
    acc.sample(m, seed=4, count=200_000, size_cap=4)
    law = ip.exact_cluster_law(2, 4, 0.3)
    exact = law.size_distribution()
    for n, p, se in acc.size_distribution():
        assert abs(p - exact[n]) < 5 * se + 1e-12, (n, p, exact[n], se)
    est, se = acc.tau_hat([math.pi, 0.0], 3)
    assert abs(est - law.tau_hat([math.pi, 0.0], 3)) < 5 * se
    q, _ = acc.qn_hat([0.0, 0.0], 2)
    assert q == 1

    assert abs(ip.two_point_hat(0.0) - 1) < 1e-10
    assert abs(ip.two_point_hat(1.0) - ip.two_point_hat_closed_form(1.0)) < 1e-10
    assert abs(ip.three_point_hat([0.0], [0.0]) - 1) < 1e-8

    rec = ip.lambda_coefficients(1.0, 50)
    con = ip.lambda_coefficients(1.0, 50, method="contour")
    assert max(abs(a - b) for a, b in zip(rec, con)) < 1e-10
    z = 0.3 + 0.1j
    partial = sum(a * z**n for n, a in enumerate(rec))
    assert abs(partial - ip.lambda_at(z, 1.0)) < 1e-10

    line = ip.grow_cluster(ip.ModelSpec.nearest_neighbour(1, 1.0), seed=0, stream=0, size_cap=5)
    assert line.truncated

    print("python smoke test passed")


if __name__ == "__main__":
    main()
