"""Smoke test for the Python bindings.

    pip install --no-build-isolation -e crates/python
    python python/smoke_test.py
"""

import endpoint_ddp as ed


def max_diff(a, b):
    return max(abs(x - y) for ra, rb in zip(a, b) for x, y in zip(ra, rb))


def main():
    # LQR with an endpoint constraint: one Newton step is exact.
    lqr = ed.Problem("lqr")
    sol = ed.solve(lqr, seed=1, magnitude=0.1)
    assert sol.status == "Converged", sol
    assert sol.iterations == 1, sol
    assert sol.endpoint_l1 <= 1e-10, sol
    print("lqr:", sol)

    # Riccati direction vs dense KKT solve on a random constrained LQ.
    lq = ed.RandomLq(7, horizon=5, state_dim=4, control_dim=3, constraint_dim=1, endpoint_dim=2)
    dense = lq.dense()
    for endpoint in ("schur", "null-lu", "null-qr"):
        for formulation in ("inverse-schur", "inverse-nullspace"):
            step = lq.direction(endpoint=endpoint, formulation=formulation)
            err = max(max_diff(step["dx"], dense["dx"]), max_diff(step["du"], dense["du"]))
            assert err <= 1e-8, (endpoint, formulation, err)
    print("random LQ: riccati matches dense")

    # Double pendulum, inverse form, from a seeded cold start.
    dp = ed.Problem("dpend-inverse", horizon=100, dt=0.02)
    assert dp.state_dim == 4 and dp.endpoint_dim == 4
    sol = ed.solve(dp, seed=0, magnitude=0.1, hessian="exact")
    assert sol.status == "Converged", sol
    assert sol.endpoint_l1 <= 1e-8, sol
    print("dpend-inverse:", sol)

    # Bad options surface as ValueError.
    try:
        ed.solve(lqr, max_iters=-1)
    except (ValueError, OverflowError, TypeError):
        pass
    else:
        raise AssertionError("negative max_iters accepted")
    try:
        ed.Problem("no-such-family")
    except ValueError:
        pass
    else:
        raise AssertionError("unknown family accepted")

    report = ed.run(
        """
        variants = ["schur", "null-qr"]
        repetitions = 2
        [problem]
        family = "lqr"
        duplicate-endpoint = 2
        [output]
        dir = "%s"
        """ % "target/py-smoke",
        "compare",
    )
    outcomes = {v["variant"]: v["outcome"] for v in report["variants"]}
    assert outcomes["schur"] == "FAILED(SingularEndpointOperator)", outcomes
    assert outcomes["null-qr"] == "ok", outcomes
    print("compare:", outcomes)
    print("ok")


if __name__ == "__main__":
    main()
