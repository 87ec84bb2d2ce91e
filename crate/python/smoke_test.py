"""Smoke test for the hybrid_ad_py extension module.

Build and install first:
    pip install --no-build-isolation -e crates/python
"""

import math

import hybrid_ad_py as ha


def close(a, b, tol):
    assert abs(a - b) <= tol, f"{a} vs {b}"


def jets():
    x = ha.Jet(0.5, 4)
    y = (x * x + 1.0).apply("exp")
    d = y.derivatives
    close(d[0], math.exp(1.25), 1e-12)
    close(d[1], 2 * 0.5 * math.exp(1.25), 1e-12)
    q = (1.0 / x) * x
    assert all(abs(c) < 1e-14 for c in q.coeffs[1:])


def tapes():
    t = ha.Tape(["x*y + sin(x)", "exp(y)/x"], ["x", "y"])
    p = [0.7, -0.3]
    fwd = t.jacobian(p)
    rev = t.jacobian(p, mode="reverse")
    for r1, r2 in zip(fwd, rev):
        for a, b in zip(r1, r2):
            close(a, b, 1e-14)
    close(fwd[0][0], -0.3 + math.cos(0.7), 1e-14)
    h = t.hessian(p)
    close(h[0][1], 1.0, 1e-14)


def diagrams():
    d = ha.Diagram.example("first_order")
    assert d.params == {"k": 1.0, "tau": 0.5}
    s = d.sensitivities(["tau"], route="sensode", tf=2.0)
    a = d.sensitivities(["tau"], route="agdm", tf=2.0)
    for t, x, y in zip(s["t"], s["dy/dtau"], a["dy/dtau"]):
        close(x, y, 1e-9)
        close(x, -t * math.exp(-t / 0.5) / 0.25, 1e-5)
    dd = ha.Diagram.from_json(d.diff("tau").to_json())
    assert "dy/dtau" in dd.outputs
    tr = dd.simulate(tf=1.0, method="midpoint")
    assert len(tr["t"]) == 1001
    try:
        d.diff("nope")
    except ha.HybridAdError as e:
        assert "k, tau" in str(e)
    else:
        raise AssertionError("unknown parameter accepted")


def solvers_and_tables():
    root, der = ha.solve("x^2 - theta", 1.5, 1.0, order=2)
    close(root, math.sqrt(1.5), 1e-14)
    close(der[2], -0.25 * 1.5 ** -1.5, 1e-10)
    rk4 = next(l for l in ha.table("rk4-derivs").splitlines() if l.startswith("RK4"))
    assert rk4.split("\t")[1:6] == ["-1", "2", "-6", "24", "-115"]


def optimizer():
    d = ha.Diagram.example("second_order")
    zeta, _, _ = d.optimize("zeta", 0.1, "L", accumulator="J", step=0.005, tf=10.0)
    close(zeta, math.sqrt(0.5), 5e-3)


if __name__ == "__main__":
    for f in (jets, tapes, diagrams, solvers_and_tables, optimizer):
        f()
        print(f"ok {f.__name__}")
