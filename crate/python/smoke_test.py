"""Smoke test for the pynovikov extension.

Build and install it first:
    pip install --no-build-isolation ./crates/novikov-lab-py
"""

import math
import tempfile

import pynovikov as nl


def check_ring():
    f = nl.RingElement.from_integers([1.0], [([0], 1), ([1], 1)])
    sq = f * f
    assert sq.terms() == [([0], "1"), ([1], "2"), ([2], "1")], sq.terms()
    s = complex(1.5, 0.4)
    assert abs(sq.evaluate(s) - f.evaluate(s) ** 2) < 1e-12
    geo = nl.RingElement.from_integers([1.0], [([n], 1) for n in range(101)])
    assert abs(geo.evaluate(1.0) - 1.0 / (1.0 - math.exp(-1.0))) < 1e-12


def check_torus():
    m = nl.Manifold.torus_exact()
    zeros = m.find_zeros()
    assert [sum(z.index == q for z in zeros) for q in range(3)] == [1, 2, 1]
    top = next(z for z in zeros if z.index == 2)
    assert all(abs(x) < 1e-9 or abs(x - 2 * math.pi) < 1e-9 for x in top.position)
    c = m.novikov_complex(10.0)
    assert c.dims() == [1, 2, 1] and c.euler_characteristic() == 0
    c.verify_d_squared()
    assert c.betti(0j) == [1, 2, 1]
    small = m.spectrum(1, 15.0, 4, grid=32)
    assert sum(v < 1.0 for v in small) == 2, small


def check_novikov():
    m = nl.Manifold.torus_novikov(0.3, 0.5)
    c = m.novikov_complex(3 * 2 * math.pi * 0.3)
    c.verify_d_squared()
    for re in (2.0, 3.0, 4.0):
        assert c.betti(complex(re, 0.0), 0.0) == [0, 0, 0]
    assert nl.Manifold([0.3, 0.3 * math.sqrt(2)]).find_zeros() == []


def check_run():
    toml = '[model]\npreset = "circle_exact"\n\n[numerics]\nrecover_t = [12.0, 16.0]\n'
    with tempfile.TemporaryDirectory() as out:
        code, payload = nl.run_config(toml, out)
    assert code == 0, payload
    assert '"zeros"' in payload


if __name__ == "__main__":
    check_ring()
    check_torus()
    check_novikov()
    check_run()
    print("smoke test passed")
