"""Arbitrary-precision reference levels for the NV + 14N spin Hamiltonian.

Builds the 9x9 Hamiltonian with mpmath at 50 significant digits and
diagonalizes it with mpmath.eighe. Output values are frozen into
tests/test_spin_core.cpp and tests/acceptance.cpp; rerun this script only to
regenerate them.
"""
import mpmath as mp

mp.mp.dps = 50


def spin_ops(twice_s):
    s = mp.mpf(twice_s) / 2
    d = twice_s + 1
    m = [s - k for k in range(d)]
    sp = mp.zeros(d, d)
    for i in range(1, d):
        sp[i - 1, i] = mp.sqrt(s * (s + 1) - m[i] * (m[i] + 1))
    sm = sp.T
    sx = (sp + sm) / 2
    sy = (sp - sm) / (2 * mp.mpc(0, 1))
    sz = mp.diag(m)
    return sx, sy, sz


def kron(a, b):
    out = mp.zeros(a.rows * b.rows, a.cols * b.cols)
    for i in range(a.rows):
        for j in range(a.cols):
            for k in range(b.rows):
                for l in range(b.cols):
                    out[i * b.rows + k, j * b.cols + l] = a[i, j] * b[k, l]
    return out


def hamiltonian(zfs, quad, a_par, a_perp, b0, gamma_e, gamma_n):
    sx, sy, sz = spin_ops(2)
    ix, iy, iz = spin_ops(2)
    e = mp.eye(3)
    h = zfs * kron(sz * sz, e) + quad * kron(e, iz * iz)
    h += gamma_e * (b0[0] * kron(sx, e) + b0[1] * kron(sy, e) + b0[2] * kron(sz, e))
    h -= gamma_n * (b0[0] * kron(e, ix) + b0[1] * kron(e, iy) + b0[2] * kron(e, iz))
    h += a_par * kron(sz, iz) + a_perp * (kron(sx, ix) + kron(sy, iy))
    return h


def levels(**kw):
    h = hamiltonian(**kw)
    ev, _ = mp.eighe(h)
    return sorted(mp.re(v) for v in ev)


CASES = {
    "gs_n14_509G": dict(zfs=mp.mpf(2870), quad=mp.mpf("-4.945"), a_par=mp.mpf("-2.162"),
                        a_perp=mp.mpf("-2.7"), b0=(0, 0, mp.mpf(509)),
                        gamma_e=mp.mpf("2.799"), gamma_n=mp.mpf("3.077e-4")),
    "es_n14_fig4a": dict(zfs=mp.mpf(1420), quad=mp.mpf(5), a_par=mp.mpf(50),
                         a_perp=mp.mpf(50), b0=(0, 0, mp.mpf(50)),
                         gamma_e=mp.mpf("2.799"), gamma_n=mp.mpf("3.077e-4")),
    "es_n14_fig4b": dict(zfs=mp.mpf(1420), quad=mp.mpf(5), a_par=mp.mpf(50),
                         a_perp=mp.mpf(50), b0=(mp.mpf(40), 0, mp.mpf(48)),
                         gamma_e=mp.mpf("2.799"), gamma_n=mp.mpf("3.077e-4")),
}

if __name__ == "__main__":
    for name, kw in CASES.items():
        print(name)
        for v in levels(**kw):
            print("  " + mp.nstr(v, 17))
