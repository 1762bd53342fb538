"""Complex linear algebra helpers.

Complex quantities are numpy ``complex128`` arrays (``clongdouble`` also works,
for extended-precision reference computations). A leading batch axis is
allowed on vector arguments; matrix arguments are never batched.
"""
import numpy as np


class DimensionError(ValueError):
    """Raised when array shapes do not agree."""


def cmul(a, b):
    return complex(a) * complex(b)


def conj(a):
    return np.conj(a)


def _check_matvec(M, x):
    if M.ndim != 2:
        raise DimensionError(f"expected a matrix, got shape {M.shape}")
    if x.ndim not in (1, 2) or x.shape[-1] != M.shape[1]:
        raise DimensionError(
            f"cannot apply matrix of shape {M.shape} to vector of shape {x.shape}")


def cmatvec(M, x):
    """Complex matrix (rows x cols) times real vector(s) of length cols."""
    M = np.asarray(M)
    x = np.asarray(x)
    if not np.iscomplexobj(M):
        M = M.astype(np.result_type(M, np.complex128))
    _check_matvec(M, x)
    return x @ M.T


def re_cmatvec(C, h):
    """Real part of ``C @ h`` without forming the imaginary part."""
    C = np.asarray(C) + 0j
    h = np.asarray(h) + 0j
    _check_matvec(C, h)
    return h.real @ C.real.T - h.imag @ C.imag.T


def as_real_pairs(z):
    """Real view of a complex array, (re, im) interleaved along the last axis.

    The view shares memory with ``z``: writing to it writes the complex array.
    """
    if z.dtype not in (np.complex128, np.clongdouble) or not z.flags.c_contiguous:
        raise TypeError("need a C-contiguous complex128 (or clongdouble) array")
    return z.view(z.real.dtype)


def wirtinger(f, z, eps=1e-6):
    """Numerical Wirtinger derivatives (df/dz, df/dz̄) of ``f`` at scalar ``z``."""
    z = complex(z)
    d_re = (f(z + eps) - f(z - eps)) / (2 * eps)
    d_im = (f(z + 1j * eps) - f(z - 1j * eps)) / (2 * eps)
    return 0.5 * (d_re - 1j * d_im), 0.5 * (d_re + 1j * d_im)
