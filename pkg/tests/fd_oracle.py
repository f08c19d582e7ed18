"""Central finite-difference gradient oracle.

Independent of the autograd path: gradients come purely from re-evaluating a
black-box scalar function at perturbed inputs. Used to freeze expected values
and to verify every analytic backward rule.
"""

import numpy as np


def fd_gradients(f, arrays, h=1e-5):
    """Central-difference gradients of ``f(arrays) -> float`` w.r.t. each array.

    Arrays are perturbed in place one element at a time and restored; they
    must be float64 for the differences to be trustworthy at h=1e-5.
    """
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        flat, gf = a.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f(arrays)
            flat[i] = orig - h
            fm = f(arrays)
            flat[i] = orig
            gf[i] = (fp - fm) / (2.0 * h)
        grads.append(g)
    return grads


def rel_err(analytic, numeric):
    """Max scaled-relative error: |a-n| / max(1, |a|, |n|) elementwise.

    The scale floor of 1 makes the comparison absolute for sub-unit gradients,
    where the quantities themselves are O(1e-5)-noisy under central
    differences.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1.0)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0
