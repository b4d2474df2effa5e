"""Dense tensor algebra: matricization, mode products, truncated spectral factorizations.

Tensors are plain numpy arrays in C (row-major) layout, i.e. lexicographic
index order with the last index varying fastest.  Modes are 0-based.

The mode-m matricization puts mode-m fibers as columns; the remaining modes
are cycled in ascending order with the first remaining mode varying fastest.
For a 3-way tensor this gives the classical entry mapping
``unfold(t, 0)[i1, i2 + i3*I2] == t[i1, i2, i3]``.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "matricize",
    "tensorize",
    "mode_product",
    "multi_mode_product",
    "frobenius_norm",
    "top_left_singular_vectors",
    "eigenvalues_symmetric",
    "fix_signs",
    "check_tucker_ranks",
    "read_tns",
    "write_tns",
]


def _check_mode(t: np.ndarray, mode: int) -> None:
    if not 0 <= mode < t.ndim:
        raise ValueError(f"mode {mode} out of range for order-{t.ndim} tensor")


def matricize(t: np.ndarray, mode: int) -> np.ndarray:
    """Unfold tensor ``t`` along ``mode`` into an I_m x prod(I_other) matrix."""
    t = np.asarray(t)
    _check_mode(t, mode)
    return np.reshape(np.moveaxis(t, mode, 0), (t.shape[mode], -1), order="F")


def tensorize(mat: np.ndarray, mode: int, dims) -> np.ndarray:
    """Inverse of :func:`matricize`: fold a matrix back into a tensor of shape ``dims``."""
    mat = np.asarray(mat)
    dims = tuple(int(d) for d in dims)
    if not 0 <= mode < len(dims):
        raise ValueError(f"mode {mode} out of range for dims {dims}")
    rest = [d for i, d in enumerate(dims) if i != mode]
    expected = (dims[mode], int(np.prod(rest, dtype=np.int64)))
    if mat.shape != expected:
        raise ValueError(f"matrix shape {mat.shape} does not match mode-{mode} "
                         f"unfolding {expected} of dims {dims}")
    t = np.reshape(mat, [dims[mode]] + rest, order="F")
    return np.moveaxis(t, 0, mode)


def mode_product(t: np.ndarray, mat: np.ndarray, mode: int) -> np.ndarray:
    """Mode-``mode`` product ``t x_mode mat``; ``mat`` has shape (new_dim, I_mode)."""
    t = np.asarray(t)
    mat = np.asarray(mat)
    _check_mode(t, mode)
    if mat.ndim != 2 or mat.shape[1] != t.shape[mode]:
        raise ValueError(f"matrix shape {mat.shape} incompatible with mode-{mode} "
                         f"extent {t.shape[mode]}")
    out = np.tensordot(mat, t, axes=(1, mode))
    return np.moveaxis(out, 0, mode)


def multi_mode_product(t: np.ndarray, mats) -> np.ndarray:
    """Apply mode products for several modes; ``mats`` maps mode -> matrix (or None)."""
    if isinstance(mats, dict):
        items = sorted(mats.items())
    else:
        items = list(enumerate(mats))
    # contract the largest reductions first to keep intermediates small
    items = [(m, a) for m, a in items if a is not None]
    items.sort(key=lambda ma: ma[1].shape[0] - ma[1].shape[1])
    out = t
    for mode, mat in items:
        out = mode_product(out, mat, mode)
    return out


def frobenius_norm(t: np.ndarray) -> float:
    return float(np.linalg.norm(np.asarray(t).ravel()))


def fix_signs(u: np.ndarray) -> np.ndarray:
    """Flip column signs so each column's largest-magnitude entry is positive."""
    u = np.asarray(u)
    idx = np.argmax(np.abs(u), axis=0)
    signs = np.sign(u[idx, np.arange(u.shape[1])])
    signs[signs == 0] = 1.0
    return u * signs


def top_left_singular_vectors(mat: np.ndarray, r: int) -> np.ndarray:
    """Top-``r`` left singular vectors, sign-fixed for deterministic output.

    For very wide matrices the subspace is computed from the (small) Gram
    matrix instead of a full SVD; the two paths agree on the returned
    subspace whenever the r-th spectral gap is non-degenerate.
    """
    mat = np.asarray(mat, dtype=float)
    if mat.ndim != 2:
        raise ValueError("expected a matrix")
    n, p = mat.shape
    if not 1 <= r <= min(n, p):
        raise ValueError(f"rank {r} not in [1, {min(n, p)}]")
    if not np.all(np.isfinite(mat)):
        raise ValueError("matrix has non-finite entries")
    if p > 4 * n:
        gram = mat @ mat.T
        w, v = np.linalg.eigh(gram)
        u = v[:, ::-1][:, :r]
    else:
        u, _, _ = np.linalg.svd(mat, full_matrices=False)
        u = u[:, :r]
    return fix_signs(u)


def eigenvalues_symmetric(mat: np.ndarray) -> np.ndarray:
    """Eigenvalues of a symmetric matrix in non-increasing order."""
    mat = np.asarray(mat, dtype=float)
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
        raise ValueError("expected a square matrix")
    scale = np.max(np.abs(mat)) or 1.0
    if np.max(np.abs(mat - mat.T)) > 1e-8 * scale:
        raise ValueError("matrix is not symmetric")
    return np.linalg.eigvalsh((mat + mat.T) / 2.0)[::-1]


def check_tucker_ranks(ranks, dims) -> tuple[int, ...]:
    """Validate user-supplied Tucker ranks against tensor dims."""
    ranks = tuple(int(r) for r in ranks)
    dims = tuple(int(d) for d in dims)
    if len(ranks) != len(dims):
        raise ValueError(f"{len(ranks)} ranks given for order-{len(dims)} tensor")
    for m, (r, d) in enumerate(zip(ranks, dims)):
        if not 1 <= r <= d:
            raise ValueError(f"rank {r} for mode {m} not in [1, {d}]")
    for m, r in enumerate(ranks):
        other = int(np.prod([x for i, x in enumerate(ranks) if i != m], dtype=np.int64))
        if r > other:
            raise ValueError(f"rank {r} for mode {m} exceeds product of the "
                             f"other ranks ({other})")
    return ranks


def read_tns(path) -> np.ndarray:
    """Read the whitespace tensor text format.

    Line 1: order M.  Line 2: the M extents.  Then prod(dims) values in
    canonical (C, last-index-fastest) order.
    """
    with open(path) as fh:
        tokens = fh.read().split()
    if not tokens:
        raise ValueError(f"{path}: empty tensor file")
    order = int(tokens[0])
    if order < 1 or len(tokens) < 1 + order:
        raise ValueError(f"{path}: malformed header")
    dims = tuple(int(x) for x in tokens[1:1 + order])
    if any(d < 1 for d in dims):
        raise ValueError(f"{path}: non-positive extent in {dims}")
    count = int(np.prod(dims, dtype=np.int64))
    values = tokens[1 + order:]
    if len(values) != count:
        raise ValueError(f"{path}: expected {count} values, found {len(values)}")
    return np.array(values, dtype=float).reshape(dims, order="C")


def write_tns(path, t: np.ndarray) -> None:
    t = np.asarray(t, dtype=float)
    with open(path, "w") as fh:
        fh.write(f"{t.ndim}\n")
        fh.write(" ".join(str(d) for d in t.shape) + "\n")
        flat = t.ravel(order="C")
        for start in range(0, flat.size, 8):
            fh.write(" ".join(repr(float(v)) for v in flat[start:start + 8]) + "\n")
