"""Descriptor compression baselines (PCA, product quantization) and byte accounting.

These exist to put descriptor-based pipelines on the same bytes-per-frame axis
as the descriptor-free detector, which only ships packed coordinates.
"""
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import binio

COORD_BYTES = 3
PCA_SCALAR_BYTES = 4

PCA_MAGIC = b"IPCA"
PQ_MAGIC = b"IPQC"
MODEL_VERSION = 1


class RankError(ValueError):
    pass


@dataclass
class PcaProjection:
    mean: np.ndarray   # (d,)
    basis: np.ndarray  # (k, d), orthonormal rows
    eigenvalues: np.ndarray = None

    @property
    def k(self):
        return self.basis.shape[0]

    @property
    def d(self):
        return self.basis.shape[1]


def pca_fit(descriptors, k, rank_tol=1e-10):
    """Top-k principal directions of ``descriptors`` (N x d).

    Each basis row is sign-normalised so its largest-magnitude entry is positive.
    """
    X = np.asarray(descriptors, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError("descriptors must be an N x d array")
    N, d = X.shape
    if not N > d:
        raise ValueError(f"need more samples than dimensions, got N={N}, d={d}")
    if not 1 <= k <= d:
        raise ValueError(f"k must be in [1, {d}], got {k}")
    mean = X.mean(axis=0)
    Xc = X - mean
    cov = Xc.T @ Xc / (N - 1)
    w, V = np.linalg.eigh(cov)
    order = np.argsort(w)[::-1]
    w, V = w[order], V[:, order]
    scale = max(w[0], 0.0)
    rank = int(np.sum(w > rank_tol * scale)) if scale > 0 else 0
    if rank < k:
        raise RankError(f"data has rank {rank}, cannot fit {k} components (at most {rank} achievable)")
    B = V[:, :k].T.copy()
    flip = B[np.arange(k), np.argmax(np.abs(B), axis=1)] < 0
    B[flip] *= -1
    return PcaProjection(mean, B, w[:k].copy())


def pca_project(proj: PcaProjection, x):
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != proj.d:
        raise ValueError(f"expected {proj.d}-dimensional input, got {x.shape[-1]}")
    return (x - proj.mean) @ proj.basis.T


def pca_reconstruct(proj: PcaProjection, y):
    y = np.asarray(y, dtype=np.float64)
    if y.shape[-1] != proj.k:
        raise ValueError(f"expected {proj.k} coefficients, got {y.shape[-1]}")
    return proj.mean + y @ proj.basis


@dataclass
class PqCodebook:
    centroids: np.ndarray  # (m, k, d/m)

    @property
    def m(self):
        return self.centroids.shape[0]

    @property
    def k(self):
        return self.centroids.shape[1]

    @property
    def sub_dim(self):
        return self.centroids.shape[2]

    @property
    def d(self):
        return self.m * self.sub_dim

    @property
    def bits_per_index(self):
        return max(1, math.ceil(math.log2(self.k))) if self.k > 1 else 0

    @property
    def code_bits(self):
        return self.m * self.bits_per_index

    @property
    def code_bytes(self):
        return math.ceil(self.code_bits / 8)


def _sq_dists(X, C):
    # |x|^2 - 2 x.c + |c|^2, clipped against round-off
    d = (X * X).sum(1)[:, None] - 2 * X @ C.T + (C * C).sum(1)[None, :]
    return np.maximum(d, 0.0)


def _kmeanspp(X, k, rng):
    N = len(X)
    centers = [X[rng.integers(N)]]
    d2 = _sq_dists(X, centers[0][None])[:, 0]
    for _ in range(1, k):
        total = d2.sum()
        if total > 0:
            i = rng.choice(N, p=d2 / total)
        else:
            i = rng.integers(N)
        centers.append(X[i])
        d2 = np.minimum(d2, _sq_dists(X, X[i][None])[:, 0])
    return np.array(centers)


def kmeans(X, k, rng, max_iters=100, tol=1e-4):
    """Lloyd's algorithm from k-means++ seeds. Returns (centroids, labels, inertia)."""
    X = np.asarray(X, dtype=np.float64)
    C = _kmeanspp(X, k, rng)
    prev = None
    for _ in range(max_iters):
        D = _sq_dists(X, C)
        labels = np.argmin(D, axis=1)
        best = D[np.arange(len(X)), labels]
        inertia = best.sum()
        counts = np.bincount(labels, minlength=k)
        newC = np.zeros_like(C)
        np.add.at(newC, labels, X)
        filled = counts > 0
        newC[filled] /= counts[filled, None]
        empty = np.flatnonzero(~filled)
        if empty.size:
            # move each empty cluster onto the currently worst-served point
            far = np.argsort(-best, kind="stable")
            for j, i in zip(empty, far):
                newC[j] = X[i]
                best[i] = 0.0
        C = newC
        if prev is not None and (prev == 0 or (prev - inertia) <= tol * prev) and not empty.size:
            break
        prev = inertia
    D = _sq_dists(X, C)
    labels = np.argmin(D, axis=1)
    return C, labels, float(D[np.arange(len(X)), labels].sum())


def pq_fit(descriptors, m, k, seed=0, max_iters=100, tol=1e-4):
    X = np.asarray(descriptors, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError("descriptors must be an N x d array")
    N, d = X.shape
    if m < 1 or d % m:
        raise ValueError(f"dimension {d} is not divisible by m={m}")
    if k < 1:
        raise ValueError("k must be positive")
    if N < k:
        raise ValueError(f"need at least k={k} descriptors, got {N}")
    sub = d // m
    cents = np.empty((m, k, sub))
    for j in range(m):
        rng = np.random.default_rng([seed, j])
        cents[j] = kmeans(X[:, j * sub:(j + 1) * sub], k, rng, max_iters, tol)[0]
    return PqCodebook(cents)


def pq_encode(cb: PqCodebook, x):
    """Nearest centroid per sub-block; (..., d) -> (..., m) int indices. Ties go to the lowest index."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != cb.d:
        raise ValueError(f"expected {cb.d}-dimensional input, got {x.shape[-1]}")
    lead = x.shape[:-1]
    X = x.reshape(-1, cb.m, cb.sub_dim)
    codes = np.empty((len(X), cb.m), dtype=np.int64)
    for j in range(cb.m):
        diff = X[:, j, None, :] - cb.centroids[j][None]
        codes[:, j] = np.argmin((diff * diff).sum(-1), axis=1)
    return codes.reshape(lead + (cb.m,))


def pq_decode(cb: PqCodebook, code):
    code = np.asarray(code)
    if code.shape[-1] != cb.m:
        raise ValueError(f"expected {cb.m} indices per code, got {code.shape[-1]}")
    if np.any(code < 0) or np.any(code >= cb.k):
        raise IndexError(f"code index out of range [0, {cb.k})")
    parts = [cb.centroids[j][code[..., j]] for j in range(cb.m)]
    return np.concatenate(parts, axis=-1)


def pack_codes(cb: PqCodebook, codes):
    """Bit-pack codes (N x m) into ``code_bytes`` per row, most significant bits first."""
    codes = np.asarray(codes, dtype=np.int64).reshape(-1, cb.m)
    bits = cb.bits_per_index
    out = bytearray()
    for row in codes:
        v = 0
        for c in row:
            v = (v << bits) | int(c)
        v <<= cb.code_bytes * 8 - cb.code_bits
        out += v.to_bytes(cb.code_bytes, "big")
    return bytes(out)


def unpack_codes(cb: PqCodebook, data):
    nb = cb.code_bytes
    if nb == 0:
        return np.zeros((0, cb.m), dtype=np.int64)
    if len(data) % nb:
        raise ValueError(f"{len(data)} bytes is not a multiple of {nb}")
    bits = cb.bits_per_index
    mask = (1 << bits) - 1
    rows = []
    for i in range(0, len(data), nb):
        v = int.from_bytes(data[i:i + nb], "big") >> (nb * 8 - cb.code_bits)
        rows.append([(v >> (bits * (cb.m - 1 - j))) & mask for j in range(cb.m)])
    return np.array(rows, dtype=np.int64).reshape(-1, cb.m)


# -- byte accounting ---------------------------------------------------------

METHODS = ("ours", "raw", "pca", "pq")


def payload_bytes(method, **kw):
    """Per-point payload on top of the packed coordinates."""
    if method == "ours":
        return 0
    if method == "raw":
        return int(kw["d"]) * int(kw.get("bytes_per_scalar", 4))
    if method == "pca":
        return int(kw["k"]) * PCA_SCALAR_BYTES
    if method == "pq":
        m, k = int(kw["m"]), int(kw["k"])
        bits = math.ceil(math.log2(k)) if k > 1 else 0
        return math.ceil(m * bits / 8)
    raise ValueError(f"unknown representation {method!r}; expected one of {METHODS}")


def representation_size_bytes(method, **kw):
    """Bytes for one frame's features.

    ``ours(n)`` ships only coordinates; every descriptor method ships coordinates
    plus a payload per point: ``raw(n_pts, d, bytes_per_scalar)``, ``pca(n_pts, k)``,
    ``pq(n_pts, m, k)``.
    """
    if method == "ours":
        return COORD_BYTES * int(kw["n"])
    pay = payload_bytes(method, **kw)
    return int(kw["n_pts"]) * (COORD_BYTES + pay)


# -- files -------------------------------------------------------------------

_DESC_HEADER = struct.Struct("<QII")
_FLOATS = {4: "<f4", 8: "<f8"}


def save_descriptors(path, descriptors, scalar_width=4):
    X = np.asarray(descriptors)
    if X.ndim != 2:
        raise ValueError("descriptors must be an N x d array")
    if scalar_width not in _FLOATS:
        raise ValueError(f"scalar width must be 4 or 8, got {scalar_width}")
    data = X.astype(_FLOATS[scalar_width]).tobytes(order="C")
    Path(path).write_bytes(_DESC_HEADER.pack(X.shape[0], X.shape[1], scalar_width) + data)


def load_descriptors(path):
    blob = Path(path).read_bytes()
    if len(blob) < _DESC_HEADER.size:
        raise binio.TruncatedFileError(f"{path}: too short for a descriptor header")
    N, d, width = _DESC_HEADER.unpack_from(blob)
    if width not in _FLOATS:
        raise binio.ContainerError(f"{path}: unsupported scalar width {width}")
    body = blob[_DESC_HEADER.size:]
    if len(body) != N * d * width:
        raise binio.TruncatedFileError(f"{path}: expected {N * d * width} data bytes, found {len(body)}")
    return np.frombuffer(body, dtype=_FLOATS[width]).reshape(N, d).astype(np.float64)


def save_pca(path, proj: PcaProjection):
    header = struct.pack("<II", proj.k, proj.d)
    ev = proj.eigenvalues if proj.eigenvalues is not None else np.zeros(proj.k)
    payload = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in (proj.mean, proj.basis, ev))
    binio.write_container(path, PCA_MAGIC, MODEL_VERSION, header, payload)


def load_pca(path):
    header, payload = binio.read_container(path, PCA_MAGIC, MODEL_VERSION)
    k, d = struct.unpack("<II", header)
    if len(payload) != 8 * (d + k * d + k):
        raise binio.ContainerError(f"{path}: payload size does not match k={k}, d={d}")
    v = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    return PcaProjection(v[:d].copy(), v[d:d + k * d].reshape(k, d).copy(), v[d + k * d:].copy())


def save_pq(path, cb: PqCodebook):
    header = struct.pack("<III", cb.m, cb.k, cb.sub_dim)
    binio.write_container(path, PQ_MAGIC, MODEL_VERSION, header,
                          np.ascontiguousarray(cb.centroids, dtype="<f8").tobytes())


def load_pq(path):
    header, payload = binio.read_container(path, PQ_MAGIC, MODEL_VERSION)
    m, k, sub = struct.unpack("<III", header)
    if len(payload) != 8 * m * k * sub:
        raise binio.ContainerError(f"{path}: payload size does not match m={m}, k={k}, sub_dim={sub}")
    return PqCodebook(np.frombuffer(payload, dtype="<f8").reshape(m, k, sub).astype(np.float64))
