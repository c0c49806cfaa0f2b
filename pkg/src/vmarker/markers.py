"""Turning archetypes into vertex-anchored, left/right-symmetric virtual markers."""

import os
from dataclasses import dataclass

import numpy as np

from .archetypal import ArchetypeModel, reconstruction_error
from .dataset import DataMatrix
from .io import dump_json, load_json, load_vmat, relpath_from, resolve_from, save_vmat
from .simplex import solve_simplex_qp


@dataclass
class MarkerSet:
    """K markers pinned to mesh vertices plus their interpolation coefficients.

    ``A`` is K x M and column-stochastic; ``B`` (M x K) selects the marker
    vertices, so the marker trajectories are ``X @ B``.
    """

    vertex_indices: np.ndarray
    A: np.ndarray
    template_positions: np.ndarray
    midline: list

    def __post_init__(self):
        self.vertex_indices = np.asarray(self.vertex_indices, dtype=np.int64)
        if len(set(self.vertex_indices.tolist())) != self.vertex_indices.size:
            raise ValueError("marker vertex indices must be distinct")

    @property
    def K(self):
        return self.vertex_indices.size

    @property
    def n_vertices(self):
        return self.A.shape[1]

    @property
    def B(self):
        B = np.zeros((self.n_vertices, self.K))
        B[self.vertex_indices, np.arange(self.K)] = 1.0
        return B

    def marker_positions(self, vertices):
        """Marker positions (..., K, 3) read off mesh vertices (..., M, 3)."""
        return np.asarray(vertices)[..., self.vertex_indices, :]


def _X(X):
    return X.X if isinstance(X, DataMatrix) else np.asarray(X, dtype=np.float64)


def snap_to_vertices(model, X):
    """Nearest vertex trajectory to each archetype, measured in the full 3N space.

    Archetypes are processed in order; when an archetype's nearest vertex is
    already claimed it takes its nearest unclaimed one.
    """
    Xm = _X(X)
    Z = np.asarray(model.Z if isinstance(model, ArchetypeModel) else model, dtype=np.float64)
    d2 = (
        np.einsum("ij,ij->j", Z, Z)[:, None]
        - 2.0 * Z.T @ Xm
        + np.einsum("ij,ij->j", Xm, Xm)[None, :]
    )
    claimed = np.zeros(Xm.shape[1], dtype=bool)
    out = []
    for j in range(Z.shape[1]):
        # stable ordering: distance, then vertex index
        order = np.lexsort((np.arange(Xm.shape[1]), d2[j]))
        i = next(int(i) for i in order if not claimed[i])
        claimed[i] = True
        out.append(i)
    return out


def _side(template, pairing, i):
    if pairing.partner[i] == i:
        return 0
    return 1 if template[i, 0] > 0 else -1


def symmetrize_markers(indices, pairing, template):
    """Make a marker list mirror-closed while keeping K and slot order.

    Left markers (``x > 0``) are kept. Each right marker whose mirror is not
    already a marker is replaced by the mirror of an unpartnered left marker,
    choosing greedily the (right marker, left marker) combination with the
    smallest template distance. Surplus markers on one side are mirrored
    among themselves the same way; a final odd one moves to the nearest free
    midline vertex. Midline markers are kept unless every midline vertex is
    already a marker, in which case one of them yields its slot to the odd
    marker's mirror.
    """
    template = np.asarray(template, dtype=np.float64)
    partner = pairing.partner
    out = [int(i) for i in indices]
    present = set(out)
    side = {s: _side(template, pairing, i) for s, i in enumerate(out)}

    def unmatched(sign):
        return [s for s in range(len(out)) if side[s] == sign and int(partner[out[s]]) not in present]

    def pair_up(movers, anchors):
        # replace mover slots by mirrors of anchor vertices, greedy on distance
        while movers and anchors:
            best = None
            for s in movers:
                for a in anchors:
                    target = int(partner[out[a]])
                    dist = float(np.linalg.norm(template[out[s]] - template[target]))
                    key = (dist, s, a)
                    if best is None or key < best:
                        best = key
            _, s, a = best
            target = int(partner[out[a]])
            present.discard(out[s])
            out[s] = target
            present.add(target)
            side[s] = -side[a]
            movers.remove(s)
            anchors.remove(a)

    pair_up(unmatched(-1), unmatched(1))

    for sign in (-1, 1):
        rest = unmatched(sign)
        while len(rest) >= 2:
            anchor = rest.pop(0)
            pair_up(rest[:], [anchor])
            rest = unmatched(sign)
        for s in rest:
            mids = [i for i in pairing.midline if i not in present]
            if mids:
                dist = np.linalg.norm(template[mids] - template[out[s]], axis=1)
                target = mids[int(np.argmin(dist))]
                present.discard(out[s])
                out[s] = target
                present.add(target)
                side[s] = 0
                continue
            # every midline vertex is already a marker: the closest of them
            # gives up its slot to the odd marker's mirror
            mid_slots = [m for m in range(len(out)) if side[m] == 0]
            if not mid_slots:
                raise RuntimeError("odd number of markers and no midline vertex on the template")
            mirror = int(partner[out[s]])
            dist = [np.linalg.norm(template[out[m]] - template[mirror]) for m in mid_slots]
            m = mid_slots[int(np.argmin(dist))]
            present.discard(out[m])
            out[m] = mirror
            present.add(mirror)
            side[m] = -sign
    return out


def refit_coefficients(X, indices, tol=1e-8, max_iter=500, n_threads=1):
    """Best convex coefficients of every vertex w.r.t. the marker trajectories."""
    Xm = _X(X)
    idx = np.asarray(indices, dtype=np.int64)
    if np.unique(idx).size != idx.size:
        raise ValueError("marker indices must be distinct")
    Z = Xm[:, idx]
    Q = Z.T @ Z
    q = Xm.T @ Z
    c = np.einsum("ij,ij->j", Xm, Xm)
    W, *_ = solve_simplex_qp(Q, q, c, None, tol, max_iter, n_threads=n_threads)
    return np.ascontiguousarray(W.T)


def _indicator_model(X, indices, A):
    Xm = _X(X)
    B = np.zeros((Xm.shape[1], len(indices)))
    B[np.asarray(indices), np.arange(len(indices))] = 1.0
    return ArchetypeModel(B, A, Xm[:, np.asarray(indices)], float("nan"))


def marker_refit_error(X, indices, A=None, n_threads=1):
    """``(frobenius_sq, mean per-vertex mm)`` for markers pinned at ``indices``."""
    if A is None:
        A = refit_coefficients(X, indices, n_threads=n_threads)
    return reconstruction_error(X, _indicator_model(X, indices, A))


def build_marker_set(model, X, pairing, template, n_threads=1, return_snapped=False):
    """Snap, symmetrize and refit.

    With ``return_snapped`` also returns ``(snapped_indices, A_snapped)``, the
    pre-symmetrization markers and their refit, for comparing the two.
    """
    snapped = snap_to_vertices(model, X)
    sym = symmetrize_markers(snapped, pairing, template)
    A = refit_coefficients(X, sym, n_threads=n_threads)
    template = np.asarray(template, dtype=np.float64)
    midline = [int(i) for i in sym if pairing.partner[i] == i]
    ms = MarkerSet(np.asarray(sym), A, template[sym], midline)
    if return_snapped:
        return ms, (snapped, refit_coefficients(X, snapped, n_threads=n_threads))
    return ms


def baseline_random_markers(M, K, seed, X, n_threads=1):
    """K distinct uniformly drawn vertices, refit but not symmetrized."""
    if not 1 <= K <= M:
        raise ValueError(f"need 1 <= K <= M, got K={K}, M={M}")
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(M, size=K, replace=False))
    A = refit_coefficients(X, idx, n_threads=n_threads)
    return MarkerSet(idx, A, np.zeros((K, 3)), [])


def baseline_pca_error(X, K):
    """Best rank-K reconstruction error of the column-centered data matrix."""
    Xm = _X(X)
    if K > min(Xm.shape):
        raise ValueError(f"K={K} exceeds min(3N, M)={min(Xm.shape)}")
    Xc = Xm - Xm.mean(axis=1, keepdims=True)
    s = np.linalg.svd(Xc, compute_uv=False)
    return float(np.sum(s[K:] ** 2))


def is_mirror_closed(indices, pairing):
    present = set(int(i) for i in indices)
    return all(int(pairing.partner[i]) in present for i in present)


def save_marker_set(ms, path, a_file=None):
    """Marker-set JSON plus the coefficient matrix as a sibling VMAT file."""
    if a_file is None:
        a_file = os.path.splitext(path)[0] + "_A.vmat"
    save_vmat(a_file, ms.A)
    dump_json(path, {
        "version": 1,
        "K": ms.K,
        "vertex_indices": [int(i) for i in ms.vertex_indices],
        "midline": [int(i) for i in ms.midline],
        "A_file": relpath_from(path, a_file),
        "template_positions": np.asarray(ms.template_positions, dtype=np.float64).tolist(),
    })


def load_marker_set(path):
    meta = load_json(path)
    if meta.get("version") != 1:
        raise ValueError(f"{path}: unsupported marker-set version {meta.get('version')}")
    A = load_vmat(resolve_from(path, meta["A_file"]))
    idx = np.asarray(meta["vertex_indices"], dtype=np.int64)
    if A.shape[0] != idx.size or meta["K"] != idx.size:
        raise ValueError(f"{path}: K={meta['K']} but A has {A.shape[0]} rows and {idx.size} indices")
    return MarkerSet(idx, A, np.asarray(meta["template_positions"], dtype=np.float64), list(meta["midline"]))
