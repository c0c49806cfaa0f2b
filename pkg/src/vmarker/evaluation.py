"""Training losses and evaluation metrics.

L1 terms (marker, vertex, pose) are means over coordinates; the normal and edge
terms are sums over the three edges of every face. Functions named ``*_grad``
return ``(value, gradient w.r.t. the predicted mesh)``.
"""

from dataclasses import dataclass, field

import numpy as np

from .heatmap import voxel_index

CONF_EPS = 1e-12


@dataclass
class LossWeights:
    lambda_vm: float = 1.0
    lambda_c: float = 1.0
    lambda_m: float = 1.0
    lambda_e: float = 20.0
    # "sum" adds the normal and edge terms as defined; "mean" divides them by
    # the number of face edges so they sit on the scale of the L1 terms
    surface_reduction: str = "sum"

    def __post_init__(self):
        if self.surface_reduction not in ("sum", "mean"):
            raise ValueError(f"surface_reduction must be 'sum' or 'mean', got {self.surface_reduction!r}")
        for name in ("lambda_vm", "lambda_c", "lambda_m", "lambda_e"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and >= 0, got {v}")

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: v if k == "surface_reduction" else float(v) for k, v in d.items()})

    def to_dict(self):
        return {"lambda_vm": self.lambda_vm, "lambda_c": self.lambda_c, "lambda_m": self.lambda_m,
                "lambda_e": self.lambda_e, "surface_reduction": self.surface_reduction}


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


# -- marker and heatmap terms -------------------------------------------------

def loss_vm(P, P_gt):
    P, P_gt = _pair(P, P_gt)
    return float(np.abs(P - P_gt).mean())


def loss_conf(hm, P_gt):
    """Negative log-likelihood of the voxel holding each ground-truth marker."""
    P_gt = np.asarray(P_gt, dtype=np.float64).reshape(hm.K, 3)
    idx = voxel_index(hm.grid, P_gt)
    vals = hm.H[np.arange(hm.K), idx[:, 0], idx[:, 1], idx[:, 2]]
    return float(-np.log(vals + CONF_EPS).sum())


# -- mesh terms ---------------------------------------------------------------

def loss_vertex_grad(M_hat, M_gt):
    M_hat, M_gt = _pair(M_hat, M_gt)
    d = M_hat - M_gt
    return float(np.abs(d).mean()), np.sign(d) / d.size


def loss_vertex(M_hat, M_gt):
    return loss_vertex_grad(M_hat, M_gt)[0]


def loss_pose_grad(M_hat, J_gt, regressor):
    M_hat = np.asarray(M_hat, dtype=np.float64)
    R = np.asarray(regressor, dtype=np.float64)
    if R.shape[0] != M_hat.shape[0]:
        raise ValueError(f"regressor has {R.shape[0]} rows for {M_hat.shape[0]} vertices")
    J, J_gt = _pair(R.T @ M_hat, J_gt)
    d = J - J_gt
    return float(np.abs(d).mean()), R @ (np.sign(d) / d.size)


def loss_pose(M_hat, J_gt, regressor):
    return loss_pose_grad(M_hat, J_gt, regressor)[0]


def face_edges(faces):
    """(3F, 2) vertex pairs: the edges (0,1), (1,2), (2,0) of every face."""
    f = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    return np.stack([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]], axis=1).reshape(-1, 2)


def face_normals(V, faces):
    """Unit normals (right-hand rule on the stored winding) and a mask of valid faces."""
    f = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    n = np.cross(V[f[:, 1]] - V[f[:, 0]], V[f[:, 2]] - V[f[:, 0]])
    norm = np.linalg.norm(n, axis=1)
    ok = norm > 0
    out = np.zeros_like(n)
    out[ok] = n[ok] / norm[ok, None]
    return out, ok


@dataclass
class NormalTermStats:
    degenerate_faces: int = 0
    zero_length_edges: int = 0


def loss_normal_grad(M_hat, M_gt, faces, stats=None):
    """Sum over face edges of ``|<unit predicted edge, ground-truth face normal>|``."""
    M_hat, M_gt = _pair(M_hat, M_gt)
    n, ok = face_normals(M_gt, faces)
    E = face_edges(faces)
    nrm = np.repeat(n, 3, axis=0)
    valid = np.repeat(ok, 3)
    e = M_hat[E[:, 0]] - M_hat[E[:, 1]]
    length = np.linalg.norm(e, axis=1)
    live = valid & (length > 0)
    if stats is not None:
        stats.degenerate_faces += int((~ok).sum())
        stats.zero_length_edges += int((valid & (length == 0)).sum())
    e, length, nrm = e[live], length[live], nrm[live]
    dot = np.einsum("ij,ij->i", e, nrm)
    value = float(np.abs(dot / length).sum())
    # d|e.n/|e|| / de = sign * (n - (e.n) e / |e|^2) / |e|
    ge = np.sign(dot)[:, None] * (nrm - (dot / length**2)[:, None] * e) / length[:, None]
    grad = np.zeros_like(M_hat)
    np.add.at(grad, E[live, 0], ge)
    np.add.at(grad, E[live, 1], -ge)
    return value, grad


def loss_normal(M_hat, M_gt, faces, stats=None):
    return loss_normal_grad(M_hat, M_gt, faces, stats)[0]


def loss_edge_grad(M_hat, M_gt, faces):
    """Sum over face edges of the absolute edge-length difference."""
    M_hat, M_gt = _pair(M_hat, M_gt)
    E = face_edges(faces)
    e = M_hat[E[:, 0]] - M_hat[E[:, 1]]
    length = np.linalg.norm(e, axis=1)
    ref = np.linalg.norm(M_gt[E[:, 0]] - M_gt[E[:, 1]], axis=1)
    d = length - ref
    safe = np.where(length > 0, length, 1.0)
    ge = (np.sign(d) / safe)[:, None] * e
    grad = np.zeros_like(M_hat)
    np.add.at(grad, E[:, 0], ge)
    np.add.at(grad, E[:, 1], -ge)
    return float(np.abs(d).sum()), grad


def loss_edge(M_hat, M_gt, faces):
    return loss_edge_grad(M_hat, M_gt, faces)[0]


def loss_mesh_grad(M_hat, M_gt, J_gt, regressor, faces, weights):
    value, grad = loss_vertex_grad(M_hat, M_gt)
    if regressor is not None and J_gt is not None:
        v, g = loss_pose_grad(M_hat, J_gt, regressor)
        value, grad = value + v, grad + g
    scale = 1.0
    if weights.surface_reduction == "mean":
        scale = 1.0 / max(3 * np.asarray(faces).reshape(-1, 3).shape[0], 1)
    v, g = loss_normal_grad(M_hat, M_gt, faces)
    value, grad = value + scale * v, grad + scale * g
    if weights.lambda_e:
        v, g = loss_edge_grad(M_hat, M_gt, faces)
        w = scale * weights.lambda_e
        value, grad = value + w * v, grad + w * g
    return value, grad


def loss_mesh(M_hat, M_gt, J_gt, regressor, faces, weights):
    """``L_vertex + L_pose + L_normal + lambda_e * L_edge``; the pose term is dropped without a regressor.

    With ``weights.surface_reduction == "mean"`` the normal and edge terms are
    divided by the number of face edges.
    """
    return loss_mesh_grad(M_hat, M_gt, J_gt, regressor, faces, weights)[0]


def total_loss(P, P_gt, hm, M_hat, M_gt, J_gt, regressor, faces, weights):
    """``lambda_vm * L_vm + lambda_c * L_conf + lambda_m * L_mesh``; zero-weight terms are not evaluated."""
    total = 0.0
    if weights.lambda_vm:
        total += weights.lambda_vm * loss_vm(P, P_gt)
    if weights.lambda_c:
        total += weights.lambda_c * loss_conf(hm, P_gt)
    if weights.lambda_m:
        total += weights.lambda_m * loss_mesh(M_hat, M_gt, J_gt, regressor, faces, weights)
    return total


# -- metrics ------------------------------------------------------------------

def mpve(M_hat, M_gt):
    M_hat, M_gt = _pair(M_hat, M_gt)
    return float(np.linalg.norm(M_hat - M_gt, axis=-1).mean())


mpjpe = mpve


def procrustes_align(J_hat, J_gt):
    """Similarity transform ``(s, R, t)`` minimizing ``sum ||s R J_hat_i + t - J_gt_i||^2``, det R = +1."""
    J_hat, J_gt = _pair(J_hat, J_gt)
    if J_hat.ndim != 2 or J_hat.shape[1] != 3 or J_hat.shape[0] < 3:
        raise ValueError("need at least 3 points of dimension 3")
    mu_h, mu_g = J_hat.mean(axis=0), J_gt.mean(axis=0)
    A, B = J_hat - mu_h, J_gt - mu_g
    var = float((A * A).sum())
    if var <= 0:
        raise ValueError("cannot align: all predicted points coincide")
    U, S, Vt = np.linalg.svd(B.T @ A)
    D = np.ones(3)
    if np.linalg.det(U @ Vt) < 0:
        D[2] = -1.0
    R = U @ np.diag(D) @ Vt
    s = float((S * D).sum() / var)
    t = mu_g - s * R @ mu_h
    return s, R, t


def pa_mpjpe(J_hat, J_gt):
    s, R, t = procrustes_align(J_hat, J_gt)
    aligned = s * np.asarray(J_hat, dtype=np.float64) @ R.T + t
    return mpjpe(aligned, J_gt)


@dataclass
class MetricReport:
    mpve: float
    mpjpe: float
    pa_mpjpe: float
    per_sample: list = field(default_factory=list)

    @classmethod
    def from_samples(cls, rows):
        """Aggregate per-sample ``(mpve, mpjpe, pa_mpjpe)`` triples; ``nan`` marks a missing metric."""
        arr = np.asarray(rows, dtype=np.float64).reshape(-1, 3)
        if arr.shape[0] == 0:
            raise ValueError("no samples to report")
        agg = [float(np.mean(arr[:, i])) for i in range(3)]
        return cls(*agg, per_sample=[tuple(float(v) for v in r) for r in arr])

    def to_json(self):
        def num(v):
            return None if np.isnan(v) else v

        return {
            "aggregate": {"mpve": num(self.mpve), "mpjpe": num(self.mpjpe), "pa_mpjpe": num(self.pa_mpjpe)},
            "n_samples": len(self.per_sample),
            "per_sample": [
                {"index": i, "mpve": num(a), "mpjpe": num(b), "pa_mpjpe": num(c)}
                for i, (a, b, c) in enumerate(self.per_sample)
            ],
        }


def evaluate_meshes(pred, gt, regressor=None):
    """MetricReport over paired mesh sequences; joint metrics need a regressor with >= 3 joints."""
    rows = []
    for M_hat, M_gt in zip(pred, gt, strict=True):
        row = [mpve(M_hat, M_gt), np.nan, np.nan]
        if regressor is not None:
            R = np.asarray(regressor, dtype=np.float64)
            J_hat, J_gt = R.T @ np.asarray(M_hat, np.float64), R.T @ np.asarray(M_gt, np.float64)
            row[1] = mpjpe(J_hat, J_gt)
            if R.shape[1] >= 3:
                row[2] = pa_mpjpe(J_hat, J_gt)
        rows.append(row)
    return MetricReport.from_samples(rows)
