"""Mesh recovery from marker estimates, with fixed or confidence-adapted coefficients."""

import logging
import os
from dataclasses import dataclass, field

import numpy as np

from .evaluation import LossWeights, loss_mesh_grad, mpve
from .heatmap import NO_CORRUPTION, VoxelGrid, decode, synthesize_heatmap
from .io import dump_json, load_json, load_vmat, relpath_from, resolve_from, save_vmat

logger = logging.getLogger(__name__)


class AdapterDivergence(RuntimeError):
    """Training produced a non-finite loss."""


def reconstruct_fixed(P, A):
    """Vertices ``(M, 3)``: vertex i is ``sum_j A[j, i] * P[j]``."""
    P = np.asarray(P, dtype=np.float64)
    A = np.asarray(A, dtype=np.float64)
    if P.ndim != 2 or P.shape[1] != 3 or A.ndim != 2 or A.shape[0] != P.shape[0]:
        raise ValueError(f"shape mismatch: P {P.shape}, A {A.shape}")
    return A.T @ P


def regress_joints(mesh, regressor):
    mesh = np.asarray(mesh, dtype=np.float64)
    R = np.asarray(regressor, dtype=np.float64)
    if R.ndim != 2 or R.shape[0] != mesh.shape[0]:
        raise ValueError(f"regressor {R.shape} does not fit a mesh with {mesh.shape[0]} vertices")
    return R.T @ mesh


@dataclass
class CoefficientAdapter:
    """Affine map from confidences to a correction of the base coefficients.

    ``A_hat(C) = base + (W @ C + b).reshape(K, M)``; zero ``W`` and ``b``
    reproduce ``base`` exactly.
    """

    base: np.ndarray
    W: np.ndarray = None
    b: np.ndarray = None

    def __post_init__(self):
        self.base = np.array(self.base, dtype=np.float64)
        K, M = self.base.shape
        self.W = np.zeros((K * M, K)) if self.W is None else np.array(self.W, dtype=np.float64)
        self.b = np.zeros(K * M) if self.b is None else np.array(self.b, dtype=np.float64).reshape(-1)
        if self.W.shape != (K * M, K) or self.b.shape != (K * M,):
            raise ValueError(f"adapter parameters do not match base {self.base.shape}")

    @property
    def K(self):
        return self.base.shape[0]

    @property
    def M(self):
        return self.base.shape[1]

    @property
    def is_identity(self):
        return not (self.W.any() or self.b.any())

    def copy(self):
        return CoefficientAdapter(self.base, self.W, self.b)


def adapter_forward(adapter, C):
    C = np.asarray(C, dtype=np.float64).reshape(-1)
    if C.shape != (adapter.K,) or not np.all(np.isfinite(C)):
        raise ValueError(f"confidences must be {adapter.K} finite values")
    if adapter.is_identity:
        return adapter.base.copy()
    return adapter.base + (adapter.W @ C + adapter.b).reshape(adapter.K, adapter.M)


def reconstruct_adaptive(P, C, adapter):
    return reconstruct_fixed(P, adapter_forward(adapter, C))


@dataclass
class AdapterTrainConfig:
    learning_rate: float = 3e-4
    epochs: int = 20
    batch_size: int = 16
    # summed surface terms outweigh the vertex term by orders of magnitude and
    # training on them raises vertex error, so training uses per-edge means
    loss_weights: LossWeights = field(default_factory=lambda: LossWeights(surface_reduction="mean"))
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.loss_weights, dict):
            self.loss_weights = LossWeights.from_dict(self.loss_weights)
        if not (np.isfinite(self.learning_rate) and self.learning_rate > 0):
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")


def adapter_param_grad(P, C, G):
    """Pull a gradient ``G`` w.r.t. the reconstructed vertices back to ``(dW, db)``."""
    db = (np.asarray(P) @ np.asarray(G).T).reshape(-1)  # dL/dA_hat, flattened
    return np.outer(db, C), db


def sample_loss_grad(adapter, est, M_gt, J_gt, regressor, faces, weights):
    """Mesh loss of one sample and its gradient w.r.t. ``(W, b)``."""
    M_hat = reconstruct_adaptive(est.P, est.C, adapter)
    value, G = loss_mesh_grad(M_hat, M_gt, J_gt, regressor, faces, weights)
    dW, db = adapter_param_grad(est.P, est.C, weights.lambda_m * G)
    return weights.lambda_m * value, dW, db


def _prepare(train_set, regressor):
    out = []
    for est, M_gt in train_set:
        M_gt = np.asarray(M_gt, dtype=np.float64)
        J_gt = None if regressor is None else regress_joints(M_gt, regressor)
        out.append((est, M_gt, J_gt))
    return out


def mean_training_loss(adapter, prepared, regressor, faces, weights):
    return float(np.mean([
        sample_loss_grad(adapter, est, M_gt, J_gt, regressor, faces, weights)[0]
        for est, M_gt, J_gt in prepared
    ]))


def train_adapter(train_set, dataset, config, marker_set):
    """Mini-batch gradient descent on the mean mesh loss.

    An epoch whose mean training loss exceeds the previous one is rolled
    back and the learning rate halved, so the recorded history never
    increases. Returns ``(adapter, history)`` where ``history[0]`` is the
    loss before training.
    """
    if not train_set:
        raise ValueError("training set is empty")
    faces, regressor = dataset.faces, dataset.joint_regressor
    weights = config.loss_weights
    adapter = CoefficientAdapter(marker_set.A)
    prepared = _prepare(train_set, regressor)
    loss = mean_training_loss(adapter, prepared, regressor, faces, weights)
    history = [loss]
    lr = config.learning_rate
    n = len(prepared)
    for epoch in range(config.epochs):
        rng = np.random.default_rng([config.seed, epoch])
        order = rng.permutation(n)
        trial = adapter.copy()
        for start in range(0, n, config.batch_size):
            batch = order[start:start + config.batch_size]
            gW = np.zeros_like(trial.W)
            gb = np.zeros_like(trial.b)
            for i in batch:
                est, M_gt, J_gt = prepared[i]
                v, dW, db = sample_loss_grad(trial, est, M_gt, J_gt, regressor, faces, weights)
                if not np.isfinite(v):
                    raise AdapterDivergence(f"non-finite loss in epoch {epoch}; lower the learning rate")
                gW += dW
                gb += db
            trial.W -= lr * gW / len(batch)
            trial.b -= lr * gb / len(batch)
        new = mean_training_loss(trial, prepared, regressor, faces, weights)
        if not np.isfinite(new):
            raise AdapterDivergence(f"non-finite loss after epoch {epoch}; lower the learning rate")
        if new > loss:
            lr *= 0.5
            logger.info("epoch %d: loss rose to %.6g, halving learning rate to %.3g", epoch, new, lr)
        else:
            adapter, loss = trial, new
        history.append(loss)
    return adapter, history


def simulate_estimates(vertices, marker_set, grid, sigma, corruption=NO_CORRUPTION, seed=0):
    """Decoded marker estimates from synthetic heatmaps around each sample's markers.

    Sample n uses the seed ``[seed, n]``, so results do not depend on how the
    samples are batched.
    """
    out = []
    for n, V in enumerate(np.asarray(vertices, dtype=np.float64)):
        hm = synthesize_heatmap(marker_set.marker_positions(V), grid, sigma, corruption, seed=[seed, n])
        out.append(decode(hm))
    return out


def default_grid(n=32, extent_mm=1300.0):
    return VoxelGrid.centered(n, extent_mm)


def heldout_split(n_samples):
    """Indices ``(train, eval)``; every fifth sample, starting at 0, is held out."""
    idx = np.arange(n_samples)
    return idx[idx % 5 != 0], idx[idx % 5 == 0]


def compare_fixed_adaptive(estimates, meshes, adapter):
    fixed = [mpve(reconstruct_fixed(e.P, adapter.base), M) for e, M in zip(estimates, meshes)]
    adaptive = [mpve(reconstruct_adaptive(e.P, e.C, adapter), M) for e, M in zip(estimates, meshes)]
    return float(np.mean(fixed)), float(np.mean(adaptive))


def save_adapter(adapter, path, marker_set_path):
    stem = os.path.splitext(path)[0]
    w_path, b_path = stem + "_W.vmat", stem + "_b.vmat"
    save_vmat(w_path, adapter.W)
    save_vmat(b_path, adapter.b[:, None])
    dump_json(path, {
        "version": 1,
        "K": adapter.K,
        "M": adapter.M,
        "W_file": relpath_from(path, w_path),
        "b_file": relpath_from(path, b_path),
        "marker_set": relpath_from(path, marker_set_path),
    })


def load_adapter(path, marker_set=None):
    """Load an adapter; its base comes from ``marker_set`` or the referenced marker-set file."""
    from .markers import load_marker_set

    meta = load_json(path)
    if marker_set is None:
        marker_set = load_marker_set(resolve_from(path, meta["marker_set"]))
    W = load_vmat(resolve_from(path, meta["W_file"]))
    b = load_vmat(resolve_from(path, meta["b_file"])).reshape(-1)
    if (meta["K"], meta["M"]) != marker_set.A.shape:
        raise ValueError(f"{path}: adapter is K={meta['K']}, M={meta['M']} but markers give {marker_set.A.shape}")
    return CoefficientAdapter(marker_set.A, W, b)
