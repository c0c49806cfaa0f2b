"""``vmarker`` command-line interface.

Every command reads optional defaults from ``--config`` (a JSON object whose
keys are the long option names with dashes replaced by underscores); flags
given on the command line win. Exit codes: 0 success, 1 runtime failure,
2 usage, configuration or input error.
"""

import argparse
import csv
import io
import json
import logging
import os
import sys

import numpy as np

from .archetypal import FitOptions, fit_archetypes, reconstruction_error, save_archetype_model
from .dataset import assemble_data_matrix, compute_symmetric_pairs, load_dataset, save_dataset
from .evaluation import LossWeights, evaluate_meshes
from .heatmap import CorruptionSpec, MarkerEstimate
from .io import FormatError, dump_json, load_json, load_vmat, write_obj
from .markers import (
    baseline_pca_error,
    baseline_random_markers,
    build_marker_set,
    is_mirror_closed,
    load_marker_set,
    marker_refit_error,
    save_marker_set,
)
from .reconstruction import (
    AdapterTrainConfig,
    compare_fixed_adaptive,
    default_grid,
    heldout_split,
    load_adapter,
    reconstruct_adaptive,
    reconstruct_fixed,
    save_adapter,
    simulate_estimates,
    train_adapter,
)
from .synth import SynthConfig, generate_synthetic_dataset

logger = logging.getLogger("vmarker")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


# -- option plumbing ----------------------------------------------------------

class _Options:
    """Merged view of parsed flags over config-file values over built-in defaults."""

    def __init__(self, args, defaults):
        self._args = args
        self._defaults = defaults
        self._config = {}
        if args.config:
            try:
                cfg = load_json(args.config)
            except (OSError, json.JSONDecodeError) as exc:
                raise UsageError(f"cannot read config {args.config}: {exc}") from exc
            if not isinstance(cfg, dict):
                raise UsageError(f"config {args.config} must hold a JSON object")
            known = set(defaults) | {"seed", "out", "threads"}
            unknown = sorted(set(cfg) - known)
            if unknown:
                raise UsageError(f"unknown config keys in {args.config}: {', '.join(unknown)}")
            self._config = cfg

    def __getattr__(self, name):
        value = getattr(self._args, name, None)
        if value is not None:
            return value
        if name in self._config:
            return self._config[name]
        if name in self._defaults:
            return self._defaults[name]
        if name == "seed":
            return 0
        if name == "threads":
            return 1
        return None


def _require(opts, *names):
    for name in names:
        if getattr(opts, name) is None:
            raise UsageError(f"--{name.replace('_', '-')} is required (flag or config key {name!r})")


def _out_dir(opts):
    out = opts.out or "."
    os.makedirs(out, exist_ok=True)
    return out


def _int_list(text):
    if isinstance(text, list):
        return [int(v) for v in text]
    items = [t for t in str(text).split(",") if t.strip()]
    try:
        return [int(t) for t in items]
    except ValueError as exc:
        raise UsageError(f"expected a comma-separated integer list, got {text!r}") from exc


def _emit(payload):
    print(json.dumps(payload, sort_keys=True))


# -- commands -----------------------------------------------------------------

SYNTH_DEFAULTS = {"n_samples": 200, "m_target": 500, "latent_dim": 6, "noise_sigma": 0.5,
                  "scale_sigma": 0.06, "name": "dataset.vmds"}


def cmd_synth(opts):
    cfg = SynthConfig(n_samples=int(opts.n_samples), m_target=int(opts.m_target),
                      latent_dim=int(opts.latent_dim), noise_sigma=float(opts.noise_sigma),
                      scale_sigma=float(opts.scale_sigma))
    cfg.validate()
    ds = generate_synthetic_dataset(cfg, seed=int(opts.seed))
    path = os.path.join(_out_dir(opts), opts.name)
    save_dataset(ds, path)
    X = assemble_data_matrix(ds).X
    s = np.linalg.svd(X - X.mean(axis=1, keepdims=True), compute_uv=False)
    energy = np.cumsum(s**2) / np.sum(s**2)
    rank = int(np.searchsorted(energy, 0.999) + 1)
    _emit({"path": path, "N": ds.n_samples, "M": ds.n_vertices, "F": int(ds.faces.shape[0]),
           "J": ds.n_joints, "rank_99_9": rank})
    return EXIT_OK


LEARN_DEFAULTS = {"dataset": None, "K": 16, "restarts": 5, "init": "furthest_sum",
                  "max_iters": 200, "tol": 1e-6, "symmetry_tol": 1.0, "prefix": "markers"}


def _fit_options(opts, K):
    return FitOptions(K=int(K), init_strategy=opts.init, seed=int(opts.seed),
                      outer_tol=float(opts.tol), max_outer_iters=int(opts.max_iters),
                      restarts=int(opts.restarts), n_threads=int(opts.threads))


def _errors(frob, mean):
    return {"frobenius_sq": frob, "mean_vertex_mm": mean}


def cmd_learn(opts):
    _require(opts, "dataset")
    ds = load_dataset(opts.dataset)
    X = assemble_data_matrix(ds)
    fit = _fit_options(opts, opts.K)
    fit.validate(X.n_vertices)
    pairing = compute_symmetric_pairs(ds.template, float(opts.symmetry_tol))
    model, hist = fit_archetypes(X, fit)
    ms, (snapped, A_snap) = build_marker_set(model, X, pairing, ds.template,
                                             n_threads=fit.n_threads, return_snapped=True)
    out = _out_dir(opts)
    marker_path = os.path.join(out, f"{opts.prefix}.json")
    save_marker_set(ms, marker_path)
    save_archetype_model(model, out, int(opts.seed), prefix=f"{opts.prefix}_archetypes")
    report = {
        "K": fit.K,
        "seed": fit.seed,
        "restarts": fit.restarts,
        "winning_restart": model.restart,
        "objective_history": hist.objective_per_iter,
        "converged": hist.converged,
        "restart_objectives": hist.restart_objectives,
        "errors": {
            "archetypes": _errors(*reconstruction_error(X, model)),
            "snapped": _errors(*marker_refit_error(X, snapped, A_snap)),
            "symmetric": _errors(*marker_refit_error(X, ms.vertex_indices, ms.A)),
        },
        "pca_bound_frobenius_sq": baseline_pca_error(X, fit.K),
        "snapped_indices": [int(i) for i in snapped],
        "vertex_indices": [int(i) for i in ms.vertex_indices],
        "mirror_closed": is_mirror_closed(ms.vertex_indices, pairing),
        "marker_set": os.path.basename(marker_path),
    }
    report_path = os.path.join(out, f"{opts.prefix}_report.json")
    dump_json(report_path, report)
    _emit({"report": report_path, "marker_set": marker_path,
           "mean_vertex_mm": report["errors"]["symmetric"]["mean_vertex_mm"]})
    return EXIT_OK


ABLATE_DEFAULTS = dict(LEARN_DEFAULTS, K_list="8,16,32,64", random_seeds=5, name="ablate_k.csv")


def _rms(frob, X):
    return float(np.sqrt(frob / (X.n_samples * X.n_vertices)))


def cmd_ablate_k(opts):
    """One CSV row per K. All error columns are RMS per-vertex errors in mm,
    ``sqrt(||residual||_F^2 / (N * M))``, so the PCA column bounds the others."""
    _require(opts, "dataset")
    Ks = _int_list(opts.K_list)
    if not Ks:
        raise UsageError("--K-list is empty")
    n_random = int(opts.random_seeds)
    if n_random < 1:
        raise UsageError("--random-seeds must be >= 1")
    ds = load_dataset(opts.dataset)
    X = assemble_data_matrix(ds)
    pairing = compute_symmetric_pairs(ds.template, float(opts.symmetry_tol))
    rows = []
    for K in Ks:
        fit = _fit_options(opts, K)
        fit.validate(X.n_vertices)
        model, _ = fit_archetypes(X, fit)
        ms = build_marker_set(model, X, pairing, ds.template, n_threads=fit.n_threads)
        learned = _rms(marker_refit_error(X, ms.vertex_indices, ms.A)[0], X)
        rnd = []
        for s in range(n_random):
            base = baseline_random_markers(X.n_vertices, K, [int(opts.seed), K, s], X, n_threads=fit.n_threads)
            rnd.append(_rms(marker_refit_error(X, base.vertex_indices, base.A)[0], X))
        rows.append([K, learned, float(np.mean(rnd)), float(np.std(rnd)), _rms(baseline_pca_error(X, K), X)])
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["K", "learned_err", "random_err_mean", "random_err_std", "pca_bound"])
    for r in rows:
        w.writerow([r[0]] + [repr(float(v)) for v in r[1:]])
    path = os.path.join(_out_dir(opts), opts.name)
    with open(path, "w", newline="") as fh:
        fh.write(buf.getvalue())
    sys.stdout.write(buf.getvalue())
    return EXIT_OK


HEATMAP_DEFAULTS = {"grid_size": 32, "grid_extent": 1300.0, "sigma_voxels": 1.5,
                    "corrupt_fraction": 0.0, "corrupt_offset_voxels": 0.0, "corrupt_flatten": 0.0}


def _heatmap_setup(opts):
    grid = default_grid(int(opts.grid_size), float(opts.grid_extent))
    voxel = grid.voxel_size[0]
    sigma = float(opts.sigma_voxels) * voxel
    corruption = CorruptionSpec(float(opts.corrupt_fraction), float(opts.corrupt_offset_voxels) * voxel,
                                float(opts.corrupt_flatten))
    return grid, sigma, corruption


RECON_DEFAULTS = dict(HEATMAP_DEFAULTS, dataset=None, markers=None, estimates=None, adapter=None,
                      from_heatmaps=False, write_obj=True, name="recon_report.json")


def _load_estimates(path, K):
    data = load_json(path)
    items = data if isinstance(data, list) else [data]
    out = []
    for i, item in enumerate(items):
        est = MarkerEstimate.from_json(item)
        if est.P.shape[0] != K:
            raise ValueError(f"{path}: estimate {i} has {est.P.shape[0]} markers, marker set has K={K}")
        out.append(est)
    return out


def cmd_recon(opts):
    _require(opts, "dataset", "markers")
    ds = load_dataset(opts.dataset)
    ms = load_marker_set(opts.markers)
    if ms.n_vertices != ds.n_vertices:
        raise ValueError(f"{opts.markers} has M={ms.n_vertices} but {opts.dataset} has M={ds.n_vertices}")
    V = ds.vertices.astype(np.float64)
    if opts.estimates:
        estimates = _load_estimates(opts.estimates, ms.K)
        if len(estimates) != ds.n_samples:
            raise ValueError(f"{opts.estimates} holds {len(estimates)} estimates, {opts.dataset} has {ds.n_samples} samples")
        source = "file"
    elif opts.from_heatmaps:
        grid, sigma, corruption = _heatmap_setup(opts)
        estimates = simulate_estimates(V, ms, grid, sigma, corruption, seed=int(opts.seed))
        source = "heatmaps"
    else:
        estimates = [MarkerEstimate(ms.marker_positions(v), np.ones(ms.K)) for v in V]
        source = "ground_truth"
    adapter = None
    if opts.adapter:
        adapter = load_adapter(opts.adapter, ms)
        preds = [reconstruct_adaptive(e.P, e.C, adapter) for e in estimates]
    else:
        preds = [reconstruct_fixed(e.P, ms.A) for e in estimates]
    out = _out_dir(opts)
    if opts.write_obj:
        mesh_dir = os.path.join(out, "meshes")
        os.makedirs(mesh_dir, exist_ok=True)
        for n, M_hat in enumerate(preds):
            write_obj(os.path.join(mesh_dir, f"sample_{n:04d}.obj"), M_hat, ds.faces)
    report = evaluate_meshes(preds, V, ds.joint_regressor).to_json()
    report.update({"mode": "adaptive" if adapter is not None else "fixed", "estimates": source})
    path = os.path.join(out, opts.name)
    dump_json(path, report)
    _emit({"report": path, "mode": report["mode"], "mpve": report["aggregate"]["mpve"]})
    return EXIT_OK


TRAIN_DEFAULTS = dict(HEATMAP_DEFAULTS, dataset=None, markers=None, corrupt_fraction=0.25,
                      corrupt_offset_voxels=2.0, corrupt_flatten=0.5, epochs=20,
                      learning_rate=3e-4, batch_size=16, loss_weights=None, prefix="adapter")


def cmd_train_adapter(opts):
    _require(opts, "dataset", "markers")
    ds = load_dataset(opts.dataset)
    ms = load_marker_set(opts.markers)
    if ms.n_vertices != ds.n_vertices:
        raise ValueError(f"{opts.markers} has M={ms.n_vertices} but {opts.dataset} has M={ds.n_vertices}")
    weights = LossWeights(surface_reduction="mean")
    if opts.loss_weights:
        weights = LossWeights.from_dict(dict(weights.to_dict(), **opts.loss_weights))
    cfg = AdapterTrainConfig(learning_rate=float(opts.learning_rate), epochs=int(opts.epochs),
                             batch_size=int(opts.batch_size), loss_weights=weights, seed=int(opts.seed))
    grid, sigma, corruption = _heatmap_setup(opts)
    V = ds.vertices.astype(np.float64)
    estimates = simulate_estimates(V, ms, grid, sigma, corruption, seed=int(opts.seed))
    train_idx, eval_idx = heldout_split(ds.n_samples)
    if train_idx.size == 0 or eval_idx.size == 0:
        raise ValueError(f"need at least 2 samples for the train/eval split, got {ds.n_samples}")
    adapter, history = train_adapter([(estimates[i], V[i]) for i in train_idx], ds, cfg, ms)
    fixed, adaptive = compare_fixed_adaptive([estimates[i] for i in eval_idx], V[eval_idx], adapter)
    out = _out_dir(opts)
    adapter_path = os.path.join(out, f"{opts.prefix}.json")
    save_adapter(adapter, adapter_path, opts.markers)
    report = {
        "loss_history": history,
        "eval_mpve_fixed": fixed,
        "eval_mpve_adaptive": adaptive,
        "relative_improvement": (fixed - adaptive) / fixed if fixed > 0 else 0.0,
        "n_train": int(train_idx.size),
        "n_eval": int(eval_idx.size),
        "config": {"learning_rate": cfg.learning_rate, "epochs": cfg.epochs, "batch_size": cfg.batch_size,
                   "seed": cfg.seed, "loss_weights": weights.to_dict(),
                   "grid": {"dims": list(grid.dims), "origin": list(grid.origin),
                            "voxel_size": list(grid.voxel_size)},
                   "sigma_mm": sigma,
                   "corruption": {"fraction": corruption.fraction, "offset_mm": corruption.offset_mm,
                                  "flatten": corruption.flatten}},
        "adapter": os.path.basename(adapter_path),
    }
    path = os.path.join(out, f"{opts.prefix}_report.json")
    dump_json(path, report)
    _emit({"report": path, "eval_mpve_fixed": fixed, "eval_mpve_adaptive": adaptive})
    return EXIT_OK


EVAL_DEFAULTS = {"pred": None, "gt": None, "regressor": None, "name": "eval_report.json"}


def cmd_eval(opts):
    _require(opts, "pred", "gt")
    pred = load_dataset(opts.pred)
    gt = load_dataset(opts.gt)
    if pred.n_vertices != gt.n_vertices or pred.n_samples != gt.n_samples:
        raise ValueError(f"topology mismatch: {opts.pred} is {pred.n_samples}x{pred.n_vertices}, "
                         f"{opts.gt} is {gt.n_samples}x{gt.n_vertices}")
    if pred.faces.size and gt.faces.size and not np.array_equal(pred.faces, gt.faces):
        raise ValueError(f"topology mismatch: face lists of {opts.pred} and {opts.gt} differ")
    regressor = load_vmat(opts.regressor) if opts.regressor else gt.joint_regressor
    report = evaluate_meshes(pred.vertices.astype(np.float64), gt.vertices.astype(np.float64), regressor)
    path = os.path.join(_out_dir(opts), opts.name)
    dump_json(path, report.to_json())
    _emit({"report": path, "mpve": report.mpve, "mpjpe": report.mpjpe, "pa_mpjpe": report.pa_mpjpe})
    return EXIT_OK


# -- parser -------------------------------------------------------------------

def _add_common(p):
    p.add_argument("--config", help="JSON file with option defaults (flags win)")
    p.add_argument("--seed", type=int, help="random seed (default 0)")
    p.add_argument("--out", help="output directory (default: current directory)")
    p.add_argument("--threads", type=int, help="worker threads for the simplex solver (default 1)")


def _add_fit(p):
    p.add_argument("--dataset", help="VMDS file or directory of OBJ meshes")
    p.add_argument("--restarts", type=int, help="archetype restarts (default 5)")
    p.add_argument("--init", choices=["furthest_sum", "random_vertices"], help="initialization")
    p.add_argument("--max-iters", type=int, help="outer iteration cap (default 200)")
    p.add_argument("--tol", type=float, help="relative objective decrease to stop (default 1e-6)")
    p.add_argument("--symmetry-tol", type=float, help="midline tolerance in mm (default 1)")


def _add_heatmap(p):
    p.add_argument("--grid-size", type=int, help="voxels per axis (default 32)")
    p.add_argument("--grid-extent", type=float, help="grid half-width in mm (default 1300)")
    p.add_argument("--sigma-voxels", type=float, help="heatmap Gaussian std in voxels (default 1.5)")
    p.add_argument("--corrupt-fraction", type=float, help="fraction of markers corrupted per sample")
    p.add_argument("--corrupt-offset-voxels", type=float, help="offset of corrupted markers, voxels")
    p.add_argument("--corrupt-flatten", type=float, help="blend of corrupted heatmaps toward uniform")


def build_parser():
    parser = argparse.ArgumentParser(prog="vmarker", description="Learn and use virtual body markers.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic humanoid mesh dataset")
    _add_common(p)
    p.add_argument("--n-samples", type=int, help="number of poses (default 200)")
    p.add_argument("--m-target", type=int, help="approximate vertex count (default 500)")
    p.add_argument("--latent-dim", type=int, help="pose latent dimension (default 6)")
    p.add_argument("--noise-sigma", type=float, help="vertex noise std in mm (default 0.5)")
    p.add_argument("--scale-sigma", type=float, help="log body-scale std (default 0.06)")
    p.add_argument("--name", help="output file name (default dataset.vmds)")
    p.set_defaults(func=cmd_synth, defaults=SYNTH_DEFAULTS)

    p = sub.add_parser("learn", help="learn K symmetric virtual markers")
    _add_common(p)
    _add_fit(p)
    p.add_argument("--K", type=int, help="number of markers (default 16)")
    p.add_argument("--prefix", help="output file prefix (default markers)")
    p.set_defaults(func=cmd_learn, defaults=LEARN_DEFAULTS)

    p = sub.add_parser("ablate-k", help="refit error versus K against random and PCA baselines (CSV)")
    _add_common(p)
    _add_fit(p)
    p.add_argument("--K-list", dest="K_list", help="comma-separated K values (default 8,16,32,64)")
    p.add_argument("--random-seeds", type=int, help="random marker sets per K (default 5)")
    p.add_argument("--name", help="output CSV name (default ablate_k.csv)")
    p.set_defaults(func=cmd_ablate_k, defaults=ABLATE_DEFAULTS)

    p = sub.add_parser("recon", help="reconstruct meshes from marker estimates")
    _add_common(p)
    _add_heatmap(p)
    p.add_argument("--dataset", help="dataset giving faces and ground truth")
    p.add_argument("--markers", help="marker-set JSON")
    p.add_argument("--estimates", help="estimate JSON: one {P, C} object or a list, one per sample")
    p.add_argument("--from-heatmaps", action="store_const", const=True,
                   help="decode simulated heatmaps instead of using ground-truth markers")
    p.add_argument("--adapter", help="adapter JSON; enables confidence-adapted coefficients")
    p.add_argument("--no-obj", dest="write_obj", action="store_const", const=False,
                   help="skip writing per-sample OBJ files")
    p.add_argument("--name", help="report file name (default recon_report.json)")
    p.set_defaults(func=cmd_recon, defaults=RECON_DEFAULTS)

    p = sub.add_parser("train-adapter", help="train the confidence-conditioned coefficient adapter")
    _add_common(p)
    _add_heatmap(p)
    p.add_argument("--dataset", help="training dataset")
    p.add_argument("--markers", help="marker-set JSON")
    p.add_argument("--epochs", type=int, help="training epochs (default 20)")
    p.add_argument("--learning-rate", type=float, help="initial learning rate (default 3e-4)")
    p.add_argument("--batch-size", type=int, help="mini-batch size (default 16)")
    p.add_argument("--prefix", help="output file prefix (default adapter)")
    p.set_defaults(func=cmd_train_adapter, defaults=TRAIN_DEFAULTS)

    p = sub.add_parser("eval", help="compare predicted meshes with ground truth")
    _add_common(p)
    p.add_argument("--pred", help="predicted meshes: VMDS file or OBJ directory")
    p.add_argument("--gt", help="ground-truth dataset")
    p.add_argument("--regressor", help="M x J joint regressor as VMAT (default: the dataset's)")
    p.add_argument("--name", help="report file name (default eval_report.json)")
    p.set_defaults(func=cmd_eval, defaults=EVAL_DEFAULTS)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        opts = _Options(args, args.defaults)
        if opts.threads is not None and int(opts.threads) < 1:
            raise UsageError("--threads must be >= 1")
        return args.func(opts)
    except UsageError as exc:
        print(f"vmarker {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, FormatError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"vmarker {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - any other failure is a runtime error
        print(f"vmarker {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
