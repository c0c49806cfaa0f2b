import itertools
import struct
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from vmarker.dataset import (
    DataMatrix,
    MeshDataset,
    assemble_data_matrix,
    compute_symmetric_pairs,
    load_dataset,
    save_dataset,
)
from vmarker.io import FormatError, load_vmat, save_vmat, write_obj
from vmarker.synth import SynthConfig, deformation_rank_bound, generate_synthetic_dataset

CUBE = np.array([[x, y, z] for x in (1.0, -1.0) for y in (0.0, 2.0) for z in (-1.0, 1.0)])


def tiny_dataset(n=2, with_regressor=False, seed=0):
    rng = np.random.default_rng(seed)
    verts = rng.normal(size=(n, 4, 3)).astype(np.float32)
    faces = np.array([[0, 1, 2], [0, 2, 3]])
    reg = None
    if with_regressor:
        reg = rng.random((4, 2))
        reg /= reg.sum(axis=0)
    return MeshDataset(verts, faces, verts[0], reg)


# -- data matrix --------------------------------------------------------------

def test_data_matrix_layout():
    ds = MeshDataset(np.array([[[1, 2, 3], [4, 5, 6]]]), np.zeros((0, 3)), np.zeros((2, 3)))
    np.testing.assert_array_equal(assemble_data_matrix(ds).X, [[1, 4], [2, 5], [3, 6]])


def test_data_matrix_duplicate_sample():
    v = np.random.default_rng(0).normal(size=(1, 5, 3))
    ds = MeshDataset(np.concatenate([v, v]), np.zeros((0, 3)), v[0])
    X = assemble_data_matrix(ds).X
    np.testing.assert_array_equal(X[3:6], X[0:3])


@settings(max_examples=50, deadline=None)
@given(arrays(np.float32, st.tuples(st.integers(1, 6), st.integers(1, 9), st.just(3)),
              elements=st.floats(-1e4, 1e4, width=32)))
def test_data_matrix_inverse_reshape(verts):
    ds = MeshDataset(verts, np.zeros((0, 3)), verts[0])
    dm = assemble_data_matrix(ds)
    assert dm.X.shape == (3 * verts.shape[0], verts.shape[1])
    np.testing.assert_array_equal(dm.to_vertices(), verts.astype(np.float64))
    n, i, c = verts.shape[0] - 1, verts.shape[1] - 1, 2
    assert dm.X[3 * n + c, i] == verts[n, i, c]


# -- validation ---------------------------------------------------------------

def test_rejects_bad_faces_and_regressor():
    v = np.zeros((1, 3, 3))
    with pytest.raises(ValueError):
        MeshDataset(v, [[0, 1, 3]], v[0])
    with pytest.raises(ValueError):
        MeshDataset(v, [[0, 1, 1]], v[0])
    with pytest.raises(ValueError):
        MeshDataset(v, [[0, 1, 2]], v[0], np.full((3, 1), 0.5))
    with pytest.raises(ValueError):
        MeshDataset(np.full((1, 3, 3), np.nan), [[0, 1, 2]], v[0])


# -- symmetric pairing --------------------------------------------------------

def test_pairing_mirror_pair():
    p = compute_symmetric_pairs(np.array([[1.0, 2, 3], [-1.0, 2, 3]]), tolerance=1e-3)
    assert p.pairs == [(0, 1)]
    assert p.midline == []


def test_pairing_midline_vertex():
    p = compute_symmetric_pairs(np.array([[0.0, 5, 1]]), tolerance=1e-3)
    assert p.midline == [0]


def _exhaustive_pairing(t):
    """Minimum total cost perfect matching between the x>0 and x<0 halves."""
    left = [i for i in range(len(t)) if t[i, 0] > 0]
    right = [i for i in range(len(t)) if t[i, 0] < 0]
    best = None
    for perm in itertools.permutations(right):
        cost = sum(abs(t[i, 0] + t[j, 0]) + abs(t[i, 1] - t[j, 1]) + abs(t[i, 2] - t[j, 2])
                   for i, j in zip(left, perm))
        if best is None or cost < best[0]:
            best = (cost, sorted(tuple(sorted(p)) for p in zip(left, perm)))
    return best


def test_pairing_cube_matches_exhaustive_oracle():
    p = compute_symmetric_pairs(CUBE, tolerance=1e-6)
    cost, pairs = _exhaustive_pairing(CUBE)
    assert cost == 0
    assert sorted(p.pairs) == pairs
    assert len(p.pairs) == 4


def _mirrored_template(rng, n_half=12, n_mid=3):
    left = rng.normal(size=(n_half, 3))
    left[:, 0] = np.abs(left[:, 0]) + 0.5
    right = left * [-1, 1, 1]
    mid = rng.normal(size=(n_mid, 3))
    mid[:, 0] = 0.0
    t = np.vstack([left, right, mid])
    return t[rng.permutation(len(t))]


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31))
def test_pairing_on_mirrored_template(seed):
    t = _mirrored_template(np.random.default_rng(seed))
    p = compute_symmetric_pairs(t, tolerance=1e-3)
    assert not p.unmatched
    np.testing.assert_array_equal(p.partner[p.partner], np.arange(len(t)))
    for i, j in p.pairs:
        np.testing.assert_allclose(t[j], t[i] * [-1, 1, 1])
    # each vertex exactly once
    seen = [v for pair in p.pairs for v in pair] + p.midline
    assert sorted(seen) == list(range(len(t)))
    # swapping halves keeps the pair set
    swapped = compute_symmetric_pairs(t * [-1, 1, 1], tolerance=1e-3)
    assert set(swapped.pairs) == set(p.pairs)


def test_pairing_unmatched_vertices_warn():
    t = np.array([[1.0, 0, 0], [-1.0, 10, 0], [2.0, 0, 0]])
    with pytest.warns(UserWarning):
        p = compute_symmetric_pairs(t, tolerance=0.5)
    assert set(p.unmatched) == {0, 1, 2}
    assert p.pairs == []


def test_pairing_is_involution_on_asymmetric_template(rng):
    t = rng.normal(size=(40, 3))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        p = compute_symmetric_pairs(t, tolerance=0.4)
    np.testing.assert_array_equal(p.partner[p.partner], np.arange(40))


# -- VMDS / OBJ ---------------------------------------------------------------

@pytest.mark.parametrize("with_regressor", [False, True])
def test_vmds_round_trip(tmp_path, with_regressor):
    ds = tiny_dataset(with_regressor=with_regressor)
    path = tmp_path / "d.vmds"
    save_dataset(ds, path)
    back = load_dataset(str(path))
    assert back.n_samples == 2 and back.n_vertices == 4 and back.faces.shape == (2, 3)
    np.testing.assert_array_equal(back.vertices, ds.vertices)
    np.testing.assert_array_equal(back.template, ds.template)
    np.testing.assert_array_equal(back.faces, ds.faces)
    if with_regressor:
        np.testing.assert_array_equal(back.joint_regressor, ds.joint_regressor)
    else:
        assert back.joint_regressor is None
    save_dataset(back, tmp_path / "e.vmds")
    assert (tmp_path / "d.vmds").read_bytes() == (tmp_path / "e.vmds").read_bytes()


def test_vmds_header_layout(tmp_path):
    path = tmp_path / "d.vmds"
    save_dataset(tiny_dataset(n=3), path)
    blob = path.read_bytes()
    assert blob[:4] == b"VMDS"
    assert struct.unpack_from("<5I", blob, 4) == (1, 3, 4, 2, 0)


def test_vmds_without_template_block(tmp_path):
    ds = tiny_dataset()
    path = tmp_path / "d.vmds"
    save_dataset(ds, path)
    blob = path.read_bytes()
    (tmp_path / "bare.vmds").write_bytes(blob[: len(blob) - 4 - 4 * 4 * 3])
    back = load_dataset(str(tmp_path / "bare.vmds"))
    np.testing.assert_array_equal(back.template, ds.vertices[0])


@pytest.mark.parametrize(
    "mutate, message",
    [
        (lambda b: b"", "too short"),
        (lambda b: b"XXXX" + b[4:], "magic"),
        (lambda b: b[:4] + struct.pack("<I", 7) + b[8:], "version"),
        (lambda b: b[:40], "truncated"),
        (lambda b: b + b"junk", "trailing"),
    ],
)
def test_vmds_format_errors(tmp_path, mutate, message):
    path = tmp_path / "d.vmds"
    save_dataset(tiny_dataset(), path)
    path.write_bytes(mutate(path.read_bytes()))
    with pytest.raises(FormatError, match=message):
        load_dataset(str(path))


def test_vmds_face_index_out_of_range(tmp_path):
    path = tmp_path / "d.vmds"
    save_dataset(tiny_dataset(), path)
    blob = bytearray(path.read_bytes())
    off = 24 + 2 * 4 * 3 * 4
    blob[off:off + 4] = struct.pack("<I", 99)
    path.write_bytes(bytes(blob))
    with pytest.raises(FormatError, match="out of range"):
        load_dataset(str(path))


def test_save_to_missing_directory_raises(tmp_path):
    with pytest.raises(OSError):
        save_dataset(tiny_dataset(), tmp_path / "missing" / "d.vmds")


def test_obj_directory(tmp_path):
    ds = tiny_dataset(n=3)
    for n in (2, 0, 1):
        write_obj(tmp_path / f"s{n}.obj", ds.vertices[n], ds.faces)
    back = load_dataset(str(tmp_path))
    assert back.n_samples == 3
    np.testing.assert_allclose(back.vertices, ds.vertices, atol=5e-7)
    np.testing.assert_array_equal(back.faces, ds.faces)


def test_obj_directory_template_file(tmp_path):
    ds = tiny_dataset(n=2)
    for n in range(2):
        write_obj(tmp_path / f"s{n}.obj", ds.vertices[n], ds.faces)
    write_obj(tmp_path / "template.obj", np.ones((4, 3)), ds.faces)
    back = load_dataset(str(tmp_path))
    assert back.n_samples == 2
    np.testing.assert_array_equal(back.template, np.ones((4, 3)))


def test_obj_directory_topology_mismatch(tmp_path):
    faces = np.array([[0, 1, 2]])
    write_obj(tmp_path / "a.obj", np.zeros((3, 3)), faces)
    write_obj(tmp_path / "b.obj", np.zeros((4, 3)), faces)
    write_obj(tmp_path / "c.obj", np.zeros((3, 3)), faces)
    with pytest.raises(FormatError, match="topology mismatch"):
        load_dataset(str(tmp_path))


def test_obj_rejects_quads(tmp_path):
    (tmp_path / "q.obj").write_text("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n")
    with pytest.raises(FormatError, match="q.obj:5"):
        load_dataset(str(tmp_path))


def test_empty_obj_directory(tmp_path):
    with pytest.raises(FormatError):
        load_dataset(str(tmp_path))


def test_vmat_round_trip(tmp_path, rng):
    for shape in [(1, 1), (7, 3), (0, 4)]:
        m = rng.normal(size=shape)
        save_vmat(tmp_path / "m.vmat", m)
        back = load_vmat(tmp_path / "m.vmat")
        assert back.shape == shape
        assert back.tobytes() == m.tobytes()


def test_vmat_rejects_truncation(tmp_path):
    save_vmat(tmp_path / "m.vmat", np.ones((3, 3)))
    blob = (tmp_path / "m.vmat").read_bytes()
    (tmp_path / "m.vmat").write_bytes(blob[:-1])
    with pytest.raises(FormatError):
        load_vmat(tmp_path / "m.vmat")


# -- synthetic generator ------------------------------------------------------

def test_synth_is_deterministic():
    cfg = SynthConfig(n_samples=12, m_target=80)
    a = generate_synthetic_dataset(cfg, seed=5)
    b = generate_synthetic_dataset(cfg, seed=5)
    c = generate_synthetic_dataset(cfg, seed=6)
    assert a.vertices.tobytes() == b.vertices.tobytes()
    assert a.vertices.tobytes() != c.vertices.tobytes()


def test_synth_identical_latents_give_identical_samples():
    cfg = SynthConfig(n_samples=10, m_target=60, latent_dim=1, noise_sigma=0.0)
    z = np.full((10, 1), 0.7)
    ds = generate_synthetic_dataset(cfg, seed=1, latents=z)
    np.testing.assert_array_equal(ds.vertices[0], ds.vertices[1])


def test_synth_default_shape_and_symmetry(default_dataset):
    ds = default_dataset
    assert ds.n_samples == 200
    assert abs(ds.n_vertices - 500) <= 25
    assert ds.n_joints >= 3
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        p = compute_symmetric_pairs(ds.template)
    t = ds.template.astype(np.float64)
    for i, j in p.pairs:
        np.testing.assert_allclose(t[j], t[i] * [-1, 1, 1], atol=1e-4)
    assert len(p.pairs) > 0.3 * ds.n_vertices


def test_synth_template_is_outward_oriented(default_dataset):
    t = default_dataset.template.astype(np.float64)
    f = default_dataset.faces
    vol = np.einsum("ij,ij->i", t[f[:, 0]], np.cross(t[f[:, 1]], t[f[:, 2]])).sum() / 6.0
    assert vol > 0


def test_synth_noise_free_rank_bound():
    cfg = SynthConfig(n_samples=100, m_target=200, latent_dim=3, noise_sigma=0.0)
    X = assemble_data_matrix(generate_synthetic_dataset(cfg, seed=2)).X
    s = np.linalg.svd(X, compute_uv=False)
    rank = int((s > 1e-6 * s[0]).sum())
    assert rank <= deformation_rank_bound(cfg)


@pytest.mark.parametrize(
    "kwargs", [{"m_target": 49}, {"n_samples": 9}, {"latent_dim": 0}, {"noise_sigma": -1.0}]
)
def test_synth_rejects_bad_config(kwargs):
    with pytest.raises(ValueError):
        generate_synthetic_dataset(SynthConfig(**kwargs), seed=0)


def test_datamatrix_type_round_trip():
    dm = DataMatrix(np.arange(12.0).reshape(6, 2), 2, 2)
    assert dm.to_vertices().shape == (2, 2, 3)
