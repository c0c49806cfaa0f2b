"""Desk-scale stand-in for mocap mesh data.

A bilaterally symmetric low-poly humanoid (tube per body part, T-pose, pelvis
at the origin, ``x > 0`` is the body's left) is posed by rotating body parts
about the joints of a stick-figure armature. The joint rotations and a global
scale are linear functions of a low-dimensional Gaussian latent, so the
dataset is low-rank and surface-structured like real motion capture.
"""

from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation

from .dataset import MeshDataset

# Rest-pose joint positions (mm).
_JOINTS = {
    "pelvis": (0.0, 0.0, 0.0),
    "neck": (0.0, 520.0, 0.0),
    "head_top": (0.0, 760.0, 0.0),
    "shoulder_l": (190.0, 450.0, 0.0),
    "elbow_l": (460.0, 450.0, 0.0),
    "wrist_l": (700.0, 450.0, 0.0),
    "hip_l": (90.0, -40.0, 0.0),
    "knee_l": (95.0, -470.0, 0.0),
    "ankle_l": (95.0, -880.0, 0.0),
}

# Parts of the left half plus the midline; right limbs are exact mirrors.
_PARTS = [
    # name, start, end, radius, chain of rotating joints (outermost first), blend parent
    ("torso", (0.0, -80.0, 0.0), (0.0, 520.0, 0.0), (150.0, 95.0), ("spine",), None),
    ("head", (0.0, 540.0, 0.0), (0.0, 760.0, 0.0), (80.0, 95.0), ("spine", "neck"), "torso"),
    ("upperarm_l", "shoulder_l", "elbow_l", (48.0, 48.0), ("spine", "shoulder_l"), "torso"),
    ("forearm_l", "elbow_l", "wrist_l", (38.0, 38.0), ("spine", "shoulder_l", "elbow_l"), "upperarm_l"),
    ("thigh_l", "hip_l", "knee_l", (72.0, 72.0), ("hip_l",), "root"),
    ("shin_l", "knee_l", "ankle_l", (50.0, 50.0), ("hip_l", "knee_l"), "thigh_l"),
]

# Rotation pivots and per-axis angle standard deviations (radians).
_PIVOTS = {
    "spine": ("pelvis", 0.25),
    "neck": ("neck", 0.30),
    "shoulder_l": ("shoulder_l", 0.55),
    "elbow_l": ("elbow_l", 0.55),
    "hip_l": ("hip_l", 0.40),
    "knee_l": ("knee_l", 0.55),
}

JOINT_NAMES = [
    "head_top", "neck", "shoulder_l", "shoulder_r", "elbow_l", "elbow_r", "wrist_l", "wrist_r",
    "hip_l", "hip_r", "knee_l", "knee_r", "ankle_l", "ankle_r",
]


@dataclass
class SynthConfig:
    n_samples: int = 200
    m_target: int = 500
    latent_dim: int = 6
    noise_sigma: float = 0.5
    scale_sigma: float = 0.06

    def validate(self):
        if self.m_target < 50:
            raise ValueError(f"m_target must be >= 50, got {self.m_target}")
        if self.n_samples < 10:
            raise ValueError(f"n_samples must be >= 10, got {self.n_samples}")
        if self.latent_dim < 1:
            raise ValueError(f"latent_dim must be >= 1, got {self.latent_dim}")
        if not self.noise_sigma >= 0:
            raise ValueError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if not self.scale_sigma >= 0:
            raise ValueError(f"scale_sigma must be >= 0, got {self.scale_sigma}")


def _mirror(name):
    return name[:-2] + "_r" if name.endswith("_l") else name


def _point(p):
    if isinstance(p, str):
        return np.array(_JOINTS[p], dtype=np.float64)
    return np.array(p, dtype=np.float64)


def _frame(axis):
    """Right-handed (u, v) with u x v = axis; for the vertical axis u = +z, v = +x."""
    a = axis / np.linalg.norm(axis)
    if abs(a[1]) > 0.9:
        u = np.array([0.0, 0.0, 1.0]) if a[1] > 0 else np.array([1.0, 0.0, 0.0])
        u = u - a * (u @ a)
        u /= np.linalg.norm(u)
    else:
        u = np.array([0.0, 0.0, 1.0]) - a * a[2]
        u /= np.linalg.norm(u)
    v = np.cross(a, u)
    return a, u, v


def _ring_angles(segments):
    """Unit (cos, sin) pairs with exact sign symmetry between k and S-k."""
    k = np.arange(segments // 2 + 1)
    th = 2.0 * np.pi * k / segments
    cos = np.cos(th)
    sin = np.sin(th)
    sin[0] = 0.0
    sin[-1] = 0.0
    cos[-1] = -1.0
    full_cos = np.concatenate([cos, cos[1:-1][::-1]])
    full_sin = np.concatenate([sin, -sin[1:-1][::-1]])
    return full_cos, full_sin


def _tube(start, end, radii, rings, segments):
    """Closed tube: ``rings`` rings of ``segments`` vertices plus two cap centers.

    Faces are wound counter-clockwise seen from outside.
    """
    a, u, v = _frame(end - start)
    cos, sin = _ring_angles(segments)
    ts = np.linspace(0.0, 1.0, rings)
    verts = []
    for t in ts:
        c = start + t * (end - start)
        verts.append(c + radii[0] * cos[:, None] * u + radii[1] * sin[:, None] * v)
    verts = np.concatenate(verts)
    # caps sit slightly beyond the end rings
    cap0 = start - 0.35 * min(radii) * a
    cap1 = end + 0.35 * min(radii) * a
    verts = np.vstack([verts, cap0, cap1])
    c0, c1 = rings * segments, rings * segments + 1

    faces = []
    for r in range(rings - 1):
        for s in range(segments):
            s1 = (s + 1) % segments
            p00, p01 = r * segments + s, r * segments + s1
            p10, p11 = (r + 1) * segments + s, (r + 1) * segments + s1
            faces.append((p00, p01, p10))
            faces.append((p01, p11, p10))
    last = (rings - 1) * segments
    for s in range(segments):
        s1 = (s + 1) % segments
        faces.append((c0, s1, s))
        faces.append((c1, last + s, last + s1))
    return verts, np.array(faces, dtype=np.int64)


def _layout(m_target):
    segments = 8 if m_target >= 300 else (6 if m_target >= 150 else 4)
    lengths = np.array([np.linalg.norm(_point(e) - _point(s)) for _, s, e, *_ in _PARTS])
    mirrored = np.array([name.endswith("_l") for name, *_ in _PARTS])
    counts = np.where(mirrored, 2, 1)

    def total(alpha):
        rings = np.maximum(2, np.round(alpha * lengths).astype(int))
        return int(np.sum(counts * (rings * segments + 2))), rings

    best = None
    for alpha in np.linspace(0.0, 0.2, 4001):
        m, rings = total(alpha)
        if best is None or abs(m - m_target) < abs(best[0] - m_target):
            best = (m, rings)
    return segments, best[1]


def build_template(m_target=500):
    """Rest-pose template.

    Returns ``(vertices, faces, part_of_vertex, part_names, ring_index, rings)``
    where ``ring_index`` is -1 for cap centers.
    """
    segments, rings = _layout(m_target)
    verts, faces, part_of, ring_of, names = [], [], [], [], []
    ring_counts = {}
    offset = 0
    for (name, s, e, radii, _, _), nr in zip(_PARTS, rings):
        sides = [name] + ([_mirror(name)] if name.endswith("_l") else [])
        for side in sides:
            v, f = _tube(_point(s), _point(e), radii, nr, segments)
            if side != name:
                v = v * np.array([-1.0, 1.0, 1.0])
                f = f[:, [0, 2, 1]]
            pid = len(names)
            names.append(side)
            ring_counts[side] = int(nr)
            verts.append(v)
            faces.append(f + offset)
            part_of.append(np.full(len(v), pid))
            ring_of.append(np.concatenate([np.repeat(np.arange(nr), segments), [-1, -1]]))
            offset += len(v)
    return (
        np.concatenate(verts),
        np.concatenate(faces),
        np.concatenate(part_of),
        names,
        np.concatenate(ring_of),
        ring_counts,
    )


def _part_spec(name):
    for pname, s, e, radii, chain, parent in _PARTS:
        if pname == name:
            return chain, parent
        if _mirror(pname) == name:
            return tuple(_mirror(c) for c in chain), (_mirror(parent) if parent else None)
    raise KeyError(name)


def _pivot_names():
    names = []
    for p in _PIVOTS:
        names.append(p)
        if p.endswith("_l"):
            names.append(_mirror(p))
    return names


def _pivot_point(name):
    base = name[:-2] + "_l" if name.endswith("_r") else name
    joint, _ = _PIVOTS[base]
    p = _point(joint)
    if name.endswith("_r"):
        p = p * np.array([-1.0, 1.0, 1.0])
    return p


def _pivot_std(name):
    base = name[:-2] + "_l" if name.endswith("_r") else name
    return _PIVOTS[base][1]


def deformation_rank_bound(config=None):
    """Upper bound on rank(X) for noise-free data.

    Every posed vertex is a blend of at most two rigid transforms of its rest
    position, one per kinematic chain, so each row of X lies in the span of
    ``{1, x, y, z}`` restricted to each chain's vertices: 4 per chain. The
    chains are the body parts plus the fixed root used by the thigh blend.
    """
    n_parts = sum(2 if name.endswith("_l") else 1 for name, *_ in _PARTS)
    return 4 * (n_parts + 1)


def _joint_regressor(part_of, ring_of, names, rings):
    m = part_of.shape[0]
    cols = []

    def ring(part, r):
        nr = rings[part]
        r = r if r >= 0 else nr + r
        return np.flatnonzero((part_of == names.index(part)) & (ring_of == r))

    for joint in JOINT_NAMES:
        side = joint[-2:] if joint.endswith(("_l", "_r")) else ""
        if joint == "head_top":
            idx = np.concatenate([ring("head", -1)])
        elif joint == "neck":
            idx = np.concatenate([ring("torso", -1), ring("head", 0)])
        elif joint.startswith("shoulder"):
            idx = ring("upperarm" + side, 0)
        elif joint.startswith("elbow"):
            idx = np.concatenate([ring("upperarm" + side, -1), ring("forearm" + side, 0)])
        elif joint.startswith("wrist"):
            idx = ring("forearm" + side, -1)
        elif joint.startswith("hip"):
            idx = ring("thigh" + side, 0)
        elif joint.startswith("knee"):
            idx = np.concatenate([ring("thigh" + side, -1), ring("shin" + side, 0)])
        else:
            idx = ring("shin" + side, -1)
        col = np.zeros(m)
        col[idx] = 1.0 / idx.size
        cols.append(col)
    return np.stack(cols, axis=1)


def _chain_transform(chain, rotations):
    """Compose rotations about pivots, innermost joint applied first."""
    R = np.eye(3)
    t = np.zeros(3)
    for name in chain:  # outermost first: x' = T_outer(... T_inner(x))
        Rj = rotations[name]
        pj = _pivot_point(name)
        # T_j(x) = Rj (x - pj) + pj ; compose T = T_prev o T_j
        t = R @ (pj - Rj @ pj) + t
        R = R @ Rj
    return R, t


def generate_synthetic_dataset(config, seed, latents=None):
    """Generate a posed humanoid dataset; a pure function of ``(config, seed)``.

    ``latents`` (N x latent_dim) overrides the Gaussian latent draw, which lets
    callers force identical poses.
    """
    config.validate()
    rng = np.random.default_rng(seed)
    template, faces, part_of, names, ring_of, rings = build_template(config.m_target)
    pivots = _pivot_names()
    p = config.latent_dim

    mix = rng.normal(size=(3 * len(pivots), p))
    mix /= np.linalg.norm(mix, axis=1, keepdims=True)
    stds = np.repeat([_pivot_std(n) for n in pivots], 3)
    scale_dir = rng.normal(size=p)
    scale_dir /= np.linalg.norm(scale_dir)

    if latents is None:
        latents = rng.normal(size=(config.n_samples, p))
    else:
        latents = np.asarray(latents, dtype=np.float64)
        if latents.shape != (config.n_samples, p):
            raise ValueError(f"latents must be ({config.n_samples}, {p}), got {latents.shape}")
    noise = rng.normal(size=(config.n_samples, template.shape[0], 3)) * config.noise_sigma

    # vertices in the first ring of a child part blend half-and-half with the parent chain
    blend = np.zeros(template.shape[0])
    parent_of = np.empty(len(names), dtype=object)
    for pid, name in enumerate(names):
        chain, parent = _part_spec(name)
        parent_of[pid] = parent
        if parent is not None:
            blend[(part_of == pid) & (ring_of == 0)] = 0.5

    out = np.empty((config.n_samples, template.shape[0], 3))
    for n in range(config.n_samples):
        angles = (mix @ latents[n]) * stds
        rots = {
            name: Rotation.from_rotvec(angles[3 * k: 3 * k + 3]).as_matrix()
            for k, name in enumerate(pivots)
        }
        scale = np.exp(config.scale_sigma * (scale_dir @ latents[n]))
        posed = np.empty_like(template)
        for pid, name in enumerate(names):
            sel = part_of == pid
            chain, parent = _part_spec(name)
            R, t = _chain_transform(chain, rots)
            own = template[sel] @ R.T + t
            if parent is None:
                posed[sel] = own
                continue
            if parent == "root":
                Rp, tp = np.eye(3), np.zeros(3)
            else:
                Rp, tp = _chain_transform(_part_spec(parent)[0], rots)
            par = template[sel] @ Rp.T + tp
            w = blend[sel][:, None]
            posed[sel] = (1.0 - w) * own + w * par
        out[n] = scale * posed
    out += noise
    return MeshDataset(
        out.astype(np.float32),
        faces,
        template.astype(np.float32),
        _joint_regressor(part_of, ring_of, names, rings),
    )
