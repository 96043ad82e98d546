"""Tetrahedral SDF geometry: lattice, ellipsoid prior, neural field and
differentiable marching tetrahedra."""
from __future__ import annotations

import itertools
import os
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .tensor import (Tensor, backward, broadcast_to, concat, cross_rows, dot_rows, no_grad,
                     normalize_rows, reshape, scatter_add, tanh)

# local edge -> vertex pair inside a tetrahedron
TET_EDGES = np.array([(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)])
DEFORM_LIMIT = 0.45
# |s| at or below this counts as lying on the surface (outside, by the tie-break)
ZERO_SNAP = 1e-12


class GeometryError(RuntimeError):
    """Raised when geometry initialization diverges."""


# ---------------------------------------------------------------------------
# tetrahedral lattice
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class TetGrid:
    vertices: np.ndarray  # (V, 3) in [-1, 1]^3
    tets: np.ndarray      # (T, 4) positively oriented
    cell_size: float
    resolution: int

    def signed_volumes(self, vertices: np.ndarray | None = None) -> np.ndarray:
        v = self.vertices if vertices is None else vertices
        a, b, c, d = (v[self.tets[:, i]] for i in range(4))
        return np.einsum("ij,ij->i", b - a, np.cross(c - a, d - a)) / 6.0


def build_tet_grid(resolution: int) -> TetGrid:
    """Split [-1, 1]^3 into ``resolution``^3 cubes of 6 tetrahedra each.

    Each cube uses the Freudenthal split along its main diagonal, which is
    identical for every cell and therefore conforming across faces.
    """
    if resolution < 2:
        raise ValueError(f"resolution must be >= 2, got {resolution}")
    n = resolution + 1
    axis = np.linspace(-1.0, 1.0, n)
    gx, gy, gz = np.meshgrid(axis, axis, axis, indexing="ij")
    vertices = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)

    def vid(i, j, k):
        return (i * n + j) * n + k

    cells = np.stack(np.meshgrid(*(np.arange(resolution),) * 3, indexing="ij"), -1).reshape(-1, 3)
    tets = []
    for perm in itertools.permutations(range(3)):
        path = [np.zeros(3, dtype=int)]
        for ax in perm:
            step = path[-1].copy()
            step[ax] = 1
            path.append(step)
        corners = [cells + p for p in path]
        tets.append(np.stack([vid(c[:, 0], c[:, 1], c[:, 2]) for c in corners], axis=1))
    tets = np.stack(tets, axis=1).reshape(-1, 4)

    grid = TetGrid(vertices, tets, 2.0 / resolution, resolution)
    flip = grid.signed_volumes() < 0
    tets[flip] = tets[flip][:, [1, 0, 2, 3]]
    return TetGrid(vertices, tets, 2.0 / resolution, resolution)


# ---------------------------------------------------------------------------
# ellipsoid prior
# ---------------------------------------------------------------------------
def ellipsoid_sdf(p, radii) -> np.ndarray:
    """Scaled-sphere approximation: negative inside, zero on the surface."""
    radii = np.asarray(radii, dtype=np.float64)
    if np.any(radii <= 0):
        raise ValueError("ellipsoid radii must be positive")
    p = np.asarray(p, dtype=np.float64)
    return (np.linalg.norm(p / radii, axis=-1) - 1.0) * radii.min()


def sample_ellipsoid_surface(n: int, radii, seed: int) -> tuple[np.ndarray, np.ndarray]:
    if n < 1:
        raise ValueError("need at least one sample")
    rng = np.random.default_rng(seed)
    g = rng.normal(size=(n, 3))
    points = np.asarray(radii, dtype=np.float64) * (g / np.linalg.norm(g, axis=1, keepdims=True))
    return points, ellipsoid_sdf(points, radii)


def sphere_sdf(p, radius: float = 0.5, center=(0.0, 0.0, 0.0)) -> np.ndarray:
    return np.linalg.norm(np.asarray(p) - np.asarray(center), axis=-1) - radius


# ---------------------------------------------------------------------------
# neural SDF + deformation field
# ---------------------------------------------------------------------------
@dataclass
class GeometryField:
    """Hash-grid encoded MLP predicting an SDF value and a bounded offset per point.

    Input features are the raw coordinates concatenated with the hash-grid
    encoding; two hidden layers of width ``hidden``; 4 outputs.
    """

    grid: TetGrid
    encoding: nn.HashGridSpec = field(default_factory=nn.HashGridSpec)
    hidden: int = 32

    def __post_init__(self):
        self._grid_plan = nn.hash_plan(self.encoding, self.grid.vertices)

    def init_params(self, rng: np.random.Generator) -> nn.Params:
        sizes = [3 + self.encoding.out_dim, self.hidden, self.hidden, 4]
        params = {"table": nn.init_hash_table(self.encoding, rng)}
        params.update(nn.init_mlp(rng, sizes))
        # offsets start at exactly zero
        params["w2"][:, 1:] = 0.0
        return params

    @property
    def max_offset(self) -> float:
        return DEFORM_LIMIT * self.grid.cell_size

    def forward(self, leaves: dict[str, Tensor], points: np.ndarray | None = None,
                plan: nn.HashPlan | None = None) -> tuple[Tensor, Tensor]:
        """Return (sdf (N,), offsets (N, 3)); defaults to the grid vertices."""
        if points is None:
            points, plan = self.grid.vertices, self._grid_plan
        elif plan is None:
            plan = nn.hash_plan(self.encoding, points)
        feats = concat([Tensor(points), nn.hash_encode(leaves["table"], plan)], axis=1)
        out = nn.mlp_forward(feats, leaves, depth=3)
        sdf = reshape(out[:, 0], (-1,))
        offsets = tanh(out[:, 1:4]) * self.max_offset
        return sdf, offsets

    def sdf(self, params: nn.Params, points: np.ndarray) -> np.ndarray:
        with no_grad():
            s, _ = self.forward(nn.as_leaves(params, False), points)
        return s.data


def mse_loss(pred: Tensor, target: np.ndarray) -> Tensor:
    if pred.size == 0:
        raise ValueError("MSE over an empty sample set")
    diff = pred - Tensor(target)
    return (diff * diff).mean()


def init_geometry(field_: GeometryField, params: nn.Params, samples: tuple[np.ndarray, np.ndarray],
                  iters: int, lr: float, *, radii, seed: int = 0,
                  volume_samples: bool = True) -> tuple[nn.Params, list[float]]:
    """Fit the SDF head to an ellipsoid with the mean squared error.

    Surface samples are complemented by an equal number of uniform samples
    in the cube plus the lattice vertices themselves (where the field is
    actually queried), all with targets from :func:`ellipsoid_sdf`.
    """
    points, targets = samples
    if len(points) == 0:
        raise ValueError("no initialization samples")
    if volume_samples:
        rng = np.random.default_rng(seed + 7919)
        vol = np.concatenate([rng.uniform(-1.0, 1.0, size=points.shape), field_.grid.vertices])
        points = np.concatenate([points, vol])
        targets = np.concatenate([targets, ellipsoid_sdf(vol, radii)])
    plan = nn.hash_plan(field_.encoding, points)
    opt = nn.Adam(lr=lr)
    history = []
    for _ in range(iters):
        leaves = nn.as_leaves(params)
        s, _ = field_.forward(leaves, points, plan)
        loss = mse_loss(s, targets)
        value = loss.item()
        if not np.isfinite(value):
            raise GeometryError(f"ellipsoid initialization diverged at step {len(history)} (loss={value})")
        history.append(value)
        grads = backward(loss)
        params = opt.step(params, {k: grads[v] for k, v in leaves.items() if v in grads})
    return params, history


# ---------------------------------------------------------------------------
# marching tetrahedra
# ---------------------------------------------------------------------------
def _build_case_table() -> list[list[tuple[int, int, int]]]:
    """Triangles (as local edge ids) for each 4-bit inside pattern."""
    edge_id = {tuple(e): i for i, e in enumerate(TET_EDGES.tolist())}

    def e(a, b):
        return edge_id[(min(a, b), max(a, b))]

    table = []
    for code in range(16):
        inside = [k for k in range(4) if code >> k & 1]
        outside = [k for k in range(4) if not code >> k & 1]
        if len(inside) in (0, 4):
            table.append([])
        elif len(inside) in (1, 3):
            lone = inside[0] if len(inside) == 1 else outside[0]
            others = [k for k in range(4) if k != lone]
            table.append([tuple(e(lone, o) for o in others)])
        else:
            (a, b), (c, d) = inside, outside
            ring = [e(a, c), e(a, d), e(b, d), e(b, c)]
            table.append([(ring[0], ring[1], ring[2]), (ring[0], ring[2], ring[3])])
    return table


CASE_TABLE = _build_case_table()
_TRI_COUNT = np.array([len(c) for c in CASE_TABLE])
_TRI_TABLE = np.full((16, 2, 3), -1, dtype=np.int64)
for _code, _tris in enumerate(CASE_TABLE):
    for _k, _tri in enumerate(_tris):
        _TRI_TABLE[_code, _k] = _tri


@dataclass
class TriMesh:
    vertices: Tensor      # (V, 3), differentiable
    faces: np.ndarray     # (F, 3) int
    # crossing edge (grid vertex pair) that produced each mesh vertex
    source_edges: np.ndarray | None = None

    @property
    def num_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def num_faces(self) -> int:
        return len(self.faces)

    def edges(self) -> np.ndarray:
        e = np.concatenate([self.faces[:, [0, 1]], self.faces[:, [1, 2]], self.faces[:, [2, 0]]])
        return np.sort(e, axis=1)


def _tri_area(v: np.ndarray, faces: np.ndarray) -> np.ndarray:
    a, b, c = v[faces[:, 0]], v[faces[:, 1]], v[faces[:, 2]]
    return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)


def marching_tets(grid: TetGrid, s: Tensor, offsets: Tensor) -> TriMesh:
    """Extract the zero level set of per-vertex ``s`` over the deformed grid.

    A vertex is inside when ``s < 0``; zeros (up to ``ZERO_SNAP``) count as
    outside, and crossings that land on such a vertex are welded into one. Crossing
    points are linear interpolants along tet edges and stay differentiable
    in ``s`` and ``offsets``.
    """
    nv = len(grid.vertices)
    if s.shape != (nv,) or offsets.shape != (nv, 3):
        raise ValueError(f"expected s {(nv,)} and offsets {(nv, 3)}, got {s.shape}, {offsets.shape}")
    inside = s.data < -ZERO_SNAP
    code = inside[grid.tets].astype(np.int64) @ np.array([1, 2, 4, 8])
    active = (code > 0) & (code < 15)
    tets, code = grid.tets[active], code[active]
    if len(tets) == 0:
        return TriMesh(Tensor(np.zeros((0, 3))), np.zeros((0, 3), dtype=np.int64), np.zeros((0, 2), dtype=np.int64))

    edge_verts = np.sort(tets[:, TET_EDGES], axis=2)                      # (T, 6, 2)
    keys = edge_verts[..., 0] * nv + edge_verts[..., 1]
    crossing = inside[edge_verts[..., 0]] != inside[edge_verts[..., 1]]
    # a crossing whose outside end has s == 0 (up to round-off) lands on that
    # lattice vertex; all such crossings share one mesh vertex
    outer = np.where(inside[edge_verts[..., 0]], edge_verts[..., 1], edge_verts[..., 0])
    on_vertex = crossing & (np.abs(s.data[outer]) <= ZERO_SNAP)
    keys = np.where(on_vertex, nv * nv + outer, keys)
    uniq, first, inverse = np.unique(keys[crossing], return_index=True, return_inverse=True)
    local_to_vertex = np.full(keys.shape, -1, dtype=np.int64)
    local_to_vertex[crossing] = inverse
    pairs = edge_verts[crossing][first]

    # one or two triangles per active tet, in tet order
    counts = _TRI_COUNT[code]
    tet_idx = np.repeat(np.arange(len(tets)), counts)
    slot = np.arange(len(tet_idx)) - np.repeat(np.cumsum(counts) - counts, counts)
    local = _TRI_TABLE[code[tet_idx], slot]                               # (F, 3)
    faces = local_to_vertex[tet_idx[:, None], local]

    # differentiable crossing points
    a, b = pairs[:, 0], pairs[:, 1]
    deformed = Tensor(grid.vertices) + offsets
    sa, sb = s.take(a), s.take(b)
    va, vb = deformed.take(a), deformed.take(b)
    denom = sb - sa
    verts = (va * broadcast_to(reshape(sb, (-1, 1)), va.shape)
             - vb * broadcast_to(reshape(sa, (-1, 1)), vb.shape)) / broadcast_to(reshape(denom, (-1, 1)), va.shape)

    # orient faces from inside towards outside using the undeformed crossing points
    sd = s.data
    ta = sd[a] / (sd[a] - sd[b])
    rest = grid.vertices[a] + ta[:, None] * (grid.vertices[b] - grid.vertices[a])
    tv = grid.vertices[tets[tet_idx]]                                      # (F, 4, 3)
    tin = inside[tets[tet_idx]]
    c_in = (tv * tin[..., None]).sum(1) / tin.sum(1, keepdims=True)
    c_out = (tv * ~tin[..., None]).sum(1) / (~tin).sum(1, keepdims=True)
    p0, p1, p2 = rest[faces[:, 0]], rest[faces[:, 1]], rest[faces[:, 2]]
    normal = np.cross(p1 - p0, p2 - p0)
    flip = np.einsum("ij,ij->i", normal, c_out - c_in) < 0
    faces[flip] = faces[flip][:, [0, 2, 1]]

    # welded crossings collapse some faces to an edge or a point
    distinct = (faces[:, 0] != faces[:, 1]) & (faces[:, 1] != faces[:, 2]) & (faces[:, 0] != faces[:, 2])
    faces = faces[distinct]
    used, faces = np.unique(faces, return_inverse=True)
    faces = faces.reshape(-1, 3)
    return TriMesh(verts.take(used), faces, pairs[used])


def extract_surface(field_: GeometryField, leaves: dict[str, Tensor]) -> TriMesh:
    s, offsets = field_.forward(leaves)
    return marching_tets(field_.grid, s, offsets)


# ---------------------------------------------------------------------------
# normals
# ---------------------------------------------------------------------------
def face_and_vertex_normals(mesh: TriMesh) -> tuple[Tensor, Tensor]:
    """Unit face normals and area-weighted unit vertex normals."""
    v = mesh.vertices
    f = mesh.faces
    p0, p1, p2 = v.take(f[:, 0]), v.take(f[:, 1]), v.take(f[:, 2])
    scaled = cross_rows(p1 - p0, p2 - p0)            # length = 2 * area
    ok = np.linalg.norm(scaled.data, axis=1) > 2e-12
    if not ok.all():
        scaled, f = scaled.take(np.nonzero(ok)[0]), f[ok]
    face_n = normalize_rows(scaled)
    acc = scatter_add(concat([scaled, scaled, scaled], axis=0),
                      np.concatenate([f[:, 0], f[:, 1], f[:, 2]]), mesh.num_vertices)
    # vertices touched only by zero-area faces keep a zero normal
    return face_n, normalize_rows(acc, floor=1e-30)


# ---------------------------------------------------------------------------
# mesh checks and OBJ round trip
# ---------------------------------------------------------------------------
def euler_characteristic(mesh: TriMesh) -> int:
    edges = np.unique(mesh.edges(), axis=0)
    return mesh.num_vertices - len(edges) + mesh.num_faces


def is_watertight(mesh: TriMesh) -> bool:
    if mesh.num_faces == 0:
        return False
    _, counts = np.unique(mesh.edges(), axis=0, return_counts=True)
    return bool(np.all(counts == 2))


def write_obj(path: str | os.PathLike, vertices: np.ndarray, faces: np.ndarray) -> None:
    lines = [f"v {x:.9f} {y:.9f} {z:.9f}\n" for x, y, z in np.asarray(vertices)]
    lines += [f"f {i + 1} {j + 1} {k + 1}\n" for i, j, k in np.asarray(faces)]
    with open(path, "w") as fh:
        fh.writelines(lines)


def read_obj(path: str | os.PathLike) -> tuple[np.ndarray, np.ndarray]:
    verts, faces = [], []
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                faces.append([int(x.split("/")[0]) - 1 for x in parts[1:4]])
    return np.array(verts).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3)
