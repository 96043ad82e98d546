"""Pinhole camera, hard-visibility triangle rasterizer with differentiable
barycentric interpolation, mask pooling and PPM dumps."""
from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np

from .geometry import TriMesh, face_and_vertex_normals
from .tensor import Tensor, broadcast_to, concat, matmul, reshape, scatter_add

NEAR, FAR = 0.1, 100.0


@dataclass(frozen=True)
class CameraPose:
    """Camera position, yaw/pitch (radians) and vertical field of view. Roll is 0, aspect 1."""

    x: float
    y: float
    z: float
    yaw: float
    pitch: float
    fov: float

    def __post_init__(self):
        if not 0.0 < self.fov < math.pi:
            raise ValueError(f"fov must lie in (0, pi), got {self.fov}")
        if not -math.pi / 2 < self.pitch < math.pi / 2:
            raise ValueError(f"pitch must lie in (-pi/2, pi/2), got {self.pitch}")

    @property
    def position(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z])

    @property
    def forward(self) -> np.ndarray:
        cp = math.cos(self.pitch)
        return np.array([-cp * math.sin(self.yaw), -math.sin(self.pitch), -cp * math.cos(self.yaw)])

    @classmethod
    def orbit(cls, yaw: float, pitch: float, fov: float, radius: float = 2.5) -> "CameraPose":
        """Camera on a sphere of ``radius`` looking at the origin."""
        cp = math.cos(pitch)
        pos = radius * np.array([cp * math.sin(yaw), math.sin(pitch), cp * math.cos(yaw)])
        return cls(float(pos[0]), float(pos[1]), float(pos[2]), yaw, pitch, fov)

    def as_vector(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z, self.yaw, self.pitch, self.fov])


def view_matrix(camera: CameraPose) -> np.ndarray:
    f = camera.forward
    right = np.cross(f, [0.0, 1.0, 0.0])
    right /= np.linalg.norm(right)
    up = np.cross(right, f)
    m = np.eye(4)
    m[0, :3], m[1, :3], m[2, :3] = right, up, -f
    m[:3, 3] = -m[:3, :3] @ camera.position
    return m


def perspective(fov: float, aspect: float = 1.0, near: float = NEAR, far: float = FAR) -> np.ndarray:
    f = 1.0 / math.tan(fov / 2)
    return np.array([
        [f / aspect, 0.0, 0.0, 0.0],
        [0.0, f, 0.0, 0.0],
        [0.0, 0.0, (far + near) / (near - far), 2 * far * near / (near - far)],
        [0.0, 0.0, -1.0, 0.0],
    ])


def view_projection(camera: CameraPose) -> np.ndarray:
    return perspective(camera.fov) @ view_matrix(camera)


def project_points(points: np.ndarray, camera: CameraPose, res: int) -> tuple[np.ndarray, np.ndarray]:
    """Continuous pixel coordinates (col, row) and clip-space w for world points."""
    clip = np.c_[points, np.ones(len(points))] @ view_projection(camera).T
    w = clip[:, 3]
    col = (clip[:, 0] / w + 1.0) * 0.5 * res
    row = (1.0 - clip[:, 1] / w) * 0.5 * res
    return np.stack([col, row], axis=1), w


# ---------------------------------------------------------------------------
# rasterization
# ---------------------------------------------------------------------------
@dataclass
class Coverage:
    """Visible face per covered pixel plus differentiable barycentrics."""

    res: int
    pixels: np.ndarray         # (P,) flat pixel index, ascending
    faces: np.ndarray          # (P,) winning face index into mesh.faces
    corner_ids: np.ndarray     # (P, 3) mesh vertex ids of the winning face
    bary: Tensor | None        # (P, 3)

    @property
    def count(self) -> int:
        return len(self.pixels)

    def interpolate(self, attr: Tensor) -> Tensor:
        """Barycentric blend of per-vertex ``attr`` (V, C) at covered pixels, shape (P, C)."""
        c = attr.shape[1]
        out = None
        for k in range(3):
            term = attr.take(self.corner_ids[:, k]) * broadcast_to(
                reshape(self.bary[:, k], (-1, 1)), (self.count, c))
            out = term if out is None else out + term
        return out

    def to_image(self, values: Tensor, background: float = 0.0) -> Tensor:
        """Scatter per-pixel (P, C) values into a (res, res, C) image."""
        c = values.shape[1]
        img = scatter_add(values, self.pixels, self.res * self.res)
        if background:
            fill = np.full((self.res * self.res, c), background)
            fill[self.pixels] = 0.0
            img = img + Tensor(fill)
        return reshape(img, (self.res, self.res, c))


@dataclass
class FrameBuffers:
    mask: np.ndarray                 # (res, res) in {0, 1}
    depth: np.ndarray                # (res, res), inf where empty
    normal_map: Tensor               # (res, res, 3), (n + 1) / 2, background 0
    coverage: Coverage
    attributes: dict[str, Tensor] = field(default_factory=dict)
    shaded: Tensor | None = None     # (res, res, 3) linear radiance


def _candidates(screen: np.ndarray, w: np.ndarray, faces: np.ndarray, res: int):
    """(pixel, face, barycentrics, depth) for every pixel centre inside a triangle."""
    tri = screen[faces]                                   # (F, 3, 2)
    front = (w[faces] > NEAR).all(axis=1)
    lo = np.floor(tri.min(axis=1) - 0.5).astype(np.int64) + 1
    hi = np.floor(tri.max(axis=1) - 0.5).astype(np.int64)
    lo = np.clip(lo, 0, res - 1)
    hi = np.clip(hi, -1, res - 1)
    span = np.maximum(hi - lo + 1, 0)
    n_pix = span[:, 0] * span[:, 1] * front
    fid = np.repeat(np.arange(len(faces)), n_pix)
    if len(fid) == 0:
        return (np.zeros(0, dtype=np.int64),) * 2 + (np.zeros((0, 3)), np.zeros(0))
    local = np.arange(len(fid)) - np.repeat(np.cumsum(n_pix) - n_pix, n_pix)
    width = span[fid, 0]
    col = lo[fid, 0] + local % width
    row = lo[fid, 1] + local // width
    px, py = col + 0.5, row + 0.5
    t = tri[fid]
    x0, y0, x1, y1, x2, y2 = t[:, 0, 0], t[:, 0, 1], t[:, 1, 0], t[:, 1, 1], t[:, 2, 0], t[:, 2, 1]
    area = (x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0)
    ok = np.abs(area) > 1e-14
    area = np.where(ok, area, 1.0)
    b1 = ((px - x0) * (y2 - y0) - (x2 - x0) * (py - y0)) / area
    b2 = ((x1 - x0) * (py - y0) - (px - x0) * (y1 - y0)) / area
    b0 = 1.0 - b1 - b2
    inside = ok & (b0 >= 0) & (b1 >= 0) & (b2 >= 0)
    bary = np.stack([b0, b1, b2], axis=1)[inside]
    fid = fid[inside]
    depth = (bary * w[faces[fid]]).sum(axis=1)
    return row[inside] * res + col[inside], fid, bary, depth


def rasterize(mesh: TriMesh, camera: CameraPose, res: int,
              attributes: dict[str, Tensor] | None = None) -> FrameBuffers:
    """Z-buffered rasterization of ``mesh``.

    Visibility is decided on detached values (closest depth wins, ties go to
    the lowest face index); barycentric weights are then rebuilt as tensor
    ops of the projected vertices so gradients reach vertex positions and
    attributes.
    """
    if res < 8:
        raise ValueError("render resolution must be at least 8")
    attributes = dict(attributes or {})
    empty_cov = Coverage(res, np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64),
                         np.zeros((0, 3), dtype=np.int64), None)
    if mesh.num_faces == 0:
        zeros = Tensor(np.zeros((res, res, 3)))
        return FrameBuffers(np.zeros((res, res)), np.full((res, res), np.inf), zeros, empty_cov,
                            {k: Tensor(np.zeros((res, res, v.shape[1]))) for k, v in attributes.items()})

    verts = mesh.vertices
    screen_np, w = project_points(verts.data, camera, res)
    pix, fid, _, depth = _candidates(screen_np, w, mesh.faces, res)
    order = np.lexsort((fid, depth, pix))
    pix, fid, depth = pix[order], fid[order], depth[order]
    first = np.ones(len(pix), dtype=bool)
    first[1:] = pix[1:] != pix[:-1]
    pix, fid, depth = pix[first], fid[first], depth[first]

    mask = np.zeros(res * res)
    mask[pix] = 1.0
    zbuf = np.full(res * res, np.inf)
    zbuf[pix] = depth

    corner_ids = mesh.faces[fid]
    cov = Coverage(res, pix, fid, corner_ids, None)
    if len(pix):
        vp = Tensor(view_projection(camera).T)
        clip = matmul(concat([verts, Tensor(np.ones((verts.shape[0], 1)))], axis=1), vp)
        wt = clip[:, 3]
        sx = (clip[:, 0] / wt + 1.0) * (0.5 * res)
        sy = (1.0 - clip[:, 1] / wt) * (0.5 * res)
        px = Tensor((pix % res) + 0.5)
        py = Tensor((pix // res) + 0.5)
        x0, x1, x2 = (sx.take(corner_ids[:, k]) for k in range(3))
        y0, y1, y2 = (sy.take(corner_ids[:, k]) for k in range(3))
        area = (x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0)
        b1 = ((px - x0) * (y2 - y0) - (x2 - x0) * (py - y0)) / area
        b2 = ((x1 - x0) * (py - y0) - (px - x0) * (y1 - y0)) / area
        b0 = 1.0 - b1 - b2
        cov.bary = concat([reshape(b, (-1, 1)) for b in (b0, b1, b2)], axis=1)

    if "normal" not in attributes:
        attributes["normal"] = face_and_vertex_normals(mesh)[1]
    if len(pix):
        images = {k: cov.to_image(cov.interpolate(v)) for k, v in attributes.items()}
        normals = cov.interpolate(attributes["normal"])
        normal_map = cov.to_image((normals + 1.0) * 0.5)
    else:
        images = {k: Tensor(np.zeros((res, res, v.shape[1]))) for k, v in attributes.items()}
        normal_map = Tensor(np.zeros((res, res, 3)))
    return FrameBuffers(mask.reshape(res, res), zbuf.reshape(res, res), normal_map, cov, images)


# ---------------------------------------------------------------------------
# resizing and image I/O
# ---------------------------------------------------------------------------
def eta_resize(mask: np.ndarray, h: int, w: int | None = None) -> np.ndarray:
    """Average-pool a square mask to (h, w). Returns a constant array."""
    w = h if w is None else w
    mask = np.asarray(mask, dtype=np.float64)
    H, W = mask.shape
    if H % h or W % w:
        raise ValueError(f"target {h}x{w} does not divide source {H}x{W}")
    return mask.reshape(h, H // h, w, W // w).mean(axis=(1, 3))


def downsample(img: Tensor, factor: int) -> Tensor:
    """Differentiable box filter of an (H, W, C) image by an integer factor."""
    if factor == 1:
        return img
    H, W, C = img.shape
    if H % factor or W % factor:
        raise ValueError(f"factor {factor} does not divide {H}x{W}")
    x = reshape(img, (H // factor, factor, W // factor, factor * C))
    x = x.sum(axis=1)                                    # (h, w, f*C)
    x = reshape(x, (H // factor, W // factor, factor, C)).sum(axis=2)
    return x * (1.0 / (factor * factor))


def linear_to_srgb(x: np.ndarray) -> np.ndarray:
    x = np.clip(x, 0.0, 1.0)
    return np.where(x <= 0.0031308, 12.92 * x, 1.055 * np.power(x, 1 / 2.4) - 0.055)


def write_ppm(path: str | os.PathLike, image: np.ndarray, srgb: bool = False) -> None:
    """Write an (H, W, 3) or (H, W) float image in [0, 1] as binary P6."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=2)
    if srgb:
        img = linear_to_srgb(img)
    data = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w, _ = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_ppm(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    header = raw.split(maxsplit=4)
    if header[0] != b"P6":
        raise ValueError(f"{path}: not a binary PPM")
    w, h = int(header[1]), int(header[2])
    pixels = np.frombuffer(header[4][: w * h * 3], dtype=np.uint8)
    return pixels.reshape(h, w, 3)


def heatmap(values: np.ndarray) -> np.ndarray:
    """Map [0, 1] scalars to a blue-red ramp for attention dumps."""
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    return np.stack([v, 1.0 - np.abs(2.0 * v - 1.0), 1.0 - v], axis=-1)
