"""Two-stage optimization driver: ellipsoid init, geometry learning on normal
maps, appearance learning on shaded renders, plus checkpoints and export."""
from __future__ import annotations

import dataclasses
import json
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .cglora import CameraEncoder, CgLoraSpec, build_adapter_set, init_adapters
from .denoiser import (Denoiser, DenoiserConfig, NoiseSchedule, TextEncoder, add_noise,
                       direction_suffix)
from .geometry import (GeometryField, TriMesh, build_tet_grid, face_and_vertex_normals,
                       init_geometry, marching_tets, sample_ellipsoid_surface, write_obj)
from .losses import LossReport, ama_loss, sds_surrogate
from .material import MaterialField, perturb_normal, resolve_envmap, shade
from .render import (CameraPose, FrameBuffers, downsample, eta_resize, heatmap, rasterize,
                     write_ppm)
from .tensor import Tensor, backward, no_grad, normalize_rows, where

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    """Invalid run configuration."""


class NonFiniteLoss(FloatingPointError):
    """The objective became NaN or infinite; a state dump was written if possible."""


@dataclass
class RunConfig:
    prompt: str = "a wooden rocking chair"
    seed: int = 0
    grid_resolution: int = 16
    render_resolution: int = 64
    # frozen denoiser
    d: int = 32
    heads: int = 4
    layers: int = 3
    denoiser_resolution: int = 16
    denoiser_seed: int = 1234
    text_seed: int = 0
    t_max: int = 1000
    t_range: tuple[float, float] = (0.02, 0.98)
    # None means sqrt(d)
    score_divisor: float | None = None
    nu: float = 1e-6
    # treat the attention min/max as constants in the backward pass
    ama_stop_minmax: bool = False
    # adapters (full scale uses d_txt = d_cam = 1024)
    d_txt: int = 64
    d_cam: int = 64
    rank: int = 4
    gen_rank: int = 4
    batch_size: int = 4
    # schedule (full scale: 2000 geometry / 1000 appearance)
    init_iters: int = 500
    init_samples: int = 2048
    init_lr: float = 1e-2
    ellipsoid_radii: tuple[float, float, float] = (0.5, 0.8, 0.5)
    geometry_iters: int = 400
    appearance_iters: int = 200
    sds_weight: float = 1.0
    ama_weight: float = 0.1
    # AMA switches on after this fraction of each stage
    ama_start: float = 0.5
    ama_through_image: bool = True
    lr_geo: float = 1e-3
    lr_mat: float = 1e-3
    lr_lora: float = 1e-4  # 1e-3 lets AMA bias the adapters enough to erode geometry
    reset_lora_between_stages: bool = False
    # cameras, degrees
    pitch_range: tuple[float, float] = (-15.0, 45.0)
    yaw_range: tuple[float, float] = (-180.0, 180.0)
    fov_range: tuple[float, float] = (25.0, 45.0)
    camera_radius: float = 2.5
    env: str = "three-point"
    env_samples: int = 64
    outdir: str = "out"
    dump_interval: int = 100

    def validate(self) -> "RunConfig":
        problems = []
        if not self.prompt.strip():
            problems.append("prompt is empty")
        if self.render_resolution % self.denoiser_resolution:
            problems.append("render_resolution must be a multiple of denoiser_resolution")
        if self.rank % 2:
            problems.append("rank must be even")
        if self.d % self.heads:
            problems.append("d must be divisible by heads")
        if self.batch_size < 1 or self.grid_resolution < 2 or self.render_resolution < 8:
            problems.append("batch_size >= 1, grid_resolution >= 2, render_resolution >= 8 required")
        if min(self.geometry_iters, self.appearance_iters, self.init_iters) < 0:
            problems.append("iteration counts must be non-negative")
        lo, hi = self.pitch_range
        if not -90 < lo <= hi < 90:
            problems.append("pitch_range must lie within (-90, 90)")
        lo, hi = self.fov_range
        if not 0 < lo <= hi < 180:
            problems.append("fov_range must lie within (0, 180)")
        if problems:
            raise ConfigError("; ".join(problems))
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        names = {f.name: f for f in dataclasses.fields(cls)}
        unknown = set(data) - set(names)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kwargs = {}
        for k, v in data.items():
            kwargs[k] = tuple(v) if isinstance(v, list) else v
        return cls(**kwargs).validate()

    @classmethod
    def load(cls, path: str | os.PathLike) -> "RunConfig":
        try:
            with open(path) as fh:
                return cls.from_dict(json.load(fh))
        except (OSError, json.JSONDecodeError, TypeError) as exc:
            raise ConfigError(f"{path}: {exc}") from exc


# ---------------------------------------------------------------------------
# cameras
# ---------------------------------------------------------------------------
def sample_camera(rng: np.random.Generator, config: RunConfig) -> CameraPose:
    """Uniform yaw/pitch/fov within the configured ranges, on a look-at sphere."""
    yaw = math.radians(rng.uniform(*config.yaw_range))
    pitch = math.radians(rng.uniform(*config.pitch_range))
    fov = math.radians(rng.uniform(*config.fov_range))
    return CameraPose.orbit(yaw, pitch, fov, config.camera_radius)


# ---------------------------------------------------------------------------
# runtime objects derived from the config
# ---------------------------------------------------------------------------
class Runtime:
    def __init__(self, config: RunConfig):
        self.config = config
        self.grid = build_tet_grid(config.grid_resolution)
        self.geometry = GeometryField(self.grid)
        self.material = MaterialField()
        self.denoiser = Denoiser(DenoiserConfig(
            d=config.d, heads=config.heads, layers=config.layers, res=config.denoiser_resolution,
            d_txt=config.d_txt, seed=config.denoiser_seed, score_divisor=config.score_divisor,
            nu=config.nu, stop_minmax=config.ama_stop_minmax, t_max=config.t_max))
        self.text = TextEncoder(config.d_txt, config.text_seed)
        self.schedule = NoiseSchedule(config.t_max)
        self.lora = CgLoraSpec(config.d, config.d_txt, config.d_cam, config.rank, config.gen_rank)
        self.camera_encoder = CameraEncoder(config.d_cam)
        self.env = resolve_envmap(config.env, config.env_samples)
        g = self.grid.vertices
        self.boundary = np.any(np.abs(g) > 1.0 - 1e-9, axis=1)
        self._text_cache: dict[str, object] = {}

    def encode_prompt(self, yaw: float):
        prompt = self.config.prompt + direction_suffix(yaw)
        if prompt not in self._text_cache:
            self._text_cache[prompt] = self.text.encode(prompt)
        return self._text_cache[prompt]

    def extract(self, geo_leaves: dict[str, Tensor]) -> TriMesh:
        s, offsets = self.geometry.forward(geo_leaves)
        # pin the lattice boundary outside so the surface is always closed
        s = where(self.boundary, Tensor(np.ones(len(self.boundary))), s)
        return marching_tets(self.grid, s, offsets)


# ---------------------------------------------------------------------------
# state
# ---------------------------------------------------------------------------
STAGES = ("geometry", "appearance", "done")


@dataclass
class RunState:
    config: RunConfig
    stage: str
    stage_iter: int
    iteration: int
    geo: nn.Params
    mat: nn.Params
    lora: nn.Params
    opt_geo: nn.Adam
    opt_mat: nn.Adam
    opt_lora: nn.Adam
    rng: np.random.Generator
    reports: list[LossReport] = field(default_factory=list)
    init_losses: list[float] = field(default_factory=list)

    @property
    def finished(self) -> bool:
        return self.stage == "done"


def init_state(config: RunConfig, runtime: Runtime | None = None) -> RunState:
    """Fresh parameters and the ellipsoid-initialized geometry field."""
    config.validate()
    rt = runtime or Runtime(config)
    rng = np.random.default_rng(config.seed)
    geo = rt.geometry.init_params(rng)
    mat = rt.material.init_params(rng)
    lora = init_adapters(rt.lora, rng, config.layers)
    lora.update(rt.camera_encoder.init_params(rng))
    samples = sample_ellipsoid_surface(config.init_samples, config.ellipsoid_radii, config.seed)
    geo, history = init_geometry(rt.geometry, geo, samples, config.init_iters, config.init_lr,
                                 radii=config.ellipsoid_radii, seed=config.seed)
    return RunState(config, "geometry", 0, 0, geo, mat, lora,
                    nn.Adam(config.lr_geo), nn.Adam(config.lr_mat), nn.Adam(config.lr_lora),
                    rng, [], history)


# ---------------------------------------------------------------------------
# one optimization step
# ---------------------------------------------------------------------------
@dataclass
class FrameResult:
    camera: CameraPose
    buffers: FrameBuffers
    image: Tensor
    records: list
    sds: Tensor
    ama: Tensor
    ama_layers: list[float]


def _grad_norm(grads: dict[str, np.ndarray]) -> float:
    return float(math.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def appearance_image(rt: Runtime, mesh: TriMesh, normals: Tensor, camera: CameraPose,
                     mat_leaves: dict[str, Tensor], env=None) -> FrameBuffers:
    """Rasterize and shade one view; gradients reach only the material field."""
    res = rt.config.render_resolution
    fb = rasterize(mesh, camera, res, {"normal": normals})
    if fb.coverage.count == 0:
        fb.shaded = Tensor(np.zeros((res, res, 3)))
        return fb
    cov = fb.coverage
    points = cov.interpolate(mesh.vertices).data
    n_geom = normalize_rows(cov.interpolate(normals))
    material = rt.material.sample(mat_leaves, points)
    n = perturb_normal(n_geom, material.kn)
    rgb = shade(points, n, camera.position, material, env or rt.env)
    fb.shaded = cov.to_image(rgb)
    return fb


def _frame(rt: Runtime, state: RunState, mesh: TriMesh, normals: Tensor | None,
           lora_leaves: dict[str, Tensor], mat_leaves, ama_on: bool) -> FrameResult:
    cfg = rt.config
    rng = state.rng
    camera = sample_camera(rng, cfg)
    t = rt.schedule.sample_t(rng, *cfg.t_range)
    eps = rng.normal(size=(cfg.denoiser_resolution, cfg.denoiser_resolution, 3))

    if state.stage == "geometry":
        fb = rasterize(mesh, camera, cfg.render_resolution)
        full = fb.normal_map
    else:
        fb = appearance_image(rt, mesh, normals, camera, mat_leaves)
        full = fb.shaded
    image = downsample(full, cfg.render_resolution // cfg.denoiser_resolution)

    text = rt.encode_prompt(camera.yaw)
    noisy_src = image if (ama_on and cfg.ama_through_image) else image.detach()
    if ama_on:
        c = rt.camera_encoder(lora_leaves, camera)
        adapters = build_adapter_set(Tensor(text.pooled), c, lora_leaves, rt.lora, cfg.layers)
        x_t = add_noise(noisy_src, t, eps, rt.schedule)
        eps_hat, records = rt.denoiser.predict_noise(x_t, text, t, adapters)
    else:
        with no_grad():
            c = rt.camera_encoder(lora_leaves, camera)
            adapters = build_adapter_set(Tensor(text.pooled), c, lora_leaves, rt.lora, cfg.layers)
            x_t = add_noise(image.detach(), t, eps, rt.schedule)
            eps_hat, records = rt.denoiser.predict_noise(x_t, text, t, adapters)
    sds = sds_surrogate(image, eps_hat, eps, rt.schedule.weight(t))
    ama, layers = ama_loss(records, fb.mask, num_layers=cfg.layers)
    return FrameResult(camera, fb, image, records, sds, ama, layers)


def train_step(rt: Runtime, state: RunState) -> LossReport:
    cfg = rt.config
    stage = state.stage
    total = cfg.geometry_iters if stage == "geometry" else cfg.appearance_iters
    ama_on = cfg.ama_weight != 0 and state.stage_iter >= int(math.ceil(cfg.ama_start * total))

    lora_leaves = nn.as_leaves(state.lora)
    if stage == "geometry":
        own = nn.as_leaves(state.geo)
        mesh = rt.extract(own)
        normals, mat_leaves = None, None
    else:
        with no_grad():
            mesh = rt.extract(nn.as_leaves(state.geo, False))
            normals = face_and_vertex_normals(mesh)[1]
        mesh = TriMesh(mesh.vertices.detach(), mesh.faces, mesh.source_edges)
        own = mat_leaves = nn.as_leaves(state.mat)

    frames = [_frame(rt, state, mesh, normals, lora_leaves, mat_leaves, ama_on)
              for _ in range(cfg.batch_size)]
    inv_b = 1.0 / len(frames)
    sds = frames[0].sds
    for f in frames[1:]:
        sds = sds + f.sds
    sds = sds * inv_b
    ama = frames[0].ama
    for f in frames[1:]:
        ama = ama + f.ama
    ama = ama * inv_b
    objective = sds * cfg.sds_weight
    if ama_on:
        objective = objective + ama * cfg.ama_weight

    value = objective.item()
    if not math.isfinite(value) or not math.isfinite(ama.item()):
        raise NonFiniteLoss(f"non-finite objective at iteration {state.iteration} ({stage})")

    grads = backward(objective)
    own_grads = {k: grads[v] for k, v in own.items() if v in grads}
    lora_grads = {k: grads[v] for k, v in lora_leaves.items() if v in grads}
    for g in (*own_grads.values(), *lora_grads.values()):
        if not np.all(np.isfinite(g)):
            raise NonFiniteLoss(f"non-finite gradient at iteration {state.iteration} ({stage})")

    opt = state.opt_geo if stage == "geometry" else state.opt_mat
    updated = opt.step(state.geo if stage == "geometry" else state.mat, own_grads)
    lora = state.opt_lora.step(state.lora, lora_grads)
    for v in (*updated.values(), *lora.values()):
        if not np.all(np.isfinite(v)):
            raise NonFiniteLoss(f"non-finite parameters after iteration {state.iteration} ({stage})")
    if stage == "geometry":
        state.geo = updated
        norms = {"geo": _grad_norm(own_grads)}
    else:
        state.mat = updated
        norms = {"mat": _grad_norm(own_grads)}
    state.lora = lora
    norms["lora"] = _grad_norm(lora_grads)

    report = LossReport(state.iteration, stage, sds.item(), ama.item(),
                        list(np.mean([f.ama_layers for f in frames], axis=0)), norms)
    report.frames = frames  # kept for dumps; not serialized
    return report


def _dump_attention(outdir: Path, records, iteration: int) -> None:
    outdir.mkdir(parents=True, exist_ok=True)
    for r in records:
        write_ppm(outdir / f"att_L{r.layer}_iter{iteration}.ppm", heatmap(r.normalized.data))


def run(config: RunConfig, state: RunState | None = None, *, runtime: Runtime | None = None,
        max_iterations: int | None = None, outdir: str | os.PathLike | None = None,
        progress=None) -> RunState:
    """Advance through the geometry and appearance stages.

    Stops after ``max_iterations`` total iterations when given, so a run can
    be checkpointed mid-way and resumed later.
    """
    rt = runtime or Runtime(config)
    state = state or init_state(config, rt)
    dump_dir = Path(outdir) if outdir is not None else None
    while not state.finished:
        if max_iterations is not None and state.iteration >= max_iterations:
            break
        total = config.geometry_iters if state.stage == "geometry" else config.appearance_iters
        if state.stage_iter >= total:
            _advance_stage(state)
            continue
        try:
            report = train_step(rt, state)
        except NonFiniteLoss:
            if dump_dir is not None:
                save_checkpoint(state, dump_dir / "nan_dump" / "checkpoint")
            raise
        frames = report.__dict__.pop("frames")
        state.reports.append(report)
        if dump_dir is not None and config.dump_interval and state.iteration % config.dump_interval == 0:
            _dump_attention(dump_dir / "attention", frames[0].records, state.iteration)
        state.iteration += 1
        state.stage_iter += 1
        if progress is not None:
            progress(report)
    return state


def _advance_stage(state: RunState) -> None:
    if state.stage == "geometry":
        state.stage = "appearance"
        if state.config.reset_lora_between_stages:
            rt_rng = np.random.default_rng(state.config.seed + 1)
            spec = CgLoraSpec(state.config.d, state.config.d_txt, state.config.d_cam,
                              state.config.rank, state.config.gen_rank)
            state.lora = init_adapters(spec, rt_rng, state.config.layers)
            state.lora.update(CameraEncoder(state.config.d_cam).init_params(rt_rng))
            state.opt_lora = nn.Adam(state.config.lr_lora)
    else:
        state.stage = "done"
    state.stage_iter = 0


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------
def params_checksum(params: nn.Params) -> str:
    import hashlib
    h = hashlib.sha256()
    for k in sorted(params):
        h.update(k.encode())
        h.update(np.ascontiguousarray(params[k]).tobytes())
    return h.hexdigest()


def _checkpoint_paths(path: str | os.PathLike) -> tuple[Path, Path]:
    """An existing directory holds ``checkpoint.{bin,json}``; anything else is a file stem."""
    p = Path(path)
    if p.is_dir():
        p = p / "checkpoint"
    elif p.suffix in (".bin", ".json"):
        p = p.with_suffix("")
    return p.with_name(p.name + ".bin"), p.with_name(p.name + ".json")


def write_arrays(bin_path: Path, arrays: dict[str, np.ndarray]) -> list[dict]:
    """Concatenate named float64 arrays into one file; return the manifest entries."""
    entries, offset = [], 0
    with open(bin_path, "wb") as fh:
        for name in sorted(arrays):
            data = np.ascontiguousarray(arrays[name], dtype="<f8")
            fh.write(data.tobytes())
            entries.append({"name": name, "shape": list(data.shape), "offset": offset})
            offset += data.nbytes
    return entries


def read_arrays(bin_path: Path, entries: list[dict]) -> dict[str, np.ndarray]:
    raw = Path(bin_path).read_bytes()
    out = {}
    for e in entries:
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        out[e["name"]] = np.frombuffer(raw, dtype="<f8", count=n, offset=e["offset"]).reshape(e["shape"]).copy()
    return out


def save_checkpoint(state: RunState, path: str | os.PathLike) -> Path:
    bin_path, json_path = _checkpoint_paths(path)
    bin_path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {}
    arrays.update({f"geo.{k}": v for k, v in state.geo.items()})
    arrays.update({f"mat.{k}": v for k, v in state.mat.items()})
    arrays.update({f"lora.{k}": v for k, v in state.lora.items()})
    arrays.update(state.opt_geo.state_arrays("opt_geo"))
    arrays.update(state.opt_mat.state_arrays("opt_mat"))
    arrays.update(state.opt_lora.state_arrays("opt_lora"))
    manifest = {
        "format": "meshdream-checkpoint-1",
        "binary": bin_path.name,
        "arrays": write_arrays(bin_path, arrays),
        "config": state.config.to_dict(),
        "stage": state.stage,
        "stage_iter": state.stage_iter,
        "iteration": state.iteration,
        "adam_steps": {"geo": state.opt_geo.t, "mat": state.opt_mat.t, "lora": state.opt_lora.t},
        "rng": state.rng.bit_generator.state,
        "losses": [r.csv_row() for r in state.reports],
        "init_losses": state.init_losses,
    }
    with open(json_path, "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    return json_path


def load_checkpoint(path: str | os.PathLike) -> RunState:
    bin_path, json_path = _checkpoint_paths(path)
    try:
        with open(json_path) as fh:
            manifest = json.load(fh)
        arrays = read_arrays(json_path.parent / manifest["binary"], manifest["arrays"])
    except (OSError, KeyError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read checkpoint {json_path}: {exc}") from exc
    config = RunConfig.from_dict(manifest["config"])

    def group(prefix):
        return {k[len(prefix) + 1:]: v for k, v in arrays.items() if k.startswith(prefix + ".")}

    steps = manifest["adam_steps"]
    opts = {}
    for name, lr in (("geo", config.lr_geo), ("mat", config.lr_mat), ("lora", config.lr_lora)):
        opt = nn.Adam(lr)
        opt.load_arrays(f"opt_{name}", {k: v for k, v in arrays.items() if k.startswith(f"opt_{name}.")},
                        steps[name])
        opts[name] = opt
    rng = np.random.default_rng()
    rng.bit_generator.state = manifest["rng"]
    reports = [_parse_row(row) for row in manifest["losses"]]
    return RunState(config, manifest["stage"], manifest["stage_iter"], manifest["iteration"],
                    group("geo"), group("mat"), group("lora"), opts["geo"], opts["mat"], opts["lora"],
                    rng, reports, list(manifest.get("init_losses", [])))


def _parse_row(row: str) -> LossReport:
    it, stage, sds, ama, g_geo, g_mat, g_lora = row.split(",")
    norms = {"geo": float(g_geo), "mat": float(g_mat), "lora": float(g_lora)}
    return LossReport(int(it), stage, float(sds), float(ama), [], norms)


# ---------------------------------------------------------------------------
# export
# ---------------------------------------------------------------------------
TURNTABLE_PITCH = math.radians(15.0)
TURNTABLE_FOV = math.radians(35.0)


def current_mesh(rt: Runtime, state: RunState) -> TriMesh:
    with no_grad():
        return rt.extract(nn.as_leaves(state.geo, False))


def render_view(rt: Runtime, state: RunState, yaw: float, env=None, mesh: TriMesh | None = None) -> FrameBuffers:
    """Shaded view when the appearance stage has started, normal map otherwise."""
    cam = CameraPose.orbit(yaw, TURNTABLE_PITCH, TURNTABLE_FOV, rt.config.camera_radius)
    mesh = mesh or current_mesh(rt, state)
    with no_grad():
        normals = face_and_vertex_normals(mesh)[1]
        if state.stage == "geometry":
            return rasterize(mesh, cam, rt.config.render_resolution, {"normal": normals})
        return appearance_image(rt, mesh, normals, cam, nn.as_leaves(state.mat, False), env)


def write_losses(path: Path, reports: list[LossReport]) -> None:
    with open(path, "w") as fh:
        fh.write(LossReport.CSV_HEADER + "\n")
        for r in reports:
            fh.write(r.csv_row() + "\n")


def export(state: RunState, outdir: str | os.PathLike, runtime: Runtime | None = None) -> list[Path]:
    """Write mesh, turntable, attention maps, loss log, config and checkpoint."""
    rt = runtime or Runtime(state.config)
    out = Path(outdir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    written = []
    mesh = current_mesh(rt, state)
    write_obj(out / "mesh.obj", mesh.vertices.data, mesh.faces)
    written.append(out / "mesh.obj")
    for k in range(8):
        fb = render_view(rt, state, math.radians(45.0 * k), mesh=mesh)
        path = out / f"view_{k}.ppm"
        if fb.shaded is not None:
            write_ppm(path, fb.shaded.data, srgb=True)
        else:
            write_ppm(path, fb.normal_map.data)
        written.append(path)
    written += export_attention(rt, state, out / "attention", mesh)
    write_losses(out / "losses.csv", state.reports)
    written.append(out / "losses.csv")
    with open(out / "config.json", "w") as fh:
        json.dump(state.config.to_dict(), fh, indent=1, sort_keys=True)
    written.append(out / "config.json")
    written.append(save_checkpoint(state, out / "checkpoint"))
    written.append(out / "checkpoint.bin")
    return written


def export_attention(rt: Runtime, state: RunState, outdir: Path, mesh: TriMesh) -> list[Path]:
    """Attention maps of the front turntable view at a mid-range timestep (no noise)."""
    fb = render_view(rt, state, 0.0, mesh=mesh)
    img = fb.shaded if fb.shaded is not None else fb.normal_map
    factor = rt.config.render_resolution // rt.config.denoiser_resolution
    cam = CameraPose.orbit(0.0, TURNTABLE_PITCH, TURNTABLE_FOV, rt.config.camera_radius)
    with no_grad():
        leaves = nn.as_leaves(state.lora, False)
        text = rt.encode_prompt(0.0)
        c = rt.camera_encoder(leaves, cam)
        adapters = build_adapter_set(Tensor(text.pooled), c, leaves, rt.lora, rt.config.layers)
        x = downsample(img, factor)
        _, records = rt.denoiser.predict_noise(x, text, rt.config.t_max // 2, adapters)
    _dump_attention(outdir, records, state.iteration)
    return [outdir / f"att_L{r.layer}_iter{state.iteration}.ppm" for r in records]
