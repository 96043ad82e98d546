"""Look inside the frozen denoiser: cross-attention maps and camera-guided adapters.

With the adapter output matrix at zero the adapted network is the frozen
one, bit for bit. Once that matrix is nonzero, the camera branch makes the
prediction depend on the viewpoint.

    python demos/03_adapters_and_attention.py [outdir]
"""
import math
import sys
from pathlib import Path

import numpy as np

from meshdream.cglora import CameraEncoder, CgLoraSpec, build_adapter_set, init_adapters
from meshdream.denoiser import Denoiser, DenoiserConfig, NoiseSchedule, TextEncoder, add_noise
from meshdream.nn import as_leaves
from meshdream.render import CameraPose, eta_resize, heatmap, write_ppm
from meshdream.tensor import Tensor

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out")
out.mkdir(parents=True, exist_ok=True)

cfg = DenoiserConfig(d=32, heads=4, layers=3, res=16, d_txt=64)
net = Denoiser(cfg)
text = TextEncoder(64).encode("a wooden rocking chair, front view")
rng = np.random.default_rng(0)

# a bright disc on a dark background, noised to t = 400
yy, xx = np.mgrid[:16, :16]
disc = ((yy - 7.5) ** 2 + (xx - 7.5) ** 2 < 25).astype(float)
image = np.repeat(disc[..., None], 3, axis=2) * 0.8 + 0.1
x_t = add_noise(image, 400, rng.normal(size=image.shape), NoiseSchedule())
eps_hat, records = net.predict_noise(Tensor(x_t), text, 400)
for rec in records:
    a = rec.normalized.data
    inside = a[eta_resize(disc, a.shape[0]) > 0.5].mean()
    print(f"layer {rec.layer}: {a.shape[0]}x{a.shape[1]} map, mean inside disc {inside:.3f}, overall {a.mean():.3f}")
    write_ppm(out / f"attention_L{rec.layer}.ppm", heatmap(a))

spec = CgLoraSpec(cfg.d, 64, 64)
params = init_adapters(spec, rng, cfg.layers)
enc = CameraEncoder(64)
params.update(enc.init_params(rng))
print(f"adapter parameters per projection: {spec.param_count()}")


def predict(p, yaw):
    leaves = as_leaves(p, False)
    cam = CameraPose.orbit(yaw, 0.2, math.radians(35))
    adapters = build_adapter_set(Tensor(text.pooled), enc(leaves, cam), leaves, spec, cfg.layers)
    return net.predict_noise(Tensor(x_t), text, 400, adapters)[0].data


print("zero B, identical to frozen net:", predict(params, 0.0).tobytes() == eps_hat.data.tobytes())
for k in params:
    if k.endswith(".B"):
        params[k] = rng.normal(size=params[k].shape) * 0.05
front, side = predict(params, 0.0), predict(params, math.pi / 2)
print(f"nonzero B, front vs side max difference {np.abs(front - side).max():.2e}")
