"""A small two-stage run: checkpoint half way, resume, and confirm the
resumed trajectory matches an uninterrupted run.

    python demos/04_short_run_with_resume.py [outdir]
"""
import sys
from pathlib import Path

from meshdream.pipeline import RunConfig, export, load_checkpoint, run, save_checkpoint

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out") / "short_run"
config = RunConfig(prompt="a small blue teapot", grid_resolution=12, render_resolution=32,
                   init_iters=300, geometry_iters=40, appearance_iters=20, batch_size=2, dump_interval=20)


def show(report):
    if report.iteration % 10 == 0:
        print(f"  iter {report.iteration:3d} {report.stage:10s} sds {report.sds:.4f} ama {report.ama:.3f}")


print("uninterrupted run")
full = run(config, progress=show, outdir=out / "full")
export(full, out / "full")

print("interrupted at iteration 30, then resumed")
half = run(config, max_iterations=30)
save_checkpoint(half, out / "half")
resumed = run(config, load_checkpoint(out / "half"), outdir=out / "resumed")
export(resumed, out / "resumed")

same = all((out / "full" / f).read_bytes() == (out / "resumed" / f).read_bytes()
           for f in ("losses.csv", "mesh.obj", "checkpoint.bin"))
print(f"resumed run byte-identical to uninterrupted run: {same}")
print(f"outputs in {out}")
