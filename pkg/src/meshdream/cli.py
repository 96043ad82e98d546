"""Command-line entry point: generate, resume, render, selftest.

Exit codes: 0 success, 2 non-finite loss (training state dumped; a diverged
initialization has nothing worth dumping), 1 configuration or I/O error.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import math
import sys
import typing
from pathlib import Path

from .geometry import GeometryError
from .pipeline import (ConfigError, NonFiniteLoss, RunConfig, Runtime, export, load_checkpoint,
                       render_view, run)
from .render import write_ppm

log = logging.getLogger("meshdream")

EXIT_OK, EXIT_CONFIG, EXIT_NAN = 0, 1, 2


def _parse_bool(text: str) -> bool:
    lowered = text.lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {text!r}")


def _optional_float(text: str) -> float | None:
    return None if text.lower() == "none" else float(text)


def add_config_overrides(parser: argparse.ArgumentParser) -> None:
    """One ``--field-name`` flag per RunConfig field."""
    hints = typing.get_type_hints(RunConfig)
    group = parser.add_argument_group("config overrides")
    for f in dataclasses.fields(RunConfig):
        if f.name == "seed":     # already a top-level flag
            continue
        flag = "--" + f.name.replace("_", "-")
        hint = hints[f.name]
        origin = typing.get_origin(hint)
        kwargs: dict = {"dest": f"cfg_{f.name}", "default": None}
        if origin is tuple:
            args = typing.get_args(hint)
            kwargs.update(type=args[0], nargs=len(args), metavar=f.name.upper())
        elif hint is bool:
            kwargs.update(type=_parse_bool, metavar="BOOL")
        elif hint in (int, float, str):
            kwargs.update(type=hint)
        else:
            kwargs.update(type=_optional_float)
        group.add_argument(flag, **kwargs)


def config_from_args(args: argparse.Namespace, base: RunConfig | None = None) -> RunConfig:
    data = (base or RunConfig()).to_dict()
    if getattr(args, "config", None):
        data.update(RunConfig.load(args.config).to_dict())
    for key, value in vars(args).items():
        if key.startswith("cfg_") and value is not None:
            data[key[4:]] = list(value) if isinstance(value, list) else value
    if getattr(args, "seed", None) is not None:
        data["seed"] = args.seed
    if getattr(args, "out", None) is not None:
        data["outdir"] = args.out
    return RunConfig.from_dict(data)


def _progress(report) -> None:
    if report.iteration % 50 == 0:
        log.info("iter %d %s sds=%.4g ama=%.4g", report.iteration, report.stage, report.sds, report.ama)


def _finish(config: RunConfig, state, runtime) -> int:
    files = export(state, config.outdir, runtime)
    log.info("wrote %d files to %s", len(files), config.outdir)
    return EXIT_OK


def cmd_generate(args) -> int:
    config = config_from_args(args)
    rt = Runtime(config)
    state = run(config, runtime=rt, outdir=config.outdir, progress=_progress)
    return _finish(config, state, rt)


def cmd_resume(args) -> int:
    state = load_checkpoint(args.checkpoint)
    config = state.config
    if args.out is not None:
        config = dataclasses.replace(config, outdir=args.out)
        state.config = config
    rt = Runtime(config)
    state = run(config, state, runtime=rt, outdir=config.outdir, progress=_progress)
    return _finish(config, state, rt)


def cmd_render(args) -> int:
    state = load_checkpoint(args.checkpoint)
    config = dataclasses.replace(state.config, env=args.env)
    rt = Runtime(config.validate())
    fb = render_view(rt, state, math.radians(args.yaw), env=rt.env)
    out = Path(args.out) if args.out else Path(args.checkpoint).parent / f"render_{args.env}_{args.yaw:g}.ppm"
    if fb.shaded is not None:
        write_ppm(out, fb.shaded.data, srgb=True)
    else:
        write_ppm(out, fb.normal_map.data)
    log.info("wrote %s", out)
    return EXIT_OK


def cmd_selftest(args) -> int:
    from .selftest import run_all
    return EXIT_OK if run_all(print) else EXIT_CONFIG


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="meshdream", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate", help="run both stages and export")
    gen.add_argument("--config", help="JSON config file")
    gen.add_argument("--seed", type=int)
    gen.add_argument("--out", help="output directory")
    add_config_overrides(gen)
    gen.set_defaults(func=cmd_generate)

    res = sub.add_parser("resume", help="continue from a checkpoint")
    res.add_argument("--checkpoint", required=True)
    res.add_argument("--out")
    res.set_defaults(func=cmd_resume)

    ren = sub.add_parser("render", help="render one view from a checkpoint")
    ren.add_argument("--checkpoint", required=True)
    ren.add_argument("--env", default="three-point", help="preset name or env-map file")
    ren.add_argument("--yaw", type=float, default=0.0, help="degrees")
    ren.add_argument("--out")
    ren.set_defaults(func=cmd_render)

    st = sub.add_parser("selftest", help="run the built-in oracle checks")
    st.set_defaults(func=cmd_selftest)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (NonFiniteLoss, GeometryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NAN
    except (ConfigError, OSError, ValueError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
