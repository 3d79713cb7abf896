"""Command-line entry point: ``mifnet <subcommand> ...``.

Failures print a single ``error[<category>]: <message>`` line on stderr and
exit with the category's code (usage errors exit 2 as ``error[usage]``).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .bundle import ModelBundle
from .codec import ProxyCodecConfig, proxy_encode
from .datasets import if_samples, mif_samples, rfs_batches
from .exceptions import ConfigurationError, FormatError, MifError, ValidationError
from .experiment import ExperimentManifest, run_experiment
from .filters import FilterModels, Mode, enhance_sequence, read_decisions, write_decisions
from .frames import (
    Role,
    rasterize_partition,
    read_partition_sidecar,
    read_yuv_sequence,
    write_partition_sidecar,
    write_yuv_sequence,
)
from .metrics import bd_psnr, bd_rate, psnr, read_rd_csv
from .rfs import RfsConfig
from .synthetic import natural_image, panning_clip, ranking_task
from .training import RfsBatch, TrainConfig, train_if, train_mif, train_rfs

log = logging.getLogger("mifnet")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        print(f"error[usage]: {message}", file=sys.stderr)
        raise SystemExit(2)


def read_key_values(path) -> dict:
    """``key = value`` lines with ``#`` comments, values left as strings."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


def _typed(cls, raw: dict, source) -> dict:
    """Coerce string values using the types of the dataclass defaults."""
    fields = {f.name: f.default for f in dataclasses.fields(cls)}
    values = {}
    for key, text in raw.items():
        if key not in fields:
            raise ConfigurationError(f"{source}: unknown key {key!r}")
        default = fields[key]
        try:
            if isinstance(default, tuple):
                values[key] = tuple(int(v) for v in text.replace(",", " ").split())
            elif isinstance(default, bool):
                values[key] = text.lower() in ("1", "true", "yes")
            elif isinstance(default, int):
                values[key] = int(float(text)) if "e" in text.lower() else int(text)
            elif isinstance(default, float):
                values[key] = float(text)
            else:
                values[key] = text
        except ValueError:
            raise ConfigurationError(f"{source}: cannot parse {key}={text!r}") from None
    return values


def _codec_config(args) -> ProxyCodecConfig:
    values = _typed(ProxyCodecConfig, read_key_values(args.codec_config), args.codec_config) \
        if args.codec_config else {}
    if args.qp is not None:
        values["qp_base"] = args.qp
    if args.seed is not None:
        values["seed"] = args.seed
    values.setdefault("bit_depth", args.bit_depth)
    return ProxyCodecConfig(**values)


def _rfs_config(path) -> RfsConfig:
    return RfsConfig(**_typed(RfsConfig, read_key_values(path), path)) if path else RfsConfig()


def _train_config(args) -> TrainConfig:
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.iterations is not None:
        overrides["iterations"] = args.iterations
    if args.init_from:
        overrides["init_from"] = args.init_from
    if args.config:
        return TrainConfig.from_file(args.config, **overrides)
    return TrainConfig(**overrides)


# ---------------------------------------------------------------------------
# clip loading


def _clips(args) -> list:
    """``(raws, urfs, maps)`` per clip from ``--data`` or the single-clip flags."""
    if args.data:
        base = Path(args.data).parent
        try:
            entries = json.loads(Path(args.data).read_text(encoding="utf-8"))
            specs = [(base / e["raw"], base / e["urf"], base / e["partitions"], int(e["width"]),
                      int(e["height"]), int(e.get("bit_depth", 8))) for e in entries]
        except json.JSONDecodeError as exc:
            raise FormatError(f"{args.data}: invalid JSON ({exc})") from None
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"{args.data}: each entry needs raw, urf, partitions, width, height ({exc})") \
                from None
    else:
        if not (args.raw and args.urf and args.partitions and args.width and args.height):
            raise ValidationError("give --data or all of --raw --urf --partitions --width --height")
        specs = [(args.raw, args.urf, args.partitions, args.width, args.height, args.bit_depth)]
    clips = []
    for raw, urf, parts, w, h, depth in specs:
        raws = read_yuv_sequence(raw, w, h, depth)
        urfs = [f.replace(role=Role.URF) for f in read_yuv_sequence(urf, w, h, depth)]
        layouts = read_partition_sidecar(parts)
        if not len(raws) == len(urfs) == len(layouts):
            raise ValidationError(f"{raw}: {len(raws)} raw frames, {len(urfs)} URFs, {len(layouts)} layouts")
        clips.append((raws, urfs, [rasterize_partition(lay, w, h) for lay in layouts]))
    return clips


# ---------------------------------------------------------------------------
# subcommands


def cmd_simulate(args) -> dict:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if args.image:
        raws = panning_clip(natural_image(args.image), args.frames or 8, args.height, args.width,
                            seed=args.seed or 0)
        write_yuv_sequence(out / "raw.yuv", raws, args.bit_depth)
    else:
        if not args.input:
            raise ValidationError("give --input RAW.yuv or --image NAME")
        raws = read_yuv_sequence(args.input, args.width, args.height, args.bit_depth)[:args.frames]
    coded = proxy_encode(raws, _codec_config(args))
    write_yuv_sequence(out / "urf.yuv", coded.urfs, args.bit_depth)
    write_partition_sidecar(out / "partitions.json", coded.layouts)
    summary = dict(frames=len(raws), width=args.width, height=args.height, qps=coded.qps,
                   bitrate_estimate=coded.bitrate_estimate,
                   psnr_y=[psnr(u.y, r.y) for u, r in zip(coded.urfs, raws)])
    (out / "simulate.json").write_text(json.dumps(summary, indent=1), encoding="utf-8")
    return dict(urf=str(out / "urf.yuv"), partitions=str(out / "partitions.json"),
                bitrate_estimate=coded.bitrate_estimate, mean_psnr_y=float(np.mean(summary["psnr_y"])))


def cmd_train_rfs(args) -> dict:
    cfg = _train_config(args)
    if args.synthetic:
        batches = [RfsBatch(f, p) for f, p in ranking_task(args.synthetic, np.random.default_rng(cfg.seed))]
    else:
        rfs_cfg = _rfs_config(args.rfs_config)
        batches = [b for raws, urfs, _ in _clips(args) for b in rfs_batches(urfs, raws, rfs_cfg)]
    if not batches:
        raise ValidationError("no URF had two or more valid references; nothing to train on")
    bundle, train_log = train_rfs(batches, cfg)
    bundle.save(args.out)
    return dict(model=str(args.out), batches=len(batches), final_loss=train_log.l_glo[-1])


def _patches(args, kind: str) -> list:
    rfs_net = ModelBundle.load(args.rfs_model).build() if getattr(args, "rfs_model", None) else None
    rfs_cfg = _rfs_config(getattr(args, "rfs_config", None))
    cfg_patch = _train_config(args).patch
    stride = args.stride or cfg_patch
    out = []
    for raws, urfs, maps in _clips(args):
        if kind == "mif":
            out += mif_samples(raws, urfs, maps, rfs_net, rfs_cfg, stride=stride, size=cfg_patch)
        else:
            out += if_samples(raws, urfs, maps, stride=stride, size=cfg_patch)
    return out


def cmd_train_if(args) -> dict:
    samples = _patches(args, "if")
    bundle, train_log = train_if(samples, _train_config(args))
    bundle.save(args.out)
    return dict(model=str(args.out), patches=len(samples), final_l_glo=train_log.l_glo[-1])


def cmd_train_mif(args) -> dict:
    samples = _patches(args, "mif")
    bundle, train_log = train_mif(samples, _train_config(args))
    bundle.save(args.out)
    return dict(model=str(args.out), patches=len(samples), final_l_glo=train_log.l_glo[-1],
                phase2_start=train_log.phase2_start)


def cmd_enhance(args) -> dict:
    if bool(args.raw) == bool(args.decisions):
        raise ValidationError("give exactly one of --raw (choose modes) or --decisions (replay)")
    w, h = args.width, args.height
    urfs = [f.replace(role=Role.URF) for f in read_yuv_sequence(args.urf, w, h, args.bit_depth)]
    layouts = read_partition_sidecar(args.partitions)
    maps = [rasterize_partition(lay, w, h) for lay in layouts]

    def build(path):
        return ModelBundle.load(path).build().eval() if path else None

    models = FilterModels(mif=build(args.mif_model), if_net=build(args.if_model), rfs=build(args.rfs_model))
    rfs_cfg = _rfs_config(args.rfs_config)
    if args.raw:
        raws = read_yuv_sequence(args.raw, w, h, args.bit_depth)
        result = enhance_sequence(urfs, maps, models, rfs_cfg, raws=raws)
    else:
        result = enhance_sequence(urfs, maps, models, rfs_cfg, decisions=read_decisions(args.decisions))
    write_yuv_sequence(args.out, result.frames, args.bit_depth)
    info = dict(out=str(args.out), modes={m.value: sum(d.mode is m for d in result.decisions) for m in Mode})
    if args.raw:
        dec_path = args.decisions_out or Path(args.out).with_suffix(".decisions.csv")
        write_decisions(dec_path, result.decisions)
        info["decisions"] = str(dec_path)
    return info


def cmd_evaluate(args) -> dict:
    curves = read_rd_csv(args.rd)
    anchor = args.anchor
    if anchor not in curves:
        raise ValidationError(f"anchor label {anchor!r} not in {args.rd} (labels: {sorted(curves)})")
    tests = args.test or [k for k in curves if k != anchor]
    rows = []
    for label in tests:
        if label not in curves:
            raise ValidationError(f"test label {label!r} not in {args.rd}")
        rows.append((label, bd_rate(curves[anchor], curves[label]), bd_psnr(curves[anchor], curves[label])))
    lines = ["test,anchor,bd_rate_percent,bd_psnr_db"] + [f"{t},{anchor},{r!r},{p!r}" for t, r, p in rows]
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
        summary = [f"{t} vs {anchor}: BD-BR {r:+.3f} %  BD-PSNR {p:+.4f} dB" for t, r, p in rows]
        Path(args.out).with_suffix(".txt").write_text("\n".join(summary) + "\n", encoding="utf-8")
    else:
        sys.stdout.write(text)
    return {t: dict(bd_rate=r, bd_psnr=p) for t, r, p in rows}


def cmd_run_experiment(args) -> dict:
    manifest = ExperimentManifest.from_json(args.manifest)
    if args.output_dir:
        manifest.output_dir = Path(args.output_dir)
    report = run_experiment(manifest)
    rate, gain = report.mean_bd
    return dict(output_dir=str(manifest.output_dir), mean_bd_rate=rate, mean_bd_psnr=gain)


# ---------------------------------------------------------------------------
# parser


def _clip_args(p, data=True):
    if data:
        p.add_argument("--data", help="JSON list of {raw, urf, partitions, width, height[, bit_depth]}")
        p.add_argument("--raw")
        p.add_argument("--urf")
    p.add_argument("--partitions", help="partition sidecar JSON written by simulate")
    p.add_argument("--width", type=int)
    p.add_argument("--height", type=int)
    p.add_argument("--bit-depth", type=int, default=8, choices=(8, 10))


def _train_args(p):
    p.add_argument("--config", help="key=value training config")
    p.add_argument("--iterations", type=int)
    p.add_argument("--init-from")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True, help="output model bundle")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mifnet", description="Multi-frame in-loop filtering toolkit")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", help="proxy-code a raw clip into URFs plus a partition sidecar")
    p.add_argument("--input", help="raw 4:2:0 YUV file")
    p.add_argument("--image", help="synthesise a panning clip from a bundled test image instead")
    p.add_argument("--width", type=int, required=True)
    p.add_argument("--height", type=int, required=True)
    p.add_argument("--bit-depth", type=int, default=8, choices=(8, 10))
    p.add_argument("--frames", type=int)
    p.add_argument("--qp", type=int)
    p.add_argument("--codec-config", help="key=value proxy codec config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train-rfs", help="train the reference-ranking network")
    _clip_args(p)
    p.add_argument("--synthetic", type=int, metavar="N", help="train on N synthetic ranking groups instead")
    p.add_argument("--rfs-config")
    _train_args(p)
    p.set_defaults(func=cmd_train_rfs)

    for name, func, mif in (("train-if", cmd_train_if, False), ("train-mif", cmd_train_mif, True)):
        p = sub.add_parser(name, help=f"train the {'multi' if mif else 'single'}-frame filter")
        _clip_args(p)
        p.add_argument("--stride", type=int, help="patch stride (default: patch size)")
        if mif:
            p.add_argument("--rfs-model", help="rank references with this bundle (default: ground truth)")
            p.add_argument("--rfs-config")
        _train_args(p)
        p.set_defaults(func=func)

    p = sub.add_parser("enhance", help="filter a coded clip in-loop")
    p.add_argument("--urf", required=True)
    _clip_args(p, data=False)
    p.add_argument("--raw", help="raw clip; picks the best mode per frame and logs decisions")
    p.add_argument("--decisions", help="replay a decision log (decoder side)")
    p.add_argument("--decisions-out")
    p.add_argument("--mif-model")
    p.add_argument("--if-model")
    p.add_argument("--rfs-model")
    p.add_argument("--rfs-config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_enhance)

    p = sub.add_parser("evaluate", help="BD-rate/BD-PSNR from an RD CSV")
    p.add_argument("--rd", required=True, help="CSV with label,bitrate,psnr rows")
    p.add_argument("--anchor", required=True)
    p.add_argument("--test", action="append")
    p.add_argument("--out", help="write the CSV table here (plus a .txt summary)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("run-experiment", help="full RD experiment from a JSON manifest")
    p.add_argument("manifest")
    p.add_argument("--output-dir")
    p.set_defaults(func=cmd_run_experiment)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    for key in ("width", "height"):
        if getattr(args, key, None) is not None and getattr(args, key) <= 0:
            print(f"error[usage]: --{key} must be positive", file=sys.stderr)
            return 2
    try:
        info = args.func(args)
    except MifError as exc:
        print(f"error[{exc.category}]: {_one_line(exc)}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"error[{FormatError.category}]: no such file: {exc.filename}", file=sys.stderr)
        return FormatError.exit_code
    except OSError as exc:
        print(f"error[{FormatError.category}]: {_one_line(exc)}", file=sys.stderr)
        return FormatError.exit_code
    if args.command != "evaluate" or args.out:
        print(json.dumps(info, default=str))
    return 0


def _one_line(exc: BaseException) -> str:
    return " ".join(str(exc).split())


if __name__ == "__main__":
    sys.exit(main())
