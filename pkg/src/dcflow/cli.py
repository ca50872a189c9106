"""Command-line interface: train, flow, eval, viz, synth.

Exit codes are 0 on success, 1 on a usage error and 2 when an input file or
dataset cannot be used.
"""

import argparse
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import embedder, flowio, metrics, pipeline, synthetic
from .costvolume import AllocationError

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

log = logging.getLogger("dcflow")

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2
IMAGE_EXTS = (".png", ".ppm")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _parse_value(text):
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def _overrides(pairs):
    out = {}
    for item in pairs or ():
        key, sep, value = item.partition("=")
        if not sep or not key.strip():
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        out[key.strip()] = _parse_value(value.strip())
    if "directions" in out:
        out["directions"] = tuple(out["directions"])
    return out


def build_config(args):
    """Preset for the mode, then the config file, then flags; later sources win."""
    file_mode = None
    if args.config:
        file_mode = pipeline.load_config(args.config).mode
    mode = args.mode or file_mode or "fast"
    cfg = pipeline.PipelineConfig.preset(mode)
    if args.config:
        cfg = pipeline.load_config(args.config, cfg)
    flags = {"mode": args.mode, "r_max": args.r_max, "threads": args.threads, "seed": args.seed,
             "model_path": getattr(args, "model", None)}
    flags = {k: v for k, v in flags.items() if v is not None}
    flags.update(_overrides(args.set))
    try:
        return cfg.replace(**flags)
    except KeyError as exc:
        raise UsageError(exc.args[0]) from None


def _load_model(cfg):
    if not cfg.model_path:
        raise UsageError("no model given (use --model or model_path in the config)")
    params = embedder.load_params(cfg.model_path)
    if params.dim != cfg.d:
        cfg.d = params.dim
    return params


def scan_dataset(root):
    """Names with ``<name>_img1``, ``<name>_img2`` and ``<name>_flow.flo`` in ``root``."""
    if not os.path.isdir(root):
        raise DataError(f"{root} is not a directory")
    files = set(os.listdir(root))
    pairs = []
    for fname in sorted(files):
        stem, ext = os.path.splitext(fname)
        if not stem.endswith("_img1") or ext.lower() not in IMAGE_EXTS:
            continue
        name = stem[:-len("_img1")]
        img2 = next((name + "_img2" + e for e in (ext, *IMAGE_EXTS) if name + "_img2" + e in files),
                    None)
        flo = name + "_flow.flo"
        if img2 is None or flo not in files:
            log.warning("skipping %s: missing second frame or ground truth", name)
            continue
        pairs.append((name, os.path.join(root, fname), os.path.join(root, img2),
                      os.path.join(root, flo)))
    if not pairs:
        raise DataError(f"no <name>_img1/_img2/_flow.flo triples in {root}")
    return pairs


def _read_triple(paths):
    _, p1, p2, pf = paths
    return flowio.read_image(p1), flowio.read_image(p2), flowio.read_flo(pf)


def cmd_train(args):
    dataset = []
    for entry in scan_dataset(args.data):
        dataset.append(pipeline.prepare_training_pair(*_read_triple(entry)))
    schedule = embedder.TrainSchedule(
        stages=[(args.iters, args.lr)] if args.iters is not None else embedder.TrainSchedule().stages,
        batch_size=args.batch,
        momentum=args.momentum,
        margin=args.margin,
    )
    params = embedder.train(dataset, schedule, rng_seed=args.seed, d=args.d, hidden=args.hidden,
                            log_every=args.log_every)
    embedder.save_params(args.output, params)
    print(f"wrote {args.output} (d={params.dim}, {params.n_params} parameters, "
          f"{schedule.total_iterations} steps on {len(dataset)} pairs)")


def cmd_flow(args):
    cfg = build_config(args)
    params = _load_model(cfg)
    img1, img2 = flowio.read_image(args.img1), flowio.read_image(args.img2)
    flow = pipeline.compute_flow(img1, img2, params, cfg)
    flowio.write_flo(args.output, flow)
    print(f"wrote {args.output} ({flow.shape[1]}x{flow.shape[0]}, mode {cfg.mode})")


def cmd_eval(args):
    cfg = build_config(args)
    params = _load_model(cfg)
    entries = scan_dataset(args.data)

    def run(entry):
        img1, img2, gt = _read_triple(entry)
        flow = pipeline.compute_flow(img1, img2, params, cfg)
        if args.save_flow:
            os.makedirs(args.save_flow, exist_ok=True)
            flowio.write_flo(os.path.join(args.save_flow, entry[0] + ".flo"), flow)
        return metrics.score(entry[0], flow, gt, args.thresh, args.kitti)

    with ThreadPoolExecutor(max(1, args.jobs)) as pool:
        scores = list(pool.map(run, entries))
    report = metrics.EvalReport.from_scores(scores)
    if args.json:
        with open(args.json, "w") as fh:
            fh.write(report.to_json() + "\n")
    print(report.table())


def cmd_viz(args):
    flow = flowio.read_flo(args.flo)
    flowio.write_image(args.output, flowio.flow_to_color(flow, args.max_mag))
    print(f"wrote {args.output}")


def cmd_synth(args):
    os.makedirs(args.output, exist_ok=True)
    rng = np.random.default_rng(args.seed)
    shape = (args.size, args.size)
    for i in range(args.count):
        base = synthetic.make_texture(shape, seed=args.seed * 1000 + i, kind=args.texture)
        if args.kind == "translation":
            t = rng.integers(-args.max_shift, args.max_shift + 1, size=2) * 3
            transform = synthetic.translation(*t)
        else:
            transform = synthetic.random_homography(rng, shape)
        img1, img2, gt = synthetic.make_synthetic_pair(base, transform, seed=args.seed + i,
                                                       noise=args.noise)
        name = os.path.join(args.output, f"{args.kind}_{i:03d}")
        flowio.write_image(name + "_img1.png", np.clip(img1, 0, 1))
        flowio.write_image(name + "_img2.png", np.clip(img2, 0, 1))
        flowio.write_flo(name + "_flow.flo", gt)
    print(f"wrote {args.count} {args.kind} pairs to {args.output}")


def _pipeline_flags(p):
    p.add_argument("-m", "--model", help="DCFE model file")
    p.add_argument("-c", "--config", help="TOML key = value config file")
    p.add_argument("--mode", choices=pipeline.MODES)
    p.add_argument("--r-max", type=int, dest="r_max")
    p.add_argument("--threads", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override any config key, e.g. --set P2=48")


def make_parser():
    parser = _Parser(prog="dcflow", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train an embedding from a directory of pairs")
    p.add_argument("data")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--d", type=int, default=64)
    p.add_argument("--hidden", type=int, default=64)
    p.add_argument("--iters", type=int, help="single-stage run; default is the full schedule")
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--batch", type=int, default=30_000, help="triplets per step")
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--margin", type=float, default=0.2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--log-every", type=int, default=100)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("flow", help="estimate flow for one image pair")
    p.add_argument("img1")
    p.add_argument("img2")
    p.add_argument("-o", "--output", required=True)
    _pipeline_flags(p)
    p.set_defaults(func=cmd_flow)

    p = sub.add_parser("eval", help="score a directory of pairs against ground truth")
    p.add_argument("data")
    p.add_argument("--json", help="write the report here")
    p.add_argument("--save-flow", metavar="DIR")
    p.add_argument("--thresh", type=float, default=3.0)
    p.add_argument("--kitti", action="store_true", help="also require EPE > 5%% of |gt|")
    p.add_argument("--jobs", type=int, default=1, help="pairs processed concurrently")
    _pipeline_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("viz", help="color-code a .flo file")
    p.add_argument("flo")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--max-mag", type=float)
    p.set_defaults(func=cmd_viz)

    p = sub.add_parser("synth", help="generate synthetic pairs with exact ground truth")
    p.add_argument("output")
    p.add_argument("--kind", choices=("translation", "homography"), default="translation")
    p.add_argument("--texture", choices=("mosaic", "noise"), default="mosaic")
    p.add_argument("--count", type=int, default=8)
    p.add_argument("--size", type=int, default=192)
    p.add_argument("--max-shift", type=int, default=3, help="working-res px for translations")
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None):
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except UsageError as exc:
        print(f"dcflow: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, OSError, AllocationError) as exc:
        # ValueError covers FloError, ModelFormatError and malformed configs
        print(f"dcflow: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DataError as exc:
        print(f"dcflow: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
