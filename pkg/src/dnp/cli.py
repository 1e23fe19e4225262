"""``dnp`` command line: geometry tables, feature extraction, training,
detection, evaluation, the convolution-count benchmark and visualization.

Exit status is 0 on success, 1 on usage errors and 2 on data errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import harness
from .cnn import WeightFileError, forward_to_layer, init_weights, load_weights, save_weights
from .dense import GridFormatError, network_convolution, prepare_image, cut_crop, save_grid
from .detector import TrainParams, load_cascade, save_cascade, train_cascade
from .evaluation import average_precision
from .geometry import NetSpecError, geometry_table, get_net
from .hog import hog_extract
from .imageio import ImageFormatError, read_image
from .synthetic import SyntheticSpec, generate_synthetic, load_manifest

log = logging.getLogger("dnp")

DATA_ERRORS = (
    FileNotFoundError,
    IsADirectoryError,
    KeyError,
    ValueError,
    IndexError,
    NetSpecError,
    WeightFileError,
    GridFormatError,
    ImageFormatError,
)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# --------------------------------------------------------------------------- #
# shared option groups


def _net_options(p, layer=True):
    p.add_argument("--net", default="tiny", help="preset name (paper, tiny) or NetSpec file")
    if layer:
        p.add_argument("--layer", default=None, help="1-based layer index or name; default: last layer")


def _weight_options(p):
    p.add_argument("--weights", type=Path, help="weight file; default: random weights from --weight-seed")
    p.add_argument("--weight-seed", type=int, default=0)


def _proposal_options(p):
    d = harness.ProposalSpec()
    p.add_argument("--proposals", type=Path, help="CSV image_id,left,top,right,bottom; default: sliding windows")
    p.add_argument("--scales", type=float, nargs="+", default=list(d.scales))
    p.add_argument("--ratios", type=float, nargs="+", default=list(d.ratios))
    p.add_argument("--proposal-stride", type=int, default=d.stride)


def _load_net(args):
    net = get_net(args.net)
    layer = net.resolve(args.layer) if getattr(args, "layer", None) is not None else net.n_active
    return net, layer


def _load_weights(args, net):
    if args.weights:
        return load_weights(args.weights, net)
    return init_weights(net, args.weight_seed)


def _families(args, layer):
    names = []
    for f in args.features.split(","):
        f = f.strip()
        if f == "dnp":
            names.append(harness.dnp_family(layer))
        elif f == "hog":
            names.append(harness.HOG)
        else:
            raise UsageError(f"unknown feature family {f!r} (use dnp, hog)")
    return tuple(names)


class _FileProposals:
    """Proposal source backed by a CSV file."""

    def __init__(self, path):
        self.table = harness.read_proposals(path)

    def windows(self, width, height, image_id=None):
        return self.table.get(image_id, np.zeros((0, 4)))


def _proposals(args):
    if args.proposals:
        return _FileProposals(args.proposals)
    return harness.ProposalSpec(tuple(args.scales), tuple(args.ratios), args.proposal_stride)


def _log_config(args):
    cfg = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items() if k != "func"}
    log.info("config %s", json.dumps(cfg, sort_keys=True))


# --------------------------------------------------------------------------- #
# subcommands


def cmd_table(args):
    net, _ = _load_net(args)
    rows = geometry_table(net, convention=args.convention)
    if args.csv:
        print("layer,name,window,stride,padding,pixel_stride,top_left,receptive_field,map_size")
        for r in rows:
            print(
                f"{r.layer_index},{r.name},{r.window},{r.stride},{r.padding},"
                f"{r.pixel_stride},{_frac(r.top_left)},{r.receptive_field},{r.out_size}"
            )
        return 0
    head = ("layer", "name", "W", "s", "P", "S", "x", "RF", "map")
    print("{:>5} {:>6} {:>3} {:>3} {:>3} {:>4} {:>6} {:>5} {:>5}".format(*head))
    for r in rows:
        print(
            f"{r.layer_index:>5} {r.name:>6} {r.window:>3} {r.stride:>3} {r.padding:>3} "
            f"{r.pixel_stride:>4} {_frac(r.top_left):>6} {r.receptive_field:>5} {r.out_size:>5}"
        )
    return 0


def _frac(q):
    return str(q.numerator) if q.denominator == 1 else f"{float(q):g}"


def cmd_forward(args):
    net, layer = _load_net(args)
    weights = _load_weights(args, net)
    prepared = prepare_image(read_image(args.image), net.input_channels)
    crop = cut_crop(prepared, args.x, args.y, net.input_size)
    out = forward_to_layer(net, weights, crop, layer)
    if args.out:
        np.save(args.out, out)
    print(f"layer {layer} ({net.layer_names()[layer - 1]}): shape {out.shape}, "
          f"mean {float(out.mean()):.6g}, max {float(out.max()):.6g}")
    return 0


def cmd_extract(args):
    image = read_image(args.image)
    if args.hog:
        grid = hog_extract(image)
    else:
        net, layer = _load_net(args)
        grid = network_convolution(net, _load_weights(args, net), image, layer, mode=args.mode)
    save_grid(grid, args.out)
    print(f"{grid.cols}x{grid.rows} points, D={grid.dim}, origin ({grid.x0}, {grid.y0}), stride {grid.stride}")
    return 0


def cmd_init_weights(args):
    net, _ = _load_net(args)
    save_weights(init_weights(net, args.weight_seed), args.out)
    return 0


def cmd_synth(args):
    spec = SyntheticSpec(width=args.size, height=args.size)
    m = generate_synthetic(args.seed, args.n, spec, root=args.out, n_test=args.n_test)
    print(f"wrote {len(m.entries)} images ({len(m.split('test'))} test) to {args.out}")
    return 0


def _extractor(args, net, layer):
    families = _families(args, layer)
    weights = _load_weights(args, net) if any(f != harness.HOG for f in families) else None
    return harness.FeatureExtractor(net, weights, layer, families)


def _image_windows(proposals, entry):
    a = entry.annotation
    if isinstance(proposals, _FileProposals):
        return proposals.windows(a.width, a.height, entry.image_id)
    return proposals.windows(a.width, a.height)


def cmd_train(args):
    manifest = load_manifest(args.data)
    net, layer = _load_net(args)
    fx = _extractor(args, net, layer)
    proposals = _proposals(args)
    grids = harness.compute_grids(manifest, fx, "train")
    images = []
    for e in manifest.split("train"):
        images.append(
            harness.TrainingImage(
                e.image_id,
                grids[e.image_id],
                np.asarray(e.annotation.boxes, dtype=np.float64).reshape(-1, 4),
                _image_windows(proposals, e),
            )
        )
    if not images:
        raise ValueError("manifest has no train split")
    pool = harness.family_pool(args.seed, args.pool_size, fx.dims(), args.k_max)
    params = TrainParams(
        n_stages=args.stages,
        weaks_per_stage=args.weaks,
        neg_per_image=args.neg_per_image,
        neg_candidates_per_image=args.neg_candidates,
        seed=args.seed,
    )
    cascade, history = train_cascade(images, pool, params, args.normalizer)
    cascade.metadata.update(net=str(args.net), layer=str(layer), weight_seed=str(args.weight_seed))
    save_cascade(cascade, args.out)
    for r in history[:: max(1, len(history) // 8)]:
        log.info("stage %d round %d: exp loss %.5f", r.stage, r.round, r.exp_loss)
    print(f"trained {len(cascade.stages)} stages, {len(cascade.weaks)} weak classifiers -> {args.out}")
    return 0


def cmd_detect(args):
    manifest = load_manifest(args.data)
    cascade = load_cascade(args.cascade)
    net, layer = _load_net(args)
    if args.layer is None and "layer" in cascade.metadata:
        layer = int(cascade.metadata["layer"])
    families = tuple(sorted(cascade.families))
    weights = _load_weights(args, net) if any(f != harness.HOG for f in families) else None
    fx = harness.FeatureExtractor(net, weights, layer, families)
    proposals = _proposals(args)
    out = []
    for e in manifest.split(args.split):
        grids = fx.grids(manifest.image(e))
        dets = harness.detect(grids, _image_windows(proposals, e), cascade, args.nms_iou, label=args.label)
        out.extend(harness.detections_to_scored(e.image_id, dets))
    harness.write_detections(out, args.out)
    print(f"{len(out)} detections -> {args.out}")
    return 0


def cmd_eval(args):
    manifest = load_manifest(args.data)
    dets = harness.read_detections(args.detections)
    ap = average_precision(dets, manifest.ground_truth(args.split), args.iou, args.mode)
    print(f"AP {ap:.4f}")
    return 0


def cmd_bench(args):
    net, layer = _load_net(args)
    reports = [
        harness.bench_convolutions(w, h, args.proposals, net, layer, timing=args.timing)
        for w, h in args.size
    ]
    if args.csv:
        harness.write_bench_csv(reports, args.csv)
    print(harness.format_bench_table(reports))
    return 0


def cmd_visualize(args):
    manifest = load_manifest(args.data)
    cascade = load_cascade(args.cascade)
    net, _ = _load_net(args)
    dnp = sorted(f for f in cascade.families if f.startswith("dnp_layer_"))
    if not dnp:
        raise ValueError("cascade selects no DNP features")
    weights = _load_weights(args, net)
    fx = harness.FeatureExtractor(net, weights, harness.family_layer(dnp[0]), tuple(dnp))
    grids = harness.compute_grids(manifest, fx, args.split)
    report = harness.visualize_top_patterns(cascade, manifest, args.k, net, grids, args.split)
    index = harness.save_patterns(report, args.out)
    fam, dim = report.top
    print(f"top dimension {dim} of {fam} ({report.histogram[report.top]} weaks); {len(report.patches)} patches -> {index}")
    return 0


def _size(text):
    try:
        w, h = text.lower().split("x")
        return int(w), int(h)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected WIDTHxHEIGHT, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dnp", description="Dense neural patterns with regionlet detection.")
    parser.add_argument("-q", "--quiet", action="store_true", help="only log warnings")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("table", help="per-layer stride, first center and receptive field")
    _net_options(p, layer=False)
    p.add_argument("--convention", choices=["paper", "exact"], default="paper")
    p.set_defaults(net="paper")
    p.add_argument("--csv", action="store_true")
    p.set_defaults(func=cmd_table)

    p = sub.add_parser("forward", help="run one crop through the network")
    _net_options(p)
    _weight_options(p)
    p.add_argument("--image", type=Path, required=True)
    p.add_argument("--x", type=int, default=0)
    p.add_argument("--y", type=int, default=0)
    p.add_argument("--out", type=Path, help="save the output maps as .npy")
    p.set_defaults(func=cmd_forward)

    p = sub.add_parser("extract", help="dense feature grid of a whole image")
    _net_options(p)
    _weight_options(p)
    p.add_argument("--image", type=Path, required=True)
    p.add_argument("--mode", choices=["cover", "valid"], default="cover")
    p.add_argument("--hog", action="store_true", help="HOG grid instead of DNPs")
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("init-weights", help="write a random weight file")
    _net_options(p, layer=False)
    p.add_argument("--weight-seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_init_weights)

    p = sub.add_parser("synth", help="generate the synthetic shapes dataset")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n", type=int, default=250)
    p.add_argument("--n-test", type=int, default=50)
    p.add_argument("--size", type=int, default=320)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a cascade on the train split")
    _net_options(p)
    _weight_options(p)
    _proposal_options(p)
    d = TrainParams()
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--features", default="dnp", help="comma list of dnp, hog")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--pool-size", type=int, default=2000, help="configurations sampled per feature family")
    p.add_argument("--k-max", type=int, default=3)
    p.add_argument("--stages", type=int, default=d.n_stages)
    p.add_argument("--weaks", type=int, default=d.weaks_per_stage)
    p.add_argument("--neg-per-image", type=int, default=d.neg_per_image)
    p.add_argument("--neg-candidates", type=int, default=d.neg_candidates_per_image)
    p.add_argument("--normalizer", choices=["l0", "l1"], default="l0")
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("detect", help="score proposals with a cascade")
    _net_options(p)
    _weight_options(p)
    _proposal_options(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--cascade", type=Path, required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--label", default="ellipse")
    p.add_argument("--nms-iou", type=float, default=0.5)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("eval", help="average precision of a detections file")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--detections", type=Path, required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--iou", type=float, default=0.5)
    p.add_argument("--mode", choices=["all", "11pt"], default="all")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="dense versus per-region model convolutions")
    _net_options(p)
    p.add_argument("--size", type=_size, nargs="+", default=[(640, 480)])
    p.add_argument("--proposals", type=int, default=2213)
    p.add_argument("--timing", action="store_true", help="also time both paths on this machine")
    p.add_argument("--csv", type=Path)
    p.set_defaults(func=cmd_bench, net="paper", layer="conv5")

    p = sub.add_parser("visualize", help="patches that fire the most selected DNP dimension")
    _net_options(p, layer=False)
    _weight_options(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--cascade", type=Path, required=True)
    p.add_argument("--split", default=None)
    p.add_argument("--k", type=int, default=16)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_visualize)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "func", None):
            parser.print_usage(sys.stderr)
            return 1
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(name)s: %(message)s")
    _log_config(args)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"dnp: {exc}", file=sys.stderr)
        return 1
    except DATA_ERRORS as exc:
        print(f"dnp: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
