"""Command-line entry point: build-model, run, bench, eval, optimize.

Exit codes: 0 success, 1 usage error, 2 data or format error.
"""
from __future__ import annotations

import argparse
import csv
import io
import sys
from pathlib import Path

import numpy as np

from . import bench as benchmod
from . import metrics
from .errors import ConfigError, HdesError, MissingWeightError, ShapeError
from .graph import Graph, execute, output_shapes, parse_manifest, to_manifest
from .model_io import (WeightStore, index_dataset, init_weights, load_labels, load_pgm16, load_ppm,
                       load_weights, randomize_batchnorm, save_labels, save_pgm16, save_weights)
from .net_builder import HdesConfig, build_hdesnet
from .optim_pass import PASSES, fold_batchnorm_pass, run_passes

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2
LOSSES = ("smooth_l1", "cross_entropy")
HEADS = ("depth", "segmentation")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def parse_hw(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}") from None
    if h < 1 or w < 1:
        raise argparse.ArgumentTypeError(f"dimensions must be positive, got {text!r}")
    return h, w


# -- graph resolution --------------------------------------------------------

def candidate_graphs(hw) -> list[tuple[str, Graph]]:
    out = []
    for label, cfg in (("original", HdesConfig(input_hw=hw)), ("optimized", HdesConfig.optimized(input_hw=hw))):
        g = build_hdesnet(cfg)
        out.append((label, g))
        g_f, _, _ = fold_batchnorm_pass(g, _placeholder_weights(g), input_dims=(1, 3) + hw)
        out.append((label + "+bn-fold", g_f))
    return out


def _placeholder_weights(g: Graph) -> WeightStore:
    # folding only needs arrays of the right shapes; var=1 keeps sqrt finite
    ws = WeightStore()
    for name, shape in g.weight_shapes().items():
        ws[name] = np.ones(shape, dtype=np.float32)
    return ws


def graph_for_weights(ws, hw, manifest: str | None = None) -> tuple[str, Graph]:
    """Find the network whose weight names and shapes match ``ws`` exactly."""
    if manifest is not None:
        return "manifest", parse_manifest(Path(manifest).read_text())
    have = {k: tuple(v.shape) for k, v in ws.items()}
    for label, g in candidate_graphs(hw):
        if g.weight_shapes() == have:
            return label, g
    raise MissingWeightError("weights do not match any known network variant; pass --manifest")


# -- subcommands ---------------------------------------------------------------

def cmd_build_model(a) -> int:
    cfg = HdesConfig.optimized(input_hw=a.hw) if a.optimized else HdesConfig(input_hw=a.hw)
    g = build_hdesnet(cfg)
    ws = init_weights(g, a.seed)
    if a.random_bn:
        ws = randomize_batchnorm(g, ws, a.seed + 1)
    save_weights(ws, a.out)
    if a.emit_manifest:
        Path(a.emit_manifest).write_text(to_manifest(g))
    print(f"wrote {a.out} ({len(ws)} tensors, {ws.n_elements} parameters, {len(g)} nodes)")
    return EXIT_OK


def _check_divisible(hw):
    if hw[0] % 32 or hw[1] % 32:
        raise ShapeError(f"image size {hw[0]}x{hw[1]} must be divisible by 32")


def cmd_run(a) -> int:
    x = load_ppm(a.image)
    hw = x.shape[2:]
    _check_divisible(hw)
    ws = load_weights(a.weights)
    _, g = graph_for_weights(ws, hw, a.manifest)
    out = execute(g, ws, x, reference_kernels=a.reference)
    save_pgm16(out["depth"], a.out_depth)
    save_labels(np.argmax(out["segmentation"].array[0], axis=0).astype(np.uint8), a.out_mask)
    d = out["depth"].shape
    print(f"depth {d[2]}x{d[3]} -> {a.out_depth}; mask -> {a.out_mask}")
    return EXIT_OK


def _sibling(path: Path, suffix: str) -> Path:
    return path.with_suffix(suffix) if path.suffix else path.with_name(path.name + suffix)


def cmd_bench(a) -> int:
    from .plotting import plot_bench

    ws = load_weights(a.weights)
    label, g = graph_for_weights(ws, a.hw, a.manifest)
    dims = (1, 3) + a.hw
    models = [benchmod.Model(label, g, ws)]
    rewrites = []
    if a.passes:
        g2, ws2, rewrites = run_passes(g, ws, a.passes, seed=a.seed, input_dims=dims)
        models.append(benchmod.Model(label + "|" + ",".join(a.passes), g2, ws2))
    reports, lat = benchmod.run_bench(models, dims, warmup=a.warmup, iters=a.iters, threads=a.threads,
                                      seed=a.seed, check_alloc=a.check_alloc)
    lines = []
    for r in reports:
        lines.append(f"[{r.model}]\n" + r.to_text())
    for rep in rewrites:
        lines.append(f"[rewrite {rep.pass_name}]\n" + rep.to_text())
    if len(reports) > 1:
        lines.append(f"speedup_median_fps={benchmod.speedup(reports):.4f}\n")
    text = "\n".join(lines)
    print(text, end="")
    if a.out:
        out = Path(a.out)
        csv_path = out if out.suffix == ".csv" else _sibling(out, ".csv")
        csv_text = benchmod.reports_to_csv(reports)
        if rewrites:
            csv_text += "\n" + _records_csv([r.to_record() for r in rewrites])
        csv_path.write_text(csv_text)
        _sibling(csv_path, ".txt").write_text(text)
        plot_bench(lat, _sibling(csv_path, ".png"))
    return EXIT_OK


def _records_csv(records: list[dict]) -> str:
    keys = list(dict.fromkeys(k for r in records for k in r))
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=keys, lineterminator="\n")
    w.writeheader()
    for r in records:
        w.writerow(r)
    return buf.getvalue()


def parse_losses(items) -> dict[str, str]:
    """``head=loss`` pairs; defaults follow common practice."""
    att = {"depth": "smooth_l1", "segmentation": "cross_entropy"}
    for item in items or ():
        head, _, loss = item.partition("=")
        if head not in HEADS or loss not in LOSSES + ("none",):
            raise UsageError(f"bad --loss {item!r}; expected HEAD=LOSS with HEAD in {HEADS} and LOSS in {LOSSES}")
        if head == "depth" and loss == "cross_entropy":
            raise UsageError("cross_entropy needs class logits; the depth head has a single channel")
        att[head] = loss
    return att


def _head_loss(loss, head, pred, gt_depth, gt_labels) -> float | None:
    if loss == "none":
        return None
    if head == "depth":
        return metrics.smooth_l1(pred, gt_depth, metrics.valid_mask(gt_depth))
    if loss == "cross_entropy":
        return metrics.cross_entropy(pred, gt_labels)
    # smooth L1 between the person probability and the binary person target
    prob = np.exp(metrics.log_softmax(pred))[0, metrics.PERSON]
    target = (gt_labels == metrics.PERSON).astype(np.float64)
    return metrics.smooth_l1(prob, target, metrics.ValidMask(np.ones(target.shape, bool)))


def _one_hot_logits(labels: np.ndarray, n_classes: int = 2) -> np.ndarray:
    return (np.arange(n_classes)[:, None, None] == labels[None]).astype(np.float32)[None]


def cmd_eval(a) -> int:
    from .plotting import plot_eval

    att = parse_losses(a.loss)
    idx = index_dataset(a.dataset, a.depth_scale)
    if len(idx) == 0:
        raise ShapeError(f"dataset {a.dataset} has no frames")
    ws, graphs = None, {}
    if a.weights:
        ws = load_weights(a.weights)
    reports, counts, losses = [], [], {h: [] for h in HEADS}
    for s in idx:
        gt_d = load_pgm16(s.depth_path, idx.depth_scale).array[0, 0]
        gt_l = load_labels(s.mask_path)
        if ws is not None:
            x = load_ppm(s.rgb_path)
            hw = x.shape[2:]
            _check_divisible(hw)
            if hw not in graphs:
                graphs[hw] = graph_for_weights(ws, hw, a.manifest)[1]
            out = execute(graphs[hw], ws, x)
            depth, logits = out["depth"].array, out["segmentation"].array
        else:
            pdir = Path(a.predictions)
            depth = load_pgm16(pdir / "depth" / f"{s.frame_id}.pgm", idx.depth_scale).array
            logits = _one_hot_logits(load_labels(pdir / "mask" / f"{s.frame_id}.pgm"))
        ph, pw = depth.shape[2:]
        gt_d = metrics.nearest_resize(gt_d, ph, pw)
        gt_l = metrics.nearest_resize(gt_l, ph, pw)
        reports.append(metrics.evaluate_frame(depth, gt_d, logits, gt_l, s.frame_id, a.delta_mode))
        counts.append(metrics.iou_counts(logits, gt_l))
        if ws is not None:
            for head, pred in (("depth", depth), ("segmentation", logits)):
                v = _head_loss(att[head], head, pred, gt_d, gt_l)
                if v is not None:
                    losses[head].append(v)
    agg = metrics.aggregate(reports, counts, a.iou_mode)
    other = "pooled" if a.iou_mode == "per-frame" else "per-frame"
    alt = metrics.aggregate(reports, counts, other)
    summary = [f"frames={len(reports)}", f"rmse={agg.rmse:.10g}", f"delta1={agg.delta1:.10g}",
               f"people_iou_{a.iou_mode.replace('-', '_')}={agg.people_iou:.10g}",
               f"people_iou_{other.replace('-', '_')}={alt.people_iou:.10g}"]
    for head in HEADS:
        if losses[head]:
            summary.append(f"loss_{head}_{att[head]}={np.mean(losses[head]):.10g}")
    text = "\n".join(summary) + "\n"
    print(text, end="")
    out = Path(a.out)
    out.write_text(metrics.reports_to_csv(reports, agg))
    _sibling(out, ".txt").write_text(text)
    plot_eval([r.frame_id for r in reports], [r.rmse for r in reports], [r.delta1 for r in reports],
              [r.people_iou for r in reports], _sibling(out, ".png"))
    return EXIT_OK


def cmd_optimize(a) -> int:
    ws = load_weights(a.weights)
    dims = (1, 3) + a.hw
    _, g = graph_for_weights(ws, a.hw, a.manifest)
    shapes = output_shapes(g, dims)
    g2, ws2, reports = run_passes(g, ws, a.passes, seed=a.seed, input_dims=dims)
    if output_shapes(g2, dims) != shapes:
        raise ShapeError("optimization changed output shapes")
    for rep in reports:
        print(rep.to_text())
    save_weights(ws2, a.out)
    if a.emit_manifest:
        Path(a.emit_manifest).write_text(to_manifest(g2))
    return EXIT_OK


def _passes(text: str) -> list[str]:
    names = [p.strip() for p in text.split(",") if p.strip()]
    bad = [p for p in names if p not in PASSES]
    if bad or not names:
        raise argparse.ArgumentTypeError(f"unknown pass(es) {bad}; choose from {sorted(PASSES)}")
    return names


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="hdesnet", description="HDES-Net inference engine, optimizer and evaluation harness")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("build-model", help="build and initialize a network")
    s.add_argument("--optimized", action="store_true", help="use the [1,5,9] ASPP without global pooling")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--emit-manifest")
    s.add_argument("--hw", type=parse_hw, default=(224, 224))
    s.add_argument("--random-bn", action="store_true", help="draw non-trivial batch-norm statistics")
    s.set_defaults(func=cmd_build_model)

    s = sub.add_parser("run", help="run inference on one PPM image")
    s.add_argument("--weights", required=True)
    s.add_argument("--image", required=True)
    s.add_argument("--out-depth", required=True)
    s.add_argument("--out-mask", required=True)
    s.add_argument("--reference", action="store_true", help="execute with the scalar oracle kernels")
    s.add_argument("--manifest")
    s.set_defaults(func=cmd_run)

    s = sub.add_parser("bench", help="measure throughput on synthetic input")
    s.add_argument("--weights", required=True)
    s.add_argument("--hw", type=parse_hw, default=(224, 224))
    s.add_argument("--warmup", type=int, default=10)
    s.add_argument("--iters", type=int, default=100)
    s.add_argument("--threads", type=int, default=1)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")
    s.add_argument("--passes", type=_passes, help="also bench the network after these passes, interleaved")
    s.add_argument("--check-alloc", action="store_true", help="report steady-state traced memory growth")
    s.add_argument("--manifest")
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("eval", help="evaluate metrics over a dataset directory")
    src = s.add_mutually_exclusive_group(required=True)
    src.add_argument("--weights")
    src.add_argument("--predictions", help="directory with depth/ and mask/ prediction PGMs")
    s.add_argument("--dataset", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--iou-mode", choices=("per-frame", "pooled"), default="per-frame")
    s.add_argument("--delta-mode", choices=("ratio", "relative"), default="ratio")
    s.add_argument("--depth-scale", type=float, default=1.0, help="millimetres per stored depth unit")
    s.add_argument("--loss", action="append", metavar="HEAD=LOSS")
    s.add_argument("--manifest")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("optimize", help="apply graph rewrite passes")
    s.add_argument("--weights", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--passes", type=_passes, default=["aspp", "bn-fold"])
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--hw", type=parse_hw, default=(224, 224))
    s.add_argument("--emit-manifest")
    s.add_argument("--manifest")
    s.set_defaults(func=cmd_optimize)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    a = parser.parse_args(argv)
    for name in ("iters", "threads"):
        if getattr(a, name, 1) < 1:
            parser.error(f"--{name} must be >= 1")
    if getattr(a, "warmup", 0) < 0:
        parser.error("--warmup must be >= 0")
    try:
        return a.func(a)
    except (UsageError, ConfigError) as e:
        print(f"hdesnet: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (HdesError, ValueError, KeyError, OSError) as e:
        print(f"hdesnet: error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
