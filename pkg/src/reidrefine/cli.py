"""Command line: ``reidrefine {synth,pretrain,gradcheck,refine,eval,ablate}``.

Every command writes its artifacts plus a ``manifest.json`` (resolved config
and seed) into ``--out`` and never writes into its input directories.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

from . import checks, embednet, evaluation, pipeline, proxy, refine, scenes

log = logging.getLogger("reidrefine")

EXIT_OK, EXIT_FAILED_CHECK, EXIT_BAD_INPUT = 0, 1, 2


class InputError(Exception):
    pass


def _out_dir(args, *inputs) -> Path:
    out = Path(args.out).resolve()
    for p in inputs:
        if p is None:
            continue
        p = Path(p).resolve()
        src = p if p.is_dir() else p.parent
        if out == src:
            raise InputError(f"--out {out} would write into the input directory {src}")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _config(args) -> pipeline.RunConfig:
    overrides = {"seed": args.seed}
    for flag, key in (("loss", "loss"), ("iters", "iterations"), ("gallery_size", "gallery_size")):
        if getattr(args, flag, None) is not None:
            overrides[key] = getattr(args, flag)
    return pipeline.load_config(args.config, **overrides)


def _require(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise InputError(f"{what} not found: {p}")
    return p


def _load_scenes(path) -> scenes.SceneSet:
    return scenes.read_sceneset(_require(path, "scene directory"))


def _load_net(path) -> embednet.EmbedNet:
    return embednet.load_net(_require(path, "network checkpoint")).freeze()


def cmd_synth(args) -> int:
    cfg = _config(args)
    out = _out_dir(args)
    sset = pipeline.build_scenes(cfg)
    scenes.write_sceneset(sset, out)
    pipeline.write_manifest(out, "synth", cfg, outputs=[p.name for p in out.glob("scene_*.ppm")] + ["annotations.csv"])
    print(f"wrote {len(sset)} scenes to {out}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    cfg = _config(args)
    out = _out_dir(args, args.scenes)
    sset = _load_scenes(args.scenes)
    net, report = pipeline.pretrain_net(sset, cfg)
    embednet.save_net(net, out / "net.emb")
    pipeline.write_json(out / "pretrain.json", {
        "train_accuracy": report.train_accuracy,
        "first_loss": report.losses[0],
        "final_loss": report.losses[-1],
        "steps": len(report.losses),
    })
    pipeline.write_manifest(out, "pretrain", cfg, {"scenes": args.scenes}, ["net.emb", "pretrain.json"])
    print(f"train accuracy {report.train_accuracy:.3f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = _config(args)
    reports = checks.run_all(cfg.seed)
    for r in reports:
        status = "PASS" if r.passed else "FAIL"
        print(f"{status} {r.name}: max rel error {r.max_rel_error:.3e} (tol {r.tolerance:g}, {r.cases} cases)")
    if args.out:
        out = _out_dir(args)
        pipeline.write_json(out / "gradcheck.json", [r.to_dict() for r in reports])
        pipeline.write_manifest(out, "gradcheck", cfg, outputs=["gradcheck.json"])
    return EXIT_OK if all(r.passed for r in reports) else EXIT_FAILED_CHECK


def cmd_refine(args) -> int:
    cfg = _config(args)
    out = _out_dir(args, args.scenes, args.net)
    sset = _load_scenes(args.scenes)
    net = _load_net(args.net)
    init = pipeline.initial_boxes(sset, cfg)
    boxes, record, table = pipeline.refine_gallery(sset, net, init, cfg)
    pipeline.write_boxes(out / "initial_boxes.csv", init)
    pipeline.write_boxes(out / "boxes.csv", boxes)
    pipeline.write_trace(out / "trace.csv", record)
    proxy.save_table(table, out / "proxy.ptb")
    for note in record.notes:
        log.warning(note)
    pipeline.write_manifest(out, "refine", cfg, {"scenes": args.scenes, "net": args.net},
                            ["initial_boxes.csv", "boxes.csv", "trace.csv", "proxy.ptb"])
    print(f"mean IoU {record.mean_iou[0]:.3f} after first step, {record.mean_iou[-1]:.3f} final "
          f"(initial {pipeline.mean_iou(init, pipeline.gallery_truth(sset)):.3f})")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _config(args)
    out = _out_dir(args, args.scenes, args.net, args.boxes)
    sset = _load_scenes(args.scenes)
    net = _load_net(args.net)
    gallery = pipeline.read_boxes(_require(args.boxes, "boxes CSV"))
    result, n_gal, kept = pipeline.evaluate_gallery(sset, net, gallery, cfg.gallery_size, cfg.seed)
    metrics = evaluation.write_metrics(out / "metrics.json", result, n_gal, cfg.seed)
    outputs = ["metrics.json"]
    if cfg.pr_curves:
        evaluation.write_pr_curves(out, result, kept.scenes, kept.boxes)
        outputs += [f"pr_query_{i}.csv" for i in range(len(result.queries))]
    pipeline.write_manifest(out, "eval", cfg, {"scenes": args.scenes, "net": args.net, "boxes": args.boxes}, outputs)
    print(f"mAP {metrics['map']:.4f}  rank-1 {metrics['rank1']:.4f}  rank-5 {metrics['rank5']:.4f}")
    return EXIT_OK


ABLATION_FIELDS = ("variant", "mean_iou", "map", "rank1", "rank5")


def cmd_ablate(args) -> int:
    cfg = _config(args)
    out = _out_dir(args)
    exp = pipeline.run_variants(pipeline.prepare(cfg), refine.LOSS_MODES)
    rows = []
    for name, o in exp.outcomes.items():
        rows.append({"variant": name, "mean_iou": o.mean_iou, "map": o.metrics["map"],
                     "rank1": o.metrics["rank1"], "rank5": o.metrics["rank5"]})
        pipeline.write_json(out / f"metrics_{name.replace('+', '_')}.json", o.metrics)
    with open(out / "ablation.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, ABLATION_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(float(v)) if isinstance(v, float) else v) for k, v in r.items()})
    pipeline.write_manifest(out, "ablate", cfg, outputs=["ablation.csv"])
    print(f"{'variant':<10}{'IoU':>8}{'mAP':>8}{'rank-1':>8}{'rank-5':>8}")
    for r in rows:
        print(f"{r['variant']:<10}{r['mean_iou']:>8.3f}{r['map']:>8.3f}{r['rank1']:>8.3f}{r['rank5']:>8.3f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="reidrefine",
        description="Box refinement supervised by a frozen re-ID network, on synthetic person-search scenes.",
        epilog=pipeline.config_help(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.epilog = pipeline.config_help()
        p.formatter_class = argparse.RawDescriptionHelpFormatter
        p.add_argument("--config", metavar="PATH", help="key = value config file")
        p.add_argument("--seed", type=int, default=None, help="run seed (default 0)")
        p.add_argument("--out", metavar="DIR", required=out_required, help="output directory")
        return p

    common(sub.add_parser("synth", help="generate a scene set"))
    p = common(sub.add_parser("pretrain", help="pretrain the embedding net on train-split crops"))
    p.add_argument("--scenes", required=True, metavar="DIR")
    common(sub.add_parser("gradcheck", help="finite-difference gradient checks"), out_required=False)
    p = common(sub.add_parser("refine", help="refine perturbed gallery boxes"))
    p.add_argument("--scenes", required=True, metavar="DIR")
    p.add_argument("--net", required=True, metavar="PATH")
    p.add_argument("--loss", choices=refine.LOSS_MODES)
    p.add_argument("--iters", type=int, metavar="N")
    p = common(sub.add_parser("eval", help="retrieval metrics for a set of gallery boxes"))
    p.add_argument("--scenes", required=True, metavar="DIR")
    p.add_argument("--net", required=True, metavar="PATH")
    p.add_argument("--boxes", required=True, metavar="CSV")
    p.add_argument("--gallery-size", type=int, metavar="N")
    p = common(sub.add_parser("ablate", help="baseline vs cls, tri and cls+tri refinement"))
    p.add_argument("--iters", type=int, metavar="N")
    p.add_argument("--gallery-size", type=int, metavar="N")
    return parser


COMMANDS = {
    "synth": cmd_synth,
    "pretrain": cmd_pretrain,
    "gradcheck": cmd_gradcheck,
    "refine": cmd_refine,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (InputError, FileNotFoundError, ValueError) as exc:
        print(f"reidrefine {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_BAD_INPUT
    except refine.RefineError as exc:
        print(f"reidrefine {args.command}: refinement failed: {exc}", file=sys.stderr)
        return EXIT_FAILED_CHECK


if __name__ == "__main__":
    sys.exit(main())
