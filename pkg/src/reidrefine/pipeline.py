"""Experiment plumbing shared by the command line and the acceptance suite.

A run is: synthesize scenes, pretrain the embedding net on ground-truth
crops of the train split, perturb the gallery ground truth into initial
boxes, refine them under the re-ID loss, and score retrieval of query
ground-truth crops against the gallery boxes before and after refinement.
"""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import platform
import typing
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import embednet, evaluation, proxy, refine, roi, scenes
from .numgrid import derive_seed, make_rng

log = logging.getLogger(__name__)

# child-seed tags, one per consumer of the run seed
SEED_PRETRAIN = 21
SEED_INIT_NET = 22
SEED_PERTURB = 5
SEED_GALLERY = 23


@dataclass
class RunConfig:
    seed: int = 0
    # scene generator
    n_scenes: int = 64
    n_ids: int = 8
    distractor_rate: float = 0.3
    overlap_rate: float = 0.3
    blur: float = 4.5
    max_instances: int = 4
    scene_h: int = 256
    scene_w: int = 256
    # pretraining
    pretrain_steps: int = 2000
    pretrain_batch: int = 16
    pretrain_lr: float = 1e-2
    # detector surrogate
    init_iou_lo: float = 0.4
    init_iou_hi: float = 0.7
    # refinement
    iterations: int = 2000
    batch_size: int = 4
    momentum: float = 0.9
    weight_decay: float = 5e-4
    base_lr: float = 0.0
    peak_lr: float = 5e-5
    final_lr: float = 5e-6
    warmup_iters: int = 500
    decay_after: int = 10_000
    margin: float = 0.5
    volume: int = 2
    loss: str = "cls+tri"
    negatives: str = proxy.NEG_TABLE
    center_gain: float = 10_000.0
    size_gain: float = 5.0
    # evaluation
    gallery_size: typing.Optional[int] = None
    pr_curves: bool = False

    def __post_init__(self):
        self.refine_config()  # validates the refinement fields
        if not 0 < self.init_iou_lo <= self.init_iou_hi <= 1:
            raise ValueError("need 0 < init_iou_lo <= init_iou_hi <= 1")

    def refine_config(self) -> refine.RefineConfig:
        names = {f.name for f in dataclasses.fields(refine.RefineConfig)}
        kw = {k: v for k, v in dataclasses.asdict(self).items() if k in names}
        return refine.RefineConfig(**kw)

    def pretrain_config(self) -> embednet.PretrainConfig:
        return embednet.PretrainConfig(steps=self.pretrain_steps, batch_size=self.pretrain_batch,
                                       lr=self.pretrain_lr, seed=derive_seed(self.seed, SEED_PRETRAIN))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


# -- config files ------------------------------------------------------------

def _coerce(name: str, raw: str, kind):
    raw = raw.strip()
    try:
        if kind is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if kind == typing.Optional[int]:
            return None if raw.lower() in ("", "none") else int(raw)
    except ValueError:
        raise ValueError(f"config key {name!r}: cannot parse {raw!r}") from None
    return raw


def _field_types() -> dict:
    hints = typing.get_type_hints(RunConfig)
    return {f.name: hints[f.name] for f in dataclasses.fields(RunConfig)}


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """``key = value`` lines with ``#`` comments; unknown keys are an error."""
    types = _field_types()
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ValueError(f"{source}:{lineno}: unknown config key {key!r}")
        out[key] = _coerce(key, value, types[key])
    return out


def load_config(path=None, **overrides) -> RunConfig:
    values = {}
    if path is not None:
        values.update(parse_config_text(Path(path).read_text(), str(path)))
    types = _field_types()
    for k, v in overrides.items():
        if v is None:
            continue
        if k not in types:
            raise ValueError(f"unknown config key {k!r}")
        values[k] = v
    return RunConfig(**values)


def config_help() -> str:
    rows = [f"  {f.name} = {f.default}" for f in dataclasses.fields(RunConfig)]
    return "config keys and defaults:\n" + "\n".join(rows)


# -- pipeline stages -----------------------------------------------------------

def build_scenes(cfg: RunConfig) -> scenes.SceneSet:
    """Generate the scene set at 8-bit precision, exactly as it reads back from disk."""
    s = scenes.synth(cfg.n_scenes, cfg.n_ids, cfg.distractor_rate, cfg.overlap_rate, seed=cfg.seed,
                     size=(cfg.scene_h, cfg.scene_w), max_instances=cfg.max_instances, blur=cfg.blur)
    return scenes.quantize(s)


def gt_crops(sset: scenes.SceneSet, split: str, shape=(roi.CROP_H, roi.CROP_W)):
    items = list(sset.instances(split))
    if not items:
        raise ValueError(f"no annotated instances in split {split!r}")
    crops = np.stack([roi.crop(sset.scenes[i], a.box, *shape).V for i, a in items])
    labels = np.array([a.identity for _, a in items], dtype=np.int64)
    return crops, labels


def pretrain_net(sset: scenes.SceneSet, cfg: RunConfig):
    crops, labels = gt_crops(sset, "train")
    n_ids = max(cfg.n_ids, int(labels.max()) + 1)
    net = embednet.init_net(n_ids, seed=derive_seed(cfg.seed, SEED_INIT_NET))
    net, report = embednet.pretrain(net, crops, labels, cfg.pretrain_config())
    log.info("pretrained on %d crops, train accuracy %.3f", len(crops), report.train_accuracy)
    return net.freeze(), report


@dataclass
class GalleryBoxes:
    scenes: list[int]
    boxes: list[roi.BBox]
    ids: list[int]


def gallery_truth(sset: scenes.SceneSet) -> GalleryBoxes:
    items = list(sset.instances("gallery"))
    return GalleryBoxes([i for i, _ in items], [a.box for _, a in items], [a.identity for _, a in items])


def initial_boxes(sset: scenes.SceneSet, cfg: RunConfig) -> GalleryBoxes:
    """Detector surrogate: ground-truth gallery boxes jittered into the IoU band."""
    gt = gallery_truth(sset)
    rng = make_rng(derive_seed(cfg.seed, SEED_PERTURB))
    shape = sset.scenes[0].shape
    boxes = refine.perturb_boxes(gt.boxes, (cfg.init_iou_lo, cfg.init_iou_hi), rng, shape)
    return GalleryBoxes(gt.scenes, boxes, gt.ids)


def refine_gallery(sset: scenes.SceneSet, net: embednet.EmbedNet, init: GalleryBoxes, cfg: RunConfig,
                   loss: str | None = None, iterations: int | None = None):
    rcfg = cfg.refine_config()
    if loss is not None:
        rcfg = dataclasses.replace(rcfg, loss=loss)
    if iterations is not None:
        rcfg = dataclasses.replace(rcfg, iterations=iterations)
    truth = gallery_truth(sset)
    table = proxy.table_init(net.n_ids, rcfg.volume, net.dim)
    record = refine.refine_boxes([sset.scenes[i] for i in init.scenes], init.boxes, init.ids, net, table,
                                 rcfg, truth.boxes)
    return GalleryBoxes(list(init.scenes), record.final_boxes, list(init.ids)), record, table


def embed_boxes(sset: scenes.SceneSet, net: embednet.EmbedNet, scene_idx, boxes, chunk: int = 64):
    H, W, _ = net.input_shape
    out = []
    for k in range(0, len(boxes), chunk):
        crops = np.stack([roi.crop(sset.scenes[i], b, H, W).V
                          for i, b in zip(scene_idx[k:k + chunk], boxes[k:k + chunk])])
        out.append(embednet.forward_batch(net, crops)[0])
    return np.concatenate(out) if out else np.zeros((0, net.dim))


def evaluate_gallery(sset: scenes.SceneSet, net: embednet.EmbedNet, gallery: GalleryBoxes,
                     gallery_size: int | None = None, seed: int = 0):
    """Score query ground-truth crops against ``gallery``.

    Returns ``(result, n_gallery_scenes, kept)`` where ``kept`` is the part of
    ``gallery`` the ranking indexes into.

    With ``gallery_size`` only a seeded subset of gallery scenes is kept, and
    queries whose identity does not appear in it are dropped.
    """
    keep = set(evaluation.subsample_gallery(sset.indices("gallery"), gallery_size,
                                            derive_seed(seed, SEED_GALLERY)))
    sel = [k for k, s in enumerate(gallery.scenes) if s in keep]
    g_scenes = [gallery.scenes[k] for k in sel]
    g_boxes = [gallery.boxes[k] for k in sel]
    gt = {i: [(a.box, a.identity) for a in sset.annotations[i]] for i in sorted(keep)}
    present = {ident for anns in gt.values() for _, ident in anns}
    q_items = [(i, a) for i, a in sset.instances("query") if a.identity in present]
    if not q_items:
        raise ValueError("no query identity appears in the selected gallery")
    q_emb = embed_boxes(sset, net, [i for i, _ in q_items], [a.box for _, a in q_items])
    g_emb = embed_boxes(sset, net, g_scenes, g_boxes)
    result = evaluation.evaluate(q_emb, [a.identity for _, a in q_items], g_emb, g_scenes, g_boxes, gt)
    kept = GalleryBoxes(g_scenes, g_boxes, [gallery.ids[k] for k in sel])
    return result, len(keep), kept


def mean_iou(boxes: GalleryBoxes, truth: GalleryBoxes) -> float:
    return float(np.mean([evaluation.iou(b, g) for b, g in zip(boxes.boxes, truth.boxes)]))


@dataclass
class Outcome:
    name: str
    mean_iou: float
    metrics: dict
    record: refine.RefineRecord | None = None
    boxes: GalleryBoxes | None = None


@dataclass
class Experiment:
    cfg: RunConfig
    sset: scenes.SceneSet
    net: embednet.EmbedNet
    pretrain_accuracy: float
    init: GalleryBoxes
    outcomes: dict[str, Outcome] = field(default_factory=dict)


def prepare(cfg: RunConfig) -> Experiment:
    sset = build_scenes(cfg)
    net, report = pretrain_net(sset, cfg)
    return Experiment(cfg, sset, net, report.train_accuracy, initial_boxes(sset, cfg))


def score(exp: Experiment, name: str, boxes: GalleryBoxes, record=None) -> Outcome:
    result, n_gal, _ = evaluate_gallery(exp.sset, exp.net, boxes, exp.cfg.gallery_size, exp.cfg.seed)
    out = Outcome(name, mean_iou(boxes, gallery_truth(exp.sset)),
                  evaluation.metrics_dict(result, n_gal, exp.cfg.seed), record, boxes)
    exp.outcomes[name] = out
    return out


def run_variants(exp: Experiment, losses=("cls+tri",)) -> Experiment:
    """Baseline (unrefined boxes) plus one refinement per loss variant."""
    score(exp, "baseline", exp.init)
    for loss in losses:
        boxes, record, _ = refine_gallery(exp.sset, exp.net, exp.init, exp.cfg, loss=loss)
        score(exp, loss, boxes, record)
    return exp


# -- artifacts -----------------------------------------------------------------

BOX_FIELDS = ("scene", "x1", "y1", "x2", "y2", "id")
TRACE_FIELDS = ("iter", "loss", "mean_iou", "lr")


def write_boxes(path, boxes: GalleryBoxes) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(BOX_FIELDS)
        for s, b, i in zip(boxes.scenes, boxes.boxes, boxes.ids):
            w.writerow([s, *(repr(float(v)) for v in b.as_tuple()), i])


def read_boxes(path) -> GalleryBoxes:
    out = GalleryBoxes([], [], [])
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(BOX_FIELDS) - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{path}: missing columns {sorted(missing)}")
        for row in reader:
            out.scenes.append(int(row["scene"]))
            out.boxes.append(roi.BBox.of([row["x1"], row["y1"], row["x2"], row["y2"]]))
            out.ids.append(int(row["id"]))
    return out


def write_trace(path, record: refine.RefineRecord) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_FIELDS)
        for it, (l, m, lr) in enumerate(zip(record.losses, record.mean_iou, record.lrs)):
            w.writerow([it, repr(float(l)), repr(float(m)), repr(float(lr))])


def write_json(path, payload) -> None:
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def write_manifest(out_dir, command: str, cfg: RunConfig, inputs: dict | None = None,
                   outputs: list[str] | None = None) -> Path:
    path = Path(out_dir) / "manifest.json"
    write_json(path, {
        "command": command,
        "config": cfg.to_dict(),
        "seed": cfg.seed,
        "inputs": {k: str(v) for k, v in (inputs or {}).items()},
        "outputs": sorted(outputs or []),
        "numpy": np.__version__,
        "python": platform.python_version(),
    })
    return path
