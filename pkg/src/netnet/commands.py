"""Implementations behind the command-line subcommands.

Every command writes into its own run directory: a copy of the effective
config, its outputs, and ``manifest.json`` listing them.  Nothing written to
disk depends on wall-clock time, so a fixed (config, seed) reproduces every
file byte for byte.
"""
from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import io
from .boxes import GroundTruthBox
from .config import RunConfig
from .detector import Detector, DivergenceError, Variant, predict_batch, train
from .evaluation import COCO_IOUS, error_report, fn_analysis, pr_curve, summarize
from .gradcheck import REGISTRY, run_all
from .netm import compute_gate, erase, extract_salient
from .nnops import ConfigError
from .pyramid import forward_pyramid
from .scenes import SCALE_CLASSES, generate_dataset, generate_scene, large_object_mask, to_pgm
from .tensor import Tape, Tensor, sigmoid

log = logging.getLogger(__name__)

PFP_THRESHOLDS = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0)
ABLATE_COLUMNS = ("AP", "AP50", "AP75", "AP_s", "AP_m", "AP_l", "fn_rate", "fn_small", "pfp_0.5", "final_loss")
ORACLE_LOGIT = 40.0


class RunDir:
    def __init__(self, root, command: str, cfg: RunConfig):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.command = command
        self.cfg = cfg
        self.files: list[str] = []
        self.write_text("config.txt", cfg.dumps())

    def path(self, name: str) -> Path:
        if name not in self.files:
            self.files.append(name)
        return self.root / name

    def write_text(self, name: str, text: str):
        self.path(name).write_text(text, encoding="utf-8")

    def write_bytes(self, name: str, data: bytes):
        self.path(name).write_bytes(data)

    def write_csv(self, name, header, rows):
        self.write_text(name, io.csv_text(header, rows))

    def finish(self, status: int, **extra) -> int:
        doc = {"command": self.command, "seed": self.cfg.seed, "profile": self.cfg.profile,
               "status": status, "files": sorted(self.files), **extra}
        (self.root / "manifest.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")
        return status


def _gts_of(scenes, first_id: int = 0) -> list[GroundTruthBox]:
    return [GroundTruthBox(*g.coords, g.class_id, g.scale_class, first_id + i)
            for i, sc in enumerate(scenes) for g in sc.gts]


def _predict_kwargs(cfg: RunConfig) -> dict:
    return {"score_thresh": cfg.get("eval.score_thresh", 0.05), "nms_thresh": cfg.get("eval.nms_thresh", 0.45),
            "top_k": cfg.get("eval.top_k", 100)}


def build_model(cfg: RunConfig, variant: str | None = None, seed: int | None = None,
                checkpoint=None) -> Detector:
    model = Detector(cfg.model_config(variant), seed=cfg.seed if seed is None else seed)
    if checkpoint is not None:
        io.load_checkpoint(checkpoint, model.named_parameters())
    return model


def metric_rows(dets, gts, thresholds=PFP_THRESHOLDS) -> list[tuple]:
    """(metric, filter, threshold, value) rows covering AP, FN, FP and PFP."""
    summ = summarize(dets, gts)
    coco = f"{COCO_IOUS[0]:.2f}:{COCO_IOUS[-1]:.2f}"
    rows = [("AP", "all", coco, summ["AP"]), ("AP", "all", "0.5", summ["AP50"]), ("AP", "all", "0.75", summ["AP75"])]
    for name, key in zip(SCALE_CLASSES, ("AP_s", "AP_m", "AP_l")):
        rows.append(("AP", name, coco, summ[key]))
    rep = error_report(dets, gts, thresholds)
    fn = fn_analysis(dets, gts)
    rows.append(("detections", "all", "", rep.total_detections))
    rows.append(("gts", "all", "", rep.total_gts))
    rows.append(("fp_count", "all", "0.5", rep.fp_count))
    for t in thresholds:
        rows.append(("pfp_rate", "all", f"{t:g}", rep.pfp_ratio[t]))
    rows.append(("fn_count", "all", "0.5", rep.fn_count))
    rows.append(("fn_rate", "all", "0.5", fn.rate))
    for name in SCALE_CLASSES:
        rows.append(("fn_rate", name, "0.5", fn.scale_rate(name)))
    return rows


# --------------------------------------------------------------------------
# commands


def cmd_gradcheck(cfg: RunConfig, out, corrupt: str | None = None) -> int:
    if corrupt is not None and corrupt not in REGISTRY:
        raise ConfigError(f"no gradient check named {corrupt!r}")
    run = RunDir(out, "gradcheck", cfg)
    results = run_all(cfg.get("gradcheck.seeds", 20), cfg.seed, corrupt)
    run.write_csv("gradcheck.csv", ("op", "max_rel_error", "max_abs_near_zero", "seeds", "inputs", "coords", "non_smooth", "passed"),
                  [(r.name, r.max_rel, r.max_abs_near_zero, r.seeds, r.n_inputs, r.n_coords, r.n_skipped, "yes" if r.passed else "no")
                   for r in results])
    failed = [r.name for r in results if not r.passed]
    for name in failed:
        log.error("gradient check failed: %s", name)
    return run.finish(1 if failed else 0, failed=failed)


def _train_one(cfg: RunConfig, variant: str | None, seed: int, progress=None):
    scenes = generate_dataset(cfg.scene_config(), seed, cfg.train_count, "train")
    model = build_model(cfg, variant, seed)
    history = train(model, scenes, cfg.train_config(seed), progress)
    return model, history


def cmd_train(cfg: RunConfig, out) -> int:
    run = RunDir(out, "train", cfg)
    try:
        model, history = _train_one(cfg, None, cfg.seed)
    except DivergenceError as e:
        log.error("%s", e)
        return run.finish(1, error=str(e))
    run.write_csv("loss.csv", ("epoch", "loss"), list(enumerate(history)))
    io.save_checkpoint(run.path("model.ckpt"), model.named_parameters())
    return run.finish(0)


def _evaluate(cfg: RunConfig, model: Detector, seed: int):
    scenes = generate_dataset(cfg.scene_config(), seed, cfg.test_count, "test")
    dets = [d for ds in predict_batch(scenes, model, **_predict_kwargs(cfg)) for d in ds]
    return scenes, dets, _gts_of(scenes)


def cmd_eval(cfg: RunConfig, out, checkpoint=None) -> int:
    run = RunDir(out, "eval", cfg)
    model = build_model(cfg, checkpoint=checkpoint)
    scenes, dets, gts = _evaluate(cfg, model, cfg.seed)
    size = cfg.scene_config().image_size
    run.write_text("detections.json", io.dumps_detections(dets, size))
    run.write_text("gts.json", io.dumps_gts(gts, size, len(scenes)))
    run.write_csv("metrics.csv", ("metric", "filter", "threshold", "value"),
                  metric_rows(dets, gts, cfg.get("eval.pfp_thresholds", PFP_THRESHOLDS)))
    return run.finish(0)


def run_variant(cfg: RunConfig, variant: str, seed: int) -> dict:
    """Train one variant on one seed's data and score it on that seed's test split."""
    model, history = _train_one(cfg, variant, seed)
    _, dets, gts = _evaluate(cfg, model, seed)
    summ = summarize(dets, gts)
    fn = fn_analysis(dets, gts)
    pfp = error_report(dets, gts, (0.5,)).pfp_ratio[0.5]
    return {**summ, "fn_rate": fn.rate, "fn_small": fn.scale_rate("small"), "pfp_0.5": pfp,
            "final_loss": history[-1]}


def _run_variant_job(args):
    values, variant, seed = args
    return run_variant(RunConfig(values), variant, seed)


def ablation_rows(results: dict, variants, seeds) -> list[tuple]:
    rows = []
    for v in variants:
        for s in seeds:
            rows.append((v, s, *[results[v, s][c] for c in ABLATE_COLUMNS]))
    for v in variants:
        means = []
        for c in ABLATE_COLUMNS:
            vals = [results[v, s][c] for s in seeds]
            means.append(math.nan if any(math.isnan(x) for x in vals) else float(np.mean(vals)))
        rows.append((v, "mean", *means))
    return rows


def cmd_ablate(cfg: RunConfig, out) -> int:
    run = RunDir(out, "ablate", cfg)
    variants = list(cfg.get("ablate.variants", (Variant.BASELINE.value, Variant.NETM.value)))
    seeds = [cfg.seed + i for i in range(cfg.get("ablate.seeds", 5))]
    jobs = [(cfg.values, v, s) for v in variants for s in seeds]
    workers = cfg.get("ablate.workers", 1)
    try:
        if workers > 1:
            with ProcessPoolExecutor(workers) as pool:
                outs = list(pool.map(_run_variant_job, jobs))
        else:
            outs = []
            for job in jobs:
                log.info("ablate: variant %s seed %d", job[1], job[2])
                outs.append(_run_variant_job(job))
    except DivergenceError as e:
        log.error("%s", e)
        return run.finish(1, error=str(e))
    results = {(v, s): r for (_, v, s), r in zip(jobs, outs)}
    run.write_csv("ablation.csv", ("variant", "seed", *ABLATE_COLUMNS), ablation_rows(results, variants, seeds))
    return run.finish(0)


def cmd_analyze(cfg: RunConfig, out, detections, gts_path) -> int:
    run = RunDir(out, "analyze", cfg)
    gts, size = io.loads_gts(Path(gts_path).read_text(encoding="utf-8"))
    dets = io.loads_detections(Path(detections).read_text(encoding="utf-8"), size)
    run.write_csv("errors.csv", ("metric", "filter", "threshold", "value"),
                  metric_rows(dets, gts, cfg.get("eval.pfp_thresholds", PFP_THRESHOLDS)))
    for thresh, tag in ((0.75, "C75"), (0.5, "C50")):
        for scale in (None, *SCALE_CLASSES):
            curve = pr_curve(dets, gts, thresh, scale)
            run.write_csv(f"pr_{tag}_{scale or 'all'}.csv", ("recall", "precision"), curve.points())
    return run.finish(0)


def cmd_viz(cfg: RunConfig, out, checkpoint=None, oracle: bool = False) -> int:
    """Dump p_1, the gate, p_es and the erased p_1 for one generated scene.

    With ``oracle`` the gate is not learned: it is sigmoid(+-40) of the
    medium/large object mask at p_1's resolution.
    """
    run = RunDir(out, "viz", cfg)
    model = build_model(cfg, checkpoint=checkpoint)
    if not model.wiring and not oracle:
        log.error("variant %s has no gate to visualize; use the oracle gate", model.config.variant.value)
        return run.finish(1, error="no gate")
    scene = generate_scene(cfg.scene_config(), cfg.seed)
    with Tape():
        feats = forward_pyramid(scene.image, model.backbone)
        p1 = feats[0]
        if oracle:
            mask = large_object_mask(scene, p1.shape)
            g = sigmoid(Tensor(ORACLE_LOGIT * (2.0 * mask.data - 1.0)))
        else:
            first = model.wiring[0]
            g = compute_gate(feats[first.deep], p1.shape, first.nem.gate.mode, first.nem.gate)
        p_es = extract_salient(p1, g)
        erased = erase(p1, p_es)
    size = cfg.scene_config().image_size
    run.write_bytes("image.pgm", to_pgm(scene.image.data))
    run.write_text("gts.json", io.dumps_gts(scene.gts, size, 1))
    # shared intensity scale so a nulled region really renders black
    top = max(float(np.abs(p1.data).mean(axis=0).max()), 1e-12)
    for name, t in (("p1", p1), ("p_es", p_es), ("p1_erased", erased)):
        run.write_bytes(f"{name}.pgm", to_pgm(np.abs(t.data).mean(axis=0), 0.0, top))
    run.write_bytes("gate.pgm", to_pgm(g.data.mean(axis=0), 0.0, 1.0))
    return run.finish(0, oracle=oracle)
