"""Acceptance criteria.  Each test reports one PASS/FAIL line in the summary.

The directional ablation (criteria 7 and 8) trains 10 models and takes most
of an hour on one CPU, so its CSV is cached under runs/acceptance and reused
while the config text is unchanged.  Set NETNET_ACCEPTANCE_DIR to move it,
delete the directory to force a rerun.
"""
import json
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest

from netnet import nnops
from netnet.boxes import Detection, GroundTruthBox
from netnet.cli import main
from netnet.config import parse_config
from netnet.detector import Detector
from netnet.evaluation import compute_ap, pfp_rate
from netnet.gradcheck import REGISTRY, run_all
from netnet.io import read_csv
from netnet.netm import erase, extract_salient, wire
from netnet.nnfm import nnfm_apply
from netnet.pyramid import PyramidConfig, build_backbone, forward_pyramid
from netnet.scenes import SceneConfig, generate_scene, large_object_mask
from netnet.tensor import Tensor, sigmoid
from oracles import all_subsets, brute_ap, naive_conv, naive_pool, naive_upsample

REPORT = []


def report(n, ok, detail):
    REPORT.append(f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}")
    return ok


def random_pairs(n=1000, seed=0):
    rng = np.random.default_rng(seed)
    for _ in range(n):
        c, h = rng.integers(1, 5), rng.integers(1, 9)
        yield rng.standard_normal((c, h, h)), rng.uniform(1e-9, 1 - 1e-9, (c, h, h))


def test_c1_reversed_gate_identity():
    t = time.process_time()
    worst = max(np.abs(erase(Tensor(p), extract_salient(Tensor(p), Tensor(g))).data - p * (1 - g)).max()
                for p, g in random_pairs())
    dt = time.process_time() - t
    assert report(1, worst <= 1e-12 and dt < 5, f"reversed-gate identity max err {worst:.2e} over 1000 pairs "
                  f"(tol 1e-12), {dt:.2f}s (limit 5s)")


def test_c2_conservation():
    worst = 0.0
    for p, g in random_pairs():
        es = extract_salient(Tensor(p), Tensor(g))
        worst = max(worst, np.abs(es.data + erase(Tensor(p), es).data - p).max())
    assert report(2, worst <= 1e-12, f"p_es + erased == p, max err {worst:.2e} (tol 1e-12)")


def test_c3_gradient_suite():
    t = time.process_time()
    results = run_all(20)
    dt = time.process_time() - t
    failed = [r.name for r in results if not r.passed]
    worst = max(r.max_rel for r in results)
    params = sum(p.size for p in _mini_params())
    ok = not failed and dt < 120 and len(results) == len(REGISTRY) and params <= 500
    assert report(3, ok, f"{len(results)} gradient checks x 20 seeds, worst rel {worst:.2e} (tol 1e-4), "
                  f"failed {failed or 'none'}, end-to-end model {params} params, {dt:.0f}s CPU (limit 120s)")


def _mini_params():
    from netnet.gradcheck import mini_detector
    return [p.data for p in mini_detector(0).parameters()]


def test_c4_oracle_gate_nulling():
    bb = build_backbone(PyramidConfig.desk(), 0)
    scenes = (generate_scene(SceneConfig(), s) for s in range(1000))
    scenes = [sc for sc in scenes if any(g.scale_class != "small" for g in sc.gts)][:20]
    worst = 0.0
    for sc in scenes:
        p1 = forward_pyramid(sc.image, bb)[0]
        mask = large_object_mask(sc, p1.shape)
        g = sigmoid(Tensor(40.0 * (2.0 * mask.data - 1.0)))
        erased = erase(p1, extract_salient(p1, g)).data
        region = np.broadcast_to(mask.data > 0, p1.shape)
        before = float((p1.data[region] ** 2).sum())
        assert before > 0
        worst = max(worst, float((erased[region] ** 2).sum()) / before)
    assert report(4, len(scenes) == 20 and worst <= 1e-10,
                  f"masked energy ratio after oracle erase {worst:.2e} on {len(scenes)} scenes (tol 1e-10)")


GT_POOL = [(0.0, 0.0, 0.2, 0.2), (0.3, 0.3, 0.6, 0.6), (0.25, 0.3, 0.55, 0.6), (0.7, 0.1, 0.9, 0.4)]
DET_POOL = [((0.0, 0.0, 0.2, 0.2), 0.9), ((0.31, 0.3, 0.6, 0.62), 0.8), ((0.02, 0.0, 0.21, 0.19), 0.8),
            ((0.26, 0.28, 0.56, 0.6), 0.7), ((0.5, 0.5, 0.8, 0.8), 0.6), ((0.7, 0.15, 0.88, 0.4), 0.3)]


def test_c5_evaluator_equivalence():
    mismatches = fixtures = 0
    for gsub in all_subsets(4):
        gts = [GT_POOL[i] for i in gsub]
        for dsub in all_subsets(6):
            ds = [DET_POOL[i] for i in dsub]
            for t in (0.5, 0.75):
                got = compute_ap([Detection(*b, 1, s) for b, s in ds], [GroundTruthBox(*b, 1) for b in gts], t)
                want = brute_ap(ds, gts, t)
                fixtures += 1
                mismatches += not (got == want or (math.isnan(got) and math.isnan(want)))
    gt = [GroundTruthBox(0.0, 0.0, 0.5, 0.5, 1)]
    half, inside, outside = (Detection(0.25, 0.0, 0.75, 0.5, 1, 0.9), Detection(0.1, 0.1, 0.2, 0.2, 1, 0.8),
                             Detection(0.6, 0.6, 0.7, 0.7, 1, 0.7))
    pfp_ok = (pfp_rate([half], gt, [0.5, 0.51]) == {0.5: 1.0, 0.51: 0.0}
              and pfp_rate([half, inside, outside], gt, [0.5, 1.0]) == {0.5: 2 / 3, 1.0: 1 / 3})
    assert report(5, mismatches == 0 and pfp_ok,
                  f"compute_ap == brute force on {fixtures} fixtures ({mismatches} mismatches, exact), "
                  f"pfp fixtures {'match' if pfp_ok else 'differ'} (half-inside p=0.5)")


def test_c6_kernel_equivalence():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(10):
        x = rng.standard_normal((3, 7, 7))
        for k, stride in ((1, 1), (3, 1), (3, 2)):
            w, b = rng.standard_normal((4, 3, k, k)), rng.standard_normal(4)
            p = nnops.ConvParams(nnops.Parameter(w), nnops.Parameter(b), stride, k // 2)
            worst = max(worst, np.abs(nnops.conv(Tensor(x), p).data - naive_conv(x, w, b, stride, k // 2)).max())
        for mode, win, st, pad in (("max", 2, 2, 0), ("max", 3, 2, 1), ("max", 3, 1, 0), ("avg", 2, 2, 0),
                                   ("avg", 3, 2, 0), ("avg", 3, 1, 0)):
            got = nnops.pool(Tensor(x), mode, win, st, pad).data
            worst = max(worst, np.abs(got - naive_pool(x, mode, win, st, pad)).max())
        for oh, ow in ((7, 7), (13, 9), (19, 19)):
            worst = max(worst, np.abs(nnops.bilinear_upsample(Tensor(x), oh, ow).data - naive_upsample(x, oh, ow)).max())
    assert report(6, worst <= 1e-10, f"conv/pool/upsample vs nested loops max err {worst:.2e} (tol 1e-10)")


TINY = """scene.train_count = 8
scene.test_count = 4
train.epochs = 2
train.warmup_epochs = 1
train.milestones = 1
train.batch_size = 4
"""


def test_c9_determinism(tmp_path):
    cfg = tmp_path / "tiny.cfg"
    cfg.write_text(TINY)
    for tag in ("a", "b"):
        out = tmp_path / tag
        assert main(["train", "--config", str(cfg), "--seed", "4", "--out", str(out / "train")]) == 0
        assert main(["eval", "--config", str(cfg), "--seed", "4", "--checkpoint", str(out / "train" / "model.ckpt"),
                     "--out", str(out / "eval")]) == 0
        assert main(["analyze", "--detections", str(out / "eval" / "detections.json"),
                     "--gts", str(out / "eval" / "gts.json"), "--out", str(out / "analyze")]) == 0
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    csvs = [f for f in files if f.suffix == ".csv"]
    differ = [str(f) for f in files if (tmp_path / "a" / f).read_bytes() != (tmp_path / "b" / f).read_bytes()]
    assert report(9, not differ and len(csvs) >= 10,
                  f"two runs of train/eval/analyze: {len(csvs)} CSVs, {len(files)} files, differing: {differ or 'none'}")


def test_c10_shape_conformance():
    cfg = parse_config("profile = full\n")
    problems = []
    for variant in ("netm", "netnet"):
        model = Detector(cfg.model_config(variant), seed=0)
        feats = forward_pyramid(Tensor(np.random.default_rng(0).uniform(size=(1, 300, 300))), model.backbone)
        sizes = [f.shape[-1] for f in feats]
        if sizes != [38, 19, 10, 5, 3, 1]:
            problems.append(f"sizes {sizes}")
        shapes = [f.shape for f in feats]
        if model.nnfm:
            fused = nnfm_apply(feats, model.nnfm)
            problems += [f"nnfm {a}->{b}" for a, b in zip(shapes, (f.shape for f in fused)) if a != b]
            feats = fused
        wired = wire(feats, model.config.topology, model.wiring)
        problems += [f"netm {a}->{b}" for a, b in zip(shapes, (f.shape for f in wired)) if a != b]
    assert report(10, not problems, f"full profile pyramid 38/19/10/5/3/1, NETM/NNFM level shapes kept: "
                  f"{'; '.join(problems) or 'ok'}")


# --------------------------------------------------------------------------
# directional ablation

ABLATION_CFG = """# desk protocol: 500 train / 100 test scenes, 30 epochs, 5 seeds
scene.train_count = 500
scene.test_count = 100
train.epochs = 30
ablate.variants = baseline, netm
ablate.seeds = 5
"""


def ablation():
    root = Path(os.environ.get("NETNET_ACCEPTANCE_DIR", Path(__file__).resolve().parents[1] / "runs" / "acceptance"))
    out = root / "ablation"
    cfg = root / "ablation.cfg"
    timing = root / "ablation_seconds.txt"
    cached = (out / "ablation.csv").exists() and cfg.exists() and cfg.read_text() == ABLATION_CFG and timing.exists()
    if not cached:
        root.mkdir(parents=True, exist_ok=True)
        cfg.write_text(ABLATION_CFG)
        t = time.process_time()
        assert main(["ablate", "--config", str(cfg), "--out", str(out)]) == 0
        timing.write_text(f"{time.process_time() - t:.0f}\n")
    rows = read_csv(out / "ablation.csv")
    per = {(r["variant"], r["seed"]): {k: float("nan") if v == "absent" else float(v) for k, v in r.items()
                                        if k not in ("variant", "seed")} for r in rows}
    seeds = sorted({s for _, s in per if s != "mean"}, key=int)
    return per, seeds, float(timing.read_text()), cached


@pytest.mark.slow
def test_c7_directional_ablation():
    per, seeds, secs, cached = ablation()
    d_ap = [per["netm", s]["AP_s"] - per["baseline", s]["AP_s"] for s in seeds]
    d_fn = [per["netm", s]["fn_small"] - per["baseline", s]["fn_small"] for s in seeds]
    wins = sum(a > 0 and f < 0 for a, f in zip(d_ap, d_fn))
    mean_ap, mean_fn = float(np.mean(d_ap)), float(np.mean(d_fn))
    ok = len(seeds) == 5 and wins >= 4 and mean_ap > 0 and mean_fn < 0
    detail = (f"NETM vs baseline over {len(seeds)} seeds: AP_s delta {mean_ap:+.4f} "
              f"(per seed {', '.join(f'{x:+.3f}' for x in d_ap)}), small FN delta {mean_fn:+.4f} "
              f"(per seed {', '.join(f'{x:+.3f}' for x in d_fn)}), both improved in {wins}/5 (need 4 and positive mean)")
    report(7, ok, detail)
    report("7-runtime", secs < 1200, f"ablation {secs:.0f}s CPU (target 1200s){', cached' if cached else ''}")
    assert ok, detail


@pytest.mark.slow
def test_c8_pfp_direction():
    per, seeds, _, _ = ablation()
    d = [per["netm", s]["pfp_0.5"] - per["baseline", s]["pfp_0.5"] for s in seeds]
    wins = sum(x <= 0 for x in d)
    ok = len(seeds) == 5 and wins >= 4
    detail = (f"pfp_rate@0.5 NETM minus baseline per seed {', '.join(f'{x:+.4f}' for x in d)}, "
              f"NETM <= baseline in {wins}/5 (need 4), mean delta {float(np.mean(d)):+.4f}")
    report(8, ok, detail)
    assert ok, detail
