"""Acceptance criteria, each timed against its runtime budget.

Every test appends one PASS/FAIL line to the terminal summary.
"""

import json
import math
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import torch

from cinema import backbone, cli, heads, metrics, phantom, stats, training, unet
from cinema.backbone import CineMA, MultiViewEncoder

from . import test_heads, test_metrics
from .conftest import ACCEPTANCE_LINES, desk_cohort, tiny_config
from .gradcheck import directional_check


@contextmanager
def criterion(number: int, title: str, budget_s: float):
    notes: list[str] = []
    t0 = time.perf_counter()
    try:
        yield notes
    except BaseException as e:
        secs = time.perf_counter() - t0
        ACCEPTANCE_LINES.append(f"criterion {number}: FAIL {title} ({secs:.1f}s) {type(e).__name__}: {e}".splitlines()[0])
        print(ACCEPTANCE_LINES[-1])
        raise
    secs = time.perf_counter() - t0
    ok = secs <= budget_s
    detail = "; ".join(notes)
    verdict = "PASS" if ok else f"FAIL over budget {budget_s:.0f}s"
    ACCEPTANCE_LINES.append(f"criterion {number}: {verdict} {title} ({secs:.1f}s) {detail}")
    print(ACCEPTANCE_LINES[-1])
    assert ok, f"took {secs:.1f}s, budget {budget_s}s"


def test_1_architecture_bookkeeping():
    with criterion(1, "token bookkeeping", 1.0) as notes:
        cfg = backbone.base_config()
        sax, lax = cfg.view("sax"), cfg.view("lax_4c")
        assert sax.input_size == (192, 192, 16) and sax.n_tokens == 2304
        assert lax.n_tokens == 256
        pattern = backbone.sample_mask_pattern(cfg, 1, np.random.default_rng(0))
        n_masked = int(np.asarray(pattern.masks["lax_4c"]).sum())
        assert n_masked == 192
        notes.append(f"SAX {sax.n_tokens}, LAX {lax.n_tokens}, masked {n_masked}/256")


def test_2_parameter_budget():
    with criterion(2, "parameter budget", 10.0) as notes:
        n = backbone.param_count(backbone.base_config())
        assert abs(n - 126e6) / 126e6 <= 0.15
        notes.append(f"base {n / 1e6:.1f}M")


def test_3_mask_non_leakage():
    with criterion(3, "mask non-leakage", 30.0) as notes:
        worst = 0.0
        for cfg in (backbone.desk_config(), tiny_config()):
            torch.manual_seed(0)
            model = CineMA(cfg).eval()
            g = torch.Generator().manual_seed(1)
            a = {v.view_id: torch.rand((2, 1) + v.input_size, generator=g) for v in cfg.views}
            pattern = backbone.sample_mask_pattern(cfg, 2, np.random.default_rng(2))
            b = {}
            for v, x in a.items():
                pm = backbone.pixel_mask(pattern.masks[v], cfg.view(v)).unsqueeze(1).bool()
                assert pm.any() and not pm.all()
                b[v] = torch.where(pm, torch.randn(x.shape, generator=g) * 10, x)
            with torch.no_grad():
                ea, eb = model.encoder(a, pattern), model.encoder(b, pattern)
            worst = max(worst, float((ea.tokens - eb.tokens).abs().max()))
        assert worst <= 1e-6
        notes.append(f"max token change {worst:.1e}")


def test_4_gradient_fidelity():
    with criterion(4, "gradient fidelity (float64)", 300.0) as notes:
        cfg = tiny_config()
        g = torch.Generator().manual_seed(1)
        sax = torch.rand(2, 1, 32, 32, 2, generator=g, dtype=torch.float64)
        lax = torch.rand(2, 1, 32, 32, generator=g, dtype=torch.float64)
        images = {"sax": sax, **{v: torch.rand(2, 1, 32, 32, generator=g, dtype=torch.float64) for v in phantom.LAX_VIEWS}}
        seg_target = torch.randint(0, 4, (2, 32, 32, 2), generator=g)
        hm_target = torch.rand(2, 3, 32, 32, generator=g, dtype=torch.float64)
        coords = torch.rand(2, 6, generator=g, dtype=torch.float64) * 30
        frame = [{"sax": sax, "lax_4c": lax}]
        errors = {}

        torch.manual_seed(0)
        mae = CineMA(cfg).double()
        pattern = backbone.sample_mask_pattern(cfg, 2, np.random.default_rng(0))
        errors["backbone+masked_mse"] = directional_check(
            mae, lambda: backbone.masked_mse(mae(images, pattern), images, pattern, cfg)
        )
        cases = [
            ("segmentation+dice_ce", lambda: heads.SegmentationModel(MultiViewEncoder(cfg), "sax"),
             lambda m: heads.dice_ce(m(sax), seg_target)),
            ("heatmap+dice_ce", lambda: heads.HeatmapModel(MultiViewEncoder(cfg), "lax_4c"),
             lambda m: heads.dice_ce(m(lax), hm_target, activation="sigmoid")),
            ("binary+ce_label_smooth", lambda: heads.LinearModel(MultiViewEncoder(cfg), 1),
             lambda m: heads.ce_label_smooth(m(frame), torch.tensor([0, 1]))),
            ("multiclass+ce_label_smooth", lambda: heads.LinearModel(MultiViewEncoder(cfg), 3),
             lambda m: heads.ce_label_smooth(m(frame), torch.tensor([2, 0]))),
            ("regression+mse", lambda: heads.LinearModel(MultiViewEncoder(cfg), 1, n_frames=2),
             lambda m: heads.mse(m(frame * 2), torch.tensor([[0.3], [0.7]], dtype=torch.float64))),
            ("coordinate+wing", lambda: heads.CoordinateModel(MultiViewEncoder(cfg)),
             lambda m: heads.wing(m([{"lax_4c": lax}]), coords)),
            ("unet2d+dice_ce", lambda: unet.UNetModel("lax_4c", 4, False, widths=(4, 8)),
             lambda m: heads.dice_ce(m(lax[..., :16, :16]), seg_target[:, :16, :16, 0])),
            ("unet3d+dice_ce", lambda: unet.UNetModel("sax", 4, True, widths=(4, 8)),
             lambda m: heads.dice_ce(m(sax[:, :, :16, :16]), seg_target[:, :16, :16])),
        ]
        for name, build, loss in cases:
            torch.manual_seed(0)
            model = build().double()
            errors[name] = directional_check(model, lambda: loss(model))
        worst = max(errors, key=errors.get)
        assert errors[worst] < 1e-4, errors
        notes.append(f"{len(errors)} model/loss pairs, worst {worst} {errors[worst]:.1e}")


def test_5_learning_sanity():
    with criterion(5, "learning sanity", 1800.0) as notes:
        cfg = backbone.desk_config()
        pre = desk_cohort(8, 1)

        # 200 optimiser steps: one full-cohort batch per epoch
        drop_cfg = training.recipe("pretrain", epochs=200, warmup_epochs=10, batch_size=8, augment=False, peak_lr=5e-3)
        torch.manual_seed(drop_cfg.seed)
        before = training.reconstruction_loss(CineMA(cfg), pre)
        res = training.pretrain(cfg, drop_cfg, pre)
        assert res.checkpoint.step == 200
        after = training.reconstruction_loss(res.model, pre)
        drop = 1 - after / before
        notes.append(f"masked MSE {before:.4f}->{after:.4f} ({drop:.1%} drop)")

        train_studies = desk_cohort(16, 10)
        train = training.segmentation_examples(train_studies, "sax", phases="all")
        val = training.segmentation_examples(desk_cohort(4, 30), "sax")
        test = training.segmentation_examples(desk_cohort(8, 20), "sax")
        # images of the labelled studies join the unlabelled pool, labels unused
        mae_cfg = training.recipe("pretrain", epochs=200, warmup_epochs=10, batch_size=8, augment=True, peak_lr=1e-3)
        ckpt = training.pretrain(cfg, mae_cfg, pre + train_studies).checkpoint

        dice = {"finetune": [], "randinit": []}
        for seed in (0, 1, 2):
            tc = training.recipe(
                "segmentation", epochs=10, warmup_epochs=1, batch_size=8, validation_frequency=5, augment=False, seed=seed
            )
            for arm in dice:
                out = training.finetune(
                    "segmentation", train, val, tc, arm=arm,
                    pretrained=ckpt if arm == "finetune" else None, model_config=cfg,
                )
                dice[arm].append(training.score("segmentation", training.predict(out.model, "segmentation", test), test))
        ft, ri = np.mean(dice["finetune"]), np.mean(dice["randinit"])
        notes.append(f"held-out Dice finetune {ft:.4f} {np.round(dice['finetune'], 4).tolist()}")
        notes.append(f"randinit {ri:.4f} {np.round(dice['randinit'], 4).tolist()}")
        assert drop >= 0.90
        assert min(dice["finetune"]) >= 0.90
        assert ft >= ri


def test_6_ef_pipeline():
    with criterion(6, "EF pipeline", 60.0) as notes:
        worst = 0.0
        fine = phantom.PhantomParams(noise_sigma=0.0)
        studies = [phantom.generate_study(fine)]
        # varied geometry on the default 1.5 x 1.5 x 2 mm grid
        studies += [phantom.generate_study(p) for p in phantom.sample_cohort(4, seed=7, template=fine)]
        for s in studies:
            series = metrics.VolumeSeries.from_masks(s.gt_masks["sax"], s.spacing_sax)
            ef, ed, es = metrics.ef_from_series(series)
            assert (ed, es) == (s.meta["ed_phase"], s.meta["es_phase"])
            worst = max(worst, abs(ef - s.gt_scalars["ef"]))
        assert worst <= 2.0
        notes.append(f"{len(studies)} phantoms, worst |EF error| {worst:.2f} points, ED/ES phases exact")


def test_7_metric_oracles():
    with criterion(7, "metric oracles", 120.0) as notes:
        rng = np.random.default_rng(0)
        worst, n = 0.0, 0
        while n < 100:
            pa, pb = rng.uniform(0.05, 0.6, 2)
            a, b = rng.random((16, 16, 16)) < pa, rng.random((16, 16, 16)) < pb
            sp = np.array([(1.0, 1.0, 1.0), (1.0, 2.0, 0.5), (0.7, 0.7, 3.0)][n % 3])
            ours = metrics.hd95(a.astype(int), b.astype(int), 1, tuple(sp))
            worst = max(worst, abs(ours - test_metrics._brute_hd95(a, b, sp)))
            n += 1
        assert worst <= 1e-9
        for hand in (
            test_metrics.test_dice_examples,
            test_metrics.test_hd95_examples,
            test_metrics.test_mapse_length_gls,
            test_heads.test_gaussian_heatmap_values,
        ):
            hand()
        notes.append(f"hd95 vs brute force on {n} random 16^3 pairs, max diff {worst:.1e}; hand examples match")


def test_8_statistics_recovery():
    with criterion(8, "statistics recovery", 300.0) as notes:
        beta, n, trials = -0.4114, 10_000, 100
        rng = np.random.default_rng(0)
        covered = 0
        for _ in range(trials):
            cov = {
                "disease": rng.integers(0, 2, n).astype(float),
                "age": rng.normal(60, 8, n),
                "sex": rng.integers(0, 2, n).astype(float),
                "bmi": rng.normal(27, 4, n),
            }
            y = 55 + beta * cov["disease"] + 0.05 * cov["age"] - 0.5 * cov["sex"] + rng.normal(0, 5, n)
            lo, hi = stats.ols_fit(y, cov)["disease"]["ci"]
            covered += lo <= beta <= hi
        notes.append(f"OLS CI coverage {covered}/{trials}")

        g = rng.integers(0, 2, 5000).astype(float)
        t = rng.exponential(1.0 / np.where(g == 1, 2.0, 1.0))
        cox = stats.cox_fit(t, np.ones(5000, int), {"g": g})["g"]["coef"]
        notes.append(f"Cox log HR {cox:.3f} vs {math.log(2):.3f}")

        a = np.random.default_rng(1).normal(0.85, 0.03, 50)
        same = stats.bootstrap_compare(a, a.copy(), rng=2)
        shifted = stats.bootstrap_compare(a, a + 0.05, rng=2)
        notes.append(f"tiers identical {same.tier}, shifted {shifted.tier}")
        assert covered >= 95
        assert abs(cox - math.log(2)) <= 0.1
        assert same.tier == "ns" and shifted.tier == "***"


def test_9_fairness_machinery():
    with criterion(9, "disparity ratio", 60.0) as notes:
        n, n_cohorts, qs = 10_000, 20, list(range(25, 80, 5))
        rng = np.random.default_rng(0)
        ratios = np.empty((n_cohorts, len(qs)))
        worst_recip = 0.0
        for c in range(n_cohorts):
            vals = rng.normal(size=n)
            groups = np.where(rng.random(n) < 0.5, "White", "NonWhite")
            swapped = np.where(groups == "White", "NonWhite", "White")
            for j, q in enumerate(qs):
                ratios[c, j] = stats.disparity_ratio(vals, groups, q).ratio
                r_swap = stats.disparity_ratio(vals, swapped, q).ratio
                worst_recip = max(worst_recip, abs(ratios[c, j] * r_swap - 1))
        # one cohort's ratio at q=75 has sd ~0.036, so the band is judged on the mean over cohorts
        worst = float(np.abs(ratios.mean(0) - 1).max())
        single = float(np.mean(np.abs(ratios - 1).max(1) <= 0.05))
        notes.append(f"max |mean ratio-1| {worst:.4f} over q=25..75 on {n_cohorts} cohorts")
        notes.append(f"single cohorts inside the band {single:.0%}; max |r*r_swap-1| {worst_recip:.1e}")
        assert worst <= 0.05
        assert worst_recip <= 1e-12


def _pipeline(root: Path) -> dict[str, bytes]:
    root.mkdir()

    def cfg(name, obj):
        (root / name).write_text(json.dumps({"version": 1, **obj}))
        return str(root / name)

    def ok(*argv):
        assert cli.main([str(a) for a in argv]) == 0, argv

    ok("phantom", "generate", "--config", cfg("gen.json", {"n_subjects": 7, "seed": 5, "preset": "desk"}), "--out", root / "raw")
    grid = cfg("grid.json", {"sax": {"spacing": [2, 2, 10], "size": [64, 64, 4]}, "lax": {"spacing": [2, 2], "size": [64, 64]}})
    ok("data", "preprocess", "--in", root / "raw", "--out", root / "pre", "--grid", grid)
    pt = cfg("pt.json", {"model": "desk", "train": {"epochs": 3, "warmup_epochs": 1, "batch_size": 3}})
    ok("train", "pretrain", "--config", pt, "--data", root / "pre", "--out", root / "pt")
    split = {
        "task": "segmentation",
        "train": {"epochs": 2, "warmup_epochs": 1, "batch_size": 4, "validation_frequency": 1},
        "train_subjects": ["sub-0000", "sub-0001", "sub-0002", "sub-0003"],
        "val_subjects": ["sub-0004"],
    }
    ft = cfg("ft.json", {**split, "arm": "finetune"})
    ri = cfg("ri.json", {**split, "arm": "randinit", "model": "desk"})
    ok("train", "finetune", "--config", ft, "--data", root / "pre", "--pretrained", root / "pt" / "checkpoint.cmrc",
       "--seeds", "0,1", "--out", root / "finetune")
    ok("train", "finetune", "--config", ri, "--data", root / "pre", "--seeds", "0,1", "--out", root / "randinit")
    for arm in ("finetune", "randinit"):
        ok("eval", "--run", root / arm, "--data", root / "pre", "--subjects", "sub-0005,sub-0006", "--out", root / "eval" / arm)
    ok("report", "--runs", root / "eval" / "finetune", root / "eval" / "randinit", "--out", root / "report")
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob(cli.RESULT))}


def test_10_reproducibility(tmp_path):
    with criterion(10, "byte-identical pipeline results", 1800.0) as notes:
        first = _pipeline(tmp_path / "a")
        second = _pipeline(tmp_path / "b")
        assert len(first) == 8 and first.keys() == second.keys()
        differing = [k for k in first if first[k] != second[k]]
        notes.append(f"{len(first)} result files compared, {len(differing)} differ")
        assert not differing, differing
        table = json.loads(first["report/result.json"])["table"]
        assert {"finetune", "randinit"} <= {r["arm"] for r in table if r["metric"] == "dice_mean"}
