"""Acceptance criteria, one test each; every test prints a single PASS/FAIL line."""

import hashlib
import json
import time
from pathlib import Path

import jsonschema
import numpy as np
import pytest

import scenes
from amodal.backends.base import NoisyState
from amodal.backends.mock import MockBackend, RecordingBackend
from amodal.cli import main
from amodal.core import (PipelineConfig, dilate_radius, load_mask, save_image,
                         touches_boundary)
from amodal.curation import decide
from amodal.dataset import make_toy_pool
from amodal.framing import conditional_pad, overlay_origin, square_crop, uncrop_overlay
from amodal.sampler import composite, naive_outpaint, segment_noisy_object, swap_background

GOLDEN = Path(__file__).parent / "golden"


@pytest.fixture
def verdict(capsys):
    def emit(n, ok, text):
        with capsys.disabled():
            print(f"\nACCEPTANCE {n} {'PASS' if ok else 'FAIL'}: {text}")
        assert ok, text
    return emit


def cli(*argv):
    return main([str(a) for a in argv])


# 1 ---------------------------------------------------------------------------

def test_composite_matches_brute_force(verdict):
    rng = np.random.default_rng(1)
    t0 = time.perf_counter()
    mismatches = 0
    for i in range(1000):
        syn = rng.integers(0, 256, (64, 64, 3), dtype=np.uint8)
        bg = rng.integers(0, 256, (64, 64, 3), dtype=np.uint8)
        m = rng.random((64, 64)) < rng.random()
        out = composite(NoisyState(syn, 20), NoisyState(bg, 20), m).pixels
        mf = m.astype(np.int64)[..., None]
        want = syn.astype(np.int64) * mf + bg.astype(np.int64) * (1 - mf)
        mismatches += int(np.count_nonzero(out.astype(np.int64) != want))
        if i < 3:                                     # literal per-pixel loop on a few
            for y in range(64):
                for x in range(64):
                    for c in range(3):
                        v = int(syn[y, x, c]) * int(m[y, x]) + int(bg[y, x, c]) * (1 - int(m[y, x]))
                        mismatches += int(out[y, x, c] != v)
    dt = time.perf_counter() - t0
    verdict(1, mismatches == 0 and dt < 10,
            f"composite vs brute force on 1000 triples at 64x64: {mismatches} mismatches, "
            f"{dt:.2f}s (limit 10s)")


# 2 ---------------------------------------------------------------------------

def _final_mask_in_photo(out_dir, shape):
    man = json.loads((out_dir / "manifest.json").read_text())
    m = load_mask(out_dir / "amodal_mask.png")
    ox, oy = man["final"]["origin"]
    h, w = shape
    res = np.zeros((h, w), bool)
    fh, fw = m.shape
    x0, y0, x1, y1 = max(ox, 0), max(oy, 0), min(ox + fw, w), min(oy + fh, h)
    res[y0:y1, x0:x1] = m[y0 - oy:y1 - oy, x0 - ox:x1 - ox]
    return man, res


def test_mock_end_to_end(tmp_path, verdict, capsys):
    t0 = time.perf_counter()
    results = []
    for name, scene, want in (("one occluder", scenes.one_occluder_scene(), 1),
                              ("second occluder", scenes.two_occluder_scene(), 2)):
        d = tmp_path / name.replace(" ", "_")
        scene.save(d / "scene")
        save_image(d / "photo.png", scene.photo())
        code = cli("complete", "--image", d / "photo.png", "--query", "surfboard",
                   "--sampler", "mc", "--scene", d / "scene", "--out", d / "out")
        capsys.readouterr()
        man, final = _final_mask_in_photo(d / "out", scene.photo_shape)
        truth = scene.layer_mask("board")
        iou = (final & truth).sum() / (final | truth).sum()
        results.append((name, code, len(man["iterations"]), want, iou))
    dt = time.perf_counter() - t0
    ok = all(c == 0 and n == w for _, c, n, w, _ in results) and results[0][4] == 1.0 and dt < 30
    detail = "; ".join(f"{name}: {n} iteration(s) (want {w}), IoU {iou:.4f}"
                       for name, _, n, w, iou in results)
    verdict(2, ok, f"{detail}; {dt:.2f}s (limit 30s)")


# 3 ---------------------------------------------------------------------------

def _oracle(M, P, gamma=2, delta=4, eps=1.2):
    """Set-algebra rule over pixel coordinate sets."""
    h, w = M.shape
    ms = {(int(y), int(x)) for y, x in zip(*np.nonzero(M))}
    ps = {(int(y), int(x)) for y, x in zip(*np.nonzero(P))}
    if any(min(x, w - 1 - x, y, h - 1 - y) < gamma for y, x in ps):
        return "incomplete", "boundary_proximity"
    reach = 2 * delta                                  # delta passes of a 5x5 kernel
    grown = {(y + dy, x + dx) for y, x in ms for dy in range(-reach, reach + 1)
             for dx in range(-reach, reach + 1)}
    if ps <= grown:
        return "complete", "contained_in_dilation"
    if len(ps) / len(ms) > eps:
        return "incomplete", "major_extension"
    return "complete", "minor_extension_tolerated"


def _curation_suite(rng):
    pairs = []
    n = 80
    shapes = [(10, 10), (10, 20), (20, 20)]
    while len(pairs) < 200:
        hh, ww = shapes[len(pairs) % 3]
        y0 = int(rng.integers(12, n - hh - 12))
        x0 = int(rng.integers(12, n - ww - 12))
        M = np.zeros((n, n), bool)
        M[y0:y0 + hh, x0:x0 + ww] = True
        area = hh * ww
        kind = len(pairs) % 8
        P = M.copy()
        if kind in (0, 1):                              # boundary pixel at distance 1 or 3
            d = 1 if kind == 0 else 3
            P[y0, d] = True
        elif kind == 2:                                 # inside dilate(M, 4)
            ring = dilate_radius(M, 8) & ~M
            P |= ring & (rng.random((n, n)) < 0.5)
        else:                                           # area ratios past the dilation
            ratio = (1.0, 1.19, 1.21, 1.5, 1.21)[kind - 3]
            extra = int(round((ratio - 1.0) * area))
            outside = ~dilate_radius(M, 8) & ~touching_edges(n, 3)
            cand = np.argwhere(outside)
            pick = cand[rng.choice(len(cand), size=max(extra, 1), replace=False)]
            if ratio == 1.0:                            # swap one pixel out, one in
                P[y0, x0] = False
            for y, x in pick:
                P[y, x] = True
        pairs.append((M, P))
    return pairs


def touching_edges(n, d):
    m = np.zeros((n, n), bool)
    m[:d] = m[-d:] = True
    m[:, :d] = m[:, -d:] = True
    return m


def test_curation_decision_table(verdict):
    rng = np.random.default_rng(3)
    pairs = _curation_suite(rng)
    t0 = time.perf_counter()
    agree, reasons = 0, set()
    for M, P in pairs:
        v = decide(M, P, gamma=2, delta=4, epsilon=1.2)
        want = _oracle(M, P)
        agree += (v.label, v.reason) == want
        reasons.add(want[1])
    dt = time.perf_counter() - t0
    ok = agree == len(pairs) == 200 and len(reasons) == 4 and dt < 5
    verdict(3, ok, f"{agree}/{len(pairs)} verdicts agree with the set-algebra oracle, "
                   f"reasons covered {sorted(reasons)}, {dt:.2f}s (limit 5s)")


# 4 ---------------------------------------------------------------------------

def test_cluster_segmentation_recovery(verdict):
    rng = np.random.default_rng(4)
    cfg = PipelineConfig()
    exact = violations = done = 0
    while done < 50:
        scene = scenes.random_scene(rng)
        modal = scene.visible_mask("object")
        obj = scene.layer_mask("object")
        # precondition: the visible part must exceed the overlap threshold
        if modal.sum() <= 0.25 * obj.sum():
            continue
        occluders = [scene.visible_mask(l.name) for l in scene.layers if l.name != "object"]
        occ = np.zeros_like(modal)
        for o in occluders:
            occ |= dilate_radius(o, cfg.occluder_dilation)
        occ &= ~modal
        mock = MockBackend(scene)
        st = mock.diffuse_range(swap_background(scene.photo(), modal), occ, "cup", 0, 20)
        got, _ = segment_noisy_object(st, modal, occ, cfg, mock)
        exact += np.array_equal(got, obj | modal)
        violations += int(np.any(modal & ~got) or np.any(got & ~(modal | occ)))
        done += 1
    verdict(4, exact == 50 and violations == 0,
            f"{exact}/50 scenes recover object mask exactly, {violations} bound violations")


# 5 ---------------------------------------------------------------------------

def test_framing_round_trip(verdict):
    rng = np.random.default_rng(5)
    preserved_fail = side_fail = 0
    for _ in range(500):
        h, w = (int(v) for v in rng.integers(24, 96, size=2))
        img = rng.integers(0, 250, (h, w, 3), dtype=np.uint8)
        modal = np.zeros((h, w), bool)
        for _ in range(int(rng.integers(1, 4))):
            bh, bw = (int(v) for v in rng.integers(2, 16, size=2))
            y, x = int(rng.integers(0, h - 1)), int(rng.integers(0, w - 1))
            modal[y:y + bh, x:x + bw] = True
        occ = np.zeros((h, w), bool)
        y, x = int(rng.integers(0, h - 1)), int(rng.integers(0, w - 1))
        occ[y:y + int(rng.integers(2, 20)), x:x + int(rng.integers(2, 20))] = True
        occ &= ~modal
        sides = touches_boundary(modal, 10)
        p_img, p_occ, p_modal, tf = conditional_pad(img, occ, modal, sides, 120)
        side_fail += tf.padded_sides != sides
        crop, c_occ, c_modal, tf = square_crop(p_img, p_occ, p_modal, 60, 60, tf)
        completed = crop.copy()
        completed[c_occ] = rng.integers(0, 250, (int(c_occ.sum()), 3), dtype=np.uint8)
        amodal = c_modal | (c_occ & (rng.random(c_occ.shape) < 0.5))
        out = uncrop_overlay(completed, amodal, tf, img)
        ox, oy = overlay_origin(amodal, tf)
        view = out[-oy:-oy + h, -ox:-ox + w]
        preserved_fail += int(np.count_nonzero(np.any(view != img, axis=-1) & ~occ))
    verdict(5, preserved_fail == 0 and side_fail == 0,
            f"500 random frames: {preserved_fail} changed pixels outside the inpainted region, "
            f"{side_fail} frames padded on a side not reported by the boundary test")


# 6 ---------------------------------------------------------------------------

def test_dataset_bands(tmp_path, verdict, capsys):
    t0 = time.perf_counter()
    make_toy_pool(tmp_path / "pool", count=12)
    codes = [cli("dataset", "build", "--pool", tmp_path / "pool", "--easy", 100, "--hard", 100,
                 "--seed", 11, "--out", tmp_path / d) for d in ("a", "b")]
    capsys.readouterr()
    man = json.loads((tmp_path / "a" / "manifest.json").read_text())
    man_b = json.loads((tmp_path / "b" / "manifest.json").read_text())
    bad = 0
    for s in man["samples"]:
        gt = load_mask(tmp_path / "a" / s["files"]["gt_mask.png"]["path"])
        occ = load_mask(tmp_path / "a" / s["files"]["occluder_mask.png"]["path"])
        r = (gt & occ).sum() / gt.sum()
        ok = 0.20 <= r < 0.50 if s["difficulty"] == "easy" else 0.50 <= r <= 0.80
        bad += (not ok) or r != s["occlusion_rate"]
    counts = {d: sum(s["difficulty"] == d for s in man["samples"]) for d in ("easy", "hard")}
    dt = time.perf_counter() - t0
    same = man["manifest_hash"] == man_b["manifest_hash"]
    ok = codes == [0, 0] and counts == {"easy": 100, "hard": 100} and bad == 0 and same and dt < 120
    verdict(6, ok, f"{len(man['samples'])} samples {counts}, {bad} out of band or miscounted, "
                   f"rebuild hash {'identical' if same else 'DIFFERENT'}, {dt:.1f}s (limit 120s)")


# 7 ---------------------------------------------------------------------------

def test_naive_baseline_mask(verdict):
    rng = np.random.default_rng(7)
    scene = scenes.one_occluder_scene()
    rec = RecordingBackend(MockBackend(scene))
    h, w = scene.photo_shape
    wrong = 0
    for _ in range(100):
        modal = rng.random((h, w)) < rng.random()
        naive_outpaint(scene.photo(), modal, "surfboard", PipelineConfig(), rec)
        wrong += not np.array_equal(rec.calls[-1]["mask"], ~modal)
    verdict(7, wrong == 0 and len(rec.calls) == 100,
            f"naive inpaint mask equals the modal complement on {100 - wrong}/100 masks")


# 8 ---------------------------------------------------------------------------

def test_determinism(tmp_path, verdict, capsys):
    scene = scenes.two_occluder_scene()
    scene.save(tmp_path / "scene")
    save_image(tmp_path / "photo.png", scene.photo())
    digests = []
    for d in ("r1", "r2"):
        assert cli("complete", "--image", tmp_path / "photo.png", "--query", "surfboard",
                   "--seed", 42, "--scene", tmp_path / "scene", "--debug-trace",
                   "--out", tmp_path / d) == 0
        digests.append(hashlib.sha256((tmp_path / d / "manifest.json").read_bytes()).hexdigest())
    capsys.readouterr()
    verdict(8, digests[0] == digests[1],
            f"manifest.json sha256 {digests[0][:16]} vs {digests[1][:16]}")


# 9 ---------------------------------------------------------------------------

def test_report_format_fidelity(tmp_path, verdict, capsys):
    problems = []
    make_toy_pool(tmp_path / "pool", count=8)
    cli("dataset", "build", "--pool", tmp_path / "pool", "--easy", 3, "--hard", 3,
        "--out", tmp_path / "ds")
    for sampler in ("mc", "plain", "naive"):
        if cli("eval", "--dataset", tmp_path / "ds", "--sampler", sampler,
               "--metrics", "iou,l1,psnr", "--out", tmp_path / f"{sampler}.json") != 0:
            problems.append(f"eval {sampler} failed")
            continue
        rep = json.loads((tmp_path / f"{sampler}.json").read_text())
        try:
            jsonschema.validate(rep, json.loads((GOLDEN / "eval_report.schema.json").read_text()))
        except jsonschema.ValidationError as exc:
            problems.append(f"{sampler}: {exc.message}")
        want_cols = {f"{d}_{m}" for d in ("easy", "hard") for m in ("iou", "l1", "psnr")}
        if set(rep["table"]["rows"][0]) - {"method"} != want_cols:
            problems.append(f"{sampler}: table columns {sorted(rep['table']['rows'][0])}")

    scene = scenes.curation_scene()
    scene.save(tmp_path / "cscene")
    labels = scenes.constructed_curation_set(tmp_path / "bundles", scene, 35, 35, 15, 15)
    (tmp_path / "labels.json").write_text(json.dumps(labels))
    capsys.readouterr()
    code = cli("curate", "--batch", tmp_path / "bundles", "--labels", tmp_path / "labels.json",
               "--scene", tmp_path / "cscene", "--json", "--jobs", 4)
    out = json.loads(capsys.readouterr().out)
    row = out["rows"][0]
    try:
        jsonschema.validate(row, json.loads((GOLDEN / "curation_row.schema.json").read_text()))
    except jsonschema.ValidationError as exc:
        problems.append(f"curation row: {exc.message}")
    hand = (35 + 35) / (35 + 35 + 15 + 15)
    if code != 0 or out["confusion"] != {"tp": 35, "tn": 35, "fp": 15, "fn": 15}:
        problems.append(f"confusion {out.get('confusion')}")
    if row["accuracy"] != hand:
        problems.append(f"accuracy {row['accuracy']} != {hand}")
    verdict(9, not problems,
            f"eval reports match the golden schema for mc/plain/naive; curate accuracy "
            f"{row['accuracy']:.2f} (hand-computed {hand:.2f}), precision {row['precision']:.2f}, "
            f"recall {row['recall']:.2f}" + (f"; problems: {problems}" if problems else ""))
