"""Pseudo-occlusion benchmark: paste one complete object over another, then score completions.

An *object pool* is a directory of ``(image, mask, category)`` triples,
listed in ``pool.json``::

    {"objects": [{"id": "cup_0", "image": "cup_0.png", "mask": "cup_0_mask.png",
                  "category": "cup"}, ...]}

Without ``pool.json`` every ``<stem>_mask.png`` next to ``<stem>.png`` is an
entry, with categories read from ``categories.json`` (``{stem: category}``).
"""

from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

from .backends.base import Backends
from .backends.mock import SceneBuilder, default_background, mock_backends
from .core import (PipelineConfig, QuerySpec, as_image, as_mask, bbox_of_mask, iou,
                   load_image, load_mask, mask_area, save_image, save_mask, sha256_file)
from .pipeline import content_hash, run_pipeline

log = logging.getLogger(__name__)

DATASET_FORMAT = "amodal-dataset/1"
REPORT_FORMAT = "amodal-eval/1"
DIFFICULTIES = ("easy", "hard")
BUILTIN_METRICS = ("iou", "l1", "psnr")
EXTERNAL_METRICS = ("clip", "dreamsim", "lpips")
PSNR_CAP = 100.0


class BandUnachievableError(RuntimeError):
    """No placement hit the requested occlusion band within the attempt budget."""


@dataclass(frozen=True)
class Band:
    lo: float
    hi: float
    closed_hi: bool = False

    def contains(self, rate: float) -> bool:
        return self.lo <= rate and (rate <= self.hi if self.closed_hi else rate < self.hi)

    def to_list(self):
        return [self.lo, self.hi, "closed" if self.closed_hi else "open"]


BANDS = {"easy": Band(0.20, 0.50), "hard": Band(0.50, 0.80, closed_hi=True)}


@dataclass(frozen=True)
class Placement:
    x: int          # top-left of the scaled occluder cutout in base coordinates
    y: int
    scale: float


@dataclass
class PseudoOcclusionSample:
    base_image: np.ndarray
    gt_object_mask: np.ndarray
    occluder_image: np.ndarray     # scaled cutout
    occluder_mask: np.ndarray      # scaled cutout mask
    placement: Placement
    placed_mask: np.ndarray        # occluder mask in base coordinates
    occluded_image: np.ndarray
    occluded_modal_mask: np.ndarray
    occlusion_rate: float
    difficulty: Optional[str] = None
    attempts: int = 1


def occlusion_rate(object_mask, occluder_mask) -> float:
    object_mask, occluder_mask = as_mask(object_mask), as_mask(occluder_mask)
    n = mask_area(object_mask)
    if n == 0:
        raise ValueError("object mask is empty")
    return mask_area(object_mask & occluder_mask) / n


def difficulty_of(rate: float) -> Optional[str]:
    for name, band in BANDS.items():
        if band.contains(rate):
            return name
    return None


def _cutout(image, mask):
    box = bbox_of_mask(mask)
    return image[box.slices], mask[box.slices]


def _scaled(image, mask, scale: float):
    h, w = mask.shape
    nw, nh = max(1, int(round(w * scale))), max(1, int(round(h * scale)))
    if (nw, nh) == (w, h):
        return image, mask
    img = np.array(Image.fromarray(image).resize((nw, nh), Image.NEAREST))
    m = np.array(Image.fromarray(mask.astype(np.uint8) * 255).resize((nw, nh), Image.NEAREST)) >= 128
    return img, m


def place(base_image, base_mask, occ_image, occ_mask, placement: Placement
          ) -> PseudoOcclusionSample:
    """Paste the (cropped, scaled) occluder at a fixed placement; no sampling."""
    base_image, base_mask = as_image(base_image), as_mask(base_mask)
    cut_img, cut_mask = _cutout(as_image(occ_image), as_mask(occ_mask))
    cut_img, cut_mask = _scaled(cut_img, cut_mask, placement.scale)
    H, W = base_mask.shape
    h, w = cut_mask.shape
    x, y = placement.x, placement.y
    if x < 0 or y < 0 or x + w > W or y + h > H:
        raise ValueError("scaled occluder does not fit inside the base image at this placement")
    placed = np.zeros((H, W), dtype=bool)
    placed[y:y + h, x:x + w] = cut_mask
    out = base_image.copy()
    out[y:y + h, x:x + w][cut_mask] = cut_img[cut_mask]
    rate = occlusion_rate(base_mask, placed)
    return PseudoOcclusionSample(base_image, base_mask, cut_img, cut_mask, placement, placed,
                                 out, base_mask & ~placed, rate, difficulty_of(rate))


def synthesize_occlusion(base: Tuple[np.ndarray, np.ndarray],
                         occluder: Tuple[np.ndarray, np.ndarray], band: Band,
                         rng: np.random.Generator, *, scale_range=(0.3, 1.5),
                         max_attempts: int = 1000) -> PseudoOcclusionSample:
    """Rejection-sample a placement whose occlusion rate falls in ``band``."""
    base_image, base_mask = as_image(base[0]), as_mask(base[1])
    if not base_mask.any():
        raise ValueError("base object mask is empty")
    occ_img, occ_mask = as_image(occluder[0]), as_mask(occluder[1])
    if not occ_mask.any():
        raise ValueError("occluder mask is empty")
    cut_img, cut_mask = _cutout(occ_img, occ_mask)
    H, W = base_mask.shape
    n = mask_area(base_mask)
    lo, hi = scale_range
    for attempt in range(1, max_attempts + 1):
        s = float(rng.uniform(lo, hi))
        _, m = _scaled(cut_img, cut_mask, s)
        h, w = m.shape
        if h > H or w > W:
            continue
        x = int(rng.integers(0, W - w + 1))
        y = int(rng.integers(0, H - h + 1))
        rate = np.count_nonzero(base_mask[y:y + h, x:x + w] & m) / n
        if band.contains(rate):
            sample = place(base_image, base_mask, cut_img, cut_mask, Placement(x, y, s))
            sample.attempts = attempt
            return sample
    raise BandUnachievableError(
        f"no placement in {max_attempts} attempts reached occlusion band {band.to_list()}")


def extract_on_black(image, mask) -> np.ndarray:
    image, mask = as_image(image), as_mask(mask)
    return np.where(mask[..., None], image, np.uint8(0)).astype(np.uint8)


# ---------------------------------------------------------------------------
# object pools
# ---------------------------------------------------------------------------

@dataclass
class PoolObject:
    id: str
    image_path: Path
    mask_path: Path
    category: str

    def load(self):
        img, m = load_image(self.image_path), load_mask(self.mask_path)
        if img.shape[:2] != m.shape:
            raise ValueError(f"pool object {self.id}: image and mask sizes differ")
        return img, m


def load_pool(pool_dir) -> List[PoolObject]:
    d = Path(pool_dir)
    index = d / "pool.json"
    objs = []
    if index.exists():
        for e in json.loads(index.read_text())["objects"]:
            objs.append(PoolObject(str(e["id"]), d / e["image"], d / e["mask"], e["category"]))
    else:
        cats_file = d / "categories.json"
        cats = json.loads(cats_file.read_text()) if cats_file.exists() else {}
        for mp in sorted(d.glob("*_mask.png")):
            stem = mp.name[:-len("_mask.png")]
            ip = d / f"{stem}.png"
            if ip.exists():
                objs.append(PoolObject(stem, ip, mp, cats.get(stem, "object")))
    if len(objs) < 2:
        raise ValueError(f"object pool {d} needs at least two objects")
    return sorted(objs, key=lambda o: o.id)


def pool_fingerprint(objs: Sequence[PoolObject]) -> str:
    return content_hash([[o.id, o.category, sha256_file(o.image_path), sha256_file(o.mask_path)]
                         for o in objs])


_TOY_CATEGORIES = ("cup", "bus", "donut", "dog", "umbrella", "bottle", "clock", "vase",
                   "teddy bear", "apple", "chair", "kite")


def make_toy_pool(out_dir, count: int = 12, size: int = 96, seed: int = 0) -> Path:
    """Write a small procedural object pool (solid shapes on a ramp).

    Colours are distinct and avoid the mock backend's reserved values, so the
    pool can be evaluated end to end with mock backends.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    ys, xs = np.mgrid[0:size, 0:size]
    entries = []
    for i in range(count):
        cat = _TOY_CATEGORIES[i % len(_TOY_CATEGORIES)]
        color = (60 + (i * 37) % 180, 90 + (i * 71) % 150, 100 + (i * 13) % 140)
        img = default_background(size, size)
        cx, cy = rng.integers(size * 2 // 5, size * 3 // 5 + 1, size=2)
        rx, ry = rng.integers(size // 5, size * 7 // 20 + 1, size=2)
        shape = i % 3
        if shape == 0:
            m = ((xs - cx) / rx) ** 2 + ((ys - cy) / ry) ** 2 <= 1.0
        elif shape == 1:
            m = (abs(xs - cx) <= rx) & (abs(ys - cy) <= ry)
        else:
            m = abs(xs - cx) / rx + abs(ys - cy) / ry <= 1.0
        img[m] = color
        oid = f"{cat.replace(' ', '_')}_{i:02d}"
        save_image(out / f"{oid}.png", img)
        save_mask(out / f"{oid}_mask.png", m)
        entries.append({"id": oid, "image": f"{oid}.png", "mask": f"{oid}_mask.png",
                        "category": cat})
    (out / "pool.json").write_text(json.dumps({"objects": entries}, indent=2) + "\n")
    return out


# ---------------------------------------------------------------------------
# dataset build
# ---------------------------------------------------------------------------

SAMPLE_FILES = ("image.png", "modal_mask.png", "gt_image.png", "gt_mask.png",
                "occluder_mask.png")


def _synthesize_one(objs, loaded, difficulty, rng, cooccur, scale_range, max_attempts,
                    max_pairs):
    band = BANDS[difficulty]
    n = len(objs)
    last = None
    for _ in range(max_pairs):
        bi = int(rng.integers(n))
        candidates = [j for j in range(n) if j != bi]
        if difficulty == "hard" and cooccur:
            friends = set(cooccur.get(objs[bi].category, ()))
            preferred = [j for j in candidates if objs[j].category in friends]
            candidates = preferred or candidates
        oi = candidates[int(rng.integers(len(candidates)))]
        try:
            s = synthesize_occlusion(loaded[bi], loaded[oi], band, rng,
                                     scale_range=scale_range, max_attempts=max_attempts)
        except BandUnachievableError as exc:
            last = exc
            continue
        s.difficulty = difficulty
        return bi, oi, s
    raise BandUnachievableError(f"{difficulty}: no object pair reached the band ({last})")


def build_dataset(pool_dir, out_dir, counts: Dict[str, int], seed: int = 0, *,
                  cooccurrence=None, scale_range=(0.3, 1.5), max_attempts: int = 1000,
                  max_pairs: int = 50, jobs: int = 1) -> dict:
    """Synthesize ``counts[difficulty]`` samples per band and write a manifest.

    Each sample draws from its own child of ``SeedSequence(seed)``, so the
    output does not depend on ``jobs``.
    """
    objs = load_pool(pool_dir)
    loaded = [o.load() for o in objs]
    cooccur = None
    if cooccurrence is not None:
        cooccur = (json.loads(Path(cooccurrence).read_text())
                   if isinstance(cooccurrence, (str, Path)) else dict(cooccurrence))
    plan = [(d, i) for d in DIFFICULTIES for i in range(int(counts.get(d, 0)))]
    children = np.random.SeedSequence(seed).spawn(len(plan))
    out = Path(out_dir)
    (out / "samples").mkdir(parents=True, exist_ok=True)

    def one(idx):
        difficulty, i = plan[idx]
        rng = np.random.default_rng(children[idx])
        bi, oi, s = _synthesize_one(objs, loaded, difficulty, rng, cooccur, scale_range,
                                    max_attempts, max_pairs)
        sid = f"{difficulty}_{i:05d}"
        d = out / "samples" / sid
        save_image(d / "image.png", s.occluded_image)
        save_mask(d / "modal_mask.png", s.occluded_modal_mask)
        save_image(d / "gt_image.png", s.base_image)
        save_mask(d / "gt_mask.png", s.gt_object_mask)
        save_mask(d / "occluder_mask.png", s.placed_mask)
        return {"id": sid, "difficulty": difficulty,
                "base": objs[bi].id, "occluder": objs[oi].id,
                "category": objs[bi].category, "occluder_category": objs[oi].category,
                "placement": {"x": s.placement.x, "y": s.placement.y,
                              "scale": round(s.placement.scale, 9),
                              "size": [int(s.occluder_mask.shape[1]),
                                       int(s.occluder_mask.shape[0])]},
                "object_pixels": mask_area(s.gt_object_mask),
                "occluded_pixels": mask_area(s.gt_object_mask & s.placed_mask),
                "occlusion_rate": s.occlusion_rate,
                "attempts": s.attempts,
                "files": {f: {"path": f"samples/{sid}/{f}",
                              "sha256": sha256_file(d / f)} for f in SAMPLE_FILES}}

    if jobs > 1:
        with ThreadPoolExecutor(jobs) as pool:
            samples = list(pool.map(one, range(len(plan))))
    else:
        samples = [one(i) for i in range(len(plan))]

    body = {"format": DATASET_FORMAT, "seed": seed,
            "counts": {d: int(counts.get(d, 0)) for d in DIFFICULTIES},
            "bands": {k: b.to_list() for k, b in BANDS.items()},
            "scale_range": list(scale_range), "max_attempts": max_attempts,
            "pool": {"objects": len(objs), "fingerprint": pool_fingerprint(objs)},
            "cooccurrence": cooccur, "samples": samples}
    manifest = dict(body, manifest_hash=content_hash(body))
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def load_manifest(dataset_dir) -> dict:
    return json.loads((Path(dataset_dir) / "manifest.json").read_text())


def load_sample(dataset_dir, entry: dict) -> dict:
    d = Path(dataset_dir)
    f = entry["files"]
    paths = {k: d / f[k]["path"] for k in SAMPLE_FILES}
    missing = [str(p) for p in paths.values() if not p.exists()]
    if missing:
        raise FileNotFoundError(f"sample {entry['id']} is missing {missing}")
    return {"id": entry["id"], "difficulty": entry["difficulty"], "category": entry["category"],
            "occluder_category": entry["occluder_category"],
            "image": load_image(paths["image.png"]),
            "modal": load_mask(paths["modal_mask.png"]),
            "gt_image": load_image(paths["gt_image.png"]),
            "gt_mask": load_mask(paths["gt_mask.png"]),
            "occluder": load_mask(paths["occluder_mask.png"])}


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def scene_from_sample(sample: dict, margin: int = 160):
    """Scripted mock scene whose ground truth is the sample's ground truth."""
    gt_img, gt = sample["gt_image"], sample["gt_mask"]
    occ, occluded = sample["occluder"], sample["image"]
    h, w = gt.shape
    b = SceneBuilder(w, h, margin=margin)
    bg = b.background.copy()
    win = bg[margin:margin + h, margin:margin + w]
    win[~gt] = gt_img[~gt]
    b.background = bg
    world = np.zeros(b.world_shape + (3,), dtype=np.uint8)
    world[margin:margin + h, margin:margin + w] = gt_img
    b.add_mask("object", sample["category"], gt, None, z=1, appearance=world)
    world_b = np.zeros_like(world)
    world_b[margin:margin + h, margin:margin + w] = occluded
    b.add_mask("occluder", sample["occluder_category"], occ, None, z=2, appearance=world_b)
    return b.build()


def _prediction_in_original(bundle) -> Tuple[np.ndarray, np.ndarray]:
    mask = bundle.final_mask_in_original()
    h, w = mask.shape
    img = np.zeros((h, w, 3), dtype=np.uint8)
    ox, oy = bundle.final_origin
    fh, fw = bundle.final_mask.shape
    x0, y0, x1, y1 = max(ox, 0), max(oy, 0), min(ox + fw, w), min(oy + fh, h)
    if x0 < x1 and y0 < y1:
        img[y0:y1, x0:x1] = bundle.final_image[y0 - oy:y1 - oy, x0 - ox:x1 - ox]
    return img, mask


def _load_external(results_dir, sid: str, shape) -> Tuple[np.ndarray, np.ndarray]:
    d = Path(results_dir) / sid
    if (d / "manifest.json").exists():
        man = json.loads((d / "manifest.json").read_text())
        img, m = load_image(d / "amodal.png"), load_mask(d / "amodal_mask.png")
        ox, oy = man["final"]["origin"]
        h, w = shape
        out_i = np.zeros((h, w, 3), dtype=np.uint8)
        out_m = np.zeros((h, w), dtype=bool)
        fh, fw = m.shape
        x0, y0, x1, y1 = max(ox, 0), max(oy, 0), min(ox + fw, w), min(oy + fh, h)
        if x0 < x1 and y0 < y1:
            out_i[y0:y1, x0:x1] = img[y0 - oy:y1 - oy, x0 - ox:x1 - ox]
            out_m[y0:y1, x0:x1] = m[y0 - oy:y1 - oy, x0 - ox:x1 - ox]
        return out_i, out_m
    if not (d / "image.png").exists() or not (d / "mask.png").exists():
        raise FileNotFoundError(f"no result for sample {sid} in {results_dir}")
    img, m = load_image(d / "image.png"), load_mask(d / "mask.png")
    if m.shape != tuple(shape):
        raise ValueError(f"result for {sid} has size {m.shape}, expected {tuple(shape)}")
    return img, m


def l1_distance(a, b) -> float:
    """Mean absolute difference on a [0, 1] intensity scale."""
    a, b = as_image(a).astype(np.float64), as_image(b).astype(np.float64)
    return float(np.mean(np.abs(a - b)) / 255.0)


def psnr(a, b) -> float:
    a, b = as_image(a).astype(np.float64), as_image(b).astype(np.float64)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(255.0 ** 2 / mse))


def score_prediction(pred_image, pred_mask, gt_image, gt_mask, metrics: Sequence[str],
                     category: str = "", metric_backend=None) -> Dict[str, float]:
    pred_black = extract_on_black(pred_image, pred_mask)
    gt_black = extract_on_black(gt_image, gt_mask)
    out = {}
    if "iou" in metrics:
        out["iou"] = iou(pred_mask, gt_mask)
    if "l1" in metrics:
        out["l1"] = l1_distance(pred_black, gt_black)
    if "psnr" in metrics:
        out["psnr"] = psnr(pred_black, gt_black)
    if "external" in metrics and metric_backend is not None:
        for k, v in metric_backend.score(pred_black, gt_black, category).items():
            out[k] = float(v)
    return out


def evaluate(dataset_dir, method: str, metrics: Sequence[str] = BUILTIN_METRICS, *,
             backends_for: Optional[Callable[[dict], Backends]] = None,
             config: Optional[PipelineConfig] = None, results_dir=None, seed: int = 0,
             metric_backend=None, jobs: int = 1) -> dict:
    """Score one method on a dataset; ``method`` is a sampler name or ``external``.

    ``backends_for`` maps a loaded sample to the backends that complete it
    (default: a mock scene built from the sample's ground truth).
    """
    metrics = list(metrics)
    unknown = set(metrics) - set(BUILTIN_METRICS) - {"external"}
    if unknown:
        raise ValueError(f"unknown metrics {sorted(unknown)}")
    if method == "external" and results_dir is None:
        raise ValueError("external evaluation needs a results directory")
    config = config or PipelineConfig()
    backends_for = backends_for or (lambda s: mock_backends(scene_from_sample(s),
                                                            total_steps=config.total_steps))
    notices = []
    if "external" in metrics and metric_backend is None:
        notices.append("external perceptual metrics skipped: no metric backend configured")
    manifest = load_manifest(dataset_dir)

    def one(entry):
        s = load_sample(dataset_dir, entry)
        if method == "external":
            img, m = _load_external(results_dir, s["id"], s["gt_mask"].shape)
            extra = {}
        else:
            b = backends_for(s)
            bundle = run_pipeline(s["image"], QuerySpec(s["category"]), config, b, method,
                                  modal=s["modal"], seed=seed)
            img, m = _prediction_in_original(bundle)
            extra = {"iterations": len(bundle.iterations),
                     "termination_reason": bundle.termination_reason}
        scores = score_prediction(img, m, s["gt_image"], s["gt_mask"], metrics, s["category"],
                                  metric_backend)
        return {"id": s["id"], "difficulty": s["difficulty"], **extra,
                "scores": {k: round(v, 6) for k, v in scores.items()}}

    entries = manifest["samples"]
    if jobs > 1:
        with ThreadPoolExecutor(jobs) as pool:
            per_sample = list(pool.map(one, entries))
    else:
        per_sample = [one(e) for e in entries]
    return summarize(method, per_sample, notices)


def summarize(method: str, per_sample: List[dict], notices=()) -> dict:
    names = sorted({k for r in per_sample for k in r["scores"]})
    rows, table = [], {}
    for diff in DIFFICULTIES:
        group = [r for r in per_sample if r["difficulty"] == diff]
        table[diff] = {}
        for name in names:
            vals = [r["scores"][name] for r in group if name in r["scores"]]
            mean = round(float(np.mean(vals)), 6) if vals else None
            table[diff][name] = mean
            rows.append({"method": method, "difficulty": diff, "metric": name, "mean": mean,
                         "n": len(vals)})
    return {"format": REPORT_FORMAT, "method": method, "metrics": names,
            "table": {"columns": list(DIFFICULTIES), "rows": [
                {"method": method, **{f"{d}_{m}": table[d][m] for d in DIFFICULTIES
                                      for m in names}}]},
            "means": table, "rows": rows, "samples": per_sample, "notices": list(notices)}


def write_report(report: dict, path) -> Tuple[Path, Path]:
    """JSON at ``path`` and the long-form rows as CSV beside it."""
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    cp = p.with_suffix(".csv")
    with cp.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["method", "difficulty", "metric", "mean", "n"])
        w.writeheader()
        for r in report["rows"]:
            w.writerow({**r, "mean": "" if r["mean"] is None else r["mean"]})
    return p, cp
