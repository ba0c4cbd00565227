"""Counterfactual completeness check for finished completions.

The completed object is outpainted everywhere except its own mask and the
image corners. If the re-extracted object mask reaches the image edge or
grows well beyond a small dilation of the original, the completion is
judged incomplete.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, Iterable, Optional, Sequence

import numpy as np

from .backends.base import Backends
from .core import (PipelineConfig, as_image, as_mask, check_same_shape, mask_area,
                   mask_dilate, touches_boundary)
from .occlusion import query_instance_index

log = logging.getLogger(__name__)

COMPLETE, INCOMPLETE = "complete", "incomplete"
REASONS = ("boundary_proximity", "contained_in_dilation", "major_extension",
           "minor_extension_tolerated")


@dataclass
class CurationVerdict:
    label: str
    reason: str
    area_ratio: float
    m_prime: Optional[np.ndarray] = None
    i_prime: Optional[np.ndarray] = None

    @property
    def complete(self) -> bool:
        return self.label == COMPLETE

    def to_dict(self) -> dict:
        return {"label": self.label, "reason": self.reason,
                "area_ratio": round(self.area_ratio, 6)}


def counterfactual_mask(amodal, corner_frac: float = 0.15) -> np.ndarray:
    """Outpaint region: everything except ``amodal`` and four corner squares."""
    amodal = as_mask(amodal)
    h, w = amodal.shape
    s = max(1, int(round(corner_frac * min(h, w))))
    keep = amodal.copy()
    keep[:s, :s] = keep[:s, -s:] = keep[-s:, :s] = keep[-s:, -s:] = True
    return ~keep


def decide(amodal, amodal_prime, gamma: int = 2, delta: int = 4,
           epsilon: float = 1.2) -> CurationVerdict:
    """The decision rule alone, as a pure function of the two masks."""
    amodal, amodal_prime = as_mask(amodal), as_mask(amodal_prime)
    check_same_shape(amodal, amodal_prime)
    n = mask_area(amodal)
    if n == 0:
        raise ValueError("cannot curate an empty amodal mask")
    ratio = mask_area(amodal_prime) / n
    if touches_boundary(amodal_prime, gamma):
        return CurationVerdict(INCOMPLETE, "boundary_proximity", ratio)
    if not np.any(amodal_prime & ~mask_dilate(amodal, delta)):
        return CurationVerdict(COMPLETE, "contained_in_dilation", ratio)
    if ratio > epsilon:
        return CurationVerdict(INCOMPLETE, "major_extension", ratio)
    return CurationVerdict(COMPLETE, "minor_extension_tolerated", ratio)


def extract_prime_mask(image, amodal, prompt: str, backends: Backends, vocabulary,
                       origin=(0, 0)) -> np.ndarray:
    instances = backends.segmenter.segment_instances(image, vocabulary, origin=origin)
    idx = query_instance_index(instances, amodal, prompt)
    if idx is None:
        log.warning("no instance overlaps the amodal mask after outpainting")
        return amodal.copy()
    return instances[idx].mask | amodal


def classify_completion(image, amodal, prompt: str, config: PipelineConfig,
                        backends: Backends, *, origin=(0, 0),
                        seed: Optional[int] = None) -> CurationVerdict:
    image, amodal = as_image(image), as_mask(amodal)
    check_same_shape(image, amodal)
    if not amodal.any():
        raise ValueError("cannot curate an empty amodal mask")
    seed = config.rng_seed if seed is None else seed
    diffusion = backends.diffusion
    region = counterfactual_mask(amodal, config.corner_frac)
    state = diffusion.diffuse_range(image, region, prompt, 0, diffusion.total_steps,
                                    seed=seed, origin=origin)
    i_prime = diffusion.decode(state)
    vocab = [prompt] + [v for v in config.vocabulary if v != prompt]
    m_prime = extract_prime_mask(i_prime, amodal, prompt, backends, vocab, origin)
    verdict = decide(amodal, m_prime, config.curation_gamma, config.curation_delta,
                     config.curation_epsilon)
    verdict.m_prime, verdict.i_prime = m_prime, i_prime
    return verdict


def confusion_metrics(predicted: Sequence[bool], actual: Sequence[bool]) -> Dict:
    """Accuracy / precision / recall with "complete" as the positive class."""
    predicted = [bool(p) for p in predicted]
    actual = [bool(a) for a in actual]
    if len(predicted) != len(actual):
        raise ValueError("prediction and label counts differ")
    tp = sum(p and a for p, a in zip(predicted, actual))
    tn = sum(not p and not a for p, a in zip(predicted, actual))
    fp = sum(p and not a for p, a in zip(predicted, actual))
    fn = sum(not p and a for p, a in zip(predicted, actual))
    total = tp + tn + fp + fn

    def div(a, b):
        return a / b if b else 0.0

    return {"confusion": {"tp": tp, "tn": tn, "fp": fp, "fn": fn},
            "accuracy": div(tp + tn, total),
            "precision": div(tp, tp + fp),
            "recall": div(tp, tp + fn),
            "n": total}


def curate_batch(items: Iterable[dict], config: PipelineConfig, backends: Backends,
                 labels: Optional[Dict[str, str]] = None, jobs: int = 1) -> dict:
    """Curate many completions.

    Each item is a dict with ``id``, ``image``, ``mask``, ``prompt`` and
    optional ``origin``. ``labels`` maps ids to ``complete``/``incomplete``.
    """
    items = list(items)
    shared = backends.serialized() if jobs > 1 else backends

    def one(item):
        v = classify_completion(item["image"], item["mask"], item["prompt"], config, shared,
                                origin=tuple(item.get("origin", (0, 0))))
        return {"id": item["id"], **v.to_dict()}

    if jobs > 1:
        with ThreadPoolExecutor(jobs) as pool:
            results = list(pool.map(one, items))
    else:
        results = [one(it) for it in items]

    report = {"items": results}
    if labels is not None:
        missing = [r["id"] for r in results if r["id"] not in labels]
        if missing:
            raise KeyError(f"no ground-truth label for {missing}")
        for r in results:
            r["truth"] = labels[r["id"]]
        m = confusion_metrics([r["label"] == COMPLETE for r in results],
                              [r["truth"] == COMPLETE for r in results])
        report["confusion"] = m["confusion"]
        report["rows"] = [{"method": "counterfactual_rule",
                           "accuracy": round(m["accuracy"], 6),
                           "precision": round(m["precision"], 6),
                           "recall": round(m["recall"], 6)}]
    return report
