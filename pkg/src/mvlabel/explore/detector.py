"""A mock 2D detector driven by ground-truth instance masks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..ingest import Detection, morphology


@dataclass(frozen=True)
class MockDetectorModel:
    base_conf: float = 0.95
    occlusion_exponent: float = 2.0
    misclass_rate: float = 0.05
    rng_seed: int | None = 0
    min_pixels: int = 25
    max_erode: int = 2

    def __post_init__(self):
        if not 0 <= self.base_conf <= 1:
            raise ValueError("base_conf must lie in [0, 1]")
        if not 0 <= self.misclass_rate <= 1:
            raise ValueError("misclass_rate must lie in [0, 1]")
        if self.occlusion_exponent < 0:
            raise ValueError("occlusion_exponent must be nonnegative")


def mock_detect(render, model: MockDetectorModel, class_ids=None, world=None, rng=None):
    """Detect every visible instance of a rendered frame.

    Confidence is ``base_conf * visible_fraction ** occlusion_exponent``,
    where the fraction compares visible pixels with the object's area on an
    enlarged, occluder-free canvas. With probability ``misclass_rate`` the
    class is replaced by a different one from ``class_ids``. Masks are the
    visible ground truth eroded by a random 0..``max_erode`` pixels; an
    instance is skipped when fewer than ``min_pixels`` remain.

    Returns ``(detections, instance_ids)`` as parallel lists.
    """
    rng = np.random.default_rng(model.rng_seed if rng is None else rng)
    if world is not None:
        classes = {p.instance_id: p.class_id for p in world.primitives}
    else:
        classes = getattr(render, "classes", {})
    all_classes = sorted(set(class_ids) if class_ids is not None else set(classes.values()))
    dets, insts = [], []
    for inst in sorted(render.visible_pixels):
        frac = min(render.visible_fraction(inst), 1.0)
        conf = model.base_conf * frac ** model.occlusion_exponent
        cls = classes[inst]
        others = [c for c in all_classes if c != cls]
        flip = rng.random() < model.misclass_rate
        if flip and others:
            cls = others[int(rng.integers(len(others)))]
        r = int(rng.integers(model.max_erode + 1))
        mask = render.instance_mask(inst)
        if r:
            mask = morphology(mask, "erode", r)
        if np.count_nonzero(mask) < model.min_pixels:
            continue
        dets.append(Detection(render.frame.view_index, int(cls), float(conf), mask))
        insts.append(int(inst))
    return dets, insts
