"""Detection metrics: 2D/3D IoU, PascalVOC-style mAP and threshold sweeps."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .labelgen import Box3D, image_key, rle_decode


# ---------------------------------------------------------------------------
# IoU


def box_iou(a, b) -> float:
    """IoU of two ``(x, y, w, h)`` boxes with continuous extents."""
    ax, ay, aw, ah = (float(v) for v in a)
    bx, by, bw, bh = (float(v) for v in b)
    iw = min(ax + aw, bx + bw) - max(ax, bx)
    ih = min(ay + ah, by + bh) - max(ay, by)
    inter = max(iw, 0.0) * max(ih, 0.0)
    union = aw * ah + bw * bh - inter
    return inter / union if union > 0 else 0.0


def mask_iou(a, b) -> float:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = np.count_nonzero(a | b)
    return np.count_nonzero(a & b) / union if union else 0.0


def iou_2d(a, b) -> float:
    """IoU of two boxes ``(x, y, w, h)`` or two boolean masks."""
    if isinstance(a, np.ndarray) and a.ndim == 2 and isinstance(b, np.ndarray) and b.ndim == 2:
        return mask_iou(a, b)
    return box_iou(a, b)


def polygon_area(poly) -> float:
    p = np.asarray(poly, dtype=np.float64)
    if len(p) < 3:
        return 0.0
    x, y = p[:, 0], p[:, 1]
    return 0.5 * abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def clip_polygon(subject, clip) -> np.ndarray:
    """Sutherland-Hodgman clipping of ``subject`` by the convex CCW polygon ``clip``."""
    out = [tuple(p) for p in np.asarray(subject, dtype=np.float64)]
    clip = np.asarray(clip, dtype=np.float64)
    for i in range(len(clip)):
        if not out:
            break
        a, b = clip[i], clip[(i + 1) % len(clip)]
        ex, ey = b[0] - a[0], b[1] - a[1]

        def side(p):
            return ex * (p[1] - a[1]) - ey * (p[0] - a[0])

        inp, out = out, []
        for j in range(len(inp)):
            cur, prev = inp[j], inp[j - 1]
            sc, sp = side(cur), side(prev)
            if sc >= 0:
                if sp < 0:
                    t = sp / (sp - sc)
                    out.append((prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1])))
                out.append(cur)
            elif sp >= 0:
                t = sp / (sp - sc)
                out.append((prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1])))
    return np.array(out).reshape(-1, 2)


def iou_3d(a: Box3D, b: Box3D, mode: str = "volume") -> float:
    """Rotated-box IoU: footprint intersection times vertical overlap.

    ``mode="bev"`` returns the footprint (bird's-eye) IoU instead.
    """
    inter_area = polygon_area(clip_polygon(a.footprint(), b.footprint()))
    if mode == "bev":
        union = a.dims[0] * a.dims[1] + b.dims[0] * b.dims[1] - inter_area
        return inter_area / union if union > 0 else 0.0
    if mode != "volume":
        raise ValueError(f"unknown 3D IoU mode {mode!r}")
    (a0, a1), (b0, b1) = a.z_range, b.z_range
    inter = inter_area * max(0.0, min(a1, b1) - max(a0, b0))
    union = a.volume + b.volume - inter
    return inter / union if union > 0 else 0.0


# ---------------------------------------------------------------------------
# mAP


@dataclass
class Prediction:
    image_id: str
    class_id: int
    score: float
    region: object


@dataclass
class GroundTruth:
    image_id: str
    class_id: int
    region: object


@dataclass
class EvalRecord:
    iou_threshold: float
    ap: dict = field(default_factory=dict)
    map: float | None = None
    precision: float | None = None
    recall: float | None = None
    tp: int = 0
    fp: int = 0
    fn: int = 0

    def to_dict(self) -> dict:
        return {"iou_threshold": self.iou_threshold, "ap": {str(k): v for k, v in self.ap.items()},
                "map": self.map, "precision": self.precision, "recall": self.recall,
                "tp": self.tp, "fp": self.fp, "fn": self.fn}


def average_precision(recall, precision) -> float:
    """All-point interpolated area under the monotone precision envelope."""
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    idx = np.flatnonzero(mrec[1:] != mrec[:-1]) + 1
    return float(np.sum((mrec[idx] - mrec[idx - 1]) * mpre[idx]))


def compute_map(predictions, ground_truths, iou_threshold: float = 0.5, iou_fn=None) -> EvalRecord:
    """PascalVOC-style mAP with greedy one-to-one matching by descending score.

    A prediction is matched to the same-image, same-class ground truth of
    highest IoU; it is a true positive only if that IoU reaches the threshold
    and the ground truth is still unmatched. Classes without ground truth do
    not enter the mean; with no ground truth at all ``map`` is None.
    """
    iou_fn = iou_fn or iou_2d
    gts_by = {}
    for g in ground_truths:
        gts_by.setdefault((g.class_id, g.image_id), []).append(g)
    n_gt = {}
    for g in ground_truths:
        n_gt[g.class_id] = n_gt.get(g.class_id, 0) + 1
    rec = EvalRecord(iou_threshold)
    classes = sorted(set(n_gt) | {p.class_id for p in predictions})
    total_tp = total_fp = 0
    for c in classes:
        preds = sorted((p for p in predictions if p.class_id == c), key=lambda p: -p.score)
        used = {}
        tp = np.zeros(len(preds))
        for i, p in enumerate(preds):
            cands = gts_by.get((c, p.image_id), [])
            best, best_j = -1.0, -1
            for j, g in enumerate(cands):
                o = iou_fn(p.region, g.region)
                if o > best:
                    best, best_j = o, j
            flags = used.setdefault(p.image_id, [False] * len(cands))
            if best_j >= 0 and best >= iou_threshold and not flags[best_j]:
                flags[best_j] = True
                tp[i] = 1
        ctp = int(tp.sum())
        total_tp += ctp
        total_fp += len(preds) - ctp
        if n_gt.get(c, 0) == 0:
            continue
        acc_tp = np.cumsum(tp)
        acc_fp = np.cumsum(1 - tp)
        recall = acc_tp / n_gt[c]
        precision = acc_tp / np.maximum(acc_tp + acc_fp, np.finfo(float).eps)
        rec.ap[c] = average_precision(recall, precision) if len(preds) else 0.0
    total_gt = sum(n_gt.values())
    rec.tp, rec.fp, rec.fn = total_tp, total_fp, total_gt - total_tp
    rec.map = float(np.mean(list(rec.ap.values()))) if rec.ap else None
    rec.precision = total_tp / (total_tp + total_fp) if (total_tp + total_fp) else None
    rec.recall = total_tp / total_gt if total_gt else None
    return rec


def pr_sweep(predictions, ground_truths, thresholds, iou_threshold: float = 0.5, iou_fn=None) -> list[dict]:
    """One row per confidence threshold: keep predictions with score >= theta."""
    rows = []
    for th in thresholds:
        kept = [p for p in predictions if p.score >= th]
        r = compute_map(kept, ground_truths, iou_threshold, iou_fn)
        rows.append({"theta": float(th), "precision": r.precision, "recall": r.recall, "map": r.map,
                     "n_pred": len(kept), "tp": r.tp, "fp": r.fp})
    return rows


# ---------------------------------------------------------------------------
# corpus I/O


def coco_predictions(coco: dict, use_masks: bool = False) -> tuple[list[Prediction], set]:
    """Predictions and the set of image keys from a COCO-style label export."""
    images = {im["id"]: im for im in coco["images"]}
    keys = {image_key(im["episode_id"], im["view_index"]) for im in coco["images"]}
    preds = []
    for a in coco["annotations"]:
        if a.get("empty") or a["bbox"][2] <= 0:
            continue
        im = images[a["image_id"]]
        region = rle_decode(a["segmentation"]) if use_masks else tuple(a["bbox"])
        preds.append(Prediction(image_key(im["episode_id"], im["view_index"]), int(a["category_id"]),
                                float(a.get("score", 1.0)), region))
    return preds, keys


def sidecar_paths(data_dir) -> list[Path]:
    return sorted(Path(data_dir).glob("*/gt.json"))


def load_ground_truth(data_dir, min_pixels: int = 25, use_masks: bool = False):
    """2D and 3D target ground truth from simulator sidecars."""
    gt2d, gt3d = [], []
    for p in sidecar_paths(data_dir):
        doc = json.loads(p.read_text())
        ep = doc["episode_id"]
        for v in doc["views"]:
            if v["target_visible_pixels"] < min_pixels:
                continue
            if use_masks:
                from .ingest import read_mask
                region = read_mask(p.parent / v["target_mask"])
            else:
                region = tuple(v["target_bbox"])
            gt2d.append(GroundTruth(image_key(ep, v["view_index"]), int(doc["target_class"]), region))
        gt3d.append(GroundTruth(ep, int(doc["target_class"]), Box3D.from_dict(doc["box3d"])))
    return gt2d, gt3d


def detector_predictions(data_dir, use_masks: bool = False) -> list[Prediction]:
    """Raw detector output attributed to each episode's target instance."""
    from .ingest import read_mask
    preds = []
    for p in sidecar_paths(data_dir):
        doc = json.loads(p.read_text())
        manifest = json.loads((p.parent / "manifest.json").read_text())
        ep = doc["episode_id"]
        for d, inst in zip(manifest["detections"], doc["detection_instances"]):
            if inst != doc["target_instance"]:
                continue
            region = read_mask(p.parent / d["mask"]) if use_masks else tuple(d["bbox"])
            preds.append(Prediction(image_key(ep, d["view_index"]), int(d["class_id"]),
                                    float(d["confidence"]), region))
    return preds


def gt_to_coco(gt2d: list[GroundTruth]) -> dict:
    """Ground truth in the label-export schema (score 1), for self-evaluation."""
    images, anns = [], []
    for g in gt2d:
        ep, view = g.image_id.rsplit("/", 1)
        images.append({"id": len(images) + 1, "episode_id": ep, "view_index": int(view)})
        x, y, w, h = g.region
        from .labelgen import rle_encode
        anns.append({"id": len(anns) + 1, "image_id": len(images), "category_id": g.class_id,
                     "bbox": [x, y, w, h], "score": 1.0, "empty": False,
                     "segmentation": rle_encode(np.zeros((1, 1), dtype=bool))})
    return {"images": images, "annotations": anns, "categories": []}


def restrict(items, keys: set):
    return [x for x in items if x.image_id in keys]


def evaluate_corpus(labels_dir, data_dir, iou_thresholds=(0.5, 0.3), iou3d: float = 0.25,
                    min_pixels: int = 25, mode3d: str = "volume", detector_threshold: float = 0.5) -> dict:
    """Evaluate a label export against simulator ground truth.

    Only the images present in the export are scored; the detector baseline is
    scored on that same image set at its operating threshold
    ``detector_threshold``.
    """
    labels_dir = Path(labels_dir)
    coco = json.loads((labels_dir / "labels_2d.json").read_text())
    preds, keys = coco_predictions(coco)
    gt2d, gt3d = load_ground_truth(data_dir, min_pixels)
    gt2d = restrict(gt2d, keys)
    report = {"n_images": len(keys), "n_gt": len(gt2d), "labels": {}, "detector": {}}
    det = [p for p in restrict(detector_predictions(data_dir), keys) if p.score >= detector_threshold]
    report["detector_threshold"] = detector_threshold
    for t in iou_thresholds:
        report["labels"][str(t)] = compute_map(preds, gt2d, t).to_dict()
        report["detector"][str(t)] = compute_map(det, gt2d, t).to_dict()
    p3 = labels_dir / "labels_3d.json"
    if p3.exists():
        eps = {k.rsplit("/", 1)[0] for k in keys}
        boxes = json.loads(p3.read_text())
        pred3d = [Prediction(b["episode_id"], int(b["class_id"]), 1.0, Box3D.from_dict(b)) for b in boxes]
        g3 = [g for g in gt3d if g.image_id in eps]
        report["labels_3d"] = compute_map(pred3d, g3, iou3d,
                                          lambda a, b: iou_3d(a, b, mode3d)).to_dict()
    return report


def format_table(report: dict) -> str:
    lines = []
    for source in ("labels", "detector"):
        for t, r in report.get(source, {}).items():
            m = "n/a" if r["map"] is None else f"{100 * r['map']:.2f}"
            per = " ".join(f"{c}:{100 * v:.1f}" for c, v in sorted(r["ap"].items()))
            lines.append(f"{source:9s} mAP@{t:<4s} {m:>7s}   {per}")
    if "labels_3d" in report:
        r = report["labels_3d"]
        m = "n/a" if r["map"] is None else f"{100 * r['map']:.2f}"
        lines.append(f"labels3d  mAP@{r['iou_threshold']:<4} {m:>7s}")
    for row in report.get("sweep", []):
        p = "n/a" if row["precision"] is None else f"{100 * row['precision']:.2f}"
        r = "n/a" if row["recall"] is None else f"{100 * row['recall']:.2f}"
        m = "n/a" if row["map"] is None else f"{100 * row['map']:.2f}"
        lines.append(f"sweep theta={row['theta']:.2f} P={p} R={r} mAP={m} n={row['n_pred']}")
    return "\n".join(lines)


def finite_or_none(x):
    return None if x is None or (isinstance(x, float) and math.isnan(x)) else x
