#!/usr/bin/env python3
"""
HOI evaluation
Box IoU, greedy prediction matching, all-point-interpolated AP,
interactiveness AP, HOI mAP, non-interaction suppression, pairwise NMS,
hard-case split reports and the JSONL prediction files.

Boxes here are plain [w1, h1, w2, h2] sequences normalized by image size.
A prediction is a true positive when both its human and object IoU with an
unmatched ground truth of the same class are strictly larger than 0.5.
"""

import csv
import io
import json
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from mask_geometry import PART_NAMES
from scene_synth import SceneAnnotation, SceneTags, tag_hard_cases
from utils import get_logger

logger = get_logger("eval")

SPLITS = ("full", "sparse", "crowded", "normal", "tiny", "less-occ", "more-occ")

SPLIT_RULES: Dict[str, Callable[[SceneTags], bool]] = {
    'full': lambda t: True,
    'sparse': lambda t: not t.crowded,
    'crowded': lambda t: t.crowded,
    'normal': lambda t: not t.tiny,
    'tiny': lambda t: t.tiny,
    'less-occ': lambda t: t.occluded == "low",
    'more-occ': lambda t: t.occluded == "high",
}


@dataclass
class NISConfig:
    threshold: float = 0.1
    nms_threshold: float = 0.6

    def __post_init__(self):
        for name in ('threshold', 'nms_threshold'):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {value}")


def iou(a: Sequence[float], b: Sequence[float]) -> float:
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    inter = max(iw, 0.0) * max(ih, 0.0)
    area_a = max(a[2] - a[0], 0.0) * max(a[3] - a[1], 0.0)
    area_b = max(b[2] - b[0], 0.0) * max(b[3] - b[1], 0.0)
    union = area_a + area_b - inter
    return inter / union if union > 0 else 0.0


# ============================================================================
# Matching and AP
# ============================================================================

@dataclass
class EvalRecord:
    """Score-sorted predictions of one image with their TP flags"""
    image_id: Any
    scores: List[float] = field(default_factory=list)
    tp: List[bool] = field(default_factory=list)
    gt_count: int = 0
    gt_matched: List[bool] = field(default_factory=list)

    @property
    def fp(self) -> List[bool]:
        return [not t for t in self.tp]


def match_predictions(predictions: Sequence[Dict[str, Any]], gts: Sequence[Dict[str, Any]],
                      image_id: Any = None, iou_threshold: float = 0.5,
                      class_key: Optional[str] = 'category', score_key: str = 'score') -> EvalRecord:
    """
    Greedy matching in descending score order

    Each prediction takes the unmatched ground truth of the same class
    (`class_key`, ignored when None) with the highest min(IoU_h, IoU_o) among
    those where both IoUs exceed the threshold.
    """
    order = sorted(range(len(predictions)), key=lambda i: -predictions[i][score_key])
    record = EvalRecord(image_id, gt_count=len(gts), gt_matched=[False] * len(gts))
    for i in order:
        pred = predictions[i]
        best, best_overlap = -1, -1.0
        for g, gt in enumerate(gts):
            if record.gt_matched[g]:
                continue
            if class_key is not None and pred[class_key] != gt[class_key]:
                continue
            overlap = min(iou(pred['bh'], gt['bh']), iou(pred['bo'], gt['bo']))
            if overlap > iou_threshold and overlap > best_overlap:
                best, best_overlap = g, overlap
        if best >= 0:
            record.gt_matched[best] = True
        record.scores.append(float(pred[score_key]))
        record.tp.append(best >= 0)
    return record


def average_precision(records: Iterable[EvalRecord]) -> Optional[float]:
    """
    All-point-interpolated AP of the pooled records

    Returns None when there is no ground truth.
    """
    records = list(records)
    total_gt = sum(r.gt_count for r in records)
    if total_gt == 0:
        return None
    scores = np.asarray([s for r in records for s in r.scores], dtype=np.float64)
    tp = np.asarray([t for r in records for t in r.tp], dtype=np.float64)
    if scores.size == 0:
        return 0.0
    order = np.argsort(-scores, kind='stable')
    tp = tp[order]
    tp_cum = np.cumsum(tp)
    fp_cum = np.cumsum(1.0 - tp)
    recall = tp_cum / total_gt
    precision = tp_cum / np.maximum(tp_cum + fp_cum, np.finfo(np.float64).eps)

    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    for i in range(mpre.size - 1, 0, -1):
        mpre[i - 1] = max(mpre[i - 1], mpre[i])
    idx = np.where(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))


# ============================================================================
# Ground truth
# ============================================================================

def _normalize(box, width: int, height: int) -> List[float]:
    w1, h1, w2, h2 = box.to_list()
    return [w1 / width, h1 / height, w2 / width, h2 / height]


def ground_truth_pairs(scene: SceneAnnotation) -> List[Dict[str, Any]]:
    """Interactive pairs of a scene with normalized boxes"""
    pairs = []
    for it in scene.interactive_pairs():
        pairs.append({
            'bh': _normalize(scene.persons[it.person].bbox, scene.width, scene.height),
            'bo': _normalize(scene.objects[it.object].bbox, scene.width, scene.height),
            'category': scene.objects[it.object].category,
            'verbs': list(it.verbs),
            'part_labels': list(it.part_labels) if it.part_labels is not None else None,
        })
    return pairs


def ground_truth_triplets(scene: SceneAnnotation) -> List[Dict[str, Any]]:
    """One (verb, object) triplet per active verb of each interactive pair"""
    triplets = []
    for pair in ground_truth_pairs(scene):
        for v, on in enumerate(pair['verbs']):
            if on:
                triplets.append({**pair, 'verb': v, 'hoi': (v, pair['category'])})
    return triplets


def _by_image(predictions: Sequence[Dict[str, Any]]) -> Dict[Any, List[Dict[str, Any]]]:
    return {p['image_id']: list(p['detections']) for p in predictions}


# ============================================================================
# Interactiveness AP
# ============================================================================

def interactiveness_records(int_predictions: Sequence[Dict[str, Any]], scenes: Sequence[SceneAnnotation],
                            iou_threshold: float = 0.5) -> List[EvalRecord]:
    """Records over the interactiveness proposals R'; all interactive pairs form one class"""
    by_image = _by_image(int_predictions)
    records = []
    for scene in scenes:
        dets = [{**d, 'score': d['int_score']} for d in by_image.get(scene.id, []) if d.get('int_score') is not None]
        records.append(match_predictions(dets, ground_truth_pairs(scene), scene.id, iou_threshold, class_key=None))
    return records


def interactiveness_ap(int_predictions: Sequence[Dict[str, Any]], scenes: Sequence[SceneAnnotation],
                       iou_threshold: float = 0.5) -> Optional[float]:
    return average_precision(interactiveness_records(int_predictions, scenes, iou_threshold))


def part_ap(int_predictions: Sequence[Dict[str, Any]], scenes: Sequence[SceneAnnotation],
            iou_threshold: float = 0.5) -> Dict[str, Optional[float]]:
    """
    Per-part AP of the part scores as six detectors, plus their mean

    Ground truth for part k is the interactive pairs whose part label k is
    set; parts without any such pair are reported as None and left out of
    the mean.
    """
    by_image = _by_image(int_predictions)
    result: Dict[str, Optional[float]] = {}
    for k, name in enumerate(PART_NAMES):
        records = []
        for scene in scenes:
            gts = [g for g in ground_truth_pairs(scene) if g['part_labels'] and g['part_labels'][k]]
            dets = [{**d, 'score': d['part_scores'][k]} for d in by_image.get(scene.id, [])
                    if d.get('part_scores') is not None]
            records.append(match_predictions(dets, gts, scene.id, iou_threshold, class_key=None))
        result[name] = average_precision(records)
    values = [v for v in result.values() if v is not None]
    result['mean'] = float(np.mean(values)) if values else None
    return result


# ============================================================================
# NIS and NMS
# ============================================================================

def match_for_nis(verb_detections: Sequence[Dict[str, Any]],
                  int_detections: Sequence[Dict[str, Any]]) -> List[Tuple[Optional[int], float]]:
    """
    For every verb proposal r_i, the interactiveness proposal of the same
    object class maximizing IoU_h + IoU_o (ties to the smaller index), and
    its interactiveness score; (None, 0.0) when no class-consistent
    candidate exists.
    """
    matches = []
    for r in verb_detections:
        best, best_sum = None, -1.0
        for j, cand in enumerate(int_detections):
            if cand['category'] != r['category']:
                continue
            total = iou(r['bh'], cand['bh']) + iou(r['bo'], cand['bo'])
            if total > best_sum:
                best, best_sum = j, total
        score = float(int_detections[best]['int_score']) if best is not None else 0.0
        matches.append((best, score))
    return matches


def attach_interactiveness(verb_detections: Sequence[Dict[str, Any]],
                           int_detections: Sequence[Dict[str, Any]]) -> List[Dict[str, Any]]:
    return [{**r, 'int_score': score}
            for r, (_, score) in zip(verb_detections, match_for_nis(verb_detections, int_detections))]


def nis_filter(detections: Sequence[Dict[str, Any]], threshold: float) -> List[Dict[str, Any]]:
    """Keep proposals whose matched interactiveness score is >= threshold"""
    return [d for d in detections if d['int_score'] >= threshold]


def pairwise_nms(triplets: Sequence[Dict[str, Any]], iou_threshold: float = 0.6,
                 class_key: str = 'hoi', score_key: str = 'score') -> List[Dict[str, Any]]:
    """
    Greedy pair NMS within each HOI class

    A triplet is suppressed when both its human and object IoU with a
    higher-scored kept triplet of the same class exceed the threshold.
    """
    order = sorted(range(len(triplets)), key=lambda i: -triplets[i][score_key])
    kept: List[Dict[str, Any]] = []
    for i in order:
        t = triplets[i]
        if any(k[class_key] == t[class_key]
               and iou(k['bh'], t['bh']) > iou_threshold
               and iou(k['bo'], t['bo']) > iou_threshold for k in kept):
            continue
        kept.append(t)
    return kept


def hoi_triplets(detections: Sequence[Dict[str, Any]], max_detections: Optional[int] = None) -> List[Dict[str, Any]]:
    """Expand proposals into (verb, object) triplets scored p_verb[v] * c[obj]"""
    triplets = []
    for d in detections:
        for v, s in enumerate(d.get('verb_scores') or []):
            triplets.append({'bh': d['bh'], 'bo': d['bo'], 'category': d['category'], 'verb': v,
                             'hoi': (v, d['category']), 'score': float(s) * float(d['category_score'])})
    triplets.sort(key=lambda t: -t['score'])
    return triplets[:max_detections] if max_detections else triplets


# ============================================================================
# HOI mAP
# ============================================================================

def image_triplets(verb_detections: Sequence[Dict[str, Any]],
                   int_detections: Optional[Sequence[Dict[str, Any]]] = None,
                   nis_threshold: Optional[float] = None, nms_threshold: float = 0.6,
                   max_detections: Optional[int] = None) -> List[Dict[str, Any]]:
    """NIS (when a threshold and R' are given), triplet scoring and pairwise NMS for one image"""
    dets = list(verb_detections)
    if nis_threshold is not None and int_detections is not None:
        dets = nis_filter(attach_interactiveness(dets, int_detections), nis_threshold)
    kept = pairwise_nms(hoi_triplets(dets), nms_threshold)
    return kept[:max_detections] if max_detections else kept


def hoi_map(verb_predictions: Sequence[Dict[str, Any]], scenes: Sequence[SceneAnnotation],
            int_predictions: Optional[Sequence[Dict[str, Any]]] = None,
            nis_threshold: Optional[float] = None, nms_threshold: float = 0.6,
            iou_threshold: float = 0.5, max_detections: Optional[int] = None) -> Tuple[Optional[float], Dict[Tuple[int, int], Optional[float]]]:
    """
    Mean AP over (verb, object) categories present in the ground truth

    Returns:
        (mAP or None, AP per category)
    """
    verb_by_image = _by_image(verb_predictions)
    int_by_image = _by_image(int_predictions) if int_predictions is not None else {}
    per_category: Dict[Tuple[int, int], List[EvalRecord]] = {}
    triplets_by_image = {}
    gts_by_image = {}
    categories = set()
    for scene in scenes:
        triplets_by_image[scene.id] = image_triplets(
            verb_by_image.get(scene.id, []), int_by_image.get(scene.id) if int_predictions is not None else None,
            nis_threshold, nms_threshold, max_detections)
        gts_by_image[scene.id] = ground_truth_triplets(scene)
        categories.update(t['hoi'] for t in triplets_by_image[scene.id])
        categories.update(g['hoi'] for g in gts_by_image[scene.id])

    for hoi in sorted(categories):
        per_category[hoi] = [
            match_predictions([t for t in triplets_by_image[s.id] if t['hoi'] == hoi],
                              [g for g in gts_by_image[s.id] if g['hoi'] == hoi],
                              s.id, iou_threshold, class_key='hoi')
            for s in scenes
        ]

    aps = {hoi: average_precision(recs) for hoi, recs in per_category.items()}
    skipped = [hoi for hoi, ap in aps.items() if ap is None]
    if skipped:
        logger.debug(f"[EVAL] {len(skipped)} HOI categories without ground truth skipped: {skipped}")
    values = [ap for ap in aps.values() if ap is not None]
    return (float(np.mean(values)) if values else None), aps


def shuffle_int_scores(int_predictions: Sequence[Dict[str, Any]], seed: int = 0) -> List[Dict[str, Any]]:
    """Random baseline: interactiveness scores permuted across all proposals"""
    scores = [d['int_score'] for p in int_predictions for d in p['detections']]
    random.Random(seed).shuffle(scores)
    it = iter(scores)
    return [{**p, 'detections': [{**d, 'int_score': next(it)} for d in p['detections']]}
            for p in int_predictions]


# ============================================================================
# Split report
# ============================================================================

@dataclass
class SplitRow:
    split: str
    images: int
    gt_count: int
    value: Optional[float]

    def formatted(self) -> str:
        return "n/a" if self.value is None else f"{self.value:.4f}"


def split_scenes(scenes: Sequence[SceneAnnotation], split: str) -> List[SceneAnnotation]:
    if split not in SPLIT_RULES:
        raise ValueError(f"Unknown split '{split}'; expected one of {list(SPLIT_RULES)}")
    rule = SPLIT_RULES[split]
    return [s for s in scenes if rule(tag_hard_cases(s))]


def split_report(scenes: Sequence[SceneAnnotation],
                 metric: Callable[[Sequence[SceneAnnotation]], Optional[float]],
                 splits: Sequence[str] = SPLITS) -> List[SplitRow]:
    """
    Metric per hard-case split; a split without images or ground truth is n/a

    The mid occlusion band belongs to neither less-occ nor more-occ.
    """
    rows = []
    for split in splits:
        subset = split_scenes(scenes, split)
        gt = sum(len(s.interactive_pairs()) for s in subset)
        value = metric(subset) if subset and gt else None
        rows.append(SplitRow(split, len(subset), gt, value))
    return rows


def format_table(rows: Sequence[SplitRow], metric_name: str = "AP") -> str:
    lines = [f"{'split':<10} {'images':>7} {'gt':>6} {metric_name:>8}", "-" * 34]
    for r in rows:
        lines.append(f"{r.split:<10} {r.images:>7} {r.gt_count:>6} {r.formatted():>8}")
    return "\n".join(lines)


def rows_to_csv(rows: Sequence[SplitRow], metric_name: str = "ap") -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["split", "images", "gt", metric_name])
    for r in rows:
        writer.writerow([r.split, r.images, r.gt_count, r.formatted()])
    return buf.getvalue()


# ============================================================================
# Prediction files
# ============================================================================

def write_predictions(predictions: Sequence[Dict[str, Any]], path: Union[str, Path]) -> Path:
    """JSONL, one image per line"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as f:
        for p in predictions:
            f.write(json.dumps(p, sort_keys=True) + "\n")
    return path


def read_predictions(path: Union[str, Path]) -> List[Dict[str, Any]]:
    predictions = []
    with Path(path).open(encoding="utf-8") as f:
        for n, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as e:
                raise ValueError(f"{path}:{n}: malformed prediction line ({e.msg})") from e
            if 'image_id' not in record or 'detections' not in record:
                raise ValueError(f"{path}:{n}: prediction lines need image_id and detections")
            predictions.append(record)
    return predictions
