#!/usr/bin/env python3
"""
Synthetic HOI scenes

Persons are groups of colored rectangles (one color per body part), objects
are category-specific shapes. Ground-truth interactiveness follows a
geometric rule: a person interacts with an object through verb v when the
object overlaps one of the person's part boxes designated for v by at least
`overlap_threshold` of the object's area. Everything is a pure function of
the scene seed, so scenes can be generated in any order or process.

Annotation files use the versioned JSON schema

    {"schema": 1, "images": [{"id", "width", "height",
        "persons": [{"bbox": [w1, h1, w2, h2], "parts": {"feet": [...], ...},
                     "joint_confidence": j}],
        "objects": [{"bbox": [...], "category": c}],
        "interactions": [{"person", "object", "verbs": [0/1 ...],
                          "interactive": bool, "part_labels": [6 bools]?}]}]}
"""

import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, asdict
from functools import partial
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from mask_geometry import BodyPart, Box, NUM_PARTS, PART_NAMES
from utils import derive_seed, get_logger

logger = get_logger("synth")

SCHEMA_VERSION = 1

OBJECT_NAMES = ("ball", "cup", "chair")
VERB_NAMES = ("hold", "kick", "sit_on", "look_at")
# part through which each verb happens
VERB_PARTS = (BodyPart.HANDS, BodyPart.FEET, BodyPart.HIP, BodyPart.HEAD)

# Part boxes relative to the person box (fractions of width / height)
PART_LAYOUT: Dict[BodyPart, Tuple[Tuple[float, float, float, float], ...]] = {
    BodyPart.HEAD: ((0.30, 0.00, 0.70, 0.18),),
    BodyPart.ARMS: ((0.00, 0.18, 0.25, 0.50), (0.75, 0.18, 1.00, 0.50)),
    BodyPart.HANDS: ((0.00, 0.50, 0.25, 0.60), (0.75, 0.50, 1.00, 0.60)),
    BodyPart.HIP: ((0.25, 0.45, 0.75, 0.60),),
    BodyPart.LEGS: ((0.25, 0.60, 0.50, 0.90), (0.50, 0.60, 0.75, 0.90)),
    BodyPart.FEET: ((0.20, 0.90, 0.50, 1.00), (0.50, 0.90, 0.80, 1.00)),
}
TORSO_LAYOUT = (0.25, 0.18, 0.75, 0.45)
PERSON_ASPECT = 0.4

PART_COLORS = {
    BodyPart.FEET: (40, 40, 160),
    BodyPart.LEGS: (60, 110, 220),
    BodyPart.HIP: (150, 60, 180),
    BodyPart.HANDS: (240, 200, 40),
    BodyPart.ARMS: (230, 130, 40),
    BodyPart.HEAD: (230, 60, 60),
}
TORSO_COLOR = (120, 120, 120)
OBJECT_COLORS = {1: (30, 200, 90), 2: (240, 240, 240), 3: (110, 70, 30)}
BACKGROUND = (20, 20, 20)

TINY_RATIO = 0.1
CROWDED_PAIRS = 3
HIGH_OCCLUSION = 0.2
LOW_OCCLUSION = 0.6


class SchemaError(ValueError):
    """Annotation document does not follow the versioned schema"""

    def __init__(self, message: str, path: str = "$", version: int = SCHEMA_VERSION):
        self.path = path
        self.version = version
        super().__init__(f"{path}: {message} (annotation schema {version})")


class ProfileError(ValueError):
    """A synthesis profile that cannot produce a scene"""
    pass


@dataclass
class PersonAnnotation:
    bbox: Box
    parts: Dict[str, List[Box]]
    joint_confidence: float = 1.0

    def part_boxes(self, part: BodyPart) -> List[Box]:
        return self.parts.get(part.key, [])


@dataclass
class ObjectAnnotation:
    bbox: Box
    category: int


@dataclass
class Interaction:
    person: int
    object: int
    verbs: List[int]
    interactive: bool
    part_labels: Optional[List[bool]] = None


@dataclass
class SceneAnnotation:
    id: int
    width: int
    height: int
    persons: List[PersonAnnotation] = field(default_factory=list)
    objects: List[ObjectAnnotation] = field(default_factory=list)
    interactions: List[Interaction] = field(default_factory=list)

    @property
    def image_size(self) -> Tuple[int, int]:
        """(H0, W0)"""
        return self.height, self.width

    def interactive_pairs(self) -> List[Interaction]:
        return [it for it in self.interactions if it.interactive]

    def to_dict(self) -> Dict[str, Any]:
        return {
            'id': self.id,
            'width': self.width,
            'height': self.height,
            'persons': [{
                'bbox': p.bbox.to_list(),
                'parts': {name: [b.to_list() for b in p.parts.get(name, [])] for name in PART_NAMES},
                'joint_confidence': p.joint_confidence,
            } for p in self.persons],
            'objects': [{'bbox': o.bbox.to_list(), 'category': o.category} for o in self.objects],
            'interactions': [_interaction_to_dict(it) for it in self.interactions],
        }


def _interaction_to_dict(it: Interaction) -> Dict[str, Any]:
    data = {'person': it.person, 'object': it.object, 'verbs': list(it.verbs), 'interactive': it.interactive}
    if it.part_labels is not None:
        data['part_labels'] = list(it.part_labels)
    return data


@dataclass
class SceneTags:
    crowded: bool
    tiny: bool
    occluded: str                   # low | mid | high | n/a (no persons)
    person_count: int
    interactive_pair_count: int
    min_area_ratio: Optional[float]
    mean_joint_confidence: Optional[float]

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class SynthProfile:
    """Difficulty profile of the generator"""
    width: int = 256
    height: int = 256
    min_persons: int = 1
    max_persons: int = 4
    min_person_height: float = 80.0
    max_person_height: float = 200.0
    max_objects: int = 5
    crowded_rate: float = 0.4
    occlusion_rate: float = 0.3
    overlap_threshold: float = 0.3
    sparse_pairs: Tuple[int, int] = (0, 2)
    # scenes with more interactive pairs than detector queries are redrawn
    max_pairs: int = 8
    num_verbs: int = len(VERB_NAMES)
    num_objects: int = len(OBJECT_NAMES)
    max_attempts: int = 50

    @classmethod
    def from_config(cls, config) -> 'SynthProfile':
        s = config.synth
        return cls(
            width=config.model.image_size, height=config.model.image_size,
            min_persons=s.min_persons, max_persons=s.max_persons,
            min_person_height=s.min_person_height, max_person_height=s.max_person_height,
            max_objects=s.max_objects, crowded_rate=s.crowded_rate,
            occlusion_rate=s.occlusion_rate, overlap_threshold=s.overlap_threshold,
            num_verbs=config.model.num_verbs, num_objects=config.model.num_objects,
            max_pairs=config.model.nq,
        )

    def validate(self):
        if self.width <= 0 or self.height <= 0:
            raise ProfileError(f"Image size must be positive, got {self.width}x{self.height}")
        if not 0 <= self.min_persons <= self.max_persons:
            raise ProfileError(f"Person range [{self.min_persons}, {self.max_persons}] is empty")
        if not 0 < self.min_person_height <= self.max_person_height:
            raise ProfileError("Person height range must be positive and ordered")
        if self.min_person_height > self.height or self.min_person_height * PERSON_ASPECT > self.width:
            raise ProfileError(f"Persons of height {self.min_person_height} do not fit a "
                               f"{self.width}x{self.height} image")
        if self.crowded_rate > 0 and (self.max_persons < 1 or self.max_objects < CROWDED_PAIRS):
            raise ProfileError(f"Crowded scenes need a person and {CROWDED_PAIRS} objects; "
                               f"got max_persons={self.max_persons}, max_objects={self.max_objects}")
        if self.num_verbs > len(VERB_NAMES) or self.num_objects > len(OBJECT_NAMES):
            raise ProfileError(f"Vocabulary has {len(VERB_NAMES)} verbs and {len(OBJECT_NAMES)} objects")
        lo, hi = self.sparse_pairs
        if not 0 <= lo <= hi:
            raise ProfileError(f"Invalid sparse pair range {self.sparse_pairs}")
        if self.max_pairs < CROWDED_PAIRS and self.crowded_rate > 0:
            raise ProfileError(f"max_pairs={self.max_pairs} leaves no room for crowded scenes "
                               f"(at least {CROWDED_PAIRS} interactive pairs)")


# ============================================================================
# Geometry
# ============================================================================

def _scaled(person: Box, frac: Tuple[float, float, float, float]) -> Box:
    w, h = person.width, person.height
    return Box(person.w1 + frac[0] * w, person.h1 + frac[1] * h,
               person.w1 + frac[2] * w, person.h1 + frac[3] * h)


def _clip_to(box: Box, bound: Box) -> Box:
    return Box(min(max(box.w1, bound.w1), bound.w2), min(max(box.h1, bound.h1), bound.h2),
               min(max(box.w2, bound.w1), bound.w2), min(max(box.h2, bound.h1), bound.h2))


def make_person(bbox: Box, width: int, height: int) -> PersonAnnotation:
    """Person annotation with part boxes laid out inside (and clamped to) its box"""
    bbox = bbox.clamp(width, height)
    parts = {part.key: [_clip_to(_scaled(bbox, frac), bbox) for frac in PART_LAYOUT[part]]
             for part in BodyPart}
    return PersonAnnotation(bbox=bbox, parts=parts)


def overlap_fraction(part: Box, obj: Box) -> float:
    """Share of the object's area covered by the part box"""
    area = obj.area
    return part.intersection(obj) / area if area > 0 else 0.0


def derive_interactions(persons: Sequence[PersonAnnotation], objects: Sequence[ObjectAnnotation],
                        threshold: float = 0.3, num_verbs: int = len(VERB_NAMES)) -> List[Interaction]:
    """
    Interaction records for every (person, object) pair from the overlap rule

    Verb v fires when some box of part VERB_PARTS[v] covers at least
    `threshold` of the object; part label k is set when a verb fired through
    part k.
    """
    interactions = []
    for i, person in enumerate(persons):
        for j, obj in enumerate(objects):
            verbs = [0] * num_verbs
            part_labels = [False] * NUM_PARTS
            for v in range(num_verbs):
                part = VERB_PARTS[v]
                if any(overlap_fraction(b, obj.bbox) >= threshold for b in person.part_boxes(part)):
                    verbs[v] = 1
                    part_labels[part] = True
            interactions.append(Interaction(i, j, verbs, any(verbs), part_labels))
    return interactions


# ============================================================================
# Rendering
# ============================================================================

def _fill_box(image: np.ndarray, box: Box, color, coverage: Optional[np.ndarray] = None, owner: int = -1):
    h0, w0 = image.shape[:2]
    r1, r2 = int(math.floor(box.h1)), int(math.ceil(box.h2))
    c1, c2 = int(math.floor(box.w1)), int(math.ceil(box.w2))
    r1, r2 = max(r1, 0), min(r2, h0)
    c1, c2 = max(c1, 0), min(c2, w0)
    if r2 <= r1 or c2 <= c1:
        return
    image[r1:r2, c1:c2] = color
    if coverage is not None:
        coverage[r1:r2, c1:c2] = owner


def _object_shape(obj: ObjectAnnotation, h0: int, w0: int) -> np.ndarray:
    """Boolean pixel mask of an object's shape: ball = disc, cup = square, chair = triangle"""
    rows = np.arange(h0)[:, None] + 0.5
    cols = np.arange(w0)[None, :] + 0.5
    b = obj.bbox
    inside = (rows >= b.h1) & (rows < b.h2) & (cols >= b.w1) & (cols < b.w2)
    if obj.category == 1:
        cy, cx = (b.h1 + b.h2) / 2, (b.w1 + b.w2) / 2
        ry, rx = max(b.height / 2, 1e-6), max(b.width / 2, 1e-6)
        return inside & (((rows - cy) / ry) ** 2 + ((cols - cx) / rx) ** 2 <= 1.0)
    if obj.category == 3:
        # apex at the top centre
        t = (rows - b.h1) / max(b.height, 1e-6)
        half = t * b.width / 2
        cx = (b.w1 + b.w2) / 2
        return inside & (np.abs(cols - cx) <= half)
    return inside


def _draw_person(image: np.ndarray, person: PersonAnnotation, coverage: np.ndarray, owner: int):
    _fill_box(image, _scaled(person.bbox, TORSO_LAYOUT), TORSO_COLOR, coverage, owner)
    for part in BodyPart:
        for box in person.part_boxes(part):
            _fill_box(image, box, PART_COLORS[part], coverage, owner)


def render_scene(scene: SceneAnnotation) -> np.ndarray:
    """RGB uint8 image (H0, W0, 3); persons in list order, then objects"""
    image = np.empty((scene.height, scene.width, 3), dtype=np.uint8)
    image[:] = BACKGROUND
    coverage = np.full((scene.height, scene.width), -1, dtype=np.int32)
    for i, person in enumerate(scene.persons):
        _draw_person(image, person, coverage, i)
    for obj in scene.objects:
        image[_object_shape(obj, scene.height, scene.width)] = OBJECT_COLORS.get(obj.category, (200, 200, 200))
    return image


def joint_confidences(persons: Sequence[PersonAnnotation], objects: Sequence[ObjectAnnotation],
                      height: int, width: int) -> List[float]:
    """1 - fraction of each person's drawn pixels hidden by later persons or objects"""
    coverage = np.full((height, width), -1, dtype=np.int32)
    scratch = np.zeros((height, width, 3), dtype=np.uint8)
    own_area = []
    for i, person in enumerate(persons):
        before = coverage.copy()
        _draw_person(scratch, person, coverage, i)
        own_area.append(int(((coverage == i) & (before != i)).sum()))
    hidden = np.zeros(height * width, dtype=bool)
    for obj in objects:
        hidden |= _object_shape(obj, height, width).ravel()
    confidences = []
    flat = coverage.ravel()
    for i in range(len(persons)):
        if own_area[i] == 0:
            confidences.append(0.0)
            continue
        visible = int(((flat == i) & ~hidden).sum())
        confidences.append(round(visible / own_area[i], 6))
    return confidences


# ============================================================================
# Generation
# ============================================================================

def _place_person(rng: np.random.Generator, profile: SynthProfile, previous: List[PersonAnnotation]) -> PersonAnnotation:
    h = rng.uniform(profile.min_person_height, min(profile.max_person_height, profile.height))
    w = min(h * PERSON_ASPECT, profile.width)
    if previous and rng.random() < profile.occlusion_rate:
        anchor = previous[int(rng.integers(len(previous)))].bbox
        x = anchor.w1 + rng.uniform(-0.5, 0.5) * w
        y = anchor.h1 + rng.uniform(-0.2, 0.2) * h
    else:
        x = rng.uniform(0, profile.width - w)
        y = rng.uniform(0, profile.height - h)
    x = float(np.clip(x, 0, profile.width - w))
    y = float(np.clip(y, 0, profile.height - h))
    return make_person(Box(x, y, x + w, y + h), profile.width, profile.height)


def _place_interacting_object(rng: np.random.Generator, profile: SynthProfile,
                              person: PersonAnnotation) -> ObjectAnnotation:
    """Object centred on one of the person's verb parts"""
    verb = int(rng.integers(profile.num_verbs))
    boxes = person.part_boxes(VERB_PARTS[verb])
    part = boxes[int(rng.integers(len(boxes)))]
    size = max(part.width, part.height) * rng.uniform(1.0, 1.3)
    cx = (part.w1 + part.w2) / 2 + rng.uniform(-0.05, 0.05) * part.width
    cy = (part.h1 + part.h2) / 2 + rng.uniform(-0.05, 0.05) * part.height
    box = Box(cx - size / 2, cy - size / 2, cx + size / 2, cy + size / 2).clamp(profile.width, profile.height)
    return ObjectAnnotation(box, int(rng.integers(1, profile.num_objects + 1)))


def _place_distractor(rng: np.random.Generator, profile: SynthProfile) -> ObjectAnnotation:
    size = rng.uniform(12.0, 40.0)
    x = rng.uniform(0, max(profile.width - size, 0))
    y = rng.uniform(0, max(profile.height - size, 0))
    box = Box(x, y, x + size, y + size).clamp(profile.width, profile.height)
    return ObjectAnnotation(box, int(rng.integers(1, profile.num_objects + 1)))


def _attempt(rng: np.random.Generator, profile: SynthProfile, crowded: bool, scene_id: int) -> SceneAnnotation:
    if crowded:
        n_persons = int(rng.integers(max(profile.min_persons, 1), profile.max_persons + 1))
        n_pairs = int(rng.integers(CROWDED_PAIRS, profile.max_objects + 1))
    else:
        n_persons = int(rng.integers(profile.min_persons, profile.max_persons + 1))
        lo, hi = profile.sparse_pairs
        n_pairs = int(rng.integers(lo, min(hi, CROWDED_PAIRS - 1) + 1)) if n_persons else 0
    n_pairs = min(n_pairs, profile.max_objects)

    persons: List[PersonAnnotation] = []
    for _ in range(n_persons):
        persons.append(_place_person(rng, profile, persons))

    objects = [_place_interacting_object(rng, profile, persons[int(rng.integers(n_persons))])
               for _ in range(n_pairs)]
    n_distractors = int(rng.integers(0, profile.max_objects - len(objects) + 1))
    objects += [_place_distractor(rng, profile) for _ in range(n_distractors)]

    confidences = joint_confidences(persons, objects, profile.height, profile.width)
    for person, j in zip(persons, confidences):
        person.joint_confidence = j
    interactions = derive_interactions(persons, objects, profile.overlap_threshold, profile.num_verbs)
    return SceneAnnotation(scene_id, profile.width, profile.height, persons, objects, interactions)


def generate_scene(seed: int, profile: Optional[SynthProfile] = None,
                   scene_id: int = 0, render: bool = True) -> Tuple[SceneAnnotation, Optional[np.ndarray]]:
    """
    One scene from a seed

    The crowded/sparse target is drawn first; attempts are regenerated from
    derived seeds until the labelled scene matches it and stays within
    `max_pairs` interactive pairs (the last attempt is kept if none does).
    """
    profile = profile or SynthProfile()
    profile.validate()
    rng = np.random.default_rng(seed)
    crowded = bool(rng.random() < profile.crowded_rate)

    scene = None
    for attempt in range(profile.max_attempts):
        scene = _attempt(np.random.default_rng([seed, attempt]), profile, crowded, scene_id)
        pairs = len(scene.interactive_pairs())
        if (pairs >= CROWDED_PAIRS) == crowded and pairs <= profile.max_pairs:
            break
    else:
        logger.debug(f"[SYNTH] scene {scene_id}: no attempt matched crowded={crowded}")

    return scene, (render_scene(scene) if render else None)


def _generate_indexed(index: int, root_seed: int, profile: SynthProfile) -> SceneAnnotation:
    scene, _ = generate_scene(derive_seed(root_seed, "scene", index), profile, scene_id=index, render=False)
    return scene


def generate_dataset(count: int, root_seed: int, profile: Optional[SynthProfile] = None,
                     workers: int = 1, offset: int = 0) -> List[SceneAnnotation]:
    """
    `count` scenes with ids offset..offset+count-1

    Scene i is seeded from (root_seed, i) only, so any worker count yields
    the same list.
    """
    profile = profile or SynthProfile()
    profile.validate()
    indices = range(offset, offset + count)
    work = partial(_generate_indexed, root_seed=root_seed, profile=profile)
    if workers > 1 and count > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            scenes = list(pool.map(work, indices, chunksize=max(1, count // (4 * workers))))
    else:
        scenes = [work(i) for i in indices]
    crowded = sum(len(s.interactive_pairs()) >= CROWDED_PAIRS for s in scenes)
    logger.info(f"[SYNTH] {count} scenes (root seed {root_seed}), {crowded} crowded")
    return scenes


# ============================================================================
# Hard-case tags
# ============================================================================

def tag_hard_cases(scene: SceneAnnotation) -> SceneTags:
    pairs = scene.interactive_pairs()
    image_area = float(scene.width * scene.height)
    ratios = [scene.persons[it.person].bbox.area / image_area for it in pairs]
    j = float(np.mean([p.joint_confidence for p in scene.persons])) if scene.persons else None
    if j is None:
        occluded = "n/a"                  # no persons, in neither occlusion split
    elif j < HIGH_OCCLUSION:
        occluded = "high"
    elif j > LOW_OCCLUSION:
        occluded = "low"
    else:
        occluded = "mid"
    return SceneTags(
        crowded=len(pairs) >= CROWDED_PAIRS,
        tiny=any(r < TINY_RATIO for r in ratios),
        occluded=occluded,
        person_count=len(scene.persons),
        interactive_pair_count=len(pairs),
        min_area_ratio=min(ratios) if ratios else None,
        mean_joint_confidence=j,
    )


# ============================================================================
# Serialization
# ============================================================================

def dumps_annotations(scenes: Sequence[SceneAnnotation]) -> str:
    """Canonical JSON: sorted keys, compact separators, trailing newline"""
    doc = {'schema': SCHEMA_VERSION, 'images': [s.to_dict() for s in scenes]}
    return json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n"


def save_annotations(scenes: Sequence[SceneAnnotation], path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps_annotations(scenes), encoding="utf-8")
    logger.info(f"[SYNTH] wrote {len(scenes)} scenes to {path}")
    return path


def load_annotations(path: Union[str, Path]) -> List[SceneAnnotation]:
    """
    Read and validate an annotation file

    Raises:
        SchemaError: malformed JSON, version mismatch, unknown fields or
            out-of-bounds boxes; the message names the path into the document
    """
    text = Path(path).read_text(encoding="utf-8")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise SchemaError(f"malformed JSON ({e.msg} at line {e.lineno})") from e
    return parse_annotations(doc)


def _check_keys(obj: Any, path: str, required: Sequence[str], optional: Sequence[str] = ()):
    if not isinstance(obj, dict):
        raise SchemaError(f"expected an object, got {type(obj).__name__}", path)
    unknown = sorted(set(obj) - set(required) - set(optional))
    if unknown:
        raise SchemaError(f"unknown field(s) {unknown}", path)
    missing = [k for k in required if k not in obj]
    if missing:
        raise SchemaError(f"missing field(s) {missing}", path)


def _check_list(obj: Any, path: str) -> list:
    if not isinstance(obj, list):
        raise SchemaError(f"expected a list, got {type(obj).__name__}", path)
    return obj


def _check_int(obj: Any, path: str, minimum: Optional[int] = None) -> int:
    if isinstance(obj, bool) or not isinstance(obj, int):
        raise SchemaError(f"expected an integer, got {obj!r}", path)
    if minimum is not None and obj < minimum:
        raise SchemaError(f"must be >= {minimum}, got {obj}", path)
    return obj


def _parse_box(obj: Any, path: str, width: float, height: float) -> Box:
    values = _check_list(obj, path)
    if len(values) != 4:
        raise SchemaError(f"a box has 4 coordinates, got {len(values)}", path)
    for n, v in enumerate(values):
        if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
            raise SchemaError(f"expected a finite number, got {v!r}", f"{path}[{n}]")
        if v < 0:
            raise SchemaError(f"negative coordinate {v}", f"{path}[{n}]")
    bounds = (width, height, width, height)
    for n, (v, limit) in enumerate(zip(values, bounds)):
        if v > limit:
            raise SchemaError(f"coordinate {v} exceeds image bound {limit}", f"{path}[{n}]")
    if values[2] < values[0] or values[3] < values[1]:
        raise SchemaError(f"corners out of order {values}", path)
    return Box.from_sequence([float(v) for v in values])


def _parse_image(obj: Any, path: str) -> SceneAnnotation:
    _check_keys(obj, path, ('id', 'width', 'height', 'persons', 'objects', 'interactions'))
    width = _check_int(obj['width'], f"{path}.width", 1)
    height = _check_int(obj['height'], f"{path}.height", 1)

    persons = []
    for i, p in enumerate(_check_list(obj['persons'], f"{path}.persons")):
        ppath = f"{path}.persons[{i}]"
        _check_keys(p, ppath, ('bbox', 'parts', 'joint_confidence'))
        bbox = _parse_box(p['bbox'], f"{ppath}.bbox", width, height)
        _check_keys(p['parts'], f"{ppath}.parts", (), PART_NAMES)
        parts = {}
        for name in PART_NAMES:
            boxes = []
            for n, b in enumerate(_check_list(p['parts'].get(name, []), f"{ppath}.parts.{name}")):
                bpath = f"{ppath}.parts.{name}[{n}]"
                box = _parse_box(b, bpath, width, height)
                if not bbox.contains(box):
                    raise SchemaError("part box lies outside its person box", bpath)
                boxes.append(box)
            parts[name] = boxes
        j = p['joint_confidence']
        if isinstance(j, bool) or not isinstance(j, (int, float)) or not 0.0 <= j <= 1.0:
            raise SchemaError(f"joint confidence must be in [0, 1], got {j!r}", f"{ppath}.joint_confidence")
        persons.append(PersonAnnotation(bbox, parts, float(j)))

    objects = []
    for n, o in enumerate(_check_list(obj['objects'], f"{path}.objects")):
        opath = f"{path}.objects[{n}]"
        _check_keys(o, opath, ('bbox', 'category'))
        objects.append(ObjectAnnotation(_parse_box(o['bbox'], f"{opath}.bbox", width, height),
                                        _check_int(o['category'], f"{opath}.category", 1)))

    interactions = []
    for n, it in enumerate(_check_list(obj['interactions'], f"{path}.interactions")):
        ipath = f"{path}.interactions[{n}]"
        _check_keys(it, ipath, ('person', 'object', 'verbs', 'interactive'), ('part_labels',))
        person = _check_int(it['person'], f"{ipath}.person", 0)
        if person >= len(persons):
            raise SchemaError(f"person index {person} out of range", f"{ipath}.person")
        obj_index = _check_int(it['object'], f"{ipath}.object", 0)
        if obj_index >= len(objects):
            raise SchemaError(f"object index {obj_index} out of range", f"{ipath}.object")
        verbs = [_check_int(v, f"{ipath}.verbs[{m}]", 0) for m, v in enumerate(_check_list(it['verbs'], f"{ipath}.verbs"))]
        if any(v > 1 for v in verbs):
            raise SchemaError("verbs must be a 0/1 vector", f"{ipath}.verbs")
        if not isinstance(it['interactive'], bool):
            raise SchemaError("expected a boolean", f"{ipath}.interactive")
        if it['interactive'] != any(verbs):
            raise SchemaError("interactive flag must equal the OR of the verbs", f"{ipath}.interactive")
        part_labels = None
        if 'part_labels' in it:
            part_labels = _check_list(it['part_labels'], f"{ipath}.part_labels")
            if len(part_labels) != NUM_PARTS or not all(isinstance(x, bool) for x in part_labels):
                raise SchemaError(f"expected {NUM_PARTS} booleans", f"{ipath}.part_labels")
        interactions.append(Interaction(person, obj_index, verbs, it['interactive'], part_labels))

    scene_id = _check_int(obj['id'], f"{path}.id", 0)
    return SceneAnnotation(scene_id, width, height, persons, objects, interactions)


def parse_annotations(doc: Any) -> List[SceneAnnotation]:
    _check_keys(doc, "$", ('schema', 'images'))
    version = doc['schema']
    if version != SCHEMA_VERSION:
        raise SchemaError(f"schema version mismatch: file has {version!r}, expected {SCHEMA_VERSION}",
                          "$.schema")
    return [_parse_image(img, f"images[{n}]") for n, img in enumerate(_check_list(doc['images'], "images"))]
