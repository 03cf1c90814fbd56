#!/usr/bin/env python3
"""
Token-grid mask geometry

Turns body-part, human and object boxes into binary masks over the H x W
token grid of the feature extractor, builds the three-layer progressive
schedule per (proposal, part) and merges the schedules of selected parts.

Conventions:
    - Boxes are [w1, h1, w2, h2] in pixels of the H0 x W0 image.
    - Token (x, y): x indexes rows (height), y indexes columns (width).
    - Token (x, y) is covered by a box iff h1 <= x * H0/H <= h2 and
      w1 <= y * W0/W <= w2, both bounds inclusive.
    - Masks are uint8 arrays, 1 = token takes part in attention. Leading
      (proposal, layer, part) dimensions are allowed everywhere.
"""

import base64
from dataclasses import dataclass
from enum import Enum, IntEnum
from typing import Dict, Iterable, List, Optional, Sequence, TYPE_CHECKING, Union

import numpy as np

if TYPE_CHECKING:
    from scene_synth import SceneAnnotation

NUM_LAYERS = 3


class BodyPart(IntEnum):
    """The six body parts in their fixed order (k = index + 1)"""
    FEET = 0
    LEGS = 1
    HIP = 2
    HANDS = 3
    ARMS = 4
    HEAD = 5

    @property
    def key(self) -> str:
        return self.name.lower()

    @classmethod
    def from_key(cls, key: str) -> 'BodyPart':
        return cls[key.upper()]


NUM_PARTS = len(BodyPart)
PART_NAMES = tuple(part.key for part in BodyPart)


class MaskPolicyError(ValueError):
    """Raised when merging is asked for a proposal with no selected part"""
    pass


class MaskVariant(Enum):
    """Per-layer schedule; the non-default variants are ablations"""
    PROGRESSIVE = "progressive"
    FLAT = "flat"            # m2 for every layer
    ALL_ONES = "all_ones"    # no body-part saliency at all


@dataclass(frozen=True)
class Box:
    """Axis-aligned box [w1, h1, w2, h2] in pixel coordinates"""
    w1: float
    h1: float
    w2: float
    h2: float

    @classmethod
    def from_sequence(cls, values: Sequence[float]) -> 'Box':
        if len(values) != 4:
            raise ValueError(f"Box needs 4 coordinates, got {len(values)}")
        return cls(*(float(v) for v in values))

    def to_list(self) -> List[float]:
        return [self.w1, self.h1, self.w2, self.h2]

    def clamp(self, width: float, height: float) -> 'Box':
        return Box(
            min(max(self.w1, 0.0), width),
            min(max(self.h1, 0.0), height),
            min(max(self.w2, 0.0), width),
            min(max(self.h2, 0.0), height),
        )

    @property
    def width(self) -> float:
        return max(self.w2 - self.w1, 0.0)

    @property
    def height(self) -> float:
        return max(self.h2 - self.h1, 0.0)

    @property
    def area(self) -> float:
        return self.width * self.height

    def intersection(self, other: 'Box') -> float:
        iw = min(self.w2, other.w2) - max(self.w1, other.w1)
        ih = min(self.h2, other.h2) - max(self.h1, other.h1)
        return max(iw, 0.0) * max(ih, 0.0)

    def contains(self, other: 'Box') -> bool:
        return (self.w1 <= other.w1 and self.h1 <= other.h1
                and other.w2 <= self.w2 and other.h2 <= self.h2)


@dataclass(frozen=True)
class GridSpec:
    """Image size H0 x W0 and token-grid size H x W"""
    H0: int
    W0: int
    H: int
    W: int

    def __post_init__(self):
        if min(self.H0, self.W0, self.H, self.W) <= 0:
            raise ValueError(f"GridSpec sizes must be positive, got {self}")

    @classmethod
    def from_stride(cls, height: int, width: int, stride: int = 32) -> 'GridSpec':
        return cls(H0=height, W0=width, H=height // stride, W=width // stride)

    @property
    def scale_h(self) -> float:
        return self.H0 / self.H

    @property
    def scale_w(self) -> float:
        return self.W0 / self.W

    @property
    def shape(self) -> tuple:
        return (self.H, self.W)

    @property
    def num_tokens(self) -> int:
        return self.H * self.W


BoxLike = Union[Box, Sequence[float], np.ndarray]


def _as_box_array(boxes) -> np.ndarray:
    if isinstance(boxes, Box):
        return np.asarray(boxes.to_list(), dtype=np.float64)
    if isinstance(boxes, (list, tuple)) and boxes and isinstance(boxes[0], Box):
        return np.asarray([b.to_list() for b in boxes], dtype=np.float64).reshape(-1, 4)
    return np.asarray(boxes, dtype=np.float64)


def rasterize_boxes_array(boxes: np.ndarray, spec: GridSpec) -> np.ndarray:
    """
    Vectorized rasterization of (..., 4) pixel boxes into (..., H, W) masks

    Boxes are clamped to the image first; a box that is empty after clamping
    yields an all-zero mask.
    """
    boxes = np.asarray(boxes, dtype=np.float64)
    w1 = np.clip(boxes[..., 0], 0.0, spec.W0)[..., None]
    h1 = np.clip(boxes[..., 1], 0.0, spec.H0)[..., None]
    w2 = np.clip(boxes[..., 2], 0.0, spec.W0)[..., None]
    h2 = np.clip(boxes[..., 3], 0.0, spec.H0)[..., None]

    rows = np.arange(spec.H) * spec.scale_h
    cols = np.arange(spec.W) * spec.scale_w
    row_hit = (rows >= h1) & (rows <= h2)
    col_hit = (cols >= w1) & (cols <= w2)
    return (row_hit[..., :, None] & col_hit[..., None, :]).astype(np.uint8)


def rasterize_box(box: BoxLike, spec: GridSpec) -> np.ndarray:
    """Binary H x W mask of the tokens covered by one pixel box"""
    return rasterize_boxes_array(_as_box_array(box).reshape(4), spec)


def rasterize_union(boxes: Iterable[BoxLike], spec: GridSpec) -> np.ndarray:
    """Pointwise OR of the rasterized boxes; all-zero for no boxes"""
    arr = _as_box_array(list(boxes)) if not isinstance(boxes, np.ndarray) else boxes
    arr = np.asarray(arr, dtype=np.float64).reshape(-1, 4)
    if arr.shape[0] == 0:
        return np.zeros(spec.shape, dtype=np.uint8)
    return rasterize_boxes_array(arr, spec).max(axis=0)


def build_part_masks(scene: 'SceneAnnotation', spec: GridSpec,
                     border_drop: bool = False, rng_seed: Optional[int] = None) -> np.ndarray:
    """
    Global body-part saliency maps, (6, H, W)

    Part k is the union over every person of that person's k-th part boxes,
    so the result is shared by all proposals of the image.
    """
    masks = np.zeros((NUM_PARTS,) + spec.shape, dtype=np.uint8)
    for part in BodyPart:
        boxes = [box for person in scene.persons for box in person.parts.get(part.key, [])]
        if not boxes:
            continue
        masks[part] = rasterize_union(boxes, spec)
        if border_drop:
            seed = None if rng_seed is None else int(rng_seed) * NUM_PARTS + int(part)
            masks[part] = border_random_drop(masks[part], boxes, spec, seed)
    return masks


def build_instance_masks(human_boxes: BoxLike, object_boxes: BoxLike, spec: GridSpec):
    """
    Human and object masks from normalized proposal boxes

    Args:
        human_boxes: (..., 4) normalized [w1, h1, w2, h2] in [0, 1]
        object_boxes: (..., 4) normalized boxes

    Returns:
        (m_hum, m_obj), each (..., H, W)
    """
    scale = np.asarray([spec.W0, spec.H0, spec.W0, spec.H0], dtype=np.float64)
    m_hum = rasterize_boxes_array(_as_box_array(human_boxes) * scale, spec)
    m_obj = rasterize_boxes_array(_as_box_array(object_boxes) * scale, spec)
    return m_hum, m_obj


def other_humans_mask(part_masks: np.ndarray, m_hum: np.ndarray) -> np.ndarray:
    """Whole bodies of the other persons: max(max_k m_part^k - m_hum, 0)"""
    body = part_masks.max(axis=-3).astype(np.int16)
    return np.maximum(body - m_hum.astype(np.int16), 0).astype(np.uint8)


def build_progressive_masks(part_masks: np.ndarray, m_hum: np.ndarray, m_obj: np.ndarray) -> np.ndarray:
    """
    Three-layer schedule per (proposal, part)

    Layer 1 sees other persons' bodies, all persons' part k and the object;
    layer 2 all persons' part k and the object; layer 3 the target person's
    part k and the object.

    Args:
        part_masks: (6, H, W)
        m_hum, m_obj: (..., H, W)

    Returns:
        (..., 3, 6, H, W)
    """
    if part_masks.shape[-2:] != m_hum.shape[-2:] or m_hum.shape != m_obj.shape:
        raise ValueError(f"Mask shapes differ: parts {part_masks.shape}, "
                         f"human {m_hum.shape}, object {m_obj.shape}")
    m_other = other_humans_mask(part_masks, m_hum)[..., None, :, :]
    hum = m_hum[..., None, :, :]
    obj = m_obj[..., None, :, :]

    m1 = np.maximum(np.maximum(m_other, part_masks), obj)
    m2 = np.maximum(part_masks, obj)
    m3 = np.maximum(np.minimum(part_masks, hum), obj)
    return np.stack([m1, m2, m3], axis=-4).astype(np.uint8)


def build_layer_schedule(part_masks: np.ndarray, m_hum: np.ndarray, m_obj: np.ndarray,
                         variant: MaskVariant = MaskVariant.PROGRESSIVE) -> np.ndarray:
    """Layered masks for the requested variant, (..., 3, 6, H, W)"""
    layered = build_progressive_masks(part_masks, m_hum, m_obj)
    if variant is MaskVariant.FLAT:
        flat = layered[..., 1:2, :, :, :]
        layered = np.repeat(flat, NUM_LAYERS, axis=-4)
    elif variant is MaskVariant.ALL_ONES:
        layered = np.ones_like(layered)
    return layered


def merge_masks(layered: np.ndarray, selection: np.ndarray) -> np.ndarray:
    """
    Union of the selected parts' masks per layer

    Args:
        layered: (..., 3, 6, H, W)
        selection: (..., 6) indicators n^{ik}

    Returns:
        (..., 3, H, W)

    Raises:
        MaskPolicyError: if some proposal has no selected part
    """
    selection = np.asarray(selection).astype(bool)
    empty = ~selection.any(axis=-1)
    if np.any(empty):
        rows = np.argwhere(empty).tolist() if empty.ndim else []
        raise MaskPolicyError(f"Cannot merge masks: empty part selection for proposal(s) {rows}")
    picked = layered.astype(bool) & selection[..., None, :, None, None]
    return picked.any(axis=-3).astype(np.uint8)


def token_box_overlap(boxes: Sequence[BoxLike], spec: GridSpec) -> np.ndarray:
    """
    Fraction of each token cell covered by the best box, (H, W) in [0, 1]

    Token (x, y) is the cell [x*sH, (x+1)*sH] x [y*sW, (y+1)*sW].
    """
    arr = np.asarray(_as_box_array(list(boxes)), dtype=np.float64).reshape(-1, 4)
    if arr.shape[0] == 0:
        return np.zeros(spec.shape, dtype=np.float64)
    w1 = np.clip(arr[:, 0], 0.0, spec.W0)[:, None]
    h1 = np.clip(arr[:, 1], 0.0, spec.H0)[:, None]
    w2 = np.clip(arr[:, 2], 0.0, spec.W0)[:, None]
    h2 = np.clip(arr[:, 3], 0.0, spec.H0)[:, None]

    top = np.arange(spec.H) * spec.scale_h
    left = np.arange(spec.W) * spec.scale_w
    cover_h = np.clip(np.minimum(top + spec.scale_h, h2) - np.maximum(top, h1), 0.0, None) / spec.scale_h
    cover_w = np.clip(np.minimum(left + spec.scale_w, w2) - np.maximum(left, w1), 0.0, None) / spec.scale_w
    overlap = cover_h[:, :, None] * cover_w[:, None, :]
    return np.clip(overlap.max(axis=0), 0.0, 1.0)


def border_random_drop(mask: np.ndarray, boxes: Sequence[BoxLike], spec: GridSpec,
                       rng_seed: Optional[int]) -> np.ndarray:
    """
    Randomly drop border tokens of a rasterized mask

    Tokens fully inside some box are kept; every other active token is kept
    with probability equal to its largest fractional overlap with any box.
    Applied after the inclusive rasterization rule.
    """
    overlap = token_box_overlap(boxes, spec)
    rng = np.random.default_rng(rng_seed)
    draw = rng.random(spec.shape)
    keep = (overlap >= 1.0) | (draw < overlap)
    return (mask.astype(bool) & keep).astype(np.uint8)


def encode_mask(mask: np.ndarray) -> Dict[str, object]:
    """Row-major bit array with a shape header"""
    arr = np.asarray(mask).astype(bool)
    return {
        'shape': list(arr.shape),
        'bits': base64.b64encode(np.packbits(arr.ravel()).tobytes()).decode('ascii'),
    }


def decode_mask(data: Dict[str, object]) -> np.ndarray:
    shape = tuple(int(s) for s in data['shape'])
    count = int(np.prod(shape)) if shape else 1
    packed = np.frombuffer(base64.b64decode(data['bits']), dtype=np.uint8)
    return np.unpackbits(packed, count=count).reshape(shape).astype(np.uint8)


@dataclass
class MaskStack:
    """All masks of one image's proposals"""
    part_masks: np.ndarray                  # (6, H, W)
    human: np.ndarray                       # (N, H, W)
    object: np.ndarray                      # (N, H, W)
    other_humans: np.ndarray                # (N, H, W)
    layered: np.ndarray                     # (N, 3, 6, H, W)
    merged: Optional[np.ndarray] = None     # (N, 3, H, W)
    variant: MaskVariant = MaskVariant.PROGRESSIVE

    @classmethod
    def build(cls, part_masks: np.ndarray, human_boxes: BoxLike, object_boxes: BoxLike,
              spec: GridSpec, variant: MaskVariant = MaskVariant.PROGRESSIVE) -> 'MaskStack':
        """Masks for normalized proposal boxes (N, 4) against the image's part maps"""
        m_hum, m_obj = build_instance_masks(human_boxes, object_boxes, spec)
        m_hum = m_hum.reshape((-1,) + spec.shape)
        m_obj = m_obj.reshape((-1,) + spec.shape)
        parts = np.ones_like(part_masks) if variant is MaskVariant.ALL_ONES else part_masks
        return cls(
            part_masks=parts.astype(np.uint8),
            human=m_hum,
            object=m_obj,
            other_humans=other_humans_mask(part_masks, m_hum),
            layered=build_layer_schedule(part_masks, m_hum, m_obj, variant),
            variant=variant,
        )

    @property
    def num_proposals(self) -> int:
        return int(self.human.shape[0])

    @property
    def grid_shape(self) -> tuple:
        return tuple(self.part_masks.shape[-2:])

    def with_selection(self, selection: np.ndarray) -> 'MaskStack':
        """Copy carrying the merged masks for the given selection"""
        return MaskStack(self.part_masks, self.human, self.object, self.other_humans,
                         self.layered, merge_masks(self.layered, selection), self.variant)

    def to_dict(self) -> Dict[str, object]:
        data = {
            'variant': self.variant.value,
            'part_masks': encode_mask(self.part_masks),
            'human': encode_mask(self.human),
            'object': encode_mask(self.object),
            'other_humans': encode_mask(self.other_humans),
            'layered': encode_mask(self.layered),
        }
        if self.merged is not None:
            data['merged'] = encode_mask(self.merged)
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, object]) -> 'MaskStack':
        return cls(
            part_masks=decode_mask(data['part_masks']),
            human=decode_mask(data['human']),
            object=decode_mask(data['object']),
            other_humans=decode_mask(data['other_humans']),
            layered=decode_mask(data['layered']),
            merged=decode_mask(data['merged']) if 'merged' in data else None,
            variant=MaskVariant(data.get('variant', MaskVariant.PROGRESSIVE.value)),
        )
