#!/usr/bin/env python3
"""
End-to-end HOI detector

Feature extractor (strided conv stem + shallow transformer encoder), box
decoder with human/object/class heads, verb decoder and the
interactiveness head; set-prediction losses over a bipartite matching;
sparsity-adaptive sampling; the two-stage trainer, checkpoints and
inference.

Stage 1 trains the extractor, box decoder and interactiveness head on
L_det + L_int; stage 2 starts from the stage-1 checkpoint and trains the
extractor, box decoder and verb decoder on L_det + L_verb.
"""

import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from scipy.optimize import linear_sum_assignment
from torch import nn, Tensor
from torch.utils.data import DataLoader, Dataset, WeightedRandomSampler

from attention_core import (
    AttentionRecorder,
    AttentionStats,
    DecoderConfig,
    EncoderLayer,
    FeatureGrid,
    HeadKind,
    PredictionHead,
    ShapeError,
    TransformerDecoder,
    ffn_head,
    reset_parameters,
    sinusoidal_positional_encoding,
)
from box_ops import (
    box_cxcywh_to_xyxy,
    elementwise_generalized_box_iou,
    generalized_box_iou,
)
from config import Config
from interactiveness_head import InteractivenessHead, InteractivenessOutput
from mask_geometry import GridSpec, MaskStack, MaskVariant, NUM_PARTS, build_part_masks
from scene_synth import SceneAnnotation, render_scene, tag_hard_cases
from utils import derive_seed, get_logger, is_interactive, run_log, seed_everything

logger = get_logger("train")

CHECKPOINT_FORMAT = "partint.checkpoint"
CHECKPOINT_VERSION = 1


class MatchingError(ValueError):
    """More ground-truth pairs than proposals"""
    pass


class TrainingDivergedError(RuntimeError):
    """Loss became NaN or infinite"""

    def __init__(self, stage: int, epoch: int, batch_id: int, losses: Dict[str, float]):
        self.stage = stage
        self.epoch = epoch
        self.batch_id = batch_id
        self.losses = losses
        super().__init__(f"Training diverged at stage {stage}, epoch {epoch}, batch {batch_id}: {losses}")


class CheckpointError(ValueError):
    """Unreadable checkpoint, or a missing stage-1 checkpoint for stage 2"""
    pass


def mask_variant(mask_cfg) -> MaskVariant:
    if not mask_cfg.bodypart:
        return MaskVariant.ALL_ONES
    if not mask_cfg.progressive:
        return MaskVariant.FLAT
    return MaskVariant.PROGRESSIVE


def grid_spec(model_cfg) -> GridSpec:
    return GridSpec.from_stride(model_cfg.image_size, model_cfg.image_size, model_cfg.stride)


# ============================================================================
# Model
# ============================================================================

class FeatureExtractor(nn.Module):
    """Strided conv stem (one stride-2 conv per factor of 2) plus transformer encoder layers"""

    def __init__(self, model_cfg):
        super().__init__()
        self.dc = model_cfg.dc
        self.stride = model_cfg.stride
        steps = int(round(math.log2(model_cfg.stride)))
        layers: List[nn.Module] = []
        in_ch = 3
        for _ in range(steps):
            layers += [nn.Conv2d(in_ch, model_cfg.stem_channels, 3, stride=2, padding=1, padding_mode='replicate'),
                       nn.ReLU()]
            in_ch = model_cfg.stem_channels
        self.stem = nn.Sequential(*layers)
        self.proj = nn.Conv2d(in_ch, model_cfg.dc, 1)
        cfg = DecoderConfig.from_model(model_cfg, model_cfg.encoder_layers)
        self.layers = nn.ModuleList(EncoderLayer(cfg) for _ in range(cfg.depth))
        self._pos_cache: Dict[Tuple[int, int], Tensor] = {}

    def positional_encoding(self, height: int, width: int, like: Tensor) -> Tensor:
        key = (height, width)
        if key not in self._pos_cache:
            self._pos_cache[key] = sinusoidal_positional_encoding(key, self.dc)
        return self._pos_cache[key].to(device=like.device, dtype=like.dtype)

    def stem_features(self, images: Tensor) -> Tensor:
        """Pre-positional features (B, D_c, H, W)"""
        if images.dim() != 4 or images.shape[1] != 3:
            raise ShapeError(f"Images must be (B, 3, H0, W0), got {tuple(images.shape)}")
        h0, w0 = images.shape[-2:]
        if h0 % self.stride or w0 % self.stride:
            raise ShapeError(f"Image size {h0}x{w0} is not a multiple of the stride {self.stride}")
        return self.proj(self.stem(images))

    def forward(self, inputs: Union[Tensor, FeatureGrid]) -> FeatureGrid:
        """encoder_forward: images or injected features -> FeatureGrid"""
        if isinstance(inputs, FeatureGrid):
            return inputs
        if inputs.dim() == 4 and inputs.shape[1] == self.dc:
            return FeatureGrid(inputs, self.positional_encoding(*inputs.shape[-2:], inputs))

        z = self.stem_features(inputs)
        b, d, h, w = z.shape
        pos = self.positional_encoding(h, w, z)
        src = z.flatten(2).transpose(1, 2)
        pos_tokens = pos.flatten(1).transpose(0, 1).unsqueeze(0)
        for layer in self.layers:
            src = layer(src, pos_tokens)
        return FeatureGrid(src.transpose(1, 2).reshape(b, d, h, w), pos)


@dataclass
class Proposal:
    """One H-O candidate; boxes are normalized [w1, h1, w2, h2]"""
    human_box: List[float]
    object_box: List[float]
    class_scores: List[float]               # N_obj + 1, last = no-object
    verb_scores: Optional[List[float]] = None
    int_score: Optional[float] = None
    part_scores: Optional[List[float]] = None

    @property
    def category(self) -> int:
        """1-based object category, no-object excluded"""
        return int(np.argmax(self.class_scores[:-1])) + 1

    @property
    def category_score(self) -> float:
        return float(self.class_scores[self.category - 1])

    def to_dict(self) -> Dict[str, Any]:
        return {
            'bh': self.human_box,
            'bo': self.object_box,
            'category': self.category,
            'category_score': self.category_score,
            'verb_scores': self.verb_scores,
            'int_score': self.int_score,
            'part_scores': self.part_scores,
        }


@dataclass
class ModelOutput:
    human_boxes: Tensor                 # (B, N, 4) cxcywh in [0, 1]
    object_boxes: Tensor                # (B, N, 4)
    class_logits: Tensor                # (B, N, N_obj + 1)
    decoded: Tensor                     # (B, N, D_c)
    grid: FeatureGrid
    verb_logits: Optional[Tensor] = None
    interactiveness: Optional[InteractivenessOutput] = None
    mask_stacks: List[MaskStack] = field(default_factory=list)

    def proposals(self, b: int) -> List[Proposal]:
        hum = box_cxcywh_to_xyxy(self.human_boxes[b]).clamp(0.0, 1.0).detach().cpu().tolist()
        obj = box_cxcywh_to_xyxy(self.object_boxes[b]).clamp(0.0, 1.0).detach().cpu().tolist()
        cls = F.softmax(self.class_logits[b], dim=-1).detach().cpu().tolist()
        verbs = torch.sigmoid(self.verb_logits[b]).detach().cpu().tolist() if self.verb_logits is not None else None
        ints = parts = None
        if self.interactiveness is not None:
            ints = self.interactiveness.p_int[b].detach().cpu().tolist()
            source = self.interactiveness.part_scores
            if source is None:
                source = self.interactiveness.part_int
            parts = source[b].detach().cpu().tolist() if source is not None else None
        return [Proposal(hum[i], obj[i], cls[i],
                         verbs[i] if verbs is not None else None,
                         ints[i] if ints is not None else None,
                         parts[i] if parts is not None else None)
                for i in range(len(hum))]


class HOIDetector(nn.Module):
    """Extractor, box decoder f_dec1 with heads, verb decoder f_dec3 and the interactiveness head"""

    def __init__(self, config: Config):
        super().__init__()
        m = config.model
        self.model_cfg = m
        self.spec = grid_spec(m)
        self.variant = mask_variant(config.masks)

        self.extractor = FeatureExtractor(m)
        self.query_embed = nn.Parameter(torch.empty(m.nq, m.dc))
        self.box_decoder = TransformerDecoder(DecoderConfig.from_model(m, m.box_decoder_layers))
        self.heads = nn.ModuleDict({
            HeadKind.HUMAN_BOX.value: PredictionHead(HeadKind.HUMAN_BOX, m.dc, 4, num_layers=3),
            HeadKind.OBJECT_BOX.value: PredictionHead(HeadKind.OBJECT_BOX, m.dc, 4, num_layers=3),
            HeadKind.OBJECT_CLASS.value: PredictionHead(HeadKind.OBJECT_CLASS, m.dc, m.num_objects + 1, num_layers=1),
        })
        self.verb_decoder = TransformerDecoder(DecoderConfig.from_model(m, m.verb_decoder_layers))
        self.verb_head = PredictionHead(HeadKind.VERB, m.dc, m.num_verbs)
        self.interactiveness = InteractivenessHead(m, config.masks)
        reset_parameters(self, m.init_seed)

    @property
    def head_table(self) -> Dict[HeadKind, PredictionHead]:
        table = {HeadKind(k): h for k, h in self.heads.items()}
        table[HeadKind.VERB] = self.verb_head
        return table

    def stage_modules(self, stage: int) -> List[nn.Module]:
        """Modules trained in a stage; the extractor and box decoder are fine-tuned in both"""
        shared = [self.extractor, self.box_decoder, self.heads]
        if stage == 1:
            return shared + [self.interactiveness]
        if stage == 2:
            return shared + [self.verb_decoder, self.verb_head]
        raise ValueError(f"Stage must be 1 or 2, got {stage}")

    def stage_parameters(self, stage: int) -> List[nn.Parameter]:
        params = [self.query_embed]
        for module in self.stage_modules(stage):
            params += list(module.parameters())
        return params

    def detector_forward(self, grid: FeatureGrid, recorder: Optional[AttentionRecorder] = None):
        """D = f_dec1(z, Q, pos) and the three box/class heads"""
        queries = self.query_embed.unsqueeze(0).expand(grid.batch_size, -1, -1)
        decoded = self.box_decoder(queries, grid, None, recorder=recorder, tag="box")
        hum = ffn_head(decoded, self.head_table, HeadKind.HUMAN_BOX)
        obj = ffn_head(decoded, self.head_table, HeadKind.OBJECT_BOX)
        cls_logits = self.heads[HeadKind.OBJECT_CLASS.value].logits(decoded)
        return decoded, hum, obj, cls_logits

    def verb_forward(self, grid: FeatureGrid, decoded: Tensor,
                     recorder: Optional[AttentionRecorder] = None) -> Tensor:
        """Verb logits (B, N, N_v); p_verb = sigmoid of these"""
        v = self.verb_decoder(decoded, grid, None, recorder=recorder, tag="verb")
        return self.verb_head.logits(v)

    def build_mask_stacks(self, human_boxes: Tensor, object_boxes: Tensor,
                          part_masks: Sequence[np.ndarray]) -> List[MaskStack]:
        hum = box_cxcywh_to_xyxy(human_boxes.detach()).clamp(0.0, 1.0).cpu().double().numpy()
        obj = box_cxcywh_to_xyxy(object_boxes.detach()).clamp(0.0, 1.0).cpu().double().numpy()
        return [MaskStack.build(part_masks[b], hum[b], obj[b], self.spec, self.variant)
                for b in range(hum.shape[0])]

    def forward(self, inputs: Union[Tensor, FeatureGrid], part_masks: Optional[Sequence[np.ndarray]] = None,
                stage: Optional[int] = None, recorder: Optional[AttentionRecorder] = None,
                mode: Optional[str] = None) -> ModelOutput:
        grid = self.extractor(inputs)
        if grid.spatial_shape != self.spec.shape:
            raise ShapeError(f"Feature grid {grid.spatial_shape} does not match the configured {self.spec.shape}")
        decoded, hum, obj, cls_logits = self.detector_forward(grid, recorder)
        out = ModelOutput(hum, obj, cls_logits, decoded, grid)

        if stage in (None, 1):
            if part_masks is None:
                part_masks = [np.zeros((NUM_PARTS,) + self.spec.shape, dtype=np.uint8)] * grid.batch_size
            out.mask_stacks = self.build_mask_stacks(hum, obj, part_masks)
            out.interactiveness = self.interactiveness(grid, decoded, out.mask_stacks, mode=mode,
                                                       stats=AttentionStats(), recorder=recorder)
        if stage in (None, 2):
            out.verb_logits = self.verb_forward(grid, decoded, recorder)
        return out


# ============================================================================
# Targets and matching
# ============================================================================

@dataclass
class Targets:
    """Interactive ground-truth pairs of one image, normalized cxcywh"""
    human_boxes: Tensor     # (G, 4)
    object_boxes: Tensor    # (G, 4)
    labels: Tensor          # (G,) 0-based object class
    verbs: Tensor           # (G, N_v)
    part_labels: Tensor     # (G, 6)

    @property
    def count(self) -> int:
        return int(self.labels.shape[0])


def build_targets(scene: SceneAnnotation, num_verbs: int, dtype: torch.dtype = torch.float32) -> Targets:
    pairs = scene.interactive_pairs()
    scale = np.asarray([scene.width, scene.height, scene.width, scene.height], dtype=np.float64)

    def cxcywh(box) -> List[float]:
        w1, h1, w2, h2 = (np.asarray(box.to_list()) / scale).tolist()
        return [(w1 + w2) / 2, (h1 + h2) / 2, w2 - w1, h2 - h1]

    hum = [cxcywh(scene.persons[p.person].bbox) for p in pairs]
    obj = [cxcywh(scene.objects[p.object].bbox) for p in pairs]
    labels = [scene.objects[p.object].category - 1 for p in pairs]
    verbs = [list(p.verbs[:num_verbs]) + [0] * (num_verbs - len(p.verbs[:num_verbs])) for p in pairs]
    parts = [[float(x) for x in (p.part_labels or [False] * NUM_PARTS)] for p in pairs]
    return Targets(
        human_boxes=torch.tensor(hum, dtype=dtype).reshape(-1, 4),
        object_boxes=torch.tensor(obj, dtype=dtype).reshape(-1, 4),
        labels=torch.tensor(labels, dtype=torch.long),
        verbs=torch.tensor(verbs, dtype=dtype).reshape(-1, num_verbs),
        part_labels=torch.tensor(parts, dtype=dtype).reshape(-1, NUM_PARTS),
    )


@dataclass
class Matching:
    """Injective ground-truth -> proposal assignment of one image"""
    pred_idx: Tensor    # (M,)
    gt_idx: Tensor      # (M,)
    cost: float = 0.0

    @property
    def size(self) -> int:
        return int(self.pred_idx.numel())


def matching_cost(pred_h: Tensor, pred_o: Tensor, class_prob: Tensor, targets: Targets, train_cfg) -> Tensor:
    """
    (N, G) cost: l1 * (L1_h + L1_o) + l2 * (2 - GIoU_h - GIoU_o) + l3 * (1 - c[gt])
    """
    l1 = torch.cdist(pred_h, targets.human_boxes.to(pred_h), p=1) + \
        torch.cdist(pred_o, targets.object_boxes.to(pred_o), p=1)
    giou = generalized_box_iou(box_cxcywh_to_xyxy(pred_h), box_cxcywh_to_xyxy(targets.human_boxes.to(pred_h))) + \
        generalized_box_iou(box_cxcywh_to_xyxy(pred_o), box_cxcywh_to_xyxy(targets.object_boxes.to(pred_o)))
    cls = 1.0 - class_prob[:, targets.labels]
    return train_cfg.lambda1 * l1 + train_cfg.lambda2 * (2.0 - giou) + train_cfg.lambda3 * cls


def assign(cost: Union[np.ndarray, Tensor]) -> Matching:
    """Minimum-cost injective assignment of the G columns to the N rows"""
    cost = cost.detach().cpu().numpy() if isinstance(cost, Tensor) else np.asarray(cost)
    n, g = cost.shape
    if g > n:
        raise MatchingError(f"{g} ground-truth pairs cannot be matched to {n} proposals; increase model.nq")
    if g == 0:
        empty = torch.zeros(0, dtype=torch.long)
        return Matching(empty, empty.clone(), 0.0)
    rows, cols = linear_sum_assignment(cost)
    order = np.argsort(cols, kind='stable')
    rows, cols = rows[order], cols[order]
    return Matching(torch.as_tensor(rows, dtype=torch.long), torch.as_tensor(cols, dtype=torch.long),
                    float(cost[rows, cols].sum()))


@torch.no_grad()
def bipartite_match(pred_h: Tensor, pred_o: Tensor, class_logits: Tensor, targets: Targets, train_cfg) -> Matching:
    """Match one image's proposals (N, 4) / (N, C+1) to its ground-truth pairs"""
    if targets.count > pred_h.shape[0]:
        raise MatchingError(f"{targets.count} ground-truth pairs cannot be matched to "
                            f"{pred_h.shape[0]} proposals; increase model.nq")
    if targets.count == 0:
        return assign(np.zeros((pred_h.shape[0], 0)))
    cost = matching_cost(pred_h, pred_o, class_logits.softmax(-1), targets, train_cfg)
    return assign(cost)


# ============================================================================
# Losses
# ============================================================================

@dataclass
class LossReport:
    loss_b: float
    loss_u: float
    loss_c: float
    loss_det: float
    loss_int: Optional[float] = None
    loss_verb: Optional[float] = None
    loss_part: Optional[float] = None
    total: float = 0.0

    def to_dict(self) -> Dict[str, float]:
        return {k: v for k, v in asdict(self).items() if v is not None}

    def is_finite(self) -> bool:
        return all(math.isfinite(v) for v in self.to_dict().values())


def _zero(like: Tensor) -> Tensor:
    return like.sum() * 0.0


def detection_loss(pred_h: Tensor, pred_o: Tensor, class_logits: Tensor, targets: Sequence[Targets],
                   matchings: Sequence[Matching], train_cfg) -> Tuple[Tensor, Tensor, Tensor]:
    """
    (L_b, L_u, L_c)

    L_b is the mean over matched boxes (human and object) of the L1 distance
    of (cx, cy, w, h); L_u the mean of 1 - GIoU; L_c the cross-entropy over
    every proposal, unmatched ones labelled no-object with weight
    `no_object_weight`.
    """
    num_classes = class_logits.shape[-1] - 1
    src_h = torch.cat([pred_h[b, m.pred_idx] for b, m in enumerate(matchings)])
    src_o = torch.cat([pred_o[b, m.pred_idx] for b, m in enumerate(matchings)])
    tgt_h = torch.cat([t.human_boxes[m.gt_idx] for t, m in zip(targets, matchings)]).to(pred_h)
    tgt_o = torch.cat([t.object_boxes[m.gt_idx] for t, m in zip(targets, matchings)]).to(pred_o)
    num_boxes = 2 * src_h.shape[0]

    if num_boxes:
        loss_b = (F.l1_loss(src_h, tgt_h, reduction='sum') + F.l1_loss(src_o, tgt_o, reduction='sum')) / num_boxes
        giou_h = elementwise_generalized_box_iou(box_cxcywh_to_xyxy(src_h), box_cxcywh_to_xyxy(tgt_h))
        giou_o = elementwise_generalized_box_iou(box_cxcywh_to_xyxy(src_o), box_cxcywh_to_xyxy(tgt_o))
        loss_u = ((1 - giou_h).sum() + (1 - giou_o).sum()) / num_boxes
    else:
        loss_b = _zero(pred_h) + _zero(pred_o)
        loss_u = _zero(pred_h) + _zero(pred_o)

    target_classes = torch.full(class_logits.shape[:2], num_classes, dtype=torch.long, device=class_logits.device)
    for b, (t, m) in enumerate(zip(targets, matchings)):
        target_classes[b, m.pred_idx] = t.labels[m.gt_idx].to(class_logits.device)
    weight = torch.ones(num_classes + 1, dtype=class_logits.dtype, device=class_logits.device)
    weight[-1] = train_cfg.no_object_weight
    loss_c = F.cross_entropy(class_logits.flatten(0, 1), target_classes.flatten(), weight=weight)
    return loss_b, loss_u, loss_c


def binary_loss(logits: Tensor, labels: Tensor, focal: bool = False, gamma: float = 2.0) -> Tensor:
    """Mean binary cross-entropy on logits, optionally focal-modulated"""
    if logits.numel() == 0:
        return _zero(logits)
    ce = F.binary_cross_entropy_with_logits(logits, labels, reduction='none')
    if focal:
        p = torch.sigmoid(logits)
        p_t = p * labels + (1 - p) * (1 - labels)
        ce = ce * (1 - p_t) ** gamma
    return ce.mean()


def interactiveness_loss(int_logits: Tensor, matchings: Sequence[Matching],
                         focal: bool = False, gamma: float = 2.0) -> Tensor:
    """BCE over all proposals; label 1 for proposals matched to an interactive pair"""
    labels = torch.zeros_like(int_logits)
    for b, m in enumerate(matchings):
        labels[b, m.pred_idx] = 1.0
    return binary_loss(int_logits, labels, focal, gamma)


def verb_loss(verb_logits: Tensor, targets: Sequence[Targets], matchings: Sequence[Matching],
              focal: bool = False, gamma: float = 2.0) -> Tensor:
    """BCE over the verb vectors of matched proposals"""
    src = torch.cat([verb_logits[b, m.pred_idx] for b, m in enumerate(matchings)])
    tgt = torch.cat([t.verbs[m.gt_idx] for t, m in zip(targets, matchings)]).to(verb_logits)
    if src.numel() == 0:
        return _zero(verb_logits)
    return binary_loss(src, tgt, focal, gamma)


def part_loss(part_logits: Tensor, targets: Sequence[Targets], matchings: Sequence[Matching]) -> Tensor:
    """BCE of the part importance scores of matched proposals against part-level labels"""
    src = torch.cat([part_logits[b, m.pred_idx] for b, m in enumerate(matchings)])
    tgt = torch.cat([t.part_labels[m.gt_idx] for t, m in zip(targets, matchings)]).to(part_logits)
    if src.numel() == 0:
        return _zero(part_logits)
    return binary_loss(src, tgt)


def compute_losses(out: ModelOutput, targets: Sequence[Targets], stage: int, train_cfg):
    """
    Stage loss (L_det + L_int [+ L_part] or L_det + L_verb) and its report

    Returns:
        (total, LossReport, matchings)
    """
    matchings = [bipartite_match(out.human_boxes[b], out.object_boxes[b], out.class_logits[b], t, train_cfg)
                 for b, t in enumerate(targets)]
    loss_b, loss_u, loss_c = detection_loss(out.human_boxes, out.object_boxes, out.class_logits,
                                            targets, matchings, train_cfg)
    loss_det = train_cfg.lambda1 * loss_b + train_cfg.lambda2 * loss_u + train_cfg.lambda3 * loss_c
    total = loss_det
    l_int = l_verb = l_part = None

    if stage == 1:
        l_int = interactiveness_loss(out.interactiveness.logits, matchings, train_cfg.focal_int, train_cfg.focal_gamma)
        total = total + l_int
        if train_cfg.part_supervision and out.interactiveness.part_logits is not None:
            l_part = part_loss(out.interactiveness.part_logits, targets, matchings)
            total = total + l_part
    else:
        l_verb = verb_loss(out.verb_logits, targets, matchings, train_cfg.focal_verb, train_cfg.focal_gamma)
        total = total + l_verb

    report = LossReport(
        loss_b=loss_b.item(), loss_u=loss_u.item(), loss_c=loss_c.item(), loss_det=loss_det.item(),
        loss_int=None if l_int is None else l_int.item(),
        loss_verb=None if l_verb is None else l_verb.item(),
        loss_part=None if l_part is None else l_part.item(),
        total=total.item(),
    )
    return total, report, matchings


# ============================================================================
# Data
# ============================================================================

def sparsity_adaptive_sampler(crowded: Sequence[bool], alpha: float, seed: int,
                              num_samples: Optional[int] = None) -> WeightedRandomSampler:
    """
    Sampling with replacement, weight 1 for sparse and alpha for crowded scenes

    Deterministic under seed; alpha = 1 is uniform sampling.
    """
    if len(crowded) == 0:
        raise ValueError("Cannot sample from an empty dataset")
    if alpha < 1.0:
        raise ValueError(f"alpha must be >= 1, got {alpha}")
    weights = torch.tensor([alpha if c else 1.0 for c in crowded], dtype=torch.double)
    generator = torch.Generator()
    generator.manual_seed(int(seed))
    return WeightedRandomSampler(weights, num_samples or len(crowded), replacement=True, generator=generator)


def crowded_fraction(indices: Sequence[int], crowded: Sequence[bool]) -> float:
    if not indices:
        return 0.0
    return float(sum(bool(crowded[i]) for i in indices)) / len(indices)


class SceneDataset(Dataset):
    """Rendered scenes with their part masks and matching targets"""

    def __init__(self, scenes: Sequence[SceneAnnotation], config: Config, train: bool = True):
        self.scenes = list(scenes)
        self.config = config
        self.spec = grid_spec(config.model)
        self.border_drop = train and config.masks.border_drop
        size = config.model.image_size
        for scene in self.scenes:
            if (scene.height, scene.width) != (size, size):
                raise ShapeError(f"Scene {scene.id} is {scene.width}x{scene.height}, "
                                 f"model.image_size is {size}")
        self._images: Dict[int, Tensor] = {}
        self.crowded = [tag_hard_cases(s).crowded for s in self.scenes]
        self.epoch = 0

    def set_epoch(self, epoch: int):
        """Border drops are redrawn per epoch"""
        self.epoch = int(epoch)

    def __len__(self) -> int:
        return len(self.scenes)

    def image(self, index: int) -> Tensor:
        if index not in self._images:
            rgb = render_scene(self.scenes[index])
            self._images[index] = torch.from_numpy(rgb).permute(2, 0, 1).float().div(255.0)
        return self._images[index]

    def __getitem__(self, index: int) -> Dict[str, Any]:
        scene = self.scenes[index]
        seed = derive_seed(self.config.train.seed, "border", self.epoch, scene.id) if self.border_drop else None
        return {
            'index': index,
            'image_id': scene.id,
            'image': self.image(index),
            'part_masks': build_part_masks(scene, self.spec, self.border_drop, seed),
            'targets': build_targets(scene, self.config.model.num_verbs),
        }


def collate_scenes(batch: List[Dict[str, Any]]) -> Dict[str, Any]:
    return {
        'index': [item['index'] for item in batch],
        'image_id': [item['image_id'] for item in batch],
        'images': torch.stack([item['image'] for item in batch]),
        'part_masks': [item['part_masks'] for item in batch],
        'targets': [item['targets'] for item in batch],
    }


# ============================================================================
# Checkpoints
# ============================================================================

def save_checkpoint(path: Union[str, Path], model: HOIDetector, config: Config, stage: int,
                    history: Optional[List[Dict[str, Any]]] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    state = {k: v.detach().cpu().clone() for k, v in model.state_dict().items()}
    torch.save({
        'format': CHECKPOINT_FORMAT,
        'version': CHECKPOINT_VERSION,
        'stage': stage,
        'seed': config.train.seed,
        'config': config.to_dict(),
        'state_dict': state,
        'shapes': {k: list(v.shape) for k, v in state.items()},
        'history': history or [],
    }, path)
    return path


def load_checkpoint(path: Union[str, Path]) -> Dict[str, Any]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"Checkpoint '{path}' does not exist")
    try:
        data = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as e:
        raise CheckpointError(f"Cannot read checkpoint '{path}': {e}") from e
    if not isinstance(data, dict) or data.get('format') != CHECKPOINT_FORMAT:
        raise CheckpointError(f"'{path}' is not a {CHECKPOINT_FORMAT} file")
    if data.get('version') != CHECKPOINT_VERSION:
        raise CheckpointError(f"'{path}' has checkpoint version {data.get('version')}, "
                              f"expected {CHECKPOINT_VERSION}")
    return data


def model_from_checkpoint(checkpoint: Union[str, Path, Dict[str, Any]],
                          config: Optional[Config] = None) -> Tuple[HOIDetector, Config]:
    """
    Rebuild a model from a checkpoint

    The network shape comes from the checkpoint; `config` may change the
    mask and evaluation settings (ablations at inference).
    """
    data = checkpoint if isinstance(checkpoint, dict) else load_checkpoint(checkpoint)
    stored = Config.from_dict(data['config'])
    if config is None:
        config = stored
    else:
        config = Config.from_dict({**config.to_dict(), 'model': data['config']['model']})
    model = HOIDetector(config)
    try:
        model.load_state_dict(data['state_dict'])
    except RuntimeError as e:
        raise CheckpointError(f"Checkpoint does not fit the model: {e}") from e
    return model, config


# ============================================================================
# Training
# ============================================================================

@dataclass
class TrainResult:
    model: HOIDetector
    history: List[Dict[str, Any]]
    checkpoint_path: Optional[Path] = None


def train(stage: int, scenes: Sequence[SceneAnnotation], config: Config,
          run_dir: Optional[Union[str, Path]] = None,
          init_checkpoint: Optional[Union[str, Path]] = None,
          epochs: Optional[int] = None) -> TrainResult:
    """
    Train one stage

    Args:
        stage: 1 (L_det + L_int) or 2 (L_det + L_verb)
        scenes: training scenes
        config: merged configuration
        run_dir: where train.log, train_log.jsonl and stage{N}.pt go
        init_checkpoint: required for stage 2 (the stage-1 checkpoint)
        epochs: overrides the configured stage length

    Raises:
        CheckpointError: stage 2 without a stage-1 checkpoint
        TrainingDivergedError: NaN/inf loss, naming the batch
    """
    if stage not in (1, 2):
        raise ValueError(f"Stage must be 1 or 2, got {stage}")
    if stage == 2 and init_checkpoint is None:
        raise CheckpointError("Stage 2 needs the stage-1 checkpoint (--init)")

    if run_dir is None:
        return _train_stage(stage, scenes, config, None, init_checkpoint, epochs)
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    with run_log(run_dir / "train.log"):
        return _train_stage(stage, scenes, config, run_dir, init_checkpoint, epochs)


def _train_stage(stage: int, scenes: Sequence[SceneAnnotation], config: Config, run_dir: Optional[Path],
                 init_checkpoint: Optional[Union[str, Path]], epochs: Optional[int]) -> TrainResult:
    t = config.train
    progress = logger.info if is_interactive() else logger.debug

    seed_everything(t.seed)
    model = HOIDetector(config)
    if init_checkpoint is not None:
        data = load_checkpoint(init_checkpoint)
        if stage == 2 and data.get('stage') != 1:
            logger.warning(f"[TRAIN] init checkpoint is from stage {data.get('stage')}, expected stage 1")
        model.load_state_dict(data['state_dict'])

    trainable = model.stage_parameters(stage)
    trainable_ids = {id(p) for p in trainable}
    for p in model.parameters():
        p.requires_grad_(id(p) in trainable_ids)

    dataset = SceneDataset(scenes, config, train=True)
    alpha = t.alpha if t.sampler else 1.0
    sampler = sparsity_adaptive_sampler(dataset.crowded, alpha, derive_seed(t.seed, "sampler", stage))
    loader = DataLoader(dataset, batch_size=t.batch_size, sampler=sampler, collate_fn=collate_scenes,
                        num_workers=0)

    num_epochs = epochs or (t.stage1_epochs if stage == 1 else t.stage2_epochs)
    milestone = max(1, int(round(num_epochs * t.lr_drop_fraction)))
    optimizer = torch.optim.AdamW(trainable, lr=t.lr, weight_decay=t.weight_decay)
    scheduler = torch.optim.lr_scheduler.MultiStepLR(optimizer, milestones=[milestone], gamma=0.1)

    logger.info(f"[TRAIN] stage {stage}: {len(dataset)} scenes, {num_epochs} epochs, "
                f"alpha={alpha}, seed={t.seed}, {sum(p.numel() for p in trainable)} trainable parameters")
    jsonl = (run_dir / "train_log.jsonl").open("a", encoding="utf-8") if run_dir is not None else None
    history: List[Dict[str, Any]] = []
    model.train()
    try:
        for epoch in range(num_epochs):
            dataset.set_epoch(epoch)
            sums: Dict[str, float] = {}
            drawn: List[int] = []
            fallbacks = 0
            batches = 0
            for batch_id, batch in enumerate(loader):
                out = model(batch['images'], batch['part_masks'], stage=stage)
                total, report, _ = compute_losses(out, batch['targets'], stage, t)
                if not report.is_finite():
                    raise TrainingDivergedError(stage, epoch, batch_id, report.to_dict())

                optimizer.zero_grad()
                total.backward()
                if t.grad_clip > 0:
                    torch.nn.utils.clip_grad_norm_(trainable, t.grad_clip)
                optimizer.step()

                for k, v in report.to_dict().items():
                    sums[k] = sums.get(k, 0.0) + v
                drawn += batch['index']
                if out.interactiveness is not None:
                    fallbacks += out.interactiveness.stats.fallback_count
                batches += 1
                if batch_id % max(config.monitoring.log_every, 1) == 0:
                    progress(f"[TRAIN] stage {stage} epoch {epoch} batch {batch_id}: total={report.total:.4f}")

            entry = {
                'stage': stage,
                'epoch': epoch,
                'losses': {k: v / max(batches, 1) for k, v in sums.items()},
                'lr': optimizer.param_groups[0]['lr'],
                'crowded_fraction': crowded_fraction(drawn, dataset.crowded),
                'fallbacks': fallbacks,
            }
            scheduler.step()
            history.append(entry)
            if jsonl is not None:
                jsonl.write(json.dumps(entry, sort_keys=True) + "\n")
                jsonl.flush()
            losses = ", ".join(f"{k}={v:.4f}" for k, v in sorted(entry['losses'].items()))
            logger.info(f"[TRAIN] stage {stage} epoch {epoch + 1}/{num_epochs}: {losses}")
    finally:
        if jsonl is not None:
            jsonl.close()

    checkpoint_path = None
    if run_dir is not None:
        checkpoint_path = save_checkpoint(run_dir / f"stage{stage}.pt", model, config, stage, history)
        logger.info(f"[TRAIN] saved {checkpoint_path}")
    return TrainResult(model, history, checkpoint_path)


# ============================================================================
# Inference
# ============================================================================

@torch.no_grad()
def predict(model: HOIDetector, scenes: Sequence[SceneAnnotation], config: Config,
            batch_size: Optional[int] = None, mode: Optional[str] = None,
            dump: Optional[List[Dict[str, Any]]] = None) -> List[Dict[str, Any]]:
    """
    Run the model on scenes

    Returns one {image_id, detections: [Proposal.to_dict()]} per scene; when
    `dump` is a list the interactiveness records are appended to it.
    """
    model.eval()
    dataset = SceneDataset(scenes, config, train=False)
    loader = DataLoader(dataset, batch_size=batch_size or config.train.batch_size, shuffle=False,
                        collate_fn=collate_scenes, num_workers=0)
    results = []
    for batch in loader:
        out = model(batch['images'], batch['part_masks'], mode=mode)
        for b, image_id in enumerate(batch['image_id']):
            results.append({'image_id': image_id,
                            'detections': [p.to_dict() for p in out.proposals(b)]})
            if dump is not None and out.interactiveness is not None:
                dump.append(out.interactiveness.to_record(b, image_id))
    return results
