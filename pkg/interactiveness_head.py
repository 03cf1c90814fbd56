#!/usr/bin/env python3
"""
Interactiveness classifier

Two variants share this module:

- intuitive scheme: six part-specific query sets pass the shared decoder
  under their own part's masks (the per-layer schedule in the model, the
  global part maps when called directly), each is scored against the unmasked
  instance embedding and the instance score is the maximum over parts;
- one-time passing (default): a one-layer unmasked decoder scores the
  importance of every (proposal, part), the top quarter of the image's
  scores is kept (at least one part per proposal), the kept parts' masks
  are merged by union and their queries by a score-weighted sum, and one
  progressively masked decoder pass gives the interactiveness score.
"""

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
import torch
from torch import nn, Tensor

from attention_core import (
    AttentionRecorder,
    AttentionStats,
    DecoderConfig,
    FeatureGrid,
    HeadKind,
    MLP,
    PredictionHead,
    TransformerDecoder,
)
from mask_geometry import (
    BodyPart,
    MaskStack,
    NUM_LAYERS,
    NUM_PARTS,
    PART_NAMES,
    encode_mask,
    merge_masks,
)
from utils import get_logger

logger = get_logger("interactiveness")

__all__ = [
    "BodyPart",
    "PartSelection",
    "InteractivenessOutput",
    "InteractivenessHead",
    "select_topk_parts",
    "merge_queries",
    "count_attention_token_ops",
]

MERGED = "merged"
INTUITIVE = "intuitive"


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass
class PartSelection:
    """Part importance scores p_part^{ik} and indicators n^{ik} of one image"""
    scores: np.ndarray          # (N, 6)
    indicators: np.ndarray      # (N, 6) bool
    base_count: int = 0         # picked by the pooled top fraction
    floor_additions: int = 0    # proposals that only got their argmax part

    @property
    def count(self) -> int:
        return int(self.indicators.sum())


def select_topk_parts(scores: Union[np.ndarray, Tensor], top_fraction: float = 0.25) -> PartSelection:
    """
    Pooled top-fraction selection over all (proposal, part) scores of an image

    The round(top_fraction * 6 * N) highest scores are selected, ties going
    to the smaller (i, k); every proposal left without a part then gets its
    highest-scoring part.
    """
    if isinstance(scores, Tensor):
        scores = scores.detach().cpu().numpy()
    scores = np.asarray(scores, dtype=np.float64)
    n = scores.shape[0]
    indicators = np.zeros(scores.shape, dtype=bool)
    if n == 0:
        return PartSelection(scores, indicators)

    k = min(_round_half_up(top_fraction * NUM_PARTS * n), scores.size)
    flat = scores.ravel()
    order = np.lexsort((np.arange(flat.size), -flat))
    indicators.ravel()[order[:k]] = True

    empty = np.flatnonzero(~indicators.any(axis=1))
    indicators[empty, scores[empty].argmax(axis=1)] = True
    return PartSelection(scores, indicators, base_count=k, floor_additions=len(empty))


def merge_queries(decoded: Tensor, part_queries: Tensor, selection: Tensor, scores: Tensor) -> Tensor:
    """
    d_mer = d + sum_k d_part^k * n^k * p_part^k

    Args:
        decoded: (..., N, D)
        part_queries: (..., N, 6, D)
        selection: (..., N, 6) indicators
        scores: (..., N, 6) part importance scores
    """
    weights = selection.to(scores.dtype) * scores
    return decoded + (part_queries * weights.unsqueeze(-1)).sum(dim=-2)


@dataclass
class InteractivenessOutput:
    """Per-proposal interactiveness of a batch"""
    p_int: Tensor                               # (B, N)
    logits: Tensor                              # (B, N)
    mode: str = MERGED
    part_scores: Optional[Tensor] = None        # (B, N, 6) p_part (merged scheme)
    part_logits: Optional[Tensor] = None
    selection: Optional[np.ndarray] = None      # (B, N, 6) bool
    part_int: Optional[Tensor] = None           # (B, N, 6) p_int^{ik} (intuitive scheme)
    part_int_logits: Optional[Tensor] = None
    embeddings: Optional[Tensor] = None         # (B, N, D) e_mer or e^0
    merged_masks: Optional[np.ndarray] = None   # (B, N, 3, H, W)
    stats: AttentionStats = field(default_factory=AttentionStats)

    def to_record(self, b: int, image_id: Union[int, str]) -> Dict[str, object]:
        """One JSON-ready eval dump record for batch item b"""
        record: Dict[str, object] = {
            'image_id': image_id,
            'mode': self.mode,
            'p_int': self.p_int[b].detach().cpu().tolist(),
        }
        if self.part_scores is not None:
            record['part_scores'] = self.part_scores[b].detach().cpu().tolist()
        if self.part_int is not None:
            record['part_int'] = self.part_int[b].detach().cpu().tolist()
        if self.selection is not None:
            record['selection'] = self.selection[b].astype(int).tolist()
        if self.merged_masks is not None:
            record['merged_masks'] = encode_mask(self.merged_masks[b])
        record['parts'] = list(PART_NAMES)
        return record


def _masks_to_tensor(masks: np.ndarray, device: torch.device) -> Tensor:
    """(..., H, W) uint8 -> (..., H*W) bool"""
    t = torch.from_numpy(np.ascontiguousarray(masks)).to(device=device, dtype=torch.bool)
    return t.flatten(-2)


class InteractivenessHead(nn.Module):
    """The interactiveness classifier, one-time passing or intuitive scheme"""

    def __init__(self, model_cfg, mask_cfg):
        super().__init__()
        dc = model_cfg.dc
        self.top_fraction = mask_cfg.top_fraction
        self.fallback = mask_cfg.empty_fallback
        self.mode = MERGED if mask_cfg.merge else INTUITIVE

        # h: one unmasked layer scoring part importance
        self.importance = TransformerDecoder(DecoderConfig.from_model(model_cfg, model_cfg.importance_layers))
        self.part_score_head = PredictionHead(HeadKind.PART_SCORE, dc, NUM_PARTS)
        # f_part^k, one FFN per part
        self.part_queries = nn.ModuleList(MLP(dc, dc, dc, 2) for _ in range(NUM_PARTS))
        # f_dec2, shared by every part and by the merged pass
        self.decoder = TransformerDecoder(DecoderConfig.from_model(model_cfg, model_cfg.int_decoder_layers))
        self.int_head = PredictionHead(HeadKind.INTERACTIVENESS, dc, 1)
        self.part_int_head = PredictionHead(HeadKind.INTERACTIVENESS, 2 * dc, 1, hidden_dim=dc)

    @property
    def depth(self) -> int:
        return len(self.decoder.layers)

    @property
    def importance_depth(self) -> int:
        return len(self.importance.layers)

    def part_importance_scores(self, grid: FeatureGrid, decoded: Tensor,
                               recorder: Optional[AttentionRecorder] = None):
        """(scores, logits), each (B, N, 6)"""
        d_part = self.importance(decoded, grid, None, recorder=recorder, tag="importance")
        logits = self.part_score_head.logits(d_part)
        return torch.sigmoid(logits), logits

    def part_query_embeddings(self, decoded: Tensor) -> Tensor:
        """D_part^k = f_part^k(D), stacked to (B, N, 6, D)"""
        return torch.stack([f(decoded) for f in self.part_queries], dim=-2)

    def forward(self, grid: FeatureGrid, decoded: Tensor, mask_stacks: Sequence[MaskStack],
                mode: Optional[str] = None, stats: Optional[AttentionStats] = None,
                recorder: Optional[AttentionRecorder] = None,
                selection_override: Optional[np.ndarray] = None) -> InteractivenessOutput:
        mode = mode or self.mode
        if mode == MERGED:
            return self.interactiveness_forward(grid, decoded, mask_stacks, stats=stats, recorder=recorder,
                                                selection_override=selection_override)
        if mode == INTUITIVE:
            layered = np.stack([s.layered for s in mask_stacks]) if mask_stacks else \
                np.zeros((0, decoded.shape[1], NUM_LAYERS, NUM_PARTS) + grid.spatial_shape, dtype=np.uint8)
            return self.intuitive_forward(grid, decoded, layered, stats=stats, recorder=recorder)
        raise ValueError(f"Unknown interactiveness mode '{mode}'")

    def interactiveness_forward(self, grid: FeatureGrid, decoded: Tensor, mask_stacks: Sequence[MaskStack],
                                stats: Optional[AttentionStats] = None,
                                recorder: Optional[AttentionRecorder] = None,
                                selection_override: Optional[np.ndarray] = None) -> InteractivenessOutput:
        """One-time passing with progressive merged masks"""
        stats = stats if stats is not None else AttentionStats()
        batch, nq, _ = decoded.shape
        if len(mask_stacks) != batch:
            raise ValueError(f"Got {len(mask_stacks)} mask stacks for a batch of {batch}")

        scores, part_logits = self.part_importance_scores(grid, decoded, recorder=recorder)

        if selection_override is not None:
            selection = np.asarray(selection_override, dtype=bool).reshape(batch, nq, NUM_PARTS)
        else:
            selection = np.stack([select_topk_parts(scores[b], self.top_fraction).indicators
                                  for b in range(batch)]) if batch else \
                np.zeros((0, nq, NUM_PARTS), dtype=bool)

        merged = np.stack([merge_masks(stack.layered, selection[b]) for b, stack in enumerate(mask_stacks)]) \
            if batch else np.zeros((0, nq, NUM_LAYERS) + grid.spatial_shape, dtype=np.uint8)
        mask_t = _masks_to_tensor(merged, decoded.device)                   # (B, N, 3, T)
        layer_masks = [mask_t[:, :, j, :] for j in range(self.depth)] if self.depth == NUM_LAYERS \
            else [mask_t[:, :, min(j, NUM_LAYERS - 1), :] for j in range(self.depth)]

        sel_t = torch.from_numpy(selection).to(decoded.device)
        d_mer = merge_queries(decoded, self.part_query_embeddings(decoded), sel_t, scores)
        e_mer = self.decoder(d_mer, grid, layer_masks, fallback=self.fallback, stats=stats,
                             recorder=recorder, tag=MERGED)
        logits = self.int_head.logits(e_mer)

        if stats.fallback_count:
            logger.warning(f"[FALLBACK] {stats.fallback_count} empty merged mask rows")
        return InteractivenessOutput(
            p_int=torch.sigmoid(logits), logits=logits, mode=MERGED,
            part_scores=scores, part_logits=part_logits, selection=selection,
            embeddings=e_mer, merged_masks=merged, stats=stats)

    def intuitive_forward(self, grid: FeatureGrid, decoded: Tensor, part_masks: np.ndarray,
                          stats: Optional[AttentionStats] = None,
                          recorder: Optional[AttentionRecorder] = None) -> InteractivenessOutput:
        """
        Six masked passes (one per part, shared decoder) plus one unmasked pass

        Args:
            part_masks: (B, 6, H, W) global body-part maps attended at every
                layer, or (B, N, 3, 6, H, W) per-proposal layered masks
        """
        stats = stats if stats is not None else AttentionStats()
        batch, nq, dc = decoded.shape

        e0 = self.decoder(decoded, grid, None, fallback=self.fallback, stats=stats,
                          recorder=recorder, tag="instance")

        d_part = self.part_query_embeddings(decoded)                        # (B, N, 6, D)
        d_part = d_part.permute(0, 2, 1, 3).reshape(batch * NUM_PARTS, nq, dc)
        masks = _masks_to_tensor(part_masks, decoded.device)
        if masks.dim() == 3:                                                # (B, 6, T)
            masks = masks.unsqueeze(2).expand(-1, -1, nq, -1).reshape(batch * NUM_PARTS, nq, -1)
        else:                                                               # (B, N, 3, 6, T)
            per_layer = masks.permute(0, 2, 3, 1, 4)                        # (B, 3, 6, N, T)
            masks = [per_layer[:, min(j, NUM_LAYERS - 1)].reshape(batch * NUM_PARTS, nq, -1)
                     for j in range(self.depth)]

        e_part = self.decoder(d_part, grid.repeat_interleave(NUM_PARTS), masks, fallback=self.fallback,
                              stats=stats, recorder=recorder, tag=INTUITIVE)
        e_part = e_part.view(batch, NUM_PARTS, nq, dc).permute(0, 2, 1, 3)  # (B, N, 6, D)

        paired = torch.cat([e_part, e0.unsqueeze(2).expand(-1, -1, NUM_PARTS, -1)], dim=-1)
        part_int_logits = self.part_int_head.logits(paired)                 # (B, N, 6)
        part_int = torch.sigmoid(part_int_logits)
        p_int = part_int.max(dim=-1).values
        logits = part_int_logits.max(dim=-1).values

        if stats.fallback_count:
            logger.warning(f"[FALLBACK] {stats.fallback_count} empty part mask rows")
        return InteractivenessOutput(
            p_int=p_int, logits=logits, mode=INTUITIVE,
            part_int=part_int, part_int_logits=part_int_logits,
            embeddings=e0, stats=stats)


def fallback_parts(stats: AttentionStats) -> List[BodyPart]:
    """Body parts whose intuitive-scheme branch ran under the empty-mask fallback"""
    parts = {event[2][0] % NUM_PARTS for event in stats.events if event[0] == INTUITIVE}
    return [BodyPart(k) for k in sorted(parts)]


def _effective_tokens(masks: np.ndarray, fallback: bool = True) -> np.ndarray:
    """Active-token count per (..., H, W) mask; an empty mask counts as the full grid"""
    counts = masks.reshape(masks.shape[:-2] + (-1,)).astype(bool).sum(axis=-1)
    if fallback:
        counts = np.where(counts == 0, masks.shape[-2] * masks.shape[-1], counts)
    return counts


def count_attention_token_ops(mode: str, mask_stack: MaskStack, selection: Optional[np.ndarray] = None,
                              depth: int = NUM_LAYERS, importance_depth: int = 1) -> int:
    """
    Sum over executed cross-attention calls of (queries x attended tokens)

    intuitive: the unmasked instance pass plus six masked passes, each of
    `depth` layers; merged: the unmasked importance pass of
    `importance_depth` layers plus one merged pass of `depth` layers. Both
    count the per-proposal layered masks their forward passes attend with.
    """
    n = mask_stack.num_proposals
    tokens = int(np.prod(mask_stack.grid_shape))
    if mode == INTUITIVE:
        layers = [mask_stack.layered[:, min(j, NUM_LAYERS - 1)] for j in range(depth)]   # (N, 6, H, W)
        masked = sum(int(_effective_tokens(m).sum()) for m in layers)
        return int(depth * n * tokens + masked)
    if mode == MERGED:
        if selection is None:
            raise ValueError("Merged-mode token count needs a part selection")
        merged = merge_masks(mask_stack.layered, selection)                  # (N, 3, H, W)
        layers = [merged[:, min(j, NUM_LAYERS - 1)] for j in range(depth)]
        masked = sum(int(_effective_tokens(m).sum()) for m in layers)
        return int(importance_depth * n * tokens + masked)
    raise ValueError(f"Unknown mode '{mode}'")
