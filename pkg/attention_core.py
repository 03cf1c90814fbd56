#!/usr/bin/env python3
"""
Attention core
Masked cross-attention, pre-norm transformer decoder/encoder layers, the
fixed 2-D sinusoidal positional encoding and the FFN prediction heads.

Masked positions get a large finite negative logit (-(2**32 - 1)) instead
of -inf so softmax and its gradient stay finite; an all-zero mask row is
replaced by an all-ones row and counted (or rejected when fallback is off).
"""

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import torch
import torch.nn.functional as F
from torch import nn, Tensor

from mask_geometry import GridSpec
from utils import get_logger

logger = get_logger("attention")

SENTINEL = float(2 ** 32 - 1)


class EmptyMaskError(RuntimeError):
    """Raised for an all-zero attention mask when fallback is disabled"""
    pass


class ShapeError(ValueError):
    """Raised when tensors do not match the configured shapes"""
    pass


class UnknownHeadError(ValueError):
    """Raised for an FFN head kind that does not exist"""
    pass


@dataclass
class FeatureGrid:
    """Encoder output z (B, D_c, H, W) with its positional encoding (D_c, H, W)"""
    values: Tensor
    pos: Tensor

    def __post_init__(self):
        if self.values.dim() != 4:
            raise ShapeError(f"FeatureGrid values must be (B, D_c, H, W), got {tuple(self.values.shape)}")
        if tuple(self.pos.shape) != tuple(self.values.shape[1:]):
            raise ShapeError(f"Positional grid {tuple(self.pos.shape)} does not match "
                             f"features {tuple(self.values.shape[1:])}")

    @property
    def batch_size(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    @property
    def spatial_shape(self) -> Tuple[int, int]:
        return tuple(self.values.shape[2:])

    def tokens(self) -> Tensor:
        """(B, H*W, D_c), row-major over (x, y)"""
        return self.values.flatten(2).transpose(1, 2)

    def pos_tokens(self) -> Tensor:
        """(1, H*W, D_c)"""
        return self.pos.flatten(1).transpose(0, 1).unsqueeze(0)

    def repeat_interleave(self, repeats: int) -> 'FeatureGrid':
        return FeatureGrid(self.values.repeat_interleave(repeats, dim=0), self.pos)


@dataclass
class DecoderConfig:
    """Shape of one transformer decoder"""
    depth: int
    heads: int = 4
    dc: int = 64
    ffn_dim: int = 256
    dropout: float = 0.0

    def __post_init__(self):
        if self.dc % self.heads != 0:
            raise ShapeError(f"D_c={self.dc} is not divisible by {self.heads} heads")
        if self.depth < 0:
            raise ShapeError(f"Decoder depth must be >= 0, got {self.depth}")

    @classmethod
    def from_model(cls, model_cfg, depth: int) -> 'DecoderConfig':
        return cls(depth=depth, heads=model_cfg.heads, dc=model_cfg.dc,
                   ffn_dim=model_cfg.ffn_dim, dropout=model_cfg.dropout)


@dataclass
class AttentionStats:
    """Counts empty-mask fallbacks of one forward pass"""
    fallback_count: int = 0
    events: List[Tuple[str, int, Tuple[int, ...]]] = field(default_factory=list)
    max_events: int = 1000

    def record(self, tag: str, layer: int, rows: Sequence[Tuple[int, ...]]):
        self.fallback_count += len(rows)
        room = self.max_events - len(self.events)
        for row in list(rows)[:max(room, 0)]:
            self.events.append((tag, layer, tuple(row)))

    def tags(self) -> Dict[str, int]:
        counts: Dict[str, int] = {}
        for tag, _, _ in self.events:
            counts[tag] = counts.get(tag, 0) + 1
        return counts


@dataclass
class AttentionRecord:
    tag: str
    layer: int
    weights: Tensor     # (B, N, T), averaged over heads


class AttentionRecorder:
    """Keeps cross-attention weights for heatmap export"""

    def __init__(self):
        self.records: List[AttentionRecord] = []

    def add(self, tag: str, layer: int, weights: Tensor):
        self.records.append(AttentionRecord(tag, layer, weights.detach().cpu()))

    def select(self, tag: str) -> List[AttentionRecord]:
        return [r for r in self.records if r.tag == tag]


def resolve_empty_mask(mask: Tensor, *, fallback: bool = True, stats: Optional[AttentionStats] = None,
                       tag: str = "", layer: int = 0) -> Tensor:
    """
    Replace all-zero rows of a (..., N, T) bool mask by all-ones rows

    Raises:
        EmptyMaskError: if a row is empty and fallback is disabled
    """
    empty = ~mask.any(dim=-1)
    if not bool(empty.any()):
        return mask
    rows = [tuple(int(i) for i in idx) for idx in torch.nonzero(empty).tolist()]
    if not fallback:
        item = rows[0]
        raise EmptyMaskError(
            f"All-zero attention mask for proposal {item[-1]} (item {item[:-1]}) "
            f"at layer {layer}{' of ' + tag if tag else ''}; enable masks.empty_fallback "
            f"to attend to every token instead")
    if stats is not None:
        stats.record(tag, layer, rows)
    return mask | empty.unsqueeze(-1)


def masked_attention(query: Tensor, key: Tensor, value: Tensor, mask: Optional[Tensor] = None, *,
                     fallback: bool = True, stats: Optional[AttentionStats] = None,
                     tag: str = "", layer: int = 0) -> Tuple[Tensor, Tensor]:
    """
    Scaled dot-product attention restricted to the active tokens of each query

    Args:
        query: (..., N, d)
        key: (..., T, d)
        value: (..., T, d_v)
        mask: bool, broadcastable to (..., N, T); True = token participates

    Returns:
        (output (..., N, d_v), weights (..., N, T))
    """
    logits = torch.matmul(query, key.transpose(-2, -1)) / math.sqrt(query.shape[-1])
    if mask is not None:
        mask = resolve_empty_mask(mask.bool(), fallback=fallback, stats=stats, tag=tag, layer=layer)
        if not bool(mask.all()):
            logits = logits.masked_fill(~mask, -SENTINEL)
    weights = F.softmax(logits, dim=-1)
    return torch.matmul(weights, value), weights


class MultiHeadAttention(nn.Module):
    """Multi-head attention with explicit projections and an optional token mask"""

    def __init__(self, dc: int, heads: int):
        super().__init__()
        if dc % heads != 0:
            raise ShapeError(f"D_c={dc} is not divisible by {heads} heads")
        self.dc = dc
        self.heads = heads
        self.head_dim = dc // heads

        self.q_proj = nn.Linear(dc, dc)
        self.k_proj = nn.Linear(dc, dc)
        self.v_proj = nn.Linear(dc, dc)
        self.out_proj = nn.Linear(dc, dc)

    def _split(self, t: Tensor) -> Tensor:
        b, n, _ = t.shape
        return t.view(b, n, self.heads, self.head_dim).transpose(1, 2)

    def forward(self, query: Tensor, key: Tensor, value: Tensor, mask: Optional[Tensor] = None, *,
                fallback: bool = True, stats: Optional[AttentionStats] = None,
                recorder: Optional[AttentionRecorder] = None, tag: str = "", layer: int = 0) -> Tensor:
        b, n, _ = query.shape
        if mask is not None:
            if mask.shape != (b, n, key.shape[1]):
                raise ShapeError(f"Mask shape {tuple(mask.shape)} does not match "
                                 f"(B, N, T) = {(b, n, key.shape[1])}")
            mask = resolve_empty_mask(mask.bool(), fallback=fallback, stats=stats, tag=tag, layer=layer)
            mask = mask.unsqueeze(1)

        q = self._split(self.q_proj(query))
        k = self._split(self.k_proj(key))
        v = self._split(self.v_proj(value))
        out, weights = masked_attention(q, k, v, mask, fallback=fallback, tag=tag, layer=layer)
        if recorder is not None:
            recorder.add(tag, layer, weights.mean(dim=1))
        out = out.transpose(1, 2).contiguous().view(b, n, self.dc)
        return self.out_proj(out)


class FeedForward(nn.Module):
    def __init__(self, dc: int, ffn_dim: int, dropout: float = 0.0):
        super().__init__()
        self.linear1 = nn.Linear(dc, ffn_dim)
        self.linear2 = nn.Linear(ffn_dim, dc)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x: Tensor) -> Tensor:
        return self.linear2(self.dropout(F.relu(self.linear1(x))))


class DecoderLayer(nn.Module):
    """
    Pre-norm decoder layer: query self-attention (unmasked), masked
    cross-attention to the feature grid, FFN; residual around each.
    """

    def __init__(self, cfg: DecoderConfig):
        super().__init__()
        self.self_attn = MultiHeadAttention(cfg.dc, cfg.heads)
        self.cross_attn = MultiHeadAttention(cfg.dc, cfg.heads)
        self.ffn = FeedForward(cfg.dc, cfg.ffn_dim, cfg.dropout)
        self.norm1 = nn.LayerNorm(cfg.dc)
        self.norm2 = nn.LayerNorm(cfg.dc)
        self.norm3 = nn.LayerNorm(cfg.dc)
        self.dropout1 = nn.Dropout(cfg.dropout)
        self.dropout2 = nn.Dropout(cfg.dropout)
        self.dropout3 = nn.Dropout(cfg.dropout)
        self.dc = cfg.dc

    def forward(self, tgt: Tensor, memory: Tensor, memory_pos: Tensor, mask: Optional[Tensor] = None, *,
                fallback: bool = True, stats: Optional[AttentionStats] = None,
                recorder: Optional[AttentionRecorder] = None, tag: str = "", layer: int = 0) -> Tensor:
        if tgt.shape[-1] != self.dc or memory.shape[-1] != self.dc:
            raise ShapeError(f"Decoder width {self.dc} does not match queries {tuple(tgt.shape)} "
                             f"or memory {tuple(memory.shape)}")
        if tgt.shape[0] != memory.shape[0]:
            raise ShapeError(f"Batch size of queries ({tgt.shape[0]}) and memory ({memory.shape[0]}) differ")

        t2 = self.norm1(tgt)
        tgt = tgt + self.dropout1(self.self_attn(t2, t2, t2))

        t2 = self.norm2(tgt)
        t2 = self.cross_attn(t2, memory + memory_pos, memory, mask, fallback=fallback, stats=stats,
                             recorder=recorder, tag=tag, layer=layer)
        tgt = tgt + self.dropout2(t2)

        t2 = self.norm3(tgt)
        return tgt + self.dropout3(self.ffn(t2))


LayerMasks = Union[None, Tensor, Sequence[Optional[Tensor]]]


class TransformerDecoder(nn.Module):
    """Stack of decoder layers with a final norm; one mask per layer"""

    def __init__(self, cfg: DecoderConfig):
        super().__init__()
        self.cfg = cfg
        self.layers = nn.ModuleList([DecoderLayer(cfg) for _ in range(cfg.depth)])
        self.norm = nn.LayerNorm(cfg.dc)

    def forward(self, queries: Tensor, grid: FeatureGrid, masks: LayerMasks = None, *,
                fallback: bool = True, stats: Optional[AttentionStats] = None,
                recorder: Optional[AttentionRecorder] = None, tag: str = "") -> Tensor:
        memory = grid.tokens()
        memory_pos = grid.pos_tokens()
        if masks is None or isinstance(masks, Tensor):
            per_layer = [masks] * len(self.layers)
        else:
            per_layer = list(masks)
            if len(per_layer) != len(self.layers):
                raise ShapeError(f"Got {len(per_layer)} layer masks for {len(self.layers)} layers")

        out = queries
        for j, (layer, mask) in enumerate(zip(self.layers, per_layer)):
            out = layer(out, memory, memory_pos, mask, fallback=fallback, stats=stats,
                        recorder=recorder, tag=tag, layer=j + 1)
        return self.norm(out)


class EncoderLayer(nn.Module):
    """Pre-norm self-attention layer over the token grid"""

    def __init__(self, cfg: DecoderConfig):
        super().__init__()
        self.self_attn = MultiHeadAttention(cfg.dc, cfg.heads)
        self.ffn = FeedForward(cfg.dc, cfg.ffn_dim, cfg.dropout)
        self.norm1 = nn.LayerNorm(cfg.dc)
        self.norm2 = nn.LayerNorm(cfg.dc)
        self.dropout1 = nn.Dropout(cfg.dropout)
        self.dropout2 = nn.Dropout(cfg.dropout)

    def forward(self, src: Tensor, pos: Tensor) -> Tensor:
        s2 = self.norm1(src)
        qk = s2 + pos
        src = src + self.dropout1(self.self_attn(qk, qk, s2))
        return src + self.dropout2(self.ffn(self.norm2(src)))


def decoder_layer_forward(layer: DecoderLayer, queries: Tensor, grid: FeatureGrid,
                          mask: Optional[Tensor] = None, **kwargs) -> Tensor:
    """One decoder layer applied to (B, N, D_c) queries against a feature grid"""
    return layer(queries, grid.tokens(), grid.pos_tokens(), mask, **kwargs)


def sinusoidal_positional_encoding(spec: Union[GridSpec, Tuple[int, int]], dc: int,
                                   temperature: float = 10000.0,
                                   dtype: torch.dtype = torch.float32) -> Tensor:
    """
    Fixed 2-D sine/cosine encoding, (D_c, H, W)

    The first D_c/2 channels encode the row index x, the rest the column
    index y; each half alternates sin/cos over geometric frequencies.
    """
    if dc % 4 != 0:
        raise ShapeError(f"D_c={dc} must be divisible by 4 for the 2-D positional encoding")
    height, width = spec.shape if isinstance(spec, GridSpec) else spec
    npf = dc // 2

    dim_t = torch.arange(npf, dtype=torch.float64)
    dim_t = temperature ** (2 * torch.div(dim_t, 2, rounding_mode='floor') / npf)

    x_embed = torch.arange(height, dtype=torch.float64)[:, None].expand(height, width)
    y_embed = torch.arange(width, dtype=torch.float64)[None, :].expand(height, width)
    pos_x = x_embed[:, :, None] / dim_t
    pos_y = y_embed[:, :, None] / dim_t
    pos_x = torch.stack((pos_x[:, :, 0::2].sin(), pos_x[:, :, 1::2].cos()), dim=3).flatten(2)
    pos_y = torch.stack((pos_y[:, :, 0::2].sin(), pos_y[:, :, 1::2].cos()), dim=3).flatten(2)
    pos = torch.cat((pos_x, pos_y), dim=2).permute(2, 0, 1)
    return pos.to(dtype).contiguous()


class HeadKind(Enum):
    HUMAN_BOX = "human_box"
    OBJECT_BOX = "object_box"
    OBJECT_CLASS = "object_class"
    VERB = "verb"
    INTERACTIVENESS = "interactiveness"
    PART_SCORE = "part_score"

    @classmethod
    def parse(cls, kind: Union[str, 'HeadKind']) -> 'HeadKind':
        if isinstance(kind, cls):
            return kind
        try:
            return cls(kind)
        except ValueError:
            raise UnknownHeadError(
                f"Unknown head kind '{kind}'; expected one of {[k.value for k in cls]}") from None


class MLP(nn.Module):
    """Very simple multi-layer perceptron (also called FFN)"""

    def __init__(self, input_dim: int, hidden_dim: int, output_dim: int, num_layers: int):
        super().__init__()
        self.num_layers = num_layers
        h = [hidden_dim] * (num_layers - 1)
        self.layers = nn.ModuleList(nn.Linear(n, k) for n, k in zip([input_dim] + h, h + [output_dim]))

    def forward(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = F.relu(layer(x)) if i < self.num_layers - 1 else layer(x)
        return x


class PredictionHead(nn.Module):
    """
    FFN head of one kind

    Box heads give sigmoid (cx, cy, w, h); the class head a softmax over
    N_obj + 1 classes (last = no-object); verb, interactiveness and part
    heads give sigmoid scores.
    """

    def __init__(self, kind: Union[str, HeadKind], input_dim: int, output_dim: int,
                 hidden_dim: Optional[int] = None, num_layers: int = 2):
        super().__init__()
        self.kind = HeadKind.parse(kind)
        self.mlp = MLP(input_dim, hidden_dim or input_dim, output_dim, num_layers)

    def logits(self, x: Tensor) -> Tensor:
        out = self.mlp(x)
        if self.kind is HeadKind.INTERACTIVENESS:
            out = out.squeeze(-1)
        return out

    def activate(self, logits: Tensor) -> Tensor:
        if self.kind is HeadKind.OBJECT_CLASS:
            return F.softmax(logits, dim=-1)
        return torch.sigmoid(logits)

    def forward(self, x: Tensor) -> Tensor:
        return self.activate(self.logits(x))


def ffn_head(embeddings: Tensor, heads: Mapping[HeadKind, PredictionHead],
             head_kind: Union[str, HeadKind]) -> Tensor:
    """Apply the named head of a head table to decoded embeddings"""
    kind = HeadKind.parse(head_kind)
    if kind not in heads:
        raise UnknownHeadError(f"Head '{kind.value}' is not part of this model")
    return heads[kind](embeddings)


def reset_parameters(module: nn.Module, seed: int):
    """
    Deterministic initialization from a seed

    Xavier-uniform weights for matrices, zeros for biases, ones for norms.
    """
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        for name, param in module.named_parameters():
            if param.dim() > 1:
                nn.init.xavier_uniform_(param)
            elif name.endswith("bias"):
                nn.init.zeros_(param)
            else:
                nn.init.ones_(param)
