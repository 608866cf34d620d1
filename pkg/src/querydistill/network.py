"""Desk-scale query-based detector with iterative box refinement.

A fixed set of learnable queries, each paired with a learnable positional
anchor box, is refined through a small stack of decoder stages.  Every stage
runs single-head self-attention over the queries, dense softmax
cross-attention from queries to all feature-grid cells (attention logits get
a positional bias derived from the anchor/cell distance), a feed-forward
block, and classification / box heads.  The box head emits deltas applied in
inverse-sigmoid space to the incoming anchor; the refined boxes become the
next stage's anchors, detached so no gradient crosses stage boundaries
through the anchors.

Reverse-mode differentiation is torch autograd; matching and target
decisions elsewhere always operate on detached values, so teacher-derived
quantities stay constants in the graph.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .geometry import SIZE_EPS, Box
from .synthdata import cell_centers

CHECKPOINT_FORMAT = "querydistill-checkpoint-v1"


@dataclass(frozen=True)
class DetectorConfig:
    d_model: int = 32
    num_queries: int = 24
    num_stages: int = 3
    grid_size: int = 8
    num_classes: int = 5
    ffn_dim: int = 64
    num_heads: int = 4
    share_decoder: bool = True
    anchor_bias_floor: float = 0.05


@dataclass
class Prediction:
    """One query's decoded box plus its per-class sigmoid scores."""

    box: Box
    scores: np.ndarray


@dataclass
class StageOutput:
    """One decoder stage's updated queries and predictions for a batch."""

    queries: torch.Tensor  # [B, N, D]
    boxes: torch.Tensor  # [B, N, 4], center format in (0, 1)
    scores: torch.Tensor  # [B, N, C], sigmoid scores

    def predictions(self, scene: int = 0) -> list[Prediction]:
        boxes = self.boxes[scene].detach().cpu().numpy()
        scores = self.scores[scene].detach().cpu().numpy()
        return [
            Prediction(box=Box(*boxes[i]), scores=scores[i])
            for i in range(boxes.shape[0])
        ]


def inverse_sigmoid(x: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    x = x.clamp(eps, 1 - eps)
    return torch.log(x) - torch.log1p(-x)


class DecoderStage(nn.Module):
    def __init__(self, cfg: DetectorConfig):
        super().__init__()
        d = cfg.d_model
        self.cfg = cfg
        self.self_q = nn.Linear(d, d)
        self.self_k = nn.Linear(d, d)
        self.self_v = nn.Linear(d, d)
        self.self_o = nn.Linear(d, d)
        self.cross_q = nn.Linear(d, d)
        self.cross_k = nn.Linear(d, d)
        self.cross_v = nn.Linear(d, d)
        self.cross_o = nn.Linear(d, d)
        # positional encodings: the anchor box into the query stream, cell
        # centers into cross-attention keys and values (content features
        # only carry offsets, so absolute position must enter here)
        self.anchor_pos = nn.Linear(4, d)
        self.cell_pos_k = nn.Linear(2, d)
        self.cell_pos_v = nn.Linear(2, d)
        self.norm1 = nn.LayerNorm(d)
        self.norm2 = nn.LayerNorm(d)
        self.norm3 = nn.LayerNorm(d)
        self.norm_out = nn.LayerNorm(d)
        self.ffn1 = nn.Linear(d, cfg.ffn_dim)
        self.ffn2 = nn.Linear(cfg.ffn_dim, d)
        self.cls_head = nn.Linear(d, cfg.num_classes)
        self.box_head = nn.Linear(d, 4)
        if d % cfg.num_heads != 0:
            raise ValueError(f"d_model {d} not divisible by num_heads {cfg.num_heads}")

    def positional_bias(self, anchors: torch.Tensor, centers: torch.Tensor) -> torch.Tensor:
        """Quadratic attention bias focusing each query near its anchor box.

        anchors [B, N, 4], centers [G2, 2] -> [B, N, G2].
        """
        floor = self.cfg.anchor_bias_floor
        dx = anchors[..., 0:1] - centers[None, None, :, 0]
        dy = anchors[..., 1:2] - centers[None, None, :, 1]
        sx = anchors[..., 2:3] / 2 + floor
        sy = anchors[..., 3:4] / 2 + floor
        return -((dx / sx) ** 2 + (dy / sy) ** 2)

    def _heads(self, t: torch.Tensor) -> torch.Tensor:
        b, n, d = t.shape
        h = self.cfg.num_heads
        return t.reshape(b, n, h, d // h).transpose(1, 2)  # [B, H, N, d/h]

    def _merge(self, t: torch.Tensor) -> torch.Tensor:
        b, h, n, dh = t.shape
        return t.transpose(1, 2).reshape(b, n, h * dh)

    def forward(
        self,
        x: torch.Tensor,
        anchors: torch.Tensor,
        feats: torch.Tensor,
        centers: torch.Tensor,
        key_mask: torch.Tensor | None = None,
    ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        scale = 1.0 / math.sqrt(self.cfg.d_model // self.cfg.num_heads)
        x = x + self.anchor_pos(anchors)
        # self-attention over queries (pre-norm; key_mask hides padded slots)
        h = self.norm1(x)
        att = (
            torch.einsum(
                "bhnd,bhmd->bhnm", self._heads(self.self_q(h)), self._heads(self.self_k(h))
            )
            * scale
        )
        if key_mask is not None:
            att = att.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        x = x + self.self_o(
            self._merge(torch.softmax(att, dim=-1) @ self._heads(self.self_v(h)))
        )
        # cross-attention to all grid cells with anchor-distance bias
        h = self.norm2(x)
        keys = self.cross_k(feats) + self.cell_pos_k(centers)
        values = self.cross_v(feats) + self.cell_pos_v(centers)
        att = (
            torch.einsum(
                "bhnd,bhgd->bhng", self._heads(self.cross_q(h)), self._heads(keys)
            )
            * scale
        )
        att = att + self.positional_bias(anchors, centers)[:, None]
        x = x + self.cross_o(
            self._merge(torch.softmax(att, dim=-1) @ self._heads(values))
        )
        x = x + self.ffn2(torch.relu(self.ffn1(self.norm3(x))))
        h = self.norm_out(x)
        scores = torch.sigmoid(self.cls_head(h))
        boxes = torch.sigmoid(inverse_sigmoid(anchors) + self.box_head(h))
        boxes = torch.cat([boxes[..., :2], boxes[..., 2:].clamp(min=SIZE_EPS)], dim=-1)
        return x, boxes, scores


class Detector(nn.Module):
    """The query decoder stack.  With ``share_decoder`` every stage aliases
    one parameter set; otherwise each stage owns its own."""

    def __init__(self, cfg: DetectorConfig, seed: int = 0, dtype: torch.dtype = torch.float64):
        super().__init__()
        self.cfg = cfg
        self.init_seed = int(seed)
        self.query_embed = nn.Parameter(torch.zeros(cfg.num_queries, cfg.d_model))
        self.anchor_logits = nn.Parameter(torch.zeros(cfg.num_queries, 4))
        n_stage_params = 1 if cfg.share_decoder else cfg.num_stages
        self.stages = nn.ModuleList(DecoderStage(cfg) for _ in range(n_stage_params))
        self.register_buffer(
            "centers", torch.from_numpy(cell_centers(cfg.grid_size)), persistent=False
        )
        self.to(torch.float64)
        self._init_parameters()
        # init happens in float64 for seed stability across precisions
        if dtype is not torch.float64:
            self.to(dtype)

    def stage_module(self, t: int) -> DecoderStage:
        return self.stages[0] if self.cfg.share_decoder else self.stages[t]

    def _init_parameters(self) -> None:
        """Seeded init: uniform scaled by 1/sqrt(fan_in) for weights, zeros
        for biases, uniform /sqrt(d) queries, grid anchors."""
        gen = torch.Generator().manual_seed(self.init_seed)

        def uniform_(p: torch.Tensor, scale: float) -> None:
            with torch.no_grad():
                p.copy_((torch.rand(p.shape, generator=gen, dtype=p.dtype) * 2 - 1) * scale)

        for name, p in sorted(self.named_parameters(), key=lambda kv: kv[0]):
            if name == "query_embed":
                uniform_(p, 1.0 / math.sqrt(self.cfg.d_model))
            elif name == "anchor_logits":
                continue
            elif p.ndim == 2:
                uniform_(p, 1.0 / math.sqrt(p.shape[1]))
            else:
                with torch.no_grad():
                    p.zero_()
        with torch.no_grad():
            # LayerNorm weights start at one
            for m in self.modules():
                if isinstance(m, nn.LayerNorm):
                    m.weight.fill_(1.0)
                    m.bias.zero_()
            self.anchor_logits.copy_(inverse_sigmoid(self._grid_anchors()))

    def _grid_anchors(self) -> torch.Tensor:
        n = self.cfg.num_queries
        side = math.ceil(math.sqrt(n))
        axis = (torch.arange(side, dtype=torch.float64) + 0.5) / side
        yy, xx = torch.meshgrid(axis, axis, indexing="ij")
        grid = torch.stack([xx.ravel(), yy.ravel()], dim=1)[:n]
        size = torch.full((n, 2), 1.5 / side, dtype=torch.float64)
        return torch.cat([grid, size], dim=1)

    def initial_queries(self, batch: int) -> tuple[torch.Tensor, torch.Tensor]:
        x = self.query_embed[None].expand(batch, -1, -1)
        anchors = torch.sigmoid(self.anchor_logits)[None].expand(batch, -1, -1)
        return x, anchors

    def decode_stage(
        self,
        t: int,
        x: torch.Tensor,
        anchors: torch.Tensor,
        feats: torch.Tensor,
        key_mask: torch.Tensor | None = None,
    ) -> StageOutput:
        x, boxes, scores = self.stage_module(t)(x, anchors, feats, self.centers, key_mask)
        for name, tensor in (("queries", x), ("boxes", boxes), ("scores", scores)):
            if not torch.isfinite(tensor).all():
                bad = (~torch.isfinite(tensor)).reshape(tensor.shape[0], tensor.shape[1], -1)
                scene, query = (int(v) for v in bad.any(-1).nonzero()[0])
                raise FloatingPointError(
                    f"non-finite {name} at stage {t}, scene {scene}, query {query}"
                )
        return StageOutput(queries=x, boxes=boxes, scores=scores)

    def forward(
        self,
        feats: torch.Tensor,
        queries: torch.Tensor | None = None,
        anchors: torch.Tensor | None = None,
        key_mask: torch.Tensor | None = None,
        anchor_plan: list[torch.Tensor] | None = None,
    ) -> list[StageOutput]:
        """Run the full stack; all stage outputs are retained for deep
        supervision.  ``queries``/``anchors`` override the learned initial
        set (teacher-query decoding, auxiliary groups).

        Refined boxes feed the next stage as detached anchors, i.e. they are
        constants of the differentiated function; ``anchor_plan[t]`` (t >= 1)
        pins those constants to recorded values so a frozen step can be
        re-evaluated under perturbed parameters.
        """
        batch = feats.shape[0]
        if queries is None or anchors is None:
            q0, a0 = self.initial_queries(batch)
            queries = q0 if queries is None else queries
            anchors = a0 if anchors is None else anchors
        outputs: list[StageOutput] = []
        x, a = queries, anchors
        for t in range(self.cfg.num_stages):
            out = self.decode_stage(t, x, a, feats, key_mask)
            outputs.append(out)
            x = out.queries
            if anchor_plan is not None and t + 1 < self.cfg.num_stages:
                a = anchor_plan[t + 1]
            else:
                a = out.boxes.detach()
        return outputs

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())


def zero_gradients(model: nn.Module) -> None:
    for p in model.parameters():
        p.grad = None


def flat_gradients(model: nn.Module) -> torch.Tensor:
    """Gradients concatenated in named-parameter declaration order."""
    parts = []
    for _, p in model.named_parameters():
        parts.append(
            p.grad.reshape(-1) if p.grad is not None else torch.zeros(p.numel(), dtype=p.dtype)
        )
    return torch.cat(parts)


def save_checkpoint(
    model: Detector,
    path: str | Path,
    kind: str = "student",
    seed: int | None = None,
    extra: dict | None = None,
) -> None:
    """Write a checkpoint: one JSON metadata line, then flat little-endian
    float32 parameter arrays in declaration order."""
    names, shapes, blobs = [], [], []
    for name, p in model.named_parameters():
        names.append(name)
        shapes.append(list(p.shape))
        blobs.append(p.detach().cpu().numpy().astype("<f4").tobytes())
    header = {
        "format": CHECKPOINT_FORMAT,
        "kind": kind,
        "config": asdict(model.cfg),
        "num_stages": model.cfg.num_stages,
        "seed": model.init_seed if seed is None else int(seed),
        "dtype": "float32",
        "byte_order": "little",
        "param_names": names,
        "param_shapes": shapes,
    }
    if extra:
        header["extra"] = extra
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path: str | Path) -> tuple[Detector, dict]:
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode("utf-8"))
        raw = fh.read()
    if header.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"not a recognized checkpoint: {path}")
    cfg = DetectorConfig(**header["config"])
    model = Detector(cfg, seed=header.get("seed", 0))
    offset = 0
    with torch.no_grad():
        params = dict(model.named_parameters())
        for name, shape in zip(header["param_names"], header["param_shapes"]):
            size = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(raw, dtype="<f4", count=size, offset=offset)
            offset += size * 4
            params[name].copy_(torch.from_numpy(arr.reshape(shape).astype(np.float64)))
    return model, header
