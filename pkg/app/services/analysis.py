#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
Cost Analysis Service - Сервис анализа стоимости

Exact parameter and multiply-accumulate accounting computed from a config
alone. One MAC counts as one FLOP. Norm, softmax, activation, residual and
pooling work is itemised as element counts and kept out of the headline total.
"""

import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence

from app.core.errors import ContractError
from app.models.config import ModelConfig

logger = logging.getLogger(__name__)

TERMS = ("attention", "projection", "ffn", "patch_embed", "cpe", "norm", "head")


@dataclass
class CostRow:
    """One layer of the breakdown"""
    name: str
    term: str
    params: int = 0
    flops: int = 0


@dataclass
class ElementwiseRow:
    """Non-MAC work, excluded from the headline FLOPs"""
    name: str
    kind: str
    elements: int


@dataclass
class CostReport:
    """
    Parameter and FLOP breakdown of one config
    Разбивка параметров и FLOPs по слоям
    """

    config_name: str
    resolution: Optional[int] = None
    rows: List[CostRow] = field(default_factory=list)
    elementwise: List[ElementwiseRow] = field(default_factory=list)

    @property
    def total_params(self) -> int:
        return sum(row.params for row in self.rows)

    @property
    def total_flops(self) -> int:
        return sum(row.flops for row in self.rows)

    @property
    def head_params(self) -> int:
        return sum(row.params for row in self.rows if row.term == "head")

    def by_term(self) -> Dict[str, Dict[str, int]]:
        totals = {term: {"params": 0, "flops": 0} for term in TERMS}
        for row in self.rows:
            totals[row.term]["params"] += row.params
            totals[row.term]["flops"] += row.flops
        return totals

    def elementwise_totals(self) -> Dict[str, int]:
        totals: Dict[str, int] = {}
        for row in self.elementwise:
            totals[row.kind] = totals.get(row.kind, 0) + row.elements
        return totals

    def rows_with_prefix(self, prefix: str) -> List[CostRow]:
        return [row for row in self.rows if row.name.startswith(prefix)]

    def to_dict(self) -> Dict:
        return {
            "config": self.config_name,
            "resolution": self.resolution,
            "total_params": self.total_params,
            "total_params_without_head": self.total_params - self.head_params,
            "total_flops": self.total_flops,
            "terms": self.by_term(),
            "elementwise_totals": self.elementwise_totals(),
            "rows": [asdict(row) for row in self.rows],
            "elementwise": [asdict(row) for row in self.elementwise],
        }

    def to_json(self, indent: int = 2) -> str:
        return json.dumps(self.to_dict(), indent=indent)


@dataclass
class ScalingRow:
    resolution: int
    tokens: int
    attention_flops: int
    ratio: float
    stage_attention_flops: List[int]


def _linear(in_dim: int, out_dim: int, bias: bool = True) -> int:
    return in_dim * out_dim + (out_dim if bias else 0)


class CostAccountant:
    """Walks a config in the same order the backbone registers its parameters"""

    def __init__(self, config: ModelConfig, resolution: Optional[int] = None):
        self.config = config
        self.resolution = resolution
        self.report = CostReport(config.name, resolution)
        if resolution is not None:
            self.grids = config.stage_grids(resolution, resolution)
            self.windows = config.stage_windows(resolution, resolution)
        else:
            self.grids = self.windows = None

    def _tokens(self, stage: int) -> int:
        if self.grids is None:
            return 0
        h, w = self.grids[stage]
        return h * w

    def _row(self, name: str, term: str, params: int = 0, flops: int = 0):
        self.report.rows.append(CostRow(name, term, params, flops))

    def _elements(self, name: str, kind: str, count: int):
        if self.grids is not None:
            self.report.elementwise.append(ElementwiseRow(name, kind, count))

    def _norm(self, name: str, dim: int, positions: int):
        self._row(name, "norm", 2 * dim)
        self._elements(name, "norm", positions * dim)

    def run(self) -> CostReport:
        cfg = self.config
        in_dim = cfg.in_chans
        for s, dim in enumerate(cfg.stage_dims):
            prefix = f"stage{s + 1}"
            tokens = self._tokens(s)
            kernel = cfg.patch_kernels[s]
            conv_params = _linear(in_dim * kernel * kernel, dim)
            if s == 0:
                self._row(f"{prefix}.embed.conv", "patch_embed", conv_params,
                          tokens * dim * in_dim * kernel * kernel)
                self._norm(f"{prefix}.embed.norm", dim, tokens)
            else:
                self._norm(f"{prefix}.embed.norm", in_dim, self._tokens(s - 1))
                self._row(f"{prefix}.embed.conv", "patch_embed", conv_params,
                          tokens * dim * in_dim * kernel * kernel)
            first_kind, second_kind = cfg.sub_block_kinds(s + 1)
            for j in range(1, cfg.depths[s] + 1):
                for slot, kind in (("spatial", first_kind), ("channel", second_kind)):
                    self._sub_block(f"{prefix}.block{j}.{slot}", kind, s, dim, tokens)
                self._elements(f"{prefix}.block{j}.residual", "residual",
                               (4 if cfg.ffn_enabled else 2) * tokens * dim)
            in_dim = dim

        tokens = self._tokens(len(cfg.stage_dims) - 1)
        self._elements("head.pool", "pool", tokens * in_dim)
        self._norm("head.norm", in_dim, 1)
        head_flops = in_dim * cfg.num_classes if self.grids is not None else 0
        self._row("head.fc", "head", _linear(in_dim, cfg.num_classes), head_flops)
        logger.debug(f"{cfg.name}: {self.report.total_params:,} params, "
                     f"{self.report.total_flops:,} MACs")
        return self.report

    def _sub_block(self, prefix: str, kind: str, stage: int, dim: int, tokens: int):
        cfg = self.config
        cpe_params = dim * 9 + dim
        self._row(f"{prefix}.cpe1", "cpe", cpe_params, tokens * dim * 9)
        self._norm(f"{prefix}.norm1", dim, tokens)
        for proj in ("q", "k", "v"):
            self._row(f"{prefix}.attn.{proj}", "projection", _linear(dim, dim, cfg.qkv_bias),
                      tokens * dim * dim)
        self._row(f"{prefix}.attn.o", "projection", _linear(dim, dim), tokens * dim * dim)

        heads = cfg.num_heads[stage]
        if self.grids is not None:
            if kind == "window":
                window_area = self.windows[stage] ** 2
                flops = 2 * tokens * window_area * dim
                softmax = heads * tokens * window_area
            else:
                group_dim = dim // heads
                flops = 2 * tokens * dim * group_dim
                softmax = heads * group_dim * group_dim
            self._row(f"{prefix}.attn.{kind}_scores", "attention", 0, flops)
            self._elements(f"{prefix}.attn.softmax", "softmax", softmax)
            self._elements(f"{prefix}.attn.scale", "scale", softmax)
        else:
            self._row(f"{prefix}.attn.{kind}_scores", "attention")

        self._row(f"{prefix}.cpe2", "cpe", cpe_params, tokens * dim * 9)
        if cfg.ffn_enabled:
            hidden = dim * cfg.ffn_ratio
            self._norm(f"{prefix}.norm2", dim, tokens)
            self._row(f"{prefix}.ffn.fc1", "ffn", _linear(dim, hidden), tokens * dim * hidden)
            self._elements(f"{prefix}.ffn.gelu", "activation", tokens * hidden)
            self._row(f"{prefix}.ffn.fc2", "ffn", _linear(hidden, dim), tokens * hidden * dim)


def count_params(config: ModelConfig) -> CostReport:
    """Exact parameter count from the config alone"""
    return CostAccountant(config).run()


def count_flops(config: ModelConfig, resolution: int) -> CostReport:
    """Per-image MAC count at a square ``resolution``"""
    return CostAccountant(config, resolution).run()


def block_attention_flops(report: CostReport, stage: int, block: int) -> int:
    """Attention-term MACs of one dual block (1-based stage and block)"""
    rows = report.rows_with_prefix(f"stage{stage}.block{block}.")
    return sum(row.flops for row in rows if row.term == "attention")


def scaling_probe(config: ModelConfig, resolutions: Sequence[int]) -> List[ScalingRow]:
    """Attention-term MACs against the stage-1 token count P for each resolution"""
    if len(resolutions) < 2:
        raise ContractError(f"scaling probe needs at least two resolutions, got {list(resolutions)}")
    table = []
    for resolution in resolutions:
        report = count_flops(config, resolution)
        grid_h, grid_w = config.stage_grids(resolution, resolution)[0]
        tokens = grid_h * grid_w
        per_stage = [sum(r.flops for r in report.rows_with_prefix(f"stage{s}.")
                         if r.term == "attention") for s in range(1, len(config.depths) + 1)]
        total = sum(per_stage)
        table.append(ScalingRow(resolution, tokens, total, total / tokens, per_stage))
    return table
