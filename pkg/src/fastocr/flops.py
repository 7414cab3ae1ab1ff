"""Self-attention FLOPs cost model and per-policy effective-context accounting.

Per decoding step and layer, the self-attention sublayer costs 8h^2 + 4hs
FLOPs: four (1,h)x(h,h) projections at 2h^2 each, plus 2hs for the query-key
product and 2hs for the value-weighted sum (softmax excluded). FFN and norm
costs are out of scope. All totals are exact Python integers; G-formatting
with two decimals happens only at the presentation layer.
"""

from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class FlopsConfig:
    batch: int
    layers: int
    hidden: int
    context: int

    def __post_init__(self):
        for name in ("batch", "layers", "hidden", "context"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


@dataclass
class PolicyFlopsBreakdown:
    projection_flops: int
    attention_flops: int
    per_layer_context: list  # effective context per (step, layer) entry
    total: int
    per_step_totals: list | None = None
    mean_per_step: float | None = None


def layer_attention_flops(hidden: int, context: int) -> int:
    """8h^2 + 4hs for one layer attending one query over `context` entries."""
    return 8 * hidden * hidden + 4 * hidden * context


def attention_flops(cfg: FlopsConfig) -> int:
    """b * l * (8h^2 + 4hs): per-step self-attention cost of a full-cache decoder."""
    return cfg.batch * cfg.layers * layer_attention_flops(cfg.hidden, cfg.context)


def fastocr_flops(batch: int, num_layers: int, hidden: int, s_full: int,
                  n_focal: int, s_pruned: int) -> PolicyFlopsBreakdown:
    """Split cost model: n_focal layers attend the full context, the rest the
    pruned one (s_pruned = |text| + ceil(kappa * N_img) when derived from a run)."""
    if n_focal > num_layers:
        raise ValueError("n_focal must be <= num_layers")
    if s_pruned > s_full:
        raise ValueError("s_pruned must be <= s_full")
    contexts = [s_full] * n_focal + [s_pruned] * (num_layers - n_focal)
    proj = batch * num_layers * 8 * hidden * hidden
    attn = batch * 4 * hidden * sum(contexts)
    return PolicyFlopsBreakdown(projection_flops=proj, attention_flops=attn,
                                per_layer_context=contexts, total=proj + attn)


def measured_breakdown(records, hidden: int, batch: int = 1) -> PolicyFlopsBreakdown:
    """Cost of an actual run from its step records.

    Effective context per layer is the number of positions the layer attended
    over: the full live context for mode "full", the kept-set size for mode
    "gathered". Instrumented shadow passes are not in the records and thus
    never counted.
    """
    contexts = []
    per_step = []
    proj = 0
    attn = 0
    for rec in records:
        step_total = 0
        for mode, covered in zip(rec.modes, rec.kept):
            s = int(len(covered))
            contexts.append(s)
            cost = batch * layer_attention_flops(hidden, s)
            step_total += cost
            proj += batch * 8 * hidden * hidden
            attn += batch * 4 * hidden * s
        per_step.append(step_total)
    total = proj + attn
    mean = total / len(per_step) if per_step else 0.0
    return PolicyFlopsBreakdown(projection_flops=proj, attention_flops=attn,
                                per_layer_context=contexts, total=total,
                                per_step_totals=per_step, mean_per_step=mean)


def format_g(flops: int | float) -> str:
    """Gigaflops with two decimals, the table precision used in reports."""
    return f"{flops / 1e9:.2f}"
