"""Bit-width allocation: exact multiple-choice knapsack, budget sweep, cost model.

Each layer picks exactly one candidate bit-width; the chosen bits maximize
the summed sensitivity scores subject to a total bit budget. The solver is
an exact depth-first branch-and-bound with a linear-relaxation bound over
dominance-pruned candidates; a dynamic program over gcd-scaled cost units
serves as an independent cross-check.

The top-level sweep mirrors the deployment flow: scan a handful of budgets
just below the target, split each between the content and quality layer
groups at several ratios, solve the two knapsacks, and keep the merged
configuration whose fast proxy evaluation (mean output SQNR over a small
input set) is best. Summaries account storage in bits and compute in
bit-operations; a layer whose weight or activation stays full precision
computes at FP16.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from . import metrics, sensitivity, toy_model
from .errors import InfeasibleBudgetError, ParameterError, ValidationError
from .quantizer import BIT_WIDTHS
from .sensitivity import ACTIVATION, WEIGHT, SensitivityTable, fp_references, rank_long_tail
from .tensor_core import make_rng

FP_BITS = 16

DEFAULT_RATIO_GRID_WEIGHT = tuple(float(x) for x in np.linspace(0.45, 1.36, 8))
DEFAULT_RATIO_GRID_ACT = tuple(float(x) for x in np.linspace(0.94, 1.09, 8))


@dataclass(frozen=True)
class MckpCandidate:
    bits: int
    score: float
    cost: int


@dataclass
class MckpInstance:
    """Per-layer candidate lists plus a total budget in cost units (bits)."""

    layers: list[tuple[str, tuple[MckpCandidate, ...]]]
    budget: float

    def min_cost(self) -> int:
        return sum(min(c.cost for c in cands) for _, cands in self.layers)

    def validate(self) -> None:
        for lid, cands in self.layers:
            if not cands:
                raise ParameterError(f"layer {lid} has no candidates")
            if any(c.cost <= 0 for c in cands):
                raise ParameterError(f"layer {lid} has a non-positive candidate cost")

    def to_json_dict(self) -> dict:
        return {
            "budget": self.budget,
            "layers": [
                {
                    "id": lid,
                    "candidates": [
                        {"bits": c.bits, "score": c.score, "cost": c.cost} for c in cands
                    ],
                }
                for lid, cands in self.layers
            ],
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "MckpInstance":
        layers = [
            (
                row["id"],
                tuple(MckpCandidate(c["bits"], c["score"], c["cost"]) for c in row["candidates"]),
            )
            for row in d["layers"]
        ]
        return cls(layers=layers, budget=d["budget"])


@dataclass(frozen=True)
class MckpSolution:
    choices: dict[str, int]
    objective: float
    cost: int


def _prune_dominated(cands) -> list[MckpCandidate]:
    srt = sorted(cands, key=lambda c: (c.cost, -c.score, c.bits))
    keep: list[MckpCandidate] = []
    for c in srt:
        if keep and c.score <= keep[-1].score:
            continue
        keep.append(c)
    return keep


def _upper_hull(cands: list[MckpCandidate]) -> list[MckpCandidate]:
    hull = [cands[0]]
    for c in cands[1:]:
        while len(hull) >= 2:
            s_prev = (hull[-1].score - hull[-2].score) / (hull[-1].cost - hull[-2].cost)
            s_new = (c.score - hull[-1].score) / (c.cost - hull[-1].cost)
            if s_new >= s_prev:
                hull.pop()
            else:
                break
        hull.append(c)
    return hull


def solve_mckp(instance: MckpInstance) -> MckpSolution:
    """Exact optimum: one candidate per layer, total cost within budget.

    Ties on the objective break toward lower total cost, then toward the
    lexicographically smallest bits vector in layer-id order.
    """
    instance.validate()
    layers = sorted(instance.layers, key=lambda p: p[0])
    pruned = [(lid, _prune_dominated(cands)) for lid, cands in layers]
    n = len(pruned)
    budget = float(instance.budget)

    min_cost = sum(c[0].cost for _, c in pruned)
    if min_cost > budget:
        raise InfeasibleBudgetError(
            f"budget {budget:g} below the minimum achievable cost {min_cost}",
            min_achievable_bits=None,
        )

    # Suffix sums of the cheapest choice, plus LP-bound increments per suffix.
    base_cost = [0] * (n + 1)
    base_score = [0.0] * (n + 1)
    for i in range(n - 1, -1, -1):
        cheapest = pruned[i][1][0]
        base_cost[i] = base_cost[i + 1] + cheapest.cost
        base_score[i] = base_score[i + 1] + cheapest.score

    increments = []  # (efficiency, d_cost, d_score, layer_index)
    for i, (_, cands) in enumerate(pruned):
        hull = _upper_hull(cands)
        for a, b in zip(hull, hull[1:]):
            dc, ds = b.cost - a.cost, b.score - a.score
            increments.append((ds / dc, dc, ds, i))
    increments.sort(key=lambda t: (-t[0], t[3], t[1]))

    def bound(i: int, cost: float, score: float) -> float:
        cap = budget - cost - base_cost[i]
        if cap < 0:
            return -math.inf
        b = score + base_score[i]
        for eff, dc, ds, j in increments:
            if j < i:
                continue
            if dc <= cap:
                cap -= dc
                b += ds
            else:
                b += eff * cap
                break
        return b

    best_score = -math.inf
    best_cost = math.inf
    best_vec: tuple[int, ...] | None = None
    choice: list[MckpCandidate | None] = [None] * n
    eps = 1e-9

    def dfs(i: int, cost: float, score: float) -> None:
        nonlocal best_score, best_cost, best_vec
        if i == n:
            if score > best_score or (score == best_score and cost < best_cost):
                best_score, best_cost = score, cost
                best_vec = tuple(c.bits for c in choice)
            return
        slack = abs(best_score) * eps + eps
        if bound(i, cost, score) < best_score - slack:
            return
        for c in pruned[i][1]:  # ascending cost: first full solution is lex-smallest
            nc = cost + c.cost
            if nc + base_cost[i + 1] > budget:
                break
            choice[i] = c
            dfs(i + 1, nc, score + c.score)
        choice[i] = None

    dfs(0, 0.0, 0.0)
    assert best_vec is not None
    choices = {lid: bits for (lid, _), bits in zip(pruned, best_vec)}
    return MckpSolution(choices=choices, objective=best_score, cost=int(best_cost))


def solve_mckp_dp(instance: MckpInstance) -> float:
    """Objective of the exact optimum via a DP over gcd-scaled cost units."""
    instance.validate()
    all_costs = [c.cost for _, cands in instance.layers for c in cands]
    if not all_costs:
        return 0.0
    g = 0
    for c in all_costs:
        g = math.gcd(g, c)
    cap = int(instance.budget // g)
    if sum(min(c.cost for c in cands) for _, cands in instance.layers) > instance.budget:
        raise InfeasibleBudgetError(f"budget {instance.budget:g} infeasible")
    dp = np.full(cap + 1, -np.inf)
    dp[0] = 0.0
    for _, cands in instance.layers:
        nxt = np.full(cap + 1, -np.inf)
        for c in cands:
            w = c.cost // g
            if w > cap:
                continue
            shifted = np.concatenate([np.full(w, -np.inf), dp[: cap + 1 - w] + c.score])
            np.maximum(nxt, shifted, out=nxt)
        dp = nxt
    return float(dp.max())


def split_budget(total: float, mass_content: float, mass_quality: float, k: float) -> tuple[float, float]:
    """Split a budget across the two groups, proportional to mass skewed by ``k``.

    The pair is normalized with a double subtraction so conservation holds
    exactly in floating point: b_content + b_quality == total.
    """
    if k <= 0:
        raise ParameterError("ratio k must be > 0")
    denom = k * mass_content + mass_quality
    if denom <= 0:
        raise ParameterError("group masses must not both be zero")
    b_content = total * (k * mass_content) / denom
    b_quality = total - b_content
    b_content = total - b_quality
    b_quality = total - b_content
    return b_content, b_quality


def retain_fp(table: SensitivityTable, fraction: float) -> set[str]:
    """The ceil(fraction * n_layers) most sensitive layers, to keep at FP16."""
    if not 0 <= fraction < 1:
        raise ParameterError("fraction must lie in [0, 1)")
    ranked = rank_long_tail(table)
    n = math.ceil(fraction * len(ranked))
    return {lid for lid, _ in ranked[:n]}


@dataclass(frozen=True)
class ParetoPoint:
    avg_bits: float
    score: float
    ref: object = None


def pareto_frontier(points: list[ParetoPoint]) -> list[ParetoPoint]:
    """Maximal points under (minimize avg_bits, maximize score), sorted by avg_bits."""
    if not points:
        raise ParameterError("pareto_frontier needs at least one point")
    order = sorted(range(len(points)), key=lambda i: (points[i].avg_bits, -points[i].score, i))
    frontier = []
    best = -math.inf
    for i in order:
        if points[i].score > best:
            frontier.append(points[i])
            best = points[i].score
    return frontier


def cost_summary(config: toy_model.QuantConfig, model_costs: list[dict]) -> dict:
    """Storage/compute accounting with exact rational arithmetic.

    Storage counts each weight at its assigned bits (FP16 when unquantized).
    Compute is counted in bit-operations, MAC x weight-bits x act-bits; a
    layer with either operand at full precision runs on FP16 hardware and is
    charged 16 x 16 per MAC.
    """
    total_params = sum(r["param_count"] for r in model_costs)
    total_acts = sum(r["act_elem_count"] for r in model_costs)
    total_macs = sum(r["mac_count"] for r in model_costs)
    storage_bits = 0
    act_bits_total = 0
    bops = 0
    for row in model_costs:
        wb = config.weight_bits[row["id"]]
        ab = config.act_bits[row["id"]]
        storage_bits += (wb if wb is not None else FP_BITS) * row["param_count"]
        act_bits_total += (ab if ab is not None else FP_BITS) * row["act_elem_count"]
        if wb is None or ab is None:
            bops += row["mac_count"] * FP_BITS * FP_BITS
        else:
            bops += row["mac_count"] * wb * ab
    return {
        "avg_weight_bits": float(Fraction(storage_bits, total_params)),
        "avg_act_bits": float(Fraction(act_bits_total, total_acts)),
        "storage_bits": storage_bits,
        "bops": bops,
        "storage_opt_ratio": float(Fraction(FP_BITS * total_params, storage_bits)),
        "compute_opt_ratio": float(Fraction(FP_BITS * FP_BITS * total_macs, bops)),
    }


@dataclass
class BitWidthConfig:
    """Allocation output: per-layer bits, FP-retained layers, cost summary."""

    config: toy_model.QuantConfig
    fp_retained: dict[str, tuple[str, ...]]
    summary: dict

    def to_json_dict(self) -> dict:
        return {
            "layers": self.config.to_json_dict(),
            "fp_retained": {k: list(v) for k, v in sorted(self.fp_retained.items())},
            "summary": self.summary,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "BitWidthConfig":
        return cls(
            config=toy_model.QuantConfig.from_json_dict(d["layers"]),
            fp_retained={k: tuple(v) for k, v in d.get("fp_retained", {}).items()},
            summary=dict(d.get("summary", {})),
        )


@dataclass(frozen=True)
class AllocOptions:
    bit_widths: tuple[int, ...] = BIT_WIDTHS
    n_budgets: int = 5
    delta_avg_bits: float = 0.25
    ratio_grid: tuple[float, ...] | None = None  # None: per-kind default
    retain_fraction: float = 0.0
    proxy_inputs: int = 8
    proxy_seed: int = 12021
    bos_aware: bool = False
    sqnr_cap_db: float = metrics.DEFAULT_SQNR_CAP_DB


@dataclass
class AllocationResult:
    config: BitWidthConfig
    sweep: list[ParetoPoint]
    sweep_configs: list[toy_model.QuantConfig] = field(default_factory=list)
    best_ref: object = None


def _kind_config(model, tensor_kind, choices: dict[str, int], retained: set[str]) -> toy_model.QuantConfig:
    cfg = toy_model.QuantConfig.all_fp(model.layer_order)
    target = cfg.weight_bits if tensor_kind == WEIGHT else cfg.act_bits
    for lid, bits in choices.items():
        target[lid] = bits
    for lid in retained:
        target[lid] = None
    return cfg


def _greedy_fill(choices, spend, budget, elems, bits_grid, score_fn) -> int:
    """Spend leftover budget on the best score-per-cost upgrades that fit.

    The exact group solves can leave slack when only expensive layers remain
    upgradable; this pass saturates the budget so the emitted average bit-width
    stays within one sweep step of the target. Only non-score-decreasing
    upgrades are taken. Returns the new total spend.
    """
    while True:
        best = None
        for lid in sorted(choices):
            idx = bits_grid.index(choices[lid])
            if idx + 1 == len(bits_grid):
                continue
            nb = bits_grid[idx + 1]
            dc = (nb - choices[lid]) * elems[lid]
            if spend + dc > budget:
                continue
            ds = score_fn(lid, nb) - score_fn(lid, choices[lid])
            if ds < 0:
                continue
            key = (ds / dc, -dc, lid)
            if best is None or key > best[0]:
                best = (key, lid, nb, dc)
        if best is None:
            return spend
        _, lid, nb, dc = best
        choices[lid] = nb
        spend += dc


def proxy_score(model, config, inputs, refs, *, bos_aware=False, act_ranges=None, cap_db=metrics.DEFAULT_SQNR_CAP_DB) -> float:
    """Mean output SQNR of the configured model over a small input set."""
    total = 0.0
    for (latent, emb, t), ref in zip(inputs, refs):
        out = toy_model.forward(model, latent, emb, t, config=config, bos_aware=bos_aware, act_ranges=act_ranges)
        total += metrics.sqnr_db(ref, out, cap_db=cap_db).value
    return total / len(refs)


def allocate(
    model: toy_model.ToyModel,
    table: SensitivityTable,
    target_avg_bits: float,
    *,
    tensor_kind: str = WEIGHT,
    options: AllocOptions = AllocOptions(),
    act_ranges=None,
) -> AllocationResult:
    """Budget-and-ratio sweep returning the proxy-best configuration for one tensor kind."""
    if not 2 <= target_avg_bits <= 8:
        raise ParameterError("target average bits must lie in [2, 8]")
    bits_grid = tuple(sorted(options.bit_widths))
    table.validate_complete(model.layer_order, bits_grid, tensor_kind)

    elem_field = "param_count" if tensor_kind == WEIGHT else "act_elem_count"
    elems = {lid: getattr(model.layers[lid], elem_field) for lid in model.layer_order}
    total_elems = sum(elems.values())

    retained = retain_fp(table, options.retain_fraction)
    retained_cost = FP_BITS * sum(elems[lid] for lid in retained)
    free = [lid for lid in model.layer_order if lid not in retained]

    budget_all = target_avg_bits * total_elems
    min_cost = min(bits_grid) * sum(elems[lid] for lid in free) + retained_cost
    if min_cost > budget_all:
        raise InfeasibleBudgetError(
            f"target {target_avg_bits:g} bits infeasible; minimum achievable average is "
            f"{min_cost / total_elems:.4f} bits",
            min_achievable_bits=min_cost / total_elems,
        )

    retained_map = {tensor_kind: tuple(sorted(retained))}
    model_costs = toy_model.model_layer_summary(model)

    def finish(config, sweep, sweep_configs, best_ref):
        bw = BitWidthConfig(config=config, fp_retained=retained_map, summary=cost_summary(config, model_costs))
        return AllocationResult(config=bw, sweep=sweep, sweep_configs=sweep_configs, best_ref=best_ref)

    inputs = toy_model.make_input_set(options.proxy_seed, options.proxy_inputs, model)
    refs = fp_references(model, inputs, bos_aware=options.bos_aware)
    if tensor_kind == ACTIVATION and act_ranges is None:
        act_ranges = toy_model.calibrate_activations(model, inputs, bos_aware=options.bos_aware)

    def cell_score(config):
        return proxy_score(
            model, config, inputs, refs,
            bos_aware=options.bos_aware, act_ranges=act_ranges, cap_db=options.sqnr_cap_db,
        )

    # Budget already admits the all-max-bits assignment: the sweep is moot.
    max_cost = max(bits_grid) * sum(elems[lid] for lid in free) + retained_cost
    if max_cost <= budget_all:
        config = _kind_config(model, tensor_kind, {lid: max(bits_grid) for lid in free}, retained)
        point = ParetoPoint(avg_bits=max_cost / total_elems, score=cell_score(config), ref=0)
        return finish(config, [point], [config], 0)

    def group_instance(group: str, budget: float) -> MckpInstance | None:
        lids = [lid for lid in free if model.layers[lid].group == group]
        if not lids:
            return None
        layers = [
            (
                lid,
                tuple(
                    MckpCandidate(bits=b, score=table.score(lid, b, tensor_kind), cost=b * elems[lid])
                    for b in bits_grid
                ),
            )
            for lid in lids
        ]
        return MckpInstance(layers=layers, budget=budget)

    mass = {
        g: sum(elems[lid] for lid in free if model.layers[lid].group == g)
        for g in (toy_model.CONTENT, toy_model.QUALITY)
    }

    delta = options.delta_avg_bits * total_elems
    budgets = [float(b) for b in np.linspace(budget_all - delta, budget_all, options.n_budgets)]
    grid = options.ratio_grid
    if grid is None:
        grid = DEFAULT_RATIO_GRID_WEIGHT if tensor_kind == WEIGHT else DEFAULT_RATIO_GRID_ACT

    def table_score(lid, b):
        return table.score(lid, b, tensor_kind)

    points: list[ParetoPoint] = []
    configs: list[toy_model.QuantConfig] = []
    best = None  # (score, -cost, ref_index)
    best_choices = None
    for budget in budgets:
        b_eff = budget - retained_cost
        for k in grid:
            b_content, b_quality = split_budget(b_eff, mass[toy_model.CONTENT], mass[toy_model.QUALITY], k)
            choices: dict[str, int] = {}
            cost = retained_cost
            try:
                for group, b_group in ((toy_model.CONTENT, b_content), (toy_model.QUALITY, b_quality)):
                    inst = group_instance(group, b_group)
                    if inst is None:
                        continue
                    sol = solve_mckp(inst)
                    choices.update(sol.choices)
                    cost += sol.cost
            except InfeasibleBudgetError:
                continue
            cost = _greedy_fill(choices, cost, budget, elems, bits_grid, table_score)
            config = _kind_config(model, tensor_kind, choices, retained)
            score = cell_score(config)
            ref = len(points)
            points.append(ParetoPoint(avg_bits=cost / total_elems, score=score, ref=ref))
            configs.append(config)
            if best is None or (score, -cost) > best[:2]:
                best = (score, -cost, ref)
                best_choices = dict(choices)
    if best_choices is None:
        # Every skewed split starved one group, yet the budget itself is
        # feasible: fall back to the cheapest assignment topped up greedily.
        choices = {lid: min(bits_grid) for lid in free}
        spend = _greedy_fill(choices, min_cost, budget_all, elems, bits_grid, table_score)
        config = _kind_config(model, tensor_kind, choices, retained)
        point = ParetoPoint(avg_bits=spend / total_elems, score=cell_score(config), ref=0)
        return finish(config, [point], [config], 0)
    # The winning cell may have been swept at a budget below the target; top it
    # up against the full budget so the emitted average lands on the target.
    _greedy_fill(best_choices, -best[1], budget_all, elems, bits_grid, table_score)
    best_config = _kind_config(model, tensor_kind, best_choices, retained)
    return finish(best_config, points, configs, best[2])


def allocate_mixed(
    model: toy_model.ToyModel,
    weight_table: SensitivityTable | None = None,
    act_table: SensitivityTable | None = None,
    weight_target: float | None = None,
    act_target: float | None = None,
    *,
    weight_options: AllocOptions = AllocOptions(),
    act_options: AllocOptions = AllocOptions(),
    act_ranges=None,
) -> tuple[BitWidthConfig, dict[str, AllocationResult]]:
    """Run weight and activation allocations independently and merge them."""
    results: dict[str, AllocationResult] = {}
    merged = toy_model.QuantConfig.all_fp(model.layer_order)
    retained: dict[str, tuple[str, ...]] = {}
    if weight_target is not None:
        if weight_table is None:
            raise ValidationError("weight allocation requested but no weight sensitivity table given")
        res = allocate(model, weight_table, weight_target, tensor_kind=WEIGHT, options=weight_options)
        results[WEIGHT] = res
        merged.weight_bits = dict(res.config.config.weight_bits)
        retained.update(res.config.fp_retained)
    if act_target is not None:
        if act_table is None:
            raise ValidationError("activation allocation requested but no activation table given")
        res = allocate(
            model, act_table, act_target, tensor_kind=ACTIVATION, options=act_options, act_ranges=act_ranges
        )
        results[ACTIVATION] = res
        merged.act_bits = dict(res.config.config.act_bits)
        retained.update(res.config.fp_retained)
    summary = cost_summary(merged, toy_model.model_layer_summary(model))
    return BitWidthConfig(config=merged, fp_retained=retained, summary=summary), results


def naive_sorting_config(
    model: toy_model.ToyModel,
    table: SensitivityTable,
    target_avg_bits: float,
    *,
    tensor_kind: str = WEIGHT,
    bit_widths: tuple[int, ...] = BIT_WIDTHS,
) -> toy_model.QuantConfig:
    """Baseline: demote the least-sensitive layer step by step until the budget fits."""
    bits_grid = tuple(sorted(bit_widths))
    elem_field = "param_count" if tensor_kind == WEIGHT else "act_elem_count"
    elems = {lid: getattr(model.layers[lid], elem_field) for lid in model.layer_order}
    budget = target_avg_bits * sum(elems.values())
    order = [lid for lid, _ in reversed(rank_long_tail(table))]  # least sensitive first
    bits = {lid: bits_grid[-1] for lid in model.layer_order}
    cost = sum(bits[lid] * elems[lid] for lid in bits)
    for lid in order:
        while cost > budget and bits[lid] > bits_grid[0]:
            lower = bits_grid[bits_grid.index(bits[lid]) - 1]
            cost -= (bits[lid] - lower) * elems[lid]
            bits[lid] = lower
        if cost <= budget:
            break
    if cost > budget:
        raise InfeasibleBudgetError(f"target {target_avg_bits:g} bits infeasible for naive sorting")
    return _kind_config(model, tensor_kind, bits, set())


def random_config(
    model: toy_model.ToyModel,
    seed: int,
    target_avg_bits: float,
    *,
    tensor_kind: str = WEIGHT,
    bit_widths: tuple[int, ...] = BIT_WIDTHS,
) -> toy_model.QuantConfig:
    """Random feasible config near the budget: demote random layers until it fits."""
    rng = make_rng(seed, "random-config")
    bits_grid = tuple(sorted(bit_widths))
    elem_field = "param_count" if tensor_kind == WEIGHT else "act_elem_count"
    elems = {lid: getattr(model.layers[lid], elem_field) for lid in model.layer_order}
    budget = target_avg_bits * sum(elems.values())
    bits = {lid: bits_grid[-1] for lid in model.layer_order}
    cost = sum(bits[lid] * elems[lid] for lid in bits)
    while cost > budget:
        demotable = [lid for lid in model.layer_order if bits[lid] > bits_grid[0]]
        if not demotable:
            raise InfeasibleBudgetError(f"target {target_avg_bits:g} bits infeasible")
        lid = demotable[int(rng.integers(len(demotable)))]
        lower = bits_grid[bits_grid.index(bits[lid]) - 1]
        cost -= (bits[lid] - lower) * elems[lid]
        bits[lid] = lower
    return _kind_config(model, tensor_kind, bits, set())
