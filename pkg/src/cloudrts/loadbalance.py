"""Rate-aware refinement load balancing.

The balancer minimises the peak normalised load (assigned work divided by PE
rate) while leaving most chares where they are. It only takes chares from
PEs above the average normalised load, tries them largest first, and moves
one only when the receiving PE ends up strictly below the donor's current
normalised load.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Hashable, Mapping

# Relative tolerance used for every comparison of normalised loads, so that a
# common rescaling of all rates cannot flip a decision through rounding.
REL_TOL = 1e-9


@dataclass
class LBInput:
    loads: Mapping[Hashable, float]
    placement: Mapping[Hashable, int]
    rates: Mapping[int, float]

    def __post_init__(self):
        if set(self.loads) != set(self.placement):
            raise ValueError("loads and placement must cover the same chares")
        for c, pe in self.placement.items():
            if pe not in self.rates:
                raise ValueError(f"chare {c} placed on PE {pe} which has no rate")
        if any(r <= 0 for r in self.rates.values()):
            raise ValueError("PE rates must be positive")
        if any(w < 0 for w in self.loads.values()):
            raise ValueError("chare loads must be non-negative")


@dataclass
class LBPlan:
    moves: list = field(default_factory=list)  # (chare, from_pe, to_pe)

    def __len__(self):
        return len(self.moves)

    def apply(self, placement: Mapping) -> dict:
        out = dict(placement)
        for chare, src, dst in self.moves:
            if out[chare] != src:
                raise ValueError(f"plan moves {chare} from PE {src} but it is on PE {out[chare]}")
            out[chare] = dst
        return out


def _lt(a: float, b: float) -> bool:
    return a < b - REL_TOL * max(abs(a), abs(b))


def pe_loads(loads: Mapping, placement: Mapping, rates: Mapping) -> dict[int, float]:
    totals = {pe: 0.0 for pe in rates}
    for c, pe in placement.items():
        totals[pe] += loads[c]
    return totals


def predicted_makespan(inp: LBInput, plan: LBPlan | None = None) -> float:
    placement = plan.apply(inp.placement) if plan else inp.placement
    totals = pe_loads(inp.loads, placement, inp.rates)
    return max((totals[pe] / inp.rates[pe] for pe in totals), default=0.0)


def greedy_refine(inp: LBInput) -> LBPlan:
    rates = inp.rates
    pes = sorted(rates)
    loads = dict(inp.loads)
    placement = dict(inp.placement)
    totals = pe_loads(loads, placement, rates)
    target = sum(loads.values()) / sum(rates.values())

    on_pe: dict[int, list] = {pe: [] for pe in pes}
    for c in sorted(placement, key=_chare_key):
        on_pe[placement[c]].append(c)

    def norm(pe):
        return totals[pe] / rates[pe]

    moved = set()
    exhausted = set()
    moves = []
    while True:
        donors = [pe for pe in pes if pe not in exhausted and _lt(target, norm(pe))]
        if not donors:
            break
        donor = donors[0]
        for pe in donors[1:]:
            if _lt(norm(donor), norm(pe)):
                donor = pe
        peak = norm(donor)
        candidates = sorted((c for c in on_pe[donor] if c not in moved),
                            key=lambda c: (-loads[c], _chare_key(c)))
        chosen = None
        for c in candidates:
            w = loads[c]
            if w <= 0:
                break  # moving nothing cannot lower the peak
            best, best_val = None, None
            for pe in pes:
                if pe == donor:
                    continue
                val = (totals[pe] + w) / rates[pe]
                if best is None or _lt(val, best_val):
                    best, best_val = pe, val
            if best is not None and _lt(best_val, peak):
                chosen = (c, best)
                break
        if chosen is None:
            exhausted.add(donor)
            continue
        c, dst = chosen
        totals[donor] -= loads[c]
        totals[dst] += loads[c]
        on_pe[donor].remove(c)
        on_pe[dst].append(c)
        moved.add(c)
        moves.append((c, donor, dst))
    return LBPlan(moves)


def greedy_assign(loads: Mapping, rates: Mapping[int, float], fixed: Mapping | None = None) -> dict:
    """Place chares largest-first on the PE with the lowest resulting normalised load.

    ``fixed`` pre-loads PEs with chares that are not being placed.
    """
    totals = {pe: 0.0 for pe in rates}
    for c, pe in (fixed or {}).items():
        totals[pe] += loads.get(c, 0.0)
    out = {}
    free = [c for c in loads if not fixed or c not in fixed]
    for c in sorted(free, key=lambda c: (-loads[c], _chare_key(c))):
        best, best_val = None, None
        for pe in sorted(rates):
            val = (totals[pe] + loads[c]) / rates[pe]
            if best is None or _lt(val, best_val):
                best, best_val = pe, val
        out[c] = best
        totals[best] += loads[c]
    return out


def brute_force_makespan(loads: Mapping, rates: Mapping[int, float]) -> float:
    """Optimal peak normalised load by exhaustive depth-first search with pruning."""
    items = sorted(loads.values(), reverse=True)
    pes = sorted(rates)
    r = [rates[p] for p in pes]
    best = [float("inf")]
    totals = [0.0] * len(pes)

    def dfs(i, current_peak):
        if current_peak >= best[0]:
            return
        if i == len(items):
            best[0] = current_peak
            return
        seen = set()
        for k in range(len(pes)):
            key = (totals[k], r[k])
            if key in seen:  # identical PEs give identical subtrees
                continue
            seen.add(key)
            totals[k] += items[i]
            dfs(i + 1, max(current_peak, totals[k] / r[k]))
            totals[k] -= items[i]

    dfs(0, 0.0)
    return best[0] if items else 0.0


def enumerate_makespan(loads: Mapping, rates: Mapping[int, float]) -> float:
    """Plain enumeration of every assignment; only for tiny instances."""
    names = list(loads)
    pes = sorted(rates)
    best = float("inf")
    for combo in itertools.product(pes, repeat=len(names)):
        totals = dict.fromkeys(pes, 0.0)
        for c, pe in zip(names, combo):
            totals[pe] += loads[c]
        best = min(best, max(totals[p] / rates[p] for p in pes))
    return best


def _chare_key(c):
    # ChareIds order naturally; fall back to repr for mixed key types.
    try:
        return (0, c.collection, c.index)
    except AttributeError:
        return (1, repr(type(c)), c)
