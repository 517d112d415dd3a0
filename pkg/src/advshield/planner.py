"""Defense layout planning under latency, DSP, and memory budgets.

Given per-layer cost profiles of a defender network and a hardware
budget, pick the number of defenders and processing units that maximizes
redundancy while meeting every constraint:

* DSP:      n_def * n_pu * dsp_per_pu <= dsp_slices
* memory:   n_pu * (max weight size + max adjacent activation pair) <= memory_words
* latency:  predicted defender latency <= latency_s

The sparse-recovery front end has a fixed cost (``omp_cost`` cycles and
an ``n*l``-word dictionary); it is carved out of the latency and memory
budgets up front, and the search runs against the reduced budgets.
"""

import json
from dataclasses import dataclass

from .arch import ArchSpec, parse_arch, trace_shapes
from .errors import InfeasiblePlanError, ValidationError

DEFAULT_OMP_PARAMS = (64, 225, 8)  # patch dim n, atoms l, sparsity k


@dataclass(frozen=True)
class ResourceBudget:
    latency_s: float      # per-sample latency budget
    dsp_slices: int       # total DSP budget
    memory_words: int     # on-chip words for weights + activations
    dsp_per_pu: int
    cycles_per_mac: float
    clock_hz: float
    dsp_per_pe: int = 1

    def __post_init__(self):
        for name in ("latency_s", "dsp_slices", "memory_words"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be >= 0")
        for name in ("dsp_per_pu", "cycles_per_mac", "clock_hz",
                     "dsp_per_pe"):
            if getattr(self, name) <= 0:
                raise ValidationError(f"{name} must be > 0")

    def to_dict(self):
        return {"latency_s": self.latency_s, "dsp_slices": self.dsp_slices,
                "memory_words": self.memory_words,
                "dsp_per_pu": self.dsp_per_pu,
                "cycles_per_mac": self.cycles_per_mac,
                "clock_hz": self.clock_hz, "dsp_per_pe": self.dsp_per_pe}

    @staticmethod
    def from_dict(doc):
        return ResourceBudget(
            float(doc["latency_s"]), int(doc["dsp_slices"]),
            int(doc["memory_words"]), int(doc["dsp_per_pu"]),
            float(doc["cycles_per_mac"]), float(doc["clock_hz"]),
            int(doc.get("dsp_per_pe", 1)))


@dataclass(frozen=True)
class LayerCost:
    kind: str
    macs: int
    weight_params: int
    in_size: int
    out_size: int


@dataclass(frozen=True)
class DefenderCostProfile:
    layers: tuple
    total_macs: int
    max_weight: int            # largest per-layer parameter count
    max_activation_pair: int   # largest |X_i| + |X_{i+1}| over layers
    omp_n: int
    omp_l: int
    omp_k: int


def profile_costs(arch, omp_params=DEFAULT_OMP_PARAMS):
    """Exact MAC, parameter, and activation counts for an architecture.

    ``arch`` is an :class:`ArchSpec` or a parseable string.  Pooling and
    global-average layers cost no MACs or weights here; they are dwarfed
    by the matrix work and the paper-facing counts ignore them too.
    """
    if isinstance(arch, str):
        arch = parse_arch(arch)
    if not isinstance(arch, ArchSpec):
        raise ValidationError("arch must be an ArchSpec or string")
    shapes = [arch.input_shape] + trace_shapes(arch)
    layers = []
    for token, shape_in, shape_out in zip(arch.tokens, shapes, shapes[1:]):
        in_size = _size(shape_in)
        out_size = _size(shape_out)
        kind = type(token).__name__
        macs = 0
        weights = 0
        if kind == "ConvToken":
            c_in = shape_in[0]
            c_out, h_out, w_out = shape_out
            per_out = c_in * token.kernel * token.kernel
            macs = c_out * h_out * w_out * per_out
            weights = c_out * per_out + c_out
        elif kind == "FCToken":
            macs = in_size * token.units
            weights = in_size * token.units + token.units
        layers.append(LayerCost(kind, macs, weights, in_size, out_size))
    n, l, k = omp_params
    return DefenderCostProfile(
        layers=tuple(layers),
        total_macs=sum(c.macs for c in layers),
        max_weight=max((c.weight_params for c in layers), default=0),
        max_activation_pair=max(
            (c.in_size + c.out_size for c in layers), default=0),
        omp_n=int(n), omp_l=int(l), omp_k=int(k))


def _size(shape):
    out = 1
    for s in shape:
        out *= int(s)
    return out


def omp_cycles(n, l, k):
    """Cycle count of one sparse recovery: n(k*l + k^2) per unit beta."""
    return n * (k * l + k * k)


def omp_cost(n, l, k, cycles_per_mac, clock_hz):
    """Seconds for one sparse recovery pass."""
    return cycles_per_mac * omp_cycles(n, l, k) / clock_hz


def omp_memory_words(n, l):
    """Resident dictionary size in words."""
    return n * l


def latency_model(profile, n_pu, n_def, layout, budget):
    """Predicted per-sample defense latency in seconds.

    One defender costs ``cycles_per_mac * total_macs / (n_pu * n_pe *
    clock)``; a sequential layout multiplies by ``n_def`` while a
    parallel layout does not.  The fixed sparse-recovery cost is added on
    top either way.
    """
    if n_pu < 1 or n_def < 1:
        raise ValidationError("n_pu and n_def must be >= 1")
    if layout not in ("sequential", "parallel"):
        raise ValidationError(f"unknown layout {layout!r}")
    n_pe = budget.dsp_per_pu // budget.dsp_per_pe
    if n_pe < 1:
        raise ValidationError("dsp_per_pu too small to host one PE")
    per = (budget.cycles_per_mac * profile.total_macs
           / (n_pu * n_pe * budget.clock_hz))
    dnn = per * n_def if layout == "sequential" else per
    return dnn + omp_cost(profile.omp_n, profile.omp_l, profile.omp_k,
                          budget.cycles_per_mac, budget.clock_hz)


@dataclass
class DefensePlan:
    n_def: int
    n_pu: int
    n_pe: int
    layout: str
    predicted_latency: float
    usage: dict

    def to_dict(self):
        return {"n_def": self.n_def, "n_pu": self.n_pu, "n_pe": self.n_pe,
                "layout": self.layout,
                "predicted_latency": self.predicted_latency,
                "usage": dict(self.usage)}

    @staticmethod
    def from_dict(doc):
        return DefensePlan(int(doc["n_def"]), int(doc["n_pu"]),
                           int(doc["n_pe"]), doc["layout"],
                           float(doc["predicted_latency"]),
                           dict(doc["usage"]))


def check_plan(plan, budget, profile):
    """Re-evaluate every constraint for a finished plan.

    Returns a list of violation strings; empty means the plan is valid.
    Kept separate from the search so tests can validate plans without
    trusting it.
    """
    problems = []
    dsp_used = plan.n_def * plan.n_pu * budget.dsp_per_pu
    if dsp_used > budget.dsp_slices:
        problems.append(f"dsp {dsp_used} > {budget.dsp_slices}")
    mem_used = (plan.n_pu * (profile.max_weight + profile.max_activation_pair)
                + omp_memory_words(profile.omp_n, profile.omp_l))
    if mem_used > budget.memory_words:
        problems.append(f"memory {mem_used} > {budget.memory_words}")
    latency = latency_model(profile, plan.n_pu, plan.n_def, plan.layout,
                            budget)
    if latency > budget.latency_s + 1e-12:
        problems.append(f"latency {latency} > {budget.latency_s}")
    return problems


def plan(budget, profile):
    """Pick the best feasible layout by exhaustive search over n_pu.

    Objective order: most defenders, then most processing units, then
    the parallel layout (never slower than sequential at the same
    shape).  Raises :class:`InfeasiblePlanError` naming the binding
    constraint when nothing fits; bindings are reported in the order
    dsp, memory, latency.
    """
    n_pe = budget.dsp_per_pu // budget.dsp_per_pe
    if n_pe < 1 or budget.dsp_slices < budget.dsp_per_pu:
        raise InfeasiblePlanError(
            "no processing unit fits the DSP budget", binding="dsp")
    t_eff = budget.latency_s - omp_cost(
        profile.omp_n, profile.omp_l, profile.omp_k,
        budget.cycles_per_mac, budget.clock_hz)
    m_eff = budget.memory_words - omp_memory_words(profile.omp_n,
                                                   profile.omp_l)
    max_n_pu = budget.dsp_slices // budget.dsp_per_pu
    mem_per_pu = profile.max_weight + profile.max_activation_pair

    memory_fits = False
    best = None  # (n_def, n_pu, layout_rank) with layout_rank parallel=1
    for n_pu in range(1, max_n_pu + 1):
        if mem_per_pu * n_pu > m_eff:
            continue
        memory_fits = True
        if t_eff <= 0:
            continue
        per = (budget.cycles_per_mac * profile.total_macs
               / (n_pu * n_pe * budget.clock_hz))
        dsp_cap = budget.dsp_slices // (n_pu * budget.dsp_per_pu)
        candidates = []
        # 1e-12 slack mirrors check_plan so boundary budgets agree
        if per <= t_eff + 1e-12:
            candidates.append((dsp_cap, n_pu, 1, "parallel"))
        seq_cap = min(dsp_cap, int((t_eff + 1e-12) / per)) if per > 0 \
            else dsp_cap
        if seq_cap >= 1:
            candidates.append((seq_cap, n_pu, 0, "sequential"))
        for cand in candidates:
            if best is None or cand[:3] > best[:3]:
                best = cand

    if best is None:
        binding = "memory" if not memory_fits else "latency"
        raise InfeasiblePlanError(
            f"no feasible defender layout; {binding} constraint binds",
            binding=binding)

    n_def, n_pu, _, layout = best
    latency = latency_model(profile, n_pu, n_def, layout, budget)
    usage = {
        "dsp_used": n_def * n_pu * budget.dsp_per_pu,
        "dsp_budget": budget.dsp_slices,
        "memory_words_used": (n_pu * mem_per_pu
                              + omp_memory_words(profile.omp_n,
                                                 profile.omp_l)),
        "memory_budget": budget.memory_words,
        "latency_s": latency,
        "latency_budget": budget.latency_s,
        "omp_seconds": omp_cost(profile.omp_n, profile.omp_l, profile.omp_k,
                                budget.cycles_per_mac, budget.clock_hz),
        "omp_words": omp_memory_words(profile.omp_n, profile.omp_l),
    }
    result = DefensePlan(n_def, n_pu, n_pe, layout, latency, usage)
    problems = check_plan(result, budget, profile)
    if problems:
        raise AssertionError(f"planner produced an invalid plan: {problems}")
    return result


def render_plan(plan_obj):
    """Human-readable table for the CLI."""
    u = plan_obj.usage
    rows = [
        ("defenders", str(plan_obj.n_def)),
        ("processing units", str(plan_obj.n_pu)),
        ("PEs per unit", str(plan_obj.n_pe)),
        ("layout", plan_obj.layout),
        ("latency", f"{plan_obj.predicted_latency:.6g} s"
                    f" / {u['latency_budget']:.6g} s"),
        ("dsp", f"{u['dsp_used']} / {u['dsp_budget']}"),
        ("memory", f"{u['memory_words_used']} / {u['memory_budget']} words"),
        ("sparse-recovery share", f"{u['omp_seconds']:.6g} s, "
                                  f"{u['omp_words']} words"),
    ]
    width = max(len(name) for name, _ in rows)
    return "\n".join(f"{name.ljust(width)}  {value}" for name, value in rows)


def save_plan(plan_obj, path):
    with open(path, "w") as fh:
        json.dump(plan_obj.to_dict(), fh, indent=1)


def load_budget(path):
    with open(path) as fh:
        return ResourceBudget.from_dict(json.load(fh))


def save_budget(budget, path):
    with open(path, "w") as fh:
        json.dump(budget.to_dict(), fh, indent=1)
