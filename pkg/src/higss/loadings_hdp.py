"""Pathway-structured prior on a loading column, fit by a franchise sampler.

Sub-pathways are customers in their super-pathway's restaurant; tables
share dishes (mu, phi2) drawn from a discrete-heavy base measure with a
spike atom at (0,0); metabolites either follow their sub-pathway's dish or
are uniform outliers. The collapsed Gibbs sweep updates, in order:
outlier flags, table seats, table dishes, concentration parameters, dish
parameters, and the three mixture weights. All categorical draws happen
in log space.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import betaln, gammaln, ndtr
from scipy.stats import cauchy, invgamma

from .sumstats import PathwayHierarchy
from .util import NumericalError, ValidationError, child_rng, log_categorical

LOG_2PI = math.log(2.0 * math.pi)

CONCENTRATION_GRID = np.concatenate(
    [np.arange(1, 10) / 10.0, np.arange(1, 11, dtype=float)]
)
# discretized Gamma(1,1) prior over the grid
CONCENTRATION_LOG_PRIOR = -CONCENTRATION_GRID - math.log(np.exp(-CONCENTRATION_GRID).sum())


@dataclass(frozen=True)
class BaseMeasureH:
    """Discrete-heavy base measure for dish parameters.

    The mean component mixes a point mass at 0 with five normal scales at
    half-Cauchy(0,1) quantiles (weights proportional to the half-Cauchy
    density there); the variance component is a 50-atom discretized
    inverse gamma at interior quantiles, weighted by its standardized
    density. The spike atom (0,0) carries the remaining base mass.
    """

    ig_shape: float = 2.0
    ig_scale: float = 1.0
    n_phi_atoms: int = 50
    mu_quantiles: tuple = (0.2, 0.4, 0.6, 0.8, 0.9)
    mu_scales: np.ndarray = field(init=False)
    mu_weights: np.ndarray = field(init=False)
    phi2_atoms: np.ndarray = field(init=False)
    phi2_weights: np.ndarray = field(init=False)

    def __post_init__(self):
        q = np.asarray(self.mu_quantiles, dtype=float)
        scales = np.tan(np.pi * q / 2.0)  # half-Cauchy(0,1) quantile function
        dens = 2.0 / (np.pi * (1.0 + scales**2))
        object.__setattr__(self, "mu_scales", scales)
        object.__setattr__(self, "mu_weights", dens / dens.sum())
        probs = np.arange(1, self.n_phi_atoms + 1) / (self.n_phi_atoms + 1.0)
        atoms = invgamma.ppf(probs, a=self.ig_shape, scale=self.ig_scale)
        w = invgamma.pdf(atoms, a=self.ig_shape, scale=self.ig_scale)
        object.__setattr__(self, "phi2_atoms", atoms)
        object.__setattr__(self, "phi2_weights", w / w.sum())
        if np.any(atoms <= 0):
            raise ValidationError("variance atoms must be positive")


@dataclass
class Dish:
    mu: float
    phi2: float
    spike: bool
    v: int  # -1 spike, 0 zero-mean component, 1..V slab scale index
    w: int  # -1 spike, else variance atom index


def _log_norm_sum(x, var):
    """Sum of zero-mean normal log densities with per-element variances."""
    if len(x) == 0:
        return 0.0
    return float(-0.5 * np.sum(x * x / var + np.log(var) + LOG_2PI))


def _dish_loglik(x, s2, dish: Dish) -> float:
    if dish.spike:
        return _log_norm_sum(x, s2)
    return _log_norm_sum(x - dish.mu, dish.phi2 + s2)


def _component_log_weights(x, s2, pi_00, pi_0, base: BaseMeasureH):
    """Log weights of every base-measure component given shared-theta data.

    Order: spike, then (v=0, w) over variance atoms, then (v, w) pairs.
    The slab terms integrate the shared mean in closed form (rank-one
    covariance). Empty data reduces to the prior weights.
    """
    with np.errstate(divide="ignore"):
        l_spike = math.log(pi_00) if pi_00 > 0 else -np.inf
        l_nospike = math.log1p(-pi_00) if pi_00 < 1 else -np.inf
        l_center = math.log(pi_0) if pi_0 > 0 else -np.inf
        l_slab = math.log1p(-pi_0) if pi_0 < 1 else -np.inf
    log_pw = np.log(base.phi2_weights)
    log_wv = np.log(base.mu_weights)
    n_w = len(base.phi2_atoms)
    n_v = len(base.mu_scales)
    out = np.empty(1 + n_w + n_v * n_w)
    if len(x) == 0:
        out[0] = l_spike
        out[1 : 1 + n_w] = l_nospike + l_center + log_pw
        out[1 + n_w :] = (l_nospike + l_slab + log_wv[:, None] + log_pw[None, :]).ravel()
        return out
    d = base.phi2_atoms[:, None] + s2[None, :]  # (W, Mb)
    inv = 1.0 / d
    sum_inv = inv.sum(axis=1)
    sum_xinv = (x[None, :] * inv).sum(axis=1)
    sum_x2inv = (x[None, :] ** 2 * inv).sum(axis=1)
    base_w = -0.5 * (np.log(d).sum(axis=1) + len(x) * LOG_2PI)
    out[0] = l_spike + _log_norm_sum(x, s2)
    out[1 : 1 + n_w] = l_nospike + l_center + log_pw + base_w - 0.5 * sum_x2inv
    lam2 = base.mu_scales**2
    t = 1.0 + lam2[:, None] * sum_inv[None, :]  # (V, W)
    quad = sum_x2inv[None, :] - lam2[:, None] * sum_xinv[None, :] ** 2 / t
    slab = base_w[None, :] - 0.5 * np.log(t) - 0.5 * quad
    out[1 + n_w :] = (
        l_nospike + l_slab + log_wv[:, None] + log_pw[None, :] + slab
    ).ravel()
    return out


def _marginal_h(x, s2, pi_00, pi_0, base: BaseMeasureH) -> float:
    """log of the dish marginal: data integrated over one shared theta ~ H."""
    lw = _component_log_weights(x, s2, pi_00, pi_0, base)
    m = np.max(lw)
    return float(m + np.log(np.sum(np.exp(lw - m))))


def _draw_theta(rng, x, s2, pi_00, pi_0, base: BaseMeasureH) -> Dish:
    """Sample dish parameters from H given the data it will serve."""
    lw = _component_log_weights(x, s2, pi_00, pi_0, base)
    idx = log_categorical(rng, lw)
    n_w = len(base.phi2_atoms)
    if idx == 0:
        return Dish(0.0, 0.0, True, -1, -1)
    if idx <= n_w:
        w = idx - 1
        return Dish(0.0, float(base.phi2_atoms[w]), False, 0, w)
    v, w = divmod(idx - 1 - n_w, n_w)
    lam2 = base.mu_scales[v] ** 2
    var = base.phi2_atoms[w] + s2
    if len(x):
        prec = float(np.sum(1.0 / var) + 1.0 / lam2)
        mean = float(np.sum(x / var) / prec)
    else:
        prec = 1.0 / lam2
        mean = 0.0
    mu = rng.normal(mean, math.sqrt(1.0 / prec))
    return Dish(float(mu), float(base.phi2_atoms[w]), False, v + 1, w)


@dataclass
class LoadingsChainState:
    """Full franchise state for one loading column."""

    x: np.ndarray  # scaled loadings, column norm sqrt(M)
    s2: np.ndarray  # per-metabolite squared standard errors
    groups: list  # metabolite index array per sub-pathway
    restaurant: np.ndarray  # super-pathway index per sub-pathway
    base: BaseMeasureH
    seed: int
    a_out: float
    b_out: float
    sub_table: np.ndarray  # table id per sub-pathway
    tables: dict  # id -> {"restaurant", "dish", "subs"}
    dishes: dict  # id -> Dish
    dish_counts: dict  # id -> number of tables serving it
    outlier: np.ndarray  # (M,) bool
    pi_out: float
    pi_00: float
    pi_0: float
    gamma: float
    alpha0: float
    pins: dict = field(default_factory=dict)
    log_joint: float = float("-inf")
    next_table: int = 0
    next_dish: int = 0

    # -- bookkeeping -------------------------------------------------------

    def active(self, b: int) -> np.ndarray:
        g = self.groups[b]
        return g[~self.outlier[g]]

    def new_dish(self, dish: Dish) -> int:
        did = self.next_dish
        self.next_dish += 1
        self.dishes[did] = dish
        self.dish_counts[did] = 0
        return did

    def seat(self, b: int, tid: int):
        self.tables[tid]["subs"].add(b)
        self.sub_table[b] = tid

    def detach(self, b: int):
        tid = int(self.sub_table[b])
        tab = self.tables[tid]
        tab["subs"].discard(b)
        if not tab["subs"]:
            self.release_dish(tab["dish"])
            del self.tables[tid]
        self.sub_table[b] = -1

    def release_dish(self, did: int):
        self.dish_counts[did] -= 1
        if self.dish_counts[did] == 0:
            del self.dish_counts[did]
            del self.dishes[did]

    def new_table(self, restaurant: int, did: int) -> int:
        tid = self.next_table
        self.next_table += 1
        self.tables[tid] = {"restaurant": restaurant, "dish": did, "subs": set()}
        self.dish_counts[did] += 1
        return tid

    def check_counts(self):
        """Counts must equal recomputation from assignments."""
        for tid, tab in self.tables.items():
            expect = {b for b in range(len(self.groups)) if self.sub_table[b] == tid}
            assert tab["subs"] == expect, "table membership out of sync"
            assert len(tab["subs"]) > 0, "unoccupied table not pruned"
        for did, count in self.dish_counts.items():
            served = sum(1 for t in self.tables.values() if t["dish"] == did)
            assert served == count, "dish count out of sync"
            assert count > 0, "unreferenced dish not pruned"
        assert set(self.dish_counts) == set(self.dishes)


def init_chain(
    loading_column: np.ndarray,
    se_column: np.ndarray,
    hierarchy: PathwayHierarchy,
    base: BaseMeasureH,
    seed: int,
    pins: dict | None = None,
) -> LoadingsChainState:
    """Over-dispersed start: one table per sub-pathway, fresh dishes from H.

    The outlier box is centered at zero and spans 1.25 times the column's
    observed range.
    """
    x = np.asarray(loading_column, dtype=float)
    s2 = np.asarray(se_column, dtype=float) ** 2
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(s2))):
        raise ValidationError("loadings and standard errors must be finite")
    phen_order = [p for mem in hierarchy.members for p in mem]
    groups = hierarchy.column_groups(phen_order)
    if any(len(g) == 0 for g in groups):
        raise ValidationError("empty sub-pathway")
    if len(x) != hierarchy.n_phenotypes:
        raise ValidationError("column length must match the hierarchy")
    width = 1.25 * float(x.max() - x.min())
    width = max(width, 1e-8)
    pins = dict(pins or {})
    rng = child_rng(seed, "init")
    state = LoadingsChainState(
        x=x,
        s2=s2,
        groups=groups,
        restaurant=hierarchy.restaurant_of_sub(),
        base=base,
        seed=seed,
        a_out=-width / 2.0,
        b_out=width / 2.0,
        sub_table=np.full(hierarchy.n_sub, -1, dtype=int),
        tables={},
        dishes={},
        dish_counts={},
        outlier=np.zeros(len(x), dtype=bool),
        pi_out=pins.get("pi_out", rng.beta(1.0 / 5.0, 999.0 / 5.0)),
        pi_00=pins.get("pi_00", rng.uniform()),
        pi_0=pins.get("pi_0", rng.uniform()),
        gamma=pins.get("gamma", CONCENTRATION_GRID[
            log_categorical(rng, CONCENTRATION_LOG_PRIOR)]),
        alpha0=pins.get("alpha0", CONCENTRATION_GRID[
            log_categorical(rng, CONCENTRATION_LOG_PRIOR)]),
        pins=pins,
    )
    for b in range(hierarchy.n_sub):
        xa = x[groups[b]]
        dish = _draw_theta(rng, xa, s2[groups[b]], state.pi_00, state.pi_0, base)
        did = state.new_dish(dish)
        tid = state.new_table(int(state.restaurant[b]), did)
        state.seat(b, tid)
    state.log_joint = compute_log_joint(state)
    return state


# ---------------------------------------------------------------------------
# Sweep steps


def _log_outlier_weight(state, m: int) -> float:
    if state.pi_out <= 0.0:
        return -np.inf
    s = math.sqrt(state.s2[m])
    mass = ndtr((state.b_out - state.x[m]) / s) - ndtr((state.a_out - state.x[m]) / s)
    if mass <= 0.0:
        return -np.inf
    return (
        math.log(state.pi_out)
        - math.log(state.b_out - state.a_out)
        + math.log(mass)
    )


def _single_predictive(state, b: int, m: int) -> float:
    """log CRF predictive of one metabolite with its sub-pathway unseated."""
    x1 = state.x[m : m + 1]
    s1 = state.s2[m : m + 1]
    p = int(state.restaurant[b])
    own = int(state.sub_table[b])
    table_ids = [
        tid
        for tid, tab in sorted(state.tables.items())
        if tab["restaurant"] == p
    ]
    counts, topped = [], []
    for tid in table_ids:
        tab = state.tables[tid]
        n = len(tab["subs"]) - (1 if b in tab["subs"] else 0)
        if n > 0:
            counts.append(n)
            topped.append(_dish_loglik(x1, s1, state.dishes[tab["dish"]]))
    dish_counts = dict(state.dish_counts)
    if own in state.tables and state.tables[own]["subs"] == {b}:
        did = state.tables[own]["dish"]
        dish_counts[did] -= 1
        if dish_counts[did] == 0:
            del dish_counts[did]
    m_tot = sum(dish_counts.values())
    menu_lw = [
        math.log(cnt) - math.log(m_tot + state.gamma)
        + _dish_loglik(x1, s1, state.dishes[did])
        for did, cnt in sorted(dish_counts.items())
    ]
    menu_lw.append(
        math.log(state.gamma)
        - math.log(m_tot + state.gamma)
        + _marginal_h(x1, s1, state.pi_00, state.pi_0, state.base)
    )
    n_p = sum(counts)
    denom = math.log(n_p + state.alpha0)
    terms = [math.log(c) - denom + ll for c, ll in zip(counts, topped)]
    arr = np.array(menu_lw)
    mx = arr.max()
    terms.append(
        math.log(state.alpha0) - denom + mx + math.log(np.exp(arr - mx).sum())
    )
    arr = np.array(terms)
    mx = arr.max()
    return float(mx + math.log(np.exp(arr - mx).sum()))


def _update_outliers(state, rng):
    for b in range(len(state.groups)):
        for m in state.groups[b]:
            lw_out = _log_outlier_weight(state, m)
            if lw_out == -np.inf:
                state.outlier[m] = False
                continue
            others = [i for i in state.active(b) if i != m]
            if others:
                dish = state.dishes[state.tables[int(state.sub_table[b])]["dish"]]
                ll = _dish_loglik(state.x[m : m + 1], state.s2[m : m + 1], dish)
            else:
                ll = _single_predictive(state, b, m)
            lw_in = math.log1p(-state.pi_out) + ll
            state.outlier[m] = log_categorical(rng, np.array([lw_in, lw_out])) == 1


def _menu_log_weights(state, x, s2):
    """Log weights over the global dish menu plus a fresh draw from H."""
    dids = sorted(state.dishes)
    m_tot = sum(state.dish_counts.values())
    lw = np.empty(len(dids) + 1)
    for j, did in enumerate(dids):
        lw[j] = math.log(state.dish_counts[did]) - math.log(m_tot + state.gamma)
        lw[j] += _dish_loglik(x, s2, state.dishes[did])
    lw[-1] = (
        math.log(state.gamma)
        - math.log(m_tot + state.gamma)
        + _marginal_h(x, s2, state.pi_00, state.pi_0, state.base)
    )
    return dids, lw


def _assign_dish_to_new_table(state, rng, p, x, s2) -> int:
    dids = sorted(state.dishes)
    lw = np.empty(len(dids) + 1)
    for j, did in enumerate(dids):
        lw[j] = math.log(state.dish_counts[did]) + _dish_loglik(x, s2, state.dishes[did])
    lw[-1] = math.log(state.gamma) + _marginal_h(
        x, s2, state.pi_00, state.pi_0, state.base
    )
    pick = log_categorical(rng, lw)
    if pick < len(dids):
        did = dids[pick]
    else:
        did = state.new_dish(
            _draw_theta(rng, x, s2, state.pi_00, state.pi_0, state.base)
        )
    return state.new_table(p, did)


def _resample_tables(state, rng):
    for b in range(len(state.groups)):
        state.detach(b)
        idx = state.active(b)
        x, s2 = state.x[idx], state.s2[idx]
        p = int(state.restaurant[b])
        tids = [
            tid
            for tid, tab in sorted(state.tables.items())
            if tab["restaurant"] == p
        ]
        lw = np.empty(len(tids) + 1)
        for j, tid in enumerate(tids):
            tab = state.tables[tid]
            lw[j] = math.log(len(tab["subs"])) + _dish_loglik(
                x, s2, state.dishes[tab["dish"]]
            )
        _, menu_lw = _menu_log_weights(state, x, s2)
        mx = menu_lw.max()
        lw[-1] = math.log(state.alpha0) + mx + math.log(np.exp(menu_lw - mx).sum())
        choice = log_categorical(rng, lw)
        if choice < len(tids):
            state.seat(b, tids[choice])
        else:
            state.seat(b, _assign_dish_to_new_table(state, rng, p, x, s2))


def _resample_dishes(state, rng):
    for tid in sorted(state.tables):
        tab = state.tables[tid]
        idx = np.concatenate(
            [state.active(b) for b in sorted(tab["subs"])]
        ) if tab["subs"] else np.empty(0, dtype=int)
        x, s2 = state.x[idx], state.s2[idx]
        state.release_dish(tab["dish"])
        dids = sorted(state.dishes)
        lw = np.empty(len(dids) + 1)
        for j, did in enumerate(dids):
            lw[j] = math.log(state.dish_counts[did]) + _dish_loglik(
                x, s2, state.dishes[did]
            )
        lw[-1] = math.log(state.gamma) + _marginal_h(
            x, s2, state.pi_00, state.pi_0, state.base
        )
        pick = log_categorical(rng, lw)
        if pick < len(dids):
            did = dids[pick]
        else:
            did = state.new_dish(
                _draw_theta(rng, x, s2, state.pi_00, state.pi_0, state.base)
            )
        tab["dish"] = did
        state.dish_counts[did] += 1


def _update_concentrations(state, rng):
    n_dishes = len(state.dishes)
    t_per_rest = {}
    b_per_rest = {}
    for tab in state.tables.values():
        t_per_rest[tab["restaurant"]] = t_per_rest.get(tab["restaurant"], 0) + 1
    for p in state.restaurant:
        b_per_rest[int(p)] = b_per_rest.get(int(p), 0) + 1
    t_total = sum(t_per_rest.values())
    if "gamma" not in state.pins:
        lw = (
            CONCENTRATION_LOG_PRIOR
            + n_dishes * np.log(CONCENTRATION_GRID)
            + gammaln(CONCENTRATION_GRID)
            - gammaln(CONCENTRATION_GRID + t_total)
        )
        state.gamma = float(CONCENTRATION_GRID[log_categorical(rng, lw)])
    if "alpha0" not in state.pins:
        lw = CONCENTRATION_LOG_PRIOR + t_total * np.log(CONCENTRATION_GRID)
        for p, n_b in b_per_rest.items():
            lw += gammaln(CONCENTRATION_GRID) - gammaln(CONCENTRATION_GRID + n_b)
        state.alpha0 = float(CONCENTRATION_GRID[log_categorical(rng, lw)])


def _dish_members(state, did: int) -> np.ndarray:
    subs = [
        b
        for tid, tab in sorted(state.tables.items())
        if tab["dish"] == did
        for b in sorted(tab["subs"])
    ]
    if not subs:
        return np.empty(0, dtype=int)
    return np.concatenate([state.active(b) for b in sorted(subs)])


def _update_dish_params(state, rng):
    for did in sorted(state.dishes):
        idx = _dish_members(state, did)
        state.dishes[did] = _draw_theta(
            rng, state.x[idx], state.s2[idx], state.pi_00, state.pi_0, state.base
        )


def _update_weights(state, rng):
    m_total = len(state.x)
    n_out = int(state.outlier.sum())
    if "pi_out" not in state.pins:
        state.pi_out = rng.beta(1.0 / 5.0 + n_out, 999.0 / 5.0 + m_total - n_out)
    dishes = list(state.dishes.values())
    n_dishes = len(dishes)
    n_spike = sum(1 for d in dishes if d.spike)
    n_center = sum(1 for d in dishes if not d.spike and d.v == 0)
    if "pi_00" not in state.pins:
        state.pi_00 = rng.beta(1.0 + n_spike, 1.0 + n_dishes - n_spike)
    if "pi_0" not in state.pins:
        state.pi_0 = rng.beta(
            1.0 + n_center, 1.0 + n_dishes - n_spike - n_center
        )


def compute_log_joint(state) -> float:
    """Joint log density of seating, dishes, flags, weights and data."""
    lj = 0.0
    # seating within restaurants
    for p in np.unique(state.restaurant):
        tabs = [t for t in state.tables.values() if t["restaurant"] == int(p)]
        n_b = int(np.sum(state.restaurant == p))
        lj += len(tabs) * math.log(state.alpha0)
        lj += sum(gammaln(len(t["subs"])) for t in tabs)
        lj += gammaln(state.alpha0) - gammaln(state.alpha0 + n_b)
    # franchise dish assignment
    t_total = len(state.tables)
    lj += len(state.dishes) * math.log(state.gamma)
    lj += sum(gammaln(c) for c in state.dish_counts.values())
    lj += gammaln(state.gamma) - gammaln(state.gamma + t_total)
    # dish parameters under H
    for dish in state.dishes.values():
        if dish.spike:
            lj += math.log(state.pi_00) if state.pi_00 > 0 else -np.inf
            continue
        lj += math.log1p(-state.pi_00) if state.pi_00 < 1 else -np.inf
        lj += math.log(state.base.phi2_weights[dish.w])
        if dish.v == 0:
            lj += math.log(state.pi_0) if state.pi_0 > 0 else -np.inf
        else:
            lam = state.base.mu_scales[dish.v - 1]
            lj += math.log1p(-state.pi_0) if state.pi_0 < 1 else -np.inf
            lj += math.log(state.base.mu_weights[dish.v - 1])
            lj += -0.5 * (dish.mu**2 / lam**2 + 2 * math.log(lam) + LOG_2PI)
    # data
    for b in range(len(state.groups)):
        dish = state.dishes[state.tables[int(state.sub_table[b])]["dish"]]
        for m in state.groups[b]:
            if state.outlier[m]:
                lj += _log_outlier_weight(state, m)
            else:
                if state.pi_out > 0:
                    lj += math.log1p(-state.pi_out)
                lj += _dish_loglik(
                    state.x[m : m + 1], state.s2[m : m + 1], dish
                )
    # hyper priors (omit pinned parameters; constants for MAP comparison)
    if "pi_out" not in state.pins:
        lj += _beta_logpdf(state.pi_out, 1.0 / 5.0, 999.0 / 5.0)
    if "pi_00" not in state.pins:
        lj += _beta_logpdf(state.pi_00, 1.0, 1.0)
    if "pi_0" not in state.pins:
        lj += _beta_logpdf(state.pi_0, 1.0, 1.0)
    for name, value in (("gamma", state.gamma), ("alpha0", state.alpha0)):
        if name not in state.pins:
            g = int(np.argmin(np.abs(CONCENTRATION_GRID - value)))
            lj += CONCENTRATION_LOG_PRIOR[g]
    if not np.isfinite(lj):
        raise NumericalError("non-finite log joint")
    return float(lj)


def _beta_logpdf(x, a, b):
    return (a - 1) * math.log(x) + (b - 1) * math.log1p(-x) - betaln(a, b)


def gibbs_sweep(state: LoadingsChainState, rng) -> LoadingsChainState:
    """One full update cycle; mutates and returns the state."""
    _update_outliers(state, rng)
    _resample_tables(state, rng)
    _resample_dishes(state, rng)
    _update_concentrations(state, rng)
    _update_dish_params(state, rng)
    _update_weights(state, rng)
    state.log_joint = compute_log_joint(state)
    return state


# ---------------------------------------------------------------------------
# Chain driver and posterior summaries


@dataclass
class LoadingsPosterior:
    """Thinned draws and running summaries for one loading column."""

    n_samples: int
    mus: np.ndarray  # (n_samples, n_sub)
    phi2s: np.ndarray
    spikes: np.ndarray  # bool
    comp_v: np.ndarray  # int component labels per sub
    comp_w: np.ndarray
    outliers: np.ndarray  # (n_samples, M) bool
    partitions: np.ndarray  # (n_samples, n_sub) canonical dish labels
    log_joints: np.ndarray
    map_partition: np.ndarray
    map_log_joint: float
    x: np.ndarray
    groups: list

    @property
    def spike_prob(self) -> np.ndarray:
        return self.spikes.mean(axis=0)

    @property
    def outlier_prob(self) -> np.ndarray:
        return self.outliers.mean(axis=0)

    @property
    def e_mu2_phi2(self) -> np.ndarray:
        return (self.mus**2 + self.phi2s).mean(axis=0)


def _canonical_partition(state) -> np.ndarray:
    labels = np.array(
        [state.tables[int(t)]["dish"] for t in state.sub_table], dtype=int
    )
    canon = {}
    out = np.empty_like(labels)
    for i, lab in enumerate(labels):
        out[i] = canon.setdefault(lab, len(canon))
    return out


def run_chain(
    state: LoadingsChainState, iterations: int, burn_in: int, thinning: int
) -> LoadingsPosterior:
    """Drive the sampler; per-iteration child seeds make runs reproducible.

    The MAP partition is the highest-log-joint state visited anywhere in
    the run.
    """
    if iterations <= burn_in:
        raise ValidationError("iterations must exceed burn_in")
    n_sub = len(state.groups)
    keep_mu, keep_phi2, keep_spike = [], [], []
    keep_v, keep_w, keep_out, keep_part, keep_lj = [], [], [], [], []
    map_lj, map_part = -np.inf, None
    for it in range(iterations):
        gibbs_sweep(state, child_rng(state.seed, "sweep", it))
        if state.log_joint > map_lj:
            map_lj = state.log_joint
            map_part = _canonical_partition(state)
        if it >= burn_in and (it - burn_in) % thinning == 0:
            dish_of_sub = [
                state.dishes[state.tables[int(t)]["dish"]] for t in state.sub_table
            ]
            keep_mu.append([d.mu for d in dish_of_sub])
            keep_phi2.append([d.phi2 for d in dish_of_sub])
            keep_spike.append([d.spike for d in dish_of_sub])
            keep_v.append([d.v for d in dish_of_sub])
            keep_w.append([d.w for d in dish_of_sub])
            keep_out.append(state.outlier.copy())
            keep_part.append(_canonical_partition(state))
            keep_lj.append(state.log_joint)
    return LoadingsPosterior(
        n_samples=len(keep_lj),
        mus=np.array(keep_mu),
        phi2s=np.array(keep_phi2),
        spikes=np.array(keep_spike, dtype=bool),
        comp_v=np.array(keep_v, dtype=int),
        comp_w=np.array(keep_w, dtype=int),
        outliers=np.array(keep_out, dtype=bool),
        partitions=np.array(keep_part, dtype=int),
        log_joints=np.array(keep_lj),
        map_partition=map_part if map_part is not None else np.zeros(n_sub, int),
        map_log_joint=float(map_lj),
        x=state.x,
        groups=state.groups,
    )


def cluster_scores(posterior: LoadingsPosterior, clustering: dict) -> dict:
    """Enrichment and sign scores per cluster of sub-pathways.

    Enrichment averages E(mu^2 + phi^2 | data) over the cluster; the sign
    score doubles the larger of the two averaged tail probabilities of
    N(mu, phi2) and subtracts 1, with the zero-variance spike contributing
    tail mass 1/2 by convention. The returned sign is negative when the
    cluster's estimated loadings are mostly negative.
    """
    out = {}
    for name, subs in clustering.items():
        subs = np.asarray(list(subs), dtype=int)
        if subs.size == 0:
            raise ValidationError(f"cluster {name!r} is empty")
        mus = posterior.mus[:, subs]
        phis = np.sqrt(posterior.phi2s[:, subs])
        safe = np.where(phis > 0, phis, 1.0)
        p_pos = np.where(
            phis > 0,
            ndtr(mus / safe),
            np.select([mus > 0, mus < 0], [1.0, 0.0], 0.5),
        )
        enrichment = float((mus**2 + phis**2).mean(axis=0).mean())
        mean_pos = p_pos.mean()
        sign_score = max(2 * mean_pos, 2 * (1 - mean_pos)) - 1.0
        members = np.concatenate([posterior.groups[b] for b in subs])
        vals = posterior.x[members]
        sign = -1.0 if (vals < 0).sum() > (vals > 0).sum() else 1.0
        out[name] = {
            "enrichment": enrichment,
            "sign_score": float(sign_score),
            "signed_score": float(sign * sign_score),
            "size": int(subs.size),
        }
    return out


def map_clustering(posterior: LoadingsPosterior) -> dict:
    """Clusters of sub-pathways sharing a dish in the MAP partition."""
    out = {}
    for b, lab in enumerate(posterior.map_partition):
        out.setdefault(int(lab), []).append(b)
    return out


def call_spikes_outliers(posterior: LoadingsPosterior, threshold: float = 0.95):
    """Inclusive-threshold spike and outlier calls from posterior frequencies."""
    if posterior.n_samples == 0:
        raise ValidationError("posterior holds no samples")
    spikes = np.nonzero(posterior.spike_prob >= threshold)[0]
    outliers = np.nonzero(posterior.outlier_prob >= threshold)[0]
    return spikes, outliers
