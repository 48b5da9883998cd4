"""Discrete-grid prior over direct-effect hyperparameters and its sampler.

Each sub-pathway is a restaurant whose customers are metabolites; dishes
are spike probabilities drawn from a discrete base measure (half its mass
on zero), and a single global slab-inflation factor phi^2 is shared by
all metabolites. Because every parameter lives on a finite grid, the full
data log-likelihood is precomputed once as an (M, n_pi, n_phi) table and
every sweep is table lookups.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln, ndtr

from . import kernels
from .loadings_hdp import CONCENTRATION_GRID, CONCENTRATION_LOG_PRIOR
from .util import NumericalError, ValidationError, child_rng, log_categorical

LOG_2PI = math.log(2.0 * math.pi)


# ---------------------------------------------------------------------------
# Anchor maximum likelihood and grids


def _marginal_loglik(delta: np.ndarray, sigma2: np.ndarray, pi_m: np.ndarray,
                     phi2: float) -> float:
    """Spike/slab marginal log-likelihood of the residual matrix."""
    z2 = delta**2 / sigma2[None, :]
    base = -0.5 * (z2 + np.log(sigma2)[None, :] + LOG_2PI)
    w = 0.5 * z2 * phi2 / (1.0 + phi2) - 0.5 * math.log1p(phi2)
    with np.errstate(divide="ignore"):
        lp = np.log(pi_m)[None, :]
        l1mp = np.log1p(-pi_m)[None, :]
    mixed = np.where(
        pi_m[None, :] > 0.0, np.logaddexp(l1mp, lp + w), 0.0
    )
    return float((base + mixed).sum())


def anchor_mle(
    delta_hat: np.ndarray,
    sigma2_hat: np.ndarray,
    max_outer: int = 200,
    rel_tol: float = 1e-6,
):
    """Block-coordinate MLE of per-metabolite spike weights and shared phi^2.

    EM updates each pi_m given phi^2; golden-section over log(phi^2) given
    the pi's, accepted only when it does not decrease the likelihood. The
    x'x scaling cancels in the standardized marginal.

    Returns (pi_hat (M,), phi2_hat, degenerate_flag).
    """
    delta = np.asarray(delta_hat, dtype=float)
    sigma2 = np.asarray(sigma2_hat, dtype=float)
    s, m = delta.shape
    if np.allclose(delta, 0.0):
        return np.zeros(m), 1.0, True
    pi_m = np.full(m, 0.01)
    phi2 = 10.0
    golden = (math.sqrt(5.0) - 1.0) / 2.0
    prev = -np.inf
    for _ in range(max_outer):
        # EM in pi given phi2
        z2 = delta**2 / sigma2[None, :]
        w = 0.5 * z2 * phi2 / (1.0 + phi2) - 0.5 * math.log1p(phi2)
        with np.errstate(divide="ignore"):
            log_odds = (np.log(pi_m) - np.log1p(-pi_m))[None, :] + w
        r = 1.0 / (1.0 + np.exp(-log_odds))
        pi_m = np.clip(r.mean(axis=0), 0.0, 1.0 - 1e-12)
        # golden-section in log(phi2) given pi
        lo, hi = math.log(1e-3), math.log(1e4)
        c = hi - golden * (hi - lo)
        d = lo + golden * (hi - lo)
        cache = {}

        def ll_at(lv):
            if lv not in cache:
                cache[lv] = _marginal_loglik(delta, sigma2, pi_m, math.exp(lv))
            return cache[lv]

        for _ in range(40):
            if ll_at(c) > ll_at(d):
                hi = d
            else:
                lo = c
            c = hi - golden * (hi - lo)
            d = lo + golden * (hi - lo)
        best = max(cache, key=cache.get)
        candidate = math.exp(best)
        if _marginal_loglik(delta, sigma2, pi_m, candidate) >= _marginal_loglik(
            delta, sigma2, pi_m, phi2
        ):
            phi2 = candidate
        obj = _marginal_loglik(delta, sigma2, pi_m, phi2)
        if np.isfinite(prev) and abs(obj - prev) <= rel_tol * abs(prev):
            break
        prev = obj
    return pi_m, float(phi2), False


@dataclass(frozen=True)
class DirectGrids:
    """Finite supports and base weights for the spike weights and phi^2."""

    pi_atoms: np.ndarray  # zero atom first, then log-spaced values
    phi2_atoms: np.ndarray
    pi_log_weights: np.ndarray = field(init=False)
    phi2_log_weights: np.ndarray = field(init=False)
    degenerate_anchor: bool = False

    def __post_init__(self):
        pi = np.asarray(self.pi_atoms, dtype=float)
        phi = np.asarray(self.phi2_atoms, dtype=float)
        if pi[0] != 0.0 or np.any(pi[1:] <= 0.0) or np.any(np.diff(pi) <= 0):
            raise ValidationError("pi atoms must be {0} then increasing positives")
        if np.any(pi >= 1.0):
            raise ValidationError("pi atoms must stay below 1")
        if np.any(phi <= 0.0) or np.any(np.diff(phi) <= 0):
            raise ValidationError("phi2 atoms must be increasing positives")
        object.__setattr__(self, "pi_atoms", pi)
        object.__setattr__(self, "phi2_atoms", phi)
        n = len(pi) - 1
        lw = np.full(len(pi), math.log(0.5) - math.log(n))
        lw[0] = math.log(0.5)
        object.__setattr__(self, "pi_log_weights", lw)
        object.__setattr__(
            self, "phi2_log_weights", np.full(len(phi), -math.log(len(phi)))
        )


def build_grids(
    pi_hat: np.ndarray, phi2_hat: float, s_snps: int, n_atoms: int = 100
) -> DirectGrids:
    """Grids around the anchor: log-spaced spike weights, linear phi^2.

    The smallest positive spike-weight atom is 10/S; the largest is 1.5x
    the 0.99 quantile of the anchor estimates (100/S with a flag when the
    anchor is all-zero). phi^2 spans [phi2_hat/2, 2*phi2_hat].
    """
    lo = 10.0 / s_snps
    q99 = float(np.quantile(np.asarray(pi_hat, dtype=float), 0.99))
    hi = 1.5 * q99
    degenerate = False
    if hi <= lo:
        hi = 100.0 / s_snps
        degenerate = True
    hi = min(hi, 0.99)
    pi = np.concatenate([[0.0], np.geomspace(lo, hi, n_atoms)])
    phi = np.linspace(phi2_hat / 2.0, 2.0 * phi2_hat, n_atoms)
    return DirectGrids(pi, phi, degenerate_anchor=degenerate)


def precompute_loglik(
    delta_hat: np.ndarray, sigma2_hat: np.ndarray, grids: DirectGrids
) -> np.ndarray:
    """log P(residual column m | pi_i, phi2_j) for the whole grid, once."""
    table = kernels.delta_loglik_table(
        delta_hat, sigma2_hat, grids.pi_atoms, grids.phi2_atoms
    )
    if not np.all(np.isfinite(table)):
        raise NumericalError("non-finite entries in the likelihood table")
    return table


# ---------------------------------------------------------------------------
# Chain state and sweep


@dataclass
class DirectChainState:
    """Franchise over metabolites with dish values on the pi grid."""

    grids: DirectGrids
    loglik: np.ndarray  # (M, n_pi, n_phi)
    groups: list  # metabolite indices per sub-pathway (restaurant)
    seed: int
    met_table: np.ndarray  # table id per metabolite
    tables: dict  # id -> {"restaurant", "dish", "members": set}
    dishes: dict  # id -> pi atom index
    dish_counts: dict
    phi_idx: int
    gamma: float
    alpha0: float
    pins: dict = field(default_factory=dict)
    log_joint: float = float("-inf")
    next_table: int = 0
    next_dish: int = 0

    def pi_of_metabolite(self) -> np.ndarray:
        """Current spike-weight atom index per metabolite."""
        out = np.empty(len(self.met_table), dtype=int)
        for m, tid in enumerate(self.met_table):
            out[m] = self.dishes[self.tables[int(tid)]["dish"]]
        return out

    def new_dish(self, atom: int) -> int:
        did = self.next_dish
        self.next_dish += 1
        self.dishes[did] = int(atom)
        self.dish_counts[did] = 0
        return did

    def release_dish(self, did: int):
        self.dish_counts[did] -= 1
        if self.dish_counts[did] == 0:
            del self.dish_counts[did]
            del self.dishes[did]

    def detach(self, m: int):
        tid = int(self.met_table[m])
        tab = self.tables[tid]
        tab["members"].discard(m)
        if not tab["members"]:
            self.release_dish(tab["dish"])
            del self.tables[tid]
        self.met_table[m] = -1

    def new_table(self, restaurant: int, did: int) -> int:
        tid = self.next_table
        self.next_table += 1
        self.tables[tid] = {"restaurant": restaurant, "dish": did, "members": set()}
        self.dish_counts[did] += 1
        return tid

    def seat(self, m: int, tid: int):
        self.tables[tid]["members"].add(m)
        self.met_table[m] = tid


def init_direct_chain(
    loglik: np.ndarray,
    groups: list,
    grids: DirectGrids,
    seed: int,
    pins: dict | None = None,
) -> DirectChainState:
    """One table per metabolite to start; dishes drawn from the base posterior."""
    pins = dict(pins or {})
    rng = child_rng(seed, "init")
    n_phi = len(grids.phi2_atoms)
    state = DirectChainState(
        grids=grids,
        loglik=loglik,
        groups=[np.asarray(g, dtype=int) for g in groups],
        seed=seed,
        met_table=np.full(loglik.shape[0], -1, dtype=int),
        tables={},
        dishes={},
        dish_counts={},
        phi_idx=int(pins.get("phi_idx", rng.integers(n_phi))),
        gamma=pins.get(
            "gamma", CONCENTRATION_GRID[log_categorical(rng, CONCENTRATION_LOG_PRIOR)]
        ),
        alpha0=pins.get(
            "alpha0", CONCENTRATION_GRID[log_categorical(rng, CONCENTRATION_LOG_PRIOR)]
        ),
        pins=pins,
    )
    for p, grp in enumerate(state.groups):
        for m in grp:
            lw = grids.pi_log_weights + loglik[m, :, state.phi_idx]
            did = state.new_dish(log_categorical(rng, lw))
            state.seat(int(m), state.new_table(p, did))
    state.log_joint = compute_direct_log_joint(state)
    return state


def _menu_weights_direct(state, ll_m: np.ndarray):
    """Dish-menu log weights for data with per-atom loglik vector ll_m."""
    dids = sorted(state.dishes)
    m_tot = sum(state.dish_counts.values())
    lw = np.empty(len(dids) + 1)
    for j, did in enumerate(dids):
        lw[j] = (
            math.log(state.dish_counts[did])
            - math.log(m_tot + state.gamma)
            + ll_m[state.dishes[did]]
        )
    fresh = state.grids.pi_log_weights + ll_m
    mx = fresh.max()
    lw[-1] = (
        math.log(state.gamma)
        - math.log(m_tot + state.gamma)
        + mx
        + math.log(np.exp(fresh - mx).sum())
    )
    return dids, lw


def _resample_metabolites(state, rng):
    j = state.phi_idx
    for p, grp in enumerate(state.groups):
        for m in grp:
            m = int(m)
            state.detach(m)
            ll_m = state.loglik[m, :, j]
            tids = [
                tid
                for tid, tab in sorted(state.tables.items())
                if tab["restaurant"] == p
            ]
            lw = np.empty(len(tids) + 1)
            for i, tid in enumerate(tids):
                tab = state.tables[tid]
                lw[i] = math.log(len(tab["members"])) + ll_m[
                    state.dishes[tab["dish"]]
                ]
            dids, menu = _menu_weights_direct(state, ll_m)
            mx = menu.max()
            lw[-1] = math.log(state.alpha0) + mx + math.log(np.exp(menu - mx).sum())
            choice = log_categorical(rng, lw)
            if choice < len(tids):
                state.seat(m, tids[choice])
                continue
            # new table: choose its dish, possibly a fresh atom
            pick_lw = np.empty(len(dids) + 1)
            for i, did in enumerate(dids):
                pick_lw[i] = math.log(state.dish_counts[did]) + ll_m[state.dishes[did]]
            fresh = state.grids.pi_log_weights + ll_m
            mx = fresh.max()
            pick_lw[-1] = (
                math.log(state.gamma) + mx + math.log(np.exp(fresh - mx).sum())
            )
            pick = log_categorical(rng, pick_lw)
            if pick < len(dids):
                did = dids[pick]
            else:
                did = state.new_dish(log_categorical(rng, fresh))
            state.seat(m, state.new_table(p, did))


def _table_loglik_by_atom(state, tab) -> np.ndarray:
    j = state.phi_idx
    members = sorted(tab["members"])
    return state.loglik[members, :, j].sum(axis=0)


def _resample_table_dishes(state, rng):
    for tid in sorted(state.tables):
        tab = state.tables[tid]
        ll = _table_loglik_by_atom(state, tab)
        state.release_dish(tab["dish"])
        dids = sorted(state.dishes)
        lw = np.empty(len(dids) + 1)
        for i, did in enumerate(dids):
            lw[i] = math.log(state.dish_counts[did]) + ll[state.dishes[did]]
        fresh = state.grids.pi_log_weights + ll
        mx = fresh.max()
        lw[-1] = math.log(state.gamma) + mx + math.log(np.exp(fresh - mx).sum())
        pick = log_categorical(rng, lw)
        if pick < len(dids):
            did = dids[pick]
        else:
            did = state.new_dish(log_categorical(rng, fresh))
        tab["dish"] = did
        state.dish_counts[did] += 1


def _refresh_dish_atoms(state, rng):
    j = state.phi_idx
    for did in sorted(state.dishes):
        members = [
            m
            for tab in state.tables.values()
            if tab["dish"] == did
            for m in tab["members"]
        ]
        ll = state.loglik[sorted(members), :, j].sum(axis=0)
        state.dishes[did] = log_categorical(rng, state.grids.pi_log_weights + ll)


def _update_direct_concentrations(state, rng):
    n_dishes = len(state.dishes)
    t_total = len(state.tables)
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
        for grp in state.groups:
            lw += gammaln(CONCENTRATION_GRID) - gammaln(
                CONCENTRATION_GRID + len(grp)
            )
        state.alpha0 = float(CONCENTRATION_GRID[log_categorical(rng, lw)])


def phi2_conditional_weights(state) -> np.ndarray:
    """Normalized full-conditional over the phi^2 atoms; sums to one."""
    pi_idx = state.pi_of_metabolite()
    lw = state.grids.phi2_log_weights + state.loglik[
        np.arange(len(pi_idx)), pi_idx, :
    ].sum(axis=0)
    w = np.exp(lw - lw.max())
    return w / w.sum()


def _update_phi2(state, rng):
    if "phi_idx" in state.pins:
        return
    w = phi2_conditional_weights(state)
    state.phi_idx = int(rng.choice(len(w), p=w))


def compute_direct_log_joint(state) -> float:
    lj = 0.0
    for p, grp in enumerate(state.groups):
        tabs = [t for t in state.tables.values() if t["restaurant"] == p]
        lj += len(tabs) * math.log(state.alpha0)
        lj += sum(gammaln(len(t["members"])) for t in tabs)
        lj += gammaln(state.alpha0) - gammaln(state.alpha0 + len(grp))
    lj += len(state.dishes) * math.log(state.gamma)
    lj += sum(gammaln(c) for c in state.dish_counts.values())
    lj += gammaln(state.gamma) - gammaln(state.gamma + len(state.tables))
    for did in state.dishes:
        lj += state.grids.pi_log_weights[state.dishes[did]]
    lj += state.grids.phi2_log_weights[state.phi_idx]
    pi_idx = state.pi_of_metabolite()
    lj += float(
        state.loglik[np.arange(len(pi_idx)), pi_idx, state.phi_idx].sum()
    )
    for name, value in (("gamma", state.gamma), ("alpha0", state.alpha0)):
        if name not in state.pins:
            g = int(np.argmin(np.abs(CONCENTRATION_GRID - value)))
            lj += CONCENTRATION_LOG_PRIOR[g]
    if not np.isfinite(lj):
        raise NumericalError("non-finite log joint")
    return float(lj)


def gibbs_sweep_direct(state: DirectChainState, rng) -> DirectChainState:
    """Tables, dishes, dish atoms, concentrations, then the global phi^2."""
    _resample_metabolites(state, rng)
    _resample_table_dishes(state, rng)
    _refresh_dish_atoms(state, rng)
    _update_direct_concentrations(state, rng)
    _update_phi2(state, rng)
    state.log_joint = compute_direct_log_joint(state)
    return state


# ---------------------------------------------------------------------------
# Chain driver, posterior summaries, DHS


@dataclass
class DirectPosterior:
    """Retained hyperparameter draws plus streaming entry-wise summaries."""

    n_samples: int
    pi_values: np.ndarray  # (n_samples, M) spike-weight values per metabolite
    phi2_values: np.ndarray  # (n_samples,)
    dhs_ticks: np.ndarray  # (n_samples, n_sub) win=1 / tie=0.5 / loss=0
    log_joints: np.ndarray
    inclusion: np.ndarray  # (S, M) posterior inclusion probability
    mean: np.ndarray  # (S, M) posterior mean of the standardized effect
    lfsr: np.ndarray  # (S, M)

    @property
    def dhs(self) -> np.ndarray:
        return self.dhs_ticks.mean(axis=0)


def _crf_predictive_draw(state, rng, restaurant: int | None):
    """Atom index for one hypothetical new draw; None means the top level."""

    def top_level():
        m_tot = sum(state.dish_counts.values())
        dids = sorted(state.dishes)
        weights = np.array(
            [state.dish_counts[d] for d in dids] + [state.gamma], dtype=float
        )
        pick = rng.choice(len(weights), p=weights / weights.sum())
        if pick < len(dids):
            return state.dishes[dids[pick]]
        w = np.exp(state.grids.pi_log_weights)
        return int(rng.choice(len(w), p=w / w.sum()))

    if restaurant is None:
        return top_level()
    tids = [
        tid for tid, tab in sorted(state.tables.items())
        if tab["restaurant"] == restaurant
    ]
    counts = np.array(
        [len(state.tables[t]["members"]) for t in tids] + [state.alpha0], dtype=float
    )
    pick = rng.choice(len(counts), p=counts / counts.sum())
    if pick < len(tids):
        return state.dishes[state.tables[tids[pick]]["dish"]]
    return top_level()


def run_direct_chain(
    state: DirectChainState,
    delta_hat: np.ndarray,
    sigma2_hat: np.ndarray,
    iterations: int,
    burn_in: int,
    thinning: int,
) -> DirectPosterior:
    """Drive the sampler, streaming the entry-wise posterior in O(S*M).

    Each retained sweep contributes one conjugate spike/slab posterior per
    residual entry and one heritability comparison per sub-pathway: a draw
    from the sub-pathway's predictive against a shared draw from the
    top-level predictive, ties split evenly.
    """
    if iterations <= burn_in:
        raise ValidationError("iterations must exceed burn_in")
    delta = np.asarray(delta_hat, dtype=float)
    sigma2 = np.asarray(sigma2_hat, dtype=float)
    s, m = delta.shape
    acc = tuple(np.zeros((s, m)) for _ in range(4))
    keep_pi, keep_phi, keep_dhs, keep_lj = [], [], [], []
    atoms = state.grids.pi_atoms
    for it in range(iterations):
        rng = child_rng(state.seed, "sweep", it)
        gibbs_sweep_direct(state, rng)
        if it >= burn_in and (it - burn_in) % thinning == 0:
            pi_m = atoms[state.pi_of_metabolite()]
            phi2 = float(state.grids.phi2_atoms[state.phi_idx])
            kernels.accumulate_delta_posterior(delta, sigma2, pi_m, phi2, acc)
            rng_dhs = child_rng(state.seed, "dhs", it)
            f0 = atoms[_crf_predictive_draw(state, rng_dhs, None)]
            ticks = np.empty(len(state.groups))
            for p in range(len(state.groups)):
                fp = atoms[_crf_predictive_draw(state, rng_dhs, p)]
                ticks[p] = 1.0 if fp > f0 else (0.5 if fp == f0 else 0.0)
            keep_dhs.append(ticks)
            keep_pi.append(pi_m)
            keep_phi.append(phi2)
            keep_lj.append(state.log_joint)
    n_kept = len(keep_lj)
    incl, mean, ppos, pneg = (a / n_kept for a in acc)
    lfsr = 1.0 - np.maximum(ppos, pneg)
    return DirectPosterior(
        n_samples=n_kept,
        pi_values=np.array(keep_pi),
        phi2_values=np.array(keep_phi),
        dhs_ticks=np.array(keep_dhs),
        log_joints=np.array(keep_lj),
        inclusion=incl,
        mean=mean,
        lfsr=lfsr,
    )


def single_theta_delta_posterior(
    delta_hat: np.ndarray, sigma2_hat: np.ndarray, pi_m: np.ndarray, phi2: float
):
    """Closed-form entry-wise posterior under one hyperparameter setting.

    Returns (inclusion, mean of the standardized effect, lfsr).
    """
    s, m = delta_hat.shape
    acc = tuple(np.zeros((s, m)) for _ in range(4))
    kernels.accumulate_delta_posterior(
        np.asarray(delta_hat, float), np.asarray(sigma2_hat, float),
        np.asarray(pi_m, float), float(phi2), acc,
    )
    incl, mean, ppos, pneg = acc
    return incl, mean, 1.0 - np.maximum(ppos, pneg)


def heritability(pi: np.ndarray, phi2: float) -> np.ndarray:
    """Closed-form per-metabolite heritability given the hyperparameters."""
    pi = np.asarray(pi, dtype=float)
    return phi2 * pi / (phi2 * pi + 1.0)
