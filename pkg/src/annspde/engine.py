"""Batched integrator for the coupled annihilating cluster system.

Evolves a batch of independent replicates of the full system (per-cluster
live and ghost fields, hard or soft killing) with everything vectorized
across the batch.  A replicate's trajectory is a pure function of
(root_seed, replicate id): every replicate owns counter-based streams and
consumes draws in a fixed order, so results do not depend on batch grouping.

Step order (duration dt):
    1. immigration: each grid time in (t, t+dt] adds its kernel seed to the
       newborn cluster's live field, immediately followed by an annihilation
       pass whose killed mass is recorded as the K jump for that time (it is
       bounded by the seed mass, which is exactly eps);
    2. aggregate snapshot, then live-field noise: cluster i of the U side
       gains U^(gamma-1/2) sqrt(U^i) xi per cell (0 conventions exact), then
       clamps at 0; V symmetric;
    3. ghost-field noise with coefficient
       sqrt((Ut+U)^(2 gamma) - U^(2 gamma)) sqrt(Ut^i/Ut), 0/0 = 0;
    4. one Crank-Nicolson heat step on every nonzero field and aggregate;
    5. killing: hard mode removes min(U, V) per cell, apportioned across
       clusters proportionally to their share of the aggregate and moved to
       the cluster's ghost field; soft mode uses the capped drift
       min(rate * U^i * V * dt, U^i);
    6. tracker update; time += dt.

Exact discrete invariants maintained and checked every step: pointwise
U * V = 0 after every hard kill; the per-side killed-mass decompositions sum
to the same accumulator; K jumps at immigration times are <= eps; live+ghost
transfer conserves each cluster's dominating mass; all fields nonnegative.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field

import numpy as np

from .lattice import heat_operator
from .noise import BlockNoiseSource, NoiseStream
from .schedule import ImmigrationSchedule
from .spde import SpdeConfig, nonneg_increment

UNDECIDED = -1
DEAD = 0
HIT = 1

# Per-replicate stream channels (see noise.derive_streams).
CH_NOISE = 0
CH_DECISION = 1
CH_CENTERS = 2


class ReplicateError(RuntimeError):
    pass


@dataclass
class Mode:
    kind: str  # "hard" | "soft"
    rate: float = 0.0

    @staticmethod
    def hard() -> "Mode":
        return Mode("hard")

    @staticmethod
    def soft(rate: float) -> "Mode":
        if rate < 0:
            raise ValueError("soft-killing rate must be >= 0")
        return Mode("soft", float(rate))


def beta_of(gamma: float) -> float:
    """Escape-rate exponent (3/2 - gamma) / (2 (1 - gamma))."""
    return (1.5 - gamma) / (2.0 * (1.0 - gamma))


def bar_delta_of(gamma: float) -> float:
    """Killing-growth exponent window (1/3)(3/2 - 2 gamma)."""
    return (1.5 - 2.0 * gamma) / 3.0


def default_deltas(gamma: float) -> tuple[float, float]:
    """(delta0, delta1): delta1 = min((3/2 - beta)/4, 0.1), delta0 = delta1/2
    capped at bar_delta."""
    beta = beta_of(gamma)
    delta1 = min((1.5 - beta) / 4.0, 0.1)
    bd = bar_delta_of(gamma)
    delta0 = min(delta1 / 2.0, bd) if bd > 0 else delta1 / 2.0
    return delta0, delta1


def default_R(gamma: float, t: float) -> float:
    """Sup-norm localization threshold R = t^(-2 - eps0) with eps0 chosen so
    3 - 4 gamma - eps0 (2 gamma - 1) > 0."""
    if gamma <= 0.5:
        eps0 = 0.5
    else:
        eps0 = min(0.5, 0.5 * (3.0 - 4.0 * gamma) / (2.0 * gamma - 1.0))
    t = min(max(t, 1e-6), 2.0)
    return t ** (-2.0 - eps0)


@dataclass
class TrackerOptions:
    full: bool = False  # H, theta, rho, B, T_R detectors on
    support_tol: float = 1e-7  # absolute density threshold for support
    r_sample_times: tuple = ()  # absolute times to sample the ghost ratio
    focus: int = 0  # U-cluster index for ratio diagnostics
    delta0: float | None = None
    delta1: float | None = None
    R: float | None = None


@dataclass
class TrackerState:
    """Per-replicate stopping-time and event records for the U-side clusters.

    Times tau_bar, tau_zero, H, theta, rho, v and the B violation are relative
    to the cluster's birth time; T_R is absolute; np.inf means "never".
    a_event: True if the dominating cluster mass reached 1, False if it died,
    None if undecided at the horizon (stopped_mass carries the martingale
    value in that case).
    """

    replicate: int
    epsilon: float
    gamma: float
    tau_bar: np.ndarray
    tau_zero: np.ndarray
    a_event: list
    stopped_mass: np.ndarray
    H: np.ndarray
    theta: np.ndarray
    rho: np.ndarray
    B_violation: np.ndarray
    T_R: float
    v: np.ndarray
    r_samples: np.ndarray
    params: dict = dc_field(default_factory=dict)


def _v_times(tau_bar, H, theta, rho, T_R, s_times):
    tr_rel = np.maximum(np.asarray(T_R, dtype=float) - s_times, 0.0)
    return np.minimum.reduce([tau_bar, H, theta, rho, tr_rel])


class BatchDualEngine:
    def __init__(
        self,
        cfg: SpdeConfig,
        schedule: ImmigrationSchedule,
        mode: Mode,
        root_seed: int,
        replicates,
        tracker: TrackerOptions | None = None,
        redraw_centers: bool = True,
    ):
        grid = cfg.grid
        if cfg.boundary != "neumann":
            raise ValueError("dual-system engine requires Neumann boundaries")
        if grid.x_min > -2.0 + 1e-9 or grid.x_max < 3.0 - 1e-9:
            raise ValueError(
                "insufficient grid coverage: need [-margin, 1+margin] with "
                f"margin >= 2, got [{grid.x_min}, {grid.x_max}]"
            )
        if cfg.dt > schedule.epsilon / 2.0 + 1e-12:
            raise ValueError(
                f"dt={cfg.dt:g} coarser than the immigration spacing eps/2="
                f"{schedule.epsilon / 2.0:g}"
            )
        self.cfg = cfg
        self.schedule = schedule
        self.mode = mode
        self.root_seed = int(root_seed)
        self.replicates = np.asarray(list(replicates), dtype=np.int64)
        self.tracker = tracker or TrackerOptions()
        if self.tracker.delta0 is None or self.tracker.delta1 is None:
            d0, d1 = default_deltas(cfg.gamma)
            self.tracker.delta0 = d0 if self.tracker.delta0 is None else self.tracker.delta0
            self.tracker.delta1 = d1 if self.tracker.delta1 is None else self.tracker.delta1
        if self.tracker.R is None:
            self.tracker.R = default_R(cfg.gamma, min(cfg.T, 1.0))

        R = self.replicates.size
        N = schedule.n_seeds
        X = grid.n_cells
        self.R, self.N, self.X = R, N, X
        self.time = 0.0
        self.step_count = 0

        shape_f = (R, N, X)
        self.live_u = np.zeros(shape_f)
        self.ghost_u = np.zeros(shape_f)
        self.live_v = np.zeros(shape_f)
        self.ghost_v = np.zeros(shape_f)
        self.agg_u = np.zeros((R, X))
        self.agg_v = np.zeros((R, X))
        self.agg_tu = np.zeros((R, X))
        self.agg_tv = np.zeros((R, X))

        self.fmax_lu = np.zeros((R, N))
        self.fmax_gu = np.zeros((R, N))
        self.fmax_lv = np.zeros((R, N))
        self.fmax_gv = np.zeros((R, N))
        self.m_live_u = np.zeros((R, N))
        self.m_ghost_u = np.zeros((R, N))
        self.m_live_v = np.zeros((R, N))
        self.m_ghost_v = np.zeros((R, N))
        self.born_u = np.zeros((R, N), dtype=bool)
        self.born_v = np.zeros((R, N), dtype=bool)

        self.killed_u = np.zeros((R, N))
        self.killed_v = np.zeros((R, N))
        self.K_total = np.zeros(R)
        self.K_density = np.zeros((R, X))
        self.jumps = np.zeros((R, 2 * N))
        self.uv_integral = np.zeros(R)

        self.tau_bar = np.full((R, N), np.inf)
        self.tau_zero = np.full((R, N), np.inf)
        self.a_flag = np.full((R, N), UNDECIDED, dtype=np.int8)
        self.a_completed = np.zeros((R, N), dtype=bool)
        self.stopped_mass = np.zeros((R, N))
        self.prev_bar = np.zeros((R, N))
        self.H_rel = np.full((R, N), np.inf)
        self.theta_rel = np.full((R, N), np.inf)
        self.rho_rel = np.full((R, N), np.inf)
        self.B_viol = np.full((R, N), np.inf)
        self.prev_killed = np.zeros((R, N))
        self.TR_abs = np.full(R, np.inf)
        self.r_samples = np.full((R, len(self.tracker.r_sample_times)), np.nan)
        self._ratio_frozen = np.full(R, np.nan)

        self.max_U_mass = np.zeros(R)
        self.failed = np.zeros(R, dtype=bool)
        self.failures: dict[int, str] = {}

        # running invariant diagnostics (hard mode)
        self.max_uv_product = 0.0
        self.max_k_imbalance = 0.0
        self.max_decomp_err = 0.0
        self.max_jump_excess = 0.0
        self.min_field_value = 0.0

        # per-replicate streams: block noise, decisions, centers
        self._sources = [
            BlockNoiseSource(NoiseStream(self.root_seed, int(r), CH_NOISE))
            for r in self.replicates
        ]
        self._decision = [
            NoiseStream(self.root_seed, int(r), CH_DECISION) for r in self.replicates
        ]
        if redraw_centers:
            self.centers_u = np.empty((R, N))
            self.centers_v = np.empty((R, N))
            for k, r in enumerate(self.replicates):
                cs = NoiseStream(self.root_seed, int(r), CH_CENTERS)
                self.centers_u[k] = cs.uniforms(N)
                self.centers_v[k] = cs.uniforms(N)
        else:
            self.centers_u = np.tile(schedule.u_centers, (R, 1))
            self.centers_v = np.tile(schedule.v_centers, (R, 1))

        # immigration events sorted by time: (time, k_index, side, cluster)
        self._events = []
        for i in range(N):
            self._events.append((schedule.u_times[i], 2 * i, "U", i))
            self._events.append((schedule.v_times[i], 2 * i + 1, "V", i))
        self._events.sort()
        self._next_event = 0

        self._op = heat_operator(grid, cfg.dt, "neumann")
        self._noise_scale = math.sqrt(cfg.dt / grid.dx)
        self._centers_x = grid.centers
        self._sqrt_eps = math.sqrt(schedule.epsilon)

    # ---------------------------------------------------------------- helpers

    def _active_mask(self) -> np.ndarray:
        has_mass = (
            (self.fmax_lu > 0).any(axis=1)
            | (self.fmax_gu > 0).any(axis=1)
            | (self.fmax_lv > 0).any(axis=1)
            | (self.fmax_gv > 0).any(axis=1)
        )
        future = self._next_event < len(self._events)
        return ~self.failed & (has_mass | future)

    def _kernel_rows(self, centers: np.ndarray) -> np.ndarray:
        """Seed kernel sampled per replicate center, each row of mass exactly
        eps."""
        eps = self.schedule.epsilon
        z = (self._centers_x[None, :] - centers[:, None]) / self._sqrt_eps
        rows = self._sqrt_eps * 0.75 * np.maximum(1.0 - z * z, 0.0)
        totals = rows.sum(axis=1) * self.cfg.grid.dx
        if np.any(totals <= 0.0):
            raise ReplicateError("seed kernel support contains no grid cell")
        rows *= (eps / totals)[:, None]
        return rows

    def _hard_kill(self, rows_idx: np.ndarray, jump_slot: int | None):
        """Annihilate min(U, V) on the given replicate rows; apportion to
        clusters, move killed mass to ghosts, update aggregates and
        accounting.

        The two live aggregates are rebuilt here from the cluster rows, which
        keeps them exactly consistent with the decomposition (no incremental
        drift) and guarantees kills only happen where a live cluster exists.
        """
        if rows_idx.size == 0:
            return
        dx = self.cfg.grid.dx
        k = rows_idx.size
        pos_of = np.full(self.R, -1, dtype=np.int64)
        pos_of[rows_idx] = np.arange(k)
        in_rows = pos_of >= 0

        gathered = []
        for live, fl in ((self.live_u, self.fmax_lu), (self.live_v, self.fmax_lv)):
            r_idx, i_idx = np.nonzero((fl > 0.0) & in_rows[:, None])
            vals = live[r_idx, i_idx]
            agg = np.zeros((k, self.X))
            if r_idx.size:
                grp = pos_of[r_idx]
                starts = np.flatnonzero(
                    np.concatenate([[True], grp[1:] != grp[:-1]])
                )
                agg[grp[starts]] = np.add.reduceat(vals, starts, axis=0)
            gathered.append((r_idx, i_idx, vals, agg))

        (rU, iU, valsU, U_ex), (rV, iV, valsV, V_ex) = gathered
        m = np.minimum(U_ex, V_ex)
        kill_mass = m.sum(axis=1) * dx
        # reset the live aggregates to the exact cluster sums
        self.agg_u[rows_idx] = U_ex - m
        self.agg_v[rows_idx] = V_ex - m
        if jump_slot is not None:
            self.jumps[rows_idx, jump_slot] = kill_mass
            excess = kill_mass.max() - self.schedule.epsilon if k else 0.0
            self.max_jump_excess = max(self.max_jump_excess, float(excess))
        if not (kill_mass > 0.0).any():
            return
        share_u = np.zeros_like(m)
        np.divide(m, U_ex, out=share_u, where=m > 0.0)
        share_v = np.zeros_like(m)
        np.divide(m, V_ex, out=share_v, where=m > 0.0)

        for (r_idx, i_idx, vals, _), share, ghost, killed, m_live, m_ghost, live, fl, fg in (
            ((rU, iU, valsU, None), share_u, self.ghost_u, self.killed_u,
             self.m_live_u, self.m_ghost_u, self.live_u, self.fmax_lu,
             self.fmax_gu),
            ((rV, iV, valsV, None), share_v, self.ghost_v, self.killed_v,
             self.m_live_v, self.m_ghost_v, self.live_v, self.fmax_lv,
             self.fmax_gv),
        ):
            if r_idx.size == 0:
                continue
            kap = vals * share[pos_of[r_idx]]
            new = vals - kap
            live[r_idx, i_idx] = new
            gvals = ghost[r_idx, i_idx] + kap
            ghost[r_idx, i_idx] = gvals
            kmass = kap.sum(axis=1) * dx
            killed[r_idx, i_idx] += kmass
            m_live[r_idx, i_idx] -= kmass
            m_ghost[r_idx, i_idx] += kmass
            fl[r_idx, i_idx] = new.max(axis=1)
            fg[r_idx, i_idx] = gvals.max(axis=1)

        self.agg_tu[rows_idx] += m
        self.agg_tv[rows_idx] += m
        self.K_total[rows_idx] += kill_mass
        self.K_density[rows_idx] += m
        prod = float((self.agg_u[rows_idx] * self.agg_v[rows_idx]).max())
        self.max_uv_product = max(self.max_uv_product, prod)
        # killed-mass balance: both sides' decompositions against the shared
        # accumulator, relative to cumulative K (only meaningful kills count)
        real = self.K_total[rows_idx] > 1e-12
        if real.any():
            tot_u = self.killed_u[rows_idx[real]].sum(axis=1)
            tot_v = self.killed_v[rows_idx[real]].sum(axis=1)
            denom = self.K_total[rows_idx[real]]
            imb = float(np.max(np.abs(tot_u - tot_v) / denom))
            imb2 = float(np.max(np.abs(tot_u - denom) / denom))
            self.max_k_imbalance = max(self.max_k_imbalance, imb, imb2)

    def _soft_kill(self, rows_idx: np.ndarray):
        if rows_idx.size == 0:
            return
        dt = self.cfg.dt
        dx = self.cfg.grid.dx
        rate = self.mode.rate
        U = self.agg_u[rows_idx]
        V = self.agg_v[rows_idx]
        self.uv_integral[rows_idx] += (U * V).sum(axis=1) * dx * dt
        if rate == 0.0:
            return
        for live, ghost, killed, m_live, m_ghost, fl, fg, opp in (
            (self.live_u, self.ghost_u, self.killed_u, self.m_live_u,
             self.m_ghost_u, self.fmax_lu, self.fmax_gu, V),
            (self.live_v, self.ghost_v, self.killed_v, self.m_live_v,
             self.m_ghost_v, self.fmax_lv, self.fmax_gv, U),
        ):
            vals = live[rows_idx]
            kap = np.minimum(rate * dt * vals * opp[:, None, :], vals)
            vals -= kap
            live[rows_idx] = vals
            gvals = ghost[rows_idx] + kap
            ghost[rows_idx] = gvals
            kmass = kap.sum(axis=2) * dx
            killed[rows_idx] += kmass
            m_live[rows_idx] -= kmass
            m_ghost[rows_idx] += kmass
            fl[rows_idx] = vals.max(axis=2)
            fg[rows_idx] = gvals.max(axis=2)
            ksum = kap.sum(axis=1)
            if opp is V:
                self.agg_u[rows_idx] -= ksum
                self.agg_tu[rows_idx] += ksum
            else:
                self.agg_v[rows_idx] -= ksum
                self.agg_tv[rows_idx] += ksum
            self.K_total[rows_idx] += kmass.sum(axis=1)
            self.K_density[rows_idx] += ksum

    def _noise_stage(self, act_idx: np.ndarray):
        """Draw per-replicate noise and apply the live and ghost increments.

        Normals come from each replicate's block stream in fixed channel
        order; the nonnegative update (spde.nonneg_increment) is a
        deterministic transform of those normals, so replicate trajectories
        stay independent of batch grouping.
        """
        gamma = self.cfg.gamma
        scale = self._noise_scale
        X = self.X
        dx = self.cfg.grid.dx
        Uc, Vc, TUc, TVc = self._Uc, self._Vc, self._TUc, self._TVc

        masks = (
            self.born_u & (self.fmax_lu > 0.0),
            self.born_v & (self.fmax_lv > 0.0),
            self.fmax_gu > 0.0,
            self.fmax_gv > 0.0,
        )
        sub_masks = [mk[act_idx] for mk in masks]
        counts = [mk.sum(axis=1) for mk in sub_masks]
        totals = [int(c.sum()) for c in counts]
        xi = [np.empty((tt, X)) for tt in totals]
        offs = [np.concatenate([[0], np.cumsum(c)]) for c in counts]
        for k, r in enumerate(act_idx):
            need = int(counts[0][k] + counts[1][k] + counts[2][k] + counts[3][k])
            if need == 0:
                continue
            block = self._sources[r].take(need * X).reshape(need, X)
            pos = 0
            for m_i in range(4):
                c = int(counts[m_i][k])
                if c:
                    xi[m_i][offs[m_i][k] : offs[m_i][k] + c] = block[pos : pos + c]
                    pos += c

        # per-group gathered values and noise standard deviations
        specs = []
        for g in range(4):
            k_loc, i_loc = np.nonzero(sub_masks[g])
            r_idx = act_idx[k_loc]
            if g == 0:
                vals = self.live_u[r_idx, i_loc]
                if gamma == 0.5:
                    sd = scale * np.sqrt(vals)
                else:
                    sd = scale * Uc[r_idx] ** (gamma - 0.5) * np.sqrt(vals)
            elif g == 1:
                vals = self.live_v[r_idx, i_loc]
                if gamma == 0.5:
                    sd = scale * np.sqrt(vals)
                else:
                    sd = scale * Vc[r_idx] ** (gamma - 0.5) * np.sqrt(vals)
            elif g == 2:
                vals = self.ghost_u[r_idx, i_loc]
                if gamma == 0.5:
                    g_tot = TUc[r_idx]
                else:
                    g_tot = (TUc[r_idx] + Uc[r_idx]) ** (2 * gamma) - Uc[
                        r_idx
                    ] ** (2 * gamma)
                    np.maximum(g_tot, 0.0, out=g_tot)
                ratio = np.zeros_like(vals)
                np.divide(vals, TUc[r_idx], out=ratio, where=TUc[r_idx] > 0.0)
                sd = scale * np.sqrt(g_tot * ratio)
            else:
                vals = self.ghost_v[r_idx, i_loc]
                if gamma == 0.5:
                    g_tot = TVc[r_idx]
                else:
                    g_tot = (TVc[r_idx] + Vc[r_idx]) ** (2 * gamma) - Vc[
                        r_idx
                    ] ** (2 * gamma)
                    np.maximum(g_tot, 0.0, out=g_tot)
                ratio = np.zeros_like(vals)
                np.divide(vals, TVc[r_idx], out=ratio, where=TVc[r_idx] > 0.0)
                sd = scale * np.sqrt(g_tot * ratio)
            specs.append((r_idx, i_loc, vals, sd))

        # apply the moment-exact nonnegative updates group by group
        targets = (
            (self.live_u, self.agg_u, self.m_live_u, self.fmax_lu),
            (self.live_v, self.agg_v, self.m_live_v, self.fmax_lv),
            (self.ghost_u, self.agg_tu, self.m_ghost_u, self.fmax_gu),
            (self.ghost_v, self.agg_tv, self.m_ghost_v, self.fmax_gv),
        )
        for g, ((r_idx, i_loc, vals, sd), (field, agg, m_arr, fm)) in enumerate(
            zip(specs, targets)
        ):
            if vals.size == 0:
                continue
            new = nonneg_increment(vals, sd, xi[g])
            delta = new - vals
            field[r_idx, i_loc] = new
            self._scatter_agg(agg, r_idx, delta)
            m_arr[r_idx, i_loc] += delta.sum(axis=1) * dx
            fm[r_idx, i_loc] = new.max(axis=1)

    @staticmethod
    def _scatter_agg(agg: np.ndarray, r_idx: np.ndarray, delta: np.ndarray):
        """agg[r] += sum of delta rows belonging to replicate r (rows are
        grouped by replicate in ascending order)."""
        if r_idx.size == 0:
            return
        starts = np.flatnonzero(np.concatenate([[True], r_idx[1:] != r_idx[:-1]]))
        sums = np.add.reduceat(delta, starts, axis=0)
        agg[r_idx[starts]] += sums

    def _heat_stage(self, act_idx: np.ndarray):
        masks = (
            self.fmax_lu > 0.0,
            self.fmax_gu > 0.0,
            self.fmax_lv > 0.0,
            self.fmax_gv > 0.0,
        )
        arrays = (self.live_u, self.ghost_u, self.live_v, self.ghost_v)
        fmaxes = (self.fmax_lu, self.fmax_gu, self.fmax_lv, self.fmax_gv)
        idxs = [np.nonzero(mk) for mk in masks]
        sizes = [ix[0].size for ix in idxs]
        n_agg = act_idx.size
        total = sum(sizes) + 4 * n_agg
        if total == 0:
            return
        M = np.empty((total, self.X))
        pos = 0
        for arr, (ri, ci), sz in zip(arrays, idxs, sizes):
            if sz:
                M[pos : pos + sz] = arr[ri, ci]
            pos += sz
        for agg in (self.agg_u, self.agg_tu, self.agg_v, self.agg_tv):
            M[pos : pos + n_agg] = agg[act_idx]
            pos += n_agg
        M = self._op.apply(M)
        self.min_field_value = min(self.min_field_value, float(M.min()))
        np.maximum(M, 0.0, out=M)
        pos = 0
        for arr, (ri, ci), fm, sz in zip(arrays, idxs, fmaxes, sizes):
            if sz:
                arr[ri, ci] = M[pos : pos + sz]
                fm[ri, ci] = M[pos : pos + sz].max(axis=1)
            pos += sz
        for agg in (self.agg_u, self.agg_tu, self.agg_v, self.agg_tv):
            agg[act_idx] = M[pos : pos + n_agg]
            pos += n_agg

    # ------------------------------------------------------------------ step

    def step(self):
        cfg = self.cfg
        dt = cfg.dt
        t0 = self.time
        t1 = t0 + dt
        act_idx = np.flatnonzero(self._active_mask())

        # (1) immigration with jump-kill
        while self._next_event < len(self._events) and self._events[
            self._next_event
        ][0] <= t1 + 1e-12:
            tau, k_idx, side, i = self._events[self._next_event]
            self._next_event += 1
            ok = np.flatnonzero(~self.failed)
            if side == "U":
                rows = self._kernel_rows(self.centers_u[ok, i])
                self.live_u[ok, i] += rows
                self.agg_u[ok] += rows
                self.m_live_u[ok, i] += rows.sum(axis=1) * cfg.grid.dx
                self.fmax_lu[ok, i] = self.live_u[ok, i].max(axis=1)
                self.born_u[ok, i] = True
            else:
                rows = self._kernel_rows(self.centers_v[ok, i])
                self.live_v[ok, i] += rows
                self.agg_v[ok] += rows
                self.m_live_v[ok, i] += rows.sum(axis=1) * cfg.grid.dx
                self.fmax_lv[ok, i] = self.live_v[ok, i].max(axis=1)
                self.born_v[ok, i] = True
            if self.mode.kind == "hard":
                self._hard_kill(ok, jump_slot=k_idx)
            # the sup of the live U mass includes the post-seed instant
            np.maximum(
                self.max_U_mass, self.agg_u.sum(axis=1) * cfg.grid.dx,
                out=self.max_U_mass,
            )
            act_idx = np.flatnonzero(self._active_mask())

        if act_idx.size == 0:
            self.time = t1
            self.step_count += 1
            return

        # (2, 3) noise using aggregates snapshotted after immigration
        self._Uc = self.agg_u.copy()
        self._Vc = self.agg_v.copy()
        self._TUc = self.agg_tu.copy()
        self._TVc = self.agg_tv.copy()
        self._noise_stage(act_idx)

        # (4) heat
        self._heat_stage(act_idx)

        # (5) killing
        if self.mode.kind == "hard":
            self._hard_kill(act_idx, jump_slot=None)
        else:
            self._soft_kill(act_idx)

        # failure detection
        bad = ~np.isfinite(self.agg_u[act_idx].sum(axis=1) + self.agg_v[act_idx].sum(axis=1))
        if bad.any():
            for r in act_idx[bad]:
                self.failed[r] = True
                self.failures[int(self.replicates[r])] = (
                    f"non-finite field at t={t1:.6g}"
                )
                for arr in (self.live_u, self.ghost_u, self.live_v, self.ghost_v):
                    arr[r] = 0.0
                for arr in (self.agg_u, self.agg_v, self.agg_tu, self.agg_tv):
                    arr[r] = 0.0
                for arr in (self.fmax_lu, self.fmax_gu, self.fmax_lv, self.fmax_gv):
                    arr[r] = 0.0

        # (6) trackers
        self._update_trackers(t0, t1)
        self.time = t1
        self.step_count += 1

    # -------------------------------------------------------------- trackers

    def _update_trackers(self, t0: float, t1: float):
        dx = self.cfg.grid.dx
        eps = self.schedule.epsilon
        # exact-zero snap where the fields are exactly zero
        self.m_live_u[self.fmax_lu == 0.0] = 0.0
        self.m_ghost_u[self.fmax_gu == 0.0] = 0.0
        self.m_live_v[self.fmax_lv == 0.0] = 0.0
        self.m_ghost_v[self.fmax_gv == 0.0] = 0.0

        bar = self.m_live_u + self.m_ghost_u
        undec = self.born_u & (self.a_flag == UNDECIDED)
        hit = undec & (bar >= 1.0)
        if hit.any():
            prev = self.prev_bar[hit]
            now = bar[hit]
            denom = np.maximum(now - prev, 1e-300)
            frac = np.clip((1.0 - prev) / denom, 0.0, 1.0)
            t_abs = t0 + frac * (t1 - t0)
            s_i = self.schedule.u_times[np.nonzero(hit)[1]]
            self.tau_bar[hit] = np.maximum(t_abs - s_i, 0.0)
            self.a_flag[hit] = HIT
            self.stopped_mass[hit] = 1.0
        undec = self.born_u & (self.a_flag == UNDECIDED)
        dead = undec & (bar == 0.0)
        if dead.any():
            s_i = self.schedule.u_times[np.nonzero(dead)[1]]
            self.tau_zero[dead] = t1 - s_i
            self.a_flag[dead] = DEAD
            self.stopped_mass[dead] = 0.0
        undec = self.born_u & (self.a_flag == UNDECIDED)
        self.stopped_mass[undec] = bar[undec]

        self.max_U_mass = np.maximum(self.max_U_mass, self.agg_u.sum(axis=1) * dx)

        if self.tracker.full:
            d0 = self.tracker.delta0
            d1 = self.tracker.delta1
            beta = beta_of(self.cfg.gamma)
            s_rel1 = t1 - self.schedule.u_times[None, :]  # (1, N) bcast
            s_rel0 = t0 - self.schedule.u_times[None, :]
            born = self.born_u
            # H: dominating mass below the moving barrier
            barrier1 = np.where(born, (np.maximum(s_rel1, 0.0) + eps) ** (beta + d1), 0.0)
            barrier0 = np.where(born, (np.maximum(s_rel0, 0.0) + eps) ** (beta + d1), 0.0)
            open_h = born & np.isinf(self.H_rel)
            trig = open_h & (bar < barrier1)
            if trig.any():
                g0 = self.prev_bar[trig] - barrier0[trig]
                g1 = bar[trig] - barrier1[trig]
                frac = np.clip(g0 / np.maximum(g0 - g1, 1e-300), 0.0, 1.0)
                t_abs = t0 + frac * (t1 - t0)
                s_i = self.schedule.u_times[np.nonzero(trig)[1]]
                self.H_rel[trig] = np.maximum(t_abs - s_i, 0.0)
            # theta: killing mass above its barrier
            kbar1 = np.where(born, (np.maximum(s_rel1, 0.0) + eps) ** (1.5 - 2.0 * d0), np.inf)
            open_t = born & np.isinf(self.theta_rel)
            trig = open_t & (self.killed_u > kbar1)
            if trig.any():
                s_i = self.schedule.u_times[np.nonzero(trig)[1]]
                self.theta_rel[trig] = t1 - s_i
            # B: live mass below (1/2) s^(beta+delta1) inside [eps^(2/3), t]
            open_b = born & np.isinf(self.B_viol) & (s_rel1 >= eps ** (2.0 / 3.0))
            trig = open_b & (self.m_live_u < 0.5 * np.maximum(s_rel1, 0.0) ** (beta + d1))
            if trig.any():
                s_i = self.schedule.u_times[np.nonzero(trig)[1]]
                self.B_viol[trig] = t1 - s_i
            # rho: support of the dominating cluster field escapes its cone
            self._update_rho(t1)
            # T_R
            open_r = np.isinf(self.TR_abs)
            if open_r.any():
                sup_u = (self.agg_u + self.agg_tu).max(axis=1)
                sup_v = (self.agg_v + self.agg_tv).max(axis=1)
                trig_r = open_r & (np.maximum(sup_u, sup_v) > self.tracker.R)
                self.TR_abs[trig_r] = t1

        if self.tracker.r_sample_times:
            foc = self.tracker.focus
            live_ok = self.born_u[:, foc]
            bar_f = bar[:, foc]
            ratio = np.where(bar_f > 0.0, self.m_ghost_u[:, foc] / np.maximum(bar_f, 1e-300), np.nan)
            hit_f = self.a_flag[:, foc] == HIT
            fresh = hit_f & np.isnan(self._ratio_frozen)
            self._ratio_frozen[fresh] = ratio[fresh]
            ratio = np.where(hit_f, self._ratio_frozen, ratio)
            for k, ts in enumerate(self.tracker.r_sample_times):
                if t0 < ts <= t1 + 1e-12:
                    self.r_samples[:, k] = np.where(live_ok, ratio, np.nan)

        self.prev_bar = bar.copy()
        self.prev_killed = self.killed_u.copy()

    def _update_rho(self, t1: float):
        tol = self.tracker.support_tol
        d0 = self.tracker.delta0
        open_rho = self.born_u & np.isinf(self.rho_rel)
        r_idx, i_idx = np.nonzero(open_rho & ((self.fmax_lu > tol) | (self.fmax_gu > tol)))
        if r_idx.size == 0:
            return
        s_rel = t1 - self.schedule.u_times[i_idx]
        radius = self._sqrt_eps + np.maximum(s_rel, 0.0) ** (0.5 - d0)
        x_i = self.centers_u[r_idx, i_idx]
        vals = self.live_u[r_idx, i_idx] + self.ghost_u[r_idx, i_idx]
        outside = np.abs(self._centers_x[None, :] - x_i[:, None]) > radius[:, None]
        violated = ((vals > tol) & outside).any(axis=1)
        if violated.any():
            self.rho_rel[r_idx[violated], i_idx[violated]] = s_rel[violated]

    # --------------------------------------------------------------- running

    def run(self, T: float):
        n_steps = int(round(T / self.cfg.dt))
        for _ in range(n_steps):
            if self.time >= T - 1e-12:
                break
            if not self._active_mask().any():
                # nothing alive and no future seeds: state is frozen
                self.time = T
                break
            self.step()
        return self

    def complete_a_events(self):
        """Resolve undecided A events by optional stopping: accept with
        probability equal to the stopped dominating mass.  Draw order is by
        ascending cluster id per replicate, so completion is deterministic."""
        for k in range(self.R):
            if self.failed[k]:
                continue
            for i in range(self.N):
                if self.born_u[k, i] and self.a_flag[k, i] == UNDECIDED:
                    u = float(self._decision[k].uniforms(1)[0])
                    self.a_flag[k, i] = HIT if u < self.stopped_mass[k, i] else DEAD
                    self.a_completed[k, i] = True

    def tracker_state(self, k: int) -> TrackerState:
        """Snapshot of replicate slot k as a TrackerState."""
        a_event = []
        for i in range(self.N):
            if not self.born_u[k, i] or self.a_flag[k, i] == UNDECIDED:
                a_event.append(None)
            else:
                a_event.append(bool(self.a_flag[k, i] == HIT))
        v = _v_times(
            self.tau_bar[k], self.H_rel[k], self.theta_rel[k], self.rho_rel[k],
            self.TR_abs[k], self.schedule.u_times,
        )
        return TrackerState(
            replicate=int(self.replicates[k]),
            epsilon=self.schedule.epsilon,
            gamma=self.cfg.gamma,
            tau_bar=self.tau_bar[k].copy(),
            tau_zero=self.tau_zero[k].copy(),
            a_event=a_event,
            stopped_mass=self.stopped_mass[k].copy(),
            H=self.H_rel[k].copy(),
            theta=self.theta_rel[k].copy(),
            rho=self.rho_rel[k].copy(),
            B_violation=self.B_viol[k].copy(),
            T_R=float(self.TR_abs[k]),
            v=v,
            r_samples=self.r_samples[k].copy(),
            params={
                "delta0": self.tracker.delta0,
                "delta1": self.tracker.delta1,
                "R": self.tracker.R,
                "beta": beta_of(self.cfg.gamma),
                "bar_delta": bar_delta_of(self.cfg.gamma),
            },
        )

    def summary_rows(self) -> list[dict]:
        rows = []
        foc = self.tracker.focus
        for k in range(self.R):
            rows.append(
                {
                    "replicate": int(self.replicates[k]),
                    "epsilon": self.schedule.epsilon,
                    "gamma": self.cfg.gamma,
                    "failed": bool(self.failed[k]),
                    "a_focus": int(self.a_flag[k, foc]),
                    "tau_bar_focus": float(self.tau_bar[k, foc]),
                    "v_focus": float(
                        _v_times(
                            self.tau_bar[k], self.H_rel[k], self.theta_rel[k],
                            self.rho_rel[k], self.TR_abs[k], self.schedule.u_times,
                        )[foc]
                    ),
                    "max_U_mass": float(self.max_U_mass[k]),
                    "K_total": float(self.K_total[k]),
                    "B_violation_focus": float(self.B_viol[k, foc]),
                }
            )
        return rows

    def invariant_report(self) -> dict:
        return {
            "max_uv_product": self.max_uv_product,
            "max_k_imbalance": self.max_k_imbalance,
            "max_jump_excess": self.max_jump_excess,
            "min_field_value": self.min_field_value,
            "n_failed": int(self.failed.sum()),
        }
