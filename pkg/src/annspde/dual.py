"""The coupled annihilating system: per-cluster state, stepping, trackers,
and conditioned sampling.

DualSystemState is the single-replicate view over the batched engine; heavy
Monte Carlo runs drive BatchDualEngine directly with many replicates.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from .engine import (
    BatchDualEngine,
    HIT,
    Mode,
    TrackerOptions,
    TrackerState,
    UNDECIDED,
    beta_of,
    bar_delta_of,
    default_deltas,
    default_R,
)
from .lattice import LatticeField
from .schedule import ImmigrationSchedule, make_schedule
from .spde import SpdeConfig

__all__ = [
    "ImmigrationSchedule",
    "make_schedule",
    "Mode",
    "ClusterState",
    "DualSystemState",
    "TrackerState",
    "TrackerOptions",
    "init_system",
    "step_hard",
    "step_soft",
    "run_replicate",
    "update_trackers",
    "sample_conditioned",
    "beta_of",
    "bar_delta_of",
    "default_deltas",
    "default_R",
]


@dataclass
class ClusterState:
    """One immigration cluster: live and ghost fields plus killed-mass
    accounting.  Fields are views into the engine arrays."""

    id: int
    kind: str  # "U" | "V"
    birth_time: float
    birth_center: float
    live: LatticeField
    ghost: LatticeField
    killed_mass: float
    noise_channels: tuple


@dataclass
class DualSystemState:
    """Single-replicate state of the coupled system."""

    engine: BatchDualEngine
    config: SpdeConfig
    schedule: ImmigrationSchedule
    mode: Mode
    replicate: int

    @property
    def time(self) -> float:
        return self.engine.time

    @property
    def cumulative_K(self) -> LatticeField:
        return LatticeField(self.config.grid, self.engine.K_density[0].copy())

    @property
    def K_jump_log(self) -> list:
        times = self.schedule.grid_times()
        return [
            (float(times[k]), float(self.engine.jumps[0, k]))
            for k in range(times.size)
            if times[k] <= self.engine.time + 1e-12
        ]

    def _clusters(self, kind: str) -> list:
        eng = self.engine
        n = eng.N
        out = []
        for i in range(n):
            if kind == "U":
                birth = self.schedule.u_times[i]
                center = eng.centers_u[0, i]
                live = eng.live_u[0, i]
                ghost = eng.ghost_u[0, i]
                killed = eng.killed_u[0, i]
                channels = (i, 2 * n + i)
            else:
                birth = self.schedule.v_times[i]
                center = eng.centers_v[0, i]
                live = eng.live_v[0, i]
                ghost = eng.ghost_v[0, i]
                killed = eng.killed_v[0, i]
                channels = (n + i, 3 * n + i)
            out.append(
                ClusterState(
                    id=i,
                    kind=kind,
                    birth_time=float(birth),
                    birth_center=float(center),
                    live=LatticeField(self.config.grid, live),
                    ghost=LatticeField(self.config.grid, ghost),
                    killed_mass=float(killed),
                    noise_channels=channels,
                )
            )
        return out

    @property
    def clusters_u(self) -> list:
        return self._clusters("U")

    @property
    def clusters_v(self) -> list:
        return self._clusters("V")

    def aggregate_u(self) -> LatticeField:
        return LatticeField(self.config.grid, self.engine.agg_u[0].copy())

    def aggregate_v(self) -> LatticeField:
        return LatticeField(self.config.grid, self.engine.agg_v[0].copy())

    def signed_field(self) -> LatticeField:
        """u = U - V, the signed difference solving the target equation."""
        return LatticeField(
            self.config.grid, self.engine.agg_u[0] - self.engine.agg_v[0]
        )


def init_system(
    cfg: SpdeConfig,
    schedule: ImmigrationSchedule,
    mode: Mode,
    root_seed: int,
    replicate: int,
    tracker: TrackerOptions | None = None,
    redraw_centers: bool = False,
) -> DualSystemState:
    """Allocate a zeroed single-replicate system with 2N clusters per side and
    independent noise channels.

    With redraw_centers=False (default here) the schedule's own centers are
    used; experiment drivers redraw centers per replicate.
    """
    engine = BatchDualEngine(
        cfg,
        schedule,
        mode,
        root_seed,
        [replicate],
        tracker=tracker,
        redraw_centers=redraw_centers,
    )
    return DualSystemState(engine, cfg, schedule, mode, replicate)


def step_hard(state: DualSystemState) -> DualSystemState:
    if state.mode.kind != "hard":
        raise ValueError("step_hard requires Hard mode")
    state.engine.step()
    if state.engine.failed[0]:
        raise RuntimeError(
            f"replicate failed: {state.engine.failures.get(state.replicate)}"
        )
    return state


def step_soft(state: DualSystemState) -> DualSystemState:
    if state.mode.kind != "soft":
        raise ValueError("step_soft requires Soft mode")
    state.engine.step()
    if state.engine.failed[0]:
        raise RuntimeError(
            f"replicate failed: {state.engine.failures.get(state.replicate)}"
        )
    return state


def update_trackers(
    tracker: TrackerState | None, state: DualSystemState, focus: int = 0
) -> TrackerState:
    """Return the current tracker snapshot for the focus cluster's replicate.

    Crossing detection (with linear interpolation inside each step) runs in
    the engine during stepping; this materializes the current record.
    """
    if focus < 0 or focus >= state.engine.N:
        raise ValueError(f"focus cluster {focus} does not exist")
    return state.engine.tracker_state(0)


def run_replicate(
    state: DualSystemState, T: float, focus_cluster: int | None = None
) -> tuple[TrackerState, dict]:
    """Step until time T or until every cluster is dead with no future seeds;
    returns the tracker snapshot and summary scalars."""
    if T > state.config.T + 1e-12:
        raise ValueError(f"T={T} exceeds configured horizon {state.config.T}")
    state.engine.run(T)
    if state.engine.failed[0]:
        raise RuntimeError(
            f"replicate failed: {state.engine.failures.get(state.replicate)}"
        )
    tracker = state.engine.tracker_state(0)
    row = state.engine.summary_rows()[0]
    if focus_cluster is not None:
        foc = focus_cluster
        row["a_focus"] = int(state.engine.a_flag[0, foc])
        row["tau_bar_focus"] = float(state.engine.tau_bar[0, foc])
        row["B_violation_focus"] = float(state.engine.B_viol[0, foc])
    return tracker, row


@dataclass
class ConditionedSample:
    """Accepted replicates conditioned on the focus cluster's mass reaching 1,
    plus acceptance accounting."""

    trackers: list
    n_attempted: int
    n_accepted: int
    budget_exhausted: bool
    acceptance_rate: float
    stopped_masses: np.ndarray = dc_field(default=None)


def sample_conditioned(
    cfg: SpdeConfig,
    schedule: ImmigrationSchedule,
    focus: int,
    n_accepted: int,
    budget: int,
    root_seed: int = 0,
    mode: Mode | None = None,
    tracker: TrackerOptions | None = None,
    horizon: float | None = None,
    batch_size: int = 256,
    mass_sample_time: float | None = None,
) -> ConditionedSample:
    """Rejection sampling of the law conditioned on the focus cluster's
    dominating mass reaching 1.

    Replicates run to `horizon`; replicates undecided there are resolved by an
    optional-stopping draw with probability equal to the stopped mass, which
    leaves the conditional law of every pre-horizon observable exact.  The
    expected acceptance rate is epsilon.

    With mass_sample_time set, the stopped dominating mass of the focus
    cluster at that time (relative to its birth) is collected per accepted
    replicate.
    """
    if n_accepted < 1:
        raise ValueError("n_accepted must be >= 1")
    if budget < n_accepted:
        raise ValueError("budget must be at least n_accepted")
    mode = mode or Mode.hard()
    horizon = cfg.T if horizon is None else horizon
    sample_abs = (
        None
        if mass_sample_time is None
        else float(schedule.u_times[focus] + mass_sample_time)
    )
    accepted = []
    masses = []
    attempted = 0
    next_rep = 0
    while len(accepted) < n_accepted and attempted < budget:
        n_batch = min(batch_size, budget - attempted)
        reps = range(next_rep, next_rep + n_batch)
        next_rep += n_batch
        attempted += n_batch
        opts = tracker or TrackerOptions()
        eng = BatchDualEngine(
            cfg, schedule, mode, root_seed, reps, tracker=opts, redraw_centers=True
        )
        if sample_abs is not None:
            stopped_at = np.full(n_batch, np.nan)
            recorded = np.zeros(n_batch, dtype=bool)
            n_steps = int(round(horizon / cfg.dt))
            for _ in range(n_steps):
                if eng.time >= horizon - 1e-12:
                    break
                eng.step()
                if eng.time >= sample_abs - 1e-12:
                    fresh = ~recorded
                    # stopped at tau_bar ^ t: 1 if already hit, else current
                    stopped_at[fresh] = eng.stopped_mass[fresh, focus]
                    recorded[fresh] = True
            if not recorded.all():
                stopped_at[~recorded] = eng.stopped_mass[~recorded, focus]
        else:
            eng.run(horizon)
            stopped_at = None
        eng.complete_a_events()
        # keep every hit in the batch so the acceptance rate stays unbiased
        for k in range(n_batch):
            if eng.failed[k]:
                continue
            if eng.a_flag[k, focus] == HIT:
                accepted.append(eng.tracker_state(k))
                if stopped_at is not None:
                    masses.append(stopped_at[k])
    return ConditionedSample(
        trackers=accepted,
        n_attempted=attempted,
        n_accepted=len(accepted),
        budget_exhausted=len(accepted) < n_accepted,
        acceptance_rate=len(accepted) / max(attempted, 1),
        stopped_masses=np.asarray(masses) if masses else None,
    )
