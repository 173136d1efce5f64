"""Coupled light-spin propagation through chains of gradient-echo memories.

The integrator advances, in a frame moving with the light, the collective
spin coherence s(z) of each cell together with the slowly varying mode
envelopes E_k(z, t):

    dE_k/dz = i * N * (W_k / D_k) * s(z)
    ds/dt   = -(gamma' + i * dtot(z, t)) * s + i * g * sum_k conj(W_k / D_k) * E_k

with g = 1, N = beta * Gamma (L = 1) and

    gamma'     = gamma + Gamma * sum_k |W_k / D_k|^2      (power broadening)
    dtot(z, t) = delta + shift + sign * eta * (z - 1/2)   (two-photon detuning)

``shift = sum_k |W_k|^2 / D_k`` is the coupling-field light shift with the
sign produced by adiabatic elimination of the excited states.  (The public
:func:`memspin.core.effective_rates` keeps the opposite, published sign
convention for the shift; only |shift| enters the margin checks, and the
scheduler cancels the uniform shift by default, so the two conventions meet
only in documentation.)

Storage and recall use the gradient-echo mechanism: a linear detuning
gradient eta * (z - 1/2) is applied while the light is coupled in, and its
sign is flipped to trigger re-emission.  Cells are chained in series; in the
moving frame the outflow of one cell is the inflow of the next within the
same time step.

Numerical scheme: method of lines.  Within each time step the envelopes are
slaved to the spin grid by trapezoidal accumulation along z, and the spin
grid is advanced with classical RK4.  The scheme is linear in the state, so
superposition holds to rounding error.

Energy bookkeeping (documented normalisation): with g = 1 the spin-wave
energy that balances the field energy integral(|E|^2 dt) is

    E_spin = beta * Gamma * integral(|s(z)|^2 dz)

per cell, which the tests verify to 1e-3 in the lossless limit.
"""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .core import (
    AtomicParams,
    CouplingVector,
    MemspinError,
    ModeSpectrum,
    ValidationError,
    MARGIN_THRESHOLD,
    dispersion_phase,
    light_shift,
    margin_report,
)


class StepSizeError(MemspinError):
    """The requested time step cannot resolve the fastest dynamics."""


class DivergenceError(MemspinError):
    """The integration produced non-finite values."""


class ScheduleError(MemspinError):
    """The storage/recall schedule is inconsistent."""


class UndefinedOverlapError(MemspinError):
    """Overlap requested against an ideal output with zero energy."""


EVENTS = ("store", "recall", "hold")


@dataclass(frozen=True)
class Grid:
    """Discretisation of one temporal window over the normalised cell.

    ``nz`` spatial points span z in [0, 1]; ``nt`` time steps of size ``dt``
    cover one window, nt * dt = window.
    """

    nz: int = 256
    dt: float = 0.02
    window: float = 40.0

    def __post_init__(self):
        if self.nz < 64:
            raise ValidationError("nz must be at least 64")
        if self.dt <= 0 or self.window <= 0:
            raise ValidationError("dt and window must be positive")
        nt = self.window / self.dt
        if abs(nt - round(nt)) > 1e-9:
            raise ValidationError("window must be an integer multiple of dt")

    @property
    def nt(self) -> int:
        return int(round(self.window / self.dt))

    @property
    def times(self) -> np.ndarray:
        """Window-local sample times, nt + 1 points including both edges."""
        return np.arange(self.nt + 1) * self.dt

    @property
    def z(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.nz)

    def refined(self, factor: float = 2.0) -> "Grid":
        """Refine space and time together (for convergence studies)."""
        return Grid(nz=int(round(self.nz * factor)), dt=self.dt / factor, window=self.window)


@dataclass(frozen=True)
class MemoryCell:
    """One atomic ensemble with a switchable detuning gradient."""

    atoms: AtomicParams
    gradient_eta: float
    id: str = ""


@dataclass(frozen=True)
class ScheduleEntry:
    """What one cell does during one window."""

    event: str
    coupling: CouplingVector | None = None
    gradient_sign: int = 1

    def __post_init__(self):
        if self.event not in EVENTS:
            raise ScheduleError(f"unknown event '{self.event}'")
        if self.event in ("store", "recall"):
            if self.coupling is None or not np.any(self.coupling.amplitudes):
                raise ScheduleError(f"{self.event} window requires a nonzero coupling")
        if self.gradient_sign not in (1, -1):
            raise ScheduleError("gradient_sign must be +1 or -1")


@dataclass(frozen=True)
class Schedule:
    """Grid of (cell x window) entries."""

    entries: tuple[tuple[ScheduleEntry, ...], ...]

    def __post_init__(self):
        if not self.entries:
            raise ScheduleError("schedule must contain at least one cell row")
        n_windows = len(self.entries[0])
        for row in self.entries:
            if len(row) != n_windows:
                raise ScheduleError("all cells must cover the same windows")

    def check_causality(self, preloaded=frozenset()):
        """A cell may only recall after it stored (or was seeded with spin)."""
        for c, row in enumerate(self.entries):
            stored = c in preloaded
            for w, entry in enumerate(row):
                if entry.event == "store":
                    stored = True
                elif entry.event == "recall" and not stored:
                    raise ScheduleError(f"cell {c} recalls in window {w} before storing")

    @property
    def n_cells(self) -> int:
        return len(self.entries)

    @property
    def n_windows(self) -> int:
        return len(self.entries[0])

    def output_windows(self) -> tuple[int, ...]:
        """Windows in which at least one cell recalls."""
        return tuple(
            w for w in range(self.n_windows)
            if any(row[w].event == "recall" for row in self.entries)
        )


def store_recall_schedule(write_plan, read_plan) -> Schedule:
    """Two-window schedule: every cell stores, then every cell recalls."""
    if write_plan.n_memories != read_plan.n_memories:
        raise ScheduleError("write and read plans must address the same cells")
    rows = tuple(
        (
            ScheduleEntry(event="store", coupling=wv, gradient_sign=1),
            ScheduleEntry(event="recall", coupling=rv, gradient_sign=-1),
        )
        for wv, rv in zip(write_plan.memories, read_plan.memories)
    )
    return Schedule(entries=rows)


@dataclass(frozen=True)
class GaussianPulse:
    """Gaussian input pulse shared by all modes, |envelope|^2 FWHM = fwhm.

    ``center`` is window-local time in us; ``mode_amplitudes`` are the
    complex per-mode weights.
    """

    fwhm: float
    center: float
    mode_amplitudes: np.ndarray

    def __post_init__(self):
        amps = np.atleast_1d(np.asarray(self.mode_amplitudes, dtype=complex))
        object.__setattr__(self, "mode_amplitudes", amps)
        if self.fwhm <= 0:
            raise ValidationError("pulse fwhm must be positive")

    @property
    def n_modes(self) -> int:
        return int(self.mode_amplitudes.size)

    def envelope(self, t) -> np.ndarray:
        return np.exp(-2.0 * math.log(2.0) * ((np.asarray(t) - self.center) / self.fwhm) ** 2)

    def __call__(self, t: float) -> np.ndarray:
        return self.mode_amplitudes * math.exp(
            -2.0 * math.log(2.0) * ((t - self.center) / self.fwhm) ** 2
        )

    def energy(self) -> float:
        """Closed-form integral of sum_k |amp_k|^2 |env(t)|^2 dt."""
        norm = self.fwhm * math.sqrt(math.pi / (4.0 * math.log(2.0)))
        return float(np.sum(np.abs(self.mode_amplitudes) ** 2)) * norm


@dataclass
class FieldState:
    """Mode envelopes sampled on a time grid at a fixed z plane."""

    envelopes: np.ndarray  # (n_modes, n_samples)
    times: np.ndarray

    def energy(self) -> float:
        return float(np.trapezoid(np.sum(np.abs(self.envelopes) ** 2, axis=0), self.times))


@dataclass
class SpinState:
    """Spin-coherence profile of one cell."""

    sigma: np.ndarray  # (nz,)
    z: np.ndarray
    cell_id: str = ""

    def energy_norm(self, atoms: AtomicParams) -> float:
        """Field-equivalent energy beta * Gamma * integral(|s|^2 dz)."""
        return float(atoms.coupling_density * np.trapezoid(np.abs(self.sigma) ** 2, self.z))


@dataclass(frozen=True)
class SimOptions:
    """Switches for the integrator.

    power_broadening:
        Include the coupling-induced decay Gamma * sum|W/D|^2; disable for
        lossless energy-bookkeeping checks.
    compensate_dispersion:
        Model ideal compensation of the per-mode dispersion phase at cell
        boundaries; when off, each mode picks up exp(-i beta Gamma / D_k)
        per cell traversed.
    auto_two_photon:
        Retune the bare two-photon detuning per (cell, window) to cancel the
        coupling light shift, centring the gradient on the carrier.
    """

    power_broadening: bool = True
    compensate_dispersion: bool = True
    auto_two_photon: bool = True
    check_margins: bool = True
    margin_threshold: float = MARGIN_THRESHOLD
    record_heatmap: bool = False
    heatmap_stride: int = 0


@dataclass
class NetworkResult:
    """Everything observable from one schedule execution."""

    outputs: list[FieldState]
    residual_spins: list[SpinState]
    efficiency: float
    overlap: float | None
    input_energy: float
    window_energies: list[dict]
    output_windows: tuple[int, ...]
    heatmap_field: np.ndarray | None = None
    heatmap_spin: np.ndarray | None = None
    heatmap_times: np.ndarray | None = None
    heatmap_z: np.ndarray | None = None


@dataclass(frozen=True)
class _CellWindowCtx:
    """Precomputed per-(cell, window) quantities."""

    on: bool
    ratios: np.ndarray | None
    ratios_conj: np.ndarray | None
    ncal: float
    gamma_eff: float
    delta_z: np.ndarray
    disp_phase: np.ndarray | None


def _window_contexts(cells, schedule, window, spectrum, grid, options):
    z = grid.z
    ctxs = []
    for cell, row in zip(cells, schedule.entries):
        entry = row[window]
        if entry.event in ("store", "recall") and cell.gradient_eta == 0.0:
            raise ScheduleError(f"cell '{cell.id}' needs a nonzero gradient to {entry.event}")
        grad = entry.gradient_sign * cell.gradient_eta * (z - 0.5)
        disp = None
        if not options.compensate_dispersion:
            disp = np.exp(1j * dispersion_phase(cell.atoms, spectrum, 1.0))
        coupling_on = entry.coupling is not None and bool(np.any(entry.coupling.amplitudes))
        if coupling_on:
            ratios = entry.coupling.amplitudes / spectrum.detunings
            shift = light_shift(entry.coupling, spectrum)
            pb = cell.atoms.Gamma * float(np.sum(np.abs(ratios) ** 2))
            gamma_eff = cell.atoms.gamma + (pb if options.power_broadening else 0.0)
            delta_uniform = cell.atoms.delta + (0.0 if options.auto_two_photon else shift)
            ctxs.append(_CellWindowCtx(
                on=True,
                ratios=ratios,
                ratios_conj=np.conj(ratios),
                ncal=cell.atoms.coupling_density,
                gamma_eff=gamma_eff,
                delta_z=delta_uniform + grad,
                disp_phase=disp,
            ))
        else:
            ctxs.append(_CellWindowCtx(
                on=False,
                ratios=None,
                ratios_conj=None,
                ncal=cell.atoms.coupling_density,
                gamma_eff=cell.atoms.gamma,
                delta_z=cell.atoms.delta + grad,
                disp_phase=disp,
            ))
    return ctxs


def _guard_step_size(ctxs, grid, gradient_etas):
    rate = 0.0
    for ctx, eta in zip(ctxs, gradient_etas):
        r = ctx.gamma_eff + abs(eta) / 2.0
        if ctx.on:
            r += ctx.ncal * float(np.sum(np.abs(ctx.ratios) ** 2))
        rate = max(rate, r)
    if grid.dt * rate > 0.5:
        raise StepSizeError(
            f"dt = {grid.dt} too large for dynamics rate {rate:.3g} rad/us "
            f"(dt * rate = {grid.dt * rate:.2f} > 0.5)"
        )


def _chain_rhs(sig, t, inflow_fn, ctxs, dz, want_profiles=False):
    """Time derivative of all spin grids plus the chain outflow at time t.

    ``sig`` has shape (n_cells, nz).  Returns (dsig, outflow, profiles)
    where profiles, when requested, lists one (n_modes, nz) envelope array
    per cell.
    """
    e = np.asarray(inflow_fn(t), dtype=complex)
    dsig = np.empty_like(sig)
    profiles = [] if want_profiles else None
    for c, ctx in enumerate(ctxs):
        s = sig[c]
        if ctx.on:
            incr = 1j * ctx.ncal * ctx.ratios[:, None] * s[None, :]
            ek = np.empty((e.size, s.size), dtype=complex)
            ek[:, 0] = e
            ek[:, 1:] = e[:, None] + np.cumsum(
                0.5 * dz * (incr[:, 1:] + incr[:, :-1]), axis=1)
            dsig[c] = -(ctx.gamma_eff + 1j * ctx.delta_z) * s + 1j * (ctx.ratios_conj @ ek)
            e = ek[:, -1].copy()
            if want_profiles:
                profiles.append(ek)
        else:
            dsig[c] = -(ctx.gamma_eff + 1j * ctx.delta_z) * s
            if want_profiles:
                profiles.append(np.repeat(e[:, None], s.size, axis=1))
        if ctx.disp_phase is not None:
            e = e * ctx.disp_phase
    return dsig, e, profiles


def simulate_network(cells, schedule: Schedule, inputs, grid: Grid,
                     spectrum: ModeSpectrum, options: SimOptions = SimOptions(),
                     ideal: list[FieldState] | None = None,
                     initial_spins: np.ndarray | None = None) -> NetworkResult:
    """Run a schedule over a chain of cells.

    Parameters
    ----------
    cells:
        Ordered list of :class:`MemoryCell`, upstream first.
    inputs:
        Mapping window index -> pulse callable.  A pulse is evaluated at
        window-local times and returns the (n_modes,) inflow amplitudes.
    ideal:
        Optional per-output-window ideal envelopes; when given, the overlap
        is computed and stored on the result.
    initial_spins:
        Optional (n_cells, nz) starting spin grids (default all zero).
    """
    if len(cells) != schedule.n_cells:
        raise ScheduleError(
            f"{len(cells)} cells supplied for a schedule with {schedule.n_cells} rows"
        )
    n_modes = spectrum.n_modes
    if options.check_margins:
        _warn_on_margins(cells, schedule, spectrum, options)

    if initial_spins is None:
        sig = np.zeros((schedule.n_cells, grid.nz), dtype=complex)
        schedule.check_causality()
    else:
        sig = np.array(initial_spins, dtype=complex)
        if sig.shape != (schedule.n_cells, grid.nz):
            raise ValidationError("initial_spins must have shape (n_cells, nz)")
        schedule.check_causality(preloaded={
            c for c in range(schedule.n_cells) if np.any(sig[c])})
    dz = 1.0 / (grid.nz - 1)
    times = grid.times
    zero = np.zeros(n_modes, dtype=complex)

    outputs: list[FieldState] = []
    window_energies: list[dict] = []
    heat_field, heat_spin, heat_t = [], [], []
    stride = options.heatmap_stride or max(1, grid.nt // 200)

    for w in range(schedule.n_windows):
        ctxs = _window_contexts(cells, schedule, w, spectrum, grid, options)
        _guard_step_size(ctxs, grid, [c.gradient_eta for c in cells])
        pulse = inputs.get(w)
        inflow = (lambda t, p=pulse: p(t)) if pulse is not None else (lambda t: zero)
        out_series = np.empty((n_modes, grid.nt + 1), dtype=complex)
        in_series = np.empty((n_modes, grid.nt + 1), dtype=complex)
        dt = grid.dt
        for n in range(grid.nt):
            t = times[n]
            want = options.record_heatmap and (n % stride == 0)
            k1, out_now, profiles = _chain_rhs(sig, t, inflow, ctxs, dz, want_profiles=want)
            out_series[:, n] = out_now
            in_series[:, n] = inflow(t)
            if want:
                heat_field.append(np.concatenate(
                    [np.sqrt(np.sum(np.abs(p) ** 2, axis=0)) for p in profiles]))
                heat_spin.append(np.abs(sig).reshape(-1))
                heat_t.append(w * grid.window + t)
            k2, _, _ = _chain_rhs(sig + 0.5 * dt * k1, t + 0.5 * dt, inflow, ctxs, dz)
            k3, _, _ = _chain_rhs(sig + 0.5 * dt * k2, t + 0.5 * dt, inflow, ctxs, dz)
            k4, _, _ = _chain_rhs(sig + dt * k3, t + dt, inflow, ctxs, dz)
            sig = sig + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        _, out_last, _ = _chain_rhs(sig, times[-1], inflow, ctxs, dz)
        out_series[:, -1] = out_last
        in_series[:, -1] = inflow(times[-1])
        if not np.all(np.isfinite(sig)):
            raise DivergenceError(f"non-finite spin state after window {w}")
        outputs.append(FieldState(envelopes=out_series, times=times.copy()))
        window_energies.append({
            "window": w,
            "input": float(np.trapezoid(np.sum(np.abs(in_series) ** 2, axis=0), times)),
            "output": float(np.trapezoid(np.sum(np.abs(out_series) ** 2, axis=0), times)),
        })

    out_windows = schedule.output_windows()
    input_energy = sum(we["input"] for we in window_energies)
    output_energy = sum(window_energies[w]["output"] for w in out_windows)
    efficiency = output_energy / input_energy if input_energy > 0 else 0.0
    if efficiency > 1.0 + 1e-3:
        raise DivergenceError(f"efficiency {efficiency:.4f} exceeds unity beyond tolerance")

    overlap = None
    if ideal is not None:
        efficiency, overlap = _efficiency_overlap(
            [outputs[w] for w in out_windows], ideal, input_energy)

    residual = [
        SpinState(sigma=sig[c].copy(), z=grid.z, cell_id=cells[c].id)
        for c in range(schedule.n_cells)
    ]
    result = NetworkResult(
        outputs=outputs,
        residual_spins=residual,
        efficiency=float(efficiency),
        overlap=overlap,
        input_energy=float(input_energy),
        window_energies=window_energies,
        output_windows=out_windows,
    )
    if options.record_heatmap and heat_t:
        result.heatmap_field = np.asarray(heat_field).T
        result.heatmap_spin = np.asarray(heat_spin).T
        result.heatmap_times = np.asarray(heat_t)
        result.heatmap_z = np.concatenate([grid.z + i for i in range(schedule.n_cells)])
    return result


def _warn_on_margins(cells, schedule, spectrum, options):
    if spectrum.n_modes < 2:
        return
    for cell, row in zip(cells, schedule.entries):
        for entry in row:
            if entry.coupling is None or not np.any(entry.coupling.amplitudes):
                continue
            report = margin_report(spectrum, entry.coupling, cell.atoms,
                                   threshold=options.margin_threshold)
            if not (report.pass7 and report.pass9):
                warnings.warn(
                    f"cell '{cell.id}': validity margins below threshold "
                    f"(margin7 = {report.margin7:.3g}, margin9 = {report.margin9:.3g})",
                    RuntimeWarning,
                    stacklevel=3,
                )
                return


def simulate_cell(cell: MemoryCell, entry: ScheduleEntry, pulse, grid: Grid,
                  spectrum: ModeSpectrum, options: SimOptions = SimOptions(),
                  initial_spin: np.ndarray | None = None):
    """Single cell, single window; returns (output FieldState, SpinState).

    ``pulse`` may be None for a window without inflow (for example recall).
    Seed ``initial_spin`` (shape (nz,)) to chain windows manually.
    """
    schedule = Schedule(entries=((entry,),))
    inputs = {0: pulse} if pulse is not None else {}
    seed = None
    if initial_spin is not None:
        seed = np.asarray(initial_spin, dtype=complex)[None, :]
    result = simulate_network([cell], schedule, inputs, grid, spectrum, options,
                              initial_spins=seed)
    return result.outputs[0], result.residual_spins[0]


def echo_center(schedule: Schedule, grid: Grid, pulse_center: float,
                store_window: int = 0) -> tuple[int, float]:
    """Predict (window, window-local time) of the gradient-echo re-emission.

    Tracks the signed dephasing accumulated from the pulse centre onwards
    and finds where it returns to zero.  Requires uniform gradient signs
    across cells within each window.
    """
    signs = []
    for w in range(schedule.n_windows):
        col = {row[w].gradient_sign for row in schedule.entries}
        if len(col) != 1:
            raise ScheduleError("echo prediction requires uniform gradient signs per window")
        signs.append(col.pop())
    acc = signs[store_window] * (grid.window - pulse_center)
    for w in range(store_window + 1, schedule.n_windows):
        s = signs[w]
        if s != 0 and 0.0 <= -acc / s <= grid.window:
            return w, -acc / s
        acc += s * grid.window
    raise ScheduleError("no rephasing point inside the scheduled windows")


def echo_template(pulse: GaussianPulse, grid: Grid, center_local: float,
                  amplitudes: np.ndarray) -> FieldState:
    """Time-reversed copy of the input pulse centred at the echo time.

    ``amplitudes`` carries the per-mode complex weights expected at the
    output (for a compiled pair: the ideal transfer applied to the input
    weights).  A symmetric Gaussian is its own time reverse, so only the
    centre moves.
    """
    times = grid.times
    env = pulse.envelope(times - (center_local - pulse.center))
    return FieldState(
        envelopes=np.asarray(amplitudes, dtype=complex)[:, None] * env[None, :],
        times=times.copy(),
    )


def _efficiency_overlap(outputs: list[FieldState], ideal: list[FieldState],
                        input_energy: float):
    if len(outputs) != len(ideal):
        raise ValidationError("outputs and ideal must cover the same windows")
    e_out = sum(o.energy() for o in outputs)
    e_ideal = sum(i.energy() for i in ideal)
    if e_ideal <= 0:
        raise UndefinedOverlapError("ideal output has zero energy")
    inner = 0.0 + 0.0j
    for o, i in zip(outputs, ideal):
        if o.envelopes.shape != i.envelopes.shape:
            raise ValidationError("output/ideal grids do not match")
        inner += np.trapezoid(
            np.sum(o.envelopes * np.conj(i.envelopes), axis=0), o.times)
    efficiency = e_out / input_energy if input_energy > 0 else 0.0
    overlap = abs(inner) ** 2 / (e_out * e_ideal) if e_out > 0 else 0.0
    return float(efficiency), float(overlap)


def efficiency_and_overlap(result: NetworkResult, ideal: list[FieldState]):
    """Energy ratio and global-phase-insensitive overlap against an ideal."""
    outputs = [result.outputs[w] for w in result.output_windows]
    return _efficiency_overlap(outputs, ideal, result.input_energy)


def reference_echo(cell: MemoryCell, omega_tilde_value: float, pulse: GaussianPulse,
                   grid: Grid, mean_detuning: float,
                   options: SimOptions = SimOptions()) -> FieldState:
    """Recall-window echo of one identity-coupled cell, unit energy.

    Serves as the ideal temporal mode for overlap and transfer extraction:
    every memory in a compiled chain emits this same shape (its pattern is
    dark for all downstream cells), so deviations from it measure
    mode-space infidelity rather than the common re-emission shape.
    """
    sp1 = ModeSpectrum(mean_detuning=mean_detuning,
                       detunings=np.array([mean_detuning]))
    cv = CouplingVector(np.array([omega_tilde_value * mean_detuning]))
    sched = Schedule(entries=((
        ScheduleEntry(event="store", coupling=cv, gradient_sign=1),
        ScheduleEntry(event="recall", coupling=cv, gradient_sign=-1),
    ),))
    probe = GaussianPulse(fwhm=pulse.fwhm, center=pulse.center,
                          mode_amplitudes=np.array([1.0]))
    opts = replace(options, record_heatmap=False, check_margins=False)
    res = simulate_network([cell], sched, {0: probe}, grid, sp1, opts)
    out = res.outputs[1]
    scale = 1.0 / math.sqrt(out.energy())
    return FieldState(envelopes=out.envelopes * scale, times=out.times.copy())


def ideal_output(transfer_matrix: np.ndarray, input_amplitudes: np.ndarray,
                 temporal_mode: FieldState, single_pulse_energy: float) -> list[FieldState]:
    """Ideal per-mode output envelopes for one output window.

    ``temporal_mode`` must have unit energy; the template is scaled so a
    lossless transfer reproduces the input energy.
    """
    amps = np.asarray(transfer_matrix, dtype=complex) @ np.asarray(input_amplitudes,
                                                                   dtype=complex)
    scale = math.sqrt(single_pulse_energy)
    return [FieldState(
        envelopes=scale * amps[:, None] * temporal_mode.envelopes[0][None, :],
        times=temporal_mode.times.copy(),
    )]


def _basis_probe(args):
    (cells, schedule, grid, spectrum, options, pulse, indices) = args
    n = spectrum.n_modes
    results = []
    for j in indices:
        amps = np.zeros(n, dtype=complex)
        amps[j] = 1.0
        probe = replace(pulse, mode_amplitudes=amps)
        res = simulate_network(cells, schedule, {0: probe}, grid, spectrum, options)
        results.append((j, res))
    return results


def default_temporal_mode(cells, schedule: Schedule, grid: Grid,
                          spectrum: ModeSpectrum, pulse: GaussianPulse,
                          options: SimOptions = SimOptions()) -> FieldState:
    """Unit-energy reference echo matching the schedule's coupling weight."""
    first_store = next(
        (row[w].coupling for row in schedule.entries
         for w in range(schedule.n_windows) if row[w].event == "store"), None)
    if first_store is None:
        raise ScheduleError("schedule contains no store event")
    ot = float(np.linalg.norm(first_store.amplitudes / spectrum.detunings))
    return reference_echo(cells[0], ot, pulse, grid, spectrum.mean_detuning, options)


def extract_transfer_matrix(cells, schedule: Schedule, grid: Grid,
                            spectrum: ModeSpectrum, pulse: GaussianPulse,
                            options: SimOptions = SimOptions(),
                            temporal_mode: FieldState | None = None,
                            jobs: int = 1) -> np.ndarray:
    """Realised mode-transfer matrix from N basis-input simulations.

    Entry (k, j) is the complex overlap of output mode k against the ideal
    recalled temporal mode when only input mode j is fed, normalised so
    that |entry|^2 is the mode-to-mode energy efficiency.  The temporal
    mode defaults to the single-cell reference echo.
    """
    n = spectrum.n_modes
    win, _ = echo_center(schedule, grid, pulse.center)
    if temporal_mode is None:
        temporal_mode = default_temporal_mode(cells, schedule, grid, spectrum,
                                              pulse, options)
    psi = temporal_mode.envelopes[0]
    e_single = GaussianPulse(fwhm=pulse.fwhm, center=pulse.center,
                             mode_amplitudes=np.array([1.0])).energy()
    probe_options = replace(options, record_heatmap=False, check_margins=False)

    matrix = np.zeros((n, n), dtype=complex)
    chunks = [c.tolist() for c in np.array_split(np.arange(n), max(1, jobs)) if c.size]
    tasks = [(cells, schedule, grid, spectrum, probe_options, pulse, chunk)
             for chunk in chunks]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = [item for got in pool.map(_basis_probe, tasks) for item in got]
    else:
        outcomes = [item for task in tasks for item in _basis_probe(task)]
    for j, res in outcomes:
        out = res.outputs[win]
        matrix[:, j] = np.trapezoid(out.envelopes * np.conj(psi)[None, :],
                                    out.times, axis=1) / math.sqrt(e_single)
    return matrix


def simulate_eq5(cell: MemoryCell, entries, pulse, grid: Grid,
                 spectrum: ModeSpectrum, options: SimOptions = SimOptions()):
    """Single-excited-state dynamics with the full oscillatory coupling.

    All Raman transitions share one excited state at the mean detuning D.
    The total coupling W(t) = sum_k W_k exp(i (D_k - D) t) and the composite
    probe E(t) = sum_k E_k(t) exp(i (D_k - D) t) beat at the mode spacings,
    so dt must resolve the fastest beat (20 points per period).  The spin
    decays through the instantaneous (Gamma + i D) |W(t)|^2 / D^2 term, so
    power broadening and the light shift oscillate instead of being folded
    into constant effective rates.

    Returns (list of composite single-row FieldState per window, SpinState).
    """
    pair_beats = [abs(a - b) for i, a in enumerate(spectrum.detunings)
                  for b in spectrum.detunings[i + 1:]]
    if pair_beats:
        fastest = max(pair_beats)
        limit = 2.0 * math.pi / (20.0 * fastest)
        if grid.dt > limit:
            raise StepSizeError(
                f"dt = {grid.dt} does not resolve the fastest beat (need <= {limit:.4g})"
            )
    beats = spectrum.detunings - spectrum.mean_detuning
    atoms = cell.atoms
    dmean = spectrum.mean_detuning
    ncal = atoms.coupling_density
    z = grid.z
    dz = 1.0 / (grid.nz - 1)
    times = grid.times
    sig = np.zeros(grid.nz, dtype=complex)
    outputs = []
    gamma_scale = 1.0 if options.power_broadening else 0.0

    for w, entry in enumerate(entries):
        t_base = w * grid.window  # beat phases run on absolute time
        grad = entry.gradient_sign * cell.gradient_eta * (z - 0.5)
        coupling_on = entry.coupling is not None and bool(np.any(entry.coupling.amplitudes))
        if coupling_on:
            amps = entry.coupling.amplitudes
            static_shift = float(np.sum(np.abs(amps) ** 2)) / dmean
            delta_uniform = atoms.delta + (0.0 if options.auto_two_photon else static_shift)
            offset = -static_shift if options.auto_two_photon else 0.0
        else:
            amps = None
            delta_uniform = atoms.delta
            offset = 0.0
        pulse_w = pulse if w == 0 else None

        def inflow(t, p=pulse_w, t_base=t_base):
            if p is None:
                return 0.0j
            return complex(np.sum(p(t) * np.exp(1j * beats * (t_base + t))))

        def rhs(s, t, amps=amps, grad=grad, delta_uniform=delta_uniform, offset=offset,
                inflow=inflow, t_base=t_base):
            if amps is None:
                ds = -(atoms.gamma + 1j * (delta_uniform + grad)) * s
                return ds, np.full(grid.nz, inflow(t), dtype=complex)
            om = complex(np.sum(amps * np.exp(1j * beats * (t_base + t))))
            ratio = om / dmean
            incr = 1j * ncal * ratio * s
            efield = np.empty(grid.nz, dtype=complex)
            efield[0] = inflow(t)
            efield[1:] = efield[0] + np.cumsum(0.5 * dz * (incr[1:] + incr[:-1]))
            stark = (gamma_scale * atoms.Gamma + 1j * dmean) * (abs(om) ** 2 / dmean ** 2)
            decay = atoms.gamma + stark + 1j * (delta_uniform + offset + grad)
            ds = -decay * s + 1j * np.conj(ratio) * efield
            return ds, efield

        out_series = np.empty(grid.nt + 1, dtype=complex)
        dt = grid.dt
        for n in range(grid.nt):
            t = times[n]
            k1, ef = rhs(sig, t)
            out_series[n] = ef[-1]
            k2, _ = rhs(sig + 0.5 * dt * k1, t + 0.5 * dt)
            k3, _ = rhs(sig + 0.5 * dt * k2, t + 0.5 * dt)
            k4, _ = rhs(sig + dt * k3, t + dt)
            sig = sig + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        _, ef = rhs(sig, times[-1])
        out_series[-1] = ef[-1]
        if not np.all(np.isfinite(sig)):
            raise DivergenceError(f"non-finite spin state after window {w}")
        outputs.append(FieldState(envelopes=out_series[None, :], times=times.copy()))

    spin = SpinState(sigma=sig, z=grid.z, cell_id=cell.id)
    return outputs, spin


def composite_output(result: NetworkResult, spectrum: ModeSpectrum,
                     window: int, window_offset: float = 0.0) -> FieldState:
    """Recombine per-mode envelopes into the beating composite field.

    Used to compare multi-transition runs against the single-excited-state
    model, whose output is inherently composite.  ``window_offset`` is the
    absolute start time of the window so the beat phases line up.
    """
    out = result.outputs[window]
    beats = spectrum.detunings - spectrum.mean_detuning
    phases = np.exp(1j * np.outer(beats, out.times + window_offset))
    composite = np.sum(out.envelopes * phases, axis=0)
    return FieldState(envelopes=composite[None, :], times=out.times.copy())


def write_heatmap_csv(path, matrix: np.ndarray, times: np.ndarray, z: np.ndarray,
                      grid: Grid, n_cells: int) -> None:
    """Heatmap CSV: rows = z index, columns = t index, one metadata header row."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(
            f"nz={grid.nz},n_cells={n_cells},dt={grid.dt},window={grid.window},"
            f"n_times={len(times)},t0={times[0]},t1={times[-1]}\n"
        )
        for row in matrix:
            fh.write(",".join(f"{v:.8e}" for v in row) + "\n")
