"""Few-photon linear optics: occupation-number states, permanents, heralding.

Verifies the conditional-gate logic that amplitude-level field simulation
cannot express: photon counting, post-selection on detector patterns, and
feed-forward between gate stages.  States live in a small Fock space (mode
occupations capped at ``photon_cap``); a multimode unitary acts through the
standard permanent homomorphism

    <m| U |n> = per(U[m, n]) / sqrt(prod m_i! prod n_j!),

where U[m, n] repeats row i m_i times and column j n_j times, with the
single-photon convention  a_k+  ->  sum_j U_jk a_j+.

The nonlinear-sign unitary is derived on first use by a numerical
constraint solve (success amplitude +1/2 on the zero- and one-photon
components, -1/2 on the two-photon component, heralded on the ancilla
pattern (1, 0)); no gate constants are hard-coded.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.linalg import expm
from scipy.optimize import least_squares

from .compiler import UnitarySpec, compile_write
from .core import MemspinError, ModeSpectrum, ValidationError

PERMANENT_CAP = 6
DEFAULT_PHOTON_CAP = 4
MODE_CAP = 10
ROLES = ("prepare", "measure", "write", "transfer", "feedforward")


class CapacityError(MemspinError):
    """Photon number or matrix size beyond the configured caps."""


class ConditioningError(MemspinError):
    """Conditioning on a measurement pattern of zero probability."""


class PolicyError(MemspinError):
    """A measured pattern has no branch in the feed-forward policy."""


class DerivationError(MemspinError):
    """The numerical gate-constraint solve did not converge."""


def permanent(matrix: np.ndarray) -> complex:
    """Permanent of a square matrix by Ryser's inclusion-exclusion formula."""
    a = np.asarray(matrix, dtype=complex)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValidationError("permanent requires a square matrix")
    n = a.shape[0]
    if n > PERMANENT_CAP:
        raise CapacityError(f"permanent limited to n <= {PERMANENT_CAP}, got {n}")
    if n == 0:
        return 1.0 + 0.0j
    total = 0.0 + 0.0j
    for s in range(1, 1 << n):
        cols = [j for j in range(n) if (s >> j) & 1]
        total += (-1) ** len(cols) * np.prod(np.sum(a[:, cols], axis=1))
    return complex((-1) ** n * total)


def _compositions(total: int, parts: int):
    """All tuples of ``parts`` non-negative ints summing to ``total``."""
    if parts == 1:
        yield (total,)
        return
    for first in range(total + 1):
        for rest in _compositions(total - first, parts - 1):
            yield (first,) + rest


@dataclass
class FockState:
    """Superposition over occupation tuples of ``n_modes`` modes."""

    amplitudes: dict
    n_modes: int
    photon_cap: int = DEFAULT_PHOTON_CAP

    def __post_init__(self):
        if self.n_modes > MODE_CAP:
            raise CapacityError(f"{self.n_modes} modes exceed the mode cap {MODE_CAP}")
        for occ, amp in self.amplitudes.items():
            if len(occ) != self.n_modes:
                raise ValidationError(f"occupation {occ} does not span {self.n_modes} modes")
            if any(n < 0 or n > self.photon_cap for n in occ):
                raise CapacityError(f"occupation {occ} exceeds photon cap {self.photon_cap}")

    @classmethod
    def from_occupation(cls, occ, photon_cap: int = DEFAULT_PHOTON_CAP) -> "FockState":
        occ = tuple(int(n) for n in occ)
        return cls(amplitudes={occ: 1.0 + 0.0j}, n_modes=len(occ), photon_cap=photon_cap)

    def norm(self) -> float:
        return math.sqrt(sum(abs(a) ** 2 for a in self.amplitudes.values()))

    def normalized(self) -> "FockState":
        n = self.norm()
        if n == 0:
            raise ValidationError("cannot normalise the zero state")
        return FockState(
            amplitudes={k: v / n for k, v in self.amplitudes.items()},
            n_modes=self.n_modes, photon_cap=self.photon_cap)

    def inner(self, other: "FockState") -> complex:
        """<self|other> over the shared occupation basis."""
        if other.n_modes != self.n_modes:
            raise ValidationError("states live on different mode counts")
        return complex(sum(
            np.conj(v) * other.amplitudes[k]
            for k, v in self.amplitudes.items() if k in other.amplitudes))

    def fidelity(self, other: "FockState") -> float:
        denom = self.norm() * other.norm()
        if denom == 0:
            return 0.0
        return abs(self.inner(other)) ** 2 / denom ** 2

    def total_photons(self) -> set[int]:
        return {sum(occ) for occ in self.amplitudes}


def apply_unitary(state: FockState, u: UnitarySpec, modes) -> FockState:
    """Act with a linear-optical unitary on a subset of modes.

    Amplitudes on the acted modes transform through matrix permanents over
    occupation-expanded submatrices; the remaining modes ride along.
    """
    modes = tuple(int(m) for m in modes)
    if len(modes) != u.n:
        raise ValidationError(f"{u.n}x{u.n} unitary applied to {len(modes)} modes")
    if any(m < 0 or m >= state.n_modes for m in modes):
        raise ValidationError("mode index out of range")
    if len(set(modes)) != len(modes):
        raise ValidationError("duplicate mode indices")

    mat = u.matrix
    block_cache: dict = {}

    def block(n_sub, m_sub):
        key = (n_sub, m_sub)
        if key not in block_cache:
            rows = [i for i, m in enumerate(m_sub) for _ in range(m)]
            cols = [j for j, n in enumerate(n_sub) for _ in range(n)]
            sub = mat[np.ix_(rows, cols)]
            norm = math.sqrt(
                math.prod(math.factorial(m) for m in m_sub)
                * math.prod(math.factorial(n) for n in n_sub))
            block_cache[key] = permanent(sub) / norm
        return block_cache[key]

    out: dict = {}
    for occ, amp in state.amplitudes.items():
        n_sub = tuple(occ[m] for m in modes)
        p = sum(n_sub)
        if p > state.photon_cap:
            raise CapacityError(
                f"{p} photons on the acted modes exceed photon cap {state.photon_cap}")
        if p == 0:
            out[occ] = out.get(occ, 0.0 + 0.0j) + amp
            continue
        for m_sub in _compositions(p, len(modes)):
            if any(n > state.photon_cap for n in m_sub):
                raise CapacityError("output occupation exceeds photon cap")
            coeff = block(n_sub, m_sub)
            if coeff == 0:
                continue
            new_occ = list(occ)
            for m, n in zip(modes, m_sub):
                new_occ[m] = n
            key = tuple(new_occ)
            out[key] = out.get(key, 0.0 + 0.0j) + amp * coeff
    out = {k: v for k, v in out.items() if abs(v) > 1e-15}
    return FockState(amplitudes=out, n_modes=state.n_modes, photon_cap=state.photon_cap)


@dataclass
class MeasurementOutcome:
    """One detector pattern with its probability and the surviving state."""

    pattern: tuple
    probability: float
    conditioned_state: FockState | None
    success: bool = True


def measure_and_condition(state: FockState, modes, pattern) -> MeasurementOutcome:
    """Project the given modes onto a photon-count pattern.

    The measured modes are removed; the returned state lives on the
    remaining modes and is renormalised.
    """
    modes = tuple(int(m) for m in modes)
    pattern = tuple(int(p) for p in pattern)
    if len(modes) != len(pattern):
        raise ValidationError("pattern length must match the measured modes")
    keep = [m for m in range(state.n_modes) if m not in modes]
    prob = 0.0
    reduced: dict = {}
    for occ, amp in state.amplitudes.items():
        if tuple(occ[m] for m in modes) != pattern:
            continue
        prob += abs(amp) ** 2
        key = tuple(occ[m] for m in keep)
        reduced[key] = reduced.get(key, 0.0 + 0.0j) + amp
    if prob == 0.0:
        raise ConditioningError(f"pattern {pattern} has zero probability")
    scale = 1.0 / math.sqrt(prob)
    cond = FockState(
        amplitudes={k: v * scale for k, v in reduced.items()},
        n_modes=len(keep), photon_cap=state.photon_cap)
    return MeasurementOutcome(pattern=pattern, probability=prob, conditioned_state=cond)


def measurement_distribution(state: FockState, modes) -> list[MeasurementOutcome]:
    """All patterns with nonzero probability on the given modes."""
    modes = tuple(int(m) for m in modes)
    patterns = {tuple(occ[m] for m in modes) for occ in state.amplitudes}
    outcomes = [measure_and_condition(state, modes, p) for p in sorted(patterns)]
    return outcomes


@dataclass(frozen=True)
class GateStage:
    """One unitary applied to a subset of modes, with a protocol role."""

    unitary: UnitarySpec
    modes: tuple
    label: str
    role: str

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValidationError(f"unknown stage role '{self.role}'")
        if len(self.modes) != self.unitary.n:
            raise ValidationError("stage mode list must match its unitary size")


def embed_unitary(u: np.ndarray, modes, n_total: int) -> np.ndarray:
    """Embed a small unitary into an identity on ``n_total`` modes."""
    full = np.eye(n_total, dtype=complex)
    idx = np.asarray(modes, dtype=int)
    full[np.ix_(idx, idx)] = u
    return full


def beamsplitter(theta: float = math.pi / 4) -> UnitarySpec:
    """Real symmetric two-mode mixer; theta = pi/4 gives the balanced case."""
    c, s = math.cos(theta), math.sin(theta)
    return UnitarySpec(matrix=np.array([[c, s], [s, -c]]), label="bs")


def _ns_amplitudes(u: np.ndarray) -> np.ndarray:
    """Heralded amplitudes for signal photon numbers 0, 1, 2.

    Signal on mode 0, ancillas prepared in (1, 0) and heralded on (1, 0).
    """
    a0 = u[1, 1]
    a1 = u[0, 0] * u[1, 1] + u[0, 1] * u[1, 0]
    sub = u[np.ix_([0, 0, 1], [0, 0, 1])]
    a2 = permanent(sub) / 2.0
    return np.array([a0, a1, a2])


_NS_TARGET = np.array([0.5, 0.5, -0.5])


@lru_cache(maxsize=1)
def ns_gate() -> UnitarySpec:
    """Derive the 3-mode nonlinear-sign unitary by constraint solving.

    Finds U = expm(iH) (H hermitian, 9 real parameters) whose heralded
    amplitudes on the ancilla pattern (1, 0) equal (1/2, 1/2, -1/2), i.e.
    the two-photon component of the signal flips sign with success
    probability 1/4.  The solve is deterministic (fixed starting points).
    """

    def unpack(x):
        h = np.diag(x[:3]).astype(complex)
        (i01, i02, i12) = ((0, 1), (0, 2), (1, 2))
        for (i, j), re, im in zip((i01, i02, i12), x[3:6], x[6:9]):
            h[i, j] = re + 1j * im
            h[j, i] = re - 1j * im
        return h

    def residuals(x):
        u = expm(1j * unpack(x))
        diff = _ns_amplitudes(u) - _NS_TARGET
        return np.concatenate([diff.real, diff.imag])

    for attempt in range(8):
        rng = np.random.default_rng(1234 + attempt)
        x0 = rng.uniform(-1.5, 1.5, size=9)
        sol = least_squares(residuals, x0, xtol=3e-16, ftol=3e-16, gtol=3e-16,
                            max_nfev=4000)
        if np.max(np.abs(sol.fun)) < 1e-12:
            u = expm(1j * unpack(sol.x))
            return UnitarySpec(matrix=u, label="ns")
    raise DerivationError("nonlinear-sign constraint solve failed to converge")


@dataclass(frozen=True)
class FeedforwardPolicy:
    """Maps measured patterns to the stages that complete the protocol."""

    measure_modes: tuple
    branches: dict
    default: tuple | None = None  # (stages, success) for unlisted patterns


def run_with_feedforward(stages, input_state: FockState,
                         policy: FeedforwardPolicy) -> list[MeasurementOutcome]:
    """Execute stages, branch on the measured pattern, finish per policy.

    Stages are applied in order until (and including) the first stage with
    role ``measure``; the listed modes are then measured and each observed
    pattern is continued with the stages its policy branch selects.
    Returns one outcome per observed pattern, each carrying the cumulative
    probability and the final conditioned state of its branch.
    """
    state = input_state
    measured = False
    for i, stage in enumerate(stages):
        state = apply_unitary(state, stage.unitary, stage.modes)
        if stage.role == "measure":
            measured = True
            break
    if not measured:
        return [MeasurementOutcome(pattern=(), probability=1.0,
                                   conditioned_state=state, success=True)]

    outcomes = []
    for base in measurement_distribution(state, policy.measure_modes):
        branch = policy.branches.get(base.pattern, policy.default)
        if branch is None:
            raise PolicyError(f"no policy branch for measured pattern {base.pattern}")
        branch_stages, success = branch
        final = base.conditioned_state
        for stage in branch_stages:
            final = apply_unitary(final, stage.unitary, stage.modes)
        outcomes.append(MeasurementOutcome(
            pattern=base.pattern, probability=base.probability,
            conditioned_state=final, success=success))
    return outcomes


# ---------------------------------------------------------------------------
# Conditional-phase network on two dual-rail qubits
# ---------------------------------------------------------------------------

# Mode layout: qubit 1 rails (0, 1), qubit 2 rails (2, 3) with the logical-1
# rails adjacent (modes 1 and 2), ancilla pairs (4, 5) and (6, 7).
CZ_MODES = 8
CZ_ANCILLA_MODES = (4, 5, 6, 7)
CZ_HERALD_PATTERN = (1, 0, 1, 0)


def cz_network() -> list[GateStage]:
    """Stage list for the heralded conditional-phase gate.

    Balanced mixing of the two logical-1 rails, a nonlinear-sign core on
    each output arm, measurement of the four ancillas, and the inverse
    mixing.  On the herald pattern (1, 0, 1, 0) the composition acts as a
    conditional phase flip on the qubits with success probability 1/16.
    """
    bs = beamsplitter()
    ns = ns_gate()
    n = CZ_MODES
    prepare_full = (
        embed_unitary(ns.matrix, (1, 4, 5), n)
        @ embed_unitary(ns.matrix, (2, 6, 7), n)
        @ embed_unitary(bs.matrix, (1, 2), n)
    )
    sub = (1, 2, 4, 5, 6, 7)
    prepare = UnitarySpec(matrix=prepare_full[np.ix_(sub, sub)], label="u1")
    return [
        GateStage(unitary=prepare, modes=sub, label="U1", role="prepare"),
        GateStage(unitary=UnitarySpec(np.eye(4), label="u2"),
                  modes=CZ_ANCILLA_MODES, label="U2", role="measure"),
        GateStage(unitary=UnitarySpec(np.eye(4), label="u3"),
                  modes=(0, 1, 2, 3), label="U3", role="write"),
        GateStage(unitary=UnitarySpec(bs.matrix, label="u4"),
                  modes=(1, 2), label="U4", role="transfer"),
        GateStage(unitary=UnitarySpec(np.eye(4), label="u5"),
                  modes=(0, 1, 2, 3), label="U5", role="feedforward"),
    ]


def cz_policy(stages) -> FeedforwardPolicy:
    """Success branch on the herald pattern; everything else is a flagged miss."""
    tail = tuple(s for s in stages[2:])
    return FeedforwardPolicy(
        measure_modes=CZ_ANCILLA_MODES,
        branches={CZ_HERALD_PATTERN: (tail, True)},
        default=((), False),
    )


def dual_rail_input(q1_amps, q2_amps, photon_cap: int = DEFAULT_PHOTON_CAP) -> FockState:
    """Two dual-rail qubits plus the two ancilla photons of the gate.

    ``q1_amps`` and ``q2_amps`` are (amp_logical0, amp_logical1); logical 1
    occupies the inner rails (modes 1 and 2).
    """
    amps = {}
    for b1, occ1 in ((0, (1, 0)), (1, (0, 1))):
        for b2, occ2 in ((0, (0, 1)), (1, (1, 0))):
            a = complex(q1_amps[b1]) * complex(q2_amps[b2])
            if a == 0:
                continue
            occ = occ1 + occ2 + (1, 0, 1, 0)
            amps[occ] = a
    if not amps:
        raise ValidationError("input qubit amplitudes are all zero")
    state = FockState(amplitudes=amps, n_modes=CZ_MODES, photon_cap=photon_cap)
    return state.normalized()


def dual_rail_cz_ideal(q1_amps, q2_amps, photon_cap: int = DEFAULT_PHOTON_CAP) -> FockState:
    """The conditional-phase action on the qubit rails (no ancillas)."""
    amps = {}
    for b1, occ1 in ((0, (1, 0)), (1, (0, 1))):
        for b2, occ2 in ((0, (0, 1)), (1, (1, 0))):
            a = complex(q1_amps[b1]) * complex(q2_amps[b2])
            if a == 0:
                continue
            if b1 == 1 and b2 == 1:
                a = -a
            amps[occ1 + occ2] = a
    state = FockState(amplitudes=amps, n_modes=4, photon_cap=photon_cap)
    return state.normalized()


def stage_plans(stages, spectrum: ModeSpectrum, omega_tilde_target: float) -> list[dict]:
    """Serialise each stage to the coupling-plan JSON shape.

    Every stage unitary is embedded into the full mode count and compiled
    into per-memory coupling rows, giving the hand-off format shared with
    the plan compiler.
    """
    if spectrum.n_modes != CZ_MODES:
        raise ValidationError(f"stage export needs a {CZ_MODES}-mode spectrum")
    plans = []
    for stage in stages:
        full = embed_unitary(stage.unitary.matrix, stage.modes, CZ_MODES)
        spec = UnitarySpec(matrix=full, label=stage.label)
        plan = compile_write(spec, spectrum, omega_tilde_target)
        data = plan.to_json_dict()
        data["label"] = stage.label
        data["role"] = stage.role
        plans.append(data)
    return plans
