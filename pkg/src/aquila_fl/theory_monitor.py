"""Per-round numeric verification of the convergence guarantees.

Every check below re-evaluates an inequality that is supposed to hold for
the round loop, computed *from scratch*: losses and gradients come from the
problem, norms from the raw per-device vectors in the round traces, never
from telemetry cached by the round loop. A violation is recorded, not
raised, so a run always yields a complete ledger.

Checked quantities, per round k >= 1 (M devices, skip set Mc, learning
rate alpha, skip factor beta, smoothness L, error-concentration factor
gamma, granularity tau_m, range R_m, active dimension d_m):

  error concentration   gamma_hat = ||avg eps||^2 * M^2 / ||sum_Mc eps_m||^2,
                        the smallest factor that bounds the global error by
                        the skipped devices' error; gamma_max over the run
                        (floored at 1) feeds the remaining checks.
  skip energy           ||avg_Mc dq||^2 + ||avg eps||^2
                          <= (beta * gamma / alpha^2) * ||t_k - t_{k-1}||^2.
  descent               f(t_{k+1}) - f(t_k) <= -(alpha/2) ||grad f(t_k)||^2
                          + (L/2 - 1/(2 alpha)) ||t_{k+1} - t_k||^2
                          + (beta gamma / alpha) ||t_k - t_{k-1}||^2.
  skip deviation        || t_tilde - t_{k+1} ||^2, the gap to the
                        counterfactual model had nobody skipped, is at most
                        4 Gamma * sum_Mc ((||v_m|| - tau_m R_m sqrt(d_m))^2
                        + 6 R_m^2 d_m), Gamma = alpha^2 |Mc| / M^2. The
                        looser "+4 R^2 d + d/2" variant that is sometimes
                        quoted is recorded alongside but not asserted.
  full participation    on rounds where nobody skips, under the gate
                        (alpha L - 1)(1 + 1/p) + 2 <= 0:
                        f(t_{k+1}) - f(t_k) <= -(alpha/2) ||grad f(t_k)||^2.
  curvature floor       ||grad f(t_k)||^2 >= 2 mu (f(t_k) - f*)
                        (quadratics only, certified mu).

Run-level certificates aggregate these into PASS / FAIL /
CONDITION_NOT_MET / VACUOUS, plus two rate certificates: the geometric
contraction of f - f* + (1/(2 alpha) - L/2) ||t_k - t_{k-1}||^2 under the
curvature floor, and the prefix bound on min_k ||grad f(t_k)||^2 in the
general non-convex case.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import problems
from .numerics import Vector, norm2_sq
from .quantizer import granularity

TOLERANCE = 1e-9

PASS = "PASS"
FAIL = "FAIL"
CONDITION_NOT_MET = "CONDITION_NOT_MET"
VACUOUS = "VACUOUS"


# ---------------------------------------------------------------------------
# per-round data, assembled independently from the traces
# ---------------------------------------------------------------------------


@dataclass
class RoundData:
    """Everything one round's checks need, in raw-vector form."""

    round: int
    alpha: float
    beta: float
    n_devices: int
    theta_prev: Vector          # t_{k-1}
    theta: Vector               # t_k
    theta_next: Vector          # t_{k+1} actually taken
    theta_tilde: Vector         # counterfactual: nobody skips this round
    loss: float                 # f(t_k)
    loss_next: float            # f(t_{k+1})
    grad: Vector                # global average gradient at t_k
    innovations: list[Vector]
    decodeds: list[Vector]
    skipped: list[bool]
    levels: list[int]
    ranges: list[float]
    active_dims: list[int]

    @property
    def skipped_ids(self) -> list[int]:
        return [m for m, s in enumerate(self.skipped) if s]

    def epsilons(self) -> list[Vector]:
        return [v - dq for v, dq in zip(self.innovations, self.decodeds)]


def estimate_gamma(rd: RoundData) -> float | None:
    """Tightest error-concentration factor for this round, if defined."""
    mc = rd.skipped_ids
    if not mc:
        return None
    eps = rd.epsilons()
    avg = sum(eps) / rd.n_devices
    tail = sum(eps[m] for m in mc)
    denom = norm2_sq(tail)
    if denom == 0.0:
        return None
    return norm2_sq(avg) * rd.n_devices ** 2 / denom


def gamma_round_state(rd: RoundData) -> str:
    """'ok' | 'vacuous' (zero error everywhere) | 'undefined' (assumption fails)."""
    mc = rd.skipped_ids
    if not mc:
        return "ok"
    eps = rd.epsilons()
    if norm2_sq(sum(eps[m] for m in mc)) > 0.0:
        return "ok"
    if norm2_sq(sum(eps) / rd.n_devices) == 0.0:
        return "vacuous"
    return "undefined"


def check_skip_energy(rd: RoundData, gamma: float) -> tuple[float, float]:
    """Combined skipped-innovation and error energy vs the movement threshold."""
    mc = rd.skipped_ids
    phi = sum((rd.decodeds[m] for m in mc), start=np.zeros(rd.theta.size)) / rd.n_devices
    eps_avg = sum(rd.epsilons()) / rd.n_devices
    lhs = norm2_sq(phi) + norm2_sq(eps_avg)
    rhs = rd.beta * gamma / rd.alpha ** 2 * norm2_sq(rd.theta - rd.theta_prev)
    return lhs, rhs


def check_descent(rd: RoundData, smooth_l: float, gamma: float) -> tuple[float, float]:
    """Per-round objective decrease against the smoothness + skip bound."""
    a = rd.alpha
    lhs = rd.loss_next - rd.loss
    rhs = (-0.5 * a * norm2_sq(rd.grad)
           + (0.5 * smooth_l - 0.5 / a) * norm2_sq(rd.theta_next - rd.theta)
           + rd.beta * gamma / a * norm2_sq(rd.theta - rd.theta_prev))
    return lhs, rhs


def check_deviation_bound(rd: RoundData) -> tuple[float, float, float] | None:
    """(lhs, rhs, rhs_stated_variant); None when nobody skipped (vacuous)."""
    mc = rd.skipped_ids
    if not mc:
        return None
    lhs = norm2_sq(rd.theta_tilde - rd.theta_next)
    big_gamma = rd.alpha ** 2 * len(mc) / rd.n_devices ** 2
    total = 0.0
    total_stated = 0.0
    for m in mc:
        r = rd.ranges[m]
        d_m = rd.active_dims[m]
        tau = granularity(rd.levels[m])
        gap = math.sqrt(norm2_sq(rd.innovations[m])) - tau * r * math.sqrt(d_m)
        total += gap * gap + 6.0 * r * r * d_m
        total_stated += gap * gap + 4.0 * r * r * d_m + 0.5 * d_m
    return lhs, 4.0 * big_gamma * total, 4.0 * big_gamma * total_stated


def check_full_participation_descent(rd: RoundData) -> tuple[float, float]:
    """On no-skip rounds the step must achieve plain halved-gradient descent."""
    lhs = rd.loss_next - rd.loss
    rhs = -0.5 * rd.alpha * norm2_sq(rd.grad)
    return lhs, rhs


def curvature_floor(rd: RoundData, pl_mu: float, f_star: float) -> tuple[float, float]:
    """Gradient-dominance pair: ||grad||^2 vs 2 mu (f - f*)."""
    return norm2_sq(rd.grad), 2.0 * pl_mu * (rd.loss - f_star)


# ---------------------------------------------------------------------------
# ledger assembly
# ---------------------------------------------------------------------------


@dataclass
class RoundChecks:
    round: int
    n_skipped: int
    gamma_est: float | None = None
    gamma_state: str = "ok"
    skip_energy_lhs: float | None = None
    skip_energy_rhs: float | None = None
    descent_lhs: float | None = None
    descent_rhs: float | None = None
    deviation_lhs: float | None = None
    deviation_rhs: float | None = None
    deviation_rhs_stated: float | None = None
    full_part_lhs: float | None = None
    full_part_rhs: float | None = None
    pl_lhs: float | None = None
    pl_rhs: float | None = None


@dataclass
class BoundLedger:
    rounds: list[RoundChecks] = field(default_factory=list)
    gamma_max: float = 1.0
    gamma_source: str = "measured"
    condition_flags: dict = field(default_factory=dict)
    certificates: dict = field(default_factory=dict)


def _certificate(margins: list[tuple[int, float]], tol: float = TOLERANCE,
                 unverified: int = 0, **extra) -> dict:
    """Fold per-round (round, rhs - lhs) margins into one certificate."""
    cert = {"status": VACUOUS, "worst_margin": None,
            "first_violation_round": None, "rounds_checked": len(margins)}
    if unverified:
        cert["unverified_rounds"] = unverified
    if margins:
        worst_round, worst = min(margins, key=lambda it: it[1])
        cert["worst_margin"] = worst
        violations = [(k, m) for k, m in margins if m < -tol]
        if violations:
            cert["status"] = FAIL
            cert["first_violation_round"] = violations[0][0]
        else:
            cert["status"] = PASS
        cert["worst_margin_round"] = worst_round
    cert.update(extra)
    return cert


def build_round_data(problem, traces, alpha: float, beta: float) -> list[RoundData]:
    """Reconstruct per-round raw data (including each device's accumulated
    quantized gradient and the counterfactual model) from the traces alone."""
    if len(traces) < 2:
        return []
    n = problem.n_devices
    d = problem.dim
    q_prev = [np.zeros(d) for _ in range(n)]
    # round 0 uploads unconditionally; fold it into the accumulators
    for dt in traces[0].devices:
        q_prev[dt.device_id] = q_prev[dt.device_id] + dt.decoded
    out = []
    for i in range(1, len(traces)):
        tr = traces[i]
        theta = tr.theta_start
        full_sum = np.zeros(d)
        for dt in tr.devices:
            full_sum += q_prev[dt.device_id] + dt.decoded
        theta_tilde = theta - alpha / n * full_sum
        rd = RoundData(
            round=tr.round, alpha=alpha, beta=beta, n_devices=n,
            theta_prev=traces[i - 1].theta_start, theta=theta,
            theta_next=tr.theta_end, theta_tilde=theta_tilde,
            loss=problems.global_loss(problem, theta),
            loss_next=problems.global_loss(problem, tr.theta_end),
            grad=problems.global_gradient(problem, theta),
            innovations=[dt.innovation for dt in tr.devices],
            decodeds=[dt.decoded for dt in tr.devices],
            skipped=[dt.skipped for dt in tr.devices],
            levels=[dt.level for dt in tr.devices],
            ranges=[dt.range for dt in tr.devices],
            active_dims=[dt.active_dim for dt in tr.devices])
        out.append(rd)
        for dt in tr.devices:
            if not dt.skipped:
                q_prev[dt.device_id] = q_prev[dt.device_id] + dt.decoded
    return out


def check_pl_convergence(rounds: list[RoundData], pl_mu: float, smooth_l: float,
                         gamma: float, f_star: float, tol: float = TOLERANCE) -> dict:
    """Geometric contraction certificate under the curvature floor.

    Requires a positive step-size margin c = 1/(2 alpha) - L/2, the gate
    beta * gamma / alpha <= (1 - alpha mu) * c, alpha mu < 1, and a nonempty
    skip set on every round of the horizon (the contraction is only derived
    under those hypotheses).
    """
    if not rounds:
        return {"status": VACUOUS, "worst_margin": None,
                "first_violation_round": None, "rounds_checked": 0}
    alpha, beta = rounds[0].alpha, rounds[0].beta
    c = 0.5 / alpha - 0.5 * smooth_l
    reasons = []
    if c <= 0.0:
        reasons.append("step size too large: 1/(2 alpha) - L/2 <= 0")
    if not alpha * pl_mu < 1.0:
        reasons.append("alpha * mu >= 1")
    gate_lhs = beta * gamma / alpha
    gate_rhs = (1.0 - alpha * pl_mu) * c
    if gate_lhs > gate_rhs:
        reasons.append(f"gate violated: beta*gamma/alpha = {gate_lhs:.6g} "
                       f"> (1 - alpha*mu)*(1/(2 alpha) - L/2) = {gate_rhs:.6g}")
    empty = [rd.round for rd in rounds if not rd.skipped_ids]
    if empty:
        reasons.append(f"no-skip round(s) inside the horizon, first at {empty[0]}")
    if reasons:
        return {"status": CONDITION_NOT_MET, "worst_margin": None,
                "first_violation_round": None, "rounds_checked": 0,
                "reasons": reasons, "gate_lhs": gate_lhs, "gate_rhs": gate_rhs}

    omega1 = (rounds[0].loss - f_star
              + c * norm2_sq(rounds[0].theta - rounds[0].theta_prev))
    margins = []
    contraction = 1.0
    for idx, rd in enumerate(rounds):
        contraction *= (1.0 - alpha * pl_mu)
        value = rd.loss_next - f_star + c * norm2_sq(rd.theta_next - rd.theta)
        margins.append((idx + 1, contraction * omega1 - value))
    cert = _certificate(margins, tol,
                        gate_lhs=gate_lhs, gate_rhs=gate_rhs, omega1=omega1)
    return cert


def check_nonconvex_rate(rounds: list[RoundData], smooth_l: float, gamma: float,
                         p_factor: float, tol: float = TOLERANCE) -> dict:
    """Prefix bound on the running min of ||grad f||^2 in the non-convex case."""
    if not rounds:
        return {"status": VACUOUS, "worst_margin": None,
                "first_violation_round": None, "rounds_checked": 0}
    alpha, beta = rounds[0].alpha, rounds[0].beta
    gate = 0.5 * smooth_l - 0.5 / alpha + beta * gamma / alpha
    fp_gate = (alpha * smooth_l - 1.0) * (1.0 + 1.0 / p_factor) + 2.0
    empty = [rd.round for rd in rounds if not rd.skipped_ids]
    reasons = []
    if gate > 0.0:
        reasons.append(f"gate violated: L/2 - 1/(2 alpha) + beta*gamma/alpha = {gate:.6g} > 0")
    if empty and fp_gate > 0.0:
        reasons.append(f"no-skip round(s) present and the full-participation gate "
                       f"= {fp_gate:.6g} > 0")
    if reasons:
        return {"status": CONDITION_NOT_MET, "worst_margin": None,
                "first_violation_round": None, "rounds_checked": 0,
                "reasons": reasons, "gate": gate, "full_participation_gate": fp_gate}

    head = (beta * gamma / alpha
            * norm2_sq(rounds[0].theta - rounds[0].theta_prev))
    loss1 = rounds[0].loss
    running_min = math.inf
    margins = []
    stated_worst = math.inf
    for idx, rd in enumerate(rounds):
        k = idx + 1
        running_min = min(running_min, norm2_sq(rd.grad))
        bound = 2.0 / (alpha * k) * (loss1 - rd.loss_next + head)
        margins.append((k, bound - running_min))
        # variant with f interpolated at the prefix end rather than one past
        # it; informational only, it is not implied by the round inequality
        stated = 2.0 / (alpha * k) * (loss1 - rd.loss + head)
        stated_worst = min(stated_worst, stated - running_min)
    return _certificate(margins, tol, gate=gate,
                        stated_variant_worst_margin=stated_worst)


@dataclass
class MonitorOutcome:
    ledger: BoundLedger

    @property
    def certificates(self) -> dict:
        return self.ledger.certificates

    @property
    def gamma_max(self) -> float:
        return self.ledger.gamma_max


def evaluate_run(problem, traces, *, alpha: float, beta: float, smooth_l: float,
                 pl_mu: float | None, f_star: float | None,
                 gamma_override: float | None = None, p_factor: float = 0.1,
                 hetero: bool = False, tol: float = TOLERANCE) -> MonitorOutcome:
    """Evaluate every check over a finished (or prefix of a) run."""
    ledger = BoundLedger()
    if hetero:
        # the per-round guarantees are stated for uniform 1/M aggregation;
        # with per-coordinate coverage averaging they are not in force
        for name in ("error_concentration", "skip_energy", "descent",
                     "skip_deviation", "full_participation_descent",
                     "pl_condition", "pl_linear_rate", "stationarity_rate"):
            ledger.certificates[name] = {
                "status": VACUOUS, "worst_margin": None,
                "first_violation_round": None, "rounds_checked": 0,
                "note": "heterogeneous aggregation: hypotheses not in force"}
        ledger.condition_flags["hetero"] = True
        return MonitorOutcome(ledger)

    rounds = build_round_data(problem, traces, alpha, beta)

    gamma_values = []
    for rd in rounds:
        est = estimate_gamma(rd)
        if est is not None:
            gamma_values.append(est)
    measured = max(gamma_values) if gamma_values else 1.0
    if gamma_override is not None:
        ledger.gamma_max = float(gamma_override)
        ledger.gamma_source = "config"
    else:
        ledger.gamma_max = max(1.0, measured)
        ledger.gamma_source = "measured"
    gamma = ledger.gamma_max

    skip_energy_margins, descent_margins, deviation_margins = [], [], []
    full_part_margins, pl_margins = [], []
    unverified = 0
    has_empty_rounds = False

    fp_gate = (alpha * smooth_l - 1.0) * (1.0 + 1.0 / p_factor) + 2.0
    for rd in rounds:
        rc = RoundChecks(round=rd.round, n_skipped=len(rd.skipped_ids))
        rc.gamma_est = estimate_gamma(rd)
        rc.gamma_state = gamma_round_state(rd)
        if rd.skipped_ids:
            if rc.gamma_state == "undefined":
                unverified += 1
            else:
                rc.skip_energy_lhs, rc.skip_energy_rhs = check_skip_energy(rd, gamma)
                skip_energy_margins.append((rd.round, rc.skip_energy_rhs - rc.skip_energy_lhs))
                rc.descent_lhs, rc.descent_rhs = check_descent(rd, smooth_l, gamma)
                descent_margins.append((rd.round, rc.descent_rhs - rc.descent_lhs))
            dev = check_deviation_bound(rd)
            rc.deviation_lhs, rc.deviation_rhs, rc.deviation_rhs_stated = dev
            deviation_margins.append((rd.round, rc.deviation_rhs - rc.deviation_lhs))
        else:
            has_empty_rounds = True
            rc.full_part_lhs, rc.full_part_rhs = check_full_participation_descent(rd)
            if fp_gate <= 0.0:
                full_part_margins.append((rd.round, rc.full_part_rhs - rc.full_part_lhs))
        if pl_mu is not None and f_star is not None:
            rc.pl_lhs, rc.pl_rhs = curvature_floor(rd, pl_mu, f_star)
            pl_margins.append((rd.round, rc.pl_lhs - rc.pl_rhs))
        ledger.rounds.append(rc)

    certs = ledger.certificates
    certs["error_concentration"] = {
        "status": PASS if gamma_values else VACUOUS,
        "worst_margin": None, "first_violation_round": None,
        "rounds_checked": len(gamma_values),
        "gamma_max": ledger.gamma_max, "gamma_source": ledger.gamma_source,
        "gamma_measured": measured if gamma_values else None}
    certs["skip_energy"] = _certificate(skip_energy_margins, tol, unverified=unverified)
    certs["descent"] = _certificate(descent_margins, tol, unverified=unverified)
    certs["skip_deviation"] = _certificate(deviation_margins, tol)
    if has_empty_rounds and fp_gate > 0.0:
        certs["full_participation_descent"] = {
            "status": CONDITION_NOT_MET, "worst_margin": None,
            "first_violation_round": None, "rounds_checked": 0,
            "gate": fp_gate}
    else:
        certs["full_participation_descent"] = _certificate(
            full_part_margins, tol, gate=fp_gate)
    certs["pl_condition"] = _certificate(pl_margins, tol)
    if pl_mu is not None and f_star is not None:
        certs["pl_linear_rate"] = check_pl_convergence(
            rounds, pl_mu, smooth_l, gamma, f_star, tol)
    else:
        certs["pl_linear_rate"] = {
            "status": CONDITION_NOT_MET, "worst_margin": None,
            "first_violation_round": None, "rounds_checked": 0,
            "reasons": ["needs a certified curvature constant and minimum"]}
    certs["stationarity_rate"] = check_nonconvex_rate(
        rounds, smooth_l, gamma, p_factor, tol)

    ledger.condition_flags = {
        "hetero": False,
        "gamma_max": ledger.gamma_max,
        "gamma_source": ledger.gamma_source,
        "descent_gate": 0.5 * smooth_l - 0.5 / alpha + beta * gamma / alpha,
        "full_participation_gate": fp_gate,
        "pl_gate_lhs": beta * gamma / alpha,
        "pl_gate_rhs": ((1.0 - alpha * pl_mu) * (0.5 / alpha - 0.5 * smooth_l)
                        if pl_mu is not None else None),
        "has_empty_skip_rounds": has_empty_rounds,
    }
    return MonitorOutcome(ledger)


def merge_into_reports(reports, outcome: MonitorOutcome) -> None:
    """Copy the per-round check numbers onto the matching round reports."""
    by_round = {rc.round: rc for rc in outcome.ledger.rounds}
    for report in reports:
        rc = by_round.get(report.round)
        if rc is None:
            continue
        report.gamma_est = rc.gamma_est
        report.descent_lhs = rc.descent_lhs
        report.descent_rhs = rc.descent_rhs
        report.deviation_lhs = rc.deviation_lhs
        report.deviation_rhs = rc.deviation_rhs
