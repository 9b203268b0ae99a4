"""The federated round loop: quantize-and-maybe-skip devices, lazy server.

One communication round k >= 1 looks like this:

  1. the server broadcasts theta_k and the squared distance it just moved,
  2. every device computes its full-batch local gradient, forms the
     innovation against the last quantized gradient the server holds for it,
     picks a quantization level, quantizes, and applies the skip test,
  3. uploading devices send integer codes; the server adds the decoded
     average innovation on top of its stored average quantized gradient and
     takes a step: theta_{k+1} = theta_k - alpha * (q_avg + avg innovation).

Round 0 is the bootstrap: every device uploads unconditionally (there is no
previous model difference to test against) with q_prev = 0.

Devices in heterogeneous-capacity mode only see, quantize, and upload the
coordinates inside their mask; the server averages each coordinate over the
devices that cover it.

Everything is single-threaded and iterates devices in ascending id, so a
(config, seed) pair fully determines every emitted byte.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import problems
from .config import RunConfig, parse_hetero_ratios, parse_partition
from .errors import DimensionError, NumericError
from .numerics import Vector, norm2, norm2_sq
from .policy import (LevelPolicy, SkipPolicy, adaquantfl_level, aquila_level,
                     parse_level_policy, should_skip)
from .quantizer import (QuantizedInnovation, decode, encode, payload_bits,
                        quantization_error)

# ---------------------------------------------------------------------------
# state and telemetry types
# ---------------------------------------------------------------------------


@dataclass
class DeviceState:
    """One device: its shard (via problem + id), accumulator, and counters."""

    id: int
    problem: problems.Problem = field(repr=False)
    q_prev: Vector
    mask: np.ndarray | None = None  # None = full model
    uploads: int = 0
    bits_sent: int = 0


@dataclass
class ServerState:
    theta: Vector
    theta_prev: Vector
    q_avg: Vector
    alpha: float
    round: int = 0
    masks: list[np.ndarray | None] = field(default_factory=list, repr=False)
    coverage: np.ndarray | None = None  # devices covering each coordinate


@dataclass
class DeviceRecord:
    device_id: int
    uploaded: bool
    bits: int
    level: int
    range: float
    innovation_norm2: float
    eps_norm2: float


@dataclass
class RoundReport:
    round: int
    records: list[DeviceRecord]
    global_loss: float
    grad_norm2: float
    theta_diff_norm2: float | None  # None at round 0
    gamma_est: float | None = None
    descent_lhs: float | None = None
    descent_rhs: float | None = None
    deviation_lhs: float | None = None
    deviation_rhs: float | None = None

    @property
    def bits_total(self) -> int:
        return sum(r.bits for r in self.records)

    @property
    def uploads(self) -> int:
        return sum(1 for r in self.records if r.uploaded)


@dataclass
class DeviceTrace:
    """Raw per-device vectors kept for the independent inequality checks."""

    device_id: int
    innovation: Vector          # full-length, zero outside the mask
    decoded: Vector             # decoded quantized innovation, full-length
    skipped: bool
    level: int
    range: float
    active_dim: int


@dataclass
class RoundTrace:
    round: int
    theta_start: Vector
    theta_end: Vector
    devices: list[DeviceTrace]


# ---------------------------------------------------------------------------
# device side
# ---------------------------------------------------------------------------


def _pick_level(lp: LevelPolicy, active_innovation: Vector,
                loss0: float | None, loss_now: float | None) -> int:
    if lp.kind == "aquila":
        return aquila_level(active_innovation, cap=lp.cap)
    if lp.kind == "fixed":
        return min(lp.param, lp.cap)
    # adaquantfl: driven by the global loss ratio, identical on every device
    if loss0 is None or loss_now is None:
        raise NumericError("adaquantfl level policy needs the global losses")
    return adaquantfl_level(loss0, loss_now, lp.param, cap=lp.cap)


def device_step(dev: DeviceState, theta: Vector, theta_diff_sq: float,
                lp: LevelPolicy, sp: SkipPolicy, *,
                loss0: float | None = None, loss_now: float | None = None,
                header_bits: int = 40, allow_skip: bool = True,
                ) -> tuple[QuantizedInnovation | None, DeviceRecord, DeviceTrace]:
    """Gradient, innovation, level, quantize, skip test.

    Mutates dev: on upload, q_prev absorbs the decoded innovation and the
    counters advance. On skip, dev is left untouched and the payload is None.
    """
    g = problems.local_gradient(dev.problem, dev.id, theta, dev.mask)
    if not np.all(np.isfinite(g)):
        raise NumericError(f"device {dev.id}: non-finite gradient (diverged?)")
    innovation = g - dev.q_prev
    if dev.mask is None:
        active = innovation
    else:
        active = innovation[dev.mask]

    level = _pick_level(lp, active, loss0, loss_now)
    q = encode(active, level)
    err = quantization_error(active, q)

    decoded_full = np.zeros(theta.size)
    if dev.mask is None:
        decoded_full = decode(q)
    else:
        decoded_full[dev.mask] = decode(q)

    skip = (allow_skip and not lp.force_upload
            and should_skip(q, err, theta_diff_sq, sp))
    if skip:
        payload, bits = None, 0
    else:
        payload = q
        bits = payload_bits(q, header_bits)
        dev.q_prev = dev.q_prev + decoded_full
        dev.uploads += 1
        dev.bits_sent += bits

    record = DeviceRecord(
        device_id=dev.id, uploaded=not skip, bits=bits, level=level,
        range=q.range, innovation_norm2=norm2(active), eps_norm2=norm2(err.epsilon))
    trace = DeviceTrace(
        device_id=dev.id, innovation=innovation, decoded=decoded_full,
        skipped=skip, level=level, range=q.range, active_dim=active.size)
    return payload, record, trace


# ---------------------------------------------------------------------------
# server side
# ---------------------------------------------------------------------------


def server_update(server: ServerState,
                  payloads: dict[int, QuantizedInnovation]) -> ServerState:
    """Apply one lazy-aggregation step and advance the stored average.

    theta <- theta - alpha * (q_avg + avg decoded innovation), where the
    average divides each coordinate by the number of covering devices
    (plain 1/M in the homogeneous case). Summation runs in ascending device
    id; payload order does not matter.
    """
    d = server.theta.size
    acc = np.zeros(d)
    for device_id in sorted(payloads):
        payload = payloads[device_id]
        mask = server.masks[device_id] if server.masks else None
        dq = decode(payload)
        if mask is None:
            if dq.size != d:
                raise DimensionError(f"payload dim {dq.size} != model dim {d}")
            acc += dq
        else:
            if dq.size != int(mask.sum()):
                raise DimensionError(
                    f"device {device_id}: payload dim {dq.size} != mask size {int(mask.sum())}")
            acc[mask] += dq
    coverage = server.coverage
    if coverage is None:
        incr = acc / max(len(server.masks), 1)
    else:
        incr = np.divide(acc, coverage, out=np.zeros(d), where=coverage > 0)
    server.theta_prev = server.theta
    server.theta = server.theta - server.alpha * (server.q_avg + incr)
    server.q_avg = server.q_avg + incr
    server.round += 1
    return server


def bootstrap_round(devices: list[DeviceState], server: ServerState,
                    lp: LevelPolicy, *, loss0: float, grad_norm: float,
                    header_bits: int = 40) -> tuple[RoundReport, RoundTrace]:
    """Round 0: every device uploads against q_prev = 0, no skip test."""
    sp = SkipPolicy(beta=0.0, alpha=server.alpha)
    theta0 = server.theta.copy()
    payloads: dict[int, QuantizedInnovation] = {}
    records, dtraces = [], []
    for dev in devices:
        payload, record, dtrace = device_step(
            dev, server.theta, 0.0, lp, sp, loss0=loss0, loss_now=loss0,
            header_bits=header_bits, allow_skip=False)
        payloads[dev.id] = payload
        records.append(record)
        dtraces.append(dtrace)
    server_update(server, payloads)
    report = RoundReport(round=0, records=records, global_loss=loss0,
                         grad_norm2=grad_norm, theta_diff_norm2=None)
    trace = RoundTrace(round=0, theta_start=theta0, theta_end=server.theta.copy(),
                       devices=dtraces)
    return report, trace


# ---------------------------------------------------------------------------
# experiment orchestration
# ---------------------------------------------------------------------------


def build_problem(cfg: RunConfig) -> problems.Problem:
    mode, cpd = parse_partition(cfg.partition)
    part = problems.PartitionSpec(mode=mode, classes_per_device=max(cpd, 1), seed=cfg.seed)
    if cfg.problem == "quadratic":
        return problems.make_quadratic(cfg.dim, cfg.cond, cfg.devices, cfg.seed)
    if cfg.problem == "logistic":
        return problems.make_logistic(cfg.dim, cfg.classes, cfg.samples, cfg.devices,
                                      part, cfg.reg, cfg.seed)
    return problems.make_mlp(cfg.dim, cfg.classes, cfg.samples, cfg.hidden,
                             cfg.devices, part, cfg.reg, cfg.seed)


def build_masks(cfg: RunConfig, problem: problems.Problem) -> list[np.ndarray] | None:
    ratios = parse_hetero_ratios(cfg.hetero_ratios)
    if not ratios:
        return None
    spec = problems.HeteroSpec(ratios)
    return [problems.hetero_mask(problem, spec.ratio_for(m))
            for m in range(cfg.devices)]


@dataclass
class RunResult:
    reports: list[RoundReport]
    traces: list[RoundTrace]
    certificates: dict
    gamma_max: float
    smooth_l: float
    pl_mu: float | None
    f_star: float | None
    final_loss: float | None    # None when the run diverged to non-finite
    final_grad_norm: float | None
    problem: problems.Problem = field(repr=False)
    devices: list[DeviceState] = field(repr=False, default_factory=list)
    aborted: str | None = None


def run_experiment(cfg: RunConfig, problem: problems.Problem | None = None) -> RunResult:
    """Run the configured experiment end to end, including the checks.

    A non-finite gradient stops the loop early; the partial telemetry and
    certificates for the completed prefix are still returned, with
    `aborted` carrying the diagnostic. A pre-built problem may be injected
    in place of the config-derived one (its device count must match).
    """
    from . import theory_monitor  # late import: the monitor reads our traces

    cfg.validate()
    if problem is None:
        problem = build_problem(cfg)
    elif problem.n_devices != cfg.devices:
        raise DimensionError(
            f"problem has {problem.n_devices} devices, config says {cfg.devices}")
    masks = build_masks(cfg, problem)
    theta0 = problem.initial_theta()
    d = problem.dim

    devices = [DeviceState(id=m, problem=problem, q_prev=np.zeros(d),
                           mask=None if masks is None else masks[m])
               for m in range(cfg.devices)]
    if masks is None:
        coverage = None
        server_masks: list[np.ndarray | None] = [None] * cfg.devices
    else:
        coverage = np.sum(masks, axis=0)
        server_masks = list(masks)
    server = ServerState(theta=theta0.copy(), theta_prev=theta0.copy(),
                         q_avg=np.zeros(d), alpha=cfg.alpha,
                         masks=server_masks, coverage=coverage)

    lp = parse_level_policy(cfg.level_policy)
    sp = SkipPolicy(beta=cfg.beta, alpha=cfg.alpha)

    loss0 = problems.global_loss(problem, theta0, masks)
    reports: list[RoundReport] = []
    traces: list[RoundTrace] = []
    aborted = None
    try:
        g0 = problems.global_gradient(problem, theta0, masks)
        report, trace = bootstrap_round(devices, server, lp, loss0=loss0,
                                        grad_norm=norm2(g0), header_bits=cfg.header_bits)
        reports.append(report)
        traces.append(trace)

        for _ in range(cfg.rounds):
            theta_k = server.theta.copy()
            loss_k = problems.global_loss(problem, theta_k, masks)
            if not np.isfinite(loss_k):
                raise NumericError(f"round {server.round}: non-finite loss (diverged?)")
            diff = theta_k - server.theta_prev
            theta_diff_sq = norm2_sq(diff)
            grad_k = problems.global_gradient(problem, theta_k, masks)

            payloads: dict[int, QuantizedInnovation] = {}
            records, dtraces = [], []
            for dev in devices:
                payload, record, dtrace = device_step(
                    dev, theta_k, theta_diff_sq, lp, sp,
                    loss0=loss0, loss_now=loss_k,
                    header_bits=cfg.header_bits, allow_skip=True)
                if payload is not None:
                    payloads[dev.id] = payload
                records.append(record)
                dtraces.append(dtrace)
            round_index = server.round
            server_update(server, payloads)
            reports.append(RoundReport(
                round=round_index, records=records, global_loss=loss_k,
                grad_norm2=norm2(grad_k), theta_diff_norm2=norm2(diff)))
            traces.append(RoundTrace(round=round_index, theta_start=theta_k,
                                     theta_end=server.theta.copy(), devices=dtraces))
    except NumericError as exc:
        aborted = str(exc)

    smooth_l, pl_mu = problems.smoothness_constants(problem)
    f_star = getattr(problem, "f_star", None)
    outcome = theory_monitor.evaluate_run(
        problem, traces, alpha=cfg.alpha, beta=cfg.beta, smooth_l=smooth_l,
        pl_mu=pl_mu, f_star=f_star, gamma_override=cfg.gamma,
        p_factor=cfg.p_factor, hetero=masks is not None)
    theory_monitor.merge_into_reports(reports, outcome)

    final_theta = traces[-1].theta_end if traces else theta0
    final_loss = problems.global_loss(problem, final_theta, masks)
    if not np.isfinite(final_loss):
        final_loss, final_grad_norm = None, None
    else:
        final_grad_norm = norm2(problems.global_gradient(problem, final_theta, masks))

    return RunResult(reports=reports, traces=traces,
                     certificates=outcome.certificates, gamma_max=outcome.gamma_max,
                     smooth_l=smooth_l, pl_mu=pl_mu, f_star=f_star,
                     final_loss=final_loss, final_grad_norm=final_grad_norm,
                     problem=problem, devices=devices, aborted=aborted)


def run(cfg: RunConfig) -> list[RoundReport]:
    """One report per round (round 0 included); raises on numeric abort."""
    result = run_experiment(cfg)
    if result.aborted:
        raise NumericError(result.aborted)
    return result.reports
