"""Fixed-step nonlinear time-domain simulation with timed events.

Classic RK4 on the closed-loop multi-machine model.  Events (line trip, load
step, controller activation/deactivation) land exactly on their times: when
an event falls inside a step, the step is split so the state grid stays
uniform.  After a topology or load event the reduced network is rebuilt from
a re-factored admittance matrix with load admittances frozen at their
pre-disturbance values (constant-impedance loads); dynamic states carry over
continuously.  Controller references stay at the last pre-disturbance
equilibrium unless activation finds the system settled on a changed network.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass

import numpy as np

from .case import PowerSystemCase, apply_line_trip
from .powerflow import (build_ybus, solve_power_flow, kron_reduce,
                        load_admittances, machine_internal_admittances)
from .dynamics import SimModel, initialize_from_power_flow
from .synthesis import ControllerSet
from . import kernels


class ScenarioError(Exception):
    pass


@dataclass(frozen=True)
class Event:
    time: float
    action: str        # trip_line | step_load | activate_controllers | deactivate_controllers
    params: tuple = ()


@dataclass(frozen=True)
class Scenario:
    duration: float
    dt: float = 0.005
    events: tuple[Event, ...] = ()
    initial_active: str | tuple = "all"     # "all", "none", or a tuple of machine ids

    def validate(self) -> None:
        if self.dt <= 0:
            raise ScenarioError("dt must be positive")
        if self.duration <= 0:
            raise ScenarioError("duration must be positive")
        for e in self.events:
            if not (0.0 <= e.time <= self.duration):
                raise ScenarioError(f"event at t={e.time} outside [0, duration]")


def parse_scenario(text: str) -> Scenario:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"scenario syntax error: {exc.msg} (line {exc.lineno})") from exc
    known = {"duration", "dt", "events", "initial_active"}
    unknown = set(raw) - known
    if unknown:
        raise ScenarioError(f"unknown scenario key(s) {sorted(unknown)}")
    if "duration" not in raw:
        raise ScenarioError("scenario requires a duration")
    events = []
    for i, ev in enumerate(raw.get("events", [])):
        try:
            t = float(ev["time"])
            kind = ev["type"]
        except (KeyError, TypeError) as exc:
            raise ScenarioError(f"events[{i}]: needs time and type") from exc
        if kind == "trip_line":
            params = (int(ev["from"]), int(ev["to"]), int(ev["circuit"]))
        elif kind == "step_load":
            params = (int(ev["bus"]), float(ev.get("dp_mw", 0.0)),
                      float(ev.get("dq_mvar", 0.0)))
        elif kind in ("activate_controllers", "deactivate_controllers"):
            m = ev.get("machines", "all")
            params = (tuple(m) if isinstance(m, list) else m,)
        else:
            raise ScenarioError(f"events[{i}]: unknown action {kind!r}")
        events.append(Event(time=t, action=kind, params=params))
    sc = Scenario(duration=float(raw["duration"]), dt=float(raw.get("dt", 0.005)),
                  events=tuple(sorted(events, key=lambda e: e.time)),
                  initial_active=(tuple(raw["initial_active"])
                                  if isinstance(raw.get("initial_active", "all"), list)
                                  else raw.get("initial_active", "all")))
    sc.validate()
    return sc


@dataclass
class _Segment:
    """Network map and controller configuration valid from t_start onward."""
    t_start: float
    g: np.ndarray
    b: np.ndarray
    vsolve: np.ndarray
    active: np.ndarray
    xref: np.ndarray


@dataclass
class SimulationResult:
    time: np.ndarray               # (T,)
    states: np.ndarray             # (T, n_states)
    layout: object
    machine_ids: tuple[int, ...]
    pe_sys: np.ndarray             # (T, n_mach) electrical power, system base
    pm_sys: np.ndarray             # (T, n_mach) mechanical power, system base
    u: np.ndarray                  # (T, n_mach) auxiliary governor signal, machine base
    bus_voltage: np.ndarray        # (T, n_bus) complex network voltages
    bus_ids: tuple[int, ...]
    event_log: list
    case: PowerSystemCase | None = None
    base_mva: float = 100.0
    divergent: bool = False
    divergence_time: float | None = None

    def state(self, machine_id: int, slot: str) -> np.ndarray:
        return self.states[:, self.layout.idx(machine_id, slot)]

    def to_csv(self, channels: list[str]) -> str:
        buf = io.StringIO()
        buf.write("time," + ",".join(channels) + "\n")
        series = [measure(self, ch) for ch in channels]
        for k in range(self.time.size):
            buf.write(f"{self.time[k]:.12g}," +
                      ",".join(f"{s[k]:.12g}" for s in series) + "\n")
        return buf.getvalue()


def _network_matrices(case: PowerSystemCase, y_load: np.ndarray):
    """Machine-coupling reduction plus the linear map internal EMF -> bus voltages."""
    ybus = build_ybus(case)
    n = len(ybus.bus_ids)
    idx = {b: i for i, b in enumerate(ybus.bus_ids)}
    y_int = machine_internal_admittances(case)
    y_aug = ybus.y + np.diag(y_load)
    inj_cols = np.zeros((n, len(case.machines)), dtype=complex)
    for k, m in enumerate(case.machines):
        i = idx[m.bus]
        y_aug[i, i] += y_int[k]
        inj_cols[i, k] = y_int[k]
    try:
        vsolve = np.linalg.solve(y_aug, inj_cols)
    except np.linalg.LinAlgError as exc:
        raise ScenarioError("event left the network islanded") from exc
    if not np.all(np.isfinite(vsolve)):
        raise ScenarioError("event left the network islanded")
    red = kron_reduce(ybus, case, None, y_load=y_load)
    return red, vsolve, ybus.bus_ids


def _internal_emf(model: SimModel, states: np.ndarray) -> np.ndarray:
    lay = model.layout
    delta = states[..., lay.delta_indices]
    eqp = states[..., [lay.idx(m, "eqp") for m in lay.machine_ids]]
    edp = states[..., [lay.idx(m, "edp") for m in lay.machine_ids]]
    return (edp + 1j * eqp) * np.exp(1j * (delta - np.pi / 2))


def simulate(case: PowerSystemCase, controllers: ControllerSet | None,
             scenario: Scenario, pf_tol: float = 1e-10) -> SimulationResult:
    scenario.validate()
    sol = solve_power_flow(case, tol=pf_tol)
    red0 = kron_reduce(build_ybus(case), case, sol)
    eq = initialize_from_power_flow(case, sol, red0)
    model = eq.model
    lay = model.layout
    n_mach = model.n_machines
    y_load = load_admittances(case, sol)

    if controllers is not None:
        order = [controllers.machine_ids.index(m) for m in lay.machine_ids]
        model.gains = controllers.gains[order].copy()
    has_gain = np.any(model.gains != 0.0, axis=1).astype(float)
    if controllers is None or scenario.initial_active == "none":
        model.active = np.zeros(n_mach)
    elif scenario.initial_active == "all":
        model.active = has_gain.copy()
    else:
        model.active = has_gain * np.array(
            [1.0 if m in scenario.initial_active else 0.0 for m in lay.machine_ids])
    model.xref = eq.x5.copy()

    current_case = case
    red, vsolve, bus_ids = _network_matrices(current_case, y_load)
    model.gmat = red.g.copy()
    model.bmat = red.b.copy()

    dt = scenario.dt
    n_steps = int(round(scenario.duration / dt))
    tgrid = np.arange(n_steps + 1) * dt
    states = np.zeros((n_steps + 1, model.n_states))
    states[0] = eq.state
    y = eq.state.copy()
    event_log: list = []
    segments = [_Segment(0.0, model.gmat.copy(), model.bmat.copy(), vsolve,
                         model.active.copy(), model.xref.copy())]
    divergent = False
    div_time = None
    topology_changed = False
    step = 0

    def advance(count: int) -> bool:
        nonlocal step, divergent, div_time
        if count <= 0:
            return True
        bad = kernels.rk4_span(y, dt, count, model.pf, model.pi, model.gains,
                               model.xref, model.active, model.gmat, model.bmat,
                               model.omega0, out=states, out_offset=step + 1)
        if bad >= 0:
            divergent = True
            div_time = float(tgrid[step + bad + 1])
            states[step + bad + 1:] = y
            step = n_steps
            return False
        step += count
        return True

    def fire(ev: Event, t_now: float) -> None:
        nonlocal current_case, y_load, vsolve, bus_ids, topology_changed
        if ev.action == "trip_line":
            f, t, c = ev.params
            current_case = apply_line_trip(current_case, f, t, c)
            red, vsolve, bus_ids = _network_matrices(current_case, y_load)
            model.gmat = red.g.copy()
            model.bmat = red.b.copy()
            topology_changed = True
            event_log.append({"time": t_now, "action": "trip_line", "branch": [f, t, c]})
        elif ev.action == "step_load":
            bus, dp, dq = ev.params
            if bus not in bus_ids:
                raise ScenarioError(f"step_load references unknown bus {bus}")
            idx = list(bus_ids).index(bus)
            vm_now = abs((vsolve @ _internal_emf(model, y))[idx])
            s = complex(dp, dq) / current_case.base_mva
            y_load = y_load.copy()
            y_load[idx] += np.conj(s) / (vm_now ** 2 if vm_now > 0 else 1.0)
            red, vsolve, bus_ids = _network_matrices(current_case, y_load)
            model.gmat = red.g.copy()
            model.bmat = red.b.copy()
            topology_changed = True
            event_log.append({"time": t_now, "action": "step_load", "bus": bus,
                              "dp_mw": dp, "dq_mvar": dq})
        else:
            sel = ev.params[0]
            mask = np.ones(n_mach) if sel == "all" else np.array(
                [1.0 if m in sel else 0.0 for m in lay.machine_ids])
            if ev.action == "activate_controllers":
                omega = y[lay.speed_indices]
                rhs = model.rhs(y)
                non_angle = np.delete(rhs, lay.delta_indices)
                # post-event steady state is a uniformly drifting frame:
                # speeds equal (common droop slip) and all other derivatives quiet
                settled = (np.max(np.abs(omega - np.mean(omega))) < 1e-4
                           and np.max(np.abs(non_angle)) < 1e-4)
                if topology_changed and settled:
                    # the settled operating point on the changed network is the
                    # operative equilibrium and becomes the reference
                    model.xref = np.array([model.design_state(y, k)
                                           for k in range(n_mach)])
                    ref_src = "settled_state"
                else:
                    ref_src = "pre_disturbance_equilibrium"
                model.active = np.clip(model.active + mask, 0, 1) * has_gain
                event_log.append({"time": t_now, "action": ev.action,
                                  "machines": "all" if sel == "all" else list(sel),
                                  "reference": ref_src})
            else:
                model.active = model.active * (1.0 - mask)
                event_log.append({"time": t_now, "action": ev.action,
                                  "machines": "all" if sel == "all" else list(sel)})
        segments.append(_Segment(t_now, model.gmat.copy(), model.bmat.copy(),
                                 vsolve, model.active.copy(), model.xref.copy()))

    for ev in scenario.events:
        if divergent:
            break
        whole = int(np.floor(ev.time / dt + 1e-9))
        if not advance(min(whole, n_steps) - step):
            break
        frac = ev.time - step * dt
        if frac > 1e-9:
            # split step: integrate to the event instant, fire, finish the step
            if kernels.rk4_span(y, frac, 1, model.pf, model.pi, model.gains,
                                model.xref, model.active, model.gmat,
                                model.bmat, model.omega0) >= 0:
                divergent, div_time = True, ev.time
                states[step + 1:] = y
                break
            fire(ev, ev.time)
            rest = (step + 1) * dt - ev.time
            if kernels.rk4_span(y, rest, 1, model.pf, model.pi, model.gains,
                                model.xref, model.active, model.gmat,
                                model.bmat, model.omega0) >= 0:
                divergent, div_time = True, float(tgrid[step + 1])
                states[step + 1:] = y
                break
            states[step + 1] = y
            step += 1
        else:
            fire(ev, float(tgrid[step]))
    if not divergent:
        advance(n_steps - step)

    pe, pm_sys, u_out, vbus = _derived_channels(model, states, tgrid, segments,
                                                bus_ids)
    return SimulationResult(time=tgrid, states=states, layout=lay,
                            machine_ids=lay.machine_ids, pe_sys=pe,
                            pm_sys=pm_sys, u=u_out, bus_voltage=vbus,
                            bus_ids=tuple(bus_ids), event_log=event_log,
                            case=case, base_mva=case.base_mva,
                            divergent=divergent, divergence_time=div_time)


def _derived_channels(model: SimModel, states: np.ndarray, tgrid: np.ndarray,
                      segments: list, bus_ids) -> tuple:
    lay = model.layout
    n_t = states.shape[0]
    n_m = model.n_machines
    pe = np.zeros((n_t, n_m))
    pm_sys = np.zeros((n_t, n_m))
    u_out = np.zeros((n_t, n_m))
    vbus = np.zeros((n_t, len(bus_ids)), dtype=complex)
    delta = states[:, lay.delta_indices]
    eqp = states[:, [lay.idx(m, "eqp") for m in lay.machine_ids]]
    edp = states[:, [lay.idx(m, "edp") for m in lay.machine_ids]]
    sd, cd = np.sin(delta), np.cos(delta)
    e_re = edp * sd + eqp * cd
    e_im = eqp * sd - edp * cd
    emf = e_re + 1j * e_im
    xq_corr = model.pf[:, kernels.PF.XQP] - model.pf[:, kernels.PF.XDP]
    sout = model.pf[:, kernels.PF.SOUT]

    gov = model.pi[:, kernels.PI.HAS_GOV] == 1
    pm_idx = np.maximum(model.pi[:, kernels.PI.I_PM], 0)
    xm_idx = np.maximum(model.pi[:, kernels.PI.I_XM], 0)
    xe_idx = np.maximum(model.pi[:, kernels.PI.I_XE], 0)
    pm_mach = np.where(gov[None, :], states[:, pm_idx], model.pf[:, kernels.PF.PMCONST][None, :])
    xm_mach = np.where(gov[None, :], states[:, xm_idx], 0.0)
    xe_mach = np.where(gov[None, :], states[:, xe_idx], 0.0)
    pm_sys[:] = pm_mach * sout[None, :]

    bounds = [s.t_start for s in segments] + [np.inf]
    seg = 0
    for k in range(n_t):
        t = tgrid[k]
        while seg + 1 < len(segments) and t >= bounds[seg + 1] - 1e-12:
            seg += 1
        s = segments[seg]
        i_re = s.g @ e_re[k] - s.b @ e_im[k]
        i_im = s.g @ e_im[k] + s.b @ e_re[k]
        i_d = i_re * sd[k] - i_im * cd[k]
        i_q = i_re * cd[k] + i_im * sd[k]
        pe[k] = edp[k] * i_d + eqp[k] * i_q + xq_corr * i_d * i_q
        vbus[k] = s.vsolve @ emf[k]
        x5 = np.stack([delta[k], states[k, lay.speed_indices], pm_mach[k],
                       xm_mach[k], xe_mach[k]], axis=1)
        u_out[k] = s.active * np.einsum("ij,ij->i", model.gains, x5 - s.xref)
    return pe, pm_sys, u_out, vbus


def measure(result: SimulationResult, channel: str) -> np.ndarray:
    """Extract a named series: delta:<id>, omega:<id>, delta_rel:<i>:<j>,
    pm:<id>, pe:<id>, u:<id>, xe:<id>, vm:<bus>, flow:<from>:<to>:<circuit>
    (branch real power in MW at the from side, from the reconstructed network
    voltages; zero after the branch trips)."""
    parts = channel.split(":")
    kind = parts[0]
    ids = list(result.machine_ids)
    try:
        if kind == "delta_rel":
            return result.state(int(parts[1]), "delta") - result.state(int(parts[2]), "delta")
        if kind in ("delta", "omega", "xe"):
            return result.state(int(parts[1]), kind)
        if kind == "pe":
            return result.pe_sys[:, ids.index(int(parts[1]))]
        if kind == "pm":
            return result.pm_sys[:, ids.index(int(parts[1]))]
        if kind == "u":
            return result.u[:, ids.index(int(parts[1]))]
        if kind == "vm":
            return np.abs(result.bus_voltage[:, list(result.bus_ids).index(int(parts[1]))])
        if kind == "flow":
            return _branch_flow_series(result, int(parts[1]), int(parts[2]),
                                       int(parts[3]))
    except (KeyError, ValueError, IndexError) as exc:
        raise ScenarioError(f"unknown channel {channel!r}") from exc
    raise ScenarioError(f"unknown channel {channel!r}")


def _branch_flow_series(result: SimulationResult, f: int, t: int,
                        circuit: int) -> np.ndarray:
    br = None
    for cand in result.case.branches:
        if {cand.from_bus, cand.to_bus} == {f, t} and cand.circuit == circuit:
            br = cand
            break
    if br is None:
        raise ScenarioError(f"branch {f}-{t} circuit {circuit} not in the case")
    trip_time = np.inf
    if not br.in_service:
        trip_time = -np.inf
    for ev in result.event_log:
        if ev["action"] == "trip_line" and \
                {ev["branch"][0], ev["branch"][1]} == {f, t} and ev["branch"][2] == circuit:
            trip_time = ev["time"]
            break
    vf = result.bus_voltage[:, list(result.bus_ids).index(f)]
    vt = result.bus_voltage[:, list(result.bus_ids).index(t)]
    ys = 1.0 / complex(br.r, br.x)
    sh = 1j * br.b / 2.0
    # pi model is end-symmetric, so the requested orientation is evaluated directly
    p = np.real(vf * np.conj(ys * (vf - vt) + sh * vf)) * result.base_mva
    p[result.time >= trip_time - 1e-12] = 0.0
    return p


def ringdown_damping(series: np.ndarray, dt: float,
                     band_hz: tuple[float, float]) -> dict:
    """Frequency and damping from a ringdown trace: zero-phase second-order
    band-pass, then a least-squares log decrement over successive positive
    peaks; frequency from mean peak spacing."""
    import scipy.signal

    lo, hi = band_hz
    fs = 1.0 / dt
    n_cycles = series.size * dt * (0.5 * (lo + hi))
    if n_cycles < 10:
        raise ValueError("series shorter than 10 cycles of the band center")
    sos = scipy.signal.butter(2, [lo, hi], btype="bandpass", fs=fs, output="sos")
    x = scipy.signal.sosfiltfilt(sos, series - np.mean(series))
    floor = 0.01 * np.max(np.abs(x))      # ignore ripple below 1% of the envelope
    peaks = [k for k in range(1, x.size - 1)
             if x[k] > floor and x[k] >= x[k - 1] and x[k] > x[k + 1]]
    peaks = [k for k in peaks if 0.05 * x.size < k < 0.95 * x.size]
    if len(peaks) < 3:
        raise ValueError("fewer than 3 positive peaks found")
    amps = x[np.array(peaks)]
    t_peaks = np.array(peaks) * dt
    freq = 1.0 / float(np.mean(np.diff(t_peaks)))
    slope = np.polyfit(np.arange(len(amps)), np.log(np.maximum(amps, 1e-300)), 1)[0]
    lam = -slope
    zeta = lam / np.sqrt(4.0 * np.pi ** 2 + lam ** 2)
    return {"frequency_hz": float(freq), "zeta": float(zeta)}
