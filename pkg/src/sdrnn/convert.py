"""ANN-to-SNN compiler: time-constant derivation, weight/bias mapping, scale
factor selection, and assembly of the spiking network description.

Per-layer smoothing coefficients translate to time constants via
tau = -T_s / ln(alpha), re-expressed in simulator steps of the finer spiking
timestep. Quantized weights and biases map to hardware integers as

    W_snn = round(f * W_ann / (tau_u * tau_i * 64))
    b_snn = round(f * b_ann / tau_i)

where 64 is the synaptic accumulation gain of the hardware (each spike
deposits 64 * W_snn into u) and the tau factors cancel the DC gains of the
u and i filter stages, so a presynaptic spike rate r yields a steady drive
i = f * W_ann * r. The global gain f trades integer weight precision
against headroom below the 24-bit state bound and is chosen by a
simulation-backed bracketing search.

Time-constant assignment is what makes the spiking layers reproduce the
source network's per-layer smoothing. The feedback filter tau_s defines the
activation readout s and, inverted by the spike-generation loop, puts a
lead of tau_s into the emitted spike duty. A receiving layer therefore
needs two slow stages: tau_u equal to the sender's tau_s cancels that lead
and recovers the sender's smoothed activation, and tau_i equal to the
layer's own alpha-derived constant applies the layer's own smoothing, so
every layer contributes exactly one low-pass stage just as the source
recursion does. With one alpha per layer, all three constants of a layer
equal its alpha-derived constant (exact when consecutive layers share
alpha, first-order accurate otherwise). The analog encoder layer has no
presynaptic lead to cancel, so its tau_u stays a short constant. The
feedback weight is tied to w_fb = f / tau_s so a neuron spiking every step
saturates s at f * 1.0, making spike rate equal activation on the
[0, clamp_ceiling] scale.

Feasibility note: the 24-bit state budget must cover f times the mapped
weight resolution times tau_u * tau_i * gain. With two alpha-derived
stages the hardware's native synaptic gain of 64 leaves sub-integer weight
steps at realistic time constants, so the compiler defaults to gain 1 and
keeps the gain a config value used consistently by the mapping formula and
the simulator.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .containers import FeatureSequence
from .errors import ConfigError, DataError, NumericError
from .lprnn import KIND_INPUT, KIND_RECURRENT, LpRnnModel, load_model, save_model
from .numerics import STATE_LIMIT, round_half_away


@dataclass(frozen=True)
class TimingConfig:
    """Frame period of the source network and step of the spiking simulator."""

    t_ann: float
    t_snn: float

    def __post_init__(self):
        if not (self.t_ann > 0 and self.t_snn > 0):
            raise ConfigError("t_ann and t_snn must be positive")
        ratio = self.t_ann / self.t_snn
        if abs(ratio - round(ratio)) > 1e-6 * ratio or round(ratio) < 1:
            raise ConfigError(
                f"t_ann/t_snn must be a positive integer, got {ratio}")

    @property
    def oversample(self) -> int:
        return int(round(self.t_ann / self.t_snn))


@dataclass(frozen=True)
class CompileConfig:
    """Hardware-model knobs.

    tau_u applies to the analog encoder layer only; spike-driven layers get
    tau_u = tau_i = their alpha-derived constant (the overrides pin them
    globally instead, which breaks the activation correspondence and exists
    for experiments). weight_gain is the synaptic accumulation gain: the
    hardware's native value is 64, but 1 buys integer weight resolution
    inside the 24-bit budget (see module docstring). decay_rounding "round"
    keeps fixed-point spike counts within a couple of spikes of reference
    mode; "trunc" decays slightly faster per step (half an LSB of systematic
    bias) but drains any state to exactly zero.
    """

    tau_u: float = 2.0
    tau_mem: float = 1.0
    tau_u_override: float | None = None
    tau_i_override: float | None = None
    weight_gain: int = 1
    weight_limit: int = 255
    safety_margin: float = 0.5
    decay_rounding: str = "round"


def alpha_to_tau(alpha: float, t_s: float) -> float:
    """Time constant (seconds) equivalent to smoothing coefficient alpha at
    sampling interval t_s: tau = -t_s / ln(alpha)."""
    if not 0.0 < alpha < 1.0:
        raise ConfigError(f"alpha must lie strictly in (0, 1), got {alpha}")
    if not t_s > 0:
        raise ConfigError("t_s must be positive")
    return -t_s / math.log(alpha)


def tau_to_alpha(tau: float, t_s: float) -> float:
    """Inverse of alpha_to_tau."""
    if not tau > 0:
        raise ConfigError("tau must be positive")
    return math.exp(-t_s / tau)


def rescale_tau(tau_ann: float, timing: TimingConfig) -> float:
    """Re-express a time constant in simulator steps of the finer timestep:
    tau_snn = (t_ann / t_snn) * tau_ann, with tau_ann measured in frames."""
    if not tau_ann > 0:
        raise ConfigError(f"tau_ann must be positive, got {tau_ann}")
    tau_steps = tau_ann * timing.oversample / timing.t_ann
    if tau_steps < 1.0:
        raise ConfigError(
            f"tau of {tau_ann} s is below one simulator step ({timing.t_snn} s)")
    return tau_steps


def map_weights(w_ann: np.ndarray, f: float, tau_u: float, tau_i: float,
                weight_gain: int = 64, weight_limit: int = 255) -> np.ndarray:
    """Map real weights onto hardware integers: round(f*W/(tau_u*tau_i*gain)),
    nearest with ties away from zero. Zero weights map to exactly 0."""
    if not f > 0:
        raise ConfigError("scale factor f must be positive")
    mapped = round_half_away(f * np.asarray(w_ann, dtype=np.float64)
                             / (tau_u * tau_i * weight_gain))
    if np.any(np.abs(mapped) > weight_limit):
        bad = np.argwhere(np.abs(mapped) > weight_limit)
        offenders = ", ".join(
            f"({', '.join(str(int(v)) for v in idx)}) -> {int(mapped[tuple(idx)])}"
            for idx in bad[:5])
        raise NumericError(
            f"{bad.shape[0]} mapped weights exceed the hardware range "
            f"+/-{weight_limit}; first offenders: {offenders}")
    return mapped


def map_bias(b_ann: np.ndarray, f: float, tau_i: float,
             limit: int = STATE_LIMIT) -> np.ndarray:
    """Map biases onto integer currents: round(f*b/tau_i), injected into the
    input-current variable i once per simulator step."""
    if not f > 0:
        raise ConfigError("scale factor f must be positive")
    mapped = round_half_away(f * np.asarray(b_ann, dtype=np.float64) / tau_i)
    if np.any(np.abs(mapped) > limit):
        bad = np.argwhere(np.abs(mapped) > limit)[:, 0]
        raise NumericError(
            f"{bad.shape[0]} mapped biases exceed +/-{limit}; first offenders: "
            + ", ".join(f"({int(i)}) -> {int(mapped[int(i)])}" for i in bad[:5]))
    return mapped


@dataclass
class SnnLayer:
    """Compiled description of one spiking layer.

    w_in/w_rec/bias are hardware integers; enc_w/enc_bias keep the quantized
    real-valued weights of an analog-driven encoder layer (run off-chip).
    tau_* are the real-valued constants for reference simulation, tau_*_fx
    their integer counterparts for fixed-point mode.
    """

    kind: str  # encoder | recurrent | output
    size: int
    w_in: np.ndarray | None
    w_rec: np.ndarray | None
    bias: np.ndarray
    enc_w: np.ndarray | None
    tau_s: float
    tau_i: float
    tau_u: float
    tau_mem: float
    tau_s_fx: int
    tau_i_fx: int
    tau_u_fx: int
    tau_mem_fx: int
    w_fb: int
    threshold: int


@dataclass
class SnnNetwork:
    """Compiled spiking network plus provenance of the source model."""

    layers: list[SnnLayer]
    f: float
    timing: TimingConfig
    config: CompileConfig
    source_model: LpRnnModel
    notes: dict = field(default_factory=dict)

    @property
    def oversample(self) -> int:
        return self.timing.oversample

    @property
    def n_classes(self) -> int:
        return self.layers[-1].size


def _int_tau(tau: float) -> int:
    fx = int(round(tau))
    if fx < 1:
        raise ConfigError(f"tau {tau} rounds below 1 simulator step")
    return fx


def compile_network(model: LpRnnModel, timing: TimingConfig, f: float,
                    config: CompileConfig = CompileConfig()) -> SnnNetwork:
    """Compile a trained, quantized model into a spiking network description.

    A pure function of (model, timing, f, config): per-layer tau_s/tau_i from
    the alpha mapping rescaled to simulator steps, tau_u/tau_mem from config,
    integer weights and biases from the mapping formulas, and w_fb =
    threshold = round(f / tau_s)."""
    if not f > 0:
        raise ConfigError("scale factor f must be positive")
    layers = []
    for idx, layer in enumerate(model.layers):
        w_in_q, w_rec_q = model.effective_weights(layer)
        if layer.alpha <= 0.0:
            raise ConfigError(
                f"layer {idx}: alpha = {layer.alpha} has no finite time constant")
        tau_ann = alpha_to_tau(layer.alpha, timing.t_ann)
        tau_s = rescale_tau(tau_ann, timing)
        tau_i = tau_s if config.tau_i_override is None else config.tau_i_override
        if layer.kind == KIND_INPUT:
            tau_u = config.tau_u  # analog drive: no presynaptic lead to cancel
        else:
            tau_u = tau_s if config.tau_u_override is None else config.tau_u_override
        # the network's operating constants are the integer-rounded taus (the
        # hardware description); the real-valued taus are kept as provenance.
        # Mapping with the integer constants keeps the filter-gain
        # cancellation exact in both simulation modes.
        tau_s_fx, tau_i_fx, tau_u_fx = _int_tau(tau_s), _int_tau(tau_i), _int_tau(tau_u)
        w_fb = int(round_half_away(np.array(f / tau_s_fx)))
        if w_fb < 1:
            raise NumericError(
                f"layer {idx}: f = {f} gives feedback weight below 1 "
                f"(f/tau_s = {f / tau_s_fx:.3g}); increase f")
        bias = map_bias(layer.bias, f, tau_i_fx)
        if layer.kind == KIND_INPUT:
            kind = "encoder"
            w_in = None
            enc_w = w_in_q
        else:
            kind = "recurrent" if layer.kind == KIND_RECURRENT else "output"
            w_in = map_weights(w_in_q, f, tau_u_fx, tau_i_fx,
                               config.weight_gain, config.weight_limit)
            enc_w = None
        w_rec = None
        if w_rec_q is not None:
            w_rec = map_weights(w_rec_q, f, tau_u_fx, tau_i_fx,
                                config.weight_gain, config.weight_limit)
        layers.append(SnnLayer(
            kind=kind, size=layer.size, w_in=w_in, w_rec=w_rec, bias=bias,
            enc_w=enc_w, tau_s=tau_s, tau_i=tau_i, tau_u=tau_u,
            tau_mem=config.tau_mem, tau_s_fx=tau_s_fx,
            tau_i_fx=tau_i_fx, tau_u_fx=tau_u_fx,
            tau_mem_fx=_int_tau(config.tau_mem), w_fb=w_fb, threshold=w_fb))
    return SnnNetwork(layers=layers, f=f, timing=timing, config=config,
                      source_model=model.copy())


def _weight_cap(model: LpRnnModel, timing: TimingConfig, config: CompileConfig) -> float:
    """Largest f for which every mapped weight stays within the hardware range."""
    cap = math.inf
    for layer in model.layers:
        if layer.kind == KIND_INPUT:
            continue  # encoder weights stay real-valued off-chip
        tau_s = rescale_tau(alpha_to_tau(layer.alpha, timing.t_ann), timing)
        tau_i = _int_tau(tau_s if config.tau_i_override is None else config.tau_i_override)
        tau_u = _int_tau(tau_s if config.tau_u_override is None else config.tau_u_override)
        w_in_q, w_rec_q = model.effective_weights(layer)
        for w in (w_in_q, w_rec_q):
            if w is None:
                continue
            peak = float(np.max(np.abs(w)))
            if peak == 0.0:
                continue
            cap = min(cap, (config.weight_limit + 0.499) *
                      tau_u * tau_i * config.weight_gain / peak)
    return cap


def probe_peak_state(model: LpRnnModel, probes: list[FeatureSequence],
                     timing: TimingConfig, f: float,
                     config: CompileConfig = CompileConfig()) -> float:
    """Peak |state| over a reference-mode simulation of the mapped network."""
    from .snn_sim import simulate  # deferred: snn_sim imports this module

    net = compile_network(model, timing, f, config)
    peak = 0.0
    for probe in probes:
        trace = simulate(net, probe, mode="reference", record_rasters=False)
        peak = max(peak, trace.peak_state)
    return peak


def select_scale_factor(model: LpRnnModel, probes: list[FeatureSequence],
                        timing: TimingConfig,
                        config: CompileConfig = CompileConfig(),
                        grid: float = 0.02, return_trace: bool = False):
    """Find the largest f whose simulated peak state stays below
    STATE_LIMIT * safety_margin on the probe inputs.

    Starts from the weight-range cap and bisects downward in log space to a
    relative grid resolution. The search trace of (f, peak) pairs is
    available for diagnostics via return_trace.
    """
    if not probes:
        raise ConfigError("probe set must be non-empty")
    bound = STATE_LIMIT * config.safety_margin
    cap = _weight_cap(model, timing, config)
    if math.isinf(cap):
        # all on-chip weights are zero; only state headroom binds
        cap = bound
    trace: list[tuple[float, float]] = []

    def peak_at(f: float) -> float:
        p = probe_peak_state(model, probes, timing, f, config)
        trace.append((f, p))
        return p

    hi = cap
    if peak_at(hi) <= bound:
        result = hi
    else:
        lo = None
        candidate = hi
        for _ in range(60):
            candidate /= 2.0
            try:
                if peak_at(candidate) <= bound:
                    lo = candidate
                    break
            except NumericError:
                break  # w_fb fell below 1: no feasible f further down
        if lo is None:
            peak = min(p for _, p in trace)
            raise NumericError(
                f"no feasible scale factor: even tiny f overflows "
                f"(best peak state {peak:.3g} vs bound {bound:.3g})")
        f_lo, f_hi = lo, min(lo * 2.0, hi)
        while f_hi / f_lo > 1.0 + grid:
            mid = math.sqrt(f_lo * f_hi)
            if peak_at(mid) <= bound:
                f_lo = mid
            else:
                f_hi = mid
        result = f_lo
    if return_trace:
        trace.sort(key=lambda fp: fp[0])
        return result, trace
    return result


# Network container format mirrors the model format: JSON metadata entry +
# integer payloads, with the source model embedded for paired evaluation.

def save_network(net: SnnNetwork, path) -> None:
    import io as _io

    meta = {
        "format": "sdrnn-net-v1",
        "f": net.f,
        "t_ann": net.timing.t_ann,
        "t_snn": net.timing.t_snn,
        "config": {
            "tau_u": net.config.tau_u, "tau_mem": net.config.tau_mem,
            "tau_u_override": net.config.tau_u_override,
            "tau_i_override": net.config.tau_i_override,
            "weight_gain": net.config.weight_gain,
            "weight_limit": net.config.weight_limit,
            "safety_margin": net.config.safety_margin,
            "decay_rounding": net.config.decay_rounding,
        },
        "notes": net.notes,
        "layers": [{
            "kind": l.kind, "size": l.size,
            "tau_s": l.tau_s, "tau_i": l.tau_i, "tau_u": l.tau_u,
            "tau_mem": l.tau_mem, "tau_s_fx": l.tau_s_fx, "tau_i_fx": l.tau_i_fx,
            "tau_u_fx": l.tau_u_fx, "tau_mem_fx": l.tau_mem_fx,
            "w_fb": l.w_fb, "threshold": l.threshold,
        } for l in net.layers],
    }
    arrays = {"meta": np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)}
    for li, layer in enumerate(net.layers):
        arrays[f"l{li}_bias"] = layer.bias
        if layer.w_in is not None:
            arrays[f"l{li}_w_in"] = layer.w_in
        if layer.w_rec is not None:
            arrays[f"l{li}_w_rec"] = layer.w_rec
        if layer.enc_w is not None:
            arrays[f"l{li}_enc_w"] = layer.enc_w
    buf = _io.BytesIO()
    save_model(net.source_model, buf)
    arrays["source_model"] = np.frombuffer(buf.getvalue(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_network(path) -> SnnNetwork:
    import io as _io

    with np.load(path) as data:
        if "meta" not in data:
            raise DataError(f"{path}: not a network file (missing metadata)")
        meta = json.loads(bytes(data["meta"]).decode())
        if meta.get("format") != "sdrnn-net-v1":
            raise DataError(f"{path}: unsupported network format {meta.get('format')!r}")
        cfg = CompileConfig(**meta["config"])
        layers = []
        for li, lmeta in enumerate(meta["layers"]):
            layers.append(SnnLayer(
                kind=lmeta["kind"], size=lmeta["size"],
                w_in=data[f"l{li}_w_in"] if f"l{li}_w_in" in data else None,
                w_rec=data[f"l{li}_w_rec"] if f"l{li}_w_rec" in data else None,
                bias=data[f"l{li}_bias"],
                enc_w=data[f"l{li}_enc_w"] if f"l{li}_enc_w" in data else None,
                tau_s=lmeta["tau_s"], tau_i=lmeta["tau_i"], tau_u=lmeta["tau_u"],
                tau_mem=lmeta["tau_mem"], tau_s_fx=lmeta["tau_s_fx"],
                tau_i_fx=lmeta["tau_i_fx"], tau_u_fx=lmeta["tau_u_fx"],
                tau_mem_fx=lmeta["tau_mem_fx"], w_fb=lmeta["w_fb"],
                threshold=lmeta["threshold"]))
        source = load_model(_io.BytesIO(bytes(data["source_model"])))
        timing = TimingConfig(meta["t_ann"], meta["t_snn"])
    return SnnNetwork(layers=layers, f=meta["f"], timing=timing, config=cfg,
                      source_model=source, notes=meta.get("notes", {}))


def compile_report(net: SnnNetwork, peak_states: dict | None = None) -> str:
    """Human-readable compile summary: scale factor, per-layer constants and
    integer-weight histograms, and predicted peak states when available."""
    lines = [
        "spiking network compile report",
        f"  scale factor f       : {net.f:.6g}",
        f"  frame period         : {net.timing.t_ann} s",
        f"  simulator step       : {net.timing.t_snn} s (oversample {net.oversample})",
        f"  synaptic gain        : {net.config.weight_gain}",
        f"  state bound          : +/-{STATE_LIMIT} (safety margin {net.config.safety_margin})",
        "",
    ]
    for li, layer in enumerate(net.layers):
        lines.append(f"layer {li} [{layer.kind}] size {layer.size}")
        lines.append(f"  tau_s {layer.tau_s:.2f}  tau_i {layer.tau_i:.2f}  "
                     f"tau_u {layer.tau_u:.2f}  tau_mem {layer.tau_mem:.2f}  "
                     f"w_fb {layer.w_fb}  threshold {layer.threshold}")
        for name, w in (("w_in", layer.w_in), ("w_rec", layer.w_rec)):
            if w is None:
                continue
            values, counts = np.unique(w, return_counts=True)
            hist = ", ".join(f"{int(v)}:{int(c)}" for v, c in zip(values, counts))
            lines.append(f"  {name} histogram: {hist}")
        if layer.enc_w is not None:
            lines.append(f"  analog encoder weights: {layer.enc_w.shape[1]} -> "
                         f"{layer.enc_w.shape[0]} (off-chip, real-valued)")
        if peak_states and li in peak_states:
            lines.append(f"  predicted peak |state|: {peak_states[li]:.4g}")
        lines.append("")
    return "\n".join(lines)
