"""Clock-driven simulation of compiled spiking networks.

Every neuron is a two-compartment unit: the dendritic compartment filters
weighted presynaptic spikes into u and relays its potential i (which also
receives the bias current) into the somatic compartment, whose potential
imem integrates i minus the feedback current s; s integrates the neuron's
own spikes through an inhibitory self-synapse. Spikes propagate to
postsynaptic targets with one step of synaptic delay; the self-feedback
increment lands in the same step the spike is emitted.

Two arithmetic modes share one engine: reference (float64, real time
constants, overflow impossible) and fixed_point (int64 states saturating at
+/-2**23, truncated multiplicative decay, integer time constants). The
network parameters (weights, biases, thresholds) are identical integers in
both modes, so the modes differ only in state arithmetic.

Independent samples are freely batchable: one network instance advances all
states of a batch in lockstep, which is safe because the one-step synaptic
delay removes any cross-neuron ordering dependence within a step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .containers import FeatureSequence, SpikeRaster
from .convert import SnnNetwork
from .errors import ConfigError, DataError
from .numerics import decay_array, round_half_away, sat_add_array

_MAX_SAT_LOG = 1000


@dataclass
class CompartmentState:
    """State arrays of one layer: dendritic (u, i) and somatic (imem, s)."""

    u: np.ndarray
    i: np.ndarray
    s: np.ndarray
    imem: np.ndarray


@dataclass
class SimulationTrace:
    """Outcome of a single-sample simulation run."""

    rasters: list[SpikeRaster | None]
    frame_s: list[np.ndarray]          # per layer [n_frames, size], s at frame ends
    out_s_steps: np.ndarray            # [duration, n_classes]
    spike_counts: list[np.ndarray]     # per layer [size]
    saturation_events: list[tuple]     # (step, layer, var, count), capped log
    saturation_total: int
    peak_state: float
    mode: str
    duration: int
    oversample: int
    probes: dict = field(default_factory=dict)


@dataclass
class BatchResult:
    """Outcome of a batched simulation (no rasters, readout pre-accumulated)."""

    scores: np.ndarray                 # [batch, n_classes]
    spikes_per_sample: np.ndarray      # [batch]
    spike_counts: list[np.ndarray]     # per layer [batch, size]
    frame_s: list[np.ndarray]          # per layer [batch, n_frames, size]
    saturation_total: int
    peak_state: float
    mode: str


def _mode_flag(mode: str) -> bool:
    if mode in ("fixed", "fixed_point"):
        return True
    if mode == "reference":
        return False
    raise ConfigError(f"unknown simulation mode {mode!r}")


def _engine(net: SnnNetwork, x: np.ndarray | None, input_raster: SpikeRaster | None,
            mode: str, record_rasters: bool, probe: dict | None):
    fixed = _mode_flag(mode)
    oversample = net.oversample
    layers = net.layers
    rounding = net.config.decay_rounding
    gain = float(net.config.weight_gain)

    if input_raster is not None:
        if input_raster.population != layers[0].size:
            raise DataError(
                f"raster population {input_raster.population} != encoder size {layers[0].size}")
        if input_raster.duration % oversample:
            raise DataError("raster duration must be a multiple of the oversample ratio")
        batch = 1
        duration = input_raster.duration
        enc_drive = None
        input_spikes = input_raster.dense()  # [duration, n0]
    else:
        if x.ndim != 3:
            raise DataError("input must be [batch, frames, features]")
        batch, n_frames_in, width = x.shape
        if n_frames_in == 0:
            raise DataError("empty sequence rejected")
        enc = layers[0]
        if enc.enc_w is None:
            raise DataError("network has no analog encoder layer; feed a spike raster")
        if width != enc.enc_w.shape[1]:
            raise DataError(f"feature width {width} != encoder input width {enc.enc_w.shape[1]}")
        duration = n_frames_in * oversample
        drive_all = (np.einsum("btd,nd->tbn", x, enc.enc_w)
                     * (net.f / (enc.tau_u_fx * enc.tau_i_fx)))
        enc_drive = round_half_away(drive_all) if fixed else drive_all
        input_spikes = None

    n_frames = duration // oversample
    dtype = np.int64 if fixed else np.float64
    states = [CompartmentState(*(np.zeros((batch, l.size), dtype=dtype) for _ in range(4)))
              for l in layers]
    biases = [l.bias.astype(dtype) for l in layers]
    w_in_t = [None if l.w_in is None else l.w_in.astype(np.float64).T for l in layers]
    w_rec_t = [None if l.w_rec is None else l.w_rec.astype(np.float64).T for l in layers]
    # both modes run on the integer network constants; reference mode is
    # real-valued state arithmetic on the same network
    taus = [(l.tau_u_fx, l.tau_i_fx, l.tau_s_fx, l.tau_mem_fx) for l in layers]
    if not fixed:
        taus = [tuple(float(t) for t in row) for row in taus]

    prev_spikes = [np.zeros((batch, l.size)) for l in layers]
    spike_counts = [np.zeros((batch, l.size), dtype=np.int64) for l in layers]
    frame_s = [np.zeros((batch, n_frames, l.size)) for l in layers]
    out_hist = np.zeros((duration, layers[-1].size)) if batch == 1 else None
    window = max(1, math.ceil(net.source_model.readout_fraction * duration))
    acc = np.zeros((batch, layers[-1].size))
    acc_start = duration - window
    raster_events: list[list] = [[] for _ in layers]
    sat_events: list[tuple] = []
    sat_total = 0
    peak = 0.0
    probes = {}
    if probe:
        for li, ids in probe.items():
            for var in ("u", "i", "s", "imem"):
                probes[(li, var)] = np.zeros((duration, len(ids)))

    for t in range(duration):
        new_spikes = []
        for li, layer in enumerate(layers):
            if li == 0 and input_spikes is not None:
                new_spikes.append(input_spikes[t][None, :].astype(np.float64))
                spike_counts[0] += input_spikes[t][None, :]
                continue
            st = states[li]
            t_u, t_i, t_s, t_m = taus[li]
            if layer.kind == "encoder":
                drive = enc_drive[t // oversample]
            else:
                drive = prev_spikes[li - 1] @ w_in_t[li]
                if w_rec_t[li] is not None:
                    drive = drive + prev_spikes[li] @ w_rec_t[li]
                drive = drive * gain
                if fixed:
                    drive = drive.astype(np.int64)
            if fixed:
                u, c1 = sat_add_array(
                    decay_array(st.u, t_u, fixed=True, rounding=rounding), drive)
                i, c2 = sat_add_array(
                    decay_array(st.i, t_i, fixed=True, rounding=rounding), u + biases[li])
                s = decay_array(st.s, t_s, fixed=True, rounding=rounding)
                imem, c3 = sat_add_array(
                    decay_array(st.imem, t_m, fixed=True, rounding=rounding), i - s)
                fired = imem > layer.threshold
                imem = np.where(fired, 0, imem)
                s, c4 = sat_add_array(s, layer.w_fb * fired)
                for count, var in ((c1, "u"), (c2, "i"), (c3, "imem"), (c4, "s")):
                    if count:
                        sat_total += count
                        if len(sat_events) < _MAX_SAT_LOG:
                            sat_events.append((t, li, var, count))
            else:
                u = st.u - st.u / t_u + drive
                i = st.i - st.i / t_i + u + biases[li]
                s = st.s - st.s / t_s
                imem = st.imem - st.imem / t_m + i - s
                fired = imem > layer.threshold
                imem = np.where(fired, 0.0, imem)
                s = s + layer.w_fb * fired
            st.u, st.i, st.s, st.imem = u, i, s, imem
            peak = max(peak, float(np.abs(u).max()), float(np.abs(i).max()),
                       float(np.abs(s).max()), float(np.abs(imem).max()))
            spike_counts[li] += fired
            if record_rasters and batch == 1:
                idx = np.nonzero(fired[0])[0]
                if idx.size:
                    raster_events[li].append((t, idx))
            new_spikes.append(fired.astype(np.float64))
        prev_spikes = new_spikes
        if (t + 1) % oversample == 0:
            fr = (t + 1) // oversample - 1
            for li in range(len(layers)):
                frame_s[li][:, fr, :] = states[li].s
        if out_hist is not None:
            out_hist[t] = states[-1].s[0]
        if t >= acc_start:
            acc += states[-1].s
        if probe:
            for li, ids in probe.items():
                st = states[li]
                for var in ("u", "i", "s", "imem"):
                    probes[(li, var)][t] = getattr(st, var)[0, ids]

    scores = acc / window / net.f
    if batch == 1:
        rasters: list[SpikeRaster | None] = []
        dt = net.timing.t_snn
        for li, events in enumerate(raster_events):
            if not record_rasters:
                rasters.append(None)
                continue
            if li == 0 and input_spikes is not None:
                rasters.append(input_raster)
                continue
            if events:
                times = np.concatenate([np.full(idx.size, t, dtype=np.int64)
                                        for t, idx in events])
                units = np.concatenate([idx.astype(np.int64) for _, idx in events])
            else:
                times = np.empty(0, dtype=np.int64)
                units = np.empty(0, dtype=np.int64)
            rasters.append(SpikeRaster(times, units, duration, layers[li].size, dt))
        return SimulationTrace(
            rasters=rasters, frame_s=[fs[0] for fs in frame_s], out_s_steps=out_hist,
            spike_counts=[sc[0] for sc in spike_counts], saturation_events=sat_events,
            saturation_total=sat_total, peak_state=peak, mode=mode, duration=duration,
            oversample=oversample, probes=probes)
    spikes_per_sample = sum(sc.sum(axis=1) for sc in spike_counts)
    return BatchResult(scores=scores, spikes_per_sample=spikes_per_sample,
                       spike_counts=spike_counts, frame_s=frame_s,
                       saturation_total=sat_total, peak_state=peak, mode=mode)


def simulate(net: SnnNetwork, inp, mode: str = "reference",
             probe: dict | None = None, record_rasters: bool = True) -> SimulationTrace:
    """Simulate one input: a FeatureSequence through the analog encoder, or a
    SpikeRaster of pre-encoded input spikes that replaces the encoder output."""
    if isinstance(inp, FeatureSequence):
        return _engine(net, inp.data[None, :, :], None, mode, record_rasters, probe)
    if isinstance(inp, SpikeRaster):
        return _engine(net, None, inp, mode, record_rasters, probe)
    raise DataError(f"unsupported input type {type(inp).__name__}")


def simulate_batch(net: SnnNetwork, x: np.ndarray, mode: str = "reference") -> BatchResult:
    """Simulate a stack of equal-length feature sequences [batch, frames, dim]."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3 or x.shape[0] < 2:
        raise DataError("simulate_batch expects [batch >= 2, frames, features]; "
                        "use simulate() for single inputs")
    return _engine(net, x, None, mode, record_rasters=False, probe=None)


def readout(trace: SimulationTrace, net: SnnNetwork) -> np.ndarray:
    """Class scores: output-layer s averaged over the trailing readout window
    and rescaled to source-network units by 1/f."""
    if trace.out_s_steps is None or trace.out_s_steps.shape[0] != trace.duration:
        raise DataError("trace does not cover the full duration")
    window = max(1, math.ceil(net.source_model.readout_fraction * trace.duration))
    return trace.out_s_steps[-window:].mean(axis=0) / net.f


def compare_activations(ann_traces: list[np.ndarray], snn_trace: SimulationTrace,
                        net: SnnNetwork) -> dict:
    """Per-layer error metrics between source-network activations and the
    decoded spiking activations (frame-sampled s rescaled by 1/f)."""
    if len(ann_traces) != len(net.layers):
        raise DataError(f"expected {len(net.layers)} layer traces, got {len(ann_traces)}")
    report = {"per_layer": [], "oversample": snn_trace.oversample, "mode": snn_trace.mode}
    for li, (ann, layer) in enumerate(zip(ann_traces, net.layers)):
        snn = snn_trace.frame_s[li] / net.f
        if ann.shape != snn.shape:
            raise DataError(f"layer {li}: trace shape mismatch {ann.shape} vs {snn.shape}")
        diff = ann - snn
        denom = float((ann ** 2).sum())
        num = float((diff ** 2).sum())
        rel_mse = num / denom if denom > 0 else (0.0 if num == 0.0 else math.inf)
        report["per_layer"].append({
            "layer": li,
            "kind": layer.kind,
            "relative_mse": rel_mse,
            "max_abs_deviation": float(np.abs(diff).max()),
            "spike_count": int(snn_trace.spike_counts[li].sum()),
        })
    report["total_spikes"] = int(sum(e["spike_count"] for e in report["per_layer"]))
    report["saturation_events"] = snn_trace.saturation_total
    return report
