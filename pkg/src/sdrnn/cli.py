"""Command-line pipeline: features, train, convert, evaluate, compare.

Every command writes a resolved-config JSON next to its primary output so a
run can be replayed bit-for-bit. Exit codes: 0 success, 2 configuration
error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import audio_frontend as af
from .containers import FeatureSequence
from .convert import (CompileConfig, TimingConfig, compile_network, compile_report,
                      load_network, probe_peak_state, save_network,
                      select_scale_factor)
from .errors import ConfigError, DataError, NumericError
from .lprnn import (TrainConfig, forward_batch, init_model, load_model,
                    magnitude_prune, save_model, train)
from .snn_sim import compare_activations, simulate, simulate_batch, readout

CACHE_ENV = "SDRNN_CACHE_DIR"


def _write_json(path, payload) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _resolved_config(args: argparse.Namespace, command: str) -> dict:
    skip = {"func", "config"}
    resolved = {k: v for k, v in sorted(vars(args).items()) if k not in skip}
    resolved["command"] = command
    return resolved


def _apply_config_file(args: argparse.Namespace, parser_defaults: dict) -> None:
    """Overlay: defaults < config file < explicit flags (flags left at their
    default are treated as unset)."""
    if not getattr(args, "config", None):
        return
    with open(args.config) as fh:
        overrides = json.load(fh)
    for key, value in overrides.items():
        if key in ("func", "config", "command"):
            continue
        if not hasattr(args, key):
            raise ConfigError(f"unknown config key {key!r}")
        if getattr(args, key) == parser_defaults.get(key):
            setattr(args, key, value)


def _mel_config(args) -> af.MelConfig:
    return af.MelConfig(sample_rate=args.sample_rate, n_fft=args.n_fft,
                        hop_length=args.hop_length, n_mels=args.n_mels,
                        f_min=args.f_min, f_max=args.f_max, log_floor=args.log_floor)


def _cache_dir(args) -> Path:
    if os.environ.get(CACHE_ENV):
        return Path(os.environ[CACHE_ENV])
    return Path(args.features)


def _feature_one(job) -> dict:
    wav_path, key, cache_dir = job
    out = Path(cache_dir) / f"{key}.npz"
    if out.exists():
        return {"key": key, "cached": True, "error": None}
    try:
        clip = af.load_wav(wav_path)
        cfg = _feature_one.mel_cfg
        feats = af.mel_spectrogram(clip, cfg)
        tmp = out.with_suffix(".tmp.npz")
        np.savez(tmp, data=feats.data, frame_period=feats.frame_period)
        os.replace(tmp, out)
        return {"key": key, "cached": False, "error": None}
    except (DataError, ConfigError) as exc:
        return {"key": key, "cached": False, "error": str(exc)}


def _feature_pool_init(cfg):
    _feature_one.mel_cfg = cfg


def cmd_features(args) -> int:
    manifest_path = Path(args.manifest)
    rows = af.read_manifest(manifest_path)
    mel_cfg = _mel_config(args)
    cache_dir = _cache_dir(args)
    cache_dir.mkdir(parents=True, exist_ok=True)

    jobs, index = [], []
    for row in rows:
        wav_path = manifest_path.parent / row["path"]
        if not wav_path.exists():
            raise DataError(f"{wav_path}: listed in manifest but missing")
        key = af.cache_key(wav_path, mel_cfg)
        jobs.append((wav_path, key, cache_dir))
        index.append({**row, "key": key})

    if args.workers > 1 and jobs:
        with ProcessPoolExecutor(max_workers=args.workers,
                                 initializer=_feature_pool_init,
                                 initargs=(mel_cfg,)) as pool:
            results = list(pool.map(_feature_one, jobs))
    else:
        _feature_pool_init(mel_cfg)
        results = [_feature_one(job) for job in jobs]

    failures = [(row["path"], res["error"]) for row, res in zip(rows, results)
                if res["error"]]
    hits = sum(1 for res in results if res["cached"])
    if failures:
        print(f"feature extraction failed for {len(failures)} file(s):", file=sys.stderr)
        for path, error in failures:
            print(f"  {path}: {error}", file=sys.stderr)
        raise DataError(f"{len(failures)} of {len(rows)} files failed")

    train_feats = []
    for entry in index:
        if entry["split"] == "train":
            with np.load(cache_dir / f"{entry['key']}.npz") as data:
                train_feats.append(data["data"])
    stats = af.compute_norm_stats(train_feats) if train_feats else None
    payload = {"mel_config": asdict(mel_cfg), "mel_digest": mel_cfg.digest(),
               "norm_stats": stats, "entries": index}
    _write_json(cache_dir / "features_index.json", payload)
    _write_json(cache_dir / "features.config.json", _resolved_config(args, "features"))
    print(f"features: {len(rows)} files ({hits} cache hits) -> {cache_dir}")
    return 0


def _load_split(features_dir: Path, split: str, trim: str = "min"):
    """Stacked features/labels for one split; sequences trimmed to the
    shortest length in the split so they batch."""
    index_path = features_dir / "features_index.json"
    if not index_path.exists():
        raise DataError(f"{features_dir}: no features_index.json; run `features` first")
    with open(index_path) as fh:
        index = json.load(fh)
    entries = [e for e in index["entries"] if e["split"] == split]
    if not entries:
        raise DataError(f"split {split!r} not present in the feature index")
    stats = index["norm_stats"]
    if stats is None:
        raise DataError("feature index has no normalization statistics "
                        "(manifest had no train split)")
    label_names = sorted({e["label"] for e in index["entries"]})
    label_ids = {name: k for k, name in enumerate(label_names)}
    feats, labels, periods = [], [], []
    for entry in entries:
        with np.load(features_dir / f"{entry['key']}.npz") as data:
            feats.append(af.apply_norm(data["data"], stats))
            periods.append(float(data["frame_period"]))
        labels.append(label_ids[entry["label"]])
    t_min = min(f.shape[0] for f in feats)
    x = np.stack([f[:t_min] for f in feats])
    return x, np.array(labels, dtype=np.int64), label_names, periods[0], stats


def cmd_train(args) -> int:
    features_dir = Path(args.features)
    x_tr, y_tr, label_names, t_ann, stats = _load_split(features_dir, "train")
    dataset = {"train": (x_tr, y_tr)}
    try:
        x_val, y_val, _, _, _ = _load_split(features_dir, "val")
        dataset["val"] = (x_val, y_val)
    except DataError:
        pass

    model = init_model(n_features=x_tr.shape[2], hidden=tuple(args.hidden),
                       n_classes=len(label_names), alphas=tuple(args.alpha),
                       t_ann=t_ann, seed=args.seed, clamp_ceiling=args.clamp,
                       bits=args.bits, readout_fraction=args.readout_fraction)
    model.norm_stats = stats
    model.label_names = label_names
    cfg = TrainConfig(epochs=args.epochs, lr=args.lr,
                      batch_size=args.batch_size, seed=args.seed)
    model = train(model, dataset, cfg)
    if args.prune_sparsity > 0:
        model = magnitude_prune(model, args.prune_sparsity)
        if args.prune_finetune_epochs > 0:
            fine = TrainConfig(epochs=args.prune_finetune_epochs, lr=args.lr,
                               batch_size=args.batch_size, seed=args.seed + 1)
            model = train(model, dataset, fine)

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_model(model, out)
    _write_json(str(out) + ".config.json", _resolved_config(args, "train"))
    logits, _ = forward_batch(model, x_tr)
    acc = float((logits.argmax(axis=1) == y_tr).mean())
    print(f"train: model -> {out} (train accuracy {acc:.3f}, "
          f"classes {','.join(label_names)})")
    return 0


def cmd_convert(args) -> int:
    model = load_model(args.model)
    timing = TimingConfig(t_ann=model.t_ann, t_snn=args.t_snn)
    cfg = CompileConfig(tau_u=args.tau_u, tau_mem=args.tau_mem,
                        weight_gain=args.weight_gain,
                        weight_limit=args.weight_limit,
                        safety_margin=args.safety_margin,
                        decay_rounding=args.decay_rounding)
    if args.f is not None:
        f = args.f
        trace = None
    else:
        if args.features is None:
            raise ConfigError("need --features (and a manifest with a train "
                              "split) to select f, or pass --f explicitly")
        x, _, _, t_ann, _ = _load_split(Path(args.features), args.probe_split)
        probes = [FeatureSequence(x[k], t_ann) for k in range(min(args.probes, len(x)))]
        f, trace = select_scale_factor(model, probes, timing, cfg,
                                       return_trace=True)
    net = compile_network(model, timing, f, cfg)
    net.notes["f_search_trace"] = trace
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_network(net, out)
    report = compile_report(net)
    with open(str(out) + ".report.txt", "w") as fh:
        fh.write(report)
    _write_json(str(out) + ".config.json", _resolved_config(args, "convert"))
    print(f"convert: f = {f:.6g}, network -> {out}")
    return 0


def _detect_artifact(path):
    with np.load(path) as data:
        if "meta" not in data:
            raise DataError(f"{path}: unrecognized file (no metadata)")
        meta = json.loads(bytes(data["meta"]).decode())
    fmt = meta.get("format", "")
    if fmt == "sdrnn-model-v1":
        return "model"
    if fmt == "sdrnn-net-v1":
        return "net"
    raise DataError(f"{path}: unrecognized format {fmt!r}")


def _per_class_accuracy(pred, labels, label_names):
    out = {}
    for k, name in enumerate(label_names):
        mask = labels == k
        out[name] = float((pred[mask] == k).mean()) if mask.any() else None
    return out


def cmd_evaluate(args) -> int:
    kind = _detect_artifact(args.input)
    mode = args.mode
    if mode == "auto":
        mode = "ann" if kind == "model" else "reference"
    if kind == "model" and mode != "ann":
        raise ConfigError("a model file evaluates in --mode ann; convert it "
                          "to a network for spiking modes")
    if kind == "net" and mode == "ann":
        raise ConfigError("a network file evaluates in --mode reference or fixed")

    x, labels, label_names, t_ann, _ = _load_split(Path(args.features), args.split)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    rows = []

    if kind == "model":
        model = load_model(args.input)
        logits, _ = forward_batch(model, x)
        pred = logits.argmax(axis=1)
        margins = np.sort(logits, axis=1)[:, -1] - np.sort(logits, axis=1)[:, -2]
        metrics = {
            "mode": "ann",
            "n_samples": int(len(labels)),
            "accuracy": float((pred == labels).mean()),
            "per_class_accuracy": _per_class_accuracy(pred, labels, label_names),
            "mean_margin": float(margins.mean()),
        }
        for k in range(len(labels)):
            rows.append((k, label_names[labels[k]], label_names[pred[k]],
                         f"{margins[k]:.6f}", ""))
    else:
        net = load_network(args.input)
        model = net.source_model
        ann_logits, _ = forward_batch(model, x)
        ann_pred = ann_logits.argmax(axis=1)
        preds = np.zeros(len(labels), dtype=np.int64)
        spikes = np.zeros(len(labels))
        tracking = []
        sat_total = 0
        for lo in range(0, len(labels), args.batch):
            chunk = x[lo:lo + args.batch]
            if chunk.shape[0] == 1:
                trace = simulate(net, FeatureSequence(chunk[0], t_ann), mode=mode,
                                 record_rasters=False)
                scores = readout(trace, net)[None, :]
                frame_s = [fs[None] for fs in trace.frame_s]
                counts = [sc[None] for sc in trace.spike_counts]
                sat_total += trace.saturation_total
            else:
                result = simulate_batch(net, chunk, mode=mode)
                scores = result.scores
                frame_s = result.frame_s
                counts = result.spike_counts
                sat_total += result.saturation_total
            preds[lo:lo + chunk.shape[0]] = scores.argmax(axis=1)
            spikes[lo:lo + chunk.shape[0]] = sum(c.sum(axis=1) for c in counts)
            _, cache = forward_batch(model, chunk, keep=True)
            for b in range(chunk.shape[0]):
                per_layer = []
                for li in range(len(net.layers)):
                    ann_tr = cache["ys"][li][:, b, :]
                    snn_tr = frame_s[li][b] / net.f
                    num = float(((ann_tr - snn_tr) ** 2).sum())
                    den = float((ann_tr ** 2).sum())
                    per_layer.append(num / den if den > 0 else 0.0)
                tracking.append(per_layer)
        tracking = np.array(tracking)
        agreement = float((preds == ann_pred).mean())
        metrics = {
            "mode": mode,
            "n_samples": int(len(labels)),
            "accuracy": float((preds == labels).mean()),
            "ann_accuracy": float((ann_pred == labels).mean()),
            "ann_agreement": agreement,
            "per_class_accuracy": _per_class_accuracy(preds, labels, label_names),
            "mean_spikes_per_sample": float(spikes.mean()),
            "tracking_relative_mse_mean": tracking.mean(axis=0).tolist(),
            "tracking_relative_mse_max": tracking.max(axis=0).tolist(),
            "saturation_events": int(sat_total),
        }
        for k in range(len(labels)):
            rows.append((k, label_names[labels[k]], label_names[preds[k]],
                         f"{tracking[k].max():.3e}", int(spikes[k])))

    _write_json(out, metrics)
    csv_path = str(out) + ".samples.csv"
    with open(csv_path, "w") as fh:
        fh.write("index,label,prediction,margin_or_tracking,spikes\n")
        for row in rows:
            fh.write(",".join(str(v) for v in row) + "\n")
    _write_json(str(out) + ".config.json", _resolved_config(args, "evaluate"))
    print(f"evaluate[{metrics['mode']}]: accuracy {metrics['accuracy']:.3f} "
          f"on {metrics['n_samples']} samples -> {out}")
    return 0


def cmd_compare(args) -> int:
    net = load_network(args.net)
    x, labels, label_names, t_ann, _ = _load_split(Path(args.features), args.split)
    if not 0 <= args.sample_index < len(labels):
        raise ConfigError(f"sample index {args.sample_index} outside split "
                          f"of {len(labels)} samples")
    feats = FeatureSequence(x[args.sample_index], t_ann)
    model = net.source_model
    from .lprnn import forward_sequence

    logits, ann_traces = forward_sequence(model, feats)
    trace = simulate(net, feats, mode=args.mode, record_rasters=False)
    report = compare_activations(ann_traces, trace, net)
    report["sample_index"] = args.sample_index
    report["label"] = label_names[labels[args.sample_index]]
    report["ann_argmax"] = label_names[int(np.argmax(logits))]
    report["snn_argmax"] = label_names[int(np.argmax(readout(trace, net)))]

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_json(out_dir / "compare.json", report)
    with open(out_dir / "traces.csv", "w") as fh:
        fh.write("frame,layer,unit,ann,snn\n")
        for li, ann_tr in enumerate(ann_traces):
            snn_tr = trace.frame_s[li] / net.f
            for frame in range(ann_tr.shape[0]):
                for unit in range(ann_tr.shape[1]):
                    fh.write(f"{frame},{li},{unit},{ann_tr[frame, unit]:.8g},"
                             f"{snn_tr[frame, unit]:.8g}\n")
    _write_json(out_dir / "compare.config.json", _resolved_config(args, "compare"))
    worst = max(e["relative_mse"] for e in report["per_layer"])
    print(f"compare: sample {args.sample_index} ({report['label']}), "
          f"worst layer relative MSE {worst:.3e} -> {out_dir}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sdrnn",
        description="Train low-pass RNNs, compile them to sigma-delta spiking "
                    "networks, and simulate them under fixed-point constraints.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("features", help="extract mel features for a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--features", required=True, metavar="DIR",
                   help=f"feature cache directory (env {CACHE_ENV} overrides)")
    p.add_argument("--sample-rate", type=int, default=16000)
    p.add_argument("--n-fft", type=int, default=512)
    p.add_argument("--hop-length", type=int, default=160)
    p.add_argument("--n-mels", type=int, default=40)
    p.add_argument("--f-min", type=float, default=20.0)
    p.add_argument("--f-max", type=float, default=8000.0)
    p.add_argument("--log-floor", type=float, default=1e-6)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--config")
    p.set_defaults(func=cmd_features)

    p = sub.add_parser("train", help="train a quantization-aware low-pass RNN")
    p.add_argument("--features", required=True, metavar="DIR")
    p.add_argument("--out", required=True)
    p.add_argument("--hidden", type=int, nargs="+", default=[24, 24, 24],
                   help="widths of the input low-pass and recurrent layers")
    p.add_argument("--alpha", type=float, nargs="+", default=[0.6, 0.6, 0.6, 0.6],
                   help="one smoothing coefficient per layer (incl. output)")
    p.add_argument("--epochs", type=int, default=40)
    p.add_argument("--lr", type=float, default=1e-2)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--clamp", type=float, default=1.0)
    p.add_argument("--bits", type=int, default=3)
    p.add_argument("--readout-fraction", type=float, default=0.25)
    p.add_argument("--prune-sparsity", type=float, default=0.0)
    p.add_argument("--prune-finetune-epochs", type=int, default=0)
    p.add_argument("--config")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("convert", help="compile a trained model to a spiking network")
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--t-snn", type=float, default=0.0002,
                   help="simulator step in seconds (frame period / oversample)")
    p.add_argument("--f", type=float, default=None,
                   help="weight scale factor; omitted -> probe-based selection")
    p.add_argument("--features", metavar="DIR")
    p.add_argument("--probes", type=int, default=8)
    p.add_argument("--probe-split", default="train")
    p.add_argument("--tau-u", type=float, default=2.0,
                   help="encoder-stage input filter (steps)")
    p.add_argument("--tau-mem", type=float, default=1.0)
    p.add_argument("--weight-gain", type=int, default=1)
    p.add_argument("--weight-limit", type=int, default=255)
    p.add_argument("--safety-margin", type=float, default=0.5)
    p.add_argument("--decay-rounding", choices=["round", "trunc"], default="round")
    p.add_argument("--config")
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("evaluate", help="evaluate a model (ann) or network (spiking)")
    p.add_argument("--input", required=True, metavar="MODEL_OR_NET")
    p.add_argument("--features", required=True, metavar="DIR")
    p.add_argument("--split", default="test")
    p.add_argument("--mode", choices=["auto", "ann", "reference", "fixed"],
                   default="auto")
    p.add_argument("--out", required=True, metavar="METRICS_JSON")
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--config")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("compare", help="per-layer ANN/SNN activation comparison")
    p.add_argument("--net", required=True)
    p.add_argument("--features", required=True, metavar="DIR")
    p.add_argument("--split", default="test")
    p.add_argument("--sample-index", type=int, default=0)
    p.add_argument("--mode", choices=["reference", "fixed"], default="reference")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--config")
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    defaults = {}
    for action in parser._subparsers._group_actions[0].choices[args.command]._actions:
        if action.dest not in ("help",):
            defaults[action.dest] = action.default
    try:
        _apply_config_file(args, defaults)
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
