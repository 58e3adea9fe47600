"""Command-line entry point.

Subcommands: synth, features, train, cv, infer, quantize, resources,
uq-report. Reports are tab-separated text with the resolved config echoed in
the header; exit code 2 signals a bad config, 3 a missing input.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

from . import dsp, pipeline, resources, uq
from .dataset import Split
from .errors import ConfigError, MurmurKitError
from .nn import Variant, load_network, variant_specs
from .pipeline import PipelineConfig


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON config file (flags override it)")
    p.add_argument("--n-fft", type=int, dest="n_fft")
    p.add_argument("--psd-thr", type=float, dest="psd_thr")
    p.add_argument("--window-s", type=float, dest="window_s")
    p.add_argument("--hop-s", type=float, dest="hop_s")
    p.add_argument("--oversample-divisor", type=int, dest="oversample_divisor")
    p.add_argument("--thr", type=float, dest="vote_thr")
    p.add_argument("--thr-fallback", type=float, dest="fallback_thr")
    p.add_argument("--cs-threshold", type=float, dest="cs_threshold")
    p.add_argument("--confident-ratio", type=float, dest="confident_ratio")
    p.add_argument("--mcd-passes", type=int, dest="mcd_passes")
    p.add_argument("--alpha", type=float, dest="alpha")
    p.add_argument("--seed", type=int, dest="seed")
    p.add_argument("--variant", choices=[v.value for v in Variant], dest="variant")
    p.add_argument("--epochs", type=int, dest="epochs")
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--lr", type=float, dest="lr")
    p.add_argument("--weight-decay", type=float, dest="weight_decay")
    p.add_argument("--min-keep", type=int, dest="min_keep")
    p.add_argument("--entropy-mode", choices=uq.ENTROPY_MODES, dest="entropy_mode")
    p.add_argument("--vote-rule", choices=["share", "quotient"], dest="vote_rule")


def _resolve_config(args: argparse.Namespace) -> PipelineConfig:
    if getattr(args, "config", None):
        cfg_path = Path(args.config)
        if not cfg_path.exists():
            raise FileNotFoundError(f"config file not found: {cfg_path}")
        cfg = PipelineConfig.from_json(cfg_path.read_text(encoding="utf-8"))
    else:
        cfg = PipelineConfig()
    overrides = {}
    for f in dataclasses.fields(PipelineConfig):
        value = getattr(args, f.name, None)
        if value is not None:
            overrides[f.name] = value
    return dataclasses.replace(cfg, **overrides) if overrides else cfg


def _require(path: Path, what: str) -> Path:
    if not Path(path).exists():
        raise FileNotFoundError(f"{what} not found: {path}")
    return Path(path)


def _cmd_synth(args: argparse.Namespace) -> int:
    cfg = _resolve_config(args)
    manifest = pipeline.synth_corpus(args.out, args.patients, cfg.seed)
    print(f"wrote corpus under {args.out} ({manifest})")
    return 0


def _cmd_features(args: argparse.Namespace) -> int:
    cfg = _resolve_config(args)
    manifest, base = pipeline.load_manifest_dir(_require(args.manifest, "manifest"))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    split = Split(args.split)
    index_lines = cfg.header_lines("features")
    index_lines.append("patient_id\tlocation\tcache_file\tsegments_kept\tsegments_total")
    for record in manifest.records(split):
        for ref in record.recordings:
            wf = pipeline.load_waveform(base, record, ref)
            segs = dsp.segment(wf, window_s=cfg.window_s, hop_s=cfg.hop_s)
            if not segs:
                continue
            specs = [dsp.stft_spectrogram(s, cfg.n_fft) for s in segs]
            report = dsp.quality_filter(specs, cfg.psd_thr, min_keep=cfg.min_keep)
            kept = [specs[i] for i in report.kept_indices()]
            fname = f"{record.patient_id}_{ref.location.value}.mesf"
            dsp.write_feature_cache(out / fname, kept)
            index_lines.append(
                f"{record.patient_id}\t{ref.location.value}\t{fname}\t{len(kept)}\t{len(specs)}"
            )
    (out / "features_index.tsv").write_text("\n".join(index_lines) + "\n", encoding="utf-8")
    print(f"wrote feature caches under {out}")
    return 0


def _cmd_train(args: argparse.Namespace) -> int:
    cfg = _resolve_config(args)
    manifest, base = pipeline.load_manifest_dir(_require(args.manifest, "manifest"))
    outcome = pipeline.train_run(manifest, base, cfg, args.out)
    best = outcome.history.best_epoch
    print(f"trained {cfg.variant}: best epoch {best}, weights at {outcome.weights_dir}")
    print(f"calibrated vote threshold {outcome.calibrated_thr:.2f}")
    if outcome.val_patient_metrics is not None:
        m = outcome.val_patient_metrics
        print(f"validation patient accuracy {m.accuracy:.4f}, f1 {m.f1:.4f}")
    return 0


def _cmd_cv(args: argparse.Namespace) -> int:
    cfg = _resolve_config(args)
    manifest, base = pipeline.load_manifest_dir(_require(args.manifest, "manifest"))
    n_fft_grid = [int(v) for v in args.n_fft_grid.split(",")] if args.n_fft_grid else None
    psd_grid = [float(v) for v in args.psd_thr_grid.split(",")] if args.psd_thr_grid else None
    report = pipeline.cv_run(manifest, base, cfg, k=args.k, n_fft_grid=n_fft_grid, psd_thr_grid=psd_grid)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(report, encoding="utf-8")
    print(f"wrote CV report to {args.out}")
    return 0


def _cmd_infer(args: argparse.Namespace) -> int:
    cfg = _resolve_config(args)
    manifest, base = pipeline.load_manifest_dir(_require(args.manifest, "manifest"))
    net = load_network(_require(args.weights, "weights directory"))
    feats = pipeline.eval_features(manifest, base, Split(args.split), cfg)
    result = pipeline.infer_patients(net, feats, cfg, selective=args.selective)
    report = pipeline.infer_report(result, cfg)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(report, encoding="utf-8")
    print(f"wrote predictions to {args.out}")
    if result.patient_metrics is not None:
        m = result.patient_metrics
        print(f"patient accuracy {m.accuracy:.4f}, recall {m.recall:.4f}, f1 {m.f1:.4f}")
    return 0


def _cmd_quantize(args: argparse.Namespace) -> int:
    cfg = _resolve_config(args)
    manifest, base = pipeline.load_manifest_dir(_require(args.manifest, "manifest"))
    net = load_network(_require(args.weights, "weights directory"))
    outcome = pipeline.quantize_run(net, manifest, base, cfg, args.out)
    ratio = outcome.float_payload_bytes / outcome.int8_payload_bytes
    print(f"int8 weights at {outcome.qweights_dir}")
    print(
        f"payload {outcome.int8_payload_bytes} B (float {outcome.float_payload_bytes} B, "
        f"ratio {ratio:.2f}), label agreement {outcome.agreement:.4f}"
    )
    return 0


def _cmd_resources(args: argparse.Namespace) -> int:
    cfg = _resolve_config(args)
    try:
        c, h, w = (int(v) for v in args.input_shape.lower().split("x"))
    except ValueError:
        raise ConfigError(f"--input-shape must look like 1x33x124, got {args.input_shape!r}") from None
    if args.weights:
        net = load_network(_require(args.weights, "weights directory"))
        specs, variant = net.specs, net.variant.value
    else:
        variant = cfg.variant
        specs = variant_specs(Variant(variant))
    report = resources.analyze(specs, input_shape=(c, h, w), dtype_width=args.dtype_width, variant=variant)
    text = "\n".join(cfg.header_lines("resources")) + "\n" + report.to_tsv()
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text, encoding="utf-8")
        print(f"wrote resource report to {args.out}")
    else:
        sys.stdout.write(text)
    return 0


def _cmd_uq_report(args: argparse.Namespace) -> int:
    cfg = _resolve_config(args)
    manifest, base = pipeline.load_manifest_dir(_require(args.manifest, "manifest"))
    net = load_network(_require(args.weights, "weights directory"))
    report = pipeline.uq_report(net, manifest, base, Split(args.split), cfg)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(report, encoding="utf-8")
    print(f"wrote UQ report to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="murmurkit", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic labeled corpus")
    p.add_argument("--patients", type=int, required=True)
    p.add_argument("--out", type=Path, required=True)
    _add_config_flags(p)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("features", help="write feature cache files for a split")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--split", choices=[s.value for s in Split], default="Train")
    p.add_argument("--out", type=Path, required=True)
    _add_config_flags(p)
    p.set_defaults(func=_cmd_features)

    p = sub.add_parser("train", help="train a variant with best-F1 checkpointing")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    _add_config_flags(p)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("cv", help="patient-level k-fold cross-validation")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--n-fft-grid", type=str, default="")
    p.add_argument("--psd-thr-grid", type=str, default="")
    _add_config_flags(p)
    p.set_defaults(func=_cmd_cv)

    p = sub.add_parser("infer", help="patient-level predictions for a split")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--weights", type=Path, required=True)
    p.add_argument("--split", choices=[s.value for s in Split], default="Test")
    p.add_argument("--selective", action=argparse.BooleanOptionalAction, default=False)
    p.add_argument("--out", type=Path, required=True)
    _add_config_flags(p)
    p.set_defaults(func=_cmd_infer)

    p = sub.add_parser("quantize", help="post-training int8 quantization")
    p.add_argument("--manifest", type=Path, required=True, help="calibration manifest")
    p.add_argument("--weights", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    _add_config_flags(p)
    p.set_defaults(func=_cmd_quantize)

    p = sub.add_parser("resources", help="static parameter/MACC/memory report")
    p.add_argument("--weights", type=Path, default=None)
    p.add_argument("--input-shape", type=str, default="1x33x124")
    p.add_argument("--dtype-width", type=int, choices=(1, 4), default=4)
    p.add_argument("--out", type=Path, default=None)
    _add_config_flags(p)
    p.set_defaults(func=_cmd_resources)

    p = sub.add_parser("uq-report", help="per-segment confidence report")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--weights", type=Path, required=True)
    p.add_argument("--split", choices=[s.value for s in Split], default="Test")
    p.add_argument("--out", type=Path, required=True)
    _add_config_flags(p)
    p.set_defaults(func=_cmd_uq_report)
    return parser


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except MurmurKitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
