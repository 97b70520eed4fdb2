"""Command-line entry point: uasmooth {train,evaluate,segment,features,synth,oracle,gradcheck}."""
from __future__ import annotations

import argparse
import json
import logging
import statistics
import sys
from pathlib import Path

import numpy as np
import torch

from .config import ExperimentConfig, dump_config, load_config
from .errors import ConfigError, NumericalError
from .gaussian import DTYPE

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 2, 3


def _config(args) -> ExperimentConfig:
    if getattr(args, "config", None):
        return load_config(args.config)
    return ExperimentConfig().validate()


def _dataset(cfg: ExperimentConfig, corpus=None):
    from .synthetic import load_dataset, synthetic_corpus

    path = corpus or cfg.data.corpus
    if path:
        return load_dataset(path)
    return synthetic_corpus(cfg.data.synthetic)


def cmd_train(args) -> int:
    from .train import train

    cfg = _config(args)
    if args.print_config:
        sys.stdout.write(dump_config(cfg))
        return EXIT_OK
    data = _dataset(cfg, args.corpus)
    trials = args.trials or cfg.trainer.trials
    seed = cfg.trainer.seed if args.seed is None else args.seed
    out = Path(args.out)
    summaries = []
    for t in range(trials):
        _, record = train(cfg, data, out / f"trial{t}", seed=seed + t)
        summaries.append(record.summary())
        print(f"trial {t} seed {seed + t}: best epoch {record.best_epoch}, "
              f"test w_au_pr {record.test.aggregates.get('au_pr')}")
    agg = {}
    for key in ("au_pr", "au_roc", "f1", "ece"):
        vals = [s["test"]["weighted"][f"w_{key}"] for s in summaries]
        vals = [v for v in vals if v is not None]
        if vals:
            agg[key] = {"mean": statistics.fmean(vals), "std": statistics.pstdev(vals)}
    (out / "summary.json").write_text(json.dumps({"trials": summaries, "test": agg}, indent=2))
    dump_config(cfg, out / "config.yaml")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .io import load_checkpoint
    from .train import evaluate, model_from_checkpoint

    ckpt = load_checkpoint(args.checkpoint)
    model = model_from_checkpoint(ckpt)
    cfg = ExperimentConfig.from_dict(ckpt.config)
    data = _dataset(cfg, args.corpus)
    report = evaluate(model, data[args.partition])
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.json").write_text(report.to_json())
        (out / "metrics.txt").write_text(report.to_text())
    sys.stdout.write(report.to_text())
    return EXIT_OK


def cmd_segment(args) -> int:
    from .segmentation import (group_recordings, read_annotations, read_durations, segment_corpus,
                               write_manifest)

    anns = read_annotations(args.annotations)
    durations = read_durations(args.durations) if args.durations else None
    vocab = args.vocabulary.split(",") if args.vocabulary else sorted({a.species for a in anns})
    clips = segment_corpus(group_recordings(anns, durations), vocab, seed=args.seed,
                           length=args.clip_seconds)
    write_manifest(clips, vocab, args.out)
    print(f"{len(clips)} clips from {len({c.recording_id for c in clips})} recordings -> {args.out}")
    return EXIT_OK


def _read_wav(path) -> tuple[int, np.ndarray]:
    from scipy.io import wavfile

    rate, data = wavfile.read(path)
    data = np.asarray(data)
    if np.issubdtype(data.dtype, np.integer):
        data = data / float(np.iinfo(data.dtype).max)
    if data.ndim == 2:
        data = data.mean(axis=1)
    return rate, data.astype(np.float64)


def cmd_features(args) -> int:
    from .audio import log_mel
    from .io import save_tensor
    from .segmentation import read_manifest

    cfg = _config(args).frontend
    if args.manifest:
        clips, _ = read_manifest(args.manifest)
        specs, cache = [], {}
        for c in clips:
            if c.recording_id not in cache:
                cache[c.recording_id] = _read_wav(Path(args.audio_dir) / f"{c.recording_id}.wav")
            rate, wave = cache[c.recording_id]
            i0 = int(round(c.start * rate))
            specs.append(log_mel(wave[i0: i0 + int(round(c.length * rate))], rate, cfg))
        x = np.stack(specs) if specs else np.zeros((0, cfg.frames, cfg.n_mels))
    else:
        rate, wave = _read_wav(args.audio)
        i0 = int(round(args.start * rate))
        x = log_mel(wave[i0:], rate, cfg)
    save_tensor(args.out, x, {"frontend": cfg.to_dict()})
    print(f"features {x.shape} -> {args.out}")
    return EXIT_OK


def cmd_synth(args) -> int:
    from .synthetic import save_dataset, synthetic_corpus

    cfg = _config(args)
    syn = cfg.data.synthetic
    if args.seed is not None:
        syn.seed = args.seed
    ds = synthetic_corpus(syn)
    save_dataset(ds, args.out)
    for name, p in ds.partitions.items():
        print(f"{name}: {len(p)} clips, positives per task {p.y.sum(0).tolist()}")
    return EXIT_OK


def cmd_oracle(args) -> int:
    from .oracle import INSTANCE_KINDS, check_instance, mc_oracle, z_threshold

    if args.kind == "model":
        from .model import SEResNet

        cfg = _config(args)
        model = SEResNet(cfg.architecture, seed=args.seed)
        if args.rho is not None:
            model.set_rho(args.rho)
        x = torch.randn(cfg.architecture.input_shape, generator=torch.Generator().manual_seed(args.seed),
                        dtype=DTYPE)
        report = mc_oracle(model, x, args.samples, args.seed)
        print(report.table())
        return EXIT_OK if report.passed else EXIT_NUMERICAL
    kinds = INSTANCE_KINDS if args.kind == "all" else (args.kind,)
    ok = True
    for kind in kinds:
        res = [check_instance(kind, args.seed + i, args.samples) for i in range(args.instances)]
        thr = z_threshold(2 * sum(r.elements for r in res))
        worst = max(r.worst() for r in res)
        ok &= worst <= thr
        print(f"{kind:<15} instances={len(res)} worst|z|={worst:9.3f} threshold={thr:.3f} "
              f"max_err_mean={max(r.err_mean for r in res):.3e} max_err_var={max(r.err_var for r in res):.3e} "
              f"{'PASS' if worst <= thr else 'FAIL'}")
    return EXIT_OK if ok else EXIT_NUMERICAL


def cmd_gradcheck(args) -> int:
    from .config import miniature_experiment
    from .train import gradcheck, gradcheck_problem

    cfg = load_config(args.config) if args.config else miniature_experiment()
    model, x, y, noise = gradcheck_problem(cfg, args.seed, args.batch, args.rho)
    n_params = sum(p.numel() for p in model.parameters())
    res = gradcheck(model, x, y, cfg, noise, h=args.h)
    print(f"parameters={n_params} rel<1e-3: {res.fraction_below(1e-3):.4f} "
          f"rel<1e-2: {res.fraction_below(1e-2):.4f} worst={res.worst:.3e} "
          f"non-differentiable stencils skipped={len(res.kinks)}")
    ok = res.fraction_below(1e-3) >= 0.99 and res.worst < 1e-2
    return EXIT_OK if ok else EXIT_NUMERICAL


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="uasmooth", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("train", help="train one or more trials")
    s.add_argument("--config")
    s.add_argument("--corpus", help="corpus directory written by `synth` (overrides data.corpus)")
    s.add_argument("--out", default="runs/latest")
    s.add_argument("--trials", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--print-config", action="store_true", help="print the resolved config and exit")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("evaluate", help="evaluate a checkpoint on one partition")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--corpus")
    s.add_argument("--partition", default="test", choices=("train", "devel", "test"))
    s.add_argument("--out")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("segment", help="cut annotated recordings into a clip manifest")
    s.add_argument("--annotations", required=True)
    s.add_argument("--durations", help="CSV with recording_id,duration_s")
    s.add_argument("--vocabulary", help="comma-separated species to keep (default: all)")
    s.add_argument("--clip-seconds", type=float, default=3.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_segment)

    s = sub.add_parser("features", help="log-Mel features for a clip or a clip manifest")
    s.add_argument("--config")
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--audio", help="16 kHz WAV file")
    g.add_argument("--manifest", help="clip manifest CSV (needs --audio-dir)")
    s.add_argument("--audio-dir", default=".")
    s.add_argument("--start", type=float, default=0.0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_features)

    s = sub.add_parser("synth", help="write a synthetic corpus")
    s.add_argument("--config")
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("oracle", help="compare propagated moments with Monte-Carlo estimates")
    s.add_argument("--kind", default="all",
                   choices=("all", "model", "dense", "conv", "relu", "sigmoid", "max_pool",
                            "attentive_pool", "se_block", "network"))
    s.add_argument("--config", help="architecture for --kind model")
    s.add_argument("--instances", type=int, default=10)
    s.add_argument("--samples", type=int, default=200_000)
    s.add_argument("--rho", type=float)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_oracle)

    s = sub.add_parser("gradcheck", help="finite differences vs reverse mode on a small network")
    s.add_argument("--config")
    s.add_argument("--batch", type=int, default=2)
    s.add_argument("--rho", type=float, default=0.05)
    s.add_argument("--h", type=float, default=1e-4)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError) as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
