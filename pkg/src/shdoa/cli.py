"""Command-line front end.

Subcommands mirror the experiment stages:

    shdoa simulate --config cfg.yaml --out dir      render a mixture WAV
    shdoa extract  --config cfg.yaml --out dir      feature dataset from a scene
    shdoa train    --config cfg.yaml --out dir      full training stage
    shdoa eval     --config cfg.yaml --model m.bin --out dir
    shdoa joint    --config cfg.yaml --out dir      joint azimuth/elevation run
    shdoa report   --metrics rows.csv --x L --out dir   plot data + SVG

Exit codes: 0 success, 2 configuration error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, load_config
from .errors import ConfigError, ShdoaError
from .harness import (
    build_extractor,
    emit_plots,
    load_model_with_manifest,
    run_evaluation,
    run_joint_az_el,
    run_training,
    sample_scene_cells,
)
from .features import dump_features_csv, save_dataset
from .room import SourceSpec, add_noise, gen_training_signal, synthesize_mixture, write_wav
from .sphmath import Direction


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="shdoa", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, model=False):
        p.add_argument("--config", required=True, help="experiment config (YAML)")
        p.add_argument("--out", default="out", help="output directory")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--threads", type=int, default=None, help="worker processes for trials")
        if model:
            p.add_argument("--model", required=True, help="trained model file")
            p.add_argument("--force", action="store_true",
                           help="evaluate even if the environment fingerprint differs")

    common(sub.add_parser("simulate", help="render one evaluation scene to WAV"))
    common(sub.add_parser("extract", help="write the training feature dataset"))
    common(sub.add_parser("train", help="run the training stage"))
    common(sub.add_parser("eval", help="run the evaluation sweep"), model=True)
    common(sub.add_parser("joint", help="joint azimuth/elevation experiment"))

    rep = sub.add_parser("report", help="emit plot CSV/SVG from aggregate metrics")
    rep.add_argument("--metrics", required=True, help="metrics CSV (aggregate rows)")
    rep.add_argument("--x", default="L", help="x-axis field (L, snr_db, ...)")
    rep.add_argument("--name", default="accuracy", help="output file stem")
    rep.add_argument("--out", default="out", help="output directory")
    return parser


def _load_cfg(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if getattr(args, "threads", None) is not None:
        cfg.threads = args.threads
    return cfg


def _cmd_simulate(args) -> None:
    cfg = _load_cfg(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng([cfg.seed, 3001, 0])
    cells = sample_scene_cells(rng, cfg.grids, cfg.n_sources, cfg.min_separation_cells)
    array = cfg.build_array()
    sources = []
    for cell in cells:
        theta, phi = cfg.grids.cell_degrees(cell)
        signal = gen_training_signal(cfg.eval_signal_s, seed=int(rng.integers(2**31)),
                                     fs=cfg.fs, band_hz=(300.0, 3400.0))
        sources.append(SourceSpec(direction=Direction.from_degrees(theta, phi),
                                  distance=cfg.eval_distance_m or cfg.source_distance_m,
                                  signal=signal, fs=cfg.fs))
    wave = synthesize_mixture(sources, cfg.room, array, fs=cfg.fs)
    wave = add_noise(wave, cfg.snr_db, cfg.noise_kind, seed=int(rng.integers(2**31)),
                     room=cfg.room, array=array)
    write_wav(out / "mixture.wav", wave, cfg.fs)
    print(f"wrote {out / 'mixture.wav'} ({wave.shape[0]} channels, "
          f"{wave.shape[1] / cfg.fs:.2f} s), sources at cells {cells}")


def _cmd_extract(args) -> None:
    cfg = _load_cfg(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    from .harness import training_block

    block = training_block(cfg)
    save_dataset(out / "dataset.bin", block, cfg.grids.n_theta, cfg.grids.n_phi)
    dump_features_csv(block, out / "dataset.csv")
    print(f"wrote {len(block)} feature records to {out / 'dataset.bin'}")


def _cmd_train(args) -> None:
    cfg = _load_cfg(args)
    net, manifest = run_training(cfg, out_dir=args.out)
    print(f"trained model for {cfg.experiment_id}: "
          f"{manifest['n_samples']} samples, val loss {manifest['final_val_loss']:.4f}")
    print(f"artifacts in {args.out}")


def _cmd_eval(args) -> None:
    cfg = _load_cfg(args)
    net, manifest = load_model_with_manifest(args.model)
    report = run_evaluation(cfg, net, manifest, out_dir=args.out, force=args.force)
    print(f"{cfg.experiment_id}: eta_acc={report.eta_acc:.1f}% "
          f"eta_adj={report.eta_adj:.1f}% over {cfg.trials} trials "
          f"({report.runtime_s:.1f} s)")


def _cmd_joint(args) -> None:
    cfg = _load_cfg(args)
    net, joint, azimuth = run_joint_az_el(cfg, out_dir=args.out)
    print(f"joint: eta_acc={joint.eta_acc:.1f}% eta_adj={joint.eta_adj:.1f}%")
    print(f"standalone azimuth: eta_acc={azimuth.eta_acc:.1f}% "
          f"eta_adj={azimuth.eta_adj:.1f}%")


def _cmd_report(args) -> None:
    with open(args.metrics) as fh:
        rows = [
            {k: (v if k in ("experiment_id", "room") else float(v)) for k, v in row.items()}
            for row in csv.DictReader(fh)
        ]
    paths = emit_plots(rows, args.x, args.out, args.name)
    print("wrote " + ", ".join(str(p) for p in paths))


_COMMANDS = {
    "simulate": _cmd_simulate,
    "extract": _cmd_extract,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "joint": _cmd_joint,
    "report": _cmd_report,
}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        _COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except (ShdoaError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
