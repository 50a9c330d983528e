"""Command-line pipeline: one subcommand per stage.

Exit codes: 0 ok, 2 usage, 3 parse/IO, 4 numeric or configuration validation.
Errors are reported as a single ``error: <kind>: <message>`` line on stderr.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np

from . import analysis, calibrate, io
from .data import make_blobs
from .errors import ParseError, SnnError
from .model import accuracy, forward, record_profile, train_toy_mlp
from .msat import PRESETS, REGIMES
from .snn import SnnNetwork, convert, simulate_dataset

CONFIG_ENV = "MSAT_SNN_CONFIG"
EXIT_USAGE, EXIT_PARSE, EXIT_INVALID = 2, 3, 4

_FAMILY_ROWS = "\n".join(
    f"  {name:<9} alpha={p['alpha']:<5} k_a={p['k_a']:<4} k_i={p['k_i']:<4} C={p['c_sensitivity']:<4} "
    f"tau_mp={p['tau_mp']:<4} tau_rd={p['tau_rd']}"
    for name, p in PRESETS.items()
)
DEFAULTS_EPILOG = f"""\
threshold presets ([thresholds] preset=..., default vgg16):
{_FAMILY_ROWS}
  v_T = 0.0 for every layer; regime one of {', '.join(REGIMES)} (default msat)
spike confidence ([confidence]): disabled by default; layers = -1 (last IF layer),
  early_steps = 16, p = 1 - SIN neuron ratio (from analyze-sin)
energy ([energy]): ac_pj = {analysis.AC_PJ}, mac_pj = {analysis.MAC_PJ}
config file: --config, else ${CONFIG_ENV}, else the defaults above
"""


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def _int_list(text: str) -> list[int]:
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not values or min(values) < 1:
        raise argparse.ArgumentTypeError("need at least one value, all >= 1")
    return values


def _regimes(text: str) -> list[str]:
    values = [v.strip() for v in text.split(",") if v.strip()]
    if not values:
        raise argparse.ArgumentTypeError("regime list is empty")
    bad = [v for v in values if v not in REGIMES]
    if bad:
        raise argparse.ArgumentTypeError(f"unknown regime(s) {bad}; choose from {list(REGIMES)}")
    return values


def _load_run_config(path: str | None) -> io.RunConfig:
    path = path or os.environ.get(CONFIG_ENV)
    return io.load_config(path) if path else io.RunConfig()


def _build_net(cfg: io.RunConfig, model, profile, confidence=None) -> SnnNetwork:
    return convert(model, profile, config=cfg.msat, confidence=confidence, rng_seed=cfg.rng_seed,
                   initial_potential=cfg.initial_potential, readout=cfg.readout)


def _confidence(args, cfg: io.RunConfig):
    if not cfg.confidence_enabled:
        return None
    if not args.sin_stats:
        raise SnnError("spike confidence is enabled in the config but no --sin-stats file was given; run `analyze-sin` first")
    with open(args.sin_stats) as fh:
        stats = io.loads_sin_stats(fh.read())
    return calibrate.derive_confidence(stats, cfg.confidence_layers, cfg.early_steps)


def _common(args):
    model = io.load_model(args.model)
    profile = io.load_profile(args.profile)
    data = io.load_dataset(args.data)
    cfg = _load_run_config(args.config)
    return model, profile, data, cfg


# ---------------------------------------------------------------- commands

def cmd_make_blobs(args) -> int:
    ds = make_blobs(args.n, args.classes, std=args.std, radius=args.radius, seed=args.seed)
    io.save_dataset(ds, args.out)
    print(f"wrote {len(ds)} samples, {ds.num_classes} classes -> {args.out}")
    return 0


def cmd_train(args) -> int:
    data = io.load_dataset(args.data)
    model = train_toy_mlp(data, args.arch, args.epochs, args.lr, args.seed, batch_size=args.batch_size)
    io.save_model(model, args.out)
    stored = io.load_model(args.out)
    print(f"train_accuracy={accuracy(stored, data):.6f} epochs={args.epochs} arch={','.join(map(str, args.arch))} -> {args.out}")
    return 0


def cmd_calibrate(args) -> int:
    model = io.load_model(args.model)
    data = io.load_dataset(args.data)
    profile = record_profile(model, data, store_pre_relu=args.store_pre_relu)
    io.save_profile(profile, args.out)
    for l, v in enumerate(profile.max_post_relu):
        print(f"layer {l}: V_th={v!r}")
    return 0


def _sin_summary(model, data, result):
    x = model.batch_inputs(data.features)
    _, acts = forward(model, x, capture=True)
    ratios = []
    for l in range(model.L):
        sin = (acts.pre[l] < 0) & (result.spike_counts[l] > 0)
        ratios.append(int(np.count_nonzero(sin)) / (model.blocks[l].size * len(data)))
    return ratios, analysis.ans(result, -1, pre_relu=acts.pre[-1])


def cmd_simulate(args) -> int:
    model, profile, data, cfg = _common(args)
    T = args.T or cfg.T
    net = _build_net(cfg, model, profile, _confidence(args, cfg))
    curve_T = sorted({t for t in (2 ** k for k in range(16)) if t <= T} | {T})
    result = simulate_dataset(net, model.batch_inputs(data.features), T, chunk_size=cfg.chunk_size,
                              jobs=args.jobs, checkpoints=curve_T)
    acc = float(np.mean(result.predictions() == data.labels))
    ann_acc = accuracy(model, data)
    sin_ratio, ans_value = _sin_summary(model, data, result)
    report = analysis.energy(model, result, T, cfg.ac_pj, cfg.mac_pj)
    doc = {
        "format_version": io.FORMAT_VERSION,
        "config_hash": cfg.hash(),
        "regime": cfg.msat.regime,
        "T": T,
        "num_samples": len(data),
        "accuracy": acc,
        "ann_accuracy": ann_acc,
        "accuracy_curve": {str(t): float(np.mean(np.argmax(result.snapshots[t].scores, 1) == data.labels)) for t in curve_T},
        "firing_rates": result.mean_firing_rates().tolist(),
        "sin_neuron_ratio": sin_ratio,
        "ans_last_layer": ans_value,
        "spike_confidence": cfg.confidence_enabled,
        "energy": report.to_dict(),
    }
    io.write_report(doc, args.out)
    print(f"regime={cfg.msat.regime} T={T} accuracy={acc:.4f} ann_accuracy={ann_acc:.4f} "
          f"energy_ratio={report.ratio:.4f} -> {args.out}")
    return 0


def cmd_sweep(args) -> int:
    model, profile, data, cfg = _common(args)
    net = _build_net(cfg, model, profile, _confidence(args, cfg))
    rows = analysis.accuracy_sweep(model, net, data, args.T_list, args.regimes, chunk_size=cfg.chunk_size, jobs=args.jobs)
    text = analysis.sweep_csv(rows)
    with open(args.out, "w") as fh:
        fh.write(text)
    sys.stdout.write(text)
    return 0


def cmd_analyze_sin(args) -> int:
    model, profile, data, cfg = _common(args)
    if profile.pre_relu is None:
        raise SnnError(f"profile {args.profile} has no pre-ReLU activations; re-run `calibrate --store-pre-relu`")
    T = args.T or cfg.T
    net = _build_net(cfg, model, profile)
    stats = calibrate.measure_sin(net, profile, data, T, chunk_size=cfg.chunk_size, jobs=args.jobs)
    table = calibrate.derive_confidence(stats, cfg.confidence_layers, cfg.early_steps)
    doc = io.sin_stats_to_dict(stats, table)
    doc["config_hash"] = cfg.hash()
    doc["ans_last_layer"] = analysis.ans(stats, -1)
    io.write_report(doc, args.out)
    print("layer  neurons  sin_ratio  p")
    for l in range(stats.num_layers):
        print(f"{l:>5}  {stats.layer_sizes[l]:>7}  {stats.sin_neuron_ratio[l]:.4f}     {table.p[l]:.4f}")
    print(f"ANS(last layer)={doc['ans_last_layer']:.4f} suggested_E={calibrate.suggest_early_steps(stats)}")
    return 0


def cmd_energy(args) -> int:
    model, profile, data, cfg = _common(args)
    T = args.T or cfg.T
    net = _build_net(cfg, model, profile, _confidence(args, cfg))
    result = simulate_dataset(net, model.batch_inputs(data.features), T, chunk_size=cfg.chunk_size, jobs=args.jobs)
    report = analysis.energy(model, result, T, cfg.ac_pj, cfg.mac_pj)
    doc = report.to_dict()
    doc["config_hash"] = cfg.hash()
    io.write_report(doc, args.out)
    print(f"ann_energy_pj={report.ann_energy_pj:.4f} snn_energy_pj={report.snn_energy_pj:.4f} ratio={report.ratio:.4f}")
    return 0


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="msat-snn", description="ANN-to-SNN conversion with adaptive thresholds.",
                     epilog=DEFAULTS_EPILOG, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text, epilog=DEFAULTS_EPILOG,
                           formatter_class=argparse.RawDescriptionHelpFormatter)
        p.set_defaults(func=func)
        return p

    def pipeline_args(p, with_T=True):
        p.add_argument("--model", required=True, help="model file (JSON)")
        p.add_argument("--profile", required=True, help="activation profile written by `calibrate`")
        p.add_argument("--data", required=True, help="labeled dataset file")
        p.add_argument("--config", help=f"run config (INI); default ${CONFIG_ENV} or built-in defaults")
        if with_T:
            p.add_argument("--T", type=_positive_int, help="time steps (default: [simulation] T = 256)")
        p.add_argument("--jobs", type=_positive_int, default=1, help="worker threads (default 1)")
        p.add_argument("--out", required=True, help="output file")

    p = add("make-blobs", cmd_make_blobs, "write a synthetic Gaussian-blob dataset")
    p.add_argument("--n", type=_positive_int, default=2000, help="samples (default 2000)")
    p.add_argument("--classes", type=_positive_int, default=4, help="classes (default 4)")
    p.add_argument("--std", type=float, default=1.0, help="blob std (default 1.0)")
    p.add_argument("--radius", type=float, default=3.0, help="center radius (default 3.0)")
    p.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    p.add_argument("--out", required=True)

    p = add("train", cmd_train, "train a toy MLP with mini-batch SGD")
    p.add_argument("--data", required=True)
    p.add_argument("--arch", type=_int_list, required=True, help="layer widths, e.g. 2,16,4")
    p.add_argument("--epochs", type=int, default=50, help="epochs (default 50; 0 writes the seeded init)")
    p.add_argument("--lr", type=float, default=0.05, help="learning rate (default 0.05)")
    p.add_argument("--seed", type=int, default=0, help="seed (default 0)")
    p.add_argument("--batch-size", type=_positive_int, default=32, help="mini-batch size (default 32)")
    p.add_argument("--out", required=True)

    p = add("calibrate", cmd_calibrate, "record per-layer maximum activations (base thresholds)")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--store-pre-relu", action="store_true", help="keep per-sample pre-ReLU activations (needed by analyze-sin)")
    p.add_argument("--out", required=True)

    pipeline_args(add("simulate", cmd_simulate, "run the converted SNN and write a report"))
    p = sub.choices["simulate"]
    p.add_argument("--sin-stats", help="analyze-sin output; required when spike confidence is enabled")

    p = add("sweep", cmd_sweep, "accuracy and firing rate for every (regime, T) pair as CSV")
    pipeline_args(p, with_T=False)
    p.add_argument("--regimes", type=_regimes, default=list(REGIMES), help="comma list (default constant,dtt,det,msat)")
    p.add_argument("--T-list", dest="T_list", type=_int_list, default=[2 ** k for k in range(9)],
                   help="comma list (default 1,2,4,...,256)")
    p.add_argument("--sin-stats")

    pipeline_args(add("analyze-sin", cmd_analyze_sin, "measure SIN neuron ratios and derive spike confidence"))

    p = add("energy", cmd_energy, "estimate SNN energy relative to the ANN")
    pipeline_args(p)
    p.add_argument("--sin-stats")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: usage: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except (ParseError, OSError) as exc:
        return _fail("parse", exc, EXIT_PARSE)
    except (SnnError, ValueError, FloatingPointError) as exc:
        return _fail("invalid", exc, EXIT_INVALID)


def _fail(kind: str, exc: BaseException, code: int) -> int:
    message = " ".join(str(exc).split())
    print(f"error: {kind}: {message}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
