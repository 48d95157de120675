"""``qckpt`` command line: compress into a chain, restore, stats, verify, gen."""
from __future__ import annotations

import argparse
import csv
import dataclasses
import math
import sys
from pathlib import Path

from .codec.chain import DEFAULT_FULL_EVERY, Chain, chain_stats
from .container import load_layer_rules, read_checkpoint, reclassify, write_checkpoint
from .errors import QckptError
from .quantizer import QuantConfig, dequantize, quantize_checkpoint
from .ranker import DEFAULT_BETA, EmaState, compute_scores, ema_matches, ema_update, load_ema, save_ema
from .search import (
    ConfigCube,
    ExternalEvaluator,
    ProxyEvaluator,
    delta_neighborhood_search,
    guided_exhaustive_search,
)
from .trajectory import TrajectorySpec, default_layout, write_trajectory

REPORT_FIELDS = ("step", "kind", "raw_bytes", "encoded_bytes", "ratio", "cum_ratio", "quality_delta",
                 "bins", "prune_frac", "protect_frac", "metric")
EMA_FILE = "ema.dqt"

EXIT_ERROR = 1
EXIT_USAGE = 2
EXIT_INFEASIBLE = 3


def _fmt(x: float) -> str:
    return "nan" if math.isnan(x) else f"{x:.6g}"


def report_row(st) -> dict:
    cfg = st.config
    return {
        "step": st.entry.step,
        "kind": st.entry.kind,
        "raw_bytes": st.raw_bytes,
        "encoded_bytes": st.encoded_bytes,
        "ratio": f"{st.ratio:.4f}",
        "cum_ratio": f"{st.cum_ratio:.4f}",
        "quality_delta": _fmt(st.quality_delta),
        "bins": cfg.bins,
        "prune_frac": _fmt(cfg.prune_frac),
        "protect_frac": _fmt(cfg.protect_frac),
        "metric": cfg.prune_metric.name,
    }


def _writer(out=None) -> csv.DictWriter:
    w = csv.DictWriter(out or sys.stdout, fieldnames=REPORT_FIELDS, lineterminator="\n")
    w.writeheader()
    return w


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected an integer >= 1, got {text}")
    return v


def _non_negative(text: str) -> float:
    v = float(text)
    if not v >= 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative number, got {text}")
    return v


# ---------------------------------------------------------------------------
# commands

def cmd_compress(args) -> int:
    ckpt = read_checkpoint(args.checkpoint)
    if args.layer_rules:
        ckpt = reclassify(ckpt, load_layer_rules(args.layer_rules))
    chain = Chain(args.chain, full_every=args.full_every)
    with chain.lock(timeout=args.lock_timeout):
        # re-read the manifest now that we own the chain
        chain = Chain(args.chain, full_every=args.full_every)
        ema_path = Path(args.chain) / EMA_FILE
        ema = load_ema(ema_path) if ema_path.exists() else None
        if ema is not None and not ema_matches(ema, ckpt):
            print("warning: stored gradient EMA does not match the checkpoint; discarding it", file=sys.stderr)
            ema = None
        if args.grads:
            grads = read_checkpoint(args.grads)
            state = EmaState(args.beta, ema.tensors, ema.step_count) if ema else EmaState(args.beta)
            ema = ema_update(state, grads)
        scores = compute_scores(ckpt, ema)

        base = QuantConfig(sigma=args.sigma, alpha=args.alpha)
        cube = ConfigCube(base=base)
        ev = ExternalEvaluator(args.evaluator, timeout=args.evaluator_timeout) if args.evaluator else ProxyEvaluator()
        prev_cfg = None
        if chain.entries:
            prev_cfg = chain.read_record(chain.entries[-1]).config
            prev_cfg = base.with_(bins=prev_cfg.bins, embed_bins=prev_cfg.embed_bins, prune_frac=prev_cfg.prune_frac,
                                  protect_frac=prev_cfg.protect_frac, prune_metric=prev_cfg.prune_metric)
        if prev_cfg is not None and cube.for_scores(scores).contains(prev_cfg):
            outcome = delta_neighborhood_search(cube, prev_cfg, args.neighborhood_e, ckpt, scores, ev,
                                                args.threshold, args.parallelism)
        else:
            outcome = guided_exhaustive_search(cube, ckpt, scores, ev, args.threshold, args.parallelism)
        print(f"search: {outcome.status}, {outcome.evaluations_used} evaluations", file=sys.stderr)
        if not outcome.feasible:
            print(f"status=INFEASIBLE threshold={args.threshold} evaluations={outcome.evaluations_used}")
            return EXIT_INFEASIBLE

        step = args.step if args.step is not None else ckpt.step
        if args.step is None and chain.entries and step <= chain.entries[-1].step:
            step = chain.entries[-1].step + 1
        q = quantize_checkpoint(ckpt, scores, outcome.config, seed=args.seed)
        q = dataclasses.replace(q, step=step)
        chain.append(q, outcome.quality_delta, workers=args.parallelism)
        if ema is not None:
            save_ema(ema, ema_path, like=ckpt)
        _writer().writerow(report_row(chain_stats(chain)[-1]))
    return 0


def cmd_restore(args) -> int:
    chain = Chain.open(args.chain)
    if not chain.entries:
        raise QckptError(f"chain {args.chain} is empty")
    step = chain.entries[-1].step if args.step is None else args.step
    write_checkpoint(dequantize(chain.restore(step)), args.out)
    return 0


def cmd_stats(args) -> int:
    chain = Chain.open(args.chain)
    w = _writer()
    for st in chain_stats(chain):
        w.writerow(report_row(st))
    return 0


def cmd_verify(args) -> int:
    if not Path(args.chain).is_dir():
        raise QckptError(f"no chain directory {args.chain}")
    n = Chain(args.chain).verify()
    print(f"ok entries={n}")
    return 0


def cmd_gen(args) -> int:
    spec = TrajectorySpec(
        layout=default_layout(args.width, args.depth, args.vocab),
        steps=args.steps, lr0=args.lr0, decay=args.decay, noise=args.noise, seed=args.seed,
    )
    paths = write_trajectory(spec, args.out)
    print(f"wrote {len(paths)} checkpoints ({spec.num_params} parameters each) to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qckpt", description="Quantized, delta-coded checkpoint chains.")
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("compress", help="quantize a checkpoint and append it to a chain")
    c.add_argument("checkpoint", help="DQT1 checkpoint file")
    c.add_argument("chain", help="chain directory (created if missing)")
    c.add_argument("--grads", help="DQT1 gradient snapshot for the sensitivity metric")
    c.add_argument("--threshold", type=_non_negative, required=True,
                   help="maximum acceptable quality degradation")
    c.add_argument("--alpha", type=float, default=0.01, help="sketch relative accuracy (default 0.01)")
    c.add_argument("--sigma", type=float, default=0.2, help="histogram weight exponent (default 0.2)")
    c.add_argument("--beta", type=float, default=DEFAULT_BETA, help="gradient EMA weight (default 0.9)")
    c.add_argument("--neighborhood-e", type=int, default=1, help="neighbourhood radius (default 1)")
    c.add_argument("--parallelism", type=_positive_int, default=1, help="concurrent evaluations (default 1)")
    c.add_argument("--evaluator", help='external evaluator command, e.g. "python eval.py {ckpt}"')
    c.add_argument("--evaluator-timeout", type=float, default=None, help="seconds per evaluation")
    c.add_argument("--layer-rules", help="file of 'pattern = LAYERTYPE' lines")
    c.add_argument("--full-every", type=_positive_int, default=DEFAULT_FULL_EVERY,
                   help="write a full record every F entries (default 50)")
    c.add_argument("--step", type=int, help="chain step (default: the checkpoint's own step)")
    c.add_argument("--seed", type=int, default=0, help="k-means seed (default 0)")
    c.add_argument("--lock-timeout", type=float, default=60.0, help="seconds to wait for the chain lock")
    c.set_defaults(func=cmd_compress)

    r = sub.add_parser("restore", help="write the dequantized checkpoint of a step")
    r.add_argument("chain")
    r.add_argument("out", help="output DQT1 path")
    r.add_argument("--step", type=int, help="step to restore (default: latest)")
    r.set_defaults(func=cmd_restore)

    s = sub.add_parser("stats", help="per-entry sizes and ratios as CSV")
    s.add_argument("chain")
    s.set_defaults(func=cmd_stats)

    v = sub.add_parser("verify", help="replay the chain and check every record")
    v.add_argument("chain")
    v.set_defaults(func=cmd_verify)

    g = sub.add_parser("gen", help="write a synthetic training trajectory")
    g.add_argument("out", help="output directory")
    g.add_argument("--steps", type=int, default=50)
    g.add_argument("--lr0", type=float, default=0.05)
    g.add_argument("--decay", type=float, default=0.9)
    g.add_argument("--noise", type=float, default=0.5)
    g.add_argument("--width", type=_positive_int, default=64)
    g.add_argument("--depth", type=_positive_int, default=2)
    g.add_argument("--vocab", type=_positive_int, default=256)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gen)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "gen":
        if args.steps < 2:
            parser.error("--steps must be at least 2")
        if not 0 < args.decay <= 1:
            parser.error("--decay must lie in (0, 1]")
    if args.command == "compress" and args.neighborhood_e < 0:
        parser.error("--neighborhood-e must be non-negative")
    try:
        return args.func(args)
    except QckptError as exc:
        step = getattr(exc, "step", None)
        where = f" at step {step}" if step is not None else ""
        print(f"error{where}: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
