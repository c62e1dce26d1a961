"""Command-line entry point: ``cdmamba <command> ...``.

Exit status: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import container
from .config import ConfigError, RunConfig, load_config
from .gradcheck import MICRO_CONFIG, check_gradients
from .losses import ConfusionCounts, confusion, format_report
from .network import NetworkParams
from .pipeline import (default_extent, infer_scene, load_scene, load_tile_dir,
                       render_overlay, tile_scene, write_dataset, write_ppm,
                       write_tiles)
from .synthetic import gen_synthetic
from .tensor import DTYPES, NonFiniteError, Tensor
from .trainer import NonFiniteLossError, predict, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _load_weights(path, precision: str | None) -> NetworkParams:
    params, _ = NetworkParams.load(path)
    if precision:
        params = params.astype(DTYPES[precision])
    return params


def _predictor(params: NetworkParams, batch_size: int):
    return lambda images: predict(params, images, batch_size)


def cmd_train(args) -> int:
    run = load_config(args.config) if args.config else RunConfig()
    tcfg = run.train
    if args.precision:
        tcfg = replace(tcfg, precision=args.precision)
    if args.data == "synthetic":
        names = None
        data = gen_synthetic(run.data.data_seed, run.data.data_count, run.data.data_size)
    else:
        names, data = load_tile_dir(args.data)
    result = train(run.network, tcfg, data, out_dir=args.out, log=sys.stdout)
    if names is not None:
        with open(Path(args.out) / "val_tiles.txt", "w") as fh:
            fh.writelines(names[i] + "\n" for i in result.val_index)
    print(f"initial_bce={result.initial_bce:.17g} seconds={result.seconds:.1f} "
          f"weights={Path(args.out) / 'weights.cdmw'}")
    return EXIT_OK


def cmd_infer(args) -> int:
    params = _load_weights(args.weights, args.precision)
    scene = load_scene(args.input)
    extent = args.tile or default_extent(*scene.shape)
    prob = infer_scene(scene, _predictor(params, args.batch_size), extent, args.batch_size)
    mask = (prob > 0.5).astype(np.float64)
    container.save_tensor(args.out, mask)
    if args.prob:
        container.save_tensor(args.prob, prob)
    line = f"scene={scene.scene_id} pixels={mask.size} cloud={int(mask.sum())}"
    if scene.truth is not None:
        counts = confusion(prob, scene.truth)
        line += " " + format_report(counts.as_dict())
        if args.overlay:
            write_ppm(args.overlay, render_overlay(mask, scene.truth))
    elif args.overlay:
        raise FileNotFoundError(f"--overlay needs a truth mask next to {args.input}")
    print(line)
    return EXIT_OK


def cmd_eval(args) -> int:
    params = _load_weights(args.weights, args.precision)
    names = None
    if args.list:
        names = [ln.strip() for ln in open(args.list) if ln.strip()]
    names, data = load_tile_dir(args.data, names)
    probs = predict(params, data.images, args.batch_size)
    total = ConfusionCounts()
    lines = []
    for name, p, t in zip(names, probs, data.masks):
        c = confusion(p, t)
        total = total + c
        lines.append(format_report(c.as_dict(), prefix=f"tile={name} "))
    summary = format_report(total.as_dict(), prefix=f"aggregate tiles={len(names)} ")
    lines.append(summary)
    with open(args.report, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    print(summary)
    return EXIT_OK


def cmd_tile(args) -> int:
    scene = load_scene(args.input)
    tiles = tile_scene(scene, args.size, mode=args.mode)
    written = write_tiles(tiles, args.out)
    print(f"tiles={len(written)} extent={args.size} out={args.out}")
    return EXIT_OK


def cmd_check_grad(args) -> int:
    net = MICRO_CONFIG
    if args.config:
        net = load_config(args.config, RunConfig(network=MICRO_CONFIG)).network
    report = check_gradients(net, seed=args.seed, sample_fraction=args.fraction)
    print(report.summary())
    return EXIT_OK if report.passed else EXIT_NUMERIC


def cmd_gen_data(args) -> int:
    data = gen_synthetic(args.seed, args.count, args.size)
    names = write_dataset(data, args.out)
    print(f"tiles={len(names)} size={args.size} cloud_fraction={data.cloud_fraction():.4f} out={args.out}")
    return EXIT_OK


def cmd_bench(args) -> int:
    from .smb import CloudSmbParams, cloud_smb
    from .ssm import selective_scan
    from .tensor import Tape, conv2d, tsum

    rng = np.random.default_rng(0)
    if args.op == "scan":
        b, l, c, n = 8, 4096, 8, 8
        xs = [Tensor(rng.standard_normal((b, l, c))), Tensor(rng.uniform(1e-3, 0.1, (b, l, c))),
              Tensor(-rng.uniform(0.5, 8, (c, n))), Tensor(rng.standard_normal((b, l, n))),
              Tensor(rng.standard_normal((b, l, n)))]
        fn, leaves = (lambda: selective_scan(*xs)), xs
        desc = f"scan b={b} l={l} c={c} n={n}"
    elif args.op == "conv":
        x, w = Tensor(rng.standard_normal((8, 16, 64, 64))), Tensor(rng.standard_normal((16, 16, 3, 3)))
        fn, leaves = (lambda: conv2d(x, w, None, pad=1)), [x, w]
        desc = "conv2d 8x16x64x64 k3"
    else:
        params = CloudSmbParams.init(16, 16, 8, rng)
        x = Tensor(rng.standard_normal((8, 1024, 16)))
        fn, leaves = (lambda: cloud_smb(x, params)), [x]
        desc = "cloud_smb b=8 l=1024 c=16"
    fn()  # warm-up (JIT compilation)
    fwd, bwd = [], []
    for _ in range(args.repeat):
        t0 = time.perf_counter()
        with Tape() as tape:
            out = fn()
            loss = tsum(out)
        t1 = time.perf_counter()
        tape.gradient(loss, leaves)
        bwd.append(time.perf_counter() - t1)
        fwd.append(t1 - t0)
    print(f"op={args.op} ({desc}) repeat={args.repeat} "
          f"forward_ms={1e3 * np.median(fwd):.2f} backward_ms={1e3 * np.median(bwd):.2f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cdmamba", description="Cloud detection with a selective state-space U-Net.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("train", help="train a network")
    s.add_argument("--config", help="key = value run configuration")
    s.add_argument("--data", required=True, help="tile directory or 'synthetic'")
    s.add_argument("--out", required=True)
    s.add_argument("--precision", choices=sorted(DTYPES))
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("infer", help="predict a cloud mask for one scene container")
    s.add_argument("--weights", required=True)
    s.add_argument("--input", required=True)
    s.add_argument("--out", required=True, help="binary mask container to write")
    s.add_argument("--prob", help="also write the probability map here")
    s.add_argument("--overlay", help="error overlay PPM (needs a truth mask)")
    s.add_argument("--tile", type=int, help="tile extent (default: 384 or what fits)")
    s.add_argument("--batch-size", type=int, default=4)
    s.add_argument("--precision", choices=sorted(DTYPES))
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("eval", help="score a tile directory")
    s.add_argument("--weights", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--report", required=True)
    s.add_argument("--list", help="file naming the tiles to score, one per line")
    s.add_argument("--batch-size", type=int, default=8)
    s.add_argument("--precision", choices=sorted(DTYPES))
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("tile", help="cut a scene container into tiles")
    s.add_argument("--input", required=True)
    s.add_argument("--size", type=int, default=384)
    s.add_argument("--out", required=True)
    s.add_argument("--mode", choices=("train", "infer"), default="train")
    s.set_defaults(func=cmd_tile)

    s = sub.add_parser("check-grad", help="finite-difference check of the network gradient")
    s.add_argument("--config", help="network overrides on top of the micro configuration")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--fraction", type=float, default=0.01)
    s.set_defaults(func=cmd_check_grad)

    s = sub.add_parser("gen-data", help="write a synthetic tile set")
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--count", type=int, required=True)
    s.add_argument("--size", type=int, required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("bench", help="wall-time of a kernel")
    s.add_argument("--op", choices=("scan", "conv", "block"), default="scan")
    s.add_argument("--repeat", type=int, default=5)
    s.set_defaults(func=cmd_bench)
    return p


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:          # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NonFiniteError, NonFiniteLossError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, container.ContainerError, ValueError, KeyError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
