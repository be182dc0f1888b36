"""Command line entry point: ``logradial <command> ...``.

Exit codes: 0 success, 1 tolerance or runtime failure, 2 usage error.
Set ``LOGRADIAL_THREADS`` to cap BLAS/FFT threads.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import datasets as ds
from .convengine import ScalePyramidResponse
from .filterbank import BasisSpec, build_basis, center_of_mass
from .network import (SSCNN, evaluate, load_checkpoint, load_config, save_checkpoint, train,
                      write_metrics_csv)
from .render import average_activation, montage, read_pgm, write_pgm
from .steering import CoefficientSet, oracle_resample, per_order_errors, steer

log = logging.getLogger("logradial")

STEER_TOL = 1e-10
DEFAULT_VERIFY_SCALES = (0.7, 1.0, 1.3, 2.0, 2.4)
THEOREM_SCALES = (1.3, 1.5, 2.0)
CONVERGENCE_SLACK = 1.1


class CommandError(Exception):
    """Runtime failure reported on stderr with exit code 1."""


def _float_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _range(text: str) -> tuple[float, float]:
    vals = _float_list(text)
    if len(vals) != 2:
        raise argparse.ArgumentTypeError(f"expected 'lo,hi', got {text!r}")
    return vals[0], vals[1]


def _spec_from_args(args) -> BasisSpec:
    orientations = tuple(j * math.pi / args.orientations for j in range(1, args.orientations + 1))
    # j = J gives exactly pi; keep angles inside [0, 2pi)
    return BasisSpec(orders=tuple(args.orders), orientations=orientations,
                     sigma_phi=args.sigma_phi, beta=args.beta, m=args.m)


def smooth_pattern(x, y):
    """Centered anisotropic Gaussian used by the steering convergence sweep."""
    c, s = math.cos(0.3), math.sin(0.3)
    u, v = c * x + s * y, -s * x + c * y
    return np.exp(-(u**2 / (2 * 1.5**2) + v**2 / (2 * 0.9**2)))


# --- commands ---------------------------------------------------------------------


def cmd_gen_basis(args) -> int:
    spec = _spec_from_args(args)
    basis = build_basis(spec, args.size)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    flat = list(basis.flat())
    layout = (spec.n_orders, spec.n_orientations)
    write_pgm(out / "basis_magnitude.pgm", montage([np.abs(f) for f in flat], layout))
    write_pgm(out / "basis_real.pgm", montage([f.real for f in flat], layout))
    write_pgm(out / "basis_phase.pgm", montage([np.angle(f) for f in flat], layout, normalize="global"))
    filters = []
    for ki, k in enumerate(spec.orders):
        for ji, phi_j in enumerate(spec.orientations):
            f = basis.filters[ki, ji]
            c = (args.size - 1) // 2
            filters.append({"order_index": ki, "orientation_index": ji, "order": k,
                            "orientation": phi_j, "center": [f[c, c].real, f[c, c].imag],
                            "center_of_mass": list(center_of_mass(f)),
                            "max_abs": float(np.abs(f).max())})
    manifest = {"spec": spec.to_dict(), "size": args.size, "count": basis.count,
                "index_order": "order-major, orientation-minor", "filters": filters,
                "images": ["basis_magnitude.pgm", "basis_real.pgm", "basis_phase.pgm"]}
    (out / "basis_manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    print(f"wrote {basis.count} filters of size {args.size} to {out}")
    return 0


def cmd_verify_steer(args) -> int:
    spec = BasisSpec()
    rng = np.random.default_rng(args.seed)
    failed = False
    print(f"{'scale':>6} {'size':>5} {'max rel err':>12}  steer vs resampling oracle ({args.trials} trials)")
    sets = [CoefficientSet.random(spec, rng) for _ in range(args.trials)]
    for s in args.scales:
        worst = 0.0
        size = 0
        for cs in sets:
            k = steer(cs, spec, s, args.base_size)
            ref = oracle_resample(cs, spec, s, args.base_size)
            worst = max(worst, float(np.abs(k.values - ref).max() / np.abs(ref).max()))
            size = k.size
        ok = worst < STEER_TOL
        failed |= not ok
        print(f"{s:6.3f} {size:5d} {worst:12.3e}  {'ok' if ok else 'FAIL'}")
    print()
    print("steering identity on a smooth pattern: per-order relative error by resolution")
    cs = sets[0] if sets else CoefficientSet.random(spec, rng)
    for s in args.theorem_scales:
        errs = np.array([per_order_errors(smooth_pattern, cs, s, args.base_size, u) for u in (1, 2, 4)])
        ok = bool((errs[1] < errs[0]).all() and (errs[2] <= CONVERGENCE_SLACK * errs[1]).all())
        failed |= not ok
        for ki, k in enumerate(spec.orders):
            cells = " ".join(f"{e:9.4f}" for e in errs[:, ki])
            print(f"s={s:4.2f} k={k:4.2f}  x1/x2/x4: {cells}")
        print(f"s={s:4.2f} converging: {'ok' if ok else 'FAIL'}")
    return 1 if failed else 0


def _load_source(directory) -> ds.LabeledImageSet:
    try:
        return ds.read_dataset(directory)
    except FileNotFoundError as exc:
        raise CommandError(str(exc))


def cmd_synth_data(args) -> int:
    src = _load_source(args.input)
    if args.count is not None:
        src = src.subset(np.arange(min(args.count, len(src))))
    manifest = {"kind": args.kind, "seed": args.seed, "source": str(args.input)}
    if args.kind in ("mnist-scale", "fmnist-scale"):
        lo, hi = args.range or (0.3, 1.0)
        data = ds.make_scaled(src, (lo, hi), seed=args.seed)
        manifest["range"] = f"{lo},{hi}"
    else:
        lo, hi = args.range or ds.LOCAL2_RANGE
        if (lo, hi) != ds.LOCAL2_RANGE:
            raise CommandError("local2 uses the fixed scale range 0.7,1")
        data = ds.make_local2(src, seed=args.seed, n=args.pairs)
        manifest["range"] = f"{lo},{hi}"
        manifest["canvas"] = "28,40"
    ds.write_dataset(data, args.out, manifest)
    print(f"wrote {len(data)} {args.kind} samples to {args.out}")
    return 0


def _splits(data, split_cfg: dict):
    n_train = split_cfg.get("n_train", len(data))
    n_val = split_cfg.get("n_val", 0)
    n_test = split_cfg.get("n_test", len(data) - n_train - n_val)
    return ds.split(data, (n_train, n_val, n_test), seed=split_cfg.get("split_seed", 0))


def cmd_train(args) -> int:
    config, split_cfg = load_config(args.config)
    data = _load_source(args.data)
    if list(data.images.shape[1:]) != list(config.input_shape):
        raise CommandError(f"data images are {data.images.shape[1:]}, config expects {config.input_shape}")
    tr, va, te = _splits(data, split_cfg)
    net = SSCNN(config)
    state = net.init_state()
    t0 = time.time()
    state, history = train(state, config, tr, va)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out, config, state, extra={"split": split_cfg})
    metrics = Path(args.metrics) if args.metrics else out.with_suffix(".csv")
    write_metrics_csv(metrics, history)
    last = history[-1]
    print(f"trained {config.epochs} epochs in {time.time() - t0:.1f}s: loss {last.loss:.4f} "
          f"train_acc {last.train_acc:.4f} val_acc {last.val_acc:.4f}")
    print(f"checkpoint {out}, metrics {metrics}")
    return 0


def cmd_eval(args) -> int:
    config, state, extra = load_checkpoint(args.ckpt)
    data = _load_source(args.data)
    split_cfg = extra.get("split", {})
    if args.split == "all" or not split_cfg:
        subset = data
    else:
        subset = dict(zip(("train", "val", "test"), _splits(data, split_cfg)))[args.split]
    err = evaluate(state, config, subset)
    print(f"error rate {err:.4f} on {len(subset)} samples ({args.split})")
    return 0


def cmd_render(args) -> int:
    config, state, _ = load_checkpoint(args.ckpt)
    net = SSCNN(config)
    layer = args.layer - 1
    if not 0 <= layer < 3:
        raise CommandError(f"--layer must be 1, 2 or 3, got {args.layer}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    kernels = net.bank.kernels(state.conv_theta[layer])  # (S, O, I, k, k)
    n_out = min(kernels.shape[1], args.max_channels)
    for ci in range(min(kernels.shape[2], args.max_channels)):
        tiles = [kernels[si, o, ci] for o in range(n_out) for si in range(kernels.shape[0])]
        name = out / f"layer{args.layer}_in{ci}_filters_by_channel_scale.pgm"
        write_pgm(name, montage(tiles, (n_out, kernels.shape[0])))
        if args.layer > 1:
            break  # deeper layers: first input channel only
    if args.input:
        path = Path(args.input)
        image = np.load(path) if path.suffix == ".npy" else read_pgm(path)
        per_scale, pooled, arg = net.layer_responses(state, image, layer)
        responses = [ScalePyramidResponse(per_scale[:, o], pooled[o], arg[o]) for o in range(pooled.shape[0])]
        avg = average_activation(responses)
        write_pgm(out / f"layer{args.layer}_average_activation.pgm", montage([avg], (1, 1)))
        for si in range(per_scale.shape[0]):
            write_pgm(out / f"layer{args.layer}_scale{si}_average_response.pgm",
                      montage([per_scale[si].mean(axis=0)], (1, 1)))
        write_pgm(out / f"layer{args.layer}_argmax_scale.pgm",
                  montage([np.mean([r.argmax_scale for r in responses], axis=0)], (1, 1)))
    print(f"wrote layer {args.layer} renders to {out}")
    return 0


# --- parser -------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="logradial", description="Log-radial scale-steerable filters and the SS-CNN.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-basis", help="write basis montages and a manifest")
    g.add_argument("--size", type=int, required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--orders", type=_float_list, default=[0.5, 1.0, 2.0])
    g.add_argument("--orientations", type=int, default=8, help="J; angles j*pi/J for j=1..J")
    g.add_argument("--sigma-phi", type=float, default=math.pi / 16)
    g.add_argument("--m", type=float, default=1.0)
    g.add_argument("--beta", type=float, default=0.0)
    g.set_defaults(func=cmd_gen_basis)

    v = sub.add_parser("verify-steer", help="check steering against the resampling oracle")
    v.add_argument("--trials", type=int, default=100)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--scales", type=_float_list, default=list(DEFAULT_VERIFY_SCALES))
    v.add_argument("--theorem-scales", type=_float_list, default=list(THEOREM_SCALES))
    v.add_argument("--base-size", type=int, default=7)
    v.set_defaults(func=cmd_verify_steer)

    s = sub.add_parser("synth-data", help="synthesize a scaled dataset from IDX files")
    s.add_argument("--kind", choices=["mnist-scale", "fmnist-scale", "local2"], required=True)
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--range", type=_range, default=None)
    s.add_argument("--count", type=int, default=None, help="use only the first N source images")
    s.add_argument("--pairs", type=int, default=None, help="number of local2 samples")
    s.set_defaults(func=cmd_synth_data)

    t = sub.add_parser("train", help="train a network from a key = value config")
    t.add_argument("--config", required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--metrics", default=None, help="metrics CSV path (default: checkpoint with .csv)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="print the error rate of a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", choices=["train", "val", "test", "all"], default="test")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("render", help="filter montages and average activations")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--layer", type=int, required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--input", default=None, help="PGM or .npy image")
    r.add_argument("--max-channels", type=int, default=32)
    r.set_defaults(func=cmd_render)
    return p


def _limit_threads():
    n = os.environ.get("LOGRADIAL_THREADS")
    if not n:
        return None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(int(n))


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    limiter = _limit_threads()
    try:
        return args.func(args)
    except (CommandError, ValueError, FileNotFoundError, RuntimeError) as exc:
        print(f"logradial {args.command}: error: {exc}", file=sys.stderr)
        return 1
    finally:
        if limiter is not None:
            limiter.restore_original_limits()


if __name__ == "__main__":
    sys.exit(main())
