"""Command-line entry point.

Subcommands: synth-data, fit-codebooks, quantize, compare, train, eval,
roadmap, inspect. Exit codes: 0 success, 1 usage error, 2 data/format error,
3 numerical failure. Artifacts are written atomically, so a nonzero exit
leaves no partial file at a declared output path. Every experiment-affecting
flag has a default that is echoed in the output.
"""

from __future__ import annotations

import argparse
import difflib
import json
import os
import shutil
import sys
import tempfile

import numpy as np

from . import data as data_mod
from . import evaluate as eval_mod
from . import formats, quantize, train
from .errors import (
    ConfigError,
    FormatError,
    InsufficientDataError,
    NonFiniteInputError,
    ShapeError,
    TrainingDiverged,
    VqkitError,
)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _echo(args, names):
    for name in names:
        print(f"{name} = {getattr(args, name.replace('-', '_'))}")


def _parse_seeds(text) -> list:
    try:
        return [int(s) for s in str(text).split(",") if s != ""]
    except ValueError:
        raise UsageError(f"bad --seeds value {text!r}; expected e.g. 0,1,2") from None


def _parse_configs(text) -> list:
    """Parse a compare spec like 'mcq:8x256,rq:8x256,vq:256,rq_perlevel:4x128'."""
    configs = []
    for item in str(text).split(","):
        if not item:
            continue
        if ":" not in item:
            raise UsageError(f"bad config entry {item!r}; expected scheme:NxK or vq:K")
        scheme, shape = item.split(":", 1)
        shared = True
        if scheme == "rq_perlevel":
            scheme, shared = "rq", False
        if scheme not in ("vq", "mcq", "rq"):
            raise UsageError(f"unknown scheme {scheme!r} in {item!r}")
        try:
            if "x" in shape:
                n_str, k_str = shape.split("x", 1)
                n, k = int(n_str), int(k_str)
            else:
                n, k = 1, int(shape)
        except ValueError:
            raise UsageError(f"bad shape {shape!r} in {item!r}; expected NxK") from None
        configs.append({"scheme": scheme, "n": n, "K": k, "shared": shared})
    if not configs:
        raise UsageError("empty --configs specification")
    return configs


# ---------------------------------------------------------------------------
# subcommands


def _cmd_synth_data(args, overrides):
    if args.kind == "shapes":
        dataset = data_mod.gen_shapes(args.seed, args.count, num_classes=args.classes)
        out = args.out
        if os.path.exists(out) and os.listdir(out):
            raise UsageError(f"output directory {out} already exists and is not empty")
        tmp = tempfile.mkdtemp(dir=os.path.dirname(os.path.abspath(out)) or ".",
                               prefix=".tmp-synth-")
        try:
            data_mod.save_dataset(dataset, tmp)
            if os.path.isdir(out):
                os.rmdir(out)
            os.rename(tmp, out)
        except BaseException:
            shutil.rmtree(tmp, ignore_errors=True)
            raise
        print(f"wrote {len(dataset)} images, {dataset.num_classes} classes -> {out}")
    else:
        x = data_mod.gen_vectors(args.seed, args.count, args.dim, components=args.components)
        formats.save_vectors(args.out, x)
        print(f"wrote {x.shape[0]} vectors of dim {x.shape[1]} -> {args.out}")
    _echo(args, ["kind", "seed", "count", "classes", "dim", "components"])
    return EXIT_OK


def _cmd_fit_codebooks(args, overrides):
    x = formats.load_vectors(args.input)
    if args.scheme == "vq":
        obj = quantize.fit_kmeans(x, args.codebook_size, seed=args.seed,
                                  max_iters=args.max_iters, tol=args.tol)
    elif args.scheme == "mcq":
        obj = quantize.fit_mcq(x, args.sub_codebooks, args.codebook_size, seed=args.seed,
                               max_iters=args.max_iters, tol=args.tol)
    else:
        obj = quantize.fit_rq(x, args.sub_codebooks, args.codebook_size, seed=args.seed,
                              shared=not args.per_level, max_iters=args.max_iters, tol=args.tol)
    formats.save_codebooks(args.out, obj)
    print(f"fitted {args.scheme} codebooks on {x.shape[0]} vectors -> {args.out}")
    _echo(args, ["scheme", "sub_codebooks", "codebook_size", "seed", "max_iters", "tol"])
    return EXIT_OK


def _quantize_file(obj, x):
    if isinstance(obj, quantize.Codebook):
        idx, err = quantize.lookup_batch(obj, x)
        return idx[:, None], err
    if isinstance(obj, quantize.MultiCodebookQuantizer):
        idx, _, sub_err = quantize.quantize_mcq_batch(obj, x)
        return idx, sub_err.sum(axis=1)
    idx, _, err, _ = quantize.quantize_rq_batch(obj, x)
    return idx, err


def _cmd_quantize(args, overrides):
    obj = formats.load_codebooks(args.codebooks)
    x = formats.load_vectors(args.input)
    idx, err = _quantize_file(obj, x)
    n = idx.shape[1]
    header = "row," + ",".join(f"index_{j}" for j in range(n)) + ",error"
    lines = [header]
    for i in range(idx.shape[0]):
        cells = [str(i)] + [str(int(v)) for v in idx[i]] + [format(float(err[i]), ".8g")]
        lines.append(",".join(cells))
    formats.atomic_write(args.out, ("\n".join(lines) + "\n").encode("utf-8"))
    print(f"quantized {x.shape[0]} vectors with {n} indices each -> {args.out}")
    return EXIT_OK


def _cmd_compare(args, overrides):
    x = formats.load_vectors(args.input)
    configs = _parse_configs(args.configs)
    seeds = _parse_seeds(args.seeds)
    rows = eval_mod.compare_quantizers(x, configs, seeds)
    formats.atomic_write(args.out, eval_mod.rows_to_csv(rows, eval_mod.COMPARE_COLUMNS).encode())
    print(f"compared {len(configs)} configs x {len(seeds)} seeds -> {args.out}")
    _echo(args, ["configs", "seeds"])
    return EXIT_OK


def _cmd_train(args, overrides):
    config = train.load_config(args.config, overrides) if args.config else train.from_ini(
        "", overrides
    )
    def progress(row):
        print(
            f"step {row['step']:6d}  total {row['total']:.4f}  psnr {row['psnr']:.2f}  "
            f"zs_acc {row['zs_acc']:.3f}"
        )
    state = train.fit(config, out_dir=args.out, resume=args.resume, progress=progress)
    print(f"finished at step {state.step}; checkpoints and metrics.csv in {args.out}")
    print(f"config fingerprint = {state.config.fingerprint()}")
    return EXIT_OK


def _cmd_eval(args, overrides):
    state = train.load_checkpoint(args.checkpoint)
    if args.data:
        dataset = data_mod.load_dataset(args.data)
        size = state.model.cfg.image_size
        if dataset.images.shape[1:3] != (size, size):
            raise FormatError(
                f"dataset images are {dataset.images.shape[1]}x{dataset.images.shape[2]} "
                f"but the model expects {size}x{size}"
            )
        if dataset.num_classes > state.model.cfg.num_classes:
            raise FormatError(
                f"dataset has {dataset.num_classes} classes but the model was trained "
                f"with {state.model.cfg.num_classes}"
            )
        state.held = dataset
        state.held_patches = data_mod.patchify(dataset.images, state.config.model.patch)
    report = eval_mod.evaluate_state(state)
    formats.atomic_write(args.out, json.dumps(report.to_dict(), indent=2).encode() + b"\n")
    print(f"psnr {report.psnr:.2f} dB, zs_accuracy {report.zs_accuracy:.3f} -> {args.out}")
    if report.untrained_tower:
        print("note: model was trained with lambda_contra = 0 (untrained tower)")
    return EXIT_OK


def _cmd_roadmap(args, overrides):
    config = train.load_config(args.config, overrides) if args.config else train.from_ini(
        "", overrides
    )
    seeds = _parse_seeds(args.seeds)
    def progress(row):
        psnr = "-" if row["psnr"] is None else f"{row['psnr']:.2f}"
        print(f"{row['variant']:28s} seed {row['seed']}  zs_acc {row['zs_acc']:.3f}  psnr {psnr}")
    rows = eval_mod.roadmap_ablation(config, seeds, progress=progress)
    formats.atomic_write(args.out, eval_mod.rows_to_csv(rows, eval_mod.ROADMAP_COLUMNS).encode())
    print(f"roadmap table ({len(rows)} rows) -> {args.out}")
    return EXIT_OK


def _describe_codebook(name, cb):
    s = quantize.stats(cb)
    norms = np.linalg.norm(cb.entries, axis=1)
    print(
        f"  {name}: K={cb.num_entries} c={cb.code_dim} "
        f"|entry| min/mean/max = {norms.min():.3f}/{norms.mean():.3f}/{norms.max():.3f} "
        f"utilization={s.utilization:.3f} perplexity={s.perplexity:.2f}"
    )


def _cmd_inspect(args, overrides):
    if not args.checkpoint and not args.codebooks:
        raise UsageError("inspect needs --checkpoint or --codebooks")
    if args.checkpoint:
        state = train.load_checkpoint(args.checkpoint)
        print(f"checkpoint at step {state.step}")
        print(f"config fingerprint = {state.config.fingerprint()}")
        total = sum(t.data.size for t in state.model.params.values())
        print(f"{len(state.model.params)} parameter tensors, {total} scalars")
        for name, cb in state.model._codebooks():
            _describe_codebook(name, cb)
        if state.metric_rows:
            print("last metrics row:")
            print(f"  {train.METRICS_HEADER}")
            print(f"  {state.metric_rows[-1]}")
        return EXIT_OK
    obj = formats.load_codebooks(args.codebooks)
    kind = {quantize.Codebook: "vq", quantize.MultiCodebookQuantizer: "mcq"}.get(type(obj), "rq")
    print(f"scheme = {kind}")
    if isinstance(obj, quantize.Codebook):
        books = [("codebook", obj)]
        print(f"d = {obj.code_dim}, n = 1, vocab bits = {quantize.vocab_bits([obj.num_entries])}")
    elif isinstance(obj, quantize.MultiCodebookQuantizer):
        books = [(f"sub{j}", cb) for j, cb in enumerate(obj.sub_codebooks)]
        print(f"d = {obj.token_dim}, n = {obj.num_sub_codebooks}, vocab bits = {obj.vocab_bits()}")
    else:
        books = (
            [("shared", obj.levels[0])]
            if obj.shared
            else [(f"level{j}", cb) for j, cb in enumerate(obj.levels)]
        )
        bits = quantize.vocab_bits([cb.num_entries for cb in obj.levels])
        print(f"d = {obj.token_dim}, n = {obj.num_levels} (shared={obj.shared}), vocab bits = {bits}")
    for name, cb in books:
        _describe_codebook(name, cb)
    if args.input:
        x = formats.load_vectors(args.input)
        _, err = _quantize_file(obj, x)
        print(
            f"recomputed errors over {x.shape[0]} vectors: "
            f"mean = {err.mean():.8g}, max = {err.max():.8g}"
        )
    return EXIT_OK


# ---------------------------------------------------------------------------
# wiring


def _build_parsers():
    top = _Parser(prog="vqkit", description=__doc__,
                  formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    sub = top.add_subparsers(dest="command")
    specs = {}

    def cmd(name, fn, allow_overrides=False):
        p = sub.add_parser(name, formatter_class=argparse.ArgumentDefaultsHelpFormatter)
        specs[name] = (p, fn, allow_overrides)
        return p

    p = cmd("synth-data", _cmd_synth_data)
    p.add_argument("--kind", choices=["shapes", "vectors"], required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=int, default=1000)
    p.add_argument("--classes", type=int, default=8, help="shape classes (shapes only)")
    p.add_argument("--dim", type=int, default=64, help="vector dimension (vectors only)")
    p.add_argument("--components", type=int, default=1,
                   help="Gaussian mixture components (vectors only)")
    p.add_argument("--out", required=True)

    p = cmd("fit-codebooks", _cmd_fit_codebooks)
    p.add_argument("--input", required=True, help="UTKV vector file")
    p.add_argument("--scheme", choices=["vq", "mcq", "rq"], required=True)
    p.add_argument("--sub-codebooks", type=int, default=1)
    p.add_argument("--codebook-size", type=int, default=256)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-iters", type=int, default=100)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--per-level", action="store_true",
                   help="rq only: per-level codebooks instead of one shared")
    p.add_argument("--out", required=True)

    p = cmd("quantize", _cmd_quantize)
    p.add_argument("--codebooks", required=True, help="UTKQ codebook file")
    p.add_argument("--input", required=True, help="UTKV vector file")
    p.add_argument("--out", required=True, help="codes CSV: row,index_0..,error")

    p = cmd("compare", _cmd_compare)
    p.add_argument("--input", required=True, help="UTKV vector file")
    p.add_argument("--configs", required=True,
                   help="comma list of scheme:NxK (vq:K, mcq:NxK, rq:NxK, rq_perlevel:NxK)")
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--out", required=True)

    p = cmd("train", _cmd_train, allow_overrides=True)
    p.add_argument("--config", default=None, help="INI config file (defaults when omitted)")
    p.add_argument("--out", required=True, help="checkpoint/metrics directory")
    p.add_argument("--resume", default=None, help="checkpoint to continue from")

    p = cmd("eval", _cmd_eval)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", default=None, help="PPM directory with labels.csv")
    p.add_argument("--out", required=True, help="JSON report path")

    p = cmd("roadmap", _cmd_roadmap, allow_overrides=True)
    p.add_argument("--config", default=None, help="base INI config file")
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--out", required=True)

    p = cmd("inspect", _cmd_inspect)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--codebooks", default=None)
    p.add_argument("--input", default=None,
                   help="UTKV file: recompute quantization errors with --codebooks")

    return top, specs


def _run(argv) -> int:
    top, specs = _build_parsers()
    if not argv:
        top.print_help()
        return EXIT_USAGE
    if argv[0] in ("-h", "--help"):
        top.print_help()
        return EXIT_OK
    command = argv[0]
    if command not in specs:
        close = difflib.get_close_matches(command, specs, n=1)
        hint = f"; did you mean {close[0]!r}?" if close else ""
        raise UsageError(f"unknown subcommand {command!r}{hint}")
    parser, fn, allow_overrides = specs[command]
    args, extra = parser.parse_known_args(argv[1:])
    overrides = []
    for item in extra:
        if allow_overrides and item.startswith("--") and "=" in item and "." in item.split("=")[0]:
            overrides.append(item[2:])
        else:
            flags = [s for a in parser._actions for s in a.option_strings]
            close = difflib.get_close_matches(item.split("=")[0], flags, n=1)
            hint = f"; did you mean {close[0]!r}?" if close else ""
            raise UsageError(f"unknown flag {item!r}{hint}")
    return fn(args, overrides)


def main(argv=None) -> int:
    try:
        return _run(list(sys.argv[1:] if argv is None else argv))
    except SystemExit as e:  # argparse --help
        return int(e.code or 0)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDiverged as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        if e.checkpoint_path:
            print(f"last good checkpoint: {e.checkpoint_path}", file=sys.stderr)
        if e.report is not None:
            print(f"diagnostic report: {e.report}", file=sys.stderr)
        return EXIT_NUMERIC
    except NonFiniteInputError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FormatError, InsufficientDataError, ShapeError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except FileNotFoundError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except VqkitError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
