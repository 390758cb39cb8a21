"""``rev2net`` command-line entry point.

Exit codes: 0 success, 1 validation / usage error, 2 runtime or I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import data as D
from . import gradcheck
from . import model as M
from . import train as TR
from .config import RunConfig
from .errors import ConfigError, InvalidInputError, InvalidShapeError, Rev2NetError
from .flow import TvL1Params, flows_for_clip

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2
VALIDATION_ERRORS = (ConfigError, InvalidInputError, InvalidShapeError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _emit(payload: dict) -> None:
    print(json.dumps(payload, indent=2, default=str))


def _flow_cache(cfg: RunConfig, manifest_path: Path) -> Path:
    if cfg.train.flow_cache:
        return cfg.resolve(cfg.train.flow_cache)
    shared = manifest_path.parent / "flows"
    return shared if shared.is_dir() else cfg.out_dir / "flows"


def _load(args) -> RunConfig:
    cfg = RunConfig.load(args.config)
    if getattr(args, "ddp", None):
        cfg = cfg.with_model(ddp_mode=args.ddp)
    return cfg


def _split_data(cfg: RunConfig, manifest, split: str, model_cfg: M.Rev2NetConfig, cache):
    clips = manifest.load_clips(split, cfg.train.domain or None)
    if not clips:
        raise InvalidInputError(f"split {split!r} of {cfg.manifest_path} is empty")
    modality = "flow" if model_cfg.in_channels == 2 else "rgb"
    want_flow = modality == "flow" or (split == cfg.train.train_split and TR._needs_flow(model_cfg))
    return TR.TrainingData.from_clips(clips, modality, None if want_flow else False, cfg.flow, cache)


# -- subcommands --------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    manifest = D.gen_dataset(args.n, args.seed, args.out)
    _emit({"manifest": str(Path(args.out) / "manifest.jsonl"), "clips": len(manifest.entries),
           "domains": manifest.domains, "checksum": manifest.checksum()})
    return EXIT_OK


def cmd_flow(args) -> int:
    params = TvL1Params(lambda_data=args.lambda_data, theta=args.theta, n_warps=args.warps, n_iters=args.iters)
    manifest = D.DatasetManifest.load(args.manifest)
    out = Path(args.out) if args.out else Path(args.manifest).parent / "flows"
    out.mkdir(parents=True, exist_ok=True)
    n = 0
    for entry in manifest.entries:
        flows_for_clip(D.read_clip(manifest.resolve(entry)), params, out)
        n += 1
    _emit({"flows": n, "cache": str(out), "params": params.digest()})
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load(args)
    manifest = D.DatasetManifest.load(cfg.manifest_path)
    cache = _flow_cache(cfg, cfg.manifest_path)
    train_data = _split_data(cfg, manifest, cfg.train.train_split, cfg.model, cache)
    test_data = _split_data(cfg, manifest, cfg.train.eval_split, cfg.model, cache)
    model = M.build(cfg.model, cfg.train.seed, dtype=cfg.train.dtype)
    report = TR.train(model, cfg.train, train_data, test_data, cfg.out_dir)
    final = report.final
    _emit({"checkpoint": report.checkpoint, "epochs": len(report.epochs), "train_accuracy": final.train_accuracy,
           "test_accuracy": final.test_accuracy, "final_losses": final.losses})
    return EXIT_OK


def cmd_eval(args) -> int:
    model = M.load_checkpoint(args.checkpoint)
    manifest = D.DatasetManifest.load(args.manifest)
    acc = TR.evaluate_manifest(model, manifest, args.split, args.domain, cache_dir=None)
    _emit({"checkpoint": args.checkpoint, "split": args.split, "accuracy": acc})
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _load(args)
    manifest = D.DatasetManifest.load(cfg.manifest_path)
    cache = _flow_cache(cfg, cfg.manifest_path)
    train_data = _split_data(cfg, manifest, cfg.train.train_split, cfg.model, cache)
    test_data = _split_data(cfg, manifest, cfg.train.eval_split, cfg.model, cache)
    rep = TR.ablation_suite(cfg.model, cfg.train, train_data, test_data, cfg.out_dir / "ablation")
    TR.write_reports(cfg.out_dir, "ablation", {**rep.to_dict(), "config": cfg.to_dict()}, rep.rows)
    _emit({"rows": [{k: r[k] for k in ("variant", "accuracy")} for r in rep.rows],
           "full_at_least_no_ddp": rep.directional_ok})
    return EXIT_OK


def cmd_xdomain(args) -> int:
    cfg = _load(args)
    manifest = D.DatasetManifest.load(cfg.manifest_path)
    rep = TR.cross_domain(manifest, cfg.model, cfg.train, cfg.flow, _flow_cache(cfg, cfg.manifest_path),
                          cfg.out_dir / "xdomain")
    TR.write_reports(cfg.out_dir, "xdomain", {**rep.to_dict(), "config": cfg.to_dict()}, rep.rows)
    _emit({"rows": rep.rows})
    return EXIT_OK


def cmd_grid(args) -> int:
    cfg = _load(args)
    manifest = D.DatasetManifest.load(cfg.manifest_path)
    cache = _flow_cache(cfg, cfg.manifest_path)
    train_data = _split_data(cfg, manifest, cfg.train.train_split, cfg.model, cache)
    val_data = _split_data(cfg, manifest, cfg.train.eval_split, cfg.model, cache)
    res = TR.grid_search(cfg.model, cfg.train, train_data, val_data)
    payload = {"best": res.best, "coarse_winners": res.coarse_winners, "meta": res.meta, "table": res.table,
               "config": cfg.to_dict()}
    TR.write_reports(cfg.out_dir, "grid", payload, res.table)
    _emit({"best": res.best, "cells": len(res.table)})
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = gradcheck.run_suite(args.precision, args.seed)
    width = max(len(r.name) for r in results)
    for r in results:
        print(f"{r.name:<{width}}  max_rel_error={r.max_rel_error:.3e}  {'ok' if r.passed else 'FAIL'}")
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} within {results[0].tolerance:g}")
    return EXIT_OK if not failed else EXIT_INVALID


def cmd_export(args) -> int:
    model = M.load_checkpoint(args.checkpoint)
    out = M.export_inference(model, args.out)
    _emit({"exported": str(out), "params": model.num_params(),
           "inference_params": M.load_checkpoint(out).num_params()})
    return EXIT_OK


# -- parser -------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    p = _Parser(prog="rev2net", description="Multi-task video action recognition with auxiliary decoders.",
                formatter_class=fmt)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_, description=help_, formatter_class=fmt)
        sp.set_defaults(func=fn)
        return sp

    sp = add("gen-data", cmd_gen_data, "generate the synthetic two-domain sprite dataset")
    sp.add_argument("--n", type=int, default=10, help="clips per (class, domain) cell")
    sp.add_argument("--seed", type=int, default=0, help="dataset seed")
    sp.add_argument("--out", required=True, help="output directory (clips/ and manifest.jsonl)")

    sp = add("flow", cmd_flow, "precompute TV-L1 flow targets for every clip in a manifest")
    sp.add_argument("--manifest", required=True, help="dataset manifest.jsonl")
    d = TvL1Params()
    sp.add_argument("--lambda", dest="lambda_data", type=float, default=d.lambda_data, help="data-term weight")
    sp.add_argument("--theta", type=float, default=d.theta, help="coupling parameter")
    sp.add_argument("--warps", type=int, default=d.n_warps, help="warps per pyramid level")
    sp.add_argument("--iters", type=int, default=d.n_iters, help="inner iterations per warp")
    sp.add_argument("--out", default=None, help="flow cache directory (default: <manifest dir>/flows)")

    for name, fn, help_ in (("train", cmd_train, "train a model from a run config"),
                            ("ablate", cmd_ablate, "train the four ablation variants"),
                            ("xdomain", cmd_xdomain, "cross-domain protocol in both directions"),
                            ("grid", cmd_grid, "coarse-to-fine loss-weight grid search")):
        sp = add(name, fn, help_)
        sp.add_argument("--config", required=True, help="run config JSON (train/model/flow sections)")
        if name == "train":
            sp.add_argument("--ddp", choices=M.DDP_MODES, default=None,
                            help="override model.ddp_mode (default: value from the config)")

    sp = add("eval", cmd_eval, "accuracy of a checkpoint on a manifest split")
    sp.add_argument("--checkpoint", required=True, help="checkpoint file")
    sp.add_argument("--manifest", required=True, help="dataset manifest.jsonl")
    sp.add_argument("--split", default="test", help="split name")
    sp.add_argument("--domain", default=None, help="restrict to one domain; all domains when omitted")

    sp = add("gradcheck", cmd_gradcheck, "finite-difference check of every op, loss and micro-model layer")
    sp.add_argument("--precision", type=int, choices=(32, 64), default=64, help="float width")
    sp.add_argument("--seed", type=int, default=0, help="seed for random probes")

    sp = add("export", cmd_export, "write an inference-only checkpoint (encoder + classifier)")
    sp.add_argument("--checkpoint", required=True, help="full checkpoint")
    sp.add_argument("--out", required=True, help="output checkpoint path")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INVALID
    except SystemExit as exc:  # --help
        return EXIT_OK if not exc.code else EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except VALIDATION_ERRORS as exc:
        print(f"rev2net {args.command}: invalid: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (Rev2NetError, OSError) as exc:
        print(f"rev2net {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
