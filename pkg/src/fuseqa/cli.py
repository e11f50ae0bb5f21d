"""Command-line interface.

    fuseqa gen       --preset desk --out data/
    fuseqa train     --data data/ --out runs/
    fuseqa eval      --data data/test.fqb --checkpoint runs/checkpoint.fqm
    fuseqa ablate    --data data/ --out runs/ --seeds 0,1,2,3,4
    fuseqa gradcheck
    fuseqa render-table --report runs/ablation.json

Exit codes: 0 success, 1 usage or config problems, 2 data/contract
problems, 3 an acceptance-style check failed (gradcheck above tolerance,
ablation ordering violated).  The MVCORE_THREADS environment variable
caps worker-process parallelism.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .config import RunConfig, load_run_config
from .errors import ConfigError, ContractError, ShapeError
from .features import BundleFormatError
from .gradcheck import TINY_ARCH, TINY_DIMS, TINY_VOCAB, gradient_check, synthetic_bundle
from .fusion import FusionConfig, FusionModel
from .synthtask import gen_dataset
from . import training

GRADCHECK_TOLERANCE = 1e-4
MAX_GRADCHECK_DIM = 32


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse defaults to exit code 2; we want 1
        raise _UsageError(message)


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", default=None, help="JSON config overlay file")
    p.add_argument("--preset", choices=("desk", "paper"), default=None)
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--out", default=None, help="output directory")


def _build_parser() -> _Parser:
    parser = _Parser(prog="fuseqa", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    _add_common(p)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train a model on a generated dataset")
    _add_common(p)
    p.add_argument("--data", required=True, help="directory holding train.fqb (and val.fqb)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a bundle file")
    _add_common(p)
    p.add_argument("--data", required=True, help="bundle file to evaluate on")
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and evaluate the four stream configurations")
    _add_common(p)
    p.add_argument("--data", required=True, help="directory holding train.fqb and test.fqb")
    p.add_argument("--seeds", default="0,1,2,3,4", help="comma-separated seeds (>= 3)")
    p.add_argument("--workers", type=int, default=None)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="compare tape gradients against finite differences")
    _add_common(p)
    p.add_argument("--step", type=float, default=1e-5, help="finite-difference step")
    p.add_argument("--workers", type=int, default=None)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("render-table", help="re-render the text table from an ablation report")
    p.add_argument("--report", required=True, help="ablation.json produced by ablate")
    p.set_defaults(func=cmd_render_table)
    return parser


def _load_cfg(args) -> RunConfig:
    return load_run_config(path=args.config, preset=args.preset, seed=args.seed)


def _out_dir(args, what: str) -> Path:
    if args.out is None:
        raise _UsageError(f"{what} requires --out DIR")
    return Path(args.out)


def cmd_gen(args) -> int:
    cfg = _load_cfg(args)
    out = _out_dir(args, "gen")
    manifest = gen_dataset(cfg.task, cfg.dims, out)
    for split, name in sorted(manifest["files"].items()):
        print(f"{split}: {out / name} ({manifest['counts'][split]} samples)")
    print(f"manifest: {out / 'manifest.json'}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_cfg(args)
    out = _out_dir(args, "train")
    data = Path(args.data)
    train_path = data / "train.fqb"
    if not train_path.exists():
        raise ContractError(f"missing dataset file {train_path}")
    val_path = data / "val.fqb"
    report = training.train(train_path, cfg, out,
                            eval_path=val_path if val_path.exists() else None)
    last = report.epochs[-1]
    print(f"epochs: {len(report.epochs)}  final loss: {last.mean_loss:.6f}  "
          f"train acc: {last.train_accuracy:.3f}"
          + (f"  val acc: {last.eval_accuracy:.3f}" if last.eval_accuracy is not None else ""))
    print(f"checkpoint: {report.checkpoint_path}")
    return 0


def cmd_eval(args) -> int:
    result = training.evaluate_files(args.data, args.checkpoint)
    print(f"overall accuracy: {result.overall:.4f} on {result.n} samples")
    for fam in sorted(result.per_family):
        print(f"  {fam}: {result.per_family[fam]:.4f}")
    if args.out is not None:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "eval_report.json", "w", encoding="utf-8") as fh:
            json.dump(result.as_dict(), fh, sort_keys=True, indent=1)
            fh.write("\n")
        print(f"report: {out / 'eval_report.json'}")
    return 0


def cmd_ablate(args) -> int:
    cfg = _load_cfg(args)
    out = _out_dir(args, "ablate")
    data = Path(args.data)
    train_path, test_path = data / "train.fqb", data / "test.fqb"
    for p in (train_path, test_path):
        if not p.exists():
            raise ContractError(f"missing dataset file {p}")
    try:
        seeds = [int(s) for s in args.seeds.split(",") if s.strip() != ""]
    except ValueError:
        raise _UsageError(f"--seeds must be comma-separated integers, got {args.seeds!r}") from None
    rows = training.run_ablation(train_path, test_path, cfg, seeds=seeds,
                                 workers=training.resolve_workers(args.workers))
    training.write_ablation_report(rows, out)
    print(training.render_ablation_table(rows), end="")
    if not training.ablation_ordering_ok(rows):
        print("ablation ordering violated: expected full > single ablations > dropping both",
              file=sys.stderr)
        return 3
    return 0


def cmd_gradcheck(args) -> int:
    if args.config is not None or args.preset is not None:
        cfg = _load_cfg(args)
        if cfg.arch.dim > MAX_GRADCHECK_DIM:
            raise ConfigError(
                f"gradcheck is restricted to widths <= {MAX_GRADCHECK_DIM}, got {cfg.arch.dim}")
        fusion_cfg = cfg.fusion_config()
        dims = cfg.dims
        seed = cfg.seed
        vocab = fusion_cfg.answer_vocab
    else:
        fusion_cfg = FusionConfig(answer_vocab=TINY_VOCAB, **TINY_ARCH)
        dims = TINY_DIMS
        seed = args.seed if args.seed is not None else 0
        vocab = TINY_VOCAB
    model = FusionModel(fusion_cfg, dims, seed=seed)
    bundle = synthetic_bundle(dims, vocab, seed=seed, tokens=4, objects=3, edges=2)
    workers = training.resolve_workers(args.workers)
    errors = gradient_check(model, bundle, h=args.step, workers=workers)
    failing = {k: v for k, v in errors.items() if v > GRADCHECK_TOLERANCE}
    worst = sorted(errors.items(), key=lambda kv: -kv[1])[:5]
    print(f"checked {len(errors)} parameter blocks "
          f"({model.parameter_count()} entries, {workers} workers)")
    for name, err in worst:
        print(f"  {name}: max rel err {err:.3e}")
    if args.out is not None:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "gradcheck.json", "w", encoding="utf-8") as fh:
            json.dump({"tolerance": GRADCHECK_TOLERANCE, "max_rel_err": errors,
                       "failing": sorted(failing)}, fh, sort_keys=True, indent=1)
            fh.write("\n")
    if failing:
        print(f"FAIL: {len(failing)} blocks above {GRADCHECK_TOLERANCE:g}: "
              f"{', '.join(sorted(failing))}", file=sys.stderr)
        return 3
    print(f"PASS: all blocks within {GRADCHECK_TOLERANCE:g}")
    return 0


def cmd_render_table(args) -> int:
    with open(args.report, "r", encoding="utf-8") as fh:
        data = json.load(fh)
    rows = [training.AblationRow(
        key=r["key"], label=r["label"], use_objects=r["use_objects"],
        use_scene_graph=r["use_scene_graph"], use_global_visual=r["use_global_visual"],
        overall=r["overall"], per_family=r["per_family"],
        per_seed_overall=r["per_seed_overall"]) for r in data["rows"]]
    print(training.render_ablation_table(rows), end="")
    return 0


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    try:
        return args.func(args)
    except _UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1
    except (ContractError, ShapeError, BundleFormatError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except FileNotFoundError as e:
        print(f"error: missing file: {e.filename or e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
