"""Command-line interface: gen-data / train / evaluate / simsearch / report.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
Every command that writes an output directory drops a manifest.json there
recording the command line, seeds, config hashes, and artifact paths; all
randomness flows from those seeds.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import asdict
from pathlib import Path

import yaml

from . import __version__
from .corpus import (
    SPLITS,
    CorpusError,
    CorpusFormatError,
    TaskSpec,
    filter_pairs,
    generate_corpus,
    load_corpus,
    save_corpus,
    spec_from_manifest,
)
from .evaluate import DecodeConfig, EvalError, evaluate_model, write_report
from .model import ModelConfig
from .pipeline import (
    Checkpoint,
    CheckpointError,
    PipelineError,
    PRESET_NAMES,
    build_pipeline,
    config_hash,
    load_checkpoint,
    pipeline_from_dict,
    pipeline_to_dict,
    run_pipeline,
)
from .report import ReportError, generate_report
from .tensor import NumericalError

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2

DEFAULT_SEED = 1
DEFAULT_SIZES = {"train": 8000, "valid": 500, "test": 500}
DEFAULT_EXT = {"train": 16000, "valid": 500}
DEFAULT_FILTER = {"min_frames": 4, "max_frames": 200, "max_len_ratio": 1.5}


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def resolve_seed(flag_seed, config_seed=None) -> int:
    """Priority: --seed flag, config file, SIMCR_SEED env var, default."""
    if flag_seed is not None:
        return int(flag_seed)
    if config_seed is not None:
        return int(config_seed)
    env = os.environ.get("SIMCR_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError as exc:
            raise UsageError(f"SIMCR_SEED={env!r} is not an integer") from exc
    return DEFAULT_SEED


def write_manifest(out_dir: Path, command: list[str], **fields) -> None:
    manifest = {
        "tool": "simcr",
        "version": __version__,
        "created_utc": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
        "command": command,
    }
    manifest.update(fields)
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def _load_yaml(path: str) -> dict:
    try:
        data = yaml.safe_load(Path(path).read_text())
    except (OSError, yaml.YAMLError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise UsageError(f"config {path} must be a mapping")
    return data


def load_data_dir(data_dir: str | Path) -> dict:
    data_dir = Path(data_dir)
    main_path = data_dir / "corpus.main.tsv"
    if not main_path.exists():
        raise UsageError(f"no corpus.main.tsv in {data_dir}")
    data = {"main": load_corpus(main_path)}
    ext_path = data_dir / "corpus.ext.tsv"
    if ext_path.exists():
        data["ext"] = load_corpus(ext_path)
    return data


# ---------------------------------------------------------------------------
# gen-data
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    out_dir = Path(args.out)
    cfg = _load_yaml(args.spec) if args.spec else {}
    seed = resolve_seed(args.seed, cfg.get("seed"))
    task_fields = dict(cfg.get("task", {}))
    task_fields["seed"] = seed
    try:
        spec = TaskSpec(**task_fields)
    except (TypeError, CorpusError) as exc:
        raise UsageError(f"invalid task spec: {exc}") from exc
    sizes = {**DEFAULT_SIZES, **cfg.get("sizes", {})}
    ext_sizes = {**DEFAULT_EXT, **cfg.get("ext", {})}
    filt = {**DEFAULT_FILTER, **cfg.get("filter", {})}

    main_path = out_dir / "corpus.main.tsv"
    ext_path = out_dir / "corpus.ext.tsv"
    if (main_path.exists() or ext_path.exists()) and not args.force:
        raise UsageError(f"{out_dir} already holds a corpus; pass --force to overwrite")
    out_dir.mkdir(parents=True, exist_ok=True)

    main = generate_corpus(spec, sizes)
    main = filter_pairs(main, **filt)
    exclude = {t.key() for s in SPLITS for t in main.split(s)}
    ext = generate_corpus(
        spec,
        {"train": ext_sizes.get("train", 0), "valid": ext_sizes.get("valid", 0), "test": 0},
        with_frames=False,
        sentence_seed=seed + 1_000_003,
        exclude=exclude,
    )
    ext = filter_pairs(ext, **filt)
    save_corpus(main, main_path)
    save_corpus(ext, ext_path)
    write_manifest(
        out_dir, list(sys.argv), seed=seed,
        task_spec=spec.to_dict(),
        sizes=main.counts(), ext_sizes=ext.counts(), filter=filt,
        artifacts={"main": str(main_path), "ext": str(ext_path)},
    )
    print(f"wrote {main.counts()} main triples and {ext.counts()['train']} "
          f"external pairs to {out_dir}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def _stage_table(pcfg) -> str:
    header = f"{'stage':<16} {'tasks':<10} {'init':<14} {'steps':>6} {'lr':>8} " \
             f"{'alpha':>6} {'beta':>6} corpus"
    lines = [header, "-" * len(header)]
    for s in pcfg.stages:
        corpus = ",".join(f"{t}={s.corpus_key(t)}" for t in s.tasks)
        lines.append(
            f"{s.name:<16} {'+'.join(s.tasks):<10} {s.init or '(scratch)':<14} "
            f"{s.max_steps:>6} {s.peak_lr:>8.1e} {s.alpha:>6.2f} {s.beta:>6.2f} {corpus}"
        )
    return "\n".join(lines)


def cmd_train(args) -> int:
    if bool(args.pipeline) == bool(args.config):
        raise UsageError("pass exactly one of --pipeline NAME or --config FILE")
    if args.pipeline:
        seed = resolve_seed(args.seed)
        try:
            pcfg = build_pipeline(args.pipeline, seed=seed)
        except PipelineError as exc:
            raise UsageError(str(exc)) from exc
    else:
        raw = _load_yaml(args.config)
        try:
            pcfg = pipeline_from_dict(raw)
        except (PipelineError, TypeError) as exc:
            raise UsageError(f"invalid pipeline config: {exc}") from exc
        pcfg.seed = resolve_seed(args.seed, raw.get("seed"))

    if args.dry_run:
        print(f"pipeline {pcfg.name} (seed {pcfg.seed})")
        print(_stage_table(pcfg))
        return EXIT_OK

    data = load_data_dir(args.data)
    for stage in pcfg.stages:  # config validation before any training
        for task in stage.tasks:
            if stage.corpus_key(task) not in data:
                raise UsageError(
                    f"stage {stage.name!r} needs corpus {stage.corpus_key(task)!r}, "
                    f"not present in {args.data}"
                )
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "pipeline.yaml").write_text(yaml.safe_dump(pipeline_to_dict(pcfg)))

    result = run_pipeline(pcfg, data, out_dir=out_dir)
    final_path = out_dir / "final.ckpt"
    from .pipeline import save_checkpoint
    save_checkpoint(result.final, final_path)
    write_manifest(
        out_dir, list(sys.argv), seed=pcfg.seed,
        pipeline=pcfg.name,
        config_hash=config_hash(result.model_config),
        data_dir=str(Path(args.data).resolve()),
        stages={name: {"best_step": r.best_step, "best_val": r.best_val,
                       "aborted": r.aborted}
                for name, r in result.stages.items()},
        artifacts={"final": str(final_path)},
    )
    for name, r in result.stages.items():
        status = "ABORTED" if r.aborted else "ok"
        print(f"stage {name}: best val {r.best_val:.4f} @ step {r.best_step} [{status}]")
    if result.aborted:
        print("training aborted on a non-finite loss; last good checkpoint kept")
        return EXIT_RUNTIME
    print(f"final checkpoint: {final_path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# evaluate / simsearch
# ---------------------------------------------------------------------------

def cmd_evaluate(args, force_diagnostics: bool = False) -> int:
    try:
        ckpt = load_checkpoint(args.checkpoint)
    except CheckpointError as exc:
        raise UsageError(str(exc)) from exc
    data = load_data_dir(args.data)
    main = data["main"]
    spec = spec_from_manifest(main.manifest)
    vocab = spec.vocab()
    cfg = ModelConfig(**ckpt.model_config)
    if args.tag not in ("src", "tgt"):
        raise UsageError(f"unknown language tag {args.tag!r}; registered tags: src, tgt")
    dcfg = DecodeConfig(
        beam_size=1 if args.greedy else args.beam,
        length_penalty=args.lenpen,
        max_len_factor=args.max_len_factor,
        lang=args.tag,
    )
    tasks = args.task or ["st"]
    items = main.split(args.split)
    if args.limit:
        items = items[: args.limit]
    out_dir = Path(args.out) if args.out else Path(args.checkpoint).parent / f"eval-{args.split}"
    out_dir.mkdir(parents=True, exist_ok=True)
    diagnostics = force_diagnostics or args.diagnostics
    report = evaluate_model(
        ckpt.params, cfg, vocab, items, tasks, dcfg,
        split=args.split, diagnostics=diagnostics,
        checkpoint_meta={"path": str(args.checkpoint), "stage": ckpt.stage,
                         "step": ckpt.step, "selection": "best-validation"},
        representations_path=out_dir / "representations.tsv" if diagnostics else None,
    )
    paths = write_report(report, out_dir)
    write_manifest(
        out_dir, list(sys.argv), seed=resolve_seed(args.seed),
        checkpoint=str(args.checkpoint), split=args.split,
        decode=asdict(dcfg), artifacts=paths,
    )
    print((out_dir / "report.txt").read_text(), end="")
    return EXIT_OK


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

def cmd_report(args) -> int:
    for d in args.runs:
        if not Path(d).is_dir():
            raise UsageError(f"run directory {d} does not exist")
    summary = generate_report(args.runs, args.out)
    print(f"aggregated {summary['runs']} runs -> {summary['paths']['csv']}")
    for run, missing in summary["absent"].items():
        print(f"  {run}: absent: {'; '.join(missing)}")
    print(f"figures: {summary['paths']['scatter_svg']}, {summary['paths']['loss_curves_svg']}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> _Parser:
    parser = _Parser(prog="simcr", description=__doc__)
    parser.add_argument("--version", action="version", version=f"simcr {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate the synthetic corpus")
    g.add_argument("--out", required=True)
    g.add_argument("--spec", help="task spec YAML")
    g.add_argument("--seed", type=int)
    g.add_argument("--force", action="store_true")
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="run a training pipeline")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--pipeline", help=f"built-in: {', '.join(PRESET_NAMES)}")
    t.add_argument("--config", help="pipeline YAML")
    t.add_argument("--seed", type=int)
    t.add_argument("--dry-run", action="store_true")
    t.set_defaults(fn=cmd_train)

    def add_eval_args(p):
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--data", required=True)
        p.add_argument("--out")
        p.add_argument("--task", action="append", choices=("st", "asr", "mt"),
                       help="repeatable; default st")
        p.add_argument("--split", default="test", choices=SPLITS)
        p.add_argument("--beam", type=int, default=5)
        p.add_argument("--greedy", action="store_true", help="shortcut for --beam 1")
        p.add_argument("--lenpen", type=float, default=1.0)
        p.add_argument("--max-len-factor", type=float, default=2.0)
        p.add_argument("--tag", default="tgt", help="decoder language tag (src or tgt)")
        p.add_argument("--limit", type=int, help="evaluate only the first N sentences")
        p.add_argument("--samples", type=int, default=5)
        p.add_argument("--diagnostics", action="store_true",
                       help="add similarity search and representation export")
        p.add_argument("--seed", type=int)

    e = sub.add_parser("evaluate", help="decode and score a checkpoint")
    add_eval_args(e)
    e.set_defaults(fn=cmd_evaluate)

    s = sub.add_parser("simsearch", help="evaluate with modality diagnostics")
    add_eval_args(s)
    s.set_defaults(fn=lambda a: cmd_evaluate(a, force_diagnostics=True))

    r = sub.add_parser("report", help="aggregate runs into tables and figures")
    r.add_argument("runs", nargs="+")
    r.add_argument("--out", required=True)
    r.set_defaults(fn=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"simcr: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.fn(args)
    except UsageError as exc:
        print(f"simcr: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CorpusError, CorpusFormatError, PipelineError, EvalError, ReportError) as exc:
        # configuration and input problems discovered during validation
        print(f"simcr: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericalError, CheckpointError, OSError) as exc:
        print(f"simcr: runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
