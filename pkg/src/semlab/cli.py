"""Command-line workflow: gen-data / train / eval / export-curves /
export-attention / sweep.

Every flag can also be supplied through a JSON config file (``--config``);
explicit flags win. Relative output paths are resolved under
``$SEMLAB_OUTPUT_ROOT`` when that variable is set. Exit codes: 0 success,
1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from .errors import SemlabError, VocabMismatchError
from .pathstar import (
    Vocabulary,
    build_dataset,
    evaluate_model,
    load_samples,
    rescore_exact_match,
)
from .semformer import build_planned_sequence
from .training import RunConfig, Trainer, build_objective_from_config, export_curves_csv
from .transformer import attention_records
from .checkpoint import load_checkpoint

# shipped task presets; the desk-* rows fit a multi-core desktop CPU budget
PRESETS = {
    "desk-g2x5": {"d": 2, "l": 5, "n_train": 20000, "n_test": 2000},
    "desk-g5x5": {"d": 5, "l": 5, "n_train": 20000, "n_test": 2000},
    "desk-g4x5": {"d": 4, "l": 5, "n_train": 20000, "n_test": 2000},
    # full-paper scale; long-running, included for completeness
    "paper-g5x20": {"d": 5, "l": 20, "n_train": 200000, "n_test": 20000},
    "paper-g10x20": {"d": 10, "l": 20, "n_train": 200000, "n_test": 20000},
    "paper-g20x5": {"d": 20, "l": 5, "n_train": 200000, "n_test": 20000},
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse default exits 2; usage errors are 1 here
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        sys.exit(1)


def _out_path(p) -> Path:
    p = Path(p)
    root = os.environ.get("SEMLAB_OUTPUT_ROOT")
    if root and not p.is_absolute():
        return Path(root) / p
    return p


def _load_config_file(path) -> dict:
    return json.loads(Path(path).read_text())


def build_parser() -> _Parser:
    parser = _Parser(prog="semlab", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a path-star dataset")
    g.add_argument("--preset", choices=sorted(PRESETS))
    g.add_argument("--d", type=int, help="branch count at the center")
    g.add_argument("--l", type=int, help="nodes per path, center included")
    g.add_argument("--n", type=int, default=None, help="node value range (default d*l)")
    g.add_argument("--n-train", type=int, default=None, help="default 200000")
    g.add_argument("--n-test", type=int, default=None, help="default 20000")
    g.add_argument("--n-plan-tokens", type=int, default=4)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True, help="dataset directory")

    t = sub.add_parser("train", help="train one objective on a dataset")
    t.add_argument("--config", help="JSON file of RunConfig fields; flags override")
    t.add_argument("--data", help="dataset directory from gen-data")
    t.add_argument("--out", help="run directory")
    t.add_argument("--resume", help="checkpoint file (or run dir) to continue")
    t.add_argument("--quiet", action="store_true")
    for fname, fdef in RunConfig.__dataclass_fields__.items():
        if fname in ("data_dir", "out_dir", "dataset_hash"):
            continue
        flag = "--" + fname.replace("_", "-")
        if fdef.type == "bool" or isinstance(fdef.default, bool):
            t.add_argument(flag, type=lambda s: s.lower() in ("1", "true", "yes"),
                           default=None, metavar="BOOL")
        else:
            t.add_argument(flag, type=type(fdef.default), default=None)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a test file")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--test-file", required=True)
    e.add_argument("--ood", action="store_true",
                   help="allow a test file from a different task config")
    e.add_argument("--batch-size", type=int, default=256)
    e.add_argument("--report-out", help="where to write the JSON report")

    c = sub.add_parser("export-curves", help="metrics stream -> CSV")
    c.add_argument("--run", required=True, help="run directory")
    c.add_argument("--out", help="CSV path (default <run>/curves.csv)")

    a = sub.add_parser("export-attention", help="head-averaged attention records")
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--data", required=True, help="dataset directory")
    a.add_argument("--split", default="test", choices=("train", "test"))
    a.add_argument("--index", type=int, default=0, help="sample index within the split")
    a.add_argument("--out", help="JSONL path (default stdout)")

    s = sub.add_parser("sweep", help="train once per value of one config field")
    s.add_argument("--param", required=True, help="RunConfig field, e.g. latent_dim or k")
    s.add_argument("--values", required=True, help="comma-separated values")
    s.add_argument("--config", help="JSON file of RunConfig fields")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True, help="parent directory for the runs")
    s.add_argument("--objective", default="semformer")
    s.add_argument("--max-epochs", type=int, default=None)
    s.add_argument("--seed", type=int, default=None)
    return parser


# -- commands -------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    preset = dict(PRESETS[args.preset]) if args.preset else {}
    d = args.d if args.d is not None else preset.get("d")
    l = args.l if args.l is not None else preset.get("l")
    if d is None or l is None:
        raise SemlabError("gen-data needs --preset or both --d and --l")
    n_train = args.n_train if args.n_train is not None else preset.get("n_train", 200000)
    n_test = args.n_test if args.n_test is not None else preset.get("n_test", 20000)
    out = _out_path(args.out)
    manifest = build_dataset(d, l, n_train=n_train, n_test=n_test, seed=args.seed,
                             out_dir=out, value_range_n=args.n,
                             n_plan_tokens=args.n_plan_tokens)
    print(f"wrote {manifest['counts']['train']} train / {manifest['counts']['test']} test "
          f"samples to {out} (hash {manifest['config_hash']})")
    return 0


def _run_config_from_args(args, overrides=None) -> RunConfig:
    base = {}
    if getattr(args, "config", None):
        base.update(_load_config_file(args.config))
    for fname in RunConfig.__dataclass_fields__:
        if fname in ("data_dir", "out_dir", "dataset_hash"):
            continue
        value = getattr(args, fname, None)
        if value is not None:
            base[fname] = value
    if overrides:
        base.update(overrides)
    config = RunConfig.from_dict(base)
    if getattr(args, "data", None):
        config.data_dir = str(Path(args.data))
    if getattr(args, "out", None):
        config.out_dir = str(_out_path(args.out))
    return config


def cmd_train(args) -> int:
    log = None if args.quiet else (lambda rec: print(
        f"step {rec['step']:>7} epoch {rec['epoch']:>3} [{rec['split']}] "
        f"total={_fmt(rec['total'])} exact={_fmt(rec['exact_match'])} "
        f"first_node={_fmt(rec['first_node_acc'])}", flush=True))
    if args.resume:
        ckpt_path = Path(args.resume)
        if ckpt_path.is_dir():
            latest = (ckpt_path / "checkpoints" / "latest.txt").read_text().strip()
            ckpt_path = ckpt_path / "checkpoints" / latest
        trainer = Trainer.resume(ckpt_path, data_dir=args.data or None,
                                 out_dir=args.out or None)
    else:
        config = _run_config_from_args(args)
        if not config.data_dir:
            raise SemlabError("train needs --data (or --resume)")
        trainer = Trainer(config)
    summary = trainer.train(log=log)
    print(json.dumps(summary, indent=1))
    return 0


def _fmt(x):
    return "n/a" if x is None else f"{x:.4f}"


def _model_from_checkpoint(path):
    ckpt = load_checkpoint(path)
    config = RunConfig.from_dict(ckpt.run_config["config"])
    vocab = Vocabulary.from_dict(ckpt.run_config["vocab"])
    model, _ = build_objective_from_config(config, vocab.value_range_n)
    ckpt.restore_params(model.parameters())
    return ckpt, config, vocab, model


def _remap_sample_tokens(samples, file_n: int, model_vocab: Vocabulary):
    """Translate ids serialized under a different N into the model's vocab.

    Node values map to themselves; specials shift by the N difference. A
    sample using a node value the model cannot embed is dropped (counted by
    the caller via the returned skip total).
    """
    if file_n == model_vocab.value_range_n:
        return samples, 0
    file_vocab = Vocabulary(file_n, 0)
    shift = model_vocab.value_range_n - file_n
    kept, skipped = [], 0

    def remap(tokens):
        out = []
        for t in tokens:
            if t < file_n:
                if t >= model_vocab.value_range_n:
                    return None
                out.append(t)
            else:
                out.append(t + shift)
        return out

    for s in samples:
        prefix = remap(s.prefix_tokens)
        answer = remap(s.answer_tokens)
        if prefix is None or answer is None:
            skipped += 1
            continue
        s.prefix_tokens, s.answer_tokens = prefix, answer
        kept.append(s)
    return kept, skipped


def cmd_eval(args) -> int:
    ckpt, config, vocab, model = _model_from_checkpoint(args.checkpoint)
    samples = load_samples(args.test_file)
    if not samples:
        raise SemlabError(f"test file {args.test_file} is empty")
    file_ns = {s.value_range_n for s in samples}
    mismatch = len(file_ns) != 1 or next(iter(file_ns)) != vocab.value_range_n
    if mismatch and not args.ood:
        raise VocabMismatchError(
            f"test file node range {sorted(file_ns)} does not match the checkpoint's "
            f"{vocab.value_range_n}; pass --ood to evaluate anyway"
        )
    remap_skipped = 0
    if mismatch:
        samples, remap_skipped = _remap_sample_tokens(samples, max(file_ns), model.vocab)
    report = evaluate_model(model, samples, batch_size=args.batch_size)
    rescore = rescore_exact_match(report.decodes, samples, model.vocab)
    out = report.to_dict()
    out["n_skipped"] += remap_skipped
    out["rescored_exact_count"] = rescore
    out["checkpoint"] = str(args.checkpoint)
    out["config_hash"] = ckpt.run_config.get("config_hash")
    for key in ("exact_match", "first_node_acc", "continuation_acc"):
        print(f"{key}: {out[key]:.4f}")
    print(f"evaluated: {out['n_evaluated']}  skipped: {out['n_skipped']}")
    print("per_position_acc: " + " ".join(f"{a:.3f}" for a in out["per_position_acc"]))
    if args.report_out:
        path = _out_path(args.report_out)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(out, indent=1))
        print(f"report written to {path}")
    return 0


def _run_config_hash(run_dir: Path) -> str | None:
    path = run_dir / "run_config.json"
    if path.exists():
        return json.loads(path.read_text()).get("config_hash")
    return None


def cmd_export_curves(args) -> int:
    run_dir = Path(args.run)
    csv_text = export_curves_csv(run_dir)
    out = _out_path(args.out) if args.out else run_dir / "curves.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(csv_text)
    # keep the export traceable to its run without breaking the CSV schema
    meta = {"config_hash": _run_config_hash(run_dir), "source_run": str(run_dir)}
    out.with_suffix(out.suffix + ".meta.json").write_text(json.dumps(meta, indent=1))
    print(f"wrote {out}")
    return 0


def cmd_export_attention(args) -> int:
    _, config, vocab, model = _model_from_checkpoint(args.checkpoint)
    samples = load_samples(Path(args.data) / f"{args.split}.jsonl")
    if not 0 <= args.index < len(samples):
        raise SemlabError(f"--index {args.index} outside 0..{len(samples) - 1}")
    sample = samples[args.index]
    planned = build_planned_sequence(sample.prefix_tokens, sample.answer_tokens,
                                     model.k, model.vocab)
    records = attention_records(model.lm, planned.tokens,
                                model.vocab.surfaces(planned.tokens))
    text = "\n".join(json.dumps(r) for r in records) + "\n"
    if args.out:
        out = _out_path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text)
        print(f"wrote {out}")
    else:
        sys.stdout.write(text)
    return 0


def cmd_sweep(args) -> int:
    field = args.param
    if field not in RunConfig.__dataclass_fields__:
        raise SemlabError(f"unknown RunConfig field {field!r}")
    caster = type(RunConfig.__dataclass_fields__[field].default)
    values = [caster(v) for v in args.values.split(",")]
    parent = _out_path(args.out)
    summaries = {}
    for value in values:
        overrides = {field: value, "objective": args.objective}
        if args.max_epochs is not None:
            overrides["max_epochs"] = args.max_epochs
        if args.seed is not None:
            overrides["seed"] = args.seed
        config = _run_config_from_args(args, overrides)
        config.data_dir = str(Path(args.data))
        run_dir = parent / f"{field}_{value}"
        config.out_dir = str(run_dir)
        print(f"== sweep {field}={value} -> {run_dir}")
        trainer = Trainer(config)
        summaries[str(value)] = trainer.train(log=None)
        (run_dir / "curves.csv").write_text(export_curves_csv(run_dir))
    parent.mkdir(parents=True, exist_ok=True)
    (parent / "sweep_summary.json").write_text(json.dumps(
        {"param": field, "values": [str(v) for v in values], "runs": summaries}, indent=1))
    print(json.dumps({v: s["best_test_exact_match"] for v, s in summaries.items()}, indent=1))
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "export-curves": cmd_export_curves,
    "export-attention": cmd_export_attention,
    "sweep": cmd_sweep,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (SemlabError, OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
