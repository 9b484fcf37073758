"""Command-line entry points.

Every command reads an optional JSON config (``--config``); flags override
its fields. The effective config is echoed into each artifact written.
Failures print one JSON object to stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from . import __version__
from .datasets import movies, nested_bernoulli, nested_bernoulli_probs, read_jsonl, write_jsonl
from .errors import CorpusError, JsonSynthError
from .eval import average_reports, evaluate, length_histogram, write_columns_csv
from .model import ModelConfig
from .pipeline import fit, privacy_protocol
from .plotting import plot_column_shapes, plot_length_histograms, plot_loss_curves
from .sampler import GenerationSettings, generate, write_stats
from .tokenizer import DEFAULT_MAX_INDEX, DEFAULT_TAU, format_path
from .training import Artifacts, TrainConfig, load_checkpoint, write_history_csv

log = logging.getLogger("jsonsynth")

MODEL_FIELDS = {f.name for f in fields(ModelConfig)} - {"vocab_size"}
OPTIM_FIELDS = {"epochs", "lr", "batch_size", "grad_clip", "shuffle_keys", "use_masks", "betas", "eps", "log_every"}
GENERATION_FIELDS = {"n", "temperature", "max_tokens", "batch_size", "max_attempts"}


class UsageError(JsonSynthError):
    pass


@dataclass
class RunConfig:
    seed: int | None = None
    train: str | None = None
    valid: str | None = None
    test: str | None = None
    out: str | None = None
    tau: int = DEFAULT_TAU
    max_index: int = DEFAULT_MAX_INDEX
    model: dict = field(default_factory=dict)
    optim: dict = field(default_factory=dict)
    generation: dict = field(default_factory=dict)
    metrics: list = field(default_factory=lambda: ["fidelity", "utility", "detection"])
    target: str | None = None
    workers: int = 0
    best_by_valid: bool = False

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise UsageError(f"unknown config fields: {sorted(unknown)}")
        cfg = cls(**d)
        for name, allowed in (("model", MODEL_FIELDS), ("optim", OPTIM_FIELDS), ("generation", GENERATION_FIELDS)):
            bad = set(getattr(cfg, name)) - allowed
            if bad:
                raise UsageError(f"unknown {name} fields: {sorted(bad)}")
        return cfg

    def to_dict(self) -> dict:
        return asdict(self)

    def require(self, *names: str) -> None:
        for name in names:
            if getattr(self, name) is None:
                raise UsageError(f"missing required setting {name!r}")

    def train_config(self) -> TrainConfig:
        opts = dict(self.optim)
        if "betas" in opts:
            opts["betas"] = tuple(opts["betas"])
        return TrainConfig(seed=self.seed, workers=self.workers, **opts)


def _load_config(args) -> RunConfig:
    base = {}
    if getattr(args, "config", None):
        try:
            base = json.loads(Path(args.config).read_text())
        except OSError as exc:
            raise CorpusError(f"cannot read config {args.config}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise UsageError(f"config {args.config} is not valid JSON: {exc.msg} (line {exc.lineno})") from None
    cfg = RunConfig.from_dict(base)
    for name in ("seed", "train", "valid", "test", "out", "tau", "target", "workers"):
        v = getattr(args, name, None)
        if v is not None:
            setattr(cfg, name, v)
    if getattr(args, "best_by_valid", False):
        cfg.best_by_valid = True
    for flag, key in (
        ("d_model", "d_model"),
        ("layers", "n_layers"),
        ("heads", "n_heads"),
        ("d_ff", "d_ff"),
        ("components", "n_components"),
        ("dropout", "dropout"),
        ("attn_dropout", "attn_dropout"),
        ("position_encoding", "position_encoding"),
    ):
        v = getattr(args, flag, None)
        if v is not None:
            cfg.model[key] = v
    for flag in ("epochs", "lr", "batch_size", "grad_clip"):
        v = getattr(args, flag, None)
        if v is not None:
            cfg.optim[flag] = v
    if getattr(args, "no_shuffle", False):
        cfg.optim["shuffle_keys"] = False
    if getattr(args, "no_masks", False):
        cfg.optim["use_masks"] = False
    for flag in ("n", "temperature", "max_tokens", "gen_batch_size"):
        v = getattr(args, flag, None)
        if v is not None:
            cfg.generation["batch_size" if flag == "gen_batch_size" else flag] = v
    if getattr(args, "metrics", None):
        cfg.metrics = list(args.metrics)
    return cfg


def _check_exists(*paths) -> None:
    for p in paths:
        if p is not None and p != "-" and not Path(p).exists():
            raise CorpusError(f"no such file: {p}")


def _out_dir(cfg: RunConfig) -> Path:
    cfg.require("out")
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=False) + "\n")


def cmd_derive(args) -> int:
    cfg = _load_config(args)
    cfg.require("train")
    _check_exists(cfg.train)
    out = _out_dir(cfg)
    records = read_jsonl(cfg.train)
    art = Artifacts.derive(records, tau=cfg.tau, max_index=cfg.max_index)
    _write_json(out / "schema.json", art.schema.to_json_schema())
    _write_json(out / "schema_scaled.json", art.scaled_schema.to_json_schema())
    _write_json(out / "vocab.json", art.vocab.to_dict())
    _write_json(out / "scalers.json", art.scalers.to_dict())
    summary = {
        "n_records": len(records),
        **art.summary(),
        "scaled_paths": [format_path(p) for p in art.scalers.by_path],
    }
    _write_json(out / "summary.json", {"config": cfg.to_dict(), "summary": summary})
    print(json.dumps(summary))
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args)
    cfg.require("seed", "train")
    _check_exists(cfg.train, cfg.valid)
    out = _out_dir(cfg)
    records = read_jsonl(cfg.train)
    valid = read_jsonl(cfg.valid) if cfg.valid else None
    result = fit(
        records,
        cfg.model,
        cfg.train_config(),
        valid_records=valid,
        tau=cfg.tau,
        max_index=cfg.max_index,
        keep_best=cfg.best_by_valid,
        extra={"config": cfg.to_dict()},
    )
    result.checkpoint.save(out / "checkpoint.zip")
    if result.best is not None:
        result.best.save(out / "best.zip")
    write_history_csv(result.history, out / "history.csv")
    plot_loss_curves({"run": result.history}, out / "loss.png")
    last = result.history[-1] if result.history else None
    summary = {
        "epochs": len(result.history),
        "final_train_loss": last.train_loss if last else None,
        "final_valid_loss": last.valid_loss if last else None,
        "n_parameters": result.checkpoint.model.n_parameters(),
        "checkpoint": str(out / "checkpoint.zip"),
    }
    _write_json(out / "train.json", {"config": cfg.to_dict(), "summary": summary})
    print(json.dumps(summary))
    return 0


def cmd_generate(args) -> int:
    cfg = _load_config(args)
    cfg.require("seed")
    _check_exists(args.checkpoint)
    ckpt = load_checkpoint(args.checkpoint)
    gen = dict(cfg.generation)
    if "n" not in gen:
        raise UsageError("missing required setting 'n'")
    settings = GenerationSettings(seed=cfg.seed, **gen)
    records, stats = generate(ckpt, settings)
    target = args.output
    if target in (None, "-"):
        write_jsonl_stream(records, sys.stdout)
        stats_path = args.stats
    else:
        Path(target).parent.mkdir(parents=True, exist_ok=True)
        write_jsonl(records, target)
        stats_path = args.stats or f"{target}.stats.json"
    if stats_path:
        write_stats(stats, stats_path, {"config": cfg.to_dict(), "checkpoint": str(args.checkpoint)})
    log.info("generated %d records (%d resampled)", stats.accepted, stats.resampled)
    return 0


def write_jsonl_stream(records, stream) -> None:
    for r in records:
        stream.write(json.dumps(r, ensure_ascii=False))
        stream.write("\n")
    stream.flush()


def _safe_name(path: str) -> str:
    return "".join(c if c.isalnum() or c in "-_" else "_" for c in path)


def cmd_evaluate(args) -> int:
    cfg = _load_config(args)
    cfg.require("seed")
    _check_exists(args.real, cfg.test, *args.synth)
    out = _out_dir(cfg)
    real = read_jsonl(args.real)
    test = read_jsonl(cfg.test) if cfg.test else None
    if "utility" in cfg.metrics and (test is None or cfg.target is None):
        log.warning("utility skipped: needs --test and --target")
    reports = []
    for i, path in enumerate(args.synth):
        synth = read_jsonl(path)
        reports.append(
            evaluate(
                real,
                synth,
                test=test,
                target=cfg.target,
                seed=cfg.seed + i,
                array_paths=args.arrays or (),
                metrics=cfg.metrics,
            )
        )
    doc = {"config": cfg.to_dict(), "real": args.real, "synth": list(args.synth)}
    if len(reports) == 1:
        doc["report"] = reports[0].to_dict()
    else:
        doc["replicates"] = [r.to_dict(include_columns=False) for r in reports]
        doc["summary"] = average_reports(reports)
    _write_json(out / "report.json", doc)
    first = reports[0]
    if first.columns:
        write_columns_csv(first.columns, out / "columns.csv")
        plot_column_shapes(first.columns, out / "column_shapes.png")
    if args.arrays:
        synth0 = read_jsonl(args.synth[0])
        rows = ["path,wasserstein,wasserstein_present_only"]
        for p in args.arrays:
            a = first.arrays[p]
            rows.append(f"{p},{a['wasserstein']:.6f},{a['wasserstein_present_only']:.6f}")
            plot_length_histograms(
                length_histogram(real, p), length_histogram(synth0, p), out / f"lengths_{_safe_name(p)}.png", title=p
            )
        (out / "arrays.csv").write_text("\n".join(rows) + "\n")
    scores = first.primary_scores() if len(reports) == 1 else {k: v["mean"] for k, v in doc["summary"].items()}
    print(json.dumps(scores))
    return 0


def cmd_privacy(args) -> int:
    cfg = _load_config(args)
    cfg.require("seed", "train")
    _check_exists(cfg.train)
    out = _out_dir(cfg)
    records = read_jsonl(cfg.train)
    run = privacy_protocol(
        records,
        cfg.model,
        cfg.train_config(),
        seed=cfg.seed,
        tau=cfg.tau,
        copy_train=args.copy_train,
    )
    _write_json(out / "privacy.json", {"config": cfg.to_dict(), "privacy": run.result})
    if run.history:
        write_history_csv(run.history, out / "history.csv")
        plot_loss_curves({"half A": run.history}, out / "loss.png")
    print(json.dumps(run.result))
    return 0


def cmd_synth_fixtures(args) -> int:
    cfg = _load_config(args)
    cfg.require("seed")
    out = _out_dir(cfg)
    n = args.fixture_n
    write_jsonl(nested_bernoulli(n, seed=cfg.seed), out / "nested_bernoulli.jsonl")
    write_jsonl(movies(), out / "movies.jsonl")
    probs = [{"path": ".".join(p), "p": q} for p, q in nested_bernoulli_probs().items()]
    _write_json(out / "nested_bernoulli_probs.json", {"config": cfg.to_dict(), "n": n, "paths": probs})
    print(json.dumps({"nested_bernoulli": n, "movies": len(movies())}))
    return 0


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _common(p, out=True):
    p.add_argument("--config", help="JSON config file; flags override its fields")
    p.add_argument("--seed", type=int)
    if out:
        p.add_argument("--out", help="output directory")
    p.add_argument("--workers", type=int, help="data-loading worker processes")


def _model_flags(p):
    g = p.add_argument_group("model")
    g.add_argument("--d-model", type=int)
    g.add_argument("--layers", type=int)
    g.add_argument("--heads", type=int)
    g.add_argument("--d-ff", type=int)
    g.add_argument("--components", type=int)
    g.add_argument("--dropout", type=float)
    g.add_argument("--attn-dropout", type=float)
    g.add_argument("--position-encoding", choices=["kvpe", "sequential"])
    g = p.add_argument_group("optimization")
    g.add_argument("--epochs", type=int)
    g.add_argument("--lr", type=float)
    g.add_argument("--batch-size", type=int)
    g.add_argument("--grad-clip", type=float)
    g.add_argument("--no-shuffle", action="store_true", help="keep corpus key order")
    g.add_argument("--no-masks", action="store_true", help="train without grammar/schema masks")
    p.add_argument("--tau", type=int, help="distinct-value threshold for continuous numerics")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="jsonsynth", description="Train and evaluate generators of JSON records.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("derive", help="derive schema, vocabulary and scalers")
    _common(p)
    p.add_argument("--train")
    p.add_argument("--tau", type=int)
    p.set_defaults(func=cmd_derive)

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    _common(p)
    p.add_argument("--train")
    p.add_argument("--valid")
    p.add_argument("--best-by-valid", action="store_true", help="also keep the lowest-validation-loss checkpoint")
    _model_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="sample records from a checkpoint")
    _common(p, out=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("-n", "--n", type=int)
    p.add_argument("--temperature", type=float)
    p.add_argument("--max-tokens", type=int)
    p.add_argument("--gen-batch-size", type=int)
    p.add_argument("-o", "--output", help="JSONL file, '-' for stdout (default)")
    p.add_argument("--stats", help="stats sidecar path (default: OUTPUT.stats.json)")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("evaluate", help="score synthetic records against real ones")
    _common(p)
    p.add_argument("--real", required=True, help="real training corpus")
    p.add_argument("--synth", required=True, nargs="+", help="one or more replicate sample sets")
    p.add_argument("--test", help="held-out real corpus for utility")
    p.add_argument("--target", help="categorical target column for utility")
    p.add_argument("--arrays", nargs="*", help="array paths for length Wasserstein")
    p.add_argument("--metrics", nargs="+", choices=["fidelity", "utility", "detection"])
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("privacy", help="50/50 split, train on one half, DCR")
    _common(p)
    p.add_argument("--train")
    p.add_argument("--copy-train", action="store_true", help="use half A as the synthetic set (testing)")
    _model_flags(p)
    p.set_defaults(func=cmd_privacy)

    p = sub.add_parser("synth-fixtures", help="write the nested Bernoulli and movie corpora")
    _common(p)
    p.add_argument("--n", dest="fixture_n", type=int, default=5000, help="nested Bernoulli record count")
    p.set_defaults(func=cmd_synth_fixtures)
    return parser


def _error(exc: BaseException, code: int) -> int:
    sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": str(exc)}) + "\n")
    return code


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        return _error(exc, 2)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except UsageError as exc:
        return _error(exc, 2)
    except (JsonSynthError, ValueError, KeyError, OSError, FloatingPointError) as exc:
        return _error(exc, 1)


if __name__ == "__main__":
    sys.exit(main())
