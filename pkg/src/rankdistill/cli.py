"""Command-line entry point: ``python -m rankdistill <command> ...``.

Every command writes its artifacts plus ``manifest.json`` into ``--out``.
Config precedence, lowest first: built-in defaults, ``--config`` JSON file,
``RANKDISTILL_<KEY>`` environment variables, explicit flags.
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .dataset import DataError, InteractionDataset, apply_split, leave_one_out_split, load_interactions, read_split, write_split
from .distill import CorrectionSamples
from .evaluation import MetricReport, avg_rank_discrepancy, evaluate, paired_ttest, write_reports_csv
from .models import NumericalError, load_checkpoint, save_checkpoint
from .ranking import rank_candidates, write_rankings
from .synth import synthetic_interactions
from .trainer import ABLATIONS, METHODS, TrainConfig, distill_student, run_ablation, train_teacher

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3
ENV_PREFIX = "RANKDISTILL_"
MANIFEST = "manifest.json"

log = logging.getLogger("rankdistill")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------- config


def _coerce(name: str, raw, default):
    """Convert an env/JSON value to the type of the field's default."""
    if isinstance(raw, str):
        text = raw.strip()
        if text.lower() in ("none", "null"):
            return None
        if isinstance(default, bool):
            if text.lower() in ("1", "true", "yes"):
                return True
            if text.lower() in ("0", "false", "no"):
                return False
            raise UsageError(f"config key {name!r}: expected a boolean, got {raw!r}")
        try:
            raw = json.loads(text)
        except json.JSONDecodeError:
            return text
    if isinstance(default, bool) or isinstance(default, str):
        return raw
    if isinstance(default, int) and isinstance(raw, (int, float)) and float(raw).is_integer():
        return int(raw)
    if isinstance(default, float) and isinstance(raw, (int, float)):
        return float(raw)
    return raw


def resolve_config(path: str | None, env: dict | None = None, **flags) -> TrainConfig:
    env = os.environ if env is None else env
    defaults = TrainConfig()
    values: dict = {}
    if path:
        try:
            with open(path, encoding="utf-8") as fh:
                loaded = json.load(fh)
        except FileNotFoundError:
            raise DataError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(loaded, dict):
            raise UsageError(f"{path}: expected a JSON object of config keys")
        values.update(loaded)
    names = {f.name for f in dataclasses.fields(TrainConfig)}
    for key, raw in env.items():
        if key.startswith(ENV_PREFIX):
            name = key[len(ENV_PREFIX):].lower()
            if name not in names:
                raise UsageError(f"unknown config key {name!r} (from environment variable {key})")
            values[name] = raw
    values.update({k: v for k, v in flags.items() if v is not None})
    unknown = sorted(set(values) - names)
    if unknown:
        raise UsageError(f"unknown config key {unknown[0]!r}")
    values = {k: _coerce(k, v, getattr(defaults, k)) for k, v in values.items()}
    try:
        return TrainConfig(**values).validate()
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid config: {exc}") from None


# ---------------------------------------------------------------- io helpers


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


def _require(path: str | None, what: str) -> Path:
    if not path:
        raise UsageError(f"{what} is required")
    p = Path(path)
    if not p.exists():
        raise DataError(f"{what} not found: {path}")
    return p


def _load_dataset(args, need_split: bool = True) -> InteractionDataset:
    data = _require(args.data, "--data")
    ds = load_interactions(data)
    split = args.split or (str(data.parent / "split.tsv") if need_split else None)
    if split is None:
        return ds
    if not Path(split).exists():
        if need_split:
            raise DataError(f"split sidecar not found: {split} (run the split command first)")
        return ds
    return apply_split(ds, read_split(split))


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def _write_log(path: Path, records: list[dict]) -> None:
    # wall-clock times go to the manifest so the log itself is reproducible
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps({k: v for k, v in r.items() if k != "wall_time"}, sort_keys=True) + "\n")


class Run:
    """Collects artifacts and timings for one command and writes the manifest."""

    def __init__(self, args, command: str):
        self.command = command
        self.out = Path(args.out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.args = {k: v for k, v in vars(args).items() if k not in ("func", "out", "verbose")}
        self.started = time.time()
        self.t0 = time.perf_counter()
        self.artifacts: dict[str, str] = {}
        self.info: dict = {}

    def path(self, name: str) -> Path:
        return self.out / name

    def add(self, *names: str) -> None:
        for n in names:
            self.artifacts[n] = ""

    def finish(self, config: TrainConfig | None = None, dataset: InteractionDataset | None = None, seeds=()) -> dict:
        if config is not None:
            _write_json(self.path("config.json"), config.to_dict())
            self.add("config.json")
        manifest = {
            "command": self.command,
            "args": self.args,
            "config": config.to_dict() if config is not None else None,
            "dataset_fingerprint": dataset.fingerprint() if dataset is not None else None,
            "seeds": list(seeds),
            "artifacts": {n: _sha256(self.path(n)) for n in sorted(self.artifacts)},
            "version": __version__,
            "timings": {"started": self.started, "wall_seconds": time.perf_counter() - self.t0},
            **self.info,
        }
        _write_json(self.path(MANIFEST), manifest)
        return manifest


# ---------------------------------------------------------------- dumps


def _dump_samples(path: Path, dataset: InteractionDataset, samples: list[CorrectionSamples]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            anchor_ids = dataset.user_ids if s.side == "user" else dataset.item_ids
            cand_ids = dataset.item_ids if s.side == "user" else dataset.user_ids
            mode = "deterministic" if s.deterministic else "sampled"
            fh.write(f"# side={s.side} selection={mode} epoch={s.epoch}\n")
            for a in range(len(s.under)):
                under = ",".join(cand_ids[c] for c in s.under[a] if c >= 0)
                over = ",".join(cand_ids[c] for c in s.over[a] if c >= 0)
                fh.write(f"{anchor_ids[a]}\tunder={under}\tover={over}\n")


def _dump_rankings(path: Path, params, dataset: InteractionDataset, limit: int) -> None:
    lists = []
    for u in range(dataset.num_users):
        cand = np.setdiff1d(np.arange(dataset.num_items), dataset.train[u])
        if len(cand):
            lists.append(rank_candidates(params, u, "user", cand))
    write_rankings(path, lists, ids=dataset.item_ids, anchor_ids=dataset.user_ids, limit=limit)


# ---------------------------------------------------------------- commands


def cmd_synth(args) -> int:
    run = Run(args, "synth")
    pairs = synthetic_interactions(n_users=args.users, n_items=args.items, rank=args.rank,
                                   per_user=args.per_user, seed=args.seed)
    target = run.path("interactions.tsv")
    with open(target, "w", encoding="utf-8") as fh:
        fh.write("# user\titem\n")
        fh.writelines(f"{u}\t{i}\n" for u, i in pairs)
    run.add("interactions.tsv")
    run.finish(dataset=load_interactions(target), seeds=[args.seed])
    return EXIT_OK


def cmd_ingest(args) -> int:
    source = _require(args.data, "--data")
    ds = load_interactions(source, delimiter=args.delimiter, user_col=args.user_col, item_col=args.item_col,
                           min_user_count=args.min_user_count, min_item_count=args.min_item_count)
    run = Run(args, "ingest")
    target = run.path("interactions.tsv")
    users, items = ds.train_pairs()
    with open(target, "w", encoding="utf-8") as fh:
        fh.write("# user\titem\n")
        fh.writelines(f"{ds.user_ids[u]}\t{ds.item_ids[i]}\n" for u, i in zip(users, items))
    run.add("interactions.tsv")
    run.info["counts"] = {"users": ds.num_users, "items": ds.num_items, "interactions": ds.num_train}
    run.finish(dataset=load_interactions(target))
    return EXIT_OK


def cmd_split(args) -> int:
    ds = load_interactions(_require(args.data, "--data"))
    split = leave_one_out_split(ds, seed=args.seed, min_interactions=args.min_interactions)
    run = Run(args, "split")
    write_split(split, run.path("split.tsv"))
    run.add("split.tsv")
    run.finish(dataset=split, seeds=[args.seed])
    return EXIT_OK


def _config(args, **extra) -> TrainConfig:
    return resolve_config(args.config, seed=args.seed, **extra)


def cmd_train_teacher(args) -> int:
    cfg = _config(args)
    ds = _load_dataset(args)
    run = Run(args, "train-teacher")
    teacher, records = train_teacher(ds, cfg)
    save_checkpoint(run.path("teacher.npz"), teacher, meta={"role": "teacher", "dataset": ds.fingerprint()})
    _write_log(run.path("train_log.jsonl"), records)
    run.add("teacher.npz", "train_log.jsonl")
    run.finish(cfg, ds, [cfg.seed])
    return EXIT_OK


def cmd_distill(args) -> int:
    cfg = _config(args, method=args.method, ablation=args.ablation)
    ds = _load_dataset(args)
    teacher, _, _ = load_checkpoint(_require(args.teacher, "--teacher"), ds)
    run = Run(args, "distill")
    last: dict[str, CorrectionSamples] = {}

    def keep_samples(state):
        for side in ("user", "item"):
            s = getattr(state, f"{side}_samples")
            if s is not None:
                last[side] = s

    student, records = distill_student(ds, teacher, cfg, callback=keep_samples)
    save_checkpoint(run.path("student.npz"), student,
                    meta={"role": "student", "method": cfg.method, "ablation": cfg.ablation, "dataset": ds.fingerprint()})
    _write_log(run.path("train_log.jsonl"), records)
    run.add("student.npz", "train_log.jsonl")
    if args.dump_samples:
        _dump_samples(run.path("samples.txt"), ds, [last[k] for k in ("user", "item") if k in last])
        run.add("samples.txt")
    if args.dump_rankings:
        _dump_rankings(run.path("rankings.txt"), student, ds, args.dump_rankings)
        run.add("rankings.txt")
    run.finish(cfg, ds, [cfg.seed])
    return EXIT_OK


def _parse_ns(text: str) -> tuple[int, ...]:
    try:
        ns = tuple(int(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise UsageError(f"--metric-n: expected comma-separated integers, got {text!r}") from None
    if not ns or min(ns) < 1:
        raise UsageError("--metric-n: values must be >= 1")
    return ns


def cmd_evaluate(args) -> int:
    ns = _parse_ns(args.metric_n)
    ds = _load_dataset(args)
    teacher = load_checkpoint(_require(args.teacher, "--teacher"), ds)[0] if args.teacher else None
    report = None
    for ckpt in args.checkpoint:
        params, _, meta = load_checkpoint(_require(ckpt, "--checkpoint"), ds)
        r = evaluate(params, ds, args.eval_split, ns=ns, method=args.name or meta.get("method", meta.get("role", "model")),
                     seed=params.seed)
        report = r if report is None else report.merge(r)
        if teacher is not None:
            for side in ("user", "item"):
                key = f"discrepancy_{side}"
                d = avg_rank_discrepancy(teacher, params, ds, side, k=args.discrepancy_k)
                report.extra.setdefault(f"{key}_per_seed", []).append(d)
    if args.teacher:
        for side in ("user", "item"):
            report.extra[f"discrepancy_{side}"] = float(np.mean(report.extra[f"discrepancy_{side}_per_seed"]))
    if args.compare:
        other = MetricReport.load(_require(args.compare, "--compare"))
        if other.split_fingerprint != report.split_fingerprint:
            raise DataError("--compare report was computed on a different split (fingerprint mismatch)")
        for metric in report.metrics:
            res = paired_ttest(report, other, metric)
            report.extra[f"ttest_{metric}"] = {"statistic": res.statistic, "pvalue": res.pvalue, "n": res.n,
                                               "against": other.method}
    run = Run(args, "evaluate")
    report.save(run.path("report.json"))
    write_reports_csv(run.path("report.csv"), [report])
    run.add("report.json", "report.csv")
    run.finish(dataset=ds, seeds=report.seeds)
    return EXIT_OK


def _ablation_job(job):
    data, split, teacher_path, cfg_dict, mode, out = job
    ds = apply_split(load_interactions(data), read_split(split))
    teacher, _, _ = load_checkpoint(teacher_path, ds)
    cfg = TrainConfig.from_dict(cfg_dict)
    report, student, records = run_ablation(ds, teacher, cfg, mode)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / "student.npz", student, meta={"role": "student", "method": "dcd", "ablation": mode})
    _write_log(out / "train_log.jsonl", records)
    report.extra["discrepancy_user"] = avg_rank_discrepancy(teacher, student, ds, "user")
    report.extra["discrepancy_item"] = avg_rank_discrepancy(teacher, student, ds, "item")
    return mode, cfg.seed, report.to_dict()


def cmd_ablate(args) -> int:
    cfg = _config(args)
    ds = _load_dataset(args)
    teacher_path = _require(args.teacher, "--teacher")
    load_checkpoint(teacher_path, ds)
    modes = args.modes.split(",") if args.modes else list(ABLATIONS)
    bad = [m for m in modes if m not in ABLATIONS]
    if bad:
        raise UsageError(f"unknown ablation mode {bad[0]!r}; expected one of {ABLATIONS}")
    seeds = [cfg.seed + k for k in range(args.runs)]
    split = args.split or str(Path(args.data).parent / "split.tsv")
    run = Run(args, "ablate")
    jobs = [(args.data, split, str(teacher_path), cfg.replace(seed=s).to_dict(), m, str(run.path(f"{m}/seed{s}")))
            for m in modes for s in seeds]
    if args.workers > 1:
        with ProcessPoolExecutor(args.workers) as pool:
            results = list(pool.map(_ablation_job, jobs))
    else:
        results = [_ablation_job(j) for j in jobs]
    reports: dict[str, MetricReport] = {}
    for mode, seed, d in results:
        r = MetricReport.from_dict(d)
        run.add(f"{mode}/seed{seed}/student.npz", f"{mode}/seed{seed}/train_log.jsonl")
        if mode in reports:
            merged = reports[mode].merge(r)
            for k in ("discrepancy_user", "discrepancy_item"):
                merged.extra[f"{k}_per_seed"] = reports[mode].extra[f"{k}_per_seed"] + [r.extra[k]]
            reports[mode] = merged
        else:
            r.extra = {f"{k}_per_seed": [r.extra[k]] for k in ("discrepancy_user", "discrepancy_item")}
            reports[mode] = r
    rows = []
    for mode in modes:
        r = reports[mode]
        for k in ("discrepancy_user", "discrepancy_item"):
            r.extra[k] = float(np.mean(r.extra[f"{k}_per_seed"]))
        if mode != "full" and "full" in reports and len(r.seeds) * len(r.users) >= 2:
            res = paired_ttest(reports["full"], r, "H@5")
            r.extra["pvalue_vs_full_H@5"] = res.pvalue
        r.save(run.path(f"report_{mode}.json"))
        run.add(f"report_{mode}.json")
        rows.append((mode, r.aggregate(), r.extra))
    write_reports_csv(run.path("ablation.csv"), [reports[m] for m in modes])
    metrics = list(reports[modes[0]].metrics)
    with open(run.path("ablation.txt"), "w", encoding="utf-8") as fh:
        fh.write("mode".ljust(16) + "".join(m.rjust(9) for m in metrics) + "  disc_user  disc_item\n")
        for mode, agg, extra in rows:
            fh.write(mode.ljust(16) + "".join(f"{agg[m]:9.4f}" for m in metrics)
                     + f"{extra['discrepancy_user']:11.3f}{extra['discrepancy_item']:11.3f}\n")
    run.add("ablation.csv", "ablation.txt")
    sys.stdout.write(run.path("ablation.txt").read_text())
    run.finish(cfg, ds, seeds)
    return EXIT_OK


def cmd_replay(args) -> int:
    """Re-run the command recorded in a manifest with its config snapshot."""
    manifest = json.loads(_require(args.manifest, "manifest").read_text())
    recorded = dict(manifest["args"])
    recorded["out"] = args.out
    argv = [manifest["command"]]
    config_path = None
    if manifest.get("config") is not None:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        config_path = Path(args.out) / "replay_config.json"
        _write_json(config_path, manifest["config"])
        recorded["config"] = str(config_path)
    parser = build_parser()
    ns = parser.parse_args(argv + ["--out", args.out])
    for k, v in recorded.items():
        setattr(ns, k, v)
    # the snapshot already contains any environment overrides
    saved = {k: os.environ.pop(k) for k in list(os.environ) if k.startswith(ENV_PREFIX)}
    try:
        code = ns.func(ns)
    finally:
        os.environ.update(saved)
        if config_path is not None:
            config_path.unlink()
    return code


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="rankdistill", description="Ranking distillation for top-N recommenders.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, data=True, config=False, seed=True):
        sp.add_argument("--out", required=True, help="output directory")
        if data:
            sp.add_argument("--data", help="interaction file (user<TAB>item per line)")
            sp.add_argument("--split", help="split sidecar (default: split.tsv next to --data)")
        if config:
            sp.add_argument("--config", help="JSON object of training config keys")
        if seed:
            sp.add_argument("--seed", type=int, default=None if config else 0)

    s = sub.add_parser("synth", help="generate the synthetic low-rank dataset")
    common(s, data=False)
    s.add_argument("--users", type=int, default=300)
    s.add_argument("--items", type=int, default=500)
    s.add_argument("--rank", type=int, default=8)
    s.add_argument("--per-user", type=float, default=20.0)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("ingest", help="normalise a raw interaction log")
    common(s, seed=False)
    s.add_argument("--delimiter")
    s.add_argument("--user-col", type=int, default=0)
    s.add_argument("--item-col", type=int, default=1)
    s.add_argument("--min-user-count", type=int, default=1)
    s.add_argument("--min-item-count", type=int, default=1)
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("split", help="leave-one-out validation/test split")
    common(s)
    s.add_argument("--min-interactions", type=int, default=3)
    s.set_defaults(func=cmd_split)

    s = sub.add_parser("train-teacher", help="train the large model")
    common(s, config=True)
    s.set_defaults(func=cmd_train_teacher)

    s = sub.add_parser("distill", help="train a student from a teacher checkpoint")
    common(s, config=True)
    s.add_argument("--teacher", help="teacher checkpoint")
    s.add_argument("--method", choices=METHODS)
    s.add_argument("--ablation", choices=ABLATIONS)
    s.add_argument("--dump-samples", action="store_true", help="write the last correction samples")
    s.add_argument("--dump-rankings", type=int, metavar="N", help="write each user's top-N list")
    s.set_defaults(func=cmd_distill)

    s = sub.add_parser("evaluate", help="leave-one-out metrics for one or more checkpoints")
    common(s, seed=False)
    s.add_argument("--checkpoint", nargs="+", required=True, help="checkpoints of the same method, one per seed")
    s.add_argument("--teacher", help="teacher checkpoint for rank-discrepancy diagnostics")
    s.add_argument("--compare", help="report.json to paired-t-test against")
    s.add_argument("--metric-n", default="5,10")
    s.add_argument("--eval-split", choices=("test", "valid"), default="test")
    s.add_argument("--discrepancy-k", type=int, default=50)
    s.add_argument("--name", help="method label stored in the report")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("ablate", help="run every ablation mode and tabulate")
    common(s, config=True)
    s.add_argument("--teacher", help="teacher checkpoint")
    s.add_argument("--runs", type=int, default=1, help="seeds seed..seed+runs-1")
    s.add_argument("--modes", help="comma-separated subset of modes")
    s.add_argument("--workers", type=int, default=1)
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("replay", help="re-run a command from its manifest")
    s.add_argument("manifest")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_replay)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (DataError, ValueError, KeyError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
