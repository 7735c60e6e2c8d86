"""Command-line entry point.

Each phase reads the previous phase's files from the output directory:
record -> generate -> golden -> run -> classify -> report.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import campaign as cp
from . import propagation, report
from .classifier import GoldenBaseline, classify
from .config import Config
from .injector import ConfigError, InjectionSpec
from .workloads import WORKLOADS, ExperimentRecord, Run, experiment_seed

log = logging.getLogger("mutiny")

EXIT_OK, EXIT_USAGE, EXIT_MISSING, EXIT_INTERNAL = 0, 1, 2, 3


class UsageError(Exception):
    pass


class MissingPrerequisite(Exception):
    def __init__(self, path, phase):
        super().__init__(f"missing {path}: run `mutiny {phase}` first")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _dump(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _need(path: Path, phase: str) -> Path:
    if not path.exists():
        raise MissingPrerequisite(path, phase)
    return path


def _workloads(args) -> list[str]:
    return args.workload or list(WORKLOADS)


def _load_cfg(args) -> Config:
    if args.config:
        return Config.from_json(_need(Path(args.config), "--config <file>").read_text())
    return Config()


# -- commands ------------------------------------------------------------------------------

def cmd_record(args, cfg, out: Path):
    for w in _workloads(args):
        cat = cp.record_fields(w, cfg=cfg)
        _dump(out / f"catalog-{w}.json", cat.to_json() + "\n")
        print(f"{w}: {len(cat.fields)} fields")


def cmd_generate(args, cfg, out: Path):
    params = cp.CampaignParams.from_config(cfg, seed=args.seed)
    entries = []
    for w in _workloads(args):
        cat = cp.FieldCatalog.from_dict(json.loads(_need(out / f"catalog-{w}.json", "record").read_text()))
        got = cp.generate_campaign(cat, params)
        if not got:
            log.warning("%s: empty field catalog, no experiments generated", w)
        entries += got
    cp.write_campaign(entries, out / "campaign.jsonl")
    print(f"{len(entries)} experiments")


def cmd_golden(args, cfg, out: Path):
    for w in _workloads(args):
        base, recs = cp.collect_golden(w, args.runs, args.seed, cfg, jobs=args.jobs)
        _dump(out / f"golden-{w}.json", json.dumps(base.to_dict(), sort_keys=True) + "\n")
        for warn in base.warnings:
            log.warning("%s: %s", w, warn)
        print(f"{w}: {len(recs)} golden runs")


def _campaign(out: Path) -> dict[str, tuple[str, InjectionSpec]]:
    entries = cp.read_campaign(_need(out / "campaign.jsonl", "generate"))
    return {cp.experiment_id(w, s): (w, s) for w, s in entries}


def _run_and_write(eid: str, workload: str, spec, cfg: Config, seed: int, dest: Path) -> ExperimentRecord:
    run = Run(workload, experiment_seed(seed, eid), spec, cfg, experiment_id=eid)
    rec = run.execute()
    _dump(dest / "records" / f"{eid}.json", rec.to_json() + "\n")
    _dump(dest / "traces" / f"{eid}.jsonl", run.cluster.kernel.trace.to_jsonl())
    return rec


def _job(a):
    _run_and_write(*a)


def cmd_run(args, cfg, out: Path):
    camp = _campaign(out)
    if args.experiment_id:
        if args.experiment_id not in camp:
            raise UsageError(f"unknown experiment id {args.experiment_id!r}")
        ids = [args.experiment_id]
    else:
        ids = list(camp)
        if args.limit is not None:
            ids = ids[:args.limit]
    jobs = [(i, camp[i][0], camp[i][1], cfg, args.seed, out) for i in ids]
    if args.jobs > 1 and len(ids) > 1:
        # every experiment writes its own files, so completion order does not matter
        with ProcessPoolExecutor(args.jobs) as ex:
            list(ex.map(_job, jobs, chunksize=4))
    else:
        for j in jobs:
            _job(j)
    print(f"{len(ids)} experiments run")


def _records(out: Path) -> list[Path]:
    d = out / "records"
    files = sorted(d.glob("*.json")) if d.exists() else []
    if not files:
        raise MissingPrerequisite(d, "run")
    return files


def _baselines(out: Path, workloads) -> dict:
    return {w: GoldenBaseline.from_dict(json.loads(_need(out / f"golden-{w}.json", "golden").read_text()))
            for w in workloads}


def cmd_classify(args, cfg, out: Path):
    files = _records(out)
    recs = [ExperimentRecord.from_dict(json.loads(f.read_text())) for f in files]
    bases = _baselines(out, sorted({r.workload for r in recs}))
    for f, r in zip(files, recs):
        r.label = classify(r, bases[r.workload], cfg).to_dict()
        f.write_text(r.to_json() + "\n")
    print(f"{len(recs)} experiments classified")


def cmd_report(args, cfg, out: Path):
    recs = [json.loads(f.read_text()) for f in _records(out)]
    if any(not r.get("label") for r in recs):
        raise MissingPrerequisite(out / "records", "classify")
    rep = report.build_report(recs)
    _dump(out / "report.json", report.render_json(rep) + "\n")
    _dump(out / "report.csv", report.render_csv(rep))
    md = report.render_markdown(rep)
    _dump(out / "report.md", md)
    print(md)


def cmd_propagate(args, cfg, out: Path):
    ws = _workloads(args)
    bases = _baselines(out, ws) if all(
        (out / f"golden-{w}.json").exists() for w in ws) else {}
    if not bases:
        log.warning("no golden baselines found; propagation records will be unlabelled")
    recs = propagation.run_suite(bases, ws, args.seed, cfg)
    _dump(out / "propagation.jsonl", "".join(json.dumps(r.to_dict(), sort_keys=True) + "\n" for r in recs))
    summ = propagation.summarize(recs)
    _dump(out / "propagation.json", propagation.summary_json(summ) + "\n")
    md = propagation.summary_markdown(summ)
    _dump(out / "propagation.md", md)
    print(md)


def cmd_replay(args, cfg, out: Path):
    camp = _campaign(out)
    if args.id not in camp:
        raise UsageError(f"unknown experiment id {args.id!r}")
    rec = _run_and_write(args.id, *camp[args.id], cfg, args.seed, out / "replay")
    print(f"{args.id}: trace {rec.trace_digest}")


COMMANDS = {
    "record": cmd_record, "generate": cmd_generate, "golden": cmd_golden, "run": cmd_run,
    "classify": cmd_classify, "report": cmd_report, "propagate": cmd_propagate, "replay": cmd_replay,
}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--out", default="mutiny-out", help="artifact directory")
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int, default=0, help="root seed")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="mutiny", description="Fault-injection campaigns against a simulated orchestrator.")
    sub = p.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True
    wl = dict(action="append", choices=WORKLOADS, help="workload (repeatable; default all)")

    s = sub.add_parser("record", parents=[common], help="record written fields per workload")
    s.add_argument("--workload", **wl)
    s = sub.add_parser("generate", parents=[common], help="generate the campaign from catalogs")
    s.add_argument("--workload", **wl)
    s = sub.add_parser("golden", parents=[common], help="collect golden runs and baselines")
    s.add_argument("--workload", **wl)
    s.add_argument("--runs", type=int, default=None)
    s.add_argument("--jobs", type=int, default=1)
    s = sub.add_parser("run", parents=[common], help="run campaign experiments")
    s.add_argument("--experiment-id")
    s.add_argument("--limit", type=int)
    s.add_argument("--jobs", type=int, default=1)
    sub.add_parser("classify", parents=[common], help="label every record")
    sub.add_parser("report", parents=[common], help="render tables")
    s = sub.add_parser("propagate", parents=[common], help="run the propagation suite")
    s.add_argument("--workload", **wl)
    s = sub.add_parser("replay", parents=[common], help="rerun one experiment by id")
    s.add_argument("id")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(f"mutiny: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:  # --help
        return EXIT_OK if not e.code else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    out = Path(args.out)
    try:
        cfg = _load_cfg(args)
        COMMANDS[args.command](args, cfg, out)
    except UsageError as e:
        print(f"mutiny: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except MissingPrerequisite as e:
        print(f"mutiny: {e}", file=sys.stderr)
        return EXIT_MISSING
    except (ConfigError, ValueError) as e:
        print(f"mutiny: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as e:  # harness fault
        log.exception("internal error")
        print(f"mutiny: internal error: {e}", file=sys.stderr)
        return EXIT_INTERNAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
