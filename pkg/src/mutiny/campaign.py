"""Field recording, campaign generation, golden collection and batch execution."""
from __future__ import annotations

import json
import random
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

from .classifier import GoldenBaseline, classify
from .config import Config
from .injector import InjectionSpec, value_catalog
from .kernel import derive_seed
from .model import KINDS
from .wire import Undecodable, decode, flatten_fields
from .workloads import WORKLOADS, ExperimentRecord, Run, experiment_seed, run_experiment

CRITICAL_LEAVES = ("node_name", "namespace", "uid")


# -- recording -------------------------------------------------------------------------

class _Recorder:
    """Pass-through injector stand-in that notes every field written to the store."""

    def __init__(self, schema, since: int, kernel):
        self.schema = schema
        self.since = since
        self.kernel = kernel
        self.fields: set[tuple[str, str, str]] = set()
        self.min_len: dict[str, int] = {}

    def intercept(self, msg):
        if msg.channel != "ToStore" or self.kernel.now < self.since or msg.operation == "delete":
            return msg
        obj = msg.decoded if msg.decoded is not None else decode(msg.data, self.schema,
                                                                  self.schema.message_for_kind(msg.kind))
        if isinstance(obj, Undecodable):
            return msg
        for path, typ in flatten_fields(obj, msg.kind, self.schema):
            self.fields.add((msg.kind, path, typ))
        n = len(msg.data)
        self.min_len[msg.kind] = min(n, self.min_len.get(msg.kind, n))
        return msg

    def after_store_write(self, msg, store):
        pass

    def on_read(self, key):
        pass


@dataclass
class FieldCatalog:
    workload: str
    fields: list  # sorted [kind, path, type]
    min_len: dict  # kind -> shortest encoded ToStore message

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "FieldCatalog":
        return cls(d["workload"], [list(f) for f in d["fields"]], dict(d["min_len"]))


def record_fields(workload: str, seeds=(0,), cfg: Config | None = None) -> FieldCatalog:
    """Run the workload uninjected and collect every (kind, field) written on ToStore after arm time."""
    cfg = cfg or Config()
    fields: set = set()
    min_len: dict[str, int] = {}
    for seed in seeds:
        recs = []

        def tap(c, recs=recs):
            rec = _Recorder(c.schema, cfg.client_start_ms + cfg.arm_offset_ms, c.kernel)
            c.api.injector = rec
            recs.append(rec)

        Run(workload, seed, None, cfg, hook=tap).execute()
        fields |= recs[0].fields
        for k, n in recs[0].min_len.items():
            min_len[k] = min(n, min_len.get(k, n))
    return FieldCatalog(workload, [list(f) for f in sorted(fields)], dict(sorted(min_len.items())))


# -- generation --------------------------------------------------------------------------

@dataclass
class CampaignParams:
    channel: str = "ToStore"
    field_when: list = field(default_factory=lambda: [1, 2, 3])
    drop_when: list = field(default_factory=lambda: list(range(1, 11)))
    int_bits: list = field(default_factory=lambda: [1, 5])
    string_chars: list = field(default_factory=lambda: [1, 2])
    raw_bytes_per_kind: int = 10
    drops: bool = True
    semantic_values: bool = True
    extended_values: bool = False
    seed: int = 0

    @classmethod
    def from_config(cls, cfg: Config, **kw) -> "CampaignParams":
        return cls(field_when=list(cfg.field_when), drop_when=list(cfg.drop_when), int_bits=list(cfg.int_bits),
                   string_chars=list(cfg.string_chars), raw_bytes_per_kind=cfg.raw_bytes_per_kind,
                   semantic_values=cfg.semantic_values, **kw)


def _field_specs(kind, path, typ, p: CampaignParams) -> list[InjectionSpec]:
    ch = p.channel
    out = []
    for when in p.field_when:
        if typ == "int":
            out += [InjectionSpec(ch, kind, "BitFlip", when, path=path, bit=b) for b in p.int_bits]
            out.append(InjectionSpec(ch, kind, "ValueSet", when, path=path, value=0))
        elif typ == "string":
            out += [InjectionSpec(ch, kind, "BitFlip", when, path=path, bit=b) for b in p.string_chars]
            out.append(InjectionSpec(ch, kind, "ValueSet", when, path=path, value=""))
        elif typ == "bool":
            out.append(InjectionSpec(ch, kind, "BitFlip", when, path=path, bit=1))
        extra = []
        leaf = path.rsplit(".", 1)[-1]
        if p.extended_values:
            extra = [v for v in value_catalog(typ, path, kind, semantic=False) if v not in (0, "")]
        if p.semantic_values and leaf in CRITICAL_LEAVES:
            extra += [v for v in value_catalog(typ, path, kind, semantic=True)[3:]]
        out += [InjectionSpec(ch, kind, "ValueSet", when, path=path, value=v) for v in extra]
    return out


def generate_campaign(catalog: FieldCatalog, params: CampaignParams | None = None) -> list[tuple[str, InjectionSpec]]:
    """Every spec the generation rules derive from one workload's catalog, in a stable order."""
    p = params or CampaignParams()
    if not catalog.fields:
        return []
    specs: list[InjectionSpec] = []
    kinds = sorted({f[0] for f in catalog.fields})
    for kind, path, typ in catalog.fields:
        specs += _field_specs(kind, path, typ, p)
    for kind in kinds:
        rng = random.Random(derive_seed(p.seed, catalog.workload, kind, "raw"))
        n = catalog.min_len.get(kind, 0)
        for _ in range(p.raw_bytes_per_kind if n else 0):
            specs.append(InjectionSpec(p.channel, kind, "BitFlip", rng.choice(p.field_when),
                                       offset=rng.randrange(n), bit=rng.randrange(8)))
        if p.drops and p.channel != "AtRest":
            specs += [InjectionSpec(p.channel, kind, "Drop", w) for w in p.drop_when]
    return [(catalog.workload, s) for s in specs]


def experiment_id(workload: str, spec: InjectionSpec | None) -> str:
    return f"{workload}-{spec.id if spec else 'golden'}"


def write_campaign(entries, path) -> None:
    with open(path, "w") as f:
        for workload, spec in entries:
            f.write(json.dumps({"workload": workload, "spec": spec.to_dict(),
                                "id": experiment_id(workload, spec)}, sort_keys=True) + "\n")


def read_campaign(path) -> list[tuple[str, InjectionSpec]]:
    out = []
    with open(path) as f:
        for line in f:
            if line.strip():
                d = json.loads(line)
                out.append((d["workload"], InjectionSpec.from_dict(d["spec"])))
    return out


# -- execution ----------------------------------------------------------------------------

def _run_one(args) -> dict:
    workload, spec_dict, root_seed, cfg_json = args
    cfg = Config.from_json(cfg_json)
    spec = InjectionSpec.from_dict(spec_dict) if spec_dict else None
    eid = experiment_id(workload, spec)
    rec = run_experiment(workload, experiment_seed(root_seed, eid), spec, cfg, experiment_id=eid)
    return rec.to_dict()


def run_campaign(entries, root_seed: int = 0, cfg: Config | None = None, jobs: int = 1) -> list[ExperimentRecord]:
    """Run experiments; results do not depend on ``jobs`` or on order."""
    cfg = cfg or Config()
    args = [(w, s.to_dict() if s else None, root_seed, cfg.to_json()) for w, s in entries]
    if jobs > 1 and len(args) > 1:
        with ProcessPoolExecutor(jobs) as ex:
            dicts = list(ex.map(_run_one, args, chunksize=4))
    else:
        dicts = [_run_one(a) for a in args]
    return [ExperimentRecord.from_dict(d) for d in dicts]


def golden_id(workload: str, i: int) -> str:
    return f"{workload}-golden-{i:03d}"


def _golden_one(args) -> dict:
    workload, i, root_seed, cfg_json = args
    eid = golden_id(workload, i)
    return run_experiment(workload, experiment_seed(root_seed, eid), None, Config.from_json(cfg_json),
                          experiment_id=eid).to_dict()


def collect_golden(workload: str, n_runs: int | None = None, root_seed: int = 0, cfg: Config | None = None,
                   jobs: int = 1) -> tuple[GoldenBaseline, list[ExperimentRecord]]:
    cfg = cfg or Config()
    n = cfg.golden_runs if n_runs is None else n_runs
    if n < 2:
        raise ValueError("n_runs must be >= 2")
    args = [(workload, i, root_seed, cfg.to_json()) for i in range(n)]
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as ex:
            dicts = list(ex.map(_golden_one, args, chunksize=4))
    else:
        dicts = [_golden_one(a) for a in args]
    recs = [ExperimentRecord.from_dict(d) for d in dicts]
    return GoldenBaseline.build(workload, recs), recs


def label_records(records, baselines: dict, cfg: Config | None = None):
    for r in records:
        r.label = classify(r, baselines[r.workload], cfg).to_dict()
    return records


__all__ = ["FieldCatalog", "CampaignParams", "record_fields", "generate_campaign", "run_campaign",
           "collect_golden", "label_records", "experiment_id", "read_campaign", "write_campaign", "KINDS",
           "WORKLOADS"]
