"""Tables over classified experiment records: OF x CF matrix, per-injection counts, user errors."""
from __future__ import annotations

import csv
import io
import json

from .classifier import CF_LABELS, OF_LABELS


def _label(r) -> dict:
    lab = r["label"] if isinstance(r, dict) else r.label
    if not lab:
        raise ValueError(f"record {_get(r, 'experiment_id')} is not classified")
    return lab


def _get(r, k):
    return r[k] if isinstance(r, dict) else getattr(r, k)


def of_cf_matrix(records) -> dict:
    """Counts per (OF, CF); every label appears even when empty."""
    m = {of: {cf: 0 for cf in CF_LABELS} for of in OF_LABELS}
    for r in records:
        lab = _label(r)
        m[lab["of"]][lab["cf"]] += 1
    return m


def injection_table(records) -> list[dict]:
    """OF label counts per (workload, channel, kind, action)."""
    rows: dict[tuple, dict] = {}
    for r in records:
        spec = _get(r, "spec") or {}
        k = (_get(r, "workload"), spec.get("channel", "-"), spec.get("kind", "-"), spec.get("action", "golden"))
        row = rows.setdefault(k, {"workload": k[0], "channel": k[1], "kind": k[2], "action": k[3],
                                  "total": 0, **{of: 0 for of in OF_LABELS}})
        row["total"] += 1
        row[_label(r)["of"]] += 1
    return [rows[k] for k in sorted(rows)]


def user_error_table(records) -> dict:
    """For each OF label: experiments, and how many of them returned an error to the user."""
    out = {of: {"total": 0, "user_error": 0} for of in OF_LABELS}
    for r in records:
        row = out[_label(r)["of"]]
        row["total"] += 1
        row["user_error"] += bool(_get(r, "user_errors"))
    return out


def unaware_fraction(records, channel: str | None = "ToStore") -> tuple[int, int]:
    """(failures with a user error, failures) over non-No records of one channel."""
    n = hit = 0
    for r in records:
        spec = _get(r, "spec") or {}
        if channel is not None and spec.get("channel") != channel:
            continue
        if _label(r)["of"] == "No":
            continue
        n += 1
        hit += bool(_get(r, "user_errors"))
    return hit, n


def build_report(records) -> dict:
    records = list(records)
    return {
        "experiments": len(records),
        "matrix": of_cf_matrix(records),
        "injections": injection_table(records),
        "user_errors": user_error_table(records),
    }


def _md_table(header, rows) -> str:
    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    lines += ["| " + " | ".join(str(c) for c in row) + " |" for row in rows]
    return "\n".join(lines)


def render_markdown(rep: dict) -> str:
    parts = [f"# Campaign report\n\n{rep['experiments']} experiments.\n", "## OF x CF\n"]
    m = rep["matrix"]
    parts.append(_md_table(["OF"] + list(CF_LABELS) + ["total"],
                           [[of] + [m[of][cf] for cf in CF_LABELS] + [sum(m[of].values())] for of in OF_LABELS]))
    parts.append("\n## Injections\n")
    parts.append(_md_table(["workload", "channel", "kind", "action", "total"] + list(OF_LABELS),
                           [[r["workload"], r["channel"], r["kind"], r["action"], r["total"]]
                            + [r[of] for of in OF_LABELS] for r in rep["injections"]]))
    parts.append("\n## User-visible errors\n")
    parts.append(_md_table(["OF", "experiments", "with user error"],
                           [[of, v["total"], v["user_error"]] for of, v in rep["user_errors"].items()]))
    return "\n".join(parts) + "\n"


def render_json(rep: dict) -> str:
    return json.dumps(rep, sort_keys=True, indent=2)


def render_csv(rep: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["workload", "channel", "kind", "action", "total"] + list(OF_LABELS))
    for r in rep["injections"]:
        w.writerow([r["workload"], r["channel"], r["kind"], r["action"], r["total"]] + [r[of] for of in OF_LABELS])
    return buf.getvalue()
