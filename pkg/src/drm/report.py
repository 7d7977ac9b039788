"""Comparison tables over finished runs."""

from __future__ import annotations

from .pipeline import RunResult

COLUMNS = ("R@50", "R@100", "mR@50", "mR@100", "M@50", "M@100", "F@50", "F@100")


class ReportError(ValueError):
    pass


def _rows(results: list[RunResult], stage: str | None):
    rows = []
    for res in results:
        stages = [stage] if stage else list(res.reports)
        for st in stages:
            if st not in res.reports:
                raise ReportError(f"{res.run_id}: no {st} report")
            rows.append((res.run_id, st, res.reports[st]))
    return rows


def emit_report(results: list[RunResult], stage: str | None = None) -> tuple[str, dict]:
    """Aligned text table plus the same numbers as JSON (percent, rounded to 2 decimals)."""
    if not results:
        raise ReportError("need at least one result")
    rows = _rows(results, stage)
    tasks = {rep.task for _, _, rep in rows}
    if len(tasks) > 1:
        raise ReportError(f"cannot mix tasks in one table: {sorted(tasks)}")
    task = tasks.pop()

    doc = {"task": task, "columns": list(COLUMNS), "rows": []}
    base = rows[0][2].values
    for run_id, st, rep in rows:
        vals = {c: round(100.0 * rep.values[c], 2) for c in COLUMNS if c in rep.values}
        # change against the first row, recorded whether or not it is an improvement
        delta = {c: round(100.0 * (rep.values[c] - base[c]), 2) for c in vals if c in base}
        doc["rows"].append({"run": run_id, "stage": st, "values": vals, "delta": delta})

    name_w = max(len("run"), *(len(r["run"]) for r in doc["rows"]))
    header = f"{'run':<{name_w}}  {'stage':<6}" + "".join(f"{c:>8}" for c in COLUMNS)
    lines = [f"task: {task}", header, "-" * len(header)]
    for r in doc["rows"]:
        cells = "".join(f"{r['values'][c]:>8.2f}" if c in r["values"] else f"{'-':>8}" for c in COLUMNS)
        lines.append(f"{r['run']:<{name_w}}  {r['stage']:<6}" + cells)
    if len(doc["rows"]) > 1:
        first = doc["rows"][0]
        lines += ["", f"delta vs {first['run']} {first['stage']}", header, "-" * len(header)]
        for r in doc["rows"][1:]:
            cells = "".join(f"{r['delta'][c]:>+8.2f}" if c in r["delta"] else f"{'-':>8}" for c in COLUMNS)
            lines.append(f"{r['run']:<{name_w}}  {r['stage']:<6}" + cells)
    return "\n".join(lines) + "\n", doc
