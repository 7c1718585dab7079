"""On-disk run logs: steps.csv, affinity.csv, groups.csv, summary.json, config.json.

Every CSV starts with a schema-version line, columns are fixed, and floats
are serialized with 17 significant digits, so re-running the same
config.json reproduces the files byte for byte.
"""

from __future__ import annotations

import json
import os

from .analysis import summarize_run
from .experiments import RunResult
from .grouping import serialize_partition

STEPS_SCHEMA = "# schema=mtopt.steps.v1"
STEPS_HEADER = "iter,substep,group,task,loss,grad_norm_shared,grad_norm_task,forwards,backwards"
AFFINITY_SCHEMA = "# schema=mtopt.affinity.v1"
AFFINITY_HEADER = "iter,substep,source,target,b_instant,b_decayed,verdict,skipped"
GROUPS_SCHEMA = "# schema=mtopt.groups.v1"
GROUPS_HEADER = "iter,partition,m"
INDEX_SCHEMA = "# schema=mtopt.index.v1"
INDEX_HEADER = "cell,dir,status"


def fmt(x) -> str:
    if isinstance(x, float):
        return format(x, ".17g")
    return str(x)


def _steps_lines(log) -> list[str]:
    lines = []
    for report in log.steps:
        f, b = report.forwards, report.backwards
        for tid in sorted(report.initial_losses):
            lines.append(",".join([str(report.iteration), "0", "", str(tid),
                                   fmt(report.initial_losses[tid]), "", "", str(f), str(b)]))
        for idx, sub in enumerate(report.substeps, start=1):
            group = " ".join(str(t) for t in sub.group)
            tids = sorted(sub.losses_after) if sub.losses_after else sorted(report.initial_losses)
            for tid in tids:
                loss = fmt(sub.losses_after[tid]) if sub.losses_after else ""
                gtask = fmt(sub.grad_norm_task[tid]) if tid in sub.grad_norm_task else ""
                lines.append(",".join([str(report.iteration), str(idx), group, str(tid),
                                       loss, fmt(sub.grad_norm_shared), gtask, str(f), str(b)]))
    return lines


def write_run(outdir, result: RunResult, config_echo: dict) -> dict[str, str]:
    os.makedirs(outdir, exist_ok=True)
    paths = {}

    steps = [STEPS_SCHEMA, STEPS_HEADER]
    for label in sorted(result.logs):
        steps.extend(_steps_lines(result.logs[label]))
    paths["steps"] = os.path.join(outdir, "steps.csv")
    with open(paths["steps"], "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(steps) + "\n")

    affinity = [AFFINITY_SCHEMA, AFFINITY_HEADER]
    for label in sorted(result.logs):
        for row in result.logs[label].affinity_rows:
            it, sub, src, tgt, inst, dec, verdict, skipped = row
            affinity.append(",".join([str(it), str(sub), str(src), str(tgt),
                                      fmt(float(inst)), fmt(float(dec)), verdict,
                                      "1" if skipped else "0"]))
    paths["affinity"] = os.path.join(outdir, "affinity.csv")
    with open(paths["affinity"], "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(affinity) + "\n")

    groups = [GROUPS_SCHEMA, GROUPS_HEADER]
    for label in sorted(result.logs):
        for it, serialized, m in result.logs[label].partition_rows:
            groups.append(f'{it},"{serialized}",{m}')
    paths["groups"] = os.path.join(outdir, "groups.csv")
    with open(paths["groups"], "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(groups) + "\n")

    summary = {
        "schema": "mtopt.summary.v1",
        "method": result.method,
        "seed": result.seed,
        "k": result.k,
        "final_losses": {str(t): v for t, v in sorted(result.final_losses.items())},
        "eval_losses": {str(t): v for t, v in sorted(result.eval_losses.items())},
        "runs": {label: summarize_run(result.logs[label]) for label in sorted(result.logs)},
    }
    paths["summary"] = os.path.join(outdir, "summary.json")
    with open(paths["summary"], "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=1, sort_keys=True)
        fh.write("\n")

    paths["config"] = os.path.join(outdir, "config.json")
    with open(paths["config"], "w", encoding="utf-8") as fh:
        json.dump({"schema": "mtopt.config.v1", "config": config_echo}, fh,
                  indent=1, sort_keys=True)
        fh.write("\n")
    return paths


def read_summary(rundir) -> dict:
    path = os.path.join(rundir, "summary.json")
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def read_group_series(rundir) -> list[tuple[int, int]]:
    """(iteration, group count) pairs from groups.csv."""
    path = os.path.join(rundir, "groups.csv")
    out = []
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    for line in lines[2:]:
        parts = line.rsplit(",", 1)
        it = int(line.split(",", 1)[0])
        out.append((it, int(parts[1])))
    return out
