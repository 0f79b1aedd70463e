"""Static run report rendered from the ledger.

The report is a directory holding ``index.md`` plus PNG figures: a metrics
table per evaluation, a sampling-probability plot per relation
pre-training run, and the attention overlays of each attention run. Output
depends only on the ledger and the artifacts it points to, so re-rendering
is byte-identical.
"""

from __future__ import annotations

import json
import shutil
from pathlib import Path

from .errors import IntegrityError
from .evalharness import FidelityReport
from .ledger import RunLedger, StageRecord, artifact_hash
from .scheduler import read_history

REPORT_STAGE = "report"
HISTORY_NAME = "scheduler_history.jsonl"
FIDELITY_NAME = "fidelity.json"
ATTENTION_NAME = "attention.json"


def _resolve(ledger: RunLedger, rel: str, digest: str) -> Path:
    path = Path(rel) if Path(rel).is_absolute() else ledger.run_dir / rel
    if not path.exists():
        raise IntegrityError(f"artifact {rel} referenced by the ledger is missing", path=str(path))
    if artifact_hash(path) != digest:
        raise IntegrityError(f"artifact {rel} no longer matches its recorded hash", path=str(path))
    return path


def plot_history(records: list[dict], out: Path) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    names = list(records[0]["probs"]) if records else []
    iters = [r["iteration"] for r in records]
    fig, (ax1, ax2) = plt.subplots(2, 1, figsize=(7, 6), sharex=True)
    for name in names:
        ax1.plot(iters, [r["probs"][name] for r in records], marker=".", lw=1, label=name)
    ax1.set_ylabel("sampling probability")
    if len(names) <= 10:
        ax1.legend(fontsize=7, ncol=2)
    ax2.plot(iters, [r["mean_score"] for r in records], marker="o", color="k")
    ax2.set_xlabel("iteration")
    ax2.set_ylabel("mean critic score")
    fig.tight_layout()
    out.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out, format="png", dpi=80, metadata={"Software": None})
    plt.close(fig)
    return out


def _history_section(idx: int, path: Path, out_dir: Path) -> list[str]:
    records = read_history(path)
    lines = [f"Recalibrations: {len(records)}", ""]
    if records:
        fig = plot_history(records, out_dir / f"stage{idx:02d}_scheduler.png")
        lines += [f"![sampling probabilities]({fig.name})", ""]
        last = records[-1]
        top = sorted(last["probs"].items(), key=lambda kv: -kv[1])[:5]
        lines += ["| object | final p | final score |", "|---|---|---|"]
        lines += [f"| {k} | {v:.4f} | {last['scores'][k]:.4f} |" for k, v in top]
        lines.append("")
    return lines


def _attention_section(idx: int, path: Path, out_dir: Path) -> list[str]:
    info = json.loads((path / ATTENTION_NAME).read_text(encoding="utf-8"))
    lines = ["| image | token | localization |", "|---|---|---|"]
    for item in info["items"]:
        for tok, score in sorted(item["scores"].items()):
            lines.append(f"| {item['image']} | `{tok}` | {score:.4f} |")
    lines.append("")
    for item in info["items"]:
        for tok, rel in sorted(item.get("overlays", {}).items()):
            src = path / rel
            if not src.exists():
                raise IntegrityError(f"attention overlay {src} is missing", path=str(src))
            dst = out_dir / f"stage{idx:02d}_{Path(rel).name}"
            shutil.copyfile(src, dst)
            lines.append(f"![{tok} on {item['image']}]({dst.name})")
    lines.append("")
    return lines


def _stage_table(records: list[StageRecord]) -> list[str]:
    lines = ["| # | stage | config | outputs |", "|---|---|---|---|"]
    for i, rec in enumerate(records):
        outs = ", ".join(f"`{k}`" for k in sorted(rec.outputs)) or "-"
        lines.append(f"| {i} | {rec.stage} | `{rec.config_hash[:12]}` | {outs} |")
    return lines + [""]


def render_report(ledger: RunLedger, out_dir) -> Path:
    """Write ``index.md`` and figures under ``out_dir``; returns the index path."""
    out_dir = Path(out_dir)
    records = [r for r in ledger if r.stage != REPORT_STAGE]
    # a re-run stage overwrites its artifacts; only the latest producer of a path is checked and shown
    latest = {rel: i for i, rec in enumerate(records) for rel in rec.outputs}
    resolved = [{rel: _resolve(ledger, rel, d) for rel, d in rec.outputs.items() if latest[rel] == i}
                for i, rec in enumerate(records)]
    if out_dir.exists():
        if any(out_dir.iterdir()) and not (out_dir / "index.md").exists():
            raise IntegrityError(f"refusing to overwrite {out_dir}: not a report directory", path=str(out_dir))
        shutil.rmtree(out_dir)
    out_dir.mkdir(parents=True)

    lines = ["# Run report", ""]
    if not records:
        lines += ["No stages recorded.", ""]
    else:
        lines += ["## Stages", ""] + _stage_table(records)
    for i, (rec, outputs) in enumerate(zip(records, resolved)):
        body: list[str] = []
        for rel, path in sorted(outputs.items()):
            if path.name == FIDELITY_NAME:
                body += ["Fidelity metrics:", "", FidelityReport.load(path).render_table()]
            elif path.name == HISTORY_NAME:
                body += _history_section(i, path, out_dir)
            elif path.is_dir() and (path / ATTENTION_NAME).exists():
                body += _attention_section(i, path, out_dir)
        if body:
            lines += [f"## {i}. {rec.stage}", ""] + body
    index = out_dir / "index.md"
    index.write_text("\n".join(lines).rstrip("\n") + "\n", encoding="utf-8")
    return index

