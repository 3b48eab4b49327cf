from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional

from jinja2 import Environment, select_autoescape


@dataclass
class StepRecord:
    step: int
    losses: Dict[str, float]
    wall_time: float
    metrics: Dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class RunReport:
    """One CLI run: settings snapshot, outcome, summary metrics and the step log."""

    command: str
    meta: Dict[str, Any]
    status: str
    started_at: datetime
    finished_at: datetime
    summary: Dict[str, Any] = field(default_factory=dict)
    steps: List[StepRecord] = field(default_factory=list)
    error: Optional[str] = None

    @property
    def duration(self) -> float:
        return (self.finished_at - self.started_at).total_seconds()

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["started_at"] = self.started_at.isoformat()
        data["finished_at"] = self.finished_at.isoformat()
        data["duration_s"] = self.duration
        return data


def save_report(report: RunReport, output: Path) -> None:
    output.parent.mkdir(parents=True, exist_ok=True)
    output.write_text(json.dumps(report.to_dict(), indent=2), encoding="utf-8")


def write_step_log(steps: Iterable[StepRecord], output: Path) -> None:
    """One JSON object per line: step, per-term losses, wall time."""
    output.parent.mkdir(parents=True, exist_ok=True)
    lines = [json.dumps(record.to_dict()) for record in steps]
    output.write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def read_step_log(path: Path) -> List[StepRecord]:
    records = []
    for line in path.read_text(encoding="utf-8").splitlines():
        if line.strip():
            raw = json.loads(line)
            records.append(StepRecord(raw["step"], raw["losses"], raw["wall_time"], raw.get("metrics", {})))
    return records


def _term_overview(steps: List[Dict[str, Any]], names: List[str]) -> List[Dict[str, Any]]:
    rows = []
    for name in names:
        values = [s["losses"][name] for s in steps if name in s["losses"]]
        finite = [v for v in values if isinstance(v, (int, float)) and math.isfinite(v)]
        rows.append(
            {
                "name": name,
                "first": values[0],
                "last": values[-1],
                "best": min(finite) if finite else None,
            }
        )
    return rows


def _fmt(value: Any) -> Any:
    if isinstance(value, float):
        return f"{value:.6g}"
    if value is None:
        return "-"
    return value


def render_html(report_json: Path, output_html: Path) -> None:
    data = json.loads(report_json.read_text(encoding="utf-8"))
    env = Environment(autoescape=select_autoescape(["html", "xml"]))
    env.filters["format_json"] = lambda value: json.dumps(value, indent=2, ensure_ascii=False)
    env.filters["fmt"] = _fmt
    steps = data.get("steps", [])
    loss_names = sorted({name for step in steps for name in step["losses"]})
    html = env.from_string(_HTML_TEMPLATE).render(
        report=data,
        loss_names=loss_names,
        overview=_term_overview(steps, loss_names),
    )
    output_html.parent.mkdir(parents=True, exist_ok=True)
    output_html.write_text(html, encoding="utf-8")


_HTML_TEMPLATE = """<!DOCTYPE html>
<html lang="en">
<head>
<meta charset="utf-8">
<title>primvol {{ report.command }} report</title>
<style>
  body { font: 14px/1.4 Helvetica, sans-serif; margin: 1.5rem 2.5rem; color: #222; }
  h1 { margin-bottom: 0.2rem; }
  .meta { color: #666; }
  table { border-collapse: collapse; margin: 0.8rem 0 1.6rem; }
  th, td { border-bottom: 1px solid #e3e3e3; padding: 0.3rem 0.8rem; text-align: right; }
  th:first-child, td:first-child { text-align: left; }
  thead th { border-bottom: 2px solid #999; }
  .status-passed { color: #1b7f3b; }
  .status-failed { color: #b3261e; }
  pre.error { background: #fdecea; padding: 0.6rem; }
  details pre { font-size: 12px; }
</style>
</head>
<body>
<h1>{{ report.command }} <span class="status-{{ report.status }}">{{ report.status }}</span></h1>
<p class="meta">{{ report.started_at }} &rarr; {{ report.finished_at }} ({{ report.duration_s | fmt }} s)</p>
{% if report.error %}<pre class="error">{{ report.error }}</pre>{% endif %}

<h2>Summary</h2>
<table>
  {% for key, value in report.summary.items() %}
  <tr><td>{{ key }}</td><td>{% if value is mapping or (value is iterable and value is not string) %}<code>{{ value | tojson }}</code>{% else %}{{ value | fmt }}{% endif %}</td></tr>
  {% endfor %}
</table>

{% if overview %}
<h2>Loss terms</h2>
<table>
  <thead><tr><th>term</th><th>first</th><th>last</th><th>best</th></tr></thead>
  {% for row in overview %}
  <tr><td>{{ row.name }}</td><td>{{ row.first | fmt }}</td><td>{{ row.last | fmt }}</td><td>{{ row.best | fmt }}</td></tr>
  {% endfor %}
</table>

<h2>Steps</h2>
<table>
  <thead><tr><th>step</th>{% for name in loss_names %}<th>{{ name }}</th>{% endfor %}<th>wall time (s)</th></tr></thead>
  {% for step in report.steps %}
  <tr><td>{{ step.step }}</td>{% for name in loss_names %}<td>{{ step.losses.get(name) | fmt }}</td>{% endfor %}<td>{{ step.wall_time | fmt }}</td></tr>
  {% endfor %}
</table>
{% endif %}

<details><summary>Settings</summary><pre>{{ report.meta | format_json }}</pre></details>
</body>
</html>
"""
