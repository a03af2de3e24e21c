#!/usr/bin/env python3
"""
DiG desk - Web Interface
A Flask-based read-only viewer for FLOP tables, preset configurations,
training metrics and benchmark results.
"""

import json
import logging
import os
from pathlib import Path

from flask import Flask, jsonify, render_template_string, request

from bench import flops_table
from flops import flops_estimate
from model import ModelConfig, load_preset, preset_names
from tensor import DiGError
from utils import read_csv, read_jsonl

logger = logging.getLogger(__name__)

# Initialize Flask app
app = Flask(__name__)
app.config["RUNS_DIR"] = os.environ.get("DIG_RUNS_DIR", "runs")

INDEX_TEMPLATE = """<!doctype html>
<html>
<head><title>DiG desk</title></head>
<body>
<h1>DiG desk</h1>
<h2>FLOP table</h2>
<table border="1" cellpadding="4">
<tr><th>preset</th><th>Gflops</th><th>reference</th><th>ratio vs DiT</th><th>params (M)</th></tr>
{% for row in rows %}
<tr><td><a href="/api/config/{{ row.name }}">{{ row.name }}</a></td>
<td>{{ "%.2f"|format(row.gflops) }}</td><td>{{ row.reference }}</td>
<td>{{ "%.1f"|format(100 * row.ratio_vs_dit) }}%</td><td>{{ row.params_m }}</td></tr>
{% endfor %}
</table>
<h2>Runs</h2>
<ul>
{% for run in runs %}
<li>{{ run }}: <a href="/api/metrics?run={{ run }}">metrics</a>,
<a href="/api/bench?run={{ run }}">bench</a></li>
{% else %}
<li>no runs in {{ runs_dir }}</li>
{% endfor %}
</ul>
</body>
</html>
"""


class NotFound(DiGError):
    """Requested resource does not exist."""


def _runs_dir():
    return Path(app.config["RUNS_DIR"])


def _run_dir():
    """The run directory named by ?run=, confined to the runs directory."""
    name = request.args.get("run", "")
    if not name:
        raise DiGError("missing ?run= parameter")
    root = _runs_dir().resolve()
    path = (root / name).resolve()
    if root != path and root not in path.parents:
        raise DiGError(f"run {name!r} is outside the runs directory")
    if not path.is_dir():
        raise NotFound(f"no run {name!r}")
    return path


@app.errorhandler(DiGError)
def handle_error(exc):
    status = 404 if isinstance(exc, NotFound) else 400
    return jsonify({"error": str(exc)}), status


@app.route("/")
def index():
    """Render the main page"""
    runs_dir = _runs_dir()
    runs = sorted(p.name for p in runs_dir.iterdir() if p.is_dir()) if runs_dir.is_dir() else []
    return render_template_string(INDEX_TEMPLATE, rows=flops_table(), runs=runs,
                                  runs_dir=str(runs_dir))


@app.route("/api/flops", methods=["GET"])
def api_flops():
    """FLOP table of all shipped presets."""
    return jsonify(flops_table(preset_names()))


@app.route("/api/flops", methods=["POST"])
def api_flops_custom():
    """Estimate for an ad-hoc ModelConfig posted as JSON."""
    values = request.get_json(silent=True)
    if not isinstance(values, dict):
        raise DiGError("expected a JSON object of model config fields")
    return jsonify(flops_estimate(ModelConfig.from_dict(values)).to_dict())


@app.route("/api/config/<preset>")
def api_config(preset):
    if preset not in preset_names():
        raise NotFound(f"unknown preset {preset!r}")
    return jsonify(load_preset(preset).to_dict())


@app.route("/api/metrics")
def api_metrics():
    path = _run_dir() / "metrics.jsonl"
    if not path.exists():
        raise NotFound("run has no metrics.jsonl")
    return jsonify(read_jsonl(path))


@app.route("/api/bench")
def api_bench():
    run = _run_dir()
    csv_path, json_path = run / "bench.csv", run / "bench.json"
    if not csv_path.exists():
        raise NotFound("run has no bench.csv")
    summary = json.loads(json_path.read_text()) if json_path.exists() else None
    return jsonify({"rows": read_csv(csv_path), "summary": summary})
