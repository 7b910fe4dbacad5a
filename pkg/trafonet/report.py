from __future__ import annotations
from typing import Any, Dict

from jinja2 import Environment, StrictUndefined

_env = Environment(undefined=StrictUndefined, trim_blocks=True, lstrip_blocks=True, keep_trailing_newline=True)
_env.filters["f3"] = lambda v: "" if v is None or v == "" else f"{float(v):.3f}"

OLTC_REPORT = """\
# OLTC acoustic state classification

- seed: {{ r.seed }}
- version: {{ r.version }}
- parameters: {{ s.n_params }}
- duration: {{ r.duration_s | f3 }} s

| metric | value |
|---|---|
| train accuracy | {{ s.train_accuracy | f3 }} |
| test accuracy | {{ s.test_accuracy | f3 }} |
| nearest-class-mean baseline | {{ s.baseline_accuracy | f3 }} |

## Confusion matrix (rows: true state, columns: predicted)

| state |{% for lab in s.labels %} {{ loop.index }} |{% endfor %}

|---|{% for lab in s.labels %}---|{% endfor %}

{% for row in s.confusion_matrix %}
| {{ loop.index }} {{ s.labels[loop.index0] }} |{% for v in row %} {{ v }} |{% endfor %}

{% endfor %}

## Accuracy vs SNR

| SNR (dB) | noisy | denoised |
|---|---|---|
{% for p in s.snr_curve %}
| {{ p.snr_db }} | {{ p.accuracy | f3 }} | {{ p.accuracy_denoised | f3 }} |
{% endfor %}
"""

RL_REPORT = """\
# Energization benchmark

- seed: {{ r.seed }}
- version: {{ r.version }}
- duration: {{ r.duration_s | f3 }} s

| algo | status | mean i_max | std | median | max | frac > 1 pu |
|---|---|---|---|---|---|---|
{% for row in s.rows %}
| {{ row.algo }} | {{ row.status }} | {{ row.get("mean") | f3 }} | {{ row.get("std") | f3 }} | {{ row.get("median") | f3 }} | {{ row.get("max") | f3 }} | {{ row.get("frac_over_rated") | f3 }} |
{% endfor %}
{% if s.errors %}

## Failures

{% for algo, err in s.errors.items() %}
- {{ algo }}: {{ err }}
{% endfor %}
{% endif %}
"""


def _render(template: str, record) -> str:
    data: Dict[str, Any] = record.to_dict()
    return _env.from_string(template).render(r=data, s=data["summary"])


def render_oltc_report(record) -> str:
    return _render(OLTC_REPORT, record)


def render_rl_report(record) -> str:
    return _render(RL_REPORT, record)
