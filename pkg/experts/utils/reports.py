"""
File formats of the lab's artifacts and ``emit_reports``.

Numbers are written with nine significant digits and rows in a fixed order,
so re-emitting the same inputs produces byte-identical files.
"""
import csv
import io
import json
import logging
from pathlib import Path

import matplotlib

matplotlib.use('Agg')
from matplotlib.figure import Figure  # noqa: E402

from experts.utils.calibration import (  # noqa: E402
    CandidateSet,
    KLImpactReport,
    SensitivityProfile,
    UsageStats,
    key_experts_from_dict,
    key_experts_to_dict,
)
from experts.utils.harness import Corpus, MetricsReport  # noqa: E402
from experts.utils.moe_model import SyntheticModelSpec  # noqa: E402
from experts.utils.storage import atomic_write, format_float, read_json, write_json  # noqa: E402

logger = logging.getLogger(__name__)

MODEL_FILE = 'model.bin'
SPEC_FILE = 'spec.json'
CORPUS_FILE = 'corpus.json'
CALIBRATION_CORPUS_FILE = 'calibration_corpus.json'
USAGE_FILE = 'usage.json'
USAGE_CSV = 'usage.csv'
USAGE_TOKENS_CSV = 'usage_tokens.csv'
CANDIDATES_FILE = 'candidates.json'
KL_IMPACT_FILE = 'kl_impact.json'
SENSITIVITY_FILE = 'sensitivity.json'
SENSITIVITY_CSV = 'sensitivity.csv'
DES_MEDIANS_FILE = 'des_medians.json'
KEY_EXPERTS_FILE = 'key_experts.json'
FAILURE_SET_FILE = 'failure_set.json'
METRICS_CSV = 'metrics.csv'
METRICS_FILE = 'metrics.json'

TOKEN_TABLE_SIZE = 10
SVG_HASH_SALT = 'moerlab'


def _cell(value):
    if isinstance(value, float):
        return format_float(value)
    return value


def csv_text(header, rows):
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator='\n')
    writer.writerow(header)
    for row in rows:
        writer.writerow([_cell(value) for value in row])
    return buffer.getvalue()


def write_csv(path, header, rows):
    return atomic_write(path, csv_text(header, rows))


def write_usage_csv(stats, path):
    rows = []
    if stats is not None:
        frequency = {d: stats.frequency(d) for d in range(stats.num_domains) if stats.domain_tokens[d]}
        for layer in range(stats.num_layers):
            for expert in range(stats.num_experts):
                for domain, table in frequency.items():
                    rows.append((layer, expert, domain, float(table[layer, expert])))
    return write_csv(path, ('layer', 'expert', 'domain', 'frequency'), rows)


def write_token_table(stats, path, top=TOKEN_TABLE_SIZE):
    """The tokens most often routed to each expert, ranked."""
    rows = []
    if stats is not None:
        for layer in range(stats.num_layers):
            for expert in range(stats.num_experts):
                for rank, (token, count) in enumerate(stats.token_assoc(layer, expert, top), start=1):
                    rows.append((layer, expert, rank, token, count))
    return write_csv(path, ('layer', 'expert', 'rank', 'token', 'count'), rows)


def usage_chart_svg(stats, layer):
    """Bar chart of one layer's per-expert selection frequency, one series per domain."""
    domains = [d for d in range(stats.num_domains) if stats.domain_tokens[d]]
    experts = list(range(stats.num_experts))
    width = 0.8 / max(len(domains), 1)

    with matplotlib.rc_context({'svg.hashsalt': SVG_HASH_SALT, 'svg.fonttype': 'none'}):
        figure = Figure(figsize=(10, 4))
        axes = figure.add_subplot()
        for slot, domain in enumerate(domains):
            heights = stats.frequency(domain)[layer]
            axes.bar([e + slot * width for e in experts], heights, width=width, label=f'domain {domain}')
        axes.axhline(stats.uniform_rate, color='black', linestyle='--', linewidth=0.8, label='uniform k/E')
        axes.set_xlabel('expert')
        axes.set_ylabel('selection frequency')
        axes.set_title(f'Layer {layer} expert usage ({stats.policy})')
        axes.set_xticks(experts)
        axes.tick_params(axis='x', labelsize=6)
        if domains:
            axes.legend(fontsize=7)
        buffer = io.BytesIO()
        figure.savefig(buffer, format='svg', metadata={'Date': None})
    return buffer.getvalue()


def write_usage_charts(stats, outdir):
    paths = []
    for layer in range(stats.num_layers):
        path = Path(outdir) / f'usage_layer{layer}.svg'
        paths.append(atomic_write(path, usage_chart_svg(stats, layer)))
    return paths


def write_sensitivity(profile, outdir):
    outdir = Path(outdir)
    rows = [(layer, float(w), float(l)) for layer, (w, l) in enumerate(zip(profile.w, profile.l_prime))]
    return [
        write_json(outdir / SENSITIVITY_FILE, profile.to_dict()),
        write_csv(outdir / SENSITIVITY_CSV, ('layer', 'W', 'L_prime'), rows),
    ]


def load_sensitivity(outdir):
    return SensitivityProfile.from_dict(read_json(Path(outdir) / SENSITIVITY_FILE, 'calibrate'))


def write_key_experts(keys, path):
    return write_json(path, key_experts_to_dict(keys))


def load_key_experts(outdir):
    return key_experts_from_dict(read_json(Path(outdir) / KEY_EXPERTS_FILE, 'identify'))


def write_des_medians(medians, k_low, path):
    return write_json(path, {'k_low': k_low, 'medians': list(medians)})


def load_des_medians(outdir):
    data = read_json(Path(outdir) / DES_MEDIANS_FILE, 'calibrate')
    return int(data['k_low']), tuple(float(m) for m in data['medians'])


def write_usage(stats, outdir):
    return write_json(Path(outdir) / USAGE_FILE, stats.to_dict())


def load_usage(outdir):
    return UsageStats.from_dict(read_json(Path(outdir) / USAGE_FILE, 'profile'))


def write_candidates(candidates, outdir):
    return write_json(Path(outdir) / CANDIDATES_FILE, candidates.to_dict())


def load_candidates(outdir):
    return CandidateSet.from_dict(read_json(Path(outdir) / CANDIDATES_FILE, 'calibrate'))


def write_kl_impact(report, outdir):
    return write_json(Path(outdir) / KL_IMPACT_FILE, report.to_dict())


def load_kl_impact(outdir):
    return KLImpactReport.from_dict(read_json(Path(outdir) / KL_IMPACT_FILE, 'calibrate'))


def write_spec(spec, outdir):
    return write_json(Path(outdir) / SPEC_FILE, spec.to_dict())


def load_spec(outdir):
    return SyntheticModelSpec.from_dict(read_json(Path(outdir) / SPEC_FILE, 'gen-model'))


def write_corpus(corpus, path):
    return write_json(path, corpus.to_dict())


def load_corpus(path):
    return Corpus.from_dict(read_json(path, 'gen-corpus'))


def write_metrics(reports, outdir):
    outdir = Path(outdir)
    rows = [list(report.as_row().values()) for report in reports]
    return [
        write_csv(outdir / METRICS_CSV, MetricsReport.CSV_COLUMNS, rows),
        write_json(outdir / METRICS_FILE, {'policies': [report.to_dict() for report in reports]}),
    ]


def trace_line(record):
    record = dict(record)
    record['selected'] = [f'{expert}:{format_float(weight)}' for expert, weight in record['selected']]
    return json.dumps(record)


class TraceWriter:
    """Collects routing traces and writes them as newline-delimited JSON."""

    def __init__(self, path):
        self.path = Path(path)
        self.lines = []

    def __call__(self, trace):
        self.lines.extend(trace_line(record) for record in trace.records())

    def close(self):
        return atomic_write(self.path, ''.join(line + '\n' for line in self.lines))


def trace_path(outdir, policy_name):
    return Path(outdir) / f'trace_{policy_name}.ndjson'


def write_experiment(name, header, rows, outdir):
    return write_csv(Path(outdir) / f'experiment_{name}.csv', header, rows)


def emit_reports(outdir, stats=None, profile=None, keys=None, metrics=None):
    """Write whichever report families are given; returns the paths written.

    Usage tables are always written, as headers only when ``stats`` is empty.
    """
    outdir = Path(outdir)
    written = [write_usage_csv(stats, outdir / USAGE_CSV), write_token_table(stats, outdir / USAGE_TOKENS_CSV)]
    if stats is not None and stats.total_tokens:
        written.extend(write_usage_charts(stats, outdir))
    if profile is not None:
        written.extend(write_sensitivity(profile, outdir))
    if keys is not None:
        written.append(write_key_experts(keys, outdir / KEY_EXPERTS_FILE))
    if metrics is not None:
        written.extend(write_metrics(metrics, outdir))
    logger.info('Wrote %d report files to %s', len(written), outdir)
    return written
