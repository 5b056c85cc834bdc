from experts.management.base import LabCommand
from experts.utils import reports
from experts.utils.harness import MetricsReport
from experts.utils.storage import read_json, require


class Command(LabCommand):
    help = 'Re-emit CSV, JSON and SVG reports from the artifacts in the output directory'

    def run(self, config, options):
        outdir = config.output_dir
        require(outdir / reports.USAGE_FILE, 'profile')
        stats = reports.load_usage(outdir)
        profile = reports.load_sensitivity(outdir) if (outdir / reports.SENSITIVITY_FILE).exists() else None
        keys = reports.load_key_experts(outdir) if (outdir / reports.KEY_EXPERTS_FILE).exists() else None
        metrics = None
        if (outdir / reports.METRICS_FILE).exists():
            data = read_json(outdir / reports.METRICS_FILE)
            metrics = [MetricsReport.from_dict(item) for item in data['policies']]
        written = reports.emit_reports(outdir, stats=stats, profile=profile, keys=keys, metrics=metrics)
        self.done(f'{len(written)} report files written to {outdir}')
