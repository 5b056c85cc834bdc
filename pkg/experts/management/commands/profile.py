from experts.management.base import LabCommand
from experts.utils import reports
from experts.utils.calibration import profile_usage


class Command(LabCommand):
    help = 'Record per-expert usage on the calibration corpus'

    def add_stage_arguments(self, parser):
        parser.add_argument('--policy', help='routing policy to profile (default baseline)')

    def run(self, config, options):
        params = self.load_params(config)
        corpus = self.calibration_corpus(config, params)
        policy = self.make_policy(options.get('policy') or 'baseline', config, params)
        stats = profile_usage(params, corpus, policy, config.harness.batch_size)
        reports.write_usage(stats, config.output_dir)
        reports.emit_reports(config.output_dir, stats=stats)
        self.done(f'Profiled {stats.total_tokens} tokens under {policy.name}')
