from experts.management.base import LabCommand
from experts.utils import reports
from experts.utils.calibration import identify_key_experts, validate_failure_set
from experts.utils.storage import write_json


class Command(LabCommand):
    help = 'Pick key experts from the prune-impact report and check them on the failure set'

    def add_stage_arguments(self, parser):
        parser.add_argument('--z', type=float, dest='key_z', help='outlier threshold in standard deviations')
        parser.add_argument('--skip-validation', action='store_true')

    def overrides(self, options):
        return {'calibration.key_z': options.get('key_z')}

    def run(self, config, options):
        impact = reports.load_kl_impact(config.output_dir)
        keys = identify_key_experts(impact, config.calibration.key_z)
        reports.write_key_experts(keys, config.output_dir / reports.KEY_EXPERTS_FILE)
        for domain, layer, expert in keys.triples():
            self.stdout.write(f'domain {domain}: layer {layer} expert {expert}')

        if not options.get('skip_validation'):
            params = self.load_params(config)
            tasks = self.task_corpus(config, params)
            if tasks.task_mode:
                result = validate_failure_set(params, keys, tasks, config.harness.batch_size)
                write_json(config.output_dir / reports.FAILURE_SET_FILE, {
                    'failure_size': result.failure_size,
                    'baseline_correct': result.baseline_correct,
                    'enhanced_correct': result.enhanced_correct,
                })
                self.stdout.write(
                    f'Failure set: {result.enhanced_correct} of {result.failure_size} recovered by forced inclusion'
                )
        self.done(f'{len(keys.triples())} key experts written')
