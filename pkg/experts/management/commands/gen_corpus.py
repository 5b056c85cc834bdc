from experts.management.base import CALIBRATION_STREAM, TASK_STREAM, LabCommand
from experts.utils import reports


class Command(LabCommand):
    help = 'Generate the task corpus and the calibration corpus'

    def add_stage_arguments(self, parser):
        parser.add_argument('--sequences-per-domain', type=int)
        parser.add_argument('--seq-len', type=int)
        parser.add_argument('--no-task', action='store_true', help='omit answer tokens')

    def overrides(self, options):
        return {
            'corpus.sequences_per_domain': options.get('sequences_per_domain'),
            'corpus.seq_len': options.get('seq_len'),
            'corpus.task_mode': False if options.get('no_task') else None,
        }

    def run(self, config, options):
        params = self.load_params(config)
        tasks = self.generate_corpus(config, params, TASK_STREAM)
        calibration = self.generate_corpus(config, params, CALIBRATION_STREAM)
        reports.write_corpus(tasks, config.output_dir / reports.CORPUS_FILE)
        reports.write_corpus(calibration, config.output_dir / reports.CALIBRATION_CORPUS_FILE)
        self.done(f'{len(tasks)} task and {len(calibration)} calibration sequences written')
