from experts.management.base import LabCommand
from experts.utils import reports
from experts.utils.harness import run_experiment


def policy_arguments(parser):
    parser.add_argument('--strategy', choices=('A', 'B', 'C', 'D', 'E'), help='Pick strategy')
    parser.add_argument('--lambda', type=float, dest='lambda_', help='Ban pruning strength')
    parser.add_argument('--tau', type=float, help='dynamic-tau threshold')
    parser.add_argument('--fixed-k', type=int)
    parser.add_argument('--no-prefill', action='store_true', help='route prefill tokens with plain top-k')
    parser.add_argument('--no-decode', action='store_true', help='route decode tokens with plain top-k')


def policy_overrides(options):
    return {
        'policy.strategy': options.get('strategy'),
        'policy.lambda': options.get('lambda_'),
        'policy.tau': options.get('tau'),
        'policy.fixed_k': options.get('fixed_k'),
        'policy.apply_prefill': False if options.get('no_prefill') else None,
        'policy.apply_decode': False if options.get('no_decode') else None,
    }


class Command(LabCommand):
    help = 'Run one routing policy over the task corpus'

    def add_stage_arguments(self, parser):
        parser.add_argument('--policy', help='policy name (default from config)')
        policy_arguments(parser)

    def overrides(self, options):
        return {'policy.name': options.get('policy'), **policy_overrides(options)}

    def run(self, config, options):
        params = self.load_params(config)
        tasks = self.task_corpus(config, params)
        policy = self.make_policy(config.policy.name, config, params)
        writer = reports.TraceWriter(reports.trace_path(config.output_dir, policy.name))
        report = run_experiment(
            params, tasks, policy, config.harness.record_runtime, config.harness.batch_size,
            trace_sink=writer if config.harness.write_traces else None,
        )
        report.speedup_proxy = params.config.k_base / report.avg_topk if report.avg_topk else 0.0
        reports.write_metrics([report], config.output_dir)
        if config.harness.write_traces:
            writer.close()
        self.done(f'{policy.name}: accuracy {report.accuracy:.4f}, avg_topk {report.avg_topk:.3f}')
