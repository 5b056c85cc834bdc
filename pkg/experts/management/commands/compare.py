from experts.management.base import LabCommand, name_list
from experts.management.commands.run import policy_arguments, policy_overrides
from experts.utils import reports
from experts.utils.calibration import validate_candidates
from experts.utils.harness import (
    MetricsReport,
    compare_policies,
    fixed_k_sweep,
    forced_inclusion_grid,
    lambda_sweep,
    multi_domain_experiment,
    tau_sweep,
)

EXPERIMENTS = ('policies', 'multi-domain', 'lambda-sweep', 'tau-sweep', 'fixed-k', 'forced-inclusion')


def metric_rows(table, values):
    """Metrics rows, each prefixed with the swept value."""
    return [[value, *(report.as_row()[name] for name in MetricsReport.CSV_COLUMNS)] for value, report in zip(values, table)]


class Command(LabCommand):
    help = 'Compare routing policies, or run one of the sweep experiments'

    def add_stage_arguments(self, parser):
        parser.add_argument('--policies', type=name_list, help='comma separated policy names')
        parser.add_argument('--experiment', choices=EXPERIMENTS, default='policies')
        policy_arguments(parser)

    def overrides(self, options):
        return {'policies': options.get('policies'), **policy_overrides(options)}

    def run(self, config, options):
        params = self.load_params(config)
        tasks = self.task_corpus(config, params)
        experiment = options.get('experiment') or 'policies'
        getattr(self, 'run_' + experiment.replace('-', '_'))(config, params, tasks)

    def run_policies(self, config, params, tasks):
        policies = [self.make_policy(name, config, params) for name in config.policies]
        writers = {}

        def sink(policy):
            if not config.harness.write_traces:
                return None
            writers[policy.name] = reports.TraceWriter(reports.trace_path(config.output_dir, policy.name))
            return writers[policy.name]

        table = compare_policies(
            params, tasks, policies, config.harness.record_runtime, config.harness.batch_size, trace_sinks=sink
        )
        reports.write_metrics(table, config.output_dir)
        for name in sorted(writers):
            writers[name].close()
        for report in table:
            self.stdout.write(
                f'{report.policy:>12}  accuracy {report.accuracy:.4f}  avg_topk {report.avg_topk:.3f}  '
                f'speedup {report.speedup_proxy:.3f}'
            )
        self.done(f'Compared {len(table)} policies')

    def run_multi_domain(self, config, params, tasks):
        keys = reports.load_key_experts(config.output_dir)
        rows = multi_domain_experiment(
            params, tasks, keys, pick=config.policy.pick_config(), batch_size=config.harness.batch_size
        )
        domains = range(params.config.num_domains)
        header = ('domains', *(f'domain{d}_accuracy' for d in domains), 'avg_topk')
        body = [
            ('+'.join(str(d) for d in row.domains) or 'none',
             *(row.domain_accuracy.get(d, float('nan')) for d in domains), row.avg_topk)
            for row in rows
        ]
        path = reports.write_experiment('multi_domain', header, body, config.output_dir)
        self.done(f'{len(rows)} rows written to {path}')

    def run_lambda_sweep(self, config, params, tasks):
        profile = reports.load_sensitivity(config.output_dir)
        lambdas = (0.5, 0.6, 0.7, 0.8, 0.9)
        table = lambda_sweep(params, tasks, profile, config.policy, lambdas, config.harness.batch_size)
        path = reports.write_experiment(
            'lambda_sweep', ('lambda', *MetricsReport.CSV_COLUMNS), metric_rows(table, lambdas),
            config.output_dir,
        )
        self.done(f'Lambda sweep written to {path}')

    def run_tau_sweep(self, config, params, tasks):
        taus = (0.7, 0.8, 0.9)
        table, best = tau_sweep(params, tasks, config.policy, taus, config.harness.batch_size)
        rows = [[*row, 1 if tau == best else 0] for tau, row in zip(taus, metric_rows(table, taus))]
        path = reports.write_experiment(
            'tau_sweep', ('tau', *MetricsReport.CSV_COLUMNS, 'best'), rows, config.output_dir,
        )
        self.done(f'Tau sweep written to {path} (best tau {best:g})')

    def run_fixed_k(self, config, params, tasks):
        ks = list(range(params.config.k_base, 1, -1))
        table = fixed_k_sweep(params, tasks, ks, config.harness.batch_size)
        path = reports.write_experiment(
            'fixed_k', ('k', *MetricsReport.CSV_COLUMNS), metric_rows(table, ks), config.output_dir,
        )
        self.done(f'Fixed-k sweep written to {path}')

    def run_forced_inclusion(self, config, params, tasks):
        candidates = reports.load_candidates(config.output_dir)
        grid = forced_inclusion_grid(params, tasks, candidates, config.harness.batch_size)
        recovered = validate_candidates(params, candidates, tasks, config.harness.batch_size)
        rows = [
            (row.layer, row.expert, row.domain, row.accuracy, row.delta,
             recovered.get((row.layer, row.expert, row.domain), 0))
            for row in grid
        ]
        path = reports.write_experiment(
            'forced_inclusion', ('layer', 'expert', 'domain', 'accuracy', 'delta', 'recovered'), rows,
            config.output_dir,
        )
        self.done(f'{len(rows)} candidates written to {path}')
