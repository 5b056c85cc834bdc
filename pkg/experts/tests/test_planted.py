"""
End-to-end checks on the default-sized planted model over twenty seeds.

Run with ``manage.py test experts --tag slow``; excluded with ``--exclude-tag slow``.
"""
from django.test import SimpleTestCase, tag

from experts.utils.calibration import (
    build_sensitivity_profile,
    calibrate_layer_sensitivity,
    calibrate_token_ratios,
    identify_key_experts,
    profile_usage,
    prune_impact,
    select_candidates,
    validate_failure_set,
)
from experts.utils.harness import gen_corpus, lambda_sweep, multi_domain_experiment, run_experiment
from experts.utils.moe_model import ModelConfig, build_model, plan_specialization
from experts.utils.routing_policies import (
    BanPickPolicy,
    BanPolicy,
    BaselinePolicy,
    PickPolicy,
    PolicyConfig,
    pruning_config,
)

SEEDS = range(20)
SEQUENCES_PER_DOMAIN = 16
SEQ_LEN = 8
POLICY = PolicyConfig()


def planted_run(seed):
    config = ModelConfig(seed=seed)
    spec = plan_specialization(config)
    params = build_model(config, spec)
    domains = range(config.num_domains)
    calibration = gen_corpus(config, domains, SEQUENCES_PER_DOMAIN, SEQ_LEN, seed=seed, stream=1)
    tasks = gen_corpus(config, domains, SEQUENCES_PER_DOMAIN, SEQ_LEN, seed=seed, stream=0)

    stats = profile_usage(params, calibration, BaselinePolicy(config.k_base))
    candidates = select_candidates(stats)
    keys = identify_key_experts(prune_impact(params, calibration, candidates))
    layers = calibrate_layer_sensitivity(params, calibration, POLICY.k_min)
    bounds = calibrate_token_ratios(params, calibration, POLICY.k_min)
    return {
        'params': params,
        'tasks': tasks,
        'planted': {(k.domain, k.layer, k.expert) for k in spec.planted_keys},
        'candidates': set(candidates.experts()),
        'keys': keys,
        'profile': build_sensitivity_profile(layers, bounds),
    }


@tag('slow')
class PlantedModelTests(SimpleTestCase):
    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.runs = [planted_run(seed) for seed in SEEDS]

    def test_key_experts_are_recovered(self):
        exact = sum(1 for run in self.runs if set(run['keys'].triples()) == run['planted'])
        self.assertGreaterEqual(exact, 18)

    def test_planted_keys_are_candidates(self):
        covered = sum(
            1 for run in self.runs
            if {(layer, expert, domain) for domain, layer, expert in run['planted']} <= run['candidates']
        )
        self.assertGreaterEqual(covered, 18)

    def test_pick_d_improves_accuracy(self):
        improved = 0
        for run in self.runs:
            params, tasks = run['params'], run['tasks']
            k_base = params.config.k_base
            baseline = run_experiment(params, tasks, BaselinePolicy(k_base))
            pick = run_experiment(params, tasks, PickPolicy(k_base, run['keys'], POLICY.pick_config('D')))
            improved += pick.accuracy > baseline.accuracy
        self.assertGreaterEqual(improved, 18)

    def test_forced_inclusion_recovers_failures(self):
        for run in self.runs:
            result = validate_failure_set(run['params'], run['keys'], run['tasks'])
            if result.failure_size:
                self.assertGreater(result.enhanced_correct, 0)

    def test_banpick_keeps_up_with_ban(self):
        at_least = 0
        for run in self.runs:
            params, tasks = run['params'], run['tasks']
            cfg = pruning_config(POLICY, params.config.k_base, run['profile'])
            ban = run_experiment(params, tasks, BanPolicy(cfg))
            banpick = run_experiment(params, tasks, BanPickPolicy(run['keys'], POLICY.pick_config('C'), cfg))
            at_least += banpick.accuracy >= ban.accuracy
        self.assertGreaterEqual(at_least, 16)

    def test_banpick_adds_no_more_than_the_own_domain_keys(self):
        for run in self.runs:
            params, tasks, keys = run['params'], run['tasks'], run['keys']
            cfg = pruning_config(POLICY, params.config.k_base, run['profile'])
            ban = run_experiment(params, tasks, BanPolicy(cfg))
            banpick = run_experiment(params, tasks, BanPickPolicy(keys, POLICY.pick_config('C'), cfg))
            per_token = max((len(items) for items in keys.domains.values()), default=0)
            with self.subTest(seed=params.config.seed):
                self.assertLessEqual(banpick.avg_topk - ban.avg_topk, per_token / params.config.num_layers + 1e-8)

    def test_union_of_all_domains_does_not_hurt_any_domain(self):
        kept = 0
        for run in self.runs:
            params = run['params']
            everything = tuple(range(params.config.num_domains))
            if set(everything) - set(run['keys'].domains):
                continue
            baseline, union = multi_domain_experiment(params, run['tasks'], run['keys'], subsets=[everything])
            kept += all(union.domain_accuracy[d] >= baseline.domain_accuracy[d] for d in everything)
        self.assertGreaterEqual(kept, 18)

    def test_ban_lambda_is_monotone_and_saves_activations(self):
        run = self.runs[0]
        params, tasks = run['params'], run['tasks']
        low, mid, high = lambda_sweep(params, tasks, run['profile'], POLICY, lambdas=(0.5, 0.7, 0.9))
        self.assertLess(low.avg_topk, mid.avg_topk)
        self.assertLess(mid.avg_topk, high.avg_topk)

        baseline = run_experiment(params, tasks, BaselinePolicy(params.config.k_base))
        self.assertLessEqual(mid.activations, 0.75 * baseline.activations)

        traces = []
        cfg = pruning_config(POLICY, params.config.k_base, run['profile'])
        run_experiment(params, tasks, BanPolicy(cfg), trace_sink=traces.append)
        for trace in traces:
            self.assertTrue(((trace.k_used >= 3) & (trace.k_used <= 8)).all())
