import math
import statistics

import numpy as np
from django.test import SimpleTestCase
from hypothesis import given, settings
from hypothesis import strategies as st

from experts.exceptions import ConfigurationError, InvalidArgument
from experts.utils import routing_policies as rp
from experts.utils.calibration import des_medians_from_logits
from experts.utils.moe_model import ModelConfig, RoutingContext
from experts.utils.numerics import softmax

# softmax of these logits is exactly the score column below (up to rounding)
PICK_SCORES = [0.30, 0.25, 0.22, 0.10, 0.05, 0.04, 0.02, 0.02]
PICK_LOGITS = np.log(PICK_SCORES)

# key position -> expected selection for each strategy, E=8, k=2, window 4
EXPECTED_PICKS = {
    0: dict(A={0, 1}, B={0, 1}, C={0, 1}, D={0, 1}, E={0, 1}),
    1: dict(A={0, 1}, B={0, 1}, C={0, 1}, D={0, 1}, E={0, 1}),
    2: dict(A={0, 1, 2}, B={0, 2}, C={0, 1, 2}, D={0, 2}, E={0, 2}),
    3: dict(A={0, 1, 3}, B={0, 3}, C={0, 1, 3}, D={0, 3}, E={0, 1}),
    4: dict(A={0, 1, 4}, B={0, 4}, C={0, 1}, D={0, 1}, E={0, 1}),
    5: dict(A={0, 1, 5}, B={0, 5}, C={0, 1}, D={0, 1}, E={0, 1}),
    6: dict(A={0, 1, 6}, B={0, 6}, C={0, 1}, D={0, 1}, E={0, 1}),
    7: dict(A={0, 1, 7}, B={0, 7}, C={0, 1}, D={0, 1}, E={0, 1}),
}


def brute_force_k(l_prime, t_prime, lam, beta, k_min, k_base):
    score = lam * (beta * l_prime + (1 - beta) * t_prime)
    raw = k_min + (k_base - k_min) * score
    k = math.floor(raw + 0.5)
    return min(max(k, k_min), k_base)


class BaselineRoutingTests(SimpleTestCase):
    def test_top_k_weights_are_softmax_over_the_selection(self):
        decision = rp.route_baseline([0.1, 2.0, 1.0, -1.0], 2)
        self.assertEqual(decision.experts, (1, 2))
        expected = softmax([2.0, 1.0])
        self.assertAlmostEqual(decision.weights[0], expected[0])
        self.assertAlmostEqual(sum(decision.weights), 1.0)

    def test_k_one_and_k_all(self):
        self.assertEqual(rp.route_baseline([0.0, 1.0, 1.0], 1).experts, (1,))
        self.assertEqual(rp.route_baseline([0.0, 1.0, 1.0], 3).k_used, 3)

    def test_pruned_expert_is_never_selected_before_finite_ones(self):
        decision = rp.route_baseline([5.0, -np.inf, 0.0], 2)
        self.assertEqual(decision.experts, (0, 2))


class PickStrategyTests(SimpleTestCase):
    def test_every_strategy_and_key_position(self):
        base = rp.route_baseline(PICK_LOGITS, 2)
        self.assertEqual(set(base.experts), {0, 1})
        for key, expected in EXPECTED_PICKS.items():
            for strategy, selection in expected.items():
                with self.subTest(key=key, strategy=strategy):
                    decision = rp.apply_pick(PICK_LOGITS, base, [key], rp.PickConfig(strategy=strategy))
                    self.assertEqual(set(decision.experts), selection)

    def test_already_selected_key_is_a_no_op(self):
        base = rp.route_baseline(PICK_LOGITS, 2)
        for strategy in rp.STRATEGIES:
            self.assertEqual(rp.apply_pick(PICK_LOGITS, base, [1], rp.PickConfig(strategy=strategy)), base)

    def test_replacement_keeps_other_keys(self):
        base = rp.route_baseline(PICK_LOGITS, 2)
        decision = rp.apply_pick(PICK_LOGITS, base, [0, 5], rp.PickConfig(strategy='B'))
        self.assertEqual(set(decision.experts), {0, 5})

    def test_logit_space_bias(self):
        base = rp.route_baseline([3.0, 2.0, 1.95, 0.0], 2)
        cfg = rp.PickConfig(strategy='E', bias_space='logit')
        self.assertEqual(set(rp.apply_pick([3.0, 2.0, 1.95, 0.0], base, [2], cfg).experts), {0, 2})

    def test_invalid_config(self):
        with self.assertRaises(InvalidArgument):
            rp.PickConfig(strategy='F')
        with self.assertRaises(InvalidArgument):
            rp.PickConfig(bias_fraction=1.5)
        with self.assertRaises(InvalidArgument):
            rp.apply_pick(PICK_LOGITS, rp.route_baseline(PICK_LOGITS, 2), [8], rp.PickConfig())

    def test_weights_stay_normalised(self):
        base = rp.route_baseline(PICK_LOGITS, 2)
        decision = rp.apply_pick(PICK_LOGITS, base, [6], rp.PickConfig(strategy='A'))
        self.assertAlmostEqual(sum(decision.weights), 1.0)
        self.assertTrue(all(w >= 0 for w in decision.weights))


class DynamicKTests(SimpleTestCase):
    def test_matches_brute_force_over_the_grid(self):
        grid = [i / 20 for i in range(21)]
        for k_min, k_base in ((3, 8), (3, 6)):
            for lam in (0.5, 0.6, 0.7, 0.8, 0.9):
                cfg = rp.PruningConfig(lambda_=lam, beta=0.5, k_min=k_min, k_base=k_base)
                for l_prime in grid:
                    for t_prime in grid:
                        self.assertEqual(
                            rp.dynamic_k(l_prime, t_prime, cfg),
                            brute_force_k(l_prime, t_prime, lam, 0.5, k_min, k_base),
                        )

    def test_out_of_range_sensitivity(self):
        with self.assertRaises(InvalidArgument):
            rp.dynamic_k(1.5, 0.0, rp.PruningConfig())

    def test_pruning_config_validation(self):
        with self.assertRaises(InvalidArgument):
            rp.PruningConfig(lambda_=0.0)
        with self.assertRaises(InvalidArgument):
            rp.PruningConfig(k_min=8, k_base=8)
        with self.assertRaises(InvalidArgument):
            rp.PruningConfig(r_min=0.9, r_max=0.9)


class BanTests(SimpleTestCase):
    def setUp(self):
        self.rng = np.random.default_rng(11)
        self.cfg = rp.PruningConfig(
            lambda_=0.7, beta=0.5, k_min=3, k_base=8, layer_scores=(0.0, 0.3, 1.0), r_min=0.4, r_max=0.9
        )

    def test_k_used_stays_within_bounds(self):
        for _ in range(500):
            logits = self.rng.normal(size=32) * self.rng.uniform(0.1, 5)
            for layer in range(3):
                self.assertTrue(3 <= rp.route_ban(logits, layer, self.cfg).k_used <= 8)

    def test_token_sensitivity_is_clamped(self):
        peaked = np.zeros(32)
        peaked[0] = 50.0
        self.assertEqual(rp.token_sensitivity(peaked, self.cfg), 0.0)
        self.assertEqual(rp.token_sensitivity(np.zeros(32), self.cfg), 1.0)

    def test_missing_layer_score(self):
        with self.assertRaises(ConfigurationError):
            rp.route_ban(np.zeros(32), 5, self.cfg)

    def test_banpick_without_keys_is_ban(self):
        pick = rp.PickConfig()
        for _ in range(200):
            logits = self.rng.normal(size=32)
            for layer in range(3):
                self.assertEqual(
                    rp.route_banpick(logits, layer, (), pick, self.cfg), rp.route_ban(logits, layer, self.cfg)
                )

    def test_banpick_adds_at_most_the_layer_keys(self):
        pick = rp.PickConfig()
        for _ in range(200):
            logits = self.rng.normal(size=32)
            ban = rp.route_ban(logits, 1, self.cfg)
            combined = rp.route_banpick(logits, 1, (4, 9), pick, self.cfg)
            self.assertLessEqual(combined.k_used - ban.k_used, 2)
            self.assertTrue(set(ban.experts) <= set(combined.experts))


def tau_oracle(logits, tau):
    probs = softmax(logits)
    order = sorted(range(len(probs)), key=lambda i: (-logits[i], i))
    total = 0.0
    for m, index in enumerate(order, start=1):
        total += probs[index]
        if total >= tau - rp.TAU_EPS:
            return set(order[:m])
    return set(order)


class BaselinePolicyTests(SimpleTestCase):
    def test_dynamic_tau_matches_prefix_sum_oracle(self):
        rng = np.random.default_rng(5)
        for _ in range(1000):
            logits = rng.normal(size=16) * rng.uniform(0.2, 4)
            tau = float(rng.choice([0.5, 0.7, 0.8, 0.9]))
            decision = rp.route_dynamic_tau(logits, rp.BaselineConfig(tau=tau))
            self.assertEqual(set(decision.experts), tau_oracle(logits, tau))

    def test_dynamic_tau_is_monotone_in_tau(self):
        rng = np.random.default_rng(6)
        for _ in range(300):
            logits = rng.normal(size=16)
            used = [rp.route_dynamic_tau(logits, rp.BaselineConfig(tau=t)).k_used for t in (0.7, 0.8, 0.9, 1.0)]
            self.assertEqual(used, sorted(used))
            self.assertEqual(used[-1], 16)

    def test_des_medians_match_sort_based_oracle(self):
        rng = np.random.default_rng(9)
        rows = [rng.normal(size=16) * rng.uniform(0.2, 3) for _ in range(1000)]
        medians = des_medians_from_logits(rows, 3, 8)
        for offset, j in enumerate(range(3, 8)):
            ratios = []
            for row in rows:
                ranked = sorted(softmax(row), reverse=True)
                ratios.append(ranked[j - 1] / ranked[j])
            self.assertEqual(medians[offset], statistics.median_low(ratios))

    def test_des_stops_at_the_first_large_gap(self):
        cfg = rp.BaselineConfig(des_medians=(2.0, 1.5), des_k_low=2)
        # ranks 2 and 3 are far apart -> stop at 2 experts
        logits = np.log([0.4, 0.35, 0.05, 0.04, 0.03, 0.13])
        self.assertEqual(rp.route_des(logits, cfg).k_used, 2)
        # flat tail -> all of des_k_base
        flat = np.log([0.3, 0.2, 0.18, 0.16, 0.16])
        self.assertEqual(rp.route_des(flat, cfg).k_used, 4)

    def test_odp_key_token_keeps_k_base(self):
        rng = np.random.default_rng(3)
        cfg = rp.BaselineConfig(des_medians=(5.0, 5.0, 5.0, 5.0, 5.0), des_k_low=3)
        for _ in range(200):
            self.assertEqual(rp.route_odp(rng.normal(size=16), True, cfg).k_used, 8)

    def test_key_token_flag(self):
        self.assertFalse(rp.is_key_token(np.ones(6), 2, 2.0))
        mass = np.array([1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 9.0])
        self.assertTrue(rp.is_key_token(mass, 9, 2.0))
        self.assertFalse(rp.is_key_token(mass, 0, 2.0))


class BuildPolicyTests(SimpleTestCase):
    def setUp(self):
        self.model = ModelConfig(num_layers=3, num_experts=8, k_base=4, d_model=8, vocab_size=16, num_domains=2)

    def test_names(self):
        cfg = rp.PolicyConfig()
        self.assertIsInstance(rp.build_policy('baseline', cfg, self.model), rp.BaselinePolicy)
        keys = rp.KeyExpertSet({0: (rp.KeyExpert(1, 2),)})
        policy = rp.build_policy('pick-b', cfg, self.model, keys=keys)
        self.assertEqual(policy.cfg.strategy, 'B')
        self.assertEqual(policy.layer_keys, {1: (2,)})

    def test_missing_inputs_are_configuration_errors(self):
        cfg = rp.PolicyConfig()
        for name in ('pick-d', 'ban', 'banpick', 'des', 'odp', 'fixed-k', 'nonsense'):
            with self.subTest(name=name), self.assertRaises(ConfigurationError):
                rp.build_policy(name, cfg, self.model)

    def test_des_medians_must_reach_k_base(self):
        cfg = rp.PolicyConfig(des_k_low=2)
        with self.assertRaises(ConfigurationError):
            rp.build_policy('des', cfg, self.model, medians=(1.5,))
        policy = rp.build_policy('des', cfg, self.model, medians=(1.5, 1.2))
        self.assertEqual(policy.cfg.des_k_base, 4)

    def test_disabled_phase_falls_back_to_top_k(self):
        keys = rp.KeyExpertSet({0: (rp.KeyExpert(0, 7),)})
        policy = rp.PickPolicy(4, keys, rp.PickConfig(strategy='A'), phases={'decode'})
        logits = np.arange(8, dtype=float)[::-1].copy()
        prefill = type('Context', (), {'layer': 0, 'phase': 'prefill', 'domain': None})()
        decode = type('Context', (), {'layer': 0, 'phase': 'decode', 'domain': None})()
        self.assertNotIn(7, policy.route(logits, prefill).experts)
        self.assertIn(7, policy.route(logits, decode).experts)

    def test_key_set_layer_map_unions_active_domains(self):
        keys = rp.KeyExpertSet({0: (rp.KeyExpert(1, 2),), 1: (rp.KeyExpert(1, 5), rp.KeyExpert(2, 0))})
        self.assertEqual(keys.layer_map(), {1: (2, 5), 2: (0,)})
        self.assertEqual(keys.layer_map((0,)), {1: (2,)})
        self.assertEqual(keys.max_keys_per_layer(), 2)

    def test_pick_without_active_domains_uses_the_sequence_domain(self):
        keys = rp.KeyExpertSet({0: (rp.KeyExpert(1, 6),), 1: (rp.KeyExpert(1, 7),)})
        policy = rp.PickPolicy(4, keys, rp.PickConfig(strategy='A'))
        logits = np.arange(8, dtype=float)[::-1].copy()

        def context(domain):
            return RoutingContext(layer=1, position=0, phase='prefill', sequence=0,
                                  attention_mass=np.ones(1), domain=domain)

        self.assertEqual(set(policy.route(logits, context(0)).experts), {0, 1, 2, 3, 6})
        self.assertEqual(set(policy.route(logits, context(1)).experts), {0, 1, 2, 3, 7})
        self.assertEqual(set(policy.route(logits, context(None)).experts), {0, 1, 2, 3, 6, 7})
        self.assertEqual(set(policy.route(logits, context(2)).experts), {0, 1, 2, 3})

        fixed = rp.PickPolicy(4, keys, rp.PickConfig(strategy='A', active_domains=(0, 1)))
        self.assertEqual(set(fixed.route(logits, context(0)).experts), {0, 1, 2, 3, 6, 7})


# multiples of 1/4 keep every shifted logit exactly representable
dyadic_logits = st.lists(st.integers(-64, 64), min_size=8, max_size=8).map(lambda v: np.array(v) / 4.0)
shifts = st.integers(-200, 200).map(float)


class ShiftInvarianceTests(SimpleTestCase):
    prune = rp.PruningConfig(lambda_=0.7, beta=0.5, k_min=2, k_base=4, layer_scores=(0.5,), r_min=0.3, r_max=0.9)
    baseline = rp.BaselineConfig(tau=0.8, des_medians=(1.5, 1.2), des_k_low=2)

    def routes(self, logits):
        base = rp.route_baseline(logits, 4)
        yield 'baseline', base
        for strategy in 'ABCDE':
            yield f'pick-{strategy}', rp.apply_pick(logits, base, (5, 7), rp.PickConfig(strategy=strategy))
        yield 'ban', rp.route_ban(logits, 0, self.prune)
        yield 'banpick', rp.route_banpick(logits, 0, (6,), rp.PickConfig(), self.prune)
        yield 'dynamic-tau', rp.route_dynamic_tau(logits, self.baseline)
        yield 'des', rp.route_des(logits, self.baseline)
        yield 'odp', rp.route_odp(logits, False, self.baseline)

    @given(dyadic_logits, shifts)
    @settings(max_examples=200, deadline=None)
    def test_constant_logit_shift_changes_no_decision(self, logits, shift):
        for (name, plain), (_, shifted) in zip(self.routes(logits), self.routes(logits + shift)):
            self.assertEqual(plain, shifted, msg=name)
