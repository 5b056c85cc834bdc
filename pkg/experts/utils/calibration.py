"""
Offline pipelines that produce what the routing policies consume.

    usage profile -> candidate experts -> prune impact -> key experts
    layer sensitivity + token ratio bounds -> sensitivity profile (Ban)
    DES medians (DES / ODP baselines)

Every reduction walks samples in corpus order, so the results do not depend
on how many workers computed the per-sample terms.
"""
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from experts.exceptions import CalibrationError, InvalidArgument
from experts.utils.harness import DEFAULT_BATCH_SIZE, correctness, ordered_map, run_corpus
from experts.utils.moe_model import PHASES, forward_with_pruned_expert, resume_forward
from experts.utils.numerics import (
    cum_ratio,
    descending_order,
    lower_median,
    population_std,
    restricted_kl,
    softmax,
)
from experts.utils.routing_policies import (
    BaselinePolicy,
    KeyExpert,
    KeyExpertSet,
    LayerOverridePolicy,
    PickConfig,
    PickPolicy,
)
from experts.utils.storage import round_float

logger = logging.getLogger(__name__)

MIN_RATIO_SAMPLES = 100
DEFAULT_KL_TOP_N = 1000
# below this spread every layer is treated as equally sensitive
FLAT_SENSITIVITY = 1e-12


@dataclass
class UsageStats:
    """Selection counts per domain, layer and expert, plus token associations."""
    k_base: int
    policy: str
    domain_counts: np.ndarray
    domain_tokens: np.ndarray
    token_counts: np.ndarray
    phase_counts: dict = field(default_factory=dict)
    phase_tokens: dict = field(default_factory=dict)

    @classmethod
    def empty(cls, config, policy='baseline'):
        L, E = config.num_layers, config.num_experts
        return cls(
            k_base=config.k_base,
            policy=policy,
            domain_counts=np.zeros((config.num_domains, L, E), dtype=np.int64),
            domain_tokens=np.zeros(config.num_domains, dtype=np.int64),
            token_counts=np.zeros((L, E, config.vocab_size), dtype=np.int64),
            phase_counts={phase: np.zeros((L, E), dtype=np.int64) for phase in PHASES},
            phase_tokens={phase: 0 for phase in PHASES},
        )

    @property
    def counts(self):
        return self.domain_counts.sum(axis=0)

    @property
    def total_tokens(self):
        return int(self.domain_tokens.sum())

    @property
    def num_domains(self):
        return self.domain_counts.shape[0]

    @property
    def num_layers(self):
        return self.domain_counts.shape[1]

    @property
    def num_experts(self):
        return self.domain_counts.shape[2]

    @property
    def uniform_rate(self):
        return self.k_base / self.num_experts

    def frequency(self, domain=None):
        """(layer, expert) selection rate per token, overall or for one domain."""
        if domain is None:
            counts, tokens = self.counts, self.total_tokens
        else:
            counts, tokens = self.domain_counts[domain], int(self.domain_tokens[domain])
        if tokens == 0:
            return np.zeros(counts.shape)
        return counts / tokens

    def token_assoc(self, layer, expert, top=None):
        """[(token, count), ...] routed to the expert, most frequent first."""
        row = self.token_counts[layer, expert]
        tokens = np.flatnonzero(row)
        ranked = sorted(((int(t), int(row[t])) for t in tokens), key=lambda item: (-item[1], item[0]))
        return ranked if top is None else ranked[:top]

    def to_dict(self):
        assoc = {}
        for layer, expert in zip(*np.nonzero(self.token_counts.sum(axis=2))):
            assoc[f'{layer}:{expert}'] = [list(pair) for pair in self.token_assoc(layer, expert)]
        return {
            'k_base': self.k_base,
            'policy': self.policy,
            'vocab_size': int(self.token_counts.shape[2]),
            'domain_counts': self.domain_counts.tolist(),
            'domain_tokens': self.domain_tokens.tolist(),
            'phase_counts': {phase: counts.tolist() for phase, counts in sorted(self.phase_counts.items())},
            'phase_tokens': dict(sorted(self.phase_tokens.items())),
            'token_assoc': assoc,
        }

    @classmethod
    def from_dict(cls, data):
        domain_counts = np.array(data['domain_counts'], dtype=np.int64)
        _, L, E = domain_counts.shape
        token_counts = np.zeros((L, E, int(data['vocab_size'])), dtype=np.int64)
        for slot, pairs in data.get('token_assoc', {}).items():
            layer, expert = (int(part) for part in slot.split(':'))
            for token, count in pairs:
                token_counts[layer, expert, token] = count
        return cls(
            k_base=int(data['k_base']),
            policy=data.get('policy', 'baseline'),
            domain_counts=domain_counts,
            domain_tokens=np.array(data['domain_tokens'], dtype=np.int64),
            token_counts=token_counts,
            phase_counts={p: np.array(c, dtype=np.int64) for p, c in data.get('phase_counts', {}).items()},
            phase_tokens={p: int(n) for p, n in data.get('phase_tokens', {}).items()},
        )


def profile_usage(params, corpus, policy, batch_size=DEFAULT_BATCH_SIZE):
    """Count how often ``policy`` selects every expert on the corpus, in both phases."""
    if not len(corpus):
        raise InvalidArgument('cannot profile an empty corpus')
    corpus.validate(params.config)
    stats = UsageStats.empty(params.config, policy.name)

    for batch, result in run_corpus(params, corpus, policy, batch_size):
        selected = result.trace.selected
        length = selected.shape[1]
        for row, domain in enumerate(batch.domains):
            stats.domain_counts[domain] += selected[row].sum(axis=0)
            stats.domain_tokens[domain] += length
        for pos, phase in enumerate(result.trace.phases):
            stats.phase_counts[phase] += selected[:, pos].sum(axis=0)
            stats.phase_tokens[phase] += selected.shape[0]
        b, t, layer, expert = np.nonzero(selected)
        np.add.at(stats.token_counts, (layer, expert, batch.tokens[b, t]), 1)

    logger.info('Profiled %d tokens under %s', stats.total_tokens, policy.name)
    return stats


@dataclass(frozen=True)
class Candidate:
    layer: int
    domain: int
    expert: int
    frequency: float


@dataclass
class CandidateSet:
    """(layer, domain) -> candidates, most frequent first."""
    entries: dict = field(default_factory=dict)

    @property
    def is_empty(self):
        return not any(self.entries.values())

    def __len__(self):
        return sum(len(items) for items in self.entries.values())

    def experts(self):
        """Sorted (layer, expert, domain) triples."""
        return sorted((c.layer, c.expert, c.domain) for items in self.entries.values() for c in items)

    def for_domain(self, domain):
        return [c for (_, d), items in sorted(self.entries.items()) if d == domain for c in items]

    def to_dict(self):
        return {
            'candidates': [
                {'layer': c.layer, 'domain': c.domain, 'expert': c.expert, 'frequency': c.frequency}
                for _, items in sorted(self.entries.items()) for c in items
            ]
        }

    @classmethod
    def from_dict(cls, data):
        entries = {}
        for item in data.get('candidates', ()):
            candidate = Candidate(int(item['layer']), int(item['domain']), int(item['expert']), float(item['frequency']))
            entries.setdefault((candidate.layer, candidate.domain), []).append(candidate)
        return cls({slot: tuple(items) for slot, items in entries.items()})


def select_candidates(stats, top_m=3, min_mult=2.0):
    """Per layer and domain, the ``top_m`` most used experts at >= min_mult x the uniform rate."""
    if top_m < 1 or min_mult < 0:
        raise InvalidArgument('top_m must be positive and min_mult non-negative')
    floor = min_mult * stats.uniform_rate
    entries = {}
    for domain in range(stats.num_domains):
        if stats.domain_tokens[domain] == 0:
            continue
        frequency = stats.frequency(domain)
        for layer in range(stats.num_layers):
            chosen = tuple(
                Candidate(layer, domain, int(expert), round_float(frequency[layer, expert]))
                for expert in descending_order(frequency[layer])[:top_m]
                if frequency[layer, expert] >= floor
            )
            if chosen:
                entries[(layer, domain)] = chosen
    logger.info('Selected %d candidate experts', sum(len(c) for c in entries.values()))
    return CandidateSet(entries)


@dataclass(frozen=True)
class ImpactEntry:
    layer: int
    expert: int
    domain: int
    kl: float
    samples: int


@dataclass
class KLImpactReport:
    entries: tuple = ()
    kl_top_n: int = DEFAULT_KL_TOP_N

    @property
    def domains(self):
        return sorted({entry.domain for entry in self.entries})

    def for_domain(self, domain):
        return [entry for entry in self.entries if entry.domain == domain]

    def to_dict(self):
        return {
            'kl_top_n': self.kl_top_n,
            'entries': [
                {'layer': e.layer, 'expert': e.expert, 'domain': e.domain, 'kl': e.kl, 'samples': e.samples}
                for e in self.entries
            ],
        }

    @classmethod
    def from_dict(cls, data):
        return cls(
            entries=tuple(
                ImpactEntry(int(e['layer']), int(e['expert']), int(e['domain']), float(e['kl']), int(e['samples']))
                for e in data.get('entries', ())
            ),
            kl_top_n=int(data.get('kl_top_n', DEFAULT_KL_TOP_N)),
        )


def default_kl_top_n(config):
    return min(DEFAULT_KL_TOP_N, config.vocab_size)


def _final_kls(reference, changed, n):
    p = reference.final_distributions()
    q = changed.final_distributions()
    return [restricted_kl(p[row], q[row], n) for row in range(p.shape[0])]


def _mean(values):
    return math.fsum(values) / len(values) if values else 0.0


def prune_impact(params, corpus, candidates, kl_top_n=None, workers=1, batch_size=DEFAULT_BATCH_SIZE):
    """Mean restricted KL of the final-position output when one candidate is pruned.

    Each candidate is evaluated on its own domain's sequences against the
    unpruned baseline run.
    """
    n = default_kl_top_n(params.config) if kl_top_n is None else kl_top_n
    if not 1 <= n <= params.config.vocab_size:
        raise InvalidArgument(f'kl_top_n={n} out of range')
    if candidates.is_empty:
        logger.warning('No candidate experts to prune')
        return KLImpactReport((), n)

    policy = BaselinePolicy(params.config.k_base)
    references = {}
    for domain in sorted({domain for _, _, domain in candidates.experts()}):
        indices = corpus.indices_for(domain)
        if not indices:
            logger.warning('No calibration sequences for domain %d; its candidates are skipped', domain)
            continue
        references[domain] = run_corpus(params, corpus, policy, batch_size, indices)

    def impact(slot):
        layer, expert, domain = slot
        kls = []
        for batch, reference in references[domain]:
            pruned = forward_with_pruned_expert(params, batch.tokens, policy, (layer, expert), reference=reference)
            kls.extend(_final_kls(reference, pruned, n))
        logger.debug('L%dE%d (domain %d): KL %.6g over %d samples', layer, expert, domain, _mean(kls), len(kls))
        return ImpactEntry(layer, expert, domain, round_float(_mean(kls)), len(kls))

    slots = [slot for slot in candidates.experts() if slot[2] in references]
    entries = ordered_map(impact, slots, workers)
    entries.sort(key=lambda e: (e.domain, e.layer, e.expert))
    return KLImpactReport(tuple(entries), n)


def identify_key_experts(report, z=2.0):
    """Per domain, candidates whose impact exceeds mean + z * std of that domain.

    When nothing clears the bar the single largest impact is taken, the lowest
    (layer, expert) winning ties.
    """
    domains = {}
    for domain in report.domains:
        entries = report.for_domain(domain)
        impacts = np.array([e.kl for e in entries])
        if np.isinf(impacts).any():
            chosen = [e for e in entries if math.isinf(e.kl)]
        else:
            threshold = impacts.mean() + z * population_std(impacts)
            chosen = [e for e in entries if e.kl > threshold]
        if not chosen:
            chosen = [max(entries, key=lambda e: (e.kl, -e.layer, -e.expert))]
        domains[domain] = tuple(
            KeyExpert(e.layer, e.expert, e.kl) for e in sorted(chosen, key=lambda e: (e.layer, e.expert))
        )
        logger.info('Domain %d key experts: %s', domain, [(k.layer, k.expert) for k in domains[domain]])
    return KeyExpertSet(domains)


def key_experts_to_dict(keys):
    return {
        str(domain): [{'layer': k.layer, 'expert': k.expert, 'kl_impact': k.kl_impact} for k in items]
        for domain, items in sorted(keys.domains.items())
    }


def key_experts_from_dict(data):
    return KeyExpertSet({
        int(domain): tuple(KeyExpert(int(k['layer']), int(k['expert']), float(k['kl_impact'])) for k in items)
        for domain, items in data.items()
    })


@dataclass(frozen=True)
class LayerSensitivity:
    w: tuple
    l_prime: tuple
    k_low: int


def normalize_sensitivity(w):
    """Min-max normalise; a flat profile maps every layer to 1."""
    low, high = min(w), max(w)
    if high - low < FLAT_SENSITIVITY:
        return tuple(1.0 for _ in w)
    return tuple((value - low) / (high - low) for value in w)


def calibrate_layer_sensitivity(params, corpus, k_low, kl_top_n=None, workers=1, batch_size=DEFAULT_BATCH_SIZE):
    """W_l: output KL when only layer l is cut from k_base to ``k_low`` experts."""
    k_base = params.config.k_base
    if not 1 <= k_low < k_base:
        raise InvalidArgument(f'k_low={k_low} must lie in 1..{k_base - 1}')
    if not len(corpus):
        raise InvalidArgument('cannot calibrate on an empty corpus')
    n = default_kl_top_n(params.config) if kl_top_n is None else kl_top_n
    references = run_corpus(params, corpus, BaselinePolicy(k_base), batch_size)

    def layer_kl(layer):
        policy = LayerOverridePolicy(k_base, layer, k_low)
        kls = []
        for _, reference in references:
            kls.extend(_final_kls(reference, resume_forward(params, reference, policy, layer), n))
        return _mean(kls)

    w = tuple(round_float(value) for value in ordered_map(layer_kl, range(params.config.num_layers), workers))
    logger.info('Layer sensitivity W: %s', ', '.join(f'{value:.4g}' for value in w))
    return LayerSensitivity(w, tuple(round_float(value) for value in normalize_sensitivity(w)), k_low)


def _router_rows(runs):
    for _, result in runs:
        yield from result.trace.logits.reshape(-1, result.trace.logits.shape[-1])


def token_ratio_bounds(rows, k_min, k_base, min_samples=MIN_RATIO_SAMPLES):
    """Exact (min, max) of the top-k_min / top-k_base weight ratio over logit rows."""
    ratios = [cum_ratio(softmax(row), k_min, k_base) for row in rows]
    if len(ratios) < min_samples:
        raise CalibrationError(f'{len(ratios)} token-layer samples, at least {min_samples} are needed')
    r_min, r_max = min(ratios), max(ratios)
    if r_min == r_max:
        raise CalibrationError(f'token ratios are degenerate (R_min = R_max = {r_min:.9g})')
    return r_min, r_max


def calibrate_token_ratios(params, corpus, k_min, min_samples=MIN_RATIO_SAMPLES, batch_size=DEFAULT_BATCH_SIZE,
                           reference=None):
    k_base = params.config.k_base
    if not 1 <= k_min < k_base:
        raise InvalidArgument(f'k_min={k_min} must lie in 1..{k_base - 1}')
    runs = reference if reference is not None else run_corpus(params, corpus, BaselinePolicy(k_base), batch_size)
    bounds = tuple(round_float(value) for value in token_ratio_bounds(_router_rows(runs), k_min, k_base, min_samples))
    logger.info('Token ratio bounds: R_min=%.6g R_max=%.6g', *bounds)
    return bounds


def des_medians_from_logits(rows, k_low, k_base):
    """Lower medians of r_(j) / r_(j+1) for j = k_low .. k_base-1 (1-based ranks)."""
    if not 1 <= k_low < k_base:
        raise InvalidArgument(f'k_low={k_low} must lie in 1..{k_base - 1}')
    levels = [[] for _ in range(k_low, k_base)]
    for row in rows:
        ranked = np.sort(softmax(row))[::-1]
        if ranked.size < k_base:
            raise InvalidArgument('fewer experts than k_base')
        for offset, j in enumerate(range(k_low, k_base)):
            if ranked[j] > 0:
                levels[offset].append(float(ranked[j - 1] / ranked[j]))
    medians = []
    for j, ratios in zip(range(k_low, k_base), levels):
        if not ratios:
            raise CalibrationError(f'no usable ratio samples at level {j}')
        medians.append(lower_median(ratios))
    return tuple(medians)


def calibrate_des_medians(params, corpus, k_low, batch_size=DEFAULT_BATCH_SIZE, reference=None):
    k_base = params.config.k_base
    runs = reference if reference is not None else run_corpus(params, corpus, BaselinePolicy(k_base), batch_size)
    medians = tuple(round_float(m) for m in des_medians_from_logits(_router_rows(runs), k_low, k_base))
    logger.info('DES medians from level %d: %s', k_low, ', '.join(f'{m:.4g}' for m in medians))
    return medians


@dataclass(frozen=True)
class SensitivityProfile:
    w: tuple
    l_prime: tuple
    r_min: float
    r_max: float
    k_low: int

    @property
    def w_min(self):
        return min(self.w)

    @property
    def w_max(self):
        return max(self.w)

    def to_dict(self):
        return {
            'W': list(self.w),
            'W_min': self.w_min,
            'W_max': self.w_max,
            'L_prime': list(self.l_prime),
            'R_min': self.r_min,
            'R_max': self.r_max,
            'k_low': self.k_low,
        }

    @classmethod
    def from_dict(cls, data):
        return cls(
            w=tuple(float(v) for v in data['W']),
            l_prime=tuple(float(v) for v in data['L_prime']),
            r_min=float(data['R_min']),
            r_max=float(data['R_max']),
            k_low=int(data['k_low']),
        )


def build_sensitivity_profile(layers, bounds):
    r_min, r_max = bounds
    return SensitivityProfile(layers.w, layers.l_prime, r_min, r_max, layers.k_low)


@dataclass(frozen=True)
class FailureSetResult:
    failure_size: int
    baseline_correct: int
    enhanced_correct: int


def failure_set(params, tasks, batch_size=DEFAULT_BATCH_SIZE):
    """Indices of the task items the baseline model gets wrong."""
    if not tasks.task_mode:
        raise InvalidArgument('failure sets need task items with answer tokens')
    outcome = correctness(run_corpus(params, tasks, BaselinePolicy(params.config.k_base), batch_size))
    return [index for index in sorted(outcome) if not outcome[index]]


def _recovered(params, tasks, keys, indices, batch_size):
    if keys.is_empty or not indices:
        return 0
    policy = PickPolicy(params.config.k_base, keys, PickConfig(strategy='A'), name='pick-a')
    return sum(correctness(run_corpus(params, tasks, policy, batch_size, indices)).values())


def validate_failure_set(params, keys, tasks, batch_size=DEFAULT_BATCH_SIZE):
    """Re-run the baseline failures with each item's domain keys forcibly added."""
    failures = failure_set(params, tasks, batch_size)
    if not failures:
        return FailureSetResult(0, 0, 0)
    enhanced = 0
    for domain in sorted({tasks.domains[i] for i in failures}):
        items = [i for i in failures if tasks.domains[i] == domain]
        enhanced += _recovered(params, tasks, keys.restricted_to([domain]), items, batch_size)
    logger.info('Failure set: %d items, %d recovered', len(failures), enhanced)
    return FailureSetResult(len(failures), 0, enhanced)


def validate_candidates(params, candidates, tasks, batch_size=DEFAULT_BATCH_SIZE):
    """(layer, expert, domain) -> failure items recovered by forcing in that expert alone."""
    failures = failure_set(params, tasks, batch_size)
    recovered = {}
    for layer, expert, domain in candidates.experts():
        items = [i for i in failures if tasks.domains[i] == domain]
        keys = KeyExpertSet({domain: (KeyExpert(layer, expert),)})
        recovered[(layer, expert, domain)] = _recovered(params, tasks, keys, items, batch_size)
    return recovered
