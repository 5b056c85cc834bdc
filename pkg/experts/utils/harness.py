"""
Synthetic corpora and the experiments that compare routing policies on them.

Compute savings are measured by counting expert activations; wall-clock time
is only recorded when asked for, since it depends on the machine.
"""
import itertools
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from experts.exceptions import ConfigurationError, InvalidArgument
from experts.utils.moe_model import default_answer_tokens, domain_vocabulary, forward
from experts.utils.routing_policies import (
    BanPolicy,
    BaselinePolicy,
    DynamicTauPolicy,
    FixedKPolicy,
    KeyExpert,
    KeyExpertSet,
    PickConfig,
    PickPolicy,
    baseline_config,
    pruning_config,
)
from experts.utils.storage import round_float

logger = logging.getLogger(__name__)

DEFAULT_BATCH_SIZE = 64
# exponent of the within-slice Zipf profile
ZIPF_EXPONENT = 0.5


@dataclass(frozen=True)
class Corpus:
    domains: tuple
    sequences: tuple
    answers: tuple = None
    seed: int = 0
    prompt_len: int = None

    def __post_init__(self):
        if len(self.domains) != len(self.sequences):
            raise InvalidArgument('one domain label per sequence is required')
        if self.answers is not None and len(self.answers) != len(self.sequences):
            raise InvalidArgument('one answer per sequence is required in task mode')

    def __len__(self):
        return len(self.sequences)

    @property
    def task_mode(self):
        return self.answers is not None

    @property
    def total_tokens(self):
        return sum(len(s) for s in self.sequences)

    def indices_for(self, domain):
        return tuple(i for i, d in enumerate(self.domains) if d == domain)

    def subset(self, indices):
        indices = tuple(indices)
        return Corpus(
            domains=tuple(self.domains[i] for i in indices),
            sequences=tuple(self.sequences[i] for i in indices),
            answers=None if self.answers is None else tuple(self.answers[i] for i in indices),
            seed=self.seed,
            prompt_len=self.prompt_len,
        )

    def domain_subset(self, domain):
        return self.subset(self.indices_for(domain))

    def validate(self, config):
        for domain in self.domains:
            if not 0 <= domain < config.num_domains:
                raise InvalidArgument(f'domain label {domain} outside 0..{config.num_domains - 1}')
        for sequence in self.sequences:
            if not sequence:
                raise InvalidArgument('empty sequence in corpus')
            if min(sequence) < 0 or max(sequence) >= config.vocab_size:
                raise InvalidArgument('corpus token outside the vocabulary')
        return self

    def to_dict(self):
        return {
            'domains': list(self.domains),
            'sequences': [list(s) for s in self.sequences],
            'answers': None if self.answers is None else list(self.answers),
            'seed': self.seed,
            'prompt_len': self.prompt_len,
        }

    @classmethod
    def from_dict(cls, data):
        answers = data.get('answers')
        return cls(
            domains=tuple(int(d) for d in data['domains']),
            sequences=tuple(tuple(int(t) for t in s) for s in data['sequences']),
            answers=None if answers is None else tuple(int(a) for a in answers),
            seed=int(data.get('seed', 0)),
            prompt_len=data.get('prompt_len'),
        )


def gen_corpus(config, domains, sequences_per_domain, seq_len, task_mode=True, seed=0,
               answer_tokens=None, concentration=0.9, prompt_len=None, stream=0):
    """Seeded sequences per domain, drawn mostly from the domain's vocabulary slice.

    Within its slice a domain favours tokens by a seeded Zipf-like profile; the
    remaining ``1 - concentration`` of draws come from the other slices. Different
    ``stream`` values give independent corpora for the same seed.
    """
    if sequences_per_domain < 1 or seq_len < 1:
        raise InvalidArgument('sequences_per_domain and seq_len must be positive')
    if not 0 < concentration <= 1:
        raise InvalidArgument('concentration must lie in (0, 1]')
    answer_tokens = tuple(answer_tokens or default_answer_tokens(config))
    vocabulary = domain_vocabulary(config, answer_tokens)
    rng = np.random.default_rng([int(seed), 2, int(stream)])

    labels, sequences = [], []
    for domain in domains:
        if not 0 <= domain < config.num_domains:
            raise InvalidArgument(f'domain {domain} out of range')
        own = vocabulary[domain]
        others = np.concatenate([v for d, v in enumerate(vocabulary) if d != domain] or [own])
        profile = 1.0 / np.arange(1, own.size + 1) ** ZIPF_EXPONENT
        profile = rng.permutation(profile / profile.sum())
        for _ in range(sequences_per_domain):
            from_own = rng.random(seq_len) < concentration
            drawn = np.where(
                from_own,
                rng.choice(own, size=seq_len, p=profile),
                rng.choice(others, size=seq_len),
            )
            labels.append(int(domain))
            sequences.append(tuple(int(t) for t in drawn))

    answers = tuple(answer_tokens[d] for d in labels) if task_mode else None
    logger.debug('Generated %d sequences over domains %s', len(sequences), list(domains))
    return Corpus(tuple(labels), tuple(sequences), answers, int(seed), prompt_len)


@dataclass
class Batch:
    indices: tuple
    tokens: np.ndarray
    domains: np.ndarray
    answers: np.ndarray = None


def iter_batches(corpus, batch_size=DEFAULT_BATCH_SIZE, indices=None):
    """Equal-length batches in a fixed order: by length, then corpus index."""
    chosen = range(len(corpus)) if indices is None else indices
    by_length = {}
    for index in chosen:
        by_length.setdefault(len(corpus.sequences[index]), []).append(index)
    for length in sorted(by_length):
        members = by_length[length]
        for start in range(0, len(members), batch_size):
            part = tuple(members[start:start + batch_size])
            yield Batch(
                indices=part,
                tokens=np.array([corpus.sequences[i] for i in part], dtype=np.int64),
                domains=np.array([corpus.domains[i] for i in part], dtype=np.int64),
                answers=None if corpus.answers is None else np.array([corpus.answers[i] for i in part]),
            )


def run_batch(params, corpus, batch, policy):
    decode_from = corpus.prompt_len
    if decode_from is not None and decode_from >= batch.tokens.shape[1]:
        decode_from = None
    return forward(params, batch.tokens, policy, decode_from=decode_from, sequence_ids=batch.indices,
                   domains=batch.domains)


def run_corpus(params, corpus, policy, batch_size=DEFAULT_BATCH_SIZE, indices=None):
    """[(batch, ForwardResult), ...] over the corpus."""
    return [(batch, run_batch(params, corpus, batch, policy)) for batch in iter_batches(corpus, batch_size, indices)]


def ordered_map(function, items, workers=1):
    """``map`` that may fan out over threads but always returns input order."""
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [function(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(function, items))


def correctness(runs):
    """corpus index -> whether the final-position argmax is the answer."""
    outcome = {}
    for batch, result in runs:
        if batch.answers is None:
            continue
        for index, predicted, answer in zip(batch.indices, result.predictions(), batch.answers):
            outcome[index] = bool(predicted == answer)
    return outcome


@dataclass
class MetricsReport:
    policy: str
    accuracy: float
    avg_topk: float
    activations: int
    est_flops: int
    runtime_s: float = 0.0
    token_layers: int = 0
    speedup_proxy: float = 1.0
    domain_accuracy: dict = field(default_factory=dict)

    CSV_COLUMNS = ('policy', 'accuracy', 'avg_topk', 'activations', 'est_flops', 'runtime_s')

    def as_row(self):
        return {name: getattr(self, name) for name in self.CSV_COLUMNS}

    def to_dict(self):
        return {
            'policy': self.policy,
            'accuracy': self.accuracy,
            'avg_topk': self.avg_topk,
            'activations': self.activations,
            'est_flops': self.est_flops,
            'runtime_s': self.runtime_s,
            'token_layers': self.token_layers,
            'speedup_proxy': self.speedup_proxy,
            'domain_accuracy': {str(k): v for k, v in sorted(self.domain_accuracy.items())},
        }

    @classmethod
    def from_dict(cls, data):
        return cls(
            policy=data['policy'],
            accuracy=float(data['accuracy']),
            avg_topk=float(data['avg_topk']),
            activations=int(data['activations']),
            est_flops=int(data['est_flops']),
            runtime_s=float(data.get('runtime_s', 0.0)),
            token_layers=int(data.get('token_layers', 0)),
            speedup_proxy=float(data.get('speedup_proxy', 1.0)),
            domain_accuracy={int(k): float(v) for k, v in data.get('domain_accuracy', {}).items()},
        )


def expert_flops(config, activations):
    return int(activations) * 2 * config.d_model * config.d_expert * 2


def _fraction(hits):
    return sum(hits) / len(hits) if hits else math.nan


def run_experiment(params, corpus, policy, record_runtime=False, batch_size=DEFAULT_BATCH_SIZE, trace_sink=None):
    """Run ``policy`` over the corpus and aggregate accuracy and activation counts."""
    check = getattr(policy, 'check', None)
    if check is not None:
        check(params.config)
    corpus.validate(params.config)

    started = time.perf_counter()
    runs = run_corpus(params, corpus, policy, batch_size)
    elapsed = time.perf_counter() - started if record_runtime else 0.0

    activations = 0
    token_layers = 0
    for _, result in runs:
        activations += result.trace.total_activations
        token_layers += result.trace.k_used.size
        if trace_sink is not None:
            trace_sink(result.trace)

    outcome = correctness(runs)
    per_domain = {}
    for index, hit in sorted(outcome.items()):
        per_domain.setdefault(corpus.domains[index], []).append(hit)

    report = MetricsReport(
        policy=policy.name,
        accuracy=round_float(_fraction([outcome[i] for i in sorted(outcome)])),
        avg_topk=round_float(activations / token_layers) if token_layers else 0.0,
        activations=activations,
        est_flops=expert_flops(params.config, activations),
        runtime_s=round_float(elapsed),
        token_layers=token_layers,
        domain_accuracy={d: round_float(_fraction(hits)) for d, hits in sorted(per_domain.items())},
    )
    logger.info('%s: accuracy=%.4f avg_topk=%.3f', report.policy, report.accuracy, report.avg_topk)
    return report


def _rank_key(item):
    position, report = item
    accuracy = -math.inf if math.isnan(report.accuracy) else report.accuracy
    return (-accuracy, report.activations, position)


def compare_policies(params, corpus, policies, record_runtime=False, batch_size=DEFAULT_BATCH_SIZE, trace_sinks=None):
    """One report per policy on the identical corpus, best accuracy first.

    ``trace_sinks`` maps a policy to the callable receiving its traces.
    """
    if len(policies) < 2:
        raise InvalidArgument('compare_policies needs at least two policies')
    reports = [
        run_experiment(params, corpus, policy, record_runtime, batch_size, trace_sinks(policy) if trace_sinks else None)
        for policy in policies
    ]
    reference = next((r for r in reports if r.policy == 'baseline'), max(reports, key=lambda r: r.activations))
    for report in reports:
        report.speedup_proxy = round_float(reference.activations / report.activations) if report.activations else 0.0
    return [report for _, report in sorted(enumerate(reports), key=_rank_key)]


@dataclass
class MultiDomainRow:
    domains: tuple
    domain_accuracy: dict
    avg_topk: float


def domain_subsets(num_domains):
    """Every non-empty subset of domains, smallest first."""
    ids = range(num_domains)
    return [combo for size in range(1, num_domains + 1) for combo in itertools.combinations(ids, size)]


def multi_domain_experiment(params, tasks, keys, subsets=None, pick=None, batch_size=DEFAULT_BATCH_SIZE):
    """Pick with the union of the key sets of each domain subset.

    Returns the baseline row (no domain enhanced) followed by one row per subset.
    """
    pick = pick or PickConfig()
    subsets = [tuple(s) for s in (subsets or domain_subsets(params.config.num_domains))]
    if any(not subset for subset in subsets):
        raise InvalidArgument('domain subsets must be non-empty')
    missing = {d for subset in subsets for d in subset} - set(keys.domains)
    if missing:
        raise ConfigurationError(f'no key experts for domains {sorted(missing)}')

    base = run_experiment(params, tasks, BaselinePolicy(params.config.k_base), batch_size=batch_size)
    rows = [MultiDomainRow((), base.domain_accuracy, base.avg_topk)]
    for subset in subsets:
        policy = PickPolicy(
            params.config.k_base,
            keys,
            replace(pick, active_domains=subset),
            name='pick-' + '+'.join(str(d) for d in subset),
        )
        report = run_experiment(params, tasks, policy, batch_size=batch_size)
        rows.append(MultiDomainRow(subset, report.domain_accuracy, report.avg_topk))
    return rows


@dataclass
class InclusionRow:
    layer: int
    expert: int
    domain: int
    accuracy: float
    delta: float


def forced_inclusion_grid(params, tasks, candidates, batch_size=DEFAULT_BATCH_SIZE):
    """Add each candidate expert alone (forced addition) and record the accuracy change."""
    k_base = params.config.k_base
    baseline = {}
    rows = []
    for layer, expert, domain in candidates.experts():
        domain_tasks = tasks.domain_subset(domain)
        if not len(domain_tasks):
            continue
        if domain not in baseline:
            baseline[domain] = run_experiment(params, domain_tasks, BaselinePolicy(k_base), batch_size=batch_size).accuracy
        keys = KeyExpertSet({domain: (KeyExpert(layer, expert),)})
        policy = PickPolicy(k_base, keys, PickConfig(strategy='A'), name=f'force-L{layer}E{expert}')
        accuracy = run_experiment(params, domain_tasks, policy, batch_size=batch_size).accuracy
        rows.append(InclusionRow(layer, expert, domain, accuracy, accuracy - baseline[domain]))
    return rows


def fixed_k_sweep(params, tasks, ks=None, batch_size=DEFAULT_BATCH_SIZE):
    k_base = params.config.k_base
    ks = ks or range(k_base, 1, -1)
    return [run_experiment(params, tasks, FixedKPolicy(k_base, k), batch_size=batch_size) for k in ks]


def lambda_sweep(params, tasks, profile, policy_config, lambdas=(0.5, 0.6, 0.7, 0.8, 0.9), batch_size=DEFAULT_BATCH_SIZE):
    reports = []
    for value in lambdas:
        cfg = pruning_config(replace(policy_config, lambda_=value), params.config.k_base, profile)
        policy = BanPolicy(cfg, policy_config.phases)
        policy.name = f'ban-lambda{value:g}'
        reports.append(run_experiment(params, tasks, policy, batch_size=batch_size))
    return reports


def tau_sweep(params, tasks, policy_config, taus=(0.7, 0.8, 0.9), batch_size=DEFAULT_BATCH_SIZE):
    """Dynamic-tau at each threshold; returns (reports, best tau by accuracy)."""
    reports = []
    for value in taus:
        policy = DynamicTauPolicy(params.config.k_base, baseline_config(replace(policy_config, tau=value)))
        policy.name = f'dynamic-tau{value:g}'
        reports.append(run_experiment(params, tasks, policy, batch_size=batch_size))
    scored = [(tau, report) for tau, report in zip(taus, reports) if not math.isnan(report.accuracy)]
    if reports and not scored:
        raise ConfigurationError('a tau sweep needs task items with answer tokens')
    best = max(scored, key=lambda pair: (pair[1].accuracy, -pair[0]))[0] if scored else None
    return reports, best
