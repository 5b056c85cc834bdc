"""
Per-token routing policies: top-k, Pick (key-expert enhancement), Ban (dynamic
pruning), their combination, and the dynamic-tau / DES / ODP baselines.

The ``route_*`` functions are pure. The policy classes at the bottom bind them
to a configuration so the model's forward pass can call ``policy.route``.
"""
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from experts.exceptions import ConfigurationError, InvalidArgument
from experts.utils.moe_model import PHASES
from experts.utils.numerics import (
    as_scores,
    cum_ratio,
    descending_order,
    population_std,
    round_half_away,
    softmax,
    topk,
)

logger = logging.getLogger(__name__)

STRATEGIES = ('A', 'B', 'C', 'D', 'E')
BIAS_SPACES = ('score', 'logit')
# prefix sums are compared against tau with this slack
TAU_EPS = 1e-12


@dataclass(frozen=True)
class RoutingDecision:
    experts: tuple
    weights: tuple

    @property
    def k_used(self):
        return len(self.experts)

    def as_dict(self):
        return dict(zip(self.experts, self.weights))


@dataclass(frozen=True)
class KeyExpert:
    layer: int
    expert: int
    kl_impact: float = 0.0


@dataclass(frozen=True)
class KeyExpertSet:
    """domain -> key experts of that domain, ordered by (layer, expert)."""
    domains: dict = field(default_factory=dict)

    @property
    def is_empty(self):
        return not any(self.domains.values())

    def layer_map(self, active_domains=None):
        """layer -> sorted expert ids, the union over ``active_domains``."""
        chosen = sorted(self.domains) if active_domains is None else sorted(active_domains)
        merged = {}
        for domain in chosen:
            for key in self.domains.get(domain, ()):
                merged.setdefault(key.layer, set()).add(key.expert)
        return {layer: tuple(sorted(ids)) for layer, ids in sorted(merged.items())}

    def max_keys_per_layer(self, active_domains=None):
        return max((len(ids) for ids in self.layer_map(active_domains).values()), default=0)

    def restricted_to(self, domains):
        return KeyExpertSet({d: self.domains[d] for d in sorted(domains) if d in self.domains})

    def triples(self):
        return sorted(
            (domain, key.layer, key.expert) for domain, keys in self.domains.items() for key in keys
        )


@dataclass(frozen=True)
class PickConfig:
    strategy: str = 'D'
    window_multiplier: int = 2
    bias_fraction: float = 0.2
    bias_space: str = 'score'
    active_domains: tuple = None

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise InvalidArgument(f"unknown Pick strategy '{self.strategy}'")
        if self.window_multiplier < 1:
            raise InvalidArgument('window_multiplier must be positive')
        if not 0 < self.bias_fraction < 1:
            raise InvalidArgument('bias_fraction must lie in (0, 1)')
        if self.bias_space not in BIAS_SPACES:
            raise InvalidArgument(f'bias_space must be one of {BIAS_SPACES}')


@dataclass(frozen=True)
class PruningConfig:
    lambda_: float = 0.7
    beta: float = 0.5
    k_min: int = 3
    k_base: int = 8
    layer_scores: tuple = ()
    r_min: float = 0.0
    r_max: float = 1.0

    def __post_init__(self):
        if not 0 < self.lambda_ <= 1:
            raise InvalidArgument('lambda must lie in (0, 1]')
        if not 0 <= self.beta <= 1:
            raise InvalidArgument('beta must lie in [0, 1]')
        if not 1 <= self.k_min < self.k_base:
            raise InvalidArgument('k_min must be positive and below k_base')
        if not self.r_min < self.r_max:
            raise InvalidArgument('r_min must be below r_max')
        if any(not 0 <= score <= 1 for score in self.layer_scores):
            raise InvalidArgument('layer scores must lie in [0, 1]')


@dataclass(frozen=True)
class BaselineConfig:
    tau: float = 0.8
    des_medians: tuple = ()
    des_k_low: int = 3
    odp_attention_z: float = 2.0

    def __post_init__(self):
        if not 0 < self.tau <= 1:
            raise InvalidArgument('tau must lie in (0, 1]')
        if any(m < 1 for m in self.des_medians):
            raise InvalidArgument('DES medians are weight ratios and must be >= 1')

    @property
    def des_k_base(self):
        return self.des_k_low + len(self.des_medians)


@dataclass(frozen=True)
class PolicyConfig:
    """Every tunable of every policy, as it appears in the experiment config."""
    name: str = 'baseline'
    strategy: str = 'D'
    window_multiplier: int = 2
    bias_fraction: float = 0.2
    bias_space: str = 'score'
    active_domains: tuple = None
    lambda_: float = 0.7
    beta: float = 0.5
    k_min: int = 3
    tau: float = 0.8
    des_k_low: int = None
    odp_attention_z: float = 2.0
    fixed_k: int = None
    apply_prefill: bool = True
    apply_decode: bool = True

    @property
    def phases(self):
        enabled = {'prefill': self.apply_prefill, 'decode': self.apply_decode}
        return frozenset(phase for phase in PHASES if enabled[phase])

    def pick_config(self, strategy=None):
        return PickConfig(
            strategy=strategy or self.strategy,
            window_multiplier=self.window_multiplier,
            bias_fraction=self.bias_fraction,
            bias_space=self.bias_space,
            active_domains=self.active_domains,
        )


def _decision(logits, experts):
    """Order ``experts`` by logit and weight them by softmax over the set."""
    experts = np.asarray(sorted(set(int(e) for e in experts)), dtype=np.int64)
    order = np.argsort(-logits[experts], kind='stable')
    experts = experts[order]
    weights = softmax(logits[experts])
    return RoutingDecision(tuple(int(e) for e in experts), tuple(float(w) for w in weights))


def route_baseline(logits, k):
    logits = as_scores(logits, 'logits')
    return _decision(logits, topk(logits, k))


route_fixed_k = route_baseline


def _ranks(logits):
    """1-based rank of every expert under the tie-broken descending order."""
    ranks = np.empty(logits.size, dtype=np.int64)
    ranks[descending_order(logits)] = np.arange(1, logits.size + 1)
    return ranks


def apply_pick(logits, base, keys, cfg, k_base=None):
    logits = as_scores(logits, 'logits')
    keys = sorted({int(e) for e in keys})
    for expert in keys:
        if not 0 <= expert < logits.size:
            raise InvalidArgument(f'key expert {expert} out of range')
    selected = list(base.experts)
    missing = [e for e in keys if e not in selected]
    if not missing:
        return base

    k_base = base.k_used if k_base is None else k_base
    scores = softmax(logits)

    if cfg.strategy == 'E':
        bias = cfg.bias_fraction * float(np.mean(scores[list(base.experts)]))
        biased = (scores if cfg.bias_space == 'score' else logits).copy()
        biased[missing] += bias
        return _decision(logits, topk(biased, base.k_used))

    ranks = _ranks(logits)
    window = min(cfg.window_multiplier * k_base, logits.size)
    for expert in missing:
        if cfg.strategy in ('C', 'D') and ranks[expert] > window:
            continue
        if cfg.strategy in ('A', 'C'):
            selected.append(expert)
            continue
        replaceable = [s for s in selected if s not in keys]
        if not replaceable:
            continue
        # lowest weight goes; on equal weight the higher id goes first
        victim = min(replaceable, key=lambda s: (scores[s], -s))
        selected[selected.index(victim)] = expert
    return _decision(logits, selected)


def token_sensitivity(logits, cfg):
    ratio = cum_ratio(softmax(logits), cfg.k_min, cfg.k_base)
    value = (cfg.r_max - ratio) / (cfg.r_max - cfg.r_min)
    return min(max(value, 0.0), 1.0)


def combined_score(l_prime, t_prime, cfg):
    return cfg.lambda_ * (cfg.beta * l_prime + (1 - cfg.beta) * t_prime)


def dynamic_k(l_prime, t_prime, cfg):
    if not (0 <= l_prime <= 1 and 0 <= t_prime <= 1):
        raise InvalidArgument('sensitivities must lie in [0, 1]')
    k = round_half_away(cfg.k_min + (cfg.k_base - cfg.k_min) * combined_score(l_prime, t_prime, cfg))
    return min(max(k, cfg.k_min), cfg.k_base)


def route_ban(logits, layer, cfg):
    if not 0 <= layer < len(cfg.layer_scores):
        raise ConfigurationError(f'no calibrated layer sensitivity for layer {layer}')
    k = dynamic_k(cfg.layer_scores[layer], token_sensitivity(logits, cfg), cfg)
    return route_baseline(logits, k)


def route_banpick(logits, layer, keys, pick_cfg, prune_cfg):
    decision = route_ban(logits, layer, prune_cfg)
    if not keys:
        return decision
    return apply_pick(logits, decision, keys, replace(pick_cfg, strategy='C'), k_base=prune_cfg.k_base)


def route_dynamic_tau(logits, cfg):
    logits = as_scores(logits, 'logits')
    order = descending_order(logits)
    if cfg.tau >= 1:
        return _decision(logits, order)
    prefix = np.cumsum(softmax(logits)[order])
    reached = np.flatnonzero(prefix >= cfg.tau - TAU_EPS)
    m = int(reached[0]) + 1 if reached.size else logits.size
    return _decision(logits, order[:m])


def route_des(logits, cfg):
    logits = as_scores(logits, 'logits')
    if not cfg.des_medians:
        raise ConfigurationError('DES medians are not calibrated')
    k_base = cfg.des_k_base
    if k_base > logits.size:
        raise ConfigurationError('DES levels exceed the number of experts')
    order = descending_order(logits)
    ranked = softmax(logits)[order]
    for offset, median in enumerate(cfg.des_medians):
        j = cfg.des_k_low + offset
        lower = ranked[j]
        if lower == 0 or ranked[j - 1] / lower > median:
            return _decision(logits, order[:j])
    return _decision(logits, order[:k_base])


def is_key_token(attention_mass, position, z):
    """True when a position's attention mass is a ``z``-sigma outlier of its sequence."""
    mass = np.asarray(attention_mass, dtype=np.float64)
    spread = population_std(mass)
    if spread == 0:
        return False
    return bool(mass[position] > mass.mean() + z * spread)


def route_odp(logits, key_token, cfg):
    if key_token:
        if not cfg.des_medians:
            raise ConfigurationError('DES medians are not calibrated')
        return route_baseline(logits, cfg.des_k_base)
    return route_des(logits, cfg)


class KeyScope:
    """Key experts a pick applies to at one routing call.

    Explicit ``active_domains`` fix the set. Otherwise a sequence labelled with
    its domain gets that domain's keys and an unlabelled one gets the union.
    """

    def __init__(self, keys, active_domains=None):
        self.fixed = active_domains is not None
        self.union = keys.layer_map(active_domains)
        self.by_domain = {} if self.fixed else {d: keys.layer_map((d,)) for d in keys.domains}

    def at(self, layer, domain=None):
        if self.fixed or domain is None:
            return self.union.get(layer, ())
        return self.by_domain.get(domain, {}).get(layer, ())


def _check_keys(layer_keys, config):
    for layer, experts in layer_keys.items():
        if not 0 <= layer < config.num_layers or any(not 0 <= e < config.num_experts for e in experts):
            raise ConfigurationError(f'key experts at layer {layer} do not exist in this model')


def _check_layer_scores(cfg, config):
    if len(cfg.layer_scores) != config.num_layers:
        raise ConfigurationError(
            f'sensitivity profile covers {len(cfg.layer_scores)} layers, model has {config.num_layers}'
        )
    if cfg.k_base > config.num_experts:
        raise ConfigurationError('k_base exceeds the number of experts')


class Policy:
    """Binds a routing rule to its configuration and the phases it is active in.

    In a disabled phase the token falls back to plain top-k_base routing.
    """
    name = 'baseline'

    def __init__(self, k_base, phases=frozenset(PHASES)):
        self.k_base = k_base
        self.phases = frozenset(phases)

    def route(self, logits, context):
        if context.phase not in self.phases:
            return route_baseline(logits, self.k_base)
        return self.decide(logits, context)

    def decide(self, logits, context):
        return route_baseline(logits, self.k_base)

    def check(self, config):
        """Raise ConfigurationError if the policy does not fit the model ``config``."""
        if not 1 <= self.k_base <= config.num_experts:
            raise ConfigurationError(f'k_base={self.k_base} does not fit {config.num_experts} experts')

    def __repr__(self):
        return f'<{type(self).__name__} {self.name}>'


class BaselinePolicy(Policy):
    pass


class FixedKPolicy(Policy):
    def __init__(self, k_base, k, phases=frozenset(PHASES)):
        super().__init__(k_base, phases)
        self.k = k
        self.name = f'fixed-k{k}'

    def decide(self, logits, context):
        return route_fixed_k(logits, self.k)


class SelectAllPolicy(Policy):
    name = 'select-all'

    def decide(self, logits, context):
        return route_baseline(logits, len(logits))


class LayerOverridePolicy(Policy):
    """Top-k_base everywhere except one layer, which keeps only ``k`` experts."""

    def __init__(self, k_base, layer, k):
        super().__init__(k_base)
        self.layer = layer
        self.k = k
        self.name = f'layer{layer}-k{k}'

    def decide(self, logits, context):
        k = self.k if context.layer == self.layer else self.k_base
        return route_baseline(logits, k)


class PickPolicy(Policy):
    def __init__(self, k_base, keys, cfg, phases=frozenset(PHASES), name=None):
        super().__init__(k_base, phases)
        self.cfg = cfg
        self.keys = keys
        self.scope = KeyScope(keys, cfg.active_domains)
        self.layer_keys = self.scope.union
        self.name = name or f'pick-{cfg.strategy.lower()}'

    def check(self, config):
        super().check(config)
        _check_keys(self.layer_keys, config)

    def decide(self, logits, context):
        base = route_baseline(logits, self.k_base)
        keys = self.scope.at(context.layer, context.domain)
        if not keys:
            return base
        return apply_pick(logits, base, keys, self.cfg, k_base=self.k_base)


class BanPolicy(Policy):
    name = 'ban'

    def __init__(self, cfg, phases=frozenset(PHASES)):
        super().__init__(cfg.k_base, phases)
        self.cfg = cfg

    def check(self, config):
        super().check(config)
        _check_layer_scores(self.cfg, config)

    def decide(self, logits, context):
        return route_ban(logits, context.layer, self.cfg)


class BanPickPolicy(Policy):
    name = 'banpick'

    def __init__(self, keys, pick_cfg, prune_cfg, phases=frozenset(PHASES)):
        super().__init__(prune_cfg.k_base, phases)
        self.pick_cfg = pick_cfg
        self.prune_cfg = prune_cfg
        self.scope = KeyScope(keys, pick_cfg.active_domains)
        self.layer_keys = self.scope.union

    def check(self, config):
        super().check(config)
        _check_layer_scores(self.prune_cfg, config)
        _check_keys(self.layer_keys, config)

    def decide(self, logits, context):
        keys = self.scope.at(context.layer, context.domain)
        return route_banpick(logits, context.layer, keys, self.pick_cfg, self.prune_cfg)


class DynamicTauPolicy(Policy):
    def __init__(self, k_base, cfg, phases=frozenset(PHASES)):
        super().__init__(k_base, phases)
        self.cfg = cfg
        self.name = 'dynamic-tau'

    def decide(self, logits, context):
        return route_dynamic_tau(logits, self.cfg)


class DESPolicy(Policy):
    name = 'des'

    def __init__(self, k_base, cfg, phases=frozenset(PHASES)):
        super().__init__(k_base, phases)
        if not cfg.des_medians:
            raise ConfigurationError('DES medians are not calibrated')
        self.cfg = cfg

    def decide(self, logits, context):
        return route_des(logits, self.cfg)


class ODPPolicy(DESPolicy):
    name = 'odp'

    def decide(self, logits, context):
        key = is_key_token(context.attention_mass, context.position, self.cfg.odp_attention_z)
        return route_odp(logits, key, self.cfg)


POLICY_NAMES = (
    'baseline', 'select-all', 'fixed-k', 'pick', 'pick-a', 'pick-b', 'pick-c', 'pick-d', 'pick-e',
    'ban', 'banpick', 'dynamic-tau', 'des', 'odp',
)


def pruning_config(cfg, k_base, profile):
    if profile is None:
        raise ConfigurationError('ban policies need a calibrated sensitivity profile')
    return PruningConfig(
        lambda_=cfg.lambda_,
        beta=cfg.beta,
        k_min=cfg.k_min,
        k_base=k_base,
        layer_scores=tuple(profile.l_prime),
        r_min=profile.r_min,
        r_max=profile.r_max,
    )


def baseline_config(cfg, medians=None):
    return BaselineConfig(
        tau=cfg.tau,
        des_medians=tuple(medians or ()),
        des_k_low=cfg.des_k_low if cfg.des_k_low is not None else cfg.k_min,
        odp_attention_z=cfg.odp_attention_z,
    )


def build_policy(name, cfg, model_config, keys=None, profile=None, medians=None):
    """Instantiate the policy called ``name`` from the experiment's settings."""
    k_base = model_config.k_base
    phases = cfg.phases
    if name == 'baseline':
        return BaselinePolicy(k_base, phases)
    if name == 'select-all':
        return SelectAllPolicy(k_base, phases)
    if name == 'fixed-k':
        if cfg.fixed_k is None:
            raise ConfigurationError("policy 'fixed-k' needs fixed_k")
        return FixedKPolicy(k_base, cfg.fixed_k, phases)
    if name == 'pick' or name.startswith('pick-'):
        if keys is None:
            raise ConfigurationError(f"policy '{name}' needs identified key experts")
        strategy = cfg.strategy if name == 'pick' else name[-1].upper()
        return PickPolicy(k_base, keys, cfg.pick_config(strategy), phases)
    if name == 'ban':
        return BanPolicy(pruning_config(cfg, k_base, profile), phases)
    if name == 'banpick':
        if keys is None:
            raise ConfigurationError("policy 'banpick' needs identified key experts")
        return BanPickPolicy(keys, cfg.pick_config('C'), pruning_config(cfg, k_base, profile), phases)
    if name == 'dynamic-tau':
        return DynamicTauPolicy(k_base, baseline_config(cfg), phases)
    if name in ('des', 'odp'):
        if not medians:
            raise ConfigurationError(f"policy '{name}' needs calibrated DES medians")
        baseline = baseline_config(cfg, medians)
        if baseline.des_k_base != k_base:
            raise ConfigurationError('DES medians do not cover k_low..k_base')
        policy_class = DESPolicy if name == 'des' else ODPPolicy
        return policy_class(k_base, baseline, phases)
    raise ConfigurationError(f"unknown policy '{name}'")
