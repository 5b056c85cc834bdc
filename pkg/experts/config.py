"""
Experiment configuration: settings defaults, the optional JSON config file,
the MOERLAB_OUT environment override and CLI flags, merged in that order.
"""
import copy
import json
import logging
from dataclasses import dataclass
from pathlib import Path

from django.conf import settings
from rest_framework.exceptions import ValidationError

from experts.exceptions import ConfigurationError, InvalidArgument
from experts.serializers import ExperimentConfigSerializer
from experts.utils.moe_model import ModelConfig
from experts.utils.routing_policies import PolicyConfig

logger = logging.getLogger(__name__)

SECTIONS = ('model', 'plan', 'corpus', 'calibration', 'policy', 'harness')


@dataclass(frozen=True)
class PlanSettings:
    experts_per_domain: int = 2
    alpha: float = 4.0
    key_alpha: float = 2.0
    gamma: float = 10.0
    noise_scale: float = 1.0
    expert_noise: float = 0.02
    plant_keys: bool = True


@dataclass(frozen=True)
class CorpusSettings:
    sequences_per_domain: int = 64
    seq_len: int = 12
    task_mode: bool = True
    concentration: float = 0.9
    prompt_len: int = None


@dataclass(frozen=True)
class CalibrationSettings:
    top_m: int = 3
    min_mult: float = 2.0
    kl_top_n: int = 1000
    key_z: float = 2.0
    k_low: int = None
    min_ratio_samples: int = 100


@dataclass(frozen=True)
class HarnessSettings:
    batch_size: int = 64
    record_runtime: bool = False
    write_traces: bool = True


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelConfig
    plan: PlanSettings
    corpus: CorpusSettings
    calibration: CalibrationSettings
    policy: PolicyConfig
    policies: tuple
    harness: HarnessSettings
    output_dir: Path
    seed: int
    workers: int = 1

    @property
    def k_low(self):
        """Experts kept at the cut layer during layer calibration; defaults to k_min."""
        return self.calibration.k_low or self.policy.k_min

    @property
    def des_k_low(self):
        return self.policy.des_k_low or self.policy.k_min

    @property
    def kl_top_n(self):
        return min(self.calibration.kl_top_n, self.model.vocab_size)


def _flatten_errors(detail, prefix=''):
    if isinstance(detail, dict):
        for key, value in detail.items():
            yield from _flatten_errors(value, f'{prefix}{key}.')
    elif isinstance(detail, list):
        for item in detail:
            yield from _flatten_errors(item, prefix)
    else:
        yield f'{prefix.rstrip(".") or "config"}: {detail}'


def validate_document(data):
    """Validate a config document; raises ConfigurationError listing every problem."""
    serializer = ExperimentConfigSerializer(data=data)
    try:
        serializer.is_valid(raise_exception=True)
    except ValidationError as exc:
        raise ConfigurationError('Invalid config: ' + '; '.join(_flatten_errors(exc.detail))) from exc
    return serializer.validated_data


def read_document(path):
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f'Config file not found: {path}')
    try:
        with open(path, encoding='utf-8') as handle:
            data = json.load(handle)
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f'Config file {path} is not valid JSON: {exc}') from exc
    if not isinstance(data, dict):
        raise ConfigurationError(f'Config file {path} must hold a JSON object')
    return data


def merge(base, document):
    merged = copy.deepcopy(base)
    for key, value in document.items():
        if key in SECTIONS:
            merged[key].update(value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def apply_overrides(merged, overrides):
    """``overrides`` maps 'key' or 'section.key' to a CLI value; None means not given."""
    for dotted, value in (overrides or {}).items():
        if value is None:
            continue
        section, _, key = dotted.rpartition('.')
        (merged[section] if section else merged)[key] = value
    return merged


def _policy_config(section):
    values = dict(section)
    values['lambda_'] = values.pop('lambda')
    if values.get('active_domains') is not None:
        values['active_domains'] = tuple(values['active_domains'])
    return PolicyConfig(**values)


def build_config(merged):
    try:
        model = ModelConfig(seed=int(merged['seed']), **merged['model']).validate()
        policy = _policy_config(merged['policy'])
        policy.pick_config()
        if not 1 <= policy.k_min < model.k_base:
            raise InvalidArgument(f'k_min={policy.k_min} must lie in 1..{model.k_base - 1}')
        if policy.active_domains and max(policy.active_domains) >= model.num_domains:
            raise InvalidArgument('active_domains names a domain the model does not have')
        config = ExperimentConfig(
            model=model,
            plan=PlanSettings(**merged['plan']),
            corpus=CorpusSettings(**merged['corpus']),
            calibration=CalibrationSettings(**merged['calibration']),
            policy=policy,
            policies=tuple(merged['policies']),
            harness=HarnessSettings(**merged['harness']),
            output_dir=Path(merged['output_dir']),
            seed=int(merged['seed']),
            workers=int(merged.get('workers', 1)),
        )
    except TypeError as exc:
        raise ConfigurationError(f'Invalid config: {exc}') from exc
    if config.corpus.seq_len > model.max_seq_len:
        raise ConfigurationError('corpus.seq_len exceeds model.max_seq_len')
    return config


def load_config(path=None, overrides=None):
    """Resolve the experiment config: CLI flag > MOERLAB_OUT > config file > settings."""
    merged = copy.deepcopy(settings.MOERLAB)
    if path:
        merged = merge(merged, validate_document(read_document(path)))
        logger.debug('Loaded config file %s', path)
    if settings.MOERLAB_OUT:
        merged['output_dir'] = settings.MOERLAB_OUT
    return build_config(apply_overrides(merged, overrides))
