"""
Shared plumbing of the lab's management commands: common flags, config
resolution and loading the artifacts earlier stages left in the output dir.
"""
import argparse
import logging
from dataclasses import replace

from django.core.management.base import BaseCommand

from experts.config import load_config
from experts.utils import reports
from experts.utils.harness import gen_corpus
from experts.utils.moe_model import default_answer_tokens, load_model
from experts.utils.routing_policies import build_policy
from experts.utils.storage import require

logger = logging.getLogger(__name__)

CALIBRATION_STREAM = 1
TASK_STREAM = 0


def u64(value):
    try:
        number = int(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid seed '{value}'")
    if not 0 <= number < 2 ** 64:
        raise argparse.ArgumentTypeError('seed must be an unsigned 64-bit integer')
    return number


def name_list(value):
    return [item.strip() for item in value.split(',') if item.strip()]


class LabCommand(BaseCommand):
    """Base for every pipeline stage; subclasses implement ``run(config, options)``."""
    requires_system_checks = []
    requires_migrations_checks = False

    def add_arguments(self, parser):
        parser.add_argument('--config', help='JSON experiment config')
        parser.add_argument('--seed', type=u64, help='seed overriding the config')
        parser.add_argument('--out', dest='output_dir', help='output directory')
        parser.add_argument('--workers', type=int, help='calibration worker threads')
        self.add_stage_arguments(parser)

    def add_stage_arguments(self, parser):
        pass

    def overrides(self, options):
        return {}

    def handle(self, *args, **options):
        config = load_config(
            options.get('config'),
            {
                'seed': options.get('seed'),
                'output_dir': options.get('output_dir'),
                'workers': options.get('workers'),
                **self.overrides(options),
            },
        )
        logger.debug('Resolved config: %s', config)
        self.run(config, options)

    def run(self, config, options):
        raise NotImplementedError

    def done(self, message):
        self.stdout.write(self.style.SUCCESS(message))

    # Artifacts of earlier stages

    def load_params(self, config):
        params = load_model(require(config.output_dir / reports.MODEL_FILE, 'gen-model'))
        if params.config.k_base != config.model.k_base:
            logger.warning('model.bin has k_base=%d, config says %d; using the model file',
                           params.config.k_base, config.model.k_base)
        return params

    def answer_tokens(self, config, params):
        if (config.output_dir / reports.SPEC_FILE).exists():
            return reports.load_spec(config.output_dir).answer_tokens
        return default_answer_tokens(params.config)

    def generate_corpus(self, config, params, stream):
        settings = config.corpus
        return gen_corpus(
            params.config,
            range(params.config.num_domains),
            settings.sequences_per_domain,
            settings.seq_len,
            task_mode=settings.task_mode,
            seed=config.seed,
            answer_tokens=self.answer_tokens(config, params),
            concentration=settings.concentration,
            prompt_len=settings.prompt_len,
            stream=stream,
        )

    def _corpus(self, config, params, filename, stream):
        path = config.output_dir / filename
        corpus = reports.load_corpus(path) if path.exists() else self.generate_corpus(config, params, stream)
        return corpus.validate(params.config)

    def task_corpus(self, config, params):
        return self._corpus(config, params, reports.CORPUS_FILE, TASK_STREAM)

    def calibration_corpus(self, config, params):
        return self._corpus(config, params, reports.CALIBRATION_CORPUS_FILE, CALIBRATION_STREAM)

    def make_policy(self, name, config, params, policy_config=None):
        """Build ``name``, loading only the calibration artifacts it needs."""
        policy_config = policy_config or config.policy
        keys = profile = medians = None
        if name == 'banpick' or name.startswith('pick'):
            keys = reports.load_key_experts(config.output_dir)
        if name in ('ban', 'banpick'):
            profile = reports.load_sensitivity(config.output_dir)
        if name in ('des', 'odp'):
            k_low, medians = reports.load_des_medians(config.output_dir)
            policy_config = replace(policy_config, des_k_low=k_low)
        return build_policy(name, policy_config, params.config, keys, profile, medians)
