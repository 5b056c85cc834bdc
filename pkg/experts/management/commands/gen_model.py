from dataclasses import asdict

from experts.management.base import LabCommand
from experts.utils import reports
from experts.utils.moe_model import build_model, plan_specialization, save_model


class Command(LabCommand):
    help = 'Build the seeded synthetic MoE model and write model.bin and spec.json'

    def add_stage_arguments(self, parser):
        parser.add_argument('--no-keys', action='store_true', help='plant specialization but no key experts')

    def overrides(self, options):
        return {'plan.plant_keys': False if options.get('no_keys') else None}

    def run(self, config, options):
        spec = plan_specialization(config.model, config.seed, **asdict(config.plan))
        params = build_model(config.model, spec)
        path = save_model(params, config.output_dir / reports.MODEL_FILE)
        reports.write_spec(spec, config.output_dir)
        self.done(f'Model written to {path} ({len(spec.planted_keys)} planted key experts)')
