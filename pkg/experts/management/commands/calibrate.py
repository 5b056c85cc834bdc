import logging

from experts.management.base import LabCommand
from experts.utils import reports
from experts.utils.calibration import (
    build_sensitivity_profile,
    calibrate_des_medians,
    calibrate_layer_sensitivity,
    calibrate_token_ratios,
    profile_usage,
    prune_impact,
    select_candidates,
)
from experts.utils.harness import run_corpus
from experts.utils.routing_policies import BaselinePolicy

logger = logging.getLogger(__name__)


class Command(LabCommand):
    help = 'Profile usage, measure prune impact and calibrate Ban and DES'

    def add_stage_arguments(self, parser):
        parser.add_argument('--top-m', type=int)
        parser.add_argument('--min-mult', type=float)
        parser.add_argument('--kl-top-n', type=int)
        parser.add_argument('--k-low', type=int)

    def overrides(self, options):
        return {
            'calibration.top_m': options.get('top_m'),
            'calibration.min_mult': options.get('min_mult'),
            'calibration.kl_top_n': options.get('kl_top_n'),
            'calibration.k_low': options.get('k_low'),
        }

    def run(self, config, options):
        params = self.load_params(config)
        corpus = self.calibration_corpus(config, params)
        outdir = config.output_dir
        batch_size = config.harness.batch_size

        stats = profile_usage(params, corpus, BaselinePolicy(params.config.k_base), batch_size)
        reports.write_usage(stats, outdir)
        candidates = select_candidates(stats, config.calibration.top_m, config.calibration.min_mult)
        reports.write_candidates(candidates, outdir)
        impact = prune_impact(params, corpus, candidates, config.kl_top_n, config.workers, batch_size)
        reports.write_kl_impact(impact, outdir)
        self.stdout.write(f'{len(candidates)} candidates, {len(impact.entries)} prune-impact entries')

        layers = calibrate_layer_sensitivity(params, corpus, config.k_low, config.kl_top_n, config.workers, batch_size)
        reference = run_corpus(params, corpus, BaselinePolicy(params.config.k_base), batch_size)
        medians = calibrate_des_medians(params, corpus, config.des_k_low, batch_size, reference=reference)
        reports.write_des_medians(medians, config.des_k_low, outdir / reports.DES_MEDIANS_FILE)
        bounds = calibrate_token_ratios(
            params, corpus, config.policy.k_min, config.calibration.min_ratio_samples, batch_size, reference=reference
        )
        profile = build_sensitivity_profile(layers, bounds)
        reports.emit_reports(outdir, stats=stats, profile=profile)
        self.done(f'Calibration written to {outdir}')
