import json
import re
import tempfile
from pathlib import Path

from django.test import SimpleTestCase

from experts.exceptions import MissingArtifact
from experts.tests.factories import SMALL, small_corpus, small_model
from experts.utils import reports
from experts.utils import calibration as cal
from experts.utils.calibration import SensitivityProfile, UsageStats, profile_usage
from experts.utils.harness import MetricsReport, run_experiment
from experts.utils.moe_model import forward
from experts.utils.routing_policies import BaselinePolicy, KeyExpert, KeyExpertSet

PROFILE = SensitivityProfile(w=(0.25, 0.5, 0.75, 0.5), l_prime=(0.0, 0.5, 1.0, 0.5), r_min=0.4, r_max=0.9, k_low=2)
KEYS = KeyExpertSet({0: (KeyExpert(1, 2, 0.5),), 1: (KeyExpert(2, 5, 0.25),)})
FLOAT_LITERAL = re.compile(r'-?\d+\.\d+(?:[eE][-+]?\d+)?|-?\d+[eE][-+]?\d+')


def significant_digits(literal):
    mantissa = re.split('[eE]', literal.lstrip('-'))[0].replace('.', '')
    return len(mantissa.strip('0'))


class ReportTestCase(SimpleTestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.outdir = Path(self.tmp.name)

    def tearDown(self):
        self.tmp.cleanup()


class EmptyReportTests(ReportTestCase):
    def test_empty_inputs_give_header_only_tables(self):
        reports.emit_reports(self.outdir, stats=UsageStats.empty(SMALL))
        self.assertEqual((self.outdir / reports.USAGE_CSV).read_text(), 'layer,expert,domain,frequency\n')
        self.assertEqual((self.outdir / reports.USAGE_TOKENS_CSV).read_text(), 'layer,expert,rank,token,count\n')
        self.assertFalse(list(self.outdir.glob('usage_layer*.svg')))

    def test_no_metrics_rows(self):
        reports.write_metrics([], self.outdir)
        self.assertEqual(
            (self.outdir / reports.METRICS_CSV).read_text(), 'policy,accuracy,avg_topk,activations,est_flops,runtime_s\n'
        )
        self.assertEqual(json.loads((self.outdir / reports.METRICS_FILE).read_text()), {'policies': []})


class EmitReportTests(ReportTestCase):
    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        params = small_model()
        corpus = small_corpus()
        cls.stats = profile_usage(params, corpus, BaselinePolicy(SMALL.k_base))
        cls.metrics = [run_experiment(params, corpus, BaselinePolicy(SMALL.k_base))]

    def emit(self, outdir):
        return reports.emit_reports(outdir, stats=self.stats, profile=PROFILE, keys=KEYS, metrics=self.metrics)

    def test_every_family_is_written(self):
        written = self.emit(self.outdir)
        names = sorted(path.name for path in written)
        expected = [
            reports.KEY_EXPERTS_FILE, reports.METRICS_CSV, reports.METRICS_FILE, reports.SENSITIVITY_CSV,
            reports.SENSITIVITY_FILE, reports.USAGE_CSV, reports.USAGE_TOKENS_CSV,
        ] + [f'usage_layer{layer}.svg' for layer in range(SMALL.num_layers)]
        self.assertEqual(names, sorted(expected))

    def test_charts_are_svg(self):
        self.emit(self.outdir)
        svg = (self.outdir / 'usage_layer0.svg').read_text()
        self.assertIn('<svg', svg)
        self.assertIn('Layer 0 expert usage', svg)

    def test_reemission_is_byte_identical(self):
        with tempfile.TemporaryDirectory() as other:
            first = {path.name: path.read_bytes() for path in self.emit(self.outdir)}
            second = {path.name: path.read_bytes() for path in self.emit(Path(other))}
        self.assertEqual(first, second)

    def test_usage_table_rows(self):
        self.emit(self.outdir)
        lines = (self.outdir / reports.USAGE_CSV).read_text().splitlines()
        self.assertEqual(len(lines), 1 + SMALL.num_layers * SMALL.num_experts * SMALL.num_domains)
        self.assertEqual(lines[1].split(',')[:3], ['0', '0', '0'])

    def test_sensitivity_table(self):
        self.emit(self.outdir)
        lines = (self.outdir / reports.SENSITIVITY_CSV).read_text().splitlines()
        self.assertEqual(lines[0], 'layer,W,L_prime')
        self.assertEqual(lines[3], '2,0.75,1')


class ArtifactRoundTripTests(ReportTestCase):
    def test_sensitivity(self):
        reports.write_sensitivity(PROFILE, self.outdir)
        self.assertEqual(reports.load_sensitivity(self.outdir), PROFILE)

    def test_key_experts(self):
        reports.write_key_experts(KEYS, self.outdir / reports.KEY_EXPERTS_FILE)
        self.assertEqual(reports.load_key_experts(self.outdir), KEYS)

    def test_des_medians(self):
        reports.write_des_medians((1.5, 1.25), 3, self.outdir / reports.DES_MEDIANS_FILE)
        self.assertEqual(reports.load_des_medians(self.outdir), (3, (1.5, 1.25)))

    def test_corpus(self):
        corpus = small_corpus(prompt_len=4)
        reports.write_corpus(corpus, self.outdir / reports.CORPUS_FILE)
        self.assertEqual(reports.load_corpus(self.outdir / reports.CORPUS_FILE), corpus)

    def test_missing_artifact_names_its_producer(self):
        with self.assertRaises(MissingArtifact) as caught:
            reports.load_key_experts(self.outdir)
        self.assertIn(reports.KEY_EXPERTS_FILE, str(caught.exception))
        self.assertIn('identify', str(caught.exception))

    def test_metrics_document(self):
        row = MetricsReport('ban', 0.5, 5.25, 42, 1000, domain_accuracy={1: 0.5, 0: 0.5})
        reports.write_metrics([row], self.outdir)
        self.assertEqual((self.outdir / reports.METRICS_CSV).read_text().splitlines()[1], 'ban,0.5,5.25,42,1000,0')
        document = json.loads((self.outdir / reports.METRICS_FILE).read_text())
        self.assertEqual(MetricsReport.from_dict(document['policies'][0]), row)


class TraceTests(ReportTestCase):
    def test_trace_line_format(self):
        record = {'seq_id': 3, 'pos': 1, 'layer': 0, 'phase': 'decode', 'policy': 'ban', 'k_used': 2,
                  'selected': [(4, 0.6), (1, 0.4)]}
        self.assertEqual(
            json.loads(reports.trace_line(record)),
            {**record, 'selected': ['4:0.6', '1:0.4']},
        )

    def test_writer_emits_one_line_per_token_layer(self):
        trace = forward(small_model(), [[1, 2, 3], [4, 5, 6]], BaselinePolicy(SMALL.k_base)).trace
        writer = reports.TraceWriter(reports.trace_path(self.outdir, 'baseline'))
        writer(trace)
        path = writer.close()
        self.assertEqual(path.name, 'trace_baseline.ndjson')
        lines = path.read_text().splitlines()
        self.assertEqual(len(lines), 2 * 3 * SMALL.num_layers)
        self.assertEqual(len(json.loads(lines[0])['selected']), SMALL.k_base)

    def test_experiment_table(self):
        path = reports.write_experiment('fixed-k', ('k', 'accuracy'), [(4, 0.5), (3, 0.25)], self.outdir)
        self.assertEqual(path.name, 'experiment_fixed-k.csv')
        self.assertEqual(path.read_text(), 'k,accuracy\n4,0.5\n3,0.25\n')


class CalibratedArtifactTests(ReportTestCase):
    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        params = small_model()
        corpus = small_corpus()
        stats = profile_usage(params, corpus, BaselinePolicy(SMALL.k_base))
        cls.candidates = cal.select_candidates(stats, top_m=2, min_mult=1.0)
        cls.impact = cal.prune_impact(params, corpus, cls.candidates)
        cls.keys = cal.identify_key_experts(cls.impact)
        layers = cal.calibrate_layer_sensitivity(params, corpus, 2)
        bounds = cal.calibrate_token_ratios(params, corpus, 2, min_samples=10)
        cls.profile = cal.build_sensitivity_profile(layers, bounds)
        cls.medians = cal.calibrate_des_medians(params, corpus, 1)
        cls.metrics = [run_experiment(params, corpus, BaselinePolicy(SMALL.k_base))]

    def test_floats_are_written_with_nine_significant_digits(self):
        written = [
            reports.write_candidates(self.candidates, self.outdir),
            reports.write_kl_impact(self.impact, self.outdir),
            reports.write_key_experts(self.keys, self.outdir / reports.KEY_EXPERTS_FILE),
            reports.write_sensitivity(self.profile, self.outdir)[0],
            reports.write_des_medians(self.medians, 1, self.outdir / reports.DES_MEDIANS_FILE),
            reports.write_metrics(self.metrics, self.outdir)[-1],
        ]
        literals = [value for path in written for value in FLOAT_LITERAL.findall(path.read_text())]
        self.assertTrue(literals)
        for literal in literals:
            self.assertLessEqual(significant_digits(literal), 9, literal)

    def test_calibrated_artifacts_read_back_equal(self):
        reports.write_candidates(self.candidates, self.outdir)
        reports.write_kl_impact(self.impact, self.outdir)
        reports.write_key_experts(self.keys, self.outdir / reports.KEY_EXPERTS_FILE)
        reports.write_sensitivity(self.profile, self.outdir)
        reports.write_des_medians(self.medians, 1, self.outdir / reports.DES_MEDIANS_FILE)
        self.assertEqual(reports.load_candidates(self.outdir).experts(), self.candidates.experts())
        self.assertEqual(reports.load_candidates(self.outdir).entries, self.candidates.entries)
        self.assertEqual(reports.load_kl_impact(self.outdir), self.impact)
        self.assertEqual(reports.load_key_experts(self.outdir), self.keys)
        self.assertEqual(reports.load_sensitivity(self.outdir), self.profile)
        self.assertEqual(reports.load_des_medians(self.outdir), (1, self.medians))
