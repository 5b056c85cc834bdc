from rest_framework import serializers

from experts.utils.routing_policies import BIAS_SPACES, POLICY_NAMES, STRATEGIES

U64_MAX = 2 ** 64 - 1


class StrictSerializer(serializers.Serializer):
    """Rejects keys it does not declare, so a typo never falls back to a default."""

    def to_internal_value(self, data):
        if isinstance(data, dict):
            unknown = sorted(set(data) - set(self.fields))
            if unknown:
                raise serializers.ValidationError({key: ['Unknown field.'] for key in unknown})
        return super().to_internal_value(data)


class ModelSectionSerializer(StrictSerializer):
    num_layers = serializers.IntegerField(min_value=1, required=False)
    num_experts = serializers.IntegerField(min_value=1, required=False)
    k_base = serializers.IntegerField(min_value=1, required=False)
    d_model = serializers.IntegerField(min_value=1, required=False)
    d_expert = serializers.IntegerField(min_value=1, required=False)
    vocab_size = serializers.IntegerField(min_value=1, required=False)
    num_domains = serializers.IntegerField(min_value=1, required=False)
    max_seq_len = serializers.IntegerField(min_value=1, required=False)

    def validate(self, attrs):
        k_base, experts = attrs.get('k_base'), attrs.get('num_experts')
        if k_base is not None and experts is not None and k_base > experts:
            raise serializers.ValidationError({'k_base': ['Must not exceed num_experts.']})
        return attrs


class PlanSectionSerializer(StrictSerializer):
    experts_per_domain = serializers.IntegerField(min_value=1, required=False)
    alpha = serializers.FloatField(min_value=0, required=False)
    key_alpha = serializers.FloatField(min_value=0, required=False)
    gamma = serializers.FloatField(min_value=0, required=False)
    noise_scale = serializers.FloatField(min_value=0, required=False)
    expert_noise = serializers.FloatField(min_value=0, required=False)
    plant_keys = serializers.BooleanField(required=False)


class CorpusSectionSerializer(StrictSerializer):
    sequences_per_domain = serializers.IntegerField(min_value=1, required=False)
    seq_len = serializers.IntegerField(min_value=1, required=False)
    task_mode = serializers.BooleanField(required=False)
    concentration = serializers.FloatField(min_value=0, max_value=1, required=False)
    prompt_len = serializers.IntegerField(min_value=0, allow_null=True, required=False)


class CalibrationSectionSerializer(StrictSerializer):
    top_m = serializers.IntegerField(min_value=1, required=False)
    min_mult = serializers.FloatField(min_value=0, required=False)
    kl_top_n = serializers.IntegerField(min_value=1, required=False)
    key_z = serializers.FloatField(required=False)
    k_low = serializers.IntegerField(min_value=1, allow_null=True, required=False)
    min_ratio_samples = serializers.IntegerField(min_value=1, required=False)


class PolicySectionSerializer(StrictSerializer):
    name = serializers.ChoiceField(choices=POLICY_NAMES, required=False)
    strategy = serializers.ChoiceField(choices=STRATEGIES, required=False)
    window_multiplier = serializers.IntegerField(min_value=1, required=False)
    bias_fraction = serializers.FloatField(min_value=0, max_value=1, required=False)
    bias_space = serializers.ChoiceField(choices=BIAS_SPACES, required=False)
    active_domains = serializers.ListField(
        child=serializers.IntegerField(min_value=0), allow_null=True, allow_empty=False, required=False
    )
    beta = serializers.FloatField(min_value=0, max_value=1, required=False)
    k_min = serializers.IntegerField(min_value=1, required=False)
    tau = serializers.FloatField(min_value=0, max_value=1, required=False)
    des_k_low = serializers.IntegerField(min_value=1, allow_null=True, required=False)
    odp_attention_z = serializers.FloatField(required=False)
    fixed_k = serializers.IntegerField(min_value=1, allow_null=True, required=False)
    apply_prefill = serializers.BooleanField(required=False)
    apply_decode = serializers.BooleanField(required=False)

    def get_fields(self):
        # "lambda" is a Python keyword, so it cannot be declared above
        fields = super().get_fields()
        fields['lambda'] = serializers.FloatField(min_value=0, max_value=1, required=False)
        return fields

    def validate_lambda(self, value):
        if value <= 0:
            raise serializers.ValidationError('Must be greater than 0.')
        return value

    def validate_tau(self, value):
        if value <= 0:
            raise serializers.ValidationError('Must be greater than 0.')
        return value


class HarnessSectionSerializer(StrictSerializer):
    batch_size = serializers.IntegerField(min_value=1, required=False)
    record_runtime = serializers.BooleanField(required=False)
    write_traces = serializers.BooleanField(required=False)


class ExperimentConfigSerializer(StrictSerializer):
    output_dir = serializers.CharField(required=False)
    seed = serializers.IntegerField(min_value=0, max_value=U64_MAX, required=False)
    workers = serializers.IntegerField(min_value=1, required=False)
    model = ModelSectionSerializer(required=False)
    plan = PlanSectionSerializer(required=False)
    corpus = CorpusSectionSerializer(required=False)
    calibration = CalibrationSectionSerializer(required=False)
    policy = PolicySectionSerializer(required=False)
    policies = serializers.ListField(child=serializers.ChoiceField(choices=POLICY_NAMES), required=False)
    harness = HarnessSectionSerializer(required=False)
