from rest_framework import serializers

from geometry.types import Scheme

STAGES = ("registration", "atlas", "control_points", "ladder", "spline")


class SectionSerializer(serializers.Serializer):
    """
    One table of the config file. Unknown keys are rejected and missing
    sub-tables validate as empty tables, so their own defaults apply.
    """

    def to_internal_value(self, data):
        if isinstance(data, dict):
            unknown = sorted(set(data) - set(self.fields))
            if unknown:
                raise serializers.ValidationError({name: "unknown key" for name in unknown})
            data = dict(data)
            for name, field in self.fields.items():
                if isinstance(field, serializers.Serializer) and name not in data:
                    data[name] = {}
        return super().to_internal_value(data)


# Numerical sections
class KernelSerializer(SectionSerializer):
    sigma = serializers.FloatField(min_value=0.0, default=15.0)

    def validate_sigma(self, value):
        if value <= 0:
            raise serializers.ValidationError("sigma must be positive")
        return value


class ControlPointsSerializer(SectionSerializer):
    count = serializers.IntegerField(min_value=1, default=60)
    # Precomputed shared control points; skips the optimization stage.
    file = serializers.CharField(required=False, allow_null=True, default=None)
    step = serializers.FloatField(min_value=0.0, default=1.0)


class IntegratorSerializer(SectionSerializer):
    scheme = serializers.ChoiceField(choices=[scheme.value for scheme in Scheme], default=Scheme.RK4.value)
    n_steps = serializers.IntegerField(min_value=1, default=10)


class RegistrationSerializer(SectionSerializer):
    # Unset means 0.1 x atlas diameter.
    alpha = serializers.FloatField(required=False, allow_null=True, default=None)

    def validate_alpha(self, value):
        if value is not None and value <= 0:
            raise serializers.ValidationError("alpha must be positive")
        return value


class AtlasSerializer(SectionSerializer):
    file = serializers.CharField(required=False, allow_null=True, default=None)
    outer_iters = serializers.IntegerField(min_value=1, default=5)


class LadderSerializer(SectionSerializer):
    n_rungs = serializers.IntegerField(min_value=1, default=5)
    rung_scale = serializers.FloatField(default=1.0)
    max_scale_halvings = serializers.IntegerField(min_value=0, default=2)
    # Rung logarithms use alpha_factor x the registration alpha.
    alpha_factor = serializers.FloatField(default=0.01)

    def validate_rung_scale(self, value):
        if not 0 < value <= 1:
            raise serializers.ValidationError("rung_scale must lie in (0, 1]")
        return value

    def validate_alpha_factor(self, value):
        if value <= 0:
            raise serializers.ValidationError("alpha_factor must be positive")
        return value


class TransportSerializer(SectionSerializer):
    ef_tolerance = serializers.FloatField(min_value=0.0, default=0.005)


class SplineSerializer(SectionSerializer):
    # Unset means the smallest multiple of (frames - 1) that is at least 10.
    n_steps = serializers.IntegerField(min_value=1, required=False, allow_null=True, default=None)
    fit_forces = serializers.BooleanField(default=True)


class StatsSerializer(SectionSerializer):
    alpha = serializers.FloatField(default=0.05)
    control_group = serializers.CharField(default="Control")

    def validate_alpha(self, value):
        if not 0 < value < 1:
            raise serializers.ValidationError("alpha must lie in (0, 1)")
        return value


class OptimSerializer(SectionSerializer):
    max_iters = serializers.IntegerField(min_value=0, default=200)
    initial_step = serializers.FloatField(default=1.0)
    backtracking = serializers.FloatField(default=0.5)
    rel_tol = serializers.FloatField(min_value=0.0, default=1e-10)
    grad_tol = serializers.FloatField(min_value=0.0, default=1e-10)
    max_backtracks = serializers.IntegerField(min_value=1, default=40)

    def validate(self, attrs):
        if attrs["initial_step"] <= 0:
            raise serializers.ValidationError({"initial_step": "initial_step must be positive"})
        if not 0 < attrs["backtracking"] < 1:
            raise serializers.ValidationError({"backtracking": "backtracking must lie in (0, 1)"})
        return attrs


class OptimStagesSerializer(SectionSerializer):
    registration = OptimSerializer(required=False)
    atlas = OptimSerializer(required=False)
    control_points = OptimSerializer(required=False)
    ladder = OptimSerializer(required=False)
    spline = OptimSerializer(required=False)


# Synthetic cohort
class SynthGroupSerializer(SectionSerializer):
    count = serializers.IntegerField(min_value=0)
    planted_points = serializers.IntegerField(min_value=0, default=0)
    offset = serializers.FloatField(default=0.0)


class SynthSerializer(SectionSerializer):
    groups = serializers.DictField(child=SynthGroupSerializer(), default=dict)
    n_frames = serializers.IntegerField(min_value=2, default=4)
    subdivisions = serializers.IntegerField(min_value=0, max_value=4, default=2)
    radius = serializers.FloatField(default=25.0)
    depth = serializers.FloatField(default=45.0)
    base_height = serializers.FloatField(default=8.0)
    ef_range = serializers.ListField(child=serializers.FloatField(), default=lambda: [0.35, 0.55])
    volume_range = serializers.ListField(child=serializers.FloatField(), default=lambda: [0.5, 2.0])
    shape_variation = serializers.FloatField(min_value=0.0, default=0.02)
    force_scale = serializers.FloatField(min_value=0.0, default=0.05)
    max_rotation = serializers.FloatField(min_value=0.0, default=10.0)
    max_translation = serializers.FloatField(min_value=0.0, default=5.0)
    generator_points = serializers.IntegerField(min_value=1, default=27)
    format = serializers.ChoiceField(choices=["vtk", "off"], default="vtk")

    def _check_range(self, value, low, high, name):
        if len(value) != 2 or not low <= value[0] <= value[1] <= high:
            raise serializers.ValidationError(f"{name} must be [min, max] within [{low}, {high}]")
        return value

    def validate_ef_range(self, value):
        return self._check_range(value, 0.0, 0.95, "ef_range")

    def validate_volume_range(self, value):
        return self._check_range(value, 1e-3, 1e3, "volume_range")

    def validate(self, attrs):
        for name in ("radius", "depth", "base_height"):
            if attrs[name] <= 0:
                raise serializers.ValidationError({name: f"{name} must be positive"})
        return attrs


class PipelineConfigSerializer(SectionSerializer):
    seed = serializers.IntegerField(required=False, allow_null=True, default=None)
    manifest = serializers.CharField(required=False, allow_null=True, default=None)
    output = serializers.CharField(required=False, allow_null=True, default=None)
    workers = serializers.IntegerField(min_value=1, required=False, allow_null=True, default=None)
    kernel = KernelSerializer(required=False)
    control_points = ControlPointsSerializer(required=False)
    integrator = IntegratorSerializer(required=False)
    registration = RegistrationSerializer(required=False)
    atlas = AtlasSerializer(required=False)
    ladder = LadderSerializer(required=False)
    transport = TransportSerializer(required=False)
    spline = SplineSerializer(required=False)
    stats = StatsSerializer(required=False)
    optim = OptimStagesSerializer(required=False)
    synth = SynthSerializer(required=False)


# Cohort manifest
class ManifestRowSerializer(SectionSerializer):
    subject_id = serializers.CharField()
    group = serializers.CharField()
    ed_index = serializers.IntegerField(min_value=0)
    es_index = serializers.IntegerField(min_value=0)
    frames = serializers.CharField()

    def validate_frames(self, value):
        frames = [frame.strip() for frame in value.split(";") if frame.strip()]
        if len(frames) < 2:
            raise serializers.ValidationError("a subject needs at least two frames")
        return frames

    def validate(self, attrs):
        if attrs["ed_index"] == attrs["es_index"]:
            raise serializers.ValidationError({"es_index": "ED and ES frames must differ"})
        for name in ("ed_index", "es_index"):
            if attrs[name] >= len(attrs["frames"]):
                raise serializers.ValidationError({name: "frame index out of range"})
        return attrs
