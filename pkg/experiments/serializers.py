from pathlib import Path

from rest_framework import serializers

from samplers.chains import DEFAULT_INIT_SCALE
from utils import (
    parse_architecture,
    parse_range,
    validate_decay_factor,
    validate_non_negative,
    validate_positive_number,
)
from .config import (
    CONJUGATE_METHODS,
    EXPERIMENTS,
    HMC_EXPERIMENTS,
    METHODS,
    REGRESSION_EXPERIMENTS,
    ExperimentConfig,
)
from .models import ExperimentRun

# (input width, output width) of the teacher each experiment can train
EXPERIMENT_WIDTHS = {
    "toy2d": (2, 2),
    "toy1d": (1, 1),
    "mnist": (784, 10),
    "conjugate-check": (1, 1),
}

GENERATORS = ("uniform_box", "perturb_train")
DISTILL_MODES = ("joint", "finished_chain")


def validate_range(value):
    parse_range(value)


def _optional_float(*validators, **kwargs):
    return serializers.FloatField(required=False, allow_null=True, default=None, validators=list(validators), **kwargs)


def _optional_path():
    return serializers.CharField(required=False, allow_blank=True, default="")


class ExperimentConfigSerializer(serializers.Serializer):
    """Validates the flat <section>_<key> settings of one experiment config file."""

    # [experiment]
    experiment_name = serializers.ChoiceField(
        choices=EXPERIMENTS,
        error_messages={
            'required': 'Experiment name is required.',
            'invalid_choice': f'"{{input}}" is not an experiment. Choose one of: {", ".join(EXPERIMENTS)}.',
        }
    )
    experiment_method = serializers.ChoiceField(
        choices=METHODS,
        error_messages={
            'required': 'Method is required.',
            'invalid_choice': f'"{{input}}" is not a method. Choose one of: {", ".join(METHODS)}.',
        }
    )
    experiment_seed = serializers.IntegerField(min_value=0, default=0)
    experiment_n_trials = serializers.IntegerField(
        min_value=1,
        default=1,
        error_messages={'min_value': 'An experiment needs at least one trial.'}
    )
    experiment_out = _optional_path()
    experiment_workers = serializers.IntegerField(min_value=1, default=1)
    experiment_source = serializers.CharField(required=False, allow_blank=True, default="")
    experiment_scale = serializers.CharField(required=False, allow_blank=True, default="")

    # [teacher]
    teacher_arch = serializers.CharField(
        validators=[parse_architecture],
        error_messages={'required': 'Teacher architecture is required, e.g. 2-10-2.'}
    )
    teacher_eta = _optional_float(validate_positive_number)
    teacher_eta_decay = serializers.FloatField(default=1.0, validators=[validate_decay_factor])
    teacher_eta_every = serializers.IntegerField(min_value=0, default=0)
    teacher_iterations = serializers.IntegerField(min_value=1, required=False, allow_null=True, default=None)
    teacher_burn_in = serializers.IntegerField(min_value=0, default=0)
    teacher_thin = serializers.IntegerField(min_value=1, default=1)
    teacher_batch_size = serializers.IntegerField(min_value=1, default=1)
    teacher_prior_precision = serializers.FloatField(default=1.0, validators=[validate_non_negative])
    teacher_noise_precision = _optional_float(validate_positive_number)
    teacher_chains = serializers.IntegerField(min_value=1, default=1)
    teacher_init_scale = serializers.FloatField(default=DEFAULT_INIT_SCALE, validators=[validate_positive_number])

    # [student]
    student_arch = serializers.CharField(required=False, allow_blank=True, default="", validators=[parse_architecture])
    student_rho = _optional_float(validate_positive_number)
    student_rho_decay = serializers.FloatField(default=1.0, validators=[validate_decay_factor])
    student_rho_every = serializers.IntegerField(min_value=0, default=0)
    student_gamma = serializers.FloatField(default=0.0, validators=[validate_non_negative])
    student_batch_size = serializers.IntegerField(min_value=1, default=1)
    student_iterations = serializers.IntegerField(min_value=0, required=False, allow_null=True, default=None)
    student_generator = serializers.ChoiceField(choices=GENERATORS, default="uniform_box")
    student_box = serializers.CharField(default="-10:10", validators=[validate_range])
    student_sigma = serializers.FloatField(default=0.0, validators=[validate_non_negative])
    student_history_every = serializers.IntegerField(min_value=1, default=100)
    student_mode = serializers.ChoiceField(choices=DISTILL_MODES, default="joint")
    student_init_scale = serializers.FloatField(default=DEFAULT_INIT_SCALE, validators=[validate_positive_number])

    # [hmc]
    hmc_step_size = serializers.FloatField(default=0.02, validators=[validate_positive_number])
    hmc_leapfrog_steps = serializers.IntegerField(min_value=1, default=50)
    hmc_samples = serializers.IntegerField(min_value=1, default=2000)
    hmc_burn_in = serializers.IntegerField(min_value=0, default=500)
    hmc_thin = serializers.IntegerField(min_value=1, default=1)
    hmc_reference = serializers.BooleanField(default=True)

    # [eval]
    eval_grid_range = serializers.CharField(default="-10:10", validators=[validate_range])
    eval_grid_resolution = serializers.IntegerField(min_value=2, default=100)
    eval_reference = _optional_path()
    eval_band_range = serializers.CharField(default="-6:6", validators=[validate_range])
    eval_band_points = serializers.IntegerField(min_value=3, default=121)

    # [data]
    data_seed = serializers.IntegerField(min_value=0, required=False, allow_null=True, default=None)
    data_points_per_class = serializers.IntegerField(min_value=1, default=10)
    data_n_points = serializers.IntegerField(min_value=1, default=20)
    data_test_points = serializers.IntegerField(min_value=2, default=1000)
    data_true_mean = serializers.FloatField(default=1.0)
    data_path = _optional_path()
    data_target_column = serializers.CharField(default="-1")
    data_train_n = serializers.IntegerField(min_value=1, required=False, allow_null=True, default=None)
    data_test_n = serializers.IntegerField(min_value=1, required=False, allow_null=True, default=None)
    data_standardize_targets = serializers.BooleanField(default=True)
    data_images = _optional_path()
    data_labels = _optional_path()
    data_test_images = _optional_path()
    data_test_labels = _optional_path()
    data_subset = serializers.IntegerField(min_value=1, required=False, allow_null=True, default=None)
    data_test_subset = serializers.IntegerField(min_value=1, required=False, allow_null=True, default=None)
    data_valid_n = serializers.IntegerField(min_value=0, default=10000)

    def validate(self, attrs):
        unknown = sorted(set(self.initial_data) - set(self.fields))
        if unknown:
            raise serializers.ValidationError({unknown[0]: 'Unknown setting.'})

        experiment = attrs["experiment_name"]
        method = attrs["experiment_method"]

        if method == "hmc" and experiment not in HMC_EXPERIMENTS:
            raise serializers.ValidationError({
                "experiment_method": f'hmc is only available for {", ".join(HMC_EXPERIMENTS)}.'
            })
        if experiment == "conjugate-check" and method not in CONJUGATE_METHODS:
            raise serializers.ValidationError({
                "experiment_method": "conjugate-check runs the sgld or hmc samplers only."
            })

        needs_chain = method in ("sgd", "sgld", "distill")
        for key in ("teacher_eta", "teacher_iterations"):
            if needs_chain and attrs.get(key) is None:
                raise serializers.ValidationError({key: f'Required for the {method} method.'})
        if needs_chain and attrs["teacher_burn_in"] >= attrs["teacher_iterations"]:
            raise serializers.ValidationError({"teacher_burn_in": 'Burn-in must be shorter than the chain.'})

        if method == "distill":
            if not attrs["student_arch"]:
                raise serializers.ValidationError({"student_arch": 'Required for the distill method.'})
            if attrs.get("student_rho") is None:
                raise serializers.ValidationError({"student_rho": 'Required for the distill method.'})

        if experiment in REGRESSION_EXPERIMENTS and attrs.get("teacher_noise_precision") is None:
            raise serializers.ValidationError({"teacher_noise_precision": 'Required for regression experiments.'})

        if experiment == "boston":
            for key in ("data_path", "data_train_n", "data_test_n"):
                if not attrs.get(key):
                    raise serializers.ValidationError({key: 'Required for the boston experiment.'})
        if experiment == "mnist":
            for key in ("data_images", "data_labels"):
                if not attrs.get(key):
                    raise serializers.ValidationError({key: 'Required for the mnist experiment.'})
            if bool(attrs["data_test_images"]) != bool(attrs["data_test_labels"]):
                raise serializers.ValidationError({"data_test_labels": 'Test images and labels go together.'})
            if not attrs["data_test_images"] and attrs["data_valid_n"] == 0:
                raise serializers.ValidationError({"data_valid_n": 'Without test files the validation split is evaluated.'})

        self._validate_widths(attrs)
        return attrs

    def _validate_widths(self, attrs):
        experiment = attrs["experiment_name"]
        teacher = parse_architecture(attrs["teacher_arch"])
        expected = EXPERIMENT_WIDTHS.get(experiment)
        if expected is not None and (teacher[0], teacher[-1]) != expected:
            raise serializers.ValidationError({
                "teacher_arch": f'{experiment} needs a {expected[0]}-...-{expected[1]} teacher.'
            })
        if experiment in REGRESSION_EXPERIMENTS and teacher[-1] != 1:
            raise serializers.ValidationError({"teacher_arch": 'Regression teachers have one output.'})
        if experiment == "conjugate-check" and teacher != (1, 1):
            raise serializers.ValidationError({"teacher_arch": 'conjugate-check uses the 1-1 network.'})

        if attrs["experiment_method"] != "distill":
            return
        student = parse_architecture(attrs["student_arch"])
        if student[0] != teacher[0]:
            raise serializers.ValidationError({"student_arch": 'Student and teacher must read the same inputs.'})
        expected_out = 2 if experiment in REGRESSION_EXPERIMENTS else teacher[-1]
        if student[-1] != expected_out:
            raise serializers.ValidationError({
                "student_arch": f'Student needs {expected_out} outputs for {experiment}.'
            })

    def create(self, validated_data):
        data = dict(validated_data)
        out = data.pop("experiment_out")
        return ExperimentConfig(
            experiment=data.pop("experiment_name"),
            method=data.pop("experiment_method"),
            seed=data.pop("experiment_seed"),
            n_trials=data.pop("experiment_n_trials"),
            output_dir=Path(out) if out else None,
            workers=data.pop("experiment_workers"),
            source=data.pop("experiment_source"),
            scale=data.pop("experiment_scale"),
            options=data,
        )


class ExperimentRunSerializer(serializers.ModelSerializer):
    class Meta:
        model = ExperimentRun
        fields = "__all__"
        read_only_fields = [field.name for field in ExperimentRun._meta.fields]
