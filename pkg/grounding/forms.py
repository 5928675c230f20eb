from django import forms
from django.core.exceptions import ValidationError

from .exceptions import ConfigError
from .fusion import RegInitMode
from .losses import LossConfig
from .model import ModelConfig
from .synthetic import GeneratorConfig
from .training import Schedule

TRUE_WORDS = {'on', 'true', 'yes', '1'}
FALSE_WORDS = {'off', 'false', 'no', '0'}


class SwitchField(forms.Field):
    """A boolean written as on/off, true/false, yes/no or 1/0."""

    def to_python(self, value):
        if isinstance(value, bool):
            return value
        word = str(value).strip().lower()
        if word in TRUE_WORDS:
            return True
        if word in FALSE_WORDS:
            return False
        raise ValidationError(f"'{value}' is not a switch value; use on or off.")

    def validate(self, value):
        # False is a legitimate value, so the base `required` check does not apply.
        pass


class KeyValueForm(forms.Form):
    """Base for flat key=value configuration files."""

    @classmethod
    def defaults(cls):
        return {name: field.initial for name, field in cls.base_fields.items()}

    @classmethod
    def bind(cls, values, source='configuration'):
        unknown = sorted(set(values) - set(cls.base_fields))
        if unknown:
            raise ConfigError(f"{source}: unknown key '{unknown[0]}'")
        return cls(data={**cls.defaults(), **values})

    def cleaned_or_raise(self, source='configuration'):
        if not self.is_valid():
            problems = '; '.join(
                f"{key}: {' '.join(messages)}" if key != '__all__' else ' '.join(messages)
                for key, messages in self.errors.items()
            )
            raise ConfigError(f"{source}: {problems}")
        return self.cleaned_data


class RunConfigForm(KeyValueForm):
    # Model
    image_size = forms.IntegerField(initial=64, min_value=8, help_text="Square input side in pixels.")
    stem_layers = forms.IntegerField(initial=3, min_value=1, help_text="Stride-2 convolutions; total stride S = 2**stem_layers.")
    stem_width = forms.IntegerField(initial=16, min_value=1, help_text="Channels of the first stem convolution, doubled per layer.")
    visual_dim = forms.IntegerField(initial=32, min_value=4, help_text="C_v, visual token width.")
    visual_layers = forms.IntegerField(initial=2, min_value=0, help_text="Visual transformer depth.")
    visual_heads = forms.IntegerField(initial=2, min_value=1, help_text="Visual transformer heads.")
    visual_transformer = SwitchField(initial='on', help_text="Run the visual transformer after the stem.")
    text_dim = forms.IntegerField(initial=64, min_value=1, help_text="C_l, linguistic token width.")
    text_layers = forms.IntegerField(initial=2, min_value=0, help_text="Linguistic transformer depth.")
    text_heads = forms.IntegerField(initial=2, min_value=1, help_text="Linguistic transformer heads.")
    linguistic_transformer = SwitchField(initial='on', help_text="Run the linguistic transformer after the embedding.")
    max_text_len = forms.IntegerField(initial=40, min_value=3, help_text="N_l, token slots including [CLS] and [SEP].")
    fusion_dim = forms.IntegerField(initial=32, min_value=1, help_text="C_p, joint token width.")
    vl_layers = forms.IntegerField(initial=2, min_value=0, help_text="V-L transformer depth; 0 regresses from the pooled joint sequence.")
    vl_heads = forms.IntegerField(initial=2, min_value=1, help_text="V-L transformer heads.")
    vl_per_layer_positions = SwitchField(initial='off', help_text="Separate joint positional table per V-L layer.")
    ffn_ratio = forms.IntegerField(initial=4, min_value=1, help_text="Feed-forward width as a multiple of the model width.")
    dropout = forms.FloatField(initial=0.1, min_value=0.0, max_value=0.99, help_text="Dropout after attention and inside the FFN.")
    reg_init = forms.ChoiceField(initial=RegInitMode.LEARNABLE.value, choices=RegInitMode.choices(), help_text="Initial state of the [REG] token.")
    pos_temperature = forms.FloatField(initial=10000.0, min_value=1.0, help_text="Temperature of the 2-D sine encodings.")
    # Loss
    giou_weight = forms.FloatField(initial=1.0, min_value=0.0, help_text="λ, weight of the 1 - GIoU term.")
    smooth_l1_beta = forms.FloatField(initial=1.0, help_text="Transition point of the smooth-L1 loss.")
    # Schedule and optimizer
    epochs = forms.IntegerField(initial=40, min_value=1, help_text="Total training epochs.")
    drop_epoch = forms.IntegerField(initial=30, min_value=0, help_text="0-based epoch from which rates are divided by drop_factor.")
    drop_factor = forms.FloatField(initial=10.0, help_text="Learning-rate drop factor.")
    lr_fusion = forms.FloatField(initial=1e-3, help_text="Base rate of the V-L module and prediction head.")
    lr_branch = forms.FloatField(initial=1e-3, help_text="Base rate of the visual and linguistic branches.")
    weight_decay = forms.FloatField(initial=1e-4, min_value=0.0, help_text="Decoupled AdamW weight decay.")
    batch_size = forms.IntegerField(initial=32, min_value=1, help_text="Samples per optimizer step.")
    grad_clip = forms.FloatField(initial=0.0, min_value=0.0, help_text="Global L2 gradient norm limit; 0 disables clipping.")
    # Data
    train_dir = forms.CharField(initial='data/train', help_text="Training dataset directory.")
    val_dir = forms.CharField(initial='data/val', help_text="Validation dataset directory.")
    seed = forms.IntegerField(initial=0, min_value=0, help_text="Seed for initialization, shuffling and dropout.")

    def clean(self):
        cleaned_data = super().clean()
        if self.errors:
            return cleaned_data
        try:
            model_config(cleaned_data)
            loss_config(cleaned_data)
            schedule(cleaned_data)
        except ConfigError as e:
            raise ValidationError(str(e)) from e
        return cleaned_data


class GeneratorConfigForm(KeyValueForm):
    image_size = forms.IntegerField(initial=64, min_value=32, help_text="Rendered image side in pixels.")
    num_shapes_min = forms.IntegerField(initial=2, min_value=1, help_text="Fewest shapes per scene.")
    num_shapes_max = forms.IntegerField(initial=5, min_value=1, help_text="Most shapes per scene.")
    relational_prob = forms.FloatField(initial=0.5, min_value=0.0, max_value=1.0, help_text="Probability of a relational expression.")
    count = forms.IntegerField(initial=2000, min_value=1, help_text="Total samples across train and val.")
    val_fraction = forms.FloatField(initial=0.1, min_value=0.0, max_value=0.99, help_text="Share of samples in the val split.")
    seed = forms.IntegerField(initial=0, min_value=0, help_text="Base seed; splits draw from disjoint ranges.")

    def clean(self):
        cleaned_data = super().clean()
        if self.errors:
            return cleaned_data
        try:
            GeneratorConfig(**cleaned_data)
        except ConfigError as e:
            raise ValidationError(str(e)) from e
        return cleaned_data


MODEL_KEYS = tuple(ModelConfig.__dataclass_fields__)
SCHEDULE_KEYS = {'lr_fusion': 'lr_fusion', 'lr_branch': 'lr_branch', 'drop_epoch': 'drop_epoch',
                 'drop_factor': 'drop_factor', 'epochs': 'total_epochs'}


def model_config(cleaned_data):
    return ModelConfig(**{key: cleaned_data[key] for key in MODEL_KEYS})


def loss_config(cleaned_data):
    return LossConfig(giou_weight=cleaned_data['giou_weight'], smooth_l1_beta=cleaned_data['smooth_l1_beta'])


def schedule(cleaned_data):
    return Schedule(**{attr: cleaned_data[key] for key, attr in SCHEDULE_KEYS.items()})
