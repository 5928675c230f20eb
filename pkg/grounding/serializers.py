import math

from rest_framework import serializers

from .synthetic import ATTRIBUTE, RELATIONAL


class BoxField(serializers.ListField):
    """A normalized center-form box [cx, cy, w, h]."""

    def __init__(self, **kwargs):
        super().__init__(child=serializers.FloatField(), min_length=4, max_length=4, **kwargs)

    def to_internal_value(self, data):
        box = super().to_internal_value(data)
        if not all(math.isfinite(v) for v in box):
            raise serializers.ValidationError("Box coordinates must be finite.")
        if box[2] < 0 or box[3] < 0:
            raise serializers.ValidationError("Box width and height cannot be negative.")
        return box


class SampleRecordSerializer(serializers.Serializer):
    """
    One line of samples.jsonl.
    The image path is relative to the dataset directory.
    """
    id = serializers.CharField(max_length=128)
    image = serializers.CharField()
    expression = serializers.CharField(allow_blank=True, trim_whitespace=False)
    box = BoxField()
    template = serializers.ChoiceField(choices=[ATTRIBUTE, RELATIONAL])
    referent = serializers.IntegerField(required=False, min_value=0)

    def validate_image(self, value):
        if value.startswith('/') or '..' in value.split('/'):
            raise serializers.ValidationError("Image path must stay inside the dataset directory.")
        return value


class PredictionRecordSerializer(serializers.Serializer):
    """One line of predictions.jsonl: {id, pred, gt} plus an optional template."""
    id = serializers.CharField(max_length=128)
    pred = BoxField()
    gt = BoxField()
    template = serializers.CharField(required=False, allow_blank=True)
