from django.apps import AppConfig


class GroundingConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'grounding'
    verbose_name = 'Visual grounding'
