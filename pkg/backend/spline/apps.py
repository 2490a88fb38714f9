from django.apps import AppConfig


class SplineConfig(AppConfig):
    default_auto_field = "django.db.models.BigAutoField"
    name = "spline"
